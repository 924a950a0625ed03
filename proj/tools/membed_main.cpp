// membed: synthetic data generation, two-stage embedding training, exact-kNN
// evaluation, and checkpoint inspection/export, all from one binary.
//
// Subcommands: gen, split, train-stage1, train-stage2, eval, export, inspect.
// Config precedence for training runs is defaults < --config file < flags;
// the fully resolved configuration is echoed next to each primary output so
// any run can be reproduced from its artifacts alone.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "membed/checkpoint.hpp"
#include "membed/dataio.hpp"
#include "membed/errors.hpp"
#include "membed/retrieval.hpp"
#include "membed/trainer.hpp"

namespace {

using nlohmann::json;

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw membed::IoError("cannot open " + path + " for writing");
    f << text;
}

std::string read_text(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw membed::IoError("cannot open " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

// Flat key=value echo of whatever parameter set a subcommand resolved to.
void echo_resolved(const std::string& primary_output, const std::string& flat) {
    write_text(primary_output + ".resolved.cfg", flat);
}

std::string flat_from_json(const json& j) {
    std::ostringstream out;
    for (auto it = j.begin(); it != j.end(); ++it)
        out << it.key() << " = " << it.value().dump() << "\n";
    return out.str();
}

struct TrainCli {
    std::string data_path;
    std::string out_path;
    std::string report_path;
    std::string config_path;
    std::string from_checkpoint;
    std::vector<std::string> sets;  // generic key=value overrides
};

// Collects --config file contents and every flag-level override into one
// key=value map (later entries win), then applies it over the stage defaults.
membed::TrainConfig resolve_train_config(const TrainCli& cli, int stage,
                                         const std::map<std::string, std::string>& flag_kv) {
    membed::TrainConfig cfg =
        stage == 1 ? membed::stage1_defaults() : membed::stage2_defaults();
    if (!cli.config_path.empty())
        membed::apply_flat_overrides(cfg, membed::parse_flat_config(read_text(cli.config_path)));
    std::map<std::string, std::string> kv;
    for (const std::string& s : cli.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos)
            throw membed::ValueError("--set expects key=value, got: " + s);
        kv[s.substr(0, eq)] = s.substr(eq + 1);
    }
    for (const auto& [k, v] : flag_kv) kv[k] = v;
    membed::apply_flat_overrides(cfg, kv);
    cfg.stage = stage;
    return cfg;
}

void add_train_flags(CLI::App* cmd, TrainCli& cli,
                     std::map<std::string, std::string>& flag_kv) {
    cmd->add_option("--data", cli.data_path, "feature file (.mefs) to train on")->required();
    cmd->add_option("--out", cli.out_path, "checkpoint file (.meck) to write")->required();
    cmd->add_option("--report", cli.report_path, "write the training report JSON here");
    cmd->add_option("--config", cli.config_path, "flat key=value config file");
    cmd->add_option("--set", cli.sets, "override any config key, e.g. --set peak_lr=1e-4");

    // Dedicated spellings for the common knobs; all funnel into flag_kv so
    // precedence over the config file is uniform.
    const auto passthrough = [cmd, &flag_kv](const std::string& flag, const std::string& key,
                                             const std::string& help) {
        cmd->add_option_function<std::string>(
               flag, [&flag_kv, key](const std::string& v) { flag_kv[key] = v; }, help);
    };
    passthrough("--epochs", "epochs", "nominal epoch count");
    passthrough("--batch", "batch_size", "batch size");
    passthrough("--divisor", "steps_per_epoch_divisor", "steps-per-epoch divisor");
    passthrough("--seed", "seed", "master seed for init/data/dropout streams");
    passthrough("--margin", "margin", "angular margin in radians");
    passthrough("--scale", "scale", "logit scale");
    passthrough("--subcenters", "subcenters", "weight rows per class");
    passthrough("--branches", "branches", "parallel head branches");
    passthrough("--embed-dim", "embed_dim", "embedding width (max 64)");
    passthrough("--peak-lr", "peak_lr", "schedule peak learning rate");
    passthrough("--schedule", "schedule", "constant | cosine_with_warmup");
    passthrough("--optimizer", "optimizer", "adam | sgd");
}

int cmd_gen(int classes, int per_class, int dim, double noise, std::uint64_t seed,
            const std::string& out) {
    const membed::FeatureSet fs =
        membed::generate_synthetic(classes, per_class, dim, noise, seed);
    const json provenance{{"generator", "synthetic-gaussian"},
                          {"classes", classes},
                          {"per_class", per_class},
                          {"dim", dim},
                          {"noise_sigma", noise},
                          {"seed", seed}};
    membed::write_feature_set(fs, out, &provenance);
    echo_resolved(out, flat_from_json(provenance));
    std::printf("wrote %s: %zu rows, dim %zu, %d classes\n", out.c_str(), fs.size(),
                fs.dim(), fs.num_classes);
    return 0;
}

int cmd_split(const std::string& in, double fraction, std::uint64_t seed,
              const std::string& out_index, const std::string& out_queries,
              const std::string& report_path) {
    const membed::FeatureSet fs = membed::read_feature_set(in);
    const membed::SplitResult result = membed::split(fs, {fraction, seed});
    const json provenance{{"source", in}, {"query_fraction", fraction}, {"seed", seed}};
    membed::write_feature_set(result.index, out_index, &provenance);
    membed::write_feature_set(result.queries, out_queries, &provenance);
    if (!report_path.empty())
        write_text(report_path, membed::split_report_to_json(result.report).dump(2) + "\n");
    echo_resolved(out_index, flat_from_json(json{{"in", in},
                                                 {"query_fraction", fraction},
                                                 {"seed", seed},
                                                 {"out_index", out_index},
                                                 {"out_queries", out_queries}}));
    std::printf("split %s: %zu index rows -> %s, %zu query rows -> %s\n", in.c_str(),
                result.index.size(), out_index.c_str(), result.queries.size(),
                out_queries.c_str());
    return 0;
}

int cmd_train(const TrainCli& cli, int stage,
              const std::map<std::string, std::string>& flag_kv) {
    const membed::FeatureSet data = membed::read_feature_set(cli.data_path);
    membed::TrainConfig cfg = resolve_train_config(cli, stage, flag_kv);

    membed::ModelParts parts;
    const membed::RngStates* resume = nullptr;
    membed::RngStates resume_storage;
    if (stage == 1) {
        parts = membed::init_model(cfg, data);
    } else {
        membed::LoadedCheckpoint loaded = membed::load_checkpoint(cli.from_checkpoint);
        parts = std::move(loaded.parts);
        resume_storage = loaded.rng;
        resume = &resume_storage;
        // Model shape travels with the checkpoint; only training knobs are
        // overridable in stage 2.
        for (const char* key :
             {"branches", "embed_dim", "subcenters", "dropout_rates", "backbone_identity"}) {
            const bool in_flags = flag_kv.contains(key);
            bool in_sets = false;
            for (const std::string& s : cli.sets)
                in_sets |= s.rfind(std::string(key) + "=", 0) == 0;
            if (in_flags || in_sets)
                throw membed::ValueError(std::string("stage 2 takes '") + key +
                                         "' from the checkpoint; it cannot be overridden");
        }
        cfg.branches = loaded.config.branches;
        cfg.embed_dim = loaded.config.embed_dim;
        cfg.subcenters = loaded.config.subcenters;
        cfg.dropout_rates = loaded.config.dropout_rates;
        cfg.backbone_identity = loaded.config.backbone_identity;
        parts.arcface.scale = cfg.scale;
        parts.arcface.margin = cfg.margin;
        parts.arcface.easy_margin = cfg.easy_margin;
        parts.backbone.frozen = false;
    }

    const membed::TrainReport report = membed::run_stage(cfg, data, parts, resume);
    membed::save_checkpoint(cli.out_path, parts, report.config, report.final_rng);
    if (!cli.report_path.empty())
        write_text(cli.report_path, membed::report_to_json(report).dump(2) + "\n");
    echo_resolved(cli.out_path, membed::config_to_flat(report.config));

    std::printf(
        "stage %d: %lld steps (%llu data passes), eval loss %.6f -> %.6f, %.2fs, wrote %s\n",
        stage, static_cast<long long>(report.total_steps),
        static_cast<unsigned long long>(report.data_passes), report.initial_eval_loss,
        report.final_eval_loss, report.wall_seconds, cli.out_path.c_str());
    return 0;
}

// Embeds a feature set with a trained model (eval mode, backbone included),
// or passes features through unchanged when no checkpoint is given.
membed::Matrix embed_features(const membed::ModelParts* parts, const membed::Matrix& x) {
    if (!parts) return x;
    const membed::Matrix features = membed::backbone_forward(parts->backbone, x);
    return membed::head_forward(parts->head, features, membed::Mode::eval);
}

int cmd_eval(const std::string& index_path, const std::string& queries_path,
             const std::string& checkpoint_path, std::size_t k, const std::string& variant,
             bool score_unanswerable, const std::string& out_path) {
    const membed::FeatureSet index_fs = membed::read_feature_set(index_path);
    const membed::FeatureSet query_fs = membed::read_feature_set(queries_path);

    membed::ModelParts parts;
    const membed::ModelParts* model = nullptr;
    if (!checkpoint_path.empty()) {
        parts = membed::load_checkpoint(checkpoint_path).parts;
        model = &parts;
    }

    membed::EvalSpec spec;
    spec.k = k;
    spec.skip_unanswerable = !score_unanswerable;
    if (variant == "capped") {
        spec.variant = membed::PrecisionVariant::capped;
    } else if (variant == "plain") {
        spec.variant = membed::PrecisionVariant::plain;
    } else {
        throw membed::ValueError("eval: variant must be capped or plain, got " + variant);
    }

    const membed::RetrievalIndex index =
        membed::build_index(embed_features(model, index_fs.features), index_fs.labels);
    membed::FeatureSet queries;
    queries.features = embed_features(model, query_fs.features);
    queries.labels = query_fs.labels;
    queries.num_classes = query_fs.num_classes;

    const membed::EvalReport report = membed::mean_precision_at_k(index, queries, spec);
    const std::string rendered = membed::eval_report_to_json(report).dump(2) + "\n";
    if (!out_path.empty()) {
        write_text(out_path, rendered);
        echo_resolved(out_path,
                      flat_from_json(json{{"index", index_path},
                                          {"queries", queries_path},
                                          {"checkpoint", checkpoint_path},
                                          {"k", k},
                                          {"variant", variant},
                                          {"skip_unanswerable", spec.skip_unanswerable}}));
    } else {
        std::cout << rendered;
    }
    std::printf("mean precision@%zu: capped %.6f, plain %.6f (%zu queries, %zu skipped)\n",
                k, report.score_capped, report.score_plain,
                report.n_queries - report.skipped_queries, report.skipped_queries);
    return 0;
}

int cmd_inspect(const std::string& checkpoint_path) {
    const membed::CheckpointSummary summary = membed::inspect_checkpoint(checkpoint_path);
    std::printf("checkpoint %s\n", checkpoint_path.c_str());
    std::printf("  format version %u, stage %d\n", summary.version, summary.stage);
    std::printf("  crc32 0x%08x (%s)\n", summary.crc, summary.crc_ok ? "ok" : "MISMATCH");
    for (const auto& t : summary.tensors) {
        std::string shape;
        for (std::size_t i = 0; i < t.shape.size(); ++i)
            shape += (i ? "x" : "") + std::to_string(t.shape[i]);
        std::printf("  %-24s %-12s %llu values\n", t.name.c_str(), shape.c_str(),
                    static_cast<unsigned long long>(t.count));
    }
    return summary.crc_ok ? 0 : 3;
}

int cmd_export(const std::string& checkpoint_path, const std::string& out_dir) {
    membed::export_checkpoint(checkpoint_path, out_dir);
    echo_resolved((std::filesystem::path(out_dir) / "manifest.json").string(),
                  flat_from_json(json{{"checkpoint", checkpoint_path}, {"out_dir", out_dir}}));
    std::printf("exported %s -> %s\n", checkpoint_path.c_str(), out_dir.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"membed: multi-branch embedding training and retrieval evaluation"};
    app.require_subcommand(1);

    // gen
    int classes = 16, per_class = 20, dim = 64;
    double noise = 0.05;
    std::uint64_t gen_seed = 1;
    std::string gen_out;
    CLI::App* gen = app.add_subcommand("gen", "generate a synthetic labeled feature file");
    gen->add_option("--classes", classes, "number of classes (>= 2)");
    gen->add_option("--per-class", per_class, "samples per class");
    gen->add_option("--dim", dim, "feature dimension");
    gen->add_option("--noise", noise, "gaussian noise sigma around each unit-norm class mean");
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->add_option("--out", gen_out, "output feature file (.mefs)")->required();

    // split
    std::string split_in, split_out_index, split_out_queries, split_report;
    double split_fraction = 0.2;
    std::uint64_t split_seed = 0;
    CLI::App* split = app.add_subcommand("split", "split a feature file into index and queries");
    split->add_option("--in", split_in, "input feature file")->required();
    split->add_option("--fraction", split_fraction, "query fraction in (0,1)");
    split->add_option("--seed", split_seed, "shuffle seed");
    split->add_option("--out-index", split_out_index, "index partition output")->required();
    split->add_option("--out-queries", split_out_queries, "query partition output")->required();
    split->add_option("--report", split_report, "write the split report JSON here");

    // train-stage1 / train-stage2
    TrainCli s1, s2;
    std::map<std::string, std::string> s1_kv, s2_kv;
    CLI::App* t1 = app.add_subcommand("train-stage1",
                                      "head-only training on frozen features");
    add_train_flags(t1, s1, s1_kv);
    CLI::App* t2 = app.add_subcommand("train-stage2",
                                      "whole-model fine-tuning from a stage-1 checkpoint");
    add_train_flags(t2, s2, s2_kv);
    t2->add_option("--from-checkpoint", s2.from_checkpoint,
                   "stage-1 checkpoint to fine-tune (required)")
        ->required();

    // eval
    std::string eval_index, eval_queries, eval_checkpoint, eval_out;
    std::string eval_variant = "capped";
    std::size_t eval_k = 5;
    bool score_unanswerable = false;
    CLI::App* ev = app.add_subcommand("eval", "exact-kNN mean precision@k evaluation");
    ev->add_option("--index", eval_index, "index feature file")->required();
    ev->add_option("--queries", eval_queries, "query feature file")->required();
    ev->add_option("--checkpoint", eval_checkpoint,
                   "embed with this model (omit to evaluate raw features)");
    ev->add_option("--k", eval_k, "neighbors per query");
    ev->add_option("--variant", eval_variant, "capped | plain");
    ev->add_flag("--score-unanswerable", score_unanswerable,
                 "score queries whose label is absent from the index as 0 instead of skipping");
    ev->add_option("--out", eval_out, "write the evaluation report JSON here");

    // export / inspect
    std::string export_ckpt, export_dir, inspect_ckpt;
    CLI::App* ex = app.add_subcommand("export", "dump checkpoint tensors as raw .bin files");
    ex->add_option("--checkpoint", export_ckpt, "checkpoint to export")->required();
    ex->add_option("--out-dir", export_dir, "output directory")->required();
    CLI::App* in = app.add_subcommand("inspect", "print checkpoint tensor names and shapes");
    in->add_option("--checkpoint", inspect_ckpt, "checkpoint to inspect")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen(classes, per_class, dim, noise, gen_seed, gen_out);
        if (split->parsed())
            return cmd_split(split_in, split_fraction, split_seed, split_out_index,
                             split_out_queries, split_report);
        if (t1->parsed()) return cmd_train(s1, 1, s1_kv);
        if (t2->parsed()) return cmd_train(s2, 2, s2_kv);
        if (ev->parsed())
            return cmd_eval(eval_index, eval_queries, eval_checkpoint, eval_k, eval_variant,
                            score_unanswerable, eval_out);
        if (ex->parsed()) return cmd_export(export_ckpt, export_dir);
        if (in->parsed()) return cmd_inspect(inspect_ckpt);
    } catch (const membed::IoError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const membed::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
