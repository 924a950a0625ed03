#include "membed/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>

#include <nlohmann/json.hpp>

#include "membed/errors.hpp"

namespace membed {

double lr_at(const ScheduleSpec& sched, std::int64_t step) {
    if (step < 0) throw ValueError("lr_at: negative step");
    if (sched.kind == ScheduleKind::constant) return sched.peak_lr;

    if (sched.warmup_steps < 0 || sched.total_steps <= 0)
        throw ValueError("lr_at: cosine schedule has unresolved warmup/total steps");
    if (step > sched.total_steps) {
        std::fprintf(stderr, "warning: lr_at step %lld beyond schedule end %lld, clamping to min_lr\n",
                     static_cast<long long>(step), static_cast<long long>(sched.total_steps));
        return sched.min_lr;
    }
    if (sched.warmup_steps > 0 && step < sched.warmup_steps)
        return sched.peak_lr * double(step) / double(sched.warmup_steps);
    if (sched.total_steps <= sched.warmup_steps) return sched.min_lr;
    const double t = double(step - sched.warmup_steps) /
                     double(sched.total_steps - sched.warmup_steps);
    return sched.min_lr +
           0.5 * (sched.peak_lr - sched.min_lr) * (1.0 + std::cos(std::numbers::pi * t));
}

void AdamOptimizer::step(const std::string& name, double* param, const double* grad,
                         std::size_t count, double lr) {
    for (std::size_t i = 0; i < count; ++i)
        if (!std::isfinite(grad[i]))
            throw NonFiniteError("adam: non-finite gradient for " + name, name);

    Moments& slot = slots_[name];
    if (slot.m.empty()) {
        slot.m.assign(count, 0.0);
        slot.v.assign(count, 0.0);
    } else if (slot.m.size() != count) {
        throw DimensionError("adam: tensor " + name + " changed size");
    }

    slot.t += 1;
    const double bc1 = 1.0 - std::pow(hp_.beta1, double(slot.t));
    const double bc2 = 1.0 - std::pow(hp_.beta2, double(slot.t));
    for (std::size_t i = 0; i < count; ++i) {
        slot.m[i] = hp_.beta1 * slot.m[i] + (1.0 - hp_.beta1) * grad[i];
        slot.v[i] = hp_.beta2 * slot.v[i] + (1.0 - hp_.beta2) * grad[i] * grad[i];
        const double m_hat = slot.m[i] / bc1;
        const double v_hat = slot.v[i] / bc2;
        double update = m_hat / (std::sqrt(v_hat) + hp_.eps);
        if (hp_.bounded_update) update = std::clamp(update, -1.0, 1.0);
        param[i] -= lr * update;
    }
}

BatchStream::BatchStream(std::size_t n, std::size_t batch, Rng rng)
    : batch_(batch), pos_(n), rng_(rng) {
    if (n == 0) throw ValueError("BatchStream: empty dataset");
    if (batch == 0 || batch > n)
        throw ValueError("BatchStream: batch size must lie in [1, N]");
    perm_.resize(n);
    for (std::size_t i = 0; i < n; ++i) perm_[i] = i;
    current_.resize(batch);
}

const std::vector<std::size_t>& BatchStream::next() {
    if (pos_ + batch_ > perm_.size()) {
        for (std::size_t i = perm_.size(); i > 1; --i)
            std::swap(perm_[i - 1], perm_[rng_.below(i)]);
        pos_ = 0;
        ++passes_;
    }
    std::copy(perm_.begin() + pos_, perm_.begin() + pos_ + batch_, current_.begin());
    pos_ += batch_;
    return current_;
}

std::int64_t steps_per_epoch(std::size_t n, std::int64_t batch, std::int64_t divisor) {
    if (batch < 1 || divisor < 1)
        throw ValueError("steps_per_epoch: batch and divisor must be >= 1");
    const std::int64_t per_pass = static_cast<std::int64_t>(n) / batch;
    const std::int64_t steps = per_pass / divisor;
    if (steps < 1) {
        std::fprintf(stderr,
                     "warning: divisor %lld swallows all %lld batches per pass; running 1 step per epoch\n",
                     static_cast<long long>(divisor), static_cast<long long>(per_pass));
        return 1;
    }
    return steps;
}

TrainConfig stage1_defaults() {
    TrainConfig cfg;
    cfg.stage = 1;
    cfg.epochs = 200;
    cfg.margin = 0.3;
    cfg.schedule = ScheduleSpec{ScheduleKind::cosine_with_warmup, 1e-3, 0.0, -1, 0};
    return cfg;
}

TrainConfig stage2_defaults() {
    TrainConfig cfg;
    cfg.stage = 2;
    cfg.epochs = 10;
    cfg.margin = 0.5;
    cfg.schedule = ScheduleSpec{ScheduleKind::constant, 1e-6, 0.0, -1, 0};
    return cfg;
}

namespace {

const char* schedule_name(ScheduleKind kind) {
    return kind == ScheduleKind::constant ? "constant" : "cosine_with_warmup";
}

ScheduleKind schedule_from_name(const std::string& name) {
    if (name == "constant") return ScheduleKind::constant;
    if (name == "cosine_with_warmup") return ScheduleKind::cosine_with_warmup;
    throw ValueError("unknown schedule kind: " + name);
}

const char* optimizer_name(OptimizerKind kind) {
    return kind == OptimizerKind::adam ? "adam" : "sgd";
}

OptimizerKind optimizer_from_name(const std::string& name) {
    if (name == "adam") return OptimizerKind::adam;
    if (name == "sgd") return OptimizerKind::sgd;
    throw ValueError("unknown optimizer kind: " + name);
}

}  // namespace

nlohmann::json config_to_json(const TrainConfig& cfg) {
    return nlohmann::json{
        {"stage", cfg.stage},
        {"epochs", cfg.epochs},
        {"steps_per_epoch_divisor", cfg.steps_per_epoch_divisor},
        {"batch_size", cfg.batch_size},
        {"schedule", schedule_name(cfg.schedule.kind)},
        {"peak_lr", cfg.schedule.peak_lr},
        {"min_lr", cfg.schedule.min_lr},
        {"warmup_steps", cfg.schedule.warmup_steps},
        {"total_steps", cfg.schedule.total_steps},
        {"optimizer", optimizer_name(cfg.optimizer)},
        {"beta1", cfg.adam.beta1},
        {"beta2", cfg.adam.beta2},
        {"adam_eps", cfg.adam.eps},
        {"bounded_update", cfg.adam.bounded_update},
        {"scale", cfg.scale},
        {"margin", cfg.margin},
        {"subcenters", cfg.subcenters},
        {"easy_margin", cfg.easy_margin},
        {"branches", cfg.branches},
        {"embed_dim", cfg.embed_dim},
        {"dropout_rates", cfg.dropout_rates},
        {"seed", cfg.seed},
        {"backbone_identity", cfg.backbone_identity},
    };
}

TrainConfig config_from_json(const nlohmann::json& j) {
    TrainConfig cfg;
    cfg.stage = j.at("stage").get<int>();
    cfg.epochs = j.at("epochs").get<std::int64_t>();
    cfg.steps_per_epoch_divisor = j.at("steps_per_epoch_divisor").get<std::int64_t>();
    cfg.batch_size = j.at("batch_size").get<std::int64_t>();
    cfg.schedule.kind = schedule_from_name(j.at("schedule").get<std::string>());
    cfg.schedule.peak_lr = j.at("peak_lr").get<double>();
    cfg.schedule.min_lr = j.at("min_lr").get<double>();
    cfg.schedule.warmup_steps = j.at("warmup_steps").get<std::int64_t>();
    cfg.schedule.total_steps = j.at("total_steps").get<std::int64_t>();
    cfg.optimizer = optimizer_from_name(j.at("optimizer").get<std::string>());
    cfg.adam.beta1 = j.at("beta1").get<double>();
    cfg.adam.beta2 = j.at("beta2").get<double>();
    cfg.adam.eps = j.at("adam_eps").get<double>();
    cfg.adam.bounded_update = j.at("bounded_update").get<bool>();
    cfg.scale = j.at("scale").get<double>();
    cfg.margin = j.at("margin").get<double>();
    cfg.subcenters = j.at("subcenters").get<int>();
    cfg.easy_margin = j.at("easy_margin").get<bool>();
    cfg.branches = j.at("branches").get<int>();
    cfg.embed_dim = j.at("embed_dim").get<int>();
    cfg.dropout_rates = j.at("dropout_rates").get<std::vector<double>>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.backbone_identity = j.at("backbone_identity").get<bool>();
    return cfg;
}

std::string config_to_flat(const TrainConfig& cfg) {
    const nlohmann::json j = config_to_json(cfg);
    std::ostringstream out;
    for (auto it = j.begin(); it != j.end(); ++it)
        out << it.key() << " = " << it.value().dump() << "\n";
    return out.str();
}

std::map<std::string, std::string> parse_flat_config(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const auto strip = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            if (b == std::string::npos) return std::string();
            const auto e = s.find_last_not_of(" \t\r");
            return s.substr(b, e - b + 1);
        };
        if (strip(line).empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ValueError("config line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = strip(line.substr(0, eq));
        const std::string value = strip(line.substr(eq + 1));
        if (key.empty() || value.empty())
            throw ValueError("config line " + std::to_string(lineno) + ": empty key or value");
        kv[key] = value;
    }
    return kv;
}

void apply_flat_overrides(TrainConfig& cfg, const std::map<std::string, std::string>& kv) {
    nlohmann::json j = config_to_json(cfg);
    for (const auto& [key, value] : kv) {
        if (!j.contains(key)) throw ValueError("unknown config key: " + key);
        nlohmann::json parsed = nlohmann::json::parse(value, nullptr, false);
        if (parsed.is_discarded()) parsed = value;  // bare strings (e.g. adam)
        j[key] = parsed;
    }
    cfg = config_from_json(j);
}

ModelParts init_model(const TrainConfig& cfg, const FeatureSet& data) {
    ModelParts parts;
    const int dim = static_cast<int>(data.dim());
    std::vector<double> rates =
        cfg.dropout_rates.empty() ? default_dropout_rates(cfg.branches) : cfg.dropout_rates;
    parts.head = init_head(dim, cfg.branches, cfg.embed_dim, rates, cfg.seed);
    parts.arcface = init_arcface(data.num_classes, cfg.subcenters, cfg.embed_dim,
                                 cfg.scale, cfg.margin, cfg.seed + 1);
    parts.arcface.easy_margin = cfg.easy_margin;
    parts.backbone = cfg.backbone_identity ? init_backbone_identity(dim)
                                           : init_backbone(dim, dim, cfg.seed + 2);
    parts.backbone.frozen = cfg.stage == 1;
    return parts;
}

namespace {

// Flattened view over every trainable tensor, used for delta norms.
std::vector<double> snapshot(const ModelParts& parts) {
    std::vector<double> flat;
    for (const auto& w : parts.head.weights)
        flat.insert(flat.end(), w.data(), w.data() + w.size());
    for (const auto& b : parts.head.biases) flat.insert(flat.end(), b.begin(), b.end());
    const Matrix& aw = parts.arcface.weight;
    flat.insert(flat.end(), aw.data(), aw.data() + aw.size());
    const Matrix& bw = parts.backbone.weight;
    flat.insert(flat.end(), bw.data(), bw.data() + bw.size());
    flat.insert(flat.end(), parts.backbone.bias.begin(), parts.backbone.bias.end());
    return flat;
}

}  // namespace

TrainReport run_stage(const TrainConfig& cfg, const FeatureSet& data, ModelParts& parts,
                      const RngStates* resume) {
    validate_feature_set(data);
    if (cfg.stage != 1 && cfg.stage != 2) throw ValueError("run_stage: stage must be 1 or 2");
    if (cfg.epochs < 0) throw ValueError("run_stage: negative epoch count");
    const auto t_start = std::chrono::steady_clock::now();

    TrainConfig resolved = cfg;
    const std::int64_t spe =
        steps_per_epoch(data.size(), cfg.batch_size, cfg.steps_per_epoch_divisor);
    const std::int64_t total_steps = cfg.epochs * spe;
    if (resolved.schedule.total_steps == 0) resolved.schedule.total_steps = total_steps;
    if (resolved.schedule.warmup_steps < 0)
        resolved.schedule.warmup_steps =
            static_cast<std::int64_t>(std::llround(0.05 * double(resolved.schedule.total_steps)));

    const bool train_backbone = cfg.stage == 2;
    parts.backbone.frozen = !train_backbone;

    Rng data_rng(cfg.seed, Rng::kStreamData);
    Rng dropout_rng(cfg.seed, Rng::kStreamDropout);
    if (resume) {
        data_rng.load_state(resume->data);
        dropout_rng.load_state(resume->dropout);
    }

    TrainReport report;
    report.stage = cfg.stage;
    report.epochs = cfg.epochs;
    report.steps_per_epoch = spe;
    report.total_steps = total_steps;
    report.batch_size = cfg.batch_size;
    report.config = resolved;
    report.initial_eval_loss =
        eval_loss(parts.arcface, parts.head, train_backbone ? &parts.backbone : nullptr, data);

    const std::vector<double> start = snapshot(parts);

    BatchStream stream(data.size(), static_cast<std::size_t>(cfg.batch_size), data_rng);
    AdamOptimizer adam(cfg.adam);

    std::int64_t step = 0;
    for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        double epoch_loss = 0.0;
        for (std::int64_t s = 0; s < spe; ++s, ++step) {
            const auto& rows = stream.next();
            auto [x, labels] = gather_rows(data, rows);

            PipelineGrads grads;
            const double loss =
                pipeline_loss(parts.arcface, parts.head,
                              train_backbone ? &parts.backbone : nullptr, x, labels,
                              Mode::train, &dropout_rng, &grads);
            epoch_loss += loss;

            const double lr = lr_at(resolved.schedule, step);
            const auto update = [&](const std::string& name, double* p, const double* g,
                                    std::size_t count) {
                if (cfg.optimizer == OptimizerKind::adam) {
                    adam.step(name, p, g, count, lr);
                } else {
                    for (std::size_t i = 0; i < count; ++i) {
                        if (!std::isfinite(g[i]))
                            throw NonFiniteError("sgd: non-finite gradient for " + name, name);
                        p[i] -= lr * g[i];
                    }
                }
            };

            for (int b = 0; b < parts.head.num_branches; ++b) {
                const std::string tag = "head.branch" + std::to_string(b);
                update(tag + ".weight", parts.head.weights[b].data(),
                       grads.head.weights[b].data(), parts.head.weights[b].size());
                update(tag + ".bias", parts.head.biases[b].data(),
                       grads.head.biases[b].data(), parts.head.biases[b].size());
            }
            update("arcface.weight", parts.arcface.weight.data(),
                   grads.arcface.weight.data(), parts.arcface.weight.size());
            if (train_backbone) {
                update("backbone.weight", parts.backbone.weight.data(),
                       grads.backbone.weight.data(), parts.backbone.weight.size());
                update("backbone.bias", parts.backbone.bias.data(),
                       grads.backbone.bias.data(), parts.backbone.bias.size());
            }
        }
        report.per_epoch_mean_loss.push_back(spe > 0 ? epoch_loss / double(spe) : 0.0);
    }

    report.data_passes = stream.passes_started();
    report.final_eval_loss =
        eval_loss(parts.arcface, parts.head, train_backbone ? &parts.backbone : nullptr, data);

    const std::vector<double> end = snapshot(parts);
    double delta = 0.0;
    for (std::size_t i = 0; i < start.size(); ++i)
        delta = std::max(delta, std::abs(end[i] - start[i]));
    report.param_delta_inf = delta;

    report.final_rng.data = stream.rng().save_state();
    report.final_rng.dropout = dropout_rng.save_state();
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return report;
}

nlohmann::json report_to_json(const TrainReport& report) {
    return nlohmann::json{
        {"stage", report.stage},
        {"epochs", report.epochs},
        {"steps_per_epoch", report.steps_per_epoch},
        {"total_steps", report.total_steps},
        {"data_passes", report.data_passes},
        {"batch_size", report.batch_size},
        {"initial_eval_loss", report.initial_eval_loss},
        {"final_eval_loss", report.final_eval_loss},
        {"per_epoch_mean_loss", report.per_epoch_mean_loss},
        {"param_delta_inf", report.param_delta_inf},
        {"config", config_to_json(report.config)},
    };
}

}  // namespace membed
