#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "membed/arcface.hpp"
#include "membed/dataio.hpp"
#include "membed/model_head.hpp"
#include "membed/rng.hpp"

namespace membed {

enum class ScheduleKind { constant, cosine_with_warmup };

// Per-step learning rate. `constant` reads only peak_lr. Sentinels resolved
// by the trainer before use: warmup_steps < 0 means 5% of total, and
// total_steps == 0 means epochs * steps_per_epoch.
struct ScheduleSpec {
    ScheduleKind kind = ScheduleKind::constant;
    double peak_lr = 1e-3;
    double min_lr = 0.0;
    std::int64_t warmup_steps = -1;
    std::int64_t total_steps = 0;
};

// constant -> peak_lr. cosine_with_warmup -> linear ramp 0..peak over the
// warmup, then min + (peak-min)/2 * (1 + cos(pi*t)) with t spanning the
// post-warmup steps. Steps beyond total clamp to min_lr with a warning.
double lr_at(const ScheduleSpec& sched, std::int64_t step);

enum class OptimizerKind { adam, sgd };

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    // Clamp the normalized update to [-1, 1] elementwise so a step never
    // moves any coordinate by more than the learning rate. Bias correction
    // alone does not guarantee that bound: with beta1=0.9, beta2=0.999 a
    // gradient sequence like (1, 1.1) already pushes |m^/sqrt(v^)| to
    // ~1.0013 on step two.
    bool bounded_update = true;
};

// One optimizer instance owns the moment state for every named tensor it
// has seen. Shapes are locked on first sight.
class AdamOptimizer {
public:
    explicit AdamOptimizer(AdamHyper hp) : hp_(hp) {}

    // In-place update of `count` values. Throws NonFiniteError naming the
    // tensor if any gradient entry is non-finite; the step is not applied.
    void step(const std::string& name, double* param, const double* grad,
              std::size_t count, double lr);

private:
    struct Moments {
        std::vector<double> m, v;
        std::uint64_t t = 0;
    };
    AdamHyper hp_;
    std::map<std::string, Moments> slots_;
};

// Persistent shuffled-batch iterator: hands out `batch` distinct rows per
// call from a seeded permutation, reshuffling when fewer than `batch` rows
// remain (the remainder is dropped). Mirrors a persistent dataset iterator,
// so nominal epochs do not reset it.
class BatchStream {
public:
    BatchStream(std::size_t n, std::size_t batch, Rng rng);

    const std::vector<std::size_t>& next();
    std::uint64_t passes_started() const { return passes_; }
    bool at_pass_boundary() const { return pos_ + batch_ > perm_.size(); }
    Rng& rng() { return rng_; }

private:
    std::vector<std::size_t> perm_;
    std::vector<std::size_t> current_;
    std::size_t batch_;
    std::size_t pos_;
    std::uint64_t passes_ = 0;
    Rng rng_;
};

struct TrainConfig {
    int stage = 1;
    std::int64_t epochs = 200;
    std::int64_t steps_per_epoch_divisor = 10;
    std::int64_t batch_size = 64;
    ScheduleSpec schedule;
    OptimizerKind optimizer = OptimizerKind::adam;
    AdamHyper adam;
    double scale = 30.0;
    double margin = 0.3;
    int subcenters = 3;
    bool easy_margin = false;
    int branches = 20;
    int embed_dim = 64;
    std::vector<double> dropout_rates;  // empty -> default profile
    std::uint64_t seed = 0;
    bool backbone_identity = true;
};

// Stage presets: stage 1 trains the head only (backbone frozen) for 200
// nominal epochs at a scheduled high rate with margin 0.3; stage 2 trains
// everything for 10 nominal epochs at constant 1e-6 with margin 0.5.
TrainConfig stage1_defaults();
TrainConfig stage2_defaults();

nlohmann::json config_to_json(const TrainConfig& cfg);
TrainConfig config_from_json(const nlohmann::json& j);

// Flat key=value round-trip used for config files and the resolved-config
// echo. Unknown keys are an error; values use JSON scalar syntax.
std::string config_to_flat(const TrainConfig& cfg);
void apply_flat_overrides(TrainConfig& cfg, const std::map<std::string, std::string>& kv);
std::map<std::string, std::string> parse_flat_config(const std::string& text);

struct ModelParts {
    HeadParams head;
    ArcFaceParams arcface;
    TinyBackbone backbone;
};

// Builds a model for `data`: head seeded from cfg.seed, subcenter weights
// from cfg.seed+1, backbone from cfg.seed+2 (or the identity map).
ModelParts init_model(const TrainConfig& cfg, const FeatureSet& data);

struct RngStates {
    std::array<std::uint64_t, 6> data{};
    std::array<std::uint64_t, 6> dropout{};
};

struct TrainReport {
    int stage = 0;
    std::int64_t epochs = 0;
    std::int64_t steps_per_epoch = 0;
    std::int64_t total_steps = 0;
    std::uint64_t data_passes = 0;
    std::int64_t batch_size = 0;
    double initial_eval_loss = 0.0;
    double final_eval_loss = 0.0;
    std::vector<double> per_epoch_mean_loss;
    double param_delta_inf = 0.0;
    TrainConfig config;
    RngStates final_rng;
    double wall_seconds = 0.0;  // stdout only, never serialized
};

// JSON form of the report. Deliberately excludes wall_seconds so reruns with
// identical inputs produce byte-identical files.
nlohmann::json report_to_json(const TrainReport& report);

// Runs one stage over `data`, updating `parts` in place. Stage 1 feeds
// features straight into the head and never updates the backbone; stage 2
// routes batches through the backbone and updates every tensor. `resume`
// restores the data/dropout stream states saved by a previous stage.
TrainReport run_stage(const TrainConfig& cfg, const FeatureSet& data, ModelParts& parts,
                      const RngStates* resume = nullptr);

// steps per nominal epoch: floor(N / batch / divisor), floored at 1 (with a
// stderr warning when the divisor swallows every step).
std::int64_t steps_per_epoch(std::size_t n, std::int64_t batch, std::int64_t divisor);

}  // namespace membed
