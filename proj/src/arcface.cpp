#include "membed/arcface.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "membed/errors.hpp"
#include "membed/numerics.hpp"

namespace membed {

namespace {

// Embedding rows below this norm carry no usable direction.
constexpr double kEmbNormFloor = 1e-8;
// Angle floor for the margin-branch chain factor sin(theta+m)/sin(theta).
constexpr double kSinFloor = 1e-12;

}  // namespace

void validate_arcface(const ArcFaceParams& p) {
    if (p.num_classes < 1) throw ValueError("arcface: num_classes must be >= 1");
    if (p.subcenters < 1) throw ValueError("arcface: subcenters must be >= 1");
    if (!(p.scale > 0.0)) throw ValueError("arcface: scale must be > 0");
    if (!(p.margin >= 0.0 && p.margin < std::numbers::pi / 2.0))
        throw ValueError("arcface: margin must lie in [0, pi/2)");
    const std::size_t rows =
        static_cast<std::size_t>(p.num_classes) * static_cast<std::size_t>(p.subcenters);
    if (p.weight.rows() != rows)
        throw DimensionError("arcface: weight must have num_classes*subcenters rows");
    if (p.weight.cols() == 0) throw DimensionError("arcface: weight has no columns");
}

ArcFaceParams init_arcface(int num_classes, int subcenters, int embed_dim,
                           double scale, double margin, std::uint64_t seed) {
    if (embed_dim < 1) throw ValueError("init_arcface: embed_dim must be >= 1");
    ArcFaceParams p;
    p.num_classes = num_classes;
    p.subcenters = subcenters;
    p.scale = scale;
    p.margin = margin;
    p.weight = Matrix(static_cast<std::size_t>(num_classes) * subcenters, embed_dim);
    Rng rng(seed, Rng::kStreamInit);
    const double std_dev = 1.0 / std::sqrt(double(embed_dim));
    for (std::size_t i = 0; i < p.weight.size(); ++i) p.weight.data()[i] = std_dev * rng.normal();
    validate_arcface(p);
    return p;
}

Matrix arcface_logits(const ArcFaceParams& p, const Matrix& emb,
                      const std::vector<int>& labels, ArcFaceCache* cache) {
    validate_arcface(p);
    if (emb.cols() != p.weight.cols())
        throw DimensionError("arcface_logits: embedding dim " + std::to_string(emb.cols()) +
                             " does not match weight dim " + std::to_string(p.weight.cols()));
    if (labels.size() != emb.rows())
        throw DimensionError("arcface_logits: one label per embedding row required");
    for (int l : labels)
        if (l < 0 || l >= p.num_classes)
            throw ValueError("arcface_logits: label " + std::to_string(l) + " outside [0, " +
                             std::to_string(p.num_classes) + ")");

    const std::size_t batch = emb.rows();
    const std::size_t c_count = static_cast<std::size_t>(p.num_classes);
    const std::size_t k = static_cast<std::size_t>(p.subcenters);

    std::vector<double> emb_norms, weight_norms;
    const Matrix unit_emb = l2_normalize_rows(emb, emb_norms, kEmbNormFloor);
    const Matrix unit_weight = l2_normalize_rows(p.weight, weight_norms);

    const Matrix cos_all = matmul_nt(unit_emb, unit_weight);  // batch x (C*k)

    Matrix pooled(batch, c_count);
    std::vector<int> argmax_sub(batch * c_count, 0);
    for (std::size_t i = 0; i < batch; ++i) {
        const double* row = cos_all.row(i);
        for (std::size_t c = 0; c < c_count; ++c) {
            double best = row[c * k];
            int best_j = 0;
            for (std::size_t j = 1; j < k; ++j) {
                if (row[c * k + j] > best) {  // strict: ties keep the lowest index
                    best = row[c * k + j];
                    best_j = static_cast<int>(j);
                }
            }
            pooled(i, c) = best;
            argmax_sub[i * c_count + c] = best_j;
        }
    }

    Matrix logits(batch, c_count);
    std::vector<double> target_factor(batch, 1.0);
    const double cos_m = std::cos(p.margin);
    const double sin_m = std::sin(p.margin);
    for (std::size_t i = 0; i < batch; ++i) {
        const std::size_t y = static_cast<std::size_t>(labels[i]);
        for (std::size_t c = 0; c < c_count; ++c) {
            double value = pooled(i, c);
            if (c == y) {
                // Rounding in the cosine table can leave |cos| marginally
                // above 1; clamp before deriving the angle.
                const double cos_t = std::clamp(value, -1.0, 1.0);
                const double sin_t = std::sqrt(std::max(0.0, 1.0 - cos_t * cos_t));
                const bool main_branch =
                    p.easy_margin ? cos_t > 0.0
                                  : cos_t >= std::cos(std::numbers::pi - p.margin);
                if (main_branch) {
                    value = cos_t * cos_m - sin_t * sin_m;  // cos(theta + m)
                    target_factor[i] =
                        cos_m + sin_m * cos_t / std::max(sin_t, kSinFloor);
                } else {
                    value = p.easy_margin ? cos_t : cos_t - p.margin * sin_m;
                    target_factor[i] = 1.0;
                }
            }
            logits(i, c) = p.scale * value;
        }
    }

    if (cache) {
        cache->unit_emb = unit_emb;
        cache->emb_norms = emb_norms;
        cache->unit_weight = unit_weight;
        cache->weight_norms = weight_norms;
        cache->argmax_sub = std::move(argmax_sub);
        cache->pooled_cos = std::move(pooled);
        cache->labels = labels;
        cache->target_factor = std::move(target_factor);
    }
    return logits;
}

ArcFaceGrads arcface_backward(const ArcFaceParams& p, const ArcFaceCache& cache,
                              const Matrix& grad_logits) {
    const std::size_t batch = cache.unit_emb.rows();
    const std::size_t c_count = static_cast<std::size_t>(p.num_classes);
    const std::size_t k = static_cast<std::size_t>(p.subcenters);
    if (grad_logits.rows() != batch || grad_logits.cols() != c_count)
        throw DimensionError("arcface_backward: gradient shape mismatch");

    // Gradient w.r.t. the raw cosine table, routed through the margin factor
    // on the label column and through max-pooling to the winning subcenter.
    Matrix grad_cos(batch, c_count * k);
    for (std::size_t i = 0; i < batch; ++i) {
        const std::size_t y = static_cast<std::size_t>(cache.labels[i]);
        for (std::size_t c = 0; c < c_count; ++c) {
            double g = p.scale * grad_logits(i, c);
            if (c == y) g *= cache.target_factor[i];
            const std::size_t j = static_cast<std::size_t>(cache.argmax_sub[i * c_count + c]);
            grad_cos(i, c * k + j) = g;
        }
    }

    const Matrix grad_unit_emb = matmul(grad_cos, cache.unit_weight);
    const Matrix grad_unit_weight = matmul_tn(grad_cos, cache.unit_emb);

    ArcFaceGrads grads;
    grads.emb = l2_normalize_rows_backward(grad_unit_emb, cache.unit_emb, cache.emb_norms);
    grads.weight =
        l2_normalize_rows_backward(grad_unit_weight, cache.unit_weight, cache.weight_norms);
    return grads;
}

double pipeline_loss(const ArcFaceParams& arc, const HeadParams& head,
                     const TinyBackbone* bb, const Matrix& x,
                     const std::vector<int>& labels, Mode mode, Rng* rng,
                     PipelineGrads* grads, const MaskSet* fixed_masks) {
    const Matrix features = bb ? backbone_forward(*bb, x) : x;

    ForwardCache head_cache;
    const bool want_grads = grads != nullptr;
    if (want_grads && mode != Mode::train)
        throw ValueError("pipeline_loss: gradients require train mode");
    Matrix emb = head_forward(head, features, mode, rng,
                              mode == Mode::train ? &head_cache : nullptr, fixed_masks);

    ArcFaceCache arc_cache;
    const Matrix logits = arcface_logits(arc, emb, labels, want_grads ? &arc_cache : nullptr);

    Matrix grad_logits;
    const double loss = softmax_xent(logits, labels, want_grads ? &grad_logits : nullptr);
    if (!want_grads) return loss;

    grads->arcface = arcface_backward(arc, arc_cache, grad_logits);
    grads->head = head_backward(head, head_cache, grads->arcface.emb);
    grads->has_backbone = bb != nullptr;
    if (bb) grads->backbone = backbone_backward(*bb, x, grads->head.x);
    return loss;
}

double eval_loss(const ArcFaceParams& arc, const HeadParams& head,
                 const TinyBackbone* bb, const FeatureSet& data) {
    return pipeline_loss(arc, head, bb, data.features, data.labels, Mode::eval, nullptr);
}

}  // namespace membed
