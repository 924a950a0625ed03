#pragma once

#include <cstdint>
#include <vector>

#include "membed/dataio.hpp"
#include "membed/matrix.hpp"
#include "membed/model_head.hpp"
#include "membed/rng.hpp"

namespace membed {

// Margin-and-scale softmax parameters with k weight rows per class. The
// stored rows are unconstrained; every forward normalizes them functionally.
struct ArcFaceParams {
    Matrix weight;  // (C*k) x E
    int num_classes = 0;
    int subcenters = 3;
    double scale = 30.0;
    double margin = 0.3;  // radians
    // Margin fallback for theta > pi - m: false -> cos(theta) - m*sin(m)
    // (keeps the adjusted logit monotone in theta); true -> keep cos(theta)
    // whenever cos(theta) <= 0.
    bool easy_margin = false;
};

// Throws unless s > 0, 0 <= m < pi/2, k >= 1, and shapes agree.
void validate_arcface(const ArcFaceParams& p);

// Seeded scaled-normal init (std 1/sqrt(E)) of the (C*k) x E weight.
ArcFaceParams init_arcface(int num_classes, int subcenters, int embed_dim,
                           double scale, double margin, std::uint64_t seed);

// Intermediates needed by the backward pass, valid only for the producing
// forward call.
struct ArcFaceCache {
    Matrix unit_emb;               // batch x E
    std::vector<double> emb_norms;
    Matrix unit_weight;            // (C*k) x E
    std::vector<double> weight_norms;
    std::vector<int> argmax_sub;   // batch*C, winning subcenter per (row, class)
    Matrix pooled_cos;             // batch x C, pre-margin
    std::vector<int> labels;
    std::vector<double> target_factor;  // batch, d(adjusted)/d(cos theta_y)
};

// Scaled margin logits. Embedding and weight rows are L2-normalized, the
// batch x (C*k) cosine table is max-pooled over each class's k subcenters
// (ties to the lowest subcenter index), the label class gets the angular
// margin (cos(theta+m) while theta <= pi - m, else the fallback), and
// everything is multiplied by s. Embedding rows with norm < 1e-8 are
// rejected as degenerate.
Matrix arcface_logits(const ArcFaceParams& p, const Matrix& emb,
                      const std::vector<int>& labels, ArcFaceCache* cache = nullptr);

struct ArcFaceGrads {
    Matrix emb;     // batch x E
    Matrix weight;  // (C*k) x E
};

// Exact adjoint of arcface_logits. Gradient flows only to each class's
// winning subcenter; the label column is scaled by the cached margin-branch
// derivative; both normalizations are inverted exactly.
ArcFaceGrads arcface_backward(const ArcFaceParams& p, const ArcFaceCache& cache,
                              const Matrix& grad_logits);

// Combined gradients for one pipeline pass.
struct PipelineGrads {
    ArcFaceGrads arcface;
    HeadGrads head;
    BackboneGrads backbone;
    bool has_backbone = false;
};

// Full pipeline: (optional backbone) -> head -> margin logits -> softmax
// cross-entropy, with exact adjoints back through every piece. Pass bb as
// null to feed `x` straight into the head (head-only training on
// precomputed features). In train mode `rng` drives dropout unless
// `fixed_masks` pins the masks. `grads` may be null for loss-only
// evaluation.
double pipeline_loss(const ArcFaceParams& arc, const HeadParams& head,
                     const TinyBackbone* bb, const Matrix& x,
                     const std::vector<int>& labels, Mode mode, Rng* rng,
                     PipelineGrads* grads = nullptr,
                     const MaskSet* fixed_masks = nullptr);

// Deterministic eval-mode loss (dropout off, no gradients).
double eval_loss(const ArcFaceParams& arc, const HeadParams& head,
                 const TinyBackbone* bb, const FeatureSet& data);

}  // namespace membed
