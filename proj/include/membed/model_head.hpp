#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "membed/matrix.hpp"
#include "membed/rng.hpp"

namespace membed {

// Embedding width ceiling. Enforced at construction, never at forward time.
inline constexpr int kMaxEmbedDim = 64;

// B parallel branches, each a dropout followed by an affine map D -> E.
// Branch outputs are summed into a single E-dim embedding.
struct HeadParams {
    int num_branches = 0;
    int in_dim = 0;
    int out_dim = 0;
    std::vector<Matrix> weights;              // per branch, D x E
    std::vector<std::vector<double>> biases;  // per branch, length E
    std::vector<double> dropout_rates;        // per branch, each in [0,1)
};

// Default per-branch dropout profile: linearly spaced 0.1 .. 0.5 inclusive
// (a single branch gets 0.1).
std::vector<double> default_dropout_rates(int num_branches);

// Seeded init: weights ~ normal * (1/sqrt(D)), biases zero. Draws branch by
// branch in row-major order, so the result is a pure function of the seed.
HeadParams init_head(int in_dim, int num_branches, int out_dim,
                     const std::vector<double>& dropout_rates, std::uint64_t seed);

// Per-branch mask-and-scale matrices for one train-mode forward. Entries are
// 0 (dropped) or 1/(1-p_b) (kept, inverted-dropout scaling). Branches with
// p_b = 0 hold an empty matrix, read as the identity mask.
struct MaskSet {
    std::vector<Matrix> scales;  // per branch, batch x D or empty
};

// Draws one mask set. Each branch with p_b > 0 gets its own child generator
// (split from `rng`), so masks are independent across branches and replayable
// from the parent state.
MaskSet make_dropout_masks(const HeadParams& params, std::size_t batch, Rng& rng);

// Everything head_backward needs from the matching forward call.
struct ForwardCache {
    Matrix x;       // batch x D input
    MaskSet masks;  // mask-and-scale per branch (train mode)
};

enum class Mode { train, eval };

// emb = sum_b dropout_{p_b}(x) W_b + c_b. Eval mode runs every branch with
// dropout as the identity; train mode applies inverted dropout and fills
// `cache`. `rng` is required in train mode iff any p_b > 0; `fixed_masks`
// bypasses mask generation (gradient-check harness).
Matrix head_forward(const HeadParams& params, const Matrix& x, Mode mode,
                    Rng* rng = nullptr, ForwardCache* cache = nullptr,
                    const MaskSet* fixed_masks = nullptr);

struct HeadGrads {
    std::vector<Matrix> weights;              // per branch, D x E
    std::vector<std::vector<double>> biases;  // per branch, length E
    Matrix x;                                 // batch x D
};

// Exact adjoint of head_forward for the cached batch:
//   grad_W_b = (x masked-scaled by branch b)^T grad_emb
//   grad_c_b = column sums of grad_emb
//   grad_x   = sum_b (grad_emb W_b^T) elementwise-scaled by branch b's mask
HeadGrads head_backward(const HeadParams& params, const ForwardCache& cache,
                        const Matrix& grad_emb);

// Small affine stand-in for the real feature extractor; only trained in
// stage 2. When frozen, the trainer discards its parameter gradients.
struct TinyBackbone {
    Matrix weight;             // D_raw x D
    std::vector<double> bias;  // length D
    bool frozen = true;
};

// Square identity map: forward is bit-exact passthrough.
TinyBackbone init_backbone_identity(int dim);

// Seeded scaled-normal init (std 1/sqrt(D_raw)), zero bias.
TinyBackbone init_backbone(int in_dim, int out_dim, std::uint64_t seed);

Matrix backbone_forward(const TinyBackbone& bb, const Matrix& raw);

struct BackboneGrads {
    Matrix weight;
    std::vector<double> bias;
    Matrix raw;
};

BackboneGrads backbone_backward(const TinyBackbone& bb, const Matrix& raw,
                                const Matrix& grad_out);

}  // namespace membed
