#include "membed/model_head.hpp"

#include <cmath>
#include <string>

#include "membed/errors.hpp"

namespace membed {

std::vector<double> default_dropout_rates(int num_branches) {
    if (num_branches < 1) throw ValueError("default_dropout_rates: need >= 1 branch");
    std::vector<double> rates(num_branches);
    if (num_branches == 1) {
        rates[0] = 0.1;
        return rates;
    }
    const double step = (0.5 - 0.1) / double(num_branches - 1);
    for (int b = 0; b < num_branches; ++b) rates[b] = 0.1 + step * b;
    return rates;
}

HeadParams init_head(int in_dim, int num_branches, int out_dim,
                     const std::vector<double>& dropout_rates, std::uint64_t seed) {
    if (num_branches < 1) throw ValueError("init_head: num_branches must be >= 1");
    if (in_dim < 1) throw ValueError("init_head: in_dim must be >= 1");
    if (out_dim < 1 || out_dim > kMaxEmbedDim)
        throw ValueError("init_head: out_dim must lie in [1, " +
                         std::to_string(kMaxEmbedDim) + "], got " + std::to_string(out_dim));
    if (dropout_rates.size() != static_cast<std::size_t>(num_branches))
        throw DimensionError("init_head: need one dropout rate per branch");
    for (double p : dropout_rates)
        if (!(p >= 0.0 && p < 1.0))
            throw ValueError("init_head: dropout rate " + std::to_string(p) +
                             " outside [0,1)");

    HeadParams params;
    params.num_branches = num_branches;
    params.in_dim = in_dim;
    params.out_dim = out_dim;
    params.dropout_rates = dropout_rates;
    params.weights.reserve(num_branches);
    params.biases.reserve(num_branches);

    Rng rng(seed, Rng::kStreamInit);
    const double std_dev = 1.0 / std::sqrt(double(in_dim));
    for (int b = 0; b < num_branches; ++b) {
        Matrix w(in_dim, out_dim);
        for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] = std_dev * rng.normal();
        params.weights.push_back(std::move(w));
        params.biases.emplace_back(out_dim, 0.0);
    }
    return params;
}

MaskSet make_dropout_masks(const HeadParams& params, std::size_t batch, Rng& rng) {
    MaskSet masks;
    masks.scales.resize(params.num_branches);
    for (int b = 0; b < params.num_branches; ++b) {
        const double p = params.dropout_rates[b];
        if (p == 0.0) continue;  // identity mask, no draws consumed
        Rng branch_rng = rng.split(static_cast<std::uint64_t>(b));
        const double keep_scale = 1.0 / (1.0 - p);
        Matrix s(batch, params.in_dim);
        for (std::size_t i = 0; i < s.size(); ++i)
            s.data()[i] = branch_rng.uniform() >= p ? keep_scale : 0.0;
        masks.scales[b] = std::move(s);
    }
    return masks;
}

namespace {

void check_head_input(const HeadParams& params, const Matrix& x) {
    if (x.cols() != static_cast<std::size_t>(params.in_dim))
        throw DimensionError("head: input has " + std::to_string(x.cols()) +
                             " columns, head expects " + std::to_string(params.in_dim));
    if (params.weights.size() != static_cast<std::size_t>(params.num_branches) ||
        params.biases.size() != static_cast<std::size_t>(params.num_branches))
        throw DimensionError("head: parameter blocks disagree with num_branches");
}

// y += (x scaled by mask) W_b + c_b, with an empty mask meaning identity.
void add_branch(const HeadParams& params, int b, const Matrix& x, const Matrix& mask,
                Matrix& emb) {
    const Matrix& src = mask.size() == 0 ? x : hadamard(x, mask);
    const Matrix y = matmul(src, params.weights[b]);
    const auto& bias = params.biases[b];
    for (std::size_t i = 0; i < emb.rows(); ++i) {
        double* e = emb.row(i);
        const double* yr = y.row(i);
        for (std::size_t j = 0; j < emb.cols(); ++j) e[j] += yr[j] + bias[j];
    }
}

}  // namespace

Matrix head_forward(const HeadParams& params, const Matrix& x, Mode mode, Rng* rng,
                    ForwardCache* cache, const MaskSet* fixed_masks) {
    check_head_input(params, x);

    const Matrix empty;
    MaskSet masks;
    const MaskSet* active = nullptr;
    if (mode == Mode::train) {
        if (fixed_masks) {
            active = fixed_masks;
        } else {
            bool any_dropout = false;
            for (double p : params.dropout_rates) any_dropout |= p > 0.0;
            if (any_dropout) {
                if (!rng) throw ValueError("head_forward: train mode with dropout needs an rng");
                masks = make_dropout_masks(params, x.rows(), *rng);
            } else {
                masks.scales.resize(params.num_branches);
            }
            active = &masks;
        }
        if (active->scales.size() != static_cast<std::size_t>(params.num_branches))
            throw DimensionError("head_forward: mask set does not match branch count");
    }

    Matrix emb(x.rows(), params.out_dim);
    for (int b = 0; b < params.num_branches; ++b) {
        const Matrix& mask = active ? active->scales[b] : empty;
        if (mask.size() != 0 && (mask.rows() != x.rows() || mask.cols() != x.cols()))
            throw DimensionError("head_forward: mask shape does not match input batch");
        add_branch(params, b, x, mask, emb);
    }

    if (cache) {
        if (mode != Mode::train)
            throw ValueError("head_forward: cache is only produced in train mode");
        cache->x = x;
        cache->masks = *active;
    }
    return emb;
}

HeadGrads head_backward(const HeadParams& params, const ForwardCache& cache,
                        const Matrix& grad_emb) {
    check_head_input(params, cache.x);
    if (grad_emb.rows() != cache.x.rows() ||
        grad_emb.cols() != static_cast<std::size_t>(params.out_dim))
        throw DimensionError("head_backward: gradient shape does not match cached batch");
    if (cache.masks.scales.size() != static_cast<std::size_t>(params.num_branches))
        throw DimensionError("head_backward: cache does not match branch count");

    HeadGrads grads;
    grads.weights.reserve(params.num_branches);
    grads.biases.reserve(params.num_branches);
    grads.x = Matrix(cache.x.rows(), cache.x.cols());

    const std::vector<double> bias_grad = col_sums(grad_emb);
    for (int b = 0; b < params.num_branches; ++b) {
        const Matrix& mask = cache.masks.scales[b];
        const bool identity = mask.size() == 0;
        const Matrix masked = identity ? cache.x : hadamard(cache.x, mask);
        grads.weights.push_back(matmul_tn(masked, grad_emb));
        grads.biases.push_back(bias_grad);

        const Matrix gx_branch = matmul_nt(grad_emb, params.weights[b]);
        for (std::size_t i = 0; i < grads.x.size(); ++i) {
            const double scale = identity ? 1.0 : mask.data()[i];
            grads.x.data()[i] += gx_branch.data()[i] * scale;
        }
    }
    return grads;
}

TinyBackbone init_backbone_identity(int dim) {
    if (dim < 1) throw ValueError("init_backbone_identity: dim must be >= 1");
    TinyBackbone bb;
    bb.weight = Matrix(dim, dim);
    for (int i = 0; i < dim; ++i) bb.weight(i, i) = 1.0;
    bb.bias.assign(dim, 0.0);
    return bb;
}

TinyBackbone init_backbone(int in_dim, int out_dim, std::uint64_t seed) {
    if (in_dim < 1 || out_dim < 1) throw ValueError("init_backbone: dims must be >= 1");
    TinyBackbone bb;
    bb.weight = Matrix(in_dim, out_dim);
    Rng rng(seed, Rng::kStreamInit);
    const double std_dev = 1.0 / std::sqrt(double(in_dim));
    for (std::size_t i = 0; i < bb.weight.size(); ++i) bb.weight.data()[i] = std_dev * rng.normal();
    bb.bias.assign(out_dim, 0.0);
    return bb;
}

Matrix backbone_forward(const TinyBackbone& bb, const Matrix& raw) {
    Matrix out = matmul(raw, bb.weight);
    for (std::size_t i = 0; i < out.rows(); ++i) {
        double* o = out.row(i);
        for (std::size_t j = 0; j < out.cols(); ++j) o[j] += bb.bias[j];
    }
    return out;
}

BackboneGrads backbone_backward(const TinyBackbone& bb, const Matrix& raw,
                                const Matrix& grad_out) {
    if (grad_out.rows() != raw.rows() || grad_out.cols() != bb.weight.cols())
        throw DimensionError("backbone_backward: gradient shape mismatch");
    BackboneGrads grads;
    grads.weight = matmul_tn(raw, grad_out);
    grads.bias = col_sums(grad_out);
    grads.raw = matmul_nt(grad_out, bb.weight);
    return grads;
}

}  // namespace membed
