#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "membed/errors.hpp"
#include "membed/model_head.hpp"
#include "membed/numerics.hpp"
#include "membed/rng.hpp"

using namespace membed;

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
    return m;
}

}  // namespace

TEST_CASE("default dropout profile spans 0.1 to 0.5") {
    const auto rates = default_dropout_rates(20);
    REQUIRE(rates.size() == 20);
    CHECK(rates[0] == doctest::Approx(0.1).epsilon(1e-15));
    CHECK(rates[19] == doctest::Approx(0.5).epsilon(1e-15));
    const double step = 0.4 / 19.0;
    for (int b = 1; b < 20; ++b)
        CHECK(rates[b] - rates[b - 1] == doctest::Approx(step).epsilon(1e-12));

    CHECK(default_dropout_rates(1) == std::vector<double>{0.1});
}

TEST_CASE("init_head: determinism and argument validation") {
    const auto rates = default_dropout_rates(3);
    const HeadParams a = init_head(8, 3, 4, rates, 77);
    const HeadParams b = init_head(8, 3, 4, rates, 77);
    for (int i = 0; i < 3; ++i) {
        CHECK(a.weights[i] == b.weights[i]);
        CHECK(a.biases[i] == b.biases[i]);
        for (double v : a.biases[i]) CHECK(v == 0.0);
    }
    const HeadParams c = init_head(8, 3, 4, rates, 78);
    CHECK_FALSE(a.weights[0] == c.weights[0]);

    CHECK_THROWS_AS(init_head(8, 3, 65, rates, 1), ValueError);   // embedding too wide
    CHECK_THROWS_AS(init_head(8, 3, 0, rates, 1), ValueError);
    CHECK_THROWS_AS(init_head(8, 3, 4, {0.1, 0.2, 1.0}, 1), ValueError);
    CHECK_THROWS_AS(init_head(8, 3, 4, {0.1, -0.2, 0.3}, 1), ValueError);
    CHECK_THROWS_AS(init_head(8, 2, 4, rates, 1), DimensionError);  // rate count mismatch
}

TEST_CASE("eval-mode head equals the collapsed affine map") {
    Rng rng(3, 1);
    for (int branches : {1, 2, 10, 20, 40}) {
        const HeadParams params =
            init_head(16, branches, 8, default_dropout_rates(branches), 100 + branches);
        const Matrix x = random_matrix(4, 16, rng);

        const Matrix emb = head_forward(params, x, Mode::eval);

        Matrix w_sum(16, 8);
        std::vector<double> c_sum(8, 0.0);
        for (int b = 0; b < branches; ++b) {
            for (std::size_t i = 0; i < w_sum.size(); ++i)
                w_sum.data()[i] += params.weights[b].data()[i];
            for (std::size_t j = 0; j < 8; ++j) c_sum[j] += params.biases[b][j];
        }
        Matrix collapsed = matmul(x, w_sum);
        for (std::size_t i = 0; i < collapsed.rows(); ++i)
            for (std::size_t j = 0; j < collapsed.cols(); ++j) collapsed(i, j) += c_sum[j];

        for (std::size_t i = 0; i < emb.size(); ++i)
            CHECK(std::abs(emb.data()[i] - collapsed.data()[i]) <= 1e-12);
    }
}

TEST_CASE("train mode with all-zero dropout equals eval mode bit for bit") {
    Rng rng(4, 1);
    const HeadParams params = init_head(10, 3, 6, {0.0, 0.0, 0.0}, 5);
    const Matrix x = random_matrix(7, 10, rng);
    const Matrix eval_emb = head_forward(params, x, Mode::eval);
    ForwardCache cache;
    const Matrix train_emb = head_forward(params, x, Mode::train, nullptr, &cache);
    CHECK(train_emb == eval_emb);
}

TEST_CASE("train mode requires an rng when dropout is active") {
    const HeadParams params = init_head(6, 2, 4, {0.0, 0.5}, 5);
    const Matrix x(3, 6, 1.0);
    CHECK_THROWS_AS(head_forward(params, x, Mode::train), ValueError);
    CHECK_THROWS_AS(head_forward(params, Matrix(3, 5, 1.0), Mode::eval), DimensionError);
}

TEST_CASE("train mode is deterministic given the rng state") {
    const HeadParams params = init_head(6, 2, 4, {0.3, 0.5}, 5);
    Matrix x(8, 6);
    Rng data_rng(6, 1);
    for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] = data_rng.normal();

    Rng r1(42, Rng::kStreamDropout), r2(42, Rng::kStreamDropout);
    const Matrix a = head_forward(params, x, Mode::train, &r1);
    const Matrix b = head_forward(params, x, Mode::train, &r2);
    CHECK(a == b);
    // Same generator, advanced state: a different mask.
    const Matrix c = head_forward(params, x, Mode::train, &r1);
    CHECK_FALSE(a == c);
}

TEST_CASE("20000 dropout masks average to the eval output within 2%") {
    // Positive activations and weights keep every coordinate well away from
    // zero so the relative comparison is meaningful.
    const int d = 32, e = 4;
    HeadParams params;
    params.num_branches = 1;
    params.in_dim = d;
    params.out_dim = e;
    params.dropout_rates = {0.5};
    Rng rng(8, 1);
    Matrix w(d, e);
    for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] = 0.5 + rng.uniform();
    params.weights.push_back(w);
    params.biases.push_back(std::vector<double>(e, 0.1));

    Matrix x(1, d);
    for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] = 0.5 + rng.uniform();

    const Matrix eval_emb = head_forward(params, x, Mode::eval);

    Rng dropout_rng(2024, Rng::kStreamDropout);
    std::vector<double> mean(e, 0.0);
    const int trials = 20000;
    for (int t = 0; t < trials; ++t) {
        const Matrix emb = head_forward(params, x, Mode::train, &dropout_rng);
        for (int j = 0; j < e; ++j) mean[j] += emb(0, j);
    }
    for (int j = 0; j < e; ++j) {
        mean[j] /= trials;
        CHECK(std::abs(mean[j] - eval_emb(0, j)) / std::abs(eval_emb(0, j)) < 0.02);
    }
}

TEST_CASE("head_backward: zero upstream gradient gives zero everywhere") {
    const HeadParams params = init_head(6, 2, 4, {0.2, 0.4}, 9);
    Matrix x(3, 6, 0.7);
    Rng rng(10, Rng::kStreamDropout);
    ForwardCache cache;
    head_forward(params, x, Mode::train, &rng, &cache);
    const HeadGrads grads = head_backward(params, cache, Matrix(3, 4, 0.0));
    for (const auto& w : grads.weights)
        for (std::size_t i = 0; i < w.size(); ++i) CHECK(w.data()[i] == 0.0);
    for (const auto& b : grads.biases)
        for (double v : b) CHECK(v == 0.0);
    for (std::size_t i = 0; i < grads.x.size(); ++i) CHECK(grads.x.data()[i] == 0.0);
}

TEST_CASE("head_backward: single branch, no dropout, batch 1 is an outer product") {
    const HeadParams params = init_head(5, 1, 3, {0.0}, 11);
    Rng rng(12, 1);
    const Matrix x = random_matrix(1, 5, rng);
    ForwardCache cache;
    head_forward(params, x, Mode::train, nullptr, &cache);
    const Matrix g = random_matrix(1, 3, rng);
    const HeadGrads grads = head_backward(params, cache, g);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 3; ++j)
            CHECK(grads.weights[0](i, j) == doctest::Approx(x(0, i) * g(0, j)).epsilon(1e-15));
    for (int j = 0; j < 3; ++j) CHECK(grads.biases[0][j] == g(0, j));
}

TEST_CASE("head_backward matches finite differences with frozen masks") {
    const int d = 8, branches = 3, e = 4, batch = 5;
    const HeadParams params = init_head(d, branches, e, default_dropout_rates(branches), 13);
    Rng rng(14, 1);
    const Matrix x = random_matrix(batch, d, rng);
    Rng mask_rng(15, Rng::kStreamDropout);
    const MaskSet masks = make_dropout_masks(params, batch, mask_rng);
    const Matrix probe = random_matrix(batch, e, rng);  // scalarizes the output

    // Flatten order: W_0..W_B-1, c_0..c_B-1, then x.
    std::vector<double> flat;
    for (const auto& w : params.weights)
        flat.insert(flat.end(), w.data(), w.data() + w.size());
    for (const auto& c : params.biases) flat.insert(flat.end(), c.begin(), c.end());
    flat.insert(flat.end(), x.data(), x.data() + x.size());

    const auto rebuild = [&](const std::vector<double>& v) {
        HeadParams p = params;
        Matrix xin = x;
        std::size_t at = 0;
        for (auto& w : p.weights) {
            std::copy(v.begin() + at, v.begin() + at + w.size(), w.data());
            at += w.size();
        }
        for (auto& c : p.biases) {
            std::copy(v.begin() + at, v.begin() + at + c.size(), c.begin());
            at += c.size();
        }
        std::copy(v.begin() + at, v.begin() + at + xin.size(), xin.data());
        return std::make_pair(p, xin);
    };

    const auto f = [&](const std::vector<double>& v) {
        const auto [p, xin] = rebuild(v);
        const Matrix emb = head_forward(p, xin, Mode::train, nullptr, nullptr, &masks);
        double s = 0.0;
        for (std::size_t i = 0; i < emb.size(); ++i) s += probe.data()[i] * emb.data()[i];
        return s;
    };

    ForwardCache cache;
    head_forward(params, x, Mode::train, nullptr, &cache, &masks);
    const HeadGrads grads = head_backward(params, cache, probe);

    std::vector<double> analytic;
    for (const auto& w : grads.weights)
        analytic.insert(analytic.end(), w.data(), w.data() + w.size());
    for (const auto& c : grads.biases) analytic.insert(analytic.end(), c.begin(), c.end());
    analytic.insert(analytic.end(), grads.x.data(), grads.x.data() + grads.x.size());

    const std::vector<double> fd = finite_diff_grad(f, flat);
    REQUIRE(fd.size() == analytic.size());
    for (std::size_t i = 0; i < fd.size(); ++i) CHECK(close(analytic[i], fd[i], 1e-5, 1e-10));
}

TEST_CASE("adjoint is linear in the upstream gradient") {
    const HeadParams params = init_head(6, 3, 4, default_dropout_rates(3), 21);
    Rng rng(22, 1);
    const Matrix x = random_matrix(4, 6, rng);
    Rng mask_rng(23, Rng::kStreamDropout);
    ForwardCache cache;
    head_forward(params, x, Mode::train, &mask_rng, &cache);

    const Matrix g = random_matrix(4, 4, rng);
    Matrix g_scaled = g;
    const double alpha = 3.5;
    for (std::size_t i = 0; i < g_scaled.size(); ++i) g_scaled.data()[i] *= alpha;

    const HeadGrads a = head_backward(params, cache, g);
    const HeadGrads b = head_backward(params, cache, g_scaled);
    for (int br = 0; br < 3; ++br)
        for (std::size_t i = 0; i < a.weights[br].size(); ++i)
            CHECK(std::abs(b.weights[br].data()[i] - alpha * a.weights[br].data()[i]) <= 1e-12 *
                      std::max(1.0, std::abs(b.weights[br].data()[i])));
    for (std::size_t i = 0; i < a.x.size(); ++i)
        CHECK(std::abs(b.x.data()[i] - alpha * a.x.data()[i]) <=
              1e-12 * std::max(1.0, std::abs(b.x.data()[i])));
}

TEST_CASE("head_backward rejects a stale cache") {
    const HeadParams params = init_head(6, 2, 4, {0.1, 0.2}, 31);
    Rng rng(32, Rng::kStreamDropout);
    ForwardCache cache;
    head_forward(params, Matrix(3, 6, 1.0), Mode::train, &rng, &cache);
    CHECK_THROWS_AS(head_backward(params, cache, Matrix(2, 4, 1.0)), DimensionError);
    CHECK_THROWS_AS(head_backward(params, cache, Matrix(3, 5, 1.0)), DimensionError);
}

TEST_CASE("backbone: identity init, forward, exact adjoint") {
    const TinyBackbone id = init_backbone_identity(5);
    Rng rng(41, 1);
    const Matrix raw = random_matrix(3, 5, rng);
    const Matrix out = backbone_forward(id, raw);
    CHECK(out == raw);  // bit-exact passthrough

    const TinyBackbone bb = init_backbone(6, 8, 7);
    const Matrix raw2 = random_matrix(4, 6, rng);
    const Matrix probe = random_matrix(4, 8, rng);

    std::vector<double> flat;
    flat.insert(flat.end(), bb.weight.data(), bb.weight.data() + bb.weight.size());
    flat.insert(flat.end(), bb.bias.begin(), bb.bias.end());
    flat.insert(flat.end(), raw2.data(), raw2.data() + raw2.size());

    const auto f = [&](const std::vector<double>& v) {
        TinyBackbone b = bb;
        Matrix r = raw2;
        std::size_t at = 0;
        std::copy(v.begin(), v.begin() + b.weight.size(), b.weight.data());
        at += b.weight.size();
        std::copy(v.begin() + at, v.begin() + at + b.bias.size(), b.bias.begin());
        at += b.bias.size();
        std::copy(v.begin() + at, v.end(), r.data());
        const Matrix o = backbone_forward(b, r);
        double s = 0.0;
        for (std::size_t i = 0; i < o.size(); ++i) s += probe.data()[i] * o.data()[i];
        return s;
    };

    const BackboneGrads grads = backbone_backward(bb, raw2, probe);
    std::vector<double> analytic;
    analytic.insert(analytic.end(), grads.weight.data(), grads.weight.data() + grads.weight.size());
    analytic.insert(analytic.end(), grads.bias.begin(), grads.bias.end());
    analytic.insert(analytic.end(), grads.raw.data(), grads.raw.data() + grads.raw.size());

    const std::vector<double> fd = finite_diff_grad(f, flat);
    for (std::size_t i = 0; i < fd.size(); ++i) CHECK(close(analytic[i], fd[i], 1e-5, 1e-10));
}
