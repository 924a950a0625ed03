#include "membed/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "membed/errors.hpp"
#include "membed/numerics.hpp"

namespace membed {

RetrievalIndex build_index(const Matrix& emb, const std::vector<int>& labels) {
    if (emb.rows() == 0) throw ValueError("build_index: empty embedding matrix");
    if (labels.size() != emb.rows())
        throw DimensionError("build_index: one label per embedding row required");
    RetrievalIndex index;
    index.embeddings = l2_normalize_rows(emb);
    index.labels = labels;
    index.ids.resize(emb.rows());
    std::iota(index.ids.begin(), index.ids.end(), 0);
    return index;
}

namespace {

std::vector<double> similarities(const RetrievalIndex& index,
                                 const std::vector<double>& query) {
    const std::size_t e = index.embeddings.cols();
    if (query.size() != e)
        throw DimensionError("knn: query has dimension " + std::to_string(query.size()) +
                             ", index has " + std::to_string(e));
    double sq = 0.0;
    for (double v : query) sq += v * v;
    const double norm = std::sqrt(sq);
    if (!(norm >= 1e-12)) throw DegenerateRowError("knn: degenerate query vector", 0);

    std::vector<double> sims(index.embeddings.rows());
    for (std::size_t i = 0; i < sims.size(); ++i) {
        const double* row = index.embeddings.row(i);
        double dot = 0.0;
        for (std::size_t j = 0; j < e; ++j) dot += row[j] * query[j];
        sims[i] = dot / norm;
    }
    return sims;
}

}  // namespace

std::vector<std::int64_t> knn(const RetrievalIndex& index, const std::vector<double>& query,
                              std::size_t k) {
    const std::size_t n = index.embeddings.rows();
    if (k < 1 || k > n)
        throw ValueError("knn: k must lie in [1, " + std::to_string(n) + "], got " +
                         std::to_string(k));
    const std::vector<double> sims = similarities(index, query);

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + k, order.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (sims[a] != sims[b]) return sims[a] > sims[b];
                          return index.ids[a] < index.ids[b];
                      });
    std::vector<std::int64_t> result(k);
    for (std::size_t i = 0; i < k; ++i) result[i] = index.ids[order[i]];
    return result;
}

EvalReport mean_precision_at_k(const RetrievalIndex& index, const FeatureSet& queries,
                               const EvalSpec& spec) {
    const std::size_t n = index.embeddings.rows();
    if (n == 0) throw ValueError("mean_precision_at_k: empty index");
    if (queries.size() == 0) throw ValueError("mean_precision_at_k: empty query set");
    if (spec.k < 1) throw ValueError("mean_precision_at_k: k must be >= 1");
    if (queries.dim() != index.embeddings.cols())
        throw DimensionError("mean_precision_at_k: query dimension mismatch");

    std::vector<std::size_t> label_counts;
    for (int l : index.labels) {
        if (l >= static_cast<int>(label_counts.size())) label_counts.resize(l + 1, 0);
        if (l >= 0) ++label_counts[l];
    }

    EvalReport report;
    report.k = spec.k;
    report.variant = spec.variant;
    report.n_index = n;
    report.n_queries = queries.size();

    const std::size_t retrieve = std::min(spec.k, n);
    double sum_capped = 0.0, sum_plain = 0.0;
    std::size_t scored = 0;
    for (std::size_t q = 0; q < queries.size(); ++q) {
        const int label = queries.labels[q];
        const std::size_t n_q =
            label >= 0 && label < static_cast<int>(label_counts.size()) ? label_counts[label]
                                                                        : 0;
        if (n_q == 0) {
            if (spec.skip_unanswerable) {
                ++report.skipped_queries;
                continue;
            }
            report.per_query_capped.push_back(0.0);
            report.per_query_plain.push_back(0.0);
            ++scored;
            continue;
        }
        const std::vector<double> qvec(queries.features.row(q),
                                       queries.features.row(q) + queries.dim());
        const auto top = knn(index, qvec, retrieve);
        std::size_t hits = 0;
        for (std::int64_t id : top)
            if (index.labels[static_cast<std::size_t>(id)] == label) ++hits;
        const double capped = double(hits) / double(std::min(n_q, spec.k));
        const double plain = double(hits) / double(spec.k);
        report.per_query_capped.push_back(capped);
        report.per_query_plain.push_back(plain);
        sum_capped += capped;
        sum_plain += plain;
        ++scored;
    }
    if (scored == 0)
        throw ValueError("mean_precision_at_k: every query was unanswerable, nothing to score");
    report.score_capped = sum_capped / double(scored);
    report.score_plain = sum_plain / double(scored);
    report.score =
        spec.variant == PrecisionVariant::capped ? report.score_capped : report.score_plain;
    return report;
}

nlohmann::json eval_report_to_json(const EvalReport& report) {
    return nlohmann::json{
        {"score", report.score},
        {"score_capped", report.score_capped},
        {"score_plain", report.score_plain},
        {"variant", report.variant == PrecisionVariant::capped ? "capped" : "plain"},
        {"k", report.k},
        {"n_index", report.n_index},
        {"n_queries", report.n_queries},
        {"skipped_queries", report.skipped_queries},
        {"per_query_capped", report.per_query_capped},
        {"per_query_plain", report.per_query_plain},
    };
}

}  // namespace membed
