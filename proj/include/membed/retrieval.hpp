#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "membed/dataio.hpp"
#include "membed/matrix.hpp"

namespace membed {

// Immutable exact-search index: unit-norm embedding rows, one label and one
// stable id (the build-time row position) per row.
struct RetrievalIndex {
    Matrix embeddings;  // N x E, rows unit norm
    std::vector<int> labels;
    std::vector<std::int64_t> ids;
};

// Normalizes rows (degenerate rows are an error) and assigns ids 0..N-1.
RetrievalIndex build_index(const Matrix& emb, const std::vector<int>& labels);

// Ids of the k highest-cosine rows, descending similarity; exact ties break
// by ascending id. Throws when k > N.
std::vector<std::int64_t> knn(const RetrievalIndex& index, const std::vector<double>& query,
                              std::size_t k);

enum class PrecisionVariant { capped, plain };

struct EvalSpec {
    std::size_t k = 5;
    PrecisionVariant variant = PrecisionVariant::capped;
    bool skip_unanswerable = true;  // queries whose label is absent from the index
};

// Mean precision at k over the query set. For each query with n_q same-label
// index rows: hits = same-label count among the top-min(k, N) neighbors;
// capped precision = hits/min(n_q, k), plain = hits/k. Queries with n_q = 0
// are skipped (or scored 0 when skip_unanswerable is off). Both variants are
// always computed; `score` is the one `variant` selects.
struct EvalReport {
    double score = 0.0;
    double score_capped = 0.0;
    double score_plain = 0.0;
    std::vector<double> per_query_capped;
    std::vector<double> per_query_plain;
    std::size_t k = 0;
    std::size_t n_index = 0;
    std::size_t n_queries = 0;
    std::size_t skipped_queries = 0;
    PrecisionVariant variant = PrecisionVariant::capped;
};

EvalReport mean_precision_at_k(const RetrievalIndex& index, const FeatureSet& queries,
                               const EvalSpec& spec);

nlohmann::json eval_report_to_json(const EvalReport& report);

}  // namespace membed
