#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "membed/matrix.hpp"

namespace membed {

// Labeled feature matrix: N rows of D activations plus a dense class label
// per row. Immutable by convention once built; stands in for precomputed
// backbone outputs during head-only training.
struct FeatureSet {
    Matrix features;          // N x D
    std::vector<int> labels;  // length N, values in [0, num_classes)
    int num_classes = 0;

    std::size_t size() const { return features.rows(); }
    std::size_t dim() const { return features.cols(); }
};

// Throws if labels are out of range, counts disagree, or a feature value is
// non-finite.
void validate_feature_set(const FeatureSet& fs);

// Deterministic labeled Gaussian clusters: class means drawn from a seeded
// standard normal and L2-normalized, samples = mean + noise_sigma * normal.
// Unit-norm means make noise_sigma directly interpretable as cluster spread.
FeatureSet generate_synthetic(int num_classes, int per_class, int dim,
                              double noise_sigma, std::uint64_t seed);

struct SplitSpec {
    double query_fraction = 0.2;  // in (0,1)
    std::uint64_t seed = 0;
};

struct SplitReport {
    std::size_t n_index = 0;
    std::size_t n_queries = 0;
    std::vector<std::size_t> queries_per_class;
    std::vector<int> singleton_classes;  // kept whole in the index
    double query_fraction = 0.0;
    std::uint64_t seed = 0;
};

struct SplitResult {
    FeatureSet index;
    FeatureSet queries;
    SplitReport report;
};

// Deterministic stratified index/query split. The query count targets
// round(query_fraction * N), never below 1; per-class quotas are assigned by
// largest remainder and capped at n_c - 1 so every class with >= 2 members
// keeps at least one index row. Single-member classes stay in the index and
// are listed in the report. Throws if the query partition would be empty.
SplitResult split(const FeatureSet& fs, const SplitSpec& spec);

// Gathers the given rows (and their labels) into a dense batch.
std::pair<Matrix, std::vector<int>> gather_rows(const FeatureSet& fs,
                                                const std::vector<std::size_t>& rows);

// Binary feature file: magic "MEFS", format version, N/D/C header, row-major
// f64 features, i32 labels, all little-endian, trailing CRC32 of the payload
// (feature bytes + label bytes). A JSON sidecar manifest is written next to
// the file; `provenance` is merged into it when given.
void write_feature_set(const FeatureSet& fs, const std::string& path,
                       const nlohmann::json* provenance = nullptr);
FeatureSet read_feature_set(const std::string& path);

SplitReport split_report_from_json(const nlohmann::json& j);
nlohmann::json split_report_to_json(const SplitReport& r);

}  // namespace membed
