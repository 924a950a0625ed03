#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "membed/dataio.hpp"
#include "membed/errors.hpp"
#include "membed/rng.hpp"
#include "oracles.hpp"

using namespace membed;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const char* name) {
    const fs::path dir = fs::temp_directory_path() / "membed_dataio_tests";
    fs::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST_CASE("generate_synthetic: zero noise duplicates the class mean") {
    const FeatureSet fs = generate_synthetic(4, 3, 8, 0.0, 7);
    REQUIRE(fs.size() == 12);
    REQUIRE(fs.dim() == 8);
    REQUIRE(fs.num_classes == 4);
    for (int c = 0; c < 4; ++c) {
        const double* first = fs.features.row(c * 3);
        for (int i = 1; i < 3; ++i) {
            const double* other = fs.features.row(c * 3 + i);
            for (int j = 0; j < 8; ++j) CHECK(first[j] == other[j]);
        }
        for (int i = 0; i < 3; ++i) CHECK(fs.labels[c * 3 + i] == c);
    }
}

TEST_CASE("generate_synthetic: bit-identical replay, argument validation") {
    const FeatureSet a = generate_synthetic(5, 4, 6, 0.3, 42);
    const FeatureSet b = generate_synthetic(5, 4, 6, 0.3, 42);
    CHECK(a.features == b.features);
    CHECK(a.labels == b.labels);

    const FeatureSet c = generate_synthetic(5, 4, 6, 0.3, 43);
    CHECK_FALSE(a.features == c.features);

    CHECK_THROWS_AS(generate_synthetic(1, 4, 6, 0.3, 1), ValueError);
    CHECK_THROWS_AS(generate_synthetic(5, 0, 6, 0.3, 1), ValueError);
    CHECK_THROWS_AS(generate_synthetic(5, 4, 6, -0.1, 1), ValueError);
    const double inf = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(generate_synthetic(5, 4, 6, inf, 1), ValueError);
}

TEST_CASE("generate_synthetic: oracle task is solved by identity embedding") {
    // 16 clusters of 20 around unit-norm means, noise 0.05: every query's five
    // nearest neighbors by brute-force cosine scan share its label.
    const FeatureSet fs = generate_synthetic(16, 20, 64, 0.05, 1);
    REQUIRE(fs.size() == 320);
    double total = 0.0;
    for (std::size_t q = 0; q < fs.size(); ++q) {
        std::vector<double> query(fs.features.row(q), fs.features.row(q) + fs.dim());
        // Leave-one-out: exclude the query row itself via k=6 then drop it.
        const auto ids = oracles::brute_force_knn(fs.features, query, 6);
        std::size_t hits = 0, used = 0;
        for (std::int64_t id : ids) {
            if (static_cast<std::size_t>(id) == q) continue;
            if (used == 5) break;
            ++used;
            hits += fs.labels[static_cast<std::size_t>(id)] == fs.labels[q];
        }
        total += double(hits) / 5.0;
    }
    CHECK(total / double(fs.size()) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("generate_synthetic: zero-noise nearest neighbor is same-class") {
    const FeatureSet fs = generate_synthetic(6, 3, 10, 0.0, 99);
    for (std::size_t q = 0; q < fs.size(); ++q) {
        std::vector<double> query(fs.features.row(q), fs.features.row(q) + fs.dim());
        const auto ids = oracles::brute_force_knn(fs.features, query, 2);
        // Rank 1 may be the query itself (identical vectors); both of the top
        // two must share the class either way.
        for (std::int64_t id : ids)
            CHECK(fs.labels[static_cast<std::size_t>(id)] == fs.labels[q]);
    }
}

TEST_CASE("split: counts, disjointness, determinism") {
    const FeatureSet fs = generate_synthetic(5, 2, 4, 0.1, 3);  // N=10
    const SplitResult r = split(fs, {0.2, 11});
    CHECK(r.queries.size() == 2);
    CHECK(r.index.size() == 8);
    CHECK(r.report.n_queries == 2);

    // Row identity: every original row lands in exactly one partition.
    // Rows are unique with overwhelming probability under gaussian noise.
    std::set<std::vector<double>> seen;
    const auto collect = [&](const FeatureSet& part) {
        for (std::size_t i = 0; i < part.size(); ++i) {
            std::vector<double> row(part.features.row(i), part.features.row(i) + part.dim());
            CHECK(seen.insert(row).second);  // no duplicates across partitions
        }
    };
    collect(r.index);
    collect(r.queries);
    CHECK(seen.size() == fs.size());

    const SplitResult again = split(fs, {0.2, 11});
    CHECK(again.index.features == r.index.features);
    CHECK(again.queries.features == r.queries.features);
    CHECK(again.index.labels == r.index.labels);
}

TEST_CASE("split: tiny fraction rounds the query count up to one") {
    const FeatureSet fs = generate_synthetic(5, 2, 4, 0.1, 3);  // N=10
    const SplitResult r = split(fs, {0.01, 1});
    CHECK(r.queries.size() == 1);
    CHECK(r.index.size() == 9);
}

TEST_CASE("split: 4 classes x 5 keeps at least 4 index members per class") {
    const FeatureSet fs = generate_synthetic(4, 5, 6, 0.2, 8);
    const SplitResult r = split(fs, {0.2, 3});
    std::vector<int> per_class(4, 0);
    for (int l : r.index.labels) ++per_class[l];
    for (int c = 0; c < 4; ++c) CHECK(per_class[c] >= 4);
    CHECK(r.queries.size() == 4);

    const SplitResult again = split(fs, {0.2, 3});
    CHECK(again.index.features == r.index.features);
    CHECK(again.queries.features == r.queries.features);
}

TEST_CASE("split: singleton class stays in the index and is reported") {
    // Three classes: sizes 1, 3, 4.
    FeatureSet fs;
    fs.num_classes = 3;
    fs.features = Matrix(8, 3);
    Rng rng(21, 1);
    for (std::size_t i = 0; i < fs.features.size(); ++i) fs.features.data()[i] = rng.normal();
    fs.labels = {0, 1, 1, 1, 2, 2, 2, 2};

    const SplitResult r = split(fs, {0.25, 5});
    CHECK(std::count(r.index.labels.begin(), r.index.labels.end(), 0) == 1);
    CHECK(std::count(r.queries.labels.begin(), r.queries.labels.end(), 0) == 0);
    REQUIRE(r.report.singleton_classes.size() == 1);
    CHECK(r.report.singleton_classes[0] == 0);

    CHECK_THROWS_AS(split(fs, {0.0, 5}), ValueError);
    CHECK_THROWS_AS(split(fs, {1.0, 5}), ValueError);
}

TEST_CASE("split: all-singleton data cannot produce a query partition") {
    FeatureSet fs;
    fs.num_classes = 4;
    fs.features = Matrix(4, 2, 1.0);
    fs.features(1, 0) = 2.0;
    fs.features(2, 0) = 3.0;
    fs.features(3, 0) = 4.0;
    fs.labels = {0, 1, 2, 3};
    CHECK_THROWS_AS(split(fs, {0.5, 1}), ValueError);
}

TEST_CASE("feature file: 100 random round trips are bit-identical") {
    Rng rng(31, 1);
    const fs::path path = temp_file("roundtrip.mefs");
    for (int trial = 0; trial < 100; ++trial) {
        const int classes = 2 + static_cast<int>(rng.below(5));
        const int per = 1 + static_cast<int>(rng.below(4));
        const int dim = 1 + static_cast<int>(rng.below(9));
        const FeatureSet fs_in =
            generate_synthetic(classes, per, dim, 0.5 * rng.uniform(), rng.next_u64());
        write_feature_set(fs_in, path.string());
        const FeatureSet fs_out = read_feature_set(path.string());
        REQUIRE(fs_out.features == fs_in.features);
        REQUIRE(fs_out.labels == fs_in.labels);
        REQUIRE(fs_out.num_classes == fs_in.num_classes);
    }
}

TEST_CASE("feature file: sidecar manifest is written and parses") {
    const fs::path path = temp_file("sidecar.mefs");
    const FeatureSet fs_in = generate_synthetic(3, 2, 4, 0.1, 5);
    const nlohmann::json prov{{"seed", 5}};
    write_feature_set(fs_in, path.string(), &prov);
    std::ifstream side(path.string() + ".json");
    REQUIRE(side.good());
    nlohmann::json manifest;
    side >> manifest;
    CHECK(manifest.at("n").get<std::size_t>() == 6);
    CHECK(manifest.at("dim").get<std::size_t>() == 4);
    CHECK(manifest.at("num_classes").get<int>() == 3);
    CHECK(manifest.at("provenance").at("seed").get<int>() == 5);
}

TEST_CASE("feature file: corruption and truncation are distinct errors") {
    const fs::path path = temp_file("corrupt.mefs");
    const FeatureSet fs_in = generate_synthetic(3, 3, 5, 0.2, 9);
    write_feature_set(fs_in, path.string());

    // Flip one payload byte.
    {
        std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(40);  // inside the feature payload
        char b;
        f.seekg(40);
        f.get(b);
        f.seekp(40);
        f.put(static_cast<char>(b ^ 0x01));
    }
    CHECK_THROWS_AS(read_feature_set(path.string()), CrcMismatchError);

    // Empty file.
    const fs::path empty = temp_file("empty.mefs");
    std::ofstream(empty.string(), std::ios::trunc).close();
    CHECK_THROWS_AS(read_feature_set(empty.string()), TruncatedFileError);

    // Truncated payload.
    write_feature_set(fs_in, path.string());
    const auto full_size = fs::file_size(path);
    fs::resize_file(path, full_size - 5);
    CHECK_THROWS_AS(read_feature_set(path.string()), TruncatedFileError);

    // Bad magic.
    write_feature_set(fs_in, path.string());
    {
        std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(0);
        f.put('X');
    }
    CHECK_THROWS_AS(read_feature_set(path.string()), BadMagicError);

    // Unsupported version.
    write_feature_set(fs_in, path.string());
    {
        std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(4);
        f.put(static_cast<char>(99));
    }
    CHECK_THROWS_AS(read_feature_set(path.string()), UnsupportedVersionError);

    // Missing file.
    CHECK_THROWS_AS(read_feature_set("/nonexistent/nope.mefs"), IoError);
}

TEST_CASE("gather_rows picks the requested rows in order") {
    const FeatureSet fs = generate_synthetic(3, 2, 4, 0.1, 2);
    const auto [m, labels] = gather_rows(fs, {5, 0, 2});
    REQUIRE(m.rows() == 3);
    CHECK(labels[0] == fs.labels[5]);
    CHECK(labels[1] == fs.labels[0]);
    CHECK(labels[2] == fs.labels[2]);
    for (std::size_t j = 0; j < fs.dim(); ++j) {
        CHECK(m(0, j) == fs.features(5, j));
        CHECK(m(1, j) == fs.features(0, j));
    }
    CHECK_THROWS_AS(gather_rows(fs, {99}), ValueError);
}
