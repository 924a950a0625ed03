#include "membed/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>
#include <zlib.h>

#include "membed/binio.hpp"
#include "membed/errors.hpp"
#include "membed/numerics.hpp"
#include "membed/rng.hpp"

namespace membed {

namespace {

constexpr char kMagic[4] = {'M', 'E', 'F', 'S'};
constexpr std::uint32_t kVersion = 1;

std::uint32_t crc_of(const std::uint8_t* data, std::size_t size) {
    return static_cast<std::uint32_t>(
        ::crc32(::crc32(0L, Z_NULL, 0), data, static_cast<uInt>(size)));
}

std::vector<std::uint8_t> read_all(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return bytes;
}

}  // namespace

void validate_feature_set(const FeatureSet& fs) {
    if (fs.size() == 0 || fs.dim() == 0)
        throw ValueError("feature set must have N >= 1 and D >= 1");
    if (fs.labels.size() != fs.size())
        throw DimensionError("feature set has " + std::to_string(fs.size()) +
                             " rows but " + std::to_string(fs.labels.size()) + " labels");
    if (fs.num_classes <= 0) throw ValueError("num_classes must be positive");
    for (std::size_t i = 0; i < fs.labels.size(); ++i) {
        const int l = fs.labels[i];
        if (l < 0 || l >= fs.num_classes)
            throw ValueError("label " + std::to_string(l) + " at row " + std::to_string(i) +
                             " outside [0, " + std::to_string(fs.num_classes) + ")");
    }
    if (!all_finite(fs.features)) throw NonFiniteError("feature matrix has non-finite entries");
}

FeatureSet generate_synthetic(int num_classes, int per_class, int dim,
                              double noise_sigma, std::uint64_t seed) {
    if (num_classes < 2) throw ValueError("generate_synthetic: num_classes must be >= 2");
    if (per_class < 1) throw ValueError("generate_synthetic: per_class must be >= 1");
    if (dim < 1) throw ValueError("generate_synthetic: dim must be >= 1");
    if (!(std::isfinite(noise_sigma) && noise_sigma >= 0.0))
        throw ValueError("generate_synthetic: noise_sigma must be finite and >= 0");

    Rng rng(seed, Rng::kStreamData);

    Matrix means(num_classes, dim);
    for (std::size_t i = 0; i < means.size(); ++i) means.data()[i] = rng.normal();
    means = l2_normalize_rows(means);

    FeatureSet fs;
    fs.num_classes = num_classes;
    fs.features = Matrix(static_cast<std::size_t>(num_classes) * per_class, dim);
    fs.labels.resize(fs.features.rows());
    std::size_t row = 0;
    for (int c = 0; c < num_classes; ++c) {
        for (int i = 0; i < per_class; ++i, ++row) {
            double* dst = fs.features.row(row);
            const double* mean = means.row(c);
            for (int j = 0; j < dim; ++j) dst[j] = mean[j] + noise_sigma * rng.normal();
            fs.labels[row] = c;
        }
    }
    return fs;
}

SplitResult split(const FeatureSet& fs, const SplitSpec& spec) {
    validate_feature_set(fs);
    if (!(spec.query_fraction > 0.0 && spec.query_fraction < 1.0))
        throw ValueError("split: query_fraction must lie in (0,1)");

    const std::size_t n = fs.size();
    const std::size_t c_count = static_cast<std::size_t>(fs.num_classes);

    std::vector<std::vector<std::size_t>> members(c_count);
    for (std::size_t i = 0; i < n; ++i) members[fs.labels[i]].push_back(i);

    // Target query count, never 0 for a positive fraction.
    std::size_t target = static_cast<std::size_t>(std::llround(spec.query_fraction * double(n)));
    target = std::max<std::size_t>(1, std::min(target, n - 1));

    // Largest-remainder quota per class, capped at n_c - 1 so each populated
    // class keeps an index member.
    std::vector<std::size_t> quota(c_count, 0);
    std::vector<double> remainder(c_count, 0.0);
    std::size_t assigned = 0;
    for (std::size_t c = 0; c < c_count; ++c) {
        const std::size_t nc = members[c].size();
        const std::size_t cap = nc > 0 ? nc - 1 : 0;
        const double exact = double(target) * double(nc) / double(n);
        quota[c] = std::min(static_cast<std::size_t>(exact), cap);
        remainder[c] = exact - double(quota[c]);
        assigned += quota[c];
    }
    std::vector<std::size_t> order(c_count);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return remainder[a] > remainder[b];
    });
    for (std::size_t pass = 0; assigned < target; ++pass) {
        bool grew = false;
        for (std::size_t c : order) {
            if (assigned >= target) break;
            const std::size_t nc = members[c].size();
            if (nc > 0 && quota[c] < nc - 1) {
                ++quota[c];
                ++assigned;
                grew = true;
            }
        }
        if (!grew) break;  // every class saturated at n_c - 1
    }
    if (assigned == 0)
        throw ValueError("split: no class has >= 2 members, query partition would be empty");

    // Seeded within-class shuffle picks which members become queries.
    Rng rng(spec.seed, Rng::kStreamData);
    std::vector<char> is_query(n, 0);
    SplitReport report;
    report.query_fraction = spec.query_fraction;
    report.seed = spec.seed;
    report.queries_per_class.assign(c_count, 0);
    for (std::size_t c = 0; c < c_count; ++c) {
        auto& rows = members[c];
        if (rows.size() == 1) report.singleton_classes.push_back(static_cast<int>(c));
        for (std::size_t i = rows.size(); i > 1; --i)
            std::swap(rows[i - 1], rows[rng.below(i)]);
        for (std::size_t i = 0; i < quota[c]; ++i) is_query[rows[i]] = 1;
        report.queries_per_class[c] = quota[c];
    }

    std::vector<std::size_t> index_rows, query_rows;
    for (std::size_t i = 0; i < n; ++i)
        (is_query[i] ? query_rows : index_rows).push_back(i);

    SplitResult result;
    auto [im, il] = gather_rows(fs, index_rows);
    auto [qm, ql] = gather_rows(fs, query_rows);
    result.index = FeatureSet{std::move(im), std::move(il), fs.num_classes};
    result.queries = FeatureSet{std::move(qm), std::move(ql), fs.num_classes};
    report.n_index = index_rows.size();
    report.n_queries = query_rows.size();
    result.report = std::move(report);
    return result;
}

std::pair<Matrix, std::vector<int>> gather_rows(const FeatureSet& fs,
                                                const std::vector<std::size_t>& rows) {
    Matrix m(rows.size(), fs.dim());
    std::vector<int> labels(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const std::size_t r = rows[i];
        if (r >= fs.size()) throw ValueError("gather_rows: row index out of range");
        std::copy(fs.features.row(r), fs.features.row(r) + fs.dim(), m.row(i));
        labels[i] = fs.labels[r];
    }
    return {std::move(m), std::move(labels)};
}

void write_feature_set(const FeatureSet& fs, const std::string& path,
                       const nlohmann::json* provenance) {
    validate_feature_set(fs);

    std::vector<std::uint8_t> payload;
    payload.reserve(fs.features.size() * 8 + fs.labels.size() * 4);
    for (std::size_t i = 0; i < fs.features.size(); ++i)
        binio::put_f64(payload, fs.features.data()[i]);
    for (int l : fs.labels) binio::put_i32(payload, l);

    std::vector<std::uint8_t> out;
    out.reserve(payload.size() + 64);
    out.insert(out.end(), kMagic, kMagic + 4);
    binio::put_u32(out, kVersion);
    binio::put_u64(out, fs.size());
    binio::put_u64(out, fs.dim());
    binio::put_u32(out, static_cast<std::uint32_t>(fs.num_classes));
    out.insert(out.end(), payload.begin(), payload.end());
    binio::put_u32(out, crc_of(payload.data(), payload.size()));

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char*>(out.data()),
            static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("short write to " + path);

    nlohmann::json manifest{{"file", path},
                            {"n", fs.size()},
                            {"dim", fs.dim()},
                            {"num_classes", fs.num_classes}};
    if (provenance) manifest["provenance"] = *provenance;
    std::ofstream side(path + ".json", std::ios::trunc);
    if (!side) throw IoError("cannot open " + path + ".json for writing");
    side << manifest.dump(2) << "\n";
}

FeatureSet read_feature_set(const std::string& path) {
    const auto bytes = read_all(path);
    binio::Reader r(bytes.data(), bytes.size(), path);

    const std::uint8_t* magic = r.take(4);
    if (!std::equal(magic, magic + 4, kMagic))
        throw BadMagicError(path + ": not a feature file (bad magic)");
    const std::uint32_t version = r.u32();
    if (version != kVersion)
        throw UnsupportedVersionError(path + ": unsupported feature-file version " +
                                      std::to_string(version));

    const std::uint64_t n = r.u64();
    const std::uint64_t d = r.u64();
    const std::uint32_t c = r.u32();

    const std::size_t payload_start = r.pos();
    const std::size_t payload_size = n * d * 8 + n * 4;
    FeatureSet fs;
    fs.num_classes = static_cast<int>(c);
    fs.features = Matrix(n, d);
    for (std::size_t i = 0; i < fs.features.size(); ++i) fs.features.data()[i] = r.f64();
    fs.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) fs.labels[i] = r.i32();

    const std::uint32_t stored_crc = r.u32();
    const std::uint32_t actual_crc = crc_of(bytes.data() + payload_start, payload_size);
    if (stored_crc != actual_crc)
        throw CrcMismatchError(path + ": payload CRC mismatch (stored " +
                               std::to_string(stored_crc) + ", computed " +
                               std::to_string(actual_crc) + ")");

    validate_feature_set(fs);
    return fs;
}

nlohmann::json split_report_to_json(const SplitReport& r) {
    return nlohmann::json{{"n_index", r.n_index},
                          {"n_queries", r.n_queries},
                          {"queries_per_class", r.queries_per_class},
                          {"singleton_classes_kept_in_index", r.singleton_classes},
                          {"query_fraction", r.query_fraction},
                          {"seed", r.seed}};
}

SplitReport split_report_from_json(const nlohmann::json& j) {
    SplitReport r;
    r.n_index = j.at("n_index").get<std::size_t>();
    r.n_queries = j.at("n_queries").get<std::size_t>();
    r.queries_per_class = j.at("queries_per_class").get<std::vector<std::size_t>>();
    r.singleton_classes = j.at("singleton_classes_kept_in_index").get<std::vector<int>>();
    r.query_fraction = j.at("query_fraction").get<double>();
    r.seed = j.at("seed").get<std::uint64_t>();
    return r;
}

}  // namespace membed
