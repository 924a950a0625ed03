#include "membed/checkpoint.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>
#include <zlib.h>

#include "membed/binio.hpp"
#include "membed/errors.hpp"

namespace membed {

namespace {

constexpr char kMagic[4] = {'M', 'E', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint8_t kDtypeF64 = 0;

std::uint32_t crc_of(const std::uint8_t* data, std::size_t size) {
    return static_cast<std::uint32_t>(
        ::crc32(::crc32(0L, Z_NULL, 0), data, static_cast<uInt>(size)));
}

struct TensorRef {
    std::string name;
    std::vector<std::uint64_t> shape;
    const double* data;
    std::size_t count;
};

std::vector<TensorRef> tensor_table(const ModelParts& parts) {
    std::vector<TensorRef> refs;
    const auto& head = parts.head;
    for (int b = 0; b < head.num_branches; ++b) {
        const std::string tag = "head.branch" + std::to_string(b);
        refs.push_back({tag + ".weight",
                        {head.weights[b].rows(), head.weights[b].cols()},
                        head.weights[b].data(),
                        head.weights[b].size()});
        refs.push_back({tag + ".bias",
                        {head.biases[b].size()},
                        head.biases[b].data(),
                        head.biases[b].size()});
    }
    refs.push_back({"arcface.weight",
                    {parts.arcface.weight.rows(), parts.arcface.weight.cols()},
                    parts.arcface.weight.data(),
                    parts.arcface.weight.size()});
    refs.push_back({"backbone.weight",
                    {parts.backbone.weight.rows(), parts.backbone.weight.cols()},
                    parts.backbone.weight.data(),
                    parts.backbone.weight.size()});
    refs.push_back({"backbone.bias",
                    {parts.backbone.bias.size()},
                    parts.backbone.bias.data(),
                    parts.backbone.bias.size()});
    return refs;
}

// RNG words as decimal strings; JSON numbers cannot hold full u64 precision.
nlohmann::json rng_to_json(const std::array<std::uint64_t, 6>& words) {
    nlohmann::json arr = nlohmann::json::array();
    for (std::uint64_t w : words) arr.push_back(std::to_string(w));
    return arr;
}

std::array<std::uint64_t, 6> rng_from_json(const nlohmann::json& arr) {
    if (!arr.is_array() || arr.size() != 6)
        throw IoError("checkpoint: rng state must be 6 words");
    std::array<std::uint64_t, 6> words{};
    for (std::size_t i = 0; i < 6; ++i)
        words[i] = std::stoull(arr[i].get<std::string>());
    return words;
}

std::vector<std::uint8_t> read_all(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
}

struct RawCheckpoint {
    nlohmann::json meta;
    std::vector<CheckpointEntry> entries;
    std::vector<std::uint64_t> offsets;  // into payload, in f64 units
    const std::uint8_t* payload = nullptr;
    std::uint64_t payload_count = 0;  // f64 units
    std::uint32_t crc = 0;
    bool crc_ok = false;
};

RawCheckpoint parse(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    binio::Reader r(bytes.data(), bytes.size(), path);
    const std::uint8_t* magic = r.take(4);
    if (!std::equal(magic, magic + 4, kMagic))
        throw BadMagicError(path + ": not a checkpoint (bad magic)");
    const std::uint32_t version = r.u32();
    if (version != kVersion)
        throw UnsupportedVersionError(path + ": unsupported checkpoint version " +
                                      std::to_string(version));

    const std::size_t covered_start = r.pos();

    const std::uint64_t meta_len = r.u64();
    const std::uint8_t* meta_bytes = r.take(meta_len);
    RawCheckpoint raw;
    raw.meta = nlohmann::json::parse(meta_bytes, meta_bytes + meta_len, nullptr, false);
    if (raw.meta.is_discarded()) throw IoError(path + ": checkpoint metadata is not valid JSON");

    const std::uint64_t tensor_count = r.u64();
    std::uint64_t payload_count = 0;
    for (std::uint64_t t = 0; t < tensor_count; ++t) {
        CheckpointEntry entry;
        const std::uint64_t name_len = r.u64();
        const std::uint8_t* name = r.take(name_len);
        entry.name.assign(reinterpret_cast<const char*>(name), name_len);
        const std::uint8_t dtype = *r.take(1);
        if (dtype != kDtypeF64)
            throw UnsupportedVersionError(path + ": tensor " + entry.name +
                                          " has unsupported dtype " + std::to_string(dtype));
        const std::uint64_t ndim = r.u64();
        entry.count = 1;
        for (std::uint64_t d = 0; d < ndim; ++d) {
            entry.shape.push_back(r.u64());
            entry.count *= entry.shape.back();
        }
        const std::uint64_t offset = r.u64();
        if (offset != payload_count)
            throw IoError(path + ": tensor " + entry.name + " has inconsistent offset");
        payload_count += entry.count;
        raw.offsets.push_back(offset);
        raw.entries.push_back(std::move(entry));
    }

    raw.payload = r.take(payload_count * 8);
    raw.payload_count = payload_count;

    const std::size_t covered_end = r.pos();
    raw.crc = r.u32();
    raw.crc_ok = raw.crc == crc_of(bytes.data() + covered_start, covered_end - covered_start);
    return raw;
}

double read_f64_at(const std::uint8_t* payload, std::uint64_t index) {
    std::uint64_t v = 0;
    const std::uint8_t* p = payload + index * 8;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return std::bit_cast<double>(v);
}

const CheckpointEntry& find_entry(const RawCheckpoint& raw, const std::string& path,
                                  const std::string& name, std::uint64_t* offset) {
    for (std::size_t i = 0; i < raw.entries.size(); ++i) {
        if (raw.entries[i].name == name) {
            *offset = raw.offsets[i];
            return raw.entries[i];
        }
    }
    throw MissingTensorError(path + ": tensor " + name + " missing from checkpoint");
}

Matrix load_matrix(const RawCheckpoint& raw, const std::string& path,
                   const std::string& name) {
    std::uint64_t offset = 0;
    const CheckpointEntry& entry = find_entry(raw, path, name, &offset);
    if (entry.shape.size() != 2)
        throw IoError(path + ": tensor " + name + " is not 2-d");
    Matrix m(entry.shape[0], entry.shape[1]);
    for (std::uint64_t i = 0; i < entry.count; ++i)
        m.data()[i] = read_f64_at(raw.payload, offset + i);
    return m;
}

std::vector<double> load_vector(const RawCheckpoint& raw, const std::string& path,
                                const std::string& name) {
    std::uint64_t offset = 0;
    const CheckpointEntry& entry = find_entry(raw, path, name, &offset);
    if (entry.shape.size() != 1)
        throw IoError(path + ": tensor " + name + " is not 1-d");
    std::vector<double> v(entry.count);
    for (std::uint64_t i = 0; i < entry.count; ++i)
        v[i] = read_f64_at(raw.payload, offset + i);
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelParts& parts,
                     const TrainConfig& cfg, const RngStates& rng) {
    const nlohmann::json meta{{"stage", cfg.stage},
                              {"config", config_to_json(cfg)},
                              {"rng", nlohmann::json{{"data", rng_to_json(rng.data)},
                                                     {"dropout", rng_to_json(rng.dropout)}}}};
    const std::string meta_str = meta.dump();
    const auto refs = tensor_table(parts);

    std::vector<std::uint8_t> covered;
    binio::put_u64(covered, meta_str.size());
    covered.insert(covered.end(), meta_str.begin(), meta_str.end());
    binio::put_u64(covered, refs.size());
    std::uint64_t offset = 0;
    for (const auto& ref : refs) {
        binio::put_u64(covered, ref.name.size());
        covered.insert(covered.end(), ref.name.begin(), ref.name.end());
        covered.push_back(kDtypeF64);
        binio::put_u64(covered, ref.shape.size());
        for (std::uint64_t d : ref.shape) binio::put_u64(covered, d);
        binio::put_u64(covered, offset);
        offset += ref.count;
    }
    for (const auto& ref : refs)
        for (std::size_t i = 0; i < ref.count; ++i) binio::put_f64(covered, ref.data[i]);

    std::vector<std::uint8_t> out;
    out.reserve(covered.size() + 12);
    out.insert(out.end(), kMagic, kMagic + 4);
    binio::put_u32(out, kVersion);
    out.insert(out.end(), covered.begin(), covered.end());
    binio::put_u32(out, crc_of(covered.data(), covered.size()));

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char*>(out.data()),
            static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("short write to " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    const auto bytes = read_all(path);
    const RawCheckpoint raw = parse(path, bytes);
    if (!raw.crc_ok) throw CrcMismatchError(path + ": checkpoint CRC mismatch");

    LoadedCheckpoint loaded;
    loaded.config = config_from_json(raw.meta.at("config"));
    loaded.stage = raw.meta.at("stage").get<int>();
    loaded.rng.data = rng_from_json(raw.meta.at("rng").at("data"));
    loaded.rng.dropout = rng_from_json(raw.meta.at("rng").at("dropout"));

    ModelParts& parts = loaded.parts;
    const TrainConfig& cfg = loaded.config;

    HeadParams& head = parts.head;
    head.num_branches = cfg.branches;
    head.out_dim = cfg.embed_dim;
    head.dropout_rates =
        cfg.dropout_rates.empty() ? default_dropout_rates(cfg.branches) : cfg.dropout_rates;
    for (int b = 0; b < cfg.branches; ++b) {
        const std::string tag = "head.branch" + std::to_string(b);
        head.weights.push_back(load_matrix(raw, path, tag + ".weight"));
        head.biases.push_back(load_vector(raw, path, tag + ".bias"));
        if (head.weights.back().cols() != static_cast<std::size_t>(cfg.embed_dim) ||
            head.biases.back().size() != static_cast<std::size_t>(cfg.embed_dim))
            throw IoError(path + ": " + tag + " width disagrees with configured embed_dim");
    }
    head.in_dim = static_cast<int>(head.weights[0].rows());

    parts.arcface.weight = load_matrix(raw, path, "arcface.weight");
    parts.arcface.num_classes =
        static_cast<int>(parts.arcface.weight.rows()) / cfg.subcenters;
    parts.arcface.subcenters = cfg.subcenters;
    parts.arcface.scale = cfg.scale;
    parts.arcface.margin = cfg.margin;
    parts.arcface.easy_margin = cfg.easy_margin;
    validate_arcface(parts.arcface);

    parts.backbone.weight = load_matrix(raw, path, "backbone.weight");
    parts.backbone.bias = load_vector(raw, path, "backbone.bias");
    parts.backbone.frozen = loaded.stage == 1;
    return loaded;
}

CheckpointSummary inspect_checkpoint(const std::string& path) {
    const auto bytes = read_all(path);
    const RawCheckpoint raw = parse(path, bytes);
    CheckpointSummary summary;
    summary.version = kVersion;
    summary.stage = raw.meta.value("stage", 0);
    summary.tensors = raw.entries;
    summary.crc = raw.crc;
    summary.crc_ok = raw.crc_ok;
    summary.meta_json = raw.meta.dump(2);
    return summary;
}

void export_checkpoint(const std::string& checkpoint_path, const std::string& out_dir) {
    const auto bytes = read_all(checkpoint_path);
    const RawCheckpoint raw = parse(checkpoint_path, bytes);
    if (!raw.crc_ok) throw CrcMismatchError(checkpoint_path + ": checkpoint CRC mismatch");

    std::filesystem::create_directories(out_dir);
    nlohmann::json manifest;
    manifest["source"] = checkpoint_path;
    manifest["dtype"] = "f64";
    manifest["byte_order"] = "little";
    manifest["stage"] = raw.meta.value("stage", 0);
    manifest["config"] = raw.meta.at("config");
    nlohmann::json tensors = nlohmann::json::array();
    for (std::size_t i = 0; i < raw.entries.size(); ++i) {
        const CheckpointEntry& entry = raw.entries[i];
        std::string file = entry.name;
        std::replace(file.begin(), file.end(), '.', '_');
        file += ".bin";
        const std::string full = (std::filesystem::path(out_dir) / file).string();
        std::ofstream f(full, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot open " + full + " for writing");
        f.write(reinterpret_cast<const char*>(raw.payload + raw.offsets[i] * 8),
                static_cast<std::streamsize>(entry.count * 8));
        if (!f) throw IoError("short write to " + full);
        tensors.push_back(nlohmann::json{
            {"name", entry.name}, {"file", file}, {"shape", entry.shape}, {"count", entry.count}});
    }
    manifest["tensors"] = tensors;
    const std::string manifest_path =
        (std::filesystem::path(out_dir) / "manifest.json").string();
    std::ofstream mf(manifest_path, std::ios::trunc);
    if (!mf) throw IoError("cannot open " + manifest_path + " for writing");
    mf << manifest.dump(2) << "\n";
}

}  // namespace membed
