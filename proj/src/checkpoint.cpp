#include "sparsemem/checkpoint.hpp"

#include <bit>
#include <fstream>

#include "sparsemem/checksum.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are raw little-endian float64");

namespace smem {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

std::string stage_name(StageTag tag) {
    switch (tag) {
        case StageTag::pretrained: return "pretrained";
        case StageTag::retrofitted: return "retrofitted";
        case StageTag::recovered: return "recovered";
        case StageTag::finetuned_dense: return "finetuned-dense";
        case StageTag::finetuned_sparse_tfidf: return "finetuned-sparse-tfidf";
        case StageTag::finetuned_sparse_kl: return "finetuned-sparse-kl";
    }
    throw ContractError("stage_name: bad tag");
}

StageTag stage_from_name(const std::string& name) {
    for (StageTag t : {StageTag::pretrained, StageTag::retrofitted, StageTag::recovered,
                       StageTag::finetuned_dense, StageTag::finetuned_sparse_tfidf,
                       StageTag::finetuned_sparse_kl}) {
        if (stage_name(t) == name) return t;
    }
    throw SchemaError("unknown stage tag '" + name + "'");
}

bool stage_transition_ok(StageTag from, StageTag to) {
    switch (to) {
        case StageTag::pretrained: return false;
        case StageTag::retrofitted: return from == StageTag::pretrained;
        case StageTag::recovered: return from == StageTag::retrofitted;
        case StageTag::finetuned_dense:
        case StageTag::finetuned_sparse_tfidf:
        case StageTag::finetuned_sparse_kl: return from == StageTag::recovered;
    }
    return false;
}

void to_json(ordered_json& j, const TransformerConfig& cfg) {
    j = ordered_json{{"vocab_size", cfg.vocab_size},
                     {"d_model", cfg.d_model},
                     {"d_ff", cfg.d_ff},
                     {"d_key", cfg.d_key},
                     {"layers", cfg.layers},
                     {"heads", cfg.heads},
                     {"context", cfg.context},
                     {"memory_slots", cfg.memory_slots},
                     {"retrieve_k", cfg.retrieve_k},
                     {"memory_layers", cfg.memory_layers},
                     {"alpha", cfg.alpha}};
}

void from_json(const json& j, TransformerConfig& cfg) {
    j.at("vocab_size").get_to(cfg.vocab_size);
    j.at("d_model").get_to(cfg.d_model);
    j.at("d_ff").get_to(cfg.d_ff);
    j.at("d_key").get_to(cfg.d_key);
    j.at("layers").get_to(cfg.layers);
    j.at("heads").get_to(cfg.heads);
    j.at("context").get_to(cfg.context);
    j.at("memory_slots").get_to(cfg.memory_slots);
    j.at("retrieve_k").get_to(cfg.retrieve_k);
    j.at("memory_layers").get_to(cfg.memory_layers);
    j.at("alpha").get_to(cfg.alpha);
}

namespace {

std::uint64_t tensor_checksum(const Tensor& t) {
    return fnv1a64(t.data().data(), static_cast<std::size_t>(t.numel()) * sizeof(double));
}

void write_blob(const fs::path& file, const Tensor& t) {
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + file.string() + " for writing");
    out.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.numel()) * static_cast<std::streamsize>(sizeof(double)));
    if (!out) throw IoError("short write to " + file.string());
}

void read_blob(const fs::path& file, Tensor& t) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw IoError("cannot open " + file.string());
    const auto want = static_cast<std::streamsize>(t.numel()) *
                      static_cast<std::streamsize>(sizeof(double));
    in.read(reinterpret_cast<char*>(t.data().data()), want);
    if (in.gcount() != want) {
        throw IoError("blob " + file.string() + " truncated: got " +
                      std::to_string(in.gcount()) + " of " + std::to_string(want) + " bytes");
    }
    char extra;
    if (in.read(&extra, 1), in.gcount() != 0) {
        throw IoError("blob " + file.string() + " has trailing bytes");
    }
}

std::vector<Index> shape_dims(const Shape& s) {
    std::vector<Index> dims;
    for (int i = 0; i < s.rank; ++i) dims.push_back(s.dim[static_cast<std::size_t>(i)]);
    return dims;
}

}  // namespace

nlohmann::ordered_json param_checksums(const Model& model) {
    ordered_json sums = ordered_json::object();
    for (const NamedParam& np : model.named_params()) {
        sums[np.name] = checksum_hex(tensor_checksum(np.tensor));
    }
    return sums;
}

void save_checkpoint(const Model& model, StageTag stage, std::uint64_t seed, const fs::path& dir,
                     const ordered_json& extra) {
    fs::create_directories(dir / "params");

    ordered_json manifest;
    manifest["schema_version"] = 1;
    manifest["kind"] = "checkpoint";
    manifest["stage"] = stage_name(stage);
    manifest["seed"] = seed;
    ordered_json cfg_json;
    to_json(cfg_json, model.config());
    manifest["config"] = cfg_json;
    manifest["memory_variant_layers"] = model.memory_layer_ids();

    ordered_json params = ordered_json::array();
    for (const NamedParam& np : model.named_params()) {
        const fs::path rel = fs::path("params") / (np.name + ".f64");
        write_blob(dir / rel, np.tensor);
        ordered_json entry;
        entry["name"] = np.name;
        entry["shape"] = shape_dims(np.tensor.shape());
        entry["file"] = rel.generic_string();
        entry["fnv1a64"] = checksum_hex(tensor_checksum(np.tensor));
        params.push_back(std::move(entry));
    }
    manifest["params"] = std::move(params);
    manifest["extra"] = extra;

    std::ofstream out(dir / "manifest.json", std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
    out << manifest.dump(2) << "\n";
}

LoadedCheckpoint load_checkpoint(const fs::path& dir) {
    std::ifstream in(dir / "manifest.json", std::ios::binary);
    if (!in) throw IoError("no checkpoint manifest at " + (dir / "manifest.json").string());
    json manifest;
    try {
        manifest = json::parse(in);
    } catch (const json::parse_error& e) {
        throw SchemaError("manifest " + (dir / "manifest.json").string() +
                          " is not valid JSON: " + e.what());
    }
    if (manifest.value("schema_version", -1) != 1 ||
        manifest.value("kind", "") != "checkpoint") {
        throw SchemaError("manifest " + (dir / "manifest.json").string() +
                          " has an unsupported schema");
    }

    TransformerConfig cfg;
    from_json(manifest.at("config"), cfg);
    std::vector<int> mem_ids = manifest.at("memory_variant_layers").get<std::vector<int>>();

    LoadedCheckpoint loaded{Model::skeleton(cfg, mem_ids),
                            stage_from_name(manifest.at("stage").get<std::string>()),
                            manifest.at("seed").get<std::uint64_t>(),
                            ordered_json::object()};
    if (manifest.contains("extra")) {
        loaded.extra = manifest.at("extra").get<ordered_json>();
    }

    std::vector<NamedParam> params = loaded.model.named_params();
    const json& registry = manifest.at("params");
    if (registry.size() != params.size()) {
        throw SchemaError("manifest lists " + std::to_string(registry.size()) +
                          " parameters, model has " + std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const json& entry = registry[i];
        if (entry.at("name").get<std::string>() != params[i].name) {
            throw SchemaError("manifest parameter '" + entry.at("name").get<std::string>() +
                              "' does not match expected '" + params[i].name + "'");
        }
        const auto dims = entry.at("shape").get<std::vector<Index>>();
        if (dims != shape_dims(params[i].tensor.shape())) {
            throw SchemaError("parameter '" + params[i].name + "' has unexpected shape");
        }
        read_blob(dir / entry.at("file").get<std::string>(), params[i].tensor);
        const std::string want = entry.at("fnv1a64").get<std::string>();
        const std::string got = checksum_hex(tensor_checksum(params[i].tensor));
        if (want != got) {
            throw IoError("parameter '" + params[i].name + "' failed its checksum (" + got +
                          " != " + want + ")");
        }
    }
    return loaded;
}

}  // namespace smem
