#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"
#include "sparsemem/model.hpp"

namespace smem {

enum class StageTag {
    pretrained,
    retrofitted,
    recovered,
    finetuned_dense,
    finetuned_sparse_tfidf,
    finetuned_sparse_kl,
};

std::string stage_name(StageTag tag);
StageTag stage_from_name(const std::string& name);  // SchemaError on unknown

// Legal stage progression: pretrained -> retrofitted -> recovered ->
// any finetuned-* terminal.
bool stage_transition_ok(StageTag from, StageTag to);

void to_json(nlohmann::ordered_json& j, const TransformerConfig& cfg);
void from_json(const nlohmann::json& j, TransformerConfig& cfg);

// Checkpoint directory layout:
//   manifest.json                    config, stage, seed, parameter registry
//   params/<name>.f64                raw little-endian float64, row-major
// Every blob carries an fnv1a64 checksum in the manifest; load verifies it.
void save_checkpoint(const Model& model, StageTag stage, std::uint64_t seed,
                     const std::filesystem::path& dir,
                     const nlohmann::ordered_json& extra = nlohmann::ordered_json::object());

struct LoadedCheckpoint {
    Model model;
    StageTag stage;
    std::uint64_t seed = 0;
    nlohmann::ordered_json extra;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

// name -> fnv1a64 hex of the current parameter bytes, insertion-ordered
// like named_params(). The freeze contracts compare these across stages.
nlohmann::ordered_json param_checksums(const Model& model);

}  // namespace smem
