#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "sparsemem/model.hpp"
#include "sparsemem/slot_stats.hpp"

namespace smem {

struct DataConfig {
    int facts_a = 128;
    int facts_b = 64;
    int facts_h = 64;
    int corpus_sequences = 2048;
    int heldout_sequences = 128;
    int max_seq_len = 16;
    bool overwrite_conflicts = false;
};

struct PretrainConfig {
    int steps = 3000;
    int batch_size = 16;
    double lr = 1e-3;
    int eval_every = 25;
    // stop after this many evals without at least min_delta improvement
    int plateau_patience = 8;
    double plateau_min_delta = 1e-3;
};

struct RecoveryConfig {
    int steps = 800;
    int batch_size = 16;
    double lr = 1e-3;
    int eval_every = 25;
};

struct FinetuneConfig {
    int steps = 400;
    int batch_size = 16;
    double dense_lr = 6e-3;  // kept 10x below sparse_lr so the full backbone does not diverge
    double sparse_lr = 6e-2;
    int eval_every = 25;
    // "sparse" resolves to sparse-tfidf or sparse-kl through score.mode
    std::vector<std::string> arms{"dense", "sparse-tfidf", "sparse-kl"};
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::string out_dir = "runs/out";
    TransformerConfig model;
    DataConfig data;
    PretrainConfig pretrain;
    RecoveryConfig recovery;
    FinetuneConfig finetune;
    ScoreConfig score;
    int background_batches = 200;

    void validate() const;  // ConfigError
};

// Strict parse: unknown keys anywhere are rejected, and every error message
// carries the line it came from.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::filesystem::path& file);

// Config echo for manifests and reports. out_dir is excluded unless asked
// for, so reports stay byte-identical across output locations.
nlohmann::ordered_json run_config_json(const RunConfig& cfg, bool include_out_dir = false);

// The concrete finetune arms this config runs, with the "sparse" alias
// resolved through score.mode, duplicates removed, canonical order kept.
std::vector<std::string> resolve_arms(const RunConfig& cfg);

}  // namespace smem
