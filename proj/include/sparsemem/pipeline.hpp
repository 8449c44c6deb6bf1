#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "sparsemem/checkpoint.hpp"
#include "sparsemem/config.hpp"
#include "sparsemem/data.hpp"
#include "sparsemem/report.hpp"

namespace smem {

// Independent randomness per consumer: adding or rerunning one stage never
// shifts another stage's draws.
enum class SeedStream : std::uint64_t {
    facts = 1,
    corpus = 2,
    model_init = 3,
    pretrain_batches = 4,
    retrofit_keys = 5,
    recovery_batches = 6,
    finetune_batches = 7,
    heldout_corpus = 8,
};

std::uint64_t stream_seed(std::uint64_t run_seed, SeedStream stream);

// The run's metric stream, one CSV with (step, arm, metric, value) rows.
// A stage that reruns drops its own arms first, and saves rewrite the file
// in a canonical order, so the log converges to the same bytes no matter
// how the stages were scheduled.
class MetricsLog {
public:
    struct Row {
        long step = 0;
        std::string arm;
        std::string metric;
        double value = 0.0;

        bool operator==(const Row&) const = default;
    };

    explicit MetricsLog(std::filesystem::path file);  // loads existing rows

    void drop_arm(const std::string& arm);
    void add(long step, const std::string& arm, const std::string& metric, double value);
    void save() const;

    const std::vector<Row>& rows() const { return rows_; }

private:
    std::filesystem::path file_;
    std::vector<Row> rows_;
};

// Valid stage names in execution order; "all" expands to exactly this.
const std::vector<std::string>& all_stage_names();
std::vector<std::string> resolve_stage_list(const std::string& selector);  // ConfigError

// Orchestrates pretrain -> retrofit -> recover -> background-df ->
// finetune (dense + sparse arms) -> eval -> report over one output
// directory. Stages communicate only through checkpoints and files, so
// any stage can rerun or resume from disk.
class Pipeline {
public:
    explicit Pipeline(RunConfig cfg, std::ostream* progress = nullptr);

    void run_stage(const std::string& name);  // ConfigError on unknown name

    void pretrain();
    void retrofit();
    void recover();
    void background_df();
    void finetune();
    void finetune_arm(const std::string& arm);
    void evaluate();
    void report();

    const RunConfig& config() const { return cfg_; }
    const Vocab& vocab() const { return vocab_; }
    const FactDataset& facts() const { return facts_; }
    const std::vector<std::vector<int>>& corpus() const { return corpus_; }
    const std::vector<std::vector<int>>& heldout_corpus() const { return heldout_; }

    std::filesystem::path out_dir() const { return cfg_.out_dir; }
    std::filesystem::path checkpoint_dir(StageTag stage) const;
    std::filesystem::path metrics_file() const;
    std::filesystem::path background_file() const;
    std::filesystem::path trace_file(const std::string& arm) const;
    std::filesystem::path report_dir() const;

    // The recovered-stage background statistic, one entry per memory layer.
    std::vector<BackgroundDf> load_background() const;  // StageError if absent

private:
    LoadedCheckpoint load_stage(StageTag expected) const;
    double general_loss(const Model& model) const;
    void say(const std::string& line) const;

    RunConfig cfg_;
    std::ostream* progress_ = nullptr;
    Vocab vocab_;
    FactDataset facts_;
    std::vector<FactRecord> corpus_facts_;  // A plus H, what pretraining sees
    std::vector<std::vector<int>> corpus_;
    std::vector<std::vector<int>> heldout_;
};

}  // namespace smem
