#pragma once

#include <span>
#include <string>
#include <vector>

#include "sparsemem/tensor.hpp"

namespace smem {

// Per-batch retrieval counts for one memory layer: c(i) hits per slot and
// the total C. Reset once per batch, filled during forward passes.
struct SlotUsageStats {
    int layer_id = -1;
    std::vector<long> counts;
    long total = 0;

    SlotUsageStats() = default;
    SlotUsageStats(int layer, Index slots)
        : layer_id(layer), counts(static_cast<std::size_t>(slots), 0) {}

    Index slot_count() const { return static_cast<Index>(counts.size()); }
    void reset() {
        counts.assign(counts.size(), 0);
        total = 0;
    }
};

void record_access(SlotUsageStats& stats, std::span<const int> indices);

// How many background batches touched each slot at least once, out of
// `batches` single-sequence batches total.
struct BackgroundDf {
    int layer_id = -1;
    std::vector<long> df;
    long batches = 0;

    BackgroundDf() = default;
    BackgroundDf(int layer, Index slots)
        : layer_id(layer), df(static_cast<std::size_t>(slots), 0) {}
};

// Folds one batch's usage into the document frequencies.
void accumulate_background(BackgroundDf& bg, const SlotUsageStats& batch_stats);

enum class ScoreMode { tfidf, kl };

std::string score_mode_name(ScoreMode mode);
ScoreMode score_mode_from_name(const std::string& name);  // SchemaError on unknown

struct ScoreConfig {
    ScoreMode mode = ScoreMode::tfidf;
    int top_t = 64;         // update budget per layer per batch
    double epsilon = 1e-10;  // log smoothing for the kl mode
    bool sparse_keys = false;  // also restrict key updates to selected rows
};

// Scores with an explicit mask: slots never accessed this batch (c(i)=0)
// are masked and sort below every finite score during selection.
struct SlotScores {
    std::vector<double> value;
    std::vector<bool> masked;

    Index size() const { return static_cast<Index>(value.size()); }
};

// tf(i) = c(i)/C, idf(i) = ln((N+1)/(df(i)+1)), score = tf * idf.
SlotScores score_tfidf(const SlotUsageStats& stats, const BackgroundDf& bg);

// p_batch(i) = c(i)/C against p_bg(i) = (df(i)+1)/sum_j(df(j)+1):
// score = p_batch * ln((p_batch + eps) / (p_bg + eps)).
SlotScores score_kl(const SlotUsageStats& stats, const BackgroundDf& bg, double epsilon = 1e-10);

SlotScores score_slots(const SlotUsageStats& stats, const BackgroundDf& bg,
                       const ScoreConfig& cfg);

// The min(top_t, #unmasked) best-scoring unmasked slots, ties broken by
// ascending index; returned sorted ascending.
std::vector<int> select_slots(const SlotScores& scores, int top_t);

// Zeroes every gradient row of a [rows x cols] parameter not listed in
// `kept`, in place. The gradient must already be populated.
void mask_value_gradients(Tensor& values, std::span<const int> kept);

}  // namespace smem
