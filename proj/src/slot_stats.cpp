#include "sparsemem/slot_stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace smem {

void record_access(SlotUsageStats& stats, std::span<const int> indices) {
    const auto m = static_cast<int>(stats.counts.size());
    for (int i : indices) {
        if (i < 0 || i >= m) {
            throw IndexError("record_access: slot " + std::to_string(i) + " out of range for " +
                             std::to_string(m) + " slots");
        }
    }
    for (int i : indices) ++stats.counts[static_cast<std::size_t>(i)];
    stats.total += static_cast<long>(indices.size());
}

void accumulate_background(BackgroundDf& bg, const SlotUsageStats& batch_stats) {
    if (bg.df.size() != batch_stats.counts.size()) {
        throw ShapeError("accumulate_background: slot counts disagree, " +
                         std::to_string(bg.df.size()) + " vs " +
                         std::to_string(batch_stats.counts.size()));
    }
    for (std::size_t i = 0; i < bg.df.size(); ++i) {
        if (batch_stats.counts[i] > 0) ++bg.df[i];
    }
    ++bg.batches;
}

std::string score_mode_name(ScoreMode mode) {
    return mode == ScoreMode::tfidf ? "tfidf" : "kl";
}

ScoreMode score_mode_from_name(const std::string& name) {
    if (name == "tfidf") return ScoreMode::tfidf;
    if (name == "kl") return ScoreMode::kl;
    throw SchemaError("unknown score mode '" + name + "' (expected tfidf or kl)");
}

namespace {

void require_scoreable(const SlotUsageStats& stats, const BackgroundDf& bg) {
    if (stats.counts.size() != bg.df.size()) {
        throw ShapeError("slot scoring: usage has " + std::to_string(stats.counts.size()) +
                         " slots, background has " + std::to_string(bg.df.size()));
    }
    if (stats.total <= 0) {
        throw EmptyBatchError("slot scoring: batch recorded no accesses");
    }
    if (bg.batches < 1) {
        throw ContractError("slot scoring: background has no batches");
    }
}

}  // namespace

SlotScores score_tfidf(const SlotUsageStats& stats, const BackgroundDf& bg) {
    require_scoreable(stats, bg);
    const std::size_t m = stats.counts.size();
    SlotScores out;
    out.value.assign(m, 0.0);
    out.masked.assign(m, true);
    const double c_total = static_cast<double>(stats.total);
    const double n = static_cast<double>(bg.batches);
    for (std::size_t i = 0; i < m; ++i) {
        if (stats.counts[i] == 0) continue;
        const double tf = static_cast<double>(stats.counts[i]) / c_total;
        const double idf = std::log((n + 1.0) / (static_cast<double>(bg.df[i]) + 1.0));
        out.value[i] = tf * idf;
        out.masked[i] = false;
    }
    return out;
}

SlotScores score_kl(const SlotUsageStats& stats, const BackgroundDf& bg, double epsilon) {
    require_scoreable(stats, bg);
    if (!(epsilon > 0.0)) {
        throw ContractError("slot scoring: epsilon must be positive");
    }
    const std::size_t m = stats.counts.size();
    SlotScores out;
    out.value.assign(m, 0.0);
    out.masked.assign(m, true);
    const double c_total = static_cast<double>(stats.total);
    double df_total = 0.0;
    for (long d : bg.df) df_total += static_cast<double>(d) + 1.0;
    for (std::size_t i = 0; i < m; ++i) {
        if (stats.counts[i] == 0) continue;
        const double p_batch = static_cast<double>(stats.counts[i]) / c_total;
        const double p_bg = (static_cast<double>(bg.df[i]) + 1.0) / df_total;
        out.value[i] = p_batch * std::log((p_batch + epsilon) / (p_bg + epsilon));
        out.masked[i] = false;
    }
    return out;
}

SlotScores score_slots(const SlotUsageStats& stats, const BackgroundDf& bg,
                       const ScoreConfig& cfg) {
    return cfg.mode == ScoreMode::tfidf ? score_tfidf(stats, bg)
                                        : score_kl(stats, bg, cfg.epsilon);
}

std::vector<int> select_slots(const SlotScores& scores, int top_t) {
    if (top_t < 1) {
        throw ContractError("select_slots: budget must be at least 1, got " +
                            std::to_string(top_t));
    }
    std::vector<int> unmasked;
    for (Index i = 0; i < scores.size(); ++i) {
        if (!scores.masked[static_cast<std::size_t>(i)]) unmasked.push_back(static_cast<int>(i));
    }
    if (unmasked.empty()) {
        throw EmptyBatchError("select_slots: every slot is masked");
    }
    const auto take = std::min<std::size_t>(static_cast<std::size_t>(top_t), unmasked.size());
    std::partial_sort(unmasked.begin(), unmasked.begin() + static_cast<std::ptrdiff_t>(take),
                      unmasked.end(), [&](int a, int b) {
                          const double sa = scores.value[static_cast<std::size_t>(a)];
                          const double sb = scores.value[static_cast<std::size_t>(b)];
                          if (sa != sb) return sa > sb;
                          return a < b;
                      });
    unmasked.resize(take);
    std::sort(unmasked.begin(), unmasked.end());
    return unmasked;
}

void mask_value_gradients(Tensor& values, std::span<const int> kept) {
    if (values.rank() != 2) {
        throw ShapeError("mask_value_gradients: expected a rank-2 value table, got " +
                         values.shape().str());
    }
    if (!values.has_grad()) {
        throw ContractError("mask_value_gradients: gradient not populated");
    }
    const Index rows = values.dim(0), cols = values.dim(1);
    for (int r : kept) {
        if (r < 0 || r >= rows) {
            throw IndexError("mask_value_gradients: row " + std::to_string(r) +
                             " out of range for " + std::to_string(rows) + " rows");
        }
    }
    std::vector<bool> keep(static_cast<std::size_t>(rows), false);
    for (int r : kept) keep[static_cast<std::size_t>(r)] = true;
    ArrayX& g = values.grad();
    for (Index r = 0; r < rows; ++r) {
        if (!keep[static_cast<std::size_t>(r)]) g.segment(r * cols, cols).setZero();
    }
}

}  // namespace smem
