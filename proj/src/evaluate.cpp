#include "sparsemem/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace smem {

namespace {

struct PooledLoss {
    double weighted_sum = 0.0;
    double weight_total = 0.0;

    void fold(double mean, double weights) {
        weighted_sum += mean * weights;
        weight_total += weights;
    }
    double mean() const {
        if (weight_total <= 0.0) throw EmptyBatchError("eval: no loss positions");
        return weighted_sum / weight_total;
    }
};

double batch_weight(const TokenBatch& b) {
    double total = 0.0;
    for (double w : b.weights) total += w;
    return total;
}

double chunk_loss(const Model& model, const TokenBatch& b) {
    Tensor logits = model.forward(b.inputs, b.batch, b.seq_len);
    Tensor flat = reshape(logits, Shape::mat(b.batch * b.seq_len, model.config().vocab_size));
    return cross_entropy_weighted(flat, b.targets, b.weights).scalar();
}

// First index of the row maximum: equal scores resolve to the lower id.
int argmax_token(ConstMatMap logits, Index row) {
    int best = 0;
    double best_score = logits(row, 0);
    for (Index v = 1; v < logits.cols(); ++v) {
        if (logits(row, v) > best_score) {
            best_score = logits(row, v);
            best = static_cast<int>(v);
        }
    }
    return best;
}

// Greedy continuation of each prompt for as many steps as its gold object
// needs. Prompts all share the QA frame, so rows stay rectangular.
std::vector<std::vector<int>> decode_objects(const Model& model,
                                             std::span<const FactRecord> chunk) {
    std::size_t prompt_len = 0, max_obj = 0;
    std::vector<std::vector<int>> rows;
    rows.reserve(chunk.size());
    for (const FactRecord& rec : chunk) {
        QaExample qa = format_qa(rec);
        prompt_len = qa.prompt.size();
        max_obj = std::max(max_obj, rec.object.size());
        rows.push_back(std::move(qa.prompt));
    }
    const Index n = static_cast<Index>(rows.size());

    std::vector<std::vector<int>> decoded(rows.size());
    for (std::size_t step = 0; step < max_obj; ++step) {
        const auto width = static_cast<Index>(prompt_len + step);
        std::vector<int> flat;
        flat.reserve(static_cast<std::size_t>(n * width));
        for (const auto& row : rows) flat.insert(flat.end(), row.begin(), row.end());

        const Tensor logits = model.forward(flat, n, width);
        ConstMatMap view = logits.as_mat(n * width, model.config().vocab_size);
        for (Index r = 0; r < n; ++r) {
            const int next = argmax_token(view, r * width + (width - 1));
            rows[static_cast<std::size_t>(r)].push_back(next);
            if (step < chunk[static_cast<std::size_t>(r)].object.size()) {
                decoded[static_cast<std::size_t>(r)].push_back(next);
            }
        }
    }
    return decoded;
}

template <typename Fn>
void for_chunks(std::size_t total, Index batch_size, Fn fn) {
    if (batch_size < 1) throw ContractError("eval: batch_size must be positive");
    for (std::size_t at = 0; at < total; at += static_cast<std::size_t>(batch_size)) {
        fn(at, std::min(total, at + static_cast<std::size_t>(batch_size)));
    }
}

}  // namespace

double eval_lm_loss(const Model& model, std::span<const std::vector<int>> sequences,
                    Index batch_size) {
    if (sequences.empty()) throw EmptyBatchError("eval_lm_loss: empty dataset");
    PooledLoss pool;
    for_chunks(sequences.size(), batch_size, [&](std::size_t lo, std::size_t hi) {
        TokenBatch b = lm_batch(sequences.subspan(lo, hi - lo));
        pool.fold(chunk_loss(model, b), batch_weight(b));
    });
    return pool.mean();
}

double eval_qa_loss(const Model& model, std::span<const FactRecord> facts, Index batch_size) {
    if (facts.empty()) throw EmptyBatchError("eval_qa_loss: empty dataset");
    PooledLoss pool;
    for_chunks(facts.size(), batch_size, [&](std::size_t lo, std::size_t hi) {
        TokenBatch b = qa_batch(facts.subspan(lo, hi - lo));
        pool.fold(chunk_loss(model, b), batch_weight(b));
    });
    return pool.mean();
}

double fact_accuracy(const Model& model, std::span<const FactRecord> facts, Index batch_size) {
    if (facts.empty()) throw EmptyBatchError("fact_accuracy: empty dataset");
    long hits = 0;
    for_chunks(facts.size(), batch_size, [&](std::size_t lo, std::size_t hi) {
        auto decoded = decode_objects(model, facts.subspan(lo, hi - lo));
        for (std::size_t i = 0; i < decoded.size(); ++i) {
            if (decoded[i] == facts[lo + i].object) ++hits;
        }
    });
    return static_cast<double>(hits) / static_cast<double>(facts.size());
}

double token_f1(std::span<const int> predicted, std::span<const int> gold) {
    if (predicted.empty() || gold.empty()) return 0.0;
    std::map<int, long> bag;
    for (int t : gold) ++bag[t];
    long overlap = 0;
    for (int t : predicted) {
        auto it = bag.find(t);
        if (it != bag.end() && it->second > 0) {
            --it->second;
            ++overlap;
        }
    }
    if (overlap == 0) return 0.0;
    const double precision = static_cast<double>(overlap) / static_cast<double>(predicted.size());
    const double recall = static_cast<double>(overlap) / static_cast<double>(gold.size());
    return 2.0 * precision * recall / (precision + recall);
}

double fact_token_f1(const Model& model, std::span<const FactRecord> facts, Index batch_size) {
    if (facts.empty()) throw EmptyBatchError("fact_token_f1: empty dataset");
    double total = 0.0;
    for_chunks(facts.size(), batch_size, [&](std::size_t lo, std::size_t hi) {
        auto decoded = decode_objects(model, facts.subspan(lo, hi - lo));
        for (std::size_t i = 0; i < decoded.size(); ++i) {
            total += token_f1(decoded[i], facts[lo + i].object);
        }
    });
    return total / static_cast<double>(facts.size());
}

}  // namespace smem
