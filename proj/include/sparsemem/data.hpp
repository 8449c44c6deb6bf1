#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "sparsemem/errors.hpp"
#include "sparsemem/tensor.hpp"

namespace smem {

// Fixed word-level vocabulary of 256 symbols: four specials, then entity,
// relation, object, and filler words in contiguous id ranges. The table is
// static so token ids are stable across runs and machines.
class Vocab {
public:
    static constexpr int pad = 0;
    static constexpr int bos = 1;
    static constexpr int eos = 2;
    static constexpr int sep = 3;

    Vocab();

    int size() const { return static_cast<int>(words_.size()); }
    const std::string& word(int id) const;       // IndexError on bad id
    int id(const std::string& word) const;       // IndexError on unknown word

    // Whitespace-delimited round trip; tokenize(detokenize(ids)) == ids.
    std::vector<int> tokenize(const std::string& text) const;
    std::string detokenize(std::span<const int> ids) const;

    int entity_id(int n) const;    // n-th entity word
    int relation_id(int n) const;  // n-th relation word
    int object_id(int n) const;    // n-th object word
    int filler_id(int n) const;    // n-th filler word

    int entity_count() const { return kEntities; }
    int relation_count() const { return kRelations; }
    int object_count() const { return kObjects; }
    int filler_count() const { return kFillers; }

private:
    static constexpr int kEntities = 128;
    static constexpr int kRelations = 16;
    static constexpr int kObjects = 64;
    static constexpr int kFillers = 44;

    std::vector<std::string> words_;
};

enum class FactSplit { base_a, new_b, heldout_h };

std::string fact_split_name(FactSplit split);

// One synthetic fact: "subject relation -> object". Subject and relation
// are single tokens; the object is a span (length 1 by default so accuracy
// is exact match on one position).
struct FactRecord {
    int subject = -1;
    int relation = -1;
    std::vector<int> object;
    FactSplit split = FactSplit::base_a;
};

struct FactDataset {
    std::vector<FactRecord> base_a;    // known before finetuning
    std::vector<FactRecord> new_b;     // injected during finetuning
    std::vector<FactRecord> heldout_h; // retention probe, never finetuned on
};

// Splits are disjoint on (subject, relation); H is drawn from the same
// distribution as A. With overwrite_conflicts, B reuses A's (subject,
// relation) pairs with different objects instead of fresh pairs.
FactDataset gen_fact_dataset(const Vocab& vocab, std::uint64_t seed, int count_a, int count_b,
                             int count_h, bool overwrite_conflicts = false);

struct QaExample {
    std::vector<int> prompt;  // BOS subject relation SEP
    std::vector<int> answer;  // object tokens, EOS
};

QaExample format_qa(const FactRecord& record);

// Deterministic template grammar: alternating fact statements (round-robin
// over a seed-shuffled copy of `facts`, so every fact appears) and filler
// sentences of random length in [4, max_len - 2] body tokens.
std::vector<std::vector<int>> gen_general_corpus(const Vocab& vocab, std::uint64_t seed,
                                                 int n_sequences,
                                                 std::span<const FactRecord> facts, int max_len);

// A flattened [batch x seq_len] next-token training batch. weights carry
// the per-position loss mask aligned with targets.
struct TokenBatch {
    std::vector<int> inputs;
    std::vector<int> targets;
    std::vector<double> weights;
    Index batch = 0;
    Index seq_len = 0;
};

// Pads to the longest sequence; every non-PAD target position gets unit
// weight.
TokenBatch lm_batch(std::span<const std::vector<int>> sequences, int pad_id = Vocab::pad);

// prompt + answer rows, padded; only answer target positions get weight.
TokenBatch qa_batch(std::span<const FactRecord> facts, int pad_id = Vocab::pad);

// One fact per line: {"subject": ..., "relation": ..., "object": [...],
// "split": ...} with surface forms from the vocabulary.
void export_facts_jsonl(const Vocab& vocab, std::span<const FactRecord> facts,
                        const std::filesystem::path& path);

// One sequence per line: {"tokens": [...], "text": "..."}.
void export_corpus_jsonl(const Vocab& vocab, std::span<const std::vector<int>> sequences,
                         const std::filesystem::path& path);

}  // namespace smem
