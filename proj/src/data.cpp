#include "sparsemem/data.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"

namespace smem {

namespace {

std::string numbered(const char* prefix, int n, int width) {
    std::string num = std::to_string(n);
    std::string out(prefix);
    out.append(static_cast<std::size_t>(width) - std::min<std::size_t>(num.size(),
                                                                       static_cast<std::size_t>(width)),
               '0');
    out += num;
    return out;
}

}  // namespace

Vocab::Vocab() {
    words_ = {"<pad>", "<bos>", "<eos>", "<sep>"};
    words_.reserve(256);
    for (int i = 0; i < kEntities; ++i) words_.push_back(numbered("ent", i, 3));
    for (int i = 0; i < kRelations; ++i) words_.push_back(numbered("rel", i, 2));
    for (int i = 0; i < kObjects; ++i) words_.push_back(numbered("obj", i, 2));
    for (int i = 0; i < kFillers; ++i) words_.push_back(numbered("fill", i, 2));
}

const std::string& Vocab::word(int id) const {
    if (id < 0 || id >= size()) {
        throw IndexError("vocab: token id " + std::to_string(id) + " out of range");
    }
    return words_[static_cast<std::size_t>(id)];
}

int Vocab::id(const std::string& w) const {
    for (int i = 0; i < size(); ++i) {
        if (words_[static_cast<std::size_t>(i)] == w) return i;
    }
    throw IndexError("vocab: unknown word '" + w + "'");
}

std::vector<int> Vocab::tokenize(const std::string& text) const {
    std::vector<int> ids;
    std::istringstream in(text);
    std::string w;
    while (in >> w) ids.push_back(id(w));
    return ids;
}

std::string Vocab::detokenize(std::span<const int> ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i != 0) out += ' ';
        out += word(ids[i]);
    }
    return out;
}

namespace {

int ranged_id(const char* kind, int n, int count, int base) {
    if (n < 0 || n >= count) {
        throw IndexError("vocab: " + std::string(kind) + " index " + std::to_string(n) +
                         " out of range");
    }
    return base + n;
}

}  // namespace

int Vocab::entity_id(int n) const { return ranged_id("entity", n, kEntities, 4); }
int Vocab::relation_id(int n) const { return ranged_id("relation", n, kRelations, 4 + kEntities); }
int Vocab::object_id(int n) const {
    return ranged_id("object", n, kObjects, 4 + kEntities + kRelations);
}
int Vocab::filler_id(int n) const {
    return ranged_id("filler", n, kFillers, 4 + kEntities + kRelations + kObjects);
}

std::string fact_split_name(FactSplit split) {
    switch (split) {
        case FactSplit::base_a: return "A";
        case FactSplit::new_b: return "B";
        case FactSplit::heldout_h: return "H";
    }
    throw ContractError("fact_split_name: bad tag");
}

FactDataset gen_fact_dataset(const Vocab& vocab, std::uint64_t seed, int count_a, int count_b,
                             int count_h, bool overwrite_conflicts) {
    if (count_a < 1 || count_b < 1 || count_h < 1) {
        throw ConfigError("fact dataset: every split count must be at least 1");
    }
    const int universe = vocab.entity_count() * vocab.relation_count();
    const int fresh = overwrite_conflicts ? count_a + count_h : count_a + count_b + count_h;
    if (fresh > universe) {
        throw ConfigError("fact dataset: " + std::to_string(fresh) +
                          " facts exceed the " + std::to_string(universe) +
                          " distinct (subject, relation) pairs");
    }
    if (overwrite_conflicts && count_b > count_a) {
        throw ConfigError("fact dataset: overwrite mode needs count_b <= count_a");
    }

    std::mt19937_64 rng(seed);
    std::vector<int> pairs(static_cast<std::size_t>(universe));
    std::iota(pairs.begin(), pairs.end(), 0);
    std::shuffle(pairs.begin(), pairs.end(), rng);

    std::uniform_int_distribution<int> object(0, vocab.object_count() - 1);
    auto make = [&](int pair, FactSplit split) {
        FactRecord rec;
        rec.subject = vocab.entity_id(pair / vocab.relation_count());
        rec.relation = vocab.relation_id(pair % vocab.relation_count());
        rec.object = {vocab.object_id(object(rng))};
        rec.split = split;
        return rec;
    };

    FactDataset out;
    std::size_t cursor = 0;
    for (int i = 0; i < count_a; ++i) out.base_a.push_back(make(pairs[cursor++], FactSplit::base_a));
    if (overwrite_conflicts) {
        // revisit A's pairs with fresh objects, rejecting accidental repeats
        for (int i = 0; i < count_b; ++i) {
            FactRecord rec = out.base_a[static_cast<std::size_t>(i)];
            rec.split = FactSplit::new_b;
            do {
                rec.object = {vocab.object_id(object(rng))};
            } while (rec.object == out.base_a[static_cast<std::size_t>(i)].object);
            out.new_b.push_back(std::move(rec));
        }
    } else {
        for (int i = 0; i < count_b; ++i) {
            out.new_b.push_back(make(pairs[cursor++], FactSplit::new_b));
        }
    }
    for (int i = 0; i < count_h; ++i) {
        out.heldout_h.push_back(make(pairs[cursor++], FactSplit::heldout_h));
    }
    return out;
}

QaExample format_qa(const FactRecord& record) {
    if (record.subject < 0 || record.relation < 0 || record.object.empty()) {
        throw ContractError("format_qa: incomplete fact record");
    }
    QaExample qa;
    qa.prompt = {Vocab::bos, record.subject, record.relation, Vocab::sep};
    qa.answer = record.object;
    qa.answer.push_back(Vocab::eos);
    return qa;
}

std::vector<std::vector<int>> gen_general_corpus(const Vocab& vocab, std::uint64_t seed,
                                                 int n_sequences,
                                                 std::span<const FactRecord> facts, int max_len) {
    if (n_sequences < 1) throw ConfigError("corpus: size must be at least 1");
    if (facts.empty()) throw ConfigError("corpus: needs at least one fact");
    if (max_len < 8) throw ConfigError("corpus: max_len must be at least 8");

    std::mt19937_64 rng(seed);
    std::vector<std::size_t> order(facts.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);

    std::uniform_int_distribution<int> body_len(4, max_len - 2);
    std::uniform_int_distribution<int> filler(0, vocab.filler_count() - 1);

    std::vector<std::vector<int>> corpus;
    corpus.reserve(static_cast<std::size_t>(n_sequences));
    std::size_t cursor = 0;
    for (int i = 0; i < n_sequences; ++i) {
        if (i % 2 == 0) {
            QaExample qa = format_qa(facts[order[cursor]]);
            cursor = (cursor + 1) % order.size();
            std::vector<int> seq = std::move(qa.prompt);
            seq.insert(seq.end(), qa.answer.begin(), qa.answer.end());
            corpus.push_back(std::move(seq));
        } else {
            std::vector<int> seq{Vocab::bos};
            const int body = body_len(rng);
            for (int t = 0; t < body; ++t) seq.push_back(vocab.filler_id(filler(rng)));
            seq.push_back(Vocab::eos);
            corpus.push_back(std::move(seq));
        }
    }
    return corpus;
}

namespace {

TokenBatch shift_and_pad(const std::vector<std::vector<int>>& rows,
                         const std::vector<std::size_t>& loss_from, int pad_id) {
    std::size_t longest = 0;
    for (const auto& row : rows) longest = std::max(longest, row.size());
    if (longest < 2) throw ContractError("batch: sequences must have at least two tokens");

    TokenBatch out;
    out.batch = static_cast<Index>(rows.size());
    out.seq_len = static_cast<Index>(longest - 1);
    const std::size_t width = longest - 1;
    out.inputs.assign(rows.size() * width, pad_id);
    out.targets.assign(rows.size() * width, pad_id);
    out.weights.assign(rows.size() * width, 0.0);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto& row = rows[r];
        for (std::size_t t = 0; t + 1 < row.size(); ++t) {
            out.inputs[r * width + t] = row[t];
            out.targets[r * width + t] = row[t + 1];
            if (t + 1 >= loss_from[r]) out.weights[r * width + t] = 1.0;
        }
    }
    return out;
}

}  // namespace

TokenBatch lm_batch(std::span<const std::vector<int>> sequences, int pad_id) {
    if (sequences.empty()) throw EmptyBatchError("lm_batch: no sequences");
    std::vector<std::vector<int>> rows(sequences.begin(), sequences.end());
    std::vector<std::size_t> loss_from(rows.size(), 1);  // every next token counts
    return shift_and_pad(rows, loss_from, pad_id);
}

TokenBatch qa_batch(std::span<const FactRecord> facts, int pad_id) {
    if (facts.empty()) throw EmptyBatchError("qa_batch: no facts");
    std::vector<std::vector<int>> rows;
    std::vector<std::size_t> loss_from;
    rows.reserve(facts.size());
    for (const FactRecord& rec : facts) {
        QaExample qa = format_qa(rec);
        std::vector<int> row = std::move(qa.prompt);
        loss_from.push_back(row.size());  // first answer token's position
        row.insert(row.end(), qa.answer.begin(), qa.answer.end());
        rows.push_back(std::move(row));
    }
    return shift_and_pad(rows, loss_from, pad_id);
}

void export_facts_jsonl(const Vocab& vocab, std::span<const FactRecord> facts,
                        const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    for (const FactRecord& rec : facts) {
        nlohmann::ordered_json j;
        j["subject"] = vocab.word(rec.subject);
        j["relation"] = vocab.word(rec.relation);
        j["object"] = nlohmann::json::array();
        for (int o : rec.object) j["object"].push_back(vocab.word(o));
        j["split"] = fact_split_name(rec.split);
        out << j.dump() << "\n";
    }
}

void export_corpus_jsonl(const Vocab& vocab, std::span<const std::vector<int>> sequences,
                         const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    for (const auto& seq : sequences) {
        nlohmann::ordered_json j;
        j["tokens"] = seq;
        j["text"] = vocab.detokenize(seq);
        out << j.dump() << "\n";
    }
}

}  // namespace smem
