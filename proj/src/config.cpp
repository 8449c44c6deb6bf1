#include "sparsemem/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "sparsemem/checkpoint.hpp"

namespace smem {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

int line_at_offset(const std::string& text, std::size_t offset) {
    offset = std::min(offset, text.size());
    return 1 + static_cast<int>(std::count(text.begin(),
                                           text.begin() + static_cast<std::ptrdiff_t>(offset),
                                           '\n'));
}

// Best-effort source line of a key, searched after its enclosing section
// so repeated key names (steps, lr, ...) resolve to the right occurrence.
int line_of_key(const std::string& text, const std::string& key, std::size_t from) {
    const std::size_t at = text.find("\"" + key + "\"", from);
    if (at == std::string::npos) return line_at_offset(text, from);
    return line_at_offset(text, at);
}

// One object level of the config, tracking which keys were consumed so
// anything left over is reported as unknown, with its line.
class Section {
public:
    Section(const json& j, const std::string& text, std::string path, std::size_t from)
        : j_(j), text_(text), path_(std::move(path)), from_(from) {
        if (!j_.is_object()) {
            throw ConfigError("config line " + std::to_string(line_at_offset(text_, from_)) +
                              ": " + label() + " must be an object");
        }
    }

    bool has(const std::string& key) {
        seen_.insert(key);
        return j_.contains(key);
    }

    template <typename T>
    void get(const std::string& key, T& field) {
        if (!has(key)) return;
        try {
            field = j_.at(key).get<T>();
        } catch (const json::exception&) {
            throw ConfigError("config line " + std::to_string(key_line(key)) + ": " + label() +
                              "." + key + " has the wrong type");
        }
    }

    Section child(const std::string& key) {
        seen_.insert(key);
        return Section(j_.at(key), text_, path_.empty() ? key : path_ + "." + key,
                       find_from(key));
    }

    bool has_child(const std::string& key) {
        seen_.insert(key);
        return j_.contains(key) && !j_.at(key).is_null();
    }

    void finish() const {
        for (const auto& [key, value] : j_.items()) {
            if (seen_.count(key) == 0) {
                throw ConfigError("config line " + std::to_string(key_line(key)) +
                                  ": unknown key " + label() + "." + key);
            }
        }
    }

    std::size_t find_from(const std::string& key) const {
        const std::size_t at = text_.find("\"" + key + "\"", from_);
        return at == std::string::npos ? from_ : at;
    }

private:
    std::string label() const { return path_.empty() ? "top level" : path_; }
    int key_line(const std::string& key) const { return line_of_key(text_, key, from_); }

    const json& j_;
    const std::string& text_;
    std::string path_;
    std::size_t from_;
    std::set<std::string> seen_;
};

void parse_model(Section s, TransformerConfig& m) {
    s.get("vocab_size", m.vocab_size);
    s.get("d_model", m.d_model);
    s.get("d_ff", m.d_ff);
    s.get("d_key", m.d_key);
    s.get("layers", m.layers);
    s.get("heads", m.heads);
    s.get("context", m.context);
    s.get("memory_slots", m.memory_slots);
    s.get("retrieve_k", m.retrieve_k);
    s.get("memory_layers", m.memory_layers);
    s.get("alpha", m.alpha);
    s.finish();
}

void parse_data(Section s, DataConfig& d) {
    s.get("facts_a", d.facts_a);
    s.get("facts_b", d.facts_b);
    s.get("facts_h", d.facts_h);
    s.get("corpus_sequences", d.corpus_sequences);
    s.get("heldout_sequences", d.heldout_sequences);
    s.get("max_seq_len", d.max_seq_len);
    s.get("overwrite_conflicts", d.overwrite_conflicts);
    s.finish();
}

void parse_pretrain(Section s, PretrainConfig& p) {
    s.get("steps", p.steps);
    s.get("batch_size", p.batch_size);
    s.get("lr", p.lr);
    s.get("eval_every", p.eval_every);
    s.get("plateau_patience", p.plateau_patience);
    s.get("plateau_min_delta", p.plateau_min_delta);
    s.finish();
}

void parse_recovery(Section s, RecoveryConfig& r) {
    s.get("steps", r.steps);
    s.get("batch_size", r.batch_size);
    s.get("lr", r.lr);
    s.get("eval_every", r.eval_every);
    s.finish();
}

void parse_finetune(Section s, FinetuneConfig& f) {
    s.get("steps", f.steps);
    s.get("batch_size", f.batch_size);
    s.get("dense_lr", f.dense_lr);
    s.get("sparse_lr", f.sparse_lr);
    s.get("eval_every", f.eval_every);
    s.get("arms", f.arms);
    s.finish();
}

void parse_score(Section s, ScoreConfig& c, const std::string& text) {
    if (s.has("mode")) {
        std::string mode;
        s.get("mode", mode);
        try {
            c.mode = score_mode_from_name(mode);
        } catch (const SchemaError& e) {
            throw ConfigError("config line " +
                              std::to_string(line_of_key(text, "mode", s.find_from("mode"))) +
                              ": " + e.what());
        }
    }
    s.get("top_t", c.top_t);
    s.get("epsilon", c.epsilon);
    s.get("sparse_keys", c.sparse_keys);
    s.finish();
}

const std::set<std::string> kKnownArms{"dense", "sparse", "sparse-tfidf", "sparse-kl"};

}  // namespace

void RunConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("config: " + msg); };
    try {
        model.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(e.what());
    }
    if (out_dir.empty()) fail("out_dir must not be empty");

    if (data.facts_a < 1 || data.facts_b < 1 || data.facts_h < 1) {
        fail("every fact split needs at least one record");
    }
    if (data.corpus_sequences < 1 || data.heldout_sequences < 1) {
        fail("corpus sizes must be positive");
    }
    if (data.max_seq_len < 8) fail("data.max_seq_len must be at least 8");
    if (data.max_seq_len > model.context + 1) {
        fail("data.max_seq_len " + std::to_string(data.max_seq_len) +
             " does not fit the model context " + std::to_string(model.context));
    }

    for (const auto* steps : {&pretrain.steps, &recovery.steps, &finetune.steps}) {
        if (*steps < 0) fail("step budgets cannot be negative");
    }
    for (const auto* batch : {&pretrain.batch_size, &recovery.batch_size, &finetune.batch_size}) {
        if (*batch < 1) fail("batch sizes must be positive");
    }
    for (const auto* every : {&pretrain.eval_every, &recovery.eval_every, &finetune.eval_every}) {
        if (*every < 1) fail("eval_every must be positive");
    }
    for (const double lr : {pretrain.lr, recovery.lr, finetune.dense_lr, finetune.sparse_lr}) {
        if (!(lr > 0.0)) fail("learning rates must be positive");
    }
    if (pretrain.plateau_patience < 1) fail("pretrain.plateau_patience must be positive");
    if (pretrain.plateau_min_delta < 0.0) fail("pretrain.plateau_min_delta cannot be negative");

    if (finetune.arms.empty()) fail("finetune.arms must not be empty");
    for (const std::string& arm : finetune.arms) {
        if (kKnownArms.count(arm) == 0) fail("unknown finetune arm '" + arm + "'");
    }
    if (score.top_t < 1) fail("score.top_t must be positive");
    if (!(score.epsilon > 0.0)) fail("score.epsilon must be positive");
    if (background_batches < 1) fail("background_batches must be positive");
}

RunConfig parse_run_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError("config line " + std::to_string(line_at_offset(json_text, e.byte)) +
                          ": " + e.what());
    }

    RunConfig cfg;
    Section top(j, json_text, "", 0);
    top.get("seed", cfg.seed);
    top.get("out_dir", cfg.out_dir);
    if (top.has_child("model")) parse_model(top.child("model"), cfg.model);
    if (top.has_child("data")) parse_data(top.child("data"), cfg.data);
    if (top.has_child("pretrain")) parse_pretrain(top.child("pretrain"), cfg.pretrain);
    if (top.has_child("recovery")) parse_recovery(top.child("recovery"), cfg.recovery);
    if (top.has_child("finetune")) parse_finetune(top.child("finetune"), cfg.finetune);
    if (top.has_child("score")) parse_score(top.child("score"), cfg.score, json_text);
    top.get("background_batches", cfg.background_batches);
    top.finish();

    cfg.validate();
    return cfg;
}

RunConfig load_run_config(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw ConfigError("cannot read config file " + file.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_run_config(buf.str());
}

ordered_json run_config_json(const RunConfig& cfg, bool include_out_dir) {
    ordered_json j;
    j["seed"] = cfg.seed;
    if (include_out_dir) j["out_dir"] = cfg.out_dir;
    ordered_json model;
    to_json(model, cfg.model);
    j["model"] = model;
    j["data"] = {{"facts_a", cfg.data.facts_a},
                 {"facts_b", cfg.data.facts_b},
                 {"facts_h", cfg.data.facts_h},
                 {"corpus_sequences", cfg.data.corpus_sequences},
                 {"heldout_sequences", cfg.data.heldout_sequences},
                 {"max_seq_len", cfg.data.max_seq_len},
                 {"overwrite_conflicts", cfg.data.overwrite_conflicts}};
    j["pretrain"] = {{"steps", cfg.pretrain.steps},
                     {"batch_size", cfg.pretrain.batch_size},
                     {"lr", cfg.pretrain.lr},
                     {"eval_every", cfg.pretrain.eval_every},
                     {"plateau_patience", cfg.pretrain.plateau_patience},
                     {"plateau_min_delta", cfg.pretrain.plateau_min_delta}};
    j["recovery"] = {{"steps", cfg.recovery.steps},
                     {"batch_size", cfg.recovery.batch_size},
                     {"lr", cfg.recovery.lr},
                     {"eval_every", cfg.recovery.eval_every}};
    j["finetune"] = {{"steps", cfg.finetune.steps},
                     {"batch_size", cfg.finetune.batch_size},
                     {"dense_lr", cfg.finetune.dense_lr},
                     {"sparse_lr", cfg.finetune.sparse_lr},
                     {"eval_every", cfg.finetune.eval_every},
                     {"arms", cfg.finetune.arms}};
    j["score"] = {{"mode", score_mode_name(cfg.score.mode)},
                  {"top_t", cfg.score.top_t},
                  {"epsilon", cfg.score.epsilon},
                  {"sparse_keys", cfg.score.sparse_keys}};
    j["background_batches"] = cfg.background_batches;
    return j;
}

std::vector<std::string> resolve_arms(const RunConfig& cfg) {
    const std::string sparse_default =
        cfg.score.mode == ScoreMode::kl ? "sparse-kl" : "sparse-tfidf";
    std::vector<std::string> resolved;
    for (const std::string& arm : cfg.finetune.arms) {
        const std::string name = arm == "sparse" ? sparse_default : arm;
        if (std::find(resolved.begin(), resolved.end(), name) == resolved.end()) {
            resolved.push_back(name);
        }
    }
    const std::vector<std::string> canonical{"dense", "sparse-tfidf", "sparse-kl"};
    std::vector<std::string> ordered;
    for (const std::string& name : canonical) {
        if (std::find(resolved.begin(), resolved.end(), name) != resolved.end()) {
            ordered.push_back(name);
        }
    }
    return ordered;
}

}  // namespace smem
