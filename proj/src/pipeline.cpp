#include "sparsemem/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

#include "sparsemem/checksum.hpp"
#include "sparsemem/evaluate.hpp"
#include "sparsemem/optimizer.hpp"

namespace smem {

using nlohmann::ordered_json;
namespace fs = std::filesystem;

std::uint64_t stream_seed(std::uint64_t run_seed, SeedStream stream) {
    return derive_seed(run_seed, static_cast<std::uint64_t>(stream));
}

namespace {

std::string number_str(double v) { return nlohmann::json(v).dump(); }

int arm_rank(const std::string& arm) {
    static const std::vector<std::string> order{"pretrain",    "retrofit",  "recovery",
                                                "dense",       "sparse-tfidf", "sparse-kl"};
    const auto it = std::find(order.begin(), order.end(), arm);
    return static_cast<int>(it - order.begin());
}

}  // namespace

MetricsLog::MetricsLog(fs::path file) : file_(std::move(file)) {
    std::ifstream in(file_, std::ios::binary);
    if (!in) return;
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string step, arm, metric, value;
        if (!std::getline(row, step, ',') || !std::getline(row, arm, ',') ||
            !std::getline(row, metric, ',') || !std::getline(row, value)) {
            throw IoError("metrics log " + file_.string() + " has a malformed row: " + line);
        }
        rows_.push_back({std::stol(step), arm, metric, std::stod(value)});
    }
}

void MetricsLog::drop_arm(const std::string& arm) {
    std::erase_if(rows_, [&](const Row& r) { return r.arm == arm; });
}

void MetricsLog::add(long step, const std::string& arm, const std::string& metric, double value) {
    rows_.push_back({step, arm, metric, value});
}

void MetricsLog::save() const {
    std::vector<Row> sorted = rows_;
    std::stable_sort(sorted.begin(), sorted.end(), [](const Row& a, const Row& b) {
        const int ra = arm_rank(a.arm), rb = arm_rank(b.arm);
        if (ra != rb) return ra < rb;
        if (a.arm != b.arm) return a.arm < b.arm;
        if (a.step != b.step) return a.step < b.step;
        return a.metric < b.metric;
    });
    fs::create_directories(file_.parent_path());
    std::ofstream out(file_, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write metrics log " + file_.string());
    out << "step,arm,metric,value\n";
    for (const Row& r : sorted) {
        out << r.step << "," << r.arm << "," << r.metric << "," << number_str(r.value) << "\n";
    }
}

const std::vector<std::string>& all_stage_names() {
    static const std::vector<std::string> names{"pretrain",  "retrofit", "recover",
                                                "background-df", "finetune", "eval", "report"};
    return names;
}

std::vector<std::string> resolve_stage_list(const std::string& selector) {
    if (selector == "all") return all_stage_names();
    std::vector<std::string> stages;
    std::istringstream in(selector);
    std::string name;
    while (std::getline(in, name, ',')) {
        if (name.empty()) continue;
        const auto& known = all_stage_names();
        if (std::find(known.begin(), known.end(), name) == known.end()) {
            throw ConfigError("unknown stage '" + name + "'");
        }
        stages.push_back(name);
    }
    if (stages.empty()) throw ConfigError("no stages selected");
    return stages;
}

namespace {

std::vector<std::vector<int>> sample_sequences(const std::vector<std::vector<int>>& corpus,
                                               std::mt19937_64& rng, int n) {
    std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
    std::vector<std::vector<int>> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) out.push_back(corpus[pick(rng)]);
    return out;
}

std::vector<FactRecord> sample_facts(const std::vector<FactRecord>& facts, std::mt19937_64& rng,
                                     int n) {
    std::uniform_int_distribution<std::size_t> pick(0, facts.size() - 1);
    std::vector<FactRecord> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) out.push_back(facts[pick(rng)]);
    return out;
}

void set_training_scope(Model& model, const std::vector<Tensor>& trained) {
    for (NamedParam& np : model.named_params()) np.tensor.set_requires_grad(false);
    for (const Tensor& t : trained) {
        Tensor handle = t;
        handle.set_requires_grad(true);
    }
}

// Forward + backward of the weighted next-token loss; the caller decides
// what happens between the gradients and the optimizer step.
double forward_backward(const Model& model, const TokenBatch& batch, long step,
                        std::vector<SlotUsageStats>* usage = nullptr) {
    GradTape tape;
    Tensor logits = model.forward(batch.inputs, batch.batch, batch.seq_len, usage);
    Tensor flat =
        reshape(logits, Shape::mat(batch.batch * batch.seq_len, model.config().vocab_size));
    Tensor loss = cross_entropy_weighted(flat, batch.targets, batch.weights);
    const double value = loss.scalar();
    if (!std::isfinite(value)) {
        throw TrainingDivergedError(step, "training loss became non-finite at step " +
                                              std::to_string(step));
    }
    tape.backward(loss);
    return value;
}

std::set<const void*> node_set(const std::vector<Tensor>& params) {
    std::set<const void*> out;
    for (const Tensor& t : params) out.insert(t.node().get());
    return out;
}

void verify_frozen(const Model& model, const std::set<const void*>& trained,
                   const ordered_json& before, const std::string& stage) {
    const ordered_json after = param_checksums(model);
    for (const NamedParam& np : model.named_params()) {
        if (trained.count(np.tensor.node().get()) != 0) continue;
        if (before.at(np.name) != after.at(np.name)) {
            throw FreezeViolationError(stage + " modified frozen parameter " + np.name);
        }
    }
}

}  // namespace

Pipeline::Pipeline(RunConfig cfg, std::ostream* progress)
    : cfg_(std::move(cfg)), progress_(progress) {
    cfg_.validate();
    const std::vector<std::string> arms = resolve_arms(cfg_);
    const bool wants_sparse =
        std::any_of(arms.begin(), arms.end(),
                    [](const std::string& arm) { return arm != "dense"; });
    if (wants_sparse && cfg_.model.memory_layers.empty()) {
        throw ConfigError("config: sparse finetune arms need model.memory_layers");
    }

    facts_ = gen_fact_dataset(vocab_, stream_seed(cfg_.seed, SeedStream::facts),
                              cfg_.data.facts_a, cfg_.data.facts_b, cfg_.data.facts_h,
                              cfg_.data.overwrite_conflicts);
    corpus_facts_ = facts_.base_a;
    corpus_facts_.insert(corpus_facts_.end(), facts_.heldout_h.begin(), facts_.heldout_h.end());
    corpus_ = gen_general_corpus(vocab_, stream_seed(cfg_.seed, SeedStream::corpus),
                                 cfg_.data.corpus_sequences, corpus_facts_, cfg_.data.max_seq_len);
    heldout_ = gen_general_corpus(vocab_, stream_seed(cfg_.seed, SeedStream::heldout_corpus),
                                  cfg_.data.heldout_sequences, corpus_facts_,
                                  cfg_.data.max_seq_len);
}

fs::path Pipeline::checkpoint_dir(StageTag stage) const {
    return fs::path(cfg_.out_dir) / "checkpoints" / stage_name(stage);
}

fs::path Pipeline::metrics_file() const { return fs::path(cfg_.out_dir) / "metrics.csv"; }

fs::path Pipeline::background_file() const {
    return fs::path(cfg_.out_dir) / "background_df.json";
}

fs::path Pipeline::trace_file(const std::string& arm) const {
    return fs::path(cfg_.out_dir) / (arm + "_selection_trace.jsonl");
}

fs::path Pipeline::report_dir() const { return fs::path(cfg_.out_dir) / "report"; }

LoadedCheckpoint Pipeline::load_stage(StageTag expected) const {
    const fs::path dir = checkpoint_dir(expected);
    if (!fs::exists(dir / "manifest.json")) {
        throw StageError("no " + stage_name(expected) + " checkpoint at " + dir.string() +
                         "; run the earlier stages first");
    }
    LoadedCheckpoint loaded = load_checkpoint(dir);
    if (loaded.stage != expected) {
        throw StageError("checkpoint at " + dir.string() + " is tagged " +
                         stage_name(loaded.stage) + ", expected " + stage_name(expected));
    }
    return loaded;
}

double Pipeline::general_loss(const Model& model) const {
    return eval_lm_loss(model, heldout_);
}

void Pipeline::say(const std::string& line) const {
    if (progress_) *progress_ << line << "\n" << std::flush;
}

void Pipeline::run_stage(const std::string& name) {
    if (name == "pretrain") return pretrain();
    if (name == "retrofit") return retrofit();
    if (name == "recover") return recover();
    if (name == "background-df") return background_df();
    if (name == "finetune") return finetune();
    if (name == "eval") return evaluate();
    if (name == "report") return report();
    throw ConfigError("unknown stage '" + name + "'");
}

void Pipeline::pretrain() {
    Model model(cfg_.model, stream_seed(cfg_.seed, SeedStream::model_init));
    const std::vector<Tensor> trained = model.trainable_params();
    set_training_scope(model, trained);
    AdamOptimizer adam({.lr = cfg_.pretrain.lr});
    adam.add_params(trained);

    std::mt19937_64 rng(stream_seed(cfg_.seed, SeedStream::pretrain_batches));
    MetricsLog log(metrics_file());
    log.drop_arm("pretrain");

    double gl = general_loss(model);
    double acc = fact_accuracy(model, facts_.base_a);
    log.add(0, "pretrain", kMetricGeneralLoss, gl);
    log.add(0, "pretrain", "fact_accuracy_a", acc);
    say("pretrain    step 0 loss " + number_str(gl) + " acc_a " + number_str(acc));

    double best = gl;
    int stale = 0;
    long ran = 0;
    for (long step = 1; step <= cfg_.pretrain.steps; ++step) {
        const TokenBatch batch =
            lm_batch(sample_sequences(corpus_, rng, cfg_.pretrain.batch_size));
        forward_backward(model, batch, step);
        adam.step();
        adam.zero_grads();
        ran = step;
        if (step % cfg_.pretrain.eval_every == 0 || step == cfg_.pretrain.steps) {
            gl = general_loss(model);
            acc = fact_accuracy(model, facts_.base_a);
            log.add(step, "pretrain", kMetricGeneralLoss, gl);
            log.add(step, "pretrain", "fact_accuracy_a", acc);
            say("pretrain    step " + std::to_string(step) + " loss " + number_str(gl) +
                " acc_a " + number_str(acc));
            if (gl < best - cfg_.pretrain.plateau_min_delta) {
                best = gl;
                stale = 0;
            } else if (++stale >= cfg_.pretrain.plateau_patience) {
                say("pretrain    plateaued, stopping at step " + std::to_string(step));
                break;
            }
        }
    }
    log.save();

    ordered_json extra;
    extra["eval_loss"] = gl;
    extra["fact_accuracy_a"] = acc;
    extra["steps_run"] = ran;
    save_checkpoint(model, StageTag::pretrained, cfg_.seed, checkpoint_dir(StageTag::pretrained),
                    extra);
}

void Pipeline::retrofit() {
    LoadedCheckpoint loaded = load_stage(StageTag::pretrained);
    Model& model = loaded.model;

    const double pre = general_loss(model);
    std::mt19937_64 rng(stream_seed(cfg_.seed, SeedStream::retrofit_keys));
    model.retrofit_replace(cfg_.model.memory_layers, rng);
    const double post = general_loss(model);
    say("retrofit    loss " + number_str(pre) + " -> " + number_str(post));

    MetricsLog log(metrics_file());
    log.drop_arm("retrofit");
    log.add(0, "retrofit", kMetricGeneralLoss, pre);
    log.add(1, "retrofit", kMetricGeneralLoss, post);
    log.save();

    ordered_json extra;
    extra["pretrained_eval_loss"] = pre;
    extra["retrofitted_eval_loss"] = post;
    save_checkpoint(model, StageTag::retrofitted, cfg_.seed,
                    checkpoint_dir(StageTag::retrofitted), extra);
}

void Pipeline::recover() {
    LoadedCheckpoint loaded = load_stage(StageTag::retrofitted);
    Model& model = loaded.model;

    const std::vector<Tensor> trained = model.memory_params();
    const std::set<const void*> trained_nodes = node_set(trained);
    const ordered_json before = param_checksums(model);
    set_training_scope(model, trained);
    AdamOptimizer adam({.lr = cfg_.recovery.lr});
    adam.add_params(trained);

    std::mt19937_64 rng(stream_seed(cfg_.seed, SeedStream::recovery_batches));
    MetricsLog log(metrics_file());
    log.drop_arm("recovery");

    double gl = general_loss(model);
    log.add(0, "recovery", kMetricGeneralLoss, gl);
    say("recovery    step 0 loss " + number_str(gl));
    for (long step = 1; step <= cfg_.recovery.steps; ++step) {
        const TokenBatch batch =
            lm_batch(sample_sequences(corpus_, rng, cfg_.recovery.batch_size));
        forward_backward(model, batch, step);
        adam.step();
        adam.zero_grads();
        if (step % cfg_.recovery.eval_every == 0 || step == cfg_.recovery.steps) {
            gl = general_loss(model);
            log.add(step, "recovery", kMetricGeneralLoss, gl);
            say("recovery    step " + std::to_string(step) + " loss " + number_str(gl));
        }
    }
    log.save();
    verify_frozen(model, trained_nodes, before, "recovery");

    ordered_json extra;
    extra["pretrained_eval_loss"] = loaded.extra.value("pretrained_eval_loss", 0.0);
    extra["retrofitted_eval_loss"] = loaded.extra.value("retrofitted_eval_loss", 0.0);
    extra["recovered_eval_loss"] = gl;
    save_checkpoint(model, StageTag::recovered, cfg_.seed, checkpoint_dir(StageTag::recovered),
                    extra);
}

void Pipeline::background_df() {
    LoadedCheckpoint loaded = load_stage(StageTag::recovered);
    const Model& model = loaded.model;
    const std::vector<int> ids = model.memory_layer_ids();
    if (ids.empty()) throw StageError("background-df: the model has no memory layers");

    std::vector<SlotUsageStats> usage = model.make_usage();
    std::vector<BackgroundDf> bg;
    for (int id : ids) bg.emplace_back(id, static_cast<Index>(cfg_.model.memory_slots));

    const std::size_t batches = std::min<std::size_t>(
        static_cast<std::size_t>(cfg_.background_batches), corpus_.size());
    for (std::size_t i = 0; i < batches; ++i) {
        for (SlotUsageStats& u : usage) u.reset();
        const TokenBatch b = lm_batch(std::span(&corpus_[i], 1));
        model.forward(b.inputs, b.batch, b.seq_len, &usage);
        for (std::size_t l = 0; l < bg.size(); ++l) accumulate_background(bg[l], usage[l]);
    }
    say("background  df over " + std::to_string(batches) + " batches");

    ordered_json j;
    j["schema_version"] = 1;
    j["kind"] = "background_df";
    j["batches"] = batches;
    ordered_json layers = ordered_json::array();
    for (const BackgroundDf& b : bg) {
        layers.push_back({{"layer_id", b.layer_id}, {"df", b.df}});
    }
    j["layers"] = layers;
    fs::create_directories(cfg_.out_dir);
    std::ofstream out(background_file(), std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + background_file().string());
    out << j.dump(2) << "\n";
}

std::vector<BackgroundDf> Pipeline::load_background() const {
    std::ifstream in(background_file(), std::ios::binary);
    if (!in) {
        throw StageError("no background statistic at " + background_file().string() +
                         "; run the background-df stage first");
    }
    ordered_json j;
    try {
        j = ordered_json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw SchemaError("background statistic failed to parse: " + std::string(e.what()));
    }
    if (j.value("schema_version", -1) != 1 || j.value("kind", "") != "background_df") {
        throw SchemaError("background statistic has an unsupported schema");
    }
    const long batches = j.at("batches").get<long>();
    if (batches < 1) throw SchemaError("background statistic covers no batches");

    std::vector<BackgroundDf> bg;
    for (const auto& layer : j.at("layers")) {
        BackgroundDf b(layer.at("layer_id").get<int>(),
                       static_cast<Index>(cfg_.model.memory_slots));
        b.df = layer.at("df").get<std::vector<long>>();
        b.batches = batches;
        if (b.df.size() != static_cast<std::size_t>(cfg_.model.memory_slots)) {
            throw SchemaError("background statistic sized for " + std::to_string(b.df.size()) +
                              " slots, config has " + std::to_string(cfg_.model.memory_slots));
        }
        bg.push_back(std::move(b));
    }
    return bg;
}

void Pipeline::finetune() {
    for (const std::string& arm : resolve_arms(cfg_)) finetune_arm(arm);
}

void Pipeline::finetune_arm(const std::string& arm) {
    const bool sparse = arm != "dense";
    StageTag tag = StageTag::finetuned_dense;
    ScoreConfig score = cfg_.score;
    if (arm == "sparse-tfidf") {
        tag = StageTag::finetuned_sparse_tfidf;
        score.mode = ScoreMode::tfidf;
    } else if (arm == "sparse-kl") {
        tag = StageTag::finetuned_sparse_kl;
        score.mode = ScoreMode::kl;
    } else if (sparse) {
        throw ConfigError("unknown finetune arm '" + arm + "'");
    }

    LoadedCheckpoint loaded = load_stage(StageTag::recovered);
    Model& model = loaded.model;
    const std::vector<int> mem_ids = model.memory_layer_ids();

    std::vector<BackgroundDf> bg;
    std::vector<Tensor> value_tables, key_tables;
    if (sparse) {
        bg = load_background();
        if (bg.size() != mem_ids.size()) {
            throw SchemaError("background statistic covers " + std::to_string(bg.size()) +
                              " layers, model has " + std::to_string(mem_ids.size()));
        }
        for (std::size_t l = 0; l < mem_ids.size(); ++l) {
            if (bg[l].layer_id != mem_ids[l]) {
                throw SchemaError("background statistic layer order does not match the model");
            }
            const MemoryLayerParams& mem = model.layer(mem_ids[l]).memory();
            value_tables.push_back(mem.values);
            key_tables.push_back(mem.keys);
        }
    }

    std::vector<Tensor> trained;
    AdamOptimizer adam({.lr = sparse ? cfg_.finetune.sparse_lr : cfg_.finetune.dense_lr});
    if (sparse) {
        trained = value_tables;
        if (score.sparse_keys) {
            trained.insert(trained.end(), key_tables.begin(), key_tables.end());
        }
        for (const Tensor& t : trained) adam.add_param(t, /*row_sparse=*/true);
    } else {
        trained = model.trainable_params();
        adam.add_params(trained);
    }
    set_training_scope(model, trained);
    const std::set<const void*> trained_nodes = node_set(trained);
    const ordered_json before = param_checksums(model);

    MetricsLog log(metrics_file());
    log.drop_arm(arm);
    std::ofstream trace;
    if (sparse) {
        fs::create_directories(cfg_.out_dir);
        trace.open(trace_file(arm), std::ios::binary | std::ios::trunc);
        if (!trace) throw IoError("cannot write " + trace_file(arm).string());
    }

    std::mt19937_64 rng(stream_seed(cfg_.seed, SeedStream::finetune_batches));
    auto log_eval = [&](long step) {
        const double acc = fact_accuracy(model, facts_.new_b);
        const double hl = eval_qa_loss(model, facts_.heldout_h);
        const double gl = general_loss(model);
        log.add(step, arm, kMetricTargetAccuracy, acc);
        log.add(step, arm, kMetricHeldoutLoss, hl);
        log.add(step, arm, kMetricGeneralLoss, gl);
        say(arm + "  step " + std::to_string(step) + " acc_b " + number_str(acc) +
            " heldout " + number_str(hl) + " general " + number_str(gl));
    };
    log_eval(0);

    std::vector<SlotUsageStats> usage = model.make_usage();
    for (long step = 1; step <= cfg_.finetune.steps; ++step) {
        const TokenBatch batch =
            qa_batch(sample_facts(facts_.new_b, rng, cfg_.finetune.batch_size));
        for (SlotUsageStats& u : usage) u.reset();
        forward_backward(model, batch, step, sparse ? &usage : nullptr);
        if (sparse) {
            for (std::size_t l = 0; l < mem_ids.size(); ++l) {
                const SlotScores scores = score_slots(usage[l], bg[l], score);
                const std::vector<int> selected = select_slots(scores, score.top_t);
                mask_value_gradients(value_tables[l], selected);
                if (score.sparse_keys) mask_value_gradients(key_tables[l], selected);

                ordered_json line;
                line["step"] = step;
                line["layer"] = mem_ids[l];
                ordered_json accessed = ordered_json::array();
                for (std::size_t i = 0; i < usage[l].counts.size(); ++i) {
                    if (usage[l].counts[i] > 0) accessed.push_back(i);
                }
                line["accessed"] = accessed;
                line["selected"] = selected;
                trace << line.dump() << "\n";
            }
        }
        adam.step();
        adam.zero_grads();
        if (step % cfg_.finetune.eval_every == 0 || step == cfg_.finetune.steps) log_eval(step);
    }
    log.save();
    verify_frozen(model, trained_nodes, before, arm + " finetuning");

    ordered_json extra;
    extra["arm"] = arm;
    extra["target_accuracy"] = fact_accuracy(model, facts_.new_b);
    extra["heldout_loss"] = eval_qa_loss(model, facts_.heldout_h);
    extra["general_loss"] = general_loss(model);
    save_checkpoint(model, tag, cfg_.seed, checkpoint_dir(tag), extra);
}

void Pipeline::evaluate() {
    ordered_json per = ordered_json::object();
    for (StageTag tag : {StageTag::pretrained, StageTag::retrofitted, StageTag::recovered,
                         StageTag::finetuned_dense, StageTag::finetuned_sparse_tfidf,
                         StageTag::finetuned_sparse_kl}) {
        if (!fs::exists(checkpoint_dir(tag) / "manifest.json")) continue;
        LoadedCheckpoint loaded = load_stage(tag);
        ordered_json m;
        m["general_loss"] = general_loss(loaded.model);
        m["heldout_loss"] = eval_qa_loss(loaded.model, facts_.heldout_h);
        m["target_accuracy"] = fact_accuracy(loaded.model, facts_.new_b);
        m["fact_accuracy_a"] = fact_accuracy(loaded.model, facts_.base_a);
        per[stage_name(tag)] = m;
        say("eval        " + stage_name(tag));
    }
    if (per.empty()) {
        throw StageError("eval: no checkpoints under " +
                         (fs::path(cfg_.out_dir) / "checkpoints").string());
    }
    ordered_json j;
    j["schema_version"] = 1;
    j["kind"] = "eval";
    j["checkpoints"] = per;
    fs::create_directories(cfg_.out_dir);
    std::ofstream out(fs::path(cfg_.out_dir) / "eval.json", std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write eval.json");
    out << j.dump(2) << "\n";
}

void Pipeline::report() {
    MetricsLog log(metrics_file());
    if (log.rows().empty()) {
        throw StageError("report: no metrics at " + metrics_file().string() +
                         "; run the training stages first");
    }

    EvalReport rep;
    rep.manifest["seed"] = cfg_.seed;
    rep.manifest["config"] = run_config_json(cfg_, false);

    for (const std::string& arm : resolve_arms(cfg_)) {
        for (const char* metric : {kMetricTargetAccuracy, kMetricHeldoutLoss, kMetricGeneralLoss}) {
            std::vector<MetricsLog::Row> rows;
            for (const MetricsLog::Row& r : log.rows()) {
                if (r.arm == arm && r.metric == metric) rows.push_back(r);
            }
            std::sort(rows.begin(), rows.end(),
                      [](const auto& a, const auto& b) { return a.step < b.step; });
            for (const auto& r : rows) rep.add(arm, metric, r.step, r.value);
        }
        if (rep.has(arm, kMetricGeneralLoss) && rep.get(arm, kMetricGeneralLoss).size() >= 2) {
            for (const MetricPoint& p : forgetting_delta(rep, arm, kMetricGeneralLoss)) {
                rep.add(arm, kMetricForgetting, p.step, p.value);
            }
        }
    }
    emit_report(rep, report_dir());
    say("report      " + (report_dir() / "report.json").string());
}

}  // namespace smem
