#include "sparsemem/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace smem {

void TransformerConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
    if (vocab_size < 1) fail("vocab_size must be positive");
    if (d_model < 1 || d_ff < 1 || d_key < 1) fail("widths must be positive");
    if (layers < 1) fail("layers must be positive");
    if (heads < 1 || d_model % heads != 0) {
        fail("d_model " + std::to_string(d_model) + " must divide into heads " +
             std::to_string(heads));
    }
    if (context < 1) fail("context must be positive");
    if (memory_slots < 1) fail("memory_slots must be positive");
    if (retrieve_k < 1 || retrieve_k > memory_slots) {
        fail("retrieve_k " + std::to_string(retrieve_k) + " must lie in [1, memory_slots]");
    }
    for (int id : memory_layers) {
        if (id < 0 || id >= layers) {
            fail("memory layer index " + std::to_string(id) + " outside [0, " +
                 std::to_string(layers) + ")");
        }
    }
    for (std::size_t i = 1; i < memory_layers.size(); ++i) {
        if (memory_layers[i] <= memory_layers[i - 1]) {
            fail("memory layer indices must be strictly ascending");
        }
    }
}

Tensor ffn_forward(const Tensor& x, const FfnBlock& block) {
    if (x.rank() != 1) {
        throw ShapeError("ffn_forward: expected a vector activation, got " + x.shape().str());
    }
    return matvec(block.w2, gelu(matvec(block.w1, x)));
}

Tensor memory_query(const Tensor& x, const MemoryLayerParams& p) {
    return matvec(p.wq, x);
}

namespace {

// Indices of the k largest entries, descending score, ties by ascending
// index.
void top_k_indices(const double* scores, Index m, int k, std::vector<int>& out) {
    out.resize(static_cast<std::size_t>(m));
    std::iota(out.begin(), out.end(), 0);
    std::partial_sort(out.begin(), out.begin() + k, out.end(), [scores](int a, int b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    out.resize(static_cast<std::size_t>(k));
}

}  // namespace

TopkResult topk_retrieve(const Tensor& q, const Tensor& keys, int k) {
    if (q.rank() != 1 || keys.rank() != 2 || keys.dim(1) != q.dim(0)) {
        throw ShapeError("topk_retrieve: query " + q.shape().str() + " against keys " +
                         keys.shape().str());
    }
    const Index m = keys.dim(0);
    if (k < 1 || k > m) {
        throw ContractError("topk_retrieve: k = " + std::to_string(k) + " outside [1, " +
                            std::to_string(m) + "]");
    }
    Eigen::VectorXd scores = keys.mat() * ConstVecMap(q.data().data(), q.dim(0));
    TopkResult res;
    top_k_indices(scores.data(), m, k, res.indices);
    res.scores.reserve(static_cast<std::size_t>(k));
    for (int i : res.indices) res.scores.push_back(scores[i]);
    return res;
}

Tensor memory_lookup(const Tensor& h, const MemoryLayerParams& p, int k, SlotUsageStats* usage) {
    if (h.rank() != 2) {
        throw ShapeError("memory_lookup: expected [n x d] activations, got " + h.shape().str());
    }
    const Index n = h.dim(0), d = h.dim(1);
    const Index m = p.keys.dim(0), dk = p.keys.dim(1);
    if (p.wq.dim(0) != dk || p.wq.dim(1) != d || p.values.dim(0) != m || p.values.dim(1) != d) {
        throw ShapeError("memory_lookup: inconsistent parameter shapes");
    }
    if (k < 1 || k > m) {
        throw ContractError("memory_lookup: k = " + std::to_string(k) + " outside [1, " +
                            std::to_string(m) + "]");
    }
    if (usage && usage->slot_count() != m) {
        throw ContractError("memory_lookup: usage sink sized for " +
                            std::to_string(usage->slot_count()) + " slots, memory has " +
                            std::to_string(m));
    }

    Tensor q = linear(h, p.wq);  // [n x dk], tape-tracked

    // Retrieval is a hard selection: scores feed the tape only through the
    // chosen rows, so the full score matrix stays off-tape.
    MatrixRM scores = q.mat() * p.keys.mat().transpose();  // [n x m]
    std::vector<int> picked(static_cast<std::size_t>(n * k));
    MatrixRM weights(n, k);
    std::vector<int> row_top;
    for (Index r = 0; r < n; ++r) {
        top_k_indices(scores.row(r).data(), m, k, row_top);
        double mx = scores(r, row_top[0]);
        double z = 0.0;
        for (int j = 0; j < k; ++j) {
            const double e = std::exp(scores(r, row_top[static_cast<std::size_t>(j)]) - mx);
            weights(r, j) = e;
            z += e;
        }
        weights.row(r) /= z;
        std::copy(row_top.begin(), row_top.end(), picked.begin() + r * k);
    }
    if (usage) record_access(*usage, picked);

    Tensor y = Tensor::zeros(Shape::mat(n, d));
    {
        MatMap yv = y.mat();
        ConstMatMap hv = h.mat();
        ConstMatMap vv = p.values.mat();
        for (Index r = 0; r < n; ++r) {
            yv.row(r) = hv.row(r);
            for (int j = 0; j < k; ++j) {
                yv.row(r) += p.alpha * weights(r, j) * vv.row(picked[static_cast<std::size_t>(r * k + j)]);
            }
        }
    }

    auto hn = h.node(), qn = q.node(), kn = p.keys.node(), vn = p.values.node(), yn = y.node();
    const double alpha = p.alpha;
    if (tracing({&h, &q, &p.keys, &p.values})) {
        y.set_requires_grad(true);
        GradTape::active()->record([hn, qn, kn, vn, yn, n, d, dk, k, alpha,
                                    picked = std::move(picked), weights = std::move(weights)] {
            if (yn->grad.size() == 0) return;
            ConstMatMap dy(yn->grad.data(), n, d);
            ConstMatMap qv(qn->value.data(), n, dk);
            ConstMatMap kv(kn->value.data(), kn->shape.dim[0], dk);
            ConstMatMap vv(vn->value.data(), vn->shape.dim[0], d);
            if (hn->requires_grad) {
                hn->ensure_grad();
                MatMap(hn->grad.data(), n, d) += dy;
            }
            const bool want_q = qn->requires_grad;
            const bool want_k = kn->requires_grad;
            const bool want_v = vn->requires_grad;
            if (!want_q && !want_k && !want_v) return;
            if (want_q) qn->ensure_grad();
            if (want_k) kn->ensure_grad();
            if (want_v) vn->ensure_grad();
            Eigen::VectorXd a(k), ds(k);
            for (Index r = 0; r < n; ++r) {
                const int* idx = picked.data() + r * k;
                // a_j = alpha * V[i_j] . dy ; softmax backward over the
                // retrieved set gives ds, the score gradients
                for (int j = 0; j < k; ++j) a[j] = alpha * vv.row(idx[j]).dot(dy.row(r));
                const double mix = a.dot(weights.row(r).transpose());
                for (int j = 0; j < k; ++j) ds[j] = weights(r, j) * (a[j] - mix);
                if (want_v) {
                    MatMap dvm(vn->grad.data(), vn->shape.dim[0], d);
                    for (int j = 0; j < k; ++j) {
                        dvm.row(idx[j]) += alpha * weights(r, j) * dy.row(r);
                    }
                }
                if (want_q) {
                    MatMap dqm(qn->grad.data(), n, dk);
                    for (int j = 0; j < k; ++j) dqm.row(r) += ds[j] * kv.row(idx[j]);
                }
                if (want_k) {
                    MatMap dkm(kn->grad.data(), kn->shape.dim[0], dk);
                    for (int j = 0; j < k; ++j) dkm.row(idx[j]) += ds[j] * qv.row(r);
                }
            }
        });
    }
    return y;
}

Tensor memory_forward(const Tensor& x, const MemoryLayerParams& p, int k, SlotUsageStats* usage) {
    if (x.rank() != 1) {
        throw ShapeError("memory_forward: expected a vector activation, got " + x.shape().str());
    }
    Tensor row = reshape(x, Shape::mat(1, x.dim(0)));
    return reshape(memory_lookup(row, p, k, usage), x.shape());
}

Model::Model(TransformerConfig cfg, std::uint64_t init_seed) {
    cfg.validate();
    cfg_ = std::move(cfg);
    std::mt19937_64 rng(init_seed);
    const auto v = static_cast<Index>(cfg_.vocab_size);
    const auto d = static_cast<Index>(cfg_.d_model);
    const auto ff = static_cast<Index>(cfg_.d_ff);
    const double ws = 1.0 / std::sqrt(static_cast<double>(d));
    const double fs = 1.0 / std::sqrt(static_cast<double>(ff));

    tok_embed_ = Tensor::randn(Shape::mat(v, d), rng, 0.1, true);
    pos_embed_ = Tensor::randn(Shape::mat(cfg_.context, d), rng, 0.1, true);
    layers_.reserve(static_cast<std::size_t>(cfg_.layers));
    for (int l = 0; l < cfg_.layers; ++l) {
        LayerBlock blk;
        blk.attn_norm = Tensor::constant(Shape::vec(d), 1.0, true);
        blk.wq = Tensor::randn(Shape::mat(d, d), rng, ws, true);
        blk.wk = Tensor::randn(Shape::mat(d, d), rng, ws, true);
        blk.wv = Tensor::randn(Shape::mat(d, d), rng, ws, true);
        blk.wo = Tensor::randn(Shape::mat(d, d), rng, ws, true);
        blk.mlp_norm = Tensor::constant(Shape::vec(d), 1.0, true);
        FfnBlock ffn;
        ffn.w1 = Tensor::randn(Shape::mat(ff, d), rng, ws, true);
        ffn.w2 = Tensor::randn(Shape::mat(d, ff), rng, fs, true);
        blk.mlp = std::move(ffn);
        layers_.push_back(std::move(blk));
    }
    final_norm_ = Tensor::constant(Shape::vec(d), 1.0, true);
    head_ = Tensor::randn(Shape::mat(v, d), rng, ws, true);
}

Model Model::skeleton(TransformerConfig cfg, std::span<const int> memory_layer_ids) {
    Model m(cfg, 0);
    for (NamedParam& np : m.named_params()) np.tensor.data().setZero();
    const auto d = static_cast<Index>(cfg.d_model);
    const auto dk = static_cast<Index>(cfg.d_key);
    const auto slots = static_cast<Index>(cfg.memory_slots);
    for (int id : memory_layer_ids) {
        m.to_memory_variant(id, Tensor::zeros(Shape::mat(dk, d), true),
                            Tensor::zeros(Shape::mat(slots, dk), true),
                            Tensor::zeros(Shape::mat(slots, d), true));
    }
    return m;
}

LayerBlock& Model::layer(int i) {
    if (i < 0 || i >= cfg_.layers) {
        throw IndexError("layer " + std::to_string(i) + " out of range");
    }
    return layers_[static_cast<std::size_t>(i)];
}

const LayerBlock& Model::layer(int i) const {
    return const_cast<Model*>(this)->layer(i);
}

std::vector<int> Model::memory_layer_ids() const {
    std::vector<int> ids;
    for (int l = 0; l < cfg_.layers; ++l) {
        if (layers_[static_cast<std::size_t>(l)].is_memory()) ids.push_back(l);
    }
    return ids;
}

std::vector<SlotUsageStats> Model::make_usage() const {
    std::vector<SlotUsageStats> usage;
    for (int id : memory_layer_ids()) {
        usage.emplace_back(id, static_cast<Index>(cfg_.memory_slots));
    }
    return usage;
}

Tensor Model::forward(std::span<const int> tokens, Index batch, Index seq_len,
                      std::vector<SlotUsageStats>* usage) const {
    if (batch < 1 || seq_len < 1 ||
        tokens.size() != static_cast<std::size_t>(batch * seq_len)) {
        throw ShapeError("forward: " + std::to_string(tokens.size()) + " tokens for batch " +
                         std::to_string(batch) + " x " + std::to_string(seq_len));
    }
    if (seq_len > cfg_.context) {
        throw ContractError("forward: sequence length " + std::to_string(seq_len) +
                            " exceeds context " + std::to_string(cfg_.context));
    }
    const std::vector<int> mem_ids = memory_layer_ids();
    if (usage) {
        if (usage->size() != mem_ids.size()) {
            throw ContractError("forward: usage log has " + std::to_string(usage->size()) +
                                " sinks for " + std::to_string(mem_ids.size()) +
                                " memory layers");
        }
        for (std::size_t i = 0; i < mem_ids.size(); ++i) {
            if ((*usage)[i].layer_id != mem_ids[i]) {
                throw ContractError("forward: usage sink " + std::to_string(i) +
                                    " tagged for layer " + std::to_string((*usage)[i].layer_id) +
                                    ", expected " + std::to_string(mem_ids[i]));
            }
        }
    }

    std::vector<int> positions(tokens.size());
    for (Index b = 0; b < batch; ++b)
        for (Index t = 0; t < seq_len; ++t)
            positions[static_cast<std::size_t>(b * seq_len + t)] = static_cast<int>(t);

    Tensor x = add(embedding_lookup(tok_embed_, tokens),
                   embedding_lookup(pos_embed_, positions));

    std::size_t mem_slot = 0;
    for (const LayerBlock& blk : layers_) {
        Tensor xn = rmsnorm(x, blk.attn_norm);
        Tensor att = multihead_causal_attention(linear(xn, blk.wq), linear(xn, blk.wk),
                                                linear(xn, blk.wv), batch, seq_len, cfg_.heads);
        Tensor h = add(x, linear(att, blk.wo));
        if (blk.is_memory()) {
            SlotUsageStats* sink = usage ? &(*usage)[mem_slot] : nullptr;
            ++mem_slot;
            x = memory_lookup(h, blk.memory(), cfg_.retrieve_k, sink);
        } else {
            Tensor hn = rmsnorm(h, blk.mlp_norm);
            const FfnBlock& f = blk.ffn();
            x = add(h, linear(gelu(linear(hn, f.w1)), f.w2));
        }
    }
    Tensor logits = linear(rmsnorm(x, final_norm_), head_);
    return reshape(logits, Shape::cube(batch, seq_len, cfg_.vocab_size));
}

void Model::to_memory_variant(int layer_id, Tensor wq, Tensor keys, Tensor values) {
    LayerBlock& blk = layer(layer_id);
    if (blk.is_memory()) {
        throw ContractError("layer " + std::to_string(layer_id) + " already holds a memory block");
    }
    MemoryLayerParams mem;
    mem.wq = std::move(wq);
    mem.keys = std::move(keys);
    mem.values = std::move(values);
    mem.alpha = cfg_.alpha;
    blk.mlp = std::move(mem);
}

void Model::retrofit_replace(std::span<const int> layer_indices, std::mt19937_64& rng) {
    for (int id : layer_indices) {
        if (id < 0 || id >= cfg_.layers) {
            throw IndexError("retrofit: layer " + std::to_string(id) + " out of range");
        }
        if (layer(id).is_memory()) {
            throw ContractError("retrofit: layer " + std::to_string(id) + " already retrofitted");
        }
    }
    const auto d = static_cast<Index>(cfg_.d_model);
    const auto dk = static_cast<Index>(cfg_.d_key);
    const auto slots = static_cast<Index>(cfg_.memory_slots);
    const double key_std = 1.0 / std::sqrt(static_cast<double>(dk));
    const double proj_std = 1.0 / std::sqrt(static_cast<double>(d));
    for (int id : layer_indices) {
        to_memory_variant(id, Tensor::randn(Shape::mat(dk, d), rng, proj_std, true),
                          Tensor::randn(Shape::mat(slots, dk), rng, key_std, true),
                          Tensor::zeros(Shape::mat(slots, d), true));
    }
}

std::vector<NamedParam> Model::named_params() const {
    std::vector<NamedParam> out;
    out.push_back({"tok_embed", tok_embed_});
    out.push_back({"pos_embed", pos_embed_});
    for (int l = 0; l < cfg_.layers; ++l) {
        const LayerBlock& blk = layers_[static_cast<std::size_t>(l)];
        const std::string base = "layer" + std::to_string(l) + ".";
        out.push_back({base + "attn_norm", blk.attn_norm});
        out.push_back({base + "attn_wq", blk.wq});
        out.push_back({base + "attn_wk", blk.wk});
        out.push_back({base + "attn_wv", blk.wv});
        out.push_back({base + "attn_wo", blk.wo});
        out.push_back({base + "mlp_norm", blk.mlp_norm});
        if (blk.is_memory()) {
            const MemoryLayerParams& mem = blk.memory();
            out.push_back({base + "mem_wq", mem.wq});
            out.push_back({base + "mem_keys", mem.keys});
            out.push_back({base + "mem_values", mem.values});
        } else {
            const FfnBlock& f = blk.ffn();
            out.push_back({base + "ffn_w1", f.w1});
            out.push_back({base + "ffn_w2", f.w2});
        }
    }
    out.push_back({"final_norm", final_norm_});
    out.push_back({"head", head_});
    return out;
}

std::vector<Tensor> Model::trainable_params() const {
    std::vector<Tensor> out;
    for (const NamedParam& np : named_params()) {
        // the memory variant bypasses its layer's mlp_norm, so that gain
        // never receives a gradient and cannot be optimized
        if (np.name.ends_with(".mlp_norm")) {
            const int l = std::stoi(np.name.substr(5));
            if (layers_[static_cast<std::size_t>(l)].is_memory()) continue;
        }
        out.push_back(np.tensor);
    }
    return out;
}

std::vector<Tensor> Model::memory_params() const {
    std::vector<Tensor> out;
    for (int id : memory_layer_ids()) {
        const MemoryLayerParams& mem = layers_[static_cast<std::size_t>(id)].memory();
        out.push_back(mem.wq);
        out.push_back(mem.keys);
        out.push_back(mem.values);
    }
    return out;
}

}  // namespace smem
