#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "sparsemem/ops.hpp"
#include "sparsemem/slot_stats.hpp"
#include "sparsemem/tensor.hpp"

namespace smem {

struct TransformerConfig {
    int vocab_size = 256;
    int d_model = 64;
    int d_ff = 256;
    int d_key = 32;
    int layers = 6;
    int heads = 4;
    int context = 64;
    int memory_slots = 1024;  // M rows per memory layer
    int retrieve_k = 32;      // keys retrieved per token
    std::vector<int> memory_layers{2, 3, 4};
    double alpha = 1.0;  // gate on the memory readout

    void validate() const;  // throws ConfigError
};

struct FfnBlock {
    Tensor w1;  // [d_ff x d]
    Tensor w2;  // [d x d_ff]
};

struct MemoryLayerParams {
    Tensor wq;      // [d_k x d]
    Tensor keys;    // [M x d_k]
    Tensor values;  // [M x d]
    double alpha = 1.0;
};

struct LayerBlock {
    Tensor attn_norm;       // [d] pre-attention rmsnorm gain
    Tensor wq, wk, wv, wo;  // [d x d] attention projections
    Tensor mlp_norm;        // [d] pre-mlp gain; the memory variant reads the
                            // raw residual instead, leaving this inert
    std::variant<FfnBlock, MemoryLayerParams> mlp;

    bool is_memory() const { return std::holds_alternative<MemoryLayerParams>(mlp); }
    const MemoryLayerParams& memory() const { return std::get<MemoryLayerParams>(mlp); }
    MemoryLayerParams& memory() { return std::get<MemoryLayerParams>(mlp); }
    const FfnBlock& ffn() const { return std::get<FfnBlock>(mlp); }
};

struct NamedParam {
    std::string name;
    Tensor tensor;
};

// y = W2 . gelu(W1 x) for a single activation vector (residual added by the
// caller).
Tensor ffn_forward(const Tensor& x, const FfnBlock& block);

// q = W_q x
Tensor memory_query(const Tensor& x, const MemoryLayerParams& p);

struct TopkResult {
    std::vector<int> indices;    // by descending score, ties ascending index
    std::vector<double> scores;  // unnormalized inner products q . K[i]
};

// The k largest inner products against the key table. Pure: never recorded
// on a tape.
TopkResult topk_retrieve(const Tensor& q, const Tensor& keys, int k);

// Single-vector memory readout: y = x + alpha * sum_i p_i V[i] with p the
// softmax over the k retrieved scores only. Retrieved indices are recorded
// into `usage` when given.
Tensor memory_forward(const Tensor& x, const MemoryLayerParams& p, int k,
                      SlotUsageStats* usage = nullptr);

// Batched fused form: every row of h [n x d] goes through the same readout
// independently. Differentiable w.r.t. h, W_q, K, and V.
Tensor memory_lookup(const Tensor& h, const MemoryLayerParams& p, int k,
                     SlotUsageStats* usage = nullptr);

// Decoder-only transformer: learned token + position embeddings, pre-norm
// blocks (rmsnorm, causal multi-head attention, FFN or memory mlp), final
// rmsnorm, untied output head. No biases anywhere.
class Model {
public:
    Model(TransformerConfig cfg, std::uint64_t init_seed);

    // Skeleton with the given memory-variant layout and all parameters
    // zeroed; checkpoint loading fills every tensor afterwards.
    static Model skeleton(TransformerConfig cfg, std::span<const int> memory_layer_ids);

    const TransformerConfig& config() const { return cfg_; }
    LayerBlock& layer(int i);
    const LayerBlock& layer(int i) const;

    // Layer ids currently carrying the memory variant, ascending.
    std::vector<int> memory_layer_ids() const;
    std::vector<SlotUsageStats> make_usage() const;  // one per memory layer

    // logits [batch, seq_len, vocab]. `usage`, when given, must hold one
    // stats object per memory layer in memory_layer_ids() order.
    Tensor forward(std::span<const int> tokens, Index batch, Index seq_len,
                   std::vector<SlotUsageStats>* usage = nullptr) const;

    // Replaces the FFN of each listed layer with a fresh memory layer:
    // K ~ Normal(0, 1/sqrt(d_k)), V = 0, gate from config. Every other
    // parameter is left untouched.
    void retrofit_replace(std::span<const int> layer_indices, std::mt19937_64& rng);

    // All parameters in a stable order (checkpoint registry order).
    std::vector<NamedParam> named_params() const;
    // Parameters that can receive gradients from forward(); excludes the
    // inert mlp_norm gains of memory-variant layers.
    std::vector<Tensor> trainable_params() const;
    // W_q, K, V of every memory layer.
    std::vector<Tensor> memory_params() const;

private:
    Model() = default;
    void to_memory_variant(int layer_id, Tensor wq, Tensor keys, Tensor values);

    TransformerConfig cfg_;
    Tensor tok_embed_;  // [V x d]
    Tensor pos_embed_;  // [context x d]
    std::vector<LayerBlock> layers_;
    Tensor final_norm_;  // [d]
    Tensor head_;        // [V x d]
};

}  // namespace smem
