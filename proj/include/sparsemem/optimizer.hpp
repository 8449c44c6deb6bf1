#pragma once

#include <string>
#include <vector>

#include "sparsemem/tensor.hpp"

namespace smem {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

// Adam with first/second moment estimates and bias correction. Parameters
// registered with row_sparse=true are treated as [rows x cols] matrices whose
// rows update lazily: a row whose gradient is entirely zero is skipped for the
// step (no moment decay, no write), so untouched rows stay bit-identical.
class AdamOptimizer {
public:
    explicit AdamOptimizer(AdamConfig cfg = {}) : cfg_(cfg) {}

    void add_param(const Tensor& p, bool row_sparse = false);
    void add_params(const std::vector<Tensor>& ps);

    // Applies one update from the gradients currently held by the parameters.
    // Every registered parameter must have an allocated gradient buffer.
    void step();

    void zero_grads();

    long step_count() const { return t_; }
    std::size_t param_count() const { return slots_.size(); }
    const AdamConfig& config() const { return cfg_; }

private:
    struct Slot {
        Tensor param;
        ArrayX m;
        ArrayX v;
        std::vector<long> row_steps;  // per-row update counts, row_sparse only
        bool row_sparse = false;
    };

    void step_dense(Slot& s, double bc1, double bc2);
    void step_rows(Slot& s);

    AdamConfig cfg_;
    std::vector<Slot> slots_;
    long t_ = 0;
};

}  // namespace smem
