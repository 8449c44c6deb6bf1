#include "sparsemem/optimizer.hpp"

#include <cmath>

namespace smem {

void AdamOptimizer::add_param(const Tensor& p, bool row_sparse) {
    if (!p.valid()) throw ContractError("optimizer: invalid tensor handle");
    if (!p.requires_grad()) {
        throw ContractError("optimizer: parameter does not require grad");
    }
    if (row_sparse && p.rank() != 2) {
        throw ContractError("optimizer: row-sparse updates need a rank-2 parameter, got " +
                            p.shape().str());
    }
    for (const Slot& s : slots_) {
        if (s.param.node() == p.node()) {
            throw ContractError("optimizer: parameter registered twice");
        }
    }
    Slot s;
    s.param = p;
    s.m = ArrayX::Zero(p.numel());
    s.v = ArrayX::Zero(p.numel());
    s.row_sparse = row_sparse;
    slots_.push_back(std::move(s));
}

void AdamOptimizer::add_params(const std::vector<Tensor>& ps) {
    for (const Tensor& p : ps) add_param(p);
}

void AdamOptimizer::step() {
    if (slots_.empty()) throw ContractError("optimizer: no parameters registered");
    for (Slot& s : slots_) {
        if (!s.param.has_grad()) {
            throw ContractError("optimizer: parameter " + s.param.shape().str() +
                                " has no gradient; run backward before step()");
        }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (Slot& s : slots_) {
        if (s.row_sparse) {
            step_rows(s);
        } else {
            step_dense(s, bc1, bc2);
        }
    }
}

void AdamOptimizer::step_dense(Slot& s, double bc1, double bc2) {
    const ArrayX& g = s.param.grad();
    s.m = cfg_.beta1 * s.m + (1.0 - cfg_.beta1) * g;
    s.v = cfg_.beta2 * s.v + (1.0 - cfg_.beta2) * g.square();
    s.param.data() -= cfg_.lr * (s.m / bc1) / ((s.v / bc2).sqrt() + cfg_.epsilon);
}

// Lazy per-row update: rows with an all-zero gradient are skipped entirely,
// moments included, so their bytes never change. Touched rows use bias
// correction from a per-row step count, mirroring sparse Adam variants.
void AdamOptimizer::step_rows(Slot& s) {
    const Index rows = s.param.dim(0), cols = s.param.dim(1);
    if (s.row_steps.size() != static_cast<std::size_t>(rows)) {
        s.row_steps.assign(static_cast<std::size_t>(rows), 0);
    }
    const ArrayX& g = s.param.grad();
    ArrayX& p = s.param.data();
    for (Index r = 0; r < rows; ++r) {
        auto gr = g.segment(r * cols, cols);
        if ((gr == 0.0).all()) continue;
        long& rt = s.row_steps[static_cast<std::size_t>(r)];
        ++rt;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(rt));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(rt));
        auto mr = s.m.segment(r * cols, cols);
        auto vr = s.v.segment(r * cols, cols);
        mr = cfg_.beta1 * mr + (1.0 - cfg_.beta1) * gr;
        vr = cfg_.beta2 * vr + (1.0 - cfg_.beta2) * gr.square();
        p.segment(r * cols, cols) -= cfg_.lr * (mr / bc1) / ((vr / bc2).sqrt() + cfg_.epsilon);
    }
}

void AdamOptimizer::zero_grads() {
    for (Slot& s : slots_) s.param.zero_grad();
}

}  // namespace smem
