#pragma once

// Shared helpers for the test binaries. Requires doctest to be included
// first by the translation unit.

#include <cmath>
#include <functional>
#include <vector>

#include "sparsemem/ops.hpp"
#include "sparsemem/tensor.hpp"

namespace smem::testing {

// Central finite differences of make_loss() w.r.t. every entry of every
// param, compared to the reverse-mode gradient. make_loss must rebuild the
// graph from the current parameter values on each call.
inline void check_gradients(const std::function<Tensor()>& make_loss,
                            const std::vector<Tensor>& params, double h = 1e-5,
                            double tol = 1e-6) {
    zero_grads(params);
    {
        GradTape tape;
        Tensor loss = make_loss();
        tape.backward(loss);
    }
    for (const Tensor& p : params) {
        REQUIRE(p.has_grad());
        Tensor mut = p;  // handle copy, same storage
        for (Index i = 0; i < p.numel(); ++i) {
            const double saved = mut.data()[i];
            mut.data()[i] = saved + h;
            const double up = make_loss().scalar();
            mut.data()[i] = saved - h;
            const double down = make_loss().scalar();
            mut.data()[i] = saved;
            const double fd = (up - down) / (2.0 * h);
            const double an = p.grad()[i];
            const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-8});
            CAPTURE(i);
            CAPTURE(an);
            CAPTURE(fd);
            CHECK(rel < tol);
        }
    }
}

}  // namespace smem::testing
