#include "sparsemem/ops.hpp"

#include <cmath>
#include <utility>
#include <vector>

namespace smem {

namespace {

using detail::TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!(a.shape() == b.shape())) {
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " +
                         b.shape().str());
    }
}

// Marks the output differentiable and records the closure when tracing.
void record(const std::initializer_list<const Tensor*>& inputs, Tensor& out,
            std::function<void()> fn) {
    if (!tracing(inputs)) return;
    out.set_requires_grad(true);
    GradTape::active()->record(std::move(fn));
}

// Upstream gradient of `out`, or nullptr if this node is off the loss path.
const ArrayX* upstream(const NodePtr& out) {
    return out->grad.size() == 0 ? nullptr : &out->grad;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor c = Tensor::zeros(a.shape());
    c.data() = a.data() + b.data();
    auto an = a.node(), bn = b.node(), cn = c.node();
    record({&a, &b}, c, [an, bn, cn] {
        const ArrayX* g = upstream(cn);
        if (!g) return;
        if (an->requires_grad) {
            an->ensure_grad();
            an->grad += *g;
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            bn->grad += *g;
        }
    });
    return c;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor c = Tensor::zeros(a.shape());
    c.data() = a.data() - b.data();
    auto an = a.node(), bn = b.node(), cn = c.node();
    record({&a, &b}, c, [an, bn, cn] {
        const ArrayX* g = upstream(cn);
        if (!g) return;
        if (an->requires_grad) {
            an->ensure_grad();
            an->grad += *g;
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            bn->grad -= *g;
        }
    });
    return c;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor c = Tensor::zeros(a.shape());
    c.data() = a.data() * b.data();
    auto an = a.node(), bn = b.node(), cn = c.node();
    record({&a, &b}, c, [an, bn, cn] {
        const ArrayX* g = upstream(cn);
        if (!g) return;
        if (an->requires_grad) {
            an->ensure_grad();
            an->grad += *g * bn->value;
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            bn->grad += *g * an->value;
        }
    });
    return c;
}

Tensor scale(const Tensor& a, double s) {
    Tensor c = Tensor::zeros(a.shape());
    c.data() = a.data() * s;
    auto an = a.node(), cn = c.node();
    record({&a}, c, [an, cn, s] {
        const ArrayX* g = upstream(cn);
        if (!g) return;
        an->ensure_grad();
        an->grad += *g * s;
    });
    return c;
}

Tensor sum(const Tensor& a) {
    Tensor c = Tensor::scalar_value(a.data().sum());
    auto an = a.node(), cn = c.node();
    record({&a}, c, [an, cn] {
        const ArrayX* g = upstream(cn);
        if (!g) return;
        an->ensure_grad();
        an->grad += (*g)[0];
    });
    return c;
}

Tensor reshape(const Tensor& a, const Shape& s) {
    if (s.numel() != a.numel()) {
        throw ShapeError("reshape: numel mismatch " + a.shape().str() + " -> " + s.str());
    }
    Tensor c = Tensor::zeros(s);
    c.data() = a.data();
    auto an = a.node(), cn = c.node();
    record({&a}, c, [an, cn] {
        const ArrayX* g = upstream(cn);
        if (!g) return;
        an->ensure_grad();
        an->grad += *g;
    });
    return c;
}

Tensor gelu(const Tensor& a) {
    Tensor c = Tensor::zeros(a.shape());
    const ArrayX& x = a.data();
    // gelu(x) = x * Phi(x), Phi the standard normal CDF
    ArrayX cdf = x.unaryExpr([](double t) { return 0.5 * (1.0 + std::erf(t * kInvSqrt2)); });
    c.data() = x * cdf;
    auto an = a.node(), cn = c.node();
    record({&a}, c, [an, cn, cdf = std::move(cdf)] {
        const ArrayX* g = upstream(cn);
        if (!g) return;
        an->ensure_grad();
        const ArrayX& xv = an->value;
        ArrayX pdf = kInvSqrt2Pi * (-0.5 * xv.square()).exp();
        an->grad += *g * (cdf + xv * pdf);
    });
    return c;
}

Tensor softmax(const Tensor& v) {
    if (v.rank() != 1 || v.numel() < 1) {
        throw ShapeError("softmax: requires a non-empty rank-1 tensor, got " + v.shape().str());
    }
    Tensor p = Tensor::zeros(v.shape());
    const ArrayX& x = v.data();
    ArrayX shifted = (x - x.maxCoeff()).exp();
    p.data() = shifted / shifted.sum();
    auto vn = v.node(), pn = p.node();
    record({&v}, p, [vn, pn] {
        const ArrayX* g = upstream(pn);
        if (!g) return;
        vn->ensure_grad();
        const ArrayX& pv = pn->value;
        double dot = (*g * pv).sum();
        vn->grad += pv * (*g - dot);
    });
    return p;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw ShapeError("matmul: requires rank-2 inputs, got " + a.shape().str() + " and " +
                         b.shape().str());
    }
    const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw ShapeError("matmul: inner dimensions disagree, " + a.shape().str() + " x " +
                         b.shape().str());
    }
    Tensor c = Tensor::zeros(Shape::mat(m, n));
    c.mat().noalias() = a.mat() * b.mat();
    auto an = a.node(), bn = b.node(), cn = c.node();
    record({&a, &b}, c, [an, bn, cn, m, k, n] {
        const ArrayX* g = upstream(cn);
        if (!g) return;
        ConstMatMap dc(g->data(), m, n);
        ConstMatMap av(an->value.data(), m, k);
        ConstMatMap bv(bn->value.data(), k, n);
        if (an->requires_grad) {
            an->ensure_grad();
            MatMap(an->grad.data(), m, k).noalias() += dc * bv.transpose();
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            MatMap(bn->grad.data(), k, n).noalias() += av.transpose() * dc;
        }
    });
    return c;
}

Tensor matvec(const Tensor& w, const Tensor& x) {
    if (w.rank() != 2 || x.rank() != 1) {
        throw ShapeError("matvec: want [m x n] and [n], got " + w.shape().str() + " and " +
                         x.shape().str());
    }
    const Index m = w.dim(0), n = w.dim(1);
    if (x.dim(0) != n) {
        throw ShapeError("matvec: inner dimensions disagree, " + w.shape().str() + " x " +
                         x.shape().str());
    }
    Tensor y = Tensor::zeros(Shape::vec(m));
    VecMap(y.data().data(), m).noalias() = w.mat() * ConstVecMap(x.data().data(), n);
    auto wn = w.node(), xn = x.node(), yn = y.node();
    record({&w, &x}, y, [wn, xn, yn, m, n] {
        const ArrayX* g = upstream(yn);
        if (!g) return;
        ConstVecMap dy(g->data(), m);
        if (wn->requires_grad) {
            wn->ensure_grad();
            MatMap(wn->grad.data(), m, n).noalias() +=
                dy * ConstVecMap(xn->value.data(), n).transpose();
        }
        if (xn->requires_grad) {
            xn->ensure_grad();
            VecMap(xn->grad.data(), n).noalias() +=
                ConstMatMap(wn->value.data(), m, n).transpose() * dy;
        }
    });
    return y;
}

Tensor linear(const Tensor& x, const Tensor& w) {
    if (x.rank() != 2 || w.rank() != 2) {
        throw ShapeError("linear: requires rank-2 inputs, got " + x.shape().str() + " and " +
                         w.shape().str());
    }
    const Index n = x.dim(0), d_in = x.dim(1), d_out = w.dim(0);
    if (w.dim(1) != d_in) {
        throw ShapeError("linear: input width " + std::to_string(d_in) +
                         " does not match weight " + w.shape().str());
    }
    Tensor y = Tensor::zeros(Shape::mat(n, d_out));
    y.mat().noalias() = x.mat() * w.mat().transpose();
    auto xn = x.node(), wn = w.node(), yn = y.node();
    record({&x, &w}, y, [xn, wn, yn, n, d_in, d_out] {
        const ArrayX* g = upstream(yn);
        if (!g) return;
        ConstMatMap dy(g->data(), n, d_out);
        if (xn->requires_grad) {
            xn->ensure_grad();
            MatMap(xn->grad.data(), n, d_in).noalias() +=
                dy * ConstMatMap(wn->value.data(), d_out, d_in);
        }
        if (wn->requires_grad) {
            wn->ensure_grad();
            MatMap(wn->grad.data(), d_out, d_in).noalias() +=
                dy.transpose() * ConstMatMap(xn->value.data(), n, d_in);
        }
    });
    return y;
}

Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps) {
    if (x.rank() != 1 && x.rank() != 2) {
        throw ShapeError("rmsnorm: requires rank 1 or 2, got " + x.shape().str());
    }
    const Index n = x.rank() == 2 ? x.dim(0) : 1;
    const Index d = x.rank() == 2 ? x.dim(1) : x.dim(0);
    if (gain.rank() != 1 || gain.dim(0) != d) {
        throw ShapeError("rmsnorm: gain must be [" + std::to_string(d) + "], got " +
                         gain.shape().str());
    }
    Tensor y = Tensor::zeros(x.shape());
    ConstMatMap xv(x.data().data(), n, d);
    MatMap yv(y.data().data(), n, d);
    Eigen::VectorXd inv_rms(n);
    for (Index i = 0; i < n; ++i) {
        inv_rms[i] = 1.0 / std::sqrt(xv.row(i).squaredNorm() / static_cast<double>(d) + eps);
    }
    const ConstVecMap gv(gain.data().data(), d);
    yv = ((xv.array().colwise() * inv_rms.array()).rowwise() * gv.transpose().array()).matrix();

    auto xn = x.node(), gn = gain.node(), yn = y.node();
    record({&x, &gain}, y, [xn, gn, yn, n, d, inv_rms = std::move(inv_rms)] {
        const ArrayX* g = upstream(yn);
        if (!g) return;
        ConstMatMap dy(g->data(), n, d);
        ConstMatMap xv(xn->value.data(), n, d);
        ConstVecMap gv(gn->value.data(), d);
        for (Index i = 0; i < n; ++i) {
            const double r = inv_rms[i];
            // dL/dg += dy .* x / rms ; dL/dx = g.*dy/rms - x * (sum dy.*g.*x) / (d*rms^3)
            Eigen::RowVectorXd ug = dy.row(i).cwiseProduct(gv.transpose());
            if (gn->requires_grad) {
                gn->ensure_grad();
                VecMap(gn->grad.data(), d).noalias() +=
                    (dy.row(i).cwiseProduct(xv.row(i)) * r).transpose();
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                const double dot = ug.dot(xv.row(i));
                MatMap dx(xn->grad.data(), n, d);
                dx.row(i).noalias() += ug * r;
                dx.row(i).noalias() -= xv.row(i) * (dot * r * r * r / static_cast<double>(d));
            }
        }
    });
    return y;
}

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
    if (table.rank() != 2) {
        throw ShapeError("embedding_lookup: table must be rank 2, got " + table.shape().str());
    }
    const Index v = table.dim(0), d = table.dim(1);
    const Index n = static_cast<Index>(ids.size());
    if (n == 0) throw ShapeError("embedding_lookup: empty id list");
    for (int id : ids) {
        if (id < 0 || id >= v) {
            throw IndexError("embedding_lookup: id " + std::to_string(id) +
                             " out of range for table with " + std::to_string(v) + " rows");
        }
    }
    Tensor y = Tensor::zeros(Shape::mat(n, d));
    {
        ConstMatMap tv = table.mat();
        MatMap yv = y.mat();
        for (Index i = 0; i < n; ++i) yv.row(i) = tv.row(ids[static_cast<std::size_t>(i)]);
    }
    auto tn = table.node(), yn = y.node();
    std::vector<int> ids_copy(ids.begin(), ids.end());
    record({&table}, y, [tn, yn, n, d, ids_copy = std::move(ids_copy)] {
        const ArrayX* g = upstream(yn);
        if (!g) return;
        tn->ensure_grad();
        ConstMatMap dy(g->data(), n, d);
        MatMap dt(tn->grad.data(), tn->shape.dim[0], d);
        for (Index i = 0; i < n; ++i) dt.row(ids_copy[static_cast<std::size_t>(i)]) += dy.row(i);
    });
    return y;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
    std::vector<double> w(targets.size(), 1.0);
    return cross_entropy_weighted(logits, targets, w);
}

Tensor cross_entropy_weighted(const Tensor& logits, std::span<const int> targets,
                              std::span<const double> weights) {
    if (logits.rank() != 2) {
        throw ShapeError("cross_entropy: logits must be rank 2, got " + logits.shape().str());
    }
    const Index n = logits.dim(0), v = logits.dim(1);
    if (static_cast<Index>(targets.size()) != n || static_cast<Index>(weights.size()) != n) {
        throw ShapeError("cross_entropy: got " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(n) + " rows");
    }
    for (int t : targets) {
        if (t < 0 || t >= v) {
            throw IndexError("cross_entropy: target " + std::to_string(t) +
                             " out of range for vocab " + std::to_string(v));
        }
    }
    double weight_total = 0.0;
    for (double wi : weights) weight_total += wi;
    if (!(weight_total > 0.0)) {
        throw ContractError("cross_entropy: weights sum to zero");
    }

    ConstMatMap lv = logits.mat();
    MatrixRM probs(n, v);
    double loss = 0.0;
    for (Index i = 0; i < n; ++i) {
        const double mx = lv.row(i).maxCoeff();
        probs.row(i) = (lv.row(i).array() - mx).exp();
        const double z = probs.row(i).sum();
        probs.row(i) /= z;
        const double log_z = std::log(z) + mx;
        const auto ti = static_cast<Index>(targets[static_cast<std::size_t>(i)]);
        loss += weights[static_cast<std::size_t>(i)] * (log_z - lv(i, ti));
    }
    Tensor out = Tensor::scalar_value(loss / weight_total);

    auto ln = logits.node(), on = out.node();
    std::vector<int> tgt(targets.begin(), targets.end());
    std::vector<double> wts(weights.begin(), weights.end());
    record({&logits}, out,
           [ln, on, n, v, weight_total, probs = std::move(probs), tgt = std::move(tgt),
            wts = std::move(wts)] {
               const ArrayX* g = upstream(on);
               if (!g) return;
               ln->ensure_grad();
               MatMap dl(ln->grad.data(), n, v);
               const double go = (*g)[0] / weight_total;
               for (Index i = 0; i < n; ++i) {
                   const double wi = wts[static_cast<std::size_t>(i)];
                   if (wi == 0.0) continue;
                   dl.row(i) += go * wi * probs.row(i);
                   dl(i, tgt[static_cast<std::size_t>(i)]) -= go * wi;
               }
           });
    return out;
}

Tensor multihead_causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, Index batch,
                                  Index seq_len, int heads) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
        throw ShapeError("attention: q/k/v must be rank 2");
    }
    require_same_shape(q, k, "attention");
    require_same_shape(q, v, "attention");
    const Index n = q.dim(0), d = q.dim(1);
    if (n != batch * seq_len) {
        throw ShapeError("attention: rows " + std::to_string(n) + " != batch*seq_len");
    }
    if (heads <= 0 || d % heads != 0) {
        throw ShapeError("attention: model width " + std::to_string(d) +
                         " not divisible by heads " + std::to_string(heads));
    }
    const Index dh = d / heads;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor out = Tensor::zeros(Shape::mat(n, d));
    // Row-softmax attention weights per (sequence, head), kept for backward.
    std::vector<MatrixRM> attn(static_cast<std::size_t>(batch * heads));
    {
        ConstMatMap qv = q.mat(), kv = k.mat(), vv = v.mat();
        MatMap ov = out.mat();
        for (Index b = 0; b < batch; ++b) {
            for (int h = 0; h < heads; ++h) {
                auto qb = qv.block(b * seq_len, h * dh, seq_len, dh);
                auto kb = kv.block(b * seq_len, h * dh, seq_len, dh);
                auto vb = vv.block(b * seq_len, h * dh, seq_len, dh);
                MatrixRM scores = qb * kb.transpose() * att_scale;
                MatrixRM& p = attn[static_cast<std::size_t>(b * heads + h)];
                p.resize(seq_len, seq_len);
                for (Index t = 0; t < seq_len; ++t) {
                    auto row = scores.row(t).head(t + 1);
                    const double mx = row.maxCoeff();
                    Eigen::RowVectorXd e = (row.array() - mx).exp().matrix();
                    p.row(t).head(t + 1) = e / e.sum();
                    p.row(t).tail(seq_len - t - 1).setZero();
                }
                ov.block(b * seq_len, h * dh, seq_len, dh).noalias() = p * vb;
            }
        }
    }

    auto qn = q.node(), kn = k.node(), vn = v.node(), on = out.node();
    record({&q, &k, &v}, out,
           [qn, kn, vn, on, batch, seq_len, heads, dh, d, att_scale, attn = std::move(attn)] {
               const ArrayX* g = upstream(on);
               if (!g) return;
               const Index n = batch * seq_len;
               ConstMatMap dout(g->data(), n, d);
               ConstMatMap qv(qn->value.data(), n, d);
               ConstMatMap kv(kn->value.data(), n, d);
               ConstMatMap vv(vn->value.data(), n, d);
               qn->ensure_grad();
               kn->ensure_grad();
               vn->ensure_grad();
               MatMap dq(qn->grad.data(), n, d);
               MatMap dk(kn->grad.data(), n, d);
               MatMap dv(vn->grad.data(), n, d);
               for (Index b = 0; b < batch; ++b) {
                   for (int h = 0; h < heads; ++h) {
                       const MatrixRM& p = attn[static_cast<std::size_t>(b * heads + h)];
                       auto qb = qv.block(b * seq_len, h * dh, seq_len, dh);
                       auto kb = kv.block(b * seq_len, h * dh, seq_len, dh);
                       auto vb = vv.block(b * seq_len, h * dh, seq_len, dh);
                       auto dob = dout.block(b * seq_len, h * dh, seq_len, dh);
                       dv.block(b * seq_len, h * dh, seq_len, dh).noalias() +=
                           p.transpose() * dob;
                       MatrixRM dp = dob * vb.transpose();
                       // softmax rows: ds = p .* (dp - rowsum(dp .* p))
                       Eigen::VectorXd row_dot = (dp.array() * p.array()).rowwise().sum().matrix();
                       MatrixRM ds =
                           (p.array() * (dp.array().colwise() - row_dot.array())).matrix() *
                           att_scale;
                       dq.block(b * seq_len, h * dh, seq_len, dh).noalias() += ds * kb;
                       dk.block(b * seq_len, h * dh, seq_len, dh).noalias() +=
                           ds.transpose() * qb;
                   }
               }
           });
    return out;
}

}  // namespace smem
