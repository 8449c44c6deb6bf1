// Numeric core: tensor storage, op forwards against brute-force oracles,
// reverse-mode gradients against central finite differences, and the Adam
// update rule against an inline scratch reimplementation.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "sparsemem/ops.hpp"
#include "sparsemem/optimizer.hpp"
#include "sparsemem/tensor.hpp"
#include "support.hpp"

using namespace smem;
using smem::testing::check_gradients;

namespace {

Tensor make_randn(Shape s, std::mt19937_64& rng, double stddev = 1.0, bool rg = true) {
    return Tensor::randn(s, rng, stddev, rg);
}

MatrixRM slow_matmul(const Tensor& a, const Tensor& b) {
    MatrixRM c = MatrixRM::Zero(a.dim(0), b.dim(1));
    for (Index i = 0; i < a.dim(0); ++i)
        for (Index j = 0; j < b.dim(1); ++j)
            for (Index t = 0; t < a.dim(1); ++t) c(i, j) += a.at(i, t) * b.at(t, j);
    return c;
}

double slow_cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
    double total = 0.0;
    for (Index i = 0; i < logits.dim(0); ++i) {
        double mx = logits.at(i, 0);
        for (Index j = 1; j < logits.dim(1); ++j) mx = std::max(mx, logits.at(i, j));
        double z = 0.0;
        for (Index j = 0; j < logits.dim(1); ++j) z += std::exp(logits.at(i, j) - mx);
        total += std::log(z) + mx - logits.at(i, static_cast<Index>(targets[static_cast<std::size_t>(i)]));
    }
    return total / static_cast<double>(logits.dim(0));
}

MatrixRM slow_attention(const Tensor& q, const Tensor& k, const Tensor& v, Index batch,
                        Index seq_len, int heads) {
    const Index d = q.dim(1);
    const Index dh = d / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    MatrixRM out = MatrixRM::Zero(batch * seq_len, d);
    for (Index b = 0; b < batch; ++b) {
        for (int h = 0; h < heads; ++h) {
            for (Index t = 0; t < seq_len; ++t) {
                std::vector<double> s(static_cast<std::size_t>(t) + 1, 0.0);
                for (Index u = 0; u <= t; ++u)
                    for (Index e = 0; e < dh; ++e)
                        s[static_cast<std::size_t>(u)] +=
                            q.at(b * seq_len + t, h * dh + e) * k.at(b * seq_len + u, h * dh + e);
                double mx = s[0] * sc;
                for (Index u = 0; u <= t; ++u) mx = std::max(mx, s[static_cast<std::size_t>(u)] * sc);
                double z = 0.0;
                for (Index u = 0; u <= t; ++u) {
                    s[static_cast<std::size_t>(u)] = std::exp(s[static_cast<std::size_t>(u)] * sc - mx);
                    z += s[static_cast<std::size_t>(u)];
                }
                for (Index u = 0; u <= t; ++u)
                    for (Index e = 0; e < dh; ++e)
                        out(b * seq_len + t, h * dh + e) +=
                            s[static_cast<std::size_t>(u)] / z * v.at(b * seq_len + u, h * dh + e);
            }
        }
    }
    return out;
}

}  // namespace

TEST_CASE("shape factories and element access") {
    Tensor m = Tensor::from_values(Shape::mat(2, 3), {1, 2, 3, 4, 5, 6});
    CHECK(m.rank() == 2);
    CHECK(m.numel() == 6);
    CHECK(m.at(0, 2) == 3.0);
    CHECK(m.at(1, 0) == 4.0);
    CHECK(m.mat()(1, 2) == 6.0);

    Tensor s = Tensor::scalar_value(2.5);
    CHECK(s.rank() == 0);
    CHECK(s.scalar() == 2.5);

    Tensor c = Tensor::constant(Shape::cube(2, 3, 4), 1.5);
    CHECK(c.numel() == 24);
    c.at(1, 2, 3) = 9.0;
    CHECK(c.data()[23] == 9.0);
}

TEST_CASE("shape validation") {
    CHECK_THROWS_AS(Tensor::zeros(Shape::vec(0)), ShapeError);
    CHECK_THROWS_AS(Tensor::zeros(Shape::mat(3, -1)), ShapeError);
    CHECK_THROWS_AS(Tensor::from_values(Shape::vec(2), {1, 2, 3}), ShapeError);
    Tensor v = Tensor::from_values(Shape::vec(2), {1, 2});
    CHECK_THROWS_AS(v.at(2), IndexError);
    CHECK_THROWS_AS(v.at(-1), IndexError);
    CHECK_THROWS_AS(Tensor::from_values(Shape::vec(2), {1, 2}).scalar(), ShapeError);
}

TEST_CASE("randn is deterministic per seed") {
    std::mt19937_64 a(42), b(42), c(43);
    Tensor ta = Tensor::randn(Shape::mat(4, 5), a, 0.5);
    Tensor tb = Tensor::randn(Shape::mat(4, 5), b, 0.5);
    Tensor tc = Tensor::randn(Shape::mat(4, 5), c, 0.5);
    CHECK((ta.data() == tb.data()).all());
    CHECK_FALSE((ta.data() == tc.data()).all());
}

TEST_CASE("elementwise ops and reshape") {
    Tensor a = Tensor::from_values(Shape::vec(3), {1, -2, 3});
    Tensor b = Tensor::from_values(Shape::vec(3), {4, 5, -6});
    CHECK(add(a, b).data().isApprox(ArrayX{{5, 3, -3}}));
    CHECK(sub(a, b).data().isApprox(ArrayX{{-3, -7, 9}}));
    CHECK(mul(a, b).data().isApprox(ArrayX{{4, -10, -18}}));
    CHECK(scale(a, -2.0).data().isApprox(ArrayX{{-2, 4, -6}}));
    CHECK(sum(a).scalar() == doctest::Approx(2.0).epsilon(1e-15));

    Tensor r = reshape(a, Shape::mat(3, 1));
    CHECK(r.rank() == 2);
    CHECK(r.at(2, 0) == 3.0);
    CHECK_THROWS_AS(reshape(a, Shape::mat(2, 2)), ShapeError);
    CHECK_THROWS_AS(add(a, Tensor::zeros(Shape::vec(4))), ShapeError);
}

TEST_CASE("gelu matches the erf form") {
    Tensor x = Tensor::from_values(Shape::vec(3), {0.0, 2.0, -1.0});
    Tensor y = gelu(x);
    CHECK(y.data()[0] == 0.0);
    // x * Phi(x) at x=2, evaluated independently
    CHECK(y.data()[1] == doctest::Approx(1.9544997361036416).epsilon(1e-13));
    const double phi_m1 = 0.5 * (1.0 + std::erf(-1.0 / std::sqrt(2.0)));
    CHECK(y.data()[2] == doctest::Approx(-phi_m1).epsilon(1e-13));
}

TEST_CASE("softmax worked values, symmetry, and normalization") {
    Tensor u = softmax(Tensor::from_values(Shape::vec(3), {7.5, 7.5, 7.5}));
    for (Index i = 0; i < 3; ++i) CHECK(u.data()[i] == doctest::Approx(1.0 / 3).epsilon(1e-14));

    CHECK(softmax(Tensor::from_values(Shape::vec(1), {123.0})).data()[0] == 1.0);

    Tensor p = softmax(Tensor::from_values(Shape::vec(3), {1, 2, 3}));
    CHECK(p.data()[0] == doctest::Approx(0.090030573170380462).epsilon(1e-12));
    CHECK(p.data()[1] == doctest::Approx(0.24472847105479767).epsilon(1e-12));
    CHECK(p.data()[2] == doctest::Approx(0.6652409557748219).epsilon(1e-12));

    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor v = make_randn(Shape::vec(17), rng, 3.0, false);
        Tensor q = softmax(v);
        CHECK((q.data() >= 0.0).all());
        CHECK(std::abs(q.data().sum() - 1.0) < 1e-12);
    }

    // permutation equivariance: reversing the input reverses the output
    Tensor v = Tensor::from_values(Shape::vec(4), {0.3, -1.2, 2.0, 0.9});
    Tensor rev = Tensor::from_values(Shape::vec(4), {0.9, 2.0, -1.2, 0.3});
    Tensor pv = softmax(v), pr = softmax(rev);
    for (Index i = 0; i < 4; ++i) CHECK(pv.data()[i] == pr.data()[3 - i]);

    CHECK_THROWS_AS(softmax(Tensor::scalar_value(1.0)), ShapeError);
    CHECK_THROWS_AS(softmax(Tensor::zeros(Shape::mat(2, 2))), ShapeError);
    // extreme inputs stay finite thanks to max-subtraction
    Tensor big = softmax(Tensor::from_values(Shape::vec(2), {1e6, 1e6 - 1}));
    CHECK(std::isfinite(big.data()[0]));
    CHECK(big.data().sum() == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("matmul identity, scalar, and brute-force oracle") {
    Tensor eye = Tensor::from_values(Shape::mat(2, 2), {1, 0, 0, 1});
    Tensor b = Tensor::from_values(Shape::mat(2, 3), {1, 2, 3, 4, 5, 6});
    CHECK((matmul(eye, b).data() == b.data()).all());

    Tensor s1 = Tensor::from_values(Shape::mat(1, 1), {2});
    Tensor s2 = Tensor::from_values(Shape::mat(1, 1), {3});
    CHECK(matmul(s1, s2).at(0, 0) == 6.0);

    std::mt19937_64 rng(11);
    Tensor a = make_randn(Shape::mat(5, 4), rng, 1.0, false);
    Tensor c = make_randn(Shape::mat(4, 3), rng, 1.0, false);
    MatrixRM want = slow_matmul(a, c);
    Tensor got = matmul(a, c);
    CHECK((got.mat() - want).cwiseAbs().maxCoeff() < 1e-12);

    CHECK_THROWS_AS(matmul(a, b), ShapeError);
    CHECK_THROWS_AS(matmul(a, Tensor::zeros(Shape::vec(4))), ShapeError);
}

TEST_CASE("matvec and linear agree with matmul") {
    std::mt19937_64 rng(13);
    Tensor w = make_randn(Shape::mat(4, 6), rng, 1.0, false);
    Tensor x = make_randn(Shape::vec(6), rng, 1.0, false);
    Tensor y = matvec(w, x);
    Tensor xm = reshape(x, Shape::mat(6, 1));
    Tensor ym = matmul(w, xm);
    CHECK((y.data() - ym.data()).abs().maxCoeff() < 1e-15);

    Tensor batch = make_randn(Shape::mat(3, 6), rng, 1.0, false);
    Tensor out = linear(batch, w);
    CHECK(out.dim(0) == 3);
    CHECK(out.dim(1) == 4);
    for (Index i = 0; i < 3; ++i)
        for (Index j = 0; j < 4; ++j) {
            double acc = 0.0;
            for (Index t = 0; t < 6; ++t) acc += batch.at(i, t) * w.at(j, t);
            CHECK(out.at(i, j) == doctest::Approx(acc).epsilon(1e-12));
        }
    CHECK_THROWS_AS(matvec(w, Tensor::zeros(Shape::vec(5))), ShapeError);
    CHECK_THROWS_AS(linear(batch, Tensor::zeros(Shape::mat(4, 5))), ShapeError);
}

TEST_CASE("cross entropy against a log-sum-exp oracle") {
    Tensor uniform = Tensor::zeros(Shape::mat(1, 4));
    std::vector<int> t0{2};
    CHECK(cross_entropy(uniform, t0).scalar() ==
          doctest::Approx(1.3862943611198906).epsilon(1e-14));

    Tensor wide = Tensor::zeros(Shape::mat(1, 256));
    std::vector<int> t1{100};
    CHECK(cross_entropy(wide, t1).scalar() ==
          doctest::Approx(5.5451774444795623).epsilon(1e-14));

    // raising the correct logit strictly lowers the loss
    double prev = 1e300;
    for (double boost : {0.0, 1.0, 3.0, 10.0}) {
        Tensor l = Tensor::zeros(Shape::mat(1, 4));
        l.at(0, 2) = boost;
        double cur = cross_entropy(l, t0).scalar();
        CHECK(cur < prev);
        prev = cur;
    }

    std::mt19937_64 rng(17);
    Tensor logits = make_randn(Shape::mat(2, 5), rng, 2.0, false);
    std::vector<int> targets{3, 0};
    CHECK(cross_entropy(logits, targets).scalar() ==
          doctest::Approx(slow_cross_entropy(logits, targets)).epsilon(1e-12));

    std::vector<int> bad{5, 0};
    CHECK_THROWS_AS(cross_entropy(logits, bad), IndexError);
    std::vector<int> neg{-1, 0};
    CHECK_THROWS_AS(cross_entropy(logits, neg), IndexError);
}

TEST_CASE("weighted cross entropy masks rows") {
    std::mt19937_64 rng(19);
    Tensor logits = make_randn(Shape::mat(3, 5), rng, 1.5, false);
    std::vector<int> targets{1, 4, 2};

    // zero-weight middle row: equals the mean over rows 0 and 2 only
    std::vector<double> w{1.0, 0.0, 1.0};
    Tensor twoRow = Tensor::zeros(Shape::mat(2, 5));
    twoRow.mat().row(0) = logits.mat().row(0);
    twoRow.mat().row(1) = logits.mat().row(2);
    std::vector<int> twoTargets{1, 2};
    CHECK(cross_entropy_weighted(logits, targets, w).scalar() ==
          doctest::Approx(cross_entropy(twoRow, twoTargets).scalar()).epsilon(1e-14));

    std::vector<double> zeros{0.0, 0.0, 0.0};
    CHECK_THROWS_AS(cross_entropy_weighted(logits, targets, zeros), ContractError);
    std::vector<double> shortw{1.0};
    CHECK_THROWS_AS(cross_entropy_weighted(logits, targets, shortw), ShapeError);
}

TEST_CASE("rmsnorm forward") {
    Tensor x = Tensor::from_values(Shape::vec(2), {3.0, 4.0});
    Tensor g = Tensor::from_values(Shape::vec(2), {1.0, 2.0});
    const double eps = 1e-6;
    Tensor y = rmsnorm(x, g, eps);
    const double rms = std::sqrt((9.0 + 16.0) / 2.0 + eps);
    CHECK(y.data()[0] == doctest::Approx(3.0 / rms).epsilon(1e-14));
    CHECK(y.data()[1] == doctest::Approx(2.0 * 4.0 / rms).epsilon(1e-14));

    // rank-2: rows normalized independently
    Tensor xm = Tensor::from_values(Shape::mat(2, 2), {3, 4, 30, 40});
    Tensor ym = rmsnorm(xm, g, 0.0);
    CHECK(ym.at(0, 0) == doctest::Approx(ym.at(1, 0)).epsilon(1e-12));
    CHECK(ym.at(0, 1) == doctest::Approx(ym.at(1, 1)).epsilon(1e-12));

    CHECK_THROWS_AS(rmsnorm(x, Tensor::zeros(Shape::vec(3))), ShapeError);
}

TEST_CASE("embedding lookup gathers rows and scatter-adds gradients") {
    Tensor table = Tensor::from_values(Shape::mat(4, 2), {0, 1, 10, 11, 20, 21, 30, 31}, true);
    std::vector<int> ids{2, 2, 0};
    Tensor rows = embedding_lookup(table, ids);
    CHECK(rows.dim(0) == 3);
    CHECK(rows.at(0, 1) == 21.0);
    CHECK(rows.at(2, 0) == 0.0);

    {
        GradTape tape;
        Tensor loss = sum(embedding_lookup(table, ids));
        tape.backward(loss);
    }
    CHECK(table.grad()[4] == 2.0);  // row 2 hit twice
    CHECK(table.grad()[0] == 1.0);  // row 0 hit once
    CHECK(table.grad()[2] == 0.0);  // row 1 untouched

    std::vector<int> bad{4};
    CHECK_THROWS_AS(embedding_lookup(table, bad), IndexError);
}

TEST_CASE("attention matches a per-position brute-force oracle") {
    std::mt19937_64 rng(23);
    const Index batch = 2, seq = 5;
    const int heads = 2;
    Tensor q = make_randn(Shape::mat(batch * seq, 6), rng, 1.0, false);
    Tensor k = make_randn(Shape::mat(batch * seq, 6), rng, 1.0, false);
    Tensor v = make_randn(Shape::mat(batch * seq, 6), rng, 1.0, false);
    Tensor out = multihead_causal_attention(q, k, v, batch, seq, heads);
    MatrixRM want = slow_attention(q, k, v, batch, seq, heads);
    CHECK((out.mat() - want).cwiseAbs().maxCoeff() < 1e-12);

    // causality: editing the last position leaves earlier outputs untouched
    Tensor k2 = Tensor::from_values(k.shape(), {k.data().begin(), k.data().end()});
    Tensor v2 = Tensor::from_values(v.shape(), {v.data().begin(), v.data().end()});
    k2.mat().row(seq - 1).setConstant(9.0);
    v2.mat().row(seq - 1).setConstant(-9.0);
    Tensor out2 = multihead_causal_attention(q, k2, v2, batch, seq, heads);
    for (Index t = 0; t + 1 < seq; ++t)
        CHECK((out.mat().row(t) - out2.mat().row(t)).cwiseAbs().maxCoeff() == 0.0);
    CHECK((out.mat().row(seq - 1) - out2.mat().row(seq - 1)).cwiseAbs().maxCoeff() > 0.0);

    // batch independence: both sequences together equal each alone
    Tensor qa = Tensor::zeros(Shape::mat(seq, 6)), ka = Tensor::zeros(Shape::mat(seq, 6)),
           va = Tensor::zeros(Shape::mat(seq, 6));
    qa.mat() = q.mat().topRows(seq);
    ka.mat() = k.mat().topRows(seq);
    va.mat() = v.mat().topRows(seq);
    Tensor alone = multihead_causal_attention(qa, ka, va, 1, seq, heads);
    CHECK((alone.mat() - out.mat().topRows(seq)).cwiseAbs().maxCoeff() == 0.0);

    CHECK_THROWS_AS(multihead_causal_attention(q, k, v, batch, seq, 4), ShapeError);
    CHECK_THROWS_AS(multihead_causal_attention(q, k, v, 3, seq, heads), ShapeError);
}

TEST_CASE("backward fills analytic gradients for simple losses") {
    Tensor w = Tensor::from_values(Shape::mat(2, 2), {1, -2, 3, 0.5}, true);

    SUBCASE("sum -> ones") {
        GradTape tape;
        tape.backward(sum(w));
        CHECK((w.grad() == 1.0).all());
    }
    SUBCASE("half squared norm -> identity") {
        GradTape tape;
        tape.backward(scale(sum(mul(w, w)), 0.5));
        CHECK((w.grad() - w.data()).abs().maxCoeff() < 1e-15);
    }
}

TEST_CASE("tape contracts") {
    Tensor w = Tensor::from_values(Shape::vec(2), {1, 2}, true);

    SUBCASE("non-scalar loss rejected") {
        GradTape tape;
        Tensor y = scale(w, 2.0);
        CHECK_THROWS_AS(tape.backward(y), ContractError);
    }
    SUBCASE("second backward on a consumed tape rejected") {
        GradTape tape;
        Tensor loss = sum(w);
        tape.backward(loss);
        CHECK(tape.consumed());
        CHECK_THROWS_AS(tape.backward(loss), ContractError);
    }
    SUBCASE("recording onto a consumed tape rejected") {
        GradTape tape;
        tape.backward(sum(w));
        CHECK_THROWS_AS(scale(w, 2.0), ContractError);
    }
    SUBCASE("gradients accumulate across tapes until zeroed") {
        {
            GradTape tape;
            tape.backward(sum(w));
        }
        {
            GradTape tape;
            tape.backward(sum(w));
        }
        CHECK((w.grad() == 2.0).all());
        zero_grads({w});
        CHECK((w.grad() == 0.0).all());
    }
    SUBCASE("no recording without an active tape") {
        CHECK(GradTape::active() == nullptr);
        Tensor y = scale(w, 3.0);
        CHECK_FALSE(y.requires_grad());
    }
    SUBCASE("nodes off the loss path stay gradient-free") {
        Tensor x = Tensor::from_values(Shape::vec(2), {5, 6}, true);
        GradTape tape;
        Tensor unused = scale(x, 2.0);
        (void)unused;
        tape.backward(sum(w));
        CHECK(w.has_grad());
        CHECK_FALSE(x.has_grad());
    }
    SUBCASE("nested tapes restore the outer one") {
        GradTape outer;
        CHECK(GradTape::active() == &outer);
        {
            GradTape inner;
            CHECK(GradTape::active() == &inner);
        }
        CHECK(GradTape::active() == &outer);
    }
}

TEST_CASE("finite differences: elementwise chain") {
    std::mt19937_64 rng(29);
    Tensor a = make_randn(Shape::vec(6), rng);
    Tensor b = make_randn(Shape::vec(6), rng);
    check_gradients([&] { return sum(mul(gelu(a), add(a, b))); }, {a, b});
}

TEST_CASE("finite differences: matvec and gelu") {
    std::mt19937_64 rng(31);
    Tensor w = make_randn(Shape::mat(3, 5), rng, 0.7);
    Tensor x = make_randn(Shape::vec(5), rng);
    Tensor r = make_randn(Shape::vec(3), rng, 1.0, false);
    check_gradients([&] { return sum(mul(gelu(matvec(w, x)), r)); }, {w, x});
}

TEST_CASE("finite differences: matmul") {
    std::mt19937_64 rng(37);
    Tensor a = make_randn(Shape::mat(4, 3), rng);
    Tensor b = make_randn(Shape::mat(3, 2), rng);
    Tensor r = make_randn(Shape::mat(4, 2), rng, 1.0, false);
    check_gradients([&] { return sum(mul(matmul(a, b), r)); }, {a, b});
}

TEST_CASE("finite differences: linear plus cross entropy") {
    std::mt19937_64 rng(41);
    Tensor x = make_randn(Shape::mat(4, 3), rng);
    Tensor w = make_randn(Shape::mat(6, 3), rng, 0.8);
    std::vector<int> targets{5, 0, 3, 3};
    check_gradients([&] { return cross_entropy(linear(x, w), targets); }, {x, w});
}

TEST_CASE("finite differences: weighted cross entropy ignores zero-weight rows") {
    std::mt19937_64 rng(43);
    Tensor logits = make_randn(Shape::mat(3, 4), rng);
    std::vector<int> targets{2, 1, 0};
    std::vector<double> w{0.5, 0.0, 2.0};
    check_gradients([&] { return cross_entropy_weighted(logits, targets, w); }, {logits});

    zero_grads({logits});
    {
        GradTape tape;
        tape.backward(cross_entropy_weighted(logits, targets, w));
    }
    CHECK((ConstMatMap(logits.grad().data(), 3, 4).row(1).array() == 0.0).all());
}

TEST_CASE("finite differences: softmax") {
    std::mt19937_64 rng(47);
    Tensor v = make_randn(Shape::vec(5), rng);
    Tensor r = make_randn(Shape::vec(5), rng, 1.0, false);
    check_gradients([&] { return sum(mul(softmax(v), r)); }, {v});
}

TEST_CASE("finite differences: rmsnorm") {
    std::mt19937_64 rng(53);
    Tensor x = make_randn(Shape::mat(3, 4), rng);
    Tensor g = make_randn(Shape::vec(4), rng, 0.5);
    Tensor r = make_randn(Shape::mat(3, 4), rng, 1.0, false);
    check_gradients([&] { return sum(mul(rmsnorm(x, g), r)); }, {x, g});
}

TEST_CASE("finite differences: attention") {
    std::mt19937_64 rng(59);
    const Index batch = 2, seq = 3;
    Tensor q = make_randn(Shape::mat(batch * seq, 4), rng, 0.8);
    Tensor k = make_randn(Shape::mat(batch * seq, 4), rng, 0.8);
    Tensor v = make_randn(Shape::mat(batch * seq, 4), rng, 0.8);
    Tensor r = make_randn(Shape::mat(batch * seq, 4), rng, 1.0, false);
    check_gradients(
        [&] { return sum(mul(multihead_causal_attention(q, k, v, batch, seq, 2), r)); },
        {q, k, v});
}

TEST_CASE("finite differences: embedding lookup and reshape") {
    std::mt19937_64 rng(61);
    Tensor table = make_randn(Shape::mat(5, 3), rng);
    std::vector<int> ids{4, 1, 4, 0};
    Tensor r = make_randn(Shape::vec(12), rng, 1.0, false);
    check_gradients(
        [&] { return sum(mul(reshape(embedding_lookup(table, ids), Shape::vec(12)), r)); },
        {table});
}

TEST_CASE("adam: zero gradient leaves parameters bit-identical") {
    Tensor w = Tensor::from_values(Shape::vec(3), {0.5, -1.25, 2.0}, true);
    ArrayX before = w.data();
    AdamOptimizer opt;
    opt.add_param(w);
    w.grad();  // allocate zeros
    opt.step();
    CHECK((w.data() == before).all());
    CHECK(opt.step_count() == 1);
}

TEST_CASE("adam: degenerate betas reduce to signed step") {
    AdamConfig cfg;
    cfg.lr = 0.1;
    cfg.beta1 = 0.0;
    cfg.beta2 = 0.0;
    Tensor w = Tensor::from_values(Shape::vec(1), {0.7}, true);
    AdamOptimizer opt(cfg);
    opt.add_param(w);
    w.grad()[0] = 0.3;
    opt.step();
    const double want = 0.7 - 0.1 * 0.3 / (std::abs(0.3) + cfg.epsilon);
    CHECK(w.data()[0] == doctest::Approx(want).epsilon(1e-15));
}

TEST_CASE("adam: trajectory matches a scratch reimplementation") {
    std::mt19937_64 rng(67);
    Tensor w = make_randn(Shape::vec(4), rng);
    std::vector<double> theta(w.data().data(), w.data().data() + 4);
    std::vector<double> m(4, 0.0), v(4, 0.0);

    AdamConfig cfg;
    AdamOptimizer opt(cfg);
    opt.add_param(w);

    for (int step = 1; step <= 3; ++step) {
        opt.zero_grads();
        {
            GradTape tape;
            tape.backward(scale(sum(mul(w, w)), 0.5));
        }
        opt.step();

        for (int i = 0; i < 4; ++i) {
            const double g = theta[static_cast<std::size_t>(i)];
            m[static_cast<std::size_t>(i)] =
                cfg.beta1 * m[static_cast<std::size_t>(i)] + (1 - cfg.beta1) * g;
            v[static_cast<std::size_t>(i)] =
                cfg.beta2 * v[static_cast<std::size_t>(i)] + (1 - cfg.beta2) * g * g;
            const double mh = m[static_cast<std::size_t>(i)] / (1 - std::pow(cfg.beta1, step));
            const double vh = v[static_cast<std::size_t>(i)] / (1 - std::pow(cfg.beta2, step));
            theta[static_cast<std::size_t>(i)] -= cfg.lr * mh / (std::sqrt(vh) + cfg.epsilon);
        }
        for (int i = 0; i < 4; ++i)
            CHECK(w.data()[i] == doctest::Approx(theta[static_cast<std::size_t>(i)]).epsilon(1e-12));
    }
    CHECK(opt.step_count() == 3);
}

TEST_CASE("adam: row-sparse updates skip zero-gradient rows") {
    Tensor w = Tensor::from_values(Shape::mat(4, 2), {1, 2, 3, 4, 5, 6, 7, 8}, true);
    ArrayX original = w.data();
    AdamOptimizer opt;
    opt.add_param(w, /*row_sparse=*/true);

    // rows 0 and 2 receive gradients for 5 steps; 1 and 3 never do
    for (int s = 0; s < 5; ++s) {
        opt.zero_grads();
        ArrayX& g = w.grad();
        g[0] = 0.5;
        g[1] = -0.5;
        g[4] = 1.0;
        g[5] = 1.0;
        opt.step();
    }
    CHECK(w.data()[2] == original[2]);
    CHECK(w.data()[3] == original[3]);
    CHECK(w.data()[6] == original[6]);
    CHECK(w.data()[7] == original[7]);
    CHECK(w.data()[0] != original[0]);
    CHECK(w.data()[4] != original[4]);

    // a dense optimizer fed the same per-row gradients produces the same
    // values for the touched rows
    Tensor dense = Tensor::from_values(Shape::mat(1, 2), {1, 2}, true);
    AdamOptimizer dopt;
    dopt.add_param(dense);
    for (int s = 0; s < 5; ++s) {
        dopt.zero_grads();
        dense.grad()[0] = 0.5;
        dense.grad()[1] = -0.5;
        dopt.step();
    }
    CHECK(w.data()[0] == doctest::Approx(dense.data()[0]).epsilon(1e-15));
    CHECK(w.data()[1] == doctest::Approx(dense.data()[1]).epsilon(1e-15));

    // a row first touched late gets fresh bias correction: its first update
    // matches a fresh optimizer's first step
    opt.zero_grads();
    w.grad()[2] = 2.0;
    w.grad()[3] = 2.0;
    double before = w.data()[2];
    opt.step();
    Tensor fresh = Tensor::from_values(Shape::vec(1), {before}, true);
    AdamOptimizer fopt;
    fopt.add_param(fresh);
    fresh.grad()[0] = 2.0;
    fopt.step();
    CHECK(w.data()[2] == doctest::Approx(fresh.data()[0]).epsilon(1e-15));
}

TEST_CASE("adam: registration and gradient contracts") {
    Tensor w = Tensor::from_values(Shape::vec(2), {1, 2}, true);
    Tensor frozen = Tensor::from_values(Shape::vec(2), {1, 2}, false);
    AdamOptimizer opt;
    opt.add_param(w);
    CHECK_THROWS_AS(opt.add_param(w), ContractError);
    CHECK_THROWS_AS(opt.add_param(frozen), ContractError);
    CHECK_THROWS_AS(opt.add_param(w, /*row_sparse=*/true), ContractError);
    CHECK_THROWS_AS(opt.step(), ContractError);  // no grad populated yet

    AdamOptimizer empty;
    CHECK_THROWS_AS(empty.step(), ContractError);

    Tensor vec = Tensor::from_values(Shape::vec(2), {1, 2}, true);
    AdamOptimizer ropt;
    CHECK_THROWS_AS(ropt.add_param(vec, /*row_sparse=*/true), ContractError);
}
