#pragma once

#include <Eigen/Core>

#include <array>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "sparsemem/errors.hpp"

namespace smem {

using Index = Eigen::Index;
using ArrayX = Eigen::ArrayXd;
using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<MatrixRM>;
using ConstMatMap = Eigen::Map<const MatrixRM>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

// Dense shape, rank 0..3, row-major layout. Unused trailing dims are 1 so
// numel() is always the plain product.
struct Shape {
    int rank = 0;
    std::array<Index, 3> dim{{1, 1, 1}};

    static Shape scalar() { return Shape{}; }
    static Shape vec(Index n) { return Shape{1, {n, 1, 1}}; }
    static Shape mat(Index r, Index c) { return Shape{2, {r, c, 1}}; }
    static Shape cube(Index d0, Index d1, Index d2) { return Shape{3, {d0, d1, d2}}; }

    Index numel() const { return dim[0] * dim[1] * dim[2]; }
    Index rows() const { return dim[0]; }
    Index cols() const { return dim[1]; }
    bool operator==(const Shape&) const = default;
    std::string str() const;
};

namespace detail {

struct TensorNode {
    Shape shape;
    ArrayX value;
    ArrayX grad;  // size 0 until first accumulation
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.size() == 0) grad = ArrayX::Zero(value.size());
    }
};

}  // namespace detail

// Value-semantic handle onto a shared tensor node. Copies alias the same
// storage; operations allocate fresh nodes. All data is contiguous
// double precision in row-major order.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const Shape& s, bool requires_grad = false);
    static Tensor constant(const Shape& s, double v, bool requires_grad = false);
    static Tensor from_values(const Shape& s, std::vector<double> values,
                              bool requires_grad = false);
    static Tensor scalar_value(double v, bool requires_grad = false);
    // Entries i.i.d. Normal(0, stddev^2) drawn in flat row-major order.
    static Tensor randn(const Shape& s, std::mt19937_64& rng, double stddev,
                        bool requires_grad = false);

    bool valid() const { return n_ != nullptr; }
    const Shape& shape() const { return node_ref().shape; }
    int rank() const { return shape().rank; }
    Index numel() const { return shape().numel(); }
    Index dim(int i) const { return shape().dim[static_cast<std::size_t>(i)]; }

    ArrayX& data() { return node_ref().value; }
    const ArrayX& data() const { return node_ref().value; }

    bool requires_grad() const { return node_ref().requires_grad; }
    void set_requires_grad(bool rg) { node_ref().requires_grad = rg; }

    bool has_grad() const { return valid() && n_->grad.size() != 0; }
    ArrayX& grad();              // allocates zeros on first use
    const ArrayX& grad() const;  // throws ContractError if never populated
    void zero_grad();            // no-op when unallocated

    // Matrix/vector views over the flat buffer. mat() requires rank 2;
    // as_mat(r, c) reinterprets any tensor with r*c == numel().
    MatMap mat();
    ConstMatMap mat() const;
    MatMap as_mat(Index rows, Index cols);
    ConstMatMap as_mat(Index rows, Index cols) const;
    MatMap grad_mat();  // rank-2 view of the (allocated) grad buffer

    double scalar() const;  // numel()==1
    double& at(Index i);
    double& at(Index i, Index j);
    double& at(Index i, Index j, Index k);
    double at(Index i) const;
    double at(Index i, Index j) const;
    double at(Index i, Index j, Index k) const;

    void assert_finite(const char* what) const;  // throws ContractError on NaN/Inf

    // Node identity; two handles alias iff nodes compare equal.
    const std::shared_ptr<detail::TensorNode>& node() const { return n_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorNode> n) : n_(std::move(n)) {}
    detail::TensorNode& node_ref();
    const detail::TensorNode& node_ref() const;

    std::shared_ptr<detail::TensorNode> n_;
};

// Dynamic (define-by-run) gradient tape. Constructing a tape makes it the
// active tape for the current thread; destruction restores the previous
// one. Operations record backward closures only while a tape is active and
// at least one input requires grad. backward() runs the closures in
// reverse recording order, visiting each recorded node exactly once.
//
// A tape is single-use: a second backward() without re-recording throws
// ContractError. Parameter gradients accumulate across tapes; callers
// zero them explicitly between steps.
class GradTape {
public:
    GradTape();
    ~GradTape();
    GradTape(const GradTape&) = delete;
    GradTape& operator=(const GradTape&) = delete;

    void record(std::function<void()> backward_step);
    void backward(const Tensor& loss);

    bool consumed() const { return consumed_; }
    std::size_t size() const { return steps_.size(); }

    static GradTape* active();

private:
    std::vector<std::function<void()>> steps_;
    bool consumed_ = false;
    GradTape* prev_ = nullptr;
};

// True when an op with these inputs should record onto the active tape.
bool tracing(std::initializer_list<const Tensor*> inputs);

void zero_grads(const std::vector<Tensor>& params);

}  // namespace smem
