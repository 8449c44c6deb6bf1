#include "sparsemem/tensor.hpp"

#include <cmath>
#include <sstream>

namespace smem {

std::string Shape::str() const {
    std::ostringstream os;
    os << '[';
    for (int i = 0; i < rank; ++i) {
        if (i) os << 'x';
        os << dim[static_cast<std::size_t>(i)];
    }
    os << ']';
    return os.str();
}

namespace {

std::shared_ptr<detail::TensorNode> make_node(const Shape& s, bool rg) {
    for (int i = 0; i < s.rank; ++i) {
        if (s.dim[static_cast<std::size_t>(i)] <= 0) {
            throw ShapeError("tensor dimension must be positive, got " + s.str());
        }
    }
    auto n = std::make_shared<detail::TensorNode>();
    n->shape = s;
    n->requires_grad = rg;
    return n;
}

}  // namespace

Tensor Tensor::zeros(const Shape& s, bool requires_grad) {
    auto n = make_node(s, requires_grad);
    n->value = ArrayX::Zero(s.numel());
    return Tensor(std::move(n));
}

Tensor Tensor::constant(const Shape& s, double v, bool requires_grad) {
    auto n = make_node(s, requires_grad);
    n->value = ArrayX::Constant(s.numel(), v);
    return Tensor(std::move(n));
}

Tensor Tensor::from_values(const Shape& s, std::vector<double> values, bool requires_grad) {
    if (static_cast<Index>(values.size()) != s.numel()) {
        throw ShapeError("value count " + std::to_string(values.size()) +
                         " does not match shape " + s.str());
    }
    auto n = make_node(s, requires_grad);
    n->value = Eigen::Map<const ArrayX>(values.data(), s.numel());
    return Tensor(std::move(n));
}

Tensor Tensor::scalar_value(double v, bool requires_grad) {
    auto n = make_node(Shape::scalar(), requires_grad);
    n->value = ArrayX::Constant(1, v);
    return Tensor(std::move(n));
}

Tensor Tensor::randn(const Shape& s, std::mt19937_64& rng, double stddev, bool requires_grad) {
    auto n = make_node(s, requires_grad);
    n->value.resize(s.numel());
    std::normal_distribution<double> dist(0.0, stddev);
    for (Index i = 0; i < n->value.size(); ++i) n->value[i] = dist(rng);
    return Tensor(std::move(n));
}

detail::TensorNode& Tensor::node_ref() {
    if (!n_) throw ContractError("use of empty tensor handle");
    return *n_;
}

const detail::TensorNode& Tensor::node_ref() const {
    if (!n_) throw ContractError("use of empty tensor handle");
    return *n_;
}

ArrayX& Tensor::grad() {
    auto& n = node_ref();
    n.ensure_grad();
    return n.grad;
}

const ArrayX& Tensor::grad() const {
    const auto& n = node_ref();
    if (n.grad.size() == 0) throw ContractError("gradient buffer was never populated");
    return n.grad;
}

void Tensor::zero_grad() {
    auto& n = node_ref();
    if (n.grad.size() != 0) n.grad.setZero();
}

MatMap Tensor::mat() {
    auto& n = node_ref();
    if (n.shape.rank != 2) throw ShapeError("mat() requires rank 2, got " + n.shape.str());
    return MatMap(n.value.data(), n.shape.dim[0], n.shape.dim[1]);
}

ConstMatMap Tensor::mat() const {
    const auto& n = node_ref();
    if (n.shape.rank != 2) throw ShapeError("mat() requires rank 2, got " + n.shape.str());
    return ConstMatMap(n.value.data(), n.shape.dim[0], n.shape.dim[1]);
}

MatMap Tensor::as_mat(Index rows, Index cols) {
    auto& n = node_ref();
    if (rows * cols != n.shape.numel()) {
        throw ShapeError("cannot view " + n.shape.str() + " as " + std::to_string(rows) + "x" +
                         std::to_string(cols));
    }
    return MatMap(n.value.data(), rows, cols);
}

ConstMatMap Tensor::as_mat(Index rows, Index cols) const {
    const auto& n = node_ref();
    if (rows * cols != n.shape.numel()) {
        throw ShapeError("cannot view " + n.shape.str() + " as " + std::to_string(rows) + "x" +
                         std::to_string(cols));
    }
    return ConstMatMap(n.value.data(), rows, cols);
}

MatMap Tensor::grad_mat() {
    auto& n = node_ref();
    if (n.shape.rank != 2) throw ShapeError("grad_mat() requires rank 2, got " + n.shape.str());
    n.ensure_grad();
    return MatMap(n.grad.data(), n.shape.dim[0], n.shape.dim[1]);
}

double Tensor::scalar() const {
    const auto& n = node_ref();
    if (n.shape.numel() != 1) {
        throw ShapeError("scalar() requires a single element, got " + n.shape.str());
    }
    return n.value[0];
}

namespace {

Index flat_offset(const Shape& s, Index i, Index j, Index k, int rank_used) {
    if (s.rank != rank_used) {
        throw ShapeError("indexing rank " + std::to_string(rank_used) + " into " + s.str());
    }
    const Index dims[3] = {s.dim[0], s.dim[1], s.dim[2]};
    const Index idx[3] = {i, j, k};
    Index off = 0;
    for (int a = 0; a < rank_used; ++a) {
        if (idx[a] < 0 || idx[a] >= dims[a]) {
            throw IndexError("index " + std::to_string(idx[a]) + " out of range for axis " +
                             std::to_string(a) + " of " + s.str());
        }
        off = off * dims[a] + idx[a];
    }
    return off;
}

}  // namespace

double& Tensor::at(Index i) { return node_ref().value[flat_offset(shape(), i, 0, 0, 1)]; }
double& Tensor::at(Index i, Index j) { return node_ref().value[flat_offset(shape(), i, j, 0, 2)]; }
double& Tensor::at(Index i, Index j, Index k) {
    return node_ref().value[flat_offset(shape(), i, j, k, 3)];
}
double Tensor::at(Index i) const { return node_ref().value[flat_offset(shape(), i, 0, 0, 1)]; }
double Tensor::at(Index i, Index j) const {
    return node_ref().value[flat_offset(shape(), i, j, 0, 2)];
}
double Tensor::at(Index i, Index j, Index k) const {
    return node_ref().value[flat_offset(shape(), i, j, k, 3)];
}

void Tensor::assert_finite(const char* what) const {
    const auto& v = node_ref().value;
    if (!v.isFinite().all()) {
        throw ContractError(std::string(what) + ": non-finite value in tensor " + shape().str());
    }
}

namespace {
thread_local GradTape* g_active_tape = nullptr;
}

GradTape::GradTape() {
    prev_ = g_active_tape;
    g_active_tape = this;
}

GradTape::~GradTape() { g_active_tape = prev_; }

GradTape* GradTape::active() { return g_active_tape; }

void GradTape::record(std::function<void()> backward_step) {
    if (consumed_) throw ContractError("recording onto a consumed tape");
    steps_.push_back(std::move(backward_step));
}

void GradTape::backward(const Tensor& loss) {
    if (consumed_) throw ContractError("backward called twice on the same tape");
    if (!loss.valid() || loss.numel() != 1) {
        throw ContractError("backward requires a scalar loss");
    }
    consumed_ = true;
    if (loss.requires_grad()) {
        loss.node()->ensure_grad();
        loss.node()->grad[0] += 1.0;
    }
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
    steps_.clear();
}

bool tracing(std::initializer_list<const Tensor*> inputs) {
    if (GradTape::active() == nullptr) return false;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

void zero_grads(const std::vector<Tensor>& params) {
    for (Tensor p : params) p.zero_grad();  // handle copy, same node
}

}  // namespace smem
