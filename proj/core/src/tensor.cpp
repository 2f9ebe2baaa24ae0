#include "stum/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace stum {

namespace {

#if defined(__GLIBC__)
// Multi-megabyte activation buffers churn every op; keep them in the arena
// for reuse instead of round-tripping through mmap/munmap.
const int g_malloc_tuning = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return 0;
}();
#endif

}  // namespace

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

std::vector<std::size_t> row_major_strides(const Shape& shape) {
    std::vector<std::size_t> s(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
    return s;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until backward touches this node
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void(const std::vector<double>&)> backprop;
};

}  // namespace detail

using detail::TensorImpl;

namespace {

thread_local bool g_grad_mode = true;

void ensure_grad(TensorImpl& t) {
    if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0);
}

using MatMap =
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap = Eigen::Map<
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

}  // namespace

bool GradMode::enabled() { return g_grad_mode; }
void GradMode::set(bool on) { g_grad_mode = on; }

NoGradGuard::NoGradGuard() : prev_(g_grad_mode) { g_grad_mode = false; }
NoGradGuard::~NoGradGuard() { g_grad_mode = prev_; }

Tensor::Tensor() = default;
Tensor::Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    if (numel(shape) != data.size())
        throw ShapeMismatch("from_data: shape " + shape_str(shape) + " does not hold " +
                            std::to_string(data.size()) + " values");
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    std::vector<double> d(numel(shape), 0.0);
    return from_data(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    std::vector<double> d(numel(shape), value);
    return from_data(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::ones(Shape shape, bool requires_grad) {
    return full(std::move(shape), 1.0, requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> d(numel(shape));
    for (double& v : d) v = dist(rng);
    return from_data(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::randn(Shape shape, double stddev, Rng& rng, bool requires_grad) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> d(numel(shape));
    for (double& v : d) v = dist(rng);
    return from_data(std::move(shape), std::move(d), requires_grad);
}

const Shape& Tensor::shape() const { return impl_->shape; }
std::size_t Tensor::size() const { return impl_->data.size(); }
std::size_t Tensor::ndim() const { return impl_->shape.size(); }

double Tensor::item() const {
    if (impl_->data.size() != 1)
        throw ShapeMismatch("item() on tensor of size " + std::to_string(impl_->data.size()));
    return impl_->data[0];
}

std::vector<double>& Tensor::data() { return impl_->data; }
const std::vector<double>& Tensor::data() const { return impl_->data; }
bool Tensor::has_grad() const { return !impl_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
    if (impl_->grad.empty()) throw MissingGrad("grad requested but never populated");
    return impl_->grad;
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }
void Tensor::set_requires_grad(bool on) { impl_->requires_grad = on; }
void Tensor::zero_grad() { impl_->grad.clear(); }
const void* Tensor::id() const { return impl_.get(); }

void Tensor::backward() const {
    if (impl_->data.size() != 1) throw NotScalarLoss("backward requires a scalar loss");
    // Post-order DFS over parents, then reverse for the backward sweep.
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> visited;
    std::vector<std::pair<TensorImpl*, std::size_t>> stack;
    stack.emplace_back(impl_.get(), 0);
    visited.insert(impl_.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorImpl* p = node->parents[idx++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    ensure_grad(*impl_);
    impl_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* node = *it;
        if (node->backprop) {
            ensure_grad(*node);
            node->backprop(node->grad);
        }
    }
}

Tensor make_op_result(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                      std::function<void(const std::vector<double>&)> backprop) {
    Tensor out = Tensor::from_data(std::move(shape), std::move(data));
    bool track = g_grad_mode;
    if (track) {
        bool any = false;
        for (const auto& p : parents) any = any || p.requires_grad();
        track = any;
    }
    if (track) {
        out.impl_->requires_grad = true;
        for (auto& p : parents) out.impl_->parents.push_back(p.impl_);
        out.impl_->backprop = std::move(backprop);
    }
    return out;
}

std::vector<double>& mutable_grad(const Tensor& t) {
    ensure_grad(*t.impl_);
    return t.impl_->grad;
}

// ---------------------------------------------------------------------------
// broadcasting machinery

namespace {

// Maps a linear output offset to the corresponding input offset under
// right-aligned broadcasting. Fast paths cover the cases the model hits
// in hot loops: identical shapes, trailing-block operands (bias vectors,
// scalars) and [...,1]-over-[...,d] divisors.
struct BcMap {
    enum Mode { Same, Suffix, InnerOne, General } mode = Same;
    std::size_t modulus = 0;  // Suffix
    std::size_t divisor = 0;  // InnerOne
    Shape out_shape;
    std::vector<std::size_t> out_strides;
    std::vector<std::size_t> in_strides;  // 0 on broadcast dims

    std::size_t offset(std::size_t i) const {
        switch (mode) {
            case Same:
                return i;
            case Suffix:
                return i % modulus;
            case InnerOne:
                return i / divisor;
            case General: {
                std::size_t off = 0;
                for (std::size_t d = 0; d < out_shape.size(); ++d)
                    off += ((i / out_strides[d]) % out_shape[d]) * in_strides[d];
                return off;
            }
        }
        return 0;
    }
};

Shape broadcast_shape(const Shape& a, const Shape& b) {
    std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank, 1);
    for (std::size_t i = 0; i < rank; ++i) {
        std::size_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        std::size_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (ea != eb && ea != 1 && eb != 1)
            throw ShapeMismatch("broadcast: " + shape_str(a) + " vs " + shape_str(b));
        out[i] = std::max(ea, eb);
    }
    return out;
}

BcMap make_bc_map(const Shape& out, const Shape& in) {
    BcMap m;
    if (in == out) {
        m.mode = BcMap::Same;
        return m;
    }
    std::size_t rank = out.size();
    Shape pin(rank, 1);
    std::copy(in.begin(), in.end(), pin.begin() + (rank - in.size()));

    // Suffix: padded dims are 1 until they exactly match out's tail.
    bool suffix = true;
    bool tail = false;
    for (std::size_t d = 0; d < rank; ++d) {
        if (pin[d] == out[d] && out[d] != 1) tail = true;
        if (tail && pin[d] != out[d]) suffix = false;
        if (!tail && pin[d] != 1) suffix = false;
    }
    if (suffix) {
        m.mode = BcMap::Suffix;
        m.modulus = numel(pin);
        return m;
    }
    // InnerOne: equal everywhere except a trailing 1 in the input.
    bool inner_one = pin[rank - 1] == 1 && out[rank - 1] != 1;
    for (std::size_t d = 0; d + 1 < rank && inner_one; ++d)
        if (pin[d] != out[d]) inner_one = false;
    if (inner_one) {
        m.mode = BcMap::InnerOne;
        m.divisor = out[rank - 1];
        return m;
    }
    m.mode = BcMap::General;
    m.out_shape = out;
    m.out_strides = row_major_strides(out);
    m.in_strides.assign(rank, 0);
    auto pin_strides = row_major_strides(pin);
    for (std::size_t d = 0; d < rank; ++d)
        if (pin[d] != 1) m.in_strides[d] = pin_strides[d];
    return m;
}

enum class BinKind { Add, Sub, Mul, Div };

Tensor binary(const Tensor& a, const Tensor& b, BinKind kind) {
    Shape out_shape = broadcast_shape(a.shape(), b.shape());
    std::size_t n = numel(out_shape);
    BcMap ma = make_bc_map(out_shape, a.shape());
    BcMap mb = make_bc_map(out_shape, b.shape());
    const auto& da = a.data();
    const auto& db = b.data();
    std::vector<double> out(n);
    if (ma.mode == BcMap::Same && mb.mode == BcMap::Same) {
        switch (kind) {
            case BinKind::Add:
                for (std::size_t i = 0; i < n; ++i) out[i] = da[i] + db[i];
                break;
            case BinKind::Sub:
                for (std::size_t i = 0; i < n; ++i) out[i] = da[i] - db[i];
                break;
            case BinKind::Mul:
                for (std::size_t i = 0; i < n; ++i) out[i] = da[i] * db[i];
                break;
            case BinKind::Div:
                for (std::size_t i = 0; i < n; ++i) out[i] = da[i] / db[i];
                break;
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            double va = da[ma.offset(i)];
            double vb = db[mb.offset(i)];
            switch (kind) {
                case BinKind::Add: out[i] = va + vb; break;
                case BinKind::Sub: out[i] = va - vb; break;
                case BinKind::Mul: out[i] = va * vb; break;
                case BinKind::Div: out[i] = va / vb; break;
            }
        }
    }
    Tensor ta = a, tb = b;
    return make_op_result(
        out_shape, std::move(out), {a, b},
        [ta, tb, ma, mb, kind, n](const std::vector<double>& g) {
            const auto& da = ta.data();
            const auto& db = tb.data();
            if (ta.requires_grad()) {
                auto& ga = mutable_grad(ta);
                for (std::size_t i = 0; i < n; ++i) {
                    std::size_t oa = ma.offset(i);
                    switch (kind) {
                        case BinKind::Add:
                        case BinKind::Sub: ga[oa] += g[i]; break;
                        case BinKind::Mul: ga[oa] += g[i] * db[mb.offset(i)]; break;
                        case BinKind::Div: ga[oa] += g[i] / db[mb.offset(i)]; break;
                    }
                }
            }
            if (tb.requires_grad()) {
                auto& gb = mutable_grad(tb);
                for (std::size_t i = 0; i < n; ++i) {
                    std::size_t ob = mb.offset(i);
                    switch (kind) {
                        case BinKind::Add: gb[ob] += g[i]; break;
                        case BinKind::Sub: gb[ob] -= g[i]; break;
                        case BinKind::Mul: gb[ob] += g[i] * da[ma.offset(i)]; break;
                        case BinKind::Div: {
                            double vb = db[ob];
                            gb[ob] -= g[i] * da[ma.offset(i)] / (vb * vb);
                            break;
                        }
                    }
                }
            }
        });
}

void check_finite(const Tensor& x, const char* op) {
    for (double v : x.data())
        if (!std::isfinite(v)) throw NonFiniteInput(std::string(op) + ": non-finite input");
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinKind::Add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinKind::Sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinKind::Mul); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(a, b, BinKind::Div); }

Tensor add_scalar(const Tensor& a, double s) {
    std::vector<double> out(a.data());
    for (double& v : out) v += s;
    Tensor ta = a;
    return make_op_result(a.shape(), std::move(out), {a},
                          [ta](const std::vector<double>& g) {
                              if (!ta.requires_grad()) return;
                              auto& ga = mutable_grad(ta);
                              for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                          });
}

Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.data());
    for (double& v : out) v *= s;
    Tensor ta = a;
    return make_op_result(a.shape(), std::move(out), {a},
                          [ta, s](const std::vector<double>& g) {
                              if (!ta.requires_grad()) return;
                              auto& ga = mutable_grad(ta);
                              for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
                          });
}

// ---------------------------------------------------------------------------
// matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() < 2 || sb.size() < 2)
        throw ShapeMismatch("matmul needs rank >= 2, got " + shape_str(sa) + " x " +
                            shape_str(sb));
    std::size_t P = sa[sa.size() - 2], Q = sa[sa.size() - 1];
    std::size_t Qb = sb[sb.size() - 2], R = sb[sb.size() - 1];
    if (Q != Qb)
        throw ShapeMismatch("matmul inner extents differ: " + shape_str(sa) + " x " +
                            shape_str(sb));
    Shape batch_a(sa.begin(), sa.end() - 2);
    Shape batch_b(sb.begin(), sb.end() - 2);
    if (!batch_a.empty() && !batch_b.empty() && batch_a != batch_b)
        throw ShapeMismatch("matmul batch extents differ: " + shape_str(sa) + " x " +
                            shape_str(sb));
    Shape batch = batch_a.empty() ? batch_b : batch_a;
    std::size_t nb = numel(batch);
    bool a_bcast = batch_a.empty() && !batch.empty();
    bool b_bcast = batch_b.empty() && !batch.empty();

    Shape out_shape = batch;
    out_shape.push_back(P);
    out_shape.push_back(R);
    std::vector<double> out(numel(out_shape));
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (std::size_t k = 0; k < nb; ++k) {
        ConstMatMap A(pa + (a_bcast ? 0 : k * P * Q), P, Q);
        ConstMatMap B(pb + (b_bcast ? 0 : k * Q * R), Q, R);
        MatMap C(out.data() + k * P * R, P, R);
        C.noalias() = A * B;
    }
    Tensor ta = a, tb = b;
    return make_op_result(
        out_shape, std::move(out), {a, b},
        [ta, tb, nb, P, Q, R, a_bcast, b_bcast](const std::vector<double>& g) {
            const double* pa = ta.data().data();
            const double* pb = tb.data().data();
            if (ta.requires_grad()) {
                auto& ga = mutable_grad(ta);
                for (std::size_t k = 0; k < nb; ++k) {
                    ConstMatMap G(g.data() + k * P * R, P, R);
                    ConstMatMap B(pb + (b_bcast ? 0 : k * Q * R), Q, R);
                    MatMap GA(ga.data() + (a_bcast ? 0 : k * P * Q), P, Q);
                    GA.noalias() += G * B.transpose();
                }
            }
            if (tb.requires_grad()) {
                auto& gb = mutable_grad(tb);
                for (std::size_t k = 0; k < nb; ++k) {
                    ConstMatMap G(g.data() + k * P * R, P, R);
                    ConstMatMap A(pa + (a_bcast ? 0 : k * P * Q), P, Q);
                    MatMap GB(gb.data() + (b_bcast ? 0 : k * Q * R), Q, R);
                    GB.noalias() += A.transpose() * G;
                }
            }
        });
}

// ---------------------------------------------------------------------------
// activations and pointwise

Tensor relu(const Tensor& x) {
    check_finite(x, "relu");
    std::vector<double> out(x.data());
    for (double& v : out) v = v > 0.0 ? v : 0.0;
    Tensor tx = x;
    return make_op_result(x.shape(), std::move(out), {x},
                          [tx](const std::vector<double>& g) {
                              if (!tx.requires_grad()) return;
                              auto& gx = mutable_grad(tx);
                              const auto& d = tx.data();
                              for (std::size_t i = 0; i < g.size(); ++i)
                                  if (d[i] > 0.0) gx[i] += g[i];
                          });
}

Tensor sigmoid(const Tensor& x) {
    check_finite(x, "sigmoid");
    std::vector<double> out(x.size());
    const auto& d = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-d[i]));
    Tensor tx = x;
    std::vector<double> y = out;
    return make_op_result(x.shape(), std::move(out), {x},
                          [tx, y](const std::vector<double>& g) {
                              if (!tx.requires_grad()) return;
                              auto& gx = mutable_grad(tx);
                              for (std::size_t i = 0; i < g.size(); ++i)
                                  gx[i] += g[i] * y[i] * (1.0 - y[i]);
                          });
}

namespace {

struct LaneView {
    std::size_t outer, count, inner;
};

LaneView lanes(const Shape& shape, std::size_t axis) {
    if (axis >= shape.size())
        throw AxisOutOfRange("axis " + std::to_string(axis) + " for " + shape_str(shape));
    LaneView v{1, shape[axis], 1};
    for (std::size_t d = 0; d < axis; ++d) v.outer *= shape[d];
    for (std::size_t d = axis + 1; d < shape.size(); ++d) v.inner *= shape[d];
    return v;
}

}  // namespace

Tensor softmax(const Tensor& x, std::size_t axis) {
    check_finite(x, "softmax");
    LaneView lv = lanes(x.shape(), axis);
    const auto& d = x.data();
    std::vector<double> out(x.size());
    for (std::size_t o = 0; o < lv.outer; ++o)
        for (std::size_t in = 0; in < lv.inner; ++in) {
            std::size_t base = o * lv.count * lv.inner + in;
            double mx = d[base];
            for (std::size_t k = 1; k < lv.count; ++k)
                mx = std::max(mx, d[base + k * lv.inner]);
            double z = 0.0;
            for (std::size_t k = 0; k < lv.count; ++k) {
                double e = std::exp(d[base + k * lv.inner] - mx);
                out[base + k * lv.inner] = e;
                z += e;
            }
            for (std::size_t k = 0; k < lv.count; ++k) out[base + k * lv.inner] /= z;
        }
    Tensor tx = x;
    std::vector<double> y = out;
    return make_op_result(
        x.shape(), std::move(out), {x}, [tx, y, lv](const std::vector<double>& g) {
            if (!tx.requires_grad()) return;
            auto& gx = mutable_grad(tx);
            for (std::size_t o = 0; o < lv.outer; ++o)
                for (std::size_t in = 0; in < lv.inner; ++in) {
                    std::size_t base = o * lv.count * lv.inner + in;
                    double dot = 0.0;
                    for (std::size_t k = 0; k < lv.count; ++k) {
                        std::size_t i = base + k * lv.inner;
                        dot += y[i] * g[i];
                    }
                    for (std::size_t k = 0; k < lv.count; ++k) {
                        std::size_t i = base + k * lv.inner;
                        gx[i] += y[i] * (g[i] - dot);
                    }
                }
        });
}

Tensor sqrt_t(const Tensor& x) {
    std::vector<double> out(x.size());
    const auto& d = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(d[i]);
    Tensor tx = x;
    std::vector<double> y = out;
    return make_op_result(x.shape(), std::move(out), {x},
                          [tx, y](const std::vector<double>& g) {
                              if (!tx.requires_grad()) return;
                              auto& gx = mutable_grad(tx);
                              for (std::size_t i = 0; i < g.size(); ++i)
                                  gx[i] += g[i] * 0.5 / y[i];
                          });
}

Tensor abs_t(const Tensor& x) {
    std::vector<double> out(x.data());
    for (double& v : out) v = std::fabs(v);
    Tensor tx = x;
    return make_op_result(x.shape(), std::move(out), {x},
                          [tx](const std::vector<double>& g) {
                              if (!tx.requires_grad()) return;
                              auto& gx = mutable_grad(tx);
                              const auto& d = tx.data();
                              // subgradient 0 at ties
                              for (std::size_t i = 0; i < g.size(); ++i) {
                                  if (d[i] > 0.0) gx[i] += g[i];
                                  else if (d[i] < 0.0) gx[i] -= g[i];
                              }
                          });
}

// ---------------------------------------------------------------------------
// reductions

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    Tensor tx = x;
    return make_op_result({1}, {s}, {x}, [tx](const std::vector<double>& g) {
        if (!tx.requires_grad()) return;
        auto& gx = mutable_grad(tx);
        for (double& v : gx) v += g[0];
    });
}

Tensor sum(const Tensor& x, std::size_t axis, bool keepdim) {
    LaneView lv = lanes(x.shape(), axis);
    Shape out_shape = x.shape();
    if (keepdim) out_shape[axis] = 1;
    else out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
    if (out_shape.empty()) out_shape = {1};
    const auto& d = x.data();
    std::vector<double> out(lv.outer * lv.inner, 0.0);
    for (std::size_t o = 0; o < lv.outer; ++o)
        for (std::size_t k = 0; k < lv.count; ++k)
            for (std::size_t in = 0; in < lv.inner; ++in)
                out[o * lv.inner + in] += d[(o * lv.count + k) * lv.inner + in];
    Tensor tx = x;
    return make_op_result(out_shape, std::move(out), {x},
                          [tx, lv](const std::vector<double>& g) {
                              if (!tx.requires_grad()) return;
                              auto& gx = mutable_grad(tx);
                              for (std::size_t o = 0; o < lv.outer; ++o)
                                  for (std::size_t k = 0; k < lv.count; ++k)
                                      for (std::size_t in = 0; in < lv.inner; ++in)
                                          gx[(o * lv.count + k) * lv.inner + in] +=
                                              g[o * lv.inner + in];
                          });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor mean(const Tensor& x, std::size_t axis, bool keepdim) {
    LaneView lv = lanes(x.shape(), axis);
    return scale(sum(x, axis, keepdim), 1.0 / static_cast<double>(lv.count));
}

Tensor abs_mean(const Tensor& x) { return mean(abs_t(x)); }

Tensor abs_mean(const Tensor& x, std::size_t axis, bool keepdim) {
    return mean(abs_t(x), axis, keepdim);
}

// ---------------------------------------------------------------------------
// shape ops

Tensor reshape(const Tensor& x, Shape shape) {
    if (numel(shape) != x.size())
        throw ShapeMismatch("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
    Tensor tx = x;
    return make_op_result(std::move(shape), std::vector<double>(x.data()), {x},
                          [tx](const std::vector<double>& g) {
                              if (!tx.requires_grad()) return;
                              auto& gx = mutable_grad(tx);
                              for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                          });
}

Tensor moveaxis(const Tensor& x, std::size_t from, std::size_t to) {
    std::size_t rank = x.ndim();
    if (from >= rank || to >= rank) throw AxisOutOfRange("moveaxis axis out of range");
    if (from == to) return reshape(x, x.shape());
    std::vector<std::size_t> perm;
    for (std::size_t d = 0; d < rank; ++d)
        if (d != from) perm.push_back(d);
    perm.insert(perm.begin() + static_cast<std::ptrdiff_t>(to), from);

    Shape out_shape(rank);
    for (std::size_t d = 0; d < rank; ++d) out_shape[d] = x.shape()[perm[d]];
    auto in_strides = row_major_strides(x.shape());
    std::size_t n = x.size();
    // source stride per output dimension; walk an odometer over the output
    // coordinates so no per-element division is needed
    std::vector<std::size_t> src_stride(rank);
    for (std::size_t d = 0; d < rank; ++d) src_stride[d] = in_strides[perm[d]];
    auto for_each_src = [out_shape, src_stride, rank, n](auto&& fn) {
        std::vector<std::size_t> idx(rank, 0);
        std::size_t off = 0;
        for (std::size_t i = 0; i < n; ++i) {
            fn(i, off);
            for (std::size_t d = rank; d-- > 0;) {
                off += src_stride[d];
                if (++idx[d] < out_shape[d]) break;
                idx[d] = 0;
                off -= src_stride[d] * out_shape[d];
            }
        }
    };
    std::vector<double> out(n);
    const auto& din = x.data();
    {
        const double* src = din.data();
        double* dst = out.data();
        for_each_src([&](std::size_t i, std::size_t off) { dst[i] = src[off]; });
    }
    Tensor tx = x;
    return make_op_result(out_shape, std::move(out), {x},
                          [tx, for_each_src](const std::vector<double>& g) {
                              if (!tx.requires_grad()) return;
                              auto& gx = mutable_grad(tx);
                              double* dst = gx.data();
                              const double* src = g.data();
                              for_each_src([&](std::size_t i, std::size_t off) {
                                  dst[off] += src[i];
                              });
                          });
}

// ---------------------------------------------------------------------------
// fused kernels

Tensor axis_linear(const Tensor& x, const Tensor& weight, const Tensor& bias,
                   std::size_t axis) {
    if (weight.ndim() != 2)
        throw ShapeMismatch("axis_linear weight must be rank 2, got " +
                            shape_str(weight.shape()));
    if (axis >= x.ndim())
        throw AxisOutOfRange("axis " + std::to_string(axis) + " for " +
                             shape_str(x.shape()));
    std::size_t in = weight.shape()[0], out_e = weight.shape()[1];
    if (x.shape()[axis] != in)
        throw ShapeMismatch("axis_linear: input extent " +
                            std::to_string(x.shape()[axis]) + " does not match weight " +
                            shape_str(weight.shape()));
    if (bias.shape() != Shape{out_e})
        throw ShapeMismatch("axis_linear bias " + shape_str(bias.shape()) +
                            " does not match out extent " + std::to_string(out_e));
    LaneView lv = lanes(x.shape(), axis);
    Shape out_shape = x.shape();
    out_shape[axis] = out_e;
    std::vector<double> out(numel(out_shape));
    ConstMatMap W(weight.data().data(), in, out_e);
    Eigen::Map<const Eigen::VectorXd> bvec(bias.data().data(), out_e);
    const double* px = x.data().data();
    for (std::size_t k = 0; k < lv.outer; ++k) {
        ConstMatMap X(px + k * in * lv.inner, in, lv.inner);
        MatMap Y(out.data() + k * out_e * lv.inner, out_e, lv.inner);
        Y.noalias() = W.transpose() * X;
        Y.colwise() += bvec;
    }
    Tensor tx = x, tw = weight, tb = bias;
    return make_op_result(
        out_shape, std::move(out), {x, weight, bias},
        [tx, tw, tb, lv, in, out_e](const std::vector<double>& g) {
            ConstMatMap W(tw.data().data(), in, out_e);
            const double* px = tx.data().data();
            if (tx.requires_grad()) {
                auto& gx = mutable_grad(tx);
                for (std::size_t k = 0; k < lv.outer; ++k) {
                    ConstMatMap G(g.data() + k * out_e * lv.inner, out_e, lv.inner);
                    MatMap GX(gx.data() + k * in * lv.inner, in, lv.inner);
                    GX.noalias() += W * G;
                }
            }
            if (tw.requires_grad()) {
                auto& gw = mutable_grad(tw);
                MatMap GW(gw.data(), in, out_e);
                for (std::size_t k = 0; k < lv.outer; ++k) {
                    ConstMatMap G(g.data() + k * out_e * lv.inner, out_e, lv.inner);
                    ConstMatMap X(px + k * in * lv.inner, in, lv.inner);
                    GW.noalias() += X * G.transpose();
                }
            }
            if (tb.requires_grad()) {
                auto& gb = mutable_grad(tb);
                Eigen::Map<Eigen::VectorXd> GB(gb.data(), out_e);
                for (std::size_t k = 0; k < lv.outer; ++k) {
                    ConstMatMap G(g.data() + k * out_e * lv.inner, out_e, lv.inner);
                    GB.noalias() += G.rowwise().sum();
                }
            }
        });
}

Tensor gated_mix(const Tensor& gate, const Tensor& mixed, const Tensor& carried) {
    if (gate.size() != 1)
        throw ShapeMismatch("gated_mix gate must be a scalar, got " +
                            shape_str(gate.shape()));
    if (mixed.shape() != carried.shape())
        throw ShapeMismatch("gated_mix: " + shape_str(mixed.shape()) + " vs " +
                            shape_str(carried.shape()));
    double gv = gate.data()[0];
    std::size_t n = mixed.size();
    const auto& dm = mixed.data();
    const auto& dc = carried.data();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        double m = dm[i];
        if (!std::isfinite(m)) throw NonFiniteInput("gated_mix: non-finite input");
        double r = m > 0.0 ? m : 0.0;
        out[i] = gv * r + (1.0 - gv) * dc[i];
    }
    Tensor tg = gate, tm = mixed, tc = carried;
    return make_op_result(
        mixed.shape(), std::move(out), {gate, mixed, carried},
        [tg, tm, tc, gv, n](const std::vector<double>& g) {
            const auto& dm = tm.data();
            const auto& dc = tc.data();
            if (tm.requires_grad()) {
                auto& gm = mutable_grad(tm);
                for (std::size_t i = 0; i < n; ++i)
                    if (dm[i] > 0.0) gm[i] += gv * g[i];
            }
            if (tc.requires_grad()) {
                auto& gc = mutable_grad(tc);
                for (std::size_t i = 0; i < n; ++i) gc[i] += (1.0 - gv) * g[i];
            }
            if (tg.requires_grad()) {
                auto& gg = mutable_grad(tg);
                double s = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    double r = dm[i] > 0.0 ? dm[i] : 0.0;
                    s += g[i] * (r - dc[i]);
                }
                gg[0] += s;
            }
        });
}

Tensor astuc_mix(const Tensor& gate, const Tensor& x, const Tensor& carried,
                 const Tensor& weight, const Tensor& bias, std::size_t axis) {
    if (gate.size() != 1)
        throw ShapeMismatch("astuc_mix gate must be a scalar, got " +
                            shape_str(gate.shape()));
    if (weight.ndim() != 2 || weight.shape()[0] != weight.shape()[1])
        throw ShapeMismatch("astuc_mix weight must be square, got " +
                            shape_str(weight.shape()));
    if (x.shape() != carried.shape())
        throw ShapeMismatch("astuc_mix: " + shape_str(x.shape()) + " vs " +
                            shape_str(carried.shape()));
    if (axis >= x.ndim())
        throw AxisOutOfRange("axis " + std::to_string(axis) + " for " +
                             shape_str(x.shape()));
    std::size_t e = weight.shape()[0];
    if (x.shape()[axis] != e)
        throw ShapeMismatch("astuc_mix: input extent " + std::to_string(x.shape()[axis]) +
                            " does not match weight " + shape_str(weight.shape()));
    if (bias.shape() != Shape{e})
        throw ShapeMismatch("astuc_mix bias " + shape_str(bias.shape()) +
                            " does not match extent " + std::to_string(e));
    LaneView lv = lanes(x.shape(), axis);
    std::size_t block = e * lv.inner;
    double gv = gate.data()[0];
    const auto& dx = x.data();
    const auto& dc = carried.data();
    std::vector<double> out(x.size());
    using BlockMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    {
        ConstMatMap W(weight.data().data(), e, e);
        Eigen::Map<const Eigen::VectorXd> bvec(bias.data().data(), e);
        BlockMat T(e, lv.inner), R(e, lv.inner);
        for (std::size_t k = 0; k < lv.outer; ++k) {
            ConstMatMap X(dx.data() + k * block, e, lv.inner);
            ConstMatMap C(dc.data() + k * block, e, lv.inner);
            T = X + C;
            R.noalias() = W.transpose() * T;
            R.colwise() += bvec;
            const double* rp = R.data();
            const double* cp = dc.data() + k * block;
            double* op = out.data() + k * block;
            for (std::size_t i = 0; i < block; ++i) {
                double m = rp[i];
                if (!std::isfinite(m)) throw NonFiniteInput("astuc_mix: non-finite input");
                double r = m > 0.0 ? m : 0.0;
                op[i] = gv * r + (1.0 - gv) * cp[i];
            }
        }
    }
    Tensor tg = gate, tx = x, tc = carried, tw = weight, tb = bias;
    return make_op_result(
        x.shape(), std::move(out), {gate, x, carried, weight, bias},
        [tg, tx, tc, tw, tb, gv, lv, e, block](const std::vector<double>& g) {
            ConstMatMap W(tw.data().data(), e, e);
            Eigen::Map<const Eigen::VectorXd> bvec(tb.data().data(), e);
            // pre-gate values are cheap to rebuild per cache-resident block,
            // so they are not stored by the forward pass
            BlockMat T(e, lv.inner), R(e, lv.inner), G2(e, lv.inner);
            bool need_x = tx.requires_grad();
            bool need_c = tc.requires_grad();
            bool need_w = tw.requires_grad();
            bool need_b = tb.requires_grad();
            bool need_g = tg.requires_grad();
            double gsum = 0.0;
            for (std::size_t k = 0; k < lv.outer; ++k) {
                ConstMatMap X(tx.data().data() + k * block, e, lv.inner);
                ConstMatMap C(tc.data().data() + k * block, e, lv.inner);
                T = X + C;
                R.noalias() = W.transpose() * T;
                R.colwise() += bvec;
                const double* gp = g.data() + k * block;
                const double* rp = R.data();
                // grad through the gated relu branch
                double* g2p = G2.data();
                for (std::size_t i = 0; i < block; ++i)
                    g2p[i] = rp[i] > 0.0 ? gv * gp[i] : 0.0;
                if (need_g) {
                    const double* cp = tc.data().data() + k * block;
                    for (std::size_t i = 0; i < block; ++i) {
                        double r = rp[i] > 0.0 ? rp[i] : 0.0;
                        gsum += gp[i] * (r - cp[i]);
                    }
                }
                if (need_x) {
                    MatMap GX(mutable_grad(tx).data() + k * block, e, lv.inner);
                    GX.noalias() += W * G2;
                }
                if (need_c) {
                    MatMap GC(mutable_grad(tc).data() + k * block, e, lv.inner);
                    GC.noalias() += W * G2;
                    double* gcp = mutable_grad(tc).data() + k * block;
                    for (std::size_t i = 0; i < block; ++i)
                        gcp[i] += (1.0 - gv) * gp[i];
                }
                if (need_w) {
                    MatMap GW(mutable_grad(tw).data(), e, e);
                    GW.noalias() += T * G2.transpose();
                }
                if (need_b) {
                    Eigen::Map<Eigen::VectorXd> GB(mutable_grad(tb).data(), e);
                    GB.noalias() += G2.rowwise().sum();
                }
            }
            if (need_g) mutable_grad(tg)[0] += gsum;
        });
}

Tensor linear_last(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (weight.ndim() != 2)
        throw ShapeMismatch("linear_last weight must be rank 2, got " +
                            shape_str(weight.shape()));
    std::size_t in = weight.shape()[0], out_e = weight.shape()[1];
    if (x.shape().empty() || x.shape().back() != in)
        throw ShapeMismatch("linear_last: input " + shape_str(x.shape()) +
                            " does not end in " + std::to_string(in));
    if (bias.shape() != Shape{out_e})
        throw ShapeMismatch("linear_last bias " + shape_str(bias.shape()) +
                            " does not match out extent " + std::to_string(out_e));
    std::size_t rows = x.size() / in;
    Shape out_shape = x.shape();
    out_shape.back() = out_e;
    std::vector<double> out(rows * out_e);
    {
        ConstMatMap X(x.data().data(), rows, in);
        ConstMatMap W(weight.data().data(), in, out_e);
        MatMap Y(out.data(), rows, out_e);
        Y.noalias() = X * W;
        Y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), out_e);
    }
    Tensor tx = x, tw = weight, tb = bias;
    return make_op_result(
        out_shape, std::move(out), {x, weight, bias},
        [tx, tw, tb, rows, in, out_e](const std::vector<double>& g) {
            ConstMatMap G(g.data(), rows, out_e);
            if (tx.requires_grad()) {
                ConstMatMap W(tw.data().data(), in, out_e);
                MatMap GX(mutable_grad(tx).data(), rows, in);
                GX.noalias() += G * W.transpose();
            }
            if (tw.requires_grad()) {
                ConstMatMap X(tx.data().data(), rows, in);
                MatMap GW(mutable_grad(tw).data(), in, out_e);
                GW.noalias() += X.transpose() * G;
            }
            if (tb.requires_grad()) {
                Eigen::Map<Eigen::RowVectorXd> GB(mutable_grad(tb).data(), out_e);
                GB.noalias() += G.colwise().sum();
            }
        });
}

Tensor retain_merge(const Tensor& retain, const Tensor& a, const Tensor& b,
                    const Tensor& bias) {
    if (a.shape() != b.shape())
        throw ShapeMismatch("retain_merge: " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
    if (a.shape().empty()) throw ShapeMismatch("retain_merge on empty tensor");
    std::size_t d = a.shape().back();
    if (retain.shape() != Shape{d} || bias.shape() != Shape{d})
        throw ShapeMismatch("retain_merge: retain/bias must match trailing extent " +
                            std::to_string(d));
    std::size_t n = a.size();
    const auto& da = a.data();
    const auto& db = b.data();
    const auto& dr = retain.data();
    const auto& dbias = bias.data();
    std::vector<double> out(n);
    for (std::size_t i = 0, j = 0; i < n; ++i) {
        out[i] = dr[j] * (da[i] + db[i] + dbias[j]);
        if (++j == d) j = 0;
    }
    Tensor tr = retain, ta = a, tb = b, tbias = bias;
    return make_op_result(
        a.shape(), std::move(out), {retain, a, b, bias},
        [tr, ta, tb, tbias, n, d](const std::vector<double>& g) {
            const auto& da = ta.data();
            const auto& db = tb.data();
            const auto& dr = tr.data();
            const auto& dbias = tbias.data();
            bool need_a = ta.requires_grad();
            bool need_b = tb.requires_grad();
            if (need_a || need_b) {
                auto* ga = need_a ? mutable_grad(ta).data() : nullptr;
                auto* gb = need_b ? mutable_grad(tb).data() : nullptr;
                for (std::size_t i = 0, j = 0; i < n; ++i) {
                    double v = dr[j] * g[i];
                    if (need_a) ga[i] += v;
                    if (need_b) gb[i] += v;
                    if (++j == d) j = 0;
                }
            }
            if (tr.requires_grad()) {
                auto& gr = mutable_grad(tr);
                for (std::size_t i = 0, j = 0; i < n; ++i) {
                    gr[j] += g[i] * (da[i] + db[i] + dbias[j]);
                    if (++j == d) j = 0;
                }
            }
            if (tbias.requires_grad()) {
                auto& gbias = mutable_grad(tbias);
                for (std::size_t i = 0, j = 0; i < n; ++i) {
                    gbias[j] += dr[j] * g[i];
                    if (++j == d) j = 0;
                }
            }
        });
}

Tensor residual_dropout(const Tensor& x, const Tensor& dw, double dropout,
                        bool training, Rng& rng) {
    if (x.shape() != dw.shape())
        throw ShapeMismatch("residual_dropout: " + shape_str(x.shape()) + " vs " +
                            shape_str(dw.shape()));
    if (dropout < 0.0 || dropout >= 1.0)
        throw ConfigError("residual_dropout: dropout must be in [0,1)");
    std::size_t n = x.size();
    const auto& dx = x.data();
    const auto& dd = dw.data();
    std::vector<double> out(n);
    Tensor tx = x, td = dw;
    if (!training || dropout == 0.0) {
        for (std::size_t i = 0; i < n; ++i) out[i] = dx[i] + dd[i];
        return make_op_result(x.shape(), std::move(out), {x, dw},
                              [tx, td, n](const std::vector<double>& g) {
                                  if (tx.requires_grad()) {
                                      auto& gx = mutable_grad(tx);
                                      for (std::size_t i = 0; i < n; ++i) gx[i] += g[i];
                                  }
                                  if (td.requires_grad()) {
                                      auto& gd = mutable_grad(td);
                                      for (std::size_t i = 0; i < n; ++i) gd[i] += g[i];
                                  }
                              });
    }
    // the backward pass replays the mask from a snapshot of the engine state
    Rng snapshot = rng;
    std::bernoulli_distribution keep(1.0 - dropout);
    double inv_keep = 1.0 / (1.0 - dropout);
    for (std::size_t i = 0; i < n; ++i)
        out[i] = dx[i] + (keep(rng) ? dd[i] * inv_keep : 0.0);
    return make_op_result(
        x.shape(), std::move(out), {x, dw},
        [tx, td, n, snapshot, dropout, inv_keep](const std::vector<double>& g) {
            if (tx.requires_grad()) {
                auto& gx = mutable_grad(tx);
                for (std::size_t i = 0; i < n; ++i) gx[i] += g[i];
            }
            if (td.requires_grad()) {
                Rng replay = snapshot;
                std::bernoulli_distribution keep(1.0 - dropout);
                auto& gd = mutable_grad(td);
                for (std::size_t i = 0; i < n; ++i) {
                    bool on = keep(replay);
                    if (on) gd[i] += g[i] * inv_keep;
                }
            }
        });
}

// ---------------------------------------------------------------------------

Tensor rms_norm(const Tensor& x, const Tensor& weight, double eps, NormVariant variant) {
    if (x.ndim() == 0) throw ShapeMismatch("rms_norm on empty tensor");
    std::size_t d = x.shape().back();
    if (weight.shape() != Shape{d})
        throw ShapeMismatch("rms_norm weight " + shape_str(weight.shape()) +
                            " does not match last extent " + std::to_string(d));
    if (eps <= 0.0) throw Error("rms_norm: eps must be positive");
    std::size_t rows = x.size() / d;
    const auto& dx = x.data();
    const auto& dw = weight.data();
    std::vector<double> out(x.size());
    std::vector<double> denom(rows);
    double inv_d = 1.0 / static_cast<double>(d);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = dx.data() + r * d;
        double ms = 0.0;
        for (std::size_t j = 0; j < d; ++j) ms += row[j] * row[j];
        double D = ms * inv_d + eps;
        if (variant == NormVariant::Rms) D = std::sqrt(D);
        denom[r] = D;
        double* orow = out.data() + r * d;
        for (std::size_t j = 0; j < d; ++j) orow[j] = row[j] / D * dw[j];
    }
    Tensor tx = x, tw = weight;
    return make_op_result(
        x.shape(), std::move(out), {x, weight},
        [tx, tw, denom, rows, d, inv_d, variant](const std::vector<double>& g) {
            const auto& dx = tx.data();
            const auto& dw = tw.data();
            if (tx.requires_grad()) {
                auto& gx = mutable_grad(tx);
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* row = dx.data() + r * d;
                    const double* grow = g.data() + r * d;
                    double D = denom[r];
                    double t = 0.0;
                    for (std::size_t j = 0; j < d; ++j) t += dw[j] * row[j] * grow[j];
                    // d(1/D)/dx_j: rms variant has D = sqrt(ms + eps),
                    // paper variant divides by ms + eps directly
                    double c = variant == NormVariant::Rms ? t * inv_d / (D * D * D)
                                                           : 2.0 * t * inv_d / (D * D);
                    double* gxr = gx.data() + r * d;
                    for (std::size_t j = 0; j < d; ++j)
                        gxr[j] += grow[j] * dw[j] / D - row[j] * c;
                }
            }
            if (tw.requires_grad()) {
                auto& gw = mutable_grad(tw);
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* row = dx.data() + r * d;
                    const double* grow = g.data() + r * d;
                    double D = denom[r];
                    for (std::size_t j = 0; j < d; ++j) gw[j] += row[j] * grow[j] / D;
                }
            }
        });
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                         double h) {
    if (h <= 0.0) throw Error("finite_diff_check: h must be positive");
    x.set_requires_grad(true);
    x.zero_grad();
    Tensor y = f(x);
    if (y.size() != 1) throw NotScalarLoss("finite_diff_check: f must return a scalar");
    y.backward();
    std::vector<double> analytic =
        x.has_grad() ? x.grad() : std::vector<double>(x.size(), 0.0);
    double max_err = 0.0;
    NoGradGuard ng;
    auto& d = x.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
        double orig = d[i];
        d[i] = orig + h;
        double fp = f(x).item();
        d[i] = orig - h;
        double fm = f(x).item();
        d[i] = orig;
        double central = (fp - fm) / (2.0 * h);
        // the floor keeps roundoff in the central difference (~|f|*eps/h) from
        // registering as relative error on near-zero gradient entries
        double denom = std::max({std::fabs(analytic[i]), std::fabs(central), 1e-6});
        max_err = std::max(max_err, std::fabs(analytic[i] - central) / denom);
    }
    return max_err;
}

}  // namespace stum
