#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <random>
#include <vector>

#include "stum/error.hpp"

namespace stum {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

std::size_t numel(const Shape& shape);
std::vector<std::size_t> row_major_strides(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorImpl;
}

/// Thread-local switch for graph recording. Disable around evaluation
/// loops so forward passes do not retain the computation graph.
struct GradMode {
    static bool enabled();
    static void set(bool on);
};

struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

/// Dense row-major tensor of doubles with reverse-mode differentiation.
/// Value-semantic handle; copies share the underlying buffer.
class Tensor {
  public:
    Tensor();

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor ones(Shape shape, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data,
                            bool requires_grad = false);
    static Tensor uniform(Shape shape, double lo, double hi, Rng& rng,
                          bool requires_grad = false);
    static Tensor randn(Shape shape, double stddev, Rng& rng,
                        bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    std::size_t size() const;
    std::size_t ndim() const;
    double item() const;

    std::vector<double>& data();
    const std::vector<double>& data() const;
    bool has_grad() const;
    const std::vector<double>& grad() const;
    bool requires_grad() const;
    void set_requires_grad(bool on);
    void zero_grad();

    /// Reverse-mode pass from a scalar loss. Populates grad on every
    /// reachable tensor that participates in the graph.
    void backward() const;

    /// Identity of the underlying buffer, for aliasing checks.
    const void* id() const;

  private:
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl);
    std::shared_ptr<detail::TensorImpl> impl_;

    friend Tensor make_op_result(Shape shape, std::vector<double> data,
                                 std::vector<Tensor> parents,
                                 std::function<void(const std::vector<double>&)> backprop);
    friend std::vector<double>& mutable_grad(const Tensor& t);
};

/// Builds an op-node tensor; used by op implementations and test helpers.
Tensor make_op_result(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                      std::function<void(const std::vector<double>&)> backprop);
/// Grad buffer of a tensor, allocated on demand. Optimizer/test use.
std::vector<double>& mutable_grad(const Tensor& t);

// -- elementwise (right-aligned broadcasting, numpy rules) --
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // hadamard
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor scale(const Tensor& a, double s);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

// -- matmul on the trailing two extents; batch extents must match or one
//    operand may be rank-2 (broadcast over the other's batch) --
Tensor matmul(const Tensor& a, const Tensor& b);

// -- activations --
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softmax(const Tensor& x, std::size_t axis);

// -- misc pointwise --
Tensor sqrt_t(const Tensor& x);
Tensor abs_t(const Tensor& x);

// -- reductions --
Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, std::size_t axis, bool keepdim = false);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, std::size_t axis, bool keepdim = false);
Tensor abs_mean(const Tensor& x);
Tensor abs_mean(const Tensor& x, std::size_t axis, bool keepdim = false);

// -- shape manipulation (materialized copies with pass-through grads) --
Tensor reshape(const Tensor& x, Shape shape);
Tensor moveaxis(const Tensor& x, std::size_t from, std::size_t to);

// -- fused kernels for the recurrent mixing path --

/// Contraction along an arbitrary axis: out[..., j@axis, ...] =
/// sum_i x[..., i@axis, ...] * weight[i, j] + bias[j]. Equivalent to moving
/// `axis` last, applying x W + b and moving back, without the copies.
Tensor axis_linear(const Tensor& x, const Tensor& weight, const Tensor& bias,
                   std::size_t axis);

/// Gated blend g * relu(mixed) + (1 - g) * carried with a scalar gate.
Tensor gated_mix(const Tensor& gate, const Tensor& mixed, const Tensor& carried);

/// One recurrent cell update in a single pass:
/// gated_mix(gate, axis_linear(x + carried, weight, bias, axis), carried).
/// The weight must be square so the mixed axis keeps its extent.
Tensor astuc_mix(const Tensor& gate, const Tensor& x, const Tensor& carried,
                 const Tensor& weight, const Tensor& bias, std::size_t axis);

/// Dense map on the trailing extent: out[..., j] = sum_i x[..., i] w[i, j] + b[j].
Tensor linear_last(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// Elementwise retain * (a + b + bias) where retain and bias broadcast over
/// the trailing extent.
Tensor retain_merge(const Tensor& retain, const Tensor& a, const Tensor& b,
                    const Tensor& bias);

/// Residual add with inverted dropout on the increment: x + mask .* dw / keep.
/// The mask is redrawn from `rng`; pass training=false for a plain add.
Tensor residual_dropout(const Tensor& x, const Tensor& dw, double dropout,
                        bool training, Rng& rng);

enum class NormVariant { Rms, PaperEq9 };

/// Normalization along the last extent. Rms divides by
/// sqrt(mean(x^2) + eps); PaperEq9 divides by mean(x^2) + eps.
Tensor rms_norm(const Tensor& x, const Tensor& weight, double eps,
                NormVariant variant = NormVariant::Rms);

/// Max over elements of |analytic - central| / max(|analytic|, |central|, 1e-8)
/// where central = (f(x + h e) - f(x - h e)) / 2h.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         Tensor x, double h);

}  // namespace stum
