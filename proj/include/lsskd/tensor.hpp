#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "lsskd/common.hpp"

namespace lsskd {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

/// Process-global element type for newly created tensors. f32 is the training
/// default; f64 exists so finite-difference gradient checks are meaningful.
void set_default_dtype(DType dt);
DType default_dtype();

struct TensorImpl;

/// Reverse-mode record: one per produced tensor, holding the inputs and the
/// rule that scatters the output gradient back into them.
struct Node {
    const char* op = "";
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::function<void(TensorImpl&)> backward;
};

struct TensorImpl {
    std::vector<std::size_t> shape;
    DType dtype = DType::f32;
    std::vector<float> vf;  // active iff dtype == f32
    std::vector<double> vd; // active iff dtype == f64
    bool requires_grad = false;
    std::vector<float> gf;
    std::vector<double> gd;
    std::shared_ptr<Node> node;
    std::uint64_t seq = 0; // creation order; backward visits in decreasing seq

    std::size_t numel() const;
    bool has_grad() const { return dtype == DType::f32 ? !gf.empty() : !gd.empty(); }
};

/// Dense n-dimensional array with optional reverse-mode gradient.
/// Values are immutable once the tensor is visible to user code; only the
/// gradient buffer is written later (during a backward pass).
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape);
    static Tensor zeros(std::vector<std::size_t> shape, DType dt);
    static Tensor full(std::vector<std::size_t> shape, double value);
    static Tensor full(std::vector<std::size_t> shape, double value, DType dt);
    static Tensor scalar(double value);
    static Tensor from_vector(std::vector<std::size_t> shape, const std::vector<double>& values);
    static Tensor from_vector(std::vector<std::size_t> shape, const std::vector<double>& values, DType dt);
    /// Fan-in-scaled normal draws: std = sqrt(2 / fan_in).
    static Tensor randn_scaled(std::vector<std::size_t> shape, std::size_t fan_in, Rng& rng);
    static Tensor randn_scaled(std::vector<std::size_t> shape, std::size_t fan_in, Rng& rng, DType dt);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<std::size_t>& shape() const;
    std::size_t numel() const;
    std::size_t dim(std::size_t i) const { return shape().at(i); }
    std::size_t rank() const { return shape().size(); }
    DType dtype() const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool v);

    /// Value of a one-element tensor.
    double item() const;
    /// Flat-index element read, widened to double.
    double at(std::size_t flat) const;
    std::vector<double> to_vector() const;

    bool has_grad() const;
    /// Copy of the accumulated gradient (no grad of its own).
    Tensor grad() const;
    std::vector<double> grad_vector() const;
    void clear_grad();

    /// Same values, no gradient path.
    Tensor detach() const;

    bool all_finite() const;

    std::shared_ptr<TensorImpl> impl() const { return impl_; }
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

private:
    std::shared_ptr<TensorImpl> impl_;
};

std::string shape_str(const std::vector<std::size_t>& shape);

// ---- operations -----------------------------------------------------------

/// 2-D cross-correlation, NCHW input, OIHW weight, optional bias.
/// H' = (H + 2*pad - kh) / stride + 1 (floor).
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              std::size_t stride, std::size_t padding);
Tensor conv2d(const Tensor& input, const Tensor& weight, std::size_t stride, std::size_t padding);

/// Batch norm over (B,H,W) per channel. Training mode normalizes with batch
/// statistics (biased variance) and replaces running_mean / running_var with
/// fresh EMA tensors; eval mode reads them. Requires B*H*W >= 2 in training.
Tensor batchnorm2d(const Tensor& x, const Tensor& scale, const Tensor& shift,
                   Tensor& running_mean, Tensor& running_var,
                   bool training, double momentum = 0.1, double eps = 1e-5);

Tensor relu(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b); // elementwise
Tensor scale(const Tensor& x, double c);
Tensor global_avg_pool(const Tensor& x);                                  // [B,C,H,W] -> [B,C]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);         // [B,D]x[D,K]+[K]
Tensor sum(const Tensor& x);                                              // -> scalar
Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count); // leading dim

/// Temperature softmax over the last dimension, max-subtracted.
Tensor softmax_t(const Tensor& z, double tau);

/// Mean over rows of -sum(target * log softmax_t(logits, tau)).
/// Targets are constants: no gradient flows into them.
Tensor cross_entropy_soft(const Tensor& logits, const Tensor& target, double tau);

/// Mean over rows of sum(p * log(p/q)); probabilities floored at 1e-12
/// before the logs.
Tensor kl_div(const Tensor& p, const Tensor& q);

Tensor sum_squared_diff(const Tensor& a, const Tensor& b);

/// Populates gradients of every requires-grad tensor reachable from `loss`.
/// Visits each record once, in reverse creation order.
void backward(const Tensor& loss);

constexpr double kProbFloor = 1e-12;

} // namespace lsskd
