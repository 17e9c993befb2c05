#include "lsskd/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <unordered_set>

namespace lsskd {

namespace {

std::atomic<std::uint64_t> g_seq{1};
DType g_default_dtype = DType::f32;

template <class T>
std::vector<T>& vec(TensorImpl& t);
template <>
std::vector<float>& vec<float>(TensorImpl& t) { return t.vf; }
template <>
std::vector<double>& vec<double>(TensorImpl& t) { return t.vd; }

template <class T>
const std::vector<T>& vec(const TensorImpl& t);
template <>
const std::vector<float>& vec<float>(const TensorImpl& t) { return t.vf; }
template <>
const std::vector<double>& vec<double>(const TensorImpl& t) { return t.vd; }

template <class T>
std::vector<T>& gvec(TensorImpl& t);
template <>
std::vector<float>& gvec<float>(TensorImpl& t) { return t.gf; }
template <>
std::vector<double>& gvec<double>(TensorImpl& t) { return t.gd; }

template <class T>
void ensure_grad(TensorImpl& t) {
    auto& g = gvec<T>(t);
    if (g.empty()) g.assign(t.numel(), T(0));
}

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::shared_ptr<TensorImpl> make_impl(std::vector<std::size_t> shape, DType dt) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->dtype = dt;
    std::size_t n = impl->numel();
    if (dt == DType::f32)
        impl->vf.assign(n, 0.0f);
    else
        impl->vd.assign(n, 0.0);
    impl->seq = g_seq.fetch_add(1);
    return impl;
}

// Runs f with a value of the tensor's scalar type as a tag.
template <class F>
decltype(auto) dispatch(DType dt, F&& f) {
    if (dt == DType::f32) return f(float(0));
    return f(double(0));
}

void attach_node(const Tensor& out, const char* op, std::initializer_list<Tensor> inputs,
                 std::function<void(TensorImpl&)> bw) {
    bool need = false;
    for (const auto& t : inputs)
        if (t.defined() && t.requires_grad()) need = true;
    if (!need) return;
    auto impl = out.impl();
    impl->requires_grad = true;
    auto node = std::make_shared<Node>();
    node->op = op;
    for (const auto& t : inputs)
        if (t.defined()) node->inputs.push_back(t.impl());
    node->backward = std::move(bw);
    impl->node = node;
}

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
    throw std::invalid_argument(std::string(op) + ": " + detail);
}

void check_same_dtype(const char* op, const Tensor& a, const Tensor& b) {
    if (a.dtype() != b.dtype()) shape_error(op, "mixed element precision");
}

template <class T>
void check_finite(const char* op, const std::vector<T>& v) {
    double acc = 0.0;
    for (T x : v) acc += std::fabs(static_cast<double>(x));
    if (!std::isfinite(acc))
        throw NumericError(std::string(op) + ": non-finite output");
}

// ---- small GEMM kernels (row-major) ----------------------------------------
// Accumulation over k runs sequentially inside one call, so results are
// bitwise reproducible.

// C[m,n] += A[m,k] * B[k,n]
template <class T>
void gemm_acc(const T* A, const T* B, T* C, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* a = A + i * k;
        T* c = C + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            T av = a[p];
            const T* b = B + p * n;
            for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

// C[m,n] += A[m,k] * B^T, B stored [n,k]
template <class T>
void gemm_nt_acc(const T* A, const T* B, T* C, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* a = A + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const T* b = B + j * k;
            T s = 0;
            for (std::size_t p = 0; p < k; ++p) s += a[p] * b[p];
            C[i * n + j] += s;
        }
    }
}

// C[m,n] += A^T * B, A stored [k,m], B stored [k,n]
template <class T>
void gemm_tn_acc(const T* A, const T* B, T* C, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        const T* a = A + p * m;
        const T* b = B + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            T av = a[i];
            T* c = C + i * n;
            for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

template <class T>
void im2col(const T* im, std::size_t C, std::size_t H, std::size_t W,
            std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad,
            std::size_t OH, std::size_t OW, T* col) {
    std::size_t idx = 0;
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t i = 0; i < kh; ++i) {
            for (std::size_t j = 0; j < kw; ++j) {
                for (std::size_t oh = 0; oh < OH; ++oh) {
                    std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + i) -
                                        static_cast<std::ptrdiff_t>(pad);
                    bool row_ok = ih >= 0 && ih < static_cast<std::ptrdiff_t>(H);
                    const T* imrow = row_ok ? im + (c * H + ih) * W : nullptr;
                    for (std::size_t ow = 0; ow < OW; ++ow) {
                        std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride + j) -
                                            static_cast<std::ptrdiff_t>(pad);
                        col[idx++] = (row_ok && iw >= 0 && iw < static_cast<std::ptrdiff_t>(W))
                                         ? imrow[iw]
                                         : T(0);
                    }
                }
            }
        }
    }
}

template <class T>
void col2im_acc(const T* col, std::size_t C, std::size_t H, std::size_t W,
                std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad,
                std::size_t OH, std::size_t OW, T* im) {
    std::size_t idx = 0;
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t i = 0; i < kh; ++i) {
            for (std::size_t j = 0; j < kw; ++j) {
                for (std::size_t oh = 0; oh < OH; ++oh) {
                    std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + i) -
                                        static_cast<std::ptrdiff_t>(pad);
                    bool row_ok = ih >= 0 && ih < static_cast<std::ptrdiff_t>(H);
                    T* imrow = row_ok ? im + (c * H + ih) * W : nullptr;
                    for (std::size_t ow = 0; ow < OW; ++ow) {
                        std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride + j) -
                                            static_cast<std::ptrdiff_t>(pad);
                        if (row_ok && iw >= 0 && iw < static_cast<std::ptrdiff_t>(W))
                            imrow[iw] += col[idx];
                        ++idx;
                    }
                }
            }
        }
    }
}

std::size_t last_dim(const Tensor& t) {
    if (t.rank() == 0) shape_error("softmax_t", "rank-0 tensor has no row axis");
    return t.shape().back();
}

double row_sum_double(const Tensor& t, std::size_t row, std::size_t k) {
    double s = 0.0;
    for (std::size_t i = 0; i < k; ++i) s += t.at(row * k + i);
    return s;
}

} // namespace

// ---- Tensor ----------------------------------------------------------------

std::size_t TensorImpl::numel() const { return shape_numel(shape); }

void set_default_dtype(DType dt) { g_default_dtype = dt; }
DType default_dtype() { return g_default_dtype; }

std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) { return zeros(std::move(shape), g_default_dtype); }
Tensor Tensor::zeros(std::vector<std::size_t> shape, DType dt) {
    return Tensor(make_impl(std::move(shape), dt));
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
    return full(std::move(shape), value, g_default_dtype);
}
Tensor Tensor::full(std::vector<std::size_t> shape, double value, DType dt) {
    Tensor t(make_impl(std::move(shape), dt));
    dispatch(dt, [&](auto tag) {
        using T = decltype(tag);
        auto& v = vec<T>(*t.impl());
        std::fill(v.begin(), v.end(), static_cast<T>(value));
    });
    return t;
}

Tensor Tensor::scalar(double value) { return full({}, value); }

Tensor Tensor::from_vector(std::vector<std::size_t> shape, const std::vector<double>& values) {
    return from_vector(std::move(shape), values, g_default_dtype);
}
Tensor Tensor::from_vector(std::vector<std::size_t> shape, const std::vector<double>& values, DType dt) {
    if (shape_numel(shape) != values.size())
        shape_error("from_vector", "element count does not match shape " + shape_str(shape));
    Tensor t(make_impl(std::move(shape), dt));
    dispatch(dt, [&](auto tag) {
        using T = decltype(tag);
        auto& v = vec<T>(*t.impl());
        for (std::size_t i = 0; i < values.size(); ++i) v[i] = static_cast<T>(values[i]);
    });
    return t;
}

Tensor Tensor::randn_scaled(std::vector<std::size_t> shape, std::size_t fan_in, Rng& rng) {
    return randn_scaled(std::move(shape), fan_in, rng, g_default_dtype);
}
Tensor Tensor::randn_scaled(std::vector<std::size_t> shape, std::size_t fan_in, Rng& rng, DType dt) {
    if (fan_in == 0) shape_error("randn_scaled", "fan_in must be positive");
    double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
    Tensor t(make_impl(std::move(shape), dt));
    dispatch(dt, [&](auto tag) {
        using T = decltype(tag);
        auto& v = vec<T>(*t.impl());
        for (auto& x : v) x = static_cast<T>(rng.next_normal() * std_dev);
    });
    return t;
}

const std::vector<std::size_t>& Tensor::shape() const {
    static const std::vector<std::size_t> empty;
    return impl_ ? impl_->shape : empty;
}

std::size_t Tensor::numel() const { return impl_ ? impl_->numel() : 0; }
DType Tensor::dtype() const { return impl_ ? impl_->dtype : DType::f32; }

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool v) {
    if (impl_) impl_->requires_grad = v;
    return *this;
}

double Tensor::item() const {
    if (numel() != 1) shape_error("item", "tensor has " + std::to_string(numel()) + " elements");
    return at(0);
}

double Tensor::at(std::size_t flat) const {
    return dispatch(dtype(), [&](auto tag) {
        using T = decltype(tag);
        return static_cast<double>(vec<T>(*impl_)[flat]);
    });
}

std::vector<double> Tensor::to_vector() const {
    std::vector<double> out(numel());
    dispatch(dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& v = vec<T>(*impl_);
        for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<double>(v[i]);
    });
    return out;
}

bool Tensor::has_grad() const { return impl_ && impl_->has_grad(); }

Tensor Tensor::grad() const {
    Tensor g(make_impl(shape(), dtype()));
    if (!has_grad()) return g;
    dispatch(dtype(), [&](auto tag) {
        using T = decltype(tag);
        vec<T>(*g.impl()) = gvec<T>(*impl_);
    });
    return g;
}

std::vector<double> Tensor::grad_vector() const {
    std::vector<double> out(numel(), 0.0);
    if (!has_grad()) return out;
    dispatch(dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& g = gvec<T>(*impl_);
        for (std::size_t i = 0; i < g.size(); ++i) out[i] = static_cast<double>(g[i]);
    });
    return out;
}

void Tensor::clear_grad() {
    if (!impl_) return;
    impl_->gf.clear();
    impl_->gd.clear();
}

Tensor Tensor::detach() const {
    Tensor t(make_impl(shape(), dtype()));
    dispatch(dtype(), [&](auto tag) {
        using T = decltype(tag);
        vec<T>(*t.impl()) = vec<T>(*impl_);
    });
    return t;
}

bool Tensor::all_finite() const {
    return dispatch(dtype(), [&](auto tag) {
        using T = decltype(tag);
        for (T x : vec<T>(*impl_))
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    });
}

// ---- conv2d ----------------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& weight, std::size_t stride, std::size_t padding) {
    return conv2d(input, weight, Tensor(), stride, padding);
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              std::size_t stride, std::size_t padding) {
    if (input.rank() != 4 || weight.rank() != 4)
        shape_error("conv2d", "expected NCHW input and OIHW weight, got " +
                                  shape_str(input.shape()) + " and " + shape_str(weight.shape()));
    check_same_dtype("conv2d", input, weight);
    const std::size_t B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const std::size_t O = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
    if (weight.dim(1) != C) shape_error("conv2d", "channel mismatch");
    if (stride < 1) shape_error("conv2d", "stride must be >= 1");
    if (H + 2 * padding < kh || W + 2 * padding < kw)
        shape_error("conv2d", "kernel does not fit padded input");
    if (bias.defined()) {
        check_same_dtype("conv2d", input, bias);
        if (bias.rank() != 1 || bias.dim(0) != O) shape_error("conv2d", "bias shape mismatch");
    }
    const std::size_t OH = (H + 2 * padding - kh) / stride + 1;
    const std::size_t OW = (W + 2 * padding - kw) / stride + 1;
    const std::size_t K = C * kh * kw, P = OH * OW;

    Tensor out(make_impl({B, O, OH, OW}, input.dtype()));
    dispatch(input.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& x = vec<T>(*input.impl());
        const auto& w = vec<T>(*weight.impl());
        auto& y = vec<T>(*out.impl());
        std::vector<T> col(K * P);
        for (std::size_t b = 0; b < B; ++b) {
            im2col(x.data() + b * C * H * W, C, H, W, kh, kw, stride, padding, OH, OW, col.data());
            gemm_acc(w.data(), col.data(), y.data() + b * O * P, O, K, P);
        }
        if (bias.defined()) {
            const auto& bv = vec<T>(*bias.impl());
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t o = 0; o < O; ++o) {
                    T* row = y.data() + (b * O + o) * P;
                    for (std::size_t i = 0; i < P; ++i) row[i] += bv[o];
                }
        }
        check_finite<T>("conv2d", y);
    });

    attach_node(out, "conv2d", {input, weight, bias},
                [=](TensorImpl& o) {
                    dispatch(o.dtype, [&](auto tag) {
                        using T = decltype(tag);
                        const auto& g = gvec<T>(o);
                        const auto& x = vec<T>(*input.impl());
                        const auto& w = vec<T>(*weight.impl());
                        std::vector<T> col(K * P);
                        bool need_x = input.requires_grad();
                        bool need_w = weight.requires_grad();
                        bool need_b = bias.defined() && bias.requires_grad();
                        if (need_x) ensure_grad<T>(*input.impl());
                        if (need_w) ensure_grad<T>(*weight.impl());
                        if (need_b) ensure_grad<T>(*bias.impl());
                        std::vector<T> dcol(need_x ? K * P : 0);
                        for (std::size_t b = 0; b < B; ++b) {
                            const T* gb = g.data() + b * O * P;
                            if (need_w || need_x)
                                im2col(x.data() + b * C * H * W, C, H, W, kh, kw, stride,
                                       padding, OH, OW, col.data());
                            if (need_w)
                                gemm_nt_acc(gb, col.data(), gvec<T>(*weight.impl()).data(), O, P, K);
                            if (need_x) {
                                std::fill(dcol.begin(), dcol.end(), T(0));
                                gemm_tn_acc(w.data(), gb, dcol.data(), K, O, P);
                                col2im_acc(dcol.data(), C, H, W, kh, kw, stride, padding, OH, OW,
                                           gvec<T>(*input.impl()).data() + b * C * H * W);
                            }
                            if (need_b) {
                                auto& gb2 = gvec<T>(*bias.impl());
                                for (std::size_t oc = 0; oc < O; ++oc) {
                                    T s = 0;
                                    const T* row = gb + oc * P;
                                    for (std::size_t i = 0; i < P; ++i) s += row[i];
                                    gb2[oc] += s;
                                }
                            }
                        }
                    });
                });
    return out;
}

// ---- batchnorm2d -----------------------------------------------------------

Tensor batchnorm2d(const Tensor& x, const Tensor& scale, const Tensor& shift,
                   Tensor& running_mean, Tensor& running_var,
                   bool training, double momentum, double eps) {
    if (x.rank() != 4) shape_error("batchnorm2d", "expected NCHW input");
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (scale.numel() != C || shift.numel() != C || running_mean.numel() != C ||
        running_var.numel() != C)
        shape_error("batchnorm2d", "per-channel parameter shape mismatch");
    check_same_dtype("batchnorm2d", x, scale);
    check_same_dtype("batchnorm2d", x, shift);
    const std::size_t n = B * H * W;
    if (training && n < 2)
        shape_error("batchnorm2d", "training mode needs at least 2 values per channel");

    auto mean = std::make_shared<std::vector<double>>(C, 0.0);
    auto invstd = std::make_shared<std::vector<double>>(C, 0.0);

    if (training) {
        std::vector<double> new_rm(C), new_rv(C);
        dispatch(x.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const auto& xv = vec<T>(*x.impl());
            for (std::size_t c = 0; c < C; ++c) {
                double s = 0.0;
                for (std::size_t b = 0; b < B; ++b) {
                    const T* row = xv.data() + (b * C + c) * H * W;
                    for (std::size_t i = 0; i < H * W; ++i) s += static_cast<double>(row[i]);
                }
                double mu = s / static_cast<double>(n);
                double v = 0.0;
                for (std::size_t b = 0; b < B; ++b) {
                    const T* row = xv.data() + (b * C + c) * H * W;
                    for (std::size_t i = 0; i < H * W; ++i) {
                        double d = static_cast<double>(row[i]) - mu;
                        v += d * d;
                    }
                }
                double var = v / static_cast<double>(n);
                (*mean)[c] = mu;
                (*invstd)[c] = 1.0 / std::sqrt(var + eps);
                // running var keeps the unbiased estimate
                double unbiased = var * static_cast<double>(n) / static_cast<double>(n - 1);
                new_rm[c] = (1.0 - momentum) * running_mean.at(c) + momentum * mu;
                new_rv[c] = (1.0 - momentum) * running_var.at(c) + momentum * unbiased;
            }
        });
        running_mean = Tensor::from_vector({C}, new_rm, x.dtype());
        running_var = Tensor::from_vector({C}, new_rv, x.dtype());
    } else {
        for (std::size_t c = 0; c < C; ++c) {
            (*mean)[c] = running_mean.at(c);
            (*invstd)[c] = 1.0 / std::sqrt(running_var.at(c) + eps);
        }
    }

    Tensor out(make_impl(x.shape(), x.dtype()));
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& xv = vec<T>(*x.impl());
        const auto& sv = vec<T>(*scale.impl());
        const auto& bv = vec<T>(*shift.impl());
        auto& y = vec<T>(*out.impl());
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c) {
                T mu = static_cast<T>((*mean)[c]);
                T is = static_cast<T>((*invstd)[c]);
                T ga = sv[c], be = bv[c];
                const T* xr = xv.data() + (b * C + c) * H * W;
                T* yr = y.data() + (b * C + c) * H * W;
                for (std::size_t i = 0; i < H * W; ++i) yr[i] = ga * (xr[i] - mu) * is + be;
            }
        check_finite<T>("batchnorm2d", y);
    });

    attach_node(out, "batchnorm2d", {x, scale, shift},
                [=](TensorImpl& o) {
                    dispatch(o.dtype, [&](auto tag) {
                        using T = decltype(tag);
                        const auto& g = gvec<T>(o);
                        const auto& xv = vec<T>(*x.impl());
                        const auto& sv = vec<T>(*scale.impl());
                        bool need_x = x.requires_grad();
                        bool need_s = scale.requires_grad();
                        bool need_b = shift.requires_grad();
                        if (need_x) ensure_grad<T>(*x.impl());
                        if (need_s) ensure_grad<T>(*scale.impl());
                        if (need_b) ensure_grad<T>(*shift.impl());
                        const double dn = static_cast<double>(n);
                        for (std::size_t c = 0; c < C; ++c) {
                            double mu = (*mean)[c], is = (*invstd)[c];
                            double sum_g = 0.0, sum_gx = 0.0;
                            for (std::size_t b = 0; b < B; ++b) {
                                const T* gr = g.data() + (b * C + c) * H * W;
                                const T* xr = xv.data() + (b * C + c) * H * W;
                                for (std::size_t i = 0; i < H * W; ++i) {
                                    double xh = (static_cast<double>(xr[i]) - mu) * is;
                                    sum_g += static_cast<double>(gr[i]);
                                    sum_gx += static_cast<double>(gr[i]) * xh;
                                }
                            }
                            if (need_s) gvec<T>(*scale.impl())[c] += static_cast<T>(sum_gx);
                            if (need_b) gvec<T>(*shift.impl())[c] += static_cast<T>(sum_g);
                            if (need_x) {
                                auto& gx = gvec<T>(*x.impl());
                                double ga = static_cast<double>(sv[c]);
                                for (std::size_t b = 0; b < B; ++b) {
                                    const T* gr = g.data() + (b * C + c) * H * W;
                                    const T* xr = xv.data() + (b * C + c) * H * W;
                                    T* dx = gx.data() + (b * C + c) * H * W;
                                    for (std::size_t i = 0; i < H * W; ++i) {
                                        double gi = static_cast<double>(gr[i]);
                                        if (training) {
                                            double xh = (static_cast<double>(xr[i]) - mu) * is;
                                            dx[i] += static_cast<T>(
                                                ga * is * (gi - sum_g / dn - xh * sum_gx / dn));
                                        } else {
                                            dx[i] += static_cast<T>(ga * is * gi);
                                        }
                                    }
                                }
                            }
                        }
                    });
                });
    return out;
}

// ---- elementwise and reductions ---------------------------------------------

Tensor relu(const Tensor& x) {
    Tensor out(make_impl(x.shape(), x.dtype()));
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& xv = vec<T>(*x.impl());
        auto& y = vec<T>(*out.impl());
        for (std::size_t i = 0; i < xv.size(); ++i) y[i] = xv[i] > T(0) ? xv[i] : T(0);
    });
    attach_node(out, "relu", {x}, [=](TensorImpl& o) {
        dispatch(o.dtype, [&](auto tag) {
            using T = decltype(tag);
            const auto& g = gvec<T>(o);
            const auto& xv = vec<T>(*x.impl());
            ensure_grad<T>(*x.impl());
            auto& gx = gvec<T>(*x.impl());
            for (std::size_t i = 0; i < xv.size(); ++i)
                if (xv[i] > T(0)) gx[i] += g[i];
        });
    });
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        shape_error("add", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    check_same_dtype("add", a, b);
    Tensor out(make_impl(a.shape(), a.dtype()));
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& av = vec<T>(*a.impl());
        const auto& bv = vec<T>(*b.impl());
        auto& y = vec<T>(*out.impl());
        for (std::size_t i = 0; i < av.size(); ++i) y[i] = av[i] + bv[i];
    });
    attach_node(out, "add", {a, b}, [=](TensorImpl& o) {
        dispatch(o.dtype, [&](auto tag) {
            using T = decltype(tag);
            const auto& g = gvec<T>(o);
            for (const Tensor* t : {&a, &b}) {
                if (!t->requires_grad()) continue;
                ensure_grad<T>(*t->impl());
                auto& gt = gvec<T>(*t->impl());
                for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
            }
        });
    });
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        shape_error("mul", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    check_same_dtype("mul", a, b);
    Tensor out(make_impl(a.shape(), a.dtype()));
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& av = vec<T>(*a.impl());
        const auto& bv = vec<T>(*b.impl());
        auto& y = vec<T>(*out.impl());
        for (std::size_t i = 0; i < av.size(); ++i) y[i] = av[i] * bv[i];
    });
    attach_node(out, "mul", {a, b}, [=](TensorImpl& o) {
        dispatch(o.dtype, [&](auto tag) {
            using T = decltype(tag);
            const auto& g = gvec<T>(o);
            const auto& av = vec<T>(*a.impl());
            const auto& bv = vec<T>(*b.impl());
            if (a.requires_grad()) {
                ensure_grad<T>(*a.impl());
                auto& ga = gvec<T>(*a.impl());
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
            }
            if (b.requires_grad()) {
                ensure_grad<T>(*b.impl());
                auto& gb = gvec<T>(*b.impl());
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
            }
        });
    });
    return out;
}

Tensor scale(const Tensor& x, double c) {
    Tensor out(make_impl(x.shape(), x.dtype()));
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& xv = vec<T>(*x.impl());
        auto& y = vec<T>(*out.impl());
        T cc = static_cast<T>(c);
        for (std::size_t i = 0; i < xv.size(); ++i) y[i] = cc * xv[i];
    });
    attach_node(out, "scale", {x}, [=](TensorImpl& o) {
        dispatch(o.dtype, [&](auto tag) {
            using T = decltype(tag);
            const auto& g = gvec<T>(o);
            ensure_grad<T>(*x.impl());
            auto& gx = gvec<T>(*x.impl());
            T cc = static_cast<T>(c);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += cc * g[i];
        });
    });
    return out;
}

Tensor global_avg_pool(const Tensor& x) {
    if (x.rank() != 4) shape_error("global_avg_pool", "expected NCHW input");
    const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    Tensor out(make_impl({B, C}, x.dtype()));
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& xv = vec<T>(*x.impl());
        auto& y = vec<T>(*out.impl());
        for (std::size_t bc = 0; bc < B * C; ++bc) {
            double s = 0.0;
            const T* row = xv.data() + bc * HW;
            for (std::size_t i = 0; i < HW; ++i) s += static_cast<double>(row[i]);
            y[bc] = static_cast<T>(s / static_cast<double>(HW));
        }
    });
    attach_node(out, "global_avg_pool", {x}, [=](TensorImpl& o) {
        dispatch(o.dtype, [&](auto tag) {
            using T = decltype(tag);
            const auto& g = gvec<T>(o);
            ensure_grad<T>(*x.impl());
            auto& gx = gvec<T>(*x.impl());
            for (std::size_t bc = 0; bc < B * C; ++bc) {
                T gi = static_cast<T>(static_cast<double>(g[bc]) / static_cast<double>(HW));
                T* row = gx.data() + bc * HW;
                for (std::size_t i = 0; i < HW; ++i) row[i] += gi;
            }
        });
    });
    return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.rank() != 2 || w.rank() != 2) shape_error("linear", "expected [B,D] x [D,K]");
    const std::size_t B = x.dim(0), D = x.dim(1), K = w.dim(1);
    if (w.dim(0) != D) shape_error("linear", "weight rows must equal input features");
    check_same_dtype("linear", x, w);
    if (b.defined()) {
        check_same_dtype("linear", x, b);
        if (b.numel() != K) shape_error("linear", "bias length mismatch");
    }
    Tensor out(make_impl({B, K}, x.dtype()));
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& xv = vec<T>(*x.impl());
        const auto& wv = vec<T>(*w.impl());
        auto& y = vec<T>(*out.impl());
        gemm_acc(xv.data(), wv.data(), y.data(), B, D, K);
        if (b.defined()) {
            const auto& bv = vec<T>(*b.impl());
            for (std::size_t i = 0; i < B; ++i)
                for (std::size_t j = 0; j < K; ++j) y[i * K + j] += bv[j];
        }
        check_finite<T>("linear", y);
    });
    attach_node(out, "linear", {x, w, b}, [=](TensorImpl& o) {
        dispatch(o.dtype, [&](auto tag) {
            using T = decltype(tag);
            const auto& g = gvec<T>(o);
            const auto& xv = vec<T>(*x.impl());
            const auto& wv = vec<T>(*w.impl());
            if (x.requires_grad()) {
                ensure_grad<T>(*x.impl());
                gemm_nt_acc(g.data(), wv.data(), gvec<T>(*x.impl()).data(), B, K, D);
            }
            if (w.requires_grad()) {
                ensure_grad<T>(*w.impl());
                gemm_tn_acc(xv.data(), g.data(), gvec<T>(*w.impl()).data(), D, B, K);
            }
            if (b.defined() && b.requires_grad()) {
                ensure_grad<T>(*b.impl());
                auto& gb = gvec<T>(*b.impl());
                for (std::size_t i = 0; i < B; ++i)
                    for (std::size_t j = 0; j < K; ++j) gb[j] += g[i * K + j];
            }
        });
    });
    return out;
}

Tensor sum(const Tensor& x) {
    Tensor out(make_impl({}, x.dtype()));
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& xv = vec<T>(*x.impl());
        double s = 0.0;
        for (T v : xv) s += static_cast<double>(v);
        vec<T>(*out.impl())[0] = static_cast<T>(s);
    });
    attach_node(out, "sum", {x}, [=](TensorImpl& o) {
        dispatch(o.dtype, [&](auto tag) {
            using T = decltype(tag);
            T g = gvec<T>(o)[0];
            ensure_grad<T>(*x.impl());
            auto& gx = gvec<T>(*x.impl());
            for (auto& v : gx) v += g;
        });
    });
    return out;
}

Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count) {
    if (x.rank() < 1) shape_error("slice_rows", "rank-0 input");
    const std::size_t R = x.dim(0);
    if (start + count > R) shape_error("slice_rows", "row range out of bounds");
    const std::size_t row = x.numel() / R;
    std::vector<std::size_t> shape = x.shape();
    shape[0] = count;
    Tensor out(make_impl(std::move(shape), x.dtype()));
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& xv = vec<T>(*x.impl());
        auto& y = vec<T>(*out.impl());
        std::copy(xv.begin() + start * row, xv.begin() + (start + count) * row, y.begin());
    });
    attach_node(out, "slice_rows", {x}, [=](TensorImpl& o) {
        dispatch(o.dtype, [&](auto tag) {
            using T = decltype(tag);
            const auto& g = gvec<T>(o);
            ensure_grad<T>(*x.impl());
            auto& gx = gvec<T>(*x.impl());
            for (std::size_t i = 0; i < count * row; ++i) gx[start * row + i] += g[i];
        });
    });
    return out;
}

// ---- softmax / losses --------------------------------------------------------

Tensor softmax_t(const Tensor& z, double tau) {
    if (tau <= 0.0) throw std::invalid_argument("softmax_t: tau must be positive");
    const std::size_t K = last_dim(z);
    const std::size_t rows = z.numel() / K;
    Tensor out(make_impl(z.shape(), z.dtype()));
    dispatch(z.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& zv = vec<T>(*z.impl());
        auto& p = vec<T>(*out.impl());
        for (std::size_t r = 0; r < rows; ++r) {
            const T* zr = zv.data() + r * K;
            T* pr = p.data() + r * K;
            double m = static_cast<double>(zr[0]);
            for (std::size_t k = 1; k < K; ++k) m = std::max(m, static_cast<double>(zr[k]));
            double s = 0.0;
            for (std::size_t k = 0; k < K; ++k) {
                double e = std::exp((static_cast<double>(zr[k]) - m) / tau);
                pr[k] = static_cast<T>(e);
                s += e;
            }
            for (std::size_t k = 0; k < K; ++k)
                pr[k] = static_cast<T>(static_cast<double>(pr[k]) / s);
        }
    });
    attach_node(out, "softmax_t", {z}, [=](TensorImpl& o) {
        dispatch(o.dtype, [&](auto tag) {
            using T = decltype(tag);
            const auto& g = gvec<T>(o);
            const auto& p = vec<T>(o);
            ensure_grad<T>(*z.impl());
            auto& gz = gvec<T>(*z.impl());
            for (std::size_t r = 0; r < rows; ++r) {
                const T* pr = p.data() + r * K;
                const T* gr = g.data() + r * K;
                double dot = 0.0;
                for (std::size_t k = 0; k < K; ++k)
                    dot += static_cast<double>(gr[k]) * static_cast<double>(pr[k]);
                for (std::size_t k = 0; k < K; ++k)
                    gz[r * K + k] += static_cast<T>(static_cast<double>(pr[k]) *
                                                    (static_cast<double>(gr[k]) - dot) / tau);
            }
        });
    });
    return out;
}

Tensor cross_entropy_soft(const Tensor& logits, const Tensor& target, double tau) {
    if (tau <= 0.0) throw std::invalid_argument("cross_entropy_soft: tau must be positive");
    if (logits.shape() != target.shape())
        shape_error("cross_entropy_soft", "logits/target shape mismatch");
    check_same_dtype("cross_entropy_soft", logits, target);
    const std::size_t K = last_dim(logits);
    const std::size_t rows = logits.numel() / K;
    for (std::size_t r = 0; r < rows; ++r) {
        double s = row_sum_double(target, r, K);
        if (std::fabs(s - 1.0) > 1e-6)
            throw std::invalid_argument("cross_entropy_soft: non-normalized target row");
    }
    Tensor out(make_impl({}, logits.dtype()));
    dispatch(logits.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& zv = vec<T>(*logits.impl());
        const auto& tv = vec<T>(*target.impl());
        double total = 0.0;
        for (std::size_t r = 0; r < rows; ++r) {
            const T* zr = zv.data() + r * K;
            const T* tr = tv.data() + r * K;
            double m = static_cast<double>(zr[0]);
            for (std::size_t k = 1; k < K; ++k) m = std::max(m, static_cast<double>(zr[k]));
            double s = 0.0;
            for (std::size_t k = 0; k < K; ++k)
                s += std::exp((static_cast<double>(zr[k]) - m) / tau);
            double lse = m / tau + std::log(s);
            double row_loss = 0.0;
            for (std::size_t k = 0; k < K; ++k)
                row_loss += static_cast<double>(tr[k]) * (lse - static_cast<double>(zr[k]) / tau);
            total += row_loss;
        }
        vec<T>(*out.impl())[0] = static_cast<T>(total / static_cast<double>(rows));
    });
    // gradient reaches the logits only; targets are constants
    attach_node(out, "cross_entropy_soft", {logits}, [=](TensorImpl& o) {
        dispatch(o.dtype, [&](auto tag) {
            using T = decltype(tag);
            double g = static_cast<double>(gvec<T>(o)[0]);
            const auto& zv = vec<T>(*logits.impl());
            const auto& tv = vec<T>(*target.impl());
            ensure_grad<T>(*logits.impl());
            auto& gz = gvec<T>(*logits.impl());
            const double c = g / (tau * static_cast<double>(rows));
            for (std::size_t r = 0; r < rows; ++r) {
                const T* zr = zv.data() + r * K;
                double m = static_cast<double>(zr[0]);
                for (std::size_t k = 1; k < K; ++k) m = std::max(m, static_cast<double>(zr[k]));
                double s = 0.0;
                for (std::size_t k = 0; k < K; ++k)
                    s += std::exp((static_cast<double>(zr[k]) - m) / tau);
                for (std::size_t k = 0; k < K; ++k) {
                    double p = std::exp((static_cast<double>(zr[k]) - m) / tau) / s;
                    gz[r * K + k] += static_cast<T>(c * (p - static_cast<double>(tv[r * K + k])));
                }
            }
        });
    });
    return out;
}

Tensor kl_div(const Tensor& p, const Tensor& q) {
    if (p.shape() != q.shape()) shape_error("kl_div", "shape mismatch");
    check_same_dtype("kl_div", p, q);
    const std::size_t K = last_dim(p);
    const std::size_t rows = p.numel() / K;
    for (std::size_t r = 0; r < rows; ++r) {
        if (std::fabs(row_sum_double(p, r, K) - 1.0) > 1e-6 ||
            std::fabs(row_sum_double(q, r, K) - 1.0) > 1e-6)
            throw std::invalid_argument("kl_div: rows must be normalized distributions");
    }
    Tensor out(make_impl({}, p.dtype()));
    dispatch(p.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& pv = vec<T>(*p.impl());
        const auto& qv = vec<T>(*q.impl());
        double total = 0.0;
        for (std::size_t i = 0; i < pv.size(); ++i) {
            double pi = static_cast<double>(pv[i]);
            double pf = std::max(pi, kProbFloor);
            double qf = std::max(static_cast<double>(qv[i]), kProbFloor);
            total += pi * (std::log(pf) - std::log(qf));
        }
        vec<T>(*out.impl())[0] = static_cast<T>(total / static_cast<double>(rows));
    });
    attach_node(out, "kl_div", {p, q}, [=](TensorImpl& o) {
        dispatch(o.dtype, [&](auto tag) {
            using T = decltype(tag);
            double g = static_cast<double>(gvec<T>(o)[0]) / static_cast<double>(rows);
            const auto& pv = vec<T>(*p.impl());
            const auto& qv = vec<T>(*q.impl());
            if (p.requires_grad()) {
                ensure_grad<T>(*p.impl());
                auto& gp = gvec<T>(*p.impl());
                for (std::size_t i = 0; i < pv.size(); ++i) {
                    double pi = static_cast<double>(pv[i]);
                    double pf = std::max(pi, kProbFloor);
                    double qf = std::max(static_cast<double>(qv[i]), kProbFloor);
                    double d = std::log(pf) - std::log(qf) + (pi >= kProbFloor ? 1.0 : 0.0);
                    gp[i] += static_cast<T>(g * d);
                }
            }
            if (q.requires_grad()) {
                ensure_grad<T>(*q.impl());
                auto& gq = gvec<T>(*q.impl());
                for (std::size_t i = 0; i < pv.size(); ++i) {
                    double pi = static_cast<double>(pv[i]);
                    double qi = static_cast<double>(qv[i]);
                    double qf = std::max(qi, kProbFloor);
                    if (qi >= kProbFloor) gq[i] += static_cast<T>(-g * pi / qf);
                }
            }
        });
    });
    return out;
}

Tensor sum_squared_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        shape_error("sum_squared_diff", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    check_same_dtype("sum_squared_diff", a, b);
    Tensor out(make_impl({}, a.dtype()));
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& av = vec<T>(*a.impl());
        const auto& bv = vec<T>(*b.impl());
        double s = 0.0;
        for (std::size_t i = 0; i < av.size(); ++i) {
            double d = static_cast<double>(av[i]) - static_cast<double>(bv[i]);
            s += d * d;
        }
        vec<T>(*out.impl())[0] = static_cast<T>(s);
    });
    attach_node(out, "sum_squared_diff", {a, b}, [=](TensorImpl& o) {
        dispatch(o.dtype, [&](auto tag) {
            using T = decltype(tag);
            T g = gvec<T>(o)[0];
            const auto& av = vec<T>(*a.impl());
            const auto& bv = vec<T>(*b.impl());
            if (a.requires_grad()) {
                ensure_grad<T>(*a.impl());
                auto& ga = gvec<T>(*a.impl());
                for (std::size_t i = 0; i < av.size(); ++i)
                    ga[i] += g * T(2) * (av[i] - bv[i]);
            }
            if (b.requires_grad()) {
                ensure_grad<T>(*b.impl());
                auto& gb = gvec<T>(*b.impl());
                for (std::size_t i = 0; i < av.size(); ++i)
                    gb[i] -= g * T(2) * (av[i] - bv[i]);
            }
        });
    });
    return out;
}

// ---- backward driver ---------------------------------------------------------

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw std::invalid_argument("backward: root must be a defined scalar");
    if (!std::isfinite(loss.item()))
        throw NumericError("backward: non-finite loss value");

    auto root = loss.impl();
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> seen;
    std::vector<std::shared_ptr<TensorImpl>> stack{root};
    std::vector<std::shared_ptr<TensorImpl>> keep; // keeps impls alive during the pass
    seen.insert(root.get());
    while (!stack.empty()) {
        auto cur = stack.back();
        stack.pop_back();
        keep.push_back(cur);
        order.push_back(cur.get());
        if (!cur->node) continue;
        for (auto& in : cur->node->inputs) {
            if (in->seq >= cur->seq)
                throw std::invalid_argument("backward: cycle in record graph");
            if (seen.insert(in.get()).second) stack.push_back(in);
        }
    }
    std::sort(order.begin(), order.end(),
              [](const TensorImpl* a, const TensorImpl* b) { return a->seq > b->seq; });

    dispatch(root->dtype, [&](auto tag) {
        using T = decltype(tag);
        ensure_grad<T>(*root);
        gvec<T>(*root)[0] = T(1);
    });

    for (TensorImpl* t : order) {
        if (!t->node || !t->has_grad()) continue;
        t->node->backward(*t);
    }
}

} // namespace lsskd
