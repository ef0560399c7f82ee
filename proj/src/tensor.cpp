#include "bgadapt/tensor.hpp"

#include <algorithm>
#include <cstring>
#include <functional>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "bgadapt/errors.hpp"

namespace bgadapt {

namespace {

thread_local bool g_grad_enabled = true;

// Shape of a binary elementwise result; scalars broadcast.
Shape broadcast_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return a.shape();
  if (b.numel() == 1) return a.shape();
  if (a.numel() == 1) return b.shape();
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                   shape_to_string(b.shape()));
}

// Unary op whose derivative is a function of (input, output).
template <typename Fwd, typename Deriv>
Tensor unary_op(const Tensor& a, const char* op, Fwd&& fwd, Deriv&& deriv) {
  const auto in = a.values();
  std::vector<float> out(in.size());
  const float* __restrict src = in.data();
  float* __restrict dst = out.data();
  for (std::size_t i = 0; i < in.size(); ++i) dst[i] = fwd(src[i]);
  auto ai = a.impl();
  return make_result(a.shape(), std::move(out), op, {a}, [ai, deriv](const TensorImpl& o) {
    if (!ai->requires_grad) return;
    float* __restrict g = ai->grad_buffer();
    const float* __restrict go = o.grad.data();
    const float* __restrict x = ai->data.data();
    const float* __restrict y = o.data.data();
    for (std::size_t i = 0; i < o.data.size(); ++i) g[i] += go[i] * deriv(x[i], y[i]);
  });
}

// Sum of a[i] (times m[i] when given) in double, as four interleaved partial
// sums combined at the end.
double reduce_sum(const float* a, const float* m, std::size_t n) {
  double acc[4] = {0.0, 0.0, 0.0, 0.0};
  std::size_t i = 0;
  if (m) {
    for (; i + 4 <= n; i += 4) {
      for (int j = 0; j < 4; ++j) acc[j] += static_cast<double>(a[i + j]) * m[i + j];
    }
    for (; i < n; ++i) acc[0] += static_cast<double>(a[i]) * m[i];
  } else {
    for (; i + 4 <= n; i += 4) {
      for (int j = 0; j < 4; ++j) acc[j] += a[i + j];
    }
    for (; i < n; ++i) acc[0] += a[i];
  }
  return (acc[0] + acc[1]) + (acc[2] + acc[3]);
}

}  // namespace

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative dimension in " + shape_to_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

float* TensorImpl::grad_buffer() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
  return grad.data();
}

void TensorImpl::accumulate_grad(std::size_t i, float g) { grad_buffer()[i] += g; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0f, requires_grad); }

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<float>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<float> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor of shape " + shape_to_string(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float value, bool requires_grad) { return from({}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return impl_->shape; }

int Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_to_string(shape()));
  }
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }

std::span<const float> Tensor::values() const { return impl_->data; }
std::span<float> Tensor::mutable_values() { return impl_->data; }

float Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_to_string(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (!is_leaf()) throw ContractError("set_requires_grad on a non-leaf tensor");
  impl_->requires_grad = on;
}

bool Tensor::is_leaf() const { return impl_->node == nullptr; }

bool Tensor::has_grad() const { return impl_->grad.size() == impl_->data.size() && !impl_->data.empty(); }

std::span<const float> Tensor::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return impl_->grad;
}

std::span<float> Tensor::mutable_grad() { return {impl_->grad_buffer(), impl_->data.size()}; }

void Tensor::zero_grad() {
  if (has_grad()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

Tensor Tensor::clone() const { return from(shape(), impl_->data, false); }

bool grad_mode_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor make_result(Shape shape, std::vector<float> values, const char* op, std::vector<Tensor> inputs,
                   std::function<void(const TensorImpl& out)> backward_fn) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  bool tracked = false;
  if (g_grad_enabled) {
    for (const auto& t : inputs) tracked = tracked || t.requires_grad();
  }
  if (tracked) {
    auto node = std::make_shared<GradNode>();
    node->op = op;
    for (const auto& t : inputs) node->inputs.push_back(t.impl());
    node->backward = std::move(backward_fn);
    impl->node = std::move(node);
    impl->requires_grad = true;
  }
  return Tensor(std::move(impl));
}

// --- elementwise ---------------------------------------------------------

namespace {

enum class BinaryKind { kAdd, kSub, kMul };

template <typename F>
void map_binary(const float* __restrict a, const float* __restrict b, float* __restrict out, std::size_t n, bool a_scalar,
                bool b_scalar, F f) {
  if (a_scalar) {
    const float x = a[0];
    for (std::size_t i = 0; i < n; ++i) out[i] = f(x, b[i]);
  } else if (b_scalar) {
    const float y = b[0];
    for (std::size_t i = 0; i < n; ++i) out[i] = f(a[i], y);
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(a[i], b[i]);
  }
}

// Accumulates sign * gout (times `other` for products) into the gradient of
// one operand; a broadcast scalar operand receives the double-precision sum.
void binary_grad(TensorImpl& target, bool target_scalar, const float* __restrict gout, const float* other,
                 bool other_scalar, float sign, std::size_t n) {
  float* __restrict g = target.grad_buffer();
  if (target_scalar) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      float d = sign * gout[i];
      if (other) d *= other[other_scalar ? 0 : i];
      acc += d;
    }
    g[0] += static_cast<float>(acc);
  } else if (!other) {
    for (std::size_t i = 0; i < n; ++i) g[i] += sign * gout[i];
  } else if (other_scalar) {
    const float y = other[0];
    for (std::size_t i = 0; i < n; ++i) g[i] += sign * gout[i] * y;
  } else {
    for (std::size_t i = 0; i < n; ++i) g[i] += sign * gout[i] * other[i];
  }
}

Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind, const char* op) {
  const Shape shape = broadcast_shape(a, b, op);
  const std::size_t n = shape_numel(shape);
  const auto av = a.values();
  const auto bv = b.values();
  const bool a_scalar = av.size() == 1 && n != 1;
  const bool b_scalar = bv.size() == 1 && n != 1;
  std::vector<float> out(n);
  switch (kind) {
    case BinaryKind::kAdd: map_binary(av.data(), bv.data(), out.data(), n, a_scalar, b_scalar, std::plus<float>()); break;
    case BinaryKind::kSub: map_binary(av.data(), bv.data(), out.data(), n, a_scalar, b_scalar, std::minus<float>()); break;
    case BinaryKind::kMul: map_binary(av.data(), bv.data(), out.data(), n, a_scalar, b_scalar, std::multiplies<float>()); break;
  }
  auto ai = a.impl();
  auto bi = b.impl();
  return make_result(shape, std::move(out), op, {a, b}, [ai, bi, kind, a_scalar, b_scalar](const TensorImpl& o) {
    const std::size_t n = o.data.size();
    const bool product = kind == BinaryKind::kMul;
    if (ai->requires_grad) {
      binary_grad(*ai, a_scalar, o.grad.data(), product ? bi->data.data() : nullptr, b_scalar, 1.0f, n);
    }
    if (bi->requires_grad) {
      const float sign = kind == BinaryKind::kSub ? -1.0f : 1.0f;
      binary_grad(*bi, b_scalar, o.grad.data(), product ? ai->data.data() : nullptr, a_scalar, sign, n);
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kAdd, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kSub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kMul, "mul"); }

Tensor neg(const Tensor& a) {
  return unary_op(a, "neg", [](float x) { return -x; }, [](float, float) { return -1.0f; });
}

Tensor square(const Tensor& a) {
  return unary_op(a, "square", [](float x) { return x * x; }, [](float x, float) { return 2.0f * x; });
}

Tensor add_scalar(const Tensor& a, float s) {
  return unary_op(a, "add_scalar", [s](float x) { return x + s; }, [](float, float) { return 1.0f; });
}

Tensor mul_scalar(const Tensor& a, float s) {
  return unary_op(a, "mul_scalar", [s](float x) { return x * s; }, [s](float, float) { return s; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      a, "sigmoid",
      [](float x) {
        const double xd = x;
        if (xd >= 0) return static_cast<float>(1.0 / (1.0 + std::exp(-xd)));
        const double e = std::exp(xd);
        return static_cast<float>(e / (1.0 + e));
      },
      [](float, float y) { return y * (1.0f - y); });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      a, "relu", [](float x) { return x > 0.0f ? x : 0.0f; }, [](float x, float) { return x > 0.0f ? 1.0f : 0.0f; });
}

Tensor clamp_nonpositive(const Tensor& a) {
  return unary_op(
      a, "clamp_nonpositive", [](float x) { return x < 0.0f ? x : 0.0f; },
      [](float x, float) { return x < 0.0f ? 1.0f : 0.0f; });
}

Tensor hinge(const Tensor& a) {
  return unary_op(
      a, "hinge", [](float x) { return x > 0.0f ? x : 0.0f; }, [](float x, float) { return x > 0.0f ? 1.0f : 0.0f; });
}

Tensor log(const Tensor& a, LogGuard guard) {
  const auto in = a.values();
  if (guard == LogGuard::kNone) {
    for (std::size_t i = 0; i < in.size(); ++i) {
      if (!(in[i] > 0.0f)) {
        throw DomainError("log: non-positive input " + std::to_string(in[i]) + " at index " + std::to_string(i));
      }
    }
    return unary_op(
        a, "log", [](float x) { return static_cast<float>(std::log(static_cast<double>(x))); },
        [](float x, float) { return 1.0f / x; });
  }
  return unary_op(
      a, "log_guarded",
      [](float x) { return static_cast<float>(std::log(std::max(static_cast<double>(x), kLogEpsilon))); },
      [](float x, float) { return static_cast<double>(x) > kLogEpsilon ? 1.0f / x : 0.0f; });
}

// --- spatial ---------------------------------------------------------------

namespace {

// Output columns [lo, hi) whose input column o*stride + k - pad lies in [0, size).
std::pair<int, int> valid_range(int out_size, int in_size, int k, int stride, int pad) {
  int lo = 0;
  while (lo < out_size && lo * stride + k - pad < 0) ++lo;
  int hi = out_size;
  while (hi > lo && (hi - 1) * stride + k - pad >= in_size) --hi;
  return {lo, hi};
}

// dst[i] += w * src[i * stride]
void axpy_strided(double* __restrict dst, const float* __restrict src, double w, int n, int stride) {
  if (stride == 1) {
#pragma omp simd
    for (int i = 0; i < n; ++i) dst[i] += w * src[i];
  } else {
    for (int i = 0; i < n; ++i) dst[i] += w * src[i * stride];
  }
}

// dst[i * stride] += w * src[i]
void scatter_axpy(double* __restrict dst, const float* __restrict src, double w, int n, int stride) {
  if (stride == 1) {
#pragma omp simd
    for (int i = 0; i < n; ++i) dst[i] += w * src[i];
  } else {
    for (int i = 0; i < n; ++i) dst[i * stride] += w * src[i];
  }
}

// sum_i a[i] * b[i * stride]
double dot_strided(const float* a, const float* b, int n, int stride) {
  double s = 0.0;
  if (stride == 1) {
#pragma omp simd reduction(+ : s)
    for (int i = 0; i < n; ++i) s += static_cast<double>(a[i]) * b[i];
  } else {
    for (int i = 0; i < n; ++i) s += static_cast<double>(a[i]) * b[i * stride];
  }
  return s;
}

// Stride-1 convolution over a zero-padded copy of the input. Each output row
// is produced in tiles of kTile columns whose double accumulators stay in
// registers; per pixel the terms are summed in (c, ky, kx) order.
// Stride-1 convolution over a zero-padded double copy of the input. Each
// output row is produced in tiles of 8 columns held in four two-lane
// registers; per pixel the terms are summed in (c, ky, kx) order.
typedef double Double2 __attribute__((vector_size(16)));

inline Double2 load2(const double* p) {
  Double2 v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

// Output channels [o, o + kOut) for every row, in tiles of 8 columns.
template <int kOut>
void conv_tile_rows(const double* padded, const double* wd, const float* b, int o, int channels, int k, int hp, int wp,
                    int out_h, int out_w, float* out) {
  constexpr int kTile = 8;
  const int tiles = (out_w + kTile - 1) / kTile;
  const std::size_t wstride = static_cast<std::size_t>(channels) * k * k;
  for (int oy = 0; oy < out_h; ++oy) {
    for (int t = 0; t < tiles; ++t) {
      const int x0 = t * kTile;
      Double2 acc[kOut][4];
      for (int q = 0; q < kOut; ++q) {
        const double bias = b[o + q];
        for (auto& a : acc[q]) a = Double2{bias, bias};
      }
      for (int c = 0; c < channels; ++c) {
        for (int ky = 0; ky < k; ++ky) {
          const double* row = padded + (static_cast<std::size_t>(c) * hp + oy + ky) * wp + x0;
          const double* wk = wd + static_cast<std::size_t>(o) * wstride + (static_cast<std::size_t>(c) * k + ky) * k;
          for (int kx = 0; kx < k; ++kx) {
            const double* r = row + kx;
            const Double2 v0 = load2(r), v1 = load2(r + 2), v2 = load2(r + 4), v3 = load2(r + 6);
            for (int q = 0; q < kOut; ++q) {
              const double wq = wk[q * wstride + kx];
              const Double2 wv = {wq, wq};
              acc[q][0] += wv * v0;
              acc[q][1] += wv * v1;
              acc[q][2] += wv * v2;
              acc[q][3] += wv * v3;
            }
          }
        }
      }
      const int n = std::min(kTile, out_w - x0);
      for (int q = 0; q < kOut; ++q) {
        float* dst = out + (static_cast<std::size_t>(o + q) * out_h + oy) * out_w + x0;
        for (int j = 0; j < n; ++j) dst[j] = static_cast<float>(acc[q][j / 2][j % 2]);
      }
    }
  }
}

// Zero-padded double copy of a C×H×W plane stack. Rows are `wp` wide and
// `hp` tall; the original plane starts at (padding, padding).
std::vector<double> pad_planes(const float* in, int channels, int height, int width, int padding, int hp, int wp) {
  std::vector<double> padded(static_cast<std::size_t>(channels) * hp * wp, 0.0);
  for (int c = 0; c < channels; ++c) {
    for (int y = 0; y < height; ++y) {
      std::copy_n(in + (static_cast<std::size_t>(c) * height + y) * width, width,
                  padded.data() + (static_cast<std::size_t>(c) * hp + y + padding) * wp + padding);
    }
  }
  return padded;
}

typedef float Float2 __attribute__((vector_size(8)));

inline Double2 load2f(const float* p) {
  Float2 v;
  std::memcpy(&v, p, sizeof v);
  return __builtin_convertvector(v, Double2);
}

// out[o, p] = b[o] + sum_c w[o, c] * in[c, p] for output channels [o, o + kOut).
template <int kOut>
void pointwise_rows(const float* in, int channels, int plane, const double* wd, const float* b, int o, float* out) {
  constexpr int kTile = 8;
  const int full = plane / kTile * kTile;
  for (int p0 = 0; p0 < full; p0 += kTile) {
    Double2 acc[kOut][4];
    for (int q = 0; q < kOut; ++q) {
      const double bias = b[o + q];
      for (auto& a : acc[q]) a = Double2{bias, bias};
    }
    for (int c = 0; c < channels; ++c) {
      const float* r = in + static_cast<std::size_t>(c) * plane + p0;
      const Double2 v0 = load2f(r), v1 = load2f(r + 2), v2 = load2f(r + 4), v3 = load2f(r + 6);
      for (int q = 0; q < kOut; ++q) {
        const double wq = wd[static_cast<std::size_t>(o + q) * channels + c];
        const Double2 wv = {wq, wq};
        acc[q][0] += wv * v0;
        acc[q][1] += wv * v1;
        acc[q][2] += wv * v2;
        acc[q][3] += wv * v3;
      }
    }
    for (int q = 0; q < kOut; ++q) {
      float* dst = out + static_cast<std::size_t>(o + q) * plane + p0;
      for (int j = 0; j < kTile; ++j) dst[j] = static_cast<float>(acc[q][j / 2][j % 2]);
    }
  }
  for (int p = full; p < plane; ++p) {
    for (int q = 0; q < kOut; ++q) {
      double a = b[o + q];
      for (int c = 0; c < channels; ++c) {
        a += wd[static_cast<std::size_t>(o + q) * channels + c] * static_cast<double>(in[static_cast<std::size_t>(c) * plane + p]);
      }
      out[static_cast<std::size_t>(o + q) * plane + p] = static_cast<float>(a);
    }
  }
}

void pointwise_forward(const float* in, int channels, int plane, const double* wd, const float* b, int out_ch, float* out) {
  int o = 0;
  for (; o + 1 < out_ch; o += 2) pointwise_rows<2>(in, channels, plane, wd, b, o, out);
  for (; o < out_ch; ++o) pointwise_rows<1>(in, channels, plane, wd, b, o, out);
}

// gw[o, c] += sum_p gout[o, p] * in[c, p]
void pointwise_weight_grad(const float* in, int channels, int plane, const float* gout, int out_ch, float* gw) {
  const int full = plane / 2 * 2;
  for (int o = 0; o < out_ch; ++o) {
    const float* g = gout + static_cast<std::size_t>(o) * plane;
    for (int c = 0; c < channels; ++c) {
      const float* x = in + static_cast<std::size_t>(c) * plane;
      Double2 acc = {0.0, 0.0};
      for (int p = 0; p < full; p += 2) acc += load2f(g + p) * load2f(x + p);
      double s = acc[0] + acc[1];
      for (int p = full; p < plane; ++p) s += static_cast<double>(g[p]) * x[p];
      gw[static_cast<std::size_t>(o) * channels + c] += static_cast<float>(s);
    }
  }
}

void conv_forward_unit_stride(const float* in, int channels, int height, int width, const double* wd, const float* b,
                              int out_ch, int k, int padding, int out_h, int out_w, float* out) {
  if (k == 1 && padding == 0) {
    pointwise_forward(in, channels, height * width, wd, b, out_ch, out);
    return;
  }
  const int hp = height + 2 * padding;
  const int wp = (out_w + 7) / 8 * 8 + k - 1;
  const std::vector<double> padded = pad_planes(in, channels, height, width, padding, hp, wp);
  int o = 0;
  for (; o + 1 < out_ch; o += 2) conv_tile_rows<2>(padded.data(), wd, b, o, channels, k, hp, wp, out_h, out_w, out);
  for (; o < out_ch; ++o) conv_tile_rows<1>(padded.data(), wd, b, o, channels, k, hp, wp, out_h, out_w, out);
}

// gw[o, c, ky, kx] += sum_{y, x} gout[o, y, x] * in[c, y + ky - padding, x + kx - padding]
// for a stride-1 convolution, two output channels at a time.
template <int kOut, int K>
void conv_weight_grad_rows(const double* padded, const double* gd, int o, int channels, int hp, int wp, int out_h,
                           int gw_row, float* gw) {
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < K; ++ky) {
      Double2 acc[kOut][K];
      for (auto& row : acc) {
        for (auto& a : row) a = Double2{0.0, 0.0};
      }
      for (int oy = 0; oy < out_h; ++oy) {
        const double* in_row = padded + (static_cast<std::size_t>(c) * hp + oy + ky) * wp;
        const double* g_row = gd + (static_cast<std::size_t>(o) * out_h + oy) * gw_row;
        for (int x = 0; x < gw_row; x += 2) {
          Double2 g[kOut];
          for (int q = 0; q < kOut; ++q) g[q] = load2(g_row + static_cast<std::size_t>(q) * out_h * gw_row + x);
          for (int kx = 0; kx < K; ++kx) {
            const Double2 v = load2(in_row + x + kx);
            for (int q = 0; q < kOut; ++q) acc[q][kx] += g[q] * v;
          }
        }
      }
      for (int q = 0; q < kOut; ++q) {
        for (int kx = 0; kx < K; ++kx) {
          gw[((static_cast<std::size_t>(o + q) * channels + c) * K + ky) * K + kx] +=
              static_cast<float>(acc[q][kx][0] + acc[q][kx][1]);
        }
      }
    }
  }
}

template <int K>
void conv_weight_grad_unit_stride(const float* in, int channels, int height, int width, const float* gout, int out_ch,
                                  int padding, int out_h, int out_w, float* gw) {
  const int gw_row = (out_w + 1) / 2 * 2;
  const int hp = height + 2 * padding;
  const int wp = gw_row + K - 1;
  const std::vector<double> padded = pad_planes(in, channels, height, width, padding, hp, wp);
  std::vector<double> gd(static_cast<std::size_t>(out_ch) * out_h * gw_row, 0.0);
  for (int o = 0; o < out_ch; ++o) {
    for (int y = 0; y < out_h; ++y) {
      std::copy_n(gout + (static_cast<std::size_t>(o) * out_h + y) * out_w, out_w,
                  gd.data() + (static_cast<std::size_t>(o) * out_h + y) * gw_row);
    }
  }
  int o = 0;
  for (; o + 1 < out_ch; o += 2) conv_weight_grad_rows<2, K>(padded.data(), gd.data(), o, channels, hp, wp, out_h, gw_row, gw);
  for (; o < out_ch; ++o) conv_weight_grad_rows<1, K>(padded.data(), gd.data(), o, channels, hp, wp, out_h, gw_row, gw);
}

void require_chw(const Tensor& t, const char* op) {
  if (t.rank() != 3) throw ShapeError(std::string(op) + ": expected C×H×W, got " + shape_to_string(t.shape()));
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int padding) {
  require_chw(input, "conv2d");
  if (weight.rank() != 4) throw ShapeError("conv2d: weight must be O×C×K×K, got " + shape_to_string(weight.shape()));
  const int channels = input.dim(0), height = input.dim(1), width = input.dim(2);
  const int out_ch = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != channels) {
    throw ShapeError("conv2d: weight expects " + std::to_string(weight.dim(1)) + " input channels, input " +
                     shape_to_string(input.shape()) + " has " + std::to_string(channels));
  }
  if (weight.dim(3) != k || k % 2 == 0) throw ShapeError("conv2d: kernel must be square and odd, got " + shape_to_string(weight.shape()));
  if (bias.numel() != static_cast<std::size_t>(out_ch)) {
    throw ShapeError("conv2d: bias " + shape_to_string(bias.shape()) + " does not match " + std::to_string(out_ch) + " outputs");
  }
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: invalid stride/padding");
  const int out_h = (height + 2 * padding - k) / stride + 1;
  const int out_w = (width + 2 * padding - k) / stride + 1;
  if (out_h <= 0 || out_w <= 0) throw ShapeError("conv2d: kernel larger than padded input");

  const auto in = input.values();
  const auto w = weight.values();
  const auto b = bias.values();
  const std::size_t plane = static_cast<std::size_t>(out_h) * out_w;
  std::vector<float> out(static_cast<std::size_t>(out_ch) * plane);
  if (stride == 1) {
    const std::vector<double> wd(w.begin(), w.end());
    conv_forward_unit_stride(in.data(), channels, height, width, wd.data(), b.data(), out_ch, k, padding, out_h, out_w,
                             out.data());
  }
  std::vector<double> acc(stride == 1 ? 0 : plane);

  for (int o = 0; o < (stride == 1 ? 0 : out_ch); ++o) {
    std::fill(acc.begin(), acc.end(), static_cast<double>(b[o]));
    for (int c = 0; c < channels; ++c) {
      const float* src = in.data() + static_cast<std::size_t>(c) * height * width;
      for (int ky = 0; ky < k; ++ky) {
        const auto [y_lo, y_hi] = valid_range(out_h, height, ky, stride, padding);
        for (int kx = 0; kx < k; ++kx) {
          const auto [x_lo, x_hi] = valid_range(out_w, width, kx, stride, padding);
          const double wv = w[((static_cast<std::size_t>(o) * channels + c) * k + ky) * k + kx];
          for (int oy = y_lo; oy < y_hi; ++oy) {
            const float* row = src + static_cast<std::size_t>(oy * stride + ky - padding) * width;
            double* dst = acc.data() + static_cast<std::size_t>(oy) * out_w;
            if (x_hi > x_lo) axpy_strided(dst + x_lo, row + x_lo * stride + kx - padding, wv, x_hi - x_lo, stride);
          }
        }
      }
    }
    std::transform(acc.begin(), acc.end(), out.begin() + o * plane, [](double v) { return static_cast<float>(v); });
  }

  auto ii = input.impl();
  auto wi = weight.impl();
  auto bi = bias.impl();
  return make_result({out_ch, out_h, out_w}, std::move(out), "conv2d", {input, weight, bias},
                     [=](const TensorImpl& o) {
                       const float* gout = o.grad.data();
                       if (bi->requires_grad) {
                         float* gb = bi->grad_buffer();
                         for (int oc = 0; oc < out_ch; ++oc) {
                           double s = 0.0;
                           for (std::size_t p = 0; p < plane; ++p) s += gout[oc * plane + p];
                           gb[oc] += static_cast<float>(s);
                         }
                       }
                       if (wi->requires_grad && stride == 1 && (k == 1 || k == 3)) {
                         float* gw = wi->grad_buffer();
                         const float* x = ii->data.data();
                         if (k == 1 && padding == 0) {
                           pointwise_weight_grad(x, channels, height * width, gout, out_ch, gw);
                         } else if (k == 1) {
                           conv_weight_grad_unit_stride<1>(x, channels, height, width, gout, out_ch, padding, out_h, out_w, gw);
                         } else {
                           conv_weight_grad_unit_stride<3>(x, channels, height, width, gout, out_ch, padding, out_h, out_w, gw);
                         }
                       } else if (wi->requires_grad) {
                         float* gw = wi->grad_buffer();
                         for (int oc = 0; oc < out_ch; ++oc) {
                           const float* go = gout + oc * plane;
                           for (int c = 0; c < channels; ++c) {
                             const float* src = ii->data.data() + static_cast<std::size_t>(c) * height * width;
                             for (int ky = 0; ky < k; ++ky) {
                               const auto [y_lo, y_hi] = valid_range(out_h, height, ky, stride, padding);
                               for (int kx = 0; kx < k; ++kx) {
                                 const auto [x_lo, x_hi] = valid_range(out_w, width, kx, stride, padding);
                                 double s = 0.0;
                                 for (int oy = y_lo; oy < y_hi && x_hi > x_lo; ++oy) {
                                   const float* row = src + static_cast<std::size_t>(oy * stride + ky - padding) * width;
                                   const float* grow = go + static_cast<std::size_t>(oy) * out_w;
                                   s += dot_strided(grow + x_lo, row + x_lo * stride + kx - padding, x_hi - x_lo, stride);
                                 }
                                 gw[((static_cast<std::size_t>(oc) * channels + c) * k + ky) * k + kx] +=
                                     static_cast<float>(s);
                               }
                             }
                           }
                         }
                       }
                       if (ii->requires_grad && stride == 1 && padding <= k - 1) {
                         // Transposed convolution: flipped kernel, channel roles swapped.
                         std::vector<double> flipped(wi->data.size());
                         for (int oc = 0; oc < out_ch; ++oc) {
                           for (int c = 0; c < channels; ++c) {
                             for (int t = 0; t < k * k; ++t) {
                               flipped[(static_cast<std::size_t>(c) * out_ch + oc) * k * k + (k * k - 1 - t)] =
                                   wi->data[(static_cast<std::size_t>(oc) * channels + c) * k * k + t];
                             }
                           }
                         }
                         const std::vector<float> zero(static_cast<std::size_t>(channels), 0.0f);
                         std::vector<float> gin(ii->data.size());
                         conv_forward_unit_stride(gout, out_ch, out_h, out_w, flipped.data(), zero.data(), channels, k,
                                                  k - 1 - padding, height, width, gin.data());
                         float* gi = ii->grad_buffer();
                         for (std::size_t i = 0; i < gin.size(); ++i) gi[i] += gin[i];
                       } else if (ii->requires_grad) {
                         std::vector<double> gin(ii->data.size(), 0.0);
                         for (int oc = 0; oc < out_ch; ++oc) {
                           const float* go = gout + oc * plane;
                           for (int c = 0; c < channels; ++c) {
                             double* dst_plane = gin.data() + static_cast<std::size_t>(c) * height * width;
                             for (int ky = 0; ky < k; ++ky) {
                               const auto [y_lo, y_hi] = valid_range(out_h, height, ky, stride, padding);
                               for (int kx = 0; kx < k; ++kx) {
                                 const auto [x_lo, x_hi] = valid_range(out_w, width, kx, stride, padding);
                                 const double wv =
                                     wi->data[((static_cast<std::size_t>(oc) * channels + c) * k + ky) * k + kx];
                                 for (int oy = y_lo; oy < y_hi; ++oy) {
                                   double* dst = dst_plane + static_cast<std::size_t>(oy * stride + ky - padding) * width;
                                   const float* grow = go + static_cast<std::size_t>(oy) * out_w;
                                   if (x_hi > x_lo) {
                                     scatter_axpy(dst + x_lo * stride + kx - padding, grow + x_lo, wv, x_hi - x_lo, stride);
                                   }
                                 }
                               }
                             }
                           }
                         }
                         float* gi = ii->grad_buffer();
                         for (std::size_t i = 0; i < gin.size(); ++i) gi[i] += static_cast<float>(gin[i]);
                       }
                     });
}

Tensor maxpool2x2(const Tensor& input) {
  require_chw(input, "maxpool2x2");
  const int c = input.dim(0), h = input.dim(1), w = input.dim(2);
  if (h % 2 || w % 2) throw ShapeError("maxpool2x2: spatial size must be even, got " + shape_to_string(input.shape()));
  const int oh = h / 2, ow = w / 2;
  const auto in = input.values();
  std::vector<float> out(static_cast<std::size_t>(c) * oh * ow);
  std::vector<std::size_t> argmax(out.size());
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        std::size_t best = (static_cast<std::size_t>(ch) * h + 2 * y) * w + 2 * x;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (static_cast<std::size_t>(ch) * h + 2 * y + dy) * w + 2 * x + dx;
            if (in[idx] > in[best]) best = idx;
          }
        }
        const std::size_t o = (static_cast<std::size_t>(ch) * oh + y) * ow + x;
        out[o] = in[best];
        argmax[o] = best;
      }
    }
  }
  auto ii = input.impl();
  return make_result({c, oh, ow}, std::move(out), "maxpool2x2", {input},
                     [ii, argmax = std::move(argmax)](const TensorImpl& o) {
                       if (!ii->requires_grad) return;
                       float* g = ii->grad_buffer();
                       for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += o.grad[i];
                     });
}

Tensor nearest_upsample2x(const Tensor& input) {
  require_chw(input, "nearest_upsample2x");
  const int c = input.dim(0), h = input.dim(1), w = input.dim(2);
  const int oh = 2 * h, ow = 2 * w;
  const auto in = input.values();
  std::vector<float> out(static_cast<std::size_t>(c) * oh * ow);
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        out[(static_cast<std::size_t>(ch) * oh + y) * ow + x] = in[(static_cast<std::size_t>(ch) * h + y / 2) * w + x / 2];
      }
    }
  }
  auto ii = input.impl();
  return make_result({c, oh, ow}, std::move(out), "nearest_upsample2x", {input}, [ii, c, h, w](const TensorImpl& o) {
    if (!ii->requires_grad) return;
    float* g = ii->grad_buffer();
    const int oh = 2 * h, ow = 2 * w;
    for (int ch = 0; ch < c; ++ch) {
      for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) {
          g[(static_cast<std::size_t>(ch) * h + y / 2) * w + x / 2] += o.grad[(static_cast<std::size_t>(ch) * oh + y) * ow + x];
        }
      }
    }
  });
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  int channels = 0;
  for (const auto& p : parts) {
    require_chw(p, "concat_channels");
    if (p.dim(1) != parts[0].dim(1) || p.dim(2) != parts[0].dim(2)) {
      throw ShapeError("concat_channels: spatial mismatch " + shape_to_string(parts[0].shape()) + " vs " +
                       shape_to_string(p.shape()));
    }
    channels += p.dim(0);
  }
  std::vector<float> out;
  out.reserve(static_cast<std::size_t>(channels) * parts[0].dim(1) * parts[0].dim(2));
  std::vector<std::shared_ptr<TensorImpl>> impls;
  for (const auto& p : parts) {
    out.insert(out.end(), p.values().begin(), p.values().end());
    impls.push_back(p.impl());
  }
  return make_result({channels, parts[0].dim(1), parts[0].dim(2)}, std::move(out), "concat_channels", parts,
                     [impls](const TensorImpl& o) {
                       std::size_t offset = 0;
                       for (const auto& p : impls) {
                         if (p->requires_grad) {
                           float* g = p->grad_buffer();
                           for (std::size_t i = 0; i < p->data.size(); ++i) g[i] += o.grad[offset + i];
                         }
                         offset += p->data.size();
                       }
                     });
}

Tensor slice_channels(const Tensor& input, int begin, int count) {
  require_chw(input, "slice_channels");
  if (begin < 0 || count < 1 || begin + count > input.dim(0)) {
    throw ShapeError("slice_channels: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") out of range for " + shape_to_string(input.shape()));
  }
  const std::size_t plane = static_cast<std::size_t>(input.dim(1)) * input.dim(2);
  const auto in = input.values();
  std::vector<float> out(in.begin() + begin * plane, in.begin() + (begin + count) * plane);
  auto ii = input.impl();
  return make_result({count, input.dim(1), input.dim(2)}, std::move(out), "slice_channels", {input},
                     [ii, offset = begin * plane](const TensorImpl& o) {
                       if (!ii->requires_grad) return;
                       float* g = ii->grad_buffer() + offset;
                       for (std::size_t i = 0; i < o.data.size(); ++i) g[i] += o.grad[i];
                     });
}

// --- reductions ------------------------------------------------------------

namespace {

Tensor scaled_sum(const Tensor& a, const Tensor* mask, double scale, const char* op) {
  const auto in = a.values();
  const double acc = reduce_sum(in.data(), mask ? mask->values().data() : nullptr, in.size());
  auto ai = a.impl();
  std::shared_ptr<TensorImpl> mi = mask ? mask->impl() : nullptr;
  return make_result({}, {static_cast<float>(acc * scale)}, op, {a}, [ai, mi, scale](const TensorImpl& o) {
    if (!ai->requires_grad) return;
    const float g_out = static_cast<float>(o.grad[0] * scale);
    float* __restrict g = ai->grad_buffer();
    const std::size_t n = ai->data.size();
    if (mi) {
      const float* m = mi->data.data();
      for (std::size_t i = 0; i < n; ++i) g[i] += g_out * m[i];
    } else {
      for (std::size_t i = 0; i < n; ++i) g[i] += g_out;
    }
  });
}

}  // namespace

Tensor sum(const Tensor& a) { return scaled_sum(a, nullptr, 1.0, "sum"); }

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean of empty tensor");
  return scaled_sum(a, nullptr, 1.0 / static_cast<double>(a.numel()), "mean");
}

Tensor masked_mean(const Tensor& a, const Tensor& mask, bool* empty_mask) {
  if (mask.numel() != a.numel()) {
    throw ShapeError("masked_mean: mask " + shape_to_string(mask.shape()) + " does not match " +
                     shape_to_string(a.shape()));
  }
  std::size_t count = 0;
  for (float m : mask.values()) {
    if (m != 0.0f && m != 1.0f) throw DomainError("masked_mean: mask values must be 0 or 1");
    count += m == 1.0f;
  }
  if (empty_mask) *empty_mask = count == 0;
  if (count == 0) return scaled_sum(a, &mask, 0.0, "masked_mean");
  return scaled_sum(a, &mask, 1.0 / static_cast<double>(count), "masked_mean");
}

Tensor detach(const Tensor& a) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = a.shape();
  impl->data = a.impl()->data;
  return Tensor(std::move(impl));
}

// --- backward --------------------------------------------------------------

void backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_to_string(loss.shape()));
  if (!loss.requires_grad()) throw ContractError("backward: loss does not depend on any tracked tensor");

  // Post-order DFS gives a topological order: inputs before outputs.
  std::vector<TensorImpl*> tape;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack{{loss.impl().get(), 0}};
  visited.insert(loss.impl().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->node && next < node->node->inputs.size()) {
      TensorImpl* child = node->node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.push_back({child, 0});
      continue;
    }
    tape.push_back(node);
    stack.pop_back();
  }

  for (TensorImpl* t : tape) {
    if (t->node) t->grad.assign(t->data.size(), 0.0f);
  }
  loss.impl()->accumulate_grad(0, 1.0f);
  for (auto it = tape.rbegin(); it != tape.rend(); ++it) {
    if ((*it)->node) (*it)->node->backward(**it);
  }
}

}  // namespace bgadapt
