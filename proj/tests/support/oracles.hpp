#pragma once

// Independent double-precision reference implementations and helpers shared
// by the unit and acceptance tests. Nothing here calls into the library's
// numerical code; it only uses the plain data types.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "bgadapt/protocol.hpp"
#include "bgadapt/tensor.hpp"

namespace oracle {

using Vec = std::vector<double>;

inline Vec to_vec(const bgadapt::Tensor& t) { return Vec(t.values().begin(), t.values().end()); }

inline std::vector<float> uniform(std::mt19937_64& rng, std::size_t n, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(d(rng));
  return v;
}

inline bgadapt::Tensor random_tensor(std::mt19937_64& rng, const bgadapt::Shape& shape, double lo, double hi,
                                     bool requires_grad = false) {
  return bgadapt::Tensor::from(shape, uniform(rng, bgadapt::shape_numel(shape), lo, hi), requires_grad);
}

inline bool bit_equal(const bgadapt::Tensor& a, const bgadapt::Tensor& b) {
  if (a.shape() != b.shape()) return false;
  const auto x = a.values();
  const auto y = b.values();
  return std::equal(x.begin(), x.end(), y.begin(), y.end(),
                    [](float p, float q) { return std::memcmp(&p, &q, sizeof(float)) == 0; });
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Direct cross-correlation, C×H×W input, O×C×K×K weights.
inline Vec conv2d(const Vec& in, int c, int h, int w, const Vec& weight, int o, int k, const Vec& bias, int stride,
                  int pad, int* out_h = nullptr, int* out_w = nullptr) {
  const int oh = (h + 2 * pad - k) / stride + 1;
  const int ow = (w + 2 * pad - k) / stride + 1;
  if (out_h) *out_h = oh;
  if (out_w) *out_w = ow;
  Vec out(static_cast<std::size_t>(o) * oh * ow, 0.0);
  for (int oc = 0; oc < o; ++oc) {
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        double s = bias[oc];
        for (int ic = 0; ic < c; ++ic) {
          for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
              const int iy = y * stride + ky - pad;
              const int ix = x * stride + kx - pad;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              s += weight[((static_cast<std::size_t>(oc) * c + ic) * k + ky) * k + kx] *
                   in[(static_cast<std::size_t>(ic) * h + iy) * w + ix];
            }
          }
        }
        out[(static_cast<std::size_t>(oc) * oh + y) * ow + x] = s;
      }
    }
  }
  return out;
}

// Central differences of a scalar function of a flat double vector.
inline Vec central_differences(const std::function<double(const Vec&)>& f, Vec x, double h = 1e-3) {
  Vec g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// Largest violation of |a - b| <= abs_tol or |a - b| <= rel_tol * max(|a|, |b|);
// returns the worst relative error over entries that fail the absolute test.
inline double worst_mismatch(const Vec& analytic, const Vec& numeric, double abs_tol = 1e-5) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double d = std::abs(analytic[i] - numeric[i]);
    if (d <= abs_tol) continue;
    worst = std::max(worst, d / std::max(std::abs(analytic[i]), std::abs(numeric[i])));
  }
  return worst;
}

// Brute-force grouped mIoU straight from pixel pairs. Groups: initial is
// background plus step-1 classes, incremental is every class of steps 2..step,
// all is the union. Classes absent from both maps everywhere are skipped.
struct Grouped {
  std::optional<double> initial, incremental, all;
  std::map<int, double> per_class;
};

inline Grouped brute_force_miou(const std::vector<bgadapt::LabelMap>& preds, const std::vector<bgadapt::LabelMap>& truths,
                                int n_initial, int last_class) {
  Grouped g;
  std::vector<double> initial, incremental, all;
  for (int id = 0; id <= last_class; ++id) {
    long inter = 0, uni = 0;
    for (std::size_t n = 0; n < preds.size(); ++n) {
      for (std::size_t p = 0; p < preds[n].ids.size(); ++p) {
        const bool in_pred = preds[n].ids[p] == id;
        const bool in_truth = truths[n].ids[p] == id;
        inter += in_pred && in_truth;
        uni += in_pred || in_truth;
      }
    }
    if (uni == 0) continue;
    const double iou = static_cast<double>(inter) / static_cast<double>(uni);
    g.per_class[id] = iou;
    all.push_back(iou);
    (id <= n_initial ? initial : incremental).push_back(iou);
  }
  auto avg = [](const std::vector<double>& v) -> std::optional<double> {
    if (v.empty()) return std::nullopt;
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  g.initial = avg(initial);
  g.incremental = avg(incremental);
  g.all = avg(all);
  return g;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(is), {});
}

// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("bgadapt-" + tag + "-" + std::to_string(rd()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace oracle
