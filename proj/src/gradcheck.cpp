#include "bgadapt/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <random>

#include <nlohmann/json.hpp>

#include "bgadapt/background_adaptation.hpp"
#include "bgadapt/config.hpp"
#include "bgadapt/errors.hpp"
#include "bgadapt/losses.hpp"
#include "bgadapt/pseudo_label.hpp"
#include "bgadapt/synthdata.hpp"
#include "bgadapt/tensor.hpp"

namespace bgadapt {

namespace {

using json = nlohmann::json;
using Vec = std::vector<double>;

// Smallest distance of any kink argument to its kink, seen while evaluating
// the reference on the unperturbed inputs.
struct Kinks {
  double gap = std::numeric_limits<double>::infinity();
  void note(double x) { gap = std::min(gap, std::abs(x)); }
};

struct Problem {
  std::vector<Shape> shapes;
  std::vector<std::vector<float>> values;
  std::vector<bool> zero_grad;  // tracked inputs whose gradient must be exactly zero
  std::function<Tensor(const std::vector<Tensor>&)> forward;
  std::function<double(const std::vector<Vec>&, Kinks&)> reference;
  json aux = json::object();

  int add_input(Shape s, std::vector<float> v, bool must_be_zero = false) {
    shapes.push_back(std::move(s));
    values.push_back(std::move(v));
    zero_grad.push_back(must_be_zero);
    return static_cast<int>(shapes.size()) - 1;
  }
};

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(gen_); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(gen_); }
  bool coin() { return integer(0, 1) == 1; }
  std::vector<float> values(std::size_t n, double lo, double hi) {
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(uniform(lo, hi));
    return v;
  }
  // Magnitudes in [lo, hi] with random sign.
  std::vector<float> away_from_zero(std::size_t n, double lo, double hi) {
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>((coin() ? 1.0 : -1.0) * uniform(lo, hi));
    return v;
  }
  std::vector<float> binary(std::size_t n) {
    std::vector<float> v(n);
    for (auto& x : v) x = coin() ? 1.0f : 0.0f;
    return v;
  }
  Shape chw(int max_c = 4, int max_hw = 8) {
    return {integer(1, max_c), 2 * integer(1, max_hw / 2), 2 * integer(1, max_hw / 2)};
  }

 private:
  std::mt19937_64 gen_;
};

Vec to_double(std::span<const float> v) { return Vec(v.begin(), v.end()); }

double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double glog(double x) { return std::log(std::max(x, kLogEpsilon)); }
double bce(double p, double target) { return target * glog(p) + (1.0 - target) * glog(1.0 - p); }

double weighted_sum(const Vec& a, const Vec& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * w[i];
  return s;
}

Vec map(const Vec& a, const std::function<double(double)>& f) {
  Vec out(a.size());
  std::transform(a.begin(), a.end(), out.begin(), f);
  return out;
}

Vec conv_ref(const Vec& in, const Shape& is, const Vec& w, const Shape& ws, const Vec& b, int stride, int pad) {
  const int c = is[0], h = is[1], wd = is[2], o = ws[0], k = ws[2];
  const int oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  Vec out(static_cast<std::size_t>(o) * oh * ow);
  for (int oc = 0; oc < o; ++oc) {
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        double s = b[oc];
        for (int ic = 0; ic < c; ++ic) {
          for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
              const int iy = y * stride + ky - pad, ix = x * stride + kx - pad;
              if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
              s += w[((oc * c + ic) * k + ky) * k + kx] * in[(ic * h + iy) * wd + ix];
            }
          }
        }
        out[(oc * oh + y) * ow + x] = s;
      }
    }
  }
  return out;
}

Tensor weighted(const Tensor& t, const std::vector<float>& w) { return sum(mul(t, Tensor::from(t.shape(), w))); }

// Flips the sign of the gradient passing through; the forward is identity.
Tensor sign_flip(const Tensor& t) {
  auto ti = t.impl();
  return make_result(t.shape(), std::vector<float>(t.values().begin(), t.values().end()), "sign_flip", {t},
                     [ti](const TensorImpl& o) {
                       if (!ti->requires_grad) return;
                       float* g = ti->grad_buffer();
                       for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] -= o.grad[i];
                     });
}

std::size_t numel(const Shape& s) { return shape_numel(s); }

// --- elementwise primitives ---------------------------------------------------

Problem unary_case(Rng& rng, std::function<Tensor(const Tensor&)> op, std::function<double(double, Kinks&)> ref,
                   double lo, double hi, bool signed_away) {
  Problem p;
  const Shape s = rng.chw();
  const std::size_t n = numel(s);
  p.add_input(s, signed_away ? rng.away_from_zero(n, lo, hi) : rng.values(n, lo, hi));
  const auto w = rng.values(n, -1, 1);
  p.forward = [op, w](const std::vector<Tensor>& in) { return weighted(op(in[0]), w); };
  p.reference = [ref, w](const std::vector<Vec>& in, Kinks& k) {
    Vec out(in[0].size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ref(in[0][i], k);
    return weighted_sum(out, Vec(w.begin(), w.end()));
  };
  return p;
}

Problem binary_case(Rng& rng, std::function<Tensor(const Tensor&, const Tensor&)> op,
                    std::function<double(double, double)> ref, bool scalar_rhs) {
  Problem p;
  const Shape s = rng.chw();
  const std::size_t n = numel(s);
  p.add_input(s, rng.values(n, -2, 2));
  if (scalar_rhs) {
    p.add_input({1}, rng.values(1, -2, 2));
  } else {
    p.add_input(s, rng.values(n, -2, 2));
  }
  const auto w = rng.values(n, -1, 1);
  p.forward = [op, w](const std::vector<Tensor>& in) { return weighted(op(in[0], in[1]), w); };
  p.reference = [ref, w, scalar_rhs](const std::vector<Vec>& in, Kinks&) {
    double s = 0.0;
    for (std::size_t i = 0; i < in[0].size(); ++i) s += w[i] * ref(in[0][i], in[1][scalar_rhs ? 0 : i]);
    return s;
  };
  return p;
}

Problem conv_case(Rng& rng) {
  Problem p;
  const Shape is = rng.chw();
  const int k = rng.coin() ? 3 : 1;
  const int stride = rng.integer(1, 2);
  const int pad = (rng.coin() || is[1] < k || is[2] < k) ? k / 2 : 0;
  const Shape ws{rng.integer(1, 4), is[0], k, k};
  p.add_input(is, rng.values(numel(is), -1, 1));
  p.add_input(ws, rng.values(numel(ws), -1, 1));
  p.add_input({ws[0]}, rng.values(static_cast<std::size_t>(ws[0]), -1, 1));
  const int oh = (is[1] + 2 * pad - k) / stride + 1, ow = (is[2] + 2 * pad - k) / stride + 1;
  const auto w = rng.values(static_cast<std::size_t>(ws[0]) * oh * ow, -1, 1);
  p.aux = {{"stride", stride}, {"padding", pad}};
  p.forward = [=](const std::vector<Tensor>& in) { return weighted(conv2d(in[0], in[1], in[2], stride, pad), w); };
  p.reference = [=](const std::vector<Vec>& in, Kinks&) {
    return weighted_sum(conv_ref(in[0], is, in[1], ws, in[2], stride, pad), Vec(w.begin(), w.end()));
  };
  return p;
}

Problem maxpool_case(Rng& rng) {
  Problem p;
  const Shape s = rng.chw();
  p.add_input(s, rng.values(numel(s), -2, 2));
  const Shape os{s[0], s[1] / 2, s[2] / 2};
  const auto w = rng.values(numel(os), -1, 1);
  p.forward = [w](const std::vector<Tensor>& in) { return weighted(maxpool2x2(in[0]), w); };
  p.reference = [s, os, w](const std::vector<Vec>& in, Kinks& k) {
    double total = 0.0;
    for (int c = 0; c < s[0]; ++c) {
      for (int y = 0; y < os[1]; ++y) {
        for (int x = 0; x < os[2]; ++x) {
          Vec win;
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) win.push_back(in[0][(c * s[1] + 2 * y + dy) * s[2] + 2 * x + dx]);
          }
          std::sort(win.begin(), win.end());
          k.note(win[3] - win[2]);
          total += w[(c * os[1] + y) * os[2] + x] * win[3];
        }
      }
    }
    return total;
  };
  return p;
}

Problem upsample_case(Rng& rng) {
  Problem p;
  const Shape s = rng.chw(4, 4);
  p.add_input(s, rng.values(numel(s), -2, 2));
  const Shape os{s[0], 2 * s[1], 2 * s[2]};
  const auto w = rng.values(numel(os), -1, 1);
  p.forward = [w](const std::vector<Tensor>& in) { return weighted(nearest_upsample2x(in[0]), w); };
  p.reference = [s, os, w](const std::vector<Vec>& in, Kinks&) {
    double total = 0.0;
    for (int c = 0; c < os[0]; ++c) {
      for (int y = 0; y < os[1]; ++y) {
        for (int x = 0; x < os[2]; ++x) {
          total += w[(c * os[1] + y) * os[2] + x] * in[0][(c * s[1] + y / 2) * s[2] + x / 2];
        }
      }
    }
    return total;
  };
  return p;
}

Problem concat_case(Rng& rng) {
  Problem p;
  const Shape a = rng.chw(2);
  const Shape b{rng.integer(1, 2), a[1], a[2]};
  p.add_input(a, rng.values(numel(a), -2, 2));
  p.add_input(b, rng.values(numel(b), -2, 2));
  const auto w = rng.values(numel(a) + numel(b), -1, 1);
  p.forward = [w](const std::vector<Tensor>& in) { return weighted(concat_channels({in[0], in[1]}), w); };
  p.reference = [w](const std::vector<Vec>& in, Kinks&) {
    Vec all = in[0];
    all.insert(all.end(), in[1].begin(), in[1].end());
    return weighted_sum(all, Vec(w.begin(), w.end()));
  };
  return p;
}

Problem slice_case(Rng& rng) {
  Problem p;
  const Shape s{rng.integer(2, 4), 2 * rng.integer(1, 4), 2 * rng.integer(1, 4)};
  const int begin = rng.integer(0, s[0] - 1);
  const int count = rng.integer(1, s[0] - begin);
  p.add_input(s, rng.values(numel(s), -2, 2));
  const std::size_t plane = static_cast<std::size_t>(s[1]) * s[2];
  const auto w = rng.values(plane * count, -1, 1);
  p.aux = {{"begin", begin}, {"count", count}};
  p.forward = [=](const std::vector<Tensor>& in) { return weighted(slice_channels(in[0], begin, count), w); };
  p.reference = [=](const std::vector<Vec>& in, Kinks&) {
    double total = 0.0;
    for (std::size_t i = 0; i < plane * count; ++i) total += w[i] * in[0][begin * plane + i];
    return total;
  };
  return p;
}

Problem reduce_case(Rng& rng, int kind) {
  Problem p;
  const Shape s = rng.chw();
  const std::size_t n = numel(s);
  p.add_input(s, rng.values(n, -2, 2));
  std::vector<float> mask = rng.binary(n);
  mask[static_cast<std::size_t>(rng.integer(0, static_cast<int>(n) - 1))] = 1.0f;
  if (kind == 2) p.aux["mask"] = mask;
  // The reduction output is scaled by a constant so the check also covers
  // a non-unit upstream gradient.
  const float scale = static_cast<float>(rng.uniform(0.5, 2.0));
  p.forward = [=](const std::vector<Tensor>& in) {
    Tensor r = kind == 0 ? sum(in[0]) : kind == 1 ? mean(in[0]) : masked_mean(in[0], Tensor::from(in[0].shape(), mask));
    return mul_scalar(r, scale);
  };
  p.reference = [=](const std::vector<Vec>& in, Kinks&) {
    double s = 0.0, count = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double m = kind == 2 ? mask[i] : 1.0;
      s += m * in[0][i];
      count += m;
    }
    return scale * (kind == 0 ? s : s / count);
  };
  return p;
}

Problem detach_case(Rng& rng) {
  Problem p;
  const Shape s = rng.chw();
  const std::size_t n = numel(s);
  p.add_input(s, rng.values(n, -2, 2), true);
  p.add_input(s, rng.values(n, -2, 2));
  p.forward = [](const std::vector<Tensor>& in) { return sum(mul(detach(in[0]), in[1])); };
  p.reference = [](const std::vector<Vec>& in, Kinks&) { return weighted_sum(in[0], in[1]); };
  return p;
}

Problem reuse_case(Rng& rng) {
  Problem p;
  const Shape s = rng.chw();
  const std::size_t n = numel(s);
  p.add_input(s, rng.values(n, -2, 2));
  const auto w = rng.values(n, -1, 1);
  p.forward = [w](const std::vector<Tensor>& in) { return weighted(add(mul(in[0], in[0]), sigmoid(in[0])), w); };
  p.reference = [w](const std::vector<Vec>& in, Kinks&) {
    double s = 0.0;
    for (std::size_t i = 0; i < in[0].size(); ++i) s += w[i] * (in[0][i] * in[0][i] + sigm(in[0][i]));
    return s;
  };
  return p;
}

Problem composite_case(Rng& rng) {
  Problem p;
  const Shape is = rng.chw();
  const Shape ws{rng.integer(1, 4), is[0], 3, 3};
  p.add_input(is, rng.away_from_zero(numel(is), 0.05, 1.5));
  p.add_input(ws, rng.values(numel(ws), -1, 1));
  p.add_input({ws[0]}, rng.values(static_cast<std::size_t>(ws[0]), -1, 1));
  const auto w = rng.values(static_cast<std::size_t>(ws[0]) * is[1] * is[2], -1, 1);
  p.forward = [w](const std::vector<Tensor>& in) {
    return weighted(sigmoid(conv2d(relu(in[0]), in[1], in[2], 1, 1)), w);
  };
  p.reference = [is, ws, w](const std::vector<Vec>& in, Kinks& k) {
    const Vec r = map(in[0], [&k](double x) {
      k.note(x);
      return std::max(x, 0.0);
    });
    return weighted_sum(map(conv_ref(r, is, in[1], ws, in[2], 1, 1), sigm), Vec(w.begin(), w.end()));
  };
  return p;
}

// --- background aggregation ---------------------------------------------------

Problem aggregate_inference_case(Rng& rng) {
  Problem p;
  const Shape s{1, 2 * rng.integer(1, 4), 2 * rng.integer(1, 4)};
  const std::size_t n = numel(s);
  const int t = rng.integer(2, 4);
  p.add_input(s, rng.values(n, -2, 2));
  for (int i = 2; i <= t; ++i) p.add_input(s, rng.away_from_zero(n, 0.05, 2));
  const auto w = rng.values(n, -1, 1);
  p.forward = [w](const std::vector<Tensor>& in) {
    return weighted(aggregate_inference(in[0], std::vector<Tensor>(in.begin() + 1, in.end())), w);
  };
  p.reference = [w](const std::vector<Vec>& in, Kinks& k) {
    Vec mu = in[0];
    for (std::size_t i = 1; i < in.size(); ++i) {
      for (std::size_t j = 0; j < mu.size(); ++j) {
        k.note(in[i][j]);
        mu[j] += std::min(in[i][j], 0.0);
      }
    }
    return weighted_sum(mu, Vec(w.begin(), w.end()));
  };
  return p;
}

Problem aggregate_training_case(Rng& rng) {
  Problem p;
  const Shape s{1, 2 * rng.integer(1, 4), 2 * rng.integer(1, 4)};
  const std::size_t n = numel(s);
  const int olds = rng.integer(0, 2);
  const auto b1 = rng.values(n, -2, 2);
  std::vector<std::vector<float>> old;
  for (int i = 0; i < olds; ++i) old.push_back(rng.values(n, -2, 2));
  p.add_input(s, rng.values(n, -2, 2));
  const auto w = rng.values(n, -1, 1);
  p.aux = {{"b1", b1}, {"old", old}};
  p.forward = [=](const std::vector<Tensor>& in) {
    std::vector<Tensor> o;
    for (const auto& v : old) o.push_back(Tensor::from(s, v));
    return weighted(aggregate_training(Tensor::from(s, b1), o, in[0]), w);
  };
  p.reference = [=](const std::vector<Vec>& in, Kinks&) {
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      double mu = b1[j] + in[0][j];
      for (const auto& v : old) mu += std::min(static_cast<double>(v[j]), 0.0);
      total += w[j] * mu;
    }
    return total;
  };
  return p;
}

// --- losses -------------------------------------------------------------------

struct LossScene {
  int h = 0, w = 0;
  ClassRange current;
  LabelMap step_label;
  PseudoLabel pseudo;
  RegionMasks masks;
  int old_classes() const { return current.first - 1; }
  std::size_t pixels() const { return static_cast<std::size_t>(h) * w; }
};

// Random step label over {bg} ∪ C^t and a pseudo label that also backfills
// some background pixels with old classes.
LossScene make_scene(Rng& rng) {
  LossScene sc;
  sc.h = 2 * rng.integer(1, 3);
  sc.w = 2 * rng.integer(1, 3);
  const int old = rng.integer(1, 3);
  sc.current = {old + 1, old + rng.integer(1, 2)};
  sc.step_label = LabelMap(sc.h, sc.w);
  for (auto& id : sc.step_label.ids) id = rng.coin() ? kBackgroundId : rng.integer(sc.current.first, sc.current.last);
  sc.pseudo.labels = sc.step_label;
  sc.pseudo.known_classes = sc.current.last;
  for (auto& id : sc.pseudo.labels.ids) {
    if (id == kBackgroundId && rng.coin()) {
      id = rng.integer(1, old);
      sc.pseudo.source.push_back(LabelSource::kTeacher);
    } else {
      sc.pseudo.source.push_back(id == kBackgroundId ? LabelSource::kBackground : LabelSource::kGroundTruth);
    }
  }
  sc.masks = RegionMasks::from_step_label(sc.step_label, sc.current);
  return sc;
}

json scene_json(const LossScene& sc) {
  return {{"current", {sc.current.first, sc.current.last}}, {"step_label", sc.step_label.ids},
          {"pseudo_label", sc.pseudo.labels.ids}};
}

Vec novel_mask(const LossScene& sc) { return to_double(sc.masks.novel.values()); }

double ref_pb_bce(const LossScene& sc, const Vec& mu_bg, const Vec& mu_novel) {
  const std::size_t hw = sc.pixels();
  double s = 0.0;
  for (std::size_t k = 0; k < hw; ++k) {
    const int id = sc.pseudo.labels.ids[k];
    s += bce(sigm(mu_bg[k]), id == kBackgroundId ? 1.0 : 0.0);
    for (int c = 0; c < sc.current.count(); ++c) {
      s += bce(sigm(mu_novel[c * hw + k]), id == sc.current.first + c ? 1.0 : 0.0);
    }
  }
  return -s / static_cast<double>(hw);
}

double ref_masked_mean(const Vec& v, const Vec& mask) {
  double s = 0.0, n = 0.0;
  for (std::size_t k = 0; k < v.size(); ++k) {
    s += mask[k] * v[k];
    n += mask[k];
  }
  return n > 0 ? s / n : 0.0;
}

Vec complement(const Vec& m) { return map(m, [](double x) { return 1.0 - x; }); }

double ref_bga_plus(const LossScene& sc, const Vec& mu) {
  return ref_masked_mean(map(mu, [](double x) { return -glog(sigm(-x)); }), novel_mask(sc));
}

double ref_bga_minus(const LossScene& sc, const Vec& mu, Kinks& k) {
  const Vec terms = map(mu, [&k](double x) {
    const double phi = sigm(x);
    const double d = (1 - phi) * (1 - phi) - phi * phi;
    k.note(d);
    return std::max(0.0, d);
  });
  return ref_masked_mean(terms, complement(novel_mask(sc)));
}

double ref_gkd(const std::vector<Vec>& student_logits, const std::vector<Vec>& teacher_probs, std::size_t hw) {
  double s = 0.0;
  for (std::size_t i = 0; i < student_logits.size(); ++i) {
    for (std::size_t j = 0; j < student_logits[i].size(); ++j) s += bce(sigm(student_logits[i][j]), teacher_probs[i][j]);
  }
  return -s / static_cast<double>(hw);
}

double ref_bfd(const std::vector<Vec>& student, const std::vector<Vec>& teacher, const Vec& psi, std::size_t hw) {
  double s = 0.0;
  for (std::size_t i = 0; i < student.size(); ++i) {
    double head = 0.0;
    for (std::size_t j = 0; j < student[i].size(); ++j) {
      const double d = psi[j % hw] * student[i][j] - psi[j % hw] * teacher[i][j];
      head += d * d;
    }
    s += head / static_cast<double>(student[i].size());
  }
  return s;
}

Problem pb_bce_case(Rng& rng) {
  Problem p;
  const LossScene sc = make_scene(rng);
  const int hw = static_cast<int>(sc.pixels());
  p.add_input({1, sc.h, sc.w}, rng.values(hw, -3, 3));
  p.add_input({sc.current.count(), sc.h, sc.w}, rng.values(static_cast<std::size_t>(sc.current.count()) * hw, -3, 3));
  p.aux = scene_json(sc);
  p.forward = [sc](const std::vector<Tensor>& in) { return pb_bce(sigmoid(in[0]), sigmoid(in[1]), sc.pseudo, sc.current); };
  p.reference = [sc](const std::vector<Vec>& in, Kinks&) { return ref_pb_bce(sc, in[0], in[1]); };
  return p;
}

Problem bga_plus_case(Rng& rng) {
  Problem p;
  const LossScene sc = make_scene(rng);
  p.add_input({1, sc.h, sc.w}, rng.values(sc.pixels(), -3, 3));
  p.aux = scene_json(sc);
  p.forward = [sc](const std::vector<Tensor>& in) { return bga_plus(in[0], sc.masks); };
  p.reference = [sc](const std::vector<Vec>& in, Kinks&) { return ref_bga_plus(sc, in[0]); };
  return p;
}

Problem bga_minus_case(Rng& rng, bool flip) {
  Problem p;
  const LossScene sc = make_scene(rng);
  p.add_input({1, sc.h, sc.w}, rng.away_from_zero(sc.pixels(), 0.1, 3));
  p.aux = scene_json(sc);
  p.forward = [sc, flip](const std::vector<Tensor>& in) {
    const Tensor phi = sigmoid(in[0]);
    return bga_minus(flip ? sign_flip(phi) : phi, sc.masks);
  };
  p.reference = [sc](const std::vector<Vec>& in, Kinks& k) { return ref_bga_minus(sc, in[0], k); };
  return p;
}

// Old-head student logits (class channels + b^i) as inputs; teacher
// probabilities are constants.
Problem gkd_case(Rng& rng) {
  Problem p;
  const int h = 2 * rng.integer(1, 3), w = 2 * rng.integer(1, 3);
  const int heads = rng.integer(1, 3);
  std::vector<std::vector<float>> teacher;
  for (int i = 0; i < heads; ++i) {
    const Shape s{rng.integer(1, 2) + 1, h, w};
    p.add_input(s, rng.values(numel(s), -3, 3));
    teacher.push_back(rng.values(numel(s), 0.02, 0.98));
  }
  p.aux = {{"teacher", teacher}};
  const auto shapes = p.shapes;
  p.forward = [teacher, shapes](const std::vector<Tensor>& in) {
    std::vector<Tensor> s, t;
    for (std::size_t i = 0; i < in.size(); ++i) {
      s.push_back(sigmoid(in[i]));
      t.push_back(Tensor::from(shapes[i], teacher[i]));
    }
    return gkd(s, t);
  };
  p.reference = [teacher, h, w](const std::vector<Vec>& in, Kinks&) {
    std::vector<Vec> t;
    for (const auto& v : teacher) t.push_back(Vec(v.begin(), v.end()));
    return ref_gkd(in, t, static_cast<std::size_t>(h) * w);
  };
  return p;
}

Problem bfd_case(Rng& rng, bool unmasked) {
  Problem p;
  const int h = 2 * rng.integer(1, 3), w = 2 * rng.integer(1, 3);
  const int heads = rng.integer(1, 3), m = rng.integer(1, 4);
  const Shape s{m, h, w};
  std::vector<std::vector<float>> teacher;
  for (int i = 0; i < heads; ++i) {
    p.add_input(s, rng.values(numel(s), 0, 2));
    teacher.push_back(rng.values(numel(s), 0, 2));
  }
  const std::vector<float> psi = unmasked ? std::vector<float>(static_cast<std::size_t>(h) * w, 1.0f)
                                          : rng.binary(static_cast<std::size_t>(h) * w);
  p.aux = {{"teacher", teacher}, {"psi_b", psi}};
  p.forward = [=](const std::vector<Tensor>& in) {
    std::vector<Tensor> t;
    for (const auto& v : teacher) t.push_back(Tensor::from(s, v));
    return bfd(in, t, Tensor::from({1, h, w}, psi));
  };
  p.reference = [=](const std::vector<Vec>& in, Kinks&) {
    std::vector<Vec> t;
    for (const auto& v : teacher) t.push_back(Vec(v.begin(), v.end()));
    return ref_bfd(in, t, Vec(psi.begin(), psi.end()), static_cast<std::size_t>(h) * w);
  };
  return p;
}

Problem feature_kd_case(Rng& rng) {
  Problem p;
  const int h = 2 * rng.integer(1, 3), w = 2 * rng.integer(1, 3);
  const Shape s{rng.integer(1, 4), h, w};
  const int heads = rng.integer(1, 2);
  std::vector<std::vector<float>> teacher;
  for (int i = 0; i < heads; ++i) {
    p.add_input(s, rng.values(numel(s), -2, 2));
    teacher.push_back(rng.values(numel(s), -2, 2));
  }
  p.aux = {{"teacher", teacher}};
  p.forward = [=](const std::vector<Tensor>& in) {
    std::vector<Tensor> t;
    for (const auto& v : teacher) t.push_back(Tensor::from(s, v));
    return feature_kd(in, t);
  };
  p.reference = [=](const std::vector<Vec>& in, Kinks&) {
    std::vector<Vec> t;
    for (const auto& v : teacher) t.push_back(map(Vec(v.begin(), v.end()), sigm));
    return ref_gkd(in, t, static_cast<std::size_t>(h) * w);
  };
  return p;
}

Problem outside_region_case(Rng& rng, bool bce_one) {
  Problem p;
  const LossScene sc = make_scene(rng);
  p.add_input({1, sc.h, sc.w}, rng.values(sc.pixels(), -3, 3));
  p.aux = scene_json(sc);
  p.forward = [sc, bce_one](const std::vector<Tensor>& in) {
    return bce_one ? bga_bce_one(in[0], sc.masks) : bga_mse_zero(in[0], sc.masks);
  };
  p.reference = [sc, bce_one](const std::vector<Vec>& in, Kinks&) {
    const Vec terms = bce_one ? map(in[0], [](double x) { return -glog(sigm(x)); })
                              : map(in[0], [](double x) { return x * x; });
    return ref_masked_mean(terms, complement(novel_mask(sc)));
  };
  return p;
}

// Full weighted objective: mu_b, novel logits, adaptation logit, one old
// head's logits and features.
Problem total_case(Rng& rng) {
  Problem p;
  const LossScene sc = make_scene(rng);
  const int hw = static_cast<int>(sc.pixels());
  const int old_ch = sc.old_classes() + 1, m = rng.integer(1, 3);
  p.add_input({1, sc.h, sc.w}, rng.values(hw, -3, 3));
  p.add_input({sc.current.count(), sc.h, sc.w}, rng.values(static_cast<std::size_t>(sc.current.count()) * hw, -3, 3));
  p.add_input({1, sc.h, sc.w}, rng.away_from_zero(hw, 0.1, 3));
  p.add_input({old_ch, sc.h, sc.w}, rng.values(static_cast<std::size_t>(old_ch) * hw, -3, 3));
  p.add_input({m, sc.h, sc.w}, rng.values(static_cast<std::size_t>(m) * hw, 0, 2));
  const auto teacher_probs = rng.values(static_cast<std::size_t>(old_ch) * hw, 0.02, 0.98);
  const auto teacher_feats = rng.values(static_cast<std::size_t>(m) * hw, 0, 2);
  const LossWeights weights;
  p.aux = scene_json(sc);
  p.aux["teacher_probs"] = teacher_probs;
  p.aux["teacher_feats"] = teacher_feats;
  p.forward = [=](const std::vector<Tensor>& in) {
    LossTerms t;
    t.pbbce = pb_bce(sigmoid(in[0]), sigmoid(in[1]), sc.pseudo, sc.current);
    t.bga_plus = bga_plus(in[2], sc.masks);
    t.bga_minus = bga_minus(sigmoid(in[2]), sc.masks);
    t.gkd = gkd({sigmoid(in[3])}, {Tensor::from(in[3].shape(), teacher_probs)});
    t.bfd = bfd({in[4]}, {Tensor::from(in[4].shape(), teacher_feats)}, sc.masks.complement);
    return total_objective(t, weights);
  };
  p.reference = [=](const std::vector<Vec>& in, Kinks& k) {
    const std::size_t n = sc.pixels();
    return ref_pb_bce(sc, in[0], in[1]) + weights.bga_plus * ref_bga_plus(sc, in[2]) +
           weights.bga_minus * ref_bga_minus(sc, in[2], k) +
           weights.gkd * ref_gkd({in[3]}, {Vec(teacher_probs.begin(), teacher_probs.end())}, n) +
           weights.bfd * ref_bfd({in[4]}, {Vec(teacher_feats.begin(), teacher_feats.end())},
                                 complement(novel_mask(sc)), n);
  };
  return p;
}

using Maker = std::function<Problem(Rng&, const std::string& inject)>;

const std::vector<std::pair<std::string, Maker>>& registry() {
  static const std::vector<std::pair<std::string, Maker>> cases = [] {
    std::vector<std::pair<std::string, Maker>> r;
    auto reg = [&r](std::string name, Maker m) { r.emplace_back(std::move(name), std::move(m)); };
    reg("add", [](Rng& g, const std::string&) {
      return binary_case(g, [](const Tensor& a, const Tensor& b) { return add(a, b); }, std::plus<double>(), false);
    });
    reg("add_broadcast", [](Rng& g, const std::string&) {
      return binary_case(g, [](const Tensor& a, const Tensor& b) { return add(a, b); }, std::plus<double>(), true);
    });
    reg("sub", [](Rng& g, const std::string&) {
      return binary_case(g, [](const Tensor& a, const Tensor& b) { return sub(a, b); }, std::minus<double>(), false);
    });
    reg("mul", [](Rng& g, const std::string&) {
      return binary_case(g, [](const Tensor& a, const Tensor& b) { return mul(a, b); }, std::multiplies<double>(), false);
    });
    reg("mul_broadcast", [](Rng& g, const std::string&) {
      return binary_case(g, [](const Tensor& a, const Tensor& b) { return mul(a, b); }, std::multiplies<double>(), true);
    });
    reg("neg", [](Rng& g, const std::string&) {
      return unary_case(g, [](const Tensor& a) { return neg(a); }, [](double x, Kinks&) { return -x; }, -2, 2, false);
    });
    reg("square", [](Rng& g, const std::string&) {
      return unary_case(g, [](const Tensor& a) { return square(a); }, [](double x, Kinks&) { return x * x; }, -2, 2, false);
    });
    reg("add_scalar", [](Rng& g, const std::string&) {
      return unary_case(g, [](const Tensor& a) { return add_scalar(a, 0.375f); },
                        [](double x, Kinks&) { return x + 0.375; }, -2, 2, false);
    });
    reg("mul_scalar", [](Rng& g, const std::string&) {
      return unary_case(g, [](const Tensor& a) { return mul_scalar(a, -1.5f); },
                        [](double x, Kinks&) { return -1.5 * x; }, -2, 2, false);
    });
    reg("sigmoid", [](Rng& g, const std::string&) {
      return unary_case(g, [](const Tensor& a) { return sigmoid(a); }, [](double x, Kinks&) { return sigm(x); }, -4, 4, false);
    });
    reg("relu", [](Rng& g, const std::string&) {
      return unary_case(g, [](const Tensor& a) { return relu(a); },
                        [](double x, Kinks& k) { k.note(x); return std::max(x, 0.0); }, 0.05, 2, true);
    });
    reg("clamp_nonpositive", [](Rng& g, const std::string&) {
      return unary_case(g, [](const Tensor& a) { return clamp_nonpositive(a); },
                        [](double x, Kinks& k) { k.note(x); return std::min(x, 0.0); }, 0.05, 2, true);
    });
    reg("hinge", [](Rng& g, const std::string&) {
      return unary_case(g, [](const Tensor& a) { return hinge(a); },
                        [](double x, Kinks& k) { k.note(x); return std::max(x, 0.0); }, 0.05, 2, true);
    });
    reg("log", [](Rng& g, const std::string&) {
      return unary_case(g, [](const Tensor& a) { return log(a); }, [](double x, Kinks&) { return std::log(x); }, 0.2, 3, false);
    });
    reg("log_guarded", [](Rng& g, const std::string&) {
      return unary_case(g, [](const Tensor& a) { return log(a, LogGuard::kEpsilon); },
                        [](double x, Kinks&) { return glog(x); }, 0.2, 3, false);
    });
    reg("conv2d", [](Rng& g, const std::string&) { return conv_case(g); });
    reg("maxpool2x2", [](Rng& g, const std::string&) { return maxpool_case(g); });
    reg("nearest_upsample2x", [](Rng& g, const std::string&) { return upsample_case(g); });
    reg("concat_channels", [](Rng& g, const std::string&) { return concat_case(g); });
    reg("slice_channels", [](Rng& g, const std::string&) { return slice_case(g); });
    reg("sum", [](Rng& g, const std::string&) { return reduce_case(g, 0); });
    reg("mean", [](Rng& g, const std::string&) { return reduce_case(g, 1); });
    reg("masked_mean", [](Rng& g, const std::string&) { return reduce_case(g, 2); });
    reg("detach", [](Rng& g, const std::string&) { return detach_case(g); });
    reg("reuse", [](Rng& g, const std::string&) { return reuse_case(g); });
    reg("composite", [](Rng& g, const std::string&) { return composite_case(g); });
    reg("aggregate_inference", [](Rng& g, const std::string&) { return aggregate_inference_case(g); });
    reg("aggregate_training", [](Rng& g, const std::string&) { return aggregate_training_case(g); });
    reg("pb_bce", [](Rng& g, const std::string&) { return pb_bce_case(g); });
    reg("bga_plus", [](Rng& g, const std::string&) { return bga_plus_case(g); });
    reg("bga_minus", [](Rng& g, const std::string& inject) { return bga_minus_case(g, inject == "bga_minus_sign"); });
    reg("gkd", [](Rng& g, const std::string&) { return gkd_case(g); });
    reg("bfd", [](Rng& g, const std::string&) { return bfd_case(g, false); });
    reg("fd_mse", [](Rng& g, const std::string&) { return bfd_case(g, true); });
    reg("feature_kd", [](Rng& g, const std::string&) { return feature_kd_case(g); });
    reg("bga_mse_zero", [](Rng& g, const std::string&) { return outside_region_case(g, false); });
    reg("bga_bce_one", [](Rng& g, const std::string&) { return outside_region_case(g, true); });
    reg("total_objective", [](Rng& g, const std::string&) { return total_case(g); });
    return r;
  }();
  return cases;
}

json replay(const char* kind, const std::string& name, std::uint64_t seed, int instance, const Problem& p, std::size_t input,
            std::size_t index, double analytic, double numeric) {
  json inputs = json::array();
  for (std::size_t i = 0; i < p.shapes.size(); ++i) inputs.push_back({{"shape", p.shapes[i]}, {"values", p.values[i]}});
  return {{"kind", kind},         {"case", name},        {"seed", seed},         {"instance", instance}, {"input", input},
          {"index", index},      {"analytic", analytic}, {"numeric", numeric},   {"inputs", inputs},
          {"aux", p.aux}};
}

// Entries smaller than this are judged by absolute error only and left out
// of the reported relative error.
constexpr double kRelFloor = 1e-3;

GradCheckCaseResult check_case(const std::string& name, const Maker& make, const GradCheckOptions& opt) {
  GradCheckCaseResult res;
  res.name = name;
  const double kink_margin = 10.0 * opt.step;
  for (int inst = 0; inst < opt.instances; ++inst) {
    Rng rng(derive_seed(opt.seed, fnv1a64(name), static_cast<std::uint64_t>(inst)));
    Problem p;
    std::vector<Vec> base;
    for (int attempt = 0;; ++attempt) {
      p = make(rng, opt.inject);
      base.clear();
      for (const auto& v : p.values) base.push_back(Vec(v.begin(), v.end()));
      Kinks k;
      p.reference(base, k);
      if (k.gap >= kink_margin) break;
      if (attempt == 100) throw TrainingError("grad-check case " + name + ": could not draw an instance away from kinks");
    }

    std::vector<Tensor> inputs;
    for (std::size_t i = 0; i < p.shapes.size(); ++i) inputs.push_back(Tensor::from(p.shapes[i], p.values[i], true));
    const Tensor loss = p.forward(inputs);
    backward(loss);

    Kinks unused;
    const double ref = p.reference(base, unused);
    res.worst_forward = std::max(res.worst_forward, std::abs(static_cast<double>(loss.item()) - ref));
    if (std::abs(loss.item() - ref) > 1e-4 * std::max(1.0, std::abs(ref)) && res.passed) {
      res.passed = false;
      res.failure = replay("forward", name, opt.seed, inst, p, 0, 0, loss.item(), ref).dump();
    }

    for (std::size_t i = 0; i < inputs.size(); ++i) {
      const auto grad = inputs[i].has_grad() ? inputs[i].grad() : std::span<const float>{};
      for (std::size_t j = 0; j < base[i].size(); ++j) {
        const double a = grad.empty() ? 0.0 : grad[j];
        double n = 0.0;
        if (!p.zero_grad[i]) {
          std::vector<Vec> x = base;
          x[i][j] = base[i][j] + opt.step;
          Kinks k1;
          const double up = p.reference(x, k1);
          x[i][j] = base[i][j] - opt.step;
          const double down = p.reference(x, k1);
          n = (up - down) / (2.0 * opt.step);
        }
        const double abs_err = std::abs(a - n);
        const double rel = abs_err / std::max({std::abs(a), std::abs(n), 1e-300});
        res.worst_abs = std::max(res.worst_abs, abs_err);
        const bool ok = p.zero_grad[i] ? a == 0.0 : (abs_err <= opt.abs_tol || rel <= opt.rel_tol);
        if (std::max(std::abs(a), std::abs(n)) >= kRelFloor) res.worst_rel = std::max(res.worst_rel, rel);
        if (!ok && res.passed) {
          res.passed = false;
          res.failure = replay("gradient", name, opt.seed, inst, p, i, j, a, n).dump();
        }
      }
    }
    ++res.instances;
  }
  return res;
}

}  // namespace

bool GradCheckReport::passed() const {
  return std::all_of(cases.begin(), cases.end(), [](const auto& c) { return c.passed; });
}

const std::vector<std::string>& gradcheck_case_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& [name, make] : registry()) n.push_back(name);
    return n;
  }();
  return names;
}

const std::vector<std::string>& gradcheck_fault_names() {
  static const std::vector<std::string> names{"bga_minus_sign"};
  return names;
}

GradCheckReport run_grad_check(const GradCheckOptions& options) {
  if (options.instances < 1) throw ConfigError("grad-check needs at least one instance per case");
  if (!options.inject.empty()) {
    const auto& f = gradcheck_fault_names();
    if (std::find(f.begin(), f.end(), options.inject) == f.end()) {
      throw ConfigError("unknown fault injection '" + options.inject + "'");
    }
  }
  for (const auto& c : options.cases) {
    const auto& n = gradcheck_case_names();
    if (std::find(n.begin(), n.end(), c) == n.end()) throw ConfigError("unknown grad-check case '" + c + "'");
  }
  GradCheckReport report;
  for (const auto& [name, make] : registry()) {
    if (!options.cases.empty() && std::find(options.cases.begin(), options.cases.end(), name) == options.cases.end()) {
      continue;
    }
    report.cases.push_back(check_case(name, make, options));
  }
  return report;
}

}  // namespace bgadapt
