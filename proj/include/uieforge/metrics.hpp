#pragma once

// Full-reference (PSNR, SSIM) and no-reference (UIQM, UCIQE) image quality
// metrics. Images are (3,H,W) or (1,3,H,W) tensors with values in [0,1].

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "uieforge/color_space.hpp"

namespace uieforge {

inline constexpr double kPsnrCap = 100.0;

struct UiqmWeights {
  double c1 = 0.0282, c2 = 0.2953, c3 = 3.5753;
};

struct UciqeWeights {
  double c1 = 0.4680, c2 = 0.2745, c3 = 0.2576;
};

namespace detail {

struct Planes {
  std::size_t h = 0, w = 0;
  std::array<std::vector<double>, 3> c;  // R, G, B, each row-major h*w
};

template <class T>
Planes planes(const Tensor<T>& img, const std::string& op) {
  const auto& s = img.shape();
  const bool chw = s.size() == 3 && s[0] == 3;
  const bool nchw = s.size() == 4 && s[0] == 1 && s[1] == 3;
  if (!chw && !nchw) shape_fail(op, "expected (3,H,W) or (1,3,H,W), got " + to_string(s));
  Planes p;
  p.h = s[s.size() - 2];
  p.w = s[s.size() - 1];
  const std::size_t hw = p.h * p.w;
  for (int k = 0; k < 3; ++k) p.c[k].assign(img.data() + k * hw, img.data() + (k + 1) * hw);
  return p;
}

inline std::vector<double> luma(const Planes& p) {
  std::vector<double> y(p.h * p.w);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = 0.299 * p.c[0][i] + 0.587 * p.c[1][i] + 0.114 * p.c[2][i];
  return y;
}

inline std::vector<double> gaussian_kernel(int size, double sigma) {
  std::vector<double> k(size);
  double s = 0;
  for (int i = 0; i < size; ++i) {
    const double x = i - (size - 1) / 2.0;
    k[i] = std::exp(-x * x / (2 * sigma * sigma));
    s += k[i];
  }
  for (auto& v : k) v /= s;
  return k;
}

// Valid-mode separable filtering: (h-k+1) x (w-k+1) output.
inline std::vector<double> filter_valid(const std::vector<double>& x, std::size_t h, std::size_t w,
                                        const std::vector<double>& k) {
  const std::size_t n = k.size(), ow = w - n + 1, oh = h - n + 1;
  std::vector<double> rows(h * ow), out(oh * ow);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < ow; ++c) {
      double s = 0;
      for (std::size_t j = 0; j < n; ++j) s += k[j] * x[r * w + c + j];
      rows[r * ow + c] = s;
    }
  for (std::size_t r = 0; r < oh; ++r)
    for (std::size_t c = 0; c < ow; ++c) {
      double s = 0;
      for (std::size_t j = 0; j < n; ++j) s += k[j] * rows[(r + j) * ow + c];
      out[r * ow + c] = s;
    }
  return out;
}

// Sobel gradient magnitude; borders mirror with the edge pixel repeated.
inline std::vector<double> sobel_magnitude(const std::vector<double>& x, std::size_t h, std::size_t w) {
  auto reflect = [](long i, long n) {
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - 1 - i;
    return i;
  };
  std::vector<double> m(h * w);
  for (long r = 0; r < long(h); ++r)
    for (long c = 0; c < long(w); ++c) {
      auto at = [&](long dr, long dc) { return x[reflect(r + dr, h) * w + reflect(c + dc, w)]; };
      const double gx = (at(-1, 1) + 2 * at(0, 1) + at(1, 1)) - (at(-1, -1) + 2 * at(0, -1) + at(1, -1));
      const double gy = (at(1, -1) + 2 * at(1, 0) + at(1, 1)) - (at(-1, -1) + 2 * at(-1, 0) + at(-1, 1));
      m[r * w + c] = std::hypot(gx, gy);
    }
  return m;
}

// Block grid over an h x w image: block side `b` (shrunk to fit small images),
// floor(h/b) x floor(w/b) blocks. The leftover margin is placed at each of the
// four corners in turn and the measure is averaged, which keeps it invariant
// to flips when the side is not a multiple of b.
template <class F>
double block_measure(std::size_t h, std::size_t w, std::size_t b, F per_grid) {
  const std::size_t bh = std::min(b, h), bw = std::min(b, w);
  const std::size_t k1 = h / bh, k2 = w / bw;
  const std::size_t off_r[2] = {0, h - k1 * bh}, off_c[2] = {0, w - k2 * bw};
  double total = 0;
  for (auto r0 : off_r)
    for (auto c0 : off_c) total += per_grid(r0, c0, k1, k2, bh, bw);
  return total / 4;
}

// Enhancement measure: 2/(k1 k2) sum log(max/min). Blocks whose minimum is
// (numerically) zero contribute nothing.
inline constexpr double kEmeFloor = 1e-6;

inline double eme(const std::vector<double>& x, std::size_t h, std::size_t w, std::size_t b) {
  return block_measure(h, w, b, [&](std::size_t r0, std::size_t c0, std::size_t k1, std::size_t k2, std::size_t bh,
                                    std::size_t bw) {
    double s = 0;
    for (std::size_t i = 0; i < k1; ++i)
      for (std::size_t j = 0; j < k2; ++j) {
        double lo = std::numeric_limits<double>::infinity(), hi = -lo;
        for (std::size_t r = 0; r < bh; ++r)
          for (std::size_t c = 0; c < bw; ++c) {
            const double v = x[(r0 + i * bh + r) * w + c0 + j * bw + c];
            lo = std::min(lo, v);
            hi = std::max(hi, v);
          }
        if (lo > kEmeFloor) s += std::log(hi / lo);
      }
    return 2.0 / double(k1 * k2) * s;
  });
}

inline std::pair<double, double> trimmed_stats(std::vector<double> x, double lo_frac, double hi_frac) {
  std::sort(x.begin(), x.end());
  const std::size_t n = x.size();
  const std::size_t tl = std::size_t(std::ceil(lo_frac * double(n)));
  const std::size_t tr = std::size_t(std::floor(hi_frac * double(n)));
  double mu = 0;
  if (tl + tr < n) {
    for (std::size_t i = tl; i < n - tr; ++i) mu += x[i];
    mu /= double(n - tl - tr);
  }
  double var = 0;
  for (auto v : x) var += (v - mu) * (v - mu);
  return {mu, var / double(n)};
}

}  // namespace detail

template <class T>
double psnr(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_fail("psnr", a.shape(), b.shape());
  double mse = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = double(a[i]) - double(b[i]);
    mse += d * d;
  }
  mse /= double(a.size());
  if (mse == 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

// Mean SSIM of the luma planes over all fully contained 11x11 windows.
template <class T>
double ssim(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_fail("ssim", a.shape(), b.shape());
  const auto pa = detail::planes(a, "ssim"), pb = detail::planes(b, "ssim");
  constexpr int kWin = 11;
  if (pa.h < kWin || pa.w < kWin)
    throw Error("ssim: image " + std::to_string(pa.h) + "x" + std::to_string(pa.w) + " smaller than the 11x11 window");
  const auto x = detail::luma(pa), y = detail::luma(pb);
  std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto k = detail::gaussian_kernel(kWin, 1.5);
  const auto mx = detail::filter_valid(x, pa.h, pa.w, k), my = detail::filter_valid(y, pa.h, pa.w, k);
  const auto sxx = detail::filter_valid(xx, pa.h, pa.w, k), syy = detail::filter_valid(yy, pa.h, pa.w, k);
  const auto sxy = detail::filter_valid(xy, pa.h, pa.w, k);
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double s = 0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cxy = sxy[i] - mx[i] * my[i];
    s += (2 * mx[i] * my[i] + c1) * (2 * cxy + c2) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
  }
  return s / double(mx.size());
}

struct UiqmParts {
  double uicm = 0, uism = 0, uiconm = 0;
};

template <class T>
UiqmParts uiqm_parts(const Tensor<T>& img) {
  auto p = detail::planes(img, "uiqm");
  for (auto& ch : p.c)
    for (auto& v : ch) v *= 255.0;
  const std::size_t n = p.h * p.w;
  constexpr std::size_t kBlock = 10;
  UiqmParts out;

  std::vector<double> rg(n), yb(n);
  for (std::size_t i = 0; i < n; ++i) {
    rg[i] = p.c[0][i] - p.c[1][i];
    yb[i] = 0.5 * (p.c[0][i] + p.c[1][i]) - p.c[2][i];
  }
  const auto [mu_rg, var_rg] = detail::trimmed_stats(rg, 0.1, 0.1);
  const auto [mu_yb, var_yb] = detail::trimmed_stats(yb, 0.1, 0.1);
  out.uicm = -0.0268 * std::sqrt(mu_rg * mu_rg + mu_yb * mu_yb) + 0.1586 * std::sqrt(var_rg + var_yb);

  const double lambda[3] = {0.299, 0.587, 0.114};
  for (int k = 0; k < 3; ++k) {
    auto edge = detail::sobel_magnitude(p.c[k], p.h, p.w);
    const double mx = *std::max_element(edge.begin(), edge.end());
    for (std::size_t i = 0; i < n; ++i) edge[i] = (mx > 0 ? edge[i] * 255.0 / mx : 0.0) * p.c[k][i];
    out.uism += lambda[k] * detail::eme(edge, p.h, p.w, kBlock);
  }

  out.uiconm = detail::block_measure(p.h, p.w, kBlock, [&](std::size_t r0, std::size_t c0, std::size_t k1,
                                                           std::size_t k2, std::size_t bh, std::size_t bw) {
    double s = 0;
    for (std::size_t i = 0; i < k1; ++i)
      for (std::size_t j = 0; j < k2; ++j) {
        double lo = std::numeric_limits<double>::infinity(), hi = -lo;
        for (int ch = 0; ch < 3; ++ch)
          for (std::size_t r = 0; r < bh; ++r)
            for (std::size_t c = 0; c < bw; ++c) {
              const double v = p.c[ch][(r0 + i * bh + r) * p.w + c0 + j * bw + c];
              lo = std::min(lo, v);
              hi = std::max(hi, v);
            }
        const double top = hi - lo, bot = hi + lo;
        if (top > 0 && bot > 0) s += (top / bot) * std::log(top / bot);
      }
    return -s / double(k1 * k2);
  });
  return out;
}

template <class T>
double uiqm(const Tensor<T>& img, const UiqmWeights& w = {}) {
  const auto p = uiqm_parts(img);
  return w.c1 * p.uicm + w.c2 * p.uism + w.c3 * p.uiconm;
}

struct UciqeParts {
  double chroma_std = 0, luma_contrast = 0, saturation = 0;
};

template <class T>
UciqeParts uciqe_parts(const Tensor<T>& img) {
  const auto& s = img.shape();
  Tensor<double> x = img.template cast<double>();
  if (s.size() == 3) x = std::move(x).reshaped({1, s[0], s[1], s[2]});
  detail::planes(x, "uciqe");
  const auto lab = rgb_to_lab(x);
  const std::size_t n = lab.dim(2) * lab.dim(3);
  std::vector<double> L(n), C(n);
  double c_mean = 0, sat = 0;
  for (std::size_t i = 0; i < n; ++i) {
    L[i] = lab[i] / 100.0;
    C[i] = std::hypot(lab[n + i], lab[2 * n + i]) / 100.0;
    c_mean += C[i];
    sat += L[i] > 0 ? C[i] / L[i] : 0.0;
  }
  c_mean /= double(n);
  UciqeParts out;
  double var = 0;
  for (auto c : C) var += (c - c_mean) * (c - c_mean);
  out.chroma_std = std::sqrt(var / double(n));
  std::sort(L.begin(), L.end());
  const std::size_t k = std::max<std::size_t>(1, std::size_t(std::lround(0.01 * double(n))));
  double top = 0, bot = 0;
  for (std::size_t i = 0; i < k; ++i) {
    bot += L[i];
    top += L[n - 1 - i];
  }
  out.luma_contrast = (top - bot) / double(k);
  out.saturation = sat / double(n);
  return out;
}

template <class T>
double uciqe(const Tensor<T>& img, const UciqeWeights& w = {}) {
  const auto p = uciqe_parts(img);
  return w.c1 * p.chroma_std + w.c2 * p.luma_contrast + w.c3 * p.saturation;
}

// Per-image rows and corpus aggregates; missing full-reference values are empty.
struct MetricRow {
  std::string image;
  std::optional<double> psnr, ssim;
  double uiqm = 0, uciqe = 0;
};

class MetricReport {
 public:
  void add(MetricRow r) { rows_.push_back(std::move(r)); }
  const std::vector<MetricRow>& rows() const { return rows_; }
  bool empty() const { return rows_.empty(); }

  MetricRow mean() const {
    MetricRow m{"__mean__", std::nullopt, std::nullopt, 0, 0};
    if (rows_.empty()) return m;
    double ps = 0, ss = 0;
    std::size_t nref = 0;
    for (const auto& r : rows_) {
      m.uiqm += r.uiqm;
      m.uciqe += r.uciqe;
      if (r.psnr && r.ssim) {
        ps += *r.psnr;
        ss += *r.ssim;
        ++nref;
      }
    }
    m.uiqm /= double(rows_.size());
    m.uciqe /= double(rows_.size());
    if (nref) {
      m.psnr = ps / double(nref);
      m.ssim = ss / double(nref);
    }
    return m;
  }

  // Population standard deviation per column (same layout as mean()).
  MetricRow stddev() const {
    const auto mu = mean();
    MetricRow s{"__std__", std::nullopt, std::nullopt, 0, 0};
    if (rows_.empty()) return s;
    double ps = 0, ss = 0;
    std::size_t nref = 0;
    for (const auto& r : rows_) {
      s.uiqm += (r.uiqm - mu.uiqm) * (r.uiqm - mu.uiqm);
      s.uciqe += (r.uciqe - mu.uciqe) * (r.uciqe - mu.uciqe);
      if (r.psnr && r.ssim) {
        ps += (*r.psnr - *mu.psnr) * (*r.psnr - *mu.psnr);
        ss += (*r.ssim - *mu.ssim) * (*r.ssim - *mu.ssim);
        ++nref;
      }
    }
    s.uiqm = std::sqrt(s.uiqm / double(rows_.size()));
    s.uciqe = std::sqrt(s.uciqe / double(rows_.size()));
    if (nref) {
      s.psnr = std::sqrt(ps / double(nref));
      s.ssim = std::sqrt(ss / double(nref));
    }
    return s;
  }

  void write_csv(std::ostream& os) const {
    os << "image,psnr,ssim,uiqm,uciqe\n";
    for (const auto& r : rows_) write_row(os, r);
    write_row(os, mean());
  }

 private:
  static void write_row(std::ostream& os, const MetricRow& r) {
    char buf[64];
    auto fmt = [&](double v) {
      std::snprintf(buf, sizeof buf, "%.6f", v);
      return std::string(buf);
    };
    os << r.image << ',' << (r.psnr ? fmt(*r.psnr) : "") << ',' << (r.ssim ? fmt(*r.ssim) : "") << ','
       << fmt(r.uiqm) << ',' << fmt(r.uciqe) << '\n';
  }

  std::vector<MetricRow> rows_;
};

}  // namespace uieforge
