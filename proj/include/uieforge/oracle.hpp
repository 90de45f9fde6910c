#pragma once

// Straight-from-definition reference implementations used as test oracles.
// Scalar loops only; nothing here shares code with the library kernels.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

namespace oracle {

// Plain image: rgb[c][y][x] in [0,1].
struct Image {
  int h = 0, w = 0;
  std::vector<double> px;  // c*h*w + y*w + x
  double& at(int c, int y, int x) { return px[(c * h + y) * w + x]; }
  double at(int c, int y, int x) const { return px[(c * h + y) * w + x]; }
};

struct Lab {
  double L, a, b;
};

inline double srgb_linear(double v) {
  v = std::clamp(v, 0.0, 1.0);
  if (v <= 0.04045) return v / 12.92;
  return std::pow((v + 0.055) / 1.055, 2.4);
}

inline double f_lab(double t) {
  const double d = 6.0 / 29.0;
  if (t > d * d * d) return std::cbrt(t);
  return t / (3 * d * d) + 4.0 / 29.0;
}

inline Lab rgb_to_lab(double r, double g, double b) {
  const double M[3][3] = {{0.4124564, 0.3575761, 0.1804375},
                          {0.2126729, 0.7151522, 0.0721750},
                          {0.0193339, 0.1191920, 0.9503041}};
  const double lin[3] = {srgb_linear(r), srgb_linear(g), srgb_linear(b)};
  double xyz[3], white[3];
  for (int i = 0; i < 3; ++i) {
    xyz[i] = M[i][0] * lin[0] + M[i][1] * lin[1] + M[i][2] * lin[2];
    white[i] = M[i][0] + M[i][1] + M[i][2];
  }
  const double fx = f_lab(xyz[0] / white[0]), fy = f_lab(xyz[1] / white[1]), fz = f_lab(xyz[2] / white[2]);
  return {116 * fy - 16, 500 * (fx - fy), 200 * (fy - fz)};
}

// Triangular-kernel soft histogram over K evenly spaced centres on [lo, hi].
inline std::vector<double> soft_bins(double v, double lo, double hi, int K) {
  v = std::clamp(v, lo, hi);
  const double delta = (hi - lo) / (K - 1);
  std::vector<double> q(K);
  for (int j = 0; j < K; ++j) q[j] = std::max(0.0, 1.0 - std::abs(v - (lo + j * delta)) / delta);
  return q;
}

inline double cross_entropy(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0;
  for (std::size_t j = 0; j < p.size(); ++j) s -= p[j] * std::log(std::max(q[j], 1e-8));
  return s;
}

// Images are batches: vector of Image.
inline double loss_lab(const std::vector<Image>& gen, const std::vector<Image>& ref) {
  double total = 0;
  int count = 0;
  for (std::size_t n = 0; n < gen.size(); ++n)
    for (int y = 0; y < gen[n].h; ++y)
      for (int x = 0; x < gen[n].w; ++x) {
        const Lab g = rgb_to_lab(gen[n].at(0, y, x), gen[n].at(1, y, x), gen[n].at(2, y, x));
        const Lab r = rgb_to_lab(ref[n].at(0, y, x), ref[n].at(1, y, x), ref[n].at(2, y, x));
        total += (r.L - g.L) * (r.L - g.L);
        total += cross_entropy(soft_bins(r.a, -128, 127, 256), soft_bins(g.a, -128, 127, 256));
        total += cross_entropy(soft_bins(r.b, -128, 127, 256), soft_bins(g.b, -128, 127, 256));
        ++count;
      }
  return total / count;
}

inline double hue(const Lab& c) { return (c.a == 0 && c.b == 0) ? 0.0 : std::atan2(c.b, c.a); }

inline double wrap(double d) {
  const double pi = std::numbers::pi;
  while (d > pi) d -= 2 * pi;
  while (d <= -pi) d += 2 * pi;
  return d;
}

inline double loss_lch(const std::vector<Image>& gen, const std::vector<Image>& ref) {
  double total = 0;
  int count = 0;
  for (std::size_t n = 0; n < gen.size(); ++n)
    for (int y = 0; y < gen[n].h; ++y)
      for (int x = 0; x < gen[n].w; ++x) {
        const Lab g = rgb_to_lab(gen[n].at(0, y, x), gen[n].at(1, y, x), gen[n].at(2, y, x));
        const Lab r = rgb_to_lab(ref[n].at(0, y, x), ref[n].at(1, y, x), ref[n].at(2, y, x));
        total += cross_entropy(soft_bins(r.L, 0, 100, 256), soft_bins(g.L, 0, 100, 256));
        const double cg = std::sqrt(g.a * g.a + g.b * g.b), cr = std::sqrt(r.a * r.a + r.b * r.b);
        total += (cr - cg) * (cr - cg);
        const double dh = wrap(hue(r) - hue(g));
        total += dh * dh;
        ++count;
      }
  return total / count;
}

inline std::pair<double, double> loss_gan(const std::vector<double>& real, const std::vector<double>& fake) {
  auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  double d = 0, g = 0;
  for (double r : real) d -= std::log(sig(r)) / real.size();
  for (double f : fake) {
    d -= std::log(1 - sig(f)) / fake.size();
    g -= std::log(sig(f)) / fake.size();
  }
  return {d, g};
}

inline double gray(const Image& im, int y, int x) {
  return 0.299 * im.at(0, y, x) + 0.587 * im.at(1, y, x) + 0.114 * im.at(2, y, x);
}

// Explicit 11x11 Gaussian window evaluated at every valid position.
inline double ssim(const Image& a, const Image& b) {
  double w[11][11], ws = 0;
  for (int i = 0; i < 11; ++i)
    for (int j = 0; j < 11; ++j) {
      w[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / (2 * 1.5 * 1.5));
      ws += w[i][j];
    }
  const double c1 = 1e-4, c2 = 9e-4;
  double total = 0;
  int count = 0;
  for (int y = 0; y + 11 <= a.h; ++y)
    for (int x = 0; x + 11 <= a.w; ++x) {
      double mx = 0, my = 0;
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          mx += w[i][j] / ws * gray(a, y + i, x + j);
          my += w[i][j] / ws * gray(b, y + i, x + j);
        }
      double vx = 0, vy = 0, cxy = 0;
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          const double dx = gray(a, y + i, x + j) - mx, dy = gray(b, y + i, x + j) - my;
          vx += w[i][j] / ws * dx * dx;
          vy += w[i][j] / ws * dy * dy;
          cxy += w[i][j] / ws * dx * dy;
        }
      total += (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  return total / count;
}

// --- UIQM ------------------------------------------------------------------------

inline double trimmed_mean(std::vector<double> v, double& variance) {
  std::sort(v.begin(), v.end());
  const int K = int(v.size());
  const int lo = int(std::ceil(0.1 * K)), hi = int(std::floor(0.1 * K));
  double mu = 0;
  for (int i = lo; i < K - hi; ++i) mu += v[i];
  mu /= (K - lo - hi);
  variance = 0;
  for (double x : v) variance += (x - mu) * (x - mu);
  variance /= K;
  return mu;
}

inline double uicm(const Image& im) {
  std::vector<double> rg, yb;
  for (int y = 0; y < im.h; ++y)
    for (int x = 0; x < im.w; ++x) {
      const double R = 255 * im.at(0, y, x), G = 255 * im.at(1, y, x), B = 255 * im.at(2, y, x);
      rg.push_back(R - G);
      yb.push_back((R + G) / 2 - B);
    }
  double vrg, vyb;
  const double mrg = trimmed_mean(rg, vrg), myb = trimmed_mean(yb, vyb);
  return -0.0268 * std::sqrt(mrg * mrg + myb * myb) + 0.1586 * std::sqrt(vrg + vyb);
}

// Block grids with the leftover margin at each corner, averaged.
template <class BlockFn>
double corner_grids(int h, int w, BlockFn fn) {
  const int bh = std::min(10, h), bw = std::min(10, w);
  const int k1 = h / bh, k2 = w / bw;
  double total = 0;
  for (int r0 : {0, h - k1 * bh})
    for (int c0 : {0, w - k2 * bw}) {
      double s = 0;
      for (int i = 0; i < k1; ++i)
        for (int j = 0; j < k2; ++j) s += fn(r0 + i * bh, c0 + j * bw, bh, bw);
      total += s / (k1 * k2);
    }
  return total / 4;
}

inline double uism(const Image& im) {
  const double lambda[3] = {0.299, 0.587, 0.114};
  double total = 0;
  for (int c = 0; c < 3; ++c) {
    auto px = [&](int y, int x) {
      auto refl = [](int i, int n) {
        if (n == 1) return 0;
        while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - 1 - i;
        return i;
      };
      return 255 * im.at(c, refl(y, im.h), refl(x, im.w));
    };
    std::vector<double> mag(im.h * im.w);
    double mx = 0;
    for (int y = 0; y < im.h; ++y)
      for (int x = 0; x < im.w; ++x) {
        double gx = 0, gy = 0;
        const int kx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
        for (int i = -1; i <= 1; ++i)
          for (int j = -1; j <= 1; ++j) {
            gx += kx[i + 1][j + 1] * px(y + i, x + j);
            gy += kx[j + 1][i + 1] * px(y + i, x + j);
          }
        mag[y * im.w + x] = std::sqrt(gx * gx + gy * gy);
        mx = std::max(mx, mag[y * im.w + x]);
      }
    std::vector<double> edge(mag.size());
    for (int y = 0; y < im.h; ++y)
      for (int x = 0; x < im.w; ++x)
        edge[y * im.w + x] = (mx > 0 ? mag[y * im.w + x] * 255 / mx : 0) * 255 * im.at(c, y, x);
    const double e = corner_grids(im.h, im.w, [&](int r, int q, int bh, int bw) {
      double lo = 1e300, hi = -1e300;
      for (int y = r; y < r + bh; ++y)
        for (int x = q; x < q + bw; ++x) {
          lo = std::min(lo, edge[y * im.w + x]);
          hi = std::max(hi, edge[y * im.w + x]);
        }
      return lo > 1e-6 ? 2 * std::log(hi / lo) : 0.0;
    });
    total += lambda[c] * e;
  }
  return total;
}

inline double uiconm(const Image& im) {
  return corner_grids(im.h, im.w, [&](int r, int q, int bh, int bw) {
    double lo = 1e300, hi = -1e300;
    for (int c = 0; c < 3; ++c)
      for (int y = r; y < r + bh; ++y)
        for (int x = q; x < q + bw; ++x) {
          lo = std::min(lo, 255 * im.at(c, y, x));
          hi = std::max(hi, 255 * im.at(c, y, x));
        }
    const double top = hi - lo, bot = hi + lo;
    return (top > 0 && bot > 0) ? -(top / bot) * std::log(top / bot) : 0.0;
  });
}

inline double uiqm(const Image& im) { return 0.0282 * uicm(im) + 0.2953 * uism(im) + 3.5753 * uiconm(im); }

// --- UCIQE -----------------------------------------------------------------------

inline double uciqe(const Image& im) {
  std::vector<double> L, C;
  double sat = 0;
  for (int y = 0; y < im.h; ++y)
    for (int x = 0; x < im.w; ++x) {
      const Lab c = rgb_to_lab(im.at(0, y, x), im.at(1, y, x), im.at(2, y, x));
      L.push_back(c.L / 100);
      C.push_back(std::sqrt(c.a * c.a + c.b * c.b) / 100);
      sat += L.back() > 0 ? C.back() / L.back() : 0;
    }
  const int n = int(L.size());
  double mc = 0;
  for (double c : C) mc += c / n;
  double vc = 0;
  for (double c : C) vc += (c - mc) * (c - mc) / n;
  std::sort(L.begin(), L.end());
  const int k = std::max(1, int(std::lround(0.01 * n)));
  double top = 0, bot = 0;
  for (int i = 0; i < k; ++i) {
    bot += L[i] / k;
    top += L[n - 1 - i] / k;
  }
  return 0.4680 * std::sqrt(vc) + 0.2745 * (top - bot) + 0.2576 * sat / n;
}

}  // namespace oracle
