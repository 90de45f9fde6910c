#pragma once

#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "uieforge/grad_check.hpp"

namespace uieforge::testing {

inline InputSampler<double> uniform_inputs(std::vector<Shape> shapes, double lo = -1, double hi = 1) {
  return [shapes, lo, hi](std::mt19937_64& rng) {
    std::vector<Tensor<double>> out;
    for (const auto& s : shapes) out.push_back(Tensor<double>::uniform(s, lo, hi, rng));
    return out;
  };
}

inline void expect_grad(const GradFn<double>& fn, const InputSampler<double>& sampler, double tol,
                        GradCheckOptions opt) {
  auto rep = grad_check<double>(fn, sampler, tol, opt);
  EXPECT_TRUE(rep.passed) << rep.message;
}

inline void expect_grad(const GradFn<double>& fn, const InputSampler<double>& sampler, double tol = 1e-6,
                        std::uint64_t seed = 1) {
  GradCheckOptions opt;
  opt.seed = seed;
  expect_grad(fn, sampler, tol, opt);
}

// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("uieforge-" + tag + "-" + std::to_string(rd()));
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

}  // namespace uieforge::testing

#include "uieforge/oracle.hpp"

namespace uieforge::testing {

inline std::vector<oracle::Image> to_oracle(const Tensor<double>& t) {
  const std::size_t n = t.dim(0), h = t.dim(2), w = t.dim(3);
  std::vector<oracle::Image> out;
  for (std::size_t b = 0; b < n; ++b) {
    oracle::Image im{int(h), int(w), {}};
    im.px.assign(t.data() + b * 3 * h * w, t.data() + (b + 1) * 3 * h * w);
    out.push_back(std::move(im));
  }
  return out;
}

}  // namespace uieforge::testing
