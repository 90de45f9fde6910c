#pragma once

// Multi-scale-gradient patch discriminator. Block i works at scale 1/2^i and
// sees the previous block's output, the generator decoder map of that scale
// (or its real-side stand-in) and a 1x1 projection of the pooled candidate.

#include <array>
#include <string>

#include "uieforge/generator.hpp"

namespace uieforge {

template <class T>
struct DiscriminatorInput {
  Var<T> image;                // (N,3,H,W)
  std::array<Var<T>, 4> taps;  // scales 1, 1/2, 1/4, 1/8 with widths C1..C4
};

template <class T>
class Discriminator {
 public:
  explicit Discriminator(GeneratorConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  const GeneratorConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  void init(std::uint64_t seed) {
    params_ = ParamStore<T>();
    Initializer<T> ini(params_, seed);
    const auto c = cfg_.channels();
    for (int i = 0; i < 4; ++i) {
      const std::string b = "disc.block" + std::to_string(i + 1);
      const std::size_t prev = i == 0 ? 3 : c[i - 1];
      ini.conv(b + ".proj", 3, c[i], 1);
      ini.conv(b + ".conv1", prev + 2 * c[i], c[i], 3, false);
      ini.conv(b + ".conv2", c[i], c[i], 3, false);
      ini.conv(b + ".down", c[i], c[i], 3);
      ini.conv("disc.real" + std::to_string(i + 1), 3, c[i], 1);
    }
    ini.conv("disc.out", c[3], 1, 1);
  }

  // Pooled reference projected to the decoder tap widths.
  std::array<Var<T>, 4> real_side_taps(Binder<T>& p, Var<T> ref) const {
    std::array<Var<T>, 4> taps;
    for (int i = 0; i < 4; ++i) {
      auto x = i == 0 ? ref : avg_pool(ref, std::size_t(1) << i);
      taps[i] = conv(p, "disc.real" + std::to_string(i + 1), x);
    }
    return taps;
  }

  // (N,1,H/16,W/16) logits.
  Var<T> discriminate(Binder<T>& p, const DiscriminatorInput<T>& in) const {
    const auto c = cfg_.channels();
    const auto& s = in.image.shape();
    if (s.size() != 4 || s[1] != 3 || s[2] % 16 || s[3] % 16)
      shape_fail("discriminate", "candidate must be (N,3,H,W) with H,W divisible by 16, got " + to_string(s));
    auto x = in.image;
    for (int i = 0; i < 4; ++i) {
      const std::string b = "disc.block" + std::to_string(i + 1);
      const std::size_t f = std::size_t(1) << i;
      const Shape want{s[0], c[i], s[2] / f, s[3] / f};
      if (!in.taps[i].tape) throw Error("discriminate: missing tap for scale 1/" + std::to_string(f));
      if (in.taps[i].shape() != want) shape_fail("discriminate tap " + std::to_string(i + 1), want, in.taps[i].shape());
      auto proj = conv(p, b + ".proj", i == 0 ? in.image : avg_pool(in.image, f));
      x = concat<T>({x, in.taps[i], proj}, 1);
      x = conv_unit(p, b + ".conv1", x);
      x = conv_unit(p, b + ".conv2", x);
      x = leaky_relu(conv(p, b + ".down", x, 2));
    }
    return conv(p, "disc.out", x);
  }

 private:
  GeneratorConfig cfg_;
  ParamStore<T> params_;
};

}  // namespace uieforge
