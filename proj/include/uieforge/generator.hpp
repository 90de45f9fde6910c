#pragma once

// U-shaped enhancement generator: multi-scale convolutional encoder, a
// spatial transformer at the 1/16 bottleneck, a channel-wise multi-scale
// fusion transformer replacing the skip connections, and a convolutional
// decoder whose per-scale outputs are exposed for the discriminator.

#include <array>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "uieforge/nn.hpp"

namespace uieforge {

struct GeneratorConfig {
  std::size_t patch = 32;
  std::array<std::size_t, 4> widths{64, 128, 256, 512};
  std::size_t heads = 4;
  std::size_t layers = 4;
  std::size_t image_size = 256;
  double width_mult = 1.0;

  // Channel widths after the desk-scale multiplier.
  std::array<std::size_t, 4> channels() const {
    std::array<std::size_t, 4> c{};
    for (int i = 0; i < 4; ++i)
      c[i] = std::max<std::size_t>(1, std::size_t(std::lround(double(widths[i]) * width_mult)));
    return c;
  }

  std::size_t total_channels() const {
    const auto c = channels();
    return c[0] + c[1] + c[2] + c[3];
  }

  // Tokens per CMSFFT scale: (side / patch)^2.
  std::size_t fusion_tokens() const { return (image_size / patch) * (image_size / patch); }
  std::size_t bottleneck_side() const { return image_size / 16; }
  std::size_t bottleneck_tokens() const { return bottleneck_side() * bottleneck_side(); }

  void validate() const {
    if (!(width_mult > 0 && width_mult <= 1)) throw ConfigError("width_mult must be in (0, 1]");
    if (patch < 8 || patch % 8) throw ConfigError("patch must be a positive multiple of 8");
    if (image_size == 0 || image_size % 16 || image_size % patch)
      throw ConfigError("image_size " + std::to_string(image_size) + " must be divisible by 16 and by patch " +
                        std::to_string(patch));
    if (heads == 0 || layers == 0) throw ConfigError("heads and layers must be positive");
    if (channels()[3] % heads)
      throw ConfigError("bottleneck width " + std::to_string(channels()[3]) + " not divisible by " +
                        std::to_string(heads) + " heads");
  }
};

template <class T>
struct EncoderFeatures {
  std::array<Var<T>, 4> maps;  // F1..F4 at scales 1, 1/2, 1/4, 1/8
  Var<T> bottleneck;           // 1/16, C4 channels
};

template <class T>
struct GeneratorOutput {
  Var<T> image;               // (N,3,H,W) in [0,1]
  std::array<Var<T>, 4> taps;  // decoder maps at scales 1, 1/2, 1/4, 1/8 (widths C1..C4)
};

template <class T>
class Generator {
 public:
  explicit Generator(GeneratorConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  const GeneratorConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  // Centered uniform(1/sqrt(fan_in)) weights, zero biases, zero position embedding.
  void init(std::uint64_t seed) {
    params_ = ParamStore<T>();
    Initializer<T> ini(params_, seed);
    const auto c = cfg_.channels();
    // Encoder.
    ini.conv("enc.block1.conv1", 3, c[0], 3, false);
    ini.conv("enc.block1.conv2", c[0], c[0], 3, false);
    for (int i = 1; i < 4; ++i) {
      const std::string b = "enc.block" + std::to_string(i + 1);
      ini.conv("enc.down" + std::to_string(i + 1), c[i - 1], c[i - 1], 3);
      ini.conv("enc.scale" + std::to_string(i + 1) + ".proj", 3, c[i - 1], 1);
      ini.conv(b + ".conv1", c[i - 1], c[i], 3, false);
      ini.conv(b + ".conv2", c[i], c[i], 3, false);
    }
    ini.conv("enc.bottleneck", c[3], c[3], 3);
    // Spatial transformer.
    const std::size_t w4 = c[3];
    ini.linear("sgfmt.embed", w4, w4);
    ini.constant("sgfmt.pe", {cfg_.bottleneck_tokens(), w4}, T(0));
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      const std::string p = "sgfmt.layer" + std::to_string(l);
      ini.layer_norm(p + ".ln1", w4);
      for (const char* n : {".attn.q", ".attn.k", ".attn.v", ".attn.o"}) ini.linear(p + n, w4, w4);
      ini.layer_norm(p + ".ln2", w4);
      ini.linear(p + ".ffn.fc1", w4, 4 * w4);
      ini.linear(p + ".ffn.fc2", 4 * w4, w4);
    }
    // Channel-wise fusion transformer.
    const std::size_t cw = cfg_.total_channels();
    for (int i = 0; i < 4; ++i) {
      const std::size_t k = patch_size(i);
      ini.conv("cmsfft.patch" + std::to_string(i + 1), c[i], c[i], k);
    }
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      const std::string p = "cmsfft.layer" + std::to_string(l);
      for (std::size_t h = 0; h < cfg_.heads; ++h) {
        const std::string hp = p + ".head" + std::to_string(h);
        for (int i = 0; i < 4; ++i) ini.fan_in_uniform(hp + ".wq" + std::to_string(i + 1), {c[i], c[i]}, c[i]);
        ini.fan_in_uniform(hp + ".wk", {cw, cw}, cw);
        ini.fan_in_uniform(hp + ".wv", {cw, cw}, cw);
      }
      for (int i = 0; i < 4; ++i) {
        const std::string s = std::to_string(i + 1);
        ini.layer_norm(p + ".ln" + s, c[i]);
        ini.linear(p + ".mlp" + s + ".fc1", c[i], 4 * c[i]);
        ini.linear(p + ".mlp" + s + ".fc2", 4 * c[i], c[i]);
      }
    }
    // Decoder: blocks at scales 1/8 .. 1, named by the encoder level they pair with.
    for (int i = 3; i >= 0; --i) {
      const std::string b = "dec.block" + std::to_string(i + 1);
      const std::size_t in = i == 3 ? c[3] : c[i + 1];
      ini.conv(b + ".up", in, c[i], 3);
      ini.conv(b + ".conv1", 2 * c[i], c[i], 3, false);
      ini.conv(b + ".conv2", c[i], c[i], 3, false);
    }
    ini.conv("dec.out", c[0], 3, 1);
  }

  // Kernel (and stride) of the patch projection at level i (0-based): P / 2^i.
  std::size_t patch_size(int level) const { return cfg_.patch >> level; }

  EncoderFeatures<T> encode(Binder<T>& p, Var<T> img) const {
    check_input(img);
    EncoderFeatures<T> f;
    auto x = conv_unit(p, "enc.block1.conv1", img);
    f.maps[0] = conv_unit(p, "enc.block1.conv2", x);
    for (int i = 1; i < 4; ++i) {
      const std::string s = std::to_string(i + 1);
      auto down = conv(p, "enc.down" + s, f.maps[i - 1], 2);
      auto side = conv(p, "enc.scale" + s + ".proj", avg_pool(img, std::size_t(1) << i));
      x = add(down, side);
      x = conv_unit(p, "enc.block" + s + ".conv1", x);
      f.maps[i] = conv_unit(p, "enc.block" + s + ".conv2", x);
    }
    f.bottleneck = conv(p, "enc.bottleneck", f.maps[3], 2);
    return f;
  }

  // Bottleneck map (N,C4,s/16,s/16) -> same shape.
  Var<T> sgfmt(Binder<T>& p, Var<T> bottleneck) const {
    const std::size_t side = bottleneck.dim(2);
    auto pe = p("sgfmt.pe");
    const std::size_t tokens = side * bottleneck.dim(3);
    if (pe.dim(0) != tokens || pe.dim(1) != bottleneck.dim(1))
      shape_fail("sgfmt", "position embedding " + to_string(pe.shape()) + " does not match " +
                              std::to_string(tokens) + " tokens of width " + std::to_string(bottleneck.dim(1)));
    auto s = add_batched(linear(p, "sgfmt.embed", map_to_tokens(bottleneck)), pe);
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      const std::string lp = "sgfmt.layer" + std::to_string(l);
      s = add(self_attention(p, lp + ".attn", layer_norm(p, lp + ".ln1", s)), s);
      auto h = layer_norm(p, lp + ".ln2", s);
      h = linear(p, lp + ".ffn.fc2", leaky_relu(linear(p, lp + ".ffn.fc1", h)));
      s = add(h, s);
    }
    return tokens_to_map(s, side, bottleneck.dim(3));
  }

  // Per-scale token sequences S_i, each (N, d, C_i).
  std::array<Var<T>, 4> fusion_tokens(Binder<T>& p, const EncoderFeatures<T>& f) const {
    std::array<Var<T>, 4> s;
    for (int i = 0; i < 4; ++i) {
      auto w = p("cmsfft.patch" + std::to_string(i + 1) + ".weight");
      auto b = p("cmsfft.patch" + std::to_string(i + 1) + ".bias");
      s[i] = map_to_tokens(conv2d(f.maps[i], w, b, patch_size(i), 0));
      if (i > 0 && s[i].dim(1) != s[0].dim(1))
        throw Error("cmsfft: token count mismatch across scales (" + std::to_string(s[i].dim(1)) + " vs " +
                    std::to_string(s[0].dim(1)) + ")");
    }
    return s;
  }

  // Softmax-normalised channel similarity for one head and scale: (N, C_i, C).
  Var<T> channel_attention_weights(Var<T> q, Var<T> k) const {
    const std::size_t n = q.dim(0), ci = q.dim(2), c = k.dim(2);
    auto sim = scale(matmul(transpose(q), k), T(1) / std::sqrt(T(c)));
    sim = reshape(instance_norm(reshape(sim, {n, 1, ci, c})), {n, ci, c});
    return softmax(sim, 2);
  }

  // One fusion layer: per-scale channel attention + MLP, both residual.
  std::array<Var<T>, 4> fusion_layer(Binder<T>& p, std::size_t layer, const std::array<Var<T>, 4>& s) const {
    const std::string lp = "cmsfft.layer" + std::to_string(layer);
    auto all = concat<T>({s[0], s[1], s[2], s[3]}, 2);
    std::array<Var<T>, 4> attn_sum, query_sum;
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
      const std::string hp = lp + ".head" + std::to_string(h);
      auto k = matmul(all, p(hp + ".wk"));
      auto vt = transpose(matmul(all, p(hp + ".wv")));  // (N, C, d)
      for (int i = 0; i < 4; ++i) {
        auto q = matmul(s[i], p(hp + ".wq" + std::to_string(i + 1)));
        auto ca = matmul(channel_attention_weights(q, k), vt);  // (N, C_i, d)
        attn_sum[i] = h == 0 ? ca : add(attn_sum[i], ca);
        query_sum[i] = h == 0 ? q : add(query_sum[i], q);
      }
    }
    std::array<Var<T>, 4> out;
    const T inv_heads = T(1) / T(cfg_.heads);
    for (int i = 0; i < 4; ++i) {
      const std::string si = std::to_string(i + 1);
      // Head average is C_i x d; transpose to d x C_i before the residual query add.
      auto cmha = scale(add(transpose(attn_sum[i]), query_sum[i]), inv_heads);
      auto h = layer_norm(p, lp + ".ln" + si, cmha);
      h = linear(p, lp + ".mlp" + si + ".fc2", leaky_relu(linear(p, lp + ".mlp" + si + ".fc1", h)));
      out[i] = add(cmha, h);
    }
    return out;
  }

  // Returns the four fused maps at the encoder scales.
  std::array<Var<T>, 4> cmsfft(Binder<T>& p, const EncoderFeatures<T>& f) const {
    auto s = fusion_tokens(p, f);
    for (std::size_t l = 0; l < cfg_.layers; ++l) s = fusion_layer(p, l, s);
    const std::size_t grid_h = f.maps[0].dim(2) / cfg_.patch, grid_w = f.maps[0].dim(3) / cfg_.patch;
    std::array<Var<T>, 4> fused;
    for (int i = 0; i < 4; ++i) {
      // Each token covers its patch footprint, then the encoder map is added back.
      auto grid = tokens_to_map(s[i], grid_h, grid_w);
      fused[i] = add(upsample_nearest(grid, patch_size(i)), f.maps[i]);
    }
    return fused;
  }

  GeneratorOutput<T> decode(Binder<T>& p, Var<T> bottleneck_out, const std::array<Var<T>, 4>& skips) const {
    GeneratorOutput<T> out;
    auto x = bottleneck_out;
    for (int i = 3; i >= 0; --i) {
      const std::string b = "dec.block" + std::to_string(i + 1);
      x = conv(p, b + ".up", upsample_nearest(x, 2));
      if (x.shape() != skips[i].shape()) shape_fail("decode", x.shape(), skips[i].shape());
      x = concat<T>({x, skips[i]}, 1);
      x = conv_unit(p, b + ".conv1", x);
      x = conv_unit(p, b + ".conv2", x);
      out.taps[i] = x;
    }
    out.image = sigmoid(conv(p, "dec.out", x));
    return out;
  }

  GeneratorOutput<T> forward(Binder<T>& p, Var<T> img) const {
    auto f = encode(p, img);
    auto fused = cmsfft(p, f);
    return decode(p, sgfmt(p, f.bottleneck), fused);
  }

  // Inference on a value batch with frozen parameters.
  Tensor<T> enhance(const Tensor<T>& img) const {
    Tape<T> tape;
    Binder<T> p(tape, params_, false);
    return forward(p, tape.constant(img)).image.value();
  }

 private:
  void check_input(Var<T> img) const {
    const auto& s = img.shape();
    if (s.size() != 4 || s[1] != 3) shape_fail("generator", "expected (N,3,H,W), got " + to_string(s));
    if (s[2] % 16 || s[3] % 16 || s[2] % cfg_.patch || s[3] % cfg_.patch)
      throw ConfigError("input " + to_string(s) + " not divisible by 16 and patch " + std::to_string(cfg_.patch));
  }

  Var<T> self_attention(Binder<T>& p, const std::string& prefix, Var<T> x) const {
    auto q = linear(p, prefix + ".q", x);
    auto k = linear(p, prefix + ".k", x);
    auto v = linear(p, prefix + ".v", x);
    const std::size_t width = x.dim(2), dh = width / cfg_.heads;
    const T inv = T(1) / std::sqrt(T(dh));
    std::vector<Var<T>> heads;
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
      auto qh = slice(q, 2, h * dh, dh);
      auto kh = slice(k, 2, h * dh, dh);
      auto vh = slice(v, 2, h * dh, dh);
      auto att = softmax(scale(matmul(qh, transpose(kh)), inv), 2);
      heads.push_back(matmul(att, vh));
    }
    return linear(p, prefix + ".o", concat(heads, 2));
  }

  GeneratorConfig cfg_;
  ParamStore<T> params_;
};

}  // namespace uieforge
