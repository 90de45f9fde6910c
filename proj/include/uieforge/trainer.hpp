#pragma once

// Adversarial training loop: learning-rate schedule, pixel-loss phase switch,
// paired augmentation, alternating discriminator/generator Adam updates,
// checkpointing with exact resume, and a per-step CSV log.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "uieforge/checkpoint.hpp"
#include "uieforge/discriminator.hpp"
#include "uieforge/generator.hpp"
#include "uieforge/image_io.hpp"
#include "uieforge/losses.hpp"
#include "uieforge/optim.hpp"

namespace uieforge {

struct AugmentToggles {
  bool crop = true;
  bool rotate = true;
  bool flip = true;
};

struct TrainConfig {
  int epochs = 800;
  std::size_t batch = 6;
  double lr_early = 0.0005;
  double lr_late = 0.0002;
  double decay = 0.8;
  int decay_every = 40;
  int switch_epoch = 600;  // last epoch of the squared pixel loss and of the first lr phase
  AugmentToggles augment;
  std::uint64_t seed = 0;
  int checkpoint_every = 50;
  std::uint64_t perceptual_seed = 1234;

  // Shortened runs keep the phase switch at the same fraction of training.
  void set_epochs(int n) {
    switch_epoch = int(std::lround(double(switch_epoch) * n / std::max(epochs, 1)));
    epochs = n;
  }

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch < 1) throw ConfigError("batch must be >= 1");
    if (switch_epoch < 0 || switch_epoch > epochs) throw ConfigError("switch_epoch must be in [0, epochs]");
    if (!(lr_early > 0) || !(lr_late > 0)) throw ConfigError("learning rates must be > 0");
    if (!(decay > 0 && decay <= 1)) throw ConfigError("decay must be in (0, 1]");
    if (decay_every < 1) throw ConfigError("decay_every must be >= 1");
    if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
  }
};

inline double lr_at(int epoch, const TrainConfig& cfg) {
  if (epoch < 1 || epoch > cfg.epochs)
    throw Error("lr_at: epoch " + std::to_string(epoch) + " outside [1, " + std::to_string(cfg.epochs) + "]");
  const bool early = epoch <= cfg.switch_epoch;
  const int start = early ? 1 : cfg.switch_epoch + 1;
  const double base = early ? cfg.lr_early : cfg.lr_late;
  return base * std::pow(cfg.decay, double((epoch - start) / cfg.decay_every));
}

inline RgbPhase rgb_phase(int epoch, const TrainConfig& cfg) {
  return epoch <= cfg.switch_epoch ? RgbPhase::Early : RgbPhase::Late;
}

struct PairedSample {
  Image raw;
  Image reference;
  std::string id;
};

// Augmentation ----------------------------------------------------------------

struct AugmentRecord {
  bool cropped = false;
  std::size_t crop_y = 0, crop_x = 0, crop_side = 0;
  int quarter_turns = 0;
  bool hflip = false, vflip = false;

  bool operator==(const AugmentRecord&) const = default;
};

inline AugmentRecord draw_augment(const AugmentToggles& t, std::size_t side, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  AugmentRecord r;
  if (t.crop && u(rng) < 0.5) {
    const double area = 0.75 + 0.25 * u(rng);
    r.crop_side = std::min(side, std::size_t(std::ceil(double(side) * std::sqrt(area))));
    std::uniform_int_distribution<std::size_t> off(0, side - r.crop_side);
    r.crop_y = off(rng);
    r.crop_x = off(rng);
    r.cropped = r.crop_side < side;
  }
  if (t.rotate && u(rng) < 0.5) r.quarter_turns = 1 + int(std::uniform_int_distribution<int>(0, 2)(rng));
  if (t.flip) {
    r.hflip = u(rng) < 0.5;
    r.vflip = u(rng) < 0.5;
  }
  return r;
}

// Applies the recorded transform to a square (3,S,S) image.
inline Image apply_augment(const Image& img, const AugmentRecord& r) {
  const std::size_t s = img.dim(1);
  if (img.dim(2) != s) shape_fail("augment", "expects a square image, got " + to_string(img.shape()));
  Image cur = img;
  if (r.cropped) {
    Image c({3, r.crop_side, r.crop_side});
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t y = 0; y < r.crop_side; ++y)
        for (std::size_t x = 0; x < r.crop_side; ++x)
          c[(ch * r.crop_side + y) * r.crop_side + x] = img[(ch * s + y + r.crop_y) * s + x + r.crop_x];
    cur = resize(c, s, s);
  }
  Image out({3, s, s});
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) {
        std::size_t sy = y, sx = x;
        if (r.vflip) sy = s - 1 - sy;
        if (r.hflip) sx = s - 1 - sx;
        // Output (sy, sx) after k counter-clockwise quarter turns reads source (ty, tx).
        std::size_t ty = sy, tx = sx;
        for (int k = 0; k < r.quarter_turns; ++k) {
          const std::size_t ny = tx, nx = s - 1 - ty;
          ty = ny;
          tx = nx;
        }
        out[(ch * s + y) * s + x] = cur[(ch * s + ty) * s + tx];
      }
  return out;
}

struct AugmentResult {
  PairedSample sample;
  AugmentRecord raw_log, reference_log;
};

inline AugmentResult augment(const PairedSample& s, const AugmentToggles& t, std::mt19937_64& rng) {
  if (s.raw.shape() != s.reference.shape()) shape_fail("augment", s.raw.shape(), s.reference.shape());
  const auto rec = draw_augment(t, s.raw.dim(1), rng);
  return {{apply_augment(s.raw, rec), apply_augment(s.reference, rec), s.id}, rec, rec};
}

// Model config persistence -----------------------------------------------------

inline std::string serialize(const GeneratorConfig& c) {
  std::ostringstream os;
  os.precision(17);
  os << "patch=" << c.patch << "\nwidths=" << c.widths[0] << ',' << c.widths[1] << ',' << c.widths[2] << ','
     << c.widths[3] << "\nheads=" << c.heads << "\nlayers=" << c.layers << "\nimage_size=" << c.image_size
     << "\nwidth_mult=" << c.width_mult << '\n';
  return os.str();
}

inline GeneratorConfig parse_generator_config(const std::string& text) {
  GeneratorConfig c;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const auto k = line.substr(0, eq), v = line.substr(eq + 1);
    try {
      if (k == "patch") c.patch = std::stoul(v);
      else if (k == "heads") c.heads = std::stoul(v);
      else if (k == "layers") c.layers = std::stoul(v);
      else if (k == "image_size") c.image_size = std::stoul(v);
      else if (k == "width_mult") c.width_mult = std::stod(v);
      else if (k == "widths") {
        std::istringstream ws(v);
        std::string part;
        for (auto& w : c.widths) {
          if (!std::getline(ws, part, ',')) throw CheckpointError("model config: short widths list");
          w = std::stoul(part);
        }
      } else {
        throw CheckpointError("model config: unknown key '" + k + "'");
      }
    } catch (const std::logic_error&) {
      throw CheckpointError("model config: bad value for '" + k + "'");
    }
  }
  return c;
}

// Loads the generator stored in a training checkpoint.
inline Generator<float> load_generator(const std::filesystem::path& path) {
  const auto a = Archive::load(path);
  GeneratorConfig cfg;
  try {
    cfg = parse_generator_config(a.get_text("model/config"));
    cfg.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
  Generator<float> g(cfg);
  g.init(0);
  a.get_params("generator/", g.params());
  return g;
}

// Training ---------------------------------------------------------------------

struct StepRecord {
  std::uint64_t step = 0;
  int epoch = 0;
  double lr = 0;
  LossReport loss;
};

inline std::string log_header() { return "step,epoch,lr,rgb,lab,lch,per,adv_g,adv_d,total"; }

inline std::string log_line(const StepRecord& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%llu,%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g",
                static_cast<unsigned long long>(r.step), r.epoch, r.lr, r.loss.rgb, r.loss.lab, r.loss.lch,
                r.loss.perceptual, r.loss.adversarial_g, r.loss.adversarial_d, r.loss.total);
  return buf;
}

struct FitResult {
  std::filesystem::path checkpoint;
  std::filesystem::path log;
  std::uint64_t steps = 0;
};

class Trainer {
 public:
  Trainer(GeneratorConfig model, TrainConfig cfg, LossWeights weights = {})
      : cfg_(cfg), weights_(weights), gen_(model), disc_(model) {
    cfg_.validate();
    weights_.validate();
    gen_.init(cfg_.seed);
    disc_.init(cfg_.seed + 1);
    extractor_ = FeatureExtractor<float>::random(cfg_.perceptual_seed);
  }

  const TrainConfig& config() const { return cfg_; }
  Generator<float>& generator() { return gen_; }
  Discriminator<float>& discriminator() { return disc_; }
  std::uint64_t steps() const { return step_; }
  int epochs_done() const { return epoch_done_; }

  // One discriminator update then one generator update on an (N,3,H,W) batch.
  LossReport train_step(const Tensor<float>& raw, const Tensor<float>& ref, int epoch, std::optional<double> lr = {}) {
    const double rate = lr ? *lr : lr_at(epoch, cfg_);
    LossReport rep;

    Tape<float> gt;
    Binder<float> gp(gt, gen_.params());
    auto out = gen_.forward(gp, gt.constant(raw));

    {
      Tape<float> dt;
      Binder<float> dp(dt, disc_.params());
      auto real_img = dt.constant(ref);
      DiscriminatorInput<float> real{real_img, disc_.real_side_taps(dp, real_img)};
      DiscriminatorInput<float> fake{dt.constant(out.image.value()), {}};
      for (int i = 0; i < 4; ++i) fake.taps[i] = dt.constant(out.taps[i].value());
      auto gan = loss_gan(disc_.discriminate(dp, real), disc_.discriminate(dp, fake));
      rep.adversarial_d = gan.d_loss.value().item();
      if (!std::isfinite(rep.adversarial_d)) throw Error("non-finite loss component 'adversarial_d'");
      dt.backward(gan.d_loss);
      d_opt_.step(disc_.params(), dp.gradients(), rate);
    }

    Binder<float> dp(gt, disc_.params(), false);
    auto fake_logits = disc_.discriminate(dp, {out.image, out.taps});
    auto adv_g = scale(mean(log_sigmoid(fake_logits)), -1.f);
    auto ref_v = gt.constant(ref);
    auto rgb = loss_rgb(out.image, ref_v, rgb_phase(epoch, cfg_));
    auto lab = loss_lab(out.image, ref_v);
    auto lch = loss_lch(out.image, ref_v);
    auto per = loss_perceptual(out.image, ref_v, extractor_);
    rep.rgb = rgb.value().item();
    rep.lab = lab.value().item();
    rep.lch = lch.value().item();
    rep.perceptual = per.value().item();
    rep.adversarial_g = adv_g.value().item();
    rep.total = total_generator_loss(rep, weights_);
    auto total = total_generator_loss(rgb, lab, lch, per, adv_g, weights_);
    gt.backward(total);
    g_opt_.step(gen_.params(), gp.gradients(), rate);
    return rep;
  }

  // Runs the remaining epochs. Checkpoints land in `out_dir` as epoch-NNNN.ckpt
  // every `checkpoint_every` epochs and after the last one; the log is out_dir/train_log.csv.
  FitResult fit(const std::vector<PairedSample>& data, const std::filesystem::path& out_dir, bool resume = false,
                const std::function<void(const StepRecord&)>& on_step = {}) {
    if (data.empty()) throw Error("fit: empty dataset");
    std::filesystem::create_directories(out_dir);
    const auto log_path = out_dir / "train_log.csv";
    if (resume) {
      if (auto latest = latest_checkpoint(out_dir)) load(*latest);
      truncate_log(log_path, step_);
    } else {
      std::ofstream(log_path, std::ios::trunc) << log_header() << '\n';
    }
    std::ofstream log(log_path, std::ios::app);
    std::filesystem::path last;
    if (epoch_done_ == cfg_.epochs) last = checkpoint_path(out_dir, epoch_done_);

    for (int epoch = epoch_done_ + 1; epoch <= cfg_.epochs; ++epoch) {
      std::seed_seq ss{std::uint64_t(cfg_.seed), std::uint64_t(epoch)};
      std::mt19937_64 rng(ss);
      std::vector<std::size_t> order(data.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t b = 0; b < order.size(); b += cfg_.batch) {
        std::vector<Image> raws, refs;
        for (std::size_t j = b; j < std::min(order.size(), b + cfg_.batch); ++j) {
          auto aug = augment(data[order[j]], cfg_.augment, rng);
          raws.push_back(std::move(aug.sample.raw));
          refs.push_back(std::move(aug.sample.reference));
        }
        StepRecord rec;
        rec.epoch = epoch;
        rec.lr = lr_at(epoch, cfg_);
        rec.loss = train_step(stack(pointers(raws)), stack(pointers(refs)), epoch);
        rec.step = ++step_;
        log << log_line(rec) << '\n';
        if (on_step) on_step(rec);
      }
      log.flush();
      epoch_done_ = epoch;
      if (epoch % cfg_.checkpoint_every == 0 || epoch == cfg_.epochs) {
        last = checkpoint_path(out_dir, epoch);
        save(last);
      }
    }
    return {last, log_path, step_};
  }

  void save(const std::filesystem::path& path) const {
    Archive a;
    a.put_text("model/config", serialize(gen_.config()));
    a.put_params("generator/", gen_.params());
    a.put_params("discriminator/", disc_.params());
    g_opt_.save(a, "optimizer/generator/");
    d_opt_.save(a, "optimizer/discriminator/");
    a.put("state/epoch", Tensor<double>::scalar(epoch_done_));
    a.put("state/step", Tensor<double>::scalar(double(step_)));
    a.save(path);
  }

  void load(const std::filesystem::path& path) {
    const auto a = Archive::load(path);
    if (parse_generator_config(a.get_text("model/config")).channels() != gen_.config().channels())
      throw CheckpointError(path.string() + ": model config does not match the run");
    a.get_params("generator/", gen_.params());
    a.get_params("discriminator/", disc_.params());
    g_opt_.load(a, "optimizer/generator/", gen_.params());
    d_opt_.load(a, "optimizer/discriminator/", disc_.params());
    epoch_done_ = int(a.get<double>("state/epoch").item());
    step_ = std::uint64_t(a.get<double>("state/step").item());
  }

  static std::filesystem::path checkpoint_path(const std::filesystem::path& dir, int epoch) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "epoch-%04d.ckpt", epoch);
    return dir / buf;
  }

  static std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& dir) {
    std::optional<std::filesystem::path> best;
    int best_epoch = -1;
    if (!std::filesystem::exists(dir)) return best;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
      int ep = 0;
      const auto name = e.path().filename().string();
      if (std::sscanf(name.c_str(), "epoch-%d.ckpt", &ep) == 1 && name.size() > 5 &&
          name.substr(name.size() - 5) == ".ckpt" && ep > best_epoch) {
        best_epoch = ep;
        best = e.path();
      }
    }
    return best;
  }

 private:
  static std::vector<const Image*> pointers(const std::vector<Image>& v) {
    std::vector<const Image*> p;
    for (const auto& i : v) p.push_back(&i);
    return p;
  }

  // Keeps the header and the rows up to `step`.
  static void truncate_log(const std::filesystem::path& path, std::uint64_t step) {
    std::vector<std::string> keep{log_header()};
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty() || line == log_header()) continue;
      if (std::stoull(line.substr(0, line.find(','))) <= step) keep.push_back(line);
    }
    in.close();
    std::ofstream out(path, std::ios::trunc);
    for (const auto& l : keep) out << l << '\n';
  }

  TrainConfig cfg_;
  LossWeights weights_;
  Generator<float> gen_;
  Discriminator<float> disc_;
  FeatureExtractor<float> extractor_;
  Adam<float> g_opt_, d_opt_;
  std::uint64_t step_ = 0;
  int epoch_done_ = 0;
};

// Dataset ----------------------------------------------------------------------

// Pairs identically named images under dir/raw and dir/reference, resized to side x side.
inline std::vector<PairedSample> load_paired_dataset(const std::filesystem::path& dir, std::size_t side) {
  for (const char* sub : {"raw", "reference"})
    if (!std::filesystem::is_directory(dir / sub)) throw ConfigError("dataset directory missing: " + (dir / sub).string());
  std::vector<PairedSample> out;
  for (const auto& raw_path : list_images(dir / "raw")) {
    const auto ref_path = dir / "reference" / raw_path.filename();
    if (!std::filesystem::exists(ref_path)) {
      std::fprintf(stderr, "warning: no reference for %s, skipped\n", raw_path.filename().string().c_str());
      continue;
    }
    auto raw = read_image(raw_path);
    auto ref = read_image(ref_path);
    if (!raw || !ref) {
      std::fprintf(stderr, "warning: cannot decode pair %s, skipped\n", raw_path.filename().string().c_str());
      continue;
    }
    out.push_back({resize(*raw, side, side), resize(*ref, side, side), raw_path.stem().string()});
  }
  return out;
}

// Smooth colorful references and a depth-attenuated, back-scattered raw view of each.
inline std::vector<PairedSample> synthetic_pairs(std::size_t n, std::size_t side, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<PairedSample> out;
  for (std::size_t k = 0; k < n; ++k) {
    Image ref({3, side, side}), raw({3, side, side});
    double fx[3][3], fy[3][3], ph[3][3], amp[3][3], base[3];
    for (int c = 0; c < 3; ++c) {
      base[c] = 0.3 + 0.4 * u(rng);
      for (int j = 0; j < 3; ++j) {
        fx[c][j] = (u(rng) * 4 - 2) * M_PI / double(side);
        fy[c][j] = (u(rng) * 4 - 2) * M_PI / double(side);
        ph[c][j] = u(rng) * 2 * M_PI;
        amp[c][j] = 0.05 + 0.1 * u(rng);
      }
    }
    const double cy = u(rng) * side, cx = u(rng) * side, rad = side * (0.15 + 0.15 * u(rng));
    double blob[3];
    for (auto& b : blob) b = u(rng);
    const double trans[3] = {0.35 + 0.2 * u(rng), 0.7 + 0.15 * u(rng), 0.8 + 0.15 * u(rng)};
    const double back[3] = {0.05 * u(rng), 0.3 + 0.2 * u(rng), 0.4 + 0.2 * u(rng)};
    for (std::size_t y = 0; y < side; ++y)
      for (std::size_t x = 0; x < side; ++x) {
        const double d = std::hypot(double(y) - cy, double(x) - cx);
        const double w = 1.0 / (1.0 + std::exp((d - rad) / 2.0));
        const double depth = 0.6 + 0.4 * double(y) / double(side);
        for (int c = 0; c < 3; ++c) {
          double v = base[c];
          for (int j = 0; j < 3; ++j) v += amp[c][j] * std::sin(fx[c][j] * x + fy[c][j] * y + ph[c][j]);
          v = std::clamp((1 - w) * v + w * blob[c], 0.0, 1.0);
          const double t = std::pow(trans[c], depth);
          const std::size_t i = (c * side + y) * side + x;
          ref[i] = float(v);
          raw[i] = float(std::clamp(v * t + back[c] * (1 - t), 0.0, 1.0));
        }
      }
    out.push_back({std::move(raw), std::move(ref), "synthetic" + std::to_string(k)});
  }
  return out;
}

}  // namespace uieforge
