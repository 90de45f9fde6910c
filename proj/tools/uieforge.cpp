// uieforge: train, enhance, eval, curate and selfcheck subcommands.
// Exit codes: 0 ok, 1 other failure, 2 configuration error, 3 checkpoint error.

#include <CLI11.hpp>
#include <Eigen/Core>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "uieforge/curation.hpp"
#include "uieforge/metrics.hpp"
#include "uieforge/selfcheck.hpp"
#include "uieforge/trainer.hpp"

namespace fs = std::filesystem;
using namespace uieforge;

namespace {

constexpr int kExitOther = 1, kExitConfig = 2, kExitCheckpoint = 3;

struct TrainArgs {
  fs::path dataset, out;
  std::size_t synthetic = 0;
  int epochs = 800, batch = 6, checkpoint_every = 50;
  std::size_t image_size = 256, patch = 32, layers = 4, heads = 4;
  double width_mult = 1.0, lr_early = 5e-4, lr_late = 2e-4;
  bool resume = false, no_augment = false;
  LossWeights weights;
};

struct EnhanceArgs {
  fs::path checkpoint, input, out;
};

struct EvalArgs {
  fs::path enhanced, reference, out;
  bool no_reference = false;
};

struct CurateArgs {
  fs::path source, out, manual;
  bool auto_only = false;
  std::vector<std::string> plugins;
};

void apply_thread_cap() {
  if (const char* v = std::getenv("UIEFORGE_THREADS")) {
    const int n = std::atoi(v);
    if (n <= 0) throw ConfigError(std::string("UIEFORGE_THREADS must be a positive integer, got '") + v + "'");
    Eigen::setNbThreads(n);
  }
}

void require_dir(const fs::path& p, const std::string& what) {
  if (!fs::is_directory(p)) throw ConfigError(what + " directory not found: " + p.string());
}

// Writes the effective options as a config file that --config accepts back.
void echo_config(const CLI::App& sub, std::uint64_t seed, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream(dir / "effective_config.toml") << "seed=" << seed << "\n[" << sub.get_name() << "]\n"
                                                 << sub.config_to_str(true, false);
}

int run_train(const CLI::App& sub, const TrainArgs& a, std::uint64_t seed) {
  GeneratorConfig m;
  m.image_size = a.image_size;
  m.patch = a.patch;
  m.layers = a.layers;
  m.heads = a.heads;
  m.width_mult = a.width_mult;
  m.validate();
  TrainConfig t;
  t.set_epochs(a.epochs);
  t.batch = a.batch;
  t.checkpoint_every = a.checkpoint_every;
  t.lr_early = a.lr_early;
  t.lr_late = a.lr_late;
  t.seed = seed;
  if (a.no_augment) t.augment = {false, false, false};
  t.validate();
  a.weights.validate();

  std::vector<PairedSample> data;
  if (a.synthetic > 0) {
    data = synthetic_pairs(a.synthetic, a.image_size, seed);
  } else {
    if (a.dataset.empty()) throw ConfigError("train: --dataset or --synthetic is required");
    require_dir(a.dataset, "dataset");
    data = load_paired_dataset(a.dataset, a.image_size);
    if (data.empty()) throw ConfigError("dataset has no usable pairs: " + a.dataset.string());
  }
  echo_config(sub, seed, a.out);

  Trainer tr(m, t, a.weights);
  const std::size_t per_epoch = (data.size() + std::size_t(t.batch) - 1) / std::size_t(t.batch);
  const auto res = tr.fit(data, a.out, a.resume, [&](const StepRecord& r) {
    if (r.step % per_epoch == 0)
      std::fprintf(stderr, "epoch %d/%d  step %llu  lr %.3g  total %.6g\n", r.epoch, t.epochs,
                   static_cast<unsigned long long>(r.step), r.lr, r.loss.total);
  });
  std::printf("checkpoint %s\nlog %s\n", res.checkpoint.string().c_str(), res.log.string().c_str());
  return 0;
}

int run_enhance(const CLI::App& sub, const EnhanceArgs& a, std::uint64_t seed) {
  std::vector<fs::path> inputs;
  if (fs::is_directory(a.input))
    inputs = list_images(a.input);
  else if (fs::is_regular_file(a.input))
    inputs = {a.input};
  else
    throw ConfigError("input not found: " + a.input.string());
  if (inputs.empty()) throw ConfigError("no PNG or JPEG images in " + a.input.string());
  if (!fs::is_regular_file(a.checkpoint)) throw ConfigError("checkpoint not found: " + a.checkpoint.string());

  const auto gen = load_generator(a.checkpoint);
  const std::size_t side = gen.config().image_size;
  echo_config(sub, seed, a.out);
  std::size_t failed = 0;
  for (const auto& p : inputs) {
    const auto img = read_image(p);
    if (!img) {
      std::fprintf(stderr, "warning: cannot decode %s, skipped\n", p.string().c_str());
      ++failed;
      continue;
    }
    const std::size_t h = img->dim(1), w = img->dim(2);
    const auto x = resize(*img, side, side).reshaped({1, 3, side, side});
    const auto y = gen.enhance(x).reshaped({3, side, side});
    const auto dst = a.out / (p.stem().string() + ".png");
    write_png(dst, resize(y, h, w));
    std::printf("%s -> %s\n", p.string().c_str(), dst.string().c_str());
  }
  if (failed == inputs.size()) {
    std::fprintf(stderr, "error: every input failed to decode\n");
    return kExitOther;
  }
  return 0;
}

std::map<std::string, fs::path> by_stem(const fs::path& dir) {
  std::map<std::string, fs::path> m;
  for (const auto& p : list_images(dir)) m.emplace(p.stem().string(), p);
  return m;
}

int run_eval(const EvalArgs& a) {
  require_dir(a.enhanced, "enhanced");
  if (!a.no_reference) {
    if (a.reference.empty()) throw ConfigError("eval: --reference or --no-reference is required");
    require_dir(a.reference, "reference");
  }
  const auto enhanced = by_stem(a.enhanced);
  const auto reference = a.no_reference ? std::map<std::string, fs::path>{} : by_stem(a.reference);
  std::vector<std::string> problems;
  MetricReport report;
  for (const auto& [stem, path] : enhanced) {
    std::optional<fs::path> ref_path;
    if (!a.no_reference) {
      const auto it = reference.find(stem);
      if (it == reference.end()) {
        problems.push_back("no reference for " + path.filename().string());
        continue;
      }
      ref_path = it->second;
    }
    const auto img = read_image(path);
    if (!img) {
      problems.push_back("cannot decode " + path.string());
      continue;
    }
    MetricRow row{path.filename().string(), std::nullopt, std::nullopt, 0, 0};
    if (ref_path) {
      const auto ref = read_image(*ref_path);
      if (!ref) {
        problems.push_back("cannot decode " + ref_path->string());
        continue;
      }
      if (ref->shape() != img->shape()) {
        problems.push_back("size mismatch for " + stem + ": " + to_string(img->shape()) + " vs " +
                           to_string(ref->shape()));
        continue;
      }
      row.psnr = psnr(*img, *ref);
      row.ssim = ssim(*img, *ref);
    }
    row.uiqm = uiqm(*img);
    row.uciqe = uciqe(*img);
    report.add(row);
  }
  for (const auto& [stem, path] : reference)
    if (!enhanced.count(stem)) problems.push_back("no enhanced image for " + path.filename().string());

  if (a.out.empty()) {
    report.write_csv(std::cout);
  } else {
    if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
    std::ofstream os(a.out);
    report.write_csv(os);
  }
  const auto mu = report.mean();
  std::fprintf(stderr, "images %zu", report.rows().size());
  if (mu.psnr) std::fprintf(stderr, "  mean psnr %.4f  mean ssim %.4f", *mu.psnr, *mu.ssim);
  std::fprintf(stderr, "  mean uiqm %.4f  mean uciqe %.4f\n", mu.uiqm, mu.uciqe);
  for (const auto& p : problems) std::fprintf(stderr, "unmatched: %s\n", p.c_str());
  return problems.empty() ? 0 : kExitOther;
}

int run_curate(const CLI::App& sub, const CurateArgs& a, std::uint64_t seed) {
  require_dir(a.source, "source");
  PipelineOptions o;
  o.source_dir = a.source;
  o.out_dir = a.out;
  o.auto_only = a.auto_only;
  if (!a.manual.empty()) {
    if (!fs::is_regular_file(a.manual)) throw ConfigError("manual score table not found: " + a.manual.string());
    o.manual_csv = a.manual;
  }
  for (const auto& spec : a.plugins) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == spec.size())
      throw ConfigError("plugin must be name=command, got '" + spec + "'");
    o.enhancers.push_back(enhancers::plugin(spec.substr(0, eq), spec.substr(eq + 1)));
  }
  echo_config(sub, seed, a.out);
  const auto recs = run_pipeline(o);
  std::size_t winners = 0;
  for (const auto& r : recs) winners += r.status == CurationStatus::Winner;
  std::printf("%zu sources, %zu references selected, report %s\n", recs.size(), winners,
              (a.out / "report.csv").string().c_str());
  return 0;
}

int run_selfcheck(int seeds) {
  const selfcheck::SuiteResult suites[] = {selfcheck::gradient_suite(seeds), selfcheck::color_suite(),
                                           selfcheck::shape_suite(), selfcheck::oracle_suite(50)};
  bool ok = true;
  for (const auto& s : suites) {
    std::printf("%s\n", selfcheck::summary(s).c_str());
    if (!s.detail.empty()) std::printf("%s", s.detail.c_str());
    ok = ok && s.passed;
  }
  return ok ? 0 : kExitOther;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Underwater image enhancement: training, inference, evaluation and dataset curation"};
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML file with option values; command-line flags take precedence");
  app.allow_config_extras(CLI::config_extras_mode::error);
  std::uint64_t seed = 0;
  app.add_option("--seed", seed, "Random seed")->capture_default_str();

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train the generator and discriminator")->fallthrough();
  train->add_option("--dataset", ta.dataset, "Directory with raw/ and reference/ subdirectories");
  train->add_option("--synthetic", ta.synthetic, "Train on N generated pairs instead of a dataset");
  train->add_option("--out", ta.out, "Output directory for checkpoints and the log")->required();
  train->add_option("--epochs", ta.epochs, "Epoch count; the loss-form switch scales with it")->capture_default_str();
  train->add_option("--batch", ta.batch, "Batch size")->capture_default_str();
  train->add_option("--checkpoint-every", ta.checkpoint_every, "Checkpoint interval in epochs")->capture_default_str();
  train->add_option("--image-size", ta.image_size, "Training side length")->capture_default_str();
  train->add_option("--patch", ta.patch, "Fusion patch size at full scale")->capture_default_str();
  train->add_option("--layers", ta.layers, "Transformer layers per module")->capture_default_str();
  train->add_option("--heads", ta.heads, "Attention heads")->capture_default_str();
  train->add_option("--width-mult", ta.width_mult, "Channel width multiplier")->capture_default_str();
  train->add_option("--lr-early", ta.lr_early, "Base learning rate before the switch")->capture_default_str();
  train->add_option("--lr-late", ta.lr_late, "Base learning rate after the switch")->capture_default_str();
  train->add_option("--w-lab", ta.weights.alpha, "LAB loss weight")->capture_default_str();
  train->add_option("--w-lch", ta.weights.beta, "LCH loss weight")->capture_default_str();
  train->add_option("--w-rgb", ta.weights.gamma, "RGB loss weight")->capture_default_str();
  train->add_option("--w-per", ta.weights.mu, "Perceptual loss weight")->capture_default_str();
  train->add_option("--w-adv", ta.weights.adversarial, "Adversarial loss weight")->capture_default_str();
  train->add_flag("--resume", ta.resume, "Continue from the latest checkpoint in --out");
  train->add_flag("--no-augment", ta.no_augment, "Disable crop, rotation and flip augmentation");

  EnhanceArgs ea;
  auto* enhance = app.add_subcommand("enhance", "Enhance an image or a directory of images")->fallthrough();
  enhance->add_option("--checkpoint", ea.checkpoint, "Checkpoint written by train")->required();
  enhance->add_option("--input", ea.input, "Image file or directory")->required();
  enhance->add_option("--out", ea.out, "Output directory")->required();

  EvalArgs va;
  auto* eval = app.add_subcommand("eval", "Score enhanced images")->fallthrough();
  eval->add_option("--enhanced", va.enhanced, "Directory of enhanced images")->required();
  eval->add_option("--reference", va.reference, "Directory of reference images with matching names");
  eval->add_flag("--no-reference", va.no_reference, "Compute only UIQM and UCIQE");
  eval->add_option("--out", va.out, "CSV path; stdout when omitted");

  CurateArgs ca;
  auto* curate = app.add_subcommand("curate", "Build a paired dataset from raw images")->fallthrough();
  curate->add_option("--source", ca.source, "Directory of raw images")->required();
  curate->add_option("--out", ca.out, "Output dataset directory")->required();
  curate->add_option("--manual", ca.manual, "Rater score table (source_id,candidate_id,rater_id,score)");
  curate->add_flag("--auto-only", ca.auto_only, "Pick the best automatic score without rater input");
  curate->add_option("--plugin", ca.plugins, "Extra enhancer as name=command (run as: command in.png out.png)");

  int seeds = 20;
  auto* check = app.add_subcommand("selfcheck", "Run the built-in verification suites")->fallthrough();
  check->add_option("--seeds", seeds, "Gradient-check seeds per case")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    apply_thread_cap();
    if (*train) return run_train(*train, ta, seed);
    if (*enhance) return run_enhance(*enhance, ea, seed);
    if (*eval) return run_eval(va);
    if (*curate) return run_curate(*curate, ca, seed);
    if (*check) return run_selfcheck(seeds);
  } catch (const CheckpointError& e) {
    std::fprintf(stderr, "checkpoint error: %s\n", e.what());
    return kExitCheckpoint;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitOther;
  }
  return kExitOther;
}
