// Acceptance runner: one PASS/FAIL line per criterion, detail lines indented.
// Exits nonzero when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "uieforge/curation.hpp"
#include "uieforge/selfcheck.hpp"
#include "uieforge/trainer.hpp"

using namespace uieforge;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void check(bool ok, const std::string& what) {
    if (ok) return;
    pass = false;
    detail += what + "\n";
  }
  void note(const std::string& what) { detail += what + "\n"; }
};

int failures = 0;

void report(int id, const std::string& name, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail += std::string("exception: ") + e.what() + "\n";
  }
  const double s = selfcheck::seconds_since(t0);
  std::printf("%s  [%02d] %s  (%.1f s)\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), s);
  std::istringstream lines(o.detail);
  for (std::string l; std::getline(lines, l);) std::printf("        %s\n", l.c_str());
  std::fflush(stdout);
  failures += !o.pass;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Outcome from_suite(const selfcheck::SuiteResult& r) {
  Outcome o;
  o.pass = r.passed;
  o.note(std::to_string(r.checks - r.failures) + "/" + std::to_string(r.checks) + " checks passed");
  o.detail += r.detail;
  return o;
}

class ScratchDir {
 public:
  explicit ScratchDir(const std::string& tag) {
    path_ = fs::temp_directory_path() / ("uieforge-accept-" + tag + "-" + std::to_string(std::random_device{}()));
    fs::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

GeneratorConfig tiny(std::size_t side = 32) {
  GeneratorConfig c;
  c.image_size = side;
  c.patch = 16;
  c.width_mult = 0.125;
  c.layers = 1;
  return c;
}

Outcome reproducibility_statement() {
  Outcome o;
  const auto readme = slurp(fs::path(UIEFORGE_SOURCE_DIR) / "README.md");
  o.check(readme.find("not reproducible at desk scale") != std::string::npos,
          "README.md lacks the reproducibility statement");
  o.note("benchmark PSNR/SSIM figures need the full 4500-pair training set and 800 epochs; "
         "the property suite below substitutes for them");
  return o;
}

Outcome gradients() {
  const auto r = selfcheck::gradient_suite(20);
  auto o = from_suite(r);
  o.check(r.seconds < 120, "runtime " + fmt("%.1f", r.seconds) + " s exceeds 120 s");
  // Negative control: a perturbed conv weight gradient must be caught.
  auto& scale = fault::conv_weight_grad_scale();
  scale = 1.01;
  bool caught = false;
  for (const auto& c : selfcheck::gradient_cases())
    if (c.name == "conv2d") caught = !grad_check<double>(c.fn, c.sampler, 1e-5, c.opt).passed;
  scale = 1.0;
  o.check(caught, "negative control: 1% conv weight gradient error went undetected");
  return o;
}

Outcome linearity() {
  Outcome o;
  const LossReport ones{1, 1, 1, 1, 1, 0, 0};
  const double v = total_generator_loss(ones, LossWeights{});
  o.check(v == 102.101, "scalar total " + fmt("%.17g", v));
  Tape<double> t;
  auto one = [&] { return t.constant(Tensor<double>::scalar(1.0)); };
  const double tv = total_generator_loss(one(), one(), one(), one(), one(), LossWeights{}).value().item();
  o.check(std::abs(tv - 102.101) < 1e-12, "tape total " + fmt("%.17g", tv));
  o.note("total = " + fmt("%.6f", v));
  return o;
}

Outcome overfit() {
  Outcome o;
  GeneratorConfig m;
  m.image_size = 64;
  m.width_mult = 0.25;
  TrainConfig t;
  t.seed = 7;
  t.set_epochs(500);  // 4 pairs in one batch of up to 6: one step per epoch
  t.augment = {false, false, false};
  t.checkpoint_every = 1000;
  const auto data = synthetic_pairs(4, 64, 7);
  ScratchDir dir("overfit");
  const auto t0 = std::chrono::steady_clock::now();
  Trainer tr(m, t);
  const auto res = tr.fit(data, dir.path());
  const double secs = selfcheck::seconds_since(t0);
  double before = 0, after = 0;
  for (const auto& s : data) {
    const auto y = tr.generator().enhance(s.raw.reshaped({1, 3, 64, 64}));
    after += psnr(y.reshaped({3, 64, 64}), s.reference) / 4;
    before += psnr(s.raw, s.reference) / 4;
  }
  o.note(std::to_string(res.steps) + " steps; raw-vs-reference PSNR " + fmt("%.2f", before) + " dB; output PSNR " +
         fmt("%.2f", after) + " dB; " + fmt("%.0f", secs) + " s");
  o.check(res.steps == 500, "expected 500 steps");
  o.check(after > 28, "output PSNR " + fmt("%.2f", after) + " dB is not above 28 dB");
  o.check(secs < 1800, "runtime exceeds 30 min");
  return o;
}

Outcome schedule() {
  Outcome o;
  const TrainConfig c;
  o.check(lr_at(1, c) == 0.0005, "lr_at(1) = " + fmt("%.17g", lr_at(1, c)));
  o.check(std::abs(lr_at(41, c) - 0.0004) < 1e-15, "lr_at(41) = " + fmt("%.17g", lr_at(41, c)));
  o.check(lr_at(600, c) == 0.0005 * std::pow(0.8, 14), "lr_at(600) = " + fmt("%.17g", lr_at(600, c)));
  o.check(lr_at(601, c) == 0.0002, "lr_at(601) = " + fmt("%.17g", lr_at(601, c)));
  o.check(rgb_phase(600, c) == RgbPhase::Early && rgb_phase(601, c) == RgbPhase::Late, "RGB phase boundary");
  for (int e = 2; e <= c.epochs; ++e)
    if (e != c.switch_epoch + 1 && lr_at(e, c) > lr_at(e - 1, c)) o.check(false, "lr increases at " + std::to_string(e));

  // The trainer applies the squared form through epoch 600 and the absolute form from 601.
  auto d = synthetic_pairs(2, 32, 5);
  Trainer tr(tiny(), TrainConfig{});
  const auto raw = stack({&d[0].raw, &d[1].raw}), ref = stack({&d[0].reference, &d[1].reference});
  const auto out = tr.generator().enhance(raw);
  double sq = 0, ab = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double e = double(out[i]) - ref[i];
    sq += e * e / double(out.size());
    ab += std::abs(e) / double(out.size());
  }
  const auto early = tr.train_step(raw, ref, 600, 0.0), late = tr.train_step(raw, ref, 601, 0.0);
  o.check(std::abs(early.rgb - sq) < 1e-6, "epoch 600 RGB loss is not the squared error");
  o.check(std::abs(late.rgb - ab) < 1e-6, "epoch 601 RGB loss is not the absolute error");
  return o;
}

CandidateSet set_of(const std::vector<std::pair<std::string, double>>& scores) {
  CandidateSet cs{"src", {}};
  for (const auto& [id, s] : scores) {
    Candidate c;
    c.id = id;
    c.auto_score = s;
    c.uiqm_norm = c.uciqe_norm = 1.0;
    cs.candidates.push_back(std::move(c));
  }
  return cs;
}

ManualScores table(const std::vector<std::string>& candidates, const std::function<double(const std::string&, int)>& f) {
  ManualScores m;
  for (const auto& c : candidates)
    for (int r = 0; r < kRaters; ++r) m.add("src", c, "r" + std::to_string(r), f(c, r));
  return m;
}

Outcome curation() {
  Outcome o;
  std::mt19937_64 rng(11);
  int mismatches = 0;
  for (int t = 0; t < 1000; ++t) {
    const int n = 1 + int(rng() % 9);
    std::vector<std::pair<std::string, double>> s;
    for (int i = 0; i < n; ++i)
      s.emplace_back(std::string(1, char('a' + rng() % 26)) + std::to_string(i), double(rng() % 5) / 4.0);
    const std::size_t k = 1 + rng() % 4;
    auto pool = s;
    std::vector<std::string> want;
    while (want.size() < k && !pool.empty()) {
      std::size_t best = 0;
      for (std::size_t i = 1; i < pool.size(); ++i)
        if (pool[i].second > pool[best].second || (pool[i].second == pool[best].second && pool[i].first < pool[best].first))
          best = i;
      want.push_back(pool[best].first);
      pool.erase(pool.begin() + long(best));
    }
    const auto cs = set_of(s);
    std::vector<std::string> got;
    for (const auto* c : shortlist(cs, k)) got.push_back(c->id);
    mismatches += got != want;
  }
  o.check(mismatches == 0, std::to_string(mismatches) + "/1000 shortlists differ from brute force");

  const auto perfect = select_reference(set_of({{"a", 1.0}}), table({"a"}, [](auto&, int) { return 10.0; }));
  o.check(perfect.total == 12.0 && perfect.shortlist[0].components == 12 && perfect.status == CurationStatus::Winner,
          "perfect scores do not total 12 over 12 components");
  const auto low = select_reference(set_of({{"a", 1.0}, {"b", 0.9}}),
                                    table({"a", "b"}, [](const std::string& c, int) { return c == "a" ? 5.9 : 5.0; }));
  o.check(std::abs(low.total - 7.9) < 1e-12 && low.status == CurationStatus::Rejected && !low.winner,
          "best total 7.9 is not rejected (total " + fmt("%.6f", low.total) + ")");
  auto mixed = set_of({{"b", 0.9}, {"a", 0.8}, {"c", 0.7}, {"d", 0.1}});
  mixed.candidates[0].uiqm_norm = 0.5;
  mixed.candidates[1].uciqe_norm = 0.5;
  const auto tie = select_reference(
      mixed, table({"a", "b", "c"}, [](const std::string& c, int r) { return c == "c" ? 7.0 : (r % 2 ? 9.0 : 7.0); }));
  o.check(tie.winner && *tie.winner == "a" && std::abs(tie.total - 9.5) < 1e-12,
          "hand-built table: expected winner a at 9.5");

  ScratchDir dir("curate");
  fs::create_directories(dir.path() / "in");
  for (const auto& s : synthetic_pairs(3, 32, 4)) write_png(dir.path() / "in" / (s.id + ".png"), s.raw);
  std::ofstream csv(dir.path() / "manual.csv");
  csv << "source_id,candidate_id,rater_id,score\n";
  for (std::string s : {"synthetic0", "synthetic1", "synthetic2"})
    for (const auto& e : enhancers::builtins())
      for (int r = 0; r < kRaters; ++r) csv << s << ',' << e.name << ",r" << r << ',' << (s == "synthetic1" ? 3 : 9) << '\n';
  csv.close();
  PipelineOptions opt;
  opt.source_dir = dir.path() / "in";
  opt.manual_csv = dir.path() / "manual.csv";
  opt.out_dir = dir.path() / "out";
  run_pipeline(opt);
  auto snapshot = [&] {
    std::vector<std::pair<std::string, std::string>> files;
    for (const auto& e : fs::recursive_directory_iterator(opt.out_dir))
      if (e.is_regular_file()) files.emplace_back(fs::relative(e.path(), opt.out_dir).string(), slurp(e.path()));
    std::sort(files.begin(), files.end());
    return files;
  };
  const auto first = snapshot();
  run_pipeline(opt);
  o.check(first == snapshot(), "second pipeline run changed the output tree");
  o.note("pipeline output: " + std::to_string(first.size()) + " files, identical after rerun");
  return o;
}

Outcome msg_gradients() {
  Outcome o;
  const auto c = tiny();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Generator<double> g(c);
    Discriminator<double> d(c);
    g.init(seed);
    d.init(seed + 1000);
    std::mt19937_64 rng(seed);
    Tape<double> t;
    Binder<double> gp(t, g.params(), true), dp(t, d.params(), false);
    auto out = g.forward(gp, t.constant(Tensor<double>::uniform({1, 3, 32, 32}, 0, 1, rng)));
    auto fake = d.discriminate(dp, {out.image, out.taps});
    t.backward(loss_gan(fake, fake).g_loss);
    for (int i = 0; i < 4; ++i)
      o.check(t.grad(out.taps[i]).max_abs() > 0, "seed " + std::to_string(seed) + " tap " + std::to_string(i));
  }
  return o;
}

}  // namespace

int main() {
  report(1, "benchmark numbers not reproducible at desk scale (stated)", reproducibility_statement);
  report(2, "gradient suite, 20 seeds, under 2 min", gradients);
  report(3, "shape suite at default configuration", [] { return from_suite(selfcheck::shape_suite()); });
  report(4, "color suite", [] { return from_suite(selfcheck::color_suite()); });
  report(5, "loss and metric oracles, 50 sets", [] { return from_suite(selfcheck::oracle_suite(50)); });
  report(6, "total generator loss of unit parts is 102.101", linearity);
  report(7, "overfit run: 4 pairs, 64 px, w 0.25, 500 steps, > 28 dB", overfit);
  report(8, "learning-rate schedule and RGB loss switch", schedule);
  report(9, "curation shortlist, selection and idempotent pipeline", curation);
  report(10, "adversarial gradient reaches every decoder tap, 20 seeds", msg_gradients);
  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
