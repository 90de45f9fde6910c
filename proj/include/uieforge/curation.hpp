#pragma once

// Reference-image curation: run candidate enhancers on each source image,
// score candidates with UIQM and UCIQE, shortlist the best three, merge
// rater scores and keep the winner when its total clears the threshold.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "uieforge/image_io.hpp"
#include "uieforge/metrics.hpp"

namespace uieforge {

inline constexpr std::size_t kRaters = 10;
inline constexpr double kAcceptTotal = 8.0;
inline constexpr std::size_t kShortlist = 3;

// An enhancer maps an image to a candidate of the same size; it throws on failure.
struct Enhancer {
  std::string name;
  std::function<Image(const Image&)> run;
};

namespace enhancers {

inline Enhancer identity() {
  return {"identity", [](const Image& x) { return x; }};
}

// Scales each channel so its mean matches the mean over all channels.
inline Enhancer gray_world() {
  return {"grayworld", [](const Image& x) {
            const std::size_t n = x.size() / 3;
            double m[3] = {0, 0, 0};
            for (std::size_t c = 0; c < 3; ++c)
              for (std::size_t i = 0; i < n; ++i) m[c] += x[c * n + i];
            const double g = (m[0] + m[1] + m[2]) / 3;
            Image y = x;
            for (std::size_t c = 0; c < 3; ++c) {
              const double k = m[c] > 0 ? g / m[c] : 1.0;
              for (std::size_t i = 0; i < n; ++i) y[c * n + i] = float(std::min(1.0, x[c * n + i] * k));
            }
            return y;
          }};
}

inline Enhancer gamma(double g = 0.7) {
  return {"gamma", [g](const Image& x) {
            Image y = x;
            for (auto& v : y.storage()) v = float(std::pow(std::clamp(double(v), 0.0, 1.0), g));
            return y;
          }};
}

// Per-channel histogram equalization on the 8-bit image.
inline Enhancer histeq() {
  return {"histeq", [](const Image& x) {
            const auto bytes = to_bytes(x);
            const int h = int(x.dim(1)), w = int(x.dim(2));
            Image y(x.shape());
            for (int c = 0; c < 3; ++c) {
              cv::Mat ch(h, w, CV_8UC1, const_cast<unsigned char*>(bytes.data()) + std::size_t(c) * h * w), eq;
              cv::equalizeHist(ch, eq);
              for (int i = 0; i < h * w; ++i) y[std::size_t(c) * h * w + i] = eq.data[i] / 255.f;
            }
            return y;
          }};
}

// External program invoked as `<command> <in-path> <out-path>`; exit 0 means success.
inline Enhancer plugin(const std::string& name, const std::string& command) {
  return {name, [name, command](const Image& x) {
            static int counter = 0;
            const auto dir = std::filesystem::temp_directory_path() /
                             ("uieforge-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
            std::filesystem::create_directories(dir);
            const auto in = dir / "in.png", out = dir / "out.png";
            write_png(in, x);
            const std::string cmd = command + " '" + in.string() + "' '" + out.string() + "'";
            const int rc = std::system(cmd.c_str());
            std::optional<Image> y;
            if (rc == 0) y = read_image(out);
            std::filesystem::remove_all(dir);
            if (rc != 0) throw Error("plugin '" + name + "' exited with status " + std::to_string(rc));
            if (!y) throw Error("plugin '" + name + "' produced no readable image");
            return resize(*y, x.dim(1), x.dim(2));
          }};
}

inline std::vector<Enhancer> builtins() { return {gray_world(), gamma(0.7), histeq(), identity()}; }

}  // namespace enhancers

struct Candidate {
  std::string id;  // enhancer name
  Image image;
  double uiqm = 0, uciqe = 0;
  double uiqm_norm = 0, uciqe_norm = 0;
  double auto_score = 0;
};

struct CandidateSet {
  std::string source_id;
  std::vector<Candidate> candidates;
};

// Divides by the largest value after anchoring the range at min(0, min x); a
// set without spread maps to 1.0.
inline std::vector<double> normalize_scores(const std::vector<double>& x) {
  if (x.empty()) return {};
  const double lo = std::min(0.0, *std::min_element(x.begin(), x.end()));
  const double hi = *std::max_element(x.begin(), x.end());
  std::vector<double> out(x.size(), 1.0);
  if (hi - lo <= 1e-12) return out;
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - lo) / (hi - lo);
  return out;
}

// Fills the normalized metric columns and the equal-weight auto score.
inline void rescore(CandidateSet& cs) {
  std::vector<double> q, c;
  for (const auto& k : cs.candidates) {
    q.push_back(k.uiqm);
    c.push_back(k.uciqe);
  }
  const auto qn = normalize_scores(q), cn = normalize_scores(c);
  for (std::size_t i = 0; i < cs.candidates.size(); ++i) {
    auto& k = cs.candidates[i];
    k.uiqm_norm = qn[i];
    k.uciqe_norm = cn[i];
    k.auto_score = (qn[i] + cn[i]) / 2;
  }
}

inline CandidateSet score_candidates(const std::string& source_id, const Image& source,
                                     const std::vector<Enhancer>& list) {
  if (list.empty()) throw ConfigError("no enhancers registered");
  CandidateSet cs{source_id, {}};
  for (const auto& e : list) {
    try {
      Candidate k;
      k.id = e.name;
      k.image = e.run(source);
      if (k.image.shape() != source.shape()) shape_fail("enhancer " + e.name, source.shape(), k.image.shape());
      k.uiqm = uiqm(k.image);
      k.uciqe = uciqe(k.image);
      cs.candidates.push_back(std::move(k));
    } catch (const std::exception& ex) {
      std::fprintf(stderr, "warning: %s: enhancer '%s' failed: %s\n", source_id.c_str(), e.name.c_str(), ex.what());
    }
  }
  rescore(cs);
  return cs;
}

// Top k by auto score, ties by candidate id.
inline std::vector<const Candidate*> shortlist(const CandidateSet& cs, std::size_t k = kShortlist) {
  std::vector<const Candidate*> v;
  for (const auto& c : cs.candidates) v.push_back(&c);
  std::sort(v.begin(), v.end(), [](const Candidate* a, const Candidate* b) {
    if (a->auto_score != b->auto_score) return a->auto_score > b->auto_score;
    return a->id < b->id;
  });
  if (v.size() > k) v.resize(k);
  return v;
}

// source -> candidate -> rater -> raw 0..10 score
class ManualScores {
 public:
  void add(const std::string& source, const std::string& candidate, const std::string& rater, double score) {
    if (!(score >= 0 && score <= 10))
      throw ConfigError("manual score out of [0,10] for " + source + "/" + candidate + "/" + rater);
    table_[source][candidate][rater] = score;
    raters_.insert(rater);
  }

  // Header `source_id,candidate_id,rater_id,score`; a header-only or empty file is an empty table.
  static ManualScores parse(std::istream& is) {
    ManualScores m;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      if (lineno == 1) {
        if (line != "source_id,candidate_id,rater_id,score")
          throw ConfigError("manual CSV: bad header '" + line + "'");
        continue;
      }
      std::vector<std::string> f;
      std::stringstream ls(line);
      std::string part;
      while (std::getline(ls, part, ',')) f.push_back(part);
      if (f.size() != 4) throw ConfigError("manual CSV line " + std::to_string(lineno) + ": expected 4 fields");
      double s = 0;
      try {
        std::size_t used = 0;
        s = std::stod(f[3], &used);
        if (used != f[3].size()) throw std::invalid_argument(f[3]);
      } catch (const std::logic_error&) {
        throw ConfigError("manual CSV line " + std::to_string(lineno) + ": bad score '" + f[3] + "'");
      }
      m.add(f[0], f[1], f[2], s);
    }
    return m;
  }

  static ManualScores load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read manual CSV " + path.string());
    return parse(is);
  }

  bool empty() const { return table_.empty(); }
  const std::set<std::string>& raters() const { return raters_; }

  double score(const std::string& source, const std::string& candidate, const std::string& rater) const {
    auto s = table_.find(source);
    if (s != table_.end()) {
      auto c = s->second.find(candidate);
      if (c != s->second.end()) {
        auto r = c->second.find(rater);
        if (r != c->second.end()) return r->second;
      }
    }
    throw Error("manual scores: missing row for source '" + source + "', candidate '" + candidate + "', rater '" +
                rater + "'");
  }

 private:
  std::map<std::string, std::map<std::string, std::map<std::string, double>>> table_;
  std::set<std::string> raters_;
};

enum class CurationStatus { Winner, Rejected, Skipped };

inline const char* to_string(CurationStatus s) {
  switch (s) {
    case CurationStatus::Winner: return "WINNER";
    case CurationStatus::Rejected: return "REJECTED";
    default: return "SKIPPED";
  }
}

struct ShortlistEntry {
  std::string id;
  std::vector<double> manual_raw;   // one per rater
  std::vector<double> manual_norm;  // raw / 10
  double uiqm_norm = 0, uciqe_norm = 0;
  std::size_t components = 0;
  double total = 0;
};

struct CurationRecord {
  std::string source_id;
  std::vector<ShortlistEntry> shortlist;
  std::optional<std::string> winner;
  double total = 0;
  CurationStatus status = CurationStatus::Skipped;
};

// Picks the shortlisted candidate with the highest 12-score total (ties by id);
// rejects the source when that total is below 8.
inline CurationRecord select_reference(const CandidateSet& cs, const ManualScores& manual) {
  const auto& raters = manual.raters();
  if (raters.size() != kRaters)
    throw Error("manual scores for '" + cs.source_id + "': expected " + std::to_string(kRaters) + " raters, found " +
                std::to_string(raters.size()));
  CurationRecord rec{cs.source_id, {}, std::nullopt, 0, CurationStatus::Skipped};
  for (const auto* c : shortlist(cs)) {
    ShortlistEntry e{c->id, {}, {}, c->uiqm_norm, c->uciqe_norm, 2, c->uiqm_norm + c->uciqe_norm};
    for (const auto& r : raters) {
      const double s = manual.score(cs.source_id, c->id, r);
      e.manual_raw.push_back(s);
      e.manual_norm.push_back(s / 10);
      e.total += s / 10;
      ++e.components;
    }
    rec.shortlist.push_back(std::move(e));
  }
  if (rec.shortlist.empty()) return rec;
  const ShortlistEntry* best = nullptr;
  for (const auto& e : rec.shortlist)
    if (!best || e.total > best->total || (e.total == best->total && e.id < best->id)) best = &e;
  rec.total = best->total;
  if (best->total >= kAcceptTotal) {
    rec.winner = best->id;
    rec.status = CurationStatus::Winner;
  } else {
    rec.status = CurationStatus::Rejected;
  }
  return rec;
}

// Selection by auto score alone; the reported total is the normalized metric sum.
inline CurationRecord select_auto(const CandidateSet& cs) {
  CurationRecord rec{cs.source_id, {}, std::nullopt, 0, CurationStatus::Skipped};
  const auto top = shortlist(cs);
  for (const auto* c : top)
    rec.shortlist.push_back({c->id, {}, {}, c->uiqm_norm, c->uciqe_norm, 2, c->uiqm_norm + c->uciqe_norm});
  if (top.empty()) return rec;
  rec.winner = top[0]->id;
  rec.total = rec.shortlist[0].total;
  rec.status = CurationStatus::Winner;
  return rec;
}

struct PipelineOptions {
  std::filesystem::path source_dir;
  std::optional<std::filesystem::path> manual_csv;
  std::filesystem::path out_dir;
  bool auto_only = false;
  std::vector<Enhancer> enhancers = enhancers::builtins();
};

// Writes out/raw/<stem>.png and out/reference/<stem>.png for every winner and
// out/report.csv with one row per source image in id order.
inline std::vector<CurationRecord> run_pipeline(const PipelineOptions& opt) {
  if (!std::filesystem::is_directory(opt.source_dir))
    throw ConfigError("source directory missing: " + opt.source_dir.string());
  ManualScores manual;
  if (opt.manual_csv) manual = ManualScores::load(*opt.manual_csv);
  if (!opt.auto_only && manual.empty()) throw ConfigError("manual scores required unless --auto-only is set");
  std::filesystem::create_directories(opt.out_dir / "raw");
  std::filesystem::create_directories(opt.out_dir / "reference");

  std::vector<CurationRecord> records;
  for (const auto& path : list_images(opt.source_dir)) {
    const std::string id = path.stem().string();
    auto src = read_image(path);
    if (!src) {
      std::fprintf(stderr, "warning: cannot decode %s, skipped\n", path.string().c_str());
      records.push_back({id, {}, std::nullopt, 0, CurationStatus::Skipped});
      continue;
    }
    const auto cs = score_candidates(id, *src, opt.enhancers);
    auto rec = opt.auto_only ? select_auto(cs) : select_reference(cs, manual);
    if (rec.winner) {
      const auto it = std::find_if(cs.candidates.begin(), cs.candidates.end(),
                                   [&](const Candidate& c) { return c.id == *rec.winner; });
      write_png(opt.out_dir / "raw" / (id + ".png"), *src);
      write_png(opt.out_dir / "reference" / (id + ".png"), it->image);
    }
    records.push_back(std::move(rec));
  }
  std::sort(records.begin(), records.end(),
            [](const CurationRecord& a, const CurationRecord& b) { return a.source_id < b.source_id; });
  std::ofstream os(opt.out_dir / "report.csv", std::ios::trunc);
  os << "source_id,winner,total,status\n";
  for (const auto& r : records) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", r.total);
    os << r.source_id << ',' << (r.winner ? *r.winner : "") << ',' << buf << ',' << to_string(r.status) << '\n';
  }
  if (!os) throw Error("cannot write report in " + opt.out_dir.string());
  return records;
}

}  // namespace uieforge
