#include "paed/evaluation.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include "paed/error.hpp"

namespace paed {
namespace {

double ratio(std::int64_t num, std::int64_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

void check_pair(const FrameLabelMatrix& pred, const FrameLabelMatrix& truth, const char* op) {
  if (pred.rank() != 2 || pred.shape() != truth.shape()) {
    throw ShapeError(std::string(op) + ": prediction " + shape_to_string(pred.shape()) + " and truth " +
                     shape_to_string(truth.shape()) + " must be equal-shaped [frames, categories] matrices");
  }
}

std::string fmt4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::ofstream open_csv(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

}  // namespace

double PrfCounts::precision() const { return ratio(tp, tp + fp); }
double PrfCounts::recall() const { return ratio(tp, tp + fn); }
double PrfCounts::f1() const {
  // 2PR/(P+R) written on counts: 2TP/(2TP+FP+FN), with 0/0 -> 0.
  return ratio(2 * tp, 2 * tp + fp + fn);
}

double EvalReport::macro_f1() const {
  if (per_class.empty()) return 0.0;
  double s = 0.0;
  for (const auto& c : per_class) s += c.counts.f1();
  return s / static_cast<double>(per_class.size());
}

double EvalReport::macro_precision() const {
  if (per_class.empty()) return 0.0;
  double s = 0.0;
  for (const auto& c : per_class) s += c.counts.precision();
  return s / static_cast<double>(per_class.size());
}

double EvalReport::macro_recall() const {
  if (per_class.empty()) return 0.0;
  double s = 0.0;
  for (const auto& c : per_class) s += c.counts.recall();
  return s / static_cast<double>(per_class.size());
}

FrameScorer::FrameScorer(std::vector<std::string> class_names, int reported_degrees)
    : names_(std::move(class_names)),
      per_class_(names_.size()),
      by_degree_(names_.size() + 1),
      degree_frames_(names_.size() + 1, 0),
      reported_degrees_(reported_degrees) {
  if (names_.empty()) throw UsageError("FrameScorer: no classes");
  if (reported_degrees_ < 1) throw UsageError("FrameScorer: reported degree count must be positive");
}

void FrameScorer::add(const FrameLabelMatrix& pred, const FrameLabelMatrix& truth, std::size_t valid_frames) {
  check_pair(pred, truth, "FrameScorer::add");
  const std::size_t y = truth.shape()[1];
  if (y != names_.size()) {
    throw ShapeError("FrameScorer::add: matrices have " + std::to_string(y) + " categories, scorer has " +
                     std::to_string(names_.size()));
  }
  const std::size_t frames = std::min(valid_frames, truth.shape()[0]);
  for (std::size_t t = 0; t < frames; ++t) {
    const std::uint8_t* p = pred.ptr() + t * y;
    const std::uint8_t* g = truth.ptr() + t * y;
    PrfCounts frame;
    std::size_t degree = 0;
    for (std::size_t c = 0; c < y; ++c) {
      if (p[c] > 1 || g[c] > 1) throw DataError("FrameScorer::add: non-binary entry at frame " + std::to_string(t));
      const bool pv = p[c] != 0;
      const bool gv = g[c] != 0;
      degree += gv;
      if (pv && gv) {
        ++per_class_[c].tp;
        ++frame.tp;
      } else if (pv) {
        ++per_class_[c].fp;
        ++frame.fp;
      } else if (gv) {
        ++per_class_[c].fn;
        ++frame.fn;
      }
    }
    by_degree_[degree] += frame;
    ++degree_frames_[degree];
    ++frames_;
  }
}

EvalReport FrameScorer::report() const {
  EvalReport r;
  r.frames = frames_;
  r.degree_zero = by_degree_[0];
  for (std::size_t c = 0; c < names_.size(); ++c) {
    r.per_class.push_back({names_[c], per_class_[c]});
    r.pooled += per_class_[c];
  }
  std::size_t top = static_cast<std::size_t>(reported_degrees_);
  for (std::size_t d = top + 1; d < degree_frames_.size(); ++d) {
    if (degree_frames_[d] > 0) top = d;
  }
  for (std::size_t d = 1; d <= top; ++d) {
    DegreeScore s;
    s.degree = static_cast<int>(d);
    if (d < degree_frames_.size()) {
      s.frames = degree_frames_[d];
      s.counts = by_degree_[d];
    }
    r.by_degree.push_back(s);
  }
  return r;
}

EvalReport frame_prf(const FrameLabelMatrix& pred, const FrameLabelMatrix& truth,
                     const std::vector<std::string>& class_names) {
  check_pair(pred, truth, "frame_prf");
  std::vector<std::string> names = class_names;
  if (names.empty()) {
    for (std::size_t c = 0; c < truth.shape()[1]; ++c) names.push_back("class" + std::to_string(c));
  }
  FrameScorer scorer(std::move(names));
  scorer.add(pred, truth);
  return scorer.report();
}

std::vector<DegreeScore> f1_by_degree(const FrameLabelMatrix& pred, const FrameLabelMatrix& truth,
                                      int reported_degrees) {
  check_pair(pred, truth, "f1_by_degree");
  std::vector<std::string> names(truth.shape()[1]);
  FrameScorer scorer(std::move(names), reported_degrees);
  scorer.add(pred, truth);
  return scorer.report().by_degree;
}

void write_per_class_csv(const EvalReport& report, const std::filesystem::path& path) {
  auto out = open_csv(path);
  out << "# frame-based scores; macro = unweighted mean of per-class values (\"Average\"), "
         "micro = pooled counts (\"Overall\"); 0/0 is reported as 0\n";
  out << "name,TP,FP,FN,P,R,F1\n";
  for (const auto& c : report.per_class) {
    out << c.name << ',' << c.counts.tp << ',' << c.counts.fp << ',' << c.counts.fn << ','
        << fmt4(c.counts.precision()) << ',' << fmt4(c.counts.recall()) << ',' << fmt4(c.counts.f1()) << '\n';
  }
  const auto& p = report.pooled;
  out << "macro,,,," << fmt4(report.macro_precision()) << ',' << fmt4(report.macro_recall()) << ','
      << fmt4(report.macro_f1()) << '\n';
  out << "micro," << p.tp << ',' << p.fp << ',' << p.fn << ',' << fmt4(p.precision()) << ','
      << fmt4(p.recall()) << ',' << fmt4(p.f1()) << '\n';
}

void write_by_degree_csv(const EvalReport& report, const std::filesystem::path& path) {
  auto out = open_csv(path);
  out << "# micro F1 within frames grouped by the number of active ground-truth categories\n";
  out << "degree,frames,F1\n";
  for (const auto& d : report.by_degree) {
    out << d.degree << ',' << d.frames << ',' << fmt4(d.counts.f1()) << '\n';
  }
}

}  // namespace paed
