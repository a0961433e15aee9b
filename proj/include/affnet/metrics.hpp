#pragma once

// Heatmap evaluation: KL divergence, histogram intersection (SIM),
// normalized scanpath saliency (NSS), and precision/recall/F-measure curves,
// plus grouped aggregation, CSV serialization, and SVG curve plots.

#include <iomanip>
#include <map>
#include <sstream>

#include "affnet/model.hpp"

namespace affnet {

// A metric whose preconditions make the value undefined (all-zero ground
// truth, negative mass, out-of-range predictions).
class MetricError : public NumericError {
 public:
  using NumericError::NumericError;
};

namespace detail {

inline std::vector<double> normalized_mass(const Tensor& t, const char* who,
                                           bool must_be_nonzero) {
  std::vector<double> v = t.values();
  double sum = 0.0;
  for (double x : v) {
    if (x < 0.0)
      throw MetricError(std::string(who) + ": negative mass in input");
    sum += x;
  }
  if (sum <= 0.0) {
    if (must_be_nonzero)
      throw MetricError(std::string(who) + ": all-zero ground truth");
    return v;  // all zeros stay all zeros
  }
  for (double& x : v) x /= sum;
  return v;
}

}  // namespace detail

// Σ gt·ln(ε + gt/(pred+ε)) over mass-normalized maps, ε = 1e-12.
inline double kld(const Tensor& pred, const Tensor& gt) {
  require_same_shape(pred.shape(), gt.shape(), "kld");
  constexpr double kEps = 1e-12;
  const auto p = detail::normalized_mass(pred, "kld", false);
  const auto g = detail::normalized_mass(gt, "kld", true);
  double acc = 0.0;
  for (size_t i = 0; i < g.size(); ++i)
    if (g[i] > 0.0) acc += g[i] * std::log(kEps + g[i] / (p[i] + kEps));
  return acc;
}

// Histogram intersection of mass-normalized maps: Σ min(pred, gt) ∈ [0,1].
inline double sim(const Tensor& pred, const Tensor& gt) {
  require_same_shape(pred.shape(), gt.shape(), "sim");
  const auto p = detail::normalized_mass(pred, "sim", false);
  const auto g = detail::normalized_mass(gt, "sim", true);
  double acc = 0.0;
  for (size_t i = 0; i < g.size(); ++i) acc += std::min(p[i], g[i]);
  return acc;
}

// Mean of the standardized prediction (zero mean, unit population standard
// deviation) at the fixation pixels. A constant map has no standardization;
// by convention it scores 0 and sets the degeneracy flag.
inline double nss(const Tensor& pred, const PointList& fixations,
                  bool* degenerate = nullptr) {
  if (pred.shape().size() != 2)
    throw ShapeError("nss: want [h,w], got " + shape_str(pred.shape()));
  if (fixations.empty()) throw MetricError("nss: no fixation points");
  const int h = pred.shape()[0], w = pred.shape()[1];
  const auto& v = pred.values();
  double mu = 0.0;
  for (double x : v) mu += x;
  mu /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mu) * (x - mu);
  var /= static_cast<double>(v.size());
  const double sd = std::sqrt(var);
  if (degenerate) *degenerate = sd < 1e-12;
  if (sd < 1e-12) return 0.0;
  double acc = 0.0;
  for (const auto& f : fixations) {
    if (f[0] < 0 || f[0] >= w || f[1] < 0 || f[1] >= h)
      throw DataError("nss: fixation (" + std::to_string(f[0]) + "," +
                      std::to_string(f[1]) + ") outside " + std::to_string(w) +
                      "x" + std::to_string(h) + " map");
    acc += (v[static_cast<size_t>(f[1]) * w + f[0]] - mu) / sd;
  }
  return acc / static_cast<double>(fixations.size());
}

struct CurvePoint {
  double threshold = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f = 0.0;
};

// Precision/recall/F_β (β² = 0.3) at 255 uniform thresholds k/256. The
// ground-truth heatmap is binarized at 0.5; a prediction with no pixel above
// threshold scores precision 1, recall 0.
inline std::vector<CurvePoint> pr_f_curves(const Tensor& pred,
                                           const Tensor& gt) {
  require_same_shape(pred.shape(), gt.shape(), "pr_f_curves");
  constexpr double kBeta2 = 0.3;
  const auto& pv = pred.values();
  for (double x : pv)
    if (x < 0.0 || x > 1.0)
      throw MetricError("pr_f_curves: prediction outside [0,1]");
  std::vector<uint8_t> g(gt.values().size());
  long positives = 0;
  for (size_t i = 0; i < g.size(); ++i) {
    g[i] = gt.values()[i] >= 0.5 ? 1 : 0;
    positives += g[i];
  }
  if (positives == 0)
    throw MetricError("pr_f_curves: all-zero ground truth after binarization");

  std::vector<CurvePoint> curve;
  curve.reserve(255);
  for (int k = 1; k <= 255; ++k) {
    const double t = k / 256.0;
    long tp = 0, fp = 0;
    for (size_t i = 0; i < pv.size(); ++i) {
      if (pv[i] >= t) {
        if (g[i]) ++tp;
        else ++fp;
      }
    }
    CurvePoint pt;
    pt.threshold = t;
    pt.precision = (tp + fp) == 0 ? 1.0 : static_cast<double>(tp) / (tp + fp);
    pt.recall = static_cast<double>(tp) / positives;
    const double denom = kBeta2 * pt.precision + pt.recall;
    pt.f = denom > 0.0
               ? (1.0 + kBeta2) * pt.precision * pt.recall / denom
               : 0.0;
    curve.push_back(pt);
  }
  return curve;
}

inline std::vector<CurvePoint> average_curves(
    const std::vector<std::vector<CurvePoint>>& curves) {
  if (curves.empty()) return {};
  std::vector<CurvePoint> out = curves[0];
  for (size_t c = 1; c < curves.size(); ++c) {
    if (curves[c].size() != out.size())
      throw ShapeError("average_curves: curves differ in length");
    for (size_t i = 0; i < out.size(); ++i) {
      out[i].precision += curves[c][i].precision;
      out[i].recall += curves[c][i].recall;
      out[i].f += curves[c][i].f;
    }
  }
  const double inv = 1.0 / static_cast<double>(curves.size());
  for (auto& pt : out) {
    pt.precision *= inv;
    pt.recall *= inv;
    pt.f *= inv;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

struct MetricRow {
  std::string split, affordance, part;
  double kld = 0.0, sim = 0.0, nss = 0.0;
};

struct MetricTriple {
  double kld = 0.0, sim = 0.0, nss = 0.0;
  int count = 0;
};

struct MetricReport {
  std::vector<MetricRow> group_rows;  // mean per (split, class, part)
  std::map<std::string, MetricTriple> per_class;
  std::map<std::string, MetricTriple> per_part;
  MetricTriple overall;
};

namespace detail {

// Sum in sorted-value order so aggregation is exactly permutation-invariant.
inline double stable_mean(std::vector<double> vals) {
  std::sort(vals.begin(), vals.end());
  double acc = 0.0;
  for (double v : vals) acc += v;
  return acc / static_cast<double>(vals.size());
}

}  // namespace detail

// Per-image rows → mean per (split, class, part) group plus pooled per-class,
// per-part, and overall means (per-image-then-mean convention).
inline MetricReport aggregate(const std::vector<MetricRow>& rows) {
  MetricReport report;
  std::map<std::array<std::string, 3>, std::array<std::vector<double>, 3>>
      groups;
  std::map<std::string, std::array<std::vector<double>, 3>> by_class, by_part;
  std::array<std::vector<double>, 3> all;
  for (const auto& r : rows) {
    auto& g = groups[{r.split, r.affordance, r.part}];
    for (auto* bucket : {&g, &by_class[r.affordance], &by_part[r.part], &all}) {
      (*bucket)[0].push_back(r.kld);
      (*bucket)[1].push_back(r.sim);
      (*bucket)[2].push_back(r.nss);
    }
  }
  for (const auto& [key, vals] : groups) {
    MetricRow row;
    row.split = key[0];
    row.affordance = key[1];
    row.part = key[2];
    row.kld = detail::stable_mean(vals[0]);
    row.sim = detail::stable_mean(vals[1]);
    row.nss = detail::stable_mean(vals[2]);
    report.group_rows.push_back(std::move(row));
  }
  auto to_triple = [](const std::array<std::vector<double>, 3>& vals) {
    MetricTriple t;
    t.kld = detail::stable_mean(vals[0]);
    t.sim = detail::stable_mean(vals[1]);
    t.nss = detail::stable_mean(vals[2]);
    t.count = static_cast<int>(vals[0].size());
    return t;
  };
  for (const auto& [name, vals] : by_class) report.per_class[name] = to_triple(vals);
  for (const auto& [name, vals] : by_part) report.per_part[name] = to_triple(vals);
  if (!rows.empty()) report.overall = to_triple(all);
  return report;
}

// ---------------------------------------------------------------------------
// CSV / SVG
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fmt_g(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace detail

inline std::string report_csv(const MetricReport& report) {
  std::string out =
      "# averaging: per-image measurements, meaned within each group\n"
      "split,class,part,kld,sim,nss\n";
  auto line = [&](const std::string& split, const std::string& cls,
                  const std::string& part, double k, double s, double n) {
    out += split + "," + cls + "," + part + "," + detail::fmt_g(k) + "," +
           detail::fmt_g(s) + "," + detail::fmt_g(n) + "\n";
  };
  for (const auto& r : report.group_rows)
    line(r.split, r.affordance, r.part, r.kld, r.sim, r.nss);
  for (const auto& [name, t] : report.per_class)
    line("all", name, "all", t.kld, t.sim, t.nss);
  for (const auto& [name, t] : report.per_part)
    line("all", "all", name, t.kld, t.sim, t.nss);
  if (report.overall.count > 0)
    line("all", "all", "all", report.overall.kld, report.overall.sim,
         report.overall.nss);
  return out;
}

inline std::string curve_csv(const std::vector<CurvePoint>& curve) {
  std::string out = "threshold,precision,recall,fmeasure\n";
  for (const auto& pt : curve)
    out += detail::fmt_g(pt.threshold) + "," + detail::fmt_g(pt.precision) +
           "," + detail::fmt_g(pt.recall) + "," + detail::fmt_g(pt.f) + "\n";
  return out;
}

// A minimal self-contained polyline plot. kind "pr": recall vs precision;
// kind "f": threshold vs F-measure.
inline std::string curve_svg(const std::vector<CurvePoint>& curve,
                             const std::string& kind) {
  if (kind != "pr" && kind != "f")
    throw ConfigError("curve_svg: kind must be \"pr\" or \"f\"");
  const int w = 480, h = 360, pad = 40;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w
      << "\" height=\"" << h << "\" viewBox=\"0 0 " << w << " " << h
      << "\">\n";
  svg << "<rect width=\"" << w << "\" height=\"" << h
      << "\" fill=\"white\"/>\n";
  svg << "<line x1=\"" << pad << "\" y1=\"" << h - pad << "\" x2=\"" << w - pad
      << "\" y2=\"" << h - pad << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << pad << "\" y1=\"" << pad << "\" x2=\"" << pad
      << "\" y2=\"" << h - pad << "\" stroke=\"black\"/>\n";
  const std::string xlabel = kind == "pr" ? "recall" : "threshold";
  const std::string ylabel = kind == "pr" ? "precision" : "F-measure";
  svg << "<text x=\"" << w / 2 << "\" y=\"" << h - 8
      << "\" text-anchor=\"middle\" font-size=\"13\">" << xlabel
      << "</text>\n";
  svg << "<text x=\"14\" y=\"" << h / 2
      << "\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 "
         "14 "
      << h / 2 << ")\">" << ylabel << "</text>\n";
  svg << "<polyline fill=\"none\" stroke=\"#1f6fb2\" stroke-width=\"1.5\" "
         "points=\"";
  for (const auto& pt : curve) {
    const double x = kind == "pr" ? pt.recall : pt.threshold;
    const double y = kind == "pr" ? pt.precision : pt.f;
    svg << detail::fmt_g(pad + x * (w - 2 * pad)) << ","
        << detail::fmt_g(h - pad - y * (h - 2 * pad)) << " ";
  }
  svg << "\"/>\n</svg>\n";
  return svg.str();
}

}  // namespace affnet
