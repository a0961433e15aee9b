#pragma once

// Independent reference implementations used to pin expected values in tests.
// Everything here is written as a literal transcription of the defining
// formula — no shared code with the library under test, no cleverness.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

namespace oracle {

// C[m×n] = A[m×k] · B[k×n], triple loop in definition order.
inline std::vector<double> matmul(const std::vector<double>& a,
                                  const std::vector<double>& b, int m, int k,
                                  int n) {
  std::vector<double> c(static_cast<size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int l = 0; l < k; ++l) acc += a[i * k + l] * b[l * n + j];
      c[i * n + j] = acc;
    }
  return c;
}

inline std::vector<double> softmax_row(const std::vector<double>& x) {
  double mx = *std::max_element(x.begin(), x.end());
  std::vector<double> y(x.size());
  double z = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    y[i] = std::exp(x[i] - mx);
    z += y[i];
  }
  for (double& v : y) v /= z;
  return y;
}

inline std::vector<double> layernorm_row(const std::vector<double>& x,
                                         const std::vector<double>& gain,
                                         const std::vector<double>& bias,
                                         double eps = 1e-5) {
  const size_t c = x.size();
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= static_cast<double>(c);
  double var = 0.0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= static_cast<double>(c);
  std::vector<double> y(c);
  for (size_t i = 0; i < c; ++i)
    y[i] = (x[i] - mu) / std::sqrt(var + eps) * gain[i] + bias[i];
  return y;
}

// Zero-padded stride-1 cross-correlation, definition order.
inline std::vector<double> conv2d(const std::vector<double>& x, int ci, int h,
                                  int w, const std::vector<double>& ker,
                                  int co, int k) {
  const int pad = (k - 1) / 2;
  std::vector<double> y(static_cast<size_t>(co) * h * w, 0.0);
  for (int oc = 0; oc < co; ++oc)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        double acc = 0.0;
        for (int ic = 0; ic < ci; ++ic)
          for (int u = 0; u < k; ++u)
            for (int v = 0; v < k; ++v) {
              const int pi = i + u - pad, pj = j + v - pad;
              if (pi < 0 || pi >= h || pj < 0 || pj >= w) continue;
              acc += x[(ic * h + pi) * w + pj] *
                     ker[((oc * ci + ic) * k + u) * k + v];
            }
        y[(oc * h + i) * w + j] = acc;
      }
  return y;
}

// Align-corners-false bilinear sample of a single channel at output (i, j).
inline double bilinear_at(const std::vector<double>& x, int h, int w, int th,
                          int tw, int i, int j) {
  auto clampd = [](double v, double lo, double hi) {
    return std::min(std::max(v, lo), hi);
  };
  double sy = clampd((i + 0.5) * static_cast<double>(h) / th - 0.5, 0.0,
                     static_cast<double>(h - 1));
  double sx = clampd((j + 0.5) * static_cast<double>(w) / tw - 0.5, 0.0,
                     static_cast<double>(w - 1));
  const int y0 = static_cast<int>(std::floor(sy));
  const int x0 = static_cast<int>(std::floor(sx));
  const int y1 = std::min(y0 + 1, h - 1);
  const int x1 = std::min(x0 + 1, w - 1);
  const double fy = sy - y0, fx = sx - x0;
  const double top = x[y0 * w + x0] * (1 - fx) + x[y0 * w + x1] * fx;
  const double bot = x[y1 * w + x0] * (1 - fx) + x[y1 * w + x1] * fx;
  return top * (1 - fy) + bot * fy;
}

// --- Saliency metric references (straight from the defining formulas) ------

inline double kld(std::vector<double> pred, std::vector<double> gt,
                  double eps = 1e-12) {
  double sp = 0.0, sg = 0.0;
  for (double v : pred) sp += v;
  for (double v : gt) sg += v;
  if (sp > 0.0)
    for (double& v : pred) v /= sp;
  for (double& v : gt) v /= sg;
  double acc = 0.0;
  for (size_t i = 0; i < gt.size(); ++i)
    if (gt[i] > 0.0) acc += gt[i] * std::log(eps + gt[i] / (pred[i] + eps));
  return acc;
}

inline double sim(std::vector<double> pred, std::vector<double> gt) {
  double sp = 0.0, sg = 0.0;
  for (double v : pred) sp += v;
  for (double v : gt) sg += v;
  if (sp > 0.0)
    for (double& v : pred) v /= sp;
  for (double& v : gt) v /= sg;
  double acc = 0.0;
  for (size_t i = 0; i < gt.size(); ++i) acc += std::min(pred[i], gt[i]);
  return acc;
}

// Fixations as flat indices; population standard deviation.
inline double nss(const std::vector<double>& pred,
                  const std::vector<size_t>& fixations) {
  double mu = 0.0;
  for (double v : pred) mu += v;
  mu /= static_cast<double>(pred.size());
  double var = 0.0;
  for (double v : pred) var += (v - mu) * (v - mu);
  var /= static_cast<double>(pred.size());
  const double sd = std::sqrt(var);
  if (sd < 1e-12) return 0.0;
  double acc = 0.0;
  for (size_t f : fixations) acc += (pred[f] - mu) / sd;
  return acc / static_cast<double>(fixations.size());
}

struct PrPoint {
  double precision, recall, f;
};

// 255 uniform thresholds k/256; empty prediction → precision 1, recall 0.
inline std::vector<PrPoint> pr_f(const std::vector<double>& pred,
                                 const std::vector<uint8_t>& gt,
                                 double beta2 = 0.3) {
  std::vector<PrPoint> out;
  for (int kk = 1; kk <= 255; ++kk) {
    const double t = kk / 256.0;
    long tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
      const bool p = pred[i] >= t;
      const bool g = gt[i] != 0;
      if (p && g) ++tp;
      if (p && !g) ++fp;
      if (!p && g) ++fn;
    }
    PrPoint pt{};
    pt.precision = (tp + fp) == 0 ? 1.0 : static_cast<double>(tp) / (tp + fp);
    pt.recall = (tp + fn) == 0 ? 0.0 : static_cast<double>(tp) / (tp + fn);
    const double denom = beta2 * pt.precision + pt.recall;
    pt.f = denom > 0.0
               ? (1.0 + beta2) * pt.precision * pt.recall / denom
               : 0.0;
    out.push_back(pt);
  }
  return out;
}

// Direct 2-D Gaussian heatmap: every output pixel sums the full
// (non-separable) kernel over the impulse mask, then min-max normalizes.
inline std::vector<double> gaussian_heatmap(
    const std::vector<std::array<int, 2>>& points, int h, int w, int ks) {
  std::vector<double> mask(static_cast<size_t>(h) * w, 0.0);
  for (const auto& p : points) mask[static_cast<size_t>(p[1]) * w + p[0]] = 1.0;
  if (points.empty()) return mask;
  const int r = ks / 2;
  const double sigma = ks / 6.0;
  std::vector<double> out(mask.size(), 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          acc += std::exp(-(static_cast<double>(dx) * dx) /
                          (2.0 * sigma * sigma)) *
                 std::exp(-(static_cast<double>(dy) * dy) /
                          (2.0 * sigma * sigma)) *
                 mask[static_cast<size_t>(yy) * w + xx];
        }
      out[static_cast<size_t>(y) * w + x] = acc;
    }
  double lo = out[0], hi = out[0];
  for (double v : out) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi > lo)
    for (double& v : out) v = (v - lo) / (hi - lo);
  else if (hi > 0.0)
    std::fill(out.begin(), out.end(), 1.0);
  return out;
}

}  // namespace oracle
