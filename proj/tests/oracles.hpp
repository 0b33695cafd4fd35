#pragma once

// Reference implementations written independently of the library, shared by the unit
// tests and the acceptance runner.

#include "lerf/pyramid.hpp"

#include <cmath>
#include <vector>

namespace oracle {

inline std::vector<double> centers(int length, int crop, double overlap) {
  const double first = crop / 2.0, last = length - crop / 2.0, stride = crop * (1.0 - overlap);
  std::vector<double> out;
  for (int k = 0; first + k * stride < last - 1e-9 * stride; ++k) out.push_back(first + k * stride);
  out.push_back(last);
  return out;
}

inline std::vector<double> fractions(const lerf::PyramidConfig& c) {
  std::vector<double> out;
  for (int l = 0; l < c.n_levels; ++l) {
    out.push_back(c.n_levels == 1 ? c.s_min : c.s_min * std::pow(c.s_max / c.s_min, double(l) / (c.n_levels - 1)));
  }
  return out;
}

inline int crop_px(double f, int w, int h) { return std::max(1, static_cast<int>(std::lround(f * std::min(w, h)))); }

// Tent function of node i over sorted nodes, evaluated after clamping x to the hull.
inline double hat(const std::vector<double>& nodes, size_t i, double x) {
  if (nodes.size() == 1) return 1.0;
  x = std::min(std::max(x, nodes.front()), nodes.back());
  if (x == nodes[i]) return 1.0;
  if (i > 0 && x > nodes[i - 1] && x < nodes[i]) return (x - nodes[i - 1]) / (nodes[i] - nodes[i - 1]);
  if (i + 1 < nodes.size() && x > nodes[i] && x < nodes[i + 1]) return (nodes[i + 1] - x) / (nodes[i + 1] - nodes[i]);
  return 0.0;
}

// Sums every stored crop of every level with its tensor-product tent weight.
inline Eigen::VectorXd pyramid_target(const lerf::FeaturePyramid& p, int width, int height,
                                      const lerf::PyramidConfig& config, double x, double y, double s_img) {
  const auto fr = fractions(config);
  std::vector<double> log_fr;
  for (double f : fr) log_fr.push_back(std::log(f));
  const double ls = std::log(std::min(std::max(s_img, fr.front()), fr.back()));
  const auto& g0 = p.levels.front();
  const int d = static_cast<int>(g0.embeddings.size() / (size_t(g0.nx) * g0.ny));
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(d);
  for (size_t l = 0; l < fr.size(); ++l) {
    const double wl = hat(log_fr, l, ls);
    if (wl == 0) continue;
    const int crop = crop_px(fr[l], width, height);
    const auto cx = centers(width, crop, config.overlap), cy = centers(height, crop, config.overlap);
    const auto& grid = p.levels[l];
    for (size_t j = 0; j < cy.size(); ++j) {
      for (size_t i = 0; i < cx.size(); ++i) {
        const double w = wl * hat(cx, i, x) * hat(cy, j, y);
        if (w == 0) continue;
        for (int k = 0; k < d; ++k) acc[k] += w * grid.embeddings[(j * grid.nx + i) * d + k];
      }
    }
  }
  return acc.normalized();
}

// Alpha compositing of a piecewise-constant medium, each segment split into `sub` equal
// steps, with transmittance as a running product of (1 - alpha).
struct DenseComposite {
  Eigen::VectorXd value;
  double accumulation = 0;
};

inline DenseComposite composite_segments(const std::vector<double>& sigma, const std::vector<double>& length,
                                         const Eigen::MatrixXd& values, int sub) {
  DenseComposite out;
  out.value = Eigen::VectorXd::Zero(values.rows());
  double T = 1;
  for (size_t i = 0; i < sigma.size(); ++i) {
    const double a = 1 - std::exp(-sigma[i] * length[i] / sub);
    for (int k = 0; k < sub; ++k) {
      out.value += T * a * values.col(static_cast<Eigen::Index>(i));
      out.accumulation += T * a;
      T *= 1 - a;
    }
  }
  return out;
}

}  // namespace oracle
