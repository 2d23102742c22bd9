#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>

#include "dreg/mesh.hpp"

namespace dreg::detail {

struct P2 {
  double x;
  double y;
};

inline double raw_edge(const P2& a, const P2& b, const P2& p) {
  return (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
}

// Edge function in canonical vertex order: a shared edge yields exactly
// negated values in its two triangles.
inline double edge(std::uint32_t ia, const P2& a, std::uint32_t ib, const P2& b, const P2& p) {
  return ia < ib ? raw_edge(a, b, p) : -raw_edge(b, a, p);
}

inline bool owns_edge(const P2& from, const P2& to) {
  const double dy = to.y - from.y;
  const double dx = to.x - from.x;
  return dy > 0.0 || (dy == 0.0 && dx < 0.0);
}

// Point-in-triangle with a top-left style tie rule: a point on an edge shared
// by two oppositely oriented neighbours is counted exactly once.
class TriangleCoverage {
 public:
  TriangleCoverage(const Triangle& tri, const P2& a, const P2& b, const P2& c) : tri_(tri), v_{a, b, c} {
    const double area = raw_edge(a, b, c);
    degenerate_ = area == 0.0 || !std::isfinite(area);
    sign_ = area > 0.0 ? 1.0 : -1.0;
    for (int k = 0; k < 3; ++k) {
      const P2& from = v_[(k + 1) % 3];
      const P2& to = v_[(k + 2) % 3];
      own_[k] = sign_ > 0.0 ? owns_edge(from, to) : owns_edge(to, from);
    }
  }

  bool degenerate() const { return degenerate_; }
  double min_x() const { return std::min({v_[0].x, v_[1].x, v_[2].x}); }
  double max_x() const { return std::max({v_[0].x, v_[1].x, v_[2].x}); }
  double min_y() const { return std::min({v_[0].y, v_[1].y, v_[2].y}); }
  double max_y() const { return std::max({v_[0].y, v_[1].y, v_[2].y}); }

  // On success writes normalized barycentric weights.
  bool covers(const P2& p, std::array<double, 3>& bary) const {
    if (degenerate_) return false;
    double w[3];
    for (int k = 0; k < 3; ++k) {
      const int a = (k + 1) % 3;
      const int b = (k + 2) % 3;
      w[k] = sign_ * edge(tri_[a], v_[a], tri_[b], v_[b], p);
      if (!(w[k] > 0.0 || (w[k] == 0.0 && own_[k]))) return false;
    }
    const double sum = w[0] + w[1] + w[2];
    if (!(sum > 0.0)) return false;
    bary = {w[0] / sum, w[1] / sum, w[2] / sum};
    return true;
  }

 private:
  Triangle tri_;
  P2 v_[3];
  bool own_[3] = {false, false, false};
  double sign_ = 1.0;
  bool degenerate_ = false;
};

}  // namespace dreg::detail
