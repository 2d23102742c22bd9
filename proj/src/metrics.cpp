#include "dreg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "dreg/error.hpp"
#include "dreg/voxelize.hpp"

namespace dreg {

namespace {

// Nearest-neighbour distances from each query to `points` using an x-sorted sweep.
class SortedCloud {
 public:
  explicit SortedCloud(std::span<const Vec3> points) : pts_(points.begin(), points.end()) {
    std::sort(pts_.begin(), pts_.end(), [](const Vec3& a, const Vec3& b) { return a.x < b.x; });
  }

  double nearest(const Vec3& q) const {
    auto it = std::lower_bound(pts_.begin(), pts_.end(), q.x, [](const Vec3& p, double x) { return p.x < x; });
    double best = std::numeric_limits<double>::infinity();
    for (auto r = it; r != pts_.end(); ++r) {
      const double dx = r->x - q.x;
      if (dx * dx > best) break;
      best = std::min(best, squared_norm(*r - q));
    }
    for (auto l = it; l != pts_.begin();) {
      --l;
      const double dx = q.x - l->x;
      if (dx * dx > best) break;
      best = std::min(best, squared_norm(*l - q));
    }
    return std::sqrt(best);
  }

 private:
  std::vector<Vec3> pts_;
};

}  // namespace

SurfaceDistance metric_md_hd(std::span<const Vec3> pred, std::span<const Vec3> target) {
  if (pred.empty() || target.empty()) throw ValidationError("surface distance of an empty mesh");
  const SortedCloud to_target(target);
  const SortedCloud to_pred(pred);
  double sum = 0.0;
  double hd = 0.0;
  for (const auto& p : pred) {
    const double d = to_target.nearest(p);
    sum += d;
    hd = std::max(hd, d);
  }
  for (const auto& t : target) {
    const double d = to_pred.nearest(t);
    sum += d;
    hd = std::max(hd, d);
  }
  return {sum / static_cast<double>(pred.size() + target.size()), hd};
}

double metric_mae(std::span<const Vec3> pred, std::span<const Vec3> target) {
  if (pred.size() != target.size()) throw ValidationError("metric_mae: vertex counts differ");
  if (pred.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) sum += norm(pred[i] - target[i]);
  return sum / static_cast<double>(pred.size());
}

double metric_dsc(const Mesh& pred, const Mesh& target, double voxel_mm) {
  if (!(voxel_mm > 0.0)) throw ValidationError("voxel size must be positive");
  require_watertight(pred);
  require_watertight(target);
  Box box = bounding_box(pred.vertices);
  for (const auto& v : target.vertices) box.expand(v);
  const auto grid = VoxelGrid::covering(box, voxel_mm);
  const auto a = voxelize(pred, grid);
  const auto b = voxelize(target, grid);
  std::size_t na = 0;
  std::size_t nb = 0;
  std::size_t both = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    na += a[i];
    nb += b[i];
    both += a[i] & b[i];
  }
  if (na + nb == 0) return 100.0;
  return 200.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

MetricReport evaluate_metrics(const Mesh& pred, const Mesh& target, double voxel_mm) {
  MetricReport r;
  const auto sd = metric_md_hd(pred.vertices, target.vertices);
  r.md_mm = sd.md_mm;
  r.hd_mm = sd.hd_mm;
  r.mae_mm = metric_mae(pred.vertices, target.vertices);
  r.dsc_percent = metric_dsc(pred, target, voxel_mm);
  return r;
}

}  // namespace dreg
