#pragma once
// Oriented-box geometry on the BEV plane: corner extraction, convex polygon
// clipping (Sutherland-Hodgman), exact rectangle IoU, point containment.

#include <cmath>

#include "pnx/core.hpp"

namespace pnx {

template <class S>
struct GTBox {
  int class_id = 0;
  std::array<S, 3> center{};
  std::array<S, 3> size{};
  S yaw = S(0);

  void validate() const {
    for (S d : size)
      require(d > S(0), Err::InvalidConfig, "box sizes must be positive");
    require(yaw > S(-M_PI) - S(1e-12) && yaw <= S(M_PI) + S(1e-12),
            Err::InvalidConfig, "yaw must lie in (-pi, pi]");
    for (S v : center)
      require(std::isfinite(double(v)), Err::NonFinite, "box center non-finite");
  }
};

template <class S>
struct Vec2 {
  S x = S(0), y = S(0);
};

template <class S>
inline S cross2(const Vec2<S>& o, const Vec2<S>& a, const Vec2<S>& b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

// BEV footprint corners, counterclockwise.
template <class S>
inline std::array<Vec2<S>, 4> obb_corners(S cx, S cy, S dx, S dy, S yaw) {
  S hx = dx / S(2), hy = dy / S(2);
  S c = std::cos(yaw), s = std::sin(yaw);
  std::array<Vec2<S>, 4> local{
      Vec2<S>{hx, hy}, Vec2<S>{-hx, hy}, Vec2<S>{-hx, -hy}, Vec2<S>{hx, -hy}};
  std::array<Vec2<S>, 4> out;
  for (int i = 0; i < 4; ++i)
    out[size_t(i)] = Vec2<S>{cx + local[size_t(i)].x * c - local[size_t(i)].y * s,
                             cy + local[size_t(i)].x * s + local[size_t(i)].y * c};
  return out;
}

template <class S>
inline std::array<Vec2<S>, 4> obb_corners(const GTBox<S>& b) {
  return obb_corners(b.center[0], b.center[1], b.size[0], b.size[1], b.yaw);
}

// Shoelace area; positive for counterclockwise polygons.
template <class S>
inline S polygon_area(const std::vector<Vec2<S>>& poly) {
  if (poly.size() < 3) return S(0);
  S acc = S(0);
  for (size_t i = 0; i < poly.size(); ++i) {
    const Vec2<S>& a = poly[i];
    const Vec2<S>& b = poly[(i + 1) % poly.size()];
    acc += a.x * b.y - b.x * a.y;
  }
  return acc / S(2);
}

// Clips a convex subject polygon against a convex counterclockwise clip
// polygon, one clip edge at a time.
template <class S>
inline std::vector<Vec2<S>> clip_convex(std::vector<Vec2<S>> subject,
                                        const std::vector<Vec2<S>>& clip) {
  for (size_t e = 0; e < clip.size() && !subject.empty(); ++e) {
    const Vec2<S>& a = clip[e];
    const Vec2<S>& b = clip[(e + 1) % clip.size()];
    std::vector<Vec2<S>> out;
    for (size_t i = 0; i < subject.size(); ++i) {
      const Vec2<S>& p = subject[i];
      const Vec2<S>& q = subject[(i + 1) % subject.size()];
      S sp = cross2(a, b, p);
      S sq = cross2(a, b, q);
      bool pin = sp >= S(0), qin = sq >= S(0);
      if (pin) out.push_back(p);
      if (pin != qin) {
        S t = sp / (sp - sq);
        out.push_back(Vec2<S>{p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)});
      }
    }
    subject = std::move(out);
  }
  return subject;
}

template <class S>
inline S bev_iou(const GTBox<S>& a, const GTBox<S>& b) {
  auto ca = obb_corners(a);
  auto cb = obb_corners(b);
  std::vector<Vec2<S>> pa(ca.begin(), ca.end());
  std::vector<Vec2<S>> pb(cb.begin(), cb.end());
  S inter = polygon_area(clip_convex(pa, pb));
  if (!(inter > S(0))) return S(0);
  S area_a = a.size[0] * a.size[1];
  S area_b = b.size[0] * b.size[1];
  return inter / (area_a + area_b - inter);
}

// 3D containment with a uniform inflation margin, in the box frame.
template <class S>
inline bool point_in_obb(S px, S py, S pz, const GTBox<S>& b, S inflate) {
  S c = std::cos(b.yaw), s = std::sin(b.yaw);
  S rx = px - b.center[0], ry = py - b.center[1];
  S lx = rx * c + ry * s;
  S ly = -rx * s + ry * c;
  return std::abs(lx) <= b.size[0] / S(2) + inflate &&
         std::abs(ly) <= b.size[1] / S(2) + inflate &&
         std::abs(pz - b.center[2]) <= b.size[2] / S(2) + inflate;
}

}  // namespace pnx
