#pragma once

#include <algorithm>
#include <array>
#include <string>

#include "cdformer/ops.hpp"

namespace cdformer {

// Normalized (cx, cy, w, h).
struct Box {
  double cx = 0, cy = 0, w = 0, h = 0;

  static Box from_corners(double x0, double y0, double x1, double y1) {
    return {(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0};
  }
  double x0() const { return cx - w / 2; }
  double y0() const { return cy - h / 2; }
  double x1() const { return cx + w / 2; }
  double y1() const { return cy + h / 2; }
  double area() const { return w * h; }
  bool degenerate() const { return !(w > 0) || !(h > 0); }
  std::array<double, 4> as_array() const { return {cx, cy, w, h}; }

  bool operator==(const Box&) const = default;
};

namespace detail {
inline void require_box(const Box& b, const char* op) {
  if (b.degenerate()) {
    throw ShapeError(std::string(op) + ": degenerate box (w=" + std::to_string(b.w) +
                     ", h=" + std::to_string(b.h) + ")");
  }
}
}  // namespace detail

inline double iou(const Box& a, const Box& b) {
  detail::require_box(a, "iou");
  detail::require_box(b, "iou");
  const double iw = std::max(0.0, std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0()));
  const double ih = std::max(0.0, std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0()));
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

inline double giou(const Box& a, const Box& b) {
  detail::require_box(a, "giou");
  detail::require_box(b, "giou");
  const double iw = std::max(0.0, std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0()));
  const double ih = std::max(0.0, std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0()));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  const double ew = std::max(a.x1(), b.x1()) - std::min(a.x0(), b.x0());
  const double eh = std::max(a.y1(), b.y1()) - std::min(a.y0(), b.y0());
  const double enclosing = ew * eh;
  return inter / uni - (enclosing - uni) / enclosing;
}

// Row-wise GIoU between [K x 4] box tensors; returns [K x 1]. Differentiable
// in both arguments.
inline Tensor giou_rows(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || a.cols() != 4 || a.shape() != b.shape()) {
    throw ShapeError("giou_rows: expected matching [K x 4] boxes, got " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  }
  auto corners = [](const Tensor& t) {
    Tensor cx = slice_columns(t, 0, 1), cy = slice_columns(t, 1, 1);
    Tensor hw = scale(slice_columns(t, 2, 1), 0.5), hh = scale(slice_columns(t, 3, 1), 0.5);
    return std::array<Tensor, 4>{sub(cx, hw), sub(cy, hh), add(cx, hw), add(cy, hh)};
  };
  auto [ax0, ay0, ax1, ay1] = corners(a);
  auto [bx0, by0, bx1, by1] = corners(b);
  Tensor iw = relu(sub(minimum(ax1, bx1), maximum(ax0, bx0)));
  Tensor ih = relu(sub(minimum(ay1, by1), maximum(ay0, by0)));
  Tensor inter = mul(iw, ih);
  Tensor area_a = mul(sub(ax1, ax0), sub(ay1, ay0));
  Tensor area_b = mul(sub(bx1, bx0), sub(by1, by0));
  Tensor uni = sub(add(area_a, area_b), inter);
  Tensor ew = sub(maximum(ax1, bx1), minimum(ax0, bx0));
  Tensor eh = sub(maximum(ay1, by1), minimum(ay0, by0));
  Tensor enclosing = mul(ew, eh);
  return sub(div(inter, uni), div(sub(enclosing, uni), enclosing));
}

}  // namespace cdformer
