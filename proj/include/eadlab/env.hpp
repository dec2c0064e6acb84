#pragma once

// Toy embodied environment: a textured plane viewed by a camera orbiting the
// origin, with an adversarial patch glued to a sub-rectangle of the plane.
// Rendering and patch application are homography warps built from tensor
// ops, so observations are differentiable in camera state, texture and patch.

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "eadlab/error.hpp"
#include "eadlab/rng.hpp"
#include "eadlab/tensor.hpp"

namespace eadlab {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<double, 9>;
// Corners in order top-left, top-right, bottom-right, bottom-left.
using Quad = std::array<Vec3, 4>;

struct StateBounds {
  double yaw_min = -0.35;
  double yaw_max = 0.35;
  double pitch_min = -0.25;
  double pitch_max = 0.25;
};

struct CameraState {
  double yaw = 0.0;
  double pitch = 0.0;
  bool operator==(const CameraState&) const = default;
};

struct Action {
  double d_yaw = 0.0;
  double d_pitch = 0.0;
};

struct Patch {
  Tensor texels;  // [Hp x Wp x 3], entries in [0, 1]

  std::size_t height() const { return texels.dim(0); }
  std::size_t width() const { return texels.dim(1); }
};

struct Geometry {
  std::size_t image_size = 32;
  std::size_t texture_size = 64;
  std::size_t patch_size = 10;
  double camera_radius = 4.0;
  double plane_half_extent = 1.0;
  // Patch anchor rectangle in plane coordinates; 9x9 pixels of the frontal view.
  double anchor_x_min = -0.25;
  double anchor_x_max = 0.3125;
  double anchor_y_min = 0.125;
  double anchor_y_max = 0.6875;
  StateBounds bounds;
  double a_max = 0.175;
};

struct Scene {
  int identity_label = 0;
  Tensor base_texture;  // [T x T x 3]
  Quad plane_corners{};
  Quad patch_anchor{};
  double camera_radius = 4.0;
  Mat3 intrinsics{};
  std::size_t image_height = 32;
  std::size_t image_width = 32;
};

// ---------------------------------------------------------------------------
// Dynamics

inline CameraState transition(const CameraState& s, const Action& a, const StateBounds& b) {
  return {std::clamp(s.yaw + a.d_yaw, b.yaw_min, b.yaw_max), std::clamp(s.pitch + a.d_pitch, b.pitch_min, b.pitch_max)};
}

// states and actions are [B x 2] rows of (yaw, pitch).
inline Tensor transition(const Tensor& states, const Tensor& actions, const StateBounds& b) {
  if (states.shape() != actions.shape() || states.rank() != 2 || states.dim(1) != 2) {
    throw DimensionError("transition: states and actions must both be [B x 2]");
  }
  std::vector<double> lo(states.size()), hi(states.size());
  for (std::size_t i = 0; i < states.dim(0); ++i) {
    lo[2 * i] = b.yaw_min;
    hi[2 * i] = b.yaw_max;
    lo[2 * i + 1] = b.pitch_min;
    hi[2 * i + 1] = b.pitch_max;
  }
  return clamp(add(states, actions), lo, hi);
}

inline Tensor states_tensor(const std::vector<CameraState>& states) {
  std::vector<double> v;
  for (const auto& s : states) {
    v.push_back(s.yaw);
    v.push_back(s.pitch);
  }
  return Tensor(Shape{states.size(), 2}, std::move(v));
}

inline CameraState state_row(const Tensor& states, std::size_t i) { return {states.at(i, 0), states.at(i, 1)}; }

// ---------------------------------------------------------------------------
// Camera geometry

inline Mat3 mat3_mul(const Mat3& a, const Mat3& b) {
  Mat3 r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) r[i * 3 + j] += a[i * 3 + k] * b[k * 3 + j];
  return r;
}

inline Mat3 yaw_rotation(double h) {
  const double c = std::cos(h), s = std::sin(h);
  return {c, 0, s, 0, 1, 0, -s, 0, c};
}

inline Mat3 pitch_rotation(double v) {
  const double c = std::cos(v), s = std::sin(v);
  return {1, 0, 0, 0, c, -s, 0, s, c};
}

inline Mat3 rotation_from_state(const CameraState& s) { return mat3_mul(yaw_rotation(s.yaw), pitch_rotation(s.pitch)); }

// World-to-camera rigid transform [R | T; 0 1] with R = Ry(yaw) Rx(pitch) and
// T = (0, 0, -radius): the camera sits on a sphere around the origin, looking
// at it along its -z axis.
inline std::array<double, 16> extrinsic_from_state(const CameraState& s, double radius) {
  const Mat3 r = rotation_from_state(s);
  return {r[0], r[1], r[2], 0.0, r[3], r[4], r[5], 0.0, r[6], r[7], r[8], -radius, 0.0, 0.0, 0.0, 1.0};
}

inline Mat3 default_intrinsics(const Geometry& g) {
  const double f = 0.5 * static_cast<double>(g.image_size) * g.camera_radius / g.plane_half_extent;
  const double c = 0.5 * (static_cast<double>(g.image_size) - 1.0);
  return {f, 0, c, 0, f, c, 0, 0, 1};
}

struct ProjectedPoint {
  double u = 0.0;  // column
  double v = 0.0;  // row
  double depth = 0.0;
};

// Pinhole projection of world points. Camera looks along -z, image rows grow
// downwards, so pixel = K * diag(1, -1, -1) * (R p + T).
inline std::vector<ProjectedPoint> project_points(const Scene& scene, const CameraState& s,
                                                  const std::vector<Vec3>& points) {
  const Mat3 r = rotation_from_state(s);
  const Mat3& k = scene.intrinsics;
  std::vector<ProjectedPoint> out;
  for (const auto& p : points) {
    const double xc = r[0] * p[0] + r[1] * p[1] + r[2] * p[2];
    const double yc = r[3] * p[0] + r[4] * p[1] + r[5] * p[2];
    const double zc = r[6] * p[0] + r[7] * p[1] + r[8] * p[2] - scene.camera_radius;
    const double depth = -zc;
    ProjectedPoint q;
    q.depth = depth;
    if (std::abs(depth) > 1e-12) {
      q.u = (k[0] * xc - k[1] * yc) / depth + k[2];
      q.v = (k[3] * xc - k[4] * yc) / depth + k[5];
    }
    out.push_back(q);
  }
  return out;
}

namespace detail {

inline Tensor rotation_tensor(const Tensor& yaw, const Tensor& pitch) {
  const Tensor ch = cos(yaw), sh = sin(yaw), cv = cos(pitch), sv = sin(pitch);
  const Tensor zero = Tensor::scalar(0.0), one = Tensor::scalar(1.0);
  const Tensor ry = assemble({ch, zero, sh, zero, one, zero, neg(sh), zero, ch}, Shape{3, 3});
  const Tensor rx = assemble({one, zero, zero, zero, cv, neg(sv), zero, sv, cv}, Shape{3, 3});
  return matmul(ry, rx);
}

// Homography taking grid coordinates (col, row) of a cols x rows texel grid
// stretched over `quad` to homogeneous image pixels.
inline Tensor grid_to_image(const Scene& scene, const Tensor& yaw, const Tensor& pitch, const Quad& quad,
                            std::size_t cols, std::size_t rows) {
  const Tensor r = rotation_tensor(yaw, pitch);
  std::vector<Tensor> rt;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) rt.push_back(element(r, static_cast<std::size_t>(i * 3 + j)));
    rt.push_back(Tensor::scalar(i == 2 ? -scene.camera_radius : 0.0));
  }
  const Tensor extrinsic = assemble(rt, Shape{3, 4});
  const Mat3& k = scene.intrinsics;
  // K * diag(1, -1, -1)
  const Tensor kf(Shape{3, 3}, {k[0], -k[1], -k[2], k[3], -k[4], -k[5], k[6], -k[7], -k[8]});
  const Vec3 &c0 = quad[0], &c1 = quad[1], &c3 = quad[3];
  const double nc = static_cast<double>(cols), nr = static_cast<double>(rows);
  std::vector<double> a(12);
  for (int i = 0; i < 3; ++i) {
    const double ex = (c1[i] - c0[i]) / nc, ey = (c3[i] - c0[i]) / nr;
    a[i * 3 + 0] = ex;
    a[i * 3 + 1] = ey;
    a[i * 3 + 2] = c0[i] + 0.5 * ex + 0.5 * ey;
  }
  a[9] = 0.0;
  a[10] = 0.0;
  a[11] = 1.0;
  return matmul(matmul(kf, extrinsic), Tensor(Shape{4, 3}, std::move(a)));
}

inline Tensor pixel_grid(std::size_t h, std::size_t w) {
  std::vector<double> v(h * w * 2);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      v[(r * w + c) * 2] = static_cast<double>(c);
      v[(r * w + c) * 2 + 1] = static_cast<double>(r);
    }
  return Tensor(Shape{h, w, 2}, std::move(v));
}

inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

inline double norm(const Vec3& a) { return std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]); }

// Cosine between plane normal and the ray from the camera to the plane centre.
inline double plane_obliquity(const Scene& scene, const CameraState& s) {
  const Quad& q = scene.plane_corners;
  Vec3 e1{}, e2{}, centre{};
  for (int i = 0; i < 3; ++i) {
    e1[i] = q[1][i] - q[0][i];
    e2[i] = q[3][i] - q[0][i];
    centre[i] = 0.25 * (q[0][i] + q[1][i] + q[2][i] + q[3][i]);
  }
  const Vec3 n = cross(e1, e2);
  const Mat3 r = rotation_from_state(s);
  // Camera centre C = -R^T T with T = (0, 0, -radius).
  const Vec3 cam{r[6] * scene.camera_radius, r[7] * scene.camera_radius, r[8] * scene.camera_radius};
  const Vec3 d{centre[0] - cam[0], centre[1] - cam[1], centre[2] - cam[2]};
  return std::abs(n[0] * d[0] + n[1] * d[1] + n[2] * d[2]) / (norm(n) * norm(d));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Rendering

inline constexpr double kBackground = 0.5;
inline constexpr double kMinObliquity = 0.05;

// yaw and pitch are scalar tensors; gradients flow to them and to the texture.
inline Tensor render(const Scene& scene, const Tensor& yaw, const Tensor& pitch) {
  const CameraState s{yaw.item(), pitch.item()};
  if (detail::plane_obliquity(scene, s) < kMinObliquity) throw RenderError("render: plane is viewed edge-on");
  const std::size_t t_rows = scene.base_texture.dim(0), t_cols = scene.base_texture.dim(1);
  const Tensor h = detail::grid_to_image(scene, yaw, pitch, scene.plane_corners, t_cols, t_rows);
  Tensor coords;
  try {
    coords = apply_homography(inv3(h), detail::pixel_grid(scene.image_height, scene.image_width));
  } catch (const DomainError& e) {
    throw RenderError(std::string("render: degenerate view: ") + e.what());
  }
  const Tensor color = bilinear_sample(scene.base_texture, coords);
  const Tensor coverage = bilinear_sample(Tensor(scene.base_texture.shape(), 1.0), coords);
  return add(color, add_scalar(scale(coverage, -kBackground), kBackground));
}

inline Tensor render(const Scene& scene, const CameraState& s) {
  return render(scene, Tensor::scalar(s.yaw), Tensor::scalar(s.pitch));
}

// Replaces the pixels covered by the projected patch anchor with bilinear
// samples of the patch texels; all other pixels are returned untouched.
inline Tensor apply_patch(const Tensor& image, const Patch& patch, const Scene& scene, const Tensor& yaw,
                          const Tensor& pitch) {
  const CameraState s{yaw.item(), pitch.item()};
  const std::vector<Vec3> corners(scene.patch_anchor.begin(), scene.patch_anchor.end());
  const auto proj = project_points(scene, s, corners);
  bool any_in_front = false;
  for (const auto& p : proj) any_in_front = any_in_front || p.depth > 1e-9;
  if (!any_in_front) throw RenderError("apply_patch: patch anchor is behind the camera");
  double area = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& a = proj[i];
    const auto& b = proj[(i + 1) % 4];
    area += a.u * b.v - b.u * a.v;
  }
  if (std::abs(area) < 1e-9) return image;

  const std::size_t rows = patch.height(), cols = patch.width();
  const std::size_t ih = image.dim(0), iw = image.dim(1), ch = image.dim(2);
  const Tensor h = detail::grid_to_image(scene, yaw, pitch, scene.patch_anchor, cols, rows);
  Tensor coords;
  try {
    coords = apply_homography(inv3(h), detail::pixel_grid(ih, iw));
  } catch (const DomainError& e) {
    throw RenderError(std::string("apply_patch: degenerate anchor: ") + e.what());
  }
  std::vector<double> keep(ih * iw * ch), take(ih * iw * ch);
  std::vector<double> lo(coords.size()), hi(coords.size());
  const double max_c = static_cast<double>(cols) - 1.0, max_r = static_cast<double>(rows) - 1.0;
  for (std::size_t i = 0; i < ih * iw; ++i) {
    const double c = coords[2 * i], r = coords[2 * i + 1];
    const bool inside = c >= -0.5 && c <= max_c + 0.5 && r >= -0.5 && r <= max_r + 0.5;
    for (std::size_t k = 0; k < ch; ++k) {
      keep[i * ch + k] = inside ? 0.0 : 1.0;
      take[i * ch + k] = inside ? 1.0 : 0.0;
    }
    lo[2 * i] = 0.0;
    hi[2 * i] = max_c;
    lo[2 * i + 1] = 0.0;
    hi[2 * i + 1] = max_r;
  }
  const Tensor sampled = bilinear_sample(patch.texels, clamp(coords, lo, hi));
  return add(mul(image, Tensor(image.shape(), std::move(keep))), mul(sampled, Tensor(image.shape(), std::move(take))));
}

inline Tensor apply_patch(const Tensor& image, const Patch& patch, const Scene& scene, const CameraState& s) {
  return apply_patch(image, patch, scene, Tensor::scalar(s.yaw), Tensor::scalar(s.pitch));
}

// Optional zero-mean Gaussian pixel noise; off unless std > 0.
struct ObservationNoise {
  double std = 0.0;
  Rng* rng = nullptr;
};

inline Tensor observe(const Scene& scene, const Tensor& yaw, const Tensor& pitch, const Patch* patch,
                      ObservationNoise noise = {}) {
  Tensor o = render(scene, yaw, pitch);
  if (patch) o = apply_patch(o, *patch, scene, yaw, pitch);
  if (noise.std > 0.0) {
    if (!noise.rng) throw ContractError("observe: noise requested without an rng");
    std::vector<double> n(o.size());
    for (double& v : n) v = noise.std * noise.rng->normal();
    o = clamp01(add(o, Tensor(o.shape(), std::move(n))));
  }
  return o;
}

inline Tensor observe(const Scene& scene, const CameraState& s, const Patch* patch, ObservationNoise noise = {}) {
  return observe(scene, Tensor::scalar(s.yaw), Tensor::scalar(s.pitch), patch, noise);
}

// One flattened observation per row: [B x (H*W*3)]. states is [B x 2].
inline Tensor observe_batch(const std::vector<const Scene*>& scenes, const Tensor& states,
                            const std::vector<const Patch*>& patches, ObservationNoise noise = {}) {
  if (states.rank() != 2 || states.dim(0) != scenes.size() || patches.size() != scenes.size()) {
    throw DimensionError("observe_batch: batch sizes disagree");
  }
  std::vector<Tensor> rows;
  rows.reserve(scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const Tensor o = observe(*scenes[i], element(states, 2 * i), element(states, 2 * i + 1), patches[i], noise);
    rows.push_back(reshape(o, Shape{1, o.size()}));
  }
  return concat_rows(rows);
}

// ---------------------------------------------------------------------------
// Scene construction

inline bool patch_center_visible(const Scene& scene, const CameraState& s) {
  Vec3 c{};
  for (const auto& p : scene.patch_anchor)
    for (int i = 0; i < 3; ++i) c[i] += 0.25 * p[i];
  const auto q = project_points(scene, s, {c}).front();
  return q.depth > 0.0 && q.u >= -0.5 && q.u <= static_cast<double>(scene.image_width) - 0.5 && q.v >= -0.5 &&
         q.v <= static_cast<double>(scene.image_height) - 0.5;
}

// Scans a grid x grid lattice over the state box and throws if the patch
// anchor ever leaves the view.
inline void check_patch_visibility(const Scene& scene, const StateBounds& b, std::size_t grid = 50) {
  for (std::size_t i = 0; i < grid; ++i) {
    for (std::size_t j = 0; j < grid; ++j) {
      const double fy = grid == 1 ? 0.5 : static_cast<double>(i) / static_cast<double>(grid - 1);
      const double fp = grid == 1 ? 0.5 : static_cast<double>(j) / static_cast<double>(grid - 1);
      const CameraState s{b.yaw_min + fy * (b.yaw_max - b.yaw_min), b.pitch_min + fp * (b.pitch_max - b.pitch_min)};
      if (!patch_center_visible(scene, s)) {
        throw RenderError("patch anchor leaves the view at yaw=" + std::to_string(s.yaw) +
                          " pitch=" + std::to_string(s.pitch));
      }
    }
  }
}

inline Quad plane_rectangle(double x_min, double x_max, double y_min, double y_max) {
  return {Vec3{x_min, y_max, 0.0}, Vec3{x_max, y_max, 0.0}, Vec3{x_max, y_min, 0.0}, Vec3{x_min, y_min, 0.0}};
}

inline void validate_scene(const Scene& scene, const StateBounds& bounds) {
  const Tensor& t = scene.base_texture;
  if (t.rank() != 3 || t.dim(2) != 3) throw DimensionError("scene: texture must be [T x T x 3]");
  for (double v : t.data()) {
    if (v < 0.0 || v > 1.0) throw DomainError("scene: texture values must lie in [0, 1]");
  }
  // Anchor corners must lie inside the plane's parallelogram.
  const Quad& q = scene.plane_corners;
  Vec3 e1{}, e2{};
  for (int i = 0; i < 3; ++i) {
    e1[i] = q[1][i] - q[0][i];
    e2[i] = q[3][i] - q[0][i];
  }
  const double e11 = e1[0] * e1[0] + e1[1] * e1[1] + e1[2] * e1[2];
  const double e22 = e2[0] * e2[0] + e2[1] * e2[1] + e2[2] * e2[2];
  const Vec3 n = detail::cross(e1, e2);
  for (const auto& p : scene.patch_anchor) {
    Vec3 d{p[0] - q[0][0], p[1] - q[0][1], p[2] - q[0][2]};
    const double a = (d[0] * e1[0] + d[1] * e1[1] + d[2] * e1[2]) / e11;
    const double b = (d[0] * e2[0] + d[1] * e2[1] + d[2] * e2[2]) / e22;
    const double off = std::abs(d[0] * n[0] + d[1] * n[1] + d[2] * n[2]) / detail::norm(n);
    if (a < -1e-12 || a > 1 + 1e-12 || b < -1e-12 || b > 1 + 1e-12 || off > 1e-9) {
      throw DomainError("scene: patch anchor lies outside the plane");
    }
  }
  check_patch_visibility(scene, bounds);
}

inline Scene make_scene(int label, Tensor texture, const Geometry& g = {}) {
  Scene scene;
  scene.identity_label = label;
  scene.base_texture = std::move(texture);
  const double e = g.plane_half_extent;
  scene.plane_corners = plane_rectangle(-e, e, -e, e);
  scene.patch_anchor = plane_rectangle(g.anchor_x_min, g.anchor_x_max, g.anchor_y_min, g.anchor_y_max);
  scene.camera_radius = g.camera_radius;
  scene.intrinsics = default_intrinsics(g);
  scene.image_height = g.image_size;
  scene.image_width = g.image_size;
  validate_scene(scene, g.bounds);
  return scene;
}

// The texels of `scene`'s texture that sit under the patch anchor, resampled
// to the patch grid. Used as a benign reference patch.
inline Patch underlying_patch(const Scene& scene, std::size_t rows, std::size_t cols) {
  const Quad& plane = scene.plane_corners;
  const Quad& anchor = scene.patch_anchor;
  const std::size_t t_rows = scene.base_texture.dim(0), t_cols = scene.base_texture.dim(1);
  Vec3 e1{}, e2{};
  for (int i = 0; i < 3; ++i) {
    e1[i] = plane[1][i] - plane[0][i];
    e2[i] = plane[3][i] - plane[0][i];
  }
  const double e11 = e1[0] * e1[0] + e1[1] * e1[1] + e1[2] * e1[2];
  const double e22 = e2[0] * e2[0] + e2[1] * e2[1] + e2[2] * e2[2];
  std::vector<double> coords(rows * cols * 2);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const double fa = (static_cast<double>(c) + 0.5) / static_cast<double>(cols);
      const double fb = (static_cast<double>(r) + 0.5) / static_cast<double>(rows);
      Vec3 d{};
      for (int i = 0; i < 3; ++i) {
        const double p = anchor[0][i] + fa * (anchor[1][i] - anchor[0][i]) + fb * (anchor[3][i] - anchor[0][i]);
        d[i] = p - plane[0][i];
      }
      const double a = (d[0] * e1[0] + d[1] * e1[1] + d[2] * e1[2]) / e11;
      const double b = (d[0] * e2[0] + d[1] * e2[1] + d[2] * e2[2]) / e22;
      coords[(r * cols + c) * 2] = a * static_cast<double>(t_cols) - 0.5;
      coords[(r * cols + c) * 2 + 1] = b * static_cast<double>(t_rows) - 0.5;
    }
  }
  Tensor sampled = bilinear_sample(scene.base_texture.detach(), Tensor(Shape{rows, cols, 2}, std::move(coords)));
  return Patch{clamp01(sampled).detach()};
}

}  // namespace eadlab
