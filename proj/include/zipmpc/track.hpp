#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace zipmpc {

class TrackError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class SegmentKind { straight, arc };

struct TrackSegment {
  SegmentKind kind = SegmentKind::straight;
  double length = 0.0;     // m
  double curvature = 0.0;  // 1/m, positive turns left

  static TrackSegment straight(double length) { return {SegmentKind::straight, length, 0.0}; }
  static TrackSegment arc(double curvature, double length) {
    return {SegmentKind::arc, length, curvature};
  }
};

struct Pose2 {
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;
};

/// Curvature samples ahead of a progress value. Sample j sits at origin + j * spacing.
struct ContextWindow {
  std::vector<double> values;
  double spacing = 0.0;
  double origin = 0.0;

  double mean() const;
};

/// Number of context samples needed to cover the arc length `horizon * dt * v_max`.
int context_length(int horizon, double dt, double v_max, double spacing);

/// Closed circuit described by straight and constant-curvature segments with a constant width.
///
/// Curvature lookups go through a table sampled every `table_spacing` metres and smoothed by a
/// uniform quadratic B-spline, so kappa(s) is continuously differentiable. Progress values are wrapped modulo the track length.
/// Instances are immutable after construction.
class TrackModel {
 public:
  TrackModel(std::vector<TrackSegment> segments, double half_width, double table_spacing = 0.01,
             Pose2 start = {});

  /// Parses the text format: `width <2w>`, `straight <len>`, `arc <kappa> <len>`,
  /// optional `start <x> <y> <heading>`, `#` comments.
  static TrackModel parse(std::string_view text, double table_spacing = 0.01);
  static TrackModel load(const std::filesystem::path& path, double table_spacing = 0.01);

  double length() const { return length_; }
  double half_width() const { return half_width_; }
  double table_spacing() const { return spacing_; }
  double max_abs_curvature() const { return max_abs_curvature_; }
  const std::vector<TrackSegment>& segments() const { return segments_; }
  const std::string& name() const { return name_; }
  void set_name(std::string name) { name_ = std::move(name); }

  double wrap(double s) const;

  /// Interpolated curvature; periodic in the track length.
  double curvature(double s) const;
  /// Piecewise-constant curvature of the segment containing s.
  double segment_curvature(double s) const;

  ContextWindow context(double s, int horizon, double dt, double v_max) const;

  Pose2 centerline(double s) const;
  /// Throws TrackError when |d| exceeds the half width.
  Pose2 frenet_to_cartesian(double s, double d, double phi) const;

  /// Distance of the total turning angle to the nearest multiple of 2*pi.
  double heading_closure_residual() const;
  /// Distance between the integrated centerline end point and the start point.
  double position_closure_residual() const;

 private:
  std::size_t segment_index(double wrapped_s) const;

  std::vector<TrackSegment> segments_;
  std::vector<double> segment_start_;  // cumulative arc length
  std::vector<Pose2> segment_pose_;    // centerline pose at each segment start
  std::vector<double> table_;
  Pose2 start_;
  Pose2 end_;
  double half_width_;
  double spacing_;
  double length_ = 0.0;
  double max_abs_curvature_ = 0.0;
  std::string name_;
};

struct TrackReport {
  double length;
  double max_abs_curvature;
  double heading_residual;
  double position_residual;
  double singularity_margin;  // 1 - max|kappa| * half_width
  bool ok;
};

TrackReport check_track(const TrackModel& track, double tolerance = 1e-6);

}  // namespace zipmpc
