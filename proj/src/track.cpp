#include "zipmpc/track.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

namespace zipmpc {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

Pose2 advance(const Pose2& p, const TrackSegment& seg, double s) {
  if (seg.kind == SegmentKind::straight) {
    return {p.x + s * std::cos(p.heading), p.y + s * std::sin(p.heading), p.heading};
  }
  const double k = seg.curvature;
  const double h1 = p.heading + k * s;
  return {p.x + (std::sin(h1) - std::sin(p.heading)) / k,
          p.y - (std::cos(h1) - std::cos(p.heading)) / k, h1};
}

}  // namespace

double ContextWindow::mean() const {
  if (values.empty()) return 0.0;
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

int context_length(int horizon, double dt, double v_max, double spacing) {
  const double reach = horizon * dt * v_max;
  // 1e-9 absorbs representation error in products such as 0.03 * 40 * 2.
  return static_cast<int>(std::ceil(reach / spacing - 1e-9)) + 1;
}

TrackModel::TrackModel(std::vector<TrackSegment> segments, double half_width, double table_spacing,
                       Pose2 start)
    : segments_(std::move(segments)), start_(start), half_width_(half_width),
      spacing_(table_spacing) {
  if (segments_.empty()) throw TrackError("track has no segments");
  if (!(half_width_ > 0.0)) throw TrackError("track width must be positive");
  if (!(spacing_ > 0.0)) throw TrackError("curvature table spacing must be positive");

  Pose2 pose = start_;
  for (const auto& seg : segments_) {
    if (!(seg.length > 0.0)) throw TrackError("segment length must be positive");
    if (seg.kind == SegmentKind::straight && seg.curvature != 0.0)
      throw TrackError("straight segment with nonzero curvature");
    if (seg.kind == SegmentKind::arc && seg.curvature == 0.0)
      throw TrackError("arc segment with zero curvature");
    segment_start_.push_back(length_);
    segment_pose_.push_back(pose);
    pose = advance(pose, seg, seg.length);
    length_ += seg.length;
    max_abs_curvature_ = std::max(max_abs_curvature_, std::abs(seg.curvature));
  }
  end_ = pose;

  if (max_abs_curvature_ * half_width_ >= 1.0)
    throw TrackError("max |kappa| * half width >= 1: Frenet transform singular inside the track");
  if (heading_closure_residual() > 1e-6)
    throw TrackError("segments do not close: total turning is not a multiple of 2*pi");

  const auto samples = static_cast<std::size_t>(std::ceil(length_ / spacing_ - 1e-9));
  table_.resize(std::max<std::size_t>(samples, 1));
  for (std::size_t j = 0; j < table_.size(); ++j)
    table_[j] = segment_curvature(static_cast<double>(j) * spacing_);
}

TrackModel TrackModel::parse(std::string_view text, double table_spacing) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::vector<TrackSegment> segs;
  double width = -1.0;
  Pose2 start;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key)) continue;
    auto fail = [&](const std::string& why) {
      return TrackError("track line " + std::to_string(lineno) + ": " + why);
    };
    if (key == "width") {
      if (!(ls >> width)) throw fail("expected width value");
    } else if (key == "straight") {
      double len;
      if (!(ls >> len)) throw fail("expected straight length");
      segs.push_back(TrackSegment::straight(len));
    } else if (key == "arc") {
      double k, len;
      if (!(ls >> k >> len)) throw fail("expected arc curvature and length");
      segs.push_back(TrackSegment::arc(k, len));
    } else if (key == "start") {
      if (!(ls >> start.x >> start.y >> start.heading)) throw fail("expected start x y heading");
    } else {
      throw fail("unknown keyword '" + key + "'");
    }
    std::string extra;
    if (ls >> extra) throw fail("trailing token '" + extra + "'");
  }
  if (width <= 0.0) throw TrackError("track file must specify a positive width");
  return TrackModel(std::move(segs), 0.5 * width, table_spacing, start);
}

TrackModel TrackModel::load(const std::filesystem::path& path, double table_spacing) {
  std::ifstream f(path);
  if (!f) throw TrackError("cannot open track file " + path.string());
  std::stringstream buf;
  buf << f.rdbuf();
  auto track = parse(buf.str(), table_spacing);
  track.set_name(path.stem().string());
  return track;
}

double TrackModel::wrap(double s) const {
  double w = std::fmod(s, length_);
  if (w < 0.0) w += length_;
  if (w >= length_) w -= length_;
  return w;
}

std::size_t TrackModel::segment_index(double ws) const {
  auto it = std::upper_bound(segment_start_.begin(), segment_start_.end(), ws);
  return static_cast<std::size_t>(std::distance(segment_start_.begin(), it)) - 1;
}

double TrackModel::segment_curvature(double s) const {
  return segments_[segment_index(wrap(s))].curvature;
}

double TrackModel::curvature(double s) const {
  // Uniform quadratic B-spline over the table, sample j centred on node j: C1 in s, exact
  // wherever three neighbouring samples agree. The last table interval may be shorter than
  // the spacing; it is stretched onto one unit of the spline parameter.
  const double ws = wrap(s);
  const auto n = static_cast<long>(table_.size());
  const double last = static_cast<double>(n - 1) * spacing_;
  double u = ws <= last ? ws / spacing_ : static_cast<double>(n - 1) + (ws - last) / (length_ - last);
  const double shifted = u + 0.5;
  auto j = static_cast<long>(std::floor(shifted));
  const double t = shifted - static_cast<double>(j);
  auto at = [&](long i) { return table_[static_cast<std::size_t>(((i % n) + n) % n)]; };
  const double km = at(j - 1), k0 = at(j), kp = at(j + 1);
  if (km == k0 && k0 == kp) return k0;
  return 0.5 * (1.0 - t) * (1.0 - t) * km + (0.5 + t - t * t) * k0 + 0.5 * t * t * kp;
}

ContextWindow TrackModel::context(double s, int horizon, double dt, double v_max) const {
  ContextWindow w;
  w.spacing = spacing_;
  w.origin = s;
  const int n = context_length(horizon, dt, v_max, spacing_);
  w.values.resize(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) w.values[static_cast<std::size_t>(j)] = curvature(s + j * spacing_);
  return w;
}

Pose2 TrackModel::centerline(double s) const {
  const double ws = wrap(s);
  const auto i = segment_index(ws);
  return advance(segment_pose_[i], segments_[i], ws - segment_start_[i]);
}

Pose2 TrackModel::frenet_to_cartesian(double s, double d, double phi) const {
  if (std::abs(d) > half_width_) throw TrackError("lateral deviation outside the track");
  const Pose2 c = centerline(s);
  return {c.x - d * std::sin(c.heading), c.y + d * std::cos(c.heading), c.heading + phi};
}

double TrackModel::heading_closure_residual() const {
  double turn = 0.0;
  for (const auto& seg : segments_) turn += seg.curvature * seg.length;
  const double r = std::remainder(turn, kTwoPi);
  return std::abs(r);
}

double TrackModel::position_closure_residual() const {
  return std::hypot(end_.x - start_.x, end_.y - start_.y);
}

TrackReport check_track(const TrackModel& track, double tolerance) {
  TrackReport r{};
  r.length = track.length();
  r.max_abs_curvature = track.max_abs_curvature();
  r.heading_residual = track.heading_closure_residual();
  r.position_residual = track.position_closure_residual();
  r.singularity_margin = 1.0 - r.max_abs_curvature * track.half_width();
  r.ok = r.heading_residual < tolerance && r.position_residual < tolerance &&
         r.singularity_margin > 0.0;
  return r;
}

}  // namespace zipmpc
