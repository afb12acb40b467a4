#pragma once

#include <doctest.h>

#include <filesystem>
#include <memory>
#include <random>
#include <string>

#include "zipmpc/track.hpp"

namespace testutil {

inline std::filesystem::path source_dir() { return ZIPMPC_SOURCE_DIR; }
inline std::filesystem::path track_file(const std::string& name) {
  return source_dir() / "data" / "tracks" / (name + ".track");
}

inline std::shared_ptr<const zipmpc::TrackModel> circle_track(double radius, double width = 0.4) {
  const double pi = 3.14159265358979323846;
  return std::make_shared<const zipmpc::TrackModel>(
      std::vector<zipmpc::TrackSegment>{zipmpc::TrackSegment::arc(1.0 / radius, 2.0 * pi * radius)},
      width / 2.0);
}

/// Long straight "circuit": a straight closed by a tight loop far behind the start.
inline std::shared_ptr<const zipmpc::TrackModel> straight_track(double straight = 20.0) {
  const double pi = 3.14159265358979323846;
  using zipmpc::TrackSegment;
  return std::make_shared<const zipmpc::TrackModel>(
      std::vector<TrackSegment>{TrackSegment::straight(straight), TrackSegment::arc(1.0, pi),
                                TrackSegment::straight(straight), TrackSegment::arc(1.0, pi)},
      0.2);
}

inline std::shared_ptr<const zipmpc::TrackModel> bundled_track(const std::string& name) {
  auto t = std::make_shared<zipmpc::TrackModel>(zipmpc::TrackModel::load(track_file(name)));
  return t;
}

/// Scratch directory removed on destruction.
struct TempDir {
  std::filesystem::path path;
  TempDir() {
    std::random_device rd;
    path = std::filesystem::temp_directory_path() /
           ("zipmpc_test_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

}  // namespace testutil
