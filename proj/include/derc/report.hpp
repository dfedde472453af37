#pragma once

// CSV trailers and minimal self-rendered SVG line charts.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace derc {

/// "# config_hash=<hex> seed=<n>", closing every CSV file.
void write_csv_trailer(std::ostream& out, const std::string& config_hash, std::uint64_t seed);

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

struct Chart {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;
};

/// Axes, ticks, a legend and one <polyline> per series. Non-finite points
/// are skipped.
std::string render_svg(const Chart& chart);

void write_file(const std::filesystem::path& path, const std::string& contents);

}  // namespace derc
