#include "aligndistill/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace aligndistill {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string format_tgrid(const Tensor& t) {
  std::string out = "TGRID1\n" + std::to_string(t.rank());
  for (std::size_t d : t.dims()) out += " " + std::to_string(d);
  out += "\n";
  for (double v : t.data()) {
    out += format_double(v);
    out += "\n";
  }
  return out;
}

Tensor parse_tgrid(const std::string& text) {
  std::istringstream in(text);
  std::string magic;
  if (!std::getline(in, magic) || magic != "TGRID1") throw std::runtime_error("tgrid: missing TGRID1 header");
  std::string dims_line;
  if (!std::getline(in, dims_line)) throw std::runtime_error("tgrid: missing dims line");
  std::istringstream dims_in(dims_line);
  std::size_t rank = 0;
  if (!(dims_in >> rank) || rank == 0) throw std::runtime_error("tgrid: bad rank");
  std::vector<std::size_t> dims(rank);
  std::size_t count = 1;
  for (auto& d : dims) {
    if (!(dims_in >> d) || d == 0) throw std::runtime_error("tgrid: bad dims");
    count *= d;
  }
  std::vector<double> values;
  values.reserve(count);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::size_t used = 0;
    const double v = std::stod(line, &used);
    values.push_back(v);
  }
  if (values.size() != count) throw std::runtime_error("tgrid: value count does not match dims");
  return Tensor(std::move(dims), std::move(values));
}

void write_tgrid(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << format_tgrid(t);
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

Tensor read_tgrid(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_tgrid(buf.str());
}

std::vector<int> heatmap_pixels(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("heatmap: no values");
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it, hi = *hi_it;
  std::vector<int> px(values.size(), 0);
  if (hi > lo) {
    for (std::size_t i = 0; i < values.size(); ++i)
      px[i] = static_cast<int>(std::lround(255.0 * (values[i] - lo) / (hi - lo)));
  }
  return px;
}

std::filesystem::path heatmap_sidecar(const std::filesystem::path& path) {
  std::filesystem::path csv = path;
  csv.replace_extension(".csv");
  return csv;
}

void emit_heatmap(std::span<const double> values, GridShape shape, const std::filesystem::path& path) {
  if (values.size() != shape.tokens()) throw std::invalid_argument("emit_heatmap: length does not match the grid");
  const auto px = heatmap_pixels(values);
  std::ofstream pgm(path, std::ios::binary);
  if (!pgm) throw std::runtime_error("cannot write " + path.string());
  pgm << "P2\n" << shape.w << " " << shape.h << "\n255\n";
  for (std::size_t r = 0; r < shape.h; ++r) {
    for (std::size_t c = 0; c < shape.w; ++c) pgm << (c ? " " : "") << px[r * shape.w + c];
    pgm << "\n";
  }
  if (!pgm) throw std::runtime_error("failed writing " + path.string());

  std::ofstream csv(heatmap_sidecar(path), std::ios::binary);
  if (!csv) throw std::runtime_error("cannot write " + heatmap_sidecar(path).string());
  for (std::size_t r = 0; r < shape.h; ++r) {
    for (std::size_t c = 0; c < shape.w; ++c) csv << (c ? "," : "") << format_double(values[r * shape.w + c]);
    csv << "\n";
  }
}

std::vector<double> read_heatmap_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<double> out;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream row(line);
    std::string cell;
    while (std::getline(row, cell, ',')) out.push_back(std::stod(cell));
  }
  return out;
}

}  // namespace aligndistill
