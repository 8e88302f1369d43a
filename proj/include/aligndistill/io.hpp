#pragma once

#include <filesystem>
#include <span>
#include <string>

#include "aligndistill/interp.hpp"
#include "aligndistill/tensor.hpp"

namespace aligndistill {

// TGRID1 text tensor format:
//   line 1: TGRID1
//   line 2: rank followed by the dims, space separated
//   then one value per line, row-major, 17 significant digits.
void write_tgrid(const std::filesystem::path& path, const Tensor& t);
Tensor read_tgrid(const std::filesystem::path& path);
std::string format_tgrid(const Tensor& t);
Tensor parse_tgrid(const std::string& text);

// %.17g; round-trips every finite double.
std::string format_double(double v);

// Grayscale P2 graymap of `values` on `shape`, min-max scaled to 0..255
// (a constant map renders as all zeros), plus a sidecar CSV of the raw
// values next to it (same stem, .csv). Throws std::runtime_error when the
// path cannot be written.
void emit_heatmap(std::span<const double> values, GridShape shape, const std::filesystem::path& path);
std::filesystem::path heatmap_sidecar(const std::filesystem::path& path);
std::vector<int> heatmap_pixels(std::span<const double> values);
std::vector<double> read_heatmap_csv(const std::filesystem::path& path);

}  // namespace aligndistill
