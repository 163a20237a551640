#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "latentctl/tensor.hpp"

namespace latentctl {

/// Creates the directory (and parents) if needed.
void ensure_directory(const std::string& path);

/// One row per sample; header columns are `<prefix>0 .. <prefix>{n-1}`.
/// Values are written with 17 significant digits so a read reproduces them exactly.
void write_samples_csv(const std::string& path, const Tensor& samples, const std::string& prefix = "x");
/// Several column blocks side by side, e.g. latent and output samples.
void write_samples_csv(const std::string& path, const std::vector<std::pair<std::string, const Tensor*>>& blocks);
/// Reads a numeric CSV with one header line.
Tensor read_samples_csv(const std::string& path);

/// 2-D histogram density (normalized to integrate to one over the box) as `x,y,density` rows.
void write_histogram_csv(const std::string& path, const Tensor& samples, const std::vector<double>& lo,
                         const std::vector<double>& hi, std::size_t bins);

void write_json(const std::string& path, const nlohmann::json& j);
/// Parses a JSON file; throws ConfigError on a missing file or malformed text.
nlohmann::json read_json(const std::string& path);

}  // namespace latentctl
