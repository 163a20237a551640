#include "latentctl/io.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "latentctl/errors.hpp"

namespace latentctl {

namespace {

std::ofstream open_out(const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << std::setprecision(17);
  return out;
}

}  // namespace

void ensure_directory(const std::string& path) {
  if (!path.empty()) std::filesystem::create_directories(path);
}

void write_samples_csv(const std::string& path, const Tensor& samples, const std::string& prefix) {
  write_samples_csv(path, {{prefix, &samples}});
}

void write_samples_csv(const std::string& path, const std::vector<std::pair<std::string, const Tensor*>>& blocks) {
  if (blocks.empty()) throw DimensionError("write_samples_csv: no columns");
  const std::size_t rows = blocks.front().second->rows();
  for (const auto& [name, t] : blocks)
    if (t->rows() != rows) throw DimensionError("write_samples_csv: blocks differ in row count");
  std::ofstream out = open_out(path);
  bool first = true;
  for (const auto& [name, t] : blocks)
    for (std::size_t j = 0; j < t->cols(); ++j) {
      out << (first ? "" : ",") << name << j;
      first = false;
    }
  out << '\n';
  for (std::size_t r = 0; r < rows; ++r) {
    first = true;
    for (const auto& [name, t] : blocks)
      for (std::size_t j = 0; j < t->cols(); ++j) {
        out << (first ? "" : ",") << t->at(r, j);
        first = false;
      }
    out << '\n';
  }
}

Tensor read_samples_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path);
  std::string line;
  std::getline(in, line);
  std::vector<double> values;
  std::size_t cols = 0, rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t c = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        values.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw ConfigError(path + ": non-numeric cell '" + cell + "' on row " + std::to_string(rows + 1));
      }
      ++c;
    }
    if (rows == 0) cols = c;
    else if (c != cols) throw ConfigError(path + ": ragged row " + std::to_string(rows + 1));
    ++rows;
  }
  if (rows == 0) throw ConfigError(path + ": no data rows");
  return Tensor({rows, cols}, std::move(values));
}

void write_histogram_csv(const std::string& path, const Tensor& samples, const std::vector<double>& lo,
                         const std::vector<double>& hi, std::size_t bins) {
  if (samples.cols() != 2 || lo.size() != 2 || hi.size() != 2) throw DimensionError("histogram needs 2-D samples");
  if (bins == 0) throw ConfigError("histogram needs at least one bin");
  std::vector<double> counts(bins * bins, 0.0);
  const double wx = (hi[0] - lo[0]) / static_cast<double>(bins), wy = (hi[1] - lo[1]) / static_cast<double>(bins);
  for (std::size_t r = 0; r < samples.rows(); ++r) {
    const double fx = (samples.at(r, 0) - lo[0]) / wx, fy = (samples.at(r, 1) - lo[1]) / wy;
    if (fx < 0 || fy < 0 || fx >= static_cast<double>(bins) || fy >= static_cast<double>(bins)) continue;
    counts[static_cast<std::size_t>(fx) * bins + static_cast<std::size_t>(fy)] += 1.0;
  }
  const double norm = static_cast<double>(samples.rows()) * wx * wy;
  std::ofstream out = open_out(path);
  out << "x,y,density\n";
  for (std::size_t i = 0; i < bins; ++i)
    for (std::size_t j = 0; j < bins; ++j)
      out << lo[0] + (i + 0.5) * wx << ',' << lo[1] + (j + 0.5) * wy << ',' << counts[i * bins + j] / norm << '\n';
}

void write_json(const std::string& path, const nlohmann::json& j) {
  std::ofstream out = open_out(path);
  out << j.dump(2) << '\n';
}

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path);
  try {
    return nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

}  // namespace latentctl
