// On-disk formats: CSV matrices and tables (6 significant digits), binary P5
// PGM heatmaps, JSON summaries, and the flat little-endian checkpoint with a
// JSON header. Everything round-trips through the readers in this header.
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "clockattn/toytask.hpp"
#include "clockattn/types.hpp"

namespace clockattn::io {

std::string format_sig(double v, int significant = 6);

void write_csv_matrix(const std::string& path, const MatXd& m, int significant = 6);
MatXd read_csv_matrix(const std::string& path);

void write_csv_table(const std::string& path, const std::vector<std::string>& header,
                     const std::vector<std::vector<double>>& rows, int significant = 6);
std::pair<std::vector<std::string>, std::vector<std::vector<double>>> read_csv_table(
    const std::string& path);

/// Binary P5 heatmap; each row is scaled so its own maximum maps to 255.
void write_pgm(const std::string& path, const MatXd& weights);
struct PgmImage {
  int width = 0, height = 0, maxval = 0;
  std::vector<std::uint8_t> pixels;
};
PgmImage read_pgm(const std::string& path);

void write_json(const std::string& path, const nlohmann::json& j);
nlohmann::json read_json(const std::string& path);

/// Rejects keys outside `allowed`; context names the object in the error.
void require_known_keys(const nlohmann::json& obj, const std::vector<std::string>& allowed,
                        const std::string& context);

// Checkpoint: uint64 little-endian header length, JSON header, then a flat
// little-endian float64 array. Matrices are stored row major.
struct Checkpoint {
  std::map<std::string, MatXd> tensors;
  nlohmann::json meta;
};

void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::string& path);

void save_model(const std::string& path, const toy::ToyModel& model);
toy::ToyModel load_model(const std::string& path);

}  // namespace clockattn::io
