#include "clockattn/io.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace clockattn::io {

std::string format_sig(double v, int significant) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", significant, v);
  return buf;
}

namespace {

std::ofstream open_out(const std::string& path, bool binary = false) {
  std::ofstream f(path, binary ? std::ios::binary : std::ios::out);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  return f;
}

std::ifstream open_in(const std::string& path, bool binary = false) {
  std::ifstream f(path, binary ? std::ios::binary : std::ios::in);
  if (!f) throw std::runtime_error("cannot open for reading: " + path);
  return f;
}

}  // namespace

void write_csv_matrix(const std::string& path, const MatXd& m, int significant) {
  auto f = open_out(path);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      if (j) f << ',';
      f << format_sig(m(i, j), significant);
    }
    f << '\n';
  }
}

MatXd read_csv_matrix(const std::string& path) {
  auto f = open_in(path);
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) return MatXd(0, 0);
  MatXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows[0].size())
      throw std::runtime_error("ragged csv matrix: " + path);
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  return m;
}

void write_csv_table(const std::string& path, const std::vector<std::string>& header,
                     const std::vector<std::vector<double>>& rows, int significant) {
  auto f = open_out(path);
  for (std::size_t j = 0; j < header.size(); ++j) {
    if (j) f << ',';
    f << header[j];
  }
  f << '\n';
  for (const auto& row : rows) {
    if (row.size() != header.size()) throw std::runtime_error("csv table row width mismatch");
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (j) f << ',';
      f << format_sig(row[j], significant);
    }
    f << '\n';
  }
}

std::pair<std::vector<std::string>, std::vector<std::vector<double>>> read_csv_table(
    const std::string& path) {
  auto f = open_in(path);
  std::string line;
  if (!std::getline(f, line)) throw std::runtime_error("empty csv table: " + path);
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  std::vector<std::vector<double>> rows;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    rows.push_back(std::move(row));
  }
  return {header, rows};
}

void write_pgm(const std::string& path, const MatXd& weights) {
  auto f = open_out(path, true);
  f << "P5\n" << weights.cols() << ' ' << weights.rows() << "\n255\n";
  std::vector<std::uint8_t> row(static_cast<std::size_t>(weights.cols()));
  for (Eigen::Index i = 0; i < weights.rows(); ++i) {
    const double mx = weights.row(i).maxCoeff();
    for (Eigen::Index j = 0; j < weights.cols(); ++j) {
      const double v = mx > 0 ? weights(i, j) / mx : 0.0;
      row[static_cast<std::size_t>(j)] =
          static_cast<std::uint8_t>(std::lround(255.0 * std::min(1.0, std::max(0.0, v))));
    }
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
}

PgmImage read_pgm(const std::string& path) {
  auto f = open_in(path, true);
  std::string magic;
  f >> magic;
  if (magic != "P5") throw std::runtime_error("not a P5 pgm: " + path);
  PgmImage img;
  f >> img.width >> img.height >> img.maxval;
  f.get();  // single whitespace after maxval
  img.pixels.resize(static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.height));
  f.read(reinterpret_cast<char*>(img.pixels.data()),
         static_cast<std::streamsize>(img.pixels.size()));
  if (!f) throw std::runtime_error("truncated pgm: " + path);
  return img;
}

void write_json(const std::string& path, const nlohmann::json& j) {
  auto f = open_out(path);
  f << j.dump(2) << '\n';
}

nlohmann::json read_json(const std::string& path) {
  auto f = open_in(path);
  nlohmann::json j;
  f >> j;
  return j;
}

void require_known_keys(const nlohmann::json& obj, const std::vector<std::string>& allowed,
                        const std::string& context) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool known = false;
    for (const auto& k : allowed) known = known || k == it.key();
    if (!known)
      throw std::invalid_argument("unknown key '" + it.key() + "' in " + context);
  }
}

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  nlohmann::json header;
  header["format"] = "clockattn-ckpt-v1";
  header["meta"] = ckpt.meta;
  std::vector<double> data;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, m] : ckpt.tensors) {
    nlohmann::json t;
    t["name"] = name;
    t["rows"] = m.rows();
    t["cols"] = m.cols();
    t["offset"] = data.size();
    tensors.push_back(t);
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) data.push_back(m(i, j));
  }
  header["tensors"] = tensors;
  const std::string hs = header.dump();
  const std::uint64_t hlen = hs.size();
  auto f = open_out(path, true);
  f.write(reinterpret_cast<const char*>(&hlen), 8);
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  f.write(reinterpret_cast<const char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(double)));
}

Checkpoint read_checkpoint(const std::string& path) {
  auto f = open_in(path, true);
  std::uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), 8);
  if (!f || hlen > (1u << 24)) throw std::runtime_error("bad checkpoint header: " + path);
  std::string hs(hlen, '\0');
  f.read(hs.data(), static_cast<std::streamsize>(hlen));
  const nlohmann::json header = nlohmann::json::parse(hs);
  if (header.value("format", "") != "clockattn-ckpt-v1")
    throw std::runtime_error("unknown checkpoint format: " + path);
  std::vector<char> raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const std::size_t n = raw.size() / sizeof(double);
  Checkpoint ckpt;
  ckpt.meta = header.value("meta", nlohmann::json::object());
  for (const auto& t : header.at("tensors")) {
    const std::string name = t.at("name");
    const Eigen::Index rows = t.at("rows"), cols = t.at("cols");
    const std::size_t offset = t.at("offset");
    if (offset + static_cast<std::size_t>(rows * cols) > n)
      throw std::runtime_error("checkpoint data truncated: " + path);
    MatXd m(rows, cols);
    const double* src = reinterpret_cast<const double*>(raw.data()) + offset;
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = src[i * cols + j];
    ckpt.tensors[name] = std::move(m);
  }
  return ckpt;
}

void save_model(const std::string& path, const toy::ToyModel& model) {
  Checkpoint ckpt;
  auto mats = model.matrices();
  auto names = model.matrix_names();
  for (std::size_t i = 0; i < mats.size(); ++i) ckpt.tensors[names[i]] = *mats[i];
  ckpt.meta["variant"] = toy::variant_name(model.variant);
  ckpt.meta["d_model"] = model.cfg.d_model;
  ckpt.meta["head_dim"] = model.cfg.head_dim;
  ckpt.meta["eps"] = model.cfg.eps;
  ckpt.meta["learn_logit_scale"] = model.cfg.learn_logit_scale;
  ckpt.meta["vocab"] = model.vocab;
  ckpt.meta["feat_dim"] = model.feat_dim;
  ckpt.meta["logit_scale"] = model.logit_scale;
  write_checkpoint(path, ckpt);
}

toy::ToyModel load_model(const std::string& path) {
  Checkpoint ckpt = read_checkpoint(path);
  toy::ToyModel m;
  m.variant = toy::variant_from_name(ckpt.meta.at("variant"));
  m.cfg.d_model = ckpt.meta.at("d_model");
  m.cfg.head_dim = ckpt.meta.at("head_dim");
  m.cfg.eps = ckpt.meta.at("eps");
  m.cfg.learn_logit_scale = ckpt.meta.at("learn_logit_scale");
  m.vocab = ckpt.meta.at("vocab");
  m.feat_dim = ckpt.meta.at("feat_dim");
  m.logit_scale = ckpt.meta.at("logit_scale");
  auto mats = m.matrices();
  auto names = m.matrix_names();
  for (std::size_t i = 0; i < mats.size(); ++i) {
    auto it = ckpt.tensors.find(names[i]);
    if (it == ckpt.tensors.end())
      throw std::runtime_error("checkpoint missing tensor " + names[i]);
    *mats[i] = it->second;
  }
  return m;
}

}  // namespace clockattn::io
