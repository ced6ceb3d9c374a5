#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "safediff/common.hpp"
#include "safediff/digest.hpp"

namespace safediff {

using Json = nlohmann::json;

inline Json vec_to_json(const Vec& v) {
  Json a = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline Vec vec_from_json(const Json& a) {
  if (!a.is_array()) throw IoError("expected JSON array for vector");
  Vec v(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) v[i] = a[i].get<double>();
  return v;
}

// Matrices stored as {rows, cols, data} with column-major data.
inline Json mat_to_json(const Mat& m) {
  Json j;
  j["rows"] = m.rows();
  j["cols"] = m.cols();
  Json data = Json::array();
  for (Eigen::Index c = 0; c < m.cols(); ++c)
    for (Eigen::Index r = 0; r < m.rows(); ++r) data.push_back(m(r, c));
  j["data"] = std::move(data);
  return j;
}

inline Mat mat_from_json(const Json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto& data = j.at("data");
  if (!data.is_array() || static_cast<Eigen::Index>(data.size()) != rows * cols)
    throw IoError("matrix data size mismatch");
  Mat m(rows, cols);
  std::size_t at = 0;
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = data[at++].get<double>();
  return m;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << text;
  if (!out) throw IoError("write failed: " + path);
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path);
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return text;
}

inline void write_json_file(const std::string& path, const Json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

inline Json read_json_file(const std::string& path) {
  try {
    return Json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("invalid JSON in " + path + ": " + e.what());
  }
}

inline std::string sha256_file(const std::string& path) {
  return sha256_hex(read_text_file(path));
}

// Digest of a double buffer's raw bytes; used to fingerprint parameters.
inline std::string sha256_doubles(const Vec& v) {
  Sha256 h;
  h.update(v.data(), sizeof(double) * static_cast<std::size_t>(v.size()));
  return h.hex_digest();
}

}  // namespace safediff
