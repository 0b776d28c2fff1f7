// SPDX-License-Identifier: Apache-2.0
#include "nusa/matrix_io.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace nusa {
namespace {

constexpr char kMagic[4] = {'N', 'U', 'S', 'A'};
constexpr std::size_t kHeaderBytes = 4 + 1 + 8 + 8;

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

std::vector<std::uint8_t> encode_nusa(const Matrix& m) {
  require_finite(m, "encode_nusa");
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderBytes + static_cast<std::size_t>(m.size()) * 8);
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  out.push_back(kNusaFormatVersion);
  put_u64(out, static_cast<std::uint64_t>(m.rows()));
  put_u64(out, static_cast<std::uint64_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      put_u64(out, std::bit_cast<std::uint64_t>(m(i, j)));
    }
  }
  return out;
}

Matrix decode_nusa(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kHeaderBytes || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw IoError("decode_nusa: missing NUSA header");
  }
  if (bytes[4] != kNusaFormatVersion) {
    throw IoError("decode_nusa: unsupported version " + std::to_string(bytes[4]));
  }
  const std::uint64_t rows = get_u64(bytes.data() + 5);
  const std::uint64_t cols = get_u64(bytes.data() + 13);
  if (cols != 0 && rows > (bytes.size() - kHeaderBytes) / 8 / cols) {
    throw IoError("decode_nusa: truncated payload");
  }
  if (bytes.size() != kHeaderBytes + rows * cols * 8) {
    throw IoError("decode_nusa: payload size does not match header");
  }
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  const std::uint8_t* p = bytes.data() + kHeaderBytes;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j, p += 8) {
      m(i, j) = std::bit_cast<double>(get_u64(p));
    }
  }
  require_finite(m, "decode_nusa");
  return m;
}

void write_nusa(const std::filesystem::path& path, const Matrix& m) {
  const auto bytes = encode_nusa(m);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

Matrix read_nusa(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_nusa(bytes);
}

Matrix parse_csv_matrix(const std::string& text) {
  std::vector<std::vector<double>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::vector<double> row;
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = line.find(',', start);
      std::string field = line.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
      const auto first = field.find_first_not_of(" \t");
      const auto last = field.find_last_not_of(" \t");
      if (first == std::string::npos) throw IoError("csv: empty field on line " + std::to_string(rows.size() + 1));
      field = field.substr(first, last - first + 1);
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
      if (ec != std::errc() || ptr != field.data() + field.size()) {
        throw IoError("csv: cannot parse '" + field + "'");
      }
      row.push_back(v);
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw IoError("csv: ragged row " + std::to_string(rows.size() + 1));
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw IoError("csv: no data");
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  }
  require_finite(m, "csv");
  return m;
}

Matrix read_csv_matrix(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_csv_matrix(ss.str());
}

}  // namespace nusa
