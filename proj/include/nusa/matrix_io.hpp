// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "nusa/spectra.hpp"

namespace nusa {

// Binary fixture layout:
//   "NUSA" | version (1 byte) | rows (u64 LE) | cols (u64 LE) | rows*cols f64 LE, row-major
inline constexpr std::uint8_t kNusaFormatVersion = 1;

std::vector<std::uint8_t> encode_nusa(const Matrix& m);
Matrix decode_nusa(const std::vector<std::uint8_t>& bytes);

void write_nusa(const std::filesystem::path& path, const Matrix& m);
Matrix read_nusa(const std::filesystem::path& path);

// Plain CSV of reals, one matrix row per line. Blank lines are skipped; every
// row must have the same number of fields.
Matrix parse_csv_matrix(const std::string& text);
Matrix read_csv_matrix(const std::filesystem::path& path);

}  // namespace nusa
