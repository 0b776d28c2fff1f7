// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>

#include "nusa/spectra.hpp"

namespace nusa {

using Digest = std::array<std::uint8_t, 32>;

Digest sha256(std::span<const std::uint8_t> bytes);
Digest sha256_file(const std::filesystem::path& path);

// SHA-256 of the NUSA binary encoding; equal digests mean bitwise-equal matrices.
Digest matrix_digest(const Matrix& m);

std::string to_hex(const Digest& d);

}  // namespace nusa
