#pragma once

// Internal file helpers shared by the container readers/writers.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace tracekit::fsio {

static_assert(std::endian::native == std::endian::little,
              "container files are little-endian; big-endian hosts are unsupported");

std::vector<char> read_binary(const std::filesystem::path& path);
std::string read_text(const std::filesystem::path& path);

// Write to a sibling temp file, then rename into place.
void write_atomic(const std::filesystem::path& path, std::string_view content);
void write_atomic(const std::filesystem::path& path, const void* data, size_t bytes);

std::vector<float> read_f32(const std::filesystem::path& path);
std::vector<double> read_f64(const std::filesystem::path& path);
void write_f32(const std::filesystem::path& path, const std::vector<float>& values);
void write_f64(const std::filesystem::path& path, const std::vector<double>& values);

}  // namespace tracekit::fsio
