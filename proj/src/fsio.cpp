#include "fsio.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>

#include "tracekit/errors.hpp"

namespace tracekit::fsio {

std::vector<char> read_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw input_error("cannot open file: " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<size_t>(in.tellg());
  in.seekg(0, std::ios::beg);
  std::vector<char> buf(size);
  if (size > 0) in.read(buf.data(), static_cast<std::streamsize>(size));
  if (!in) throw input_error("error reading file: " + path.string());
  return buf;
}

std::string read_text(const std::filesystem::path& path) {
  auto buf = read_binary(path);
  return std::string(buf.begin(), buf.end());
}

void write_atomic(const std::filesystem::path& path, const void* data, size_t bytes) {
  const auto tmp = path.parent_path() / (path.filename().string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw input_error("cannot open file for writing: " + tmp.string());
    if (bytes > 0)
      out.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
    if (!out) throw input_error("error writing file: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_atomic(const std::filesystem::path& path, std::string_view content) {
  write_atomic(path, content.data(), content.size());
}

std::vector<float> read_f32(const std::filesystem::path& path) {
  auto buf = read_binary(path);
  if (buf.size() % sizeof(float) != 0)
    throw input_error("file size of " + path.string() + " is not a multiple of 4");
  std::vector<float> out(buf.size() / sizeof(float));
  std::memcpy(out.data(), buf.data(), buf.size());
  return out;
}

std::vector<double> read_f64(const std::filesystem::path& path) {
  auto buf = read_binary(path);
  if (buf.size() % sizeof(double) != 0)
    throw input_error("file size of " + path.string() + " is not a multiple of 8");
  std::vector<double> out(buf.size() / sizeof(double));
  std::memcpy(out.data(), buf.data(), buf.size());
  return out;
}

void write_f32(const std::filesystem::path& path, const std::vector<float>& values) {
  write_atomic(path, values.data(), values.size() * sizeof(float));
}

void write_f64(const std::filesystem::path& path, const std::vector<double>& values) {
  write_atomic(path, values.data(), values.size() * sizeof(double));
}

}  // namespace tracekit::fsio
