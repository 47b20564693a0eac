#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "cwm/errors.hpp"

namespace cwm::io {

// All binary formats are little-endian. x86 is little-endian, so raw
// reads/writes of fixed-width types are the on-disk layout.

class BinWriter {
 public:
  explicit BinWriter(const std::filesystem::path& path) : out_(path, std::ios::binary) {
    if (!out_) throw IoError("cannot open for writing: " + path.string());
    path_ = path.string();
  }
  void magic(const char tag[4]) { raw(tag, 4); }
  void u32(uint32_t v) { raw(&v, sizeof v); }
  void f32(float v) { raw(&v, sizeof v); }
  void f32s(const float* p, size_t n) { raw(p, n * sizeof(float)); }
  void u8s(const uint8_t* p, size_t n) { raw(p, n); }
  void u32s(const uint32_t* p, size_t n) { raw(p, n * sizeof(uint32_t)); }
  void close() {
    out_.close();
    if (!out_) throw IoError("write failed: " + path_);
  }

 private:
  void raw(const void* p, size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!out_) throw IoError("write failed: " + path_);
  }
  std::ofstream out_;
  std::string path_;
};

class BinReader {
 public:
  explicit BinReader(const std::filesystem::path& path) : in_(path, std::ios::binary) {
    if (!in_) throw IoError("cannot open for reading: " + path.string());
    path_ = path.string();
  }
  void expect_magic(const char tag[4]) {
    char buf[4];
    raw(buf, 4);
    if (std::string(buf, 4) != std::string(tag, 4))
      throw IoError("bad magic in " + path_ + " (expected " + std::string(tag, 4) + ")");
  }
  uint32_t u32() {
    uint32_t v;
    raw(&v, sizeof v);
    return v;
  }
  float f32() {
    float v;
    raw(&v, sizeof v);
    return v;
  }
  void f32s(float* p, size_t n) { raw(p, n * sizeof(float)); }
  void u8s(uint8_t* p, size_t n) { raw(p, n); }
  void u32s(uint32_t* p, size_t n) { raw(p, n * sizeof(uint32_t)); }

 private:
  void raw(void* p, size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(in_.gcount()) != n) throw IoError("truncated file: " + path_);
  }
  std::ifstream in_;
  std::string path_;
};

// Binary P6 pixmap; pixels are row-major RGB bytes.
void write_ppm(const std::filesystem::path& path, int width, int height,
               const std::vector<uint8_t>& rgb);
std::vector<uint8_t> read_ppm(const std::filesystem::path& path, int& width, int& height);

void write_text_file(const std::filesystem::path& path, const std::string& content);
std::string read_text_file(const std::filesystem::path& path);

// FNV-1a over a file's bytes; used for artifact/directory hashes.
uint64_t hash_file(const std::filesystem::path& path);
uint64_t hash_directory(const std::filesystem::path& dir);  // filename-sorted

std::string hex64(uint64_t v);

// Minimal CSV: values never contain commas or newlines in this project.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};
void write_csv(const std::filesystem::path& path, const CsvTable& t);
CsvTable read_csv(const std::filesystem::path& path);

}  // namespace cwm::io
