#include "cwm/io.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "cwm/rng.hpp"

namespace cwm::io {

namespace fs = std::filesystem;

void write_ppm(const fs::path& path, int width, int height, const std::vector<uint8_t>& rgb) {
  if (rgb.size() != static_cast<size_t>(width) * height * 3)
    throw DimensionError("write_ppm: pixel buffer size does not match dimensions");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << "P6\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<uint8_t> read_ppm(const fs::path& path, int& width, int& height) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  std::string tag;
  int maxval = 0;
  in >> tag >> width >> height >> maxval;
  if (tag != "P6" || maxval != 255) throw IoError("not a P6/255 pixmap: " + path.string());
  in.get();  // single whitespace after header
  std::vector<uint8_t> rgb(static_cast<size_t>(width) * height * 3);
  in.read(reinterpret_cast<char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  if (static_cast<size_t>(in.gcount()) != rgb.size()) throw IoError("truncated pixmap: " + path.string());
  return rgb;
}

void write_text_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << content;
  if (!out) throw IoError("write failed: " + path.string());
}

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

uint64_t hash_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  uint64_t h = 0xCBF29CE484222325ULL;
  char buf[65536];
  while (in) {
    in.read(buf, sizeof buf);
    h = fnv1a64(buf, static_cast<size_t>(in.gcount()), h);
  }
  return h;
}

uint64_t hash_directory(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  uint64_t h = 0xCBF29CE484222325ULL;
  for (const auto& f : files) {
    const std::string rel = fs::relative(f, dir).generic_string();
    h = fnv1a64(rel, h);
    const uint64_t fh = hash_file(f);
    h = fnv1a64(&fh, sizeof fh, h);
  }
  return h;
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

void write_csv(const fs::path& path, const CsvTable& t) {
  std::ostringstream ss;
  for (size_t i = 0; i < t.header.size(); ++i) ss << (i ? "," : "") << t.header[i];
  ss << "\n";
  for (const auto& row : t.rows) {
    for (size_t i = 0; i < row.size(); ++i) ss << (i ? "," : "") << row[i];
    ss << "\n";
  }
  write_text_file(path, ss.str());
}

CsvTable read_csv(const fs::path& path) {
  CsvTable t;
  std::istringstream in(read_text_file(path));
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.push_back("");
    if (first) {
      t.header = cells;
      first = false;
    } else {
      t.rows.push_back(cells);
    }
  }
  return t;
}

}  // namespace cwm::io
