#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "stretchnas/optimization/dataset.hpp"

namespace stretchnas::data {

namespace fs = std::filesystem;
using optimization::Real;

struct Image {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<Real> values;  // CHW, scaled to [0, 1]
};

namespace detail {

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// Whitespace-separated header token, skipping '#' comments.
inline std::string header_token(const std::string& bytes, std::size_t& pos, const std::string& file) {
  while (pos < bytes.size()) {
    if (bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
      ++pos;
    } else {
      break;
    }
  }
  const std::size_t start = pos;
  while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos])) && bytes[pos] != '#') ++pos;
  if (start == pos) throw ConfigError(file + ": truncated header");
  return bytes.substr(start, pos - start);
}

inline std::size_t header_number(const std::string& bytes, std::size_t& pos, const std::string& file) {
  const std::string t = header_token(bytes, pos, file);
  if (!std::all_of(t.begin(), t.end(), [](char c) { return c >= '0' && c <= '9'; }) || t.size() > 9)
    throw ConfigError(file + ": bad header value '" + t + "'");
  return std::stoul(t);
}

}  // namespace detail

/// Reads binary (P5/P6) or plain (P2/P3) PGM/PPM.
inline Image read_netpbm(const fs::path& path) {
  const std::string file = path.filename().string();
  const std::string bytes = detail::read_file(path);
  std::size_t pos = 0;
  const std::string magic = detail::header_token(bytes, pos, file);
  const bool plain = magic == "P2" || magic == "P3";
  const bool binary = magic == "P5" || magic == "P6";
  if (!plain && !binary) throw ConfigError(file + ": not a PGM/PPM image (magic '" + magic + "')");
  Image img;
  img.channels = magic == "P3" || magic == "P6" ? 3 : 1;
  img.width = detail::header_number(bytes, pos, file);
  img.height = detail::header_number(bytes, pos, file);
  const std::size_t maxval = detail::header_number(bytes, pos, file);
  if (img.width == 0 || img.height == 0 || maxval == 0 || maxval > 65535) throw ConfigError(file + ": bad header");
  const std::size_t count = img.width * img.height * img.channels;
  std::vector<std::size_t> raw(count);
  if (plain) {
    for (auto& v : raw) v = detail::header_number(bytes, pos, file);
  } else {
    ++pos;  // single whitespace after maxval
    const std::size_t bytes_per = maxval > 255 ? 2 : 1;
    if (bytes.size() < pos + count * bytes_per) throw ConfigError(file + ": truncated pixel data");
    for (std::size_t k = 0; k < count; ++k) {
      const auto hi = static_cast<unsigned char>(bytes[pos + k * bytes_per]);
      raw[k] = bytes_per == 2 ? (hi << 8) | static_cast<unsigned char>(bytes[pos + k * 2 + 1]) : hi;
    }
  }
  img.values.resize(count);
  // Interleaved HWC on disk, CHW in memory.
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) {
        const std::size_t v = raw[(y * img.width + x) * img.channels + c];
        if (v > maxval) throw ConfigError(file + ": pixel value above maxval");
        img.values[(c * img.height + y) * img.width + x] = static_cast<Real>(static_cast<double>(v) / maxval);
      }
  return img;
}

inline void write_netpbm(const fs::path& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out << (img.channels == 3 ? "P6" : "P5") << "\n" << img.width << " " << img.height << "\n255\n";
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) {
        const double v = std::clamp(static_cast<double>(img.values[(c * img.height + y) * img.width + x]), 0.0, 1.0);
        out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
      }
}

/// CSV `filename,label` lines; an optional first line `filename,label` is a
/// header.
inline std::map<std::string, int> read_labels(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open label file '" + path.string() + "'");
  std::map<std::string, int> labels;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw ParseError("expected 'filename,label'", line_no, 1);
    const std::string name = line.substr(0, comma);
    const std::string value = line.substr(comma + 1);
    if (line_no == 1 && name == "filename") continue;
    int label = 0;
    try {
      std::size_t used = 0;
      label = std::stoi(value, &used);
      if (used != value.size() || label < 0) throw std::invalid_argument("");
    } catch (const std::exception&) {
      throw ParseError("bad label '" + value + "'", line_no, comma + 2);
    }
    if (!labels.emplace(name, label).second) throw ParseError("duplicate entry for '" + name + "'", line_no, 1);
  }
  return labels;
}

/// Every .pgm/.ppm file of `dir`, sorted by filename, with labels from
/// `label_file`. All images must share one shape.
inline optimization::Dataset ingest_images(const fs::path& dir, const fs::path& label_file) {
  if (!fs::is_directory(dir)) throw ConfigError("image directory '" + dir.string() + "' does not exist");
  auto labels = read_labels(label_file);
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto ext = entry.path().extension().string();
    if (entry.is_regular_file() && (ext == ".pgm" || ext == ".ppm")) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end(), [](const fs::path& a, const fs::path& b) {
    return a.filename().string() < b.filename().string();
  });
  for (const auto& [name, label] : labels) {
    const bool found = std::any_of(files.begin(), files.end(), [&](const fs::path& f) { return f.filename() == name; });
    if (!found) throw ConfigError("label file references missing image '" + name + "'");
  }
  optimization::Dataset data;
  int max_label = -1;
  for (const auto& f : files) {
    const std::string name = f.filename().string();
    auto it = labels.find(name);
    if (it == labels.end()) throw ConfigError("no label for image '" + name + "'");
    const Image img = read_netpbm(f);
    const ad::Shape shape{img.channels, img.height, img.width};
    if (data.sample_shape.empty()) data.sample_shape = shape;
    if (shape != data.sample_shape) {
      throw ConfigError("image '" + name + "' has shape " + ad::shape_str(shape) + ", expected " +
                        ad::shape_str(data.sample_shape));
    }
    data.push_back(img.values, it->second);
    max_label = std::max(max_label, it->second);
  }
  if (files.empty()) throw ConfigError("no PGM/PPM images in '" + dir.string() + "'");
  data.n_classes = static_cast<std::size_t>(std::max(2, max_label + 1));
  return data;
}

inline constexpr std::string_view kDatasetHeader = "stretchnas-dataset";

/// Text form of a dataset: header, shape, class count, one sample per line.
inline std::string save_dataset(const optimization::Dataset& data) {
  std::ostringstream out;
  out << kDatasetHeader << " 1\nshape";
  for (auto e : data.sample_shape) out << " " << e;
  out << "\nclasses " << data.n_classes << "\n";
  char buf[40];
  for (std::size_t k = 0; k < data.size(); ++k) {
    out << "sample " << data.labels[k];
    for (Real v : data.sample(k)) {
      std::snprintf(buf, sizeof buf, " %.17g", static_cast<double>(v));
      out << buf;
    }
    out << "\n";
  }
  return out.str();
}

inline optimization::Dataset load_dataset(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  optimization::Dataset data;
  bool header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string key;
    fields >> key;
    if (!header) {
      int version = 0;
      if (key != kDatasetHeader || !(fields >> version) || version != 1)
        throw ParseError("not a version 1 dataset file", line_no, 1);
      header = true;
    } else if (key == "shape") {
      std::size_t e = 0;
      while (fields >> e) data.sample_shape.push_back(e);
      if (data.sample_shape.size() != 3) throw ParseError("shape needs 3 extents", line_no, 1);
    } else if (key == "classes") {
      if (!(fields >> data.n_classes)) throw ParseError("bad class count", line_no, 9);
    } else if (key == "sample") {
      int label = 0;
      if (!(fields >> label)) throw ParseError("bad label", line_no, 8);
      std::vector<Real> x;
      double v = 0;
      while (fields >> v) x.push_back(static_cast<Real>(v));
      if (x.size() != data.sample_numel()) throw ParseError("sample length does not match shape", line_no, 1);
      data.push_back(x, label);
    } else {
      throw ParseError("unknown entry '" + key + "'", line_no, 1);
    }
  }
  if (!header) throw ParseError("empty dataset file", 1, 1);
  return data;
}

}  // namespace stretchnas::data
