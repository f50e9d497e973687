#pragma once

// Labeled toy datasets: seeded synthetic generators small enough to certify
// and train on a laptop, plus a plain CSV interchange format so runs can be
// reproduced from committed files.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "covprop/error.hpp"
#include "covprop/network.hpp"
#include "covprop/numkit.hpp"

namespace covprop {

struct Sample {
  Image image;
  int label = 0;
};

using Dataset = std::vector<Sample>;

// 8x8 single-channel images, 4 classes: a Gaussian bump sits in the quadrant
// named by the label, with jittered center, amplitude wobble and pixel noise.
// Quadrant energy survives pooling, so small conv nets separate this quickly.
inline Dataset quadrant_dataset(int count, std::uint64_t seed) {
  if (count < 1) {
    throw_error(ErrorKind::validation, "quadrant_dataset: count must be positive");
  }
  const double centers[4][2] = {{2.0, 2.0}, {2.0, 6.0}, {6.0, 2.0}, {6.0, 6.0}};
  Dataset data;
  data.reserve(static_cast<std::size_t>(count));
  NormalRng rng(mix_seed(seed, 0x5e7'0001));
  for (int i = 0; i < count; ++i) {
    const int label = i % 4;
    const double cy = centers[label][0] + (rng.uniform() - 0.5);
    const double cx = centers[label][1] + (rng.uniform() - 0.5);
    const double amp = 1.0 + 0.2 * (rng.uniform() - 0.5);
    Image img(8, 8, 1);
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
        img.at(y, x, 0) = amp * std::exp(-d2 / (2.0 * 1.2 * 1.2)) + 0.05 * rng.normal();
      }
    data.push_back({std::move(img), label});
  }
  return data;
}

// 1x1x4 two-class points on opposite sides of a hyperplane, margin well above
// the noise level, so one linear layer separates them perfectly.
inline Dataset two_class_linear_dataset(int count, std::uint64_t seed) {
  if (count < 1) {
    throw_error(ErrorKind::validation, "two_class_linear_dataset: count must be positive");
  }
  const double axis[4] = {0.8, 0.4, -0.4, 0.8};
  Dataset data;
  data.reserve(static_cast<std::size_t>(count));
  NormalRng rng(mix_seed(seed, 0x5e7'0002));
  for (int i = 0; i < count; ++i) {
    const int label = i % 2;
    const double side = label == 0 ? 1.0 : -1.0;
    Image img(1, 1, 4);
    for (int c = 0; c < 4; ++c) img.at(0, 0, c) = side * axis[c] + 0.25 * rng.normal();
    data.push_back({std::move(img), label});
  }
  return data;
}

// CSV rows: label,height,width,channels,p0,p1,... with pixels in the image's
// own pixel-major order. All rows in one file must share the same dims.
inline void save_dataset_csv(const Dataset& data, std::ostream& out) {
  if (data.empty()) {
    throw_error(ErrorKind::validation, "save_dataset_csv: empty dataset");
  }
  out << "label,height,width,channels,pixels\n";
  char buf[32];
  for (const Sample& s : data) {
    out << s.label << ',' << s.image.height << ',' << s.image.width << ',' << s.image.channels;
    for (double v : s.image.data) {
      std::snprintf(buf, sizeof buf, ",%.17g", v);
      out << buf;
    }
    out << '\n';
  }
}

inline Dataset load_dataset_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("label,height,width,channels", 0) != 0) {
    throw_error(ErrorKind::format, "dataset csv: missing header line");
  }
  Dataset data;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream row(line);
    std::string cell;
    std::vector<double> cells;
    while (std::getline(row, cell, ',')) {
      try {
        std::size_t used = 0;
        cells.push_back(std::stod(cell, &used));
        if (used != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw_error(ErrorKind::format, "dataset csv: line " + std::to_string(line_no) +
                                           ": bad number '" + cell + "'");
      }
    }
    if (cells.size() < 5) {
      throw_error(ErrorKind::format,
                  "dataset csv: line " + std::to_string(line_no) + ": too few columns");
    }
    Sample s;
    s.label = static_cast<int>(cells[0]);
    const int h = static_cast<int>(cells[1]);
    const int w = static_cast<int>(cells[2]);
    const int c = static_cast<int>(cells[3]);
    if (s.label < 0 || h < 1 || w < 1 || c < 1) {
      throw_error(ErrorKind::format, "dataset csv: line " + std::to_string(line_no) +
                                         ": bad label or dims");
    }
    if (cells.size() - 4 != static_cast<std::size_t>(h) * w * c) {
      throw_error(ErrorKind::format,
                  "dataset csv: line " + std::to_string(line_no) + ": expected " +
                      std::to_string(static_cast<std::size_t>(h) * w * c) + " pixels, got " +
                      std::to_string(cells.size() - 4));
    }
    if (!data.empty() && (h != data[0].image.height || w != data[0].image.width ||
                          c != data[0].image.channels)) {
      throw_error(ErrorKind::format,
                  "dataset csv: line " + std::to_string(line_no) + ": dims differ from first row");
    }
    s.image = Image(h, w, c);
    std::copy(cells.begin() + 4, cells.end(), s.image.data.begin());
    data.push_back(std::move(s));
  }
  if (data.empty()) {
    throw_error(ErrorKind::format, "dataset csv: no data rows");
  }
  return data;
}

inline void save_dataset_file(const Dataset& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) {
    throw_error(ErrorKind::io, "cannot open '" + path + "' for writing");
  }
  save_dataset_csv(data, out);
  if (!out) {
    throw_error(ErrorKind::io, "short write to '" + path + "'");
  }
}

inline Dataset load_dataset_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw_error(ErrorKind::io, "cannot open '" + path + "' for reading");
  }
  return load_dataset_csv(in);
}

inline int dataset_class_count(const Dataset& data) {
  int max_label = 0;
  for (const Sample& s : data) max_label = std::max(max_label, s.label);
  return max_label + 1;
}

}  // namespace covprop
