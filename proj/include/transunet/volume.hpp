// SPDX-License-Identifier: Apache-2.0
//
// Volumes, label maps and their on-disk format.
//
// A volume is stored as a text header ("key: value" lines) plus a sidecar
// raw payload in little-endian byte order:
//
//   format: transunet-volume
//   version: 1
//   kind: image            (image | labels)
//   channels: 1            (default 1)
//   dims: D H W
//   spacing: sz sy sx      (mm, default 1 1 1)
//   dtype: float32         (float32 for images, uint8 for labels)
//   byte_order: little
//   data_file: image.vol.raw   (default: header file name + ".raw")
//
// Payload order is channel-major, then D, H, W (row-major).
#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "transunet/errors.hpp"
#include "transunet/tensor.hpp"

namespace transunet {

struct Dims {
  std::size_t d = 1, h = 1, w = 1;

  std::size_t voxels() const { return d * h * w; }
  std::size_t index(std::size_t z, std::size_t y, std::size_t x) const { return (z * h + y) * w + x; }
  friend bool operator==(const Dims&, const Dims&) = default;
  std::string str() const { return std::to_string(d) + "x" + std::to_string(h) + "x" + std::to_string(w); }
};

using Spacing = std::array<double, 3>;

struct Volume {
  std::size_t channels = 1;
  Dims dims;
  Spacing spacing{1.0, 1.0, 1.0};
  std::vector<float> data;

  Volume() = default;
  Volume(std::size_t c, Dims dm, Spacing sp = {1.0, 1.0, 1.0})
      : channels(c), dims(dm), spacing(sp), data(c * dm.voxels(), 0.0f) {}

  float& at(std::size_t c, std::size_t z, std::size_t y, std::size_t x) {
    return data[c * dims.voxels() + dims.index(z, y, x)];
  }
  float at(std::size_t c, std::size_t z, std::size_t y, std::size_t x) const {
    return data[c * dims.voxels() + dims.index(z, y, x)];
  }

  void validate() const {
    if (channels < 1) throw InputError("volume must have at least one channel");
    for (double s : spacing)
      if (!(s > 0.0)) throw InputError("volume spacing components must be positive");
    if (data.size() != channels * dims.voxels())
      throw InputError("volume buffer length " + std::to_string(data.size()) + " does not match " +
                       std::to_string(channels) + " x " + dims.str());
  }
};

struct LabelMap {
  Dims dims;
  Spacing spacing{1.0, 1.0, 1.0};
  std::vector<std::uint8_t> labels;

  LabelMap() = default;
  LabelMap(Dims dm, Spacing sp = {1.0, 1.0, 1.0}) : dims(dm), spacing(sp), labels(dm.voxels(), 0) {}

  std::uint8_t& at(std::size_t z, std::size_t y, std::size_t x) { return labels[dims.index(z, y, x)]; }
  std::uint8_t at(std::size_t z, std::size_t y, std::size_t x) const { return labels[dims.index(z, y, x)]; }

  std::map<int, std::size_t> histogram() const {
    std::map<int, std::size_t> h;
    for (auto l : labels) ++h[l];
    return h;
  }
  std::set<int> label_set() const {
    std::set<int> s;
    for (auto l : labels) s.insert(l);
    return s;
  }

  void validate(int num_classes = 255) const {
    if (labels.size() != dims.voxels()) throw InputError("label buffer length does not match " + dims.str());
    for (auto l : labels)
      if (l > num_classes)
        throw InputError("label value " + std::to_string(l) + " exceeds class count " + std::to_string(num_classes));
  }
};

inline bool same_geometry(const Volume& v, const LabelMap& l) { return v.dims == l.dims; }

// [C x D x H x W] tensor view of a volume.
template <class T>
Tensor<T> to_tensor(const Volume& v) {
  std::vector<T> buf(v.data.begin(), v.data.end());
  return Tensor<T>(Shape{v.channels, v.dims.d, v.dims.h, v.dims.w}, std::move(buf));
}

namespace io_detail {

inline std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
void append_le(std::string& out, T v) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.append(bytes, sizeof(T));
}

template <class T>
T read_le(const char* p) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T v;
  std::memcpy(&v, bytes, sizeof(T));
  return v;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw FormatError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + p.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to " + p.string());
}

struct Header {
  std::string kind;
  std::size_t channels = 1;
  Dims dims;
  Spacing spacing{1.0, 1.0, 1.0};
  std::string dtype;
  std::string data_file;
};

inline std::string format_spacing(const Spacing& s) {
  std::ostringstream os;
  os << std::setprecision(17) << s[0] << ' ' << s[1] << ' ' << s[2];
  return os.str();
}

inline void write_header(const std::filesystem::path& path, const Header& h) {
  std::ostringstream os;
  os << "format: transunet-volume\n"
     << "version: 1\n"
     << "kind: " << h.kind << "\n"
     << "channels: " << h.channels << "\n"
     << "dims: " << h.dims.d << ' ' << h.dims.h << ' ' << h.dims.w << "\n"
     << "spacing: " << format_spacing(h.spacing) << "\n"
     << "dtype: " << h.dtype << "\n"
     << "byte_order: little\n"
     << "data_file: " << h.data_file << "\n";
  write_file(path, os.str());
}

inline Header read_header(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  Header h;
  h.data_file = path.filename().string() + ".raw";
  bool have_dims = false, have_dtype = false;
  std::string line;
  std::size_t line_no = 0, offset = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t line_offset = offset;
    offset += line.size() + 1;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    auto colon = line.find(':');
    if (colon == std::string::npos)
      throw FormatError(path.string() + ":" + std::to_string(line_no) + " (byte " + std::to_string(line_offset) +
                        "): expected 'key: value'");
    const std::string key = trim(line.substr(0, colon));
    const std::string val = trim(line.substr(colon + 1));
    std::istringstream vs(val);
    auto bad = [&](const std::string& what) {
      return FormatError(path.string() + ":" + std::to_string(line_no) + " (byte " + std::to_string(line_offset) +
                         "): " + what);
    };
    if (key == "format") {
      if (val != "transunet-volume") throw bad("unknown format '" + val + "'");
    } else if (key == "version") {
      if (val != "1") throw bad("unsupported version " + val);
    } else if (key == "kind") {
      h.kind = val;
    } else if (key == "channels") {
      if (!(vs >> h.channels) || h.channels == 0) throw bad("invalid channel count");
    } else if (key == "dims") {
      if (!(vs >> h.dims.d >> h.dims.h >> h.dims.w) || h.dims.voxels() == 0) throw bad("invalid dims");
      have_dims = true;
    } else if (key == "spacing") {
      if (!(vs >> h.spacing[0] >> h.spacing[1] >> h.spacing[2])) throw bad("invalid spacing");
      for (double s : h.spacing)
        if (!(s > 0.0)) throw bad("spacing components must be positive");
    } else if (key == "dtype") {
      if (val != "float32" && val != "uint8") throw bad("unknown dtype '" + val + "'");
      h.dtype = val;
      have_dtype = true;
    } else if (key == "byte_order") {
      if (val != "little") throw bad("unsupported byte order '" + val + "'");
    } else if (key == "data_file") {
      h.data_file = val;
    } else {
      throw bad("unknown header key '" + key + "'");
    }
  }
  if (!have_dims) throw FormatError(path.string() + ": header is missing 'dims'");
  if (!have_dtype) throw FormatError(path.string() + ": header is missing 'dtype'");
  return h;
}

inline std::string read_payload(const std::filesystem::path& header_path, const Header& h, std::size_t elem_bytes) {
  const auto payload_path = header_path.parent_path() / h.data_file;
  std::string bytes = read_file(payload_path);
  const std::size_t expected = h.channels * h.dims.voxels() * elem_bytes;
  if (bytes.size() != expected) {
    std::ostringstream os;
    os << payload_path.string() << ": expected " << expected << " payload bytes, found " << bytes.size();
    if (bytes.size() < expected)
      os << " (short read, data ends at byte offset " << bytes.size() << ")";
    else
      os << " (trailing data from byte offset " << expected << ")";
    throw FormatError(os.str());
  }
  return bytes;
}

}  // namespace io_detail

inline void save_volume(const std::filesystem::path& path, const Volume& v) {
  v.validate();
  io_detail::Header h{"image", v.channels, v.dims, v.spacing, "float32", path.filename().string() + ".raw"};
  std::string payload;
  payload.reserve(v.data.size() * 4);
  for (float f : v.data) io_detail::append_le(payload, f);
  io_detail::write_file(path.parent_path() / h.data_file, payload);
  io_detail::write_header(path, h);
}

inline Volume load_volume(const std::filesystem::path& path) {
  auto h = io_detail::read_header(path);
  if (h.dtype != "float32") throw FormatError(path.string() + ": dtype " + h.dtype + " is not valid for an image");
  auto bytes = io_detail::read_payload(path, h, 4);
  Volume v(h.channels, h.dims, h.spacing);
  for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] = io_detail::read_le<float>(bytes.data() + 4 * i);
  return v;
}

inline void save_labels(const std::filesystem::path& path, const LabelMap& l) {
  l.validate();
  io_detail::Header h{"labels", 1, l.dims, l.spacing, "uint8", path.filename().string() + ".raw"};
  std::string payload(l.labels.begin(), l.labels.end());
  io_detail::write_file(path.parent_path() / h.data_file, payload);
  io_detail::write_header(path, h);
}

inline LabelMap load_labels(const std::filesystem::path& path) {
  auto h = io_detail::read_header(path);
  if (h.dtype != "uint8") throw FormatError(path.string() + ": dtype " + h.dtype + " is not valid for labels");
  if (h.channels != 1) throw FormatError(path.string() + ": label maps have exactly one channel");
  auto bytes = io_detail::read_payload(path, h, 1);
  LabelMap l(h.dims, h.spacing);
  std::memcpy(l.labels.data(), bytes.data(), bytes.size());
  return l;
}

// ---- dataset directory: <root>/case_####/{image.vol, label.seg} ------------

inline std::string case_name(std::size_t i) {
  std::ostringstream os;
  os << "case_" << std::setw(4) << std::setfill('0') << i;
  return os.str();
}

inline std::vector<std::filesystem::path> list_cases(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw FormatError("dataset directory " + root.string() + " does not exist");
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory() && e.path().filename().string().rfind("case_", 0) == 0) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

struct Case {
  std::string name;
  Volume image;
  LabelMap label;
};

inline void save_case(const std::filesystem::path& dir, const Volume& image, const LabelMap& label) {
  std::filesystem::create_directories(dir);
  save_volume(dir / "image.vol", image);
  save_labels(dir / "label.seg", label);
}

inline Case load_case(const std::filesystem::path& dir) {
  Case c{dir.filename().string(), load_volume(dir / "image.vol"), load_labels(dir / "label.seg")};
  if (!same_geometry(c.image, c.label))
    throw FormatError(dir.string() + ": image " + c.image.dims.str() + " and label " + c.label.dims.str() +
                      " geometry differ");
  return c;
}

inline std::vector<Case> load_dataset(const std::filesystem::path& root) {
  std::vector<Case> out;
  for (const auto& p : list_cases(root)) out.push_back(load_case(p));
  return out;
}

}  // namespace transunet
