#include "filterreg/cloud_io.hpp"

#include "filterreg/error.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace filterreg {

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("write failed: " + path);
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream ss(line);
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}

double parse_number(const std::string& tok, long line) {
  double v = 0.0;
  const auto* end = tok.data() + tok.size();
  const auto res = std::from_chars(tok.data(), end, v);
  if (res.ec != std::errc() || res.ptr != end) throw ParseError("malformed number '" + tok + "'", line);
  if (!std::isfinite(v)) throw ParseError("non-finite value '" + tok + "'", line);
  return v;
}

enum class ScalarType { i8, u8, i16, u16, i32, u32, f32, f64 };

ScalarType scalar_type(const std::string& name, long line) {
  if (name == "char" || name == "int8") return ScalarType::i8;
  if (name == "uchar" || name == "uint8") return ScalarType::u8;
  if (name == "short" || name == "int16") return ScalarType::i16;
  if (name == "ushort" || name == "uint16") return ScalarType::u16;
  if (name == "int" || name == "int32") return ScalarType::i32;
  if (name == "uint" || name == "uint32") return ScalarType::u32;
  if (name == "float" || name == "float32") return ScalarType::f32;
  if (name == "double" || name == "float64") return ScalarType::f64;
  throw ParseError("unknown PLY scalar type '" + name + "'", line);
}

std::size_t scalar_size(ScalarType t) {
  switch (t) {
    case ScalarType::i8:
    case ScalarType::u8:
      return 1;
    case ScalarType::i16:
    case ScalarType::u16:
      return 2;
    case ScalarType::i32:
    case ScalarType::u32:
    case ScalarType::f32:
      return 4;
    case ScalarType::f64:
      return 8;
  }
  return 0;
}

struct PlyProperty {
  std::string name;
  ScalarType type = ScalarType::f32;
  bool is_list = false;
  ScalarType count_type = ScalarType::u8;
};

struct PlyElement {
  std::string name;
  std::size_t count = 0;
  std::vector<PlyProperty> properties;
};

class BinaryReader {
 public:
  BinaryReader(const std::string& bytes, std::size_t offset, bool big_endian)
      : bytes_(bytes), pos_(offset), big_endian_(big_endian) {}

  double read(ScalarType t) {
    const std::size_t n = scalar_size(t);
    if (pos_ + n > bytes_.size()) throw ParseError("binary PLY: unexpected end of data");
    unsigned char buf[8];
    std::memcpy(buf, bytes_.data() + pos_, n);
    pos_ += n;
    const bool swap = big_endian_ == (std::endian::native == std::endian::little);
    if (swap) std::reverse(buf, buf + n);
    switch (t) {
      case ScalarType::i8: return static_cast<double>(static_cast<std::int8_t>(buf[0]));
      case ScalarType::u8: return static_cast<double>(buf[0]);
      case ScalarType::i16: return static_cast<double>(load<std::int16_t>(buf));
      case ScalarType::u16: return static_cast<double>(load<std::uint16_t>(buf));
      case ScalarType::i32: return static_cast<double>(load<std::int32_t>(buf));
      case ScalarType::u32: return static_cast<double>(load<std::uint32_t>(buf));
      case ScalarType::f32: return static_cast<double>(load<float>(buf));
      case ScalarType::f64: return load<double>(buf);
    }
    return 0.0;
  }

 private:
  template <typename T>
  static T load(const unsigned char* buf) {
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
  }

  const std::string& bytes_;
  std::size_t pos_;
  bool big_endian_;
};

struct VertexLayout {
  int x = -1, y = -1, z = -1, nx = -1, ny = -1, nz = -1;
  std::vector<int> features;  // property index per f_j
};

VertexLayout vertex_layout(const PlyElement& vertex) {
  VertexLayout layout;
  std::vector<std::pair<int, int>> feats;
  for (std::size_t p = 0; p < vertex.properties.size(); ++p) {
    const std::string& n = vertex.properties[p].name;
    const int idx = static_cast<int>(p);
    if (n == "x") layout.x = idx;
    else if (n == "y") layout.y = idx;
    else if (n == "z") layout.z = idx;
    else if (n == "nx") layout.nx = idx;
    else if (n == "ny") layout.ny = idx;
    else if (n == "nz") layout.nz = idx;
    else if (n.size() > 2 && n.rfind("f_", 0) == 0) {
      int j = -1;
      const auto res = std::from_chars(n.data() + 2, n.data() + n.size(), j);
      if (res.ec == std::errc() && res.ptr == n.data() + n.size() && j >= 0) feats.emplace_back(j, idx);
    }
  }
  if (layout.x < 0 || layout.y < 0 || layout.z < 0) throw ParseError("PLY vertex element lacks x/y/z");
  const int normal_props = (layout.nx >= 0) + (layout.ny >= 0) + (layout.nz >= 0);
  if (normal_props != 0 && normal_props != 3) throw ParseError("PLY vertex element has partial normals");
  std::sort(feats.begin(), feats.end());
  for (std::size_t j = 0; j < feats.size(); ++j) {
    if (feats[j].first != static_cast<int>(j)) throw ParseError("PLY feature properties must be f_0 .. f_{D-1}");
    layout.features.push_back(feats[j].second);
  }
  return layout;
}

void finish_normals(PointCloud& cloud, std::vector<std::string>* warnings) {
  std::size_t deviating = 0;
  for (std::size_t i = 0; i < cloud.normals.size(); ++i) {
    const double n = cloud.normals[i].norm();
    if (!(n > 0.0)) throw ParseError("normal " + std::to_string(i) + " has zero length");
    if (std::abs(n - 1.0) > 1e-3) ++deviating;
    // Already unit to round-off: keep the stored bits.
    if (std::abs(n - 1.0) > 1e-14) cloud.normals[i] /= n;
  }
  if (deviating > 0 && warnings) {
    warnings->push_back(std::to_string(deviating) + " normals deviated from unit length by > 1e-3 and were renormalized");
  }
}

void store_vertex(PointCloud& cloud, std::size_t i, const VertexLayout& layout, const std::vector<double>& v) {
  cloud.points[i] = {v[static_cast<std::size_t>(layout.x)], v[static_cast<std::size_t>(layout.y)],
                     v[static_cast<std::size_t>(layout.z)]};
  if (layout.nx >= 0) {
    cloud.normals[i] = {v[static_cast<std::size_t>(layout.nx)], v[static_cast<std::size_t>(layout.ny)],
                        v[static_cast<std::size_t>(layout.nz)]};
  }
  for (std::size_t j = 0; j < layout.features.size(); ++j) {
    cloud.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
        v[static_cast<std::size_t>(layout.features[j])];
  }
}

}  // namespace

PointCloud parse_ply(const std::string& bytes, std::vector<std::string>* warnings) {
  std::size_t pos = 0;
  long line_no = 0;
  auto next_line = [&]() -> std::string {
    if (pos >= bytes.size()) throw ParseError("PLY header ended unexpectedly", line_no);
    std::size_t end = bytes.find('\n', pos);
    if (end == std::string::npos) end = bytes.size();
    std::string line = bytes.substr(pos, end - pos);
    pos = std::min(end + 1, bytes.size());
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
  };

  if (next_line() != "ply") throw ParseError("missing 'ply' magic", 1);
  std::string encoding;
  std::vector<PlyElement> elements;
  for (;;) {
    const std::string line = next_line();
    const auto tok = split_ws(line);
    if (tok.empty() || tok[0] == "comment" || tok[0] == "obj_info") continue;
    if (tok[0] == "end_header") break;
    if (tok[0] == "format") {
      if (tok.size() < 2) throw ParseError("malformed format line", line_no);
      encoding = tok[1];
    } else if (tok[0] == "element") {
      if (tok.size() != 3) throw ParseError("malformed element line", line_no);
      PlyElement e;
      e.name = tok[1];
      e.count = static_cast<std::size_t>(parse_number(tok[2], line_no));
      elements.push_back(e);
    } else if (tok[0] == "property") {
      if (elements.empty()) throw ParseError("property before element", line_no);
      PlyProperty p;
      if (tok.size() == 5 && tok[1] == "list") {
        p.is_list = true;
        p.count_type = scalar_type(tok[2], line_no);
        p.type = scalar_type(tok[3], line_no);
        p.name = tok[4];
      } else if (tok.size() == 3) {
        p.type = scalar_type(tok[1], line_no);
        p.name = tok[2];
      } else {
        throw ParseError("malformed property line", line_no);
      }
      elements.back().properties.push_back(p);
    } else {
      throw ParseError("unexpected header keyword '" + tok[0] + "'", line_no);
    }
  }
  if (encoding != "ascii" && encoding != "binary_little_endian" && encoding != "binary_big_endian") {
    throw ParseError("unsupported PLY format '" + encoding + "'");
  }

  std::size_t vertex_index = elements.size();
  for (std::size_t e = 0; e < elements.size(); ++e) {
    if (elements[e].name == "vertex") {
      vertex_index = e;
      break;
    }
  }
  if (vertex_index == elements.size()) throw ParseError("PLY file has no vertex element");
  const PlyElement& vertex = elements[vertex_index];
  const VertexLayout layout = vertex_layout(vertex);
  for (const auto& p : vertex.properties) {
    if (p.is_list) throw ParseError("list properties on vertices are not supported");
  }

  PointCloud cloud;
  cloud.points.resize(vertex.count);
  if (layout.nx >= 0) cloud.normals.resize(vertex.count);
  if (!layout.features.empty()) {
    cloud.features.resize(static_cast<Eigen::Index>(vertex.count), static_cast<Eigen::Index>(layout.features.size()));
  }
  std::vector<double> values(vertex.properties.size());

  if (encoding == "ascii") {
    for (std::size_t e = 0; e <= vertex_index; ++e) {
      for (std::size_t i = 0; i < elements[e].count; ++i) {
        std::string line;
        std::vector<std::string> tok;
        do {
          line = next_line();
          tok = split_ws(line);
        } while (tok.empty());
        if (e != vertex_index) continue;
        if (tok.size() != vertex.properties.size()) {
          throw ParseError("expected " + std::to_string(vertex.properties.size()) + " values, got " +
                               std::to_string(tok.size()),
                           line_no);
        }
        for (std::size_t p = 0; p < tok.size(); ++p) values[p] = parse_number(tok[p], line_no);
        store_vertex(cloud, i, layout, values);
      }
    }
  } else {
    BinaryReader reader(bytes, pos, encoding == "binary_big_endian");
    for (std::size_t e = 0; e <= vertex_index; ++e) {
      for (std::size_t i = 0; i < elements[e].count; ++i) {
        for (std::size_t p = 0; p < elements[e].properties.size(); ++p) {
          const PlyProperty& prop = elements[e].properties[p];
          if (prop.is_list) {
            const auto n = static_cast<std::size_t>(reader.read(prop.count_type));
            for (std::size_t k = 0; k < n; ++k) reader.read(prop.type);
          } else {
            values[p] = reader.read(prop.type);
          }
        }
        if (e != vertex_index) continue;
        for (double v : values) {
          if (!std::isfinite(v)) throw ParseError("vertex " + std::to_string(i) + " has a non-finite value");
        }
        store_vertex(cloud, i, layout, values);
      }
    }
  }
  if (cloud.empty()) throw InputError("PLY file contains no points");
  finish_normals(cloud, warnings);
  return cloud;
}

PointCloud parse_xyz(const std::string& text, std::vector<std::string>* warnings) {
  std::istringstream in(text);
  std::string line;
  long line_no = 0;
  std::size_t columns = 0;
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const auto tok = split_ws(line);
    if (tok.empty()) continue;
    if (columns == 0) {
      columns = tok.size();
      if (columns < 3) throw ParseError("XYZ rows need at least 3 columns", line_no);
    }
    if (tok.size() != columns) {
      throw ParseError("expected " + std::to_string(columns) + " columns, got " + std::to_string(tok.size()), line_no);
    }
    std::vector<double> row(columns);
    for (std::size_t c = 0; c < columns; ++c) row[c] = parse_number(tok[c], line_no);
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw InputError("XYZ file contains no points");
  const bool normals = columns >= 6 && columns != 4 && columns != 5;
  const std::size_t feature_start = normals ? 6 : 3;
  const std::size_t feature_dim = columns - feature_start;
  PointCloud cloud;
  cloud.points.resize(rows.size());
  if (normals) cloud.normals.resize(rows.size());
  if (feature_dim > 0) cloud.features.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(feature_dim));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    cloud.points[i] = {r[0], r[1], r[2]};
    if (normals) cloud.normals[i] = {r[3], r[4], r[5]};
    for (std::size_t j = 0; j < feature_dim; ++j) {
      cloud.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = r[feature_start + j];
    }
  }
  finish_normals(cloud, warnings);
  return cloud;
}

PointCloud load_cloud(const std::string& path, CloudFormat format, std::vector<std::string>* warnings) {
  if (format == CloudFormat::automatic) format = ends_with(path, ".ply") ? CloudFormat::ply : CloudFormat::xyz;
  const std::string bytes = read_file(path);
  PointCloud cloud = format == CloudFormat::ply ? parse_ply(bytes, warnings) : parse_xyz(bytes, warnings);
  cloud.validate();
  return cloud;
}

std::string ply_bytes(const PointCloud& cloud, PlyEncoding encoding) {
  cloud.validate();
  std::ostringstream out;
  out << "ply\nformat " << (encoding == PlyEncoding::ascii ? "ascii" : "binary_little_endian") << " 1.0\n";
  out << "element vertex " << cloud.size() << "\n";
  for (const char* n : {"x", "y", "z"}) out << "property double " << n << "\n";
  if (cloud.has_normals()) {
    for (const char* n : {"nx", "ny", "nz"}) out << "property double " << n << "\n";
  }
  for (Eigen::Index j = 0; j < cloud.feature_dim(); ++j) out << "property double f_" << j << "\n";
  out << "end_header\n";

  std::vector<double> row;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    row.assign(cloud.points[i].data(), cloud.points[i].data() + 3);
    if (cloud.has_normals()) row.insert(row.end(), cloud.normals[i].data(), cloud.normals[i].data() + 3);
    for (Eigen::Index j = 0; j < cloud.feature_dim(); ++j) row.push_back(cloud.features(static_cast<Eigen::Index>(i), j));
    if (encoding == PlyEncoding::ascii) {
      out << std::setprecision(17);
      for (std::size_t c = 0; c < row.size(); ++c) out << (c ? " " : "") << row[c];
      out << "\n";
    } else {
      static_assert(std::endian::native == std::endian::little, "binary writer assumes a little-endian host");
      out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size() * sizeof(double)));
    }
  }
  return out.str();
}

void save_ply(const std::string& path, const PointCloud& cloud, PlyEncoding encoding) {
  write_file(path, ply_bytes(cloud, encoding));
}

void save_xyz(const std::string& path, const PointCloud& cloud) {
  cloud.validate();
  std::ostringstream out;
  out << std::setprecision(17);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    out << cloud.points[i].x() << " " << cloud.points[i].y() << " " << cloud.points[i].z();
    if (cloud.has_normals()) out << " " << cloud.normals[i].x() << " " << cloud.normals[i].y() << " " << cloud.normals[i].z();
    for (Eigen::Index j = 0; j < cloud.feature_dim(); ++j) out << " " << cloud.features(static_cast<Eigen::Index>(i), j);
    out << "\n";
  }
  write_file(path, out.str());
}

void save_cloud(const std::string& path, const PointCloud& cloud) {
  if (ends_with(path, ".ply")) {
    save_ply(path, cloud, PlyEncoding::binary_little_endian);
  } else {
    save_xyz(path, cloud);
  }
}

}  // namespace filterreg
