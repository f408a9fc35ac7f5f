#include "cgnet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <random>
#include <string>

#include <nlohmann/json.hpp>

#include "cgnet/errors.hpp"

namespace cgnet {

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
  const Shape s = sample_shape();
  const std::size_t plane = shape_size(s);
  Tensor b({indices.size(), s[0], s[1], s[2]});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= size()) throw ConfigError("dataset index out of range");
    std::copy_n(images.data() + indices[i] * plane, plane, b.data() + i * plane);
  }
  return b;
}

std::vector<int> Dataset::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels.at(i));
  return out;
}

Dataset Dataset::subset(std::size_t begin, std::size_t count) const {
  if (begin + count > size()) throw ConfigError("dataset subset out of range");
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = begin + i;
  return {batch(idx), batch_labels(idx), num_classes};
}

void Dataset::validate() const {
  if (images.rank() != 4) throw DataError("dataset images must be (N,C,H,W)");
  if (images.dim(0) != labels.size()) {
    throw DataError("dataset has " + std::to_string(images.dim(0)) + " images but " +
                    std::to_string(labels.size()) + " labels");
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= num_classes) {
      throw DataError("dataset label " + std::to_string(l) + " outside [0," +
                      std::to_string(num_classes) + ")");
    }
  }
}

// ---------------------------------------------------------------------------
// idx
// ---------------------------------------------------------------------------

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open '" + p.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

struct IdxFile {
  std::vector<std::size_t> dims;
  std::vector<unsigned char> bytes;
  std::size_t offset = 0;
};

IdxFile parse_idx(const std::filesystem::path& p, std::uint32_t expected_magic) {
  IdxFile f;
  f.bytes = read_file(p);
  if (f.bytes.size() < 4) throw DataError("idx file '" + p.string() + "' is truncated");
  const std::uint32_t magic = be32(f.bytes, 0);
  if (magic != expected_magic) {
    throw DataError("idx file '" + p.string() + "' has bad magic 0x" + [&] {
      char buf[16];
      std::snprintf(buf, sizeof buf, "%08x", magic);
      return std::string(buf);
    }());
  }
  const std::size_t ndims = magic & 0xff;
  if (f.bytes.size() < 4 + 4 * ndims) {
    throw DataError("idx file '" + p.string() + "' is truncated in its header");
  }
  std::size_t total = 1;
  for (std::size_t i = 0; i < ndims; ++i) {
    f.dims.push_back(be32(f.bytes, 4 + 4 * i));
    total *= f.dims.back();
  }
  f.offset = 4 + 4 * ndims;
  if (f.bytes.size() - f.offset < total) {
    throw DataError("idx file '" + p.string() + "' is truncated: expected " +
                    std::to_string(total) + " data bytes, found " +
                    std::to_string(f.bytes.size() - f.offset));
  }
  return f;
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                     static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(b, 4);
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const IdxFile im = parse_idx(images, 0x00000803);
  const IdxFile lb = parse_idx(labels, 0x00000801);
  const std::size_t n = im.dims[0], h = im.dims[1], w = im.dims[2];
  if (lb.dims[0] != n) {
    throw DataError("idx label count " + std::to_string(lb.dims[0]) + " does not match " +
                    std::to_string(n) + " images");
  }
  Dataset d;
  d.images = Tensor({n, 1, h, w});
  for (std::size_t i = 0; i < n * h * w; ++i) d.images[i] = im.bytes[im.offset + i] / 255.0;
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    d.labels.push_back(lb.bytes[lb.offset + i]);
    max_label = std::max(max_label, d.labels.back());
  }
  d.num_classes = static_cast<std::size_t>(max_label) + 1;
  d.validate();
  return d;
}

void write_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
               const Dataset& data) {
  if (data.images.dim(1) != 1) throw ConfigError("write_idx: only single-channel images");
  std::ofstream im(images, std::ios::binary | std::ios::trunc);
  std::ofstream lb(labels, std::ios::binary | std::ios::trunc);
  if (!im || !lb) throw DataError("write_idx: cannot open output files");
  put_be32(im, 0x00000803);
  put_be32(im, static_cast<std::uint32_t>(data.size()));
  put_be32(im, static_cast<std::uint32_t>(data.images.dim(2)));
  put_be32(im, static_cast<std::uint32_t>(data.images.dim(3)));
  for (double v : data.images.values()) {
    im.put(static_cast<char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  }
  put_be32(lb, 0x00000801);
  put_be32(lb, static_cast<std::uint32_t>(data.size()));
  for (int l : data.labels) lb.put(static_cast<char>(l));
}

// ---------------------------------------------------------------------------
// raw CHW
// ---------------------------------------------------------------------------

Dataset load_raw_chw(const std::filesystem::path& path) {
  const std::filesystem::path sidecar = path.string() + ".json";
  std::ifstream js(sidecar);
  if (!js) throw DataError("missing sidecar '" + sidecar.string() + "'");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(js);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("sidecar '" + sidecar.string() + "': " + e.what());
  }
  auto field = [&](const char* k) -> std::size_t {
    if (!meta.contains(k) || !meta.at(k).is_number_unsigned()) {
      throw DataError("sidecar '" + sidecar.string() + "': field '" + k +
                      "' must be a non-negative integer");
    }
    return meta.at(k).get<std::size_t>();
  };
  const std::size_t n = field("count"), c = field("channels"), h = field("height"),
                    w = field("width");
  const std::string dtype = meta.value("dtype", std::string("uint8"));
  std::size_t elem = 0;
  if (dtype == "uint8") elem = 1;
  if (dtype == "float32") elem = 4;
  if (dtype == "float64") elem = 8;
  if (elem == 0) throw DataError("sidecar field 'dtype' must be uint8, float32 or float64");

  const auto bytes = read_file(path);
  const std::size_t total = n * c * h * w;
  if (bytes.size() < total * elem) {
    throw DataError("raw file '" + path.string() + "' is truncated: expected " +
                    std::to_string(total * elem) + " bytes, found " +
                    std::to_string(bytes.size()));
  }
  Dataset d;
  d.images = Tensor({n, c, h, w});
  for (std::size_t i = 0; i < total; ++i) {
    double v;
    if (elem == 1) {
      v = bytes[i] / 255.0;
    } else if (elem == 4) {
      float f;
      std::memcpy(&f, bytes.data() + 4 * i, 4);
      v = f;
    } else {
      std::memcpy(&v, bytes.data() + 8 * i, 8);
    }
    if (!(v >= 0.0 && v <= 1.0)) {
      throw DataError("raw file '" + path.string() + "': value outside [0,1] at element " +
                      std::to_string(i));
    }
    d.images[i] = v;
  }
  if (meta.contains("labels")) {
    d.labels = meta.at("labels").get<std::vector<int>>();
  } else if (meta.contains("labels_file")) {
    const auto lb = read_file(path.parent_path() / meta.at("labels_file").get<std::string>());
    if (lb.size() < n) throw DataError("labels file is truncated");
    d.labels.assign(lb.begin(), lb.begin() + static_cast<std::ptrdiff_t>(n));
  } else {
    throw DataError("sidecar '" + sidecar.string() + "' needs 'labels' or 'labels_file'");
  }
  int max_label = 0;
  for (int l : d.labels) max_label = std::max(max_label, l);
  d.num_classes = meta.contains("num_classes") ? meta.at("num_classes").get<std::size_t>()
                                               : static_cast<std::size_t>(max_label) + 1;
  d.validate();
  return d;
}

// ---------------------------------------------------------------------------
// synthetic glyphs
// ---------------------------------------------------------------------------

namespace {

struct Segment {
  double x0, y0, x1, y1;
};

std::vector<std::vector<Segment>> make_prototypes(std::size_t classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> coord(-0.7, 0.7);
  std::uniform_int_distribution<int> strokes(2, 4);
  std::vector<std::vector<Segment>> protos(classes);
  for (auto& p : protos) {
    const int k = strokes(rng);
    double x = coord(rng), y = coord(rng);
    for (int s = 0; s < k; ++s) {
      // Strokes mostly chain from the previous end point, like pen strokes.
      const bool jump = s > 0 && (rng() % 3 == 0);
      if (jump) {
        x = coord(rng);
        y = coord(rng);
      }
      double nx, ny;
      do {
        nx = coord(rng);
        ny = coord(rng);
      } while (std::hypot(nx - x, ny - y) < 0.5);
      p.push_back({x, y, nx, ny});
      x = nx;
      y = ny;
    }
  }
  return protos;
}

double segment_distance(double px, double py, const Segment& s) {
  const double dx = s.x1 - s.x0, dy = s.y1 - s.y0;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0.0 ? ((px - s.x0) * dx + (py - s.y0) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(px - (s.x0 + t * dx), py - (s.y0 + t * dy));
}

}  // namespace

Dataset make_synthetic(const SyntheticSpec& spec) {
  if (spec.classes == 0 || spec.height < 4 || spec.width < 4) {
    throw ConfigError("synthetic dataset: classes must be positive and images at least 4x4");
  }
  const auto protos = make_prototypes(spec.classes, spec.prototype_seed);
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  std::normal_distribution<double> noise(0.0, spec.noise);
  std::uniform_int_distribution<std::size_t> cls(0, spec.classes - 1);

  Dataset d;
  d.num_classes = spec.classes;
  d.images = Tensor({spec.count, 1, spec.height, spec.width});
  d.labels.resize(spec.count);
  const double half = 0.5 * static_cast<double>(std::min(spec.height, spec.width));
  for (std::size_t n = 0; n < spec.count; ++n) {
    const std::size_t label = cls(rng);
    d.labels[n] = static_cast<int>(label);
    const double angle = 0.2 * uni(rng);
    const double scale = half * (0.75 + 0.1 * uni(rng));
    const double tx = spec.jitter * uni(rng), ty = spec.jitter * uni(rng);
    const double width = 1.0 + 0.4 * uni(rng);
    const double ca = std::cos(angle), sa = std::sin(angle);
    auto map = [&](double x, double y, double& ox, double& oy) {
      ox = scale * (ca * x - sa * y) + half + tx;
      oy = scale * (sa * x + ca * y) + half + ty;
    };
    std::vector<Segment> segs;
    for (const auto& s : protos[label]) {
      Segment t{};
      map(s.x0 + spec.deform * uni(rng), s.y0 + spec.deform * uni(rng), t.x0, t.y0);
      map(s.x1 + spec.deform * uni(rng), s.y1 + spec.deform * uni(rng), t.x1, t.y1);
      segs.push_back(t);
    }
    for (std::size_t k = 0; k < spec.clutter; ++k) {
      // Short stroke anywhere in the frame.
      const double cx = 0.8 * uni(rng), cy = 0.8 * uni(rng);
      const double dx = 0.25 * uni(rng), dy = 0.25 * uni(rng);
      Segment t{};
      map(cx - dx, cy - dy, t.x0, t.y0);
      map(cx + dx, cy + dy, t.x1, t.y1);
      segs.push_back(t);
    }
    double* img = d.images.data() + n * spec.height * spec.width;
    for (std::size_t y = 0; y < spec.height; ++y) {
      for (std::size_t x = 0; x < spec.width; ++x) {
        double dist = std::numeric_limits<double>::infinity();
        for (const auto& s : segs) {
          dist = std::min(dist, segment_distance(x + 0.5, y + 0.5, s));
        }
        const double ink = std::clamp(1.0 - (dist - width), 0.0, 1.0);
        img[y * spec.width + x] = std::clamp(ink + noise(rng), 0.0, 1.0);
      }
    }
  }
  return d;
}

}  // namespace cgnet
