#include "cgnet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "cgnet/errors.hpp"

namespace cgnet {

namespace {

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  void raw(const char* p, std::size_t n) { buf_.insert(buf_.end(), p, p + n); }
  const std::vector<char>& data() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  Reader(std::vector<char> buf, std::string path) : buf_(std::move(buf)), path_(std::move(path)) {}

  void need(std::size_t n, const char* what) const {
    if (buf_.size() - pos_ < n) {
      throw DataError("checkpoint '" + path_ + "' is truncated while reading " + what);
    }
  }
  std::uint64_t uint(int bytes, const char* what) {
    need(static_cast<std::size_t>(bytes), what);
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    }
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(uint(4, what)); }
  std::uint64_t u64(const char* what) { return uint(8, what); }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  std::string bytes(const char* what) {
    const std::size_t n = u32(what);
    need(n, what);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == buf_.size(); }
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  std::vector<char> buf_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_container(const std::filesystem::path& path, const CheckpointContainer& c) {
  Writer w;
  w.raw(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.bytes(c.header.dump());
  w.u32(static_cast<std::uint32_t>(c.records.size()));
  for (const auto& r : c.records) {
    if (shape_size(r.shape) != r.values.size()) {
      throw ConfigError("checkpoint record '" + r.name + "': shape does not match value count");
    }
    w.bytes(r.name);
    w.u32(static_cast<std::uint32_t>(r.shape.size()));
    for (auto d : r.shape) w.u64(d);
    for (double v : r.values) w.f64(v);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  out.write(w.data().data(), static_cast<std::streamsize>(w.data().size()));
  if (!out) throw DataError("failed writing checkpoint '" + path.string() + "'");
}

CheckpointContainer read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path.string() + "'");
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(std::move(buf), path.string());
  r.need(4, "magic");
  std::string magic;
  for (int i = 0; i < 4; ++i) magic.push_back(static_cast<char>(r.uint(1, "magic")));
  if (std::memcmp(magic.data(), kCheckpointMagic, 4) != 0) {
    throw DataError("'" + path.string() + "' is not a checkpoint (bad magic)");
  }
  const auto version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint '" + path.string() + "' has unsupported version " +
                    std::to_string(version));
  }
  CheckpointContainer c;
  try {
    c.header = nlohmann::json::parse(r.bytes("header"));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("checkpoint '" + path.string() + "' has a corrupt header: " + e.what());
  }
  const auto count = r.u32("record count");
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointRecord rec;
    rec.name = r.bytes("record name");
    const auto rank = r.u32("record rank");
    std::uint64_t total = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      rec.shape.push_back(static_cast<std::size_t>(r.u64("record dims")));
      total *= rec.shape.back();
    }
    if (total > r.remaining() / 8) {
      throw DataError("checkpoint '" + path.string() + "' is truncated in record '" + rec.name +
                      "'");
    }
    rec.values.resize(static_cast<std::size_t>(total));
    for (auto& v : rec.values) v = r.f64("record values");
    c.records.push_back(std::move(rec));
  }
  if (!r.at_end()) throw DataError("checkpoint '" + path.string() + "' has trailing bytes");
  return c;
}

void save_checkpoint(const std::filesystem::path& path, Network& net, const nlohmann::json& meta) {
  CheckpointContainer c;
  c.header = {{"topology", net.topology()}, {"meta", meta}};
  for (const auto& b : net.buffers()) {
    c.records.push_back({b.name, b.shape, {b.value.begin(), b.value.end()}});
  }
  write_container(path, c);
}

LoadedModel load_checkpoint(const std::filesystem::path& path) {
  auto c = read_container(path);
  if (!c.header.contains("topology")) {
    throw DataError("checkpoint '" + path.string() + "' has no topology");
  }
  LoadedModel m{Network::build(c.header.at("topology"), 0),
                c.header.value("meta", nlohmann::json::object())};
  std::map<std::string, const CheckpointRecord*> by_name;
  for (const auto& r : c.records) by_name[r.name] = &r;
  for (auto& b : m.net.buffers()) {
    auto it = by_name.find(b.name);
    if (it == by_name.end()) {
      throw DataError("checkpoint '" + path.string() + "' lacks tensor '" + b.name + "'");
    }
    if (it->second->shape != b.shape) {
      throw DataError("checkpoint tensor '" + b.name + "' has shape " +
                      shape_string(it->second->shape) + ", expected " + shape_string(b.shape));
    }
    std::copy(it->second->values.begin(), it->second->values.end(), b.value.begin());
  }
  m.net.set_frozen(true);
  return m;
}

}  // namespace cgnet
