#include "chanopt/snapshot.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "chanopt/errors.hpp"

namespace chanopt {

namespace {

const char kHeader[] = "chanopt-snapshot v1 axes=kh,kw,in,out payload=f32le\n";

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) {
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
}

void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

void put_f64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}

// Sequential reader over an in-memory file image, tracking the byte offset
// for error reporting.
class Cursor {
 public:
  Cursor(const std::string& data, const std::string& path)
      : data_(data), path_(path) {}

  std::size_t pos() const { return pos_; }

  void need(std::size_t n, const char* what) {
    if (pos_ + n > data_.size()) {
      throw FormatError("snapshot '" + path_ + "': truncated while reading " +
                            what,
                        static_cast<long long>(pos_));
    }
  }

  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v = static_cast<std::uint8_t>(data_[pos_]) |
                      (static_cast<std::uint16_t>(
                           static_cast<std::uint8_t>(data_[pos_ + 1]))
                       << 8);
    pos_ += 2;
    return v;
  }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) {
      v = (v << 8) | static_cast<std::uint8_t>(data_[pos_ + i]);
    }
    pos_ += 4;
    return v;
  }

  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) {
      v = (v << 8) | static_cast<std::uint8_t>(data_[pos_ + i]);
    }
    pos_ += 8;
    return v;
  }

  float f32(const char* what) {
    std::uint32_t bits = u32(what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }

  double f64(const char* what) {
    std::uint64_t bits = u64(what);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }

  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool at_end() const { return pos_ == data_.size(); }

 private:
  const std::string& data_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

const ConvTensor& SnapshotArchive::tensor(int epoch,
                                          const std::string& layer) const {
  if (epoch < 0 || epoch >= epoch_count()) {
    throw IncompatibilityError("snapshot archive: epoch " +
                               std::to_string(epoch) + " out of range (have " +
                               std::to_string(epoch_count()) + ")");
  }
  auto it = epochs[epoch].find(layer);
  if (it == epochs[epoch].end()) {
    throw IncompatibilityError("snapshot archive: layer '" + layer +
                               "' not present");
  }
  return it->second;
}

ConvTensor quantize_to_f32(const ConvTensor& t) {
  std::vector<double> q(t.values().size());
  for (std::size_t i = 0; i < q.size(); ++i) {
    q[i] = static_cast<double>(static_cast<float>(t.values()[i]));
  }
  return ConvTensor(t.dim(1), t.dim(2), t.dim(3), t.dim(4), std::move(q));
}

void write_snapshot_archive(const SnapshotArchive& a, const std::string& path) {
  if (a.layer_names.size() != a.layer_dims.size()) {
    throw std::invalid_argument(
        "write_snapshot_archive: manifest names/dims mismatch");
  }
  if (a.train_loss.size() != a.epochs.size()) {
    throw std::invalid_argument(
        "write_snapshot_archive: loss entries must match epoch count");
  }
  std::string out(kHeader);
  put_u32(out, static_cast<std::uint32_t>(a.epochs.size()));
  put_u32(out, static_cast<std::uint32_t>(a.layer_names.size()));
  for (const auto& name : a.layer_names) {
    if (name.empty() || name.size() > 0xffff) {
      throw std::invalid_argument("write_snapshot_archive: bad layer name '" +
                                  name + "'");
    }
    auto it = a.layer_dims.find(name);
    if (it == a.layer_dims.end()) {
      throw std::invalid_argument(
          "write_snapshot_archive: layer '" + name + "' missing from dims map");
    }
    put_u16(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    for (int d : it->second) put_u32(out, static_cast<std::uint32_t>(d));
  }
  for (double loss : a.train_loss) put_f64(out, loss);
  for (std::size_t e = 0; e < a.epochs.size(); ++e) {
    for (const auto& name : a.layer_names) {
      auto it = a.epochs[e].find(name);
      if (it == a.epochs[e].end()) {
        throw std::invalid_argument("write_snapshot_archive: epoch " +
                                    std::to_string(e) + " missing layer '" +
                                    name + "'");
      }
      const ConvTensor& t = it->second;
      if (t.dims() != a.layer_dims.at(name)) {
        throw std::invalid_argument("write_snapshot_archive: epoch " +
                                    std::to_string(e) + " layer '" + name +
                                    "' dims differ from manifest");
      }
      for (double v : t.values()) put_f32(out, static_cast<float>(v));
    }
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) {
    throw std::runtime_error("write_snapshot_archive: cannot open '" + path +
                             "' for writing");
  }
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) {
    throw std::runtime_error("write_snapshot_archive: write failed for '" +
                             path + "'");
  }
}

SnapshotArchive read_snapshot_archive(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) {
    throw FormatError("snapshot '" + path + "': cannot open file");
  }
  std::string data((std::istreambuf_iterator<char>(f)),
                   std::istreambuf_iterator<char>());
  Cursor cur(data, path);

  const std::string header = cur.bytes(sizeof(kHeader) - 1, "header");
  if (header != kHeader) {
    throw FormatError("snapshot '" + path + "': unrecognized header", 0);
  }

  SnapshotArchive a;
  const std::uint32_t epoch_count = cur.u32("epoch count");
  const std::uint32_t layer_count = cur.u32("layer count");
  for (std::uint32_t k = 0; k < layer_count; ++k) {
    const std::uint16_t len = cur.u16("layer name length");
    const long long name_pos = static_cast<long long>(cur.pos());
    std::string name = cur.bytes(len, "layer name");
    if (name.empty() || a.layer_dims.count(name)) {
      throw FormatError("snapshot '" + path + "': empty or duplicate layer name",
                        name_pos);
    }
    std::array<int, 4> dims{};
    for (int i = 0; i < 4; ++i) {
      const long long dim_pos = static_cast<long long>(cur.pos());
      const std::uint32_t d = cur.u32("layer dims");
      if (d < 1 || d > (1u << 24)) {
        throw FormatError("snapshot '" + path + "': implausible dim for '" +
                              name + "'",
                          dim_pos);
      }
      dims[i] = static_cast<int>(d);
    }
    a.layer_names.push_back(name);
    a.layer_dims[name] = dims;
  }
  a.train_loss.resize(epoch_count);
  for (std::uint32_t e = 0; e < epoch_count; ++e) {
    a.train_loss[e] = cur.f64("training loss");
  }
  a.epochs.resize(epoch_count);
  for (std::uint32_t e = 0; e < epoch_count; ++e) {
    for (const auto& name : a.layer_names) {
      const auto& d = a.layer_dims[name];
      const std::size_t count =
          static_cast<std::size_t>(d[0]) * d[1] * d[2] * d[3];
      std::vector<double> vals(count);
      for (std::size_t i = 0; i < count; ++i) {
        const long long val_pos = static_cast<long long>(cur.pos());
        const float v = cur.f32("weight payload");
        if (!std::isfinite(v)) {
          throw FormatError("snapshot '" + path + "': non-finite weight in '" +
                                name + "'",
                            val_pos);
        }
        vals[i] = static_cast<double>(v);
      }
      a.epochs[e].emplace(name,
                          ConvTensor(d[0], d[1], d[2], d[3], std::move(vals)));
    }
  }
  if (!cur.at_end()) {
    throw FormatError("snapshot '" + path + "': trailing bytes after payload",
                      static_cast<long long>(cur.pos()));
  }
  return a;
}

}  // namespace chanopt
