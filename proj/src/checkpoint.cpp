#include "rapnet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "rapnet/data_io.hpp"
#include "rapnet/error.hpp"

namespace rapnet::ckpt {

namespace {

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void bytes(const std::string& s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (pos_ + n > b_.size()) {
      throw FormatError(std::string("checkpoint truncated while reading ") + what, pos_);
    }
  }

  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const std::string& config_json,
                                            const nn::ParameterSet& params) {
  Writer w;
  w.bytes("RAPC");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(config_json.size()));
  w.bytes(config_json);
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params.items()) {
    w.u32(static_cast<std::uint32_t>(p.name.size()));
    w.bytes(p.name);
    w.u32(static_cast<std::uint32_t>(p.value.rank()));
    for (auto e : p.value.shape()) w.u32(static_cast<std::uint32_t>(e));
    for (double v : p.value.data()) w.u64(std::bit_cast<std::uint64_t>(v));
  }
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  if (r.str(4, "magic") != "RAPC") throw FormatError("bad magic, expected RAPC", 0);
  const auto version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
  }
  Checkpoint out;
  const auto cfg_len = r.u32("config length");
  out.config_json = r.str(cfg_len, "config");
  const auto count = r.u32("parameter count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.u32("name length");
    std::string name = r.str(name_len, "name");
    const auto rank = r.u32("rank");
    if (rank == 0 || rank > 8) {
      throw FormatError("implausible rank " + std::to_string(rank) + " for " + name,
                        r.pos() - 4);
    }
    nn::Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto e = r.u32("extent");
      if (e == 0) throw FormatError("zero extent for " + name, r.pos() - 4);
      shape.push_back(e);
    }
    std::vector<double> data(nn::shape_numel(shape));
    for (auto& v : data) v = std::bit_cast<double>(r.u64("payload"));
    out.params.add(std::move(name), nn::Tensor(std::move(shape), std::move(data)));
  }
  if (!r.done()) throw FormatError("trailing bytes after checkpoint", r.pos());
  return out;
}

void write_checkpoint(const std::filesystem::path& path, const std::string& config_json,
                      const nn::ParameterSet& params) {
  const auto bytes = encode_checkpoint(config_json, params);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  const std::string raw = io::read_text_file(path);
  try {
    return decode_checkpoint(std::span<const std::uint8_t>(
        reinterpret_cast<const std::uint8_t*>(raw.data()), raw.size()));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset());
  }
}

}  // namespace rapnet::ckpt
