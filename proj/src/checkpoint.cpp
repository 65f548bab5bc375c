#include "infobottle/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace infobottle {

namespace {

constexpr char kMagic[4] = {'I', 'B', 'R', 'T'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename T>
  void uint(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    uint(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t>& buffer() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& in, std::size_t limit) : in_(in), limit_(limit) {}

  void need(std::size_t n, const char* what) {
    if (pos_ + n > limit_) {
      throw CheckpointError(CheckpointError::Kind::truncated,
                            std::string("checkpoint truncated while reading ") + what + " at offset " +
                                std::to_string(pos_));
    }
  }
  template <typename T>
  T uint(const char* what) {
    need(sizeof(T), what);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(in_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }
  double f64() { return std::bit_cast<double>(uint<std::uint64_t>("tensor data")); }
  std::string str(const char* what) {
    const auto n = uint<std::uint32_t>(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::vector<std::uint8_t>& in_;
  std::size_t limit_;
  std::size_t pos_ = 0;
};

}  // namespace

std::uint32_t crc32_of(const std::vector<std::uint8_t>& bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

std::uint32_t crc32_of_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::io, "cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return crc32_of(bytes);
}

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t.tensor;
  return nullptr;
}

const Tensor& Checkpoint::at(const std::string& name) const {
  if (const Tensor* t = find(name)) return *t;
  require({name});
  throw std::logic_error("unreachable");
}

void Checkpoint::require(const std::vector<std::string>& names) const {
  std::string missing;
  for (const auto& n : names)
    if (!find(n)) missing += (missing.empty() ? "" : ", ") + n;
  if (missing.empty()) return;
  std::string expected;
  for (const auto& n : names) expected += (expected.empty() ? "" : ", ") + n;
  throw CheckpointError(CheckpointError::Kind::missing_tensor,
                        "checkpoint is missing tensors [" + missing + "]; expected [" + expected + "]");
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.bytes(kMagic, 4);
  w.uint(Checkpoint::kVersion);
  w.uint(ckpt.step);
  w.str(ckpt.config);
  w.uint(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& nt : ckpt.tensors) {
    w.str(nt.name);
    w.uint(static_cast<std::uint32_t>(nt.tensor.rank()));
    for (auto d : nt.tensor.shape) w.uint(static_cast<std::uint64_t>(d));
    for (double v : nt.tensor.data) w.f64(v);
  }
  const std::uint32_t crc = crc32_of(w.buffer());
  w.uint(crc);
  return std::move(w.buffer());
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    if (bytes.size() < 4) throw CheckpointError(CheckpointError::Kind::truncated, "checkpoint truncated at offset 0");
    throw CheckpointError(CheckpointError::Kind::bad_magic, "not a checkpoint: bad magic bytes");
  }
  const std::size_t body = bytes.size() - 4;
  {
    std::vector<std::uint8_t> head(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(body));
    std::uint32_t stored = 0;
    for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(bytes[body + i]) << (8 * i);
    Reader r(bytes, body);
    r.need(8, "header");
    r.uint<std::uint32_t>("magic");
    const auto version = r.uint<std::uint32_t>("version");
    if (version != Checkpoint::kVersion) {
      throw CheckpointError(CheckpointError::Kind::version_mismatch,
                            "checkpoint version " + std::to_string(version) + " unsupported (expected " +
                                std::to_string(Checkpoint::kVersion) + ")");
    }
    if (crc32_of(head) != stored) throw CheckpointError(CheckpointError::Kind::checksum, "checkpoint checksum mismatch");
  }
  Reader r(bytes, body);
  r.uint<std::uint32_t>("magic");
  r.uint<std::uint32_t>("version");
  Checkpoint ckpt;
  ckpt.step = r.uint<std::uint64_t>("step");
  ckpt.config = r.str("config");
  const auto count = r.uint<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor nt;
    nt.name = r.str("tensor name");
    const auto rank = r.uint<std::uint32_t>("rank");
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(static_cast<std::size_t>(r.uint<std::uint64_t>("dims")));
    const std::size_t n = numel(shape);
    r.need(n * 8, "tensor data");
    std::vector<double> data(n);
    for (auto& v : data) v = r.f64();
    nt.tensor = Tensor(std::move(shape), std::move(data));
    ckpt.tensors.push_back(std::move(nt));
  }
  if (r.pos() != body) {
    throw CheckpointError(CheckpointError::Kind::truncated,
                          "trailing bytes after tensor records at offset " + std::to_string(r.pos()));
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError(CheckpointError::Kind::io, "cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(CheckpointError::Kind::io, "write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::io, "cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace infobottle
