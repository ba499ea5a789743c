#include "dmad/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace dmad {

namespace {

void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw FormatError("checkpoint truncated");
  }
  std::uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = std::uint16_t(bytes_[pos_]) | std::uint16_t(bytes_[pos_ + 1]) << 8;
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void Checkpoint::put(std::string name, std::vector<std::uint32_t> dims, std::vector<float> values) {
  if (name.size() > 0xffff) throw FormatError("checkpoint entry name too long");
  if (dims.size() > 0xff) throw FormatError("checkpoint entry rank too large");
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  if (n != values.size()) throw ShapeError("checkpoint entry " + name + ": dims/data mismatch");
  for (auto& e : entries_) {
    if (e.name == name) {
      e.dims = std::move(dims);
      e.values = std::move(values);
      return;
    }
  }
  entries_.push_back({std::move(name), std::move(dims), std::move(values)});
}

bool Checkpoint::contains(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return true;
  return false;
}

const CheckpointEntry& Checkpoint::at(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e;
  throw FormatError("checkpoint has no entry " + name);
}

std::vector<std::uint8_t> Checkpoint::encode() const {
  std::vector<std::uint8_t> out{'D', 'M', 'A', 'D'};
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(entries_.size()));
  for (const auto& e : entries_) {
    put_u16(out, static_cast<std::uint16_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    put_u8(out, static_cast<std::uint8_t>(e.dims.size()));
    for (auto d : e.dims) put_u32(out, d);
    for (float f : e.values) put_u32(out, std::bit_cast<std::uint32_t>(f));
  }
  return out;
}

Checkpoint Checkpoint::decode(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (r.str(4) != "DMAD") throw FormatError("bad checkpoint magic");
  const auto version = r.u32();
  if (version != kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto count = r.u32();
  Checkpoint ckpt;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.name = r.str(r.u16());
    const auto rank = r.u8();
    std::size_t n = 1;
    for (int d = 0; d < rank; ++d) {
      e.dims.push_back(r.u32());
      n *= e.dims.back();
    }
    r.need(n * 4);
    e.values.resize(n);
    for (auto& f : e.values) f = std::bit_cast<float>(r.u32());
    ckpt.entries_.push_back(std::move(e));
  }
  if (!r.done()) throw FormatError("trailing bytes after checkpoint entries");
  return ckpt;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  const auto bytes = encode();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode(bytes);
}

}  // namespace dmad
