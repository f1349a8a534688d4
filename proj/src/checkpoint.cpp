#include "metafew/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace metafew {

namespace {

void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {(unsigned char)(v & 0xff), (unsigned char)((v >> 8) & 0xff),
                        (unsigned char)((v >> 16) & 0xff), (unsigned char)((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, uint64_t v) {
  put_u32(os, uint32_t(v & 0xffffffffULL));
  put_u32(os, uint32_t(v >> 32));
}

uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw IoError("checkpoint: truncated file");
  return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) | (uint32_t(b[3]) << 24);
}

uint64_t get_u64(std::istream& is) {
  uint64_t lo = get_u32(is);
  uint64_t hi = get_u32(is);
  return lo | (hi << 32);
}

void put_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
  put_u32(os, uint32_t(name.size()));
  os.write(name.data(), std::streamsize(name.size()));
  put_u32(os, uint32_t(t.rank()));
  for (int64_t d : t.shape()) put_u32(os, uint32_t(d));
  for (int64_t i = 0; i < t.numel(); ++i) {
    float f = float(t.at(size_t(i)));
    put_u32(os, std::bit_cast<uint32_t>(f));
  }
}

std::pair<std::string, Tensor> get_tensor(std::istream& is) {
  uint32_t name_len = get_u32(is);
  if (name_len > 4096) throw IoError("checkpoint: implausible name length");
  std::string name(name_len, '\0');
  is.read(name.data(), name_len);
  if (!is) throw IoError("checkpoint: truncated file");
  uint32_t rank = get_u32(is);
  if (rank > 8) throw IoError("checkpoint: implausible tensor rank");
  Shape shape;
  for (uint32_t i = 0; i < rank; ++i) shape.push_back(int64_t(get_u32(is)));
  Tensor t = Tensor::zeros(shape, Dtype::f32);
  for (int64_t i = 0; i < t.numel(); ++i)
    t.set(size_t(i), double(std::bit_cast<float>(get_u32(is))));
  return {name, t};
}

void put_set(std::ostream& os, const ParamSet& set) {
  put_u32(os, uint32_t(set.size()));
  for (auto& kv : set) put_tensor(os, kv.first, kv.second);
}

ParamSet get_set(std::istream& is) {
  uint32_t n = get_u32(is);
  ParamSet out;
  for (uint32_t i = 0; i < n; ++i) {
    auto [name, t] = get_tensor(is);
    out.add(name, std::move(t));
  }
  return out;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("checkpoint: cannot write " + path);
  os.write(Checkpoint::kMagic, 4);
  put_u32(os, ck.version);
  put_u64(os, ck.config_hash);
  put_u64(os, uint64_t(ck.epoch));
  put_set(os, ck.tensors);
  put_set(os, ck.opt_state);
  if (!os) throw IoError("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot read " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, Checkpoint::kMagic, 4) != 0)
    throw IoError("checkpoint: bad magic in " + path + " (expected MFGE)");
  Checkpoint ck;
  ck.version = get_u32(is);
  if (ck.version != Checkpoint::kVersion)
    throw IoError("checkpoint: unsupported version " + std::to_string(ck.version) + " in " + path);
  ck.config_hash = get_u64(is);
  ck.epoch = int64_t(get_u64(is));
  ck.tensors = get_set(is);
  ck.opt_state = get_set(is);
  return ck;
}

}  // namespace metafew
