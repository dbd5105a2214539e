#include "hseg/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "hseg/util.hpp"

namespace hseg {

namespace {

constexpr char kMagic[5] = {'H', 'S', 'E', 'G', '1'};

template <typename T>
void write_pod(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in, const std::string& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw Error("truncated checkpoint: " + path);
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const std::vector<NamedArray>& arrays) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint: " + path);
  out.write(kMagic, sizeof(kMagic));
  write_pod<uint8_t>(out, static_cast<uint8_t>(sizeof(real_t)));
  write_pod<uint32_t>(out, static_cast<uint32_t>(arrays.size()));
  for (const auto& a : arrays) {
    if (shape_numel(a.shape) != static_cast<int64_t>(a.data.size())) {
      throw Error("checkpoint array '" + a.name + "' has inconsistent shape");
    }
    write_pod<uint32_t>(out, static_cast<uint32_t>(a.name.size()));
    out.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
    write_pod<uint32_t>(out, static_cast<uint32_t>(a.shape.size()));
    for (int d : a.shape) write_pod<int64_t>(out, d);
    out.write(reinterpret_cast<const char*>(a.data.data()),
              static_cast<std::streamsize>(a.data.size() * sizeof(real_t)));
  }
  if (!out) throw Error("write failed: " + path);
}

std::vector<NamedArray> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint: " + path);
  char magic[5];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw Error("not a checkpoint file (bad magic): " + path);
  }
  uint8_t real_size = read_pod<uint8_t>(in, path);
  if (real_size != sizeof(real_t)) {
    throw Error(strprintf("checkpoint scalar width %d does not match this build (%zu): %s",
                          static_cast<int>(real_size), sizeof(real_t), path.c_str()));
  }
  uint32_t count = read_pod<uint32_t>(in, path);
  std::vector<NamedArray> arrays;
  arrays.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    uint32_t nlen = read_pod<uint32_t>(in, path);
    a.name.resize(nlen);
    in.read(a.name.data(), nlen);
    uint32_t ndim = read_pod<uint32_t>(in, path);
    a.shape.resize(ndim);
    int64_t numel = 1;
    for (uint32_t d = 0; d < ndim; ++d) {
      int64_t ext = read_pod<int64_t>(in, path);
      a.shape[d] = static_cast<int>(ext);
      numel *= ext;
    }
    if (numel < 0) throw Error("corrupt checkpoint: " + path);
    a.data.resize(static_cast<size_t>(numel));
    in.read(reinterpret_cast<char*>(a.data.data()),
            static_cast<std::streamsize>(a.data.size() * sizeof(real_t)));
    if (!in) throw Error("truncated checkpoint: " + path);
    arrays.push_back(std::move(a));
  }
  return arrays;
}

const NamedArray* find_array(const std::vector<NamedArray>& arrays, const std::string& name) {
  for (const auto& a : arrays) {
    if (a.name == name) return &a;
  }
  return nullptr;
}

}  // namespace hseg
