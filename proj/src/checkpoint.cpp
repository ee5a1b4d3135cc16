#include "ssgan/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace ssgan {

namespace {

void put_u32(std::ofstream& f, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ofstream& f, uint64_t v) {
  put_u32(f, static_cast<uint32_t>(v & 0xffffffffu));
  put_u32(f, static_cast<uint32_t>(v >> 32));
}

bool get_u32(std::ifstream& f, uint32_t& v) {
  unsigned char b[4];
  if (!f.read(reinterpret_cast<char*>(b), 4)) return false;
  v = static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
      (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
  return true;
}

bool get_u64(std::ifstream& f, uint64_t& v) {
  uint32_t lo, hi;
  if (!get_u32(f, lo) || !get_u32(f, hi)) return false;
  v = static_cast<uint64_t>(lo) | (static_cast<uint64_t>(hi) << 32);
  return true;
}

}  // namespace

void save_store(const TensorStore& store, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  require(f.good(), ErrorCode::io_error, "cannot open for write: " + path);
  f.write("SSGN", 4);
  put_u32(f, 1);  // version
  put_u32(f, static_cast<uint32_t>(store.entries.size()));
  for (const auto& [name, e] : store.entries) {
    put_u32(f, static_cast<uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    f.put(static_cast<char>(e.dtype));
    put_u32(f, static_cast<uint32_t>(e.shape.size()));
    for (int d : e.shape) put_u32(f, static_cast<uint32_t>(d));
    if (e.dtype == 0) {
      for (double x : e.data) {
        float fx = static_cast<float>(x);
        uint32_t bits;
        std::memcpy(&bits, &fx, 4);
        put_u32(f, bits);
      }
    } else {
      for (double x : e.data) {
        uint64_t bits;
        std::memcpy(&bits, &x, 8);
        put_u64(f, bits);
      }
    }
  }
  require(f.good(), ErrorCode::io_error, "write failed: " + path);
}

TensorStore load_store(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), ErrorCode::io_error, "cannot open: " + path);
  char magic[4];
  require(static_cast<bool>(f.read(magic, 4)), ErrorCode::truncated_payload,
          "checkpoint too short");
  require(std::memcmp(magic, "SSGN", 4) == 0, ErrorCode::bad_magic,
          "bad magic: not an SSGN checkpoint");
  uint32_t version, count;
  require(get_u32(f, version) && get_u32(f, count), ErrorCode::truncated_payload,
          "checkpoint header truncated");
  require(version == 1, ErrorCode::bad_magic, "unsupported SSGN version");
  TensorStore store;
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t name_len;
    require(get_u32(f, name_len) && name_len <= 4096,
            ErrorCode::truncated_payload, "checkpoint name truncated");
    std::string name(name_len, '\0');
    require(static_cast<bool>(f.read(name.data(), name_len)),
            ErrorCode::truncated_payload, "checkpoint name truncated");
    int dtype = f.get();
    require(dtype == 0 || dtype == 1, ErrorCode::dimension_mismatch,
            "checkpoint dtype tag invalid");
    uint32_t rank;
    require(get_u32(f, rank) && rank <= 8, ErrorCode::dimension_mismatch,
            "checkpoint rank invalid");
    TensorStore::Entry e;
    e.dtype = dtype;
    int64_t numel = 1;
    for (uint32_t r = 0; r < rank; ++r) {
      uint32_t d;
      require(get_u32(f, d) && d > 0 && d <= (1u << 28),
              ErrorCode::dimension_mismatch, "checkpoint dim invalid");
      e.shape.push_back(static_cast<int>(d));
      numel *= d;
    }
    e.data.resize(static_cast<size_t>(numel));
    for (auto& x : e.data) {
      if (dtype == 0) {
        uint32_t bits;
        require(get_u32(f, bits), ErrorCode::truncated_payload,
                "checkpoint payload truncated");
        float fx;
        std::memcpy(&fx, &bits, 4);
        x = static_cast<double>(fx);
      } else {
        uint64_t bits;
        require(get_u64(f, bits), ErrorCode::truncated_payload,
                "checkpoint payload truncated");
        std::memcpy(&x, &bits, 8);
      }
    }
    store.entries[name] = std::move(e);
  }
  return store;
}

}  // namespace ssgan
