#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "saor/diffcore/param_store.hpp"

// Binary checkpoint, little-endian:
//   "SAOR" | u32 version
//   u32 n_params | n_params x record
//   u32 n_adam   | n_adam x (record "<name>/m", record "<name>/v", u64 step)
//   u32 meta_len | meta_len bytes of UTF-8 metadata (JSON)
// record := u32 name_len | name | u32 rank | rank x u32 dim | f32 data

namespace saor::ad {

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class Writer {
 public:
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void bytes(const std::string& s) { raw(s.data(), s.size()); }
  template <typename T>
  void record(const std::string& name, const Shape& shape, const std::vector<T>& data) {
    u32(static_cast<std::uint32_t>(name.size()));
    bytes(name);
    u32(static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) u32(static_cast<std::uint32_t>(d));
    for (T v : data) {
      const float f = static_cast<float>(v);
      raw(&f, 4);
    }
  }
  const std::string& buffer() const { return buf_; }

 private:
  void raw(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  std::string buf_;
};

class Reader {
 public:
  Reader(std::string data, std::string path) : buf_(std::move(data)), path_(std::move(path)) {}
  std::uint32_t u32() { std::uint32_t v; raw(&v, 4); return v; }
  std::uint64_t u64() { std::uint64_t v; raw(&v, 8); return v; }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  struct Record {
    std::string name;
    Shape shape;
    std::vector<float> data;
  };
  Record record() {
    Record r;
    r.name = bytes(u32());
    const std::uint32_t rank = u32();
    if (rank > 8) fail("implausible rank");
    for (std::uint32_t i = 0; i < rank; ++i) r.shape.push_back(u32());
    r.data.resize(numel(r.shape));
    raw(r.data.data(), r.data.size() * 4);
    return r;
  }
  [[noreturn]] void fail(const std::string& why) const {
    throw IoError("checkpoint " + path_ + ": " + why);
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) fail("truncated file");
  }
  void raw(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::string buf_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <typename T>
std::string serialize_checkpoint(const ParamStore<T>& store, const std::string& meta = "{}") {
  detail::Writer w;
  w.bytes("SAOR");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(store.size()));
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& p = store.param(i);
    w.record(store.name(i), p.shape(), std::vector<T>(p.values().begin(), p.values().end()));
  }
  w.u32(static_cast<std::uint32_t>(store.size()));
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& st = store.adam(i);
    const auto& shape = store.param(i).shape();
    w.record(store.name(i) + "/m", shape, st.m);
    w.record(store.name(i) + "/v", shape, st.v);
    w.u64(st.step);
  }
  w.u32(static_cast<std::uint32_t>(meta.size()));
  w.bytes(meta);
  return w.buffer();
}

template <typename T>
void save_checkpoint(const ParamStore<T>& store, const std::string& path, const std::string& meta = "{}") {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open checkpoint for writing: " + path);
  const auto data = serialize_checkpoint(store, meta);
  f.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!f) throw IoError("failed writing checkpoint: " + path);
}

/// Loads values and optimizer state into an existing store with the same
/// architecture. Returns the metadata string.
template <typename T>
std::string load_checkpoint(ParamStore<T>& store, const std::string& path, bool load_optimizer = true) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path);
  std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  detail::Reader r(std::move(data), path);
  if (r.bytes(4) != "SAOR") r.fail("bad magic");
  if (const auto v = r.u32(); v != kCheckpointVersion) r.fail("unsupported version " + std::to_string(v));
  const std::uint32_t n = r.u32();
  if (n != store.size()) {
    r.fail("parameter count mismatch: file has " + std::to_string(n) + ", model has " +
           std::to_string(store.size()));
  }
  auto check = [&](const detail::Reader::Record& rec, std::size_t i, const std::string& suffix) {
    if (rec.name != store.name(i) + suffix) r.fail("expected parameter " + store.name(i) + suffix + ", found " + rec.name);
    if (rec.shape != store.param(i).shape()) {
      r.fail("shape mismatch for " + rec.name + ": file " + to_string(rec.shape) + " vs model " +
             to_string(store.param(i).shape()));
    }
  };
  for (std::uint32_t i = 0; i < n; ++i) {
    auto rec = r.record();
    check(rec, i, "");
    auto dst = store.param(i).mutable_values();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(rec.data[k]);
  }
  const std::uint32_t na = r.u32();
  if (na != n) r.fail("optimizer state count mismatch");
  for (std::uint32_t i = 0; i < na; ++i) {
    auto m = r.record();
    auto v = r.record();
    const std::uint64_t step = r.u64();
    check(m, i, "/m");
    check(v, i, "/v");
    if (load_optimizer) {
      auto& st = store.adam(i);
      st.m.assign(m.data.begin(), m.data.end());
      st.v.assign(v.data.begin(), v.data.end());
      st.step = step;
    }
  }
  return r.bytes(r.u32());
}

/// Metadata string of a checkpoint, without needing a matching store.
inline std::string read_checkpoint_meta(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path);
  std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  detail::Reader r(std::move(data), path);
  if (r.bytes(4) != "SAOR") r.fail("bad magic");
  if (const auto v = r.u32(); v != kCheckpointVersion) r.fail("unsupported version " + std::to_string(v));
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) r.record();
  const std::uint32_t na = r.u32();
  for (std::uint32_t i = 0; i < na; ++i) {
    r.record();
    r.record();
    r.u64();
  }
  return r.bytes(r.u32());
}

}  // namespace saor::ad
