#pragma once

#include <cstring>
#include <fstream>
#include <map>

#include "uwm/param.hpp"

namespace uwm {

// Flat record container, little-endian, documented in docs/checkpoint-format.md:
//   magic "UWCK" | u32 version | u64 record_count | records...
// record: u32 name_len | name | u8 dtype | u32 ndim | i64 dims[ndim] |
//         u64 payload_bytes | payload
enum class RecDtype : uint8_t { F32 = 0, F64 = 1, U8 = 2, U64 = 3 };

inline size_t dtype_size(RecDtype d) {
  switch (d) {
    case RecDtype::F32: return 4;
    case RecDtype::F64: return 8;
    case RecDtype::U8: return 1;
    default: return 8;
  }
}

struct Record {
  std::string name;
  RecDtype dtype = RecDtype::F64;
  Shape shape;
  std::vector<uint8_t> bytes;
};

class Container {
 public:
  static constexpr uint32_t kVersion = 1;

  bool has(const std::string& name) const { return index_.count(name) != 0; }
  const std::vector<Record>& records() const { return recs_; }

  const Record& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw DataError("checkpoint: missing record '" + name + "'");
    return recs_[it->second];
  }

  void put(Record r) {
    auto it = index_.find(r.name);
    if (it != index_.end()) {
      recs_[it->second] = std::move(r);
      return;
    }
    index_[r.name] = recs_.size();
    recs_.push_back(std::move(r));
  }

  template <class T>
  void put_values(const std::string& name, const Shape& shape, const std::vector<T>& v) {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    Record r;
    r.name = name;
    r.dtype = std::is_same_v<T, float> ? RecDtype::F32 : RecDtype::F64;
    r.shape = shape;
    r.bytes.resize(v.size() * sizeof(T));
    std::memcpy(r.bytes.data(), v.data(), r.bytes.size());
    put(std::move(r));
  }

  template <class T>
  std::vector<T> get_values(const std::string& name) const {
    const Record& r = get(name);
    const RecDtype want = std::is_same_v<T, float> ? RecDtype::F32 : RecDtype::F64;
    if (r.dtype != want)
      throw DataError("checkpoint: record '" + name + "' has the wrong dtype");
    std::vector<T> v(r.bytes.size() / sizeof(T));
    std::memcpy(v.data(), r.bytes.data(), r.bytes.size());
    return v;
  }

  void put_u64(const std::string& name, const std::vector<uint64_t>& v) {
    Record r;
    r.name = name;
    r.dtype = RecDtype::U64;
    r.shape = {static_cast<int64_t>(v.size())};
    r.bytes.resize(v.size() * 8);
    std::memcpy(r.bytes.data(), v.data(), r.bytes.size());
    put(std::move(r));
  }

  std::vector<uint64_t> get_u64(const std::string& name) const {
    const Record& r = get(name);
    if (r.dtype != RecDtype::U64) throw DataError("checkpoint: record '" + name + "' is not u64");
    std::vector<uint64_t> v(r.bytes.size() / 8);
    std::memcpy(v.data(), r.bytes.data(), r.bytes.size());
    return v;
  }

  void put_text(const std::string& name, const std::string& text) {
    Record r;
    r.name = name;
    r.dtype = RecDtype::U8;
    r.shape = {static_cast<int64_t>(text.size())};
    r.bytes.assign(text.begin(), text.end());
    put(std::move(r));
  }

  std::string get_text(const std::string& name) const {
    const Record& r = get(name);
    if (r.dtype != RecDtype::U8) throw DataError("checkpoint: record '" + name + "' is not text");
    return std::string(r.bytes.begin(), r.bytes.end());
  }

  void write(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("checkpoint: cannot write " + path);
    f.write("UWCK", 4);
    write_pod<uint32_t>(f, kVersion);
    write_pod<uint64_t>(f, recs_.size());
    for (const auto& r : recs_) {
      write_pod<uint32_t>(f, static_cast<uint32_t>(r.name.size()));
      f.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
      write_pod<uint8_t>(f, static_cast<uint8_t>(r.dtype));
      write_pod<uint32_t>(f, static_cast<uint32_t>(r.shape.size()));
      for (int64_t d : r.shape) write_pod<int64_t>(f, d);
      write_pod<uint64_t>(f, r.bytes.size());
      f.write(reinterpret_cast<const char*>(r.bytes.data()),
              static_cast<std::streamsize>(r.bytes.size()));
    }
    if (!f) throw DataError("checkpoint: short write to " + path);
  }

  static Container read(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("checkpoint: cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "UWCK", 4) != 0)
      throw DataError("checkpoint: bad magic in " + path);
    const auto version = read_pod<uint32_t>(f);
    if (version != kVersion)
      throw DataError("checkpoint: unsupported format version " + std::to_string(version));
    const auto count = read_pod<uint64_t>(f);
    Container c;
    for (uint64_t i = 0; i < count; ++i) {
      Record r;
      const auto nlen = read_pod<uint32_t>(f);
      r.name.resize(nlen);
      f.read(r.name.data(), nlen);
      r.dtype = static_cast<RecDtype>(read_pod<uint8_t>(f));
      const auto ndim = read_pod<uint32_t>(f);
      r.shape.resize(ndim);
      for (auto& d : r.shape) d = read_pod<int64_t>(f);
      const auto plen = read_pod<uint64_t>(f);
      const int64_t expect = numel(r.shape) * static_cast<int64_t>(dtype_size(r.dtype));
      if (static_cast<int64_t>(plen) != expect)
        throw DataError("checkpoint: record '" + r.name + "' payload size mismatch");
      r.bytes.resize(plen);
      f.read(reinterpret_cast<char*>(r.bytes.data()), static_cast<std::streamsize>(plen));
      if (!f) throw DataError("checkpoint: truncated file " + path);
      c.put(std::move(r));
    }
    return c;
  }

 private:
  template <class P>
  static void write_pod(std::ofstream& f, P v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(P));
  }
  template <class P>
  static P read_pod(std::ifstream& f) {
    P v{};
    f.read(reinterpret_cast<char*>(&v), sizeof(P));
    if (!f) throw DataError("checkpoint: truncated file");
    return v;
  }

  std::vector<Record> recs_;
  std::map<std::string, size_t> index_;
};

// parameters <-> container

template <class T>
void save_params(const ParamRegistry<T>& reg, Container& c) {
  for (const auto& p : reg.items()) c.put_values(p->name, p->value.shape(), p->value.data());
}

// Every registered parameter must be present with a matching shape and dtype;
// all mismatches are collected into one report.
template <class T>
void load_params(ParamRegistry<T>& reg, const Container& c) {
  std::string report;
  for (const auto& p : reg.items()) {
    if (!c.has(p->name)) {
      report += "  missing: " + p->name + " " + shape_str(p->value.shape()) + "\n";
      continue;
    }
    const Record& r = c.get(p->name);
    if (r.shape != p->value.shape()) {
      report += "  shape mismatch: " + p->name + " checkpoint " + shape_str(r.shape) +
                " vs model " + shape_str(p->value.shape()) + "\n";
      continue;
    }
    const RecDtype want = std::is_same_v<T, float> ? RecDtype::F32 : RecDtype::F64;
    if (r.dtype != want) {
      report += "  dtype mismatch: " + p->name + "\n";
      continue;
    }
  }
  if (!report.empty()) throw ConfigError("checkpoint does not match the model:\n" + report);
  for (auto& p : reg.items()) p->value.mut_data() = c.get_values<T>(p->name);
}

}  // namespace uwm
