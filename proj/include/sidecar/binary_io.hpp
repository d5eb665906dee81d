#pragma once

// Little helpers for the checksummed binary containers used by checkpoints
// and cached reference fields. Layout of every container:
//
//   8-byte magic | u32 version | payload ... | u64 FNV-1a of all prior bytes
//
// Integers and doubles are written in host byte order (little-endian on every
// supported target). Doubles are copied bit-for-bit.

#include "sidecar/diffcore.hpp"

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sidecar::io {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::uint64_t fnv1a(const char* data, std::size_t n) {
  std::uint64_t h = 14695981039346656037ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 1099511628211ull;
  }
  return h;
}

class Writer {
 public:
  Writer(std::string_view magic, std::uint32_t version) {
    if (magic.size() != 8) throw std::invalid_argument("magic must be 8 bytes");
    buf_.append(magic);
    put_u32(version);
  }

  void put_u32(std::uint32_t v) { raw(&v, sizeof v); }
  void put_u64(std::uint64_t v) { raw(&v, sizeof v); }
  void put_f64(double v) { raw(&v, sizeof v); }
  void put_string(const std::string& s) {
    put_u64(s.size());
    buf_.append(s);
  }
  void put_doubles(const std::vector<double>& v) {
    put_u64(v.size());
    if (!v.empty()) raw(v.data(), v.size() * sizeof(double));
  }
  void put_matrix(const diff::Matrix& m) {
    put_u64(static_cast<std::uint64_t>(m.rows()));
    put_u64(static_cast<std::uint64_t>(m.cols()));
    if (m.size() > 0) raw(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
  }

  /// Appends the checksum and writes atomically via a temporary file.
  void save(const std::string& path) const {
    std::string out = buf_;
    const std::uint64_t h = fnv1a(out.data(), out.size());
    out.append(reinterpret_cast<const char*>(&h), sizeof h);
    const std::string tmp = path + ".tmp";
    {
      std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
      if (!f) throw std::runtime_error("cannot open " + tmp + " for writing");
      f.write(out.data(), static_cast<std::streamsize>(out.size()));
      if (!f) throw std::runtime_error("write failed for " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
      throw std::runtime_error("cannot move " + tmp + " to " + path);
    }
  }

 private:
  void raw(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  std::string buf_;
};

class Reader {
 public:
  /// Loads the whole file and validates magic, version and checksum before
  /// any field is handed out.
  Reader(const std::string& path, std::string_view magic, std::uint32_t version) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    buf_.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
    if (buf_.size() < 8 + 4 + 8) throw FormatError(path + ": file too short");
    const std::size_t body = buf_.size() - 8;
    std::uint64_t stored = 0;
    std::memcpy(&stored, buf_.data() + body, 8);
    if (fnv1a(buf_.data(), body) != stored) throw FormatError(path + ": checksum mismatch");
    if (std::string_view(buf_.data(), 8) != magic) throw FormatError(path + ": wrong file type");
    end_ = body;
    pos_ = 8;
    const std::uint32_t v = get_u32();
    if (v != version) {
      throw FormatError(path + ": unsupported version " + std::to_string(v) + " (expected " +
                        std::to_string(version) + ")");
    }
  }

  std::uint32_t get_u32() {
    std::uint32_t v;
    raw(&v, sizeof v);
    return v;
  }
  std::uint64_t get_u64() {
    std::uint64_t v;
    raw(&v, sizeof v);
    return v;
  }
  double get_f64() {
    double v;
    raw(&v, sizeof v);
    return v;
  }
  std::string get_string() {
    const auto n = get_u64();
    check(n);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::vector<double> get_doubles() {
    const auto n = get_u64();
    check(n * sizeof(double));
    std::vector<double> v(n);
    if (n > 0) raw(v.data(), n * sizeof(double));
    return v;
  }
  diff::Matrix get_matrix() {
    const auto r = get_u64();
    const auto c = get_u64();
    check(r * c * sizeof(double));
    diff::Matrix m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
    if (m.size() > 0) raw(m.data(), r * c * sizeof(double));
    return m;
  }
  bool at_end() const { return pos_ == end_; }

 private:
  void check(std::size_t n) const {
    if (pos_ + n > end_ || pos_ + n < pos_) throw FormatError("truncated payload");
  }
  void raw(void* p, std::size_t n) {
    check(n);
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }

  std::string buf_;
  std::size_t pos_ = 0;
  std::size_t end_ = 0;
};

}  // namespace sidecar::io
