#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kvs/tensor.hpp"

// Little-endian binary file plumbing used by every artifact format. Doubles
// travel as their IEEE-754 bit patterns, so save/load round-trips are
// byte-exact. Each file kind carries a distinct magic so that a mismatched
// path fails with a structured error instead of garbage.

namespace kvs {

class BinWriter {
 public:
  void u8(std::uint8_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void i64(std::int64_t v);
  void f64(double v);
  void f64_span(const double* p, std::size_t count);
  void vec(const Vector& v);      // dim then payload
  void mat(const Matrix& m);      // rows, cols then payload
  void str(const std::string& s); // u32 length then bytes

  const std::vector<std::uint8_t>& bytes() const { return buf_; }
  void save(const std::string& path) const;

 private:
  std::vector<std::uint8_t> buf_;
};

class BinReader {
 public:
  explicit BinReader(std::vector<std::uint8_t> bytes);
  static BinReader from_file(const std::string& path);

  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  std::int64_t i64();
  double f64();
  void f64_span(double* p, std::size_t count);
  Vector vec();
  Matrix mat();
  std::string str();

  bool exhausted() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const;
  std::vector<std::uint8_t> buf_;
  std::size_t pos_ = 0;
};

// Reads the leading magic and errors with the file-kind name when it does not
// match, e.g. "model checkpoint: bad magic in <path>".
void expect_magic(BinReader& r, std::uint32_t magic, const std::string& kind, const std::string& path);

// FNV-1a over raw bytes; the accumulator form lets callers fold in several
// fields without materialising one buffer.
struct Fnv1a {
  std::uint64_t h = 14695981039346656037ULL;
  void bytes(const void* p, std::size_t n);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void f64_span(const double* p, std::size_t count);
};

std::uint64_t fnv1a(const void* p, std::size_t n);

// Filesystem helpers for run directories.
void ensure_dir(const std::string& path);
bool file_exists(const std::string& path);
std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

}  // namespace kvs
