#include "kvs/serial.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace kvs {

void BinWriter::u8(std::uint8_t v) { buf_.push_back(v); }

void BinWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void BinWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void BinWriter::i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }

void BinWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void BinWriter::f64_span(const double* p, std::size_t count) {
  for (std::size_t i = 0; i < count; ++i) f64(p[i]);
}

void BinWriter::vec(const Vector& v) {
  u32(static_cast<std::uint32_t>(v.dim()));
  f64_span(v.data.data(), v.data.size());
}

void BinWriter::mat(const Matrix& m) {
  u32(static_cast<std::uint32_t>(m.rows));
  u32(static_cast<std::uint32_t>(m.cols));
  f64_span(m.data.data(), m.data.size());
}

void BinWriter::str(const std::string& s) {
  u32(static_cast<std::uint32_t>(s.size()));
  for (char c : s) buf_.push_back(static_cast<std::uint8_t>(c));
}

void BinWriter::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("BinWriter::save: cannot open " + path);
  out.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
  if (!out) throw std::runtime_error("BinWriter::save: write failed for " + path);
}

BinReader::BinReader(std::vector<std::uint8_t> bytes) : buf_(std::move(bytes)) {}

BinReader BinReader::from_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("BinReader: cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return BinReader(std::move(bytes));
}

void BinReader::need(std::size_t n) const {
  if (pos_ + n > buf_.size()) throw std::runtime_error("BinReader: truncated input");
}

std::uint8_t BinReader::u8() {
  need(1);
  return buf_[pos_++];
}

std::uint32_t BinReader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf_[pos_ + i]) << (8 * i);
  pos_ += 4;
  return v;
}

std::uint64_t BinReader::u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf_[pos_ + i]) << (8 * i);
  pos_ += 8;
  return v;
}

std::int64_t BinReader::i64() { return static_cast<std::int64_t>(u64()); }

double BinReader::f64() { return std::bit_cast<double>(u64()); }

void BinReader::f64_span(double* p, std::size_t count) {
  for (std::size_t i = 0; i < count; ++i) p[i] = f64();
}

Vector BinReader::vec() {
  const int dim = static_cast<int>(u32());
  Vector v(dim);
  f64_span(v.data.data(), v.data.size());
  return v;
}

Matrix BinReader::mat() {
  const int rows = static_cast<int>(u32());
  const int cols = static_cast<int>(u32());
  Matrix m(rows, cols);
  f64_span(m.data.data(), m.data.size());
  return m;
}

std::string BinReader::str() {
  const std::uint32_t n = u32();
  need(n);
  std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
  pos_ += n;
  return s;
}

void expect_magic(BinReader& r, std::uint32_t magic, const std::string& kind, const std::string& path) {
  const std::uint32_t got = r.u32();
  if (got != magic) {
    std::ostringstream msg;
    msg << kind << ": bad magic in " << path << " (got 0x" << std::hex << got << ", want 0x" << magic << ")";
    throw std::runtime_error(msg.str());
  }
}

void Fnv1a::bytes(const void* p, std::size_t n) {
  const auto* b = static_cast<const std::uint8_t*>(p);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= b[i];
    h *= 1099511628211ULL;
  }
}

void Fnv1a::u32(std::uint32_t v) {
  std::uint8_t b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
  bytes(b, 4);
}

void Fnv1a::u64(std::uint64_t v) {
  std::uint8_t b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
  bytes(b, 8);
}

void Fnv1a::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void Fnv1a::f64_span(const double* p, std::size_t count) {
  for (std::size_t i = 0; i < count; ++i) f64(p[i]);
}

std::uint64_t fnv1a(const void* p, std::size_t n) {
  Fnv1a h;
  h.bytes(p, n);
  return h.h;
}

void ensure_dir(const std::string& path) {
  std::error_code ec;
  std::filesystem::create_directories(path, ec);
  if (ec) throw std::runtime_error("ensure_dir: cannot create " + path + ": " + ec.message());
}

bool file_exists(const std::string& path) { return std::filesystem::exists(path); }

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_text_file: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("write_text_file: cannot open " + path);
  out << content;
  if (!out) throw std::runtime_error("write_text_file: write failed for " + path);
}

}  // namespace kvs
