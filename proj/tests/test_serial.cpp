// Binary plumbing: byte-exact round trips, structured failures on bad input,
// FNV-1a reference vectors, and the text/dir helpers.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <stdexcept>
#include <string>

#include "kvs/serial.hpp"
#include "kvs/tensor.hpp"

using namespace kvs;

TEST_CASE("writer/reader round trip every scalar and container type") {
  BinWriter w;
  w.u8(0xAB);
  w.u32(0xDEADBEEFu);
  w.u64(0x0123456789ABCDEFull);
  w.i64(-42);
  w.f64(3.141592653589793);
  double span[3] = {1.0, -2.0, 0.5};
  w.f64_span(span, 3);
  Vector v(2);
  v[0] = 7.0;
  v[1] = -8.0;
  w.vec(v);
  Matrix m(2, 3);
  for (int i = 0; i < 6; ++i) m.data[static_cast<std::size_t>(i)] = i * 1.5;
  w.mat(m);
  w.str("hello");

  BinReader r(w.bytes());
  CHECK(r.u8() == 0xAB);
  CHECK(r.u32() == 0xDEADBEEFu);
  CHECK(r.u64() == 0x0123456789ABCDEFull);
  CHECK(r.i64() == -42);
  CHECK(r.f64() == 3.141592653589793);
  double back[3];
  r.f64_span(back, 3);
  CHECK(back[0] == 1.0);
  CHECK(back[1] == -2.0);
  CHECK(back[2] == 0.5);
  Vector v2 = r.vec();
  CHECK(v2.dim() == 2);
  CHECK(v2[1] == -8.0);
  Matrix m2 = r.mat();
  CHECK(m2.rows == 2);
  CHECK(m2.cols == 3);
  CHECK(m2.at(1, 2) == 7.5);
  CHECK(r.str() == "hello");
  CHECK(r.exhausted());
}

TEST_CASE("doubles round trip by bit pattern, including special values") {
  BinWriter w;
  w.f64(-0.0);
  w.f64(5e-324);                       // smallest subnormal
  w.f64(1.7976931348623157e308);       // largest finite
  BinReader r(w.bytes());
  double nz = r.f64();
  CHECK(nz == 0.0);
  CHECK(std::signbit(nz));
  CHECK(r.f64() == 5e-324);
  CHECK(r.f64() == 1.7976931348623157e308);
}

TEST_CASE("reader rejects truncated input") {
  BinWriter w;
  w.u64(123);
  std::vector<std::uint8_t> cut(w.bytes().begin(), w.bytes().end() - 1);
  BinReader r(std::move(cut));
  CHECK_THROWS_AS((void)r.u64(), std::runtime_error);
}

TEST_CASE("file round trip and from_file on a missing path") {
  const std::string path = "/tmp/kvs_test_serial_roundtrip.bin";
  std::remove(path.c_str());
  BinWriter w;
  w.u32(77);
  w.str("payload");
  w.save(path);
  REQUIRE(file_exists(path));
  BinReader r = BinReader::from_file(path);
  CHECK(r.u32() == 77);
  CHECK(r.str() == "payload");
  CHECK(r.exhausted());
  std::remove(path.c_str());
  CHECK_THROWS_AS((void)BinReader::from_file(path), std::runtime_error);
}

TEST_CASE("expect_magic names the file kind on mismatch") {
  BinWriter w;
  w.u32(0x11111111u);
  BinReader good(w.bytes());
  CHECK_NOTHROW(expect_magic(good, 0x11111111u, "unit-test blob", "p"));

  BinReader bad(w.bytes());
  bool threw = false;
  try {
    expect_magic(bad, 0x22222222u, "unit-test blob", "/some/path");
  } catch (const std::runtime_error& e) {
    threw = true;
    CHECK(std::string(e.what()).find("unit-test blob") != std::string::npos);
    CHECK(std::string(e.what()).find("/some/path") != std::string::npos);
  }
  CHECK(threw);
}

TEST_CASE("fnv1a matches the published 64-bit reference vectors") {
  CHECK(fnv1a("", 0) == 14695981039346656037ull);  // offset basis
  CHECK(fnv1a("a", 1) == 0xaf63dc4c8601ec8cull);
  CHECK(fnv1a("foobar", 6) == 0x85944171f73967e8ull);
}

TEST_CASE("fnv1a accumulator equals the one-shot hash over the same bytes") {
  const char payload[] = "splitting does not change the digest";
  const std::size_t n = sizeof(payload) - 1;
  Fnv1a acc;
  acc.bytes(payload, 10);
  acc.bytes(payload + 10, n - 10);
  CHECK(acc.h == fnv1a(payload, n));

  // Field helpers fold the little-endian byte images.
  Fnv1a a1, a2;
  a1.u64(0x1122334455667788ull);
  std::uint8_t bytes[8] = {0x88, 0x77, 0x66, 0x55, 0x44, 0x33, 0x22, 0x11};
  a2.bytes(bytes, 8);
  CHECK(a1.h == a2.h);

  Fnv1a f1, f2;
  f1.f64(1.5);
  f2.f64(1.5);
  CHECK(f1.h == f2.h);
  Fnv1a f3;
  f3.f64(1.5000000000000002);  // one ulp away -> different digest
  CHECK(f3.h != f1.h);
}

TEST_CASE("text and directory helpers") {
  const std::string dir = "/tmp/kvs_test_serial_dir/nested";
  ensure_dir(dir);
  CHECK(file_exists("/tmp/kvs_test_serial_dir"));
  const std::string file = dir + "/note.txt";
  write_text_file(file, "line1\nline2\n");
  CHECK(read_text_file(file) == "line1\nline2\n");
  CHECK(file_exists(file));
  CHECK_FALSE(file_exists(dir + "/absent.txt"));
  CHECK_THROWS_AS((void)read_text_file(dir + "/absent.txt"), std::runtime_error);
  std::remove(file.c_str());
}
