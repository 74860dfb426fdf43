#include "sparc/io.hpp"

#include <array>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "sparc/error.hpp"

namespace sparc::io {

namespace {

void put_bytes(std::ostream& os, const unsigned char* b, std::size_t n) {
  os.write(reinterpret_cast<const char*>(b), static_cast<std::streamsize>(n));
  if (!os) throw DataError("write failed");
}

void get_bytes(std::istream& is, unsigned char* b, std::size_t n) {
  is.read(reinterpret_cast<char*>(b), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) {
    throw StoreError(StoreError::Code::truncated, "unexpected end of stream");
  }
}

template <typename T>
void write_le(std::ostream& os, T v) {
  std::array<unsigned char, sizeof(T)> b;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  }
  put_bytes(os, b.data(), b.size());
}

template <typename T>
T read_le(std::istream& is) {
  std::array<unsigned char, sizeof(T)> b;
  get_bytes(is, b.data(), b.size());
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<T>(b[i]) << (8 * i);
  }
  return v;
}

constexpr char kMatrixMagic[4] = {'S', 'P', 'M', 'X'};

}  // namespace

void write_u16(std::ostream& os, uint16_t v) { write_le<uint16_t>(os, v); }
void write_u32(std::ostream& os, uint32_t v) { write_le<uint32_t>(os, v); }
void write_u64(std::ostream& os, uint64_t v) { write_le<uint64_t>(os, v); }
void write_f64(std::ostream& os, double v) { write_le<uint64_t>(os, std::bit_cast<uint64_t>(v)); }

void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<uint32_t>(s.size()));
  if (!s.empty()) put_bytes(os, reinterpret_cast<const unsigned char*>(s.data()), s.size());
}

uint16_t read_u16(std::istream& is) { return read_le<uint16_t>(is); }
uint32_t read_u32(std::istream& is) { return read_le<uint32_t>(is); }
uint64_t read_u64(std::istream& is) { return read_le<uint64_t>(is); }
double read_f64(std::istream& is) { return std::bit_cast<double>(read_le<uint64_t>(is)); }

std::string read_string(std::istream& is) {
  const uint32_t n = read_u32(is);
  std::string s(n, '\0');
  if (n > 0) get_bytes(is, reinterpret_cast<unsigned char*>(s.data()), n);
  return s;
}

void write_matrix(std::ostream& os, const Eigen::MatrixXd& m) {
  put_bytes(os, reinterpret_cast<const unsigned char*>(kMatrixMagic), 4);
  write_u32(os, static_cast<uint32_t>(m.rows()));
  write_u32(os, static_cast<uint32_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      write_f64(os, m(r, c));
    }
  }
}

Eigen::MatrixXd read_matrix(std::istream& is) {
  char magic[4];
  get_bytes(is, reinterpret_cast<unsigned char*>(magic), 4);
  if (std::memcmp(magic, kMatrixMagic, 4) != 0) {
    throw StoreError(StoreError::Code::bad_magic, "not an SPMX block");
  }
  const uint32_t rows = read_u32(is);
  const uint32_t cols = read_u32(is);
  Eigen::MatrixXd m(rows, cols);
  for (uint32_t r = 0; r < rows; ++r) {
    for (uint32_t c = 0; c < cols; ++c) {
      m(r, c) = read_f64(is);
    }
  }
  if (!m.allFinite()) throw DataError("SPMX payload contains non-finite values");
  return m;
}

void save_matrix(const std::filesystem::path& path, const Eigen::MatrixXd& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path.string());
  write_matrix(os, m);
}

Eigen::MatrixXd load_matrix(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open for reading: " + path.string());
  return read_matrix(is);
}

std::string format_double(double v) {
  char buf[40];
  // %.17g always round-trips; prefer the shorter form when it already does.
  std::snprintf(buf, sizeof(buf), "%.15g", v);
  if (std::strtod(buf, nullptr) != v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
  }
  return buf;
}

std::string matrix_to_csv(const Eigen::MatrixXd& m) {
  std::string out;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (c > 0) out += ',';
      out += format_double(m(r, c));
    }
    out += '\n';
  }
  return out;
}

namespace {

// CRC-64/ECMA-182, bit-reflected variant (same parameters as xz).
std::array<uint64_t, 256> make_crc_table() {
  std::array<uint64_t, 256> table{};
  constexpr uint64_t poly = 0xC96C5795D7870F42ull;  // reflected 0x42F0E1EBA9EA3693
  for (uint32_t i = 0; i < 256; ++i) {
    uint64_t crc = i;
    for (int bit = 0; bit < 8; ++bit) {
      crc = (crc & 1) ? (crc >> 1) ^ poly : crc >> 1;
    }
    table[i] = crc;
  }
  return table;
}

const std::array<uint64_t, 256>& crc_table() {
  static const std::array<uint64_t, 256> table = make_crc_table();
  return table;
}

}  // namespace

void Crc64::update(const void* data, std::size_t len) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  uint64_t crc = ~state_;
  for (std::size_t i = 0; i < len; ++i) {
    crc = crc_table()[(crc ^ bytes[i]) & 0xff] ^ (crc >> 8);
  }
  state_ = ~crc;
}

uint64_t crc64(const void* data, std::size_t len) {
  Crc64 c;
  c.update(data, len);
  return c.value();
}

uint64_t fnv1a64(const void* data, std::size_t len, uint64_t seed) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  uint64_t h = seed;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace sparc::io
