#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace sparc::io {

// --- binary primitives (little-endian on every platform) ---

void write_u16(std::ostream& os, uint16_t v);
void write_u32(std::ostream& os, uint32_t v);
void write_u64(std::ostream& os, uint64_t v);
void write_f64(std::ostream& os, double v);
void write_string(std::ostream& os, const std::string& s);  // u32 length + bytes

uint16_t read_u16(std::istream& is);
uint32_t read_u32(std::istream& is);
uint64_t read_u64(std::istream& is);
double read_f64(std::istream& is);
std::string read_string(std::istream& is);

// --- SPMX matrix block: magic "SPMX", u32 rows, u32 cols, f64 row-major ---

void write_matrix(std::ostream& os, const Eigen::MatrixXd& m);
Eigen::MatrixXd read_matrix(std::istream& is);

void save_matrix(const std::filesystem::path& path, const Eigen::MatrixXd& m);
Eigen::MatrixXd load_matrix(const std::filesystem::path& path);

// --- text ---

// Shortest representation that round-trips a double exactly.
std::string format_double(double v);

// CSV debug dump, one row per line.
std::string matrix_to_csv(const Eigen::MatrixXd& m);

// --- hashing ---

// CRC-64/ECMA-182, incremental.
class Crc64 {
 public:
  void update(const void* data, std::size_t len);
  uint64_t value() const { return state_; }

 private:
  uint64_t state_ = 0;
};

uint64_t crc64(const void* data, std::size_t len);

// FNV-1a over raw bytes; used for weight digests.
uint64_t fnv1a64(const void* data, std::size_t len, uint64_t seed = 0xcbf29ce484222325ull);

}  // namespace sparc::io
