#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace linkforge {

// Dense row-major float matrix, the unit of bulk data exchange on disk.
struct MatrixF {
    uint64_t rows = 0;
    uint64_t cols = 0;
    std::vector<float> data;

    MatrixF() = default;
    MatrixF(uint64_t r, uint64_t c) : rows(r), cols(c), data(r * c, 0.0f) {}

    float& at(uint64_t r, uint64_t c) { return data[r * cols + c]; }
    float at(uint64_t r, uint64_t c) const { return data[r * cols + c]; }
    const float* row(uint64_t r) const { return data.data() + r * cols; }
    float* row(uint64_t r) { return data.data() + r * cols; }
};

// Little-endian byte packing helpers (host-order independent).
void put_u32(std::string& out, uint32_t v);
void put_u64(std::string& out, uint64_t v);
void put_f32(std::string& out, float v);
void put_f64(std::string& out, double v);

class ByteReader {
  public:
    explicit ByteReader(const std::string& bytes) : b_(bytes) {}
    uint32_t u32();
    uint64_t u64();
    float f32();
    double f64();
    void raw(void* dst, size_t len);
    bool at_end() const { return pos_ == b_.size(); }

  private:
    const std::string& b_;
    size_t pos_ = 0;
};

// Writes bytes to a temp file in the target directory, then renames into
// place, so readers never observe partial output.
void atomic_write_file(const std::string& path, const std::string& bytes);
std::string read_file_bytes(const std::string& path);

// "LFMX" container: magic, u32 version, u64 rows, u64 cols, f32 payload.
void write_matrix(const std::string& path, const MatrixF& m);
MatrixF read_matrix(const std::string& path);

std::string encode_matrix(const MatrixF& m);
MatrixF decode_matrix(ByteReader& r);

}  // namespace linkforge
