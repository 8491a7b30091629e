#include "linkforge/matrix_io.hpp"

#include <unistd.h>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "linkforge/common.hpp"

namespace linkforge {

namespace {
constexpr uint32_t kMatrixVersion = 1;
constexpr char kMatrixMagic[4] = {'L', 'F', 'M', 'X'};
}  // namespace

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

void put_f64(std::string& out, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
}

uint32_t ByteReader::u32() {
    if (pos_ + 4 > b_.size()) throw DataError("truncated binary stream");
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
        v |= static_cast<uint32_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
}

uint64_t ByteReader::u64() {
    if (pos_ + 8 > b_.size()) throw DataError("truncated binary stream");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
        v |= static_cast<uint64_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
}

float ByteReader::f32() {
    uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

double ByteReader::f64() {
    uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

void ByteReader::raw(void* dst, size_t len) {
    if (pos_ + len > b_.size()) throw DataError("truncated binary stream");
    std::memcpy(dst, b_.data() + pos_, len);
    pos_ += len;
}

void atomic_write_file(const std::string& path, const std::string& bytes) {
    namespace fs = std::filesystem;
    fs::path target(path);
    fs::path dir = target.parent_path();
    if (dir.empty()) dir = ".";
    fs::path tmp = dir / (target.filename().string() + ".tmp." + std::to_string(::getpid()));
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot open for writing: " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            out.close();
            fs::remove(tmp);
            throw DataError("write failed: " + tmp.string());
        }
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) {
        fs::remove(tmp);
        throw DataError("rename failed for " + path + ": " + ec.message());
    }
}

std::string read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open file: " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

std::string encode_matrix(const MatrixF& m) {
    if (m.data.size() != m.rows * m.cols) throw DataError("matrix payload size mismatch");
    std::string out;
    out.reserve(24 + 4 * m.data.size());
    out.append(kMatrixMagic, 4);
    put_u32(out, kMatrixVersion);
    put_u64(out, m.rows);
    put_u64(out, m.cols);
    for (float v : m.data) put_f32(out, v);
    return out;
}

MatrixF decode_matrix(ByteReader& r) {
    char magic[4];
    r.raw(magic, 4);
    if (std::memcmp(magic, kMatrixMagic, 4) != 0) throw DataError("bad matrix magic");
    uint32_t version = r.u32();
    if (version != kMatrixVersion)
        throw DataError("unsupported matrix version " + std::to_string(version));
    MatrixF m;
    m.rows = r.u64();
    m.cols = r.u64();
    if (m.rows > (1ULL << 40) || m.cols > (1ULL << 40) ||
        (m.rows != 0 && m.cols > (1ULL << 40) / m.rows))
        throw DataError("matrix dimensions out of range");
    m.data.resize(m.rows * m.cols);
    for (auto& v : m.data) v = r.f32();
    return m;
}

void write_matrix(const std::string& path, const MatrixF& m) {
    atomic_write_file(path, encode_matrix(m));
}

MatrixF read_matrix(const std::string& path) {
    std::string bytes = read_file_bytes(path);
    ByteReader r(bytes);
    MatrixF m = decode_matrix(r);
    if (!r.at_end()) throw DataError("trailing bytes in matrix file: " + path);
    return m;
}

}  // namespace linkforge
