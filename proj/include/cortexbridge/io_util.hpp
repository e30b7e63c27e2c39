#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace cortexbridge::io {

// All binary formats are little-endian. We write raw host representations and
// assert the host is little-endian at startup of any reader/writer.
inline void require_little_endian() {
    const uint32_t probe = 1;
    uint8_t first;
    std::memcpy(&first, &probe, 1);
    if (first != 1) throw std::runtime_error("big-endian hosts are not supported");
}

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Optional global hook: the pipeline registers a recorder here so every file
// the stages touch lands in the run directory's access manifest.
std::function<void(const std::string&, bool /*write*/)>& access_hook();
void note_access(const std::string& path, bool write);

std::ifstream open_input(const std::string& path, bool binary = true);
std::ofstream open_output(const std::string& path, bool binary = true);

template <typename T>
void write_pod(std::ostream& os, const T& x) {
    os.write(reinterpret_cast<const char*>(&x), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T x{};
    is.read(reinterpret_cast<char*>(&x), sizeof(T));
    if (!is) throw IoError("unexpected end of file");
    return x;
}

template <typename T>
void write_array(std::ostream& os, const std::vector<T>& v) {
    os.write(reinterpret_cast<const char*>(v.data()), std::streamsize(v.size() * sizeof(T)));
}

template <typename T>
void read_array(std::istream& is, std::vector<T>& v, size_t n) {
    v.resize(n);
    is.read(reinterpret_cast<char*>(v.data()), std::streamsize(n * sizeof(T)));
    if (!is) throw IoError("unexpected end of file");
}

void write_magic(std::ostream& os, const char* magic);   // strlen(magic) bytes
void check_magic(std::istream& is, const char* magic);

}  // namespace cortexbridge::io
