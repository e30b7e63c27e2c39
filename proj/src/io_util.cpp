#include "cortexbridge/io_util.hpp"

namespace cortexbridge::io {

std::function<void(const std::string&, bool)>& access_hook() {
    static std::function<void(const std::string&, bool)> hook;
    return hook;
}

void note_access(const std::string& path, bool write) {
    if (access_hook()) access_hook()(path, write);
}

std::ifstream open_input(const std::string& path, bool binary) {
    require_little_endian();
    note_access(path, false);
    std::ifstream is(path, binary ? std::ios::binary : std::ios::in);
    if (!is) throw IoError("cannot open for reading: " + path);
    return is;
}

std::ofstream open_output(const std::string& path, bool binary) {
    require_little_endian();
    note_access(path, true);
    std::ofstream os(path, binary ? std::ios::binary : std::ios::out);
    if (!os) throw IoError("cannot open for writing: " + path);
    return os;
}

void write_magic(std::ostream& os, const char* magic) {
    os.write(magic, std::streamsize(std::strlen(magic)));
}

void check_magic(std::istream& is, const char* magic) {
    size_t n = std::strlen(magic);
    char buf[16];
    is.read(buf, std::streamsize(n));
    if (!is || std::memcmp(buf, magic, n) != 0)
        throw IoError(std::string("bad magic, expected ") + magic);
}

}  // namespace cortexbridge::io
