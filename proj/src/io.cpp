#include "refcolor/io.hpp"

#include <stdexcept>

namespace refcolor {

void write_file_atomic(const std::string& path, const std::function<void(std::ostream&)>& writer) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os)
            throw std::runtime_error("cannot open for writing: " + tmp);
        writer(os);
        os.flush();
        if (!os)
            throw std::runtime_error("write failed: " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp);
        throw std::runtime_error("rename failed for " + path + ": " + ec.message());
    }
}

std::ifstream open_input(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw std::runtime_error("cannot open: " + path);
    return is;
}

void write_ppm(const std::string& path, const uint8_t* rgb, int H, int W) {
    write_file_atomic(path, [&](std::ostream& os) {
        os << "P6\n" << W << " " << H << "\n255\n";
        os.write((const char*)rgb, (std::streamsize)H * W * 3);
    });
}

}  // namespace refcolor
