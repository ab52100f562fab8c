#ifndef REFCOLOR_IO_HPP
#define REFCOLOR_IO_HPP

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

namespace refcolor {

/*------------------------------ little-endian -------------------------------*/

inline void put_u16(std::ostream& os, uint16_t v) {
    char b[2] = {(char)(v & 0xFF), (char)(v >> 8)};
    os.write(b, 2);
}
inline void put_u32(std::ostream& os, uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; i++)
        b[i] = (char)((v >> (8 * i)) & 0xFF);
    os.write(b, 4);
}
inline void put_u64(std::ostream& os, uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; i++)
        b[i] = (char)((v >> (8 * i)) & 0xFF);
    os.write(b, 8);
}
inline uint16_t get_u16(std::istream& is) {
    unsigned char b[2];
    is.read((char*)b, 2);
    return (uint16_t)(b[0] | (b[1] << 8));
}
inline uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read((char*)b, 4);
    uint32_t v = 0;
    for (int i = 0; i < 4; i++)
        v |= (uint32_t)b[i] << (8 * i);
    return v;
}
inline uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read((char*)b, 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; i++)
        v |= (uint64_t)b[i] << (8 * i);
    return v;
}

/*------------------------------- atomic writes -------------------------------*/

// Write to <path>.tmp then rename, so partial files are never left behind.
void write_file_atomic(const std::string& path, const std::function<void(std::ostream&)>& writer);

std::ifstream open_input(const std::string& path);

/*---------------------------------- images ----------------------------------*/

// Binary P6 portable pixmap.
void write_ppm(const std::string& path, const uint8_t* rgb, int H, int W);

}  // namespace refcolor

#endif
