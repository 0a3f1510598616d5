#include "dmt/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

namespace dmt {

namespace {

unsigned char to_byte(float v) {
    float c = std::clamp(v, 0.0f, 1.0f);
    return static_cast<unsigned char>(std::lround(c * 255.0f));
}

void write_binary(const std::filesystem::path& path, const std::string& header,
                  const std::vector<unsigned char>& pixels) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    os.write(header.data(), static_cast<std::streamsize>(header.size()));
    os.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
    if (!os) throw IoError("write failed: " + path.string());
}

// Reads one whitespace-delimited token, skipping '#' comment lines.
std::string next_token(std::istream& is) {
    std::string tok;
    int ch;
    while ((ch = is.get()) != EOF) {
        if (ch == '#') {
            while ((ch = is.get()) != EOF && ch != '\n') {
            }
            continue;
        }
        if (std::isspace(ch)) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok.push_back(static_cast<char>(ch));
    }
    return tok;
}

struct PnmHeader {
    std::string magic;
    int w = 0;
    int h = 0;
    int maxval = 0;
};

PnmHeader read_header(std::istream& is, const std::filesystem::path& path) {
    PnmHeader hd;
    hd.magic = next_token(is);
    try {
        hd.w = std::stoi(next_token(is));
        hd.h = std::stoi(next_token(is));
        hd.maxval = std::stoi(next_token(is));
    } catch (const std::exception&) {
        throw MalformedHeader("bad netpbm header in " + path.string());
    }
    if (hd.w <= 0 || hd.h <= 0 || hd.maxval != 255) {
        throw MalformedHeader("unsupported netpbm header in " + path.string());
    }
    return hd;
}

}  // namespace

void write_pgm(const std::filesystem::path& path, const Tensor& gray_hw) {
    if (gray_hw.rank() != 2) throw ShapeMismatch("write_pgm expects an H x W tensor");
    const int h = gray_hw.dim(0), w = gray_hw.dim(1);
    std::vector<unsigned char> px(static_cast<std::size_t>(h) * w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            px[static_cast<std::size_t>(y) * w + x] = to_byte(gray_hw(y, x));
        }
    }
    write_binary(path, "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n", px);
}

void write_mask_pgm(const std::filesystem::path& path, const Tensor& mask_hw) {
    if (mask_hw.rank() != 2) throw ShapeMismatch("write_mask_pgm expects an H x W tensor");
    const int h = mask_hw.dim(0), w = mask_hw.dim(1);
    std::vector<unsigned char> px(static_cast<std::size_t>(h) * w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            px[static_cast<std::size_t>(y) * w + x] = mask_hw(y, x) >= 0.5f ? 255 : 0;
        }
    }
    write_binary(path, "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n", px);
}

void write_ppm(const std::filesystem::path& path, const Tensor& img_chw) {
    if (img_chw.rank() != 3 || img_chw.dim(0) != 3) {
        throw ShapeMismatch("write_ppm expects a 3 x H x W tensor");
    }
    const int h = img_chw.dim(1), w = img_chw.dim(2);
    std::vector<unsigned char> px(static_cast<std::size_t>(h) * w * 3);
    std::size_t i = 0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            px[i++] = to_byte(img_chw(0, y, x));
            px[i++] = to_byte(img_chw(1, y, x));
            px[i++] = to_byte(img_chw(2, y, x));
        }
    }
    write_binary(path, "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n", px);
}

Tensor read_pgm(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for reading: " + path.string());
    PnmHeader hd = read_header(is, path);
    if (hd.magic != "P5") throw MalformedHeader("expected P5 magic in " + path.string());
    std::vector<unsigned char> px(static_cast<std::size_t>(hd.w) * hd.h);
    is.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
    if (static_cast<std::size_t>(is.gcount()) != px.size()) {
        throw TruncatedPayload("PGM pixel data truncated in " + path.string());
    }
    Tensor t = Tensor::zeros({hd.h, hd.w});
    for (int y = 0; y < hd.h; ++y) {
        for (int x = 0; x < hd.w; ++x) {
            t(y, x) = static_cast<float>(px[static_cast<std::size_t>(y) * hd.w + x]) / 255.0f;
        }
    }
    return t;
}

Tensor read_ppm(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for reading: " + path.string());
    PnmHeader hd = read_header(is, path);
    if (hd.magic != "P6") throw MalformedHeader("expected P6 magic in " + path.string());
    std::vector<unsigned char> px(static_cast<std::size_t>(hd.w) * hd.h * 3);
    is.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
    if (static_cast<std::size_t>(is.gcount()) != px.size()) {
        throw TruncatedPayload("PPM pixel data truncated in " + path.string());
    }
    Tensor t = Tensor::zeros({3, hd.h, hd.w});
    std::size_t i = 0;
    for (int y = 0; y < hd.h; ++y) {
        for (int x = 0; x < hd.w; ++x) {
            t(0, y, x) = static_cast<float>(px[i++]) / 255.0f;
            t(1, y, x) = static_cast<float>(px[i++]) / 255.0f;
            t(2, y, x) = static_cast<float>(px[i++]) / 255.0f;
        }
    }
    return t;
}

}  // namespace dmt
