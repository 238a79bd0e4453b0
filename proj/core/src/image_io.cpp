#include "cyclevar/image_io.hpp"

#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#ifdef CYCLEVAR_HAVE_LIBPNG
#include <png.h>
#endif

namespace cyclevar {

namespace {

bool has_suffix(const std::string& s, const std::string& suf) {
    if (s.size() < suf.size()) return false;
    return s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

void save_ppm(const std::string& path, const Rgb8Image& img) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("save_image: cannot open '" + path + "' for writing");
    out << "P6\n" << img.w << " " << img.h << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pix.data()),
              std::streamsize(img.pix.size()));
    if (!out) throw Error("save_image: short write to '" + path + "'");
}

Rgb8Image load_ppm(std::ifstream& in, const std::string& path) {
    auto next_token = [&]() {
        std::string tok;
        for (;;) {
            int c = in.get();
            if (c == EOF) throw Error("load_image: truncated PPM header in '" + path + "'");
            if (c == '#') {
                while (c != EOF && c != '\n') c = in.get();
                continue;
            }
            if (std::isspace(c)) {
                if (!tok.empty()) return tok;
                continue;
            }
            tok.push_back(char(c));
        }
    };
    std::string magic = next_token();
    if (magic != "P6") throw Error("load_image: '" + path + "' is not a binary PPM (P6)");
    auto num_token = [&]() {
        std::string tok = next_token();
        try {
            return std::stoi(tok);
        } catch (const std::exception&) {
            throw Error("load_image: bad PPM header token '" + tok + "' in '" + path + "'");
        }
    };
    Rgb8Image img;
    img.w = num_token();
    img.h = num_token();
    int maxval = num_token();
    if (img.w <= 0 || img.h <= 0 || maxval != 255)
        throw Error("load_image: unsupported PPM geometry in '" + path + "' (need maxval 255)");
    img.pix.resize(size_t(3) * size_t(img.w) * size_t(img.h));
    in.read(reinterpret_cast<char*>(img.pix.data()), std::streamsize(img.pix.size()));
    if (size_t(in.gcount()) != img.pix.size())
        throw Error("load_image: truncated PPM pixel data in '" + path + "'");
    return img;
}

#ifdef CYCLEVAR_HAVE_LIBPNG

void save_png(const std::string& path, const Rgb8Image& img) {
    FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw Error("save_image: cannot open '" + path + "' for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_write_struct(&png, &info);
        std::fclose(f);
        throw Error("save_image: libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(f);
        throw Error("save_image: libpng error writing '" + path + "'");
    }
    png_init_io(png, f);
    png_set_IHDR(png, info, png_uint_32(img.w), png_uint_32(img.h), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(size_t(img.h));
    for (int y = 0; y < img.h; ++y)
        rows[size_t(y)] = const_cast<png_bytep>(img.pix.data() + size_t(y) * size_t(img.w) * 3);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(f);
}

Rgb8Image load_png(const std::string& path) {
    FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw Error("load_image: cannot open '" + path + "'");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(f);
        throw Error("load_image: libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(f);
        throw Error("load_image: libpng error reading '" + path + "'");
    }
    png_init_io(png, f);
    png_read_info(png, info);
    // Normalize every input flavor to 8-bit RGB.
    png_set_strip_16(png);
    png_set_palette_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY ||
        png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    Rgb8Image img;
    img.w = int(png_get_image_width(png, info));
    img.h = int(png_get_image_height(png, info));
    if (png_get_rowbytes(png, info) != size_t(img.w) * 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(f);
        throw Error("load_image: unexpected row layout in '" + path + "'");
    }
    img.pix.resize(size_t(3) * size_t(img.w) * size_t(img.h));
    std::vector<png_bytep> rows(size_t(img.h));
    for (int y = 0; y < img.h; ++y)
        rows[size_t(y)] = img.pix.data() + size_t(y) * size_t(img.w) * 3;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(f);
    return img;
}

#endif  // CYCLEVAR_HAVE_LIBPNG

}  // namespace

bool png_supported() {
#ifdef CYCLEVAR_HAVE_LIBPNG
    return true;
#else
    return false;
#endif
}

void save_image(const std::string& path, const Rgb8Image& img) {
    if (img.w <= 0 || img.h <= 0 || img.pix.size() != size_t(3) * size_t(img.w) * size_t(img.h))
        throw Error("save_image: inconsistent image buffer");
    if (has_suffix(path, ".png")) {
#ifdef CYCLEVAR_HAVE_LIBPNG
        save_png(path, img);
        return;
#else
        throw Error("save_image: built without libpng; use a .ppm path");
#endif
    }
    save_ppm(path, img);
}

Rgb8Image load_image(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("load_image: cannot open '" + path + "'");
    unsigned char sig[8] = {0};
    in.read(reinterpret_cast<char*>(sig), 8);
    if (size_t(in.gcount()) >= 8 && sig[0] == 0x89 && sig[1] == 'P' && sig[2] == 'N' &&
        sig[3] == 'G') {
        in.close();
#ifdef CYCLEVAR_HAVE_LIBPNG
        return load_png(path);
#else
        throw Error("load_image: '" + path + "' is PNG but this build lacks libpng");
#endif
    }
    in.clear();
    in.seekg(0);
    return load_ppm(in, path);
}

Rgb8Image rgb8_from_planar(const std::vector<double>& chw, int w, int h) {
    size_t plane = size_t(w) * size_t(h);
    if (chw.size() != 3 * plane) throw Error("rgb8_from_planar: buffer/geometry mismatch");
    Rgb8Image img;
    img.w = w;
    img.h = h;
    img.pix.resize(3 * plane);
    for (size_t i = 0; i < plane; ++i) {
        for (int c = 0; c < 3; ++c) {
            double v = chw[size_t(c) * plane + i];
            if (!std::isfinite(v)) v = 0.0;
            double scaled = std::floor(v * 255.0 + 0.5);
            if (scaled < 0.0) scaled = 0.0;
            if (scaled > 255.0) scaled = 255.0;
            img.pix[i * 3 + size_t(c)] = static_cast<unsigned char>(scaled);
        }
    }
    return img;
}

std::vector<double> planar_from_rgb8(const Rgb8Image& img) {
    size_t plane = size_t(img.w) * size_t(img.h);
    if (img.pix.size() != 3 * plane) throw Error("planar_from_rgb8: inconsistent image buffer");
    std::vector<double> chw(3 * plane);
    for (size_t i = 0; i < plane; ++i)
        for (int c = 0; c < 3; ++c)
            chw[size_t(c) * plane + i] = double(img.pix[i * 3 + size_t(c)]) / 255.0;
    return chw;
}

}  // namespace cyclevar
