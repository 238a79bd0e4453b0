#pragma once

#include <string>
#include <vector>

#include "cyclevar/tensor.hpp"

namespace cyclevar {

// Interleaved 8-bit RGB rows, top to bottom.
struct Rgb8Image {
    int w = 0;
    int h = 0;
    std::vector<unsigned char> pix;  // 3*w*h bytes
};

// Chooses the container by extension: ".png" needs libpng support, anything
// else is written as binary PPM (P6). Throws Error on I/O failure.
void save_image(const std::string& path, const Rgb8Image& img);

// Sniffs the magic bytes, so extension does not matter on load.
Rgb8Image load_image(const std::string& path);

bool png_supported();

// Planar [3,h,w] floats in [0,1] to bytes, round half up, clamped.
Rgb8Image rgb8_from_planar(const std::vector<double>& chw, int w, int h);
std::vector<double> planar_from_rgb8(const Rgb8Image& img);

template <typename T>
Rgb8Image image_from_tensor(const Tensor<T>& img) {
    if (img.shape().size() != 3 || img.shape()[0] != 3)
        throw Error("image_from_tensor: expected [3,H,W]");
    int h = int(img.shape()[1]), w = int(img.shape()[2]);
    std::vector<double> chw(img.val().begin(), img.val().end());
    return rgb8_from_planar(chw, w, h);
}

template <typename T>
Tensor<T> tensor_from_image(const Rgb8Image& img) {
    std::vector<double> chw = planar_from_rgb8(img);
    std::vector<T> v(chw.begin(), chw.end());
    return Tensor<T>::leaf({3, img.h, img.w}, v);
}

}  // namespace cyclevar
