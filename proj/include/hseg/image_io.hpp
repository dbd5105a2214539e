#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hseg/tensor.hpp"

namespace hseg {

// Binary portable pixmap (P6) for images, portable graymap (P5) for label
// maps, both with maxval 255.

void write_ppm(const std::string& path, const Tensor& image);  // (3,H,W) in [0,1]
Tensor read_ppm(const std::string& path);

void write_ppm_rgb(const std::string& path, int h, int w, const std::vector<uint8_t>& rgb);

void write_pgm(const std::string& path, int h, int w, const std::vector<uint8_t>& gray);
std::vector<uint8_t> read_pgm(const std::string& path, int& h, int& w);

}  // namespace hseg
