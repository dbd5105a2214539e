#include "hseg/image_io.hpp"

#include <cctype>
#include <cmath>
#include <fstream>

#include "hseg/util.hpp"

namespace hseg {

namespace {

void skip_ws_and_comments(std::istream& in) {
  while (true) {
    int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
}

void read_header(std::istream& in, const std::string& magic, const std::string& path, int& h,
                 int& w) {
  std::string m;
  in >> m;
  if (m != magic) throw Error("bad magic in " + path + " (expected " + magic + ")");
  skip_ws_and_comments(in);
  int maxval = 0;
  in >> w;
  skip_ws_and_comments(in);
  in >> h;
  skip_ws_and_comments(in);
  in >> maxval;
  if (!in || w <= 0 || h <= 0 || maxval != 255) throw Error("unsupported header in " + path);
  in.get();  // single whitespace before raster
}

uint8_t to_byte(real_t v) {
  real_t scaled = v * real_t(255);
  if (scaled <= real_t(0)) return 0;
  if (scaled >= real_t(255)) return 255;
  return static_cast<uint8_t>(std::lround(static_cast<double>(scaled)));
}

}  // namespace

void write_ppm(const std::string& path, const Tensor& image) {
  if (image.shape().size() != 3 || image.dim(0) != 3) {
    throw Error("write_ppm expects a (3,H,W) tensor, got " + shape_str(image.shape()));
  }
  int h = image.dim(1), w = image.dim(2);
  std::vector<uint8_t> rgb(static_cast<size_t>(h) * w * 3);
  const auto& v = image.values();
  const int64_t plane = static_cast<int64_t>(h) * w;
  for (int64_t k = 0; k < plane; ++k) {
    rgb[static_cast<size_t>(k * 3 + 0)] = to_byte(v[static_cast<size_t>(k)]);
    rgb[static_cast<size_t>(k * 3 + 1)] = to_byte(v[static_cast<size_t>(plane + k)]);
    rgb[static_cast<size_t>(k * 3 + 2)] = to_byte(v[static_cast<size_t>(2 * plane + k)]);
  }
  write_ppm_rgb(path, h, w, rgb);
}

void write_ppm_rgb(const std::string& path, int h, int w, const std::vector<uint8_t>& rgb) {
  if (rgb.size() != static_cast<size_t>(h) * w * 3) throw Error("write_ppm_rgb: size mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << "P6\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  if (!out) throw Error("write failed: " + path);
}

Tensor read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  int h = 0, w = 0;
  read_header(in, "P6", path, h, w);
  std::vector<uint8_t> rgb(static_cast<size_t>(h) * w * 3);
  in.read(reinterpret_cast<char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  if (!in) throw Error("truncated image: " + path);
  Tensor t = Tensor::zeros({3, h, w});
  auto& v = t.values();
  const int64_t plane = static_cast<int64_t>(h) * w;
  for (int64_t k = 0; k < plane; ++k) {
    v[static_cast<size_t>(k)] = static_cast<real_t>(rgb[static_cast<size_t>(k * 3 + 0)]) / 255;
    v[static_cast<size_t>(plane + k)] =
        static_cast<real_t>(rgb[static_cast<size_t>(k * 3 + 1)]) / 255;
    v[static_cast<size_t>(2 * plane + k)] =
        static_cast<real_t>(rgb[static_cast<size_t>(k * 3 + 2)]) / 255;
  }
  return t;
}

void write_pgm(const std::string& path, int h, int w, const std::vector<uint8_t>& gray) {
  if (gray.size() != static_cast<size_t>(h) * w) throw Error("write_pgm: size mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << "P5\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(gray.data()), static_cast<std::streamsize>(gray.size()));
  if (!out) throw Error("write failed: " + path);
}

std::vector<uint8_t> read_pgm(const std::string& path, int& h, int& w) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  read_header(in, "P5", path, h, w);
  std::vector<uint8_t> gray(static_cast<size_t>(h) * w);
  in.read(reinterpret_cast<char*>(gray.data()), static_cast<std::streamsize>(gray.size()));
  if (!in) throw Error("truncated image: " + path);
  return gray;
}

}  // namespace hseg
