#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace metafew {

// decoded image, CHW layout, values in [0,1]
struct Image {
  int64_t channels = 0, height = 0, width = 0;
  std::vector<float> data;

  float at(int64_t c, int64_t y, int64_t x) const {
    return data[size_t((c * height + y) * width + x)];
  }
};

// PNG / JPEG / PPM / PGM by extension; nullopt with *err set when undecodable
std::optional<Image> load_image(const std::string& path, std::string* err);

Image resize_bilinear(const Image& im, int64_t out_h, int64_t out_w);
Image convert_channels(const Image& im, int64_t channels);

bool save_png(const std::string& path, const Image& im, std::string* err);
bool save_ppm(const std::string& path, const Image& im, std::string* err);

}  // namespace metafew
