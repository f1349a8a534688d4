#include "metafew/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#ifdef METAFEW_HAVE_PNG
#include <png.h>
#endif
#ifdef METAFEW_HAVE_JPEG
#include <csetjmp>
#include <jpeglib.h>
#endif

namespace metafew {

namespace {

std::string lower_ext(const std::string& path) {
  auto dot = path.find_last_of('.');
  if (dot == std::string::npos) return "";
  std::string ext = path.substr(dot + 1);
  std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
  return ext;
}

// interleaved 8-bit rows -> CHW floats
Image from_rows(const std::vector<unsigned char>& buf, int64_t h, int64_t w, int64_t c) {
  Image im;
  im.channels = c;
  im.height = h;
  im.width = w;
  im.data.resize(size_t(c * h * w));
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t ch = 0; ch < c; ++ch)
        im.data[size_t((ch * h + y) * w + x)] = float(buf[size_t((y * w + x) * c + ch)]) / 255.0f;
  return im;
}

#ifdef METAFEW_HAVE_PNG
std::optional<Image> load_png_file(const std::string& path, std::string* err) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) {
    if (err) *err = "cannot open " + path;
    return std::nullopt;
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    std::fclose(fp);
    if (err) *err = "png decode failed for " + path;
    return std::nullopt;
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  png_uint_32 w = png_get_image_width(png, info), h = png_get_image_height(png, info);
  int bit_depth = png_get_bit_depth(png, info), color = png_get_color_type(png, info);
  if (bit_depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  int64_t c = png_get_channels(png, info);
  std::vector<unsigned char> buf(size_t(h) * w * size_t(c));
  std::vector<png_bytep> rows(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = buf.data() + size_t(y) * w * size_t(c);
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return from_rows(buf, h, w, c);
}
#endif

#ifdef METAFEW_HAVE_JPEG
struct JpegErrorMgr {
  jpeg_error_mgr pub;
  std::jmp_buf jump;
};
void jpeg_error_exit(j_common_ptr cinfo) {
  std::longjmp(reinterpret_cast<JpegErrorMgr*>(cinfo->err)->jump, 1);
}

std::optional<Image> load_jpeg_file(const std::string& path, std::string* err) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) {
    if (err) *err = "cannot open " + path;
    return std::nullopt;
  }
  jpeg_decompress_struct cinfo;
  JpegErrorMgr jerr;
  cinfo.err = jpeg_std_error(&jerr.pub);
  jerr.pub.error_exit = jpeg_error_exit;
  if (setjmp(jerr.jump)) {
    jpeg_destroy_decompress(&cinfo);
    std::fclose(fp);
    if (err) *err = "jpeg decode failed for " + path;
    return std::nullopt;
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, fp);
  jpeg_read_header(&cinfo, TRUE);
  jpeg_start_decompress(&cinfo);
  int64_t w = cinfo.output_width, h = cinfo.output_height, c = cinfo.output_components;
  std::vector<unsigned char> buf(size_t(h * w * c));
  while (cinfo.output_scanline < cinfo.output_height) {
    unsigned char* row = buf.data() + size_t(cinfo.output_scanline) * size_t(w * c);
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  std::fclose(fp);
  return from_rows(buf, h, w, c);
}
#endif

std::optional<Image> load_pnm_file(const std::string& path, std::string* err) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    if (err) *err = "cannot open " + path;
    return std::nullopt;
  }
  std::string magic;
  in >> magic;
  int64_t c = magic == "P6" ? 3 : magic == "P5" ? 1 : 0;
  if (c == 0) {
    if (err) *err = "unsupported pnm magic in " + path;
    return std::nullopt;
  }
  auto next_int = [&]() {
    int64_t v;
    while (in >> std::ws && in.peek() == '#') in.ignore(4096, '\n');
    in >> v;
    return v;
  };
  int64_t w = next_int(), h = next_int(), maxv = next_int();
  in.get();  // single whitespace before raster
  if (!in || w <= 0 || h <= 0 || maxv != 255) {
    if (err) *err = "bad pnm header in " + path;
    return std::nullopt;
  }
  std::vector<unsigned char> buf(size_t(h * w * c));
  in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
  if (!in) {
    if (err) *err = "truncated pnm raster in " + path;
    return std::nullopt;
  }
  return from_rows(buf, h, w, c);
}

}  // namespace

std::optional<Image> load_image(const std::string& path, std::string* err) {
  std::string ext = lower_ext(path);
  if (ext == "png") {
#ifdef METAFEW_HAVE_PNG
    return load_png_file(path, err);
#else
    if (err) *err = "png support not built in";
    return std::nullopt;
#endif
  }
  if (ext == "jpg" || ext == "jpeg") {
#ifdef METAFEW_HAVE_JPEG
    return load_jpeg_file(path, err);
#else
    if (err) *err = "jpeg support not built in";
    return std::nullopt;
#endif
  }
  if (ext == "ppm" || ext == "pgm") return load_pnm_file(path, err);
  if (err) *err = "unsupported image extension ." + ext;
  return std::nullopt;
}

Image resize_bilinear(const Image& im, int64_t out_h, int64_t out_w) {
  if (im.height == out_h && im.width == out_w) return im;
  Image out;
  out.channels = im.channels;
  out.height = out_h;
  out.width = out_w;
  out.data.resize(size_t(im.channels * out_h * out_w));
  double sy = double(im.height) / double(out_h), sx = double(im.width) / double(out_w);
  for (int64_t c = 0; c < im.channels; ++c)
    for (int64_t y = 0; y < out_h; ++y) {
      double fy = (double(y) + 0.5) * sy - 0.5;
      int64_t y0 = std::clamp<int64_t>(int64_t(std::floor(fy)), 0, im.height - 1);
      int64_t y1 = std::min(y0 + 1, im.height - 1);
      double wy = std::clamp(fy - double(y0), 0.0, 1.0);
      for (int64_t x = 0; x < out_w; ++x) {
        double fx = (double(x) + 0.5) * sx - 0.5;
        int64_t x0 = std::clamp<int64_t>(int64_t(std::floor(fx)), 0, im.width - 1);
        int64_t x1 = std::min(x0 + 1, im.width - 1);
        double wx = std::clamp(fx - double(x0), 0.0, 1.0);
        double v = (1 - wy) * ((1 - wx) * im.at(c, y0, x0) + wx * im.at(c, y0, x1)) +
                   wy * ((1 - wx) * im.at(c, y1, x0) + wx * im.at(c, y1, x1));
        out.data[size_t((c * out_h + y) * out_w + x)] = float(v);
      }
    }
  return out;
}

Image convert_channels(const Image& im, int64_t channels) {
  if (im.channels == channels) return im;
  Image out;
  out.channels = channels;
  out.height = im.height;
  out.width = im.width;
  out.data.resize(size_t(channels * im.height * im.width));
  int64_t hw = im.height * im.width;
  if (channels == 1) {
    for (int64_t i = 0; i < hw; ++i) {
      float s = 0;
      for (int64_t c = 0; c < im.channels; ++c) s += im.data[size_t(c * hw + i)];
      out.data[size_t(i)] = s / float(im.channels);
    }
  } else {
    // replicate the mean channel
    for (int64_t i = 0; i < hw; ++i) {
      float s = 0;
      for (int64_t c = 0; c < im.channels; ++c) s += im.data[size_t(c * hw + i)];
      s /= float(im.channels);
      for (int64_t c = 0; c < channels; ++c) out.data[size_t(c * hw + i)] = s;
    }
    if (im.channels >= 3 && channels >= 3) {
      for (int64_t c = 0; c < 3; ++c)
        std::copy(im.data.begin() + c * hw, im.data.begin() + (c + 1) * hw,
                  out.data.begin() + c * hw);
    }
  }
  return out;
}

bool save_ppm(const std::string& path, const Image& im, std::string* err) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    if (err) *err = "cannot write " + path;
    return false;
  }
  bool gray = im.channels == 1;
  out << (gray ? "P5" : "P6") << "\n" << im.width << " " << im.height << "\n255\n";
  int64_t c_out = gray ? 1 : 3;
  for (int64_t y = 0; y < im.height; ++y)
    for (int64_t x = 0; x < im.width; ++x)
      for (int64_t c = 0; c < c_out; ++c) {
        float v = im.at(std::min(c, im.channels - 1), y, x);
        out.put(char(std::clamp(int(std::lround(v * 255.0f)), 0, 255)));
      }
  return bool(out);
}

bool save_png(const std::string& path, const Image& im, std::string* err) {
#ifdef METAFEW_HAVE_PNG
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) {
    if (err) *err = "cannot write " + path;
    return false;
  }
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    std::fclose(fp);
    if (err) *err = "png encode failed for " + path;
    return false;
  }
  png_init_io(png, fp);
  bool gray = im.channels == 1;
  png_set_IHDR(png, info, png_uint_32(im.width), png_uint_32(im.height), 8,
               gray ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  int64_t c_out = gray ? 1 : 3;
  std::vector<unsigned char> row(size_t(im.width * c_out));
  for (int64_t y = 0; y < im.height; ++y) {
    for (int64_t x = 0; x < im.width; ++x)
      for (int64_t c = 0; c < c_out; ++c) {
        float v = im.at(std::min(c, im.channels - 1), y, x);
        row[size_t(x * c_out + c)] =
            (unsigned char)(std::clamp(int(std::lround(v * 255.0f)), 0, 255));
      }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
  return true;
#else
  return save_ppm(path, im, err);
#endif
}

}  // namespace metafew
