#include "dermaug/image_io.hpp"

#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <memory>

#include <jpeglib.h>
#include <png.h>

#include "dermaug/error.hpp"

namespace dermaug {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f != nullptr) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw ValidationError("cannot open image " + path.string());
  return f;
}

torch::Tensor from_interleaved(const std::vector<unsigned char>& pixels, int height, int width) {
  auto hwc = torch::from_blob(const_cast<unsigned char*>(pixels.data()), {height, width, 3},
                              torch::kUInt8)
                 .clone();
  return hwc.permute({2, 0, 1}).to(torch::kFloat32).div(255.0).contiguous();
}

torch::Tensor read_png(const std::filesystem::path& path) {
  auto file = open_file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw StageError("libpng initialisation failed");
  }
  std::vector<unsigned char> pixels;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ValidationError("corrupt PNG " + path.string());
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  const int width = static_cast<int>(png_get_image_width(png, info));
  const int height = static_cast<int>(png_get_image_height(png, info));
  pixels.resize(static_cast<std::size_t>(width) * height * 3);
  std::vector<png_bytep> rows(static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y) rows[y] = pixels.data() + static_cast<std::size_t>(y) * width * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return from_interleaved(pixels, height, width);
}

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  std::longjmp(err->jump, 1);
}

torch::Tensor read_jpeg(const std::filesystem::path& path) {
  auto file = open_file(path, "rb");
  jpeg_decompress_struct cinfo{};
  JpegErrorManager err{};
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  std::vector<unsigned char> pixels;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw ValidationError("corrupt JPEG " + path.string());
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, file.get());
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  const int width = static_cast<int>(cinfo.output_width);
  const int height = static_cast<int>(cinfo.output_height);
  pixels.resize(static_cast<std::size_t>(width) * height * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = pixels.data() + static_cast<std::size_t>(cinfo.output_scanline) * width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return from_interleaved(pixels, height, width);
}

}  // namespace

torch::Tensor read_image(const std::filesystem::path& path) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw ValidationError("cannot open image " + path.string());
  unsigned char sig[4] = {0, 0, 0, 0};
  probe.read(reinterpret_cast<char*>(sig), sizeof(sig));
  if (sig[0] == 0x89 && sig[1] == 'P' && sig[2] == 'N' && sig[3] == 'G') return read_png(path);
  if (sig[0] == 0xFF && sig[1] == 0xD8) return read_jpeg(path);
  throw ValidationError("unsupported image format: " + path.string());
}

torch::Tensor quantize_8bit(const torch::Tensor& chw) {
  return chw.detach().clamp(0.0, 1.0).mul(255.0).round().div(255.0);
}

void write_png(const std::filesystem::path& path, const torch::Tensor& chw) {
  if (chw.dim() != 3 || chw.size(0) != 3) {
    throw ValidationError("write_png expects a [3,H,W] tensor");
  }
  const int height = static_cast<int>(chw.size(1));
  const int width = static_cast<int>(chw.size(2));
  auto bytes = chw.detach()
                   .to(torch::kFloat32)
                   .clamp(0.0, 1.0)
                   .mul(255.0)
                   .round()
                   .to(torch::kUInt8)
                   .permute({1, 2, 0})
                   .contiguous();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw StageError("cannot write image " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr) {
    png_destroy_write_struct(&png, &info);
    throw StageError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw StageError("failed writing PNG " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  auto* base = bytes.data_ptr<std::uint8_t>();
  for (int y = 0; y < height; ++y) {
    png_write_row(png, base + static_cast<std::size_t>(y) * width * 3);
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

torch::Tensor resize_square(const torch::Tensor& chw, int size) {
  if (chw.size(1) == size && chw.size(2) == size) return chw;
  namespace F = torch::nn::functional;
  return F::interpolate(chw.unsqueeze(0), F::InterpolateFuncOptions()
                                              .size(std::vector<std::int64_t>{size, size})
                                              .mode(torch::kBilinear)
                                              .align_corners(false)
                                              .antialias(true))
      .squeeze(0)
      .clamp(0.0, 1.0);
}

torch::Tensor ImageStore::load(const std::filesystem::path& path, int size) {
  const std::string key = path.lexically_normal().string();
  {
    std::lock_guard lock(mutex_);
    if (!logged_[key]) {
      logged_[key] = true;
      log_.push_back(key);
    }
    auto it = cache_.find({key, size});
    if (it != cache_.end()) return it->second;
  }
  auto img = resize_square(read_image(path), size);
  std::lock_guard lock(mutex_);
  cache_.emplace(std::make_pair(key, size), img);
  return img;
}

torch::Tensor ImageStore::load_batch(const std::vector<std::filesystem::path>& paths, int size) {
  if (paths.empty()) return torch::empty({0, 3, size, size});
  std::vector<torch::Tensor> images;
  images.reserve(paths.size());
  for (const auto& p : paths) images.push_back(load(p, size));
  return torch::stack(images);
}

std::vector<std::string> ImageStore::reads() const {
  std::lock_guard lock(mutex_);
  return log_;
}

void ImageStore::reset_log() {
  std::lock_guard lock(mutex_);
  log_.clear();
  logged_.clear();
}

}  // namespace dermaug
