#include "semattack/image_io.hpp"

#include <png.h>

#include <cstdio>
#include <memory>
#include <stdexcept>
#include <vector>

namespace semattack {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { if (f) std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

void write_png(const std::filesystem::path& path, const torch::Tensor& image,
               const std::map<std::string, std::string>& text) {
  torch::Tensor img = image.detach().to(torch::kCPU, torch::kFloat32);
  if (img.dim() == 2) img = img.unsqueeze(0).expand({3, img.size(0), img.size(1)});
  if (img.dim() != 3 || img.size(0) != 3) {
    throw std::invalid_argument("write_png: expected [3, H, W] or [H, W] tensor");
  }
  const int h = static_cast<int>(img.size(1));
  const int w = static_cast<int>(img.size(2));
  // HWC uint8, rounding to the nearest level.
  torch::Tensor bytes = (img.clamp(0.0, 1.0) * 255.0).round().to(torch::kUInt8)
                            .permute({1, 2, 0}).contiguous();

  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw std::runtime_error("write_png: cannot open " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("write_png: libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("write_png: libpng error writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  std::vector<png_text> chunks;
  std::vector<std::string> storage;
  storage.reserve(text.size() * 2);
  for (const auto& [k, v] : text) {
    storage.push_back(k);
    storage.push_back(v);
  }
  for (std::size_t i = 0; i < text.size(); ++i) {
    png_text t{};
    t.compression = PNG_TEXT_COMPRESSION_NONE;
    t.key = storage[2 * i].data();
    t.text = storage[2 * i + 1].data();
    chunks.push_back(t);
  }
  if (!chunks.empty()) png_set_text(png, info, chunks.data(), static_cast<int>(chunks.size()));
  png_write_info(png, info);
  auto* base = bytes.data_ptr<std::uint8_t>();
  for (int y = 0; y < h; ++y) {
    png_write_row(png, base + static_cast<std::ptrdiff_t>(y) * w * 3);
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

torch::Tensor read_png(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw std::runtime_error("read_png: cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("read_png: libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("read_png: libpng error reading " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const auto w = png_get_image_width(png, info);
  const auto h = png_get_image_height(png, info);
  const auto color = png_get_color_type(png, info);
  const auto depth = png_get_bit_depth(png, info);
  if (depth != 8 || color != PNG_COLOR_TYPE_RGB) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("read_png: only 8-bit RGB supported: " + path.string());
  }
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(w) * h * 3);
  for (png_uint_32 y = 0; y < h; ++y) {
    png_read_row(png, buf.data() + static_cast<std::size_t>(y) * w * 3, nullptr);
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  // Same expression the renderer uses, so stored images decode bit-exactly.
  torch::Tensor out = torch::empty({3, static_cast<long>(h), static_cast<long>(w)}, torch::kFloat32);
  auto acc = out.accessor<float, 3>();
  for (png_uint_32 y = 0; y < h; ++y) {
    for (png_uint_32 x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        acc[c][y][x] = static_cast<float>(buf[(static_cast<std::size_t>(y) * w + x) * 3 + c]) / 255.0f;
      }
    }
  }
  return out;
}

torch::Tensor tile_images(const torch::Tensor& batch, int cols) {
  const auto n = batch.size(0);
  const auto h = batch.size(2);
  const auto w = batch.size(3);
  const auto rows = (n + cols - 1) / cols;
  torch::Tensor grid = torch::ones({3, rows * (h + 1) + 1, cols * (w + 1) + 1});
  for (long i = 0; i < n; ++i) {
    const long r = i / cols;
    const long c = i % cols;
    grid.index_put_({torch::indexing::Slice(),
                     torch::indexing::Slice(1 + r * (h + 1), 1 + r * (h + 1) + h),
                     torch::indexing::Slice(1 + c * (w + 1), 1 + c * (w + 1) + w)},
                    batch[i].detach().to(torch::kFloat32));
  }
  return grid;
}

torch::Tensor colorize(const torch::Tensor& heatmap) {
  torch::Tensor v = heatmap.detach().to(torch::kFloat32).clamp(0.0, 1.0);
  torch::Tensor r = (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0);
  torch::Tensor g = (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0);
  torch::Tensor b = (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0);
  return torch::stack({r, g, b});
}

}  // namespace semattack
