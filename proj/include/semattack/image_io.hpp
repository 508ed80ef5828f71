#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <torch/torch.h>

namespace semattack {

/// Writes a [3, H, W] (or [H, W] grayscale) tensor in [0, 1] as an 8-bit PNG.
/// Key/value pairs are stored as tEXt chunks.
void write_png(const std::filesystem::path& path, const torch::Tensor& image,
               const std::map<std::string, std::string>& text = {});

/// Reads an 8-bit RGB PNG into a float [3, H, W] tensor in [0, 1].
torch::Tensor read_png(const std::filesystem::path& path);

/// Tiles [N, 3, H, W] images into a grid with `cols` columns and a 1px border.
torch::Tensor tile_images(const torch::Tensor& batch, int cols);

/// Maps a [H, W] map in [0, 1] onto a blue-to-red colour ramp, [3, H, W].
torch::Tensor colorize(const torch::Tensor& heatmap);

}  // namespace semattack
