#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "unrollcs/tensor.hpp"

namespace unrollcs {

// 8-bit P5 PGM or 8-bit gray/RGB(A) PNG as [1,1,H,W] in [0,1]. Colour input
// is reduced to BT.601 luma (0.299 R + 0.587 G + 0.114 B).
Tensor load_image(const std::filesystem::path& path);

// Writes [1,1,H,W] (or [H,W]) clamped to [0,1] and rounded to 8 bits. The
// format follows the extension: .pgm or .png.
void save_image(const Tensor& image, const std::filesystem::path& path);

// Sorted *.pgm / *.png files of a directory.
std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir);

}  // namespace unrollcs
