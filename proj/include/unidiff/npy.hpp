#pragma once

#include <filesystem>

#include "unidiff/tensor.hpp"

namespace unidiff {

// Little-endian float64 .npy (format 1.0, C order) so arrays open directly in numpy.
void write_npy(const std::filesystem::path& path, const nn::Tensor& tensor);
nn::Tensor read_npy(const std::filesystem::path& path);

}  // namespace unidiff
