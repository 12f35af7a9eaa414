#pragma once

#include <string>

#include "comatch/tensor.hpp"

namespace comatch {

// TSR1 container: magic "TSR1", u32 LE rank, rank u32 LE dims, then
// row-major float32 LE payload. Read errors name the byte offset.
void write_tensor(const std::string& path, const Tensor& t);
Tensor read_tensor(const std::string& path);

// 8-bit binary PGM (P5, maxval 255). Images load as [H,W,1] scaled to
// [0,1]; save rounds value*255 to nearest and clamps.
Tensor read_pgm(const std::string& path);
void write_pgm(const std::string& path, const Tensor& image);

}  // namespace comatch
