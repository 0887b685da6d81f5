// Binary 8-bit PGM (P5) and PPM (P6) files. Pixel values are stored as
// round(255 * v) with v clamped to [0, 1].
#pragma once

#include "xmreid/wavelet.hpp"

#include <filesystem>
#include <stdexcept>

namespace xmreid {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One channel writes P5, three channels write P6.
void write_pnm(const std::filesystem::path& path, const ImageD& img);

// P5 files load as one channel, P6 as three.
ImageD read_pnm(const std::filesystem::path& path);

// Rounds every value to the nearest multiple of 1/255 inside [0, 1], the
// set of values a PNM round trip preserves exactly.
ImageD quantize8(const ImageD& img);

}  // namespace xmreid
