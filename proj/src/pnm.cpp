#include "xmreid/pnm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

namespace xmreid {

namespace {

unsigned char to_byte(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// Next header token, skipping whitespace and '#' comments.
std::string header_token(std::istream& in, const std::filesystem::path& path) {
  std::string tok;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  if (tok.empty()) throw FormatError(path.string() + ": truncated header");
  return tok;
}

long header_number(std::istream& in, const std::filesystem::path& path, const char* field) {
  const std::string tok = header_token(in, path);
  try {
    std::size_t used = 0;
    const long v = std::stol(tok, &used);
    if (used != tok.size() || v <= 0) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw FormatError(path.string() + ": bad " + field + " '" + tok + "'");
  }
}

}  // namespace

void write_pnm(const std::filesystem::path& path, const ImageD& img) {
  const Index c = img.channels();
  if (c != 1 && c != 3) throw FormatError(path.string() + ": only 1 or 3 channels can be written, got " + std::to_string(c));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << (c == 1 ? "P5" : "P6") << '\n' << img.width() << ' ' << img.height() << "\n255\n";
  std::vector<unsigned char> buf;
  buf.reserve(static_cast<std::size_t>(img.height() * img.width() * c));
  for (Index y = 0; y < img.height(); ++y)
    for (Index x = 0; x < img.width(); ++x)
      for (Index ch = 0; ch < c; ++ch) buf.push_back(to_byte(img(y, x, ch)));
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw FormatError("write failed: " + path.string());
}

ImageD read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("missing image file: " + path.string());
  const std::string magic = header_token(in, path);
  Index channels;
  if (magic == "P5")
    channels = 1;
  else if (magic == "P6")
    channels = 3;
  else
    throw FormatError(path.string() + ": unsupported magic '" + magic + "'");
  const long w = header_number(in, path, "width");
  const long h = header_number(in, path, "height");
  const long maxval = header_number(in, path, "maxval");
  if (maxval != 255) throw FormatError(path.string() + ": maxval must be 255");

  std::vector<unsigned char> buf(static_cast<std::size_t>(w * h * channels));
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (in.gcount() != static_cast<std::streamsize>(buf.size())) throw FormatError(path.string() + ": truncated pixel data");

  ImageD img(h, w, channels);
  std::size_t i = 0;
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      for (Index ch = 0; ch < channels; ++ch) img(y, x, ch) = buf[i++] / 255.0;
  return img;
}

ImageD quantize8(const ImageD& img) {
  ImageD out = img;
  for (auto& p : out.planes) p = p.unaryExpr([](double v) { return to_byte(v) / 255.0; });
  return out;
}

}  // namespace xmreid
