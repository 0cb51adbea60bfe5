#include "dgseg/png_io.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace dgseg {

namespace {

constexpr unsigned char kSig[8] = {137, 80, 78, 71, 13, 10, 26, 10};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

void put_chunk(std::vector<std::uint8_t>& out, const char type[4],
               const std::vector<std::uint8_t>& payload) {
  put_u32(out, static_cast<std::uint32_t>(payload.size()));
  const std::size_t crc_start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  const auto crc = crc32(0L, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start));
  put_u32(out, static_cast<std::uint32_t>(crc));
}

std::vector<std::uint8_t> zlib_compress(const std::vector<std::uint8_t>& in) {
  uLongf bound = compressBound(static_cast<uLong>(in.size()));
  std::vector<std::uint8_t> out(bound);
  if (compress2(out.data(), &bound, in.data(), static_cast<uLong>(in.size()),
                6) != Z_OK)
    throw std::runtime_error("png write: deflate failed");
  out.resize(bound);
  return out;
}

std::vector<std::uint8_t> zlib_decompress(const std::uint8_t* p, std::size_t n,
                                          std::size_t expected) {
  std::vector<std::uint8_t> out(expected);
  uLongf out_len = static_cast<uLongf>(expected);
  if (uncompress(out.data(), &out_len, p, static_cast<uLong>(n)) != Z_OK ||
      out_len != expected)
    throw std::runtime_error("png read: inflate failed");
  return out;
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return (static_cast<std::uint32_t>(p[0]) << 24) |
         (static_cast<std::uint32_t>(p[1]) << 16) |
         (static_cast<std::uint32_t>(p[2]) << 8) | p[3];
}

std::uint8_t paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return static_cast<std::uint8_t>(a);
  if (pb <= pc) return static_cast<std::uint8_t>(b);
  return static_cast<std::uint8_t>(c);
}

}  // namespace

void write_png(const std::string& path, const ImageU8& img) {
  if (img.width <= 0 || img.height <= 0)
    throw std::invalid_argument("png write: empty image");
  if (img.channels != 1 && img.channels != 3)
    throw std::invalid_argument("png write: channels must be 1 or 3");
  if (img.data.size() != static_cast<std::size_t>(img.width) * img.height * img.channels)
    throw std::invalid_argument("png write: buffer size mismatch");

  std::vector<std::uint8_t> ihdr;
  put_u32(ihdr, static_cast<std::uint32_t>(img.width));
  put_u32(ihdr, static_cast<std::uint32_t>(img.height));
  ihdr.push_back(8);
  ihdr.push_back(img.channels == 1 ? 0 : 2);
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);

  const std::size_t stride = static_cast<std::size_t>(img.width) * img.channels;
  std::vector<std::uint8_t> raw;
  raw.reserve((stride + 1) * static_cast<std::size_t>(img.height));
  for (int y = 0; y < img.height; ++y) {
    raw.push_back(0);
    const auto* row = img.data.data() + static_cast<std::size_t>(y) * stride;
    raw.insert(raw.end(), row, row + stride);
  }

  std::vector<std::uint8_t> out(kSig, kSig + 8);
  put_chunk(out, "IHDR", ihdr);
  put_chunk(out, "IDAT", zlib_compress(raw));
  put_chunk(out, "IEND", {});

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("png write: cannot open " + path);
  f.write(reinterpret_cast<const char*>(out.data()),
          static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("png write: write failed for " + path);
}

ImageU8 read_png(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("png read: cannot open " + path);
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)),
                                std::istreambuf_iterator<char>());
  if (buf.size() < 8 || std::memcmp(buf.data(), kSig, 8) != 0)
    throw std::runtime_error("png read: not a png file: " + path);

  ImageU8 img;
  int bit_depth = 0;
  std::vector<std::uint8_t> idat;
  std::size_t pos = 8;
  bool done = false;
  while (!done) {
    if (pos + 8 > buf.size())
      throw std::runtime_error("png read: truncated file: " + path);
    const std::uint32_t len = get_u32(buf.data() + pos);
    const char* type = reinterpret_cast<const char*>(buf.data() + pos + 4);
    if (pos + 12 + len > buf.size())
      throw std::runtime_error("png read: truncated chunk: " + path);
    const std::uint8_t* payload = buf.data() + pos + 8;
    if (std::memcmp(type, "IHDR", 4) == 0) {
      img.width = static_cast<int>(get_u32(payload));
      img.height = static_cast<int>(get_u32(payload + 4));
      bit_depth = payload[8];
      const int color_type = payload[9];
      if (bit_depth != 8)
        throw std::runtime_error("png read: only bit depth 8 supported");
      if (color_type == 0)
        img.channels = 1;
      else if (color_type == 2)
        img.channels = 3;
      else
        throw std::runtime_error(
            "png read: only grayscale and rgb supported");
      if (payload[12] != 0)
        throw std::runtime_error("png read: interlaced png not supported");
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), payload, payload + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      done = true;
    }
    pos += 12 + len;
  }
  if (img.width <= 0 || img.height <= 0)
    throw std::runtime_error("png read: missing IHDR in " + path);

  const std::size_t stride = static_cast<std::size_t>(img.width) * img.channels;
  const std::size_t expected = (stride + 1) * static_cast<std::size_t>(img.height);
  const auto raw = zlib_decompress(idat.data(), idat.size(), expected);

  img.data.resize(stride * static_cast<std::size_t>(img.height));
  const int bpp = img.channels;
  for (int y = 0; y < img.height; ++y) {
    const std::uint8_t filter = raw[(stride + 1) * static_cast<std::size_t>(y)];
    const std::uint8_t* src = raw.data() + (stride + 1) * static_cast<std::size_t>(y) + 1;
    std::uint8_t* dst = img.data.data() + stride * static_cast<std::size_t>(y);
    const std::uint8_t* prev =
        y > 0 ? img.data.data() + stride * static_cast<std::size_t>(y - 1) : nullptr;
    for (std::size_t x = 0; x < stride; ++x) {
      const int a = x >= static_cast<std::size_t>(bpp) ? dst[x - bpp] : 0;
      const int b = prev ? prev[x] : 0;
      const int c = (prev && x >= static_cast<std::size_t>(bpp)) ? prev[x - bpp] : 0;
      int v = src[x];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += paeth(a, b, c); break;
        default:
          throw std::runtime_error("png read: bad filter type in " + path);
      }
      dst[x] = static_cast<std::uint8_t>(v & 0xff);
    }
  }
  return img;
}

ImageU8 to_u8(const Image& img) {
  ImageU8 out;
  out.height = static_cast<int>(img.height());
  out.width = static_cast<int>(img.width());
  out.channels = 3;
  out.data.resize(static_cast<std::size_t>(out.height) * out.width * 3);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      for (int ch = 0; ch < 3; ++ch) {
        const Scalar v = std::min(1.0, std::max(0.0, img.c[static_cast<std::size_t>(ch)](y, x)));
        out.at(y, x, ch) = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
  return out;
}

Image from_u8(const ImageU8& img) {
  if (img.channels != 3)
    throw std::invalid_argument("from_u8: expected 3-channel image");
  Image out = Image::zero(img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int ch = 0; ch < 3; ++ch)
        out.c[static_cast<std::size_t>(ch)](y, x) = img.at(y, x, ch) / 255.0;
  return out;
}

ImageU8 labels_to_u8(const LabelMap& labels) {
  ImageU8 out;
  out.height = static_cast<int>(labels.rows());
  out.width = static_cast<int>(labels.cols());
  out.channels = 1;
  out.data.resize(static_cast<std::size_t>(out.height) * out.width);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x) {
      const int v = labels(y, x);
      if (v < 0 || v > 255)
        throw std::invalid_argument("labels_to_u8: label out of byte range");
      out.at(y, x, 0) = static_cast<std::uint8_t>(v);
    }
  return out;
}

LabelMap labels_from_u8(const ImageU8& img) {
  if (img.channels != 1)
    throw std::invalid_argument("labels_from_u8: expected grayscale image");
  LabelMap out(img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) out(y, x) = img.at(y, x, 0);
  return out;
}

}  // namespace dgseg
