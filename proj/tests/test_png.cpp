#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "dgseg/png_io.hpp"
#include "dgseg/rng.hpp"
#include "testutil.hpp"

using namespace dgseg;

namespace {

ImageU8 random_u8(std::uint64_t seed, int h, int w, int channels) {
  Rng rng(seed);
  ImageU8 img;
  img.width = w;
  img.height = h;
  img.channels = channels;
  img.data.resize(static_cast<std::size_t>(h) * w * channels);
  for (auto& b : img.data)
    b = static_cast<std::uint8_t>(rng.uniform_int(256));
  return img;
}

}  // namespace

TEST_CASE("png: rgb round-trip is lossless") {
  const auto dir = testutil::scratch_dir("png_rgb");
  const auto img = random_u8(1, 13, 17, 3);
  write_png(dir + "/a.png", img);
  const auto back = read_png(dir + "/a.png");
  CHECK(back.width == img.width);
  CHECK(back.height == img.height);
  CHECK(back.channels == 3);
  CHECK(back.data == img.data);
  std::filesystem::remove_all(dir);
}

TEST_CASE("png: grayscale round-trip is lossless") {
  const auto dir = testutil::scratch_dir("png_gray");
  const auto img = random_u8(2, 9, 31, 1);
  write_png(dir + "/g.png", img);
  const auto back = read_png(dir + "/g.png");
  CHECK(back.channels == 1);
  CHECK(back.data == img.data);
  std::filesystem::remove_all(dir);
}

TEST_CASE("png: identical pixels produce identical files") {
  const auto dir = testutil::scratch_dir("png_det");
  const auto img = random_u8(3, 16, 16, 3);
  write_png(dir + "/a.png", img);
  write_png(dir + "/b.png", img);
  CHECK(testutil::read_file(dir + "/a.png") ==
        testutil::read_file(dir + "/b.png"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("png: reading a non-png file fails") {
  const auto dir = testutil::scratch_dir("png_bad");
  {
    std::ofstream out(dir + "/junk.png", std::ios::binary);
    out << "this is not a png";
  }
  CHECK_THROWS_AS(read_png(dir + "/junk.png"), std::exception);
  CHECK_THROWS_AS(read_png(dir + "/missing.png"), std::exception);
  std::filesystem::remove_all(dir);
}

TEST_CASE("png: image <-> float conversion rounds consistently") {
  Image im = Image::zero(2, 2);
  im.c[0](0, 0) = 1.0;
  im.c[1](0, 1) = 0.5;
  im.c[2](1, 0) = 0.25;
  const auto u8 = to_u8(im);
  CHECK(u8.at(0, 0, 0) == 255);
  CHECK(u8.at(0, 1, 1) == 128);  // round(0.5*255) = 128
  const Image back = from_u8(u8);
  CHECK(back.c[0](0, 0) == doctest::Approx(1.0));
  // One u8 quantization step of error at most.
  CHECK(std::abs(back.c[1](0, 1) - 0.5) <= 0.5 / 255.0);
}

TEST_CASE("png: label maps survive the byte round-trip bit-exactly") {
  Rng rng(4);
  LabelMap lm = testutil::random_labels(rng, 11, 7, 5, 0.1);
  const auto dir = testutil::scratch_dir("png_lab");
  write_png(dir + "/l.png", labels_to_u8(lm));
  const LabelMap back = labels_from_u8(read_png(dir + "/l.png"));
  CHECK((back - lm).cwiseAbs().maxCoeff() == 0);
  std::filesystem::remove_all(dir);
}

TEST_CASE("png: labels out of byte range are rejected") {
  LabelMap lm(1, 1);
  lm(0, 0) = 300;
  CHECK_THROWS_AS(labels_to_u8(lm), std::invalid_argument);
}
