#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mscd/io.hpp"

using mscd::Tensor;
using TD = Tensor<double>;
using TF = Tensor<float>;

namespace {
std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}
}  // namespace

TEST(Mmct, RoundTripBothDtypes) {
  TF f = TF::from_data({2, 3}, {1.5f, -2.25f, 0.f, 1e-7f, 3e8f, -0.5f});
  TD d = TD::from_data({1, 2, 2}, {1e-15, -2.5, 3.125, 4.0});
  for (int pass = 0; pass < 2; ++pass) {
    std::stringstream ss;
    if (pass == 0) {
      mscd::write_mmct(ss, mscd::to_raw(f));
      TF back = mscd::from_raw<float>(mscd::read_mmct(ss));
      ASSERT_EQ(back.shape(), f.shape());
      for (int64_t i = 0; i < 6; ++i) EXPECT_EQ(back.at(i), f.at(i));
    } else {
      mscd::write_mmct(ss, mscd::to_raw(d));
      TD back = mscd::from_raw<double>(mscd::read_mmct(ss));
      for (int64_t i = 0; i < 4; ++i) EXPECT_EQ(back.at(i), d.at(i));
    }
  }
}

TEST(Mmct, HeaderLayout) {
  TF f = TF::from_data({2}, {1.f, 2.f});
  std::stringstream ss;
  mscd::write_mmct(ss, mscd::to_raw(f));
  const std::string bytes = ss.str();
  ASSERT_GE(bytes.size(), size_t(12));
  EXPECT_EQ(bytes.substr(0, 4), "MMCT");
  EXPECT_EQ(uint8_t(bytes[4]), 1);  // version lo
  EXPECT_EQ(uint8_t(bytes[5]), 0);  // version hi
  EXPECT_EQ(uint8_t(bytes[6]), 0);  // dtype f32
  EXPECT_EQ(uint8_t(bytes[7]), 1);  // rank
  EXPECT_EQ(uint8_t(bytes[8]), 2);  // dim lo byte
}

TEST(Mmct, TruncationAndBadMagic) {
  TF f = TF::from_data({4}, {1, 2, 3, 4});
  std::stringstream ss;
  mscd::write_mmct(ss, mscd::to_raw(f));
  std::string bytes = ss.str();
  std::stringstream cut(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(mscd::read_mmct(cut, "cut"), mscd::DataError);
  bytes[0] = 'X';
  std::stringstream bad(bytes);
  EXPECT_THROW(mscd::read_mmct(bad, "bad"), mscd::DataError);
}

TEST(Checkpoint, RoundTrip) {
  const std::string path = tmp_path("io_test.msck");
  mscd::NamedRawTensors entries;
  entries.emplace_back("a.weight", mscd::to_raw(TF::from_data({2, 2}, {1, 2, 3, 4})));
  entries.emplace_back("b.gate", mscd::to_raw(TF::from_data({1}, {-0.25f})));
  mscd::write_checkpoint(path, entries);
  auto back = mscd::read_checkpoint(path);
  ASSERT_EQ(back.size(), size_t(2));
  EXPECT_EQ(back[0].first, "a.weight");
  EXPECT_EQ(back[1].first, "b.gate");
  EXPECT_EQ(back[0].second.bytes, entries[0].second.bytes);
  std::remove(path.c_str());
  EXPECT_THROW(mscd::read_checkpoint(path), mscd::DataError);
}

TEST(Images, PgmPpmRoundTrip) {
  mscd::GrayImage g{3, 2, {0, 127, 128, 255, 10, 200}};
  const std::string gp = tmp_path("io_test.pgm");
  mscd::write_pgm(gp, g);
  mscd::GrayImage g2 = mscd::read_pgm(gp);
  EXPECT_EQ(g2.width, 3);
  EXPECT_EQ(g2.height, 2);
  EXPECT_EQ(g2.pixels, g.pixels);

  mscd::RgbImage c{2, 2, {255, 0, 0, 0, 255, 0, 0, 0, 255, 9, 8, 7}};
  const std::string cp = tmp_path("io_test.ppm");
  mscd::write_ppm(cp, c);
  mscd::RgbImage c2 = mscd::read_ppm(cp);
  EXPECT_EQ(c2.pixels, c.pixels);
  std::remove(gp.c_str());
  std::remove(cp.c_str());
}

TEST(Images, TruncatedNamesPath) {
  const std::string path = tmp_path("io_trunc.pgm");
  {
    mscd::GrayImage g{4, 4, std::vector<uint8_t>(16, 7)};
    mscd::write_pgm(path, g);
    std::filesystem::resize_file(path, 10);
  }
  try {
    mscd::read_pgm(path);
    FAIL() << "expected DataError";
  } catch (const mscd::DataError& e) {
    EXPECT_NE(std::string(e.what()).find(path), std::string::npos);
  }
  std::remove(path.c_str());
}
