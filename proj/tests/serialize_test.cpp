#include "covprop/serialize.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "covprop/dataset.hpp"
#include "covprop/network.hpp"

namespace covprop {
namespace {

Image random_image(int h, int w, int c, std::uint64_t seed) {
  Image img(h, w, c);
  NormalRng rng(seed);
  for (double& v : img.data) v = rng.normal();
  return img;
}

void expect_error(ErrorKind kind, const std::string& needle, const std::string& bytes) {
  try {
    load_network(bytes);
    FAIL() << "expected an error mentioning '" << needle << "'";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), kind) << e.what();
    EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
  }
}

TEST(RoundTrip, LenetForwardIsBitExactAndBytesAreStable) {
  const NetworkSpec net = build_lenet_small(Shape{8, 8, 1}, 4, 42);
  const std::string bytes = save_network(net);
  const NetworkSpec back = load_network(bytes);

  ASSERT_EQ(back.layers.size(), net.layers.size());
  EXPECT_EQ(back.class_count, net.class_count);
  EXPECT_EQ(back.input_shape, net.input_shape);
  for (std::size_t j = 0; j < net.layers.size(); ++j) {
    EXPECT_STREQ(back.layers[j].kind_name(), net.layers[j].kind_name());
  }
  for (std::uint64_t s = 0; s < 3; ++s) {
    const Image x = random_image(8, 8, 1, 100 + s);
    const Vector a = forward(net, x);
    const Vector b = forward(back, x);
    for (std::size_t c = 0; c < a.size(); ++c) EXPECT_EQ(a[c], b[c]);
  }
  // serializing the loaded net reproduces the original bytes, so weights
  // survived bit-for-bit
  EXPECT_EQ(save_network(back), bytes);
}

TEST(RoundTrip, ResidualAndNormalizeLayersSurvive) {
  NetworkSpec net = build_residual_small(Shape{6, 6, 2}, 3, 2, 7);
  NormalizeLayer norm;
  norm.enabled = true;
  norm.mu_prime = Vector(2);
  norm.sigma_prime = Vector(2);
  norm.mu_prime[0] = 0.5;
  norm.mu_prime[1] = -0.25;
  norm.sigma_prime[0] = 2.0;
  norm.sigma_prime[1] = 0.5;
  net.layers.insert(net.layers.begin(), LayerSpec{norm});
  net.validate();

  const std::string bytes = save_network(net);
  const NetworkSpec back = load_network(bytes);
  EXPECT_EQ(save_network(back), bytes);
  ASSERT_TRUE(std::holds_alternative<NormalizeLayer>(back.layers[0].node));
  const auto& n0 = std::get<NormalizeLayer>(back.layers[0].node);
  EXPECT_TRUE(n0.enabled);
  EXPECT_EQ(n0.sigma_prime[1], 0.5);

  const Image x = random_image(6, 6, 2, 9);
  const Vector a = forward(net, x);
  const Vector b = forward(back, x);
  for (std::size_t c = 0; c < a.size(); ++c) EXPECT_EQ(a[c], b[c]);
}

TEST(LoadErrors, BadMagicIsAFormatError) {
  std::string bytes = save_network(build_lenet_small(Shape{4, 4, 1}, 2, 1));
  bytes[0] = 'X';
  expect_error(ErrorKind::format, "magic", bytes);
}

TEST(LoadErrors, UnsupportedVersionIsAFormatError) {
  std::string bytes = save_network(build_lenet_small(Shape{4, 4, 1}, 2, 1));
  bytes[4] = 9;  // version field, little endian
  expect_error(ErrorKind::format, "version", bytes);
}

TEST(LoadErrors, TruncatedPayloadIsAFormatError) {
  const std::string bytes = save_network(build_lenet_small(Shape{4, 4, 1}, 2, 1));
  expect_error(ErrorKind::format, "truncated", bytes.substr(0, bytes.size() - 17));
  expect_error(ErrorKind::format, "truncated", bytes.substr(0, 10));
  expect_error(ErrorKind::format, "truncated", "CV");
}

TEST(LoadErrors, TrailingBytesAreAFormatError) {
  std::string bytes = save_network(build_lenet_small(Shape{4, 4, 1}, 2, 1));
  bytes.push_back('\0');
  expect_error(ErrorKind::format, "trailing", bytes);
}

TEST(LoadErrors, MetadataShapeInconsistencyIsCaught) {
  // metadata claims 5 classes but the only linear layer emits 3
  const std::string meta =
      R"({"input_shape":{"height":1,"width":1,"channels":4},"class_count":5,)"
      R"("layers":[{"kind":"flatten"},{"kind":"linear","in_dim":4,"out_dim":3}]})";
  std::string bytes;
  bytes.append("CVPR", 4);
  detail::append_u32_le(bytes, kModelFormatVersion);
  detail::append_u64_le(bytes, meta.size());
  bytes += meta;
  for (int i = 0; i < 4 * 3 + 3; ++i) detail::append_f64_le(bytes, 0.25);
  try {
    load_network(bytes);
    FAIL() << "expected a validation error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::validation) << e.what();
  }
}

TEST(LoadErrors, UnknownLayerKindIsAFormatError) {
  const std::string meta =
      R"({"input_shape":{"height":1,"width":1,"channels":2},"class_count":2,)"
      R"("layers":[{"kind":"maxpool","kernel":2}]})";
  std::string bytes;
  bytes.append("CVPR", 4);
  detail::append_u32_le(bytes, kModelFormatVersion);
  detail::append_u64_le(bytes, meta.size());
  bytes += meta;
  expect_error(ErrorKind::format, "maxpool", bytes);
}

TEST(GoldenFile, CommittedLenetLoadsAndMatchesItsBuilder) {
  const std::string path = std::string(COVPROP_SOURCE_DIR) + "/tests/data/lenet_seed0.cvpr";
  const NetworkSpec golden = load_network_file(path);
  EXPECT_EQ(golden.layers.size(), 13u);
  EXPECT_EQ(golden.class_count, 4);
  EXPECT_EQ(golden.input_shape, (Shape{8, 8, 1}));

  const NetworkSpec rebuilt = build_lenet_small(Shape{8, 8, 1}, 4, 0);
  const Image x = random_image(8, 8, 1, 2024);
  const Vector a = forward(golden, x);
  const Vector b = forward(rebuilt, x);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t c = 0; c < a.size(); ++c) EXPECT_EQ(a[c], b[c]);
}

TEST(FileIo, MissingFileIsAnIoError) {
  try {
    load_network_file("/nonexistent/model.cvpr");
    FAIL() << "expected an io error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::io);
  }
}

TEST(FileIo, SaveThenLoadThroughDisk) {
  const NetworkSpec net = build_residual_small(Shape{4, 4, 1}, 2, 1, 3);
  const std::string path =
      (std::filesystem::temp_directory_path() / "covprop_roundtrip.cvpr").string();
  save_network_file(net, path);
  const NetworkSpec back = load_network_file(path);
  EXPECT_EQ(save_network(back), save_network(net));
  std::remove(path.c_str());
}

TEST(DatasetCsv, RoundTripAndErrors) {
  const Dataset data = quadrant_dataset(12, 4);
  std::stringstream buf;
  save_dataset_csv(data, buf);
  const Dataset back = load_dataset_csv(buf);
  ASSERT_EQ(back.size(), data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    EXPECT_EQ(back[i].label, data[i].label);
    ASSERT_EQ(back[i].image.data.size(), data[i].image.data.size());
    for (std::size_t k = 0; k < data[i].image.data.size(); ++k) {
      EXPECT_EQ(back[i].image.data[k], data[i].image.data[k]);  // %.17g is lossless
    }
  }
  EXPECT_EQ(dataset_class_count(back), 4);

  std::stringstream bad1("not,a,header\n1,1,1,1,0.5\n");
  EXPECT_THROW(load_dataset_csv(bad1), Error);
  std::stringstream bad2("label,height,width,channels,pixels\n0,2,2,1,0.5,0.5\n");
  try {
    load_dataset_csv(bad2);
    FAIL() << "expected a format error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::format);
    EXPECT_NE(std::string(e.what()).find("expected 4 pixels"), std::string::npos) << e.what();
  }
}

}  // namespace
}  // namespace covprop
