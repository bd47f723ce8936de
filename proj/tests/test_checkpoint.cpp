// Copyright 2026 The icarus-kv Authors.
// SPDX-License-Identifier: Apache-2.0

#include <sstream>

#include <gtest/gtest.h>

#include "icarus/checkpoint.hpp"
#include "test_util.hpp"

namespace icarus {
namespace {

using testing::small_config;
using testing::trained_like_adapter;

TEST(Checkpoint, BaseRoundTripIsBitExact) {
  auto c = small_config();
  c.rope_theta = 12345.678;
  c.rms_eps = 3.3e-7;
  auto w = BaseWeights::init(c, 9);
  std::stringstream ss;
  save_base(ss, w);
  auto back = load_base<float>(ss);
  EXPECT_EQ(back.config(), c);
  EXPECT_EQ(back.freeze_hash(), w.freeze_hash());
}

TEST(Checkpoint, AdapterRoundTripIsBitExact) {
  auto c = small_config();
  auto a = trained_like_adapter(c, 3);
  std::stringstream ss;
  save_adapter(ss, a, c);
  auto back = load_adapter<float>(ss);
  EXPECT_EQ(back.content_hash(), a.content_hash());
  EXPECT_EQ(back.task(), a.task());
  EXPECT_EQ(back.rank(), a.rank());
}

TEST(Checkpoint, DoubleAndConventionalRoundTrip) {
  auto c = ModelConfig::toy();
  auto conv = ConventionalAdapterSetT<double>::init(c, 4, 8.0, 1, "conv");
  conv.randomize_b(2, 0.1);
  std::stringstream ss;
  save_conventional(ss, conv, c);
  auto back = load_conventional<double>(ss);
  conv.for_each([&](const std::string& name, const Tensor64& t) {
    bool seen = false;
    back.for_each([&](const std::string& n, const Tensor64& u) {
      if (n == name) {
        seen = true;
        EXPECT_TRUE(t.bit_identical(u)) << name;
      }
    });
    EXPECT_TRUE(seen) << name;
  });
}

TEST(Checkpoint, HeaderIsReadableText) {
  auto c = small_config();
  std::stringstream ss;
  save_adapter(ss, AdapterSet::init(c, 2, 4.0, 1, "probe"), c);
  std::string first;
  std::getline(ss, first);
  EXPECT_EQ(first, "icarus-checkpoint 1");
}

TEST(Checkpoint, RejectsCorruptInput) {
  auto c = small_config();
  auto w = BaseWeights::init(c, 1);
  std::stringstream ss;
  save_base(ss, w);
  std::string bytes = ss.str();

  std::stringstream wrong_kind(bytes);
  EXPECT_THROW(load_adapter<float>(wrong_kind), ConfigError);
  std::stringstream wrong_dtype(bytes);
  EXPECT_THROW(load_base<double>(wrong_dtype), ConfigError);
  std::stringstream truncated(bytes.substr(0, bytes.size() - 10));
  EXPECT_THROW(load_base<float>(truncated), ConfigError);
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  std::stringstream bm(bad_magic);
  EXPECT_THROW(load_base<float>(bm), ConfigError);
  std::string bad_version = bytes;
  bad_version.replace(bad_version.find(" 1\n"), 3, " 9\n");
  std::stringstream bv(bad_version);
  EXPECT_THROW(load_base<float>(bv), ConfigError);
}

}  // namespace
}  // namespace icarus
