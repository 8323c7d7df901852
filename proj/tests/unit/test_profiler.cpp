#include <gtest/gtest.h>

#include <numeric>

#include "levit_unet/layers.hpp"
#include "levit_unet/model.hpp"
#include "levit_unet/ops.hpp"
#include "levit_unet/profiler.hpp"

using levit::Tensor;
using levit::model::Model;
using levit::model::ModelConfig;
namespace prof = levit::profile;
namespace ops = levit::ops;

namespace {

ModelConfig miniature(int num_skips = 4, bool conv_only = false) {
  ModelConfig c;
  c.num_classes = 3;
  c.num_skips = num_skips;
  c.conv_only = conv_only;
  c.encoder.in_channels = 2;
  c.encoder.stem_widths = {2, 4, 4, 8};
  c.encoder.stages = {levit::model::StageConfig{8, 1, 2, 4, 2, 2}, levit::model::StageConfig{8, 1, 2, 4, 2, 2},
                      levit::model::StageConfig{8, 1, 2, 4, 2, 2}};
  c.encoder.image_size = 32;
  c.decoder_widths = {8, 6, 4, 4};
  return c;
}

std::uint64_t sum_modules(const std::vector<prof::ModuleCount>& rows) {
  std::uint64_t s = 0;
  for (const auto& r : rows) s += r.value;
  return s;
}

}  // namespace

TEST(MacCounter, ConvByHand) {
  // 3x3, 4 -> 6 channels, 8x8 in, stride 2 pad 1 -> 4x4 out
  Tensor x({1, 4, 8, 8}, 1.0f);
  Tensor w({6, 4, 3, 3}, 0.1f);
  ops::MacCounter outer;
  {
    ops::MacCounter inner;
    ops::conv2d(x, w, Tensor(), 2, 1);
    EXPECT_EQ(inner.total(), 16u * 6u * 4u * 9u);
  }
  ops::linear(Tensor({5, 3}, 1.0f), Tensor({7, 3}, 1.0f), Tensor());
  EXPECT_EQ(outer.total(), 16u * 6u * 4u * 9u + 5u * 3u * 7u);
}

TEST(Params, ConvBnReluByHand) {
  levit::nn::Initializer init(1);
  auto block = levit::model::ConvBnRelu::make(8, 3, 3, init);
  levit::nn::TensorList list;
  block.collect(list, "b");
  std::size_t trainable = 0;
  for (const auto& t : list)
    if (t.trainable) trainable += t.tensor.numel();
  // 8*3*9 weights (+ bias if any) + gamma/beta 6
  EXPECT_GE(trainable, 8u * 3u * 9u + 6u);
  EXPECT_LE(trainable, 8u * 3u * 9u + 9u);
}

TEST(Params, TotalIsSumOfTrainableTensors) {
  for (int s : {0, 2, 4}) {
    const Model m = Model::build(miniature(s));
    std::uint64_t want = 0;
    for (const auto& t : m.named_tensors())
      if (t.trainable) want += t.tensor.numel();
    const auto pc = prof::count_params(m);
    EXPECT_EQ(pc.total, want);
    EXPECT_EQ(sum_modules(pc.by_module), pc.total);
  }
}

TEST(Macs, EstimateMatchesTrace) {
  for (int s = 0; s <= 4; ++s) {
    for (bool conv : {false, true}) {
      const auto c = miniature(s, conv);
      const Model m = Model::build(c);
      const auto est = prof::estimate_macs(c, 32, 32);
      EXPECT_EQ(est.total, prof::traced_macs(m, 32, 32)) << "skips=" << s << " conv=" << conv;
      EXPECT_EQ(sum_modules(est.by_module), est.total);
    }
  }
}

TEST(Macs, StockVariantEstimateMatchesTrace) {
  const auto c = ModelConfig::for_variant("128s", 9, 3, 224);
  EXPECT_EQ(prof::estimate_macs(c, 224, 224).total, prof::traced_macs(Model::build(c), 224, 224));
}

TEST(Macs, ConvOnlyScalesWithPixels) {
  for (const char* v : {"128s", "192", "384"}) {
    auto c = ModelConfig::for_variant(v, 9, 3, 224);
    c.conv_only = true;
    EXPECT_EQ(prof::estimate_macs(c, 224, 224).total, 4 * prof::estimate_macs(c, 112, 112).total) << v;
  }
}

TEST(Fps, MeasuresRequestedIterations) {
  const Model m = Model::build(miniature());
  auto r = prof::measure_fps(m, 32, 2, 1, 3);
  EXPECT_EQ(r.iters, 3);
  EXPECT_EQ(r.per_iter_fps.size(), 3u);
  EXPECT_GT(r.fps, 0.0);
  prof::ProfileRow row{"128s", false, 10, 20, r, std::nullopt};
  const auto text = prof::format_profile({row}, "test box");
  EXPECT_NE(text.find("128s"), std::string::npos);
  EXPECT_NE(text.find("test box"), std::string::npos);
}
