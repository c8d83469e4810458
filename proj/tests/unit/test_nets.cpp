#include <cstring>
#include <fstream>

#include "dped/nets.hpp"
#include "test_support.hpp"

using namespace dped;

namespace {

GeneratorConfig small_generator(int channels = 8) {
  GeneratorConfig cfg;
  cfg.channels = channels;
  return cfg;
}

DiscriminatorConfig small_discriminator() {
  DiscriminatorConfig cfg;
  cfg.channels = {4, 6, 8, 8, 6};
  cfg.fc_units = 16;
  cfg.input_size = 32;
  return cfg;
}

template <typename T>
double dot(const Tensor<T>& a, const Tensor<T>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) s += static_cast<double>(a.data[i]) * b.data[i];
  return s;
}

// Shrinks every weight tensor so the scaled tanh stays away from the clamp.
void scale_weights(ParamSet<double>& p, double factor) {
  for (auto& t : p.tensors())
    if (t.name.ends_with(".weight"))
      for (auto& v : t.data) v *= factor;
}

}  // namespace

TEST(GeneratorInit, DeterministicPerSeed) {
  const auto cfg = small_generator();
  EXPECT_EQ(generator_init(42, cfg).params, generator_init(42, cfg).params);
  EXPECT_FALSE(generator_init(42, cfg).params == generator_init(43, cfg).params);
}

TEST(GeneratorInit, ParameterCountMatchesArchitectureTable) {
  // conv_in 9*9*3*64 + 64; four blocks of two 3x3 convs (64*64*9 + 64) and two
  // batch-norms (gamma, beta); conv_p1, conv_p2; conv_out 9*9*64*3 + 3.
  const std::size_t expected = (15552 + 64) + 4 * (2 * (36864 + 64) + 2 * 128) + 2 * (36864 + 64) + (15552 + 3);
  EXPECT_EQ(generator_parameter_count({}), expected);
  EXPECT_EQ(generator_init(1).params.trainable_count(), expected);
  EXPECT_EQ(generator_init(1, small_generator()).params.trainable_count(),
            generator_parameter_count(small_generator()));
}

TEST(GeneratorInit, HeScaledTruncatedNormal) {
  auto w = generator_init(9);
  const auto& t = w.params.at("res0.convA.weight");
  const double std_expected = std::sqrt(2.0 / (64 * 9));
  double sq = 0;
  for (float v : t.data) {
    ASSERT_LE(std::abs(v), 2 * std_expected + 1e-6);
    sq += double(v) * v;
  }
  // Truncation at two standard deviations shrinks the variance by ~0.774.
  EXPECT_NEAR(std::sqrt(sq / t.data.size()), std_expected * std::sqrt(0.774), 0.02 * std_expected);
  for (float v : w.params.at("conv_in.bias").data) EXPECT_EQ(v, 0.0f);
  for (float v : w.params.at("res1.bnB.gamma").data) EXPECT_EQ(v, 1.0f);
  for (float v : w.params.at("res1.bnB.beta").data) EXPECT_EQ(v, 0.0f);
}

TEST(GeneratorForward, PreservesShape) {
  auto w = generator_init(1);
  std::mt19937_64 rng(1);
  auto x = test::random_tensor<float>(1, 3, 100, 100, rng);
  auto y = generator_forward(w, x, Mode::Infer);
  EXPECT_TRUE(y.same_shape(x));
  auto x2 = test::random_tensor<float>(1, 3, 137, 211, rng);
  EXPECT_TRUE(generator_forward(w, x2, Mode::Infer).same_shape(x2));
}

TEST(GeneratorForward, ShapeFuzzAndRange) {
  auto w = generator_init(3, small_generator(4));
  std::mt19937_64 rng(2);
  for (int h : {16, 23, 64, 101, 256}) {
    for (int wd : {16, 57, 256}) {
      auto x = test::random_tensor<float>(1, 3, h, wd, rng);
      auto y = generator_forward(w, x, Mode::Infer);
      ASSERT_TRUE(y.same_shape(x)) << h << "x" << wd;
      for (float v : y.data) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
    }
  }
}

TEST(GeneratorForward, ZeroWeightsGiveMidGray) {
  auto w = generator_zeros<float>();
  std::mt19937_64 rng(4);
  auto x = test::random_tensor<float>(2, 3, 20, 24, rng);
  for (Mode m : {Mode::Train, Mode::Infer})
    for (float v : generator_forward(w, x, m).data) EXPECT_EQ(v, 0.5f);
}

TEST(GeneratorForward, RejectsBadShapes) {
  auto w = generator_zeros<float>(small_generator(4));
  EXPECT_THROW(generator_forward(w, Tensor<float>(1, 1, 32, 32), Mode::Infer), ShapeError);
  EXPECT_THROW(generator_forward(w, Tensor<float>(1, 3, 15, 32), Mode::Infer), ShapeError);
}

TEST(GeneratorForward, ResidualBlocksWithZeroWeightsAreIdentity) {
  auto cfg = small_generator(6);
  auto w = generator_init(5, cfg);
  for (int b = 0; b < cfg.blocks; ++b)
    for (const char* part : {"convA.weight", "convB.weight"})
      for (auto& v : w.params.at("res" + std::to_string(b) + "." + part).data) v = 0.0f;
  auto cfg0 = cfg;
  cfg0.blocks = 0;
  auto w0 = generator_zeros<float>(cfg0);
  for (auto& t : w0.params.tensors()) t.data = w.params.at(t.name).data;
  std::mt19937_64 rng(6);
  auto x = test::random_tensor<float>(2, 3, 24, 24, rng);
  for (Mode m : {Mode::Train, Mode::Infer}) EXPECT_EQ(generator_forward(w, x, m), generator_forward(w0, x, m));
}

TEST(GeneratorForward, InferModeIndependentOfBatchComposition) {
  auto w = generator_init(8, small_generator());
  std::mt19937_64 rng(7);
  for (auto& t : w.params.tensors()) {
    if (t.name.ends_with("running_mean"))
      for (auto& v : t.data) v = 0.1f;
    if (t.name.ends_with("running_var"))
      for (auto& v : t.data) v = 2.0f;
  }
  auto batch = test::random_tensor<float>(3, 3, 20, 20, rng);
  auto y = generator_forward(w, batch, Mode::Infer);
  for (int i = 0; i < 3; ++i) {
    Tensor<float> single(1, 3, 20, 20);
    std::copy(batch.item(i), batch.item(i) + batch.item_size(), single.data.begin());
    auto ys = generator_forward(w, single, Mode::Infer);
    for (std::size_t k = 0; k < ys.data.size(); ++k) ASSERT_NEAR(ys.data[k], y.item(i)[k], 1e-6);
  }
}

TEST(GeneratorForward, IdentityGeneratorReproducesInput) {
  auto w = identity_generator();
  std::mt19937_64 rng(10);
  auto x = test::random_tensor<float>(1, 3, 40, 40, rng);
  auto y = generator_forward(w, x, Mode::Infer);
  double worst = 0;
  for (std::size_t k = 0; k < x.data.size(); ++k) worst = std::max(worst, double(std::abs(y.data[k] - x.data[k])));
  EXPECT_LT(worst, 0.0011);
  auto knots = identity_generator_knots(21);
  Tensor<float> on_knots(1, 3, 16, 16, static_cast<float>(knots[5]));
  for (float v : generator_forward(w, on_knots, Mode::Infer).data) EXPECT_NEAR(v, knots[5], 2e-6);
}

TEST(GeneratorBackward, ZeroWeightsBiasGradientClosedForm) {
  auto w = generator_zeros<double>(small_generator(4));
  Tensor<double> x(2, 3, 18, 22, 0.3);
  GeneratorTape<double> tape;
  auto y = generator_forward(w, x, Mode::Train, &tape);
  auto g = generator_backward(w, tape, Tensor<double>(2, 3, 18, 22, 1.0));
  // d/db sum(0.58 tanh(b) + 0.5) at b = 0 is 0.58 per pixel.
  for (double v : g.params.at("conv_out.bias").data) EXPECT_NEAR(v, 0.58 * 18 * 22 * 2, 1e-9);
}

TEST(GeneratorBackward, MatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  for (int draw = 0; draw < 3; ++draw) {
    auto w = generator_init(100 + draw, small_generator()).cast<double>();
    scale_weights(w.params, 0.5);
    for (auto& t : w.params.tensors())
      if (t.name.ends_with("gamma") || t.name.ends_with("beta") || t.name.ends_with("bias"))
        for (auto& v : t.data) v += std::uniform_real_distribution<double>(-0.2, 0.2)(rng);
    auto x = test::random_tensor<double>(2, 3, 16, 17, rng);
    auto r = test::random_tensor<double>(2, 3, 16, 17, rng, -1, 1);
    GeneratorTape<double> tape;
    generator_forward(w, x, Mode::Train, &tape);
    auto g = generator_backward(w, tape, r);
    auto loss = [&] { return dot(generator_forward(w, x, Mode::Train), r); };
    auto pr = test::check_param_gradients(w.params, g.params, loss, rng, 4);
    EXPECT_LT(pr.max_rel, 1e-4) << pr.worst;
    auto ir = test::check_input_gradient(x, g.input, loss, rng);
    EXPECT_LT(ir.max_rel, 1e-4) << ir.worst;
  }
}

TEST(GeneratorBackward, StaleTapeThrows) {
  auto w = generator_zeros<double>(small_generator(4));
  auto other = w;
  Tensor<double> x(1, 3, 16, 16, 0.2);
  GeneratorTape<double> tape;
  EXPECT_THROW(generator_backward(w, tape, x), StaleTape);
  generator_forward(w, x, Mode::Train, &tape);
  EXPECT_THROW(generator_backward(other, tape, x), StaleTape);
  EXPECT_NO_THROW(generator_backward(w, tape, x));
  EXPECT_THROW(generator_backward(w, tape, x), StaleTape);
}

TEST(GeneratorRunningStats, MomentumUpdate) {
  auto w = generator_init(2, small_generator(4));
  std::mt19937_64 rng(3);
  auto x = test::random_tensor<float>(2, 3, 16, 16, rng);
  GeneratorTape<float> tape;
  generator_forward(w, x, Mode::Train, &tape);
  generator_update_running_stats(w, tape, 0.1);
  const auto& st = tape.blocks[0].stats_a;
  const double n = static_cast<double>(st.count);
  EXPECT_NEAR(w.params.at("res0.bnA.running_mean").data[1], 0.1 * st.mean[1], 1e-6);
  EXPECT_NEAR(w.params.at("res0.bnA.running_var").data[1], 0.9 + 0.1 * st.var[1] * n / (n - 1), 1e-5);
}

TEST(DiscriminatorForward, OutputsAreProbabilities) {
  auto d = discriminator_init(1);
  std::mt19937_64 rng(1);
  auto x = test::random_tensor<float>(50, 1, 100, 100, rng);
  auto out = discriminator_forward(d, x, Mode::Train);
  ASSERT_EQ(out.probs.size(), 50u);
  for (float p : out.probs) EXPECT_TRUE(p > 0.0f && p < 1.0f);
}

TEST(DiscriminatorForward, ZeroWeightsGiveHalf) {
  auto d = discriminator_zeros<double>();
  Tensor<double> x(3, 1, 100, 100, 0.7);
  for (Mode m : {Mode::Train, Mode::Infer})
    for (double p : discriminator_forward(d, x, m).probs) EXPECT_EQ(p, 0.5);
}

TEST(DiscriminatorForward, SpatialPipeline) {
  DiscriminatorConfig cfg;
  EXPECT_EQ(cfg.final_size(), 7);
  auto d = discriminator_zeros<float>();
  EXPECT_EQ(d.params.at("fc1.weight").shape, (std::vector<std::size_t>{1024, 128 * 7 * 7}));
  EXPECT_EQ(d.params.at("conv1.weight").shape, (std::vector<std::size_t>{48, 1, 11, 11}));
  EXPECT_EQ(d.params.find("bn1.gamma"), nullptr);
  EXPECT_NE(d.params.find("bn5.gamma"), nullptr);
  EXPECT_THROW(discriminator_forward(d, Tensor<float>(1, 1, 64, 64), Mode::Infer), ShapeError);
  EXPECT_THROW(discriminator_forward(d, Tensor<float>(1, 3, 100, 100), Mode::Infer), ShapeError);
}

TEST(DiscriminatorBackward, MatchesFiniteDifferences) {
  std::mt19937_64 rng(21);
  for (int draw = 0; draw < 3; ++draw) {
    auto d = discriminator_init(200 + draw, small_discriminator()).cast<double>();
    auto x = test::random_tensor<double>(3, 1, 32, 32, rng);
    std::vector<double> r = {0.7, -1.3, 0.4};
    auto loss = [&] {
      auto out = discriminator_forward(d, x, Mode::Train);
      double s = 0;
      for (int i = 0; i < 3; ++i) s += r[i] * out.logits[i];
      return s;
    };
    DiscriminatorTape<double> tape;
    discriminator_forward(d, x, Mode::Train, &tape);
    auto g = discriminator_backward(d, tape, r);
    auto pr = test::check_param_gradients(d.params, g.params, loss, rng, 5);
    EXPECT_LT(pr.max_rel, 1e-4) << pr.worst;
    auto ir = test::check_input_gradient(x, g.input, loss, rng);
    EXPECT_LT(ir.max_rel, 1e-4) << ir.worst;

    DiscriminatorTape<double> tape2;
    discriminator_forward(d, x, Mode::Train, &tape2);
    auto input_only = discriminator_backward(d, tape2, r, false);
    EXPECT_EQ(input_only.params.size(), 0u);
    EXPECT_EQ(input_only.input, g.input);
  }
}

TEST(DiscriminatorBackward, StaleTapeThrows) {
  auto d = discriminator_zeros<double>(small_discriminator());
  DiscriminatorTape<double> tape;
  EXPECT_THROW(discriminator_backward(d, tape, {0.0}), StaleTape);
}

TEST(DiscriminatorBackward, RepeatsBitwiseAcrossAllocations) {
  const auto d = discriminator_init(31, small_discriminator());
  std::mt19937_64 rng(32);
  const auto x = test::random_tensor<float>(6, 1, 32, 32, rng);
  std::vector<std::vector<float>> padding;
  Gradients<float> first;
  for (int rep = 0; rep < 5; ++rep) {
    padding.emplace_back(static_cast<std::size_t>(rep) * 7 + 1);
    DiscriminatorTape<float> tape;
    const auto copy = x;
    const auto out = discriminator_forward(d, copy, Mode::Train, &tape);
    auto g = discriminator_backward(d, tape, std::vector<float>(out.probs.size(), 0.1f));
    if (rep == 0) {
      first = std::move(g);
      continue;
    }
    for (const auto& t : g.params.tensors()) EXPECT_EQ(t.data, first.params.at(t.name).data) << t.name;
  }
}

TEST(Vgg, LayerNames) {
  EXPECT_EQ(parse_vgg_layer("relu5_4").block, 5);
  EXPECT_EQ(parse_vgg_layer("relu1_2").index, 2);
  EXPECT_THROW(parse_vgg_layer("relu1_3"), UnknownLayer);
  EXPECT_THROW(parse_vgg_layer("conv5_4"), UnknownLayer);
  EXPECT_THROW(parse_vgg_layer("relu6_1"), UnknownLayer);
  EXPECT_THROW(parse_vgg_layer("relu5_x"), UnknownLayer);
}

TEST(Vgg, CanonicalContainerLoadsAndPoolsToSixBySix) {
  auto dir = test::temp_dir("vgg");
  auto w = vgg_random(1);
  vgg_save(w, dir / "vgg.dpedw");
  auto loaded = vgg_load(dir / "vgg.dpedw");
  EXPECT_EQ(loaded.params.at("conv1_1.weight").shape, (std::vector<std::size_t>{64, 3, 3, 3}));
  EXPECT_EQ(loaded.params.at("conv5_4.weight").shape, (std::vector<std::size_t>{512, 512, 3, 3}));
  EXPECT_EQ(loaded.params, w.params);
  EXPECT_EQ(loaded.params.trainable_count(), 0u);
  EXPECT_EQ(loaded.checksum.size(), 16u);

  std::mt19937_64 rng(2);
  auto x = test::random_tensor<float>(1, 3, 100, 100, rng);
  auto f = vgg_features(loaded, x, "relu5_4");
  EXPECT_EQ(f.c, 512);
  EXPECT_EQ(f.h, 6);
  EXPECT_EQ(f.w, 6);
  for (float v : f.data) ASSERT_GE(v, 0.0f);
  EXPECT_EQ(vgg_features(loaded, x, "relu5_4"), f);
}

TEST(Vgg, MissingTensorIsSchemaError) {
  auto dir = test::temp_dir("vgg");
  VggConfig cfg{16};
  auto w = vgg_random(1, cfg);
  ParamSet<float> partial;
  for (const auto& t : w.params.tensors())
    if (!t.name.starts_with("conv5_4")) partial.add(t.name, t.shape, false).data = t.data;
  write_weights(dir / "partial.dpedw", kVggKind, partial);
  EXPECT_THROW(vgg_load(dir / "partial.dpedw", cfg), SchemaError);
  write_weights(dir / "gen.dpedw", kGeneratorKind, w.params);
  EXPECT_THROW(vgg_load(dir / "gen.dpedw", cfg), SchemaError);
  vgg_save(w, dir / "ok.dpedw");
  EXPECT_THROW(vgg_load(dir / "ok.dpedw", VggConfig{8}), SchemaError);
}

TEST(Vgg, TruncatedFileIsIoError) {
  auto dir = test::temp_dir("vgg");
  VggConfig cfg{16};
  vgg_save(vgg_random(1, cfg), dir / "v.dpedw");
  std::filesystem::resize_file(dir / "v.dpedw", std::filesystem::file_size(dir / "v.dpedw") - 100);
  EXPECT_THROW(vgg_load(dir / "v.dpedw", cfg), IoError);
  EXPECT_THROW(vgg_load(dir / "absent.dpedw", cfg), IoError);
}

TEST(Vgg, RejectsSmallInputs) {
  auto w = vgg_random(1, {16});
  EXPECT_THROW(vgg_features(w, Tensor<float>(1, 3, 31, 40), "relu1_1"), ShapeError);
  EXPECT_THROW(vgg_features(w, Tensor<float>(1, 1, 40, 40), "relu1_1"), ShapeError);
  EXPECT_THROW(vgg_features(w, Tensor<float>(1, 3, 40, 40), "relu9_1"), UnknownLayer);
}

TEST(Vgg, InputGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(31);
  auto w = vgg_random(7, {16}).cast<double>();
  for (const char* layer : {"relu1_1", "relu3_2", "relu5_4"}) {
    auto x = test::random_tensor<double>(2, 3, 32, 34, rng);
    auto probe = vgg_features(w, x, layer);
    auto r = test::random_tensor<double>(probe.n, probe.c, probe.h, probe.w, rng, -1, 1);
    VggTape<double> tape;
    vgg_features(w, x, layer, &tape);
    auto gx = vgg_backward_input(w, tape, r);
    auto loss = [&] { return dot(vgg_features(w, x, layer), r); };
    auto ir = test::check_input_gradient(x, gx, loss, rng, 16);
    EXPECT_LT(ir.max_rel, 1e-4) << layer << ": " << ir.worst;
    EXPECT_THROW(vgg_backward_input(w, tape, r), StaleTape);
  }
}

TEST(WeightsContainer, GeneratorRoundTripIsBitwise) {
  auto dir = test::temp_dir("w");
  auto w = generator_init(77, small_generator());
  w.params.at("res0.bnA.running_var").data[0] = 3.25f;
  save_generator(w, dir / "g.dpedw");
  auto back = load_generator(dir / "g.dpedw");
  EXPECT_EQ(back.params, w.params);
  EXPECT_EQ(back.config, w.config);
}

TEST(WeightsContainer, DiscriminatorRoundTripInfersConfig) {
  auto dir = test::temp_dir("w");
  auto d = discriminator_init(5, small_discriminator());
  save_discriminator(d, dir / "d.dpedw");
  auto back = load_discriminator(dir / "d.dpedw");
  EXPECT_EQ(back.params, d.params);
  EXPECT_EQ(back.config.final_size(), small_discriminator().final_size());
  auto full = discriminator_init(5);
  save_discriminator(full, dir / "full.dpedw");
  EXPECT_EQ(load_discriminator(dir / "full.dpedw").config, DiscriminatorConfig{});
}

TEST(WeightsContainer, WrongMagicIsSchemaError) {
  auto dir = test::temp_dir("w");
  {
    std::ofstream f(dir / "bad.dpedw", std::ios::binary);
    f << "NOTDPEDW and some more bytes";
  }
  EXPECT_THROW(load_generator(dir / "bad.dpedw"), SchemaError);
}

TEST(WeightsContainer, KindAndNameMismatchesAreSchemaErrors) {
  auto dir = test::temp_dir("w");
  save_discriminator(discriminator_init(1, small_discriminator()), dir / "d.dpedw");
  EXPECT_THROW(load_generator(dir / "d.dpedw"), SchemaError);
  write_weights(dir / "mislabelled.dpedw", kGeneratorKind, discriminator_init(1, small_discriminator()).params);
  EXPECT_THROW(load_generator(dir / "mislabelled.dpedw"), SchemaError);
}

TEST(WeightsContainer, ManifestLayout) {
  auto dir = test::temp_dir("w");
  ParamSet<float> p;
  p.add("a", {2, 3}, true, 1.5f);
  p.add("b", {4}, false, -2.0f);
  write_weights(dir / "x.dpedw", "custom", p);
  std::ifstream in(dir / "x.dpedw", std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  ASSERT_EQ(bytes.substr(0, 8), std::string("DPEDW1\0\0", 8));
  const std::uint32_t len = static_cast<unsigned char>(bytes[8]) | static_cast<unsigned char>(bytes[9]) << 8 |
                            static_cast<unsigned char>(bytes[10]) << 16 | static_cast<unsigned char>(bytes[11]) << 24;
  const std::string manifest = bytes.substr(12, len);
  EXPECT_NE(manifest.find("\"network_kind\":\"custom\""), std::string::npos);
  EXPECT_NE(manifest.find("\"offset\":24"), std::string::npos);
  EXPECT_EQ(bytes.size(), 12 + len + 40);
  float first;
  std::memcpy(&first, bytes.data() + 12 + len, 4);
  EXPECT_EQ(first, 1.5f);
  auto back = read_weights(dir / "x.dpedw");
  EXPECT_EQ(back.network_kind, "custom");
  EXPECT_EQ(back.params.at("b").data, std::vector<float>(4, -2.0f));
}
