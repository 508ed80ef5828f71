#include <gtest/gtest.h>

#include <cmath>

#include "semattack/significance.hpp"
#include "semattack/whitebox.hpp"
#include "support/toy_setup.hpp"

using namespace semattack;
using semattack::testing::toy;

namespace {

const AttributeSchema kSchema = AttributeSchema::default_schema();

Generator untrained_generator(std::uint64_t seed = 1) {
  torch::manual_seed(seed);
  return Generator(nn::GeneratorNet(nn::GeneratorArch{}), kSchema, {}, {});
}

Verifier untrained_verifier(double threshold, std::uint64_t seed = 2) {
  torch::manual_seed(seed);
  Verifier v(nn::VerifierNet(nn::VerifierArch::from_tag("small-A")), Access::WhiteBox, {});
  v.set_threshold(threshold);
  return v;
}

WhiteboxRequest request_for(const DatasetRecord& src, const DatasetRecord* tgt, const Generator& g,
                            const Verifier& v) {
  WhiteboxRequest r{src.image, src.attributes, rank_by_cs(src.image, src.attributes, g, v),
                    std::nullopt};
  if (tgt) r.target = tgt->image;
  return r;
}

}  // namespace

TEST(Fuse, Endpoints) {
  torch::manual_seed(0);
  auto a = torch::randn({8, 4, 4}), b = torch::randn({8, 4, 4});
  EXPECT_TRUE(torch::equal(fuse(a, b, torch::ones({8})), a));
  EXPECT_TRUE(torch::equal(fuse(a, b, torch::zeros({8})), b));
  EXPECT_TRUE(torch::equal(fuse(a, b, torch::tensor(1.0f)), a));
  EXPECT_TRUE(torch::equal(fuse(a, b, torch::zeros({8, 4, 4})), b));
}

TEST(Fuse, Linearity) {
  torch::manual_seed(1);
  auto f = torch::randn({8, 4, 4});
  EXPECT_TRUE(torch::allclose(fuse(2 * f, f, torch::full({8}, 0.5f)), 1.5 * f, 1e-6, 1e-6));
}

TEST(Fuse, ChannelBroadcast) {
  torch::manual_seed(2);
  auto a = torch::randn({2, 3, 4, 4}), b = torch::randn({2, 3, 4, 4});
  auto beta = torch::rand({2, 3});
  auto out = fuse(a, b, beta);
  for (long n = 0; n < 2; ++n) {
    for (long c = 0; c < 3; ++c) {
      const float w = beta[n][c].item<float>();
      EXPECT_TRUE(torch::allclose(out[n][c], w * a[n][c] + (1 - w) * b[n][c], 1e-6, 1e-6));
    }
  }
}

TEST(Fuse, RejectsOutOfRangeAndBadShapes) {
  auto a = torch::zeros({8, 4, 4});
  EXPECT_THROW(fuse(a, a, torch::full({8}, 1.5f)), InputError);
  EXPECT_THROW(fuse(a, a, torch::full({8}, -0.1f)), InputError);
  EXPECT_THROW(fuse(a, a, torch::full({7}, 0.5f)), InputError);
  EXPECT_THROW(fuse(a, torch::zeros({8, 4, 5}), torch::full({8}, 0.5f)), InputError);
}

TEST(Attention, RangeZeroInputAndDeterminism) {
  auto att = make_attention(32, 4, 17);
  torch::manual_seed(3);
  auto fc = torch::randn({32, 8, 8}) * 10, fr = torch::randn({32, 8, 8}) * 10;
  auto beta = ms_attention_beta(fc, fr, att);
  EXPECT_EQ(beta.sizes(), (c10::IntArrayRef{32}));
  EXPECT_GT(beta.min().item<double>(), 0.0);
  EXPECT_LT(beta.max().item<double>(), 1.0);
  EXPECT_TRUE(torch::equal(beta, ms_attention_beta(fc, fr, att)));
  auto again = make_attention(32, 4, 17);
  EXPECT_TRUE(torch::equal(beta, ms_attention_beta(fc, fr, again)));

  auto zero = make_attention(32, 4, 17);
  {
    torch::NoGradGuard guard;
    for (auto& p : zero->parameters()) p.zero_();
  }
  auto z = torch::zeros({32, 8, 8});
  EXPECT_TRUE(torch::allclose(ms_attention_beta(z, z, zero), torch::full({32}, 0.5f)));
  EXPECT_THROW(ms_attention_beta(fc, torch::zeros({32, 8, 7}), att), InputError);
}

TEST(Config, Validation) {
  WhiteboxConfig c;
  c.validate();
  c.learning_rate = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.max_iterations = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.n_attributes = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(beta_granularity_from_string(to_string(BetaGranularity::Element)),
            BetaGranularity::Element);
}

TEST(EditCode, FlipsTopRanked) {
  AttributeVector a{0, 1, 0, 0, 1, 0, 0, 0};
  auto r = ranking_from_scores({0.9, 0.1, 0.5, 0.8, 0.2, 0.7, 0.6, 0.95}, RankMethod::CS);
  EXPECT_EQ(edit_code(a, r, 1), (AttributeVector{0, 0, 0, 0, 1, 0, 0, 0}));
  EXPECT_EQ(edit_code(a, r, 2), (AttributeVector{0, 0, 0, 0, 0, 0, 0, 0}));
}

TEST(Attack, RequiresWhiteBoxTargetAndThreshold) {
  auto g = untrained_generator();
  auto v = untrained_verifier(1.0);
  torch::manual_seed(4);
  DatasetRecord rec;
  rec.image = torch::rand({3, 32, 32});
  rec.attributes = AttributeVector(8, 0);
  auto req = request_for(rec, nullptr, g, v);
  WhiteboxConfig cfg;
  cfg.type = AttackType::Impersonation;
  EXPECT_THROW(whitebox_attack(req, g, v, cfg), InputError);
  cfg.type = AttackType::Dodging;
  EXPECT_THROW(whitebox_attack(req, g, v.as_blackbox(), cfg), AccessViolation);
  Verifier bare(nn::VerifierNet(nn::VerifierArch::from_tag("small-A")), Access::WhiteBox, {});
  EXPECT_THROW(whitebox_attack(req, g, bare, cfg), InputError);
}

TEST(Attack, SelfTargetSucceedsAtIterationZero) {
  const auto& t = toy();
  const auto& g = t.models.generator;
  const auto& rec = t.data[t.test_indices[0]];
  auto req = request_for(rec, &rec, g, t.surrogate());
  WhiteboxConfig cfg;
  cfg.type = AttackType::Impersonation;
  cfg.max_iterations = 5;
  // The iteration-0 image: attention-initialised beta on the edited taps.
  auto c = edit_code(rec.attributes, req.ranking, 1);
  auto fc = g.encode(rec.image, c, Tap::Conv).values, fr = g.encode(rec.image, c, Tap::Res).values;
  auto att = make_attention(static_cast<int>(fc.size(0)), cfg.reduction, cfg.attention_seed);
  req.target = g.decode(fuse(fc, fr, ms_attention_beta(fc, fr, att)));
  auto o = whitebox_attack(req, g, t.surrogate(), cfg);
  EXPECT_TRUE(o.success);
  EXPECT_EQ(o.iterations, 0);
  EXPECT_NEAR(o.final_distance, 0.0, 1e-9);
}

TEST(Attack, OutcomeInvariantsOnUntrainedModels) {
  auto g = untrained_generator();
  torch::manual_seed(5);
  std::vector<WhiteboxRequest> reqs;
  auto v = untrained_verifier(0.0);
  for (int i = 0; i < 4; ++i) {
    DatasetRecord src, tgt;
    src.image = torch::rand({3, 32, 32});
    src.attributes = AttributeVector{1, 0, 1, 0, 0, 1, 0, 0};
    tgt.image = torch::rand({3, 32, 32});
    reqs.push_back(request_for(src, &tgt, g, v));
  }
  for (auto type : {AttackType::Impersonation, AttackType::Dodging}) {
    for (auto gran : {BetaGranularity::Scalar, BetaGranularity::Channel, BetaGranularity::Element}) {
      WhiteboxConfig cfg;
      cfg.type = type;
      cfg.granularity = gran;
      cfg.max_iterations = 12;
      std::vector<std::vector<double>> losses;
      auto outs = whitebox_attack_batch(reqs, g, v, cfg, &losses);
      for (std::size_t i = 0; i < outs.size(); ++i) {
        const auto& o = outs[i];
        EXPECT_LE(o.iterations, cfg.max_iterations);
        EXPECT_GE(o.adversarial.min().item<double>(), 0.0);
        EXPECT_LE(o.adversarial.max().item<double>(), 1.0);
        EXPECT_FALSE(torch::isnan(o.adversarial).any().item<bool>());
        EXPECT_EQ(o.success, attack_succeeded(type, o.final_distance, *v.threshold()));
        // the emitted distance is the emitted image's distance
        auto ref = v.embed(type == AttackType::Impersonation ? *reqs[i].target : reqs[i].x);
        EXPECT_NEAR(embedding_distance(v.embed(o.adversarial), ref), o.final_distance, 1e-4);
        for (double l : losses[i]) EXPECT_TRUE(std::isfinite(l));
        double best = losses[i].front();
        for (double l : losses[i]) best = std::min(best, l);
        const double emitted = type == AttackType::Impersonation ? o.final_distance : -o.final_distance;
        EXPECT_NEAR(emitted, best, 1e-5);  // T = 0 never stops early: incumbent is emitted
      }
    }
  }
}

TEST(Attack, BatchMatchesSingle) {
  const auto& t = toy();
  std::vector<WhiteboxRequest> reqs;
  for (int i = 0; i < 4; ++i) {
    reqs.push_back(request_for(t.data[t.test_indices[static_cast<std::size_t>(i * 13)]],
                               &t.data[t.test_indices[static_cast<std::size_t>(i * 13 + 400)]],
                               t.models.generator, t.surrogate()));
  }
  WhiteboxConfig cfg;
  cfg.type = AttackType::Impersonation;
  cfg.max_iterations = 20;
  auto batch = whitebox_attack_batch(reqs, t.models.generator, t.surrogate(), cfg);
  for (std::size_t i = 0; i < reqs.size(); ++i) {
    auto single = whitebox_attack(reqs[i], t.models.generator, t.surrogate(), cfg);
    EXPECT_EQ(single.iterations, batch[i].iterations);
    EXPECT_EQ(single.success, batch[i].success);
    EXPECT_NEAR(single.final_distance, batch[i].final_distance, 1e-3);
  }
}

TEST(Gradient, MatchesCentralDifferences) {
  const auto& t = toy();
  auto g = t.models.generator.cast(torch::kFloat64);
  auto v = t.surrogate().cast(torch::kFloat64);
  torch::manual_seed(6);
  int checked = 0;
  for (int k = 0; k < 5; ++k) {
    const auto& src = t.data[t.test_indices[static_cast<std::size_t>(k * 17)]];
    const auto& tgt = t.data[t.test_indices[static_cast<std::size_t>(k * 17 + 250)]];
    auto code = g.project_codes(attributes_to_tensor(flip(src.attributes, k)).unsqueeze(0))
                    .to(torch::kFloat64);
    auto taps = g.encode_batch(src.image.unsqueeze(0).to(torch::kFloat64), code);
    const auto type = k % 2 ? AttackType::Dodging : AttackType::Impersonation;
    auto ref = v.embed_batch((type == AttackType::Impersonation ? tgt.image : src.image)
                                 .unsqueeze(0)
                                 .to(torch::kFloat64));
    const bool element = k >= 3;
    auto theta = element ? torch::randn(taps.conv.sizes(), torch::kFloat64)
                         : torch::randn({1, taps.conv.size(1)}, torch::kFloat64);
    auto th = theta.clone().set_requires_grad(true);
    fusion_objective(g, v, taps.conv, taps.res, th, ref, type).sum().backward();
    auto grad = th.grad().flatten();
    // Three coordinates per configuration, spread over the parameter vector.
    for (long j : {0L, theta.numel() / 2, theta.numel() - 1}) {
      const double h = 1e-3;
      auto plus = theta.clone(), minus = theta.clone();
      plus.view(-1)[j] += h;
      minus.view(-1)[j] -= h;
      torch::NoGradGuard guard;
      const double fp = fusion_objective(g, v, taps.conv, taps.res, plus, ref, type).item<double>();
      const double fm = fusion_objective(g, v, taps.conv, taps.res, minus, ref, type).item<double>();
      const double fd = (fp - fm) / (2 * h);
      const double an = grad[j].item<double>();
      const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-8});
      if (std::abs(fd) < 1e-9 && std::abs(an) < 1e-9) continue;
      EXPECT_LT(rel, 1e-3) << "config " << k << " coordinate " << j << " analytic " << an
                           << " numeric " << fd;
      ++checked;
    }
  }
  EXPECT_GE(checked, 5);
}

TEST(Endpoints, ForcedBetaReproducesDecodedTapsBitwise) {
  const auto& t = toy();
  const auto& g = t.models.generator;
  const auto& rec = t.data[t.test_indices[3]];
  const auto edited = flip(rec.attributes, 2);
  auto code = attributes_to_tensor(edited);
  auto fc = g.encode(rec.image, edited, Tap::Conv).values;
  auto fr = g.encode(rec.image, edited, Tap::Res).values;
  const long c = fc.size(0);
  EXPECT_TRUE(torch::equal(g.decode(fuse(fc, fr, torch::ones({c}))), g.decode(fc)));
  EXPECT_TRUE(torch::equal(g.decode(fuse(fc, fr, torch::zeros({c}))), g.decode(fr)));
  // res-tap decode is the generator's own edit
  EXPECT_TRUE(torch::allclose(
      g.decode(fr), g.translate(rec.image.unsqueeze(0), code.unsqueeze(0))[0], 1e-5, 1e-5));
}

TEST(Attack, ToySetupDodgingSucceedsBroadly) {
  const auto& t = toy();
  std::vector<WhiteboxRequest> reqs;
  for (int i = 0; i < 30; ++i) {
    reqs.push_back(request_for(t.data[t.test_indices[static_cast<std::size_t>(i * 9)]], nullptr,
                               t.models.generator, t.surrogate()));
  }
  auto cfg = t.config.whitebox(AttackType::Dodging, 1);
  auto outs = whitebox_attack_batch(reqs, t.models.generator, t.surrogate(), cfg);
  int ok = 0;
  for (const auto& o : outs) ok += o.success;
  EXPECT_GE(ok, 27);
}
