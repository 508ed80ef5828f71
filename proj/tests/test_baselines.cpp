#include <gtest/gtest.h>

#include "semattack/baselines.hpp"
#include "support/toy_setup.hpp"

using namespace semattack;
using semattack::testing::toy;

namespace {

const AttributeSchema kSchema = AttributeSchema::default_schema();

Verifier untrained_verifier(double threshold, const std::string& tag = "small-A") {
  torch::manual_seed(2);
  Verifier v(nn::VerifierNet(nn::VerifierArch::from_tag(tag)), Access::WhiteBox, {});
  v.set_threshold(threshold);
  return v;
}

Generator subset_generator(const std::vector<int>& subset, std::uint64_t seed) {
  torch::manual_seed(seed);
  nn::GeneratorArch arch;
  arch.n_attributes = static_cast<int>(subset.size());
  return Generator(nn::GeneratorNet(arch), kSchema, subset, {});
}

torch::Tensor batch(std::uint64_t seed, long n = 4) {
  torch::manual_seed(seed);
  return torch::rand({n, 3, 32, 32});
}

}  // namespace

TEST(RandomSelection, DefaultSetsAreDisjointFours) {
  auto c = RandomSelectionConfig::with_default_sets(kSchema);
  EXPECT_EQ(c.s1.size(), 4u);
  EXPECT_EQ(c.s2.size(), 4u);
  c.validate(kSchema.size());
  auto bad = c;
  bad.s2[0] = bad.s1[0];
  EXPECT_THROW(bad.validate(kSchema.size()), ConfigError);
  bad = c;
  bad.alpha = 1.5;
  EXPECT_THROW(bad.validate(kSchema.size()), ConfigError);
}

TEST(RandomSelection, CandidatesFollowTheBlendFormula) {
  auto cfg = RandomSelectionConfig::with_default_sets(kSchema);
  auto g1 = subset_generator(cfg.s1, 3), g2 = subset_generator(cfg.s2, 4);
  torch::manual_seed(5);
  auto x = torch::rand({3, 32, 32});
  AttributeVector a{1, 0, 1, 0, 0, 1, 0, 1};
  auto cand = random_selection_candidates(x, a, g1, g2, cfg);
  ASSERT_EQ(cand.size(0), 16);
  long k = 0;
  for (int s1 : cfg.s1) {
    for (int s2 : cfg.s2) {
      auto c1 = flip(a, s1);
      auto x1 = g1.translate(x.unsqueeze(0), g1.project_codes(attributes_to_tensor(c1).unsqueeze(0)));
      auto x2 = g2.translate(x1, g2.project_codes(attributes_to_tensor(flip(c1, s2)).unsqueeze(0)));
      EXPECT_TRUE(torch::allclose(cand[k], (0.5 * x1 + 0.5 * x2)[0], 1e-5, 1e-5)) << k;
      ++k;
    }
  }
  auto wrong = cfg;
  std::swap(wrong.s1, wrong.s2);
  EXPECT_THROW(random_selection_candidates(x, a, g1, g2, wrong), ConfigError);
}

TEST(RandomSelection, PicksFirstSuccessOtherwiseBest) {
  auto cfg = RandomSelectionConfig::with_default_sets(kSchema);
  auto g1 = subset_generator(cfg.s1, 3), g2 = subset_generator(cfg.s2, 4);
  torch::manual_seed(6);
  auto x = torch::rand({3, 32, 32});
  AttributeVector a(8, 0);
  cfg.type = AttackType::Dodging;
  auto easy = untrained_verifier(0.0);
  auto o = random_selection_attack(x, a, std::nullopt, g1, g2, easy, cfg);
  EXPECT_TRUE(o.success);
  EXPECT_EQ(o.iterations, 1);
  EXPECT_EQ(o.candidates, 16);
  EXPECT_EQ(o.queries, 17);
  auto hard = untrained_verifier(4.0);
  auto f = random_selection_attack(x, a, std::nullopt, g1, g2, hard, cfg);
  EXPECT_FALSE(f.success);
  auto cand = random_selection_candidates(x, a, g1, g2, cfg);
  auto d = (hard.embed_batch(cand) - hard.embed(x)).pow(2).sum(1);
  EXPECT_NEAR(f.final_distance, d.max().item<double>(), 1e-6);
  cfg.type = AttackType::Impersonation;
  EXPECT_THROW(random_selection_attack(x, a, std::nullopt, g1, g2, hard, cfg), InputError);
}

TEST(Gradient, PresetsAndValidation) {
  EXPECT_DOUBLE_EQ(GradientAttackConfig::fgsm_l2().epsilon, 0.2);
  EXPECT_DOUBLE_EQ(GradientAttackConfig::fgsm_linf().epsilon, 8.0 / 255.0);
  EXPECT_EQ(GradientAttackConfig::bim().iterations, 20);
  EXPECT_EQ(GradientAttackConfig::pgd().iterations, 40);
  EXPECT_TRUE(GradientAttackConfig::pgd().random_start);
  EXPECT_DOUBLE_EQ(GradientAttackConfig::mifgsm().decay, 1.0);
  auto c = GradientAttackConfig::fgsm_linf();
  c.iterations = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = GradientAttackConfig::bim();
  c.norm = Norm::L2;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(gradient_method_from_string("MI-FGSM"), GradientMethod::MIFGSM);
}

TEST(Gradient, BimWithOneIterationIsFgsm) {
  auto v = untrained_verifier(1.0);
  auto x = batch(7), r = batch(8);
  for (auto type : {AttackType::Impersonation, AttackType::Dodging}) {
    auto f = GradientAttackConfig::fgsm_linf();
    f.type = type;
    auto b = GradientAttackConfig::bim();
    b.iterations = 1;
    b.type = type;
    auto fo = gradient_attack_batch(x, type == AttackType::Dodging ? x : r, v, f);
    auto bo = gradient_attack_batch(x, type == AttackType::Dodging ? x : r, v, b);
    for (std::size_t i = 0; i < fo.size(); ++i) {
      EXPECT_TRUE(torch::equal(fo[i].adversarial, bo[i].adversarial));
    }
  }
}

TEST(Gradient, StaysInsideTheBallAndTheImageRange) {
  auto v = untrained_verifier(1.0, "small-C");
  auto x = batch(9), r = batch(10);
  for (auto type : {AttackType::Impersonation, AttackType::Dodging}) {
    for (auto cfg : {GradientAttackConfig::fgsm_l2(), GradientAttackConfig::fgsm_linf(),
                     GradientAttackConfig::bim(), GradientAttackConfig::pgd(),
                     GradientAttackConfig::mifgsm()}) {
      cfg.type = type;
      auto outs = gradient_attack_batch(x, type == AttackType::Dodging ? x : r, v, cfg);
      for (long i = 0; i < x.size(0); ++i) {
        const auto& adv = outs[static_cast<std::size_t>(i)].adversarial;
        auto delta = (adv - x[i]).to(torch::kFloat64);
        if (cfg.norm == Norm::Linf) {
          EXPECT_LE(delta.abs().max().item<double>(), cfg.epsilon + 1e-6) << to_string(cfg.method);
        } else {
          EXPECT_LE(delta.norm().item<double>(), cfg.epsilon + 1e-5);
        }
        EXPECT_GE(adv.min().item<double>(), 0.0);
        EXPECT_LE(adv.max().item<double>(), 1.0);
        EXPECT_GT(delta.abs().max().item<double>(), 0.0) << "attack left the image unchanged";
      }
    }
  }
}

TEST(Gradient, ImpersonationLowersAndDodgingRaisesTheDistance) {
  auto v = untrained_verifier(1.0, "small-D");
  auto x = batch(11, 6), r = batch(12, 6);
  auto cfg = GradientAttackConfig::pgd();
  cfg.type = AttackType::Impersonation;
  int lower = 0, higher = 0;
  for (const auto& o : gradient_attack_batch(x, r, v, cfg)) lower += o.final_distance < o.initial_distance;
  cfg.type = AttackType::Dodging;
  for (const auto& o : gradient_attack_batch(x, x, v, cfg)) higher += o.final_distance > o.initial_distance;
  EXPECT_EQ(lower, 6);
  EXPECT_EQ(higher, 6);
}

TEST(Gradient, SeededAndBatchConsistent) {
  auto v = untrained_verifier(1.0);
  auto x = batch(13, 3), r = batch(14, 3);
  auto cfg = GradientAttackConfig::pgd();
  cfg.type = AttackType::Impersonation;
  cfg.seed = 4;
  auto a = gradient_attack_batch(x, r, v, cfg), b = gradient_attack_batch(x, r, v, cfg);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(torch::equal(a[i].adversarial, b[i].adversarial));
  auto m = GradientAttackConfig::mifgsm();
  m.type = AttackType::Impersonation;
  auto batched = gradient_attack_batch(x, r, v, m);
  for (long i = 0; i < 3; ++i) {
    auto single = gradient_attack(x[i], r[i], v, m);
    // Sign steps can flip on near-zero gradient entries between batched and
    // single convolutions; nearly every pixel must still agree.
    auto diff = (single.adversarial - batched[static_cast<std::size_t>(i)].adversarial).abs();
    const double agree = (diff <= 1e-5).to(torch::kFloat64).mean().item<double>();
    EXPECT_GE(agree, 0.99);
  }
}

TEST(Gradient, RefusesBlackBoxAndMissingTarget) {
  auto v = untrained_verifier(1.0);
  auto x = batch(15, 1);
  EXPECT_THROW(gradient_attack_batch(x, x, v.as_blackbox(), GradientAttackConfig::bim()),
               AccessViolation);
  auto cfg = GradientAttackConfig::bim();
  cfg.type = AttackType::Impersonation;
  EXPECT_THROW(gradient_attack(x[0], std::nullopt, v, cfg), InputError);
}

TEST(Gradient, ToySurrogateIsBrokenByPgd) {
  const auto& t = toy();
  std::vector<torch::Tensor> xs;
  for (int i = 0; i < 8; ++i) xs.push_back(t.data[t.test_indices[static_cast<std::size_t>(i * 3)]].image);
  auto x = torch::stack(xs);
  auto cfg = t.config.gradient("PGD", AttackType::Dodging);
  int ok = 0;
  for (const auto& o : gradient_attack_batch(x, x, t.surrogate(), cfg)) ok += o.success;
  EXPECT_GE(ok, 6);
}
