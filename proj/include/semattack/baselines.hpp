#pragma once

#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "semattack/blackbox.hpp"
#include "semattack/models.hpp"
#include "semattack/outcome.hpp"

namespace semattack {

struct RandomSelectionConfig {
  std::vector<int> s1;  // attributes edited by the first generator
  std::vector<int> s2;  // attributes edited by the second generator
  double alpha = 0.5;
  AttackType type = AttackType::Dodging;

  /// The two disjoint four-attribute sets used with the default schema.
  static RandomSelectionConfig with_default_sets(const AttributeSchema& schema);
  void validate(std::size_t n_attributes) const;
};

/// Candidate images for every (s1, s2) pair in enumeration order:
/// alpha * G1(x, s1) + (1 - alpha) * G2(G1(x, s1), s2). [|S1| * |S2|, 3, H, W].
torch::Tensor random_selection_candidates(const Image& x, const AttributeVector& attrs,
                                          const Generator& g1, const Generator& g2,
                                          const RandomSelectionConfig& cfg);

/// Accepts the first successful candidate; otherwise reports the best one.
AttackOutcome random_selection_attack(const Image& x, const AttributeVector& attrs,
                                      const std::optional<Image>& target, const Generator& g1,
                                      const Generator& g2, const Verifier& v,
                                      const RandomSelectionConfig& cfg);

/// Same search loop as the black-box attack with a random attribute order.
AttackOutcome improved_random_blackbox(const BlackboxRequest& request, const Generator& g,
                                       const Verifier& v, const BlackboxConfig& cfg,
                                       std::uint64_t seed);

enum class GradientMethod { FGSM, BIM, PGD, MIFGSM };
enum class Norm { L2, Linf };
std::string to_string(GradientMethod m);
GradientMethod gradient_method_from_string(const std::string& s);

struct GradientAttackConfig {
  GradientMethod method = GradientMethod::PGD;
  Norm norm = Norm::Linf;
  double epsilon = 8.0 / 255.0;
  int iterations = 40;
  /// Step size; <= 0 picks epsilon / iterations (2.5x that for PGD).
  double step = -1.0;
  double decay = 1.0;
  bool random_start = false;
  /// Dodging starts at the loss minimum (zero gradient); without a random
  /// start the first gradient is taken at x plus seeded noise of this size.
  double dodging_jitter = 1e-3;
  std::uint64_t seed = 0;
  AttackType type = AttackType::Dodging;

  double effective_step() const;
  void validate() const;

  static GradientAttackConfig fgsm_l2();   // eps 0.2, one step
  static GradientAttackConfig fgsm_linf(); // eps 8/255, one step
  static GradientAttackConfig bim();       // 20 iterations
  static GradientAttackConfig pgd();       // 40 iterations, random start
  static GradientAttackConfig mifgsm();    // 40 iterations, decay 1.0
};

/// Pixel-space attacks on the embedding distance to `reference` images:
/// impersonation lowers it, dodging raises it. x, reference: [N, 3, H, W].
std::vector<AttackOutcome> gradient_attack_batch(const torch::Tensor& x,
                                                 const torch::Tensor& reference,
                                                 const Verifier& v,
                                                 const GradientAttackConfig& cfg);

AttackOutcome gradient_attack(const Image& x, const std::optional<Image>& target,
                              const Verifier& v, const GradientAttackConfig& cfg);

}  // namespace semattack
