#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "semattack/models.hpp"
#include "semattack/outcome.hpp"
#include "semattack/significance.hpp"

namespace semattack {

struct GammaGrid {
  enum class Mode { Uniform, Random };
  Mode mode = Mode::Uniform;
  std::uint64_t seed = 0;
  std::vector<double> values;

  /// n evenly spaced values from 0 to 1 inclusive.
  static GammaGrid uniform(int n = 100);
  /// n values drawn from U[0, 1] with a fixed seed.
  static GammaGrid random(int n, std::uint64_t seed);
};

struct BlackboxConfig {
  double similarity_threshold = 0.6;  // SSIM against the current base image
  int max_attributes = -1;            // -1: all attributes
  GammaGrid grid = GammaGrid::uniform();
  AttackType type = AttackType::Dodging;
  /// Abort the attack on the first candidate the filter rejects instead of
  /// moving on to the next attribute.
  bool strict_filter = false;

  void validate(std::size_t n_attributes) const;
};

/// Accepts when SSIM(x_base, x_candidate) > th.
bool semantic_filter(const Image& x_base, const Image& x_candidate, double th);

struct BlackboxRequest {
  Image x;
  AttributeVector attributes;
  std::optional<Image> target;
  long source_index = -1;
  long target_index = -1;
};

/// Decides the order in which attributes are tried.
using AttributeOrder = std::function<std::vector<int>(const BlackboxRequest&)>;

AttributeOrder ranked_order(const AttributeRanking& ranking);
/// Uniform random permutation, seeded.
AttributeOrder random_order(std::uint64_t seed);

/// The shared query-only search loop. `v` must be a black-box handle.
AttackOutcome interpolation_search(const BlackboxRequest& request, const Generator& g,
                                   const Verifier& v, const BlackboxConfig& cfg,
                                   const AttributeOrder& order, const std::string& method);

/// Attributes tried in CS-ranking order.
AttackOutcome blackbox_attack(const BlackboxRequest& request, const Generator& g,
                              const Verifier& v, const AttributeRanking& ranking,
                              const BlackboxConfig& cfg);

}  // namespace semattack
