#pragma once

#include <optional>
#include <vector>

#include <torch/torch.h>

#include "semattack/models.hpp"
#include "semattack/outcome.hpp"
#include "semattack/significance.hpp"

namespace semattack {

enum class BetaGranularity { Scalar, Channel, Element };
std::string to_string(BetaGranularity g);
BetaGranularity beta_granularity_from_string(const std::string& s);

struct WhiteboxConfig {
  int max_iterations = 300;
  double learning_rate = 0.05;
  AttackType type = AttackType::Impersonation;
  int n_attributes = 1;  // 1 or 2 top-ranked attributes flipped in one code
  /// Early stop once the distance clears T by this much. Success is still
  /// judged against T itself.
  double success_margin = 0.0;
  BetaGranularity granularity = BetaGranularity::Channel;
  int reduction = 4;
  std::uint64_t attention_seed = 17;
  bool record_losses = false;

  void validate() const;
};

/// Attention module with a fixed, seeded initialisation.
nn::ChannelAttention make_attention(int channels, int reduction, std::uint64_t seed);

/// sigmoid(MS(f_conv + f_res)); accepts [C, H, W] (returns [C]) or a batch
/// [N, C, H, W] (returns [N, C]).
torch::Tensor ms_attention_beta(const torch::Tensor& f_conv, const torch::Tensor& f_res,
                                nn::ChannelAttention& attention);

/// beta * f_conv + (1 - beta) * f_res. beta may be a scalar, per channel
/// ([C] or [N, C]) or the full feature shape. Entries must lie in [0, 1].
torch::Tensor fuse(const torch::Tensor& f_conv, const torch::Tensor& f_res,
                   const torch::Tensor& beta);

/// Per-sample objective for theta = logit(beta), batched over N:
/// impersonation ||e(x*) - ref||^2, dodging -||e(x*) - ref||^2. Differentiable
/// in theta.
torch::Tensor fusion_objective(const Generator& g, const Verifier& v, const torch::Tensor& f_conv,
                               const torch::Tensor& f_res, const torch::Tensor& theta,
                               const torch::Tensor& reference, AttackType type);

/// Flips the first `n` ranked attributes in `attrs`.
AttributeVector edit_code(const AttributeVector& attrs, const AttributeRanking& ranking, int n);

struct WhiteboxRequest {
  Image x;
  AttributeVector attributes;  // x's attributes in the dataset schema
  AttributeRanking ranking;
  std::optional<Image> target;  // required for impersonation
  long source_index = -1;
  long target_index = -1;
};

/// Independent attacks run together; each sample keeps its own Adam moments
/// and stops on its own.
std::vector<AttackOutcome> whitebox_attack_batch(const std::vector<WhiteboxRequest>& requests,
                                                 const Generator& g, const Verifier& v,
                                                 const WhiteboxConfig& cfg,
                                                 std::vector<std::vector<double>>* losses = nullptr);

AttackOutcome whitebox_attack(const WhiteboxRequest& request, const Generator& g,
                              const Verifier& v, const WhiteboxConfig& cfg);

}  // namespace semattack
