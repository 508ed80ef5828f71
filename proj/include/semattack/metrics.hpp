#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "semattack/datagen.hpp"
#include "semattack/models.hpp"
#include "semattack/outcome.hpp"

namespace semattack {

class CalibrationError : public InputError {
 public:
  using InputError::InputError;
};

/// T is a threshold on squared Euclidean embedding distance; T_s = 1 - T/2 is
/// the matching cosine threshold for unit embeddings.
struct ThresholdCalibration {
  std::string verifier;
  double T = 0.0;
  double T_s = 1.0;
  double fpr_level = 0.01;
  long impostor_pairs = 0;
  long genuine_pairs = 0;
  double genuine_accept_rate = 0.0;  // fraction of genuine pairs with d <= T
  nlohmann::json to_json() const;
  static ThresholdCalibration from_json(const nlohmann::json& j);
};

using IndexPair = std::pair<std::size_t, std::size_t>;

/// Cross-identity pairs among records of `split`, at most `cap`, sampled
/// uniformly without replacement when there are more.
std::vector<IndexPair> impostor_pairs(const std::vector<DatasetRecord>& data, Split split,
                                      std::size_t cap, std::uint64_t seed);
std::vector<IndexPair> genuine_pairs(const std::vector<DatasetRecord>& data, Split split,
                                     std::size_t cap, std::uint64_t seed);

/// Largest order statistic T with #{d <= T} <= fpr * n.
ThresholdCalibration calibrate_from_distances(std::vector<double> impostor_distances,
                                              double fpr_level);

ThresholdCalibration calibrate_threshold(const Verifier& v, const std::vector<DatasetRecord>& data,
                                         const std::vector<IndexPair>& impostors,
                                         const std::vector<IndexPair>& genuines,
                                         double fpr_level);

/// Rows of two embedding batches.
torch::Tensor pairwise_cosine(const torch::Tensor& a, const torch::Tensor& b);

double asr_impersonation(const torch::Tensor& adv_embeddings, const torch::Tensor& target_embeddings,
                         const ThresholdCalibration& cal);
double asr_dodging(const torch::Tensor& adv_embeddings, const torch::Tensor& source_embeddings,
                   const ThresholdCalibration& cal);
/// Image-level wrapper: embeds both batches with v.
double attack_success_rate(AttackType type, const Verifier& v, const torch::Tensor& adversarial,
                           const torch::Tensor& reference, const ThresholdCalibration& cal);

double mse(const torch::Tensor& x, const torch::Tensor& y);

/// Luma weights used for SSIM's grayscale conversion.
inline constexpr double kLuma[3] = {0.299, 0.587, 0.114};
/// Mean SSIM over valid 11x11 Gaussian (sigma 1.5) windows on the luma
/// channel, L = 1. Images smaller than the window use a cropped window.
double ssim(const Image& x, const Image& y);
/// Batched form, [N, 3, H, W] -> [N].
std::vector<double> ssim_batch(const torch::Tensor& x, const torch::Tensor& y);

struct TransferMatrix {
  AttackType type = AttackType::Dodging;
  std::vector<std::string> sources;
  std::vector<std::string> targets;
  std::vector<std::vector<double>> cells;  // [source][target]
  std::vector<long> set_sizes;
};

struct AdversarialSet {
  std::string source;
  AttackType type = AttackType::Dodging;
  torch::Tensor adversarial;  // [N, 3, H, W]
  torch::Tensor reference;    // target (impersonation) or original (dodging)
};

/// Keeps only rows that succeed against `source` under its calibration.
AdversarialSet successful_subset(const AdversarialSet& set, const Verifier& source,
                                 const ThresholdCalibration& cal);

TransferMatrix transfer_matrix(const std::vector<AdversarialSet>& sets,
                               const std::vector<const Verifier*>& roster,
                               const std::map<std::string, ThresholdCalibration>& calibrations);

struct SimilarityShift {
  std::vector<double> edges;  // bins + 1 edges over [-1, 1]
  std::vector<long> before;
  std::vector<long> after;
  double crossing_fraction = 0.0;
};
/// Cosine similarities of matched pairs before and after an attack. Crossing
/// counts pairs that move from the failing side of T_s to the successful side.
SimilarityShift similarity_shift_histogram(const std::vector<double>& before,
                                           const std::vector<double>& after, AttackType type,
                                           const ThresholdCalibration& cal, int bins = 20);

/// One-sided paired sign test: P(X >= wins) for X ~ Binomial(wins + losses,
/// 1/2). Ties are dropped before calling. Returns 1 when there are no
/// discordant pairs.
double sign_test_p(long wins, long losses);

/// Grad-CAM on the verifier's last convolutional stage for the scalar
/// -||e(x) - reference||^2. Returns [H, W] in [0, 1]; a constant map gives zeros.
torch::Tensor gradcam(const Verifier& v, const Image& x, const torch::Tensor& reference);

}  // namespace semattack
