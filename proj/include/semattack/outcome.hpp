#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace semattack {

enum class AttackType { Impersonation, Dodging };
std::string to_string(AttackType t);
AttackType attack_type_from_string(const std::string& s);

/// Squared Euclidean distance between embeddings. For unit vectors this is
/// 2 - 2 cos, so thresholding it at T matches thresholding cos at 1 - T/2.
double embedding_distance(const torch::Tensor& a, const torch::Tensor& b);

/// Impersonation succeeds at d <= T, dodging at d > T.
bool attack_succeeded(AttackType type, double distance, double threshold);

struct AttackOutcome {
  std::string method;
  AttackType type = AttackType::Dodging;
  long source_index = -1;   // dataset record index of x
  long target_index = -1;   // dataset record index of the target, -1 for dodging
  std::vector<int> attributes;  // attributes edited, in the order applied
  bool success = false;
  int iterations = 0;
  long queries = 0;
  long candidates = 0;
  double initial_distance = 0.0;
  double final_distance = 0.0;
  double threshold = 0.0;
  torch::Tensor adversarial;  // [3, H, W]
  std::string image_path;

  /// Everything except the image tensor.
  nlohmann::json to_json() const;
  static AttackOutcome from_json(const nlohmann::json& j);
};

}  // namespace semattack
