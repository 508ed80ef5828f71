#include "semattack/outcome.hpp"

#include "semattack/datagen.hpp"

namespace semattack {

std::string to_string(AttackType t) {
  return t == AttackType::Impersonation ? "impersonation" : "dodging";
}

AttackType attack_type_from_string(const std::string& s) {
  if (s == "impersonation") return AttackType::Impersonation;
  if (s == "dodging") return AttackType::Dodging;
  throw ConfigError("unknown attack type: " + s);
}

double embedding_distance(const torch::Tensor& a, const torch::Tensor& b) {
  return (a.to(torch::kFloat64) - b.to(torch::kFloat64)).pow(2).sum().item<double>();
}

bool attack_succeeded(AttackType type, double distance, double threshold) {
  return type == AttackType::Impersonation ? distance <= threshold : distance > threshold;
}

nlohmann::json AttackOutcome::to_json() const {
  return {{"method", method},
          {"type", to_string(type)},
          {"source_index", source_index},
          {"target_index", target_index},
          {"attributes", attributes},
          {"success", success},
          {"iterations", iterations},
          {"queries", queries},
          {"candidates", candidates},
          {"initial_distance", initial_distance},
          {"final_distance", final_distance},
          {"threshold", threshold},
          {"image_path", image_path}};
}

AttackOutcome AttackOutcome::from_json(const nlohmann::json& j) {
  AttackOutcome o;
  o.method = j.at("method");
  o.type = attack_type_from_string(j.at("type"));
  o.source_index = j.at("source_index");
  o.target_index = j.at("target_index");
  o.attributes = j.at("attributes").get<std::vector<int>>();
  o.success = j.at("success");
  o.iterations = j.at("iterations");
  o.queries = j.at("queries");
  o.candidates = j.at("candidates");
  o.initial_distance = j.at("initial_distance");
  o.final_distance = j.at("final_distance");
  o.threshold = j.at("threshold");
  o.image_path = j.value("image_path", "");
  return o;
}

}  // namespace semattack
