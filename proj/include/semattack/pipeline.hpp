#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "semattack/baselines.hpp"
#include "semattack/blackbox.hpp"
#include "semattack/datagen.hpp"
#include "semattack/metrics.hpp"
#include "semattack/models.hpp"
#include "semattack/whitebox.hpp"

namespace semattack {

/// Config problems; `errors` lists every violated field.
class ValidationError : public ConfigError {
 public:
  explicit ValidationError(std::vector<std::string> errors);
  const std::vector<std::string>& errors() const { return errors_; }

 private:
  std::vector<std::string> errors_;
};

/// A command needs an artifact that another command produces.
class MissingArtifact : public std::runtime_error {
 public:
  MissingArtifact(const std::filesystem::path& path, const std::string& producer);
};

/// Another process holds the run directory.
class LockError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Environment variable that overrides `output_root`.
inline constexpr const char* kOutputRootEnv = "SEMATTACK_OUTPUT_ROOT";

class RunConfig {
 public:
  /// Built-in defaults (the toy setup).
  static nlohmann::json defaults();
  /// Defaults, deep-merged with the file (if any), then `key.path=value`
  /// overrides, then the seed override. Validates the result.
  static RunConfig load(const std::optional<std::filesystem::path>& file,
                        const std::vector<std::string>& overrides = {},
                        std::optional<std::uint64_t> seed = std::nullopt);
  static RunConfig from_json(nlohmann::json j);

  const nlohmann::json& json() const { return j_; }
  std::uint64_t seed() const;
  /// Stable hash of everything except the output root.
  std::string hash() const;
  std::filesystem::path output_root() const;
  std::filesystem::path run_dir() const;
  std::filesystem::path dir(const std::string& sub) const { return run_dir() / sub; }
  nlohmann::json provenance(const std::string& command) const;
  std::string provenance_line() const;

  DatasetConfig dataset() const;
  AttributeClassifierConfig classifier(std::uint64_t seed_salt) const;
  GeneratorTrainConfig generator(const std::string& which) const;
  VerifierTrainConfig verifier(const std::string& tag) const;
  AttributeHeadConfig attribute_head() const;
  std::string surrogate() const;
  std::vector<std::string> transfer_targets() const;
  std::string blackbox_target() const;
  std::vector<std::string> roster() const;  // surrogate first
  WhiteboxConfig whitebox(AttackType type, int n_attributes) const;
  BlackboxConfig blackbox(AttackType type) const;
  RandomSelectionConfig random_selection(const AttributeSchema& schema, AttackType type) const;
  std::vector<std::string> gradient_methods() const;
  GradientAttackConfig gradient(const std::string& method, AttackType type) const;
  std::vector<AttackType> attack_types() const;

 private:
  explicit RunConfig(nlohmann::json j) : j_(std::move(j)) {}
  void validate() const;
  nlohmann::json j_;
};

/// Stream seed for one use of the run seed; distinct salts give independent
/// streams.
std::uint64_t derive_seed(std::uint64_t seed, const std::string& salt);

/// Applies one `a.b.c=value` override; the value is parsed as JSON when it
/// parses, otherwise taken as a string.
void apply_override(nlohmann::json& j, const std::string& assignment);

/// Holds <run_dir>/.lock for the lifetime of the object.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& run_dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

/// One attacked (source, target) pair from the test split.
struct AttackPair {
  long pair_id = 0;
  std::size_t source = 0;
  std::size_t target = 0;
};
std::vector<AttackPair> select_attack_pairs(const std::vector<DatasetRecord>& data, int n,
                                            std::uint64_t seed);

/// Loaded models and calibrated thresholds for a run.
struct TrainedModels {
  Generator generator;
  Generator generator_s1;
  Generator generator_s2;
  std::map<std::string, Verifier> verifiers;  // white-box handles, thresholds set
  std::map<std::string, ThresholdCalibration> calibrations;
  AttributePredictor attribute_head;
};
TrainedModels load_models(const RunConfig& cfg, const AttributeSchema& schema);
std::vector<DatasetRecord> load_run_dataset(const RunConfig& cfg, const AttributeSchema& schema);

/// Stored adversarial outputs of one method and attack type.
struct AttackRecordSet {
  std::vector<AttackOutcome> outcomes;
  torch::Tensor adversarial;  // [N, 3, H, W]
};
std::string attack_file_stem(const std::string& method, AttackType type);
AttackRecordSet load_attack_records(const RunConfig& cfg, const std::string& method,
                                    AttackType type);
/// Every method the attack step runs, in report order.
std::vector<std::string> attack_methods(const RunConfig& cfg);

void cmd_generate(const RunConfig& cfg, std::ostream& log);
void cmd_train(const RunConfig& cfg, std::ostream& log);
void cmd_rank(const RunConfig& cfg, std::ostream& log);
void cmd_attack(const RunConfig& cfg, std::ostream& log);
void cmd_evaluate(const RunConfig& cfg, std::ostream& log);
void cmd_report(const RunConfig& cfg, std::ostream& log);

/// generate, train, rank, attack, evaluate, report.
void run_all(const RunConfig& cfg, std::ostream& log);

/// Dispatches by name and maps failures to exit codes: 0 success,
/// 1 validation or missing input, 2 runtime or training failure.
int run_command(const std::string& command, const RunConfig& cfg, std::ostream& log,
                std::ostream& err);

/// Reads a CSV written by the pipeline, skipping `#` comment lines.
std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path);

}  // namespace semattack
