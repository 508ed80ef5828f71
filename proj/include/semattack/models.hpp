#pragma once

#include <atomic>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "semattack/datagen.hpp"
#include "semattack/networks.hpp"

namespace semattack {

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, nlohmann::json diagnostics)
      : std::runtime_error(what), diagnostics_(std::move(diagnostics)) {}
  const nlohmann::json& diagnostics() const { return diagnostics_; }

 private:
  nlohmann::json diagnostics_;
};

/// Raised when a black-box handle is asked for gradients or parameters.
class AccessViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class Tap { Conv, Res };
std::string to_string(Tap tap);

struct FeatureMap {
  torch::Tensor values;  // [C, H', W']
  Tap tap = Tap::Res;
};

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

/// Anything that maps (images, target codes) to edited images. Significance
/// ranking only needs this much of a generator.
class ImageTranslator {
 public:
  virtual ~ImageTranslator() = default;
  /// x: [N, 3, H, W], codes: [N, K] in {0, 1}.
  virtual torch::Tensor translate(const torch::Tensor& x, const torch::Tensor& codes) const = 0;
  virtual std::size_t n_attributes() const = 0;
};

struct GeneratorTrainConfig {
  nn::GeneratorArch arch;
  int epochs = 30;
  int batch_size = 32;
  double learning_rate = 2e-3;
  double paired_weight = 1.0;
  double reconstruction_weight = 1.0;
  double classification_weight = 0.02;
  double cycle_weight = 0.5;
  /// Attribute indices (into the dataset schema) this generator may edit;
  /// empty means all attributes. Codes passed to the generator are restricted
  /// to these attributes, in this order.
  std::vector<int> attribute_subset;
  double reconstruction_mse_max = 0.01;
  double edit_efficacy_min = 0.70;
  std::uint64_t seed = 1;
  bool verbose = false;
};

class Generator : public ImageTranslator {
 public:
  Generator(nn::GeneratorNet net, AttributeSchema schema, std::vector<int> attribute_subset,
            nlohmann::json metadata);

  /// Single image encode. x: [3, H, W]; c has one bit per generator attribute.
  FeatureMap encode(const Image& x, const AttributeVector& c, Tap tap) const;
  /// Batched encode, both taps. Gradients are never recorded.
  nn::EncoderTaps encode_batch(const torch::Tensor& x, const torch::Tensor& codes) const;
  /// Decodes a [C, H', W'] map to an image, or a [N, C, H', W'] batch.
  /// Autograd tracks the input if it requires grad; parameters stay frozen.
  torch::Tensor decode(const torch::Tensor& f) const;
  torch::Tensor translate(const torch::Tensor& x, const torch::Tensor& codes) const override;
  std::size_t n_attributes() const override;

  /// Projects a dataset-schema code onto this generator's attribute subset.
  torch::Tensor project_codes(const torch::Tensor& full_codes) const;

  const AttributeSchema& schema() const { return schema_; }
  const std::vector<int>& attribute_subset() const { return subset_; }
  const nlohmann::json& metadata() const { return metadata_; }
  std::vector<int64_t> feature_shape() const;
  int image_size() const { return image_size_; }
  nn::GeneratorNet net() const { return net_; }

  /// Deep copy with parameters cast to `dtype` (used by gradient checks).
  Generator cast(torch::Dtype dtype) const;

 private:
  void check_image_batch(const torch::Tensor& x) const;
  mutable nn::GeneratorNet net_;
  AttributeSchema schema_;
  std::vector<int> subset_;
  nlohmann::json metadata_;
  int image_size_ = 32;
};

/// Independently trained attribute classifier on raw images.
struct AttributeClassifierConfig {
  int width = 16;
  int epochs = 8;
  int batch_size = 64;
  double learning_rate = 3e-3;
  std::uint64_t seed = 11;
  double accuracy_min = 0.9;
};

class AttributeClassifierModel {
 public:
  AttributeClassifierModel(nn::AttributeClassifier net, AttributeSchema schema);
  /// Probabilities [N, K].
  torch::Tensor predict(const torch::Tensor& x) const;
  /// Differentiable logits, for auxiliary losses.
  torch::Tensor logits(const torch::Tensor& x) const;
  const AttributeSchema& schema() const { return schema_; }
  nn::AttributeClassifier net() const { return net_; }

 private:
  mutable nn::AttributeClassifier net_;
  AttributeSchema schema_;
};

AttributeClassifierModel train_attribute_classifier(const std::vector<DatasetRecord>& data,
                                                    const AttributeSchema& schema,
                                                    const AttributeClassifierConfig& cfg);

/// Trains a generator. `aux` supplies the auxiliary classification loss on
/// edited outputs; `judge` is an independently trained classifier used only
/// for the efficacy check on held-out images. Paired ground truth comes from
/// re-rendering each record with the target code.
Generator train_generator(const std::vector<DatasetRecord>& data, const AttributeSchema& schema,
                          std::uint64_t dataset_seed, const GeneratorTrainConfig& cfg,
                          const AttributeClassifierModel& aux,
                          const AttributeClassifierModel& judge);

struct GeneratorQuality {
  double reconstruction_mse = 0.0;
  double edit_efficacy = 0.0;
  int edits = 0;
};
GeneratorQuality evaluate_generator(const Generator& g, const std::vector<DatasetRecord>& data,
                                    const std::vector<std::size_t>& held_out,
                                    const AttributeClassifierModel& judge);

// ---------------------------------------------------------------------------
// Verifier
// ---------------------------------------------------------------------------

enum class Access { WhiteBox, BlackBox };
std::string to_string(Access access);

/// Counts every interaction with a verifier handle.
struct AccessLog {
  std::atomic<long> embed_queries{0};    // images embedded without gradients
  std::atomic<long> gradient_calls{0};   // differentiable forwards
  std::atomic<long> parameter_access{0};
  void reset() {
    embed_queries = 0;
    gradient_calls = 0;
    parameter_access = 0;
  }
};

struct VerifierTrainConfig {
  int epochs = 20;
  int batch_size = 64;
  double learning_rate = 3e-3;
  double margin = 0.25;  // additive cosine margin for margin-loss architectures
  double scale = 16.0;
  double accuracy_floor = 0.90;
  std::uint64_t seed = 1;
  bool verbose = false;
};

class Verifier {
 public:
  Verifier(nn::VerifierNet net, Access access, nlohmann::json metadata);

  const std::string& arch_tag() const;
  int embedding_dim() const;
  Access access() const { return access_; }

  /// [3, H, W] -> [d]. Counted as one query.
  torch::Tensor embed(const Image& x) const;
  /// [N, 3, H, W] -> [N, d]. Counted as N queries. Never records gradients.
  torch::Tensor embed_batch(const torch::Tensor& x) const;
  /// White-box only: differentiable embedding of x.
  torch::Tensor embed_differentiable(const torch::Tensor& x) const;
  /// White-box only: full forward exposing intermediate activations.
  nn::VerifierOutputs forward_differentiable(const torch::Tensor& x) const;
  /// White-box only: direct network access.
  nn::VerifierNet net() const;

  /// A view that shares the parameters but only answers embedding queries.
  Verifier as_blackbox() const;
  Verifier cast(torch::Dtype dtype) const;

  std::optional<double> threshold() const { return threshold_; }
  void set_threshold(double t) { threshold_ = t; }

  const AccessLog& log() const { return *log_; }
  void reset_log() const { log_->reset(); }
  const nlohmann::json& metadata() const { return metadata_; }

 private:
  void require_whitebox(const char* what) const;
  mutable nn::VerifierNet net_;
  Access access_;
  nlohmann::json metadata_;
  std::optional<double> threshold_;
  std::shared_ptr<AccessLog> log_;
};

Verifier train_verifier(const std::vector<DatasetRecord>& data, const std::string& arch_tag,
                        const VerifierTrainConfig& cfg);

struct VerificationStats {
  double accuracy_at_eer = 0.0;
  double eer_threshold = 0.0;  // squared distance
  double genuine_cos_mean = 0.0;
  double impostor_cos_mean = 0.0;
};
/// Genuine pairs: same identity; impostor pairs: sampled, equal in number.
VerificationStats evaluate_verifier(const Verifier& v, const std::vector<DatasetRecord>& data,
                                    Split split, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Attribute predictor on a frozen verifier trunk
// ---------------------------------------------------------------------------

struct AttributeHeadConfig {
  int epochs = 10;
  int batch_size = 64;
  double learning_rate = 3e-3;
  double accuracy_floor = 0.85;
  std::uint64_t seed = 5;
};

class AttributePredictor {
 public:
  AttributePredictor(Verifier trunk, nn::TrunkAttributeHead head, AttributeSchema schema);
  /// Probabilities [N, K].
  torch::Tensor predict(const torch::Tensor& x) const;
  const Verifier& trunk() const { return trunk_; }
  nn::TrunkAttributeHead head() const { return head_; }
  const AttributeSchema& schema() const { return schema_; }
  std::vector<double> accuracies;  // held-out per-attribute accuracy

 private:
  Verifier trunk_;
  mutable nn::TrunkAttributeHead head_;
  AttributeSchema schema_;
};

AttributePredictor train_attribute_head(const Verifier& v, const std::vector<DatasetRecord>& data,
                                        const AttributeSchema& schema,
                                        const AttributeHeadConfig& cfg);

// ---------------------------------------------------------------------------
// Checkpoints: <dir>/<name>.pt parameter archive plus <dir>/<name>.json manifest.
// ---------------------------------------------------------------------------

void save_generator(const Generator& g, const std::filesystem::path& dir, const std::string& name,
                    const nlohmann::json& provenance);
Generator load_generator(const std::filesystem::path& dir, const std::string& name,
                         const AttributeSchema& schema);

void save_verifier(const Verifier& v, const std::filesystem::path& dir, const std::string& name,
                   const AttributeSchema& schema, const nlohmann::json& provenance);
Verifier load_verifier(const std::filesystem::path& dir, const std::string& name,
                       const AttributeSchema& schema, Access access);

void save_attribute_classifier(const AttributeClassifierModel& m, const std::filesystem::path& dir,
                               const std::string& name, const nlohmann::json& provenance);
AttributeClassifierModel load_attribute_classifier(const std::filesystem::path& dir,
                                                   const std::string& name,
                                                   const AttributeSchema& schema,
                                                   const AttributeClassifierConfig& cfg);

void save_attribute_head(const AttributePredictor& p, const std::filesystem::path& dir,
                         const std::string& name, const nlohmann::json& provenance);
AttributePredictor load_attribute_head(const std::filesystem::path& dir, const std::string& name,
                                       const Verifier& trunk, const AttributeSchema& schema);

bool checkpoint_exists(const std::filesystem::path& dir, const std::string& name);

}  // namespace semattack
