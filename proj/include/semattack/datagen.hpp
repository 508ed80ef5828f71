#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace semattack {

/// Images are float32 tensors laid out [3, H, W] with values in [0, 1].
/// Batches are [N, 3, H, W].
using Image = torch::Tensor;

/// Binary attribute code, one entry per schema attribute.
using AttributeVector = std::vector<int>;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class RenderRule {
  EyeBand,      // glasses
  TopBar,       // bangs
  MouthCurve,   // smile
  SkinBright,   // pale_skin
  HairHue,      // hair_color
  JawTexture,   // beard
  CheekDots,    // blush
  SideDots,     // earrings
};

std::string to_string(RenderRule rule);
RenderRule render_rule_from_string(const std::string& name);

struct AttributeSchema {
  std::vector<std::string> names;
  std::vector<RenderRule> rules;

  static AttributeSchema default_schema();

  std::size_t size() const { return names.size(); }
  int index_of(const std::string& name) const;
  /// Stable FNV-1a hash over names and rules, used to tie checkpoints to a schema.
  std::string hash() const;
  void validate() const;
};

/// Identity geometry. Every parameter is drawn from a small set of levels, and
/// distinct identity ids map to distinct level combinations, so two identities
/// always differ in at least one parameter by one level step.
struct IdentitySpec {
  int identity_id = 0;
  std::uint64_t geometry_seed = 0;

  double face_cx = 16.0;
  double face_cy = 17.0;
  double face_ax = 8.0;     // horizontal semi-axis
  double face_ay = 10.0;    // vertical semi-axis
  double eye_spacing = 4.0; // half distance between eye centres
  double nose_length = 3.0;
  double mouth_width = 4.0;
  double skin[3] = {0.8, 0.6, 0.5};
  double iris[3] = {0.2, 0.3, 0.5};

  static constexpr int kLevels = 5;
  static constexpr int kParams = 7;
  /// Distinct identities exist for ids in [0, kLevels^kParams).
  static constexpr int kMaxIdentities = 78125;

  /// Level index of each parameter: ax, ay, eye spacing, nose, mouth, skin, iris.
  std::array<int, kParams> level{};

  static IdentitySpec from_id(int identity_id, std::uint64_t seed);
};

enum class Split { Train, Val, Test };
std::string to_string(Split split);
Split split_from_string(const std::string& s);

struct DatasetRecord {
  Image image;
  int identity_id = 0;
  AttributeVector attributes;
  Split split = Split::Train;
  std::string image_path;  // relative to the dataset root; empty until persisted
};

struct DatasetConfig {
  int n_identities = 200;
  int images_per_identity = 20;
  int image_size = 32;
  /// Identities with id >= n_identities * (1 - test_fraction) form the test split.
  double test_fraction = 0.2;
  /// Within training identities, every n-th image is held out as validation.
  int val_every = 10;
  std::uint64_t seed = 7;
};

/// Renders one synthetic face. Values are quantised to multiples of 1/255 so
/// that 8-bit lossless storage round-trips bit-exactly.
Image render_face(const IdentitySpec& identity, const AttributeVector& attrs,
                  const AttributeSchema& schema, int size = 32);

std::vector<DatasetRecord> generate_dataset(const DatasetConfig& cfg,
                                            const AttributeSchema& schema);

/// Writes one PNG per record under root/images and root/manifest.txt.
void save_dataset(const std::filesystem::path& root, std::vector<DatasetRecord>& records,
                  const AttributeSchema& schema, const std::string& provenance);
std::vector<DatasetRecord> load_dataset(const std::filesystem::path& root,
                                        const AttributeSchema& schema);

/// Stacks record images into a [N, 3, H, W] batch.
torch::Tensor stack_images(const std::vector<DatasetRecord>& records,
                           const std::vector<std::size_t>& indices);
torch::Tensor stack_attributes(const std::vector<DatasetRecord>& records,
                               const std::vector<std::size_t>& indices);
std::vector<std::size_t> indices_of(const std::vector<DatasetRecord>& records, Split split);

torch::Tensor attributes_to_tensor(const AttributeVector& attrs);
AttributeVector flip(AttributeVector attrs, int index);

}  // namespace semattack
