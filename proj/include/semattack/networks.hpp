#pragma once

#include <string>
#include <vector>

#include <torch/torch.h>

namespace semattack::nn {

enum class Activation { SiLU, ReLU, LeakyReLU, ELU };
torch::Tensor activate(const torch::Tensor& x, Activation act);

// ---------------------------------------------------------------------------
// Generator: attribute-conditioned encoder/decoder.
//
// The encoder concatenates the tiled attribute code onto the image, applies a
// stem convolution and two stride-2 downsampling blocks (the conv tap), then a
// stack of residual blocks at the same resolution (the res tap). Both taps are
// [N, C, H/4, W/4].
// ---------------------------------------------------------------------------

struct GeneratorArch {
  int n_attributes = 8;
  int stem_channels = 16;
  int feature_channels = 32;
  int residual_blocks = 3;
};

struct ResidualBlockImpl : torch::nn::Module {
  explicit ResidualBlockImpl(int channels);
  torch::Tensor forward(const torch::Tensor& x);
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
};
TORCH_MODULE(ResidualBlock);

struct EncoderTaps {
  torch::Tensor conv;
  torch::Tensor res;
};

struct EncoderImpl : torch::nn::Module {
  explicit EncoderImpl(const GeneratorArch& arch);
  EncoderTaps forward(const torch::Tensor& x, const torch::Tensor& code);
  torch::nn::Conv2d stem{nullptr}, down1{nullptr}, down2{nullptr};
  std::vector<ResidualBlock> blocks;
};
TORCH_MODULE(Encoder);

struct DecoderImpl : torch::nn::Module {
  explicit DecoderImpl(const GeneratorArch& arch);
  torch::Tensor forward(const torch::Tensor& f);
  torch::nn::ConvTranspose2d up1{nullptr}, up2{nullptr};
  torch::nn::Conv2d out{nullptr};
};
TORCH_MODULE(Decoder);

struct GeneratorNetImpl : torch::nn::Module {
  explicit GeneratorNetImpl(const GeneratorArch& arch);
  /// Full translation G(x, c) = decode(res tap).
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& code);
  GeneratorArch arch;
  Encoder encoder{nullptr};
  Decoder decoder{nullptr};
};
TORCH_MODULE(GeneratorNet);

// ---------------------------------------------------------------------------
// Verifier family. Stages of 3x3 convolutions, each followed by a
// downsampling step, then a pooled or flattened projection to the embedding.
// ---------------------------------------------------------------------------

enum class Downsample { Strided, MaxPool, AvgPool };
enum class HeadKind { GlobalPool, Flatten };
enum class LossKind { Softmax, Margin };

struct VerifierArch {
  std::string tag;
  std::vector<int> widths;
  Activation act = Activation::SiLU;
  Downsample down = Downsample::Strided;
  HeadKind head = HeadKind::GlobalPool;
  LossKind loss = LossKind::Softmax;
  int embedding_dim = 64;
  int image_size = 32;
  /// Index of the stage whose output feeds the attribute head (frozen trunk).
  int trunk_stage = 1;

  static VerifierArch from_tag(const std::string& tag);
  static std::vector<std::string> known_tags();
};

struct VerifierOutputs {
  torch::Tensor embedding;   // unit-normalised [N, d]
  torch::Tensor raw;         // pre-normalisation [N, d]
  torch::Tensor trunk;       // stage `trunk_stage` activations
  torch::Tensor last_conv;   // final stage activations, used for Grad-CAM
};

struct VerifierNetImpl : torch::nn::Module {
  explicit VerifierNetImpl(const VerifierArch& arch);
  VerifierOutputs forward(const torch::Tensor& x);
  VerifierArch arch;
  std::vector<torch::nn::Conv2d> convs;
  std::vector<torch::nn::Conv2d> downs;  // only for Strided
  torch::nn::Linear proj{nullptr};
};
TORCH_MODULE(VerifierNet);

// ---------------------------------------------------------------------------
// Attribute heads. `AttributeClassifier` sees raw images; `TrunkAttributeHead`
// sits on frozen verifier trunk activations.
// ---------------------------------------------------------------------------

struct AttributeClassifierImpl : torch::nn::Module {
  AttributeClassifierImpl(int n_attributes, int width);
  torch::Tensor forward(const torch::Tensor& x);  // logits [N, K]
  torch::nn::Conv2d c1{nullptr}, c2{nullptr}, c3{nullptr};
  torch::nn::Linear fc{nullptr};
};
TORCH_MODULE(AttributeClassifier);

struct TrunkAttributeHeadImpl : torch::nn::Module {
  TrunkAttributeHeadImpl(int in_channels, int n_attributes);
  torch::Tensor forward(const torch::Tensor& trunk);  // logits [N, K]
  torch::nn::Conv2d conv{nullptr};
  torch::nn::Linear fc{nullptr};
};
TORCH_MODULE(TrunkAttributeHead);

// ---------------------------------------------------------------------------
// Multi-scale channel attention. A global branch (average pool, pointwise
// bottleneck) and a local branch (per-position pointwise bottleneck, then
// spatially averaged) are summed and squashed to per-channel weights.
// ---------------------------------------------------------------------------

struct ChannelAttentionImpl : torch::nn::Module {
  ChannelAttentionImpl(int channels, int reduction);
  /// Pre-sigmoid logits [N, C] for the summed input.
  torch::Tensor logits(const torch::Tensor& x);
  torch::Tensor forward(const torch::Tensor& x) { return torch::sigmoid(logits(x)); }
  void zero_();
  torch::nn::Conv2d g1{nullptr}, g2{nullptr}, l1{nullptr}, l2{nullptr};
};
TORCH_MODULE(ChannelAttention);

/// Serialises a module's parameters to bytes and loads them into `dst`.
void copy_parameters(torch::nn::Module& src, torch::nn::Module& dst);

}  // namespace semattack::nn
