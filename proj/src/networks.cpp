#include "semattack/networks.hpp"

#include <sstream>
#include <stdexcept>

namespace semattack::nn {

namespace F = torch::nn::functional;

torch::Tensor activate(const torch::Tensor& x, Activation act) {
  switch (act) {
    case Activation::SiLU: return F::silu(x);
    case Activation::ReLU: return torch::relu(x);
    case Activation::LeakyReLU: return F::leaky_relu(x, F::LeakyReLUFuncOptions().negative_slope(0.1));
    case Activation::ELU: return F::elu(x);
  }
  return x;
}

namespace {

torch::nn::Conv2dOptions conv_opts(int in, int out, int k, int stride, int pad) {
  return torch::nn::Conv2dOptions(in, out, k).stride(stride).padding(pad);
}

}  // namespace

ResidualBlockImpl::ResidualBlockImpl(int channels) {
  conv1 = register_module("conv1", torch::nn::Conv2d(conv_opts(channels, channels, 3, 1, 1)));
  conv2 = register_module("conv2", torch::nn::Conv2d(conv_opts(channels, channels, 3, 1, 1)));
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x) {
  return x + conv2(F::silu(conv1(F::silu(x))));
}

EncoderImpl::EncoderImpl(const GeneratorArch& arch) {
  const int in = 3 + arch.n_attributes;
  stem = register_module("stem", torch::nn::Conv2d(conv_opts(in, arch.stem_channels, 3, 1, 1)));
  down1 = register_module(
      "down1", torch::nn::Conv2d(conv_opts(arch.stem_channels, arch.feature_channels, 4, 2, 1)));
  down2 = register_module(
      "down2", torch::nn::Conv2d(conv_opts(arch.feature_channels, arch.feature_channels, 4, 2, 1)));
  for (int i = 0; i < arch.residual_blocks; ++i) {
    blocks.push_back(register_module("res" + std::to_string(i),
                                     ResidualBlock(arch.feature_channels)));
  }
}

EncoderTaps EncoderImpl::forward(const torch::Tensor& x, const torch::Tensor& code) {
  auto tiled = code.view({code.size(0), code.size(1), 1, 1})
                   .expand({code.size(0), code.size(1), x.size(2), x.size(3)});
  auto h = F::silu(stem(torch::cat({x, tiled}, 1)));
  h = F::silu(down1(h));
  h = down2(h);
  EncoderTaps taps;
  taps.conv = h;
  for (auto& b : blocks) h = b->forward(h);
  taps.res = h;
  return taps;
}

DecoderImpl::DecoderImpl(const GeneratorArch& arch) {
  up1 = register_module("up1", torch::nn::ConvTranspose2d(
                                   torch::nn::ConvTranspose2dOptions(arch.feature_channels,
                                                                     arch.feature_channels, 4)
                                       .stride(2)
                                       .padding(1)));
  up2 = register_module("up2", torch::nn::ConvTranspose2d(
                                   torch::nn::ConvTranspose2dOptions(arch.feature_channels,
                                                                     arch.stem_channels, 4)
                                       .stride(2)
                                       .padding(1)));
  out = register_module("out", torch::nn::Conv2d(conv_opts(arch.stem_channels, 3, 3, 1, 1)));
}

torch::Tensor DecoderImpl::forward(const torch::Tensor& f) {
  auto h = F::silu(up1(F::silu(f)));
  h = F::silu(up2(h));
  return torch::sigmoid(out(h));
}

GeneratorNetImpl::GeneratorNetImpl(const GeneratorArch& a) : arch(a) {
  encoder = register_module("encoder", Encoder(arch));
  decoder = register_module("decoder", Decoder(arch));
}

torch::Tensor GeneratorNetImpl::forward(const torch::Tensor& x, const torch::Tensor& code) {
  return decoder(encoder(x, code).res);
}

VerifierArch VerifierArch::from_tag(const std::string& tag) {
  VerifierArch a;
  a.tag = tag;
  if (tag == "small-A") {
    a.widths = {16, 32, 64};
    a.act = Activation::SiLU;
    a.down = Downsample::Strided;
    a.head = HeadKind::GlobalPool;
    a.loss = LossKind::Softmax;
  } else if (tag == "small-B") {
    a.widths = {24, 48, 96};
    a.act = Activation::ReLU;
    a.down = Downsample::MaxPool;
    a.head = HeadKind::GlobalPool;
    a.loss = LossKind::Margin;
  } else if (tag == "small-C") {
    a.widths = {16, 24, 48, 64};
    a.act = Activation::LeakyReLU;
    a.down = Downsample::AvgPool;
    a.head = HeadKind::GlobalPool;
    a.loss = LossKind::Softmax;
  } else if (tag == "small-D") {
    a.widths = {32, 48, 64};
    a.act = Activation::ELU;
    a.down = Downsample::Strided;
    a.head = HeadKind::Flatten;
    a.loss = LossKind::Margin;
  } else {
    throw std::invalid_argument("unknown verifier architecture: " + tag);
  }
  return a;
}

std::vector<std::string> VerifierArch::known_tags() {
  return {"small-A", "small-B", "small-C", "small-D"};
}

VerifierNetImpl::VerifierNetImpl(const VerifierArch& a) : arch(a) {
  int in = 3;
  for (std::size_t i = 0; i < arch.widths.size(); ++i) {
    const int w = arch.widths[i];
    convs.push_back(register_module("conv" + std::to_string(i),
                                    torch::nn::Conv2d(conv_opts(in, w, 3, 1, 1))));
    if (arch.down == Downsample::Strided && i + 1 < arch.widths.size()) {
      downs.push_back(register_module("down" + std::to_string(i),
                                      torch::nn::Conv2d(conv_opts(w, w, 3, 2, 1))));
    }
    in = w;
  }
  const int n_down = static_cast<int>(arch.widths.size()) - 1;
  const int final_res = arch.image_size >> n_down;
  const int feat = arch.head == HeadKind::GlobalPool ? in : in * final_res * final_res;
  proj = register_module("proj", torch::nn::Linear(feat, arch.embedding_dim));
}

VerifierOutputs VerifierNetImpl::forward(const torch::Tensor& x) {
  VerifierOutputs out;
  // Centre inputs around zero.
  torch::Tensor h = x * 2.0 - 1.0;
  const std::size_t n = convs.size();
  for (std::size_t i = 0; i < n; ++i) {
    h = activate(convs[i](h), arch.act);
    if (static_cast<int>(i) == arch.trunk_stage) out.trunk = h;
    if (i + 1 == n) break;
    switch (arch.down) {
      case Downsample::Strided: h = activate(downs[i](h), arch.act); break;
      case Downsample::MaxPool: h = F::max_pool2d(h, F::MaxPool2dFuncOptions(2)); break;
      case Downsample::AvgPool: h = F::avg_pool2d(h, F::AvgPool2dFuncOptions(2)); break;
    }
  }
  out.last_conv = h;
  torch::Tensor pooled = arch.head == HeadKind::GlobalPool ? h.mean({2, 3}) : h.flatten(1);
  out.raw = proj(pooled);
  out.embedding = F::normalize(out.raw, F::NormalizeFuncOptions().dim(1).eps(1e-12));
  return out;
}

AttributeClassifierImpl::AttributeClassifierImpl(int n_attributes, int width) {
  c1 = register_module("c1", torch::nn::Conv2d(conv_opts(3, width, 3, 1, 1)));
  c2 = register_module("c2", torch::nn::Conv2d(conv_opts(width, 2 * width, 3, 2, 1)));
  c3 = register_module("c3", torch::nn::Conv2d(conv_opts(2 * width, 2 * width, 3, 2, 1)));
  fc = register_module("fc", torch::nn::Linear(2 * width * 2, n_attributes));
}

torch::Tensor AttributeClassifierImpl::forward(const torch::Tensor& x) {
  auto h = F::silu(c1(x * 2.0 - 1.0));
  h = F::silu(c2(h));
  h = F::silu(c3(h));
  // Average and max pooling together keep both global shifts and small dots.
  auto pooled = torch::cat({h.mean({2, 3}), h.amax({2, 3})}, 1);
  return fc(pooled);
}

TrunkAttributeHeadImpl::TrunkAttributeHeadImpl(int in_channels, int n_attributes) {
  conv = register_module("conv", torch::nn::Conv2d(conv_opts(in_channels, 64, 3, 1, 1)));
  fc = register_module("fc", torch::nn::Linear(128, n_attributes));
}

torch::Tensor TrunkAttributeHeadImpl::forward(const torch::Tensor& trunk) {
  auto h = F::silu(conv(trunk));
  return fc(torch::cat({h.mean({2, 3}), h.amax({2, 3})}, 1));
}

ChannelAttentionImpl::ChannelAttentionImpl(int channels, int reduction) {
  const int mid = std::max(1, channels / reduction);
  g1 = register_module("g1", torch::nn::Conv2d(conv_opts(channels, mid, 1, 1, 0)));
  g2 = register_module("g2", torch::nn::Conv2d(conv_opts(mid, channels, 1, 1, 0)));
  l1 = register_module("l1", torch::nn::Conv2d(conv_opts(channels, mid, 1, 1, 0)));
  l2 = register_module("l2", torch::nn::Conv2d(conv_opts(mid, channels, 1, 1, 0)));
}

torch::Tensor ChannelAttentionImpl::logits(const torch::Tensor& x) {
  auto global = g2(torch::relu(g1(x.mean({2, 3}, /*keepdim=*/true))));
  auto local = l2(torch::relu(l1(x))).mean({2, 3}, /*keepdim=*/true);
  return (global + local).flatten(1);
}

void ChannelAttentionImpl::zero_() {
  torch::NoGradGuard guard;
  for (auto& p : parameters()) p.zero_();
}

void copy_parameters(torch::nn::Module& src, torch::nn::Module& dst) {
  std::stringstream buffer;
  {
    torch::serialize::OutputArchive out;
    src.save(out);
    out.save_to(buffer);
  }
  torch::serialize::InputArchive in;
  in.load_from(buffer);
  dst.load(in);
}

}  // namespace semattack::nn
