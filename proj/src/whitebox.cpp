#include "semattack/whitebox.hpp"

#include <cmath>
#include <limits>

namespace semattack {

std::string to_string(BetaGranularity g) {
  switch (g) {
    case BetaGranularity::Scalar: return "scalar";
    case BetaGranularity::Channel: return "channel";
    case BetaGranularity::Element: return "element";
  }
  return "channel";
}

BetaGranularity beta_granularity_from_string(const std::string& s) {
  if (s == "scalar") return BetaGranularity::Scalar;
  if (s == "channel") return BetaGranularity::Channel;
  if (s == "element") return BetaGranularity::Element;
  throw ConfigError("unknown beta granularity: " + s);
}

void WhiteboxConfig::validate() const {
  if (max_iterations < 1) throw ConfigError("whitebox.max_iterations must be >= 1");
  if (!(learning_rate > 0)) throw ConfigError("whitebox.learning_rate must be > 0");
  if (n_attributes != 1 && n_attributes != 2) throw ConfigError("whitebox.n_attributes must be 1 or 2");
  if (reduction < 1) throw ConfigError("whitebox.reduction must be >= 1");
  if (success_margin < 0) throw ConfigError("whitebox.success_margin must be >= 0");
}

nn::ChannelAttention make_attention(int channels, int reduction, std::uint64_t seed) {
  torch::manual_seed(seed);
  nn::ChannelAttention att(channels, reduction);
  for (auto& p : att->parameters()) p.set_requires_grad(false);
  return att;
}

torch::Tensor ms_attention_beta(const torch::Tensor& f_conv, const torch::Tensor& f_res,
                                nn::ChannelAttention& attention) {
  if (!f_conv.sizes().equals(f_res.sizes())) {
    throw InputError("ms_attention_beta: feature maps differ in shape");
  }
  if (f_conv.dim() != 3 && f_conv.dim() != 4) {
    throw InputError("ms_attention_beta: expected [C, H, W] or [N, C, H, W]");
  }
  const bool single = f_conv.dim() == 3;
  auto sum = single ? (f_conv + f_res).unsqueeze(0) : f_conv + f_res;
  auto beta = attention->forward(sum.to(attention->g1->weight.dtype()));
  return single ? beta.squeeze(0) : beta;
}

torch::Tensor fuse(const torch::Tensor& f_conv, const torch::Tensor& f_res,
                   const torch::Tensor& beta) {
  if (!f_conv.sizes().equals(f_res.sizes())) throw InputError("fuse: feature maps differ in shape");
  {
    torch::NoGradGuard guard;
    if (beta.numel() == 0 || beta.min().item<double>() < 0.0 || beta.max().item<double>() > 1.0) {
      throw InputError("fuse: beta outside [0, 1]");
    }
  }
  torch::Tensor b = beta;
  const auto fd = f_conv.dim();
  if (b.dim() == 0 || b.sizes().equals(f_conv.sizes())) {
    // broadcasts as is
  } else if (fd == 3 && b.dim() == 1 && b.size(0) == f_conv.size(0)) {
    b = b.view({-1, 1, 1});
  } else if (fd == 4 && b.dim() == 2 && b.size(0) == f_conv.size(0) &&
             (b.size(1) == f_conv.size(1) || b.size(1) == 1)) {
    b = b.view({b.size(0), b.size(1), 1, 1});
  } else {
    throw InputError("fuse: beta shape does not match the feature map");
  }
  return b * f_conv + (1 - b) * f_res;
}

torch::Tensor fusion_objective(const Generator& g, const Verifier& v, const torch::Tensor& f_conv,
                               const torch::Tensor& f_res, const torch::Tensor& theta,
                               const torch::Tensor& reference, AttackType type) {
  auto x_adv = g.decode(fuse(f_conv, f_res, torch::sigmoid(theta)));
  auto e = v.embed_differentiable(x_adv);
  auto d = (e - reference).pow(2).sum(1);
  return type == AttackType::Impersonation ? d : -d;
}

AttributeVector edit_code(const AttributeVector& attrs, const AttributeRanking& ranking, int n) {
  if (ranking.order.size() != attrs.size()) {
    throw InputError("ranking does not cover the attribute vector");
  }
  if (n < 1 || n > static_cast<int>(attrs.size())) throw InputError("edit_code: bad attribute count");
  AttributeVector c = attrs;
  for (int i = 0; i < n; ++i) c = flip(c, ranking.order[static_cast<std::size_t>(i)]);
  return c;
}

std::vector<AttackOutcome> whitebox_attack_batch(const std::vector<WhiteboxRequest>& requests,
                                                 const Generator& g, const Verifier& v,
                                                 const WhiteboxConfig& cfg,
                                                 std::vector<std::vector<double>>* losses) {
  cfg.validate();
  if (v.access() != Access::WhiteBox) {
    throw AccessViolation("white-box attack needs a white-box verifier");
  }
  const auto n = static_cast<long>(requests.size());
  if (n == 0) return {};
  const double T = v.threshold().value_or(std::numeric_limits<double>::quiet_NaN());
  if (std::isnan(T)) throw InputError("white-box attack: verifier has no calibrated threshold");

  std::vector<torch::Tensor> xs, codes, refs;
  for (const auto& r : requests) {
    if (cfg.type == AttackType::Impersonation && !r.target) {
      throw InputError("impersonation attack needs a target image");
    }
    xs.push_back(r.x);
    auto c = edit_code(r.attributes, r.ranking, cfg.n_attributes);
    codes.push_back(attributes_to_tensor(c));
    refs.push_back(cfg.type == AttackType::Impersonation ? *r.target : r.x);
  }
  auto x = torch::stack(xs);
  auto code = g.project_codes(torch::stack(codes));
  auto taps = g.encode_batch(x, code);
  auto reference = v.embed_batch(torch::stack(refs));

  auto attention = make_attention(static_cast<int>(taps.conv.size(1)), cfg.reduction,
                                  cfg.attention_seed);
  torch::Tensor theta;
  {
    torch::NoGradGuard guard;
    auto logits = attention->logits(taps.conv + taps.res);  // [N, C]
    switch (cfg.granularity) {
      case BetaGranularity::Scalar: theta = logits.mean(1, true); break;
      case BetaGranularity::Channel: theta = logits; break;
      case BetaGranularity::Element:
        theta = logits.view({n, -1, 1, 1}).expand_as(taps.conv).contiguous();
        break;
    }
    theta = theta.clone();
  }
  theta.set_requires_grad(true);
  torch::optim::Adam opt({theta}, torch::optim::AdamOptions(cfg.learning_rate));

  std::vector<AttackOutcome> out(static_cast<std::size_t>(n));
  std::vector<bool> done(static_cast<std::size_t>(n), false);
  std::vector<double> best_loss(static_cast<std::size_t>(n),
                                std::numeric_limits<double>::infinity());
  std::vector<torch::Tensor> best_image(static_cast<std::size_t>(n));
  std::vector<double> best_dist(static_cast<std::size_t>(n), 0.0);
  if (losses) losses->assign(static_cast<std::size_t>(n), {});
  const double sign = cfg.type == AttackType::Impersonation ? -1.0 : 1.0;
  long remaining = n;

  for (int it = 0; it <= cfg.max_iterations && remaining > 0; ++it) {
    auto x_adv = g.decode(fuse(taps.conv, taps.res, torch::sigmoid(theta)));
    auto e = v.embed_differentiable(x_adv);
    auto d = (e - reference).pow(2).sum(1);
    auto loss = cfg.type == AttackType::Impersonation ? d : -d;
    auto d_host = d.detach().to(torch::kFloat64);
    for (long i = 0; i < n; ++i) {
      const auto k = static_cast<std::size_t>(i);
      if (done[k]) continue;
      const double di = d_host[i].item<double>();
      const double li = cfg.type == AttackType::Impersonation ? di : -di;
      if (losses) (*losses)[k].push_back(li);
      auto& o = out[k];
      if (it == 0) o.initial_distance = di;
      if (li < best_loss[k]) {
        best_loss[k] = li;
        best_image[k] = x_adv[i].detach().clone();
        best_dist[k] = di;
      }
      // Early stop once d clears T by the configured margin.
      const bool stop = attack_succeeded(cfg.type, di + sign * cfg.success_margin, T);
      if (stop || it == cfg.max_iterations) {
        done[k] = true;
        --remaining;
        o.iterations = it;
        if (stop) {
          o.adversarial = x_adv[i].detach().clone();
          o.final_distance = di;
        } else {
          o.adversarial = best_image[k];
          o.final_distance = best_dist[k];
        }
      }
    }
    if (remaining == 0 || it == cfg.max_iterations) break;
    opt.zero_grad();
    // Finished samples receive no gradient; their theta rows are restored
    // below so Adam momentum cannot move them.
    std::vector<float> mask_v(static_cast<std::size_t>(n));
    for (long i = 0; i < n; ++i) mask_v[static_cast<std::size_t>(i)] = done[static_cast<std::size_t>(i)] ? 0.f : 1.f;
    auto mask = torch::tensor(mask_v).to(loss.dtype());
    (loss * mask).sum().backward();
    auto frozen = theta.detach().clone();
    opt.step();
    torch::NoGradGuard guard;
    for (long i = 0; i < n; ++i) {
      if (done[static_cast<std::size_t>(i)]) theta[i].copy_(frozen[i]);
    }
  }

  for (long i = 0; i < n; ++i) {
    auto& o = out[static_cast<std::size_t>(i)];
    const auto& r = requests[static_cast<std::size_t>(i)];
    o.method = cfg.n_attributes == 1 ? "saa-whitebox-1" : "saa-whitebox-2";
    o.type = cfg.type;
    o.source_index = r.source_index;
    o.target_index = cfg.type == AttackType::Impersonation ? r.target_index : -1;
    o.attributes.assign(r.ranking.order.begin(), r.ranking.order.begin() + cfg.n_attributes);
    o.threshold = T;
    o.success = attack_succeeded(cfg.type, o.final_distance, T);
    o.candidates = 1;
  }
  return out;
}

AttackOutcome whitebox_attack(const WhiteboxRequest& request, const Generator& g,
                              const Verifier& v, const WhiteboxConfig& cfg) {
  return whitebox_attack_batch({request}, g, v, cfg).front();
}

}  // namespace semattack
