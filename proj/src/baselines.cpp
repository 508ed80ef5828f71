#include "semattack/baselines.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <algorithm>
#include <limits>
#include <set>

namespace semattack {

RandomSelectionConfig RandomSelectionConfig::with_default_sets(const AttributeSchema& schema) {
  RandomSelectionConfig c;
  for (const char* n : {"hair_color", "pale_skin", "blush", "beard"}) c.s1.push_back(schema.index_of(n));
  for (const char* n : {"glasses", "bangs", "smile", "earrings"}) c.s2.push_back(schema.index_of(n));
  return c;
}

void RandomSelectionConfig::validate(std::size_t n_attributes) const {
  if (s1.empty() || s2.empty()) throw ConfigError("random selection: attribute sets must be non-empty");
  std::set<int> a(s1.begin(), s1.end()), b(s2.begin(), s2.end());
  if (a.size() != s1.size() || b.size() != s2.size()) {
    throw ConfigError("random selection: duplicate attribute in a set");
  }
  for (int i : a) {
    if (b.count(i)) throw ConfigError("random selection: attribute sets overlap");
  }
  for (int i : s1) if (i < 0 || i >= static_cast<int>(n_attributes)) throw ConfigError("random selection: index out of range");
  for (int i : s2) if (i < 0 || i >= static_cast<int>(n_attributes)) throw ConfigError("random selection: index out of range");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("random selection: alpha must be in [0, 1]");
}

torch::Tensor random_selection_candidates(const Image& x, const AttributeVector& attrs,
                                          const Generator& g1, const Generator& g2,
                                          const RandomSelectionConfig& cfg) {
  cfg.validate(attrs.size());
  if (g1.attribute_subset() != cfg.s1 || g2.attribute_subset() != cfg.s2) {
    throw ConfigError("random selection: generators were trained on different attribute sets");
  }
  std::vector<torch::Tensor> c1, c2;
  for (int a1 : cfg.s1) {
    for (int a2 : cfg.s2) {
      auto after1 = flip(attrs, a1);
      c1.push_back(attributes_to_tensor(after1));
      c2.push_back(attributes_to_tensor(flip(after1, a2)));
    }
  }
  const auto n = static_cast<long>(c1.size());
  auto xs = x.unsqueeze(0).expand({n, -1, -1, -1}).contiguous();
  auto x1 = g1.translate(xs, g1.project_codes(torch::stack(c1)));
  auto x2 = g2.translate(x1, g2.project_codes(torch::stack(c2)));
  return cfg.alpha * x1 + (1.0 - cfg.alpha) * x2;
}

AttackOutcome random_selection_attack(const Image& x, const AttributeVector& attrs,
                                      const std::optional<Image>& target, const Generator& g1,
                                      const Generator& g2, const Verifier& v,
                                      const RandomSelectionConfig& cfg) {
  if (cfg.type == AttackType::Impersonation && !target) {
    throw InputError("impersonation attack needs a target image");
  }
  const auto T = v.threshold();
  if (!T) throw InputError("random selection: verifier has no calibrated threshold");
  auto candidates = random_selection_candidates(x, attrs, g1, g2, cfg);
  const auto before = v.log().embed_queries.load();
  auto ref = v.embed(cfg.type == AttackType::Impersonation ? *target : x);
  auto e = v.embed_batch(candidates);
  auto d = (e - ref.unsqueeze(0)).to(torch::kFloat64).pow(2).sum(1);

  AttackOutcome o;
  o.method = "random-selection";
  o.type = cfg.type;
  o.threshold = *T;
  o.candidates = candidates.size(0);
  o.initial_distance = cfg.type == AttackType::Impersonation
                           ? embedding_distance(v.embed(x), ref)
                           : 0.0;
  long pick = -1;
  for (long i = 0; i < o.candidates; ++i) {
    if (attack_succeeded(cfg.type, d[i].item<double>(), *T)) {
      pick = i;
      break;
    }
  }
  if (pick < 0) {
    pick = cfg.type == AttackType::Impersonation ? d.argmin().item<long>() : d.argmax().item<long>();
  }
  o.adversarial = candidates[pick];
  o.final_distance = d[pick].item<double>();
  o.success = attack_succeeded(cfg.type, o.final_distance, *T);
  o.iterations = static_cast<int>(pick) + 1;
  const auto s2 = static_cast<long>(cfg.s2.size());
  o.attributes = {cfg.s1[static_cast<std::size_t>(pick / s2)], cfg.s2[static_cast<std::size_t>(pick % s2)]};
  o.queries = v.log().embed_queries.load() - before;
  return o;
}

AttackOutcome improved_random_blackbox(const BlackboxRequest& request, const Generator& g,
                                       const Verifier& v, const BlackboxConfig& cfg,
                                       std::uint64_t seed) {
  return interpolation_search(request, g, v, cfg, random_order(seed), "random-blackbox");
}

std::string to_string(GradientMethod m) {
  switch (m) {
    case GradientMethod::FGSM: return "FGSM";
    case GradientMethod::BIM: return "BIM";
    case GradientMethod::PGD: return "PGD";
    case GradientMethod::MIFGSM: return "MI-FGSM";
  }
  return "?";
}

GradientMethod gradient_method_from_string(const std::string& s) {
  if (s == "FGSM") return GradientMethod::FGSM;
  if (s == "BIM") return GradientMethod::BIM;
  if (s == "PGD") return GradientMethod::PGD;
  if (s == "MI-FGSM") return GradientMethod::MIFGSM;
  throw ConfigError("unknown gradient attack: " + s);
}

double GradientAttackConfig::effective_step() const {
  if (step > 0) return step;
  const double base = epsilon / iterations;
  return method == GradientMethod::PGD ? 2.5 * base : base;
}

void GradientAttackConfig::validate() const {
  if (epsilon < 0) throw ConfigError("gradient attack: epsilon must be >= 0");
  if (iterations < 1) throw ConfigError("gradient attack: iterations must be >= 1");
  if (method == GradientMethod::FGSM && iterations != 1) {
    throw ConfigError("FGSM is a single-step attack");
  }
  if (norm == Norm::L2 && method != GradientMethod::FGSM) {
    throw ConfigError("L2 is only supported for FGSM");
  }
}

GradientAttackConfig GradientAttackConfig::fgsm_l2() {
  GradientAttackConfig c;
  c.method = GradientMethod::FGSM;
  c.norm = Norm::L2;
  c.epsilon = 0.2;
  c.iterations = 1;
  return c;
}

GradientAttackConfig GradientAttackConfig::fgsm_linf() {
  GradientAttackConfig c;
  c.method = GradientMethod::FGSM;
  c.epsilon = 8.0 / 255.0;
  c.iterations = 1;
  return c;
}

GradientAttackConfig GradientAttackConfig::bim() {
  GradientAttackConfig c;
  c.method = GradientMethod::BIM;
  c.iterations = 20;
  return c;
}

GradientAttackConfig GradientAttackConfig::pgd() {
  GradientAttackConfig c;
  c.method = GradientMethod::PGD;
  c.iterations = 40;
  c.random_start = true;
  return c;
}

GradientAttackConfig GradientAttackConfig::mifgsm() {
  GradientAttackConfig c;
  c.method = GradientMethod::MIFGSM;
  c.iterations = 40;
  c.decay = 1.0;
  return c;
}

std::vector<AttackOutcome> gradient_attack_batch(const torch::Tensor& x,
                                                 const torch::Tensor& reference,
                                                 const Verifier& v,
                                                 const GradientAttackConfig& cfg) {
  cfg.validate();
  if (v.access() != Access::WhiteBox) throw AccessViolation("gradient attacks need a white-box verifier");
  if (x.dim() != 4 || !x.sizes().equals(reference.sizes())) {
    throw InputError("gradient attack: expected matching [N, 3, H, W] batches");
  }
  const auto T = v.threshold();
  if (!T) throw InputError("gradient attack: verifier has no calibrated threshold");
  const double sign = cfg.type == AttackType::Impersonation ? -1.0 : 1.0;
  const double eps = cfg.epsilon;
  const double step = cfg.method == GradientMethod::FGSM ? eps : cfg.effective_step();
  const auto n = x.size(0);

  auto ref = v.embed_batch(reference);
  auto project = [&](const torch::Tensor& candidate) {
    torch::Tensor delta = candidate - x;
    if (cfg.norm == Norm::Linf) {
      delta = delta.clamp(-eps, eps);
    } else {
      auto norms = delta.flatten(1).norm(2, 1).clamp_min(1e-12).view({n, 1, 1, 1});
      delta = delta * (eps / norms).clamp_max(1.0);
    }
    return (x + delta).clamp(0.0, 1.0);
  };

  torch::Tensor adv = x.clone();
  auto gen = at::make_generator<at::CPUGeneratorImpl>(cfg.seed);
  if (cfg.random_start && eps > 0) {
    auto noise = torch::rand(x.sizes(), gen, x.options()) * (2 * eps) - eps;
    adv = project(x + noise);
  }
  const bool jitter = cfg.type == AttackType::Dodging && !cfg.random_start && cfg.dodging_jitter > 0;
  torch::Tensor momentum = torch::zeros_like(x);
  for (int it = 0; it < cfg.iterations && eps > 0; ++it) {
    torch::Tensor point = adv.detach();
    if (jitter && it == 0) {
      point = point + (torch::rand(x.sizes(), gen, x.options()) * 2 - 1) * cfg.dodging_jitter;
    }
    auto input = point.clone().set_requires_grad(true);
    auto e = v.embed_differentiable(input);
    auto loss = (e - ref).pow(2).sum();
    auto grad = torch::autograd::grad({loss}, {input})[0];
    torch::NoGradGuard guard;
    torch::Tensor direction;
    if (cfg.norm == Norm::L2) {
      direction = grad / grad.flatten(1).norm(2, 1).clamp_min(1e-12).view({n, 1, 1, 1});
    } else if (cfg.method == GradientMethod::MIFGSM) {
      momentum = cfg.decay * momentum +
                 grad / grad.abs().flatten(1).sum(1).clamp_min(1e-12).view({n, 1, 1, 1});
      direction = momentum.sign();
    } else {
      direction = grad.sign();
    }
    adv = project(adv + sign * step * direction);
  }

  auto e_adv = v.embed_batch(adv);
  auto e_x = v.embed_batch(x);
  std::vector<AttackOutcome> out(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i) {
    auto& o = out[static_cast<std::size_t>(i)];
    o.method = to_string(cfg.method) + (cfg.norm == Norm::L2 ? "-L2" : "");
    o.type = cfg.type;
    o.threshold = *T;
    o.iterations = eps > 0 ? cfg.iterations : 0;
    o.adversarial = adv[i].detach().clone();
    o.initial_distance = embedding_distance(e_x[i], ref[i]);
    o.final_distance = embedding_distance(e_adv[i], ref[i]);
    o.success = attack_succeeded(cfg.type, o.final_distance, *T);
    o.candidates = 1;
  }
  return out;
}

AttackOutcome gradient_attack(const Image& x, const std::optional<Image>& target,
                              const Verifier& v, const GradientAttackConfig& cfg) {
  if (cfg.type == AttackType::Impersonation && !target) {
    throw InputError("impersonation attack needs a target image");
  }
  const Image& ref = cfg.type == AttackType::Impersonation ? *target : x;
  return gradient_attack_batch(x.unsqueeze(0), ref.unsqueeze(0), v, cfg).front();
}

}  // namespace semattack
