#include "semattack/blackbox.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include "semattack/metrics.hpp"

namespace semattack {

GammaGrid GammaGrid::uniform(int n) {
  if (n < 2) throw ConfigError("gamma grid needs at least 2 values");
  GammaGrid g;
  g.mode = Mode::Uniform;
  for (int i = 0; i < n; ++i) g.values.push_back(static_cast<double>(i) / (n - 1));
  return g;
}

GammaGrid GammaGrid::random(int n, std::uint64_t seed) {
  if (n < 1) throw ConfigError("gamma grid needs at least 1 value");
  GammaGrid g;
  g.mode = Mode::Random;
  g.seed = seed;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < n; ++i) g.values.push_back(u(rng));
  return g;
}

void BlackboxConfig::validate(std::size_t n_attributes) const {
  if (!(similarity_threshold >= 0.0 && similarity_threshold < 1.0)) {
    throw ConfigError("blackbox.similarity_threshold must be in [0, 1)");
  }
  if (max_attributes == 0 || max_attributes < -1 ||
      max_attributes > static_cast<int>(n_attributes)) {
    throw ConfigError("blackbox.max_attributes must be -1 or in 1..K");
  }
  if (grid.values.empty()) throw ConfigError("blackbox grid is empty");
  for (double v : grid.values) {
    if (v < 0.0 || v > 1.0) throw ConfigError("blackbox grid values must lie in [0, 1]");
  }
}

bool semantic_filter(const Image& x_base, const Image& x_candidate, double th) {
  return ssim(x_base, x_candidate) > th;
}

AttributeOrder ranked_order(const AttributeRanking& ranking) {
  return [ranking](const BlackboxRequest& r) {
    if (ranking.order.size() != r.attributes.size()) {
      throw InputError("ranking does not match the attribute schema");
    }
    return ranking.order;
  };
}

AttributeOrder random_order(std::uint64_t seed) {
  return [seed](const BlackboxRequest& r) {
    std::vector<int> order(r.attributes.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed ^ (static_cast<std::uint64_t>(r.source_index + 1) * 0x9E3779B97F4A7C15ULL));
    std::shuffle(order.begin(), order.end(), rng);
    return order;
  };
}

AttackOutcome interpolation_search(const BlackboxRequest& request, const Generator& g,
                                   const Verifier& v, const BlackboxConfig& cfg,
                                   const AttributeOrder& order, const std::string& method) {
  if (v.access() != Access::BlackBox) {
    throw AccessViolation("black-box attack must be given a black-box verifier handle");
  }
  if (request.attributes.size() != g.schema().size()) {
    throw InputError("black-box attack: attribute vector does not match the generator schema");
  }
  cfg.validate(request.attributes.size());
  if (cfg.type == AttackType::Impersonation && !request.target) {
    throw InputError("impersonation attack needs a target image");
  }
  const auto T = v.threshold();
  if (!T) throw InputError("black-box attack: verifier has no calibrated threshold");

  AttackOutcome o;
  o.method = method;
  o.type = cfg.type;
  o.source_index = request.source_index;
  o.target_index = cfg.type == AttackType::Impersonation ? request.target_index : -1;
  o.threshold = *T;

  // The reference embedding is not part of the per-attribute budget.
  const auto ref = v.embed(cfg.type == AttackType::Impersonation ? *request.target : request.x);
  const auto sequence = order(request);
  const std::size_t limit =
      cfg.max_attributes < 0 ? sequence.size()
                             : std::min(sequence.size(), static_cast<std::size_t>(cfg.max_attributes));
  const auto n_grid = static_cast<long>(cfg.grid.values.size());
  auto gamma = torch::tensor(cfg.grid.values, torch::kFloat32).view({n_grid, 1, 1, 1});

  Image base = request.x;
  AttributeVector code = request.attributes;
  double base_distance = embedding_distance(v.embed_batch(base.unsqueeze(0))[0], ref);
  o.queries = 0;  // the query above is bookkeeping for failed attacks only
  o.initial_distance = base_distance;
  const auto initial_queries = v.log().embed_queries.load();

  for (std::size_t step = 0; step < limit; ++step) {
    const int a = sequence[step];
    AttributeVector flipped = flip(code, a);
    auto codes = g.project_codes(
        torch::stack({attributes_to_tensor(code), attributes_to_tensor(flipped)}));
    auto taps = g.encode_batch(base.unsqueeze(0).expand({2, -1, -1, -1}).contiguous(), codes);
    auto f1 = taps.res[0], fa = taps.res[1];
    torch::Tensor candidates;
    {
      torch::NoGradGuard guard;
      candidates = g.decode(gamma * f1.unsqueeze(0) + (1 - gamma) * fa.unsqueeze(0));
    }
    auto e = v.embed_batch(candidates);
    auto d = (e - ref.unsqueeze(0)).to(torch::kFloat64).pow(2).sum(1);
    const long best = cfg.type == AttackType::Impersonation ? d.argmin().item<long>()
                                                             : d.argmax().item<long>();
    Image candidate = candidates[best];
    const double confirmed = embedding_distance(v.embed(candidate), ref);
    ++o.candidates;

    if (!semantic_filter(base, candidate, cfg.similarity_threshold)) {
      if (cfg.strict_filter) break;
      continue;
    }
    base = candidate;
    code = flipped;
    base_distance = confirmed;
    o.attributes.push_back(a);
    if (attack_succeeded(cfg.type, confirmed, *T)) break;
  }
  o.queries = v.log().embed_queries.load() - initial_queries;
  o.iterations = static_cast<int>(o.candidates);
  o.adversarial = base;
  o.final_distance = base_distance;
  o.success = attack_succeeded(cfg.type, base_distance, *T);
  return o;
}

AttackOutcome blackbox_attack(const BlackboxRequest& request, const Generator& g,
                              const Verifier& v, const AttributeRanking& ranking,
                              const BlackboxConfig& cfg) {
  if (ranking.method != RankMethod::CS) {
    throw InputError("black-box attack uses a cosine-similarity ranking");
  }
  return interpolation_search(request, g, v, cfg, ranked_order(ranking), "saa-blackbox");
}

}  // namespace semattack
