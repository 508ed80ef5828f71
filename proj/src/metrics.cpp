#include "semattack/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

namespace semattack {

namespace F = torch::nn::functional;

nlohmann::json ThresholdCalibration::to_json() const {
  return {{"verifier", verifier},       {"T", T},
          {"T_s", T_s},                 {"fpr_level", fpr_level},
          {"impostor_pairs", impostor_pairs}, {"genuine_pairs", genuine_pairs},
          {"genuine_accept_rate", genuine_accept_rate}};
}

ThresholdCalibration ThresholdCalibration::from_json(const nlohmann::json& j) {
  ThresholdCalibration c;
  c.verifier = j.at("verifier");
  c.T = j.at("T");
  c.T_s = j.at("T_s");
  c.fpr_level = j.at("fpr_level");
  c.impostor_pairs = j.at("impostor_pairs");
  c.genuine_pairs = j.value("genuine_pairs", 0L);
  c.genuine_accept_rate = j.value("genuine_accept_rate", 0.0);
  return c;
}

namespace {

std::vector<IndexPair> sample_pairs(const std::vector<DatasetRecord>& data, Split split,
                                    std::size_t cap, std::uint64_t seed, bool same_identity) {
  const auto idx = indices_of(data, split);
  std::vector<IndexPair> all;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    for (std::size_t j = i + 1; j < idx.size(); ++j) {
      const bool same = data[idx[i]].identity_id == data[idx[j]].identity_id;
      if (same == same_identity) all.emplace_back(idx[i], idx[j]);
    }
  }
  if (all.size() > cap) {
    std::mt19937_64 rng(seed);
    std::shuffle(all.begin(), all.end(), rng);
    all.resize(cap);
    std::sort(all.begin(), all.end());
  }
  return all;
}

torch::Tensor embed_indices(const Verifier& v, const std::vector<DatasetRecord>& data,
                            const std::vector<std::size_t>& idx) {
  std::vector<torch::Tensor> chunks;
  for (std::size_t s = 0; s < idx.size(); s += 256) {
    std::vector<std::size_t> part(idx.begin() + static_cast<long>(s),
                                  idx.begin() + static_cast<long>(std::min(idx.size(), s + 256)));
    chunks.push_back(v.embed_batch(stack_images(data, part)));
  }
  return torch::cat(chunks).to(torch::kFloat64);
}

std::vector<double> pair_distances(const Verifier& v, const std::vector<DatasetRecord>& data,
                                   const std::vector<IndexPair>& pairs) {
  std::set<std::size_t> uniq;
  for (const auto& [a, b] : pairs) {
    uniq.insert(a);
    uniq.insert(b);
  }
  std::vector<std::size_t> idx(uniq.begin(), uniq.end());
  std::map<std::size_t, long> row;
  for (std::size_t i = 0; i < idx.size(); ++i) row[idx[i]] = static_cast<long>(i);
  auto emb = embed_indices(v, data, idx);
  std::vector<double> d;
  d.reserve(pairs.size());
  for (const auto& [a, b] : pairs) d.push_back(embedding_distance(emb[row[a]], emb[row[b]]));
  return d;
}

}  // namespace

std::vector<IndexPair> impostor_pairs(const std::vector<DatasetRecord>& data, Split split,
                                      std::size_t cap, std::uint64_t seed) {
  return sample_pairs(data, split, cap, seed, false);
}

std::vector<IndexPair> genuine_pairs(const std::vector<DatasetRecord>& data, Split split,
                                     std::size_t cap, std::uint64_t seed) {
  return sample_pairs(data, split, cap, seed, true);
}

ThresholdCalibration calibrate_from_distances(std::vector<double> d, double fpr_level) {
  if (!(fpr_level > 0.0 && fpr_level < 1.0)) throw ConfigError("fpr_level must be in (0, 1)");
  const auto min_pairs = static_cast<std::size_t>(std::ceil(1.0 / fpr_level - 1e-9));
  if (d.size() < min_pairs) {
    throw CalibrationError("calibration at FPR " + std::to_string(fpr_level) + " needs at least " +
                           std::to_string(min_pairs) + " impostor pairs, got " +
                           std::to_string(d.size()));
  }
  std::sort(d.begin(), d.end());
  const auto n = d.size();
  const auto allowed = static_cast<std::size_t>(std::floor(fpr_level * static_cast<double>(n) + 1e-9));
  ThresholdCalibration c;
  c.fpr_level = fpr_level;
  c.impostor_pairs = static_cast<long>(n);
  c.T = 0.0;
  // d[k-1] is admissible when no later entry ties with it.
  for (std::size_t k = allowed; k >= 1; --k) {
    if (k == n || d[k] > d[k - 1]) {
      c.T = d[k - 1];
      break;
    }
  }
  c.T_s = 1.0 - c.T / 2.0;
  return c;
}

ThresholdCalibration calibrate_threshold(const Verifier& v, const std::vector<DatasetRecord>& data,
                                         const std::vector<IndexPair>& impostors,
                                         const std::vector<IndexPair>& genuines,
                                         double fpr_level) {
  auto c = calibrate_from_distances(pair_distances(v, data, impostors), fpr_level);
  c.verifier = v.arch_tag();
  if (!genuines.empty()) {
    auto g = pair_distances(v, data, genuines);
    c.genuine_pairs = static_cast<long>(g.size());
    c.genuine_accept_rate =
        static_cast<double>(std::count_if(g.begin(), g.end(), [&](double x) { return x <= c.T; })) /
        static_cast<double>(g.size());
  }
  return c;
}

torch::Tensor pairwise_cosine(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.dim() != 2 || !a.sizes().equals(b.sizes())) {
    throw InputError("pairwise_cosine: expected two [N, d] batches of equal shape");
  }
  auto a64 = a.to(torch::kFloat64), b64 = b.to(torch::kFloat64);
  return (a64 * b64).sum(1) / (a64.norm(2, 1) * b64.norm(2, 1));
}

double asr_impersonation(const torch::Tensor& adv, const torch::Tensor& tgt,
                         const ThresholdCalibration& cal) {
  if (adv.size(0) == 0) throw InputError("asr: empty pair set");
  return (pairwise_cosine(adv, tgt) >= cal.T_s).to(torch::kFloat64).mean().item<double>();
}

double asr_dodging(const torch::Tensor& adv, const torch::Tensor& src,
                   const ThresholdCalibration& cal) {
  if (adv.size(0) == 0) throw InputError("asr: empty pair set");
  return (pairwise_cosine(adv, src) < cal.T_s).to(torch::kFloat64).mean().item<double>();
}

double attack_success_rate(AttackType type, const Verifier& v, const torch::Tensor& adversarial,
                           const torch::Tensor& reference, const ThresholdCalibration& cal) {
  if (adversarial.size(0) == 0) throw InputError("asr: empty pair set");
  auto a = v.embed_batch(adversarial);
  auto r = v.embed_batch(reference);
  return type == AttackType::Impersonation ? asr_impersonation(a, r, cal) : asr_dodging(a, r, cal);
}

double mse(const torch::Tensor& x, const torch::Tensor& y) {
  if (!x.sizes().equals(y.sizes())) throw InputError("mse: shape mismatch");
  return (x.to(torch::kFloat64) - y.to(torch::kFloat64)).pow(2).mean().item<double>();
}

namespace {

torch::Tensor gaussian_window(int size, double sigma) {
  auto r = torch::arange(size, torch::kFloat64) - (size - 1) / 2.0;
  auto g = torch::exp(-r.pow(2) / (2 * sigma * sigma));
  g = g / g.sum();
  return torch::outer(g, g).view({1, 1, size, size});
}

torch::Tensor luma(const torch::Tensor& x) {
  auto x64 = x.to(torch::kFloat64);
  return kLuma[0] * x64.select(1, 0) + kLuma[1] * x64.select(1, 1) + kLuma[2] * x64.select(1, 2);
}

}  // namespace

std::vector<double> ssim_batch(const torch::Tensor& x, const torch::Tensor& y) {
  if (!x.sizes().equals(y.sizes()) || x.dim() != 4 || x.size(1) != 3) {
    throw InputError("ssim: expected two [N, 3, H, W] batches of equal shape");
  }
  const int win = static_cast<int>(std::min<int64_t>({11, x.size(2), x.size(3)}));
  const auto w = gaussian_window(win, 1.5);
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  auto a = luma(x).unsqueeze(1), b = luma(y).unsqueeze(1);
  auto filt = [&](const torch::Tensor& t) { return F::conv2d(t, w); };
  auto mu_a = filt(a), mu_b = filt(b);
  auto saa = filt(a * a) - mu_a * mu_a;
  auto sbb = filt(b * b) - mu_b * mu_b;
  auto sab = filt(a * b) - mu_a * mu_b;
  auto map = ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) /
             ((mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2));
  auto m = map.mean({1, 2, 3});
  std::vector<double> out(static_cast<std::size_t>(m.size(0)));
  for (long i = 0; i < m.size(0); ++i) out[static_cast<std::size_t>(i)] = m[i].item<double>();
  return out;
}

double ssim(const Image& x, const Image& y) {
  if (x.dim() != 3) throw InputError("ssim: expected [3, H, W] images");
  return ssim_batch(x.unsqueeze(0), y.unsqueeze(0)).front();
}

AdversarialSet successful_subset(const AdversarialSet& set, const Verifier& source,
                                 const ThresholdCalibration& cal) {
  AdversarialSet out = set;
  if (set.adversarial.size(0) == 0) return out;
  auto cos = pairwise_cosine(source.embed_batch(set.adversarial), source.embed_batch(set.reference));
  auto keep = set.type == AttackType::Impersonation ? cos >= cal.T_s : cos < cal.T_s;
  auto idx = keep.nonzero().flatten();
  out.adversarial = set.adversarial.index_select(0, idx);
  out.reference = set.reference.index_select(0, idx);
  return out;
}

TransferMatrix transfer_matrix(const std::vector<AdversarialSet>& sets,
                               const std::vector<const Verifier*>& roster,
                               const std::map<std::string, ThresholdCalibration>& calibrations) {
  TransferMatrix m;
  if (sets.empty()) return m;
  m.type = sets.front().type;
  for (const auto* v : roster) {
    if (!calibrations.count(v->arch_tag())) {
      throw InputError("transfer_matrix: no calibration for " + v->arch_tag());
    }
    m.targets.push_back(v->arch_tag());
  }
  for (const auto& s : sets) {
    if (s.type != m.type) throw InputError("transfer_matrix: mixed attack types");
    m.sources.push_back(s.source);
    m.set_sizes.push_back(s.adversarial.size(0));
    std::vector<double> row;
    for (const auto* v : roster) {
      row.push_back(s.adversarial.size(0) == 0
                        ? 0.0
                        : attack_success_rate(s.type, *v, s.adversarial, s.reference,
                                              calibrations.at(v->arch_tag())));
    }
    m.cells.push_back(row);
  }
  return m;
}

SimilarityShift similarity_shift_histogram(const std::vector<double>& before,
                                           const std::vector<double>& after, AttackType type,
                                           const ThresholdCalibration& cal, int bins) {
  if (before.size() != after.size()) throw InputError("similarity shift: size mismatch");
  if (before.empty()) throw InputError("similarity shift: empty pair set");
  if (bins < 1) throw ConfigError("similarity shift: bins must be >= 1");
  SimilarityShift s;
  for (int i = 0; i <= bins; ++i) s.edges.push_back(-1.0 + 2.0 * i / bins);
  s.before.assign(static_cast<std::size_t>(bins), 0);
  s.after.assign(static_cast<std::size_t>(bins), 0);
  auto bin_of = [&](double c) {
    const int b = static_cast<int>(std::floor((c + 1.0) / 2.0 * bins));
    return static_cast<std::size_t>(std::clamp(b, 0, bins - 1));
  };
  auto ok = [&](double c) { return type == AttackType::Impersonation ? c >= cal.T_s : c < cal.T_s; };
  long crossed = 0;
  for (std::size_t i = 0; i < before.size(); ++i) {
    ++s.before[bin_of(before[i])];
    ++s.after[bin_of(after[i])];
    if (!ok(before[i]) && ok(after[i])) ++crossed;
  }
  s.crossing_fraction = static_cast<double>(crossed) / static_cast<double>(before.size());
  return s;
}

double sign_test_p(long wins, long losses) {
  if (wins < 0 || losses < 0) throw InputError("sign test: negative counts");
  const long n = wins + losses;
  if (n == 0) return 1.0;
  double p = 0.0;
  for (long k = wins; k <= n; ++k) {
    p += std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) -
                  n * std::log(2.0));
  }
  return std::min(1.0, p);
}

torch::Tensor gradcam(const Verifier& v, const Image& x, const torch::Tensor& reference) {
  if (v.access() != Access::WhiteBox) throw AccessViolation("Grad-CAM needs a white-box verifier");
  if (x.dim() != 3) throw InputError("gradcam: expected a [3, H, W] image");
  // Parameters are frozen, so the input has to carry the graph.
  auto input = x.unsqueeze(0).detach().clone().set_requires_grad(true);
  auto out = v.forward_differentiable(input);
  auto score = -(out.embedding[0] - reference.to(out.embedding.dtype())).pow(2).sum();
  auto grads = torch::autograd::grad({score}, {out.last_conv})[0];
  auto weights = grads.mean({2, 3}, true);
  auto cam = torch::relu((weights * out.last_conv).sum(1, true)).detach();
  cam = F::interpolate(cam, F::InterpolateFuncOptions()
                                .size(std::vector<int64_t>{x.size(1), x.size(2)})
                                .mode(torch::kBilinear)
                                .align_corners(false))[0][0];
  const double lo = cam.min().item<double>(), hi = cam.max().item<double>();
  if (hi - lo <= 0.0) return torch::zeros_like(cam);
  return (cam - lo) / (hi - lo);
}

}  // namespace semattack
