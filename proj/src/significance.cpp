#include "semattack/significance.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace semattack {

std::string to_string(RankMethod m) { return m == RankMethod::CS ? "CS" : "PS"; }

RankMethod rank_method_from_string(const std::string& s) {
  if (s == "CS" || s == "cs") return RankMethod::CS;
  if (s == "PS" || s == "ps") return RankMethod::PS;
  throw ConfigError("unknown ranking method: " + s);
}

std::vector<double> AttributeRanking::ordered_scores() const {
  std::vector<double> out;
  out.reserve(order.size());
  for (int a : order) out.push_back(scores.at(static_cast<std::size_t>(a)));
  return out;
}

double cosine_similarity(const torch::Tensor& u, const torch::Tensor& v) {
  auto a = u.to(torch::kFloat64).flatten();
  auto b = v.to(torch::kFloat64).flatten();
  if (a.numel() != b.numel()) throw InputError("cosine_similarity: length mismatch");
  const double na = a.norm().item<double>();
  const double nb = b.norm().item<double>();
  if (na == 0.0 || nb == 0.0) throw InputError("cosine_similarity: zero vector");
  return a.dot(b).item<double>() / (na * nb);
}

AttributeRanking ranking_from_scores(const std::vector<double>& scores, RankMethod method) {
  AttributeRanking r;
  r.method = method;
  r.scores = scores;
  r.order.resize(scores.size());
  std::iota(r.order.begin(), r.order.end(), 0);
  std::stable_sort(r.order.begin(), r.order.end(), [&](int a, int b) {
    return method == RankMethod::CS ? scores[a] < scores[b] : scores[a] > scores[b];
  });
  return r;
}

torch::Tensor single_flip_codes(const AttributeVector& attrs) {
  const auto k = static_cast<long>(attrs.size());
  auto base = attributes_to_tensor(attrs).unsqueeze(0).repeat({k, 1});
  auto eye = torch::eye(k);
  return (base + eye - 2 * base * eye);
}

namespace {

torch::Tensor edited_batch(const Image& x, const AttributeVector& attrs, const ImageTranslator& g) {
  if (attrs.size() != g.n_attributes()) {
    throw InputError("ranking: attribute vector does not match the generator");
  }
  const auto k = static_cast<long>(attrs.size());
  auto xs = x.unsqueeze(0).expand({k, x.size(0), x.size(1), x.size(2)}).contiguous();
  return g.translate(xs, single_flip_codes(attrs));
}

}  // namespace

AttributeRanking rank_by_cs(const Image& x, const AttributeVector& attrs, const ImageTranslator& g,
                            const Verifier& v) {
  auto edited = edited_batch(x, attrs, g);
  auto e0 = v.embed(x);
  auto e = v.embed_batch(edited);
  std::vector<double> scores(attrs.size());
  for (std::size_t i = 0; i < attrs.size(); ++i) {
    scores[i] = semattack::cosine_similarity(e0, e[static_cast<long>(i)]);
  }
  return ranking_from_scores(scores, RankMethod::CS);
}

AttributeRanking rank_by_ps(const Image& x, const AttributeVector& attrs, const ImageTranslator& g,
                            const AttributePredictor& p) {
  if (attrs.size() != p.schema().size()) {
    throw InputError("rank_by_ps: attribute vector does not match the predictor schema");
  }
  auto edited = edited_batch(x, attrs, g);
  auto p0 = p.predict(x.unsqueeze(0))[0].to(torch::kFloat64);
  auto p1 = p.predict(edited).to(torch::kFloat64);
  std::vector<double> scores(attrs.size());
  for (std::size_t i = 0; i < attrs.size(); ++i) {
    const auto ii = static_cast<long>(i);
    const double before = p0[ii].item<double>();
    const double after = p1[ii][ii].item<double>();
    // Probability that attribute i is still in x's original state.
    scores[i] = attrs[i] ? before - after : (1.0 - before) - (1.0 - after);
  }
  return ranking_from_scores(scores, RankMethod::PS);
}

}  // namespace semattack
