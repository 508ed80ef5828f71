#pragma once

#include <string>
#include <vector>

#include <torch/torch.h>

#include "semattack/datagen.hpp"
#include "semattack/models.hpp"

namespace semattack {

enum class RankMethod { CS, PS };
std::string to_string(RankMethod m);
RankMethod rank_method_from_string(const std::string& s);

struct AttributeRanking {
  RankMethod method = RankMethod::CS;
  std::vector<int> order;       // attribute indices, most significant first
  std::vector<double> scores;   // indexed by attribute, not by rank
  std::vector<double> ordered_scores() const;
};

/// Cosine similarity of two 1-D tensors. Throws InputError on a zero vector.
double cosine_similarity(const torch::Tensor& u, const torch::Tensor& v);

/// Orders attribute scores: ascending for CS, descending for PS; ties by index.
AttributeRanking ranking_from_scores(const std::vector<double>& scores, RankMethod method);

/// Codes with a single attribute of `attrs` flipped, one row per attribute,
/// projected onto the translator's attribute set. [K, K].
torch::Tensor single_flip_codes(const AttributeVector& attrs);

/// Cosine-similarity ranking. `attrs` are x's attributes; each attribute is
/// flipped in turn and the generator output compared with x by the verifier.
AttributeRanking rank_by_cs(const Image& x, const AttributeVector& attrs, const ImageTranslator& g,
                            const Verifier& v);

/// Probability-score ranking. For attribute i the predictor's probability of
/// i keeping its original state is compared before and after the flip.
AttributeRanking rank_by_ps(const Image& x, const AttributeVector& attrs, const ImageTranslator& g,
                            const AttributePredictor& p);

}  // namespace semattack
