#include "semattack/models.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>

namespace semattack {

namespace F = torch::nn::functional;
using nlohmann::json;

namespace {

void freeze(torch::nn::Module& m) {
  for (auto& p : m.parameters()) p.set_requires_grad(false);
}

std::vector<std::vector<std::size_t>> make_batches(std::vector<std::size_t> idx, int batch,
                                                   std::mt19937_64& rng) {
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < idx.size(); i += static_cast<std::size_t>(batch)) {
    out.emplace_back(idx.begin() + static_cast<long>(i),
                     idx.begin() + static_cast<long>(std::min(idx.size(), i + batch)));
  }
  return out;
}

json arch_to_json(const nn::GeneratorArch& a) {
  return {{"n_attributes", a.n_attributes},
          {"stem_channels", a.stem_channels},
          {"feature_channels", a.feature_channels},
          {"residual_blocks", a.residual_blocks}};
}

nn::GeneratorArch arch_from_json(const json& j) {
  nn::GeneratorArch a;
  a.n_attributes = j.at("n_attributes");
  a.stem_channels = j.at("stem_channels");
  a.feature_channels = j.at("feature_channels");
  a.residual_blocks = j.at("residual_blocks");
  return a;
}

void write_manifest(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

json read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("missing checkpoint manifest " + path.string());
  return json::parse(in);
}

void check_schema(const json& manifest, const AttributeSchema& schema,
                  const std::filesystem::path& where) {
  const std::string stored = manifest.at("schema_hash");
  if (stored != schema.hash()) {
    throw ConfigError("checkpoint " + where.string() + " was trained on schema " + stored +
                      ", expected " + schema.hash());
  }
}

}  // namespace

std::string to_string(Tap tap) { return tap == Tap::Conv ? "conv" : "res"; }
std::string to_string(Access access) {
  return access == Access::WhiteBox ? "whitebox" : "blackbox";
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

Generator::Generator(nn::GeneratorNet net, AttributeSchema schema,
                     std::vector<int> attribute_subset, json metadata)
    : net_(std::move(net)),
      schema_(std::move(schema)),
      subset_(std::move(attribute_subset)),
      metadata_(std::move(metadata)) {
  freeze(*net_);
  if (metadata_.is_null()) metadata_ = json::object();
  image_size_ = metadata_.value("image_size", 32);
  if (static_cast<std::size_t>(net_->arch.n_attributes) != n_attributes()) {
    throw ConfigError("generator network width does not match its attribute set");
  }
}

std::size_t Generator::n_attributes() const {
  return subset_.empty() ? schema_.size() : subset_.size();
}

std::vector<int64_t> Generator::feature_shape() const {
  return {net_->arch.feature_channels, image_size_ / 4, image_size_ / 4};
}

void Generator::check_image_batch(const torch::Tensor& x) const {
  if (x.dim() != 4 || x.size(1) != 3 || x.size(2) != image_size_ || x.size(3) != image_size_) {
    throw InputError("generator expects [N, 3, " + std::to_string(image_size_) + ", " +
                     std::to_string(image_size_) + "] input");
  }
}

nn::EncoderTaps Generator::encode_batch(const torch::Tensor& x, const torch::Tensor& codes) const {
  check_image_batch(x);
  if (codes.dim() != 2 || codes.size(0) != x.size(0) ||
      codes.size(1) != static_cast<long>(n_attributes())) {
    throw InputError("generator code batch has wrong shape");
  }
  torch::NoGradGuard guard;
  return net_->encoder(x, codes.to(x.dtype()));
}

FeatureMap Generator::encode(const Image& x, const AttributeVector& c, Tap tap) const {
  if (x.dim() != 3) throw InputError("encode expects a single [3, H, W] image");
  if (c.size() != n_attributes()) throw InputError("encode: code length mismatch");
  auto taps = encode_batch(x.unsqueeze(0), attributes_to_tensor(c).unsqueeze(0));
  return {(tap == Tap::Conv ? taps.conv : taps.res).squeeze(0), tap};
}

torch::Tensor Generator::decode(const torch::Tensor& f) const {
  const auto shape = feature_shape();
  const bool single = f.dim() == 3;
  torch::Tensor batch = single ? f.unsqueeze(0) : f;
  if (batch.dim() != 4 || batch.size(1) != shape[0] || batch.size(2) != shape[1] ||
      batch.size(3) != shape[2]) {
    throw InputError("decode: feature map does not match encoder output shape");
  }
  torch::Tensor out = net_->decoder(batch);
  return single ? out.squeeze(0) : out;
}

torch::Tensor Generator::translate(const torch::Tensor& x, const torch::Tensor& codes) const {
  auto taps = encode_batch(x, codes);
  torch::NoGradGuard guard;
  return net_->decoder(taps.res);
}

torch::Tensor Generator::project_codes(const torch::Tensor& full_codes) const {
  if (subset_.empty()) return full_codes;
  std::vector<int64_t> cols(subset_.begin(), subset_.end());
  return full_codes.index_select(1, torch::tensor(cols, torch::kLong));
}

Generator Generator::cast(torch::Dtype dtype) const {
  nn::GeneratorNet copy(net_->arch);
  nn::copy_parameters(*net_, *copy);
  copy->to(dtype);
  return Generator(copy, schema_, subset_, metadata_);
}

// ---------------------------------------------------------------------------
// Attribute classifier on raw images
// ---------------------------------------------------------------------------

AttributeClassifierModel::AttributeClassifierModel(nn::AttributeClassifier net,
                                                   AttributeSchema schema)
    : net_(std::move(net)), schema_(std::move(schema)) {
  freeze(*net_);
}

torch::Tensor AttributeClassifierModel::predict(const torch::Tensor& x) const {
  torch::NoGradGuard guard;
  return torch::sigmoid(net_->forward(x));
}

torch::Tensor AttributeClassifierModel::logits(const torch::Tensor& x) const {
  return net_->forward(x);
}

AttributeClassifierModel train_attribute_classifier(const std::vector<DatasetRecord>& data,
                                                    const AttributeSchema& schema,
                                                    const AttributeClassifierConfig& cfg) {
  torch::manual_seed(cfg.seed);
  std::mt19937_64 rng(cfg.seed);
  nn::AttributeClassifier net(static_cast<int>(schema.size()), cfg.width);
  torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(cfg.learning_rate));
  const auto train = indices_of(data, Split::Train);
  auto held = indices_of(data, Split::Val);
  if (held.empty()) held = indices_of(data, Split::Test);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& b : make_batches(train, cfg.batch_size, rng)) {
      auto x = stack_images(data, b);
      auto y = stack_attributes(data, b);
      auto loss = F::binary_cross_entropy_with_logits(net->forward(x), y);
      opt.zero_grad();
      loss.backward();
      opt.step();
    }
  }
  AttributeClassifierModel model(net, schema);
  auto pred = model.predict(stack_images(data, held)) > 0.5;
  auto truth = stack_attributes(data, held) > 0.5;
  const double acc = (pred == truth).to(torch::kFloat64).mean(0).min().item<double>();
  if (acc < cfg.accuracy_min) {
    throw TrainingError("attribute classifier below accuracy floor",
                        {{"min_attribute_accuracy", acc}, {"floor", cfg.accuracy_min}});
  }
  return model;
}

// ---------------------------------------------------------------------------
// Generator training
// ---------------------------------------------------------------------------

GeneratorQuality evaluate_generator(const Generator& g, const std::vector<DatasetRecord>& data,
                                    const std::vector<std::size_t>& held_out,
                                    const AttributeClassifierModel& judge) {
  GeneratorQuality q;
  if (held_out.empty()) return q;
  torch::NoGradGuard guard;
  auto x = stack_images(data, held_out);
  auto full = stack_attributes(data, held_out);
  auto recon = g.translate(x, g.project_codes(full));
  q.reconstruction_mse = (recon - x).pow(2).mean().item<double>();

  std::vector<int> attrs = g.attribute_subset();
  if (attrs.empty()) {
    attrs.resize(g.schema().size());
    std::iota(attrs.begin(), attrs.end(), 0);
  }
  long hits = 0, total = 0;
  for (int a : attrs) {
    auto edited_full = full.clone();
    edited_full.select(1, a).fill_(1.0).sub_(full.select(1, a));
    auto out = g.translate(x, g.project_codes(edited_full));
    auto p = judge.predict(out).select(1, a) > 0.5;
    auto want = edited_full.select(1, a) > 0.5;
    hits += (p == want).sum().item<long>();
    total += static_cast<long>(held_out.size());
  }
  q.edits = static_cast<int>(total);
  q.edit_efficacy = static_cast<double>(hits) / static_cast<double>(total);
  return q;
}

Generator train_generator(const std::vector<DatasetRecord>& data, const AttributeSchema& schema,
                          std::uint64_t dataset_seed, const GeneratorTrainConfig& cfg,
                          const AttributeClassifierModel& aux,
                          const AttributeClassifierModel& judge) {
  schema.validate();
  const auto train = indices_of(data, Split::Train);
  auto held = indices_of(data, Split::Val);
  if (held.empty()) held = indices_of(data, Split::Test);
  if (train.empty()) throw InputError("train_generator: no training records");

  std::vector<int> subset = cfg.attribute_subset;
  for (int a : subset) {
    if (a < 0 || a >= static_cast<int>(schema.size())) {
      throw ConfigError("train_generator: attribute subset index out of range");
    }
  }
  std::vector<int> editable = subset;
  if (editable.empty()) {
    editable.resize(schema.size());
    std::iota(editable.begin(), editable.end(), 0);
  }
  for (int a : editable) {
    int ones = 0;
    for (auto i : train) ones += data[i].attributes[a];
    if (ones == 0 || ones == static_cast<int>(train.size())) {
      throw InputError("train_generator: attribute " + schema.names[a] +
                       " takes a single value in the training data");
    }
  }

  torch::manual_seed(cfg.seed);
  std::mt19937_64 rng(cfg.seed);
  nn::GeneratorArch arch = cfg.arch;
  arch.n_attributes = static_cast<int>(editable.size());
  nn::GeneratorNet net(arch);
  torch::optim::Adam opt(net->parameters(),
                         torch::optim::AdamOptions(cfg.learning_rate).betas({0.5, 0.999}));
  std::vector<int64_t> cols(editable.begin(), editable.end());
  const auto col_index = torch::tensor(cols, torch::kLong);
  const int image_size = static_cast<int>(data[train.front()].image.size(1));

  json history = json::array();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double sum_pair = 0, sum_rec = 0, sum_cls = 0, sum_cyc = 0;
    int steps = 0;
    for (const auto& b : make_batches(train, cfg.batch_size, rng)) {
      auto x = stack_images(data, b);
      auto c_full = stack_attributes(data, b);
      auto t_full = c_full.clone();
      std::vector<torch::Tensor> targets;
      targets.reserve(b.size());
      for (std::size_t k = 0; k < b.size(); ++k) {
        const auto& rec = data[b[k]];
        AttributeVector tgt = rec.attributes;
        switch (rng() % 3) {
          case 0:
            break;
          case 1:
            tgt = flip(tgt, editable[rng() % editable.size()]);
            break;
          default:
            for (int a : editable) tgt[a] = static_cast<int>(rng() & 1);
        }
        for (int a : editable) t_full[static_cast<long>(k)][a] = static_cast<float>(tgt[a]);
        targets.push_back(render_face(IdentitySpec::from_id(rec.identity_id, dataset_seed), tgt,
                                      schema, image_size));
      }
      auto y = torch::stack(targets);
      auto c = c_full.index_select(1, col_index);
      auto t = t_full.index_select(1, col_index);

      auto edited = net->forward(x, t);
      auto loss_pair = F::l1_loss(edited, y);
      auto loss_rec = F::l1_loss(net->forward(x, c), x);
      auto loss_cls = F::binary_cross_entropy_with_logits(
          aux.logits(edited).index_select(1, col_index), t);
      auto loss_cyc = F::l1_loss(net->forward(edited, c), x);
      auto loss = cfg.paired_weight * loss_pair + cfg.reconstruction_weight * loss_rec +
                  cfg.classification_weight * loss_cls + cfg.cycle_weight * loss_cyc;
      opt.zero_grad();
      loss.backward();
      opt.step();
      sum_pair += loss_pair.item<double>();
      sum_rec += loss_rec.item<double>();
      sum_cls += loss_cls.item<double>();
      sum_cyc += loss_cyc.item<double>();
      ++steps;
    }
    history.push_back({{"epoch", epoch},
                       {"paired_l1", sum_pair / steps},
                       {"reconstruction_l1", sum_rec / steps},
                       {"classification_bce", sum_cls / steps},
                       {"cycle_l1", sum_cyc / steps}});
    if (cfg.verbose) std::cerr << "[generator] " << history.back().dump() << '\n';
  }

  json meta = {{"kind", "generator"},
               {"image_size", image_size},
               {"arch", arch_to_json(arch)},
               {"attribute_subset", subset},
               {"epochs", cfg.epochs},
               {"batch_size", cfg.batch_size},
               {"learning_rate", cfg.learning_rate},
               {"seed", cfg.seed},
               {"losses", history}};
  Generator g(net, schema, subset, meta);
  const auto q = evaluate_generator(g, data, held, judge);
  json metrics = {{"reconstruction_mse", q.reconstruction_mse},
                  {"edit_efficacy", q.edit_efficacy},
                  {"held_out_edits", q.edits}};
  if (q.reconstruction_mse >= cfg.reconstruction_mse_max ||
      q.edit_efficacy < cfg.edit_efficacy_min) {
    throw TrainingError("generator did not reach the reconstruction/efficacy floor",
                        {{"metrics", metrics}, {"losses", history}});
  }
  meta["metrics"] = metrics;
  return Generator(net, schema, subset, meta);
}

// ---------------------------------------------------------------------------
// Verifier
// ---------------------------------------------------------------------------

Verifier::Verifier(nn::VerifierNet net, Access access, json metadata)
    : net_(std::move(net)),
      access_(access),
      metadata_(std::move(metadata)),
      log_(std::make_shared<AccessLog>()) {
  freeze(*net_);
  if (metadata_.is_null()) metadata_ = json::object();
  if (metadata_.contains("threshold")) threshold_ = metadata_["threshold"].get<double>();
}

const std::string& Verifier::arch_tag() const { return net_->arch.tag; }
int Verifier::embedding_dim() const { return net_->arch.embedding_dim; }

void Verifier::require_whitebox(const char* what) const {
  if (access_ != Access::WhiteBox) {
    throw AccessViolation(std::string("black-box verifier refuses ") + what);
  }
}

torch::Tensor Verifier::embed(const Image& x) const {
  if (x.dim() != 3) throw InputError("embed expects a single [3, H, W] image");
  return embed_batch(x.unsqueeze(0)).squeeze(0);
}

torch::Tensor Verifier::embed_batch(const torch::Tensor& x) const {
  if (x.dim() != 4 || x.size(1) != 3) throw InputError("embed_batch expects [N, 3, H, W]");
  log_->embed_queries += x.size(0);
  torch::NoGradGuard guard;
  return net_->forward(x).embedding;
}

torch::Tensor Verifier::embed_differentiable(const torch::Tensor& x) const {
  return forward_differentiable(x).embedding;
}

nn::VerifierOutputs Verifier::forward_differentiable(const torch::Tensor& x) const {
  require_whitebox("gradient queries");
  ++log_->gradient_calls;
  return net_->forward(x);
}

nn::VerifierNet Verifier::net() const {
  require_whitebox("parameter access");
  ++log_->parameter_access;
  return net_;
}

Verifier Verifier::as_blackbox() const {
  Verifier v(net_, Access::BlackBox, metadata_);
  v.threshold_ = threshold_;
  return v;
}

Verifier Verifier::cast(torch::Dtype dtype) const {
  require_whitebox("parameter access");
  nn::VerifierNet copy(net_->arch);
  nn::copy_parameters(*net_, *copy);
  copy->to(dtype);
  Verifier v(copy, access_, metadata_);
  v.threshold_ = threshold_;
  return v;
}

VerificationStats evaluate_verifier(const Verifier& v, const std::vector<DatasetRecord>& data,
                                    Split split, std::uint64_t seed) {
  const auto idx = indices_of(data, split);
  if (idx.size() < 4) throw InputError("evaluate_verifier: split too small");
  auto emb = v.embed_batch(stack_images(data, idx)).to(torch::kFloat64);
  auto cos = emb.matmul(emb.t());
  auto acc = cos.accessor<double, 2>();
  std::vector<double> genuine, impostor_all;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    for (std::size_t j = i + 1; j < idx.size(); ++j) {
      const double cs = acc[static_cast<long>(i)][static_cast<long>(j)];
      (data[idx[i]].identity_id == data[idx[j]].identity_id ? genuine : impostor_all).push_back(cs);
    }
  }
  if (genuine.empty() || impostor_all.empty()) {
    throw InputError("evaluate_verifier: need both genuine and impostor pairs");
  }
  std::mt19937_64 rng(seed);
  std::shuffle(impostor_all.begin(), impostor_all.end(), rng);
  std::vector<double> impostor(impostor_all.begin(),
                               impostor_all.begin() +
                                   static_cast<long>(std::min(impostor_all.size(), genuine.size())));

  VerificationStats s;
  s.genuine_cos_mean = std::accumulate(genuine.begin(), genuine.end(), 0.0) / genuine.size();
  s.impostor_cos_mean = std::accumulate(impostor.begin(), impostor.end(), 0.0) / impostor.size();
  // Sweep cosine thresholds; EER point is where FAR and FRR cross.
  std::vector<double> cands = genuine;
  cands.insert(cands.end(), impostor.begin(), impostor.end());
  std::sort(cands.begin(), cands.end());
  std::sort(genuine.begin(), genuine.end());
  std::sort(impostor.begin(), impostor.end());
  double best_gap = 2.0;
  for (double t : cands) {
    // accept when cos >= t
    const double frr = static_cast<double>(std::lower_bound(genuine.begin(), genuine.end(), t) -
                                           genuine.begin()) / genuine.size();
    const double far = static_cast<double>(impostor.end() -
                                           std::lower_bound(impostor.begin(), impostor.end(), t)) /
                       impostor.size();
    const double gap = std::abs(far - frr);
    if (gap < best_gap) {
      best_gap = gap;
      const double correct = (1.0 - frr) * genuine.size() + (1.0 - far) * impostor.size();
      s.accuracy_at_eer = correct / static_cast<double>(genuine.size() + impostor.size());
      s.eer_threshold = 2.0 - 2.0 * t;
    }
  }
  return s;
}

Verifier train_verifier(const std::vector<DatasetRecord>& data, const std::string& arch_tag,
                        const VerifierTrainConfig& cfg) {
  const auto train = indices_of(data, Split::Train);
  if (train.empty() || indices_of(data, Split::Test).empty()) {
    throw InputError("train_verifier: needs identity-disjoint train and test splits");
  }
  std::map<int, long> class_of;
  for (auto i : train) class_of.emplace(data[i].identity_id, 0);
  long next = 0;
  for (auto& [id, cls] : class_of) cls = next++;
  for (auto i : indices_of(data, Split::Test)) {
    if (class_of.count(data[i].identity_id)) {
      throw InputError("train_verifier: test identity also appears in training split");
    }
  }

  torch::manual_seed(cfg.seed);
  std::mt19937_64 rng(cfg.seed);
  auto arch = nn::VerifierArch::from_tag(arch_tag);
  arch.image_size = static_cast<int>(data[train.front()].image.size(1));
  nn::VerifierNet net(arch);
  auto weight = torch::randn({next, arch.embedding_dim}) * 0.1;
  weight.set_requires_grad(true);
  auto params = net->parameters();
  params.push_back(weight);
  torch::optim::Adam opt(params, torch::optim::AdamOptions(cfg.learning_rate));
  const double margin = arch.loss == nn::LossKind::Margin ? cfg.margin : 0.0;

  json history = json::array();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double sum = 0;
    int steps = 0;
    for (const auto& b : make_batches(train, cfg.batch_size, rng)) {
      auto x = stack_images(data, b);
      std::vector<int64_t> labels;
      for (auto i : b) labels.push_back(class_of.at(data[i].identity_id));
      auto y = torch::tensor(labels, torch::kLong);
      auto emb = net->forward(x).embedding;
      auto w = F::normalize(weight, F::NormalizeFuncOptions().dim(1));
      auto cosines = emb.matmul(w.t());
      auto onehot = F::one_hot(y, next).to(cosines.dtype());
      auto logits = cfg.scale * (cosines - margin * onehot);
      auto loss = F::cross_entropy(logits, y);
      opt.zero_grad();
      loss.backward();
      opt.step();
      sum += loss.item<double>();
      ++steps;
    }
    history.push_back({{"epoch", epoch}, {"loss", sum / steps}});
    if (cfg.verbose) std::cerr << "[verifier " << arch_tag << "] " << history.back().dump() << '\n';
  }

  json meta = {{"kind", "verifier"},
               {"arch", arch_tag},
               {"image_size", arch.image_size},
               {"embedding_dim", arch.embedding_dim},
               {"epochs", cfg.epochs},
               {"learning_rate", cfg.learning_rate},
               {"margin", margin},
               {"scale", cfg.scale},
               {"seed", cfg.seed},
               {"losses", history}};
  Verifier v(net, Access::WhiteBox, meta);
  const auto stats = evaluate_verifier(v, data, Split::Test, cfg.seed);
  json metrics = {{"accuracy_at_eer", stats.accuracy_at_eer},
                  {"eer_threshold", stats.eer_threshold},
                  {"genuine_cos_mean", stats.genuine_cos_mean},
                  {"impostor_cos_mean", stats.impostor_cos_mean}};
  if (stats.accuracy_at_eer < cfg.accuracy_floor) {
    throw TrainingError("verifier " + arch_tag + " below verification accuracy floor",
                        {{"metrics", metrics}, {"floor", cfg.accuracy_floor}});
  }
  meta["metrics"] = metrics;
  return Verifier(net, Access::WhiteBox, meta);
}

// ---------------------------------------------------------------------------
// Attribute head
// ---------------------------------------------------------------------------

AttributePredictor::AttributePredictor(Verifier trunk, nn::TrunkAttributeHead head,
                                       AttributeSchema schema)
    : trunk_(std::move(trunk)), head_(std::move(head)), schema_(std::move(schema)) {
  freeze(*head_);
}

torch::Tensor AttributePredictor::predict(const torch::Tensor& x) const {
  torch::NoGradGuard guard;
  auto feats = trunk_.forward_differentiable(x).trunk;
  return torch::sigmoid(head_->forward(feats));
}

AttributePredictor train_attribute_head(const Verifier& v, const std::vector<DatasetRecord>& data,
                                        const AttributeSchema& schema,
                                        const AttributeHeadConfig& cfg) {
  torch::manual_seed(cfg.seed);
  std::mt19937_64 rng(cfg.seed);
  const auto train = indices_of(data, Split::Train);
  const auto held = indices_of(data, Split::Test);
  auto trunk_net = v.net();
  const int in_ch = trunk_net->arch.widths.at(static_cast<std::size_t>(trunk_net->arch.trunk_stage));
  nn::TrunkAttributeHead head(in_ch, static_cast<int>(schema.size()));
  torch::optim::Adam opt(head->parameters(), torch::optim::AdamOptions(cfg.learning_rate));

  auto trunk_features = [&](const std::vector<std::size_t>& b) {
    torch::NoGradGuard guard;
    return trunk_net->forward(stack_images(data, b)).trunk;
  };
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& b : make_batches(train, cfg.batch_size, rng)) {
      auto feats = trunk_features(b);
      auto loss = F::binary_cross_entropy_with_logits(head->forward(feats),
                                                      stack_attributes(data, b));
      opt.zero_grad();
      loss.backward();
      opt.step();
    }
  }
  AttributePredictor p(v, head, schema);
  auto pred = p.predict(stack_images(data, held)) > 0.5;
  auto truth = stack_attributes(data, held) > 0.5;
  auto per_attr = (pred == truth).to(torch::kFloat64).mean(0);
  p.accuracies.resize(schema.size());
  for (std::size_t a = 0; a < schema.size(); ++a) {
    p.accuracies[a] = per_attr[static_cast<long>(a)].item<double>();
  }
  const double worst = *std::min_element(p.accuracies.begin(), p.accuracies.end());
  if (worst < cfg.accuracy_floor) {
    throw TrainingError("attribute head below per-attribute accuracy floor",
                        {{"accuracies", p.accuracies}, {"floor", cfg.accuracy_floor}});
  }
  return p;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

bool checkpoint_exists(const std::filesystem::path& dir, const std::string& name) {
  return std::filesystem::exists(dir / (name + ".pt")) &&
         std::filesystem::exists(dir / (name + ".json"));
}

void save_generator(const Generator& g, const std::filesystem::path& dir, const std::string& name,
                    const json& provenance) {
  std::filesystem::create_directories(dir);
  auto net = g.net();
  torch::save(net, (dir / (name + ".pt")).string());
  json m = g.metadata();
  m["arch"] = arch_to_json(net->arch);
  m["attribute_subset"] = g.attribute_subset();
  m["image_size"] = m.value("image_size", 32);
  m["schema_hash"] = g.schema().hash();
  m["provenance"] = provenance;
  write_manifest(dir / (name + ".json"), m);
}

Generator load_generator(const std::filesystem::path& dir, const std::string& name,
                         const AttributeSchema& schema) {
  json m = read_manifest(dir / (name + ".json"));
  check_schema(m, schema, dir / name);
  nn::GeneratorNet net(arch_from_json(m.at("arch")));
  torch::load(net, (dir / (name + ".pt")).string());
  return Generator(net, schema, m.at("attribute_subset").get<std::vector<int>>(), m);
}

void save_verifier(const Verifier& v, const std::filesystem::path& dir, const std::string& name,
                   const AttributeSchema& schema, const json& provenance) {
  std::filesystem::create_directories(dir);
  auto net = v.net();
  torch::save(net, (dir / (name + ".pt")).string());
  json m = v.metadata();
  m["arch"] = v.arch_tag();
  m["image_size"] = net->arch.image_size;
  m["schema_hash"] = schema.hash();
  m["provenance"] = provenance;
  if (v.threshold()) m["threshold"] = *v.threshold();
  write_manifest(dir / (name + ".json"), m);
}

Verifier load_verifier(const std::filesystem::path& dir, const std::string& name,
                       const AttributeSchema& schema, Access access) {
  json m = read_manifest(dir / (name + ".json"));
  check_schema(m, schema, dir / name);
  auto arch = nn::VerifierArch::from_tag(m.at("arch"));
  arch.image_size = m.at("image_size");
  nn::VerifierNet net(arch);
  torch::load(net, (dir / (name + ".pt")).string());
  return Verifier(net, access, m);
}

void save_attribute_classifier(const AttributeClassifierModel& model,
                               const std::filesystem::path& dir, const std::string& name,
                               const json& provenance) {
  std::filesystem::create_directories(dir);
  auto net = model.net();
  torch::save(net, (dir / (name + ".pt")).string());
  write_manifest(dir / (name + ".json"), {{"kind", "attribute_classifier"},
                                          {"schema_hash", model.schema().hash()},
                                          {"provenance", provenance}});
}

AttributeClassifierModel load_attribute_classifier(const std::filesystem::path& dir,
                                                   const std::string& name,
                                                   const AttributeSchema& schema,
                                                   const AttributeClassifierConfig& cfg) {
  json m = read_manifest(dir / (name + ".json"));
  check_schema(m, schema, dir / name);
  nn::AttributeClassifier net(static_cast<int>(schema.size()), cfg.width);
  torch::load(net, (dir / (name + ".pt")).string());
  return AttributeClassifierModel(net, schema);
}

void save_attribute_head(const AttributePredictor& p, const std::filesystem::path& dir,
                         const std::string& name, const json& provenance) {
  std::filesystem::create_directories(dir);
  auto head = p.head();
  torch::save(head, (dir / (name + ".pt")).string());
  write_manifest(dir / (name + ".json"), {{"kind", "attribute_head"},
                                          {"trunk_arch", p.trunk().arch_tag()},
                                          {"schema_hash", p.schema().hash()},
                                          {"accuracies", p.accuracies},
                                          {"provenance", provenance}});
}

AttributePredictor load_attribute_head(const std::filesystem::path& dir, const std::string& name,
                                       const Verifier& trunk, const AttributeSchema& schema) {
  json m = read_manifest(dir / (name + ".json"));
  check_schema(m, schema, dir / name);
  auto arch = nn::VerifierArch::from_tag(trunk.arch_tag());
  nn::TrunkAttributeHead head(arch.widths.at(static_cast<std::size_t>(arch.trunk_stage)),
                              static_cast<int>(schema.size()));
  torch::load(head, (dir / (name + ".pt")).string());
  AttributePredictor p(trunk, head, schema);
  p.accuracies = m.at("accuracies").get<std::vector<double>>();
  return p;
}

}  // namespace semattack
