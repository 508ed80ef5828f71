#include "semattack/pipeline.hpp"

#include <fcntl.h>
#include <signal.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "semattack/image_io.hpp"
#include "semattack/significance.hpp"

namespace semattack {

using Json = nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

namespace {

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

}  // namespace

ValidationError::ValidationError(std::vector<std::string> errors)
    : ConfigError("invalid config:\n  " + join(errors, "\n  ")), errors_(std::move(errors)) {}

MissingArtifact::MissingArtifact(const fs::path& path, const std::string& producer)
    : std::runtime_error("missing " + path.string() + "; run `semattack " + producer +
                         "` first") {}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

Json RunConfig::defaults() {
  return Json::parse(R"({
    "seed": 7,
    "output_root": "runs",
    "dataset": {
      "n_identities": 200, "images_per_identity": 20, "image_size": 32,
      "test_fraction": 0.2, "val_every": 10
    },
    "models": {
      "surrogate": "small-A",
      "transfer_targets": ["small-B", "small-C", "small-D"],
      "blackbox_target": "small-B",
      "verifier": {
        "epochs": 15, "batch_size": 64, "learning_rate": 0.003,
        "margin": 0.25, "scale": 16.0, "accuracy_floor": 0.9
      },
      "generator": {
        "epochs": 30, "subset_epochs": 20, "batch_size": 32, "learning_rate": 0.002,
        "stem_channels": 16, "feature_channels": 32, "residual_blocks": 3,
        "paired_weight": 1.0, "reconstruction_weight": 1.0,
        "classification_weight": 0.02, "cycle_weight": 0.5,
        "reconstruction_mse_max": 0.01, "edit_efficacy_min": 0.7
      },
      "classifier": {
        "width": 16, "epochs": 8, "batch_size": 64, "learning_rate": 0.003,
        "accuracy_min": 0.9
      },
      "attribute_head": {
        "epochs": 10, "batch_size": 64, "learning_rate": 0.003, "accuracy_floor": 0.85
      }
    },
    "calibration": {"fpr_level": 0.01, "impostor_cap": 20000, "genuine_cap": 5000},
    "attack": {
      "n_pairs": 100,
      "types": ["impersonation", "dodging"],
      "whitebox": {
        "max_iterations": 300, "learning_rate": 0.05, "granularity": "channel",
        "reduction": 4, "success_margin": 0.0
      },
      "blackbox": {
        "similarity_threshold": 0.6, "grid_size": 100, "grid_mode": "uniform",
        "grid_seed": 0, "strict_filter": false, "max_attributes": -1,
        "random_order_seed": 5
      },
      "random_selection": {"alpha": 0.5},
      "gradient": {
        "methods": ["FGSM-L2", "FGSM", "BIM", "PGD", "MI-FGSM"],
        "linf_epsilon": 0.03137254901960784, "l2_epsilon": 0.2,
        "bim_iterations": 20, "pgd_iterations": 40, "decay": 1.0
      }
    },
    "evaluate": {"histogram_bins": 20, "gradcam_images": 8}
  })");
}

namespace {

void deep_merge(Json& base, const Json& patch) {
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    if (it->is_object() && base.contains(it.key()) && base[it.key()].is_object()) {
      deep_merge(base[it.key()], *it);
    } else {
      base[it.key()] = *it;
    }
  }
}

bool same_kind(const Json& a, const Json& b) {
  if (a.is_number() && b.is_number()) {
    return !(a.is_number_integer() && b.is_number_float());
  }
  return a.type() == b.type();
}

void check_shape(const Json& ref, const Json& j, const std::string& path,
                 std::vector<std::string>& errors) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!ref.contains(it.key())) {
      errors.push_back(key + ": unknown field");
      continue;
    }
    const Json& r = ref[it.key()];
    if (r.is_object()) {
      if (!it->is_object()) {
        errors.push_back(key + ": expected a section");
      } else {
        check_shape(r, *it, key, errors);
      }
    } else if (!same_kind(r, *it)) {
      errors.push_back(key + ": expected " + std::string(r.type_name()) + ", got " +
                       std::string(it->type_name()));
    }
  }
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, const std::string& salt) {
  std::uint64_t z = seed ^ fnv1a(salt);
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return (z ^ (z >> 31)) & 0x7FFFFFFFFFFFULL;
}

void apply_override(Json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ValidationError({"override `" + assignment + "` is not of the form key.path=value"});
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(raw);
  } catch (const Json::parse_error&) {
    value = raw;
  }
  Json* node = &j;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i]) || !(*node)[parts[i]].is_object()) {
      throw ValidationError({key + ": unknown section " + parts[i]});
    }
    node = &(*node)[parts[i]];
  }
  (*node)[parts.back()] = value;
}

RunConfig RunConfig::load(const std::optional<fs::path>& file,
                          const std::vector<std::string>& overrides,
                          std::optional<std::uint64_t> seed) {
  Json j = defaults();
  if (file) {
    std::ifstream in(*file);
    if (!in) throw ValidationError({"config file " + file->string() + " cannot be read"});
    Json patch;
    try {
      patch = Json::parse(in);
    } catch (const Json::parse_error& e) {
      throw ValidationError({"config file " + file->string() + ": " + e.what()});
    }
    std::vector<std::string> errors;
    check_shape(defaults(), patch, "", errors);
    if (!errors.empty()) throw ValidationError(errors);
    deep_merge(j, patch);
  }
  for (const auto& o : overrides) apply_override(j, o);
  if (seed) j["seed"] = *seed;
  return from_json(std::move(j));
}

RunConfig RunConfig::from_json(Json j) {
  Json merged = defaults();
  std::vector<std::string> errors;
  check_shape(defaults(), j, "", errors);
  if (!errors.empty()) throw ValidationError(errors);
  deep_merge(merged, j);
  RunConfig c(std::move(merged));
  c.validate();
  return c;
}

void RunConfig::validate() const {
  std::vector<std::string> e;
  const auto& d = j_["dataset"];
  auto need = [&](bool ok, const std::string& msg) {
    if (!ok) e.push_back(msg);
  };
  need(j_["seed"].is_number_integer() && j_["seed"].get<long long>() >= 0, "seed: must be >= 0");
  need(d["n_identities"].get<int>() >= 2, "dataset.n_identities: must be >= 2");
  need(d["n_identities"].get<int>() <= IdentitySpec::kMaxIdentities,
       "dataset.n_identities: too many identities");
  need(d["images_per_identity"].get<int>() >= 1, "dataset.images_per_identity: must be >= 1");
  {
    const int s = d["image_size"].get<int>();
    need(s == 32 || s == 48 || s == 64, "dataset.image_size: must be 32, 48 or 64");
  }
  {
    const double f = d["test_fraction"].get<double>();
    need(f > 0.0 && f < 1.0, "dataset.test_fraction: must be in (0, 1)");
  }
  need(d["val_every"].get<int>() >= 2, "dataset.val_every: must be >= 2");

  const auto& m = j_["models"];
  const auto tags = nn::VerifierArch::known_tags();
  auto known = [&](const std::string& t) { return std::find(tags.begin(), tags.end(), t) != tags.end(); };
  need(known(m["surrogate"].get<std::string>()), "models.surrogate: unknown architecture");
  std::set<std::string> seen{m["surrogate"].get<std::string>()};
  for (const auto& t : m["transfer_targets"]) {
    if (!t.is_string() || !known(t.get<std::string>())) {
      e.push_back("models.transfer_targets: unknown architecture " + t.dump());
    } else if (!seen.insert(t.get<std::string>()).second) {
      e.push_back("models.transfer_targets: " + t.get<std::string>() +
                  " repeats the surrogate or another target");
    }
  }
  need(!m["transfer_targets"].empty(), "models.transfer_targets: must not be empty");
  {
    const std::string bb = m["blackbox_target"];
    bool in_targets = false;
    for (const auto& t : m["transfer_targets"]) in_targets |= t == bb;
    need(in_targets, "models.blackbox_target: must be one of models.transfer_targets");
  }
  for (const char* sec : {"verifier", "generator", "classifier", "attribute_head"}) {
    need(m[sec]["epochs"].get<int>() >= 1, std::string("models.") + sec + ".epochs: must be >= 1");
    need(m[sec]["batch_size"].get<int>() >= 1,
         std::string("models.") + sec + ".batch_size: must be >= 1");
    need(m[sec]["learning_rate"].get<double>() > 0,
         std::string("models.") + sec + ".learning_rate: must be > 0");
  }
  need(m["generator"]["subset_epochs"].get<int>() >= 1, "models.generator.subset_epochs: must be >= 1");
  need(m["generator"]["feature_channels"].get<int>() >= 4, "models.generator.feature_channels: must be >= 4");
  need(m["generator"]["stem_channels"].get<int>() >= 1, "models.generator.stem_channels: must be >= 1");
  need(m["generator"]["residual_blocks"].get<int>() >= 0, "models.generator.residual_blocks: must be >= 0");
  need(m["classifier"]["width"].get<int>() >= 1, "models.classifier.width: must be >= 1");
  need(m["verifier"]["scale"].get<double>() > 0, "models.verifier.scale: must be > 0");
  need(m["verifier"]["margin"].get<double>() >= 0, "models.verifier.margin: must be >= 0");

  const auto& c = j_["calibration"];
  {
    const double f = c["fpr_level"].get<double>();
    need(f > 0 && f < 1, "calibration.fpr_level: must be in (0, 1)");
    if (f > 0 && f < 1) {
      need(c["impostor_cap"].get<double>() >= std::ceil(1.0 / f),
           "calibration.impostor_cap: below the minimum pair count for fpr_level");
    }
  }
  need(c["genuine_cap"].get<int>() >= 1, "calibration.genuine_cap: must be >= 1");

  const auto& a = j_["attack"];
  need(a["n_pairs"].get<int>() >= 1, "attack.n_pairs: must be >= 1");
  need(!a["types"].empty(), "attack.types: must not be empty");
  for (const auto& t : a["types"]) {
    if (!t.is_string() || (t != "impersonation" && t != "dodging")) {
      e.push_back("attack.types: unknown attack type " + t.dump());
    }
  }
  const auto& wb = a["whitebox"];
  need(wb["max_iterations"].get<int>() >= 1, "attack.whitebox.max_iterations: must be >= 1");
  need(wb["learning_rate"].get<double>() > 0, "attack.whitebox.learning_rate: must be > 0");
  {
    const std::string g = wb["granularity"];
    need(g == "scalar" || g == "channel" || g == "element",
         "attack.whitebox.granularity: must be scalar, channel or element");
  }
  need(wb["reduction"].get<int>() >= 1, "attack.whitebox.reduction: must be >= 1");
  need(wb["success_margin"].get<double>() >= 0, "attack.whitebox.success_margin: must be >= 0");
  const auto& bb = a["blackbox"];
  {
    const double th = bb["similarity_threshold"].get<double>();
    need(th >= 0 && th < 1, "attack.blackbox.similarity_threshold: must be in [0, 1)");
  }
  need(bb["grid_size"].get<int>() >= 2, "attack.blackbox.grid_size: must be >= 2");
  {
    const std::string mode = bb["grid_mode"];
    need(mode == "uniform" || mode == "random", "attack.blackbox.grid_mode: must be uniform or random");
  }
  {
    const int ma = bb["max_attributes"].get<int>();
    need(ma == -1 || (ma >= 1 && ma <= 8), "attack.blackbox.max_attributes: must be -1 or 1..8");
  }
  {
    const double alpha = a["random_selection"]["alpha"].get<double>();
    need(alpha >= 0 && alpha <= 1, "attack.random_selection.alpha: must be in [0, 1]");
  }
  const auto& gr = a["gradient"];
  for (const auto& mth : gr["methods"]) {
    static const std::set<std::string> ok{"FGSM-L2", "FGSM", "BIM", "PGD", "MI-FGSM"};
    if (!mth.is_string() || !ok.count(mth.get<std::string>())) {
      e.push_back("attack.gradient.methods: unknown method " + mth.dump());
    }
  }
  need(gr["linf_epsilon"].get<double>() >= 0, "attack.gradient.linf_epsilon: must be >= 0");
  need(gr["l2_epsilon"].get<double>() >= 0, "attack.gradient.l2_epsilon: must be >= 0");
  need(gr["bim_iterations"].get<int>() >= 1, "attack.gradient.bim_iterations: must be >= 1");
  need(gr["pgd_iterations"].get<int>() >= 1, "attack.gradient.pgd_iterations: must be >= 1");
  need(j_["evaluate"]["histogram_bins"].get<int>() >= 1, "evaluate.histogram_bins: must be >= 1");
  need(j_["evaluate"]["gradcam_images"].get<int>() >= 0, "evaluate.gradcam_images: must be >= 0");
  if (!e.empty()) throw ValidationError(e);
}

std::uint64_t RunConfig::seed() const { return j_["seed"].get<std::uint64_t>(); }

std::string RunConfig::hash() const {
  Json copy = j_;
  copy.erase("output_root");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(copy.dump())));
  return buf;
}

fs::path RunConfig::output_root() const {
  if (const char* env = std::getenv(kOutputRootEnv); env && *env) return env;
  return j_["output_root"].get<std::string>();
}

fs::path RunConfig::run_dir() const { return output_root() / hash(); }

Json RunConfig::provenance(const std::string& command) const {
  return {{"config_hash", hash()}, {"seed", seed()}, {"command", command}};
}

std::string RunConfig::provenance_line() const {
  return "config_hash=" + hash() + " seed=" + std::to_string(seed());
}

DatasetConfig RunConfig::dataset() const {
  const auto& d = j_["dataset"];
  DatasetConfig c;
  c.n_identities = d["n_identities"];
  c.images_per_identity = d["images_per_identity"];
  c.image_size = d["image_size"];
  c.test_fraction = d["test_fraction"];
  c.val_every = d["val_every"];
  c.seed = seed();
  return c;
}

AttributeClassifierConfig RunConfig::classifier(std::uint64_t salt) const {
  const auto& s = j_["models"]["classifier"];
  AttributeClassifierConfig c;
  c.width = s["width"];
  c.epochs = s["epochs"];
  c.batch_size = s["batch_size"];
  c.learning_rate = s["learning_rate"];
  c.accuracy_min = s["accuracy_min"];
  c.seed = derive_seed(seed(), "classifier/" + std::to_string(salt));
  return c;
}

GeneratorTrainConfig RunConfig::generator(const std::string& which) const {
  const auto& s = j_["models"]["generator"];
  GeneratorTrainConfig c;
  c.arch.stem_channels = s["stem_channels"];
  c.arch.feature_channels = s["feature_channels"];
  c.arch.residual_blocks = s["residual_blocks"];
  c.epochs = which == "main" ? s["epochs"].get<int>() : s["subset_epochs"].get<int>();
  c.batch_size = s["batch_size"];
  c.learning_rate = s["learning_rate"];
  c.paired_weight = s["paired_weight"];
  c.reconstruction_weight = s["reconstruction_weight"];
  c.classification_weight = s["classification_weight"];
  c.cycle_weight = s["cycle_weight"];
  c.reconstruction_mse_max = s["reconstruction_mse_max"];
  c.edit_efficacy_min = s["edit_efficacy_min"];
  c.seed = derive_seed(seed(), "generator/" + which);
  return c;
}

VerifierTrainConfig RunConfig::verifier(const std::string& tag) const {
  const auto& s = j_["models"]["verifier"];
  VerifierTrainConfig c;
  c.epochs = s["epochs"];
  c.batch_size = s["batch_size"];
  c.learning_rate = s["learning_rate"];
  c.margin = s["margin"];
  c.scale = s["scale"];
  c.accuracy_floor = s["accuracy_floor"];
  c.seed = derive_seed(seed(), "verifier/" + tag);
  return c;
}

AttributeHeadConfig RunConfig::attribute_head() const {
  const auto& s = j_["models"]["attribute_head"];
  AttributeHeadConfig c;
  c.epochs = s["epochs"];
  c.batch_size = s["batch_size"];
  c.learning_rate = s["learning_rate"];
  c.accuracy_floor = s["accuracy_floor"];
  c.seed = derive_seed(seed(), "attribute_head");
  return c;
}

std::string RunConfig::surrogate() const { return j_["models"]["surrogate"]; }

std::vector<std::string> RunConfig::transfer_targets() const {
  return j_["models"]["transfer_targets"].get<std::vector<std::string>>();
}

std::string RunConfig::blackbox_target() const { return j_["models"]["blackbox_target"]; }

std::vector<std::string> RunConfig::roster() const {
  std::vector<std::string> r{surrogate()};
  for (const auto& t : transfer_targets()) r.push_back(t);
  return r;
}

WhiteboxConfig RunConfig::whitebox(AttackType type, int n_attributes) const {
  const auto& s = j_["attack"]["whitebox"];
  WhiteboxConfig c;
  c.type = type;
  c.n_attributes = n_attributes;
  c.max_iterations = s["max_iterations"];
  c.learning_rate = s["learning_rate"];
  c.granularity = beta_granularity_from_string(s["granularity"]);
  c.reduction = s["reduction"];
  c.success_margin = s["success_margin"];
  c.attention_seed = derive_seed(seed(), "attention");
  return c;
}

BlackboxConfig RunConfig::blackbox(AttackType type) const {
  const auto& s = j_["attack"]["blackbox"];
  BlackboxConfig c;
  c.type = type;
  c.similarity_threshold = s["similarity_threshold"];
  c.max_attributes = s["max_attributes"];
  c.strict_filter = s["strict_filter"];
  c.grid = s["grid_mode"] == "uniform" ? GammaGrid::uniform(s["grid_size"])
                                       : GammaGrid::random(s["grid_size"], s["grid_seed"]);
  return c;
}

RandomSelectionConfig RunConfig::random_selection(const AttributeSchema& schema,
                                                  AttackType type) const {
  auto c = RandomSelectionConfig::with_default_sets(schema);
  c.alpha = j_["attack"]["random_selection"]["alpha"];
  c.type = type;
  return c;
}

std::vector<std::string> RunConfig::gradient_methods() const {
  return j_["attack"]["gradient"]["methods"].get<std::vector<std::string>>();
}

GradientAttackConfig RunConfig::gradient(const std::string& method, AttackType type) const {
  const auto& s = j_["attack"]["gradient"];
  GradientAttackConfig c;
  if (method == "FGSM-L2") {
    c = GradientAttackConfig::fgsm_l2();
    c.epsilon = s["l2_epsilon"];
  } else if (method == "FGSM") {
    c = GradientAttackConfig::fgsm_linf();
    c.epsilon = s["linf_epsilon"];
  } else if (method == "BIM") {
    c = GradientAttackConfig::bim();
    c.epsilon = s["linf_epsilon"];
    c.iterations = s["bim_iterations"];
  } else if (method == "PGD") {
    c = GradientAttackConfig::pgd();
    c.epsilon = s["linf_epsilon"];
    c.iterations = s["pgd_iterations"];
  } else if (method == "MI-FGSM") {
    c = GradientAttackConfig::mifgsm();
    c.epsilon = s["linf_epsilon"];
    c.iterations = s["pgd_iterations"];
    c.decay = s["decay"];
  } else {
    throw ConfigError("unknown gradient attack: " + method);
  }
  c.type = type;
  c.seed = derive_seed(seed(), "gradient/" + method);
  return c;
}

std::vector<AttackType> RunConfig::attack_types() const {
  std::vector<AttackType> out;
  for (const auto& t : j_["attack"]["types"]) out.push_back(attack_type_from_string(t));
  return out;
}

// ---------------------------------------------------------------------------
// Lock
// ---------------------------------------------------------------------------

RunLock::RunLock(const fs::path& run_dir) : path_(run_dir / ".lock") {
  fs::create_directories(run_dir);
  for (int attempt = 0; attempt < 2; ++attempt) {
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd >= 0) {
      const std::string pid = std::to_string(::getpid()) + "\n";
      if (::write(fd, pid.data(), pid.size()) < 0) {
        // an empty lock file still excludes other writers
      }
      ::close(fd);
      return;
    }
    // A lock left by a dead process is taken over.
    std::ifstream in(path_);
    long pid = 0;
    in >> pid;
    if (pid > 0 && ::kill(static_cast<pid_t>(pid), 0) != 0) {
      fs::remove(path_);
      continue;
    }
    break;
  }
  throw LockError("run directory " + run_dir.string() + " is locked by another process (" +
                  path_.string() + ")");
}

RunLock::~RunLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

// ---------------------------------------------------------------------------
// Small I/O helpers
// ---------------------------------------------------------------------------

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string fmt9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9f", v);
  return buf;
}

class CsvWriter {
 public:
  CsvWriter(const fs::path& path, const RunConfig& cfg, const std::vector<std::string>& header)
      : out_(path, std::ios::binary) {
    if (!out_) throw std::runtime_error("cannot write " + path.string());
    out_ << "# " << cfg.provenance_line() << '\n' << join(header, ",") << '\n';
  }
  void row(const std::vector<std::string>& cells) { out_ << join(cells, ",") << '\n'; }

 private:
  std::ofstream out_;
};

void write_json(const fs::path& path, const Json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

Json read_json(const fs::path& path, const std::string& producer) {
  std::ifstream in(path);
  if (!in) throw MissingArtifact(path, producer);
  return Json::parse(in);
}

void require(const fs::path& path, const std::string& producer) {
  if (!fs::exists(path)) throw MissingArtifact(path, producer);
}

std::map<std::string, std::string> png_text(const RunConfig& cfg, const std::string& what) {
  return {{"config_hash", cfg.hash()}, {"seed", std::to_string(cfg.seed())}, {"content", what}};
}

}  // namespace

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(cells);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Pairs, models, attack records
// ---------------------------------------------------------------------------

std::vector<AttackPair> select_attack_pairs(const std::vector<DatasetRecord>& data, int n,
                                            std::uint64_t seed) {
  auto test = indices_of(data, Split::Test);
  std::set<int> ids;
  for (auto i : test) ids.insert(data[i].identity_id);
  if (ids.size() < 2) throw InputError("attack pairs need at least two test identities");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> sources = test;
  std::shuffle(sources.begin(), sources.end(), rng);
  std::vector<AttackPair> pairs;
  for (int k = 0; k < n; ++k) {
    AttackPair p;
    p.pair_id = k;
    p.source = sources[static_cast<std::size_t>(k) % sources.size()];
    do {
      p.target = test[rng() % test.size()];
    } while (data[p.target].identity_id == data[p.source].identity_id);
    pairs.push_back(p);
  }
  return pairs;
}

std::vector<DatasetRecord> load_run_dataset(const RunConfig& cfg, const AttributeSchema& schema) {
  require(cfg.dir("data") / "manifest.txt", "generate");
  return load_dataset(cfg.dir("data"), schema);
}

namespace {

const char* kMainGenerator = "generator";
const char* kGeneratorS1 = "generator_s1";
const char* kGeneratorS2 = "generator_s2";
const char* kAttributeHead = "attribute_head";

std::string verifier_name(const std::string& tag) { return "verifier_" + tag; }

}  // namespace

TrainedModels load_models(const RunConfig& cfg, const AttributeSchema& schema) {
  const auto dir = cfg.dir("models");
  require(dir / "calibration.json", "train");
  auto cal = read_json(dir / "calibration.json", "train");
  std::map<std::string, Verifier> verifiers;
  std::map<std::string, ThresholdCalibration> cals;
  for (const auto& tag : cfg.roster()) {
    auto v = load_verifier(dir, verifier_name(tag), schema, Access::WhiteBox);
    auto c = ThresholdCalibration::from_json(cal.at(tag));
    v.set_threshold(c.T);
    verifiers.emplace(tag, v);
    cals.emplace(tag, c);
  }
  auto head = load_attribute_head(dir, kAttributeHead, verifiers.at(cfg.surrogate()), schema);
  return TrainedModels{load_generator(dir, kMainGenerator, schema),
                       load_generator(dir, kGeneratorS1, schema),
                       load_generator(dir, kGeneratorS2, schema),
                       std::move(verifiers),
                       std::move(cals),
                       std::move(head)};
}

std::string attack_file_stem(const std::string& method, AttackType type) {
  return method + "__" + to_string(type);
}

std::vector<std::string> attack_methods(const RunConfig& cfg) {
  std::vector<std::string> m{"saa-cs-1", "saa-ps-1", "saa-cs-2", "saa-ps-2", "random-selection"};
  for (const auto& g : cfg.gradient_methods()) m.push_back(g);
  m.push_back("saa-blackbox");
  m.push_back("random-blackbox");
  return m;
}

AttackRecordSet load_attack_records(const RunConfig& cfg, const std::string& method,
                                    AttackType type) {
  const auto stem = cfg.dir("attacks") / attack_file_stem(method, type);
  auto jl = stem;
  jl += ".jsonl";
  auto pt = stem;
  pt += ".pt";
  require(jl, "attack");
  require(pt, "attack");
  AttackRecordSet s;
  std::ifstream in(jl);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = Json::parse(line);
    if (j.contains("provenance")) continue;
    s.outcomes.push_back(AttackOutcome::from_json(j));
  }
  torch::load(s.adversarial, pt.string());
  for (long i = 0; i < static_cast<long>(s.outcomes.size()); ++i) {
    s.outcomes[static_cast<std::size_t>(i)].adversarial = s.adversarial[i];
  }
  return s;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

void cmd_generate(const RunConfig& cfg, std::ostream& log) {
  RunLock lock(cfg.run_dir());
  auto schema = AttributeSchema::default_schema();
  auto records = generate_dataset(cfg.dataset(), schema);
  save_dataset(cfg.dir("data"), records, schema, cfg.provenance_line());
  write_json(cfg.run_dir() / "config.json", cfg.json());
  log << "generate: " << records.size() << " records in " << cfg.dir("data") << '\n';
}

void cmd_train(const RunConfig& cfg, std::ostream& log) {
  RunLock lock(cfg.run_dir());
  auto schema = AttributeSchema::default_schema();
  auto data = load_run_dataset(cfg, schema);
  const auto dir = cfg.dir("models");
  fs::create_directories(dir);
  const auto prov = cfg.provenance("train");
  Json report;

  std::optional<AttributeClassifierModel> aux, judge;
  auto classifiers = [&] {
    if (aux) return;
    if (checkpoint_exists(dir, "aux_classifier") && checkpoint_exists(dir, "judge_classifier")) {
      aux = load_attribute_classifier(dir, "aux_classifier", schema, cfg.classifier(1));
      judge = load_attribute_classifier(dir, "judge_classifier", schema, cfg.classifier(2));
      return;
    }
    log << "train: attribute classifiers\n";
    aux = train_attribute_classifier(data, schema, cfg.classifier(1));
    judge = train_attribute_classifier(data, schema, cfg.classifier(2));
    save_attribute_classifier(*aux, dir, "aux_classifier", prov);
    save_attribute_classifier(*judge, dir, "judge_classifier", prov);
  };

  const auto rs = RandomSelectionConfig::with_default_sets(schema);
  const std::vector<std::pair<std::string, std::vector<int>>> generators{
      {kMainGenerator, {}}, {kGeneratorS1, rs.s1}, {kGeneratorS2, rs.s2}};
  for (const auto& [name, subset] : generators) {
    if (!checkpoint_exists(dir, name)) {
      classifiers();
      log << "train: " << name << '\n';
      auto gc = cfg.generator(name == kMainGenerator ? "main" : name);
      gc.attribute_subset = subset;
      auto g = train_generator(data, schema, cfg.dataset().seed, gc, *aux, *judge);
      save_generator(g, dir, name, prov);
    }
    auto g = load_generator(dir, name, schema);
    report[name] = g.metadata().value("metrics", Json::object());
  }

  Json calibration;
  for (const auto& tag : cfg.roster()) {
    const auto name = verifier_name(tag);
    if (!checkpoint_exists(dir, name)) {
      log << "train: " << name << '\n';
      save_verifier(train_verifier(data, tag, cfg.verifier(tag)), dir, name, schema, prov);
    }
    auto v = load_verifier(dir, name, schema, Access::WhiteBox);
    const auto& c = cfg.json()["calibration"];
    auto cal = calibrate_threshold(
        v, data, impostor_pairs(data, Split::Test, c["impostor_cap"], derive_seed(cfg.seed(), "impostors")),
        genuine_pairs(data, Split::Test, c["genuine_cap"], derive_seed(cfg.seed(), "genuines")),
        c["fpr_level"]);
    calibration[tag] = cal.to_json();
    report[name] = v.metadata().value("metrics", Json::object());
    if (tag == cfg.surrogate() && !checkpoint_exists(dir, kAttributeHead)) {
      log << "train: attribute head on " << tag << '\n';
      save_attribute_head(train_attribute_head(v, data, schema, cfg.attribute_head()), dir,
                          kAttributeHead, prov);
    }
  }
  calibration["provenance"] = prov;
  write_json(dir / "calibration.json", calibration);
  report["attribute_head"] =
      read_json(dir / (std::string(kAttributeHead) + ".json"), "train").at("accuracies");
  report["provenance"] = prov;
  write_json(dir / "training.json", report);
  log << "train: models in " << dir << '\n';
}

namespace {

void write_ranking_rows(CsvWriter& csv, const AttackPair& p, const std::string& verifier,
                        const AttributeRanking& r, const AttributeSchema& schema, long queries) {
  std::vector<std::string> names, scores;
  for (int a : r.order) names.push_back(schema.names[static_cast<std::size_t>(a)]);
  for (double s : r.ordered_scores()) scores.push_back(fmt9(s));
  csv.row({std::to_string(p.pair_id), std::to_string(p.source), to_string(r.method), verifier,
           join(names, ";"), join(scores, ";"), std::to_string(queries)});
}

std::string ranking_file(RankMethod m, const std::string& verifier) {
  return "rank_" + std::string(m == RankMethod::CS ? "cs" : "ps") + "_" + verifier + ".csv";
}

std::vector<AttributeRanking> read_rankings(const RunConfig& cfg, RankMethod m,
                                            const std::string& verifier,
                                            const AttributeSchema& schema) {
  const auto path = cfg.dir("rankings") / ranking_file(m, verifier);
  require(path, "rank");
  auto rows = read_csv(path);
  std::vector<AttributeRanking> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& row = rows[i];
    AttributeRanking r;
    r.method = m;
    r.scores.assign(schema.size(), 0.0);
    std::stringstream names(row.at(4)), scores(row.at(5));
    std::string name, score;
    while (std::getline(names, name, ';') && std::getline(scores, score, ';')) {
      const int a = schema.index_of(name);
      r.order.push_back(a);
      r.scores[static_cast<std::size_t>(a)] = std::stod(score);
    }
    out.push_back(r);
  }
  return out;
}

std::vector<AttackPair> read_pairs(const RunConfig& cfg) {
  const auto path = cfg.dir("rankings") / "pairs.csv";
  require(path, "rank");
  auto rows = read_csv(path);
  std::vector<AttackPair> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    out.push_back({std::stol(rows[i].at(0)), std::stoul(rows[i].at(1)), std::stoul(rows[i].at(2))});
  }
  return out;
}

}  // namespace

void cmd_rank(const RunConfig& cfg, std::ostream& log) {
  RunLock lock(cfg.run_dir());
  auto schema = AttributeSchema::default_schema();
  auto data = load_run_dataset(cfg, schema);
  auto models = load_models(cfg, schema);
  const auto dir = cfg.dir("rankings");
  fs::create_directories(dir);
  auto pairs = select_attack_pairs(data, cfg.json()["attack"]["n_pairs"],
                                   derive_seed(cfg.seed(), "pairs"));
  {
    CsvWriter csv(dir / "pairs.csv", cfg,
                  {"pair_id", "source_index", "target_index", "source_identity", "target_identity"});
    for (const auto& p : pairs) {
      csv.row({std::to_string(p.pair_id), std::to_string(p.source), std::to_string(p.target),
               std::to_string(data[p.source].identity_id), std::to_string(data[p.target].identity_id)});
    }
  }
  const std::vector<std::string> header{"pair_id", "source_index", "method", "verifier",
                                        "order", "scores", "queries"};
  const auto& sur = models.verifiers.at(cfg.surrogate());
  CsvWriter cs(dir / ranking_file(RankMethod::CS, cfg.surrogate()), cfg, header);
  CsvWriter ps(dir / ranking_file(RankMethod::PS, cfg.surrogate()), cfg, header);
  const auto bb = models.verifiers.at(cfg.blackbox_target()).as_blackbox();
  CsvWriter bcs(dir / ranking_file(RankMethod::CS, cfg.blackbox_target()), cfg, header);
  for (const auto& p : pairs) {
    const auto& r = data[p.source];
    sur.reset_log();
    auto rc = rank_by_cs(r.image, r.attributes, models.generator, sur);
    write_ranking_rows(cs, p, cfg.surrogate(), rc, schema, sur.log().embed_queries);
    auto rp = rank_by_ps(r.image, r.attributes, models.generator, models.attribute_head);
    write_ranking_rows(ps, p, cfg.surrogate(), rp, schema, 0);
    bb.reset_log();
    auto rb = rank_by_cs(r.image, r.attributes, models.generator, bb);
    write_ranking_rows(bcs, p, cfg.blackbox_target(), rb, schema, bb.log().embed_queries);
  }
  log << "rank: " << pairs.size() << " images ranked by CS and PS in " << dir << '\n';
}

namespace {

void write_attack_records(const RunConfig& cfg, const std::string& method, AttackType type,
                          const std::vector<AttackOutcome>& outcomes) {
  const auto dir = cfg.dir("attacks");
  fs::create_directories(dir);
  const auto stem = dir / attack_file_stem(method, type);
  auto jl = stem;
  jl += ".jsonl";
  auto pt = stem;
  pt += ".pt";
  std::ofstream out(jl, std::ios::binary);
  out << Json{{"provenance", cfg.provenance("attack")}}.dump() << '\n';
  std::vector<torch::Tensor> imgs;
  for (const auto& o : outcomes) {
    out << o.to_json().dump() << '\n';
    imgs.push_back(o.adversarial.to(torch::kFloat32));
  }
  auto stacked = torch::stack(imgs).contiguous();
  torch::save(stacked, pt.string());
}

}  // namespace

void cmd_attack(const RunConfig& cfg, std::ostream& log) {
  RunLock lock(cfg.run_dir());
  auto schema = AttributeSchema::default_schema();
  auto data = load_run_dataset(cfg, schema);
  auto models = load_models(cfg, schema);
  auto pairs = read_pairs(cfg);
  auto cs = read_rankings(cfg, RankMethod::CS, cfg.surrogate(), schema);
  auto ps = read_rankings(cfg, RankMethod::PS, cfg.surrogate(), schema);
  auto bcs = read_rankings(cfg, RankMethod::CS, cfg.blackbox_target(), schema);
  const auto& sur = models.verifiers.at(cfg.surrogate());

  Json stats;
  auto mark = std::chrono::steady_clock::now();
  auto finish = [&](std::vector<AttackOutcome>& outs, const std::string& method, AttackType type) {
    const auto now = std::chrono::steady_clock::now();
    stats["seconds"][attack_file_stem(method, type)] =
        std::chrono::duration<double>(now - mark).count();
    for (std::size_t i = 0; i < outs.size(); ++i) {
      outs[i].method = method;
      outs[i].source_index = static_cast<long>(pairs[i].source);
      outs[i].target_index = type == AttackType::Impersonation ? static_cast<long>(pairs[i].target) : -1;
    }
    write_attack_records(cfg, method, type, outs);
    long ok = 0;
    for (const auto& o : outs) ok += o.success;
    log << "attack: " << method << " " << to_string(type) << " " << ok << "/" << outs.size()
        << " succeeded at the source\n";
    mark = std::chrono::steady_clock::now();
  };

  for (AttackType type : cfg.attack_types()) {
    const bool imp = type == AttackType::Impersonation;
    for (int n_attr : {1, 2}) {
      for (RankMethod m : {RankMethod::CS, RankMethod::PS}) {
        const auto& ranks = m == RankMethod::CS ? cs : ps;
        std::vector<WhiteboxRequest> reqs;
        for (std::size_t i = 0; i < pairs.size(); ++i) {
          const auto& r = data[pairs[i].source];
          WhiteboxRequest q{r.image, r.attributes, ranks[i], std::nullopt,
                            static_cast<long>(pairs[i].source), static_cast<long>(pairs[i].target)};
          if (imp) q.target = data[pairs[i].target].image;
          reqs.push_back(q);
        }
        auto outs = whitebox_attack_batch(reqs, models.generator, sur, cfg.whitebox(type, n_attr));
        const std::string name = std::string("saa-") + (m == RankMethod::CS ? "cs" : "ps") + "-" +
                                 std::to_string(n_attr);
        finish(outs, name, type);
      }
    }

    {
      std::vector<AttackOutcome> outs;
      const auto rsc = cfg.random_selection(schema, type);
      for (const auto& p : pairs) {
        const auto& r = data[p.source];
        std::optional<Image> tgt;
        if (imp) tgt = data[p.target].image;
        outs.push_back(random_selection_attack(r.image, r.attributes, tgt, models.generator_s1,
                                               models.generator_s2, sur, rsc));
      }
      finish(outs, "random-selection", type);
    }

    for (const auto& method : cfg.gradient_methods()) {
      std::vector<torch::Tensor> xs, refs;
      for (const auto& p : pairs) {
        xs.push_back(data[p.source].image);
        refs.push_back(imp ? data[p.target].image : data[p.source].image);
      }
      auto outs = gradient_attack_batch(torch::stack(xs), torch::stack(refs), sur,
                                        cfg.gradient(method, type));
      finish(outs, method, type);
    }

    {
      const auto bc = cfg.blackbox(type);
      const std::uint64_t order_seed = cfg.json()["attack"]["blackbox"]["random_order_seed"];
      auto request = [&](std::size_t i) {
        const auto& r = data[pairs[i].source];
        BlackboxRequest q{r.image, r.attributes, std::nullopt, static_cast<long>(pairs[i].source),
                          static_cast<long>(pairs[i].target)};
        if (imp) q.target = data[pairs[i].target].image;
        return q;
      };
      auto record_access = [&](const Verifier& bb, const std::string& method) {
        stats["blackbox_access"][attack_file_stem(method, type)] = {
            {"gradient_calls", bb.log().gradient_calls.load()},
            {"parameter_access", bb.log().parameter_access.load()},
            {"embed_queries", bb.log().embed_queries.load()}};
      };
      {
        const auto bb = models.verifiers.at(cfg.blackbox_target()).as_blackbox();
        std::vector<AttackOutcome> ranked;
        for (std::size_t i = 0; i < pairs.size(); ++i) {
          ranked.push_back(blackbox_attack(request(i), models.generator, bb, bcs[i], bc));
        }
        record_access(bb, "saa-blackbox");
        finish(ranked, "saa-blackbox", type);
      }
      {
        const auto bb = models.verifiers.at(cfg.blackbox_target()).as_blackbox();
        std::vector<AttackOutcome> random;
        for (std::size_t i = 0; i < pairs.size(); ++i) {
          random.push_back(improved_random_blackbox(request(i), models.generator, bb, bc,
                                                    derive_seed(order_seed, "order")));
        }
        record_access(bb, "random-blackbox");
        finish(random, "random-blackbox", type);
      }
    }
  }
  write_json(cfg.dir("attacks") / "run_stats.json", stats);
}

namespace {

struct MethodSummary {
  std::map<std::string, double> asr;  // by verifier tag
  double mse = 0.0;
  double ssim = 0.0;
  long n = 0;
};

}  // namespace

void cmd_evaluate(const RunConfig& cfg, std::ostream& log) {
  RunLock lock(cfg.run_dir());
  auto schema = AttributeSchema::default_schema();
  auto data = load_run_dataset(cfg, schema);
  auto models = load_models(cfg, schema);
  auto pairs = read_pairs(cfg);
  const auto dir = cfg.dir("reports");
  fs::create_directories(dir);
  const auto roster = cfg.roster();
  const auto methods = attack_methods(cfg);

  {
    CsvWriter csv(dir / "calibration.csv", cfg,
                  {"verifier", "T", "T_s", "fpr_level", "impostor_pairs", "genuine_pairs",
                   "genuine_accept_rate"});
    for (const auto& tag : roster) {
      const auto& c = models.calibrations.at(tag);
      csv.row({tag, fmt(c.T), fmt(c.T_s), fmt(c.fpr_level), std::to_string(c.impostor_pairs),
               std::to_string(c.genuine_pairs), fmt(c.genuine_accept_rate)});
    }
  }

  std::vector<torch::Tensor> xs, tgts;
  for (const auto& p : pairs) {
    xs.push_back(data[p.source].image);
    tgts.push_back(data[p.target].image);
  }
  const auto x = torch::stack(xs), xt = torch::stack(tgts);

  Json summary;
  summary["provenance"] = cfg.provenance("evaluate");
  std::vector<std::string> header{"method"};
  for (const auto& t : roster) header.push_back(t);
  header.push_back("n");

  CsvWriter quality(dir / "quality.csv", cfg, {"method", "type", "n", "mse", "ssim"});
  std::map<std::string, std::pair<double, double>> pooled_quality;  // sum mse, sum ssim
  std::map<std::string, long> pooled_n;

  for (AttackType type : cfg.attack_types()) {
    const std::string tname = to_string(type);
    const auto& ref = type == AttackType::Impersonation ? xt : x;
    CsvWriter all(dir / ("transfer_" + tname + ".csv"), cfg, header);
    auto succ_header = header;
    succ_header.back() = "n_successful";
    CsvWriter succ(dir / ("transfer_successful_" + tname + ".csv"), cfg, succ_header);
    std::map<std::string, AttackRecordSet> sets;
    for (const auto& m : methods) {
      auto s = load_attack_records(cfg, m, type);
      std::vector<std::string> row{m};
      Json asr;
      for (const auto& tag : roster) {
        const double a = attack_success_rate(type, models.verifiers.at(tag), s.adversarial, ref,
                                             models.calibrations.at(tag));
        row.push_back(fmt(a));
        asr[tag] = a;
      }
      row.push_back(std::to_string(s.adversarial.size(0)));
      all.row(row);
      summary["asr"][tname][m] = asr;

      // Successful-at-source subset; the source is the verifier the method attacked.
      const auto source = m.rfind("blackbox") != std::string::npos ? cfg.blackbox_target()
                                                                   : cfg.surrogate();
      AdversarialSet set{source, type, s.adversarial, ref};
      auto kept = successful_subset(set, models.verifiers.at(source), models.calibrations.at(source));
      std::vector<const Verifier*> vs;
      for (const auto& tag : roster) vs.push_back(&models.verifiers.at(tag));
      auto tm = transfer_matrix({kept}, vs, models.calibrations);
      std::vector<std::string> srow{m};
      for (double c : tm.cells[0]) srow.push_back(fmt(c));
      srow.push_back(std::to_string(kept.adversarial.size(0)));
      succ.row(srow);

      const auto ss = ssim_batch(s.adversarial, x);
      double sm = 0, ssum = 0;
      for (long i = 0; i < x.size(0); ++i) {
        sm += mse(s.adversarial[i], x[i]);
        ssum += ss[static_cast<std::size_t>(i)];
      }
      const long n = x.size(0);
      quality.row({m, tname, std::to_string(n), fmt(sm / n), fmt(ssum / n)});
      pooled_quality[m].first += sm;
      pooled_quality[m].second += ssum;
      pooled_n[m] += n;
      sets.emplace(m, std::move(s));
    }

    // Paired comparison of ranked and random attribute orders under the
    // black-box budget.
    {
      const auto& a = sets.at("saa-blackbox").outcomes;
      const auto& b = sets.at("random-blackbox").outcomes;
      long wins = 0, losses = 0, sa = 0, sb = 0, qa = 0, qb = 0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        sa += a[i].success;
        sb += b[i].success;
        qa += a[i].queries;
        qb += b[i].queries;
        wins += a[i].success && !b[i].success;
        losses += !a[i].success && b[i].success;
      }
      const double n = static_cast<double>(a.size());
      summary["blackbox"][tname] = {{"ranked_asr", sa / n},   {"random_asr", sb / n},
                                    {"wins", wins},           {"losses", losses},
                                    {"sign_test_p", sign_test_p(wins, losses)},
                                    {"ranked_mean_queries", qa / n},
                                    {"random_mean_queries", qb / n}};
    }

    // Cosine shift on the surrogate for the single-attribute CS attack.
    {
      const auto& s = sets.at("saa-cs-1");
      const auto& sur = models.verifiers.at(cfg.surrogate());
      auto e_ref = sur.embed_batch(ref);
      auto before = pairwise_cosine(sur.embed_batch(x), e_ref);
      auto after = pairwise_cosine(sur.embed_batch(s.adversarial), e_ref);
      std::vector<double> b(before.data_ptr<double>(), before.data_ptr<double>() + before.numel());
      std::vector<double> a(after.data_ptr<double>(), after.data_ptr<double>() + after.numel());
      auto shift = similarity_shift_histogram(b, a, type, models.calibrations.at(cfg.surrogate()),
                                              cfg.json()["evaluate"]["histogram_bins"]);
      CsvWriter csv(dir / ("similarity_" + tname + ".csv"), cfg, {"pair_id", "before", "after"});
      for (std::size_t i = 0; i < b.size(); ++i) {
        csv.row({std::to_string(pairs[i].pair_id), fmt(b[i]), fmt(a[i])});
      }
      CsvWriter hist(dir / ("similarity_hist_" + tname + ".csv"), cfg,
                     {"bin_low", "bin_high", "before", "after"});
      for (std::size_t k = 0; k < shift.before.size(); ++k) {
        hist.row({fmt(shift.edges[k]), fmt(shift.edges[k + 1]), std::to_string(shift.before[k]),
                  std::to_string(shift.after[k])});
      }
      summary["similarity_shift"][tname] = {
          {"crossing_fraction", shift.crossing_fraction},
          {"threshold_cos", models.calibrations.at(cfg.surrogate()).T_s}};
    }
  }
  for (const auto& [m, q] : pooled_quality) {
    summary["quality"][m] = {{"mse", q.first / pooled_n[m]}, {"ssim", q.second / pooled_n[m]},
                             {"n", pooled_n[m]}};
  }

  // Grad-CAM on originals and single-attribute adversaries, scored against
  // the paired target identity.
  const int n_cam = std::min(cfg.json()["evaluate"]["gradcam_images"].get<int>(), static_cast<int>(pairs.size()));
  if (n_cam > 0) {
    const auto& sur = models.verifiers.at(cfg.surrogate());
    const AttackType cam_type = cfg.attack_types().front();
    auto s = load_attack_records(cfg, "saa-cs-1", cam_type);
    std::vector<torch::Tensor> tiles;
    for (int i = 0; i < n_cam; ++i) {
      auto ref = sur.embed(xt[i]);
      tiles.push_back(x[i]);
      tiles.push_back(colorize(gradcam(sur, x[i], ref)));
      tiles.push_back(s.adversarial[i]);
      tiles.push_back(colorize(gradcam(sur, s.adversarial[i], ref)));
    }
    write_png(dir / "gradcam.png", tile_images(torch::stack(tiles), 4),
              png_text(cfg, "x | cam(x) | adversarial | cam(adversarial)"));
  }
  write_json(dir / "summary.json", summary);
  log << "evaluate: reports in " << dir << '\n';
}

namespace {

torch::Tensor bar_chart(const std::vector<long>& a, const std::vector<long>& b, int height) {
  const auto bins = static_cast<long>(a.size());
  const long width = bins * 6;
  auto img = torch::ones({3, height, width});
  long peak = 1;
  for (auto v : a) peak = std::max(peak, v);
  for (auto v : b) peak = std::max(peak, v);
  for (long k = 0; k < bins; ++k) {
    const long ha = a[static_cast<std::size_t>(k)] * (height - 1) / peak;
    const long hb = b[static_cast<std::size_t>(k)] * (height - 1) / peak;
    for (long y = 0; y < ha; ++y) {
      for (long dx = 0; dx < 2; ++dx) {
        img.index_put_({torch::indexing::Slice(), height - 1 - y, k * 6 + 1 + dx},
                       torch::tensor({0.2f, 0.3f, 0.9f}));
      }
    }
    for (long y = 0; y < hb; ++y) {
      for (long dx = 0; dx < 2; ++dx) {
        img.index_put_({torch::indexing::Slice(), height - 1 - y, k * 6 + 3 + dx},
                       torch::tensor({0.9f, 0.2f, 0.2f}));
      }
    }
  }
  return img;
}

}  // namespace

void cmd_report(const RunConfig& cfg, std::ostream& log) {
  RunLock lock(cfg.run_dir());
  const auto rep = cfg.dir("reports");
  require(rep / "summary.json", "evaluate");
  auto summary = read_json(rep / "summary.json", "evaluate");
  auto schema = AttributeSchema::default_schema();
  auto data = load_run_dataset(cfg, schema);
  auto pairs = read_pairs(cfg);
  const auto out = rep / "tables";
  const auto fig = rep / "figures";
  fs::create_directories(out);
  fs::create_directories(fig);
  const auto methods = attack_methods(cfg);
  const auto targets = cfg.transfer_targets();

  // Transfer tables: one row per method and attack type, one column per model.
  {
    std::vector<std::string> header{"method", "type"};
    for (const auto& t : cfg.roster()) header.push_back(t);
    header.push_back("mean_transfer");
    CsvWriter csv(out / "transfer.csv", cfg, header);
    for (AttackType type : cfg.attack_types()) {
      const auto tname = to_string(type);
      for (const auto& m : methods) {
        std::vector<std::string> row{m, tname};
        const auto& asr = summary["asr"][tname][m];
        for (const auto& t : cfg.roster()) row.push_back(fmt(asr[t].get<double>() * 100.0));
        double mean = 0;
        for (const auto& t : targets) mean += asr[t].get<double>();
        row.push_back(fmt(mean / targets.size() * 100.0));
        csv.row(row);
      }
    }
  }
  {
    CsvWriter csv(out / "quality.csv", cfg, {"method", "mse", "ssim", "n"});
    for (const auto& m : methods) {
      const auto& q = summary["quality"][m];
      csv.row({m, fmt(q["mse"]), fmt(q["ssim"]), std::to_string(q["n"].get<long>())});
    }
  }
  {
    CsvWriter csv(out / "blackbox.csv", cfg,
                  {"type", "ranked_asr", "random_asr", "wins", "losses", "sign_test_p",
                   "ranked_mean_queries", "random_mean_queries"});
    for (AttackType type : cfg.attack_types()) {
      const auto& b = summary["blackbox"][to_string(type)];
      csv.row({to_string(type), fmt(b["ranked_asr"]), fmt(b["random_asr"]),
               std::to_string(b["wins"].get<long>()), std::to_string(b["losses"].get<long>()),
               fmt(b["sign_test_p"]), fmt(b["ranked_mean_queries"]), fmt(b["random_mean_queries"])});
    }
  }

  // Side-by-side grids: originals on the first row, then one row per method.
  const long n_show = std::min<long>(8, static_cast<long>(pairs.size()));
  for (AttackType type : cfg.attack_types()) {
    std::vector<torch::Tensor> tiles;
    for (long i = 0; i < n_show; ++i) tiles.push_back(data[pairs[static_cast<std::size_t>(i)].source].image);
    if (type == AttackType::Impersonation) {
      for (long i = 0; i < n_show; ++i) tiles.push_back(data[pairs[static_cast<std::size_t>(i)].target].image);
    }
    for (const auto& m : methods) {
      auto s = load_attack_records(cfg, m, type);
      for (long i = 0; i < n_show; ++i) tiles.push_back(s.adversarial[i]);
    }
    write_png(fig / ("grid_" + to_string(type) + ".png"),
              tile_images(torch::stack(tiles), static_cast<int>(n_show)),
              png_text(cfg, "rows: originals, " +
                                std::string(type == AttackType::Impersonation ? "targets, " : "") +
                                join(methods, ", ")));
    auto hist = read_csv(rep / ("similarity_hist_" + to_string(type) + ".csv"));
    std::vector<long> before, after;
    for (std::size_t k = 1; k < hist.size(); ++k) {
      before.push_back(std::stol(hist[k][2]));
      after.push_back(std::stol(hist[k][3]));
    }
    write_png(fig / ("similarity_" + to_string(type) + ".png"), bar_chart(before, after, 64),
              png_text(cfg, "cosine histogram over [-1, 1]: blue before, red after"));
  }

  std::ofstream md(rep / "report.md", std::ios::binary);
  md << "<!-- " << cfg.provenance_line() << " -->\n";
  md << "# Run " << cfg.hash() << "\n\n";
  md << "Surrogate: " << cfg.surrogate() << "; transfer targets: " << join(targets, ", ")
     << "; black-box target: " << cfg.blackbox_target() << ".\n\n";
  md << "| method | type | " << join(cfg.roster(), " | ") << " |\n|---|---|";
  for (std::size_t i = 0; i < cfg.roster().size(); ++i) md << "---|";
  md << '\n';
  for (AttackType type : cfg.attack_types()) {
    for (const auto& m : methods) {
      md << "| " << m << " | " << to_string(type) << " |";
      for (const auto& t : cfg.roster()) {
        md << ' ' << fmt(summary["asr"][to_string(type)][m][t].get<double>() * 100.0) << " |";
      }
      md << '\n';
    }
  }
  md << "\n| method | MSE | SSIM |\n|---|---|---|\n";
  for (const auto& m : methods) {
    md << "| " << m << " | " << fmt(summary["quality"][m]["mse"]) << " | "
       << fmt(summary["quality"][m]["ssim"]) << " |\n";
  }
  md << "\nFigures: figures/grid_*.png, figures/similarity_*.png, gradcam.png.\n";
  log << "report: tables and figures in " << rep << '\n';
}

void run_all(const RunConfig& cfg, std::ostream& log) {
  cmd_generate(cfg, log);
  cmd_train(cfg, log);
  cmd_rank(cfg, log);
  cmd_attack(cfg, log);
  cmd_evaluate(cfg, log);
  cmd_report(cfg, log);
}

int run_command(const std::string& command, const RunConfig& cfg, std::ostream& log,
                std::ostream& err) {
  torch::set_num_threads(1);
  try {
    if (command == "generate") cmd_generate(cfg, log);
    else if (command == "train") cmd_train(cfg, log);
    else if (command == "rank") cmd_rank(cfg, log);
    else if (command == "attack") cmd_attack(cfg, log);
    else if (command == "evaluate") cmd_evaluate(cfg, log);
    else if (command == "report") cmd_report(cfg, log);
    else if (command == "all") run_all(cfg, log);
    else {
      err << "unknown command: " << command << '\n';
      return 1;
    }
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const MissingArtifact& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const TrainingError& e) {
    err << "training failed: " << e.what() << '\n' << e.diagnostics().dump(2) << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

}  // namespace semattack
