// End-to-end acceptance run: trains (or reuses) the default configuration,
// runs every stage, and prints one PASS/FAIL line per criterion.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "CLI11.hpp"

#include "semattack/pipeline.hpp"
#include "semattack/significance.hpp"
#include "support/oracles.hpp"

using namespace semattack;
namespace fs = std::filesystem;
using Json = nlohmann::json;

namespace {

// Tolerances.
constexpr double kImpersonationAsrMin = 0.90;
constexpr double kDodgingAsrMin = 0.95;
constexpr int kMaxIterations = 300;
constexpr double kWhiteboxSecondsMax = 1800.0;
constexpr long kMinPairs = 100;
constexpr double kSignTestAlpha = 0.05;
constexpr long kMinQualityImages = 200;
constexpr double kOracleTol = 1e-6;
constexpr double kDualityTol = 1e-9;
constexpr double kFiniteDiffRelTol = 1e-3;
constexpr double kFiniteDiffStep = 1e-3;
constexpr int kFiniteDiffConfigs = 5;

struct Line {
  int id;
  bool pass;
  std::string detail;
};

std::string num(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Json read_json(const fs::path& p) {
  std::ifstream in(p);
  return Json::parse(in);
}

struct Run {
  RunConfig cfg;
  AttributeSchema schema;
  std::vector<DatasetRecord> data;
  TrainedModels models;
  std::vector<AttackPair> pairs;
  Json summary;
  Json stats;
  torch::Tensor x, xt;

  const torch::Tensor& reference(AttackType t) const { return t == AttackType::Impersonation ? xt : x; }
  double asr(AttackType t, const std::string& method, const std::string& tag) const {
    return summary.at("asr").at(to_string(t)).at(method).at(tag).get<double>();
  }
};

std::vector<AttackPair> read_pairs(const RunConfig& cfg) {
  std::vector<AttackPair> out;
  auto rows = read_csv(cfg.dir("rankings") / "pairs.csv");
  for (std::size_t i = 1; i < rows.size(); ++i) {
    out.push_back({std::stol(rows[i][0]), std::stoul(rows[i][1]), std::stoul(rows[i][2])});
  }
  return out;
}

// ---------------------------------------------------------------------------

Line white_box_asr(const Run& r) {
  const auto sur = r.cfg.surrogate();
  const double imp = r.asr(AttackType::Impersonation, "saa-cs-1", sur);
  const double dod = r.asr(AttackType::Dodging, "saa-cs-1", sur);
  int max_iter = 0;
  long n = 0;
  for (auto t : {AttackType::Impersonation, AttackType::Dodging}) {
    for (const auto& o : load_attack_records(r.cfg, "saa-cs-1", t).outcomes) {
      max_iter = std::max(max_iter, o.iterations);
      ++n;
    }
  }
  double secs = 0;
  for (auto t : {AttackType::Impersonation, AttackType::Dodging}) {
    secs += r.stats.at("seconds").at(attack_file_stem("saa-cs-1", t)).get<double>();
  }
  const long pairs = static_cast<long>(r.pairs.size());
  const bool pass = imp >= kImpersonationAsrMin && dod >= kDodgingAsrMin && max_iter <= kMaxIterations &&
                    secs <= kWhiteboxSecondsMax && pairs >= kMinPairs;
  return {1, pass,
          "impersonation " + num(imp) + " (>= " + num(kImpersonationAsrMin, 2) + "), dodging " + num(dod) +
              " (>= " + num(kDodgingAsrMin, 2) + "), pairs " + std::to_string(pairs) + ", max iterations " +
              std::to_string(max_iter) + ", " + num(secs, 1) + " s"};
}

Line ranked_vs_random_blackbox(const Run& r) {
  long wins = 0, losses = 0, n = 0, sa = 0, sb = 0;
  bool same_budget = true;
  const auto bc = r.cfg.blackbox(AttackType::Dodging);
  const long cap = static_cast<long>(bc.grid.values.size() + 1) * (bc.max_attributes < 0 ? 8 : bc.max_attributes);
  for (auto t : r.cfg.attack_types()) {
    const auto a = load_attack_records(r.cfg, "saa-blackbox", t).outcomes;
    const auto b = load_attack_records(r.cfg, "random-blackbox", t).outcomes;
    for (std::size_t i = 0; i < a.size(); ++i) {
      sa += a[i].success;
      sb += b[i].success;
      wins += a[i].success && !b[i].success;
      losses += !a[i].success && b[i].success;
      // one config drives both searches, so both stop at success or at the same cap
      same_budget &= a[i].queries <= cap && b[i].queries <= cap;
      ++n;
    }
  }
  const double p = sign_test_p(wins, losses);
  const double ra = static_cast<double>(sa) / n, rb = static_cast<double>(sb) / n;
  const bool pass = n >= kMinPairs && ra > rb && p < kSignTestAlpha && same_budget;
  return {2, pass,
          "ranked " + num(ra) + " vs random " + num(rb) + " over " + std::to_string(n) + " paired attacks, " +
              std::to_string(wins) + " wins / " + std::to_string(losses) + " losses, sign-test p " +
              num(p, 6) + ", query cap " + std::to_string(cap)};
}

Line transfer_vs_random_selection(const Run& r) {
  double saa = 0, rs = 0;
  int cells = 0;
  for (auto t : r.cfg.attack_types()) {
    for (const auto& tag : r.cfg.transfer_targets()) {
      saa += r.asr(t, "saa-cs-1", tag);
      rs += r.asr(t, "random-selection", tag);
      ++cells;
    }
  }
  saa /= cells;
  rs /= cells;
  return {3, saa > rs,
          "mean transfer ASR over " + std::to_string(cells) + " (target, type) cells: saa-cs-1 " + num(saa) +
              " vs random-selection " + num(rs)};
}

Line quality_ordering(const Run& r) {
  const auto& q = r.summary.at("quality");
  auto pooled = [&](const std::vector<std::string>& methods) {
    double m = 0, s = 0;
    long n = 0;
    for (const auto& name : methods) {
      const long k = q.at(name).at("n").get<long>();
      m += q.at(name).at("mse").get<double>() * k;
      s += q.at(name).at("ssim").get<double>() * k;
      n += k;
    }
    return std::tuple<double, double, long>{m / n, s / n, n};
  };
  auto [m1, s1, n1] = pooled({"saa-cs-1", "saa-ps-1"});
  auto [m2, s2, n2] = pooled({"saa-cs-2", "saa-ps-2"});
  bool pass = n1 >= kMinQualityImages && n2 >= kMinQualityImages && m1 < m2 && s1 > s2;
  std::string detail = "single mse " + num(m1, 5) + " ssim " + num(s1) + " (n " + std::to_string(n1) +
                       "); two-attribute mse " + num(m2, 5) + " ssim " + num(s2);
  for (const auto& g : r.cfg.gradient_methods()) {
    auto [mg, sg, ng] = pooled({g});
    pass &= m1 < mg && s1 > sg && ng >= kMinQualityImages;
    detail += "; " + g + " mse " + num(mg, 5) + " ssim " + num(sg);
  }
  return {4, pass, detail};
}

Line metric_oracles(const Run& r) {
  double worst_mse = 0, worst_ssim = 0, worst_T = 0, worst_dual = 0;
  long asr_mismatch = 0, ts_mismatch = 0, rule_mismatch = 0, checked = 0;
  for (auto t : r.cfg.attack_types()) {
    const auto& ref = r.reference(t);
    for (const auto& m : {std::string("saa-cs-1"), std::string("PGD"), std::string("saa-blackbox")}) {
      const auto rec = load_attack_records(r.cfg, m, t);
      for (const auto& tag : r.cfg.roster()) {
        const auto& v = r.models.verifiers.at(tag);
        const auto& cal = r.models.calibrations.at(tag);
        long hits = 0;
        const long n = rec.adversarial.size(0);
        for (long i = 0; i < n; ++i) {
          const auto ea = v.embed(rec.adversarial[i]), er = v.embed(ref[i]);
          const double c = oracle::cosine(ea, er);
          hits += t == AttackType::Impersonation ? c >= cal.T_s : c < cal.T_s;
          // unit-normalized in double, squared distance is 2 - 2 cos
          auto ua = ea.to(torch::kFloat64), ub = er.to(torch::kFloat64);
          ua = ua / std::sqrt(oracle::sum_product(ua, ua));
          ub = ub / std::sqrt(oracle::sum_product(ub, ub));
          const double d = oracle::squared_distance(ua, ub);
          worst_dual = std::max(worst_dual, std::abs(d - (2 - 2 * oracle::cosine(ua, ub))));
          const double dist = embedding_distance(ea, er);
          const bool by_cos = t == AttackType::Impersonation ? c >= cal.T_s : c < cal.T_s;
          if (std::abs(dist - cal.T) > 1e-6) rule_mismatch += attack_succeeded(t, dist, cal.T) != by_cos;
        }
        const double lib = attack_success_rate(t, v, rec.adversarial, ref, cal);
        asr_mismatch += std::llround(lib * n) != hits;
        ++checked;
      }
      const auto ss = ssim_batch(rec.adversarial, r.x);
      for (long i = 0; i < rec.adversarial.size(0); ++i) {
        worst_mse = std::max(worst_mse, std::abs(mse(rec.adversarial[i], r.x[i]) -
                                                 oracle::mse(rec.adversarial[i], r.x[i])));
        worst_ssim = std::max(worst_ssim, std::abs(ss[static_cast<std::size_t>(i)] -
                                                   oracle::ssim(rec.adversarial[i], r.x[i])));
      }
    }
  }
  const auto& c = r.cfg.json()["calibration"];
  const auto imps = impostor_pairs(r.data, Split::Test, c["impostor_cap"].get<std::size_t>(),
                                   derive_seed(r.cfg.seed(), "impostors"));
  for (const auto& tag : r.cfg.roster()) {
    const auto& v = r.models.verifiers.at(tag);
    const auto& cal = r.models.calibrations.at(tag);
    std::map<std::size_t, torch::Tensor> emb;
    auto e = [&](std::size_t i) -> const torch::Tensor& {
      auto it = emb.find(i);
      if (it == emb.end()) it = emb.emplace(i, v.embed(r.data[i].image)).first;
      return it->second;
    };
    std::vector<double> d;
    for (const auto& [a, b] : imps) d.push_back(oracle::squared_distance(e(a), e(b)));
    worst_T = std::max(worst_T, std::abs(oracle::threshold(d, c["fpr_level"].get<double>()) - cal.T));
    ts_mismatch += cal.T_s != 1.0 - cal.T / 2.0;
  }
  const bool pass = asr_mismatch == 0 && worst_mse <= kOracleTol && worst_ssim <= kOracleTol &&
                    worst_T <= kOracleTol && ts_mismatch == 0 && worst_dual <= kDualityTol &&
                    rule_mismatch == 0;
  return {5, pass,
          std::to_string(checked) + " ASR counts (" + std::to_string(asr_mismatch) + " off), max |dMSE| " +
              num(worst_mse, 12) + ", max |dSSIM| " + num(worst_ssim, 12) + ", max |dT| " + num(worst_T, 12) +
              ", T_s mismatches " + std::to_string(ts_mismatch) + ", duality " + num(worst_dual, 14) +
              ", rule mismatches " + std::to_string(rule_mismatch)};
}

Line beta_gradients(const Run& r) {
  auto g = r.models.generator.cast(torch::kFloat64);
  auto v = r.models.verifiers.at(r.cfg.surrogate()).cast(torch::kFloat64);
  torch::manual_seed(11);
  int checked = 0, bad = 0;
  double worst = 0;
  for (int k = 0; k < kFiniteDiffConfigs; ++k) {
    const auto& p = r.pairs[static_cast<std::size_t>(k)];
    const auto& src = r.data[p.source];
    auto code = g.project_codes(attributes_to_tensor(flip(src.attributes, k % 8)).unsqueeze(0))
                    .to(torch::kFloat64);
    auto taps = g.encode_batch(src.image.unsqueeze(0).to(torch::kFloat64), code);
    const auto type = k % 2 ? AttackType::Dodging : AttackType::Impersonation;
    auto ref = v.embed_batch(
        (type == AttackType::Impersonation ? r.data[p.target].image : src.image).unsqueeze(0).to(torch::kFloat64));
    const bool element = k >= 3;
    auto theta = element ? torch::randn(taps.conv.sizes(), torch::kFloat64)
                         : torch::randn({1, taps.conv.size(1)}, torch::kFloat64);
    auto th = theta.clone().set_requires_grad(true);
    fusion_objective(g, v, taps.conv, taps.res, th, ref, type).sum().backward();
    auto grad = th.grad().flatten();
    for (long j : {0L, theta.numel() / 3, theta.numel() - 1}) {
      auto plus = theta.clone(), minus = theta.clone();
      plus.view(-1)[j] += kFiniteDiffStep;
      minus.view(-1)[j] -= kFiniteDiffStep;
      torch::NoGradGuard guard;
      const double fp = fusion_objective(g, v, taps.conv, taps.res, plus, ref, type).item<double>();
      const double fm = fusion_objective(g, v, taps.conv, taps.res, minus, ref, type).item<double>();
      const double fd = (fp - fm) / (2 * kFiniteDiffStep);
      const double an = grad[j].item<double>();
      if (std::abs(fd) < 1e-9 && std::abs(an) < 1e-9) continue;
      const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-8});
      worst = std::max(worst, rel);
      bad += rel >= kFiniteDiffRelTol;
      ++checked;
    }
  }
  long endpoint_bad = 0;
  const auto& gf = r.models.generator;
  for (std::size_t k = 0; k < 10; ++k) {
    const auto& src = r.data[r.pairs[k].source];
    const auto edited = flip(src.attributes, static_cast<int>(k % 8));
    auto fc = gf.encode(src.image, edited, Tap::Conv).values;
    auto fr = gf.encode(src.image, edited, Tap::Res).values;
    const long c = fc.size(0);
    endpoint_bad += !torch::equal(gf.decode(fuse(fc, fr, torch::ones({c}))), gf.decode(fc));
    endpoint_bad += !torch::equal(gf.decode(fuse(fc, fr, torch::zeros({c}))), gf.decode(fr));
    endpoint_bad += !torch::equal(gf.decode(fuse(fc, fr, torch::ones(fc.sizes()))), gf.decode(fc));
    endpoint_bad += !torch::equal(gf.decode(fuse(fc, fr, torch::zeros(fc.sizes()))), gf.decode(fr));
  }
  const bool pass = checked >= kFiniteDiffConfigs && bad == 0 && endpoint_bad == 0;
  return {6, pass,
          std::to_string(checked) + " coordinates over " + std::to_string(kFiniteDiffConfigs) +
              " configurations, max relative error " + num(worst, 8) + ", endpoint mismatches " +
              std::to_string(endpoint_bad) + "/40"};
}

Line blackbox_access(const Run& r) {
  long access = 0, bad_counts = 0, bad_totals = 0, n = 0;
  for (auto t : r.cfg.attack_types()) {
    const long grid = static_cast<long>(r.cfg.blackbox(t).grid.values.size());
    for (const char* m : {"saa-blackbox", "random-blackbox"}) {
      const auto rec = load_attack_records(r.cfg, m, t).outcomes;
      const auto& log = r.stats.at("blackbox_access").at(attack_file_stem(m, t));
      access += log.at("gradient_calls").get<long>() + log.at("parameter_access").get<long>();
      long total = 0;
      for (const auto& o : rec) {
        bad_counts += o.queries != (grid + 1) * o.candidates;
        total += o.queries + 2;  // reference and starting distance
        ++n;
      }
      bad_totals += log.at("embed_queries").get<long>() != total;
    }
  }
  return {7, access == 0 && bad_counts == 0 && bad_totals == 0,
          std::to_string(access) + " gradient/parameter accesses; " + std::to_string(bad_counts) + "/" +
              std::to_string(n) + " outcomes off the (grid + 1) x attributes count; " +
              std::to_string(bad_totals) + " logged totals disagree"};
}

std::vector<fs::path> reproducible_files(const fs::path& run) {
  std::vector<fs::path> out;
  for (const char* sub : {"rankings", "reports"}) {
    if (!fs::exists(run / sub)) continue;
    for (const auto& e : fs::recursive_directory_iterator(run / sub)) {
      if (e.is_regular_file() && e.path().extension() == ".csv") out.push_back(fs::relative(e.path(), run));
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

Line rerun_reproducible(const fs::path& workdir, const fs::path& smoke_config) {
  std::vector<RunConfig> runs;
  for (const char* name : {"rerun_a", "rerun_b"}) {
    fs::remove_all(workdir / name);
    auto cfg = RunConfig::load(smoke_config, {"output_root=" + (workdir / name).string()});
    std::ostringstream log, err;
    if (run_command("all", cfg, log, err) != 0) return {8, false, "smoke run failed: " + err.str()};
    runs.push_back(cfg);
  }
  const auto a = reproducible_files(runs[0].run_dir()), b = reproducible_files(runs[1].run_dir());
  long differ = 0;
  for (const auto& f : a) differ += slurp(runs[0].run_dir() / f) != slurp(runs[1].run_dir() / f);
  const bool pass = !a.empty() && a == b && differ == 0;
  return {8, pass,
          std::to_string(a.size()) + " ranking/metric CSVs compared, " + std::to_string(differ) +
              " differ" + (a == b ? "" : ", file sets differ")};
}

Line dodging_transfers_better(const Run& r) {
  double mean[2] = {0, 0};
  int cells = 0;
  const std::vector<std::string> saa{"saa-cs-1", "saa-ps-1", "saa-cs-2", "saa-ps-2"};
  for (const auto& m : saa) {
    for (const auto& tag : r.cfg.transfer_targets()) {
      mean[0] += r.asr(AttackType::Dodging, m, tag);
      mean[1] += r.asr(AttackType::Impersonation, m, tag);
      ++cells;
    }
  }
  mean[0] /= cells;
  mean[1] /= cells;
  return {9, mean[0] >= mean[1],
          "mean SAA transfer ASR dodging " + num(mean[0]) + " vs impersonation " + num(mean[1]) + " over " +
              std::to_string(cells) + " (method, target) cells"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance run"};
  std::string root, workdir = "acceptance_run";
  bool strict = false;
  app.add_option("--root", root, "output root of the default run (reused when already trained)");
  app.add_option("--workdir", workdir, "scratch directory for the rerun check");
  app.add_flag("--strict", strict, "exit non-zero when any criterion fails");
  CLI11_PARSE(app, argc, argv);
  if (root.empty()) root = (fs::path(workdir) / "main").string();
  unsetenv(kOutputRootEnv);
  torch::set_num_threads(1);
  fs::create_directories(workdir);

  std::vector<Line> lines;
  try {
    auto cfg = RunConfig::load(std::nullopt, {"output_root=" + root});
    const auto schema = AttributeSchema::default_schema();
    std::ostream& log = std::cerr;
    if (!fs::exists(cfg.dir("data") / "manifest.txt")) cmd_generate(cfg, log);
    cmd_train(cfg, log);  // skips checkpoints that already exist
    cmd_rank(cfg, log);
    cmd_attack(cfg, log);
    cmd_evaluate(cfg, log);
    cmd_report(cfg, log);

    auto data = load_run_dataset(cfg, schema);
    auto pairs = read_pairs(cfg);
    std::vector<torch::Tensor> xs, ts;
    for (const auto& p : pairs) {
      xs.push_back(data[p.source].image);
      ts.push_back(data[p.target].image);
    }
    auto models = load_models(cfg, schema);
    const Run r{cfg,
                schema,
                std::move(data),
                std::move(models),
                std::move(pairs),
                read_json(cfg.dir("reports") / "summary.json"),
                read_json(cfg.dir("attacks") / "run_stats.json"),
                torch::stack(xs),
                torch::stack(ts)};

    lines.push_back(white_box_asr(r));
    lines.push_back(ranked_vs_random_blackbox(r));
    lines.push_back(transfer_vs_random_selection(r));
    lines.push_back(quality_ordering(r));
    lines.push_back(metric_oracles(r));
    lines.push_back(beta_gradients(r));
    lines.push_back(blackbox_access(r));
    lines.push_back(rerun_reproducible(workdir, fs::path(SEMATTACK_SOURCE_DIR) / "configs" / "smoke.json"));
    lines.push_back(dodging_transfers_better(r));
  } catch (const std::exception& e) {
    std::cout << "acceptance run aborted: " << e.what() << '\n';
    return 2;
  }

  int failed = 0;
  for (const auto& l : lines) {
    std::cout << "criterion " << l.id << ": " << (l.pass ? "PASS" : "FAIL") << "  " << l.detail << '\n';
    failed += !l.pass;
  }
  std::cout << (lines.size() - failed) << "/" << lines.size() << " criteria pass\n";
  return strict && failed ? 1 : 0;
}
