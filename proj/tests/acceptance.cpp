// Acceptance run: one PASS/FAIL line per criterion.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "infobottle/cli.hpp"
#include "infobottle/mi.hpp"
#include "infobottle/regularizers.hpp"

using namespace infobottle;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

// Pinned tolerances.
constexpr double kGradTol = 1e-4;
constexpr double kSuiteSeconds = 60.0;
constexpr double kTheorySlack = 1e-9;
constexpr std::size_t kTheoryTrials = 200;
constexpr std::size_t kTheoryPairs = 100000;
constexpr double kEstimatorTol = 0.05;
constexpr std::size_t kEstimatorSamples = 10000;
constexpr double kReductionTol = 1e-12;
constexpr double kBenignFloor = 0.95;
constexpr double kRobustGain = 0.05;
constexpr double kBenignDrop = 0.02;
constexpr double kExperimentSeconds = 15.0 * 60.0;
constexpr std::size_t kOracleVectors = 1000;

const std::string kConfigs = INFOBOTTLE_CONFIG_DIR;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string join(const std::vector<double>& v) {
  std::string s;
  for (double x : v) s += (s.empty() ? "" : " ") + num(x);
  return "[" + s + "]";
}

json read_json(const fs::path& p) { return json::parse(read_text_file(p.string())); }

// Runs one CLI command; throws with its stderr on a non-zero exit.
void cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run(args, out, err);
  if (code != kExitOk) {
    std::string line;
    for (const auto& a : args) line += a + " ";
    throw std::runtime_error("command failed (" + std::to_string(code) + "): " + line + "\n" + err.str());
  }
}

struct Line {
  int id;
  bool pass;
  std::string detail;
};

class Report {
 public:
  void add(int id, bool pass, const std::string& detail) {
    lines_.push_back({id, pass, detail});
    std::cout << "criterion " << id << ": " << (pass ? "PASS" : "FAIL") << "  " << detail << std::endl;
  }
  bool all_pass() const {
    return std::all_of(lines_.begin(), lines_.end(), [](const Line& l) { return l.pass; });
  }
  std::string text() const {
    std::ostringstream os;
    for (const auto& l : lines_) os << "criterion " << l.id << ": " << (l.pass ? "PASS" : "FAIL") << "  " << l.detail << '\n';
    return os.str();
  }

 private:
  std::vector<Line> lines_;
};

// ----------------------------------------------------------------- criteria

void gradient_suite(const fs::path& dir, Report& report) {
  const auto t0 = std::chrono::steady_clock::now();
  std::ostringstream out, err;
  const int code = run({"grad-check", "--seed", "0", "--tolerance", num(kGradTol), "--out", dir.string()}, out, err);
  const double secs = seconds_since(t0);
  const json j = read_json(dir / "gradcheck.json");
  const double worst = j["max_error"];
  report.add(1, code == kExitOk && worst <= kGradTol && secs <= kSuiteSeconds,
             "grad-check max relative error " + num(worst) + " (<= " + num(kGradTol) + ") over " +
                 std::to_string(j["ops"].size()) + " ops and the model loss; " + num(secs) + " s (<= 60)");
}

void theory_suite(const fs::path& dir, Report& report) {
  const auto t0 = std::chrono::steady_clock::now();
  std::ostringstream out, err;
  run({"theory-check", "--trials", std::to_string(kTheoryTrials), "--pairs", std::to_string(kTheoryPairs), "--seed",
       "0", "--out", dir.string()},
      out, err);
  const double secs = seconds_since(t0);
  const json j = read_json(dir / "theory.json");
  // Recount from the per-trial records with the pinned slack.
  std::size_t l1 = 0;
  for (const auto& t : j["lemma1"]["results"])
    if (!(t["lhs"].get<double>() <= t["rhs"].get<double>() + kTheorySlack)) ++l1;
  const std::size_t l2 = j["lemma2"]["violations"];
  const std::size_t trials = j["lemma1"]["results"].size();
  const std::size_t pairs = j["lemma2"]["pairs"];
  report.add(2, l1 == 0 && l2 == 0 && trials == kTheoryTrials && pairs == kTheoryPairs && secs <= kSuiteSeconds,
             "theory-check: " + std::to_string(l1) + " lemma-1 violations in " + std::to_string(trials) +
                 " trials, " + std::to_string(l2) + " lemma-2 violations in " + std::to_string(pairs) + " pairs; " +
                 num(secs) + " s (<= 60)");
}

void estimator_sanity(Report& report) {
  bool ok = true;
  std::string detail;
  Rng rng = Rng::for_label(0, "acceptance.estimators");
  CriticTrainConfig cfg;
  cfg.steps = 1500;
  const double ln_k = std::log(static_cast<double>(cfg.batch));
  for (const double rho : {0.0, 0.5, 0.9}) {
    const double truth = gaussian_mi(rho);
    auto [x, y] = correlated_gaussians(rho, kEstimatorSamples, rng);
    const MIEstimate club = club_upper_bound(x, y, gaussian_conditional(rho, 1.0 - rho * rho));
    Critic critic = train_critic(x, y, cfg, 11);
    auto [xe, ye] = correlated_gaussians(rho, kEstimatorSamples, rng);
    const MIEstimate nce = infonce_in_batches(critic, xe, ye, cfg.batch, true);
    const bool row = club.value >= truth - kEstimatorTol && nce.value <= truth + kEstimatorTol && nce.value <= ln_k;
    ok = ok && row;
    detail += "rho " + num(rho) + ": true " + num(truth) + " club " + num(club.value) + " infonce " +
              num(nce.value) + "; ";
  }
  report.add(3, ok, detail + "tolerance " + num(kEstimatorTol) + ", infonce <= ln " + std::to_string(cfg.batch));
}

std::vector<double> logged_losses(const fs::path& log) {
  std::vector<double> out;
  std::istringstream in(read_text_file(log.string()));
  std::string line;
  while (std::getline(in, line)) {
    const auto p = line.find(" loss=");
    if (p != std::string::npos) out.push_back(std::stod(line.substr(p + 6)));
  }
  return out;
}

// Regularizer-free loop over the model API: shuffle, cross-entropy,
// backward, clipped gradient descent.
std::vector<double> reference_trace(const RunConfig& rc) {
  const Corpus corpus = generate_corpus(rc.corpus, rc.corpus_seed);
  const ReferenceEmbeddingTable table = reference_table(corpus);
  Model model(rc.model, rc.train.seed, &table);
  const double lr = rc.train.optimizer.learning_rate;
  const double clip = rc.train.optimizer.clip_norm;
  std::vector<double> trace;
  for (std::size_t epoch = 1; epoch <= rc.train.epochs; ++epoch) {
    const auto order = epoch_order(corpus.train.size(), rc.train.seed, epoch);
    for (std::size_t i = 0; i < order.size(); i += rc.train.batch_size) {
      std::vector<Example> ex;
      for (std::size_t k = i; k < std::min(order.size(), i + rc.train.batch_size); ++k)
        ex.push_back(corpus.train[order[k]]);
      const Batch b = make_batch(ex, corpus.vocab);
      model.zero_grad();
      Tape tape;
      Var loss = Model::task_loss(model.forward(tape, b).logits, b.labels);
      tape.backward(loss);
      tape.accumulate_param_grads();
      trace.push_back(loss.value().item());
      double sq = 0.0;
      for (Parameter* p : model.parameters())
        if (p->trainable)
          for (double g : p->grad.data) sq += g * g;
      const double norm = std::sqrt(sq);
      const double scale = clip > 0.0 && norm > clip ? clip / norm : 1.0;
      for (Parameter* p : model.parameters())
        if (p->trainable)
          for (std::size_t k = 0; k < p->value.size(); ++k) p->value.data[k] -= lr * scale * p->grad.data[k];
    }
  }
  return trace;
}

const std::vector<std::string> kReductionArgs = {"--config", kConfigs + "/robustness.cfg", "--config",
                                                 kConfigs + "/vanilla.cfg", "--set", "train.epochs = 1",
                                                 "--seed", "0"};

void reduction(const fs::path& dir, Report& report) {
  std::vector<std::string> args = {"train", "--out", dir.string()};
  args.insert(args.end(), kReductionArgs.begin(), kReductionArgs.end());
  cli(args);

  RunConfig rc;
  FieldRegistry reg;
  rc.register_fields(reg);
  for (const char* f : {"/robustness.cfg", "/vanilla.cfg"})
    reg.apply(parse_key_values(read_text_file(kConfigs + f), f));
  rc.train.epochs = 1;
  rc.corpus_seed = rc.train.seed = 0;
  const auto ref = reference_trace(rc);
  const auto got = logged_losses(dir / "train.log");
  double worst = got.size() == ref.size() ? 0.0 : INFINITY;
  for (std::size_t i = 0; i < std::min(got.size(), ref.size()); ++i) worst = std::max(worst, std::abs(got[i] - ref[i]));
  report.add(4, worst <= kReductionTol,
             "alpha = beta = 0 train vs reference loop over " + std::to_string(ref.size()) +
                 " steps: max loss difference " + num(worst) + " (<= " + num(kReductionTol) + ")");
}

struct ArmResult {
  double benign = 0.0, robust = 0.0;
};

ArmResult train_and_attack(const fs::path& dir, std::uint64_t seed, const std::vector<std::string>& configs) {
  std::vector<std::string> cfg;
  for (const auto& c : configs) {
    cfg.push_back("--config");
    cfg.push_back(kConfigs + "/" + c);
  }
  const std::string s = std::to_string(seed);
  std::vector<std::string> args = {"train", "--seed", s, "--out", (dir / "train").string()};
  args.insert(args.end(), cfg.begin(), cfg.end());
  cli(args);
  args = {"evaluate",  "--seed",   s, "--checkpoint", (dir / "train/checkpoint.ibrt").string(),
          "--attack", "word-sub", "--out", (dir / "eval").string()};
  args.insert(args.end(), cfg.begin(), cfg.end());
  cli(args);
  const json j = read_json(dir / "eval/report.json");
  return {j["benign_accuracy"], j["robust_accuracy"]};
}

struct Experiment {
  std::vector<double> vanilla_benign, vanilla_robust, info_benign, info_robust, adv_benign, adv_robust;
  double seconds = 0.0;
};

Experiment robustness_experiment(const fs::path& dir, std::size_t seeds) {
  Experiment e;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t s = 0; s < seeds; ++s) {
    const fs::path sd = dir / ("seed" + std::to_string(s));
    const ArmResult v = train_and_attack(sd / "vanilla", s, {"robustness.cfg", "vanilla.cfg"});
    const ArmResult i = train_and_attack(sd / "regularized", s, {"robustness.cfg", "regularized.cfg"});
    const ArmResult a = train_and_attack(sd / "regularized_adv", s, {"robustness.cfg", "regularized.cfg", "adversarial.cfg"});
    e.vanilla_benign.push_back(v.benign);
    e.vanilla_robust.push_back(v.robust);
    e.info_benign.push_back(i.benign);
    e.info_robust.push_back(i.robust);
    e.adv_benign.push_back(a.benign);
    e.adv_robust.push_back(a.robust);
    std::cout << "  seed " << s << ": vanilla " << num(v.benign) << "/" << num(v.robust) << ", regularized "
              << num(i.benign) << "/" << num(i.robust) << ", regularized+adv " << num(a.benign) << "/"
              << num(a.robust) << " (benign/robust), " << num(seconds_since(t0)) << " s" << std::endl;
  }
  e.seconds = seconds_since(t0);
  return e;
}

void robustness_verdict(const Experiment& e, Report& report) {
  std::vector<double> gain, drop;
  for (std::size_t s = 0; s < e.vanilla_robust.size(); ++s) {
    gain.push_back(e.info_robust[s] - e.vanilla_robust[s]);
    drop.push_back(e.vanilla_benign[s] - e.info_benign[s]);
  }
  const double min_benign = *std::min_element(e.vanilla_benign.begin(), e.vanilla_benign.end());
  const bool a = min_benign >= kBenignFloor;
  const bool b = median(gain) >= kRobustGain;
  const bool c = median(drop) <= kBenignDrop;
  const bool d = median(e.adv_robust) >= median(e.info_robust);
  const bool t = e.seconds <= kExperimentSeconds;
  report.add(5, a && b && c && d && t,
             std::string("(a) vanilla benign min ") + num(min_benign) + " >= 0.95 " + (a ? "ok" : "no") +
                 "; (b) median robust gain " + num(median(gain)) + " >= 0.05 " + (b ? "ok" : "no") +
                 "; (c) median benign drop " + num(median(drop)) + " <= 0.02 " + (c ? "ok" : "no") +
                 "; (d) median robust regularized+adv " + num(median(e.adv_robust)) + " >= regularized " +
                 num(median(e.info_robust)) + " " + (d ? "ok" : "no") + "; " + num(e.seconds) + " s <= 900 " +
                 (t ? "ok" : "no") + "; vanilla robust " + join(e.vanilla_robust) + ", regularized robust " +
                 join(e.info_robust));
}

void mi_gap(const fs::path& c5, const fs::path& dir, std::size_t seeds, Report& report) {
  std::vector<double> gaps, dr, dn;
  for (std::size_t s = 0; s < seeds; ++s) {
    const std::string seed = std::to_string(s);
    const fs::path sd = dir / ("seed" + seed);
    const fs::path vanilla = c5 / ("seed" + seed) / "vanilla";
    const std::string a = (vanilla / "train/checkpoint.ibrt").string();
    const std::vector<std::string> cfg = {"--config", kConfigs + "/robustness.cfg", "--config",
                                          kConfigs + "/vanilla.cfg"};
    auto with_cfg = [&](std::vector<std::string> args) {
      args.insert(args.end(), cfg.begin(), cfg.end());
      return args;
    };
    // Adversarial training data: successful attacks on the training split.
    cli(with_cfg({"evaluate", "--seed", seed, "--checkpoint", a, "--split", "train", "--attack", "word-sub", "--out",
                  (sd / "attack_train").string()}));
    cli(with_cfg({"train", "--seed", seed, "--augment", (sd / "attack_train/flipped.tsv").string(), "--out",
                  (sd / "augmented").string()}));
    cli(with_cfg({"mi-analysis", "--seed", seed, "--a", a, "--b", (sd / "augmented/checkpoint.ibrt").string(),
                  "--adversarial", (vanilla / "eval/adversarial.tsv").string(), "--out", (sd / "mi").string()}));
    const json j = read_json(sd / "mi/mi_report.json");
    const double r = j["deltas"]["anchored/adversarial"];
    const double n = j["deltas"]["non_anchored/adversarial"];
    dr.push_back(r);
    dn.push_back(n);
    gaps.push_back(r - n);
    std::cout << "  seed " << s << ": dI'_R " << num(r) << ", dI'_N " << num(n) << std::endl;
  }
  const double m = median(gaps);
  report.add(6, m > 0.0,
             "median over seeds of dI'_R - dI'_N on adversarial test data " + num(m) + " (> 0); dI'_R " + join(dr) +
                 ", dI'_N " + join(dn));
}

// Byte comparison of every file listed in the manifests under `a` and `b`.
std::pair<std::size_t, std::vector<std::string>> compare_trees(const fs::path& a, const fs::path& b) {
  std::size_t compared = 0;
  std::vector<std::string> differing;
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    if (entry.path().filename() != "manifest.json") continue;
    const fs::path rel_dir = fs::relative(entry.path().parent_path(), a);
    const json m = read_json(entry.path());
    std::vector<std::string> files = {"manifest.json"};
    for (const auto& f : m["files"]) files.push_back(f["path"]);
    for (const auto& f : files) {
      const fs::path pa = a / rel_dir / f, pb = b / rel_dir / f;
      ++compared;
      if (!fs::exists(pb) || read_text_file(pa.string()) != read_text_file(pb.string()))
        differing.push_back((rel_dir / f).string());
    }
  }
  return {compared, differing};
}

void determinism(const fs::path& first, const fs::path& second, std::size_t seeds, const Experiment& e1,
                 Report& report) {
  fs::create_directories(second);
  {
    std::ostringstream out, err;
    run({"theory-check", "--trials", std::to_string(kTheoryTrials), "--pairs", std::to_string(kTheoryPairs),
         "--seed", "0", "--out", (second / "c2").string()},
        out, err);
  }
  std::vector<std::string> args = {"train", "--out", (second / "c4").string()};
  args.insert(args.end(), kReductionArgs.begin(), kReductionArgs.end());
  cli(args);
  const Experiment e2 = robustness_experiment(second / "c5", seeds);

  std::size_t compared = 0;
  std::vector<std::string> differing;
  for (const char* sub : {"c2", "c4", "c5"}) {
    auto [n, diff] = compare_trees(first / sub, second / sub);
    compared += n;
    for (auto& d : diff) differing.push_back(std::string(sub) + "/" + d);
  }
  const bool same_numbers = e1.vanilla_robust == e2.vanilla_robust && e1.info_robust == e2.info_robust &&
                            e1.adv_robust == e2.adv_robust && e1.info_benign == e2.info_benign;
  std::string detail = "repeated criteria 2, 4, 5: " + std::to_string(compared) + " files compared, " +
                       std::to_string(differing.size()) + " differ";
  if (!differing.empty()) detail += " (first: " + differing.front() + ")";
  report.add(7, differing.empty() && compared > 0 && same_numbers, detail);
}

// Independent brute force: rank by ascending norm (ties by index), keep
// ranks whose fraction (rank + 1) / n lies in [c_l, c_h].
std::vector<std::size_t> brute_force_select(const std::vector<double>& norms, double c_l, double c_h) {
  const std::size_t n = norms.size();
  std::vector<std::pair<double, std::size_t>> keyed;
  for (std::size_t i = 0; i < n; ++i) keyed.emplace_back(norms[i], i);
  std::sort(keyed.begin(), keyed.end());
  std::vector<std::size_t> out;
  for (std::size_t r = 0; r < n; ++r) {
    const double frac = static_cast<double>(r + 1) / static_cast<double>(n);
    if (frac >= c_l && frac <= c_h) out.push_back(keyed[r].second);
  }
  std::sort(out.begin(), out.end());
  return out;
}

void oracle_equivalence(Report& report) {
  Rng rng = Rng::for_label(0, "acceptance.anchored");
  std::size_t mismatches = 0, ties = 0;
  for (std::size_t t = 0; t < kOracleVectors; ++t) {
    const std::size_t n = 1 + rng.index(40);
    std::vector<double> norms(n);
    const bool tied = t % 4 == 0;
    ties += tied;
    for (auto& v : norms) v = tied ? static_cast<double>(rng.index(4)) : rng.uniform(0.0, 3.0);
    double c_l = 0.5, c_h = 0.9;
    if (t % 2) {
      c_l = rng.uniform();
      c_h = rng.uniform(c_l, 1.0);
    }
    const AnchoredIndexSet got = anchored_select(norms, c_l, c_h);
    if (got.selected != brute_force_select(norms, c_l, c_h)) ++mismatches;
  }
  report.add(8, mismatches == 0,
             std::to_string(kOracleVectors) + " random norm vectors (" + std::to_string(ties) +
                 " with ties, half with random bands): " + std::to_string(mismatches) + " mismatches");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance run"};
  std::string workdir = "acceptance_runs";
  std::size_t seeds = 5;
  app.add_option("--workdir", workdir, "directory for all artifacts (wiped first)");
  app.add_option("--seeds", seeds, "seeds of the robustness and MI experiments")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);

  ::setenv("INFOBOTTLE_LOG", "quiet", 0);
  const fs::path root = fs::absolute(workdir);
  fs::remove_all(root);
  const fs::path first = root / "run1";
  fs::create_directories(first);

  Report report;
  const std::vector<std::pair<int, std::function<void()>>> steps = {
      {1, [&] { gradient_suite(first / "c1", report); }},
      {2, [&] { theory_suite(first / "c2", report); }},
      {3, [&] { estimator_sanity(report); }},
      {4, [&] { reduction(first / "c4", report); }},
  };
  for (const auto& [id, fn] : steps) {
    try {
      fn();
    } catch (const std::exception& e) {
      report.add(id, false, std::string("error: ") + e.what());
    }
  }
  Experiment e1;
  bool have_experiment = false;
  try {
    e1 = robustness_experiment(first / "c5", seeds);
    have_experiment = true;
    robustness_verdict(e1, report);
  } catch (const std::exception& e) {
    report.add(5, false, std::string("error: ") + e.what());
  }
  try {
    if (!have_experiment) throw std::runtime_error("needs the criterion 5 checkpoints");
    mi_gap(first / "c5", first / "c6", seeds, report);
  } catch (const std::exception& e) {
    report.add(6, false, std::string("error: ") + e.what());
  }
  try {
    if (!have_experiment) throw std::runtime_error("needs the criterion 5 run");
    determinism(first, root / "run2", seeds, e1, report);
  } catch (const std::exception& e) {
    report.add(7, false, std::string("error: ") + e.what());
  }
  try {
    oracle_equivalence(report);
  } catch (const std::exception& e) {
    report.add(8, false, std::string("error: ") + e.what());
  }

  std::ofstream(root / "summary.txt") << report.text();
  std::cout << (report.all_pass() ? "acceptance: all criteria pass" : "acceptance: some criteria fail") << std::endl;
  return report.all_pass() ? 0 : 1;
}
