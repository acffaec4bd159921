// Acceptance checks, one line per criterion. The run-level criteria read a
// default-config run directory (resumed, or started from scratch, when stages
// are missing), so the first invocation can take a couple of hours.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "acceptance_grad.hpp"
#include "evosam/harness/harness.hpp"
#include "evosam/lora/lora.hpp"
#include "evosam/matcher/matcher.hpp"
#include "evosam/metrics/metrics.hpp"
#include "evosam/model/model.hpp"
#include "support.hpp"
#include "tiny_run.hpp"

using namespace evosam;
namespace fs = std::filesystem;

namespace {

// Tolerances.
constexpr double kGradRel = 1e-4;
constexpr double kGradSeconds = 120;
constexpr double kLoraAbs = 1e-6;
constexpr double kRidgeRel = 1e-4;
constexpr double kResidual = 1e-8;
constexpr double kStreamRel = 1e-9;
constexpr double kOracleForgetting = 1e-6;
constexpr double kRoutingMin = 0.95;
constexpr double kForgettingAbsMax = 1.0;
constexpr double kJointSlack = 2.0;
constexpr double kRunSeconds = 2 * 3600;

int failures = 0;

void line(bool ok, const std::string& name, const std::string& detail) {
  if (!ok) ++failures;
  std::cout << (ok ? "PASS" : "FAIL") << "  " << name << ": " << detail << std::endl;
}

std::string num(double v, int prec = 4) {
  std::ostringstream ss;
  ss.precision(prec);
  ss << v;
  return ss.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void check_gradients() {
  const auto r = acceptance::run_grad_check(20, 2024);
  bool ok = r.seconds < kGradSeconds && r.classes.size() == 7;
  std::string detail;
  for (const auto& c : r.classes) {
    ok = ok && c.checked > 0 && c.max_rel < kGradRel;
    detail += c.name + " " + num(c.max_rel, 2) + "; ";
  }
  line(ok, "gradient correctness",
       "20 instances, max rel error per class (< " + num(kGradRel) + "): " + detail + "time " + num(r.seconds, 3) + " s");
}

void check_lora_identity() {
  const ModelConfig cfg;
  const model::MiniSam m(cfg);
  const auto base = m.init_params(31);
  std::mt19937_64 rng(31);
  std::uniform_int_distribution<int> corner(0, cfg.image_size / 2), extent(4, cfg.image_size / 2);
  double worst = 0;
  for (int i = 0; i < 100; ++i) {
    const auto enc = lora::Expert::init(cfg, lora::ExpertKind::encoder, 1, rng());
    const auto dec = lora::Expert::init(cfg, lora::ExpertKind::decoder, 1, rng());
    const Image img = testsupport::random_image(cfg.image_size, rng);
    const int x = corner(rng), y = corner(rng);
    const BoxPrompt box{x, y, x + extent(rng), y + extent(rng)};
    const auto plain = m.predict(base, img, box, nullptr, nullptr).logits;
    const auto adapted = m.predict(base, img, box, &enc.params(), &dec.params()).logits;
    for (std::size_t k = 0; k < plain.size(); ++k) worst = std::max(worst, double(std::abs(plain[k] - adapted[k])));
  }
  line(worst <= kLoraAbs, "LoRA identity", "100 inputs at default size, max |logit diff| " + num(worst, 3));
}

void check_ridge() {
  std::mt19937_64 rng(404);
  double worst_rel = 0, worst_res = 0;
  for (int inst = 0; inst < 10; ++inst) {
    const int dim = 4 + inst % 9, n = 30 + 5 * inst, labels = 2 + inst % 4;
    const double lambda = std::pow(10.0, -1.0 + 0.25 * inst);
    matcher::MatcherState s(lambda, matcher::LabelScheme::task, dim);
    std::normal_distribution<double> g;
    Eigen::MatrixXd H(n, dim), Y = Eigen::MatrixXd::Zero(n, labels);
    for (int i = 0; i < n; ++i) {
      matcher::Feature h(dim);
      for (int k = 0; k < dim; ++k) h[k] = g(rng);
      const int y = s.label_for(1 + i % labels, 0);
      s.accumulate(h, y);
      H.row(i) = h.transpose();
      Y(i, y) = 1;
    }
    s.solve();
    Eigen::MatrixXd W = Eigen::MatrixXd::Zero(dim, labels);
    const Eigen::MatrixXd G = H.transpose() * H;
    const double step = 1.0 / (2 * (Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(G).eigenvalues().maxCoeff() + lambda));
    for (int it = 0; it < 2000000; ++it) {
      const Eigen::MatrixXd grad = 2 * H.transpose() * (H * W - Y) + 2 * lambda * W;
      if (grad.norm() < 1e-12) break;
      W -= step * grad;
    }
    worst_rel = std::max(worst_rel, (W - s.weights()).norm() / s.weights().norm());
    worst_res = std::max(worst_res, s.residual());
  }
  line(worst_rel <= kRidgeRel && worst_res <= kResidual, "ridge oracle equivalence",
       "10 instances, max rel diff to gradient descent " + num(worst_rel, 3) + ", max normal-equation residual " +
           num(worst_res, 3));
}

void check_streaming() {
  taskforge::ProtocolSpec ps = taskforge::ProtocolSpec::vessel(3);
  ps.train_per_task = 40;
  ps.test_per_task = 1;
  std::vector<matcher::Feature> hs;
  std::vector<int> tasks;
  for (const auto& d : taskforge::generate(ps))
    for (const auto& s : d.train) {
      hs.push_back(matcher::roi_feature(s.image, tight_bbox(s.mask)));
      tasks.push_back(d.task);
    }
  const int dim = matcher::kFeatureDim;
  Eigen::MatrixXd G = Eigen::MatrixXd::Zero(dim, dim), C = Eigen::MatrixXd::Zero(dim, 3);
  for (std::size_t i = 0; i < hs.size(); ++i) {
    G += hs[i] * hs[i].transpose();
    C.col(tasks[i] - 1) += hs[i];
  }
  std::mt19937_64 rng(77);
  double worst = 0;
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<std::size_t> perm(hs.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    matcher::MatcherState s;
    for (int t = 1; t <= 3; ++t) s.label_for(t, 0);
    for (auto i : perm) s.accumulate(hs[i], tasks[i], 0);
    worst = std::max({worst, (s.gram() - G).norm() / G.norm(), (s.prototypes() - C).norm() / C.norm()});
  }
  line(worst <= kStreamRel, "incremental statistics", "5 shuffles of a " + std::to_string(hs.size()) +
                                                          "-sample 3-task stream, max rel diff " + num(worst, 3));
}

void check_metrics() {
  const auto m = metrics::MDiceMatrix::from_rows({{80}, {70, 90}, {60, 85, 95}});
  const double f = metrics::avg_forgetting(m);
  Mask a(4, 2), b(4, 2);
  for (int i : {0, 1, 2, 3}) a.px[i] = 1;
  for (int i : {2, 3, 4, 5}) b.px[i] = 1;
  const double d = metrics::dice(a, b), io = metrics::iou(a, b);
  const double md = metrics::mdice({a, b}, {a, a});
  const double am = metrics::avg_mdice(std::vector<double>{50, 70, 90});
  const bool ok = std::abs(f - 8.75) < 1e-12 && d == 0.5 && std::abs(io - 1.0 / 3.0) < 1e-15 && md == 0.75 &&
                  am == 70 && metrics::dice(Mask(4, 2), Mask(4, 2)) == 1.0;
  line(ok, "metric formulas", "forgetting([80],[70,90],[60,85,95]) = " + num(f, 10) + ", dice " + num(d) + ", iou " +
                                  num(io) + ", mdice " + num(md) + ", avg_mdice " + num(am));
}

void check_determinism(const fs::path& scratch) {
  const auto cfg = testsupport::tiny_run_config();
  std::map<std::string, std::string> runs[2];
  for (int k = 0; k < 2; ++k) {
    const fs::path dir = scratch / ("determinism_" + std::to_string(k));
    fs::remove_all(dir);
    harness::RunOptions o;
    o.pretrain_if_missing = true;
    harness::run_protocol(cfg, dir, o);
    harness::build_report(dir / cfg.protocol.name());
    runs[k] = testsupport::csv_files(dir);
    fs::remove_all(dir);
  }
  line(!runs[0].empty() && runs[0] == runs[1], "determinism",
       std::to_string(runs[0].size()) + " CSV files from two independent runs (pretraining included), bitwise " +
           (runs[0] == runs[1] ? "identical" : "different"));
}

const harness::MethodSummary* find(const harness::Report& r, const std::string& name) {
  for (const auto& m : r.methods)
    if (m.method == name) return &m;
  return nullptr;
}

void check_run(const fs::path& out) {
  const harness::RunConfig cfg;
  const fs::path root = out / cfg.protocol.name();
  harness::RunOptions o;
  o.pretrain_if_missing = true;
  o.log = &std::cerr;
  harness::run_protocol(cfg, out, o);
  const auto rep = harness::build_report(root);

  // Frozen experts must not change once their task is done.
  bool oracle_ok = rep.complete;
  double worst_f = 0;
  const auto* orc = find(rep, "evosam_oracle");
  if (!orc || orc->reports.size() != cfg.protocol.orders.size()) oracle_ok = false;
  else
    for (const auto& s : orc->reports) worst_f = std::max(worst_f, std::abs(s.avg_forgetting));
  int compared = 0, differing = 0;
  const int T = cfg.protocol.tasks;
  for (const auto& order : cfg.protocol.orders) {
    const fs::path sd = root / "evosam" / harness::sequence_name(order);
    for (int k = 1; k <= T; ++k) {
      const std::string dec = "decoder_" + std::to_string(k) + ".bin";
      const std::string want = slurp(sd / ("stage_" + std::to_string(k)) / "pool" / dec);
      const std::string enc = slurp(sd / "stage_1" / "pool" / "encoder.bin");
      for (int t = k + 1; t <= T; ++t) {
        const fs::path pd = sd / ("stage_" + std::to_string(t)) / "pool";
        compared += 2;
        differing += (want.empty() || slurp(pd / dec) != want) + (enc.empty() || slurp(pd / "encoder.bin") != enc);
      }
    }
  }
  line(oracle_ok && worst_f <= kOracleForgetting && compared > 0 && differing == 0, "zero forgetting under oracle routing",
       "max |avg_Forgetting| over " + std::to_string(orc ? orc->reports.size() : 0) + " sequences " + num(worst_f, 3) +
           "; frozen expert files compared " + std::to_string(compared) + ", differing " + std::to_string(differing));

  const auto* evo = find(rep, "evosam");
  const double evo_f = evo && evo->reports.size() > 1 ? evo->summary.agg.avg_forgetting.mean : std::nan("");
  line(rep.routing_accuracy >= kRoutingMin && std::abs(evo_f) <= kForgettingAbsMax, "routing quality",
       "learned-matcher accuracy " + num(100 * rep.routing_accuracy) + "% (>= 95%), EvoSAM avg_Forgetting " + num(evo_f) +
           " (|.| <= 1)");

  const auto* seq = find(rep, "seq_ft");
  const auto* er = find(rep, "er");
  const auto* joint = find(rep, "joint");
  double seconds = 0;
  {
    std::ifstream f(root / "timings.json");
    if (f) {
      const auto j = nlohmann::json::parse(f);
      for (const auto& [k, v] : j.items()) seconds += v.get<double>();
    }
  }
  if (!rep.complete || !seq || !er || !evo || !joint) {
    line(false, "method ordering", "run incomplete");
    return;
  }
  const double m_evo = evo->summary.agg.avg_mdice.mean, m_er = er->summary.agg.avg_mdice.mean,
               m_seq = seq->summary.agg.avg_mdice.mean, m_joint = joint->summary.agg.avg_mdice.mean;
  const double f_seq = seq->summary.agg.avg_forgetting.mean, f_er = er->summary.agg.avg_forgetting.mean;
  std::string broken;
  auto need = [&](bool ok, const char* what) {
    if (!ok) broken += std::string(broken.empty() ? "" : ", ") + what;
  };
  need(m_evo > m_er, "EvoSAM > ER");
  need(m_evo > m_seq, "EvoSAM > Seq FT");
  need(f_seq > f_er, "forgetting Seq FT > ER");
  need(f_er >= evo_f, "forgetting ER >= EvoSAM");
  need(m_joint >= m_evo - kJointSlack, "Joint >= EvoSAM - 2");
  need(seconds < kRunSeconds, "time < 2 h");
  line(broken.empty(), "method ordering", (broken.empty() ? std::string() : "violated: " + broken + "; ") +
       "avg_mDice EvoSAM " + num(m_evo) + " / ER " + num(m_er) + " / Seq FT " + num(m_seq) + " / Joint " + num(m_joint) +
           "; avg_Forgetting Seq FT " + num(f_seq) + " > ER " + num(f_er) + " >= EvoSAM " + num(evo_f) +
           "; recorded training+evaluation time " + num(seconds / 60, 3) + " min (< 120)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::string run_dir = "acceptance_run";
  app.add_option("--run-dir", run_dir, "Default-config run directory (created or resumed)")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  auto guarded = [](const std::string& name, auto&& fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      line(false, name, std::string("threw: ") + e.what());
    }
  };
  guarded("gradient correctness", check_gradients);
  guarded("LoRA identity", check_lora_identity);
  guarded("ridge oracle equivalence", check_ridge);
  guarded("incremental statistics", check_streaming);
  guarded("metric formulas", check_metrics);
  guarded("determinism", [&] { check_determinism(fs::path(run_dir).parent_path().empty() ? fs::current_path() : fs::path(run_dir).parent_path()); });
  guarded("full run", [&] { check_run(run_dir); });
  std::cout << (failures ? std::to_string(failures) + " criteria failed" : std::string("all criteria passed")) << std::endl;
  return failures ? 1 : 0;
}
