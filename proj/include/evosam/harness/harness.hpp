#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "evosam/baselines/baselines.hpp"
#include "evosam/matcher/matcher.hpp"
#include "evosam/metrics/metrics.hpp"
#include "evosam/model/config.hpp"
#include "evosam/taskforge/taskforge.hpp"
#include "evosam/trainer/trainer.hpp"
#include "json.hpp"

namespace evosam::harness {

namespace fs = std::filesystem;
using baselines::Method;
using taskforge::Sample;
using taskforge::TaskDataset;

struct RunConfig {
  taskforge::ProtocolSpec protocol = taskforge::ProtocolSpec::vessel(3);
  ModelConfig model;
  trainer::TrainConfig train;
  baselines::BaselineConfig baselines;

  trainer::PretrainConfig pretrain{.epochs = 10};
  int pretrain_samples = 1000;
  /// Empty: `<out>/base.bin`.
  std::string base_checkpoint;

  std::vector<Method> methods = baselines::table_order();
  /// 1-based indices into protocol.orders; empty runs them all.
  std::vector<int> sequences;

  double lambda = 10.0;
  matcher::LabelScheme scheme = matcher::LabelScheme::task;
  /// Pick lambda on a holdout of the first task's features instead of using `lambda`.
  bool lambda_sweep = false;

  int eval_jitter = 8;
  std::uint64_t eval_seed = 5;

  /// Throws std::invalid_argument.
  void validate() const;
};
void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);
RunConfig load_config(const fs::path& path);

/// Hex FNV-1a of the canonical JSON, ignoring the method/sequence selection.
std::string config_hash(const RunConfig& c);

/// "2-3-1".
std::string sequence_name(const std::vector<int>& order);

class MismatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Paths of a run: `<out>/<protocol>/<method>/<sequence>/stage_<t>/`.
struct Layout {
  fs::path out;
  std::string protocol;

  fs::path root() const { return out / protocol; }
  fs::path data() const { return root() / "data"; }
  fs::path method(const std::string& m) const { return root() / m; }
  fs::path sequence(const std::string& m, const std::string& seq) const { return method(m) / seq; }
  fs::path stage(const std::string& m, const std::string& seq, int t) const {
    return sequence(m, seq) / ("stage_" + std::to_string(t));
  }
};

/// Loads `<out>/<protocol>/data` or generates and saves it.
std::vector<TaskDataset> ensure_data(const RunConfig& c, const Layout& l);

/// Fixed evaluation prompt of a test sample: a jittered tight box drawn from a
/// generator keyed by (seed, sample id), so every method sees the same box.
BoxPrompt eval_prompt(const Sample& s, int jitter_max, std::uint64_t seed);

/// Pretrains the base model on the generic shape set, writes the checkpoint
/// plus `pretrain_loss.csv` and `pretrain.json`, and returns the held-out mDice on [0, 1].
double run_pretrain(const RunConfig& c, const fs::path& checkpoint, std::ostream* log);
fs::path base_path(const RunConfig& c, const fs::path& out);

struct RunOptions {
  bool oracle_routing = false;
  bool pretrain_if_missing = false;
  std::ostream* log = nullptr;
};

/// Trains and evaluates every selected method on every selected sequence.
/// Completed stages (those with a `done` marker) are skipped, so an interrupted
/// run resumes where it stopped. Throws MismatchError when the run directory
/// was created under a different configuration.
void run_protocol(const RunConfig& c, const fs::path& out, const RunOptions& opt);

/// One evaluated stage: the matrix row (0-100) and, for routed methods, how
/// many test samples of each column went to the matching expert.
struct StageRow {
  std::vector<double> row;
  std::vector<int> routed_correct;
  std::vector<int> routed_total;
};

/// Re-evaluates a stored stage from its checkpoint without touching the run.
StageRow eval_stage(const RunConfig& c, const fs::path& out, Method m, const std::string& seq, int stage,
                    bool oracle_routing);

struct MethodSummary {
  std::string method;
  std::vector<metrics::SequenceReport> reports;
  int incomplete = 0;
  /// base/joint: a single row rather than a sequence matrix.
  std::vector<double> single_row;
  metrics::SummaryRow summary;
};

struct Report {
  std::vector<MethodSummary> methods;
  /// Final-stage routing accuracy of the learned matcher over all sequences (-1 when absent).
  double routing_accuracy = -1;
  bool complete = true;
};

/// Reads every matrix/row CSV under `<out>/<protocol>`, writes `summary.csv`
/// there and returns the aggregate. Throws std::runtime_error when nothing has
/// been run yet.
Report build_report(const fs::path& protocol_dir);
/// Table in the fixed method order: mean +- std of avg mDice and avg forgetting.
void print_report(const Report& r, std::ostream& os);

/// Display name used in printed tables ("Seq FT", "ER (25%)", ...).
std::string display_name(const std::string& method);

}  // namespace evosam::harness
