#include "evosam/harness/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include "evosam/lora/lora.hpp"
#include "evosam/model/model.hpp"
#include "evosam/trainer/loss.hpp"

namespace evosam::harness {

namespace {

constexpr const char* kManifestFormat = "evosam-run-1";
constexpr const char* kSingle = "all";  // sequence dir of methods that do not follow an order
constexpr const char* kOracle = "evosam_oracle";

// Salt for the boxes used when feeding training samples to the matcher.
constexpr std::uint64_t kSaltMatcherBox = 0xb0c5;

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

void log_line(std::ostream* log, const std::string& s) {
  if (log) *log << s << std::endl;
}

void touch(const fs::path& p) { std::ofstream(p).flush(); }

void write_row(const std::vector<double>& row, const fs::path& p) {
  std::ofstream f(p);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  for (std::size_t i = 0; i < row.size(); ++i) f << (i ? "," : "") << metrics::fmt(row[i]);
  f << "\n";
}

std::vector<double> read_row(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw std::runtime_error("cannot read " + p.string());
  std::string line;
  std::getline(f, line);
  std::vector<double> row;
  std::stringstream ss(line);
  for (std::string cell; std::getline(ss, cell, ',');) row.push_back(std::stod(cell));
  return row;
}

void write_routing(const StageRow& r, const fs::path& p) {
  std::ofstream f(p);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << "task,correct,total\n";
  for (std::size_t i = 0; i < r.routed_total.size(); ++i)
    f << i + 1 << "," << r.routed_correct[i] << "," << r.routed_total[i] << "\n";
}

// Test sets and prompts in column order (sequence positions, or task ids for single-row methods).
struct Columns {
  std::vector<const TaskDataset*> sets;
  std::vector<std::vector<BoxPrompt>> prompts;
};

Columns columns(const RunConfig& c, const std::vector<TaskDataset>& data, const std::vector<int>& order) {
  Columns col;
  for (int task : order) {
    const auto it = std::find_if(data.begin(), data.end(), [&](const TaskDataset& d) { return d.task == task; });
    if (it == data.end()) throw std::runtime_error("dataset for task " + std::to_string(task) + " is missing");
    col.sets.push_back(&*it);
    std::vector<BoxPrompt> p;
    for (const auto& s : it->test) p.push_back(eval_prompt(s, c.eval_jitter, c.eval_seed));
    col.prompts.push_back(std::move(p));
  }
  return col;
}

std::vector<int> identity_order(int t) {
  std::vector<int> o(static_cast<std::size_t>(t));
  for (int i = 0; i < t; ++i) o[static_cast<std::size_t>(i)] = i + 1;
  return o;
}

template <class Predict>
std::vector<double> eval_direct(const Columns& col, Predict predict) {
  std::vector<double> row;
  for (std::size_t i = 0; i < col.sets.size(); ++i) {
    double s = 0;
    const auto& test = col.sets[i]->test;
    for (std::size_t k = 0; k < test.size(); ++k) s += metrics::dice(predict(test[k], col.prompts[i][k]), test[k].mask);
    row.push_back(100.0 * s / static_cast<double>(test.size()));
  }
  return row;
}

// Learned and oracle rows of an EvoSAM pool in one pass: the encoder expert is
// shared, so each image is encoded once. Columns past the newest expert have
// no matching expert; oracle routing sends them to the newest one.
std::pair<StageRow, StageRow> eval_pool(const model::MiniSam& m, const nk::ParamStore& base, const lora::ExpertPool& pool,
                                        const matcher::MatcherState& state, const Columns& col) {
  StageRow learned, oracle;
  const int experts = pool.size();
  for (std::size_t i = 0; i < col.sets.size(); ++i) {
    const int truth = static_cast<int>(i) + 1;
    const int oracle_expert = std::min(truth, experts);
    const auto& test = col.sets[i]->test;
    double sl = 0, so = 0;
    int correct = 0;
    for (std::size_t k = 0; k < test.size(); ++k) {
      const auto& box = col.prompts[i][k];
      const auto emb = m.encode_image(base, test[k].image, &pool.encoder().params());
      const auto prompt = m.encode_prompt(base, box);
      const int routed = experts > 1 ? state.predict(test[k].image, box).task : 1;
      if (routed < 1 || routed > experts) throw std::runtime_error("matcher routed to a missing expert");
      correct += routed == truth;
      const Mask pl = m.decode_mask(base, emb, prompt, &pool.decoder(routed).params()).binarize();
      const double dl = metrics::dice(pl, test[k].mask);
      sl += dl;
      so += routed == oracle_expert
                ? dl
                : metrics::dice(m.decode_mask(base, emb, prompt, &pool.decoder(oracle_expert).params()).binarize(),
                                test[k].mask);
    }
    const double n = static_cast<double>(test.size());
    learned.row.push_back(100.0 * sl / n);
    oracle.row.push_back(100.0 * so / n);
    learned.routed_correct.push_back(correct);
    learned.routed_total.push_back(static_cast<int>(test.size()));
  }
  return {learned, oracle};
}

nk::ParamStore load_base(const RunConfig& c, const fs::path& out, const model::MiniSam& m, const RunOptions& opt) {
  const fs::path p = base_path(c, out);
  if (!fs::exists(p)) {
    if (!opt.pretrain_if_missing) {
      throw std::runtime_error("base checkpoint " + p.string() + " not found; run `pretrain` first or pass --pretrain");
    }
    run_pretrain(c, p, opt.log);
  }
  nk::ParamStore base = nk::load_checkpoint(p);
  m.check_params(base);
  return base;
}

void check_manifest(const RunConfig& c, const Layout& l, const nk::ParamStore& base) {
  const fs::path p = l.root() / "manifest.json";
  const std::string hash = config_hash(c);
  if (fs::exists(p)) {
    std::ifstream f(p);
    const auto j = nlohmann::json::parse(f);
    if (j.at("config_hash").get<std::string>() != hash) {
      throw MismatchError(l.root().string() + " was created with a different configuration (hash " +
                          j.at("config_hash").get<std::string>() + ", now " + hash + ")");
    }
    const auto bytes = nk::to_bytes(base);
    if (j.at("base_hash").get<std::string>() != std::to_string(fnv1a(std::string(bytes.begin(), bytes.end())))) {
      throw MismatchError(l.root().string() + " was created with a different base checkpoint");
    }
    return;
  }
  fs::create_directories(l.root());
  nlohmann::json cfg;
  to_json(cfg, c);
  const auto bytes = nk::to_bytes(base);
  const nlohmann::json j = {{"format", kManifestFormat},
                            {"config", cfg},
                            {"config_hash", hash},
                            {"base_hash", std::to_string(fnv1a(std::string(bytes.begin(), bytes.end())))},
                            {"seeds",
                             {{"protocol", c.protocol.seed},
                              {"train", c.train.seed},
                              {"eval", c.eval_seed},
                              {"pretrain", c.pretrain.seed}}},
                            {"feature_dim", matcher::kFeatureDim},
                            {"feature_version", matcher::kFeatureVersion}};
  std::ofstream f(p);
  f << j.dump(2) << "\n";
}

void record_timing(const Layout& l, const std::string& key, double seconds) {
  const fs::path p = l.root() / "timings.json";
  nlohmann::json j = nlohmann::json::object();
  if (fs::exists(p)) {
    std::ifstream f(p);
    j = nlohmann::json::parse(f);
  }
  j[key] = seconds;
  std::ofstream f(p);
  f << j.dump(2) << "\n";
}

// Writes matrix/curve CSVs of a finished (or partially finished) sequence.
void write_sequence_outputs(const Layout& l, const std::string& method, const std::string& seq, int T,
                            const std::string& row_file, const std::string& as) {
  metrics::MDiceMatrix mat(T);
  for (int t = 1; t <= T; ++t) {
    const fs::path sd = l.stage(method, seq, t);
    if (!fs::exists(sd / "done")) continue;
    const auto row = read_row(sd / row_file);
    for (int i = 1; i <= T; ++i) mat.set(t, i, row[static_cast<std::size_t>(i - 1)]);
  }
  const fs::path dir = l.sequence(method, seq);
  mat.write_csv(dir / ("matrix_" + as + "_" + seq + ".csv"));
  metrics::write_curve_csv(mat, dir / ("curve_" + as + "_" + seq + ".csv"));
}

struct Ctx {
  const RunConfig& c;
  const Layout& l;
  const model::MiniSam& m;
  const nk::ParamStore& base;
  const std::vector<TaskDataset>& data;
  const RunOptions& opt;
};

const std::vector<Sample>& train_of(const std::vector<TaskDataset>& data, int task) {
  for (const auto& d : data)
    if (d.task == task) return d.train;
  throw std::runtime_error("no training data for task " + std::to_string(task));
}

matcher::MatcherState fit_matcher(const Ctx& x, matcher::MatcherState state, const std::vector<Sample>& train, int expert) {
  nk::Rng rng(nk::Rng::mix(nk::Rng::mix(x.c.train.seed, kSaltMatcherBox), static_cast<std::uint64_t>(expert)));
  std::vector<matcher::Feature> feats;
  std::vector<int> cats;
  for (const auto& s : train) {
    const BoxPrompt box = trainer::simulate_prompt(s.mask, x.c.eval_jitter, rng);
    feats.push_back(matcher::roi_feature(s.image, box));
    cats.push_back(s.category);
  }
  if (expert == 1 && x.c.lambda_sweep && x.c.scheme == matcher::LabelScheme::subclass) {
    matcher::MatcherState probe(x.c.lambda, x.c.scheme);
    std::vector<int> labels;
    for (std::size_t i = 0; i < feats.size(); ++i) labels.push_back(probe.label_for(expert, cats[i]));
    state.set_lambda(matcher::sweep_lambda(feats, labels, probe.tau(), x.c.scheme));
  }
  for (std::size_t i = 0; i < feats.size(); ++i) state.accumulate(feats[i], expert, cats[i]);
  state.solve();
  return state;
}

void run_evosam(const Ctx& x, const std::vector<int>& order) {
  const std::string seq = sequence_name(order);
  const int T = static_cast<int>(order.size());
  const Columns col = columns(x.c, x.data, order);
  lora::ExpertPool pool;
  matcher::MatcherState state(x.c.lambda, x.c.scheme);
  for (int t = 1; t <= T; ++t) {
    const fs::path sd = x.l.stage("evosam", seq, t);
    if (fs::exists(sd / "done")) {
      if (t == T || !fs::exists(x.l.stage("evosam", seq, t + 1) / "done")) {
        pool = lora::ExpertPool::load(sd / "pool");
        state = matcher::MatcherState::load(sd / "matcher");
      }
      continue;
    }
    log_line(x.opt.log, "evosam " + seq + " stage " + std::to_string(t) + " (task " + std::to_string(order[t - 1]) + ")");
    const auto t0 = std::chrono::steady_clock::now();
    const auto& train = train_of(x.data, order[static_cast<std::size_t>(t - 1)]);
    const auto ptrs = trainer::pointers(train);
    const trainer::LossCurve curve = t == 1 ? trainer::train_first_task(ptrs, x.m, x.base, pool, x.c.train)
                                            : trainer::train_subsequent_task(ptrs, x.m, x.base, pool, x.c.train);
    state = fit_matcher(x, std::move(state), train, t);
    fs::create_directories(sd);
    fs::remove_all(sd / "pool");
    pool.save(sd / "pool");
    state.save(sd / "matcher");
    fs::remove(sd / "loss.csv");
    curve.append_csv(sd / "loss.csv");
    const auto [learned, oracle] = eval_pool(x.m, x.base, pool, state, col);
    write_row(learned.row, sd / "row.csv");
    write_row(oracle.row, sd / "row_oracle.csv");
    write_routing(learned, sd / "routing.csv");
    touch(sd / "done");
    record_timing(x.l, "evosam/" + seq + "/stage_" + std::to_string(t),
                  std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  write_sequence_outputs(x.l, "evosam", seq, T, "row.csv", "evosam");
  write_sequence_outputs(x.l, "evosam", seq, T, "row_oracle.csv", kOracle);
}

void run_finetune(const Ctx& x, Method method, const std::vector<int>& order) {
  const std::string name = baselines::to_string(method);
  const std::string seq = sequence_name(order);
  const int T = static_cast<int>(order.size());
  int first = 1;
  while (first <= T && fs::exists(x.l.stage(name, seq, first) / "done")) ++first;
  if (first <= T) {
    const Columns col = columns(x.c, x.data, order);
    std::vector<const std::vector<Sample>*> stream;
    for (int task : order) stream.push_back(&train_of(x.data, task));
    baselines::ResumeState resume;
    resume.first_stage = first;
    resume.weights_of = [&](int s) { return nk::load_checkpoint(x.l.stage(name, seq, s) / "weights.bin"); };
    if (first > 1) resume.start = resume.weights_of(first - 1);
    auto t0 = std::chrono::steady_clock::now();
    log_line(x.opt.log, name + " " + seq + " from stage " + std::to_string(first));
    baselines::run_finetune(
        method, stream, x.m, x.base, x.c.train, x.c.baselines,
        [&](int stage, const nk::ParamStore& theta, const trainer::LossCurve& curve) {
          const fs::path sd = x.l.stage(name, seq, stage);
          fs::create_directories(sd);
          nk::save_checkpoint(theta, sd / "weights.bin");
          fs::remove(sd / "loss.csv");
          curve.append_csv(sd / "loss.csv");
          const auto row = eval_direct(col, [&](const Sample& s, const BoxPrompt& b) {
            return x.m.predict(theta, s.image, b, nullptr, nullptr).binarize();
          });
          write_row(row, sd / "row.csv");
          touch(sd / "done");
          const auto now = std::chrono::steady_clock::now();
          record_timing(x.l, name + "/" + seq + "/stage_" + std::to_string(stage),
                        std::chrono::duration<double>(now - t0).count());
          t0 = now;
          log_line(x.opt.log, name + " " + seq + " stage " + std::to_string(stage) + " done");
        },
        first > 1 ? &resume : nullptr);
  }
  write_sequence_outputs(x.l, name, seq, T, "row.csv", name);
}

void run_single(const Ctx& x, Method method) {
  const std::string name = baselines::to_string(method);
  const fs::path sd = x.l.stage(name, kSingle, 1);
  if (fs::exists(sd / "done")) return;
  log_line(x.opt.log, name);
  const auto t0 = std::chrono::steady_clock::now();
  const Columns col = columns(x.c, x.data, identity_order(x.c.protocol.tasks));
  fs::create_directories(sd);
  std::vector<double> row;
  if (method == Method::base) {
    row = eval_direct(col, [&](const Sample& s, const BoxPrompt& b) {
      return x.m.predict(x.base, s.image, b, nullptr, nullptr).binarize();
    });
  } else {
    std::vector<const std::vector<Sample>*> all;
    for (int t = 1; t <= x.c.protocol.tasks; ++t) all.push_back(&train_of(x.data, t));
    lora::ExpertPool pool;
    const auto curve = baselines::joint(all, x.m, x.base, pool, x.c.train);
    fs::remove_all(sd / "pool");
    pool.save(sd / "pool");
    fs::remove(sd / "loss.csv");
    curve.append_csv(sd / "loss.csv");
    row = eval_direct(col, [&](const Sample& s, const BoxPrompt& b) {
      return x.m.predict(x.base, s.image, b, &pool.encoder().params(), &pool.decoder(1).params()).binarize();
    });
  }
  write_row(row, sd / "row.csv");
  touch(sd / "done");
  record_timing(x.l, name, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
}

std::vector<std::vector<int>> selected_orders(const RunConfig& c) {
  if (c.sequences.empty()) return c.protocol.orders;
  std::vector<std::vector<int>> out;
  for (int s : c.sequences) out.push_back(c.protocol.orders.at(static_cast<std::size_t>(s - 1)));
  return out;
}

}  // namespace

void RunConfig::validate() const {
  protocol.validate();
  model.validate();
  train.validate();
  baselines.validate();
  if (pretrain_samples < 10) throw std::invalid_argument("pretrain_samples must be >= 10");
  if (methods.empty()) throw std::invalid_argument("no methods selected");
  for (int s : sequences)
    if (s < 1 || s > static_cast<int>(protocol.orders.size()))
      throw std::invalid_argument("sequence index " + std::to_string(s) + " out of range");
  if (!(lambda > 0)) throw std::invalid_argument("lambda must be positive");
  if (eval_jitter < 0) throw std::invalid_argument("eval_jitter must be >= 0");
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  nlohmann::json methods = nlohmann::json::array();
  for (auto m : c.methods) methods.push_back(baselines::to_string(m));
  j = {{"protocol", c.protocol},
       {"model", c.model},
       {"train", c.train},
       {"baselines", c.baselines},
       {"pretrain",
        {{"epochs", c.pretrain.epochs},
         {"batch", c.pretrain.batch},
         {"lr", c.pretrain.lr},
         {"jitter_max", c.pretrain.jitter_max},
         {"seed", c.pretrain.seed},
         {"samples", c.pretrain_samples}}},
       {"base_checkpoint", c.base_checkpoint},
       {"methods", methods},
       {"sequences", c.sequences},
       {"matcher", {{"lambda", c.lambda}, {"scheme", matcher::to_string(c.scheme)}, {"lambda_sweep", c.lambda_sweep}}},
       {"eval", {{"jitter_max", c.eval_jitter}, {"seed", c.eval_seed}}}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  c = RunConfig{};
  if (j.contains("protocol")) {
    const auto& p = j.at("protocol");
    const int tasks = p.value("tasks", 3);
    const auto seed = p.value("seed", std::uint64_t{7});
    c.protocol = p.value("scenario", std::string("vessel")) == "site" ? taskforge::ProtocolSpec::site(seed)
                                                                       : taskforge::ProtocolSpec::vessel(tasks, seed);
    nlohmann::json merged;
    taskforge::to_json(merged, c.protocol);
    merged.merge_patch(p);
    taskforge::from_json(merged, c.protocol);
  }
  if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
  // Site images are small-shift tasks: the default box jitter is 2 px instead of 8.
  const bool site = c.protocol.scenario == taskforge::Scenario::site;
  if (site) c.train.jitter_max = c.eval_jitter = 2;
  if (j.contains("train")) {
    nlohmann::json t;
    trainer::to_json(t, c.train);
    t.merge_patch(j.at("train"));
    c.train = t.get<trainer::TrainConfig>();
  }
  if (j.contains("baselines")) c.baselines = j.at("baselines").get<baselines::BaselineConfig>();
  if (j.contains("pretrain")) {
    const auto& p = j.at("pretrain");
    c.pretrain.epochs = p.value("epochs", c.pretrain.epochs);
    c.pretrain.batch = p.value("batch", c.pretrain.batch);
    c.pretrain.lr = p.value("lr", c.pretrain.lr);
    c.pretrain.jitter_max = p.value("jitter_max", c.pretrain.jitter_max);
    c.pretrain.seed = p.value("seed", c.pretrain.seed);
    c.pretrain_samples = p.value("samples", c.pretrain_samples);
  }
  c.base_checkpoint = j.value("base_checkpoint", std::string());
  if (j.contains("methods")) {
    c.methods.clear();
    for (const auto& m : j.at("methods")) c.methods.push_back(baselines::method_from_string(m.get<std::string>()));
  }
  if (j.contains("method")) c.methods = {baselines::method_from_string(j.at("method").get<std::string>())};
  c.sequences = j.value("sequences", std::vector<int>{});
  if (j.contains("matcher")) {
    const auto& m = j.at("matcher");
    c.lambda = m.value("lambda", c.lambda);
    c.scheme = matcher::label_scheme_from_string(m.value("scheme", std::string("task")));
    c.lambda_sweep = m.value("lambda_sweep", c.lambda_sweep);
  }
  if (j.contains("eval")) {
    c.eval_jitter = j.at("eval").value("jitter_max", c.eval_jitter);
    c.eval_seed = j.at("eval").value("seed", c.eval_seed);
  }
  c.validate();
}

RunConfig load_config(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read config " + path.string());
  return nlohmann::json::parse(f).get<RunConfig>();
}

std::string config_hash(const RunConfig& c) {
  nlohmann::json j;
  to_json(j, c);
  j.erase("methods");
  j.erase("sequences");
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a(j.dump());
  return os.str();
}

std::string sequence_name(const std::vector<int>& order) {
  std::string s;
  for (std::size_t i = 0; i < order.size(); ++i) s += (i ? "-" : "") + std::to_string(order[i]);
  return s;
}

std::vector<TaskDataset> ensure_data(const RunConfig& c, const Layout& l) {
  if (fs::exists(l.data() / "manifest.json")) return taskforge::load_datasets(l.data());
  auto sets = taskforge::generate(c.protocol);
  fs::create_directories(l.data());
  taskforge::save_datasets(sets, l.data(), {{"protocol", c.protocol}});
  return sets;
}

BoxPrompt eval_prompt(const Sample& s, int jitter_max, std::uint64_t seed) {
  nk::Rng rng(nk::Rng::mix(seed, fnv1a(s.id)));
  return trainer::simulate_prompt(s.mask, jitter_max, rng);
}

fs::path base_path(const RunConfig& c, const fs::path& out) {
  return c.base_checkpoint.empty() ? out / "base.bin" : fs::path(c.base_checkpoint);
}

double run_pretrain(const RunConfig& c, const fs::path& checkpoint, std::ostream* log) {
  log_line(log, "pretraining base model on " + std::to_string(c.pretrain_samples) + " generic samples");
  const auto t0 = std::chrono::steady_clock::now();
  const model::MiniSam m(c.model);
  const TaskDataset set = taskforge::gen_pretrain_set(c.pretrain_samples, c.pretrain.seed);
  trainer::LossCurve curve;
  const nk::ParamStore base = trainer::pretrain(trainer::pointers(set.train), m, c.pretrain, &curve);
  double s = 0;
  for (const auto& x : set.test)
    s += metrics::dice(m.predict(base, x.image, eval_prompt(x, c.pretrain.jitter_max, c.eval_seed), nullptr, nullptr)
                           .binarize(),
                       x.mask);
  const double md = s / static_cast<double>(set.test.size());
  if (checkpoint.has_parent_path()) fs::create_directories(checkpoint.parent_path());
  nk::save_checkpoint(base, checkpoint);
  const fs::path dir = checkpoint.parent_path();
  fs::remove(dir / "pretrain_loss.csv");
  curve.append_csv(dir / "pretrain_loss.csv");
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::ofstream(dir / "pretrain.json") << nlohmann::json{{"test_mdice", md},
                                                         {"train", set.train.size()},
                                                         {"test", set.test.size()},
                                                         {"seconds", secs}}
                                              .dump(2)
                                       << "\n";
  log_line(log, "pretraining done: held-out mDice " + metrics::fmt(md));
  return md;
}

void run_protocol(const RunConfig& c, const fs::path& out, const RunOptions& opt) {
  c.validate();
  const Layout l{out, c.protocol.name()};
  const model::MiniSam m(c.model);
  const nk::ParamStore base = load_base(c, out, m, opt);
  check_manifest(c, l, base);
  const auto data = ensure_data(c, l);
  const Ctx x{c, l, m, base, data, opt};
  for (Method method : baselines::table_order()) {
    if (std::find(c.methods.begin(), c.methods.end(), method) == c.methods.end()) continue;
    if (method == Method::base || method == Method::joint) {
      run_single(x, method);
      continue;
    }
    for (const auto& order : selected_orders(c)) {
      if (method == Method::evosam) run_evosam(x, order);
      else run_finetune(x, method, order);
    }
  }
  const Report r = build_report(l.root());
  if (opt.log) print_report(r, *opt.log);
}

StageRow eval_stage(const RunConfig& c, const fs::path& out, Method method, const std::string& seq, int stage,
                    bool oracle_routing) {
  const Layout l{out, c.protocol.name()};
  const model::MiniSam m(c.model);
  const nk::ParamStore base = nk::load_checkpoint(base_path(c, out));
  m.check_params(base);
  const auto data = ensure_data(c, l);
  const std::string name = baselines::to_string(method);
  const fs::path sd = l.stage(name, seq, stage);
  if (!fs::exists(sd)) throw std::runtime_error("no stage directory " + sd.string());

  std::vector<int> order;
  if (seq == kSingle) {
    order = identity_order(c.protocol.tasks);
  } else {
    std::stringstream ss(seq);
    for (std::string tok; std::getline(ss, tok, '-');) order.push_back(std::stoi(tok));
    if (static_cast<int>(order.size()) != c.protocol.tasks) throw MismatchError("sequence " + seq + " does not match the protocol");
  }
  const Columns col = columns(c, data, order);

  switch (method) {
    case Method::base:
      return {eval_direct(col, [&](const Sample& s, const BoxPrompt& b) {
        return m.predict(base, s.image, b, nullptr, nullptr).binarize();
      }), {}, {}};
    case Method::joint: {
      const auto pool = lora::ExpertPool::load(sd / "pool");
      return {eval_direct(col, [&](const Sample& s, const BoxPrompt& b) {
        return m.predict(base, s.image, b, &pool.encoder().params(), &pool.decoder(1).params()).binarize();
      }), {}, {}};
    }
    case Method::evosam: {
      const auto pool = lora::ExpertPool::load(sd / "pool");
      m.check_adapter(pool.encoder().params(), true);
      const auto state = matcher::MatcherState::load(sd / "matcher");
      auto [learned, oracle] = eval_pool(m, base, pool, state, col);
      if (oracle_routing) {
        oracle.routed_correct = learned.routed_correct;
        oracle.routed_total = learned.routed_total;
        return oracle;
      }
      return learned;
    }
    default: {
      const nk::ParamStore theta = nk::load_checkpoint(sd / "weights.bin");
      m.check_params(theta);
      return {eval_direct(col, [&](const Sample& s, const BoxPrompt& b) {
        return m.predict(theta, s.image, b, nullptr, nullptr).binarize();
      }), {}, {}};
    }
  }
}

std::string display_name(const std::string& method) {
  static const std::map<std::string, std::string> names = {
      {"base", "Base (zero-shot)"}, {"seq_ft", "Seq FT"}, {"ewc", "EWC"},     {"distill", "Distill"},
      {"er", "ER (25%)"},           {"evosam", "EvoSAM"}, {kOracle, "EvoSAM (oracle routing)"},
      {"joint", "Joint"}};
  const auto it = names.find(method);
  return it == names.end() ? method : it->second;
}

Report build_report(const fs::path& root) {
  Report r;
  std::vector<std::string> order;
  for (Method m : baselines::table_order()) {
    order.push_back(baselines::to_string(m));
    if (m == Method::evosam) order.push_back(kOracle);
  }
  int routed_correct = 0, routed_total = 0;
  for (const auto& name : order) {
    const std::string dir_name = name == kOracle ? "evosam" : name;
    const fs::path md = root / dir_name;
    if (!fs::is_directory(md)) continue;
    MethodSummary ms;
    ms.method = name;
    if (name == "base" || name == "joint") {
      const fs::path sd = md / kSingle / "stage_1";
      if (!fs::exists(sd / "done")) {
        ms.incomplete = 1;
        r.complete = false;
        continue;
      }
      ms.single_row = read_row(sd / "row.csv");
      const double nan = std::nan("");
      ms.summary = {name, {{metrics::avg_mdice(ms.single_row), nan}, {nan, nan}, 1}};
      r.methods.push_back(std::move(ms));
      continue;
    }
    std::vector<fs::path> seqs;
    for (const auto& e : fs::directory_iterator(md))
      if (e.is_directory()) seqs.push_back(e.path());
    std::sort(seqs.begin(), seqs.end());
    for (const auto& sp : seqs) {
      const std::string seq = sp.filename().string();
      const fs::path mp = sp / ("matrix_" + name + "_" + seq + ".csv");
      if (!fs::exists(mp)) {
        ++ms.incomplete;
        continue;
      }
      const auto mat = metrics::MDiceMatrix::read_csv(mp);
      if (!mat.row_complete(mat.tasks())) {
        ++ms.incomplete;
        continue;
      }
      ms.reports.push_back(metrics::make_report(seq, mat));
      if (name == "evosam") {
        const fs::path rp = sp / ("stage_" + std::to_string(mat.tasks())) / "routing.csv";
        std::ifstream f(rp);
        std::string line;
        std::getline(f, line);
        while (std::getline(f, line)) {
          int task, ok, tot;
          char c1, c2;
          std::stringstream ss(line);
          if (ss >> task >> c1 >> ok >> c2 >> tot) {
            routed_correct += ok;
            routed_total += tot;
          }
        }
      }
    }
    if (ms.incomplete) r.complete = false;
    if (ms.reports.empty()) {
      r.methods.push_back(std::move(ms));
      continue;
    }
    if (ms.reports.size() >= 2) {
      ms.summary = {name, metrics::aggregate_sequences(ms.reports)};
    } else {
      const double nan = std::nan("");
      ms.summary = {name, {{ms.reports[0].avg_mdice, nan}, {ms.reports[0].avg_forgetting, nan}, 1}};
    }
    r.methods.push_back(std::move(ms));
  }
  if (r.methods.empty()) throw std::runtime_error("no results under " + root.string() + " (has `run` been executed?)");
  if (routed_total > 0) r.routing_accuracy = static_cast<double>(routed_correct) / routed_total;

  std::vector<metrics::SummaryRow> rows;
  for (const auto& ms : r.methods)
    if (!ms.reports.empty() || !ms.single_row.empty()) rows.push_back(ms.summary);
  metrics::write_summary_csv(rows, root / "summary.csv");
  return r;
}

void print_report(const Report& r, std::ostream& os) {
  auto pm = [](const metrics::MeanStd& v) {
    if (std::isnan(v.mean)) return std::string("N/A");
    std::ostringstream s;
    s << std::fixed << std::setprecision(2) << v.mean;
    if (!std::isnan(v.std)) s << " +- " << std::setprecision(2) << v.std;
    return s.str();
  };
  os << std::left << std::setw(26) << "Method" << std::setw(20) << "avg mDice" << std::setw(20) << "avg forgetting"
     << "sequences\n";
  for (const auto& ms : r.methods) {
    os << std::setw(26) << display_name(ms.method);
    if (ms.reports.empty() && ms.single_row.empty()) {
      os << "(no completed sequence)\n";
      continue;
    }
    os << std::setw(20) << pm(ms.summary.agg.avg_mdice) << std::setw(20) << pm(ms.summary.agg.avg_forgetting)
       << ms.summary.agg.sequences;
    if (ms.incomplete) os << "  [" << ms.incomplete << " incomplete]";
    os << "\n";
  }
  if (r.routing_accuracy >= 0)
    os << "matcher routing accuracy (final stage): " << std::fixed << std::setprecision(2) << 100 * r.routing_accuracy
       << "%\n";
  if (!r.complete) os << "warning: the run is incomplete; the table covers finished sequences only\n";
}

}  // namespace evosam::harness
