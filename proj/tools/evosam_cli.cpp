#include <csignal>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "evosam/annosvc/annosvc.hpp"
#include "evosam/harness/harness.hpp"
#include "httplib.h"

namespace fs = std::filesystem;
using namespace evosam;

namespace {

harness::RunConfig config_from(const std::string& path, std::optional<std::uint64_t> seed,
                               const std::vector<std::string>& methods) {
  harness::RunConfig c = path.empty() ? harness::RunConfig{} : harness::load_config(path);
  if (seed) c.train.seed = *seed;
  if (!methods.empty()) {
    c.methods.clear();
    for (const auto& m : methods) c.methods.push_back(baselines::method_from_string(m));
  }
  c.validate();
  return c;
}

// Protocol directories under `out`: `out` itself when it holds a run manifest.
std::vector<fs::path> protocol_dirs(const fs::path& out) {
  if (fs::exists(out / "manifest.json")) return {out};
  std::vector<fs::path> dirs;
  if (fs::is_directory(out))
    for (const auto& e : fs::directory_iterator(out))
      if (e.is_directory() && fs::exists(e.path() / "manifest.json")) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  return dirs;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale evolving promptable segmentation: data, training, evaluation and annotation service"};
  app.require_subcommand(1);

  std::string config;
  std::string out = "run";
  std::optional<std::uint64_t> seed;
  std::vector<std::string> methods;
  bool oracle = false;

  auto add_common = [&](CLI::App* sc) {
    sc->add_option("--config", config, "Run configuration (JSON)");
    sc->add_option("--out", out, "Output directory")->capture_default_str();
    sc->add_option("--seed", seed, "Override the training seed");
  };

  auto* gen = app.add_subcommand("gen", "Generate the protocol datasets");
  add_common(gen);

  auto* pre = app.add_subcommand("pretrain", "Pretrain the base model on generic shapes");
  add_common(pre);

  bool pretrain_missing = false;
  auto* run = app.add_subcommand("run", "Train and evaluate methods over the task sequences (resumable)");
  add_common(run);
  run->add_option("--method", methods, "Restrict to these methods (repeatable)");
  run->add_flag("--oracle-routing", oracle, "Print the EvoSAM rows obtained with ground-truth expert choice");
  run->add_flag("--pretrain", pretrain_missing, "Pretrain the base model first when its checkpoint is missing");

  std::string sequence;
  int stage = 0;
  auto* ev = app.add_subcommand("eval", "Re-evaluate stored stage checkpoints");
  add_common(ev);
  ev->add_option("--method", methods, "Method to evaluate")->required();
  ev->add_option("--sequence", sequence, "Sequence name such as 2-3-1 (default: all)");
  ev->add_option("--stage", stage, "Stage (default: all completed)");
  ev->add_flag("--oracle-routing", oracle, "Route every test sample to its own task's expert");

  auto* rep = app.add_subcommand("report", "Print the comparison table of a run directory");
  rep->add_option("--out", out, "Run directory (or one protocol directory inside it)")->capture_default_str();

  std::string pool_dir, matcher_stem, catalog, base_ckpt, joint_dir, host = "127.0.0.1", origin = "*";
  std::vector<std::string> serve_models;
  int port = 8080;
  auto* srv = app.add_subcommand("serve", "Serve models for interactive annotation");
  srv->add_option("--pool", pool_dir, "EvoSAM expert pool directory");
  srv->add_option("--matcher", matcher_stem, "Matcher state (path without extension)");
  srv->add_option("--catalog", catalog, "Dataset manifest whose test split forms the catalog")->required();
  srv->add_option("--base", base_ckpt, "Base checkpoint")->required();
  srv->add_option("--joint", joint_dir, "Joint expert pool directory");
  srv->add_option("--models", serve_models, "Models compared per session (default: all loaded)");
  srv->add_option("--config", config, "Run configuration (for the model layout)");
  srv->add_option("--port", port, "Port")->capture_default_str();
  srv->add_option("--host", host, "Bind address")->capture_default_str();
  srv->add_option("--cors-origin", origin, "Allowed CORS origin")->capture_default_str();
  srv->add_option("--seed", seed, "Seed of the blinded key shuffle");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const auto c = config_from(config, seed, {});
      const harness::Layout l{out, c.protocol.name()};
      const auto sets = harness::ensure_data(c, l);
      std::size_t n = 0;
      for (const auto& s : sets) n += s.train.size() + s.test.size();
      std::cout << "wrote " << n << " samples to " << l.data() << "\n";
    } else if (*pre) {
      const auto c = config_from(config, seed, {});
      const fs::path p = harness::base_path(c, out);
      const double md = harness::run_pretrain(c, p, &std::cout);
      std::cout << "base checkpoint " << p << " (held-out mDice " << md << ")\n";
    } else if (*run) {
      const auto c = config_from(config, seed, methods);
      harness::RunOptions opt;
      opt.oracle_routing = oracle;
      opt.pretrain_if_missing = pretrain_missing;
      opt.log = &std::cout;
      harness::run_protocol(c, out, opt);
    } else if (*ev) {
      const auto c = config_from(config, seed, methods);
      const harness::Layout l{out, c.protocol.name()};
      for (auto m : c.methods) {
        const fs::path md = l.method(baselines::to_string(m));
        if (!fs::is_directory(md)) throw std::runtime_error("no results for " + baselines::to_string(m));
        std::vector<fs::path> seqs;
        for (const auto& e : fs::directory_iterator(md))
          if (e.is_directory() && (sequence.empty() || e.path().filename() == sequence)) seqs.push_back(e.path());
        std::sort(seqs.begin(), seqs.end());
        for (const auto& sp : seqs) {
          for (int t = 1; fs::exists(sp / ("stage_" + std::to_string(t)) / "done"); ++t) {
            if (stage && t != stage) continue;
            const auto r = harness::eval_stage(c, out, m, sp.filename().string(), t, oracle);
            std::cout << baselines::to_string(m) << " " << sp.filename().string() << " stage " << t << ":";
            for (double v : r.row) std::cout << " " << metrics::fmt(v);
            std::cout << "\n";
          }
        }
      }
    } else if (*rep) {
      const auto dirs = protocol_dirs(out);
      if (dirs.empty()) throw std::runtime_error("no run found under " + out);
      for (const auto& d : dirs) {
        std::cout << "== " << d.filename().string() << " ==\n";
        harness::print_report(harness::build_report(d), std::cout);
      }
    } else if (*srv) {
      const auto c = config_from(config, std::nullopt, {});
      auto models = std::make_shared<annosvc::Models>(annosvc::Models{model::MiniSam(c.model), nk::load_checkpoint(base_ckpt),
                                                                      std::nullopt, std::nullopt, std::nullopt});
      models->model.check_params(models->base);
      if (!pool_dir.empty()) {
        if (matcher_stem.empty()) throw std::runtime_error("--pool needs --matcher");
        models->evosam = lora::ExpertPool::load(pool_dir);
        models->matcher = matcher::MatcherState::load(matcher_stem);
      }
      if (!joint_dir.empty()) models->joint = lora::ExpertPool::load(joint_dir);
      annosvc::ServiceConfig sc;
      sc.models = serve_models.empty() ? models->available() : serve_models;
      if (seed) sc.seed = *seed;
      sc.cors_origin = origin;
      annosvc::Service service(models, annosvc::load_catalog(catalog), sc);
      httplib::Server server;
      service.mount(server);
      std::cout << "listening on " << host << ":" << port << std::endl;
      if (!server.listen(host, port)) throw std::runtime_error("cannot listen on " + host + ":" + std::to_string(port));
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
