#include "evosam/baselines/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "evosam/trainer/loss.hpp"

namespace evosam::baselines {

namespace {

enum Salt : std::uint64_t { kSaltReplay = 0xe5, kSaltFisher = 0xf1 };

struct MethodName {
  Method m;
  const char* name;
};
constexpr MethodName kNames[] = {{Method::base, "base"},       {Method::seq_ft, "seq_ft"}, {Method::ewc, "ewc"},
                                 {Method::distill, "distill"}, {Method::er, "er"},         {Method::evosam, "evosam"},
                                 {Method::joint, "joint"}};

std::vector<int> finetunable(const nk::ParamStore& p) {
  std::vector<int> idx;
  for (int i = 0; i < p.size(); ++i)
    if (trainer::is_finetunable(p.name(i))) idx.push_back(i);
  return idx;
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

std::string to_string(Method m) {
  for (const auto& n : kNames)
    if (n.m == m) return n.name;
  throw std::invalid_argument("unknown method");
}

Method method_from_string(const std::string& s) {
  for (const auto& n : kNames)
    if (s == n.name) return n.m;
  throw std::invalid_argument("unknown method '" + s + "' (expected base|seq_ft|ewc|distill|er|evosam|joint)");
}

const std::vector<Method>& table_order() {
  static const std::vector<Method> order = {Method::base,    Method::seq_ft, Method::ewc,  Method::distill,
                                            Method::er,      Method::evosam, Method::joint};
  return order;
}

bool is_full_finetune(Method m) {
  return m == Method::seq_ft || m == Method::er || m == Method::distill || m == Method::ewc;
}

void BaselineConfig::validate() const {
  if (!(er_ratio >= 0 && er_ratio <= 1)) throw std::invalid_argument("er_ratio must lie in [0, 1]");
  if (!(distill_w >= 0) || !(ewc_w >= 0)) throw std::invalid_argument("regularization weights must be >= 0");
  if (!(lwf_temperature > 0)) throw std::invalid_argument("lwf_temperature must be positive");
}

void to_json(nlohmann::json& j, const BaselineConfig& c) {
  j = {{"er_ratio", c.er_ratio},
       {"distill_w", c.distill_w},
       {"distill_lwf", c.distill_lwf},
       {"lwf_temperature", c.lwf_temperature},
       {"ewc_w", c.ewc_w}};
}

void from_json(const nlohmann::json& j, BaselineConfig& c) {
  const BaselineConfig d;
  c.er_ratio = j.value("er_ratio", d.er_ratio);
  c.distill_w = j.value("distill_w", d.distill_w);
  c.distill_lwf = j.value("distill_lwf", d.distill_lwf);
  c.lwf_temperature = j.value("lwf_temperature", d.lwf_temperature);
  c.ewc_w = j.value("ewc_w", d.ewc_w);
  c.validate();
}

std::size_t replay_count(std::size_t n, double ratio) {
  return static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
}

std::vector<Sample> replay_select(const std::vector<Sample>& train, double ratio, std::uint64_t seed) {
  const std::size_t k = replay_count(train.size(), ratio);
  std::vector<std::size_t> idx(train.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  nk::Rng rng(seed);
  rng.shuffle(idx.begin(), idx.end());
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  std::vector<Sample> out;
  out.reserve(k);
  for (auto i : idx) out.push_back(train[i]);
  return out;
}

FisherDiag estimate_fisher(const std::vector<const Sample*>& data, const model::MiniSam& model,
                           const nk::ParamStore& params, int jitter_max, std::uint64_t seed) {
  if (data.empty()) throw std::invalid_argument("estimate_fisher: empty dataset");
  FisherDiag f;
  f.index = finetunable(params);
  for (int i : f.index) {
    f.fisher.emplace_back(params[i].shape());
    f.anchor.push_back(params[i]);
  }
  nk::Rng rng(seed);
  for (const Sample* s : data) {
    nk::Tape tape;
    model::BoundParams bp(tape, params, std::function<bool(int)>([&](int i) { return trainer::is_finetunable(params.name(i)); }));
    const BoxPrompt box = trainer::simulate_prompt(s->mask, jitter_max, rng);
    nk::Var loss = trainer::dice_bce_loss(model.forward(tape, bp, nullptr, nullptr, s->image, box), s->mask);
    tape.backward(loss);
    for (std::size_t k = 0; k < f.index.size(); ++k) {
      const nk::Tensor g = tape.grad(bp[f.index[k]]);
      auto acc = f.fisher[k].data();
      const auto& gv = g.data();
      for (std::size_t e = 0; e < acc.size(); ++e) acc[e] += gv[e] * gv[e];
    }
  }
  const nk::real inv = nk::real(1) / static_cast<nk::real>(data.size());
  for (auto& t : f.fisher)
    for (auto& v : t.data()) v *= inv;
  return f;
}

double ewc_penalty(const std::vector<FisherDiag>& tasks, const nk::ParamStore& params, double w,
                   std::vector<nk::Tensor>* grads) {
  double total = 0;
  for (const auto& f : tasks) {
    if (grads && grads->size() != f.index.size()) throw nk::ShapeError("ewc_penalty: gradient list size mismatch");
    for (std::size_t k = 0; k < f.index.size(); ++k) {
      const auto& theta = params[f.index[k]].data();
      const auto& star = f.anchor[k].data();
      const auto& fi = f.fisher[k].data();
      if (theta.size() != fi.size()) throw nk::ShapeError("ewc_penalty: Fisher shape mismatch");
      double s = 0;
      for (std::size_t e = 0; e < theta.size(); ++e) {
        const double d = static_cast<double>(theta[e]) - star[e];
        s += fi[e] * d * d;
        if (grads) (*grads)[k].data()[e] += static_cast<nk::real>(w * fi[e] * d);
      }
      total += s;
    }
  }
  return 0.5 * w * total;
}

nk::Var distill_mse(nk::Var student, const nk::Tensor& teacher) {
  const auto t = teacher.data();
  if (t.size() != student.value().size()) throw nk::ShapeError("distill_mse: logit counts differ");
  // The teacher may come from the inference path (S x S); compare element-wise.
  return nk::mean_sq_diff(student, student.tape->constant(nk::Tensor(student.shape(), {t.begin(), t.end()})));
}

nk::Var distill_lwf(nk::Var student, const nk::Tensor& teacher, double temperature) {
  const auto& s = student.value().data();
  const auto& t = teacher.data();
  if (s.size() != t.size()) throw nk::ShapeError("distill_lwf: logit counts differ");
  const double n = static_cast<double>(s.size());
  auto probs = std::make_shared<std::vector<double>>(s.size());
  auto targets = std::make_shared<std::vector<double>>(s.size());
  double loss = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double z = s[i] / temperature;
    const double q = sigmoid(t[i] / temperature);
    // log(sigmoid(z)) and log(1 - sigmoid(z)) in overflow-safe form.
    const double log_p = -std::log1p(std::exp(-std::abs(z))) + std::min(z, 0.0);
    const double log_1mp = log_p - z;
    loss -= q * log_p + (1 - q) * log_1mp;
    (*probs)[i] = sigmoid(z);
    (*targets)[i] = q;
  }
  const int is = student.id;
  return student.tape->record(nk::Tensor({1}, static_cast<nk::real>(loss / n)), {student},
                              [is, probs, targets, n, temperature](nk::Tape& tp, int self) {
                                const double seed = tp.grad_of(self)[0];
                                auto& g = tp.grad_acc(is);
                                for (std::size_t i = 0; i < probs->size(); ++i)
                                  g[i] += static_cast<nk::real>(seed * ((*probs)[i] - (*targets)[i]) / (n * temperature));
                              });
}

void run_finetune(Method method, const std::vector<const std::vector<Sample>*>& stream, const model::MiniSam& model,
                  const nk::ParamStore& base, const trainer::TrainConfig& cfg, const BaselineConfig& bc,
                  const StageFn& on_stage, const ResumeState* resume) {
  if (!is_full_finetune(method)) throw std::invalid_argument("run_finetune: " + to_string(method) + " is not a fine-tuning baseline");
  cfg.validate();
  bc.validate();
  model.check_params(base);
  const int first = resume ? resume->first_stage : 1;
  if (first < 1 || first > static_cast<int>(stream.size()) + 1) throw std::out_of_range("run_finetune: bad resume stage");

  nk::ParamStore theta = first > 1 ? resume->start : base;
  model.check_params(theta);
  const std::vector<int> idx = finetunable(theta);
  std::vector<nk::Tensor*> params;
  for (int i : idx) params.push_back(&theta[i]);

  std::vector<std::vector<Sample>> buffers;
  std::vector<FisherDiag> fishers;
  std::unique_ptr<nk::ParamStore> teacher;

  auto task_end = [&](int stage, const nk::ParamStore& weights) {
    const auto& train = *stream[static_cast<std::size_t>(stage - 1)];
    if (method == Method::er) buffers.push_back(replay_select(train, bc.er_ratio, nk::Rng::mix(nk::Rng::mix(cfg.seed, kSaltReplay), stage)));
    if (method == Method::ewc) {
      fishers.push_back(estimate_fisher(trainer::pointers(train), model, weights, cfg.jitter_max,
                                        nk::Rng::mix(nk::Rng::mix(cfg.seed, kSaltFisher), stage)));
    }
    if (method == Method::distill) teacher = std::make_unique<nk::ParamStore>(weights);
  };
  for (int s = 1; s < first; ++s) task_end(s, s == first - 1 ? theta : resume->weights_of(s));

  for (int stage = first; stage <= static_cast<int>(stream.size()); ++stage) {
    std::vector<const Sample*> data = trainer::pointers(*stream[static_cast<std::size_t>(stage - 1)]);
    for (const auto& b : buffers)
      for (const auto& s : b) data.push_back(&s);

    const nk::ParamStore* tch = (method == Method::distill && bc.distill_w > 0) ? teacher.get() : nullptr;
    auto grad_fn = [&](const trainer::Example& ex, std::span<nk::Tensor> grads) {
      nk::Tape tape;
      model::BoundParams bp(tape, theta, std::function<bool(int)>([&](int i) { return trainer::is_finetunable(theta.name(i)); }));
      nk::Var logits = model.forward(tape, bp, nullptr, nullptr, *ex.image, ex.box);
      nk::Var loss = trainer::dice_bce_loss(logits, *ex.mask);
      if (tch) {
        const nk::Tensor t = model.predict(*tch, *ex.image, ex.box, nullptr, nullptr).logits;
        nk::Var d = bc.distill_lwf ? distill_lwf(logits, t, bc.lwf_temperature) : distill_mse(logits, t);
        loss = nk::add(loss, nk::scale(d, static_cast<nk::real>(bc.distill_w)));
      }
      tape.backward(loss);
      for (std::size_t k = 0; k < idx.size(); ++k) grads[k] += tape.grad(bp[idx[k]]);
      return static_cast<double>(loss.value()[0]);
    };
    auto loss_fn = [&](const trainer::Example& ex) {
      return trainer::dice_bce(model.predict(theta, *ex.image, ex.box, nullptr, nullptr).logits, *ex.mask).total();
    };
    trainer::Regularizer reg;
    if (method == Method::ewc && !fishers.empty()) {
      reg = [&](std::span<nk::Tensor> grads) {
        std::vector<nk::Tensor> g(grads.begin(), grads.end());
        const double v = ewc_penalty(fishers, theta, bc.ewc_w, &g);
        std::copy(g.begin(), g.end(), grads.begin());
        return v;
      };
    }
    const trainer::LossCurve curve = trainer::optimize(data, cfg, cfg.lr_full, params, grad_fn, loss_fn, stage, reg);
    task_end(stage, theta);
    on_stage(stage, theta, curve);
  }
}

trainer::LossCurve joint(const std::vector<const std::vector<Sample>*>& tasks, const model::MiniSam& model,
                         const nk::ParamStore& base, lora::ExpertPool& pool, const trainer::TrainConfig& cfg) {
  std::vector<const Sample*> all;
  for (const auto* t : tasks)
    for (const auto& s : *t) all.push_back(&s);
  return trainer::train_first_task(all, model, base, pool, cfg);
}

}  // namespace evosam::baselines
