#include "evosam/trainer/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "evosam/numkit/adam.hpp"
#include "evosam/trainer/loss.hpp"

namespace evosam::trainer {

namespace {

constexpr int kFixedBatch = 8;

// Per-subsystem salts for the run seed.
enum Salt : std::uint64_t { kSaltLoop = 1, kSaltFixed = 2, kSaltEncInit = 3, kSaltDecInit = 4 };

Image resize_bilinear(const Image& src, int x0, int y0, int size, int out) {
  Image dst(out, out);
  const double scale = static_cast<double>(size) / out;
  for (int y = 0; y < out; ++y) {
    const double sy = std::clamp(y0 + (y + 0.5) * scale - 0.5, 0.0, static_cast<double>(src.height - 1));
    const int iy = std::min(static_cast<int>(sy), src.height - 2);
    const double fy = sy - iy;
    for (int x = 0; x < out; ++x) {
      const double sx = std::clamp(x0 + (x + 0.5) * scale - 0.5, 0.0, static_cast<double>(src.width - 1));
      const int ix = std::min(static_cast<int>(sx), src.width - 2);
      const double fx = sx - ix;
      for (int c = 0; c < 3; ++c) {
        const double top = src.at(ix, iy, c) * (1 - fx) + src.at(ix + 1, iy, c) * fx;
        const double bot = src.at(ix, iy + 1, c) * (1 - fx) + src.at(ix + 1, iy + 1, c) * fx;
        dst.at(x, y, c) = static_cast<float>(top * (1 - fy) + bot * fy);
      }
    }
  }
  return dst;
}

Mask resize_nearest(const Mask& src, int x0, int y0, int size, int out) {
  Mask dst(out, out);
  for (int y = 0; y < out; ++y) {
    const int sy = y0 + static_cast<int>((y + 0.5) * size / out);
    for (int x = 0; x < out; ++x) dst.at(x, y) = src.at(x0 + static_cast<int>((x + 0.5) * size / out), sy);
  }
  return dst;
}

// Generic pixel remap over both image and mask; f maps a destination pixel to its source.
template <class F>
void remap(Sample& s, F f) {
  const Image img = s.image;
  const Mask m = s.mask;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const auto [sx, sy] = f(x, y);
      for (int c = 0; c < 3; ++c) s.image.at(x, y, c) = img.at(sx, sy, c);
      s.mask.at(x, y) = m.at(sx, sy);
    }
  }
}

void color_jitter(Image& img, const AugmentParams& a) {
  const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
  double mean_gray = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const float* p = &img.rgb[3 * i];
    mean_gray += 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
  }
  mean_gray = mean_gray * a.brightness / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    float* p = &img.rgb[3 * i];
    double c[3];
    for (int k = 0; k < 3; ++k) c[k] = std::clamp(p[k] * a.brightness, 0.0, 1.0);
    for (int k = 0; k < 3; ++k) c[k] = std::clamp(mean_gray + a.contrast * (c[k] - mean_gray), 0.0, 1.0);
    const double gray = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
    for (int k = 0; k < 3; ++k) c[k] = std::clamp(gray + a.saturation * (c[k] - gray), 0.0, 1.0);
    Hsv h = rgb_to_hsv({static_cast<float>(c[0]), static_cast<float>(c[1]), static_cast<float>(c[2])});
    h.h += static_cast<float>(a.hue);
    const Rgb out = hsv_to_rgb(h);
    p[0] = out.r;
    p[1] = out.g;
    p[2] = out.b;
  }
}

LossCurve train_lora(const std::vector<const Sample*>& data, const model::MiniSam& model, const nk::ParamStore& base,
                     const lora::Expert& enc, lora::Expert* enc_train, lora::Expert& dec, const TrainConfig& cfg,
                     int stage) {
  std::vector<nk::Tensor*> params;
  if (enc_train) {
    auto& ep = enc_train->trainable_params();
    for (int i = 0; i < ep.size(); ++i) params.push_back(&ep[i]);
  }
  auto& dp = dec.trainable_params();
  for (int i = 0; i < dp.size(); ++i) params.push_back(&dp[i]);
  const int n_enc = enc_train ? enc_train->params().size() : 0;

  auto grad_fn = [&](const Example& ex, std::span<nk::Tensor> grads) {
    nk::Tape tape;
    model::BoundParams bp(tape, base, false);
    model::BoundParams ebp(tape, enc.params(), enc_train != nullptr);
    model::BoundParams dbp(tape, dec.params(), true);
    nk::Var loss = dice_bce_loss(model.forward(tape, bp, &ebp, &dbp, *ex.image, ex.box), *ex.mask);
    tape.backward(loss);
    for (int i = 0; i < n_enc; ++i) grads[static_cast<std::size_t>(i)] += tape.grad(ebp[i]);
    for (int i = 0; i < dbp.size(); ++i) grads[static_cast<std::size_t>(n_enc + i)] += tape.grad(dbp[i]);
    return static_cast<double>(loss.value()[0]);
  };
  auto loss_fn = [&](const Example& ex) {
    const auto logits = model.predict(base, *ex.image, ex.box, &enc.params(), &dec.params());
    return dice_bce(logits.logits, *ex.mask).total();
  };
  return optimize(data, cfg, cfg.lr_lora, params, grad_fn, loss_fn, stage);
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 0 || batch < 1) throw std::invalid_argument("epochs must be >= 0 and batch >= 1");
  if (!(lr_lora > 0) || !(lr_full > 0)) throw std::invalid_argument("learning rates must be positive");
  if (jitter_max < 0) throw std::invalid_argument("jitter_max must be >= 0");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},   {"batch", c.batch},           {"lr_lora", c.lr_lora}, {"lr_full", c.lr_full},
       {"jitter_max", c.jitter_max}, {"augment", c.augment}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.batch = j.value("batch", d.batch);
  c.lr_lora = j.value("lr_lora", d.lr_lora);
  c.lr_full = j.value("lr_full", d.lr_full);
  c.jitter_max = j.value("jitter_max", d.jitter_max);
  c.augment = j.value("augment", d.augment);
  c.seed = j.value("seed", d.seed);
  c.validate();
}

BoxPrompt simulate_prompt(const Mask& gt, int jitter_max, nk::Rng& rng) {
  if (jitter_max < 0) throw std::invalid_argument("jitter_max must be >= 0");
  BoxPrompt b = tight_bbox(gt);
  b.x_min = std::max(0, b.x_min - rng.uniform_int(0, jitter_max));
  b.y_min = std::max(0, b.y_min - rng.uniform_int(0, jitter_max));
  b.x_max = std::min(gt.width, b.x_max + rng.uniform_int(0, jitter_max));
  b.y_max = std::min(gt.height, b.y_max + rng.uniform_int(0, jitter_max));
  return b;
}

AugmentParams draw_augment(nk::Rng& rng, int image_size, double p) {
  AugmentParams a;
  if (rng.bernoulli(p)) {
    a.crop = true;
    a.crop_size = rng.uniform_int(image_size * 3 / 4, image_size - 1);
    a.crop_x = rng.uniform_int(0, image_size - a.crop_size);
    a.crop_y = rng.uniform_int(0, image_size - a.crop_size);
  }
  a.hflip = rng.bernoulli(p);
  a.vflip = rng.bernoulli(p);
  if (rng.bernoulli(p)) a.rot90 = rng.bernoulli(0.5) ? 1 : 3;
  if (rng.bernoulli(p)) {
    a.color = true;
    a.brightness = rng.uniform(0.8, 1.2);
    a.contrast = rng.uniform(0.8, 1.2);
    a.saturation = rng.uniform(0.8, 1.2);
    a.hue = rng.uniform(-0.1, 0.1);
  }
  return a;
}

Sample apply_augment(const Sample& in, const AugmentParams& a) {
  Sample s = in;
  const int w = s.image.width;
  if (s.image.width != s.image.height || s.mask.width != w || s.mask.height != w) {
    throw std::invalid_argument("augment expects square images with matching masks");
  }
  if (a.crop) {
    Mask m = resize_nearest(s.mask, a.crop_x, a.crop_y, a.crop_size, w);
    if (m.count() >= 10) {
      s.image = resize_bilinear(s.image, a.crop_x, a.crop_y, a.crop_size, w);
      s.mask = std::move(m);
    }
  }
  if (a.hflip) remap(s, [w](int x, int y) { return std::pair{w - 1 - x, y}; });
  if (a.vflip) remap(s, [w](int x, int y) { return std::pair{x, w - 1 - y}; });
  if (a.rot90 == 1) remap(s, [w](int x, int y) { return std::pair{w - 1 - y, x}; });
  if (a.rot90 == 3) remap(s, [w](int x, int y) { return std::pair{y, w - 1 - x}; });
  if (a.color) color_jitter(s.image, a);
  return s;
}

void LossCurve::append_csv(const std::filesystem::path& path) const {
  const bool fresh = !std::filesystem::exists(path);
  std::ofstream f(path, std::ios::app);
  if (!f) throw std::runtime_error("cannot append to " + path.string());
  if (fresh) f << "stage,epoch,loss\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.9g", r.loss);
    f << r.stage << "," << r.epoch << "," << buf << "\n";
  }
}

LossCurve optimize(const std::vector<const Sample*>& data, const TrainConfig& cfg, double lr,
                   std::span<nk::Tensor* const> params, const SampleGrad& sample_grad, const SampleLoss& sample_loss,
                   int stage, const Regularizer& regularizer) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("cannot train on an empty dataset");

  // Fixed probe batch: the first few samples with one seeded prompt each.
  nk::Rng fixed_rng(nk::Rng::mix(cfg.seed, kSaltFixed));
  std::vector<Example> probe;
  for (std::size_t i = 0; i < std::min<std::size_t>(kFixedBatch, data.size()); ++i) {
    probe.push_back({&data[i]->image, &data[i]->mask, simulate_prompt(data[i]->mask, cfg.jitter_max, fixed_rng)});
  }
  auto probe_loss = [&] {
    double s = 0;
    for (const auto& ex : probe) s += sample_loss(ex);
    return s / static_cast<double>(probe.size());
  };

  LossCurve curve;
  curve.rows.push_back({stage, 0, probe_loss()});

  nk::AdamState adam(lr);
  std::vector<nk::Tensor> grads;
  for (auto* p : params) grads.emplace_back(p->shape());

  nk::Rng rng(nk::Rng::mix(nk::Rng::mix(cfg.seed, kSaltLoop), static_cast<std::uint64_t>(stage)));
  std::vector<std::size_t> order(data.size());
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order.begin(), order.end());
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      for (auto& g : grads) g.fill(0);
      for (std::size_t k = start; k < end; ++k) {
        const Sample& s = *data[order[k]];
        if (cfg.augment) {
          const Sample aug = augment(s, rng);
          sample_grad({&aug.image, &aug.mask, simulate_prompt(aug.mask, cfg.jitter_max, rng)}, grads);
        } else {
          sample_grad({&s.image, &s.mask, simulate_prompt(s.mask, cfg.jitter_max, rng)}, grads);
        }
      }
      const nk::real inv = nk::real(1) / static_cast<nk::real>(end - start);
      for (auto& g : grads)
        for (auto& v : g.data()) v *= inv;
      if (regularizer) regularizer(grads);
      nk::adam_step(params, grads, adam);
    }
    curve.rows.push_back({stage, epoch, probe_loss()});
  }
  return curve;
}

LossCurve train_first_task(const std::vector<const Sample*>& data, const model::MiniSam& model,
                           const nk::ParamStore& base, lora::ExpertPool& pool, const TrainConfig& cfg) {
  if (!pool.empty() || pool.has_encoder()) throw std::logic_error("train_first_task: the expert pool is not empty");
  if (data.empty()) throw std::invalid_argument("train_first_task: empty dataset");
  const auto& mc = model.config();
  auto enc = lora::Expert::init(mc, lora::ExpertKind::encoder, 1, nk::Rng::mix(cfg.seed, kSaltEncInit));
  auto dec = lora::Expert::init(mc, lora::ExpertKind::decoder, 1, nk::Rng::mix(cfg.seed, kSaltDecInit));
  LossCurve curve = train_lora(data, model, base, enc, &enc, dec, cfg, 1);
  enc.freeze();
  dec.freeze();
  pool.set_encoder(std::move(enc));
  pool.push_decoder(std::move(dec));
  return curve;
}

LossCurve train_subsequent_task(const std::vector<const Sample*>& data, const model::MiniSam& model,
                                const nk::ParamStore& base, lora::ExpertPool& pool, const TrainConfig& cfg) {
  if (pool.empty() || !pool.has_encoder()) throw std::logic_error("train_subsequent_task: no predecessor expert");
  if (data.empty()) throw std::invalid_argument("train_subsequent_task: empty dataset");
  const int task = pool.size() + 1;
  auto dec = pool.decoder(task - 1).clone_for_task(task);
  LossCurve curve = train_lora(data, model, base, pool.encoder(), nullptr, dec, cfg, task);
  dec.freeze();
  pool.push_decoder(std::move(dec));
  return curve;
}

bool is_finetunable(const std::string& name) { return !model::MiniSam::is_prompt_encoder_param(name); }

nk::ParamStore pretrain(const std::vector<const Sample*>& data, const model::MiniSam& model, const PretrainConfig& pc,
                        LossCurve* curve_out) {
  nk::ParamStore base = model.init_params(nk::Rng::mix(pc.seed, 0xba5e));
  // The prompt encoder stays at its random draw; everything else learns.
  std::vector<int> idx;
  std::vector<nk::Tensor*> params;
  for (int i = 0; i < base.size(); ++i) {
    if (!is_finetunable(base.name(i))) continue;
    idx.push_back(i);
    params.push_back(&base[i]);
  }
  auto grad_fn = [&](const Example& ex, std::span<nk::Tensor> grads) {
    nk::Tape tape;
    model::BoundParams bp(tape, base, [&](int i) { return is_finetunable(base.name(i)); });
    nk::Var loss = dice_bce_loss(model.forward(tape, bp, nullptr, nullptr, *ex.image, ex.box), *ex.mask);
    tape.backward(loss);
    for (std::size_t k = 0; k < idx.size(); ++k) grads[k] += tape.grad(bp[idx[k]]);
    return static_cast<double>(loss.value()[0]);
  };
  auto loss_fn = [&](const Example& ex) {
    return dice_bce(model.predict(base, *ex.image, ex.box, nullptr, nullptr).logits, *ex.mask).total();
  };
  TrainConfig tc;
  tc.epochs = pc.epochs;
  tc.batch = pc.batch;
  tc.jitter_max = pc.jitter_max;
  tc.seed = pc.seed;
  tc.augment = true;
  LossCurve c = optimize(data, tc, pc.lr, params, grad_fn, loss_fn, 0);
  if (curve_out) *curve_out = std::move(c);
  return base;
}

std::vector<const Sample*> pointers(const std::vector<Sample>& v) {
  std::vector<const Sample*> out;
  out.reserve(v.size());
  for (const auto& s : v) out.push_back(&s);
  return out;
}

}  // namespace evosam::trainer
