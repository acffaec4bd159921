#include "evosam/model/model.hpp"

#include <cmath>
#include <numbers>

#include "evosam/lora/lora.hpp"
#include "evosam/numkit/rng.hpp"

namespace evosam::model {

using nk::Tensor;
using nk::Var;

Mask MaskLogits::binarize() const {
  const int s = logits.rows();
  Mask m(logits.cols(), s);
  for (std::size_t i = 0; i < logits.size(); ++i) m.px[i] = logits[i] > nk::real(0) ? 1 : 0;
  return m;
}

BoundParams::BoundParams(nk::Tape& tape, const nk::ParamStore& store, bool requires_grad) {
  vars_.reserve(static_cast<std::size_t>(store.size()));
  for (int i = 0; i < store.size(); ++i) vars_.push_back(tape.leaf(store[i], requires_grad));
}

BoundParams::BoundParams(nk::Tape& tape, const nk::ParamStore& store, const std::function<bool(int)>& requires_grad) {
  vars_.reserve(static_cast<std::size_t>(store.size()));
  for (int i = 0; i < store.size(); ++i) vars_.push_back(tape.leaf(store[i], requires_grad(i)));
}

Var attention(Var q_in, Var k_in, Var v_in, const AttentionWeights& w, const LoraVars* q_lora, const LoraVars* v_lora,
              int heads) {
  Var q = nk::matmul(q_in, w.wq);
  if (q_lora) q = nk::add(q, nk::matmul(nk::matmul(q_in, q_lora->a), q_lora->b));
  Var k = nk::matmul(k_in, w.wk);
  Var v = nk::matmul(v_in, w.wv);
  if (v_lora) v = nk::add(v, nk::matmul(nk::matmul(v_in, v_lora->a), v_lora->b));
  return nk::matmul(nk::multihead_attention(q, k, v, heads), w.wo);
}

MiniSam::MiniSam(ModelConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  const int d = cfg_.d_model;
  const int pdim = cfg_.patch * cfg_.patch * cfg_.channels;
  const int hidden = cfg_.mlp_ratio * d;
  const int hc = cfg_.head_channels;

  patch_w_ = declare("enc.patch.w", {pdim, d}, Spec::normal, 1.0 / std::sqrt(pdim));
  patch_b_ = declare("enc.patch.b", {d}, Spec::zeros);
  pos_ = declare("enc.pos", {cfg_.tokens(), d}, Spec::normal, 0.02);
  for (int l = 0; l < cfg_.enc_layers; ++l) {
    const std::string p = "enc." + std::to_string(l);
    EncLayer layer;
    layer.ln1 = declare_norm(p + ".ln1");
    layer.attn = declare_attn(p + ".attn");
    layer.ln2 = declare_norm(p + ".ln2");
    layer.mlp = declare_mlp(p + ".mlp", hidden);
    enc_.push_back(layer);
  }
  enc_norm_ = declare_norm("enc.ln");

  freq_ = declare("pr.freq", {2, d / 2}, Spec::normal, 2.0);
  corner_ = declare("pr.corner", {2, d}, Spec::normal, 0.5);

  mask_token_ = declare("dec.mask_token", {1, d}, Spec::normal, 0.5);
  for (int b = 0; b < cfg_.dec_layers; ++b) {
    const std::string p = "dec." + std::to_string(b);
    DecBlock blk;
    blk.self_attn = declare_attn(p + ".self");
    blk.ln1 = declare_norm(p + ".ln1");
    blk.t2i = declare_attn(p + ".t2i");
    blk.ln2 = declare_norm(p + ".ln2");
    blk.mlp = declare_mlp(p + ".mlp", hidden);
    blk.ln3 = declare_norm(p + ".ln3");
    blk.i2t = declare_attn(p + ".i2t");
    blk.ln4 = declare_norm(p + ".ln4");
    dec_.push_back(blk);
  }

  up1_w_ = declare("head.up1.w", {d, d / 2}, Spec::normal, 1.0 / std::sqrt(d));
  up1_b_ = declare("head.up1.b", {d / 2}, Spec::zeros);
  up2_w_ = declare("head.up2.w", {d / 2, hc}, Spec::normal, 1.0 / std::sqrt(d / 2));
  up2_b_ = declare("head.up2.b", {hc}, Spec::zeros);
  skip_w_ = declare("head.skip.w", {4, hc}, Spec::normal, 1.0);
  skip_b_ = declare("head.skip.b", {hc}, Spec::zeros);
  fine_w_ = declare("head.fine.w", {hc, hc}, Spec::normal, 1.0 / std::sqrt(hc));
  fine_b_ = declare("head.fine.b", {hc}, Spec::zeros);
  film_w_ = declare("head.film.w", {d, hc}, Spec::normal, 0.5 / std::sqrt(d));
  hyper_w_ = declare("head.hyper.w", {d, hc}, Spec::normal, 1.0 / std::sqrt(d));
  hyper_b_ = declare("head.hyper.b", {hc}, Spec::zeros);
}

int MiniSam::declare(std::string name, nk::Shape shape, Spec::Init init, double std) {
  specs_.push_back(Spec{std::move(name), std::move(shape), init, std});
  return static_cast<int>(specs_.size()) - 1;
}

MiniSam::AttnIdx MiniSam::declare_attn(const std::string& prefix) {
  const int d = cfg_.d_model;
  const double s = 1.0 / std::sqrt(d);
  AttnIdx a;
  a.wq = declare(prefix + ".wq", {d, d}, Spec::normal, s);
  a.wk = declare(prefix + ".wk", {d, d}, Spec::normal, s);
  a.wv = declare(prefix + ".wv", {d, d}, Spec::normal, s);
  a.wo = declare(prefix + ".wo", {d, d}, Spec::normal, 0.5 * s);
  return a;
}

MiniSam::NormIdx MiniSam::declare_norm(const std::string& prefix) {
  NormIdx n;
  n.g = declare(prefix + ".g", {cfg_.d_model}, Spec::ones);
  n.b = declare(prefix + ".b", {cfg_.d_model}, Spec::zeros);
  return n;
}

MiniSam::MlpIdx MiniSam::declare_mlp(const std::string& prefix, int hidden) {
  const int d = cfg_.d_model;
  MlpIdx m;
  m.w1 = declare(prefix + ".w1", {d, hidden}, Spec::normal, 1.0 / std::sqrt(d));
  m.b1 = declare(prefix + ".b1", {hidden}, Spec::zeros);
  m.w2 = declare(prefix + ".w2", {hidden, d}, Spec::normal, 0.5 / std::sqrt(hidden));
  m.b2 = declare(prefix + ".b2", {d}, Spec::zeros);
  return m;
}

nk::ParamStore MiniSam::init_params(std::uint64_t seed) const {
  nk::Rng rng(seed);
  nk::ParamStore ps;
  for (const auto& s : specs_) {
    Tensor t(s.shape);
    switch (s.init) {
      case Spec::normal:
        for (auto& v : t.data()) v = static_cast<nk::real>(rng.normal(0.0, s.std));
        break;
      case Spec::ones:
        t.fill(1);
        break;
      case Spec::zeros:
        break;
    }
    ps.add(s.name, std::move(t));
  }
  return ps;
}

void MiniSam::check_params(const nk::ParamStore& base) const {
  if (base.size() != static_cast<int>(specs_.size())) {
    throw ConfigMismatch("base parameters hold " + std::to_string(base.size()) + " tensors, model expects " +
                         std::to_string(specs_.size()));
  }
  for (int i = 0; i < base.size(); ++i) {
    const auto& s = specs_[static_cast<std::size_t>(i)];
    if (base.name(i) != s.name || base[i].shape() != s.shape) {
      throw ConfigMismatch("parameter " + base.name(i) + nk::shape_str(base[i].shape()) + " does not match " + s.name +
                           nk::shape_str(s.shape));
    }
  }
}

void MiniSam::check_adapter(const nk::ParamStore& adapter, bool encoder) const {
  const auto kind = encoder ? lora::ExpertKind::encoder : lora::ExpertKind::decoder;
  const int slots = lora::attention_slots(cfg_, kind);
  const int d = cfg_.d_model, r = cfg_.lora_rank;
  if (adapter.size() != 4 * slots) {
    throw ConfigMismatch(lora::to_string(kind) + " adapter holds " + std::to_string(adapter.size()) +
                         " tensors, expected " + std::to_string(4 * slots));
  }
  for (int s = 0; s < slots; ++s) {
    const auto idx = lora::slot_index(s);
    for (int a : {idx.q_a, idx.v_a})
      if (adapter[a].shape() != nk::Shape{d, r}) throw ConfigMismatch("adapter A has wrong shape: " + adapter.name(a));
    for (int b : {idx.q_b, idx.v_b})
      if (adapter[b].shape() != nk::Shape{r, d}) throw ConfigMismatch("adapter B has wrong shape: " + adapter.name(b));
  }
}

AttentionWeights MiniSam::attn_vars(const BoundParams& p, const AttnIdx& a) const {
  return {p[a.wq], p[a.wk], p[a.wv], p[a.wo]};
}

Var MiniSam::mlp(const BoundParams& p, const MlpIdx& m, Var x) const {
  Var h = nk::gelu(nk::add_row(nk::matmul(x, p[m.w1]), p[m.b1]));
  return nk::add_row(nk::matmul(h, p[m.w2]), p[m.b2]);
}

Var MiniSam::norm(const BoundParams& p, const NormIdx& n, Var x) const { return nk::layernorm(x, p[n.g], p[n.b]); }

Var MiniSam::adapted_attention(const BoundParams& base, const AttnIdx& idx, const BoundParams* lora, int slot, Var q,
                               Var k, Var v) const {
  if (!lora) return attention(q, k, v, attn_vars(base, idx), nullptr, nullptr, cfg_.heads);
  const auto si = lora::slot_index(slot);
  const LoraVars lq{(*lora)[si.q_a], (*lora)[si.q_b]};
  const LoraVars lv{(*lora)[si.v_a], (*lora)[si.v_b]};
  return attention(q, k, v, attn_vars(base, idx), &lq, &lv, cfg_.heads);
}

Tensor MiniSam::patchify(const Image& x) const {
  if (x.width != cfg_.image_size || x.height != cfg_.image_size) {
    throw std::invalid_argument("image is " + std::to_string(x.width) + "x" + std::to_string(x.height) +
                                ", model expects " + std::to_string(cfg_.image_size) + "x" +
                                std::to_string(cfg_.image_size));
  }
  const int g = cfg_.grid(), p = cfg_.patch;
  Tensor t({g * g, p * p * 3});
  for (int gy = 0; gy < g; ++gy) {
    for (int gx = 0; gx < g; ++gx) {
      nk::real* row = t.ptr() + static_cast<std::size_t>(gy * g + gx) * p * p * 3;
      for (int y = 0; y < p; ++y)
        for (int xx = 0; xx < p; ++xx)
          for (int c = 0; c < 3; ++c) *row++ = static_cast<nk::real>(x.at(gx * p + xx, gy * p + y, c)) - nk::real(0.5);
    }
  }
  return t;
}

Tensor MiniSam::pixel_features(const Image& x) const {
  if (x.width != cfg_.image_size || x.height != cfg_.image_size) throw std::invalid_argument("image size mismatch");
  Tensor t({cfg_.pixels(), 3});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<nk::real>(x.rgb[i]) - nk::real(0.5);
  return t;
}

std::vector<nk::real> MiniSam::fourier(const Tensor& f, double x, double y) const {
  const int half = cfg_.d_model / 2;
  std::vector<nk::real> out(static_cast<std::size_t>(cfg_.d_model));
  for (int j = 0; j < half; ++j) {
    const double ang = 2.0 * std::numbers::pi * (x * f.at(0, j) + y * f.at(1, j));
    out[static_cast<std::size_t>(j)] = static_cast<nk::real>(std::sin(ang));
    out[static_cast<std::size_t>(j + half)] = static_cast<nk::real>(std::cos(ang));
  }
  return out;
}

Tensor MiniSam::image_pe(const Tensor& freq) const {
  const int g = cfg_.grid(), d = cfg_.d_model;
  Tensor pe({g * g, d});
  for (int y = 0; y < g; ++y) {
    for (int x = 0; x < g; ++x) {
      const auto f = fourier(freq, (x + 0.5) / g, (y + 0.5) / g);
      std::copy(f.begin(), f.end(), pe.ptr() + static_cast<std::size_t>(y * g + x) * d);
    }
  }
  return pe;
}

PromptEmbedding MiniSam::encode_prompt(const nk::ParamStore& base, const BoxPrompt& box) const {
  check_params(base);
  return prompt_from(base[freq_], base[corner_], box);
}

PromptEmbedding MiniSam::prompt_from(const Tensor& freq, const Tensor& corner, const BoxPrompt& box) const {
  const int s = cfg_.image_size, d = cfg_.d_model;
  if (!box.valid_for(s, s)) {
    throw InvalidBox("box (" + std::to_string(box.x_min) + "," + std::to_string(box.y_min) + ")-(" +
                     std::to_string(box.x_max) + "," + std::to_string(box.y_max) + ") is not inside a " +
                     std::to_string(s) + "x" + std::to_string(s) + " image");
  }
  PromptEmbedding pe{Tensor({2, d}), Tensor({cfg_.pixels(), 1})};
  const double corners[2][2] = {{static_cast<double>(box.x_min) / s, static_cast<double>(box.y_min) / s},
                                {static_cast<double>(box.x_max) / s, static_cast<double>(box.y_max) / s}};
  for (int k = 0; k < 2; ++k) {
    const auto f = fourier(freq, corners[k][0], corners[k][1]);
    for (int j = 0; j < d; ++j) pe.tokens.at(k, j) = f[static_cast<std::size_t>(j)] + corner.at(k, j);
  }
  for (int y = box.y_min; y < box.y_max; ++y)
    for (int x = box.x_min; x < box.x_max; ++x) pe.dense[static_cast<std::size_t>(y * s + x)] = 1;
  return pe;
}

Var MiniSam::encode(nk::Tape& tape, const BoundParams& base, const BoundParams* enc_lora, const Image& x) const {
  Var h = nk::add_row(nk::matmul(tape.constant(patchify(x)), base[patch_w_]), base[patch_b_]);
  h = nk::add(h, base[pos_]);
  for (int l = 0; l < cfg_.enc_layers; ++l) {
    const EncLayer& L = enc_[static_cast<std::size_t>(l)];
    Var n1 = norm(base, L.ln1, h);
    h = nk::add(h, adapted_attention(base, L.attn, enc_lora, l, n1, n1, n1));
    h = nk::add(h, mlp(base, L.mlp, norm(base, L.ln2, h)));
  }
  return norm(base, enc_norm_, h);
}

Var MiniSam::decode(nk::Tape& tape, const BoundParams& base, const BoundParams* dec_lora, Var image_tokens,
                    const Tensor& pixels, const PromptEmbedding& prompt) const {
  const int d = cfg_.d_model, g = cfg_.grid();
  if (image_tokens.value().shape() != nk::Shape{cfg_.tokens(), d} || pixels.shape() != nk::Shape{cfg_.pixels(), 3} ||
      prompt.tokens.shape() != nk::Shape{2, d} || prompt.dense.shape() != nk::Shape{cfg_.pixels(), 1}) {
    throw ConfigMismatch("decode: embedding or prompt shapes do not match the model config");
  }
  // Positional term for tokens: zero for the mask token, the prompt embedding for the corners.
  Tensor pe_init({3, d});
  std::copy(prompt.tokens.ptr(), prompt.tokens.ptr() + prompt.tokens.size(), pe_init.ptr() + d);
  Var tok_pe = tape.constant(std::move(pe_init));
  Var img_pe = tape.constant(image_pe(base[freq_].value()));

  Var tokens = nk::concat_rows({base[mask_token_], tape.constant(prompt.tokens)});
  Var src = image_tokens;
  for (int b = 0; b < cfg_.dec_layers; ++b) {
    const DecBlock& B = dec_[static_cast<std::size_t>(b)];
    Var q = nk::add(tokens, tok_pe);
    tokens = norm(base, B.ln1, nk::add(tokens, adapted_attention(base, B.self_attn, dec_lora, 3 * b, q, q, tokens)));
    q = nk::add(tokens, tok_pe);
    Var k = nk::add(src, img_pe);
    tokens = norm(base, B.ln2, nk::add(tokens, adapted_attention(base, B.t2i, dec_lora, 3 * b + 1, q, k, src)));
    tokens = norm(base, B.ln3, nk::add(tokens, mlp(base, B.mlp, tokens)));
    q = nk::add(src, img_pe);
    k = nk::add(tokens, tok_pe);
    src = norm(base, B.ln4, nk::add(src, adapted_attention(base, B.i2t, dec_lora, 3 * b + 2, q, k, tokens)));
  }

  // Coarse features stay on the token grid; pointwise maps commute with
  // nearest upsampling, so the three 2x steps come last.
  Var coarse = nk::gelu(nk::add_row(nk::matmul(src, base[up1_w_]), base[up1_b_]));
  coarse = nk::gelu(nk::add_row(nk::matmul(coarse, base[up2_w_]), base[up2_b_]));
  Var up = nk::upsample2x(coarse, g, g);
  up = nk::upsample2x(up, 2 * g, 2 * g);
  up = nk::upsample2x(up, 4 * g, 4 * g);

  Tensor pix({cfg_.pixels(), 4});
  for (int i = 0; i < cfg_.pixels(); ++i) {
    for (int c = 0; c < 3; ++c) pix.at(i, c) = pixels.at(i, c);
    pix.at(i, 3) = prompt.dense[static_cast<std::size_t>(i)];
  }
  Var skip = nk::add_row(nk::matmul(tape.constant(std::move(pix)), base[skip_w_]), base[skip_b_]);
  Var fine = nk::gelu(nk::add(up, skip));

  // The mask token both shifts the per-channel thresholds of the last pixel
  // layer and supplies the weights of the final dot product.
  Var mask_token = nk::slice_rows(tokens, 0, 1);
  Var film = nk::add_row(nk::matmul(mask_token, base[film_w_]), base[fine_b_]);
  fine = nk::gelu(nk::add_row(nk::matmul(fine, base[fine_w_]), film));

  Var hyper = nk::add_row(nk::matmul(mask_token, base[hyper_w_]), base[hyper_b_]);
  return nk::pixel_dot(fine, hyper);
}

Var MiniSam::forward(nk::Tape& tape, const BoundParams& base, const BoundParams* enc_lora, const BoundParams* dec_lora,
                     const Image& x, const BoxPrompt& box) const {
  // The prompt encoder is frozen everywhere, so it is evaluated off-tape.
  const PromptEmbedding prompt = prompt_from(base[freq_].value(), base[corner_].value(), box);
  Var tokens = encode(tape, base, enc_lora, x);
  return decode(tape, base, dec_lora, tokens, pixel_features(x), prompt);
}

ImageEmbedding MiniSam::encode_image(const nk::ParamStore& base, const Image& x, const nk::ParamStore* enc_lora) const {
  check_params(base);
  if (enc_lora) check_adapter(*enc_lora, true);
  nk::Tape tape;
  BoundParams bp(tape, base, false);
  BoundParams lp;
  if (enc_lora) lp = BoundParams(tape, *enc_lora, false);
  Var tokens = encode(tape, bp, enc_lora ? &lp : nullptr, x);
  return {tokens.value(), pixel_features(x)};
}

MaskLogits MiniSam::decode_mask(const nk::ParamStore& base, const ImageEmbedding& emb, const PromptEmbedding& prompt,
                                const nk::ParamStore* dec_lora) const {
  check_params(base);
  if (dec_lora) check_adapter(*dec_lora, false);
  nk::Tape tape;
  BoundParams bp(tape, base, false);
  BoundParams lp;
  if (dec_lora) lp = BoundParams(tape, *dec_lora, false);
  Var out = decode(tape, bp, dec_lora ? &lp : nullptr, tape.constant(emb.tokens), emb.pixels, prompt);
  return {out.value().reshaped({cfg_.image_size, cfg_.image_size})};
}

MaskLogits MiniSam::predict(const nk::ParamStore& base, const Image& x, const BoxPrompt& box,
                            const nk::ParamStore* enc_lora, const nk::ParamStore* dec_lora) const {
  return decode_mask(base, encode_image(base, x, enc_lora), encode_prompt(base, box), dec_lora);
}

}  // namespace evosam::model
