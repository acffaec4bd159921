#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <unistd.h>

#include "evosam/model/config.hpp"
#include "evosam/model/image.hpp"
#include "evosam/taskforge/taskforge.hpp"
#include "evosam/numkit/tape.hpp"
#include "evosam/numkit/tensor.hpp"

namespace testsupport {

using evosam::nk::real;
using evosam::nk::Tensor;

inline Tensor random_tensor(evosam::nk::Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> n(0.0, scale);
  for (auto& v : t.data()) v = static_cast<real>(n(rng));
  return t;
}

// Small but structurally complete model: 16x16 images, one layer each side.
inline evosam::ModelConfig tiny_config() {
  evosam::ModelConfig c;
  c.image_size = 16;
  c.d_model = 8;
  c.heads = 2;
  c.enc_layers = 1;
  c.dec_layers = 1;
  c.lora_rank = 2;
  c.mlp_ratio = 2;
  c.head_channels = 4;
  return c;
}

inline evosam::Image random_image(int size, std::mt19937_64& rng) {
  evosam::Image img(size, size);
  std::uniform_real_distribution<float> u(0.f, 1.f);
  for (auto& v : img.rgb) v = u(rng);
  return img;
}

inline evosam::Mask random_mask(int size, std::mt19937_64& rng, double p = 0.3) {
  evosam::Mask m(size, size);
  std::bernoulli_distribution b(p);
  for (auto& v : m.px) v = b(rng) ? 1 : 0;
  if (m.count() == 0) m.px[0] = 1;
  return m;
}

// Tiny task: white squares (kind 0) or red horizontal bars (kind 1) on grey noise.
inline std::vector<evosam::taskforge::Sample> tiny_task(int n, int kind, std::uint64_t seed, int size = 16) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pos(1, size - 7);
  std::uniform_real_distribution<float> noise(0.3f, 0.5f);
  std::vector<evosam::taskforge::Sample> out;
  for (int i = 0; i < n; ++i) {
    evosam::taskforge::Sample s;
    s.id = "s" + std::to_string(i);
    s.image = evosam::Image(size, size);
    s.mask = evosam::Mask(size, size);
    for (auto& v : s.image.rgb) v = noise(rng);
    const int x0 = pos(rng), y0 = pos(rng);
    const int w = kind == 0 ? 5 : 6, h = kind == 0 ? 5 : 2;
    for (int y = y0; y < y0 + h; ++y)
      for (int x = x0; x < x0 + w; ++x) {
        s.mask.at(x, y) = 1;
        for (int c = 0; c < 3; ++c) s.image.at(x, y, c) = kind == 0 || c == 0 ? 0.95f : 0.1f;
      }
    out.push_back(std::move(s));
  }
  return out;
}

/// A fresh directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path = std::filesystem::temp_directory_path() /
           ("evosam_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

/// Central-difference check of d f / d x for every element of every input.
/// `f` builds the scalar output on the given tape from leaf Vars.
struct GradCheckResult {
  double max_rel = 0;
  double max_abs = 0;
};

inline GradCheckResult grad_check(std::vector<Tensor> inputs,
                                  const std::function<evosam::nk::Var(evosam::nk::Tape&, std::vector<evosam::nk::Var>&)>& f,
                                  double step, double abs_floor) {
  using namespace evosam::nk;
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (auto& t : inputs) vars.push_back(tape.leaf(t, true));
    Var out = f(tape, vars);
    tape.backward(out);
    for (auto& v : vars) analytic.push_back(tape.grad(v));
  }
  auto eval = [&](const std::vector<Tensor>& in) {
    Tape tape;
    std::vector<Var> vars;
    for (auto& t : in) vars.push_back(tape.leaf(t, false));
    return static_cast<double>(f(tape, vars).value()[0]);
  };
  GradCheckResult r;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t e = 0; e < inputs[k].size(); ++e) {
      auto plus = inputs, minus = inputs;
      plus[k][e] += static_cast<real>(step);
      minus[k][e] -= static_cast<real>(step);
      const double num = (eval(plus) - eval(minus)) / (2 * step);
      const double ana = analytic[k][e];
      const double diff = std::abs(num - ana);
      r.max_abs = std::max(r.max_abs, diff);
      r.max_rel = std::max(r.max_rel, diff / std::max({std::abs(num), std::abs(ana), abs_floor}));
    }
  }
  return r;
}

}  // namespace testsupport
