#include "evosam/matcher/matcher.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "evosam/numkit/params.hpp"
#include "evosam/numkit/rng.hpp"
#include "json.hpp"

namespace evosam::matcher {

namespace {

// Rows: output dims; built once from the fixed seed.
const Eigen::MatrixXd& projection() {
  static const Eigen::MatrixXd p = [] {
    const int in = kCropSize * kCropSize * 3;
    Eigen::MatrixXd m(kProjDims, in);
    nk::Rng rng(kProjectionSeed);
    const double s = 1.0 / std::sqrt(static_cast<double>(in));
    for (int i = 0; i < kProjDims; ++i)
      for (int j = 0; j < in; ++j) m(i, j) = s * rng.normal();
    return m;
  }();
  return p;
}

void write_f64(std::ofstream& f, const Eigen::MatrixXd& m) {
  // Column-major doubles; hosts are little-endian.
  f.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
}

nk::Tensor to_tensor(const Eigen::MatrixXd& m) {
  nk::Tensor t({static_cast<int>(m.rows()), static_cast<int>(m.cols())});
  for (int r = 0; r < m.rows(); ++r)
    for (int c = 0; c < m.cols(); ++c) t.at(r, c) = static_cast<nk::real>(m(r, c));
  return t;
}

}  // namespace

Image crop_square(const Image& x, const BoxPrompt& box) {
  if (!box.valid_for(x.width, x.height)) throw InvalidBox("roi_feature: box is empty or outside the image");
  const int side = std::max(box.width(), box.height());
  Image out(kCropSize, kCropSize);
  const double scale = static_cast<double>(side) / kCropSize;
  // Bilinear over the padded square; samples outside the box read zero.
  auto px = [&](int sx, int sy, int c) -> double {
    if (sx < 0 || sy < 0 || sx >= box.width() || sy >= box.height()) return 0.0;
    return x.at(box.x_min + sx, box.y_min + sy, c);
  };
  for (int y = 0; y < kCropSize; ++y) {
    const double fy = std::max(0.0, (y + 0.5) * scale - 0.5);
    const int iy = static_cast<int>(fy);
    const double wy = fy - iy;
    for (int xx = 0; xx < kCropSize; ++xx) {
      const double fx = std::max(0.0, (xx + 0.5) * scale - 0.5);
      const int ix = static_cast<int>(fx);
      const double wx = fx - ix;
      for (int c = 0; c < 3; ++c) {
        // Clamp the second tap to the last valid pixel of the box so that the
        // crop interior never blends with padding.
        const int ix1 = std::min(ix + 1, std::max(box.width() - 1, ix));
        const int iy1 = std::min(iy + 1, std::max(box.height() - 1, iy));
        const double top = px(ix, iy, c) * (1 - wx) + px(ix1, iy, c) * wx;
        const double bot = px(ix, iy1, c) * (1 - wx) + px(ix1, iy1, c) * wx;
        out.at(xx, y, c) = static_cast<float>(top * (1 - wy) + bot * wy);
      }
    }
  }
  return out;
}

Feature raw_feature(const Image& x, const BoxPrompt& box) {
  const Image crop = crop_square(x, box);
  Feature h = Feature::Zero(kFeatureDim);

  // Channel statistics over the box pixels themselves (not the padding).
  const double n = static_cast<double>(box.width()) * box.height();
  for (int c = 0; c < 3; ++c) {
    double s = 0, s2 = 0;
    for (int y = box.y_min; y < box.y_max; ++y)
      for (int xx = box.x_min; xx < box.x_max; ++xx) s += x.at(xx, y, c);
    const double mean = s / n;
    for (int y = box.y_min; y < box.y_max; ++y)
      for (int xx = box.x_min; xx < box.x_max; ++xx) s2 += (x.at(xx, y, c) - mean) * (x.at(xx, y, c) - mean);
    h(2 * c) = mean - 0.5;
    h(2 * c + 1) = std::sqrt(s2 / n);
  }

  const int cell = kCropSize / 8;
  for (int ty = 0; ty < 8; ++ty) {
    for (int tx = 0; tx < 8; ++tx) {
      double g = 0;
      for (int y = ty * cell; y < (ty + 1) * cell; ++y)
        for (int xx = tx * cell; xx < (tx + 1) * cell; ++xx)
          g += 0.299 * crop.at(xx, y, 0) + 0.587 * crop.at(xx, y, 1) + 0.114 * crop.at(xx, y, 2);
      h(kStatDims + ty * 8 + tx) = g / (cell * cell) - 0.5;
    }
  }

  Eigen::VectorXd flat(kCropSize * kCropSize * 3);
  for (std::size_t i = 0; i < crop.rgb.size(); ++i) flat(static_cast<Eigen::Index>(i)) = crop.rgb[i] - 0.5;
  h.segment(kStatDims + kThumbDims, kProjDims) = projection() * flat;
  return h;
}

Feature roi_feature(const Image& x, const BoxPrompt& box) {
  Feature h = raw_feature(x, box);
  const double norm = h.norm();
  if (norm > 0) h /= norm;
  return h;
}

std::string to_string(LabelScheme s) { return s == LabelScheme::task ? "task" : "subclass"; }

LabelScheme label_scheme_from_string(const std::string& s) {
  if (s == "task") return LabelScheme::task;
  if (s == "subclass") return LabelScheme::subclass;
  throw std::invalid_argument("unknown label scheme '" + s + "'");
}

MatcherState::MatcherState(double lambda, LabelScheme scheme, int feature_dim)
    : lambda_(lambda), scheme_(scheme), g_(Eigen::MatrixXd::Zero(feature_dim, feature_dim)),
      c_(Eigen::MatrixXd::Zero(feature_dim, 0)) {
  if (!(lambda > 0)) throw std::invalid_argument("ridge lambda must be positive");
  if (feature_dim < 1) throw std::invalid_argument("feature dimension must be positive");
}

void MatcherState::set_lambda(double l) {
  if (!(l > 0)) throw std::invalid_argument("ridge lambda must be positive");
  lambda_ = l;
  solved_ = false;
}

int MatcherState::add_label(int task) {
  c_.conservativeResize(Eigen::NoChange, c_.cols() + 1);
  c_.col(c_.cols() - 1).setZero();
  tau_.push_back(task);
  solved_ = false;
  return static_cast<int>(c_.cols()) - 1;
}

int MatcherState::label_for(int task, int category) {
  const auto key = scheme_ == LabelScheme::task ? std::pair{task, 0} : std::pair{task, category};
  if (auto it = label_of_.find(key); it != label_of_.end()) return it->second;
  const int label = add_label(task);
  label_of_[key] = label;
  return label;
}

void MatcherState::accumulate(const Feature& h, int label) {
  if (h.size() != g_.rows()) {
    throw nk::ShapeError("matcher: feature has " + std::to_string(h.size()) + " dims, state expects " +
                         std::to_string(g_.rows()));
  }
  if (label < 0 || label >= labels()) throw std::out_of_range("matcher: unknown label " + std::to_string(label));
  g_.selfadjointView<Eigen::Lower>().rankUpdate(h);
  g_.triangularView<Eigen::StrictlyUpper>() = g_.transpose();
  c_.col(label) += h;
  solved_ = false;
}

void MatcherState::solve() {
  if (labels() == 0) throw UnsolvedError("matcher: no labels accumulated");
  Eigen::MatrixXd a = g_;
  a.diagonal().array() += lambda_;
  Eigen::LLT<Eigen::MatrixXd> llt(a);
  if (llt.info() != Eigen::Success) throw std::runtime_error("matcher: Cholesky factorization failed");
  w_ = llt.solve(c_);
  solved_ = true;
}

double MatcherState::residual() const {
  if (!solved_) throw UnsolvedError("matcher: residual of an unsolved state");
  Eigen::MatrixXd a = g_;
  a.diagonal().array() += lambda_;
  const double cn = c_.norm();
  return cn > 0 ? (a * w_ - c_).norm() / cn : (a * w_).norm();
}

Eigen::VectorXd MatcherState::scores(const Feature& h) const {
  if (!solved_) throw UnsolvedError("matcher: predict before solve");
  if (h.size() != w_.rows()) throw nk::ShapeError("matcher: feature dimension mismatch");
  return w_.transpose() * h;
}

Prediction MatcherState::predict(const Feature& h) const {
  const Eigen::VectorXd s = scores(h);
  int best = 0;
  for (int i = 1; i < s.size(); ++i)
    if (s(i) > s(best)) best = i;
  return {best, tau_[static_cast<std::size_t>(best)]};
}

void MatcherState::save(const std::filesystem::path& stem) const {
  nk::ParamStore ps;
  ps.add("G", to_tensor(g_));
  ps.add("C", to_tensor(c_));
  if (solved_) ps.add("W", to_tensor(w_));
  auto with_ext = [&](const char* ext) { return std::filesystem::path(stem.string() + ext); };
  nk::save_checkpoint(ps, with_ext(".bin"));
  {
    std::ofstream f(with_ext(".f64"), std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + with_ext(".f64").string());
    write_f64(f, g_);
    write_f64(f, c_);
  }
  nlohmann::json keys = nlohmann::json::array();
  for (const auto& [k, v] : label_of_) keys.push_back({k.first, k.second, v});
  const nlohmann::json j = {{"lambda", lambda_},        {"scheme", to_string(scheme_)},
                            {"tau", tau_},              {"labels", keys},
                            {"feature_dim", g_.rows()}, {"feature_version", kFeatureVersion},
                            {"solved", solved_}};
  std::ofstream f(with_ext(".json"));
  if (!f) throw std::runtime_error("cannot write " + with_ext(".json").string());
  f << j.dump(1) << "\n";
}

MatcherState MatcherState::load(const std::filesystem::path& stem) {
  auto with_ext = [&](const char* ext) { return std::filesystem::path(stem.string() + ext); };
  std::ifstream jf(with_ext(".json"));
  if (!jf) throw std::runtime_error("cannot read " + with_ext(".json").string());
  const auto j = nlohmann::json::parse(jf);
  if (j.at("feature_version").get<int>() != kFeatureVersion) throw std::runtime_error("matcher feature version mismatch");
  const int f = j.at("feature_dim").get<int>();
  MatcherState st(j.at("lambda").get<double>(), label_scheme_from_string(j.at("scheme").get<std::string>()), f);
  st.tau_ = j.at("tau").get<std::vector<int>>();
  for (const auto& e : j.at("labels")) st.label_of_[{e[0].get<int>(), e[1].get<int>()}] = e[2].get<int>();
  const auto k = static_cast<Eigen::Index>(st.tau_.size());
  st.c_.resize(f, k);
  std::ifstream bf(with_ext(".f64"), std::ios::binary);
  if (!bf) throw std::runtime_error("cannot read " + with_ext(".f64").string());
  bf.read(reinterpret_cast<char*>(st.g_.data()), static_cast<std::streamsize>(st.g_.size() * sizeof(double)));
  bf.read(reinterpret_cast<char*>(st.c_.data()), static_cast<std::streamsize>(st.c_.size() * sizeof(double)));
  if (!bf) throw std::runtime_error("truncated matcher statistics in " + with_ext(".f64").string());
  if (j.value("solved", false)) st.solve();
  return st;
}

double sweep_lambda(const std::vector<Feature>& features, const std::vector<int>& labels, const std::vector<int>& tau,
                    LabelScheme scheme, const std::vector<double>& grid, double preferred) {
  if (features.size() != labels.size() || features.size() < 2) throw std::invalid_argument("sweep_lambda: need >= 2 samples");
  if (grid.empty()) throw std::invalid_argument("sweep_lambda: empty grid");
  const std::size_t n_hold = std::max<std::size_t>(1, features.size() / 10);
  const std::size_t n_fit = features.size() - n_hold;
  double best = grid.front();
  int best_hits = -1;
  for (double l : grid) {
    MatcherState st(l, scheme, static_cast<int>(features.front().size()));
    for (int t : tau) st.add_label(t);
    for (std::size_t i = 0; i < n_fit; ++i) st.accumulate(features[i], labels[i]);
    st.solve();
    int hits = 0;
    for (std::size_t i = n_fit; i < features.size(); ++i) hits += st.predict(features[i]).label == labels[i];
    const bool closer = std::abs(std::log(l / preferred)) < std::abs(std::log(best / preferred));
    if (hits > best_hits || (hits == best_hits && closer)) {
      best = l;
      best_hits = hits;
    }
  }
  return best;
}

RoutedMask segment_routed(const model::MiniSam& m, const nk::ParamStore& base, const lora::ExpertPool& pool,
                          const MatcherState& state, const Image& x, const BoxPrompt& box) {
  if (pool.empty() || !pool.has_encoder()) throw std::logic_error("segment_routed: empty expert pool");
  Prediction route{0, 1};
  if (pool.size() > 1) {
    route = state.predict(x, box);
    if (route.task < 1 || route.task > pool.size()) {
      throw std::out_of_range("segment_routed: matcher chose task " + std::to_string(route.task) + " but the pool has " +
                              std::to_string(pool.size()) + " experts");
    }
  }
  return {m.predict(base, x, box, &pool.encoder().params(), &pool.decoder(route.task).params()), route};
}

}  // namespace evosam::matcher
