#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "evosam/lora/lora.hpp"
#include "evosam/model/model.hpp"

namespace evosam::matcher {

// Feature layout: per-channel mean/std of the crop, an 8x8 grey thumbnail and
// a seeded random projection of the padded 32x32 crop. Intensities are
// centred on 0.5 everywhere, otherwise the shared offset swamps the cosine
// geometry.
inline constexpr int kCropSize = 32;
inline constexpr int kStatDims = 6;
inline constexpr int kThumbDims = 64;
inline constexpr int kProjDims = 96;
inline constexpr int kFeatureDim = kStatDims + kThumbDims + kProjDims;
inline constexpr std::uint64_t kProjectionSeed = 0x5eed'f00d;
inline constexpr int kFeatureVersion = 2;

using Feature = Eigen::VectorXd;

/// The box region zero-padded to a square (anchored top-left) and resized to
/// 32x32 bilinearly. Throws InvalidBox on a zero-area or out-of-image box.
Image crop_square(const Image& x, const BoxPrompt& box);

/// Unnormalized features (used by tests to look at individual components).
Feature raw_feature(const Image& x, const BoxPrompt& box);
/// raw_feature scaled to unit Euclidean norm (left at zero for an all-0.5 crop).
Feature roi_feature(const Image& x, const BoxPrompt& box);

enum class LabelScheme { task, subclass };
std::string to_string(LabelScheme s);
LabelScheme label_scheme_from_string(const std::string& s);

class UnsolvedError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct Prediction {
  int label;
  int task;
};

/// Streaming ridge-regression router. Only the sufficient statistics
/// G = sum h h^T and C = sum h y^T are kept, so memory is O(F^2 + F K).
class MatcherState {
 public:
  explicit MatcherState(double lambda = 10.0, LabelScheme scheme = LabelScheme::task, int feature_dim = kFeatureDim);

  double lambda() const { return lambda_; }
  void set_lambda(double l);
  LabelScheme scheme() const { return scheme_; }
  int feature_dim() const { return static_cast<int>(g_.rows()); }
  int labels() const { return static_cast<int>(c_.cols()); }

  /// Label index for (task, category), assigned in order of first appearance.
  int label_for(int task, int category);
  /// Task index of a label.
  int task_of(int label) const { return tau_.at(static_cast<std::size_t>(label)); }
  const std::vector<int>& tau() const { return tau_; }

  /// G += h h^T; C += h e_label^T. Columns of C grow as new labels appear.
  void accumulate(const Feature& h, int label);
  void accumulate(const Feature& h, int task, int category) { accumulate(h, label_for(task, category)); }
  /// Registers a label without a sample (C gains a zero column). Used when
  /// labels are fixed up front.
  int add_label(int task);

  /// W = (G + lambda I)^-1 C by Cholesky.
  void solve();
  bool solved() const { return solved_; }

  Eigen::VectorXd scores(const Feature& h) const;
  /// argmax of scores, lowest label on ties.
  Prediction predict(const Feature& h) const;
  Prediction predict(const Image& x, const BoxPrompt& box) const { return predict(roi_feature(x, box)); }

  const Eigen::MatrixXd& gram() const { return g_; }
  const Eigen::MatrixXd& prototypes() const { return c_; }
  const Eigen::MatrixXd& weights() const { return w_; }
  /// ||(G + lambda I) W - C||_F / ||C||_F.
  double residual() const;

  /// `<stem>.bin` (numkit checkpoint of G, C, W), `<stem>.f64` (exact
  /// little-endian float64 G and C) and `<stem>.json` (lambda, tau, scheme, version).
  void save(const std::filesystem::path& stem) const;
  static MatcherState load(const std::filesystem::path& stem);

 private:
  double lambda_;
  LabelScheme scheme_;
  Eigen::MatrixXd g_;
  Eigen::MatrixXd c_;
  Eigen::MatrixXd w_;
  std::vector<int> tau_;
  std::map<std::pair<int, int>, int> label_of_;
  bool solved_ = false;
};

/// Picks lambda from a log grid by routing accuracy on the trailing 10% of
/// (feature, label) pairs, training on the rest. Ties go to the grid value
/// closest (in log scale) to `preferred`.
double sweep_lambda(const std::vector<Feature>& features, const std::vector<int>& labels, const std::vector<int>& tau,
                    LabelScheme scheme, const std::vector<double>& grid = {0.1, 1.0, 10.0, 100.0, 1000.0},
                    double preferred = 10.0);

/// Mask from the decoder expert the matcher picks (a one-expert pool always uses it).
struct RoutedMask {
  model::MaskLogits logits;
  Prediction route;
};
RoutedMask segment_routed(const model::MiniSam& m, const nk::ParamStore& base, const lora::ExpertPool& pool,
                          const MatcherState& state, const Image& x, const BoxPrompt& box);

}  // namespace evosam::matcher
