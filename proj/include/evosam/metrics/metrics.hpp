#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "evosam/model/image.hpp"

namespace evosam::metrics {

/// 2|p n g| / (|p| + |g|); 1 when both are empty. Throws ShapeError.
double dice(const Mask& pred, const Mask& gt);
/// |p n g| / |p u g|; 1 when both are empty.
double iou(const Mask& pred, const Mask& gt);

/// Mean of per-image dice on [0, 1]. Throws std::invalid_argument when empty
/// or when the lists differ in length.
double mdice(const std::vector<Mask>& preds, const std::vector<Mask>& gts);
double mean(const std::vector<double>& values);

/// T x T table, row t = stage-t model, column i = task i; values on the 0-100
/// scale. NaN marks an entry not yet evaluated.
class MDiceMatrix {
 public:
  explicit MDiceMatrix(int tasks);
  /// Row-list constructor; row t may be shorter than T (the rest stays unset).
  static MDiceMatrix from_rows(const std::vector<std::vector<double>>& rows);

  int tasks() const { return t_; }
  double at(int stage, int task) const;  // 1-based
  void set(int stage, int task, double value);
  bool has(int stage, int task) const;
  std::vector<double> row(int stage) const;
  bool row_complete(int stage) const;

  /// Writes T rows of T comma-separated values with 6 decimals.
  void write_csv(const std::filesystem::path& path) const;
  static MDiceMatrix read_csv(const std::filesystem::path& path);

 private:
  int t_;
  std::vector<double> v_;
};

/// Mean over a fully populated row.
double avg_mdice(const std::vector<double>& row);
double avg_mdice(const MDiceMatrix& m, int stage);

/// Mean over stages t = 2..T of the mean drop on tasks 1..t-1 between
/// consecutive stages. Needs T >= 2 and the lower triangle plus diagonal.
double avg_forgetting(const MDiceMatrix& m);

struct SequenceReport {
  std::string sequence;  // e.g. "2-3-1"
  MDiceMatrix matrix;
  double avg_mdice;       // final stage
  double avg_forgetting;  // NaN when T < 2
};
SequenceReport make_report(std::string sequence, const MDiceMatrix& m);

struct MeanStd {
  double mean;
  double std;  // sample (n-1)
};
/// Throws std::invalid_argument for fewer than two values.
MeanStd mean_std(const std::vector<double>& values);

struct Aggregate {
  MeanStd avg_mdice;
  MeanStd avg_forgetting;
  int sequences;
};
Aggregate aggregate_sequences(const std::vector<SequenceReport>& reports);

/// (stage, avg_mDice) rows for every completed stage.
void write_curve_csv(const MDiceMatrix& m, const std::filesystem::path& path);

struct SummaryRow {
  std::string method;
  Aggregate agg;
};
void write_summary_csv(const std::vector<SummaryRow>& rows, const std::filesystem::path& path);

/// Formats a value the way every CSV in a run does ("%.6f").
std::string fmt(double v);

}  // namespace evosam::metrics
