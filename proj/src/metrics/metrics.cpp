#include "evosam/metrics/metrics.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "evosam/numkit/tensor.hpp"

namespace evosam::metrics {

namespace {

constexpr double kUnset = std::numeric_limits<double>::quiet_NaN();

struct Counts {
  std::size_t p = 0, g = 0, both = 0;
};

Counts count(const Mask& p, const Mask& g) {
  if (p.width != g.width || p.height != g.height) {
    throw nk::ShapeError("mask shapes differ: " + std::to_string(p.width) + "x" + std::to_string(p.height) + " vs " +
                         std::to_string(g.width) + "x" + std::to_string(g.height));
  }
  Counts c;
  for (std::size_t i = 0; i < p.px.size(); ++i) {
    c.p += p.px[i] != 0;
    c.g += g.px[i] != 0;
    c.both += (p.px[i] != 0) & (g.px[i] != 0);
  }
  return c;
}

}  // namespace

double dice(const Mask& pred, const Mask& gt) {
  const Counts c = count(pred, gt);
  if (c.p + c.g == 0) return 1.0;
  return 2.0 * static_cast<double>(c.both) / static_cast<double>(c.p + c.g);
}

double iou(const Mask& pred, const Mask& gt) {
  const Counts c = count(pred, gt);
  const std::size_t uni = c.p + c.g - c.both;
  if (uni == 0) return 1.0;
  return static_cast<double>(c.both) / static_cast<double>(uni);
}

double mean(const std::vector<double>& v) {
  if (v.empty()) throw std::invalid_argument("mean of an empty list");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double mdice(const std::vector<Mask>& preds, const std::vector<Mask>& gts) {
  if (preds.size() != gts.size()) throw std::invalid_argument("mdice: prediction and ground-truth counts differ");
  if (preds.empty()) throw std::invalid_argument("mdice: no images");
  std::vector<double> d;
  d.reserve(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) d.push_back(dice(preds[i], gts[i]));
  return mean(d);
}

MDiceMatrix::MDiceMatrix(int tasks) : t_(tasks), v_(static_cast<std::size_t>(tasks) * tasks, kUnset) {
  if (tasks < 1) throw std::invalid_argument("matrix needs at least one task");
}

MDiceMatrix MDiceMatrix::from_rows(const std::vector<std::vector<double>>& rows) {
  MDiceMatrix m(static_cast<int>(rows.size()));
  for (std::size_t t = 0; t < rows.size(); ++t) {
    if (rows[t].size() > rows.size()) throw std::invalid_argument("matrix row longer than the task count");
    for (std::size_t i = 0; i < rows[t].size(); ++i) m.set(static_cast<int>(t) + 1, static_cast<int>(i) + 1, rows[t][i]);
  }
  return m;
}

double MDiceMatrix::at(int stage, int task) const {
  if (stage < 1 || stage > t_ || task < 1 || task > t_) throw std::out_of_range("matrix index out of range");
  return v_[static_cast<std::size_t>(stage - 1) * t_ + (task - 1)];
}

void MDiceMatrix::set(int stage, int task, double value) {
  if (stage < 1 || stage > t_ || task < 1 || task > t_) throw std::out_of_range("matrix index out of range");
  if (!(value >= 0 && value <= 100)) throw std::invalid_argument("mDice entry outside [0, 100]");
  v_[static_cast<std::size_t>(stage - 1) * t_ + (task - 1)] = value;
}

bool MDiceMatrix::has(int stage, int task) const { return !std::isnan(at(stage, task)); }

std::vector<double> MDiceMatrix::row(int stage) const {
  std::vector<double> r;
  for (int i = 1; i <= t_; ++i) r.push_back(at(stage, i));
  return r;
}

bool MDiceMatrix::row_complete(int stage) const {
  for (int i = 1; i <= t_; ++i)
    if (!has(stage, i)) return false;
  return true;
}

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

void MDiceMatrix::write_csv(const std::filesystem::path& path) const {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  for (int t = 1; t <= t_; ++t) {
    for (int i = 1; i <= t_; ++i) f << (i > 1 ? "," : "") << fmt(at(t, i));
    f << "\n";
  }
}

MDiceMatrix MDiceMatrix::read_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::vector<std::vector<double>> rows;
  for (std::string line; std::getline(f, line);) {
    if (line.empty()) continue;
    std::vector<double> r;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) r.push_back(cell == "nan" ? kUnset : std::stod(cell));
    rows.push_back(std::move(r));
  }
  MDiceMatrix m(static_cast<int>(rows.size()));
  for (std::size_t t = 0; t < rows.size(); ++t) {
    if (rows[t].size() != rows.size()) throw std::runtime_error(path.string() + ": matrix is not square");
    for (std::size_t i = 0; i < rows[t].size(); ++i)
      if (!std::isnan(rows[t][i])) m.set(static_cast<int>(t) + 1, static_cast<int>(i) + 1, rows[t][i]);
  }
  return m;
}

double avg_mdice(const std::vector<double>& row) {
  if (row.empty()) throw std::invalid_argument("avg_mdice: empty row");
  for (double v : row)
    if (std::isnan(v)) throw std::invalid_argument("avg_mdice: incomplete row");
  return mean(row);
}

double avg_mdice(const MDiceMatrix& m, int stage) { return avg_mdice(m.row(stage)); }

double avg_forgetting(const MDiceMatrix& m) {
  const int T = m.tasks();
  if (T < 2) throw std::invalid_argument("avg_forgetting needs at least two tasks");
  double outer = 0;
  for (int t = 2; t <= T; ++t) {
    double inner = 0;
    for (int i = 1; i <= t - 1; ++i) {
      if (!m.has(t - 1, i) || !m.has(t, i)) throw std::invalid_argument("avg_forgetting: missing lower-triangle entry");
      inner += m.at(t - 1, i) - m.at(t, i);
    }
    outer += inner / (t - 1);
  }
  return outer / (T - 1);
}

SequenceReport make_report(std::string sequence, const MDiceMatrix& m) {
  const double f = m.tasks() >= 2 ? avg_forgetting(m) : kUnset;
  return {std::move(sequence), m, avg_mdice(m, m.tasks()), f};
}

MeanStd mean_std(const std::vector<double>& v) {
  if (v.size() < 2) throw std::invalid_argument("mean_std needs at least two values");
  const double mu = mean(v);
  double ss = 0;
  for (double x : v) ss += (x - mu) * (x - mu);
  return {mu, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

Aggregate aggregate_sequences(const std::vector<SequenceReport>& reports) {
  if (reports.size() < 2) throw std::invalid_argument("aggregation needs at least two sequence reports");
  std::vector<double> md, fg;
  for (const auto& r : reports) {
    md.push_back(r.avg_mdice);
    fg.push_back(r.avg_forgetting);
  }
  return {mean_std(md), mean_std(fg), static_cast<int>(reports.size())};
}

void write_curve_csv(const MDiceMatrix& m, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << "stage,avg_mdice\n";
  for (int t = 1; t <= m.tasks(); ++t)
    if (m.row_complete(t)) f << t << "," << fmt(avg_mdice(m, t)) << "\n";
}

void write_summary_csv(const std::vector<SummaryRow>& rows, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << "method,avg_mdice_mean,avg_mdice_std,avg_forgetting_mean,avg_forgetting_std,sequences\n";
  for (const auto& r : rows) {
    f << r.method << "," << fmt(r.agg.avg_mdice.mean) << "," << fmt(r.agg.avg_mdice.std) << ","
      << fmt(r.agg.avg_forgetting.mean) << "," << fmt(r.agg.avg_forgetting.std) << "," << r.agg.sequences << "\n";
  }
}

}  // namespace evosam::metrics
