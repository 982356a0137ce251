#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vlmpref/core.hpp"
#include "vlmpref/image.hpp"

namespace vlmpref {

// ---------------------------------------------------------------- label accuracy

struct BinCounts {
  std::size_t correct = 0;
  std::size_t incorrect = 0;
  std::size_t no_preference = 0;

  [[nodiscard]] std::size_t total() const { return correct + incorrect + no_preference; }
  // (correct, incorrect, no_preference) fractions; zeros for an empty bin.
  [[nodiscard]] std::array<double, 3> fractions() const;
};

struct AccuracyBinReport {
  std::vector<double> edges;  // bins + 1 values over |progress difference|
  std::vector<BinCounts> bins;
  std::size_t total = 0;

  [[nodiscard]] BinCounts overall() const;
  // correct / total
  [[nodiscard]] double accuracy() const;
};

// 1 correct, 0 incorrect, -1 no preference. Exact progress ties with a
// definite label count as incorrect.
int judge_label(int label, double p0, double p1);

// Equal-width, right-closed bins of |p1 - p0| over the observed range; the
// first bin also holds the minimum.
AccuracyBinReport bin_accuracy(std::span<const PreferenceRecord> records, int bins = 10);

// ---------------------------------------------------------------- alignment

struct Normalized {
  std::vector<double> values;
  bool constant = false;  // all values set to 0.5
};

Normalized normalize_min_max(std::span<const double> series);

struct AlignmentCurve {
  std::vector<std::int64_t> steps;
  std::vector<std::vector<double>> per_seed;  // normalized learned reward
  std::vector<bool> seed_constant;
  std::vector<double> mean;
  std::vector<double> standard_error;
  std::vector<double> progress;  // normalized
  bool progress_constant = false;
};

// `rewards[k][t]`: raw reward of model k at trajectory point t.
AlignmentCurve alignment_from_series(const std::vector<std::vector<double>>& rewards,
                                     std::span<const double> progress, std::vector<std::int64_t> steps = {});

// Each model scores every segment (mean over its states).
AlignmentCurve alignment_curve(std::span<const RewardModel* const> models, std::span<const Segment> trajectory,
                               const RewardInputEncoder& encoder);

// ---------------------------------------------------------------- learning curves

struct MetricsTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;

  [[nodiscard]] std::size_t column(const std::string& name) const;
  [[nodiscard]] std::vector<double> values(const std::string& name) const;
};

MetricsTable read_metrics(const std::filesystem::path& csv);

struct RunCurve {
  std::vector<double> steps;
  std::vector<double> returns;
  std::vector<double> success;
};

struct LearningCurve {
  std::vector<double> steps;
  std::vector<double> return_mean, return_se;
  std::vector<double> success_mean, success_se;
  std::size_t runs = 0;
};

// Union of all evaluation steps inside the common range, runs linearly
// interpolated onto it.
LearningCurve learning_curve(std::span<const RunCurve> runs);
// Reads metrics.csv and config.json from each run directory; runs on
// different environments are rejected ("incompatible runs").
LearningCurve learning_curve(std::span<const std::filesystem::path> run_dirs);

// Sample standard deviation / sqrt(n); 0 for n < 2.
double standard_error(std::span<const double> xs);

// ---------------------------------------------------------------- output

void write_accuracy_csv(const AccuracyBinReport& report, const std::filesystem::path& file);
void write_alignment_csv(const AlignmentCurve& curve, const std::filesystem::path& file);
void write_learning_curve_csv(const LearningCurve& curve, const std::filesystem::path& file);

struct PlotSeries {
  std::vector<double> x;
  std::vector<double> y;
  std::vector<double> band;  // optional +/- half-width
  Color color{31, 119, 180};
};

// Line chart with optional shaded bands; axis ticks carry numeric labels.
RgbImage plot_lines(const std::vector<PlotSeries>& series, Resolution res = {640, 400});
// 100 % stacked bars (correct / incorrect / no preference) per bin.
RgbImage plot_accuracy_bars(const AccuracyBinReport& report, Resolution res = {640, 400});

void plot_accuracy(const AccuracyBinReport& report, const std::filesystem::path& png);
void plot_alignment(const AlignmentCurve& curve, const std::filesystem::path& png);
void plot_learning_curve(const LearningCurve& curve, const std::filesystem::path& png);

}  // namespace vlmpref
