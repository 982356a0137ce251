#include "vlmpref/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "vlmpref/error.hpp"

namespace vlmpref {

// ---------------------------------------------------------------- label accuracy

std::array<double, 3> BinCounts::fractions() const {
  const auto n = static_cast<double>(total());
  if (n == 0.0) return {0.0, 0.0, 0.0};
  return {correct / n, incorrect / n, no_preference / n};
}

BinCounts AccuracyBinReport::overall() const {
  BinCounts sum;
  for (const auto& b : bins) {
    sum.correct += b.correct;
    sum.incorrect += b.incorrect;
    sum.no_preference += b.no_preference;
  }
  return sum;
}

double AccuracyBinReport::accuracy() const {
  const auto o = overall();
  return o.total() == 0 ? 0.0 : static_cast<double>(o.correct) / static_cast<double>(o.total());
}

int judge_label(int label, double p0, double p1) {
  if (label == -1) return -1;
  const double diff = p1 - p0;
  if (diff == 0.0) return 0;
  return (label == 1) == (diff > 0.0) ? 1 : 0;
}

AccuracyBinReport bin_accuracy(std::span<const PreferenceRecord> records, int bins) {
  if (records.empty()) throw Error("no records");
  if (bins < 1) throw Error("bins must be positive");
  std::vector<double> gaps;
  gaps.reserve(records.size());
  for (const auto& r : records) {
    if (!r.first.progress || !r.second.progress) throw Error("segment has no progress");
    gaps.push_back(std::abs(*r.second.progress - *r.first.progress));
  }
  const auto [lo_it, hi_it] = std::minmax_element(gaps.begin(), gaps.end());
  const double lo = *lo_it, hi = *hi_it;
  const double width = (hi - lo) / bins;

  AccuracyBinReport report;
  report.total = records.size();
  report.bins.assign(static_cast<std::size_t>(bins), {});
  for (int i = 0; i <= bins; ++i) report.edges.push_back(i == bins ? hi : lo + width * i);
  for (std::size_t k = 0; k < records.size(); ++k) {
    std::size_t b = 0;
    if (width > 0.0) {
      // right-closed: (e_i, e_{i+1}]
      const double pos = std::ceil((gaps[k] - lo) / width) - 1.0;
      b = static_cast<std::size_t>(std::clamp(pos, 0.0, static_cast<double>(bins - 1)));
      // guard against rounding in the division
      while (b + 1 < report.bins.size() && gaps[k] > report.edges[b + 1]) ++b;
      while (b > 0 && gaps[k] <= report.edges[b]) --b;
    }
    const auto& r = records[k];
    switch (judge_label(r.label, *r.first.progress, *r.second.progress)) {
      case 1: ++report.bins[b].correct; break;
      case 0: ++report.bins[b].incorrect; break;
      default: ++report.bins[b].no_preference; break;
    }
  }
  return report;
}

// ---------------------------------------------------------------- alignment

Normalized normalize_min_max(std::span<const double> series) {
  Normalized out;
  if (series.empty()) return out;
  const auto [lo_it, hi_it] = std::minmax_element(series.begin(), series.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) {
    out.values.assign(series.size(), 0.5);
    out.constant = true;
    return out;
  }
  out.values.reserve(series.size());
  for (double v : series) out.values.push_back(std::clamp((v - lo) / (hi - lo), 0.0, 1.0));
  return out;
}

double standard_error(std::span<const double> xs) {
  const auto n = xs.size();
  if (n < 2) return 0.0;
  const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(n - 1)) / std::sqrt(static_cast<double>(n));
}

AlignmentCurve alignment_from_series(const std::vector<std::vector<double>>& rewards, std::span<const double> progress,
                                     std::vector<std::int64_t> steps) {
  if (progress.size() < 2) throw Error("trajectory too short");
  if (rewards.empty()) throw Error("no reward models");
  AlignmentCurve c;
  const auto len = progress.size();
  if (steps.empty()) {
    steps.resize(len);
    std::iota(steps.begin(), steps.end(), std::int64_t{0});
  }
  if (steps.size() != len) throw Error("step count mismatch");
  c.steps = std::move(steps);
  auto p = normalize_min_max(progress);
  c.progress = std::move(p.values);
  c.progress_constant = p.constant;
  for (const auto& r : rewards) {
    if (r.size() != len) throw Error("reward series length mismatch");
    auto n = normalize_min_max(r);
    c.per_seed.push_back(std::move(n.values));
    c.seed_constant.push_back(n.constant);
  }
  std::vector<double> column(rewards.size());
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t k = 0; k < rewards.size(); ++k) column[k] = c.per_seed[k][t];
    c.mean.push_back(std::accumulate(column.begin(), column.end(), 0.0) / static_cast<double>(column.size()));
    c.standard_error.push_back(standard_error(column));
  }
  return c;
}

AlignmentCurve alignment_curve(std::span<const RewardModel* const> models, std::span<const Segment> trajectory,
                               const RewardInputEncoder& encoder) {
  if (trajectory.size() < 2) throw Error("trajectory too short");
  std::vector<double> progress;
  std::vector<std::int64_t> steps;
  std::vector<Eigen::MatrixXd> inputs;
  for (const auto& s : trajectory) {
    if (!s.progress) throw Error("segment has no progress");
    progress.push_back(*s.progress);
    steps.push_back(s.source_step);
    inputs.push_back(encoder.encode_segment(s));
  }
  std::vector<std::vector<double>> rewards;
  for (const auto* m : models) {
    std::vector<double> r;
    for (const auto& x : inputs) r.push_back(m->predict_batch(x).mean());
    rewards.push_back(std::move(r));
  }
  return alignment_from_series(rewards, progress, std::move(steps));
}

// ---------------------------------------------------------------- learning curves

std::size_t MetricsTable::column(const std::string& name) const {
  auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw Error("missing column: " + name);
  return static_cast<std::size_t>(it - header.begin());
}

std::vector<double> MetricsTable::values(const std::string& name) const {
  const auto c = column(name);
  std::vector<double> out;
  for (const auto& r : rows) out.push_back(r.at(c));
  return out;
}

MetricsTable read_metrics(const std::filesystem::path& csv) {
  std::ifstream in(csv);
  if (!in) throw Error("cannot read metrics: " + csv.string());
  MetricsTable t;
  std::string line;
  auto split = [](const std::string& l) {
    std::vector<std::string> cells;
    std::stringstream ss(l);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    return cells;
  };
  if (!std::getline(in, line)) throw Error("empty metrics file");
  t.header = split(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    for (const auto& c : split(line)) row.push_back(std::stod(c));
    if (row.size() != t.header.size()) break;  // torn final line from a live writer
    t.rows.push_back(std::move(row));
  }
  return t;
}

namespace {

double interpolate(const std::vector<double>& xs, const std::vector<double>& ys, double x) {
  auto it = std::lower_bound(xs.begin(), xs.end(), x);
  if (it == xs.end()) return ys.back();
  const auto i = static_cast<std::size_t>(it - xs.begin());
  if (*it == x || i == 0) return ys[i];
  const double t = (x - xs[i - 1]) / (xs[i] - xs[i - 1]);
  return ys[i - 1] + t * (ys[i] - ys[i - 1]);
}

}  // namespace

LearningCurve learning_curve(std::span<const RunCurve> runs) {
  if (runs.empty()) throw Error("no runs");
  double lo = -std::numeric_limits<double>::infinity(), hi = std::numeric_limits<double>::infinity();
  for (const auto& r : runs) {
    if (r.steps.empty() || r.returns.size() != r.steps.size() || r.success.size() != r.steps.size()) {
      throw Error("empty or malformed run");
    }
    if (!std::is_sorted(r.steps.begin(), r.steps.end())) throw Error("steps not sorted");
    lo = std::max(lo, r.steps.front());
    hi = std::min(hi, r.steps.back());
  }
  LearningCurve c;
  c.runs = runs.size();
  if (lo > hi) return c;
  for (const auto& r : runs)
    for (double s : r.steps)
      if (s >= lo && s <= hi) c.steps.push_back(s);
  std::sort(c.steps.begin(), c.steps.end());
  c.steps.erase(std::unique(c.steps.begin(), c.steps.end()), c.steps.end());
  std::vector<double> ret(runs.size()), suc(runs.size());
  for (double s : c.steps) {
    for (std::size_t k = 0; k < runs.size(); ++k) {
      ret[k] = interpolate(runs[k].steps, runs[k].returns, s);
      suc[k] = interpolate(runs[k].steps, runs[k].success, s);
    }
    c.return_mean.push_back(std::accumulate(ret.begin(), ret.end(), 0.0) / static_cast<double>(ret.size()));
    c.return_se.push_back(standard_error(ret));
    c.success_mean.push_back(std::accumulate(suc.begin(), suc.end(), 0.0) / static_cast<double>(suc.size()));
    c.success_se.push_back(standard_error(suc));
  }
  return c;
}

LearningCurve learning_curve(std::span<const std::filesystem::path> run_dirs) {
  if (run_dirs.empty()) throw Error("no runs");
  std::vector<RunCurve> runs;
  std::optional<std::string> env;
  for (const auto& dir : run_dirs) {
    std::ifstream cfg(dir / "config.json");
    if (cfg) {
      const auto j = nlohmann::json::parse(cfg);
      const auto name = j.value("env_name", std::string{});
      if (env && *env != name) throw Error("incompatible runs");
      env = name;
    }
    const auto t = read_metrics(dir / "metrics.csv");
    runs.push_back({t.values("step"), t.values("eval_return"), t.values("success_rate")});
  }
  return learning_curve(runs);
}

// ---------------------------------------------------------------- output

namespace {

std::ofstream open_csv(const std::filesystem::path& file) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw Error("cannot write " + file.string());
  out.precision(10);
  return out;
}

}  // namespace

void write_accuracy_csv(const AccuracyBinReport& report, const std::filesystem::path& file) {
  auto out = open_csv(file);
  out << "bin,lower,upper,correct,incorrect,no_preference,frac_correct,frac_incorrect,frac_no_preference\n";
  for (std::size_t b = 0; b < report.bins.size(); ++b) {
    const auto& c = report.bins[b];
    const auto f = c.fractions();
    out << b << ',' << report.edges[b] << ',' << report.edges[b + 1] << ',' << c.correct << ',' << c.incorrect << ','
        << c.no_preference << ',' << f[0] << ',' << f[1] << ',' << f[2] << '\n';
  }
}

void write_alignment_csv(const AlignmentCurve& curve, const std::filesystem::path& file) {
  auto out = open_csv(file);
  out << "step,progress";
  for (std::size_t k = 0; k < curve.per_seed.size(); ++k) out << ",reward_" << k;
  out << ",reward_mean,reward_se\n";
  for (std::size_t t = 0; t < curve.steps.size(); ++t) {
    out << curve.steps[t] << ',' << curve.progress[t];
    for (const auto& s : curve.per_seed) out << ',' << s[t];
    out << ',' << curve.mean[t] << ',' << curve.standard_error[t] << '\n';
  }
}

void write_learning_curve_csv(const LearningCurve& curve, const std::filesystem::path& file) {
  auto out = open_csv(file);
  out << "step,return_mean,return_se,success_mean,success_se,runs\n";
  for (std::size_t i = 0; i < curve.steps.size(); ++i) {
    out << curve.steps[i] << ',' << curve.return_mean[i] << ',' << curve.return_se[i] << ','
        << curve.success_mean[i] << ',' << curve.success_se[i] << ',' << curve.runs << '\n';
  }
}

// ---------------------------------------------------------------- plotting

namespace {

// 3x5 glyphs, one row per entry, most significant bit on the left.
constexpr std::array<std::pair<char, std::array<std::uint8_t, 5>>, 15> kGlyphs{{
    {'0', {7, 5, 5, 5, 7}}, {'1', {2, 6, 2, 2, 7}}, {'2', {7, 1, 7, 4, 7}}, {'3', {7, 1, 7, 1, 7}},
    {'4', {5, 5, 7, 1, 1}}, {'5', {7, 4, 7, 1, 7}}, {'6', {7, 4, 7, 5, 7}}, {'7', {7, 1, 1, 1, 1}},
    {'8', {7, 5, 7, 5, 7}}, {'9', {7, 5, 7, 1, 7}}, {'.', {0, 0, 0, 0, 2}}, {'-', {0, 0, 7, 0, 0}},
    {'e', {0, 7, 7, 4, 7}}, {'+', {0, 2, 7, 2, 0}}, {' ', {0, 0, 0, 0, 0}},
}};

constexpr Color kInk{40, 40, 40};
constexpr Color kGrid{225, 225, 225};

void draw_text(Canvas& canvas, double x, double y, const std::string& text, int scale = 2) {
  for (char ch : text) {
    const auto it = std::find_if(kGlyphs.begin(), kGlyphs.end(), [ch](const auto& g) { return g.first == ch; });
    if (it != kGlyphs.end()) {
      for (int row = 0; row < 5; ++row)
        for (int col = 0; col < 3; ++col)
          if (it->second[static_cast<std::size_t>(row)] & (4 >> col)) {
            canvas.fill_rect(x + col * scale, y + row * scale, x + (col + 1) * scale, y + (row + 1) * scale, kInk);
          }
    }
    x += 4 * scale;
  }
}

std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", std::abs(v) < 1e-12 ? 0.0 : v);
  return buf;
}

Color lighten(Color c) {
  return {static_cast<std::uint8_t>(255 - (255 - c[0]) / 4), static_cast<std::uint8_t>(255 - (255 - c[1]) / 4),
          static_cast<std::uint8_t>(255 - (255 - c[2]) / 4)};
}

struct Frame {
  double left = 70, right, top = 12, bottom;
  double x0, x1, y0, y1;
  [[nodiscard]] double px(double x) const { return left + (x - x0) / (x1 - x0) * (right - left); }
  [[nodiscard]] double py(double y) const { return bottom - (y - y0) / (y1 - y0) * (bottom - top); }
};

void draw_axes(Canvas& canvas, const Frame& f, int ticks = 5) {
  for (int i = 0; i <= ticks; ++i) {
    const double yv = f.y0 + (f.y1 - f.y0) * i / ticks;
    const double xv = f.x0 + (f.x1 - f.x0) * i / ticks;
    canvas.fill_rect(f.left, f.py(yv) - 0.5, f.right, f.py(yv) + 0.5, kGrid);
    const auto yl = tick_label(yv);
    draw_text(canvas, f.left - 8 - 8.0 * static_cast<double>(yl.size()), f.py(yv) - 5, yl);
    const auto xl = tick_label(xv);
    draw_text(canvas, f.px(xv) - 4.0 * static_cast<double>(xl.size()), f.bottom + 8, xl);
  }
  canvas.fill_rect(f.left - 1, f.top, f.left, f.bottom, kInk);
  canvas.fill_rect(f.left - 1, f.bottom, f.right, f.bottom + 1, kInk);
}

}  // namespace

RgbImage plot_lines(const std::vector<PlotSeries>& series, Resolution res) {
  Canvas canvas(res.width, res.height, {255, 255, 255});
  Frame f;
  f.right = res.width - 16.0;
  f.bottom = res.height - 30.0;
  f.x0 = f.y0 = std::numeric_limits<double>::infinity();
  f.x1 = f.y1 = -std::numeric_limits<double>::infinity();
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      const double band = s.band.empty() ? 0.0 : s.band[i];
      f.x0 = std::min(f.x0, s.x[i]);
      f.x1 = std::max(f.x1, s.x[i]);
      f.y0 = std::min(f.y0, s.y[i] - band);
      f.y1 = std::max(f.y1, s.y[i] + band);
    }
  }
  if (!std::isfinite(f.x0)) {
    f.x0 = f.y0 = 0.0;
    f.x1 = f.y1 = 1.0;
  }
  if (f.x1 <= f.x0) f.x1 = f.x0 + 1.0;
  if (f.y1 <= f.y0) {
    f.y0 -= 0.5;
    f.y1 += 0.5;
  }
  const double pad = 0.05 * (f.y1 - f.y0);
  f.y0 -= pad;
  f.y1 += pad;
  draw_axes(canvas, f);
  for (const auto& s : series) {
    if (s.band.empty()) continue;
    for (std::size_t i = 0; i + 1 < s.x.size(); ++i) {
      const double xa = f.px(s.x[i]), xb = f.px(s.x[i + 1]);
      for (double x = std::floor(xa); x < xb; x += 1.0) {
        const double t = xb > xa ? std::clamp((x + 0.5 - xa) / (xb - xa), 0.0, 1.0) : 0.0;
        const double y = s.y[i] + t * (s.y[i + 1] - s.y[i]);
        const double b = s.band[i] + t * (s.band[i + 1] - s.band[i]);
        canvas.fill_rect(x, f.py(y + b), x + 1.0, f.py(y - b), lighten(s.color));
      }
    }
  }
  for (const auto& s : series) {
    for (std::size_t i = 0; i + 1 < s.x.size(); ++i) {
      canvas.draw_line(f.px(s.x[i]), f.py(s.y[i]), f.px(s.x[i + 1]), f.py(s.y[i + 1]), 1.2, s.color);
    }
    if (s.x.size() == 1) canvas.fill_disc(f.px(s.x[0]), f.py(s.y[0]), 3.0, s.color);
  }
  return std::move(canvas).take();
}

RgbImage plot_accuracy_bars(const AccuracyBinReport& report, Resolution res) {
  Canvas canvas(res.width, res.height, {255, 255, 255});
  Frame f;
  f.right = res.width - 16.0;
  f.bottom = res.height - 30.0;
  f.x0 = report.edges.front();
  f.x1 = report.edges.back() > f.x0 ? report.edges.back() : f.x0 + 1.0;
  f.y0 = 0.0;
  f.y1 = 1.0;
  draw_axes(canvas, f);
  const Color colors[3] = {{44, 160, 44}, {214, 39, 40}, {150, 150, 150}};
  const double slot = (f.right - f.left) / static_cast<double>(report.bins.size());
  for (std::size_t b = 0; b < report.bins.size(); ++b) {
    const auto fr = report.bins[b].fractions();
    double acc = 0.0;
    const double xa = f.left + slot * static_cast<double>(b) + 2.0, xb = xa + slot - 4.0;
    for (int k = 0; k < 3; ++k) {
      canvas.fill_rect(xa, f.py(acc + fr[static_cast<std::size_t>(k)]), xb, f.py(acc), colors[k]);
      acc += fr[static_cast<std::size_t>(k)];
    }
  }
  return std::move(canvas).take();
}

void plot_accuracy(const AccuracyBinReport& report, const std::filesystem::path& png) {
  if (png.has_parent_path()) std::filesystem::create_directories(png.parent_path());
  save_png(encode_png(plot_accuracy_bars(report)), png);
}

void plot_alignment(const AlignmentCurve& curve, const std::filesystem::path& png) {
  std::vector<double> x(curve.steps.begin(), curve.steps.end());
  PlotSeries progress{x, curve.progress, {}, {40, 40, 40}};
  PlotSeries learned{x, curve.mean, curve.standard_error, {31, 119, 180}};
  if (png.has_parent_path()) std::filesystem::create_directories(png.parent_path());
  save_png(encode_png(plot_lines({progress, learned})), png);
}

void plot_learning_curve(const LearningCurve& curve, const std::filesystem::path& png) {
  PlotSeries ret{curve.steps, curve.return_mean, curve.return_se, {31, 119, 180}};
  if (png.has_parent_path()) std::filesystem::create_directories(png.parent_path());
  save_png(encode_png(plot_lines({ret})), png);
}

}  // namespace vlmpref
