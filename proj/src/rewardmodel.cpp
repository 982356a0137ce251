#include "vlmpref/rewardmodel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "vlmpref/error.hpp"

namespace vlmpref {

double logistic(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double bt_probability(double sum_r0, double sum_r1) {
  if (!std::isfinite(sum_r0) || !std::isfinite(sum_r1)) throw Error("invalid reward sum");
  return logistic(sum_r1 - sum_r0);
}

namespace {

// -log(logistic(z)), overflow-free.
double neg_log_logistic(double z) { return std::max(-z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

}  // namespace

PreferenceLoss preference_loss_from_sums(const Eigen::VectorXd& sums0, const Eigen::VectorXd& sums1,
                                         std::span<const int> labels) {
  const auto n = static_cast<Eigen::Index>(labels.size());
  if (n == 0) throw Error("empty batch");
  if (sums0.size() != n || sums1.size() != n) throw Error("batch size mismatch");
  PreferenceLoss out;
  out.grad_sum0.resize(n);
  out.grad_sum1.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y == -1) throw Error("untrainable label");
    if (y != 0 && y != 1) throw Error("invalid label");
    if (!std::isfinite(sums0[i]) || !std::isfinite(sums1[i])) throw Error("invalid reward sum");
    // z is the log-odds of the labeled preference
    const double sign = y == 1 ? 1.0 : -1.0;
    const double z = sign * (sums1[i] - sums0[i]);
    out.loss += neg_log_logistic(z);
    const double dz = (logistic(z) - 1.0) / static_cast<double>(n);
    out.grad_sum1[i] = sign * dz;
    out.grad_sum0[i] = -sign * dz;
    if (z > 0.0) ++out.correct;
  }
  out.loss /= static_cast<double>(n);
  return out;
}

double score_loss_from_outputs(const Eigen::VectorXd& outputs, std::span<const double> targets,
                               Eigen::VectorXd* grad) {
  const auto n = static_cast<Eigen::Index>(targets.size());
  if (n == 0) throw Error("empty batch");
  if (outputs.size() != n) throw Error("batch size mismatch");
  if (grad) grad->resize(n);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double t = targets[static_cast<std::size_t>(i)];
    if (!(t >= 0.0 && t <= 1.0)) throw Error("invalid score");
    const double e = remap_score(outputs[i]) - t;
    loss += e * e;
    if (grad) (*grad)[i] = e / static_cast<double>(n);  // d/d output: 2e * 0.5 / n
  }
  return loss / static_cast<double>(n);
}

int RewardNetworkSpec::input_dim() const {
  return mode == RewardInputMode::State ? state_dim : resolution.width * resolution.height * 3;
}

RewardNetworkSpec RewardNetworkSpec::for_states(int state_dim, std::vector<int> hidden) {
  RewardNetworkSpec s;
  s.mode = RewardInputMode::State;
  s.state_dim = state_dim;
  s.hidden = std::move(hidden);
  return s;
}

RewardNetworkSpec RewardNetworkSpec::for_images(Resolution res, std::vector<int> channels) {
  RewardNetworkSpec s;
  s.mode = RewardInputMode::Image;
  s.resolution = res;
  s.channels = std::move(channels);
  return s;
}

namespace {

nn::Sequential<double> build_network(const RewardNetworkSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  if (spec.mode == RewardInputMode::State) {
    return nn::make_mlp<double>(spec.state_dim, spec.hidden, 1, /*tanh_head=*/true, rng);
  }
  nn::Sequential<double> net;
  nn::ImageShape shape{3, spec.resolution.height, spec.resolution.width};
  for (int c : spec.channels) {
    auto& conv = net.add(nn::Conv2d<double>(shape, c, 3, 2, rng));
    shape = conv.output_shape();
    net.add(nn::ReLU<double>());
  }
  net.add(nn::Linear<double>(shape.size(), 1, rng));
  net.add(nn::Tanh<double>());
  return net;
}

std::uint64_t member_seed(std::uint64_t seed, std::size_t index) {
  // splitmix64 step: distinct, well-spread member seeds
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

RewardNetwork::RewardNetwork(const RewardNetworkSpec& spec, std::uint64_t seed, double learning_rate)
    : spec_(spec), seed_(seed), net_(build_network(spec, seed)), optimizer_(learning_rate) {}

Eigen::VectorXd RewardNetwork::predict(const Eigen::MatrixXd& inputs) const {
  if (inputs.rows() != spec_.input_dim()) throw Error("input mode mismatch");
  return net_.predict(inputs).row(0).transpose();
}

RewardModelEnsemble::RewardModelEnsemble(const RewardNetworkSpec& spec, int members, std::uint64_t seed,
                                         double learning_rate)
    : spec_(spec) {
  if (members < 1) throw Error("ensemble needs at least one member");
  members_.reserve(static_cast<std::size_t>(members));
  for (int i = 0; i < members; ++i) {
    members_.emplace_back(spec, member_seed(seed, static_cast<std::size_t>(i)), learning_rate);
  }
}

Eigen::VectorXd RewardModelEnsemble::predict_batch(const Eigen::MatrixXd& inputs) const {
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(inputs.cols());
  for (const auto& m : members_) sum += m.predict(inputs);
  return sum / static_cast<double>(members_.size());
}

double RewardModelEnsemble::predict_reward(RewardInputMode mode, const Eigen::VectorXd& input) const {
  if (mode != spec_.mode || input.size() != spec_.input_dim()) throw Error("input mode mismatch");
  Eigen::MatrixXd column = input;
  return predict_batch(column)[0];
}

void RewardModelEnsemble::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < members_.size(); ++i) {
    const auto& m = members_[i];
    nlohmann::json header{{"mode", to_string(spec_.mode)},
                          {"state_dim", spec_.state_dim},
                          {"width", spec_.resolution.width},
                          {"height", spec_.resolution.height},
                          {"hidden", spec_.hidden},
                          {"channels", spec_.channels},
                          {"seed", m.seed()},
                          {"members", members_.size()}};
    std::ofstream out(dir / ("reward_member_" + std::to_string(i) + ".ckpt"), std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write reward checkpoint");
    out << header.dump() << '\n';
    nn::write_params<double>(out, m.net().flat_params());
    m.optimizer().save(out);
  }
}

RewardModelEnsemble RewardModelEnsemble::load(const std::filesystem::path& dir, double learning_rate) {
  auto read_header = [&](std::size_t i, std::ifstream& in) {
    in.open(dir / ("reward_member_" + std::to_string(i) + ".ckpt"), std::ios::binary);
    if (!in) throw Error("missing reward checkpoint");
    std::string line;
    std::getline(in, line);
    return nlohmann::json::parse(line);
  };
  std::ifstream first;
  const auto header = read_header(0, first);
  RewardNetworkSpec spec;
  spec.mode = parse_reward_input_mode(header.at("mode").get<std::string>());
  spec.state_dim = header.at("state_dim").get<int>();
  spec.resolution = {header.at("width").get<int>(), header.at("height").get<int>()};
  spec.hidden = header.at("hidden").get<std::vector<int>>();
  spec.channels = header.at("channels").get<std::vector<int>>();
  const auto count = header.at("members").get<std::size_t>();

  RewardModelEnsemble ensemble(spec, static_cast<int>(count), 0, learning_rate);
  for (std::size_t i = 0; i < count; ++i) {
    std::ifstream in;
    const auto h = i == 0 ? header : read_header(i, in);
    auto& stream = i == 0 ? first : in;
    ensemble.members_[i] = RewardNetwork(spec, h.at("seed").get<std::uint64_t>(), learning_rate);
    ensemble.members_[i].net().set_flat_params(nn::read_params<double>(stream));
    if (stream.peek() != std::char_traits<char>::eof()) ensemble.members_[i].optimizer().load(stream);
  }
  return ensemble;
}

namespace {

// Reward-input columns for a set of pairs: record i's segments occupy
// columns [i*H, (i+1)*H) of `first` and `second`.
struct EncodedPairs {
  Eigen::MatrixXd first;
  Eigen::MatrixXd second;
  std::vector<int> labels;
  Eigen::Index horizon = 0;
};

EncodedPairs encode_pairs(std::span<const PreferenceRecord* const> records, const RewardInputEncoder& encoder) {
  EncodedPairs e;
  if (records.empty()) return e;
  e.horizon = static_cast<Eigen::Index>(records.front()->first.states.size());
  if (e.horizon == 0) throw Error("segment has no states");
  const auto n = static_cast<Eigen::Index>(records.size());
  const auto dim = static_cast<Eigen::Index>(encoder.dim());
  e.first.resize(dim, n * e.horizon);
  e.second.resize(dim, n * e.horizon);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& r = *records[static_cast<std::size_t>(i)];
    if (static_cast<Eigen::Index>(r.first.states.size()) != e.horizon ||
        static_cast<Eigen::Index>(r.second.states.size()) != e.horizon) {
      throw Error("segment length mismatch");
    }
    e.first.middleCols(i * e.horizon, e.horizon) = encoder.encode_segment(r.first);
    e.second.middleCols(i * e.horizon, e.horizon) = encoder.encode_segment(r.second);
    e.labels.push_back(r.label);
  }
  return e;
}

// Forward + loss (+ backward when `backprop`) for the records in `idx`.
PreferenceLoss member_pass(RewardNetwork& member, const EncodedPairs& data, std::span<const std::size_t> idx,
                           bool backprop) {
  const Eigen::Index h = data.horizon;
  const auto n = static_cast<Eigen::Index>(idx.size());
  Eigen::MatrixXd x(data.first.rows(), 2 * n * h);
  std::vector<int> labels(idx.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(idx[static_cast<std::size_t>(i)]);
    x.middleCols(i * h, h) = data.first.middleCols(r * h, h);
    x.middleCols((n + i) * h, h) = data.second.middleCols(r * h, h);
    labels[static_cast<std::size_t>(i)] = data.labels[static_cast<std::size_t>(r)];
  }
  const Eigen::MatrixXd out = member.net().forward(x, backprop);
  Eigen::VectorXd sums0(n), sums1(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    sums0[i] = out.row(0).segment(i * h, h).sum();
    sums1[i] = out.row(0).segment((n + i) * h, h).sum();
  }
  PreferenceLoss loss = preference_loss_from_sums(sums0, sums1, labels);
  if (backprop) {
    Eigen::MatrixXd dy(1, 2 * n * h);
    for (Eigen::Index i = 0; i < n; ++i) {
      dy.row(0).segment(i * h, h).setConstant(loss.grad_sum0[i]);
      dy.row(0).segment((n + i) * h, h).setConstant(loss.grad_sum1[i]);
    }
    member.net().backward(dy);
  }
  return loss;
}

std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

struct EncodedScores {
  Eigen::MatrixXd inputs;  // sample i: columns [i*H, (i+1)*H)
  std::vector<double> targets;
  Eigen::Index horizon = 0;
};

EncodedScores encode_scores(std::span<const ScoredSegment> samples, const RewardInputEncoder& encoder) {
  EncodedScores e;
  if (samples.empty()) return e;
  e.horizon = static_cast<Eigen::Index>(samples.front().segment.states.size());
  const auto n = static_cast<Eigen::Index>(samples.size());
  e.inputs.resize(static_cast<Eigen::Index>(encoder.dim()), n * e.horizon);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& s = samples[static_cast<std::size_t>(i)];
    if (!(s.score >= 0.0 && s.score <= 1.0)) throw Error("invalid score");
    if (static_cast<Eigen::Index>(s.segment.states.size()) != e.horizon) throw Error("segment length mismatch");
    e.inputs.middleCols(i * e.horizon, e.horizon) = encoder.encode_segment(s.segment);
    e.targets.push_back(s.score);
  }
  return e;
}

// Segment output is the mean member output over the segment's states.
double score_pass(RewardNetwork& member, const EncodedScores& data, std::span<const std::size_t> idx, bool backprop) {
  const Eigen::Index h = data.horizon;
  const auto n = static_cast<Eigen::Index>(idx.size());
  Eigen::MatrixXd x(data.inputs.rows(), n * h);
  std::vector<double> targets(idx.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(idx[static_cast<std::size_t>(i)]);
    x.middleCols(i * h, h) = data.inputs.middleCols(r * h, h);
    targets[static_cast<std::size_t>(i)] = data.targets[static_cast<std::size_t>(r)];
  }
  const Eigen::MatrixXd out = member.net().forward(x, backprop);
  Eigen::VectorXd seg(n);
  for (Eigen::Index i = 0; i < n; ++i) seg[i] = out.row(0).segment(i * h, h).mean();
  Eigen::VectorXd grad;
  const double loss = score_loss_from_outputs(seg, targets, &grad);
  if (backprop) {
    Eigen::MatrixXd dy(1, n * h);
    for (Eigen::Index i = 0; i < n; ++i) dy.row(0).segment(i * h, h).setConstant(grad[i] / static_cast<double>(h));
    member.net().backward(dy);
  }
  return loss;
}

}  // namespace

double preference_loss(RewardNetwork& member, std::span<const PreferenceRecord* const> batch,
                       const RewardInputEncoder& encoder) {
  if (batch.empty()) throw Error("empty batch");
  for (const auto* r : batch) {
    if (r->label == -1) throw Error("untrainable label");
  }
  const auto data = encode_pairs(batch, encoder);
  const auto idx = iota_indices(batch.size());
  return member_pass(member, data, idx, false).loss;
}

double score_loss(RewardNetwork& member, std::span<const ScoredSegment> batch, const RewardInputEncoder& encoder) {
  if (batch.empty()) throw Error("empty batch");
  const auto data = encode_scores(batch, encoder);
  const auto idx = iota_indices(batch.size());
  return score_pass(member, data, idx, false);
}

RewardTrainReport train_reward(RewardModelEnsemble& ensemble, const PreferenceBuffer& buffer,
                               const RewardInputEncoder& encoder, const RewardTrainOptions& options) {
  const auto view = buffer.trainable_view();
  return train_reward(ensemble, view, encoder, options);
}

RewardTrainReport train_reward(RewardModelEnsemble& ensemble, std::span<const PreferenceRecord* const> records,
                               const RewardInputEncoder& encoder, const RewardTrainOptions& options) {
  if (records.empty()) throw Error("no preferences");
  for (const auto* r : records) {
    if (r->label == -1) throw Error("untrainable label");
  }
  const auto data = encode_pairs(records, encoder);
  const std::size_t n = records.size();
  const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(options.batch_size), n);
  Rng rng(options.seed);

  RewardTrainReport report;
  report.num_records = n;
  for (int epoch = 1; epoch <= options.max_epochs; ++epoch) {
    double acc_sum = 0.0, loss_sum = 0.0;
    for (std::size_t m = 0; m < ensemble.size(); ++m) {
      auto& member = ensemble.member(m);
      auto perm = iota_indices(n);
      std::shuffle(perm.begin(), perm.end(), rng);
      std::size_t correct = 0;
      double member_loss = 0.0;
      for (std::size_t start = 0; start < n; start += batch) {
        const std::span<const std::size_t> idx(perm.data() + start, std::min(batch, n - start));
        if (options.audit) {
          for (auto i : idx) options.audit(*records[i]);
        }
        member.net().zero_grad();
        const auto loss = member_pass(member, data, idx, true);
        member.optimizer().step(member.net().params());
        correct += loss.correct;
        member_loss += loss.loss * static_cast<double>(idx.size());
      }
      acc_sum += static_cast<double>(correct) / static_cast<double>(n);
      loss_sum += member_loss / static_cast<double>(n);
    }
    report.epochs = epoch;
    report.final_accuracy = acc_sum / static_cast<double>(ensemble.size());
    report.final_loss = loss_sum / static_cast<double>(ensemble.size());
    if (report.final_accuracy >= options.early_stop_accuracy) break;
  }
  return report;
}

RewardTrainReport train_reward_scores(RewardModelEnsemble& ensemble, std::span<const ScoredSegment> samples,
                                      const RewardInputEncoder& encoder, const RewardTrainOptions& options) {
  if (samples.empty()) throw Error("no scores");
  const auto data = encode_scores(samples, encoder);
  const std::size_t n = samples.size();
  const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(options.batch_size), n);
  Rng rng(options.seed);
  RewardTrainReport report;
  report.num_records = n;
  for (int epoch = 1; epoch <= options.max_epochs; ++epoch) {
    double loss_sum = 0.0;
    for (std::size_t m = 0; m < ensemble.size(); ++m) {
      auto& member = ensemble.member(m);
      auto perm = iota_indices(n);
      std::shuffle(perm.begin(), perm.end(), rng);
      for (std::size_t start = 0; start < n; start += batch) {
        const std::span<const std::size_t> idx(perm.data() + start, std::min(batch, n - start));
        member.net().zero_grad();
        loss_sum += score_pass(member, data, idx, true) * static_cast<double>(idx.size());
        member.optimizer().step(member.net().params());
      }
    }
    report.epochs = epoch;
    report.final_loss = loss_sum / static_cast<double>(n * ensemble.size());
  }
  return report;
}

std::pair<double, Eigen::VectorXd> preference_loss_gradient(RewardNetwork& member, const PreferenceRecord& record,
                                                            const RewardInputEncoder& encoder) {
  const PreferenceRecord* ptr = &record;
  const auto data = encode_pairs(std::span(&ptr, 1), encoder);
  const std::size_t idx = 0;
  member.net().zero_grad();
  const double loss = member_pass(member, data, std::span(&idx, 1), true).loss;
  return {loss, member.net().flat_grads()};
}

namespace {

template <class LossFn>
double finite_difference_check(RewardNetwork& member, const Eigen::VectorXd& analytic, LossFn&& loss_at,
                               double epsilon, Rng& rng, int num_params) {
  if (!(epsilon >= 1e-6 && epsilon <= 1e-3)) throw Error("epsilon out of range");
  const Eigen::Index total = member.net().num_params();
  std::vector<Eigen::Index> picks(static_cast<std::size_t>(total));
  std::iota(picks.begin(), picks.end(), Eigen::Index{0});
  std::shuffle(picks.begin(), picks.end(), rng);
  picks.resize(std::min<std::size_t>(picks.size(), static_cast<std::size_t>(num_params)));

  double worst = 0.0;
  for (const auto p : picks) {
    double* value = member.net().param_at(p).first;
    const double original = *value;
    *value = original + epsilon;
    const double up = loss_at();
    *value = original - epsilon;
    const double down = loss_at();
    *value = original;
    const double numeric = (up - down) / (2.0 * epsilon);
    const double a = analytic[p];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

}  // namespace

double gradient_check(RewardNetwork& member, const PreferenceRecord& record, const RewardInputEncoder& encoder,
                      double epsilon, Rng& rng, int num_params) {
  const auto [loss, analytic] = preference_loss_gradient(member, record, encoder);
  (void)loss;
  const PreferenceRecord* ptr = &record;
  return finite_difference_check(
      member, analytic, [&] { return preference_loss(member, std::span(&ptr, 1), encoder); }, epsilon, rng,
      num_params);
}

double score_gradient_check(RewardNetwork& member, std::span<const ScoredSegment> batch,
                            const RewardInputEncoder& encoder, double epsilon, Rng& rng, int num_params) {
  const auto data = encode_scores(batch, encoder);
  const auto idx = iota_indices(batch.size());
  member.net().zero_grad();
  score_pass(member, data, idx, true);
  const Eigen::VectorXd analytic = member.net().flat_grads();
  return finite_difference_check(
      member, analytic, [&] { return score_pass(member, data, idx, false); }, epsilon, rng, num_params);
}

}  // namespace vlmpref
