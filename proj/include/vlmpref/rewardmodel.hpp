#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "vlmpref/core.hpp"
#include "vlmpref/nn.hpp"

namespace vlmpref {

double logistic(double z);

// P[second segment preferred] under the Bradley-Terry model, evaluated as the
// logistic of (sum_r1 - sum_r0).
double bt_probability(double sum_r0, double sum_r1);

// Mean Bradley-Terry negative log-likelihood from per-segment reward sums.
// labels: 0 = first preferred, 1 = second preferred.
struct PreferenceLoss {
  double loss = 0.0;
  Eigen::VectorXd grad_sum0;  // d loss / d sums0
  Eigen::VectorXd grad_sum1;
  std::size_t correct = 0;  // records whose higher sum matches the label
};

PreferenceLoss preference_loss_from_sums(const Eigen::VectorXd& sums0, const Eigen::VectorXd& sums1,
                                         std::span<const int> labels);

// (-1, 1) network output -> (0, 1) score scale.
inline double remap_score(double output) { return 0.5 * (output + 1.0); }

// Mean squared error between remapped outputs and target scores.
double score_loss_from_outputs(const Eigen::VectorXd& outputs, std::span<const double> targets,
                               Eigen::VectorXd* grad = nullptr);

struct RewardNetworkSpec {
  RewardInputMode mode = RewardInputMode::State;
  int state_dim = 0;
  Resolution resolution{84, 84};
  std::vector<int> hidden{256, 256, 256};
  std::vector<int> channels{16, 32, 64, 64};

  [[nodiscard]] int input_dim() const;
  static RewardNetworkSpec for_states(int state_dim, std::vector<int> hidden = {256, 256, 256});
  static RewardNetworkSpec for_images(Resolution res, std::vector<int> channels = {16, 32, 64, 64});
};

// One ensemble member: a tanh-headed network plus its optimizer state.
class RewardNetwork {
 public:
  RewardNetwork(const RewardNetworkSpec& spec, std::uint64_t seed, double learning_rate);

  [[nodiscard]] Eigen::VectorXd predict(const Eigen::MatrixXd& inputs) const;
  nn::Sequential<double>& net() { return net_; }
  [[nodiscard]] const nn::Sequential<double>& net() const { return net_; }
  nn::Adam<double>& optimizer() { return optimizer_; }
  [[nodiscard]] const nn::Adam<double>& optimizer() const { return optimizer_; }
  [[nodiscard]] const RewardNetworkSpec& spec() const { return spec_; }
  [[nodiscard]] std::uint64_t seed() const { return seed_; }

 private:
  RewardNetworkSpec spec_;
  std::uint64_t seed_;
  nn::Sequential<double> net_;
  nn::Adam<double> optimizer_;
};

class RewardModelEnsemble final : public RewardModel {
 public:
  RewardModelEnsemble(const RewardNetworkSpec& spec, int members = 3, std::uint64_t seed = 0,
                      double learning_rate = 3e-4);

  [[nodiscard]] RewardInputMode input_mode() const override { return spec_.mode; }
  // Arithmetic mean of member outputs, one per column.
  [[nodiscard]] Eigen::VectorXd predict_batch(const Eigen::MatrixXd& inputs) const override;
  [[nodiscard]] double predict_reward(RewardInputMode mode, const Eigen::VectorXd& input) const;

  [[nodiscard]] std::size_t size() const { return members_.size(); }
  RewardNetwork& member(std::size_t i) { return members_.at(i); }
  [[nodiscard]] const RewardNetwork& member(std::size_t i) const { return members_.at(i); }
  [[nodiscard]] const RewardNetworkSpec& spec() const { return spec_; }

  // reward_member_{i}.ckpt
  void save(const std::filesystem::path& dir) const;
  static RewardModelEnsemble load(const std::filesystem::path& dir, double learning_rate = 3e-4);

 private:
  RewardNetworkSpec spec_;
  std::vector<RewardNetwork> members_;
};

double preference_loss(RewardNetwork& member, std::span<const PreferenceRecord* const> batch,
                       const RewardInputEncoder& encoder);

struct ScoredSegment {
  Segment segment;
  double score = 0.0;
};

double score_loss(RewardNetwork& member, std::span<const ScoredSegment> batch, const RewardInputEncoder& encoder);

struct RewardTrainOptions {
  int max_epochs = 200;
  int batch_size = 128;
  double early_stop_accuracy = 0.97;
  std::uint64_t seed = 0;
  // Called once per record per member per epoch, for training-set audits.
  std::function<void(const PreferenceRecord&)> audit;
};

struct RewardTrainReport {
  int epochs = 0;
  double final_loss = 0.0;
  double final_accuracy = 0.0;  // mean over members
  std::size_t num_records = 0;
};

RewardTrainReport train_reward(RewardModelEnsemble& ensemble, const PreferenceBuffer& buffer,
                               const RewardInputEncoder& encoder, const RewardTrainOptions& options);
RewardTrainReport train_reward(RewardModelEnsemble& ensemble, std::span<const PreferenceRecord* const> records,
                               const RewardInputEncoder& encoder, const RewardTrainOptions& options);
// Regression onto scores in [0, 1]; runs max_epochs epochs, no early stop.
RewardTrainReport train_reward_scores(RewardModelEnsemble& ensemble, std::span<const ScoredSegment> samples,
                                      const RewardInputEncoder& encoder, const RewardTrainOptions& options);

// Analytic parameter gradient of the loss for a single record plus the loss.
std::pair<double, Eigen::VectorXd> preference_loss_gradient(RewardNetwork& member, const PreferenceRecord& record,
                                                            const RewardInputEncoder& encoder);

// Central finite differences on `num_params` randomly chosen parameters;
// returns the largest |analytic - numeric| / max(|analytic|, |numeric|, 1e-6).
double gradient_check(RewardNetwork& member, const PreferenceRecord& record, const RewardInputEncoder& encoder,
                      double epsilon, Rng& rng, int num_params = 20);
double score_gradient_check(RewardNetwork& member, std::span<const ScoredSegment> batch,
                            const RewardInputEncoder& encoder, double epsilon, Rng& rng, int num_params = 20);

}  // namespace vlmpref
