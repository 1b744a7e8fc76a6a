#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <vector>

#include "rns/retrieval.hpp"
#include "rns/support.hpp"

namespace rns {

/// Per-image linear classifier: logits = weights * v + bias.
struct AdapterModel {
  RowMatrixXd weights;  // C x d
  Eigen::VectorXd bias;  // C

  static AdapterModel zeros(std::size_t num_classes, std::size_t dim) {
    return {RowMatrixXd::Zero(num_classes, dim), Eigen::VectorXd::Zero(num_classes)};
  }
  std::size_t num_classes() const { return static_cast<std::size_t>(weights.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(weights.cols()); }
};

struct TrainConfig {
  std::size_t steps = 700;
  double learning_rate = 0.02;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::size_t k = 4;
  double tau = 0.1;
  double beta_f = 1.5;
  double beta_p = 0.2;
  std::uint64_t seed = 0;
  unsigned threads = 1;

  void validate() const;
};

/// Operands of one loss term, stacked row-wise: unit feature vectors,
/// row-stochastic targets (one-hot for the cross-entropy terms) and
/// non-negative item weights.
struct LossItems {
  RowMatrixXd vectors;  // N x d
  RowMatrixXd targets;  // N x C
  Eigen::VectorXd weights;  // N
  std::vector<ClassId> labels;  // class each item was built for

  std::size_t size() const { return static_cast<std::size_t>(vectors.rows()); }
  bool empty() const { return vectors.rows() == 0; }
  void append(const Eigen::Ref<const Eigen::VectorXd>& v, const Eigen::Ref<const Eigen::VectorXd>& target,
              double weight, ClassId label);
};

struct TrainingBatch {
  LossItems visual;
  LossItems fused;
  LossItems pseudo;
};

struct Gradients {
  RowMatrixXd weights;
  Eigen::VectorXd bias;
};

struct LossValue {
  double loss = 0;
  Gradients grad;
};

/// softmax(W v + b).
Eigen::VectorXd forward(const AdapterModel& model, const Eigen::Ref<const Eigen::VectorXd>& v);

/// Weighted cross-entropy over retrieved per-image visual class features.
LossValue visual_support_loss(const AdapterModel& model, const LossItems& items);
/// Weighted cross-entropy over fused class features of retrieved classes.
LossValue fused_support_loss(const AdapterModel& model, const LossItems& items);
/// Weighted KL(target || model) over pseudo-labelled fused features.
LossValue pseudo_label_loss(const AdapterModel& model, const LossItems& items);

/// visual + beta_f * fused + beta_p * pseudo, each term evaluated separately.
LossValue total_loss(const AdapterModel& model, const TrainingBatch& batch, const TrainConfig& config);

/// Pseudo visual class features for classes without visual support that the
/// zero-shot prediction assigns to at least one patch.
std::vector<std::pair<ClassId, Eigen::VectorXd>> pseudo_visual_class_features(const DenseFeatureMap& x,
                                                                              const TextBank& bank, double tau,
                                                                              const std::set<ClassId>& unsupported);

/// Softmax over classes of f . t_c at temperature tau.
Eigen::VectorXd pseudo_label_distribution(const Eigen::Ref<const Eigen::VectorXd>& f, const TextBank& bank, double tau);

/// Fused vectors of class c under the store's lambdas, taken from the store's
/// maintained fused set when `bank` is the attached bank.
std::vector<Eigen::VectorXd> fused_vectors_for(const SupportStore& store, const TextBank& bank, ClassId c);

TrainingBatch assemble_batch(const SupportStore& store, const RetrievedSet& retrieved,
                             const Eigen::VectorXd& class_weights,
                             const std::vector<std::pair<ClassId, Eigen::VectorXd>>& pseudo_features,
                             const TextBank& bank, const TrainConfig& config);

struct AdamState {
  RowMatrixXd m_weights, v_weights;
  Eigen::VectorXd m_bias, v_bias;

  static AdamState zeros(const AdapterModel& model);
};

/// One bias-corrected Adam update; step_index counts from 1.
void adam_step(AdapterModel& model, const Gradients& grad, AdamState& state, const TrainConfig& config,
               std::size_t step_index);

/// Called before each update with the 1-based step index, the current model
/// and the total loss evaluated at it.
using StepObserver = std::function<void(std::size_t, const AdapterModel&, double)>;

/// Trains the per-image classifier on a fixed batch from W = 0, b = 0.
AdapterModel fit_batch(const TrainingBatch& batch, std::size_t num_classes, std::size_t dim, const TrainConfig& config,
                       const StepObserver& observer = {});

struct AdaptationInputs {
  RetrievedSet retrieved;
  Eigen::VectorXd class_weights;
  std::vector<std::pair<ClassId, Eigen::VectorXd>> pseudo_features;
  TrainingBatch batch;
};

/// Retrieval, relevance weights, pseudo features and batch assembly for one
/// query image. The bank must be materialized.
AdaptationInputs prepare_adaptation(const SupportStore& store, const DenseFeatureMap& x, const TextBank& bank,
                                    const std::set<ClassId>& unsupported, const TrainConfig& config);

/// Full per-image adaptation. Returns nullopt when there is no training
/// signal, in which case the caller falls back to zero-shot prediction.
std::optional<AdapterModel> train_adapter(const SupportStore& store, const DenseFeatureMap& x, const TextBank& bank,
                                          const std::set<ClassId>& unsupported, const TrainConfig& config,
                                          const StepObserver& observer = {});

}  // namespace rns
