#include "rns/adapter.hpp"

#include <cmath>

#include "rns/inference.hpp"

namespace rns {

void TrainConfig::validate() const {
  if (steps < 1) throw Error(ErrorKind::InvalidArgument, "steps must be >= 1");
  if (!(learning_rate > 0)) throw Error(ErrorKind::InvalidArgument, "learning rate must be positive");
  if (!(tau > 0)) throw Error(ErrorKind::InvalidArgument, "tau must be positive");
  if (!(beta_f >= 0) || !(beta_p >= 0)) throw Error(ErrorKind::InvalidArgument, "loss weights must be non-negative");
  if (k < 1) throw Error(ErrorKind::InvalidArgument, "k must be >= 1");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1) || !(adam_epsilon > 0))
    throw Error(ErrorKind::InvalidArgument, "invalid Adam moments");
}

void LossItems::append(const Eigen::Ref<const Eigen::VectorXd>& v, const Eigen::Ref<const Eigen::VectorXd>& target,
                       double weight, ClassId label) {
  const Eigen::Index n = vectors.rows();
  if (n == 0) {
    vectors.resize(0, v.size());
    targets.resize(0, target.size());
  }
  if (v.size() != vectors.cols() || target.size() != targets.cols())
    throw Error(ErrorKind::DimensionMismatch, "loss item shape differs from earlier items");
  vectors.conservativeResize(n + 1, Eigen::NoChange);
  targets.conservativeResize(n + 1, Eigen::NoChange);
  weights.conservativeResize(n + 1);
  vectors.row(n) = v.transpose();
  targets.row(n) = target.transpose();
  weights(n) = weight;
  labels.push_back(label);
}

Eigen::VectorXd forward(const AdapterModel& model, const Eigen::Ref<const Eigen::VectorXd>& v) {
  if (static_cast<std::size_t>(v.size()) != model.dim())
    throw Error(ErrorKind::DimensionMismatch, "input dimension differs from classifier");
  return softmax(model.weights * v + model.bias);
}

namespace {

Gradients zero_gradients(const AdapterModel& model) {
  return {RowMatrixXd::Zero(model.weights.rows(), model.weights.cols()), Eigen::VectorXd::Zero(model.bias.size())};
}

// Row-wise log-softmax of the classifier logits.
RowMatrixXd log_probs(const AdapterModel& model, const RowMatrixXd& vectors) {
  RowMatrixXd z = vectors * model.weights.transpose();
  z.rowwise() += model.bias.transpose();
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double m = z.row(i).maxCoeff();
    const double lse = m + std::log((z.row(i).array() - m).exp().sum());
    z.row(i).array() -= lse;
  }
  return z;
}

// sum_i w_i * (-sum_c T_ic log q_ic [+ sum_c T_ic log T_ic]) and its gradient.
// The gradient w.r.t. the logits of item i is w_i (q_i - T_i) because every
// target row sums to one.
LossValue soft_target_loss(const AdapterModel& model, const LossItems& items, bool subtract_entropy) {
  LossValue out{0.0, zero_gradients(model)};
  if (items.empty()) return out;
  if (static_cast<std::size_t>(items.vectors.cols()) != model.dim() ||
      static_cast<std::size_t>(items.targets.cols()) != model.num_classes())
    throw Error(ErrorKind::DimensionMismatch, "loss items do not match classifier shape");

  const RowMatrixXd logq = log_probs(model, items.vectors);
  for (Eigen::Index i = 0; i < logq.rows(); ++i) {
    double term = 0;
    for (Eigen::Index c = 0; c < logq.cols(); ++c) {
      const double t = items.targets(i, c);
      if (t == 0) continue;
      term -= t * logq(i, c);
      if (subtract_entropy) term += t * std::log(t);
    }
    out.loss += items.weights(i) * term;
  }
  RowMatrixXd g = logq.array().exp().matrix() - items.targets;
  g.array().colwise() *= items.weights.array();
  out.grad.weights = g.transpose() * items.vectors;
  out.grad.bias = g.colwise().sum().transpose();
  return out;
}

}  // namespace

LossValue visual_support_loss(const AdapterModel& model, const LossItems& items) {
  return soft_target_loss(model, items, false);
}

LossValue fused_support_loss(const AdapterModel& model, const LossItems& items) {
  return soft_target_loss(model, items, false);
}

LossValue pseudo_label_loss(const AdapterModel& model, const LossItems& items) {
  return soft_target_loss(model, items, true);
}

LossValue total_loss(const AdapterModel& model, const TrainingBatch& batch, const TrainConfig& config) {
  LossValue out = visual_support_loss(model, batch.visual);
  const LossValue f = fused_support_loss(model, batch.fused);
  const LossValue p = pseudo_label_loss(model, batch.pseudo);
  out.loss += config.beta_f * f.loss + config.beta_p * p.loss;
  out.grad.weights += config.beta_f * f.grad.weights + config.beta_p * p.grad.weights;
  out.grad.bias += config.beta_f * f.grad.bias + config.beta_p * p.grad.bias;
  return out;
}

std::vector<std::pair<ClassId, Eigen::VectorXd>> pseudo_visual_class_features(const DenseFeatureMap& x,
                                                                              const TextBank& bank, double tau,
                                                                              const std::set<ClassId>& unsupported) {
  std::vector<std::pair<ClassId, Eigen::VectorXd>> out;
  if (unsupported.empty() || bank.all_absent) return out;

  const ProbMap zs = zero_shot_predict(x, bank, tau);
  const std::size_t C = bank.num_classes();
  RowMatrixXd assigned = RowMatrixXd::Zero(x.patches(), C);
  for (Eigen::Index j = 0; j < zs.data.rows(); ++j) assigned(j, argmax(zs.data.row(j))) = 1.0;

  for (ClassId c : unsupported) {
    if (c >= C) throw Error(ErrorKind::InvalidArgument, "unsupported class id out of range");
    const double count = assigned.col(c).sum();
    if (count == 0) continue;
    out.emplace_back(c, l2_normalized(x.data.transpose() * (assigned.col(c) / count)));
  }
  return out;
}

Eigen::VectorXd pseudo_label_distribution(const Eigen::Ref<const Eigen::VectorXd>& f, const TextBank& bank,
                                          double tau) {
  if (static_cast<std::size_t>(f.size()) != bank.dim())
    throw Error(ErrorKind::DimensionMismatch, "feature dimension differs from text bank");
  return softmax(bank.features * f, tau);
}

std::vector<Eigen::VectorXd> fused_vectors_for(const SupportStore& store, const TextBank& bank, ClassId c) {
  if (store.text() == &bank) return store.fused_for(c);
  std::vector<Eigen::VectorXd> out;
  if (store.class_counts().at(c) == 0) return out;
  const Eigen::VectorXd visual = aggregate_class_feature(store, c);
  const std::vector<double> lambdas = bank.all_absent ? std::vector<double>{0.0} : store.lambdas();
  for (double lambda : lambdas) out.push_back(fuse(bank.features.row(c).transpose(), visual, lambda));
  return out;
}

TrainingBatch assemble_batch(const SupportStore& store, const RetrievedSet& retrieved,
                             const Eigen::VectorXd& class_weights,
                             const std::vector<std::pair<ClassId, Eigen::VectorXd>>& pseudo_features,
                             const TextBank& bank, const TrainConfig& config) {
  const std::size_t C = store.num_classes();
  if (static_cast<std::size_t>(class_weights.size()) != C || bank.num_classes() != C || bank.dim() != store.dim())
    throw Error(ErrorKind::DimensionMismatch, "batch operands disagree on class count or dimension");

  TrainingBatch batch;
  const auto one_hot = [C](ClassId c) {
    Eigen::VectorXd e = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(C));
    e(c) = 1.0;
    return e;
  };

  for (std::size_t i : retrieved.entries) {
    const SupportEntry e = store.entry(i);
    batch.visual.append(e.vector.cast<double>(), one_hot(e.class_id), class_weights(e.class_id), e.class_id);
  }
  for (ClassId c : retrieved.classes)
    for (const Eigen::VectorXd& f : fused_vectors_for(store, bank, c))
      batch.fused.append(f, one_hot(c), class_weights(c), c);

  if (!bank.all_absent) {
    for (const auto& [c, visual] : pseudo_features) {
      for (double lambda : store.lambdas()) {
        const Eigen::VectorXd f = fuse(bank.features.row(c).transpose(), visual, lambda);
        batch.pseudo.append(f, pseudo_label_distribution(f, bank, config.tau), class_weights(c), c);
      }
    }
  }
  return batch;
}

AdamState AdamState::zeros(const AdapterModel& model) {
  return {RowMatrixXd::Zero(model.weights.rows(), model.weights.cols()),
          RowMatrixXd::Zero(model.weights.rows(), model.weights.cols()), Eigen::VectorXd::Zero(model.bias.size()),
          Eigen::VectorXd::Zero(model.bias.size())};
}

void adam_step(AdapterModel& model, const Gradients& grad, AdamState& state, const TrainConfig& config,
               std::size_t step_index) {
  if (step_index < 1) throw Error(ErrorKind::InvalidArgument, "Adam step index starts at 1");
  if (!grad.weights.allFinite() || !grad.bias.allFinite())
    throw Error(ErrorKind::NonFiniteGradient, "gradient has non-finite entries at step " + std::to_string(step_index));

  const double b1 = config.adam_beta1;
  const double b2 = config.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, double(step_index));
  const double c2 = 1.0 - std::pow(b2, double(step_index));
  const double lr = config.learning_rate;
  const double eps = config.adam_epsilon;

  state.m_weights = b1 * state.m_weights + (1 - b1) * grad.weights;
  state.v_weights = b2 * state.v_weights + (1 - b2) * grad.weights.cwiseAbs2();
  state.m_bias = b1 * state.m_bias + (1 - b1) * grad.bias;
  state.v_bias = b2 * state.v_bias + (1 - b2) * grad.bias.cwiseAbs2();

  model.weights.array() -= lr * (state.m_weights.array() / c1) / ((state.v_weights.array() / c2).sqrt() + eps);
  model.bias.array() -= lr * (state.m_bias.array() / c1) / ((state.v_bias.array() / c2).sqrt() + eps);
}

AdapterModel fit_batch(const TrainingBatch& batch, std::size_t num_classes, std::size_t dim, const TrainConfig& config,
                       const StepObserver& observer) {
  config.validate();

  // Stack every term into one weighted soft-target problem. The KL entropy
  // term does not depend on the model and is carried as a constant.
  LossItems all;
  all.vectors.resize(0, static_cast<Eigen::Index>(dim));
  all.targets.resize(0, static_cast<Eigen::Index>(num_classes));
  double entropy_offset = 0;
  const auto stack = [&](const LossItems& items, double scale, bool kl) {
    if (items.empty()) return;
    const Eigen::Index n0 = all.vectors.rows();
    const Eigen::Index n = items.vectors.rows();
    all.vectors.conservativeResize(n0 + n, Eigen::NoChange);
    all.targets.conservativeResize(n0 + n, Eigen::NoChange);
    all.weights.conservativeResize(n0 + n);
    all.vectors.bottomRows(n) = items.vectors;
    all.targets.bottomRows(n) = items.targets;
    all.weights.tail(n) = scale * items.weights;
    if (kl)
      for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index c = 0; c < items.targets.cols(); ++c)
          if (const double t = items.targets(i, c); t > 0) entropy_offset += scale * items.weights(i) * t * std::log(t);
  };
  stack(batch.visual, 1.0, false);
  stack(batch.fused, config.beta_f, false);
  stack(batch.pseudo, config.beta_p, true);

  AdapterModel model = AdapterModel::zeros(num_classes, dim);
  AdamState state = AdamState::zeros(model);
  for (std::size_t step = 1; step <= config.steps; ++step) {
    const LossValue lv = soft_target_loss(model, all, false);
    if (observer) observer(step, model, lv.loss + entropy_offset);
    adam_step(model, lv.grad, state, config, step);
  }
  return model;
}

AdaptationInputs prepare_adaptation(const SupportStore& store, const DenseFeatureMap& x, const TextBank& bank,
                                    const std::set<ClassId>& unsupported, const TrainConfig& config) {
  if (bank.num_classes() != store.num_classes() || bank.dim() != store.dim() || x.dim() != store.dim())
    throw Error(ErrorKind::DimensionMismatch, "store, text bank and features disagree in shape");
  if (!bank.materialized()) throw Error(ErrorKind::InvalidArgument, "text bank must be materialized");

  AdaptationInputs in;
  if (!store.empty()) in.retrieved = retrieve_for_image(x, store, config.k, config.threads);
  in.class_weights = relevance_weights_or_fallback(x, bank, config.tau);
  in.pseudo_features = pseudo_visual_class_features(x, bank, config.tau, unsupported);
  in.batch = assemble_batch(store, in.retrieved, in.class_weights, in.pseudo_features, bank, config);
  return in;
}

std::optional<AdapterModel> train_adapter(const SupportStore& store, const DenseFeatureMap& x, const TextBank& bank,
                                          const std::set<ClassId>& unsupported, const TrainConfig& config,
                                          const StepObserver& observer) {
  config.validate();
  const AdaptationInputs in = prepare_adaptation(store, x, bank, unsupported, config);
  if (in.batch.visual.empty() && in.batch.fused.empty() && in.batch.pseudo.empty()) return std::nullopt;
  return fit_batch(in.batch, store.num_classes(), store.dim(), config, observer);
}

}  // namespace rns
