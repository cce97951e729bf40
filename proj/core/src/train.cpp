#include "mprvit/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "mprvit/checkpoint.hpp"

namespace mprvit {

void TrainConfig::validate() const {
  // lr = 0 is legal: it is the documented null-update determinism probe.
  if (!(lr >= 0.0f)) throw ConfigError("TrainConfig: lr must be non-negative");
  if (!(beta1 > 0.0f && beta1 < 1.0f) || !(beta2 > 0.0f && beta2 < 1.0f)) {
    throw ConfigError("TrainConfig: betas must lie in (0, 1)");
  }
  if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
  if (max_epochs < 1) throw ConfigError("TrainConfig: max_epochs must be >= 1");
  if (patience < 1) throw ConfigError("TrainConfig: patience must be >= 1");
  if (flip_prob < 0.0f || flip_prob > 1.0f) throw ConfigError("TrainConfig: flip_prob in [0, 1]");
  if (weight_decay < 0.0f) throw ConfigError("TrainConfig: weight_decay must be >= 0");
}

void OptimizerState::init_like(const ParamTable& params) {
  m.clear();
  v.clear();
  step = 0;
  for (const auto& [name, t] : params) {
    m.emplace_back(t.numel(), 0.0f);
    v.emplace_back(t.numel(), 0.0f);
  }
}

void adamw_step(ParamTable& params, OptimizerState& state, const TrainConfig& cfg) {
  if (!state.initialized()) state.init_like(params);
  if (state.m.size() != params.size()) {
    throw ContractError("adamw_step: optimizer state does not match parameter table");
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(static_cast<double>(cfg.beta1), static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(static_cast<double>(cfg.beta2), static_cast<double>(state.step));
  std::size_t pi = 0;
  for (auto& [name, t] : params) {
    if (!t.has_grad()) throw ContractError("adamw_step: missing gradient for " + name);
    auto theta = t.data();
    auto g = t.grad();
    std::vector<float>& mm = state.m[pi];
    std::vector<float>& vv = state.v[pi];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      mm[i] = cfg.beta1 * mm[i] + (1.0f - cfg.beta1) * g[i];
      vv[i] = cfg.beta2 * vv[i] + (1.0f - cfg.beta2) * g[i] * g[i];
      const double mhat = static_cast<double>(mm[i]) / bc1;
      const double vhat = static_cast<double>(vv[i]) / bc2;
      const double update = mhat / (std::sqrt(vhat) + static_cast<double>(cfg.eps));
      // decay applied directly to theta, not through the moments
      theta[i] = static_cast<float>(static_cast<double>(theta[i]) -
                                    static_cast<double>(cfg.lr) * update -
                                    static_cast<double>(cfg.lr) *
                                        static_cast<double>(cfg.weight_decay) *
                                        static_cast<double>(theta[i]));
    }
    ++pi;
  }
}

namespace {

void mirror_columns(std::vector<float>& buf, int planes, int height, int width) {
  for (int p = 0; p < planes; ++p) {
    for (int y = 0; y < height; ++y) {
      float* row = buf.data() + (static_cast<std::size_t>(p) * height + y) * width;
      std::reverse(row, row + width);
    }
  }
}

}  // namespace

SlicePair augment_flip(const SlicePair& sample, Rng& rng, float flip_prob) {
  SlicePair out = sample;
  if (rng.bernoulli(static_cast<double>(flip_prob))) {
    mirror_columns(out.input, out.channels, out.height, out.width);
    mirror_columns(out.target, 1, out.height, out.width);
  }
  return out;
}

Tensor make_input_batch(const std::vector<const SlicePair*>& batch) {
  if (batch.empty()) throw ContractError("make_input_batch: empty batch");
  const SlicePair& first = *batch[0];
  const std::size_t per = first.input.size();
  std::vector<float> data;
  data.reserve(batch.size() * per);
  for (const SlicePair* s : batch) {
    if (s->input.size() != per || s->height != first.height || s->width != first.width) {
      throw DimensionError("make_input_batch: inconsistent slice dimensions");
    }
    data.insert(data.end(), s->input.begin(), s->input.end());
  }
  return Tensor::from(Shape{batch.size(), static_cast<std::size_t>(first.channels),
                            static_cast<std::size_t>(first.height),
                            static_cast<std::size_t>(first.width)},
                      std::move(data));
}

Tensor make_target_batch(const std::vector<const SlicePair*>& batch) {
  if (batch.empty()) throw ContractError("make_target_batch: empty batch");
  const SlicePair& first = *batch[0];
  std::vector<float> data;
  data.reserve(batch.size() * first.target.size());
  for (const SlicePair* s : batch) data.insert(data.end(), s->target.begin(), s->target.end());
  return Tensor::from(Shape{batch.size(), 1, static_cast<std::size_t>(first.height),
                            static_cast<std::size_t>(first.width)},
                      std::move(data));
}

double train_epoch(Generator& model, const std::vector<SlicePair>& slices, OptimizerState& state,
                   const TrainConfig& cfg, int epoch_index) {
  cfg.validate();
  if (slices.empty()) throw ContractError("train_epoch: empty dataset");
  Rng rng = Rng(cfg.seed).fork(0x45504F43ULL + static_cast<std::uint64_t>(epoch_index));

  std::vector<std::size_t> order(slices.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);

  model.params().set_requires_grad(true);
  double loss_sum = 0.0;
  std::size_t sample_count = 0;
  int batch_index = 0;
  for (std::size_t pos = 0; pos < order.size(); pos += static_cast<std::size_t>(cfg.batch_size)) {
    const std::size_t take = std::min(static_cast<std::size_t>(cfg.batch_size), order.size() - pos);
    std::vector<SlicePair> augmented;
    augmented.reserve(take);
    for (std::size_t i = 0; i < take; ++i) {
      augmented.push_back(augment_flip(slices[order[pos + i]], rng, cfg.flip_prob));
    }
    std::vector<const SlicePair*> batch;
    batch.reserve(take);
    for (const auto& s : augmented) batch.push_back(&s);

    for (auto& [name, t] : model.params()) t.drop_grad();
    Tensor x = make_input_batch(batch);
    Tensor y = make_target_batch(batch);
    Tensor loss = l1_loss(model.forward(x), y);
    const double loss_value = static_cast<double>(loss.item());
    if (!std::isfinite(loss_value)) {
      tape_reset<float>();
      throw NumericFault("train_epoch: non-finite loss in epoch " + std::to_string(epoch_index) +
                         ", batch " + std::to_string(batch_index));
    }
    backward(loss);
    adamw_step(model.params(), state, cfg);
    loss_sum += loss_value * static_cast<double>(take);
    sample_count += take;
    ++batch_index;
  }
  return loss_sum / static_cast<double>(sample_count);
}

double evaluate_loss(const Generator& model, const std::vector<SlicePair>& slices, int batch_size) {
  if (slices.empty()) throw ContractError("evaluate_loss: empty dataset");
  TapePause<float> pause;
  double loss_sum = 0.0;
  for (std::size_t pos = 0; pos < slices.size(); pos += static_cast<std::size_t>(batch_size)) {
    const std::size_t take = std::min(static_cast<std::size_t>(batch_size), slices.size() - pos);
    std::vector<const SlicePair*> batch;
    for (std::size_t i = 0; i < take; ++i) batch.push_back(&slices[pos + i]);
    Tensor loss = l1_loss(model.forward(make_input_batch(batch)), make_target_batch(batch));
    loss_sum += static_cast<double>(loss.item()) * static_cast<double>(take);
  }
  return loss_sum / static_cast<double>(slices.size());
}

EarlyStopDecision early_stop_check(const std::vector<double>& val_history, int patience) {
  if (val_history.empty()) throw ContractError("early_stop_check: empty history");
  EarlyStopDecision d;
  double best = val_history[0];
  d.best_epoch = 0;
  for (std::size_t i = 1; i < val_history.size(); ++i) {
    if (val_history[i] < best - 1e-6) {  // plateau within tolerance is non-improvement
      best = val_history[i];
      d.best_epoch = static_cast<int>(i);
    }
  }
  const int since_best = static_cast<int>(val_history.size()) - 1 - d.best_epoch;
  d.stop = since_best >= patience;
  return d;
}

FitReport fit(Generator& model, const std::vector<SlicePair>& train_slices,
              const std::vector<SlicePair>& val_slices, OptimizerState& state,
              const TrainConfig& cfg, const FitOptions& opts, const FitState& resume) {
  cfg.validate();
  if (!state.initialized()) state.init_like(model.params());

  FitReport report;
  report.val_losses = resume.val_history;
  report.train_losses.assign(static_cast<std::size_t>(resume.start_epoch), 0.0);

  std::ofstream log;
  if (opts.write_artifacts) {
    std::filesystem::create_directories(opts.out_dir);
    log.open(opts.out_dir / "loss_log.txt", resume.start_epoch > 0 ? std::ios::app : std::ios::trunc);
    if (!log) throw IoError("fit: cannot open loss log in " + opts.out_dir.string());
  }

  double best_val = std::numeric_limits<double>::infinity();
  for (double v : resume.val_history) best_val = std::min(best_val, v);

  for (int epoch = resume.start_epoch; epoch < cfg.max_epochs; ++epoch) {
    const double train_loss = train_epoch(model, train_slices, state, cfg, epoch);
    const double val_loss = evaluate_loss(model, val_slices, cfg.batch_size);
    report.train_losses.push_back(train_loss);
    report.val_losses.push_back(val_loss);
    report.epochs_run += 1;
    if (log) {
      log << epoch << ' ' << train_loss << ' ' << val_loss << '\n';
      log.flush();
    }
    if (opts.write_artifacts) {
      checkpoint_save(opts.out_dir / "last.ckpt", model.params(), state, epoch, val_loss,
                      model.config(), opts.modalities);
      if (val_loss < best_val) {
        checkpoint_save(opts.out_dir / "best.ckpt", model.params(), state, epoch, val_loss,
                        model.config(), opts.modalities);
      }
    }
    best_val = std::min(best_val, val_loss);
    const EarlyStopDecision decision = early_stop_check(report.val_losses, cfg.patience);
    if (decision.stop) {
      report.stopped_early = true;
      break;
    }
  }
  const EarlyStopDecision final_decision = early_stop_check(report.val_losses, cfg.patience);
  report.best_epoch = final_decision.best_epoch;
  report.best_val_loss = report.val_losses[static_cast<std::size_t>(report.best_epoch)];
  return report;
}

}  // namespace mprvit
