#include "fedmox/ssl.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "fedmox/rng.hpp"

namespace fedmox {

void SSLConfig::validate() const {
  if (!(confidence_threshold >= 0.0 && confidence_threshold <= 1.0)) {
    throw std::invalid_argument("ssl.confidence_threshold must be in [0,1]");
  }
  if (!(unsup_weight >= 0.0)) throw std::invalid_argument("ssl.unsup_weight must be >= 0");
  if (!(prox_mu >= 0.0)) throw std::invalid_argument("ssl.prox_mu must be >= 0");
}

void PseudoLabelBatch::append(const PseudoLabelBatch& other) {
  targets.insert(targets.end(), other.targets.begin(), other.targets.end());
  mask.insert(mask.end(), other.mask.begin(), other.mask.end());
  confidence.insert(confidence.end(), other.confidence.begin(), other.confidence.end());
  std::size_t kept = 0;
  for (auto m : mask) kept += m;
  coverage = size() ? static_cast<double>(kept) / static_cast<double>(size()) : 0.0;
}

PseudoLabelBatch label_pixels(const Tensor& teacher_probs, double threshold) {
  if (!(threshold >= 0.0) || !std::isfinite(threshold)) {
    throw std::invalid_argument("pseudo-label threshold must be a finite value >= 0");
  }
  const std::size_t k = teacher_probs.dim(0);
  const std::size_t pixels = teacher_probs.dim(1) * teacher_probs.dim(2);
  auto pv = teacher_probs.data();
  PseudoLabelBatch batch;
  batch.targets.resize(pixels);
  batch.mask.resize(pixels);
  batch.confidence.resize(pixels);
  std::size_t kept = 0;
  for (std::size_t p = 0; p < pixels; ++p) {
    int best = 0;
    double best_v = pv[p];
    for (std::size_t c = 1; c < k; ++c) {
      if (pv[c * pixels + p] > best_v) {
        best_v = pv[c * pixels + p];
        best = static_cast<int>(c);
      }
    }
    batch.targets[p] = best;
    batch.confidence[p] = best_v;
    batch.mask[p] = best_v >= threshold ? 1 : 0;
    kept += batch.mask[p];
  }
  batch.coverage = static_cast<double>(kept) / static_cast<double>(pixels);
  return batch;
}

PseudoLabelBatch generate_pseudo_labels(const TaskHead& teacher, const Tensor& features,
                                        double threshold, const MoEForwardOptions& opts) {
  if (!(threshold >= 0.0) || !std::isfinite(threshold)) {
    throw std::invalid_argument("pseudo-label threshold " + std::to_string(threshold) +
                                " must be finite and >= 0");
  }
  NoGradGuard no_grad;
  Tensor probs = ops::softmax_channel(teacher.forward(features, opts));
  return label_pixels(probs, threshold);
}

Tensor unsupervised_loss(const Tensor& student_logits, const PseudoLabelBatch& batch,
                         double unsup_weight) {
  Tensor ce = ops::cross_entropy(ops::softmax_channel(student_logits), batch.targets, batch.mask);
  return ops::scale(ce, unsup_weight);
}

Tensor proximal_term(const TaskHead& student, const TaskHead& anchor, double mu) {
  require_same_structure(student, anchor);
  auto ps = student.parameters(), pa = anchor.parameters();
  Tensor total;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    Tensor d = ops::sub(ps[i].value, pa[i].value.detach());
    Tensor sq = ops::sum(ops::mul(d, d));
    total = total.defined() ? ops::add(total, sq) : sq;
  }
  return ops::scale(total, mu / 2.0);
}

Tensor stack_pixels(const std::vector<const Tensor*>& maps) {
  if (maps.empty()) throw std::invalid_argument("stack_pixels: empty batch");
  const std::size_t c = maps.front()->dim(0);
  std::size_t total = 0;
  for (const auto* m : maps) {
    if (m->shape().size() != 3 || m->dim(0) != c) {
      throw ShapeError("stack_pixels: " + shape_str(m->shape()) + " vs channels " +
                       std::to_string(c));
    }
    total += m->dim(1) * m->dim(2);
  }
  std::vector<double> out(c * total);
  std::size_t offset = 0;
  for (const auto* m : maps) {
    const std::size_t n = m->dim(1) * m->dim(2);
    auto d = m->data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      std::copy(d.begin() + ch * n, d.begin() + (ch + 1) * n, out.begin() + ch * total + offset);
    }
    offset += n;
  }
  return Tensor({c, 1, total}, std::move(out));
}

ClientUpdate client_local_train(const TaskHead& global_head,
                                std::span<const UnlabeledFeatures> data, const SSLConfig& cfg,
                                const OptimizerConfig& opt_cfg, const LocalTrainOptions& options,
                                std::uint64_t stream_seed) {
  cfg.validate();
  ClientUpdate update{global_head, 0.0, 0.0, 0, {}};
  if (data.empty()) {
    update.warnings.push_back("client has no data; returning the broadcast head unchanged");
    return update;
  }
  if (options.batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  for (const auto& s : data) {
    if (s.domain_id != data.front().domain_id) {
      throw std::invalid_argument("client data spans several domains");
    }
  }
  const std::size_t domain = data.front().domain_id;

  // Teacher labels come from the unmodified broadcast head.
  MoEForwardOptions teacher_opts{kInferenceStep, domain, options.mode_override};
  std::vector<PseudoLabelBatch> labels;
  labels.reserve(data.size());
  double covered = 0.0, pixels = 0.0;
  for (const auto& s : data) {
    labels.push_back(generate_pseudo_labels(global_head, s.features, cfg.confidence_threshold,
                                            teacher_opts));
    covered += labels.back().coverage * static_cast<double>(labels.back().size());
    pixels += static_cast<double>(labels.back().size());
  }
  update.coverage = covered / pixels;

  Optimizer opt(opt_cfg);
  TaskHead& student = update.head;
  const auto params = student.parameters();
  Rng rng(stream_seed);
  std::vector<std::size_t> order(data.size());
  double loss_sum = 0.0;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      const std::size_t end = std::min(order.size(), start + options.batch_size);
      std::vector<const Tensor*> maps;
      PseudoLabelBatch batch;
      for (std::size_t i = start; i < end; ++i) {
        maps.push_back(&data[order[i]].features);
        batch.append(labels[order[i]]);
      }
      zero_grads(params);
      MoEForwardOptions fwd{step, domain, options.mode_override};
      Tensor loss = unsupervised_loss(student.forward(stack_pixels(maps), fwd), batch,
                                      cfg.unsup_weight);
      if (cfg.prox_mu > 0.0) loss = ops::add(loss, proximal_term(student, global_head, cfg.prox_mu));
      backward(loss);
      opt.step(params);
      loss_sum += loss.item();
      ++step;
    }
  }
  update.steps = step;
  update.mean_loss = step ? loss_sum / static_cast<double>(step) : 0.0;
  return update;
}

}  // namespace fedmox
