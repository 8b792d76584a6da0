#pragma once

// Client-side unsupervised training: the received global head acts as a
// frozen teacher producing confidence-thresholded per-pixel pseudo-labels
// for a student copy of itself.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedmox/moe.hpp"
#include "fedmox/optimizer.hpp"
#include "fedmox/synth.hpp"

namespace fedmox {

struct SSLConfig {
  double confidence_threshold = 0.9;
  double unsup_weight = 4.0;
  double prox_mu = 0.0;
  std::size_t local_epochs = 1;

  void validate() const;
  bool operator==(const SSLConfig&) const = default;
};

struct PseudoLabelBatch {
  std::vector<int> targets;          // per pixel, argmax of the teacher
  std::vector<std::uint8_t> mask;    // 1 where teacher max-probability >= threshold
  std::vector<double> confidence;    // teacher max-probability per pixel
  double coverage = 0.0;             // mean(mask)

  std::size_t size() const { return targets.size(); }
  void append(const PseudoLabelBatch& other);
};

// Negative or non-finite thresholds are rejected. A threshold above 1 is
// unattainable and yields an empty mask.
PseudoLabelBatch generate_pseudo_labels(const TaskHead& teacher, const Tensor& features,
                                        double threshold, const MoEForwardOptions& opts = {});

// Labels from precomputed teacher probabilities (K x H x W).
PseudoLabelBatch label_pixels(const Tensor& teacher_probs, double threshold);

// unsup_weight * mean over masked-in pixels of cross-entropy against the
// pseudo targets; exactly 0 when nothing is masked in.
Tensor unsupervised_loss(const Tensor& student_logits, const PseudoLabelBatch& batch,
                         double unsup_weight);

// (mu / 2) * ||w - anchor||^2 over all parameters; anchor is constant.
Tensor proximal_term(const TaskHead& student, const TaskHead& anchor, double mu);

struct LocalTrainOptions {
  std::size_t batch_size = 8;
  // Clients always route sparsely unless the head is domain-assigned.
  std::optional<RoutingMode> mode_override;
};

struct ClientUpdate {
  TaskHead head;
  double mean_loss = 0.0;
  double coverage = 0.0;
  std::size_t steps = 0;
  std::vector<std::string> warnings;
};

// Pixel-stacks C x H x W feature maps into one C x 1 x P map.
Tensor stack_pixels(const std::vector<const Tensor*>& maps);

ClientUpdate client_local_train(const TaskHead& global_head,
                                std::span<const UnlabeledFeatures> data, const SSLConfig& cfg,
                                const OptimizerConfig& opt, const LocalTrainOptions& options,
                                std::uint64_t stream_seed);

}  // namespace fedmox
