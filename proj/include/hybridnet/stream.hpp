#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "hybridnet/hybrid_net.hpp"

// Synthetic drifting stream: Gaussian-blob class images whose geometry (or
// labeling) drifts per frame at an analytically known rate.

namespace hybridnet {

enum class DriftKind { kRotation, kMeanShift, kLabelFlip };

struct StreamSpec {
  int n_classes = 8;
  int64_t channels = 1, height = 32, width = 32;
  DriftKind drift_kind = DriftKind::kRotation;
  double drift_rate = 0.0;  // radians (rotation), pixels (mean-shift) or
                            // class steps (label-flip) per frame
  int64_t frames = 1000;
  int frames_per_update = 10;
  int update_iters = 15;
  int replay_len = 20;
  int segment = 100;
  uint64_t seed = 0;
  double online_lr = 0.02;
  // blob geometry
  double radius = 9.0, blob_sigma = 2.5, noise = 0.15, jitter = 0.75;
};

void validate_stream_spec(const StreamSpec& spec);

class StreamGenerator {
 public:
  StreamGenerator(const StreamSpec& spec, uint64_t seed);

  Sample next();  // frame t, then advances
  int64_t frame() const { return t_; }

  // Blob-center angle of class `cls` at frame `t`; rotation drift adds
  // exactly drift_rate * t radians.
  static double class_angle(const StreamSpec& spec, int cls, int64_t t);

  // Frame drawn as if at time `t` (used for frame-0 datasets).
  Sample sample_at(int64_t t);

 private:
  StreamSpec spec_;
  std::mt19937_64 rng_;
  int64_t t_ = 0;
};

// i.i.d. samples from the frame-0 distribution (the pretraining distribution).
std::vector<Sample> make_dataset(const StreamSpec& spec, int count,
                                 uint64_t seed);

}  // namespace hybridnet
