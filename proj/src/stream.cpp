#include "hybridnet/stream.hpp"

#include <cmath>
#include <stdexcept>

namespace hybridnet {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

double uniform01(std::mt19937_64& rng) {
  return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
}

// Box-Muller, pinned so streams do not depend on the standard library.
double gauss(std::mt19937_64& rng) {
  const double u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

}  // namespace

void validate_stream_spec(const StreamSpec& spec) {
  if (spec.n_classes < 2) fail("stream: need at least two classes");
  if (spec.channels < 1 || spec.height < 4 || spec.width < 4)
    fail("stream: image dimensions too small");
  if (spec.drift_rate < 0.0) fail("stream: drift_rate must be >= 0");
  if (spec.frames < spec.replay_len)
    fail("stream: frames must be >= replay_len");
  if (spec.frames_per_update < 1 || spec.update_iters < 1 ||
      spec.replay_len < 1 || spec.segment < 1)
    fail("stream: update cadence fields must be positive");
  if (!(spec.blob_sigma > 0.0) || spec.radius < 0.0 || spec.noise < 0.0 ||
      spec.jitter < 0.0)
    fail("stream: blob geometry out of range");
  if (!(spec.online_lr >= 0.0)) fail("stream: online_lr must be >= 0");
}

StreamGenerator::StreamGenerator(const StreamSpec& spec, uint64_t seed)
    : spec_(spec), rng_(seed) {
  validate_stream_spec(spec_);
}

double StreamGenerator::class_angle(const StreamSpec& spec, int cls, int64_t t) {
  const double base = 2.0 * M_PI * cls / spec.n_classes;
  if (spec.drift_kind == DriftKind::kRotation)
    return base + spec.drift_rate * static_cast<double>(t);
  return base;
}

Sample StreamGenerator::sample_at(int64_t t) {
  const int cls = static_cast<int>(uniform01(rng_) * spec_.n_classes) %
                  spec_.n_classes;
  const double angle = class_angle(spec_, cls, t);
  const double mid_x = (spec_.width - 1) / 2.0;
  const double mid_y = (spec_.height - 1) / 2.0;
  double cx = mid_x + spec_.radius * std::cos(angle);
  double cy = mid_y + spec_.radius * std::sin(angle);
  if (spec_.drift_kind == DriftKind::kMeanShift) {
    const double shift = spec_.drift_rate * static_cast<double>(t) / M_SQRT2;
    cx += shift;
    cy += shift;
  }
  cx += spec_.jitter * gauss(rng_);
  cy += spec_.jitter * gauss(rng_);

  std::vector<double> img(spec_.channels * spec_.height * spec_.width);
  const double inv2s2 = 1.0 / (2.0 * spec_.blob_sigma * spec_.blob_sigma);
  for (int64_t c = 0; c < spec_.channels; ++c)
    for (int64_t y = 0; y < spec_.height; ++y)
      for (int64_t x = 0; x < spec_.width; ++x) {
        const double dx = x - cx, dy = y - cy;
        double v = std::exp(-(dx * dx + dy * dy) * inv2s2);
        if (spec_.noise > 0.0) v += spec_.noise * gauss(rng_);
        img[(c * spec_.height + y) * spec_.width + x] = v;
      }

  Sample s;
  s.x = Tensor::from_data({spec_.channels, spec_.height, spec_.width},
                          std::move(img));
  s.label = cls;
  if (spec_.drift_kind == DriftKind::kLabelFlip) {
    const int shift =
        static_cast<int>(std::floor(spec_.drift_rate * static_cast<double>(t)));
    s.label = (cls + shift) % spec_.n_classes;
  }
  return s;
}

Sample StreamGenerator::next() { return sample_at(t_++); }

std::vector<Sample> make_dataset(const StreamSpec& spec, int count,
                                 uint64_t seed) {
  StreamGenerator gen(spec, seed);
  std::vector<Sample> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) out.push_back(gen.sample_at(0));
  return out;
}

}  // namespace hybridnet
