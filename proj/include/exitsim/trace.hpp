#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace exitsim {

/// Static cost and shape description of a partitioned early-exit network.
///
/// Exits are numbered 1..N; exits 1..N-1 live on the device, exit N runs on
/// the server after the partition point. All FLOP figures are in MFLOPs.
struct ExitTopology {
  int num_exits = 3;
  std::vector<double> segment_flops;  // backbone segment ending at exit n, size N-1
  std::vector<double> exit_flops;     // intermediate classifier n, size N-1
  double server_flops = 0.0;
  double predictor_flops = 0.0;
  int num_classes = 10;
  std::int64_t raw_feature_bits = 1;
  double compression_ratio = 1.0;

  /// Throws InvariantError naming the offending field.
  void validate() const;

  /// Payload size of one transmitted feature, ceil(raw / ratio).
  std::int64_t transmitted_bits() const;

  /// VGG16-BN on CIFAR10 with two early exits, server share 333.08 - 75.88 MFLOPs.
  /// raw_feature_bits is a 128x16x16 fp32 map and should be treated as configuration.
  static ExitTopology vgg16_cifar10();
  /// Same backbone on CIFAR100 (slightly heavier classifier heads).
  static ExitTopology vgg16_cifar100();

  friend bool operator==(const ExitTopology&, const ExitTopology&) = default;
};

/// One input's recorded pass through every exit.
struct SampleTrace {
  std::int64_t id = 0;
  int label = 0;
  std::vector<double> confidences;  // top-1 softmax probability at each of the N exits
  std::vector<int> predicted;       // argmax class at each exit
  std::optional<std::vector<double>> features;

  friend bool operator==(const SampleTrace&, const SampleTrace&) = default;
};

/// A topology plus the samples recorded against it. Immutable once built;
/// the constructor enforces every invariant.
class TraceSet {
 public:
  TraceSet(ExitTopology topology, std::vector<SampleTrace> samples);

  const ExitTopology& topology() const noexcept { return topology_; }
  const std::vector<SampleTrace>& samples() const noexcept { return samples_; }
  std::size_t size() const noexcept { return samples_.size(); }
  int num_exits() const noexcept { return topology_.num_exits; }
  bool has_features() const noexcept;

  /// New set holding samples at the given positions, in that order.
  TraceSet subset(const std::vector<std::size_t>& positions) const;

  friend bool operator==(const TraceSet&, const TraceSet&) = default;

 private:
  ExitTopology topology_;
  std::vector<SampleTrace> samples_;
};

/// Confidence thresholds (lambda) and predictor thresholds (gamma), one per
/// early exit.
struct Thresholds {
  std::vector<double> lambda;
  std::vector<double> gamma;

  /// lambda_n in (0,1), gamma_n in [0,1], both of length num_exits - 1.
  void validate(int num_exits) const;

  static Thresholds plain(std::vector<double> lambda);

  friend bool operator==(const Thresholds&, const Thresholds&) = default;
};

/// Validates a single sample against a topology. Throws InvariantError
/// naming the field and the sample id.
void validate_sample(const SampleTrace& sample, const ExitTopology& topology);

/// Reals are written with 9 significant digits.
std::string format_real(double value);
/// The value `format_real` would read back as.
double canonical_real(double value);

TraceSet read_trace_set(std::istream& in);
void write_trace_set(const TraceSet& set, std::ostream& out);

TraceSet load_trace_set(const std::filesystem::path& path);
void save_trace_set(const TraceSet& set, const std::filesystem::path& path);

}  // namespace exitsim
