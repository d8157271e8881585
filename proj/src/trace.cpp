#include "exitsim/trace.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "exitsim/error.hpp"
#include "exitsim/io.hpp"

namespace exitsim {

namespace {

// Confidences written with 9 significant digits can land a hair below 1/P
// (1/3 -> 0.333333333), so the lower bound is checked with this slack.
constexpr double kConfidenceSlack = 1e-9;

void require(bool ok, const std::string& message) {
  if (!ok) throw InvariantError(message);
}

bool all_finite_nonneg(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x) || x < 0.0) return false;
  return true;
}

void append_reals(std::string& out, const std::vector<double>& v) {
  out += '[';
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += format_real(v[i]);
  }
  out += ']';
}

std::string header_line(const ExitTopology& t) {
  std::string s = "{\"N\":" + std::to_string(t.num_exits) + ",\"P\":" + std::to_string(t.num_classes);
  s += ",\"segment_flops\":";
  append_reals(s, t.segment_flops);
  s += ",\"exit_flops\":";
  append_reals(s, t.exit_flops);
  s += ",\"server_flops\":" + format_real(t.server_flops);
  s += ",\"predictor_flops\":" + format_real(t.predictor_flops);
  s += ",\"raw_feature_bits\":" + std::to_string(t.raw_feature_bits);
  s += ",\"compression_ratio\":" + format_real(t.compression_ratio);
  s += '}';
  return s;
}

std::string record_line(const SampleTrace& r) {
  std::string s = "{\"id\":" + std::to_string(r.id) + ",\"label\":" + std::to_string(r.label);
  s += ",\"confidences\":";
  append_reals(s, r.confidences);
  s += ",\"predicted\":[";
  for (std::size_t i = 0; i < r.predicted.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(r.predicted[i]);
  }
  s += ']';
  if (r.features) {
    s += ",\"features\":";
    append_reals(s, *r.features);
  }
  s += '}';
  return s;
}

using nlohmann::json;

const json& field(const json& obj, const char* key, long line) {
  auto it = obj.find(key);
  if (it == obj.end()) throw ParseError(std::string("missing key '") + key + "'", line);
  return *it;
}

template <typename T>
T integer_field(const json& obj, const char* key, long line) {
  const json& v = field(obj, key, line);
  if (!v.is_number_integer()) throw ParseError(std::string("key '") + key + "' must be an integer", line);
  return v.get<T>();
}

double real_field(const json& obj, const char* key, long line) {
  const json& v = field(obj, key, line);
  if (!v.is_number()) throw ParseError(std::string("key '") + key + "' must be a number", line);
  return v.get<double>();
}

std::vector<double> real_array(const json& v, const char* key, long line) {
  if (!v.is_array()) throw ParseError(std::string("key '") + key + "' must be an array", line);
  std::vector<double> out;
  out.reserve(v.size());
  for (const auto& e : v) {
    if (!e.is_number()) throw ParseError(std::string("key '") + key + "' must hold numbers", line);
    out.push_back(e.get<double>());
  }
  return out;
}

json parse_line(const std::string& text, long line) {
  try {
    json j = json::parse(text);
    if (!j.is_object()) throw ParseError("expected a JSON object", line);
    return j;
  } catch (const json::parse_error& e) {
    throw ParseError(e.what(), line);
  }
}

ExitTopology parse_header(const json& h, long line) {
  ExitTopology t;
  t.num_exits = integer_field<int>(h, "N", line);
  t.num_classes = integer_field<int>(h, "P", line);
  t.segment_flops = real_array(field(h, "segment_flops", line), "segment_flops", line);
  t.exit_flops = real_array(field(h, "exit_flops", line), "exit_flops", line);
  t.server_flops = real_field(h, "server_flops", line);
  t.predictor_flops = real_field(h, "predictor_flops", line);
  t.raw_feature_bits = integer_field<std::int64_t>(h, "raw_feature_bits", line);
  t.compression_ratio = real_field(h, "compression_ratio", line);
  return t;
}

SampleTrace parse_record(const json& r, long line) {
  SampleTrace s;
  s.id = integer_field<std::int64_t>(r, "id", line);
  s.label = integer_field<int>(r, "label", line);
  s.confidences = real_array(field(r, "confidences", line), "confidences", line);
  const json& pred = field(r, "predicted", line);
  if (!pred.is_array()) throw ParseError("key 'predicted' must be an array", line);
  for (const auto& e : pred) {
    if (!e.is_number_integer()) throw ParseError("key 'predicted' must hold integers", line);
    s.predicted.push_back(e.get<int>());
  }
  if (auto it = r.find("features"); it != r.end() && !it->is_null()) {
    s.features = real_array(*it, "features", line);
  }
  return s;
}

}  // namespace

ExitTopology ExitTopology::vgg16_cifar10() {
  ExitTopology t;
  t.num_exits = 3;
  t.segment_flops = {1.97, 56.98};
  t.exit_flops = {16.70, 14.23};
  t.server_flops = 274.13;
  t.predictor_flops = 0.40;
  t.num_classes = 10;
  t.raw_feature_bits = 128LL * 16 * 16 * 32;
  t.compression_ratio = 64.0;
  return t;
}

ExitTopology ExitTopology::vgg16_cifar100() {
  ExitTopology t = vgg16_cifar10();
  t.exit_flops = {17.43, 14.60};
  t.server_flops = 274.50;
  t.num_classes = 100;
  return t;
}

void ExitTopology::validate() const {
  require(num_exits >= 2, "topology: N must be >= 2");
  require(num_classes >= 2, "topology: P must be >= 2");
  const auto early = static_cast<std::size_t>(num_exits - 1);
  require(segment_flops.size() == early, "topology: segment_flops must have N-1 entries");
  require(exit_flops.size() == early, "topology: exit_flops must have N-1 entries");
  require(all_finite_nonneg(segment_flops), "topology: segment_flops must be finite and >= 0");
  require(all_finite_nonneg(exit_flops), "topology: exit_flops must be finite and >= 0");
  require(std::isfinite(server_flops) && server_flops >= 0.0, "topology: server_flops must be >= 0");
  require(std::isfinite(predictor_flops) && predictor_flops >= 0.0, "topology: predictor_flops must be >= 0");
  require(raw_feature_bits > 0, "topology: raw_feature_bits must be > 0");
  require(std::isfinite(compression_ratio) && compression_ratio >= 1.0, "topology: compression_ratio must be >= 1");
}

std::int64_t ExitTopology::transmitted_bits() const {
  return static_cast<std::int64_t>(std::ceil(static_cast<double>(raw_feature_bits) / compression_ratio));
}

void validate_sample(const SampleTrace& s, const ExitTopology& t) {
  const std::string who = "sample " + std::to_string(s.id) + ": ";
  const auto n = static_cast<std::size_t>(t.num_exits);
  require(s.label >= 0 && s.label < t.num_classes, who + "label out of range [0, P)");
  require(s.confidences.size() == n, who + "confidences must have N entries");
  require(s.predicted.size() == n, who + "predicted must have N entries");
  const double floor = 1.0 / t.num_classes - kConfidenceSlack;
  for (std::size_t i = 0; i < n; ++i) {
    const double c = s.confidences[i];
    if (!(std::isfinite(c) && c >= floor && c < 1.0)) {
      throw InvariantError(who + "confidences[" + std::to_string(i) + "]=" + format_real(c) +
                           " outside [1/P, 1)");
    }
    require(s.predicted[i] >= 0 && s.predicted[i] < t.num_classes,
            who + "predicted[" + std::to_string(i) + "] out of range [0, P)");
  }
  if (s.features) {
    for (double x : *s.features) require(std::isfinite(x), who + "features must be finite");
  }
}

TraceSet::TraceSet(ExitTopology topology, std::vector<SampleTrace> samples)
    : topology_(std::move(topology)), samples_(std::move(samples)) {
  topology_.validate();
  std::unordered_set<std::int64_t> seen;
  seen.reserve(samples_.size());
  for (const auto& s : samples_) {
    validate_sample(s, topology_);
    if (!seen.insert(s.id).second) throw InvariantError("sample " + std::to_string(s.id) + ": duplicate id");
  }
}

bool TraceSet::has_features() const noexcept {
  if (samples_.empty()) return false;
  for (const auto& s : samples_)
    if (!s.features) return false;
  return true;
}

TraceSet TraceSet::subset(const std::vector<std::size_t>& positions) const {
  std::vector<SampleTrace> picked;
  picked.reserve(positions.size());
  for (std::size_t p : positions) picked.push_back(samples_.at(p));
  return TraceSet(topology_, std::move(picked));
}

void Thresholds::validate(int num_exits) const {
  const auto early = static_cast<std::size_t>(num_exits - 1);
  if (lambda.size() != early || gamma.size() != early) {
    throw DimensionError("thresholds: lambda and gamma must have N-1 = " + std::to_string(early) + " entries");
  }
  for (std::size_t i = 0; i < early; ++i) {
    require(lambda[i] > 0.0 && lambda[i] < 1.0, "thresholds: lambda[" + std::to_string(i) + "] must lie in (0,1)");
    require(gamma[i] >= 0.0 && gamma[i] <= 1.0, "thresholds: gamma[" + std::to_string(i) + "] must lie in [0,1]");
  }
}

Thresholds Thresholds::plain(std::vector<double> lambda) {
  Thresholds t;
  t.gamma.assign(lambda.size(), 0.0);
  t.lambda = std::move(lambda);
  return t;
}

std::string format_real(double value) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", value);
  return buf;
}

double canonical_real(double value) { return std::strtod(format_real(value).c_str(), nullptr); }

TraceSet read_trace_set(std::istream& in) {
  std::string text;
  long line = 0;
  std::optional<ExitTopology> topology;
  std::vector<SampleTrace> samples;
  while (std::getline(in, text)) {
    ++line;
    if (text.empty() || text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j = parse_line(text, line);
    try {
      if (!topology) {
        topology = parse_header(j, line);
        topology->validate();
        continue;
      }
      SampleTrace s = parse_record(j, line);
      validate_sample(s, *topology);
      samples.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw ParseError(e.what(), line);
    }
  }
  if (!topology) throw ParseError("missing header line", line + 1);
  return TraceSet(std::move(*topology), std::move(samples));
}

void write_trace_set(const TraceSet& set, std::ostream& out) {
  out << header_line(set.topology()) << '\n';
  for (const auto& s : set.samples()) out << record_line(s) << '\n';
}

TraceSet load_trace_set(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open trace file " + path.string());
  return read_trace_set(in);
}

void save_trace_set(const TraceSet& set, const std::filesystem::path& path) {
  std::ostringstream out;
  write_trace_set(set, out);
  atomic_write(path, out.str());
}

}  // namespace exitsim
