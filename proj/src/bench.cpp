#include "lasad/attention.hpp"
#include "lasad/harness.hpp"
#include "lasad/spatial_decay.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

namespace lasad {

namespace {

constexpr Index kSoftmaxBlock = 256;
constexpr Index kChunk = 64;

struct Inputs {
  Matrix q, k, v, decay;
};

Inputs make_inputs(Index n, Index d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto random = [&](Index r, Index c) {
    Matrix m(r, c);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
    return m;
  };
  Inputs in{random(n, d), random(n, d), random(n, d), Matrix()};
  in.decay = in.k.unaryExpr([](double x) { return std::clamp(1.0 / (1.0 + std::exp(-x)), kDecayFloor, kDecayCeil); });
  return in;
}

/// Sequential decode over all positions; returns a checksum of the outputs.
double decode(const std::string& mechanism, const Inputs& in, Index width, std::size_t& state_bytes) {
  const Index n = in.q.rows(), d = in.q.cols();
  attention::RecurrentState<double> state(d, d);
  RowVector decay(d), key(d);
  double checksum = 0.0;
  for (Index t = 0; t < n; ++t) {
    if (mechanism == "linear_recurrent") {
      checksum += state.step(in.q.row(t), in.k.row(t), in.v.row(t)).sum();
      continue;
    }
    decay = in.decay.row(t);
    key = (1.0 - decay.array()).matrix();
    if (mechanism == "lasad_recurrent" && is_row_boundary(t + 1, width)) decay.setOnes();
    checksum += state.step(in.q.row(t), key, in.v.row(t), decay).sum();
  }
  state_bytes = state.bytes();
  return checksum;
}

/// Causal softmax over the whole sequence, one block of query rows at a time.
double softmax_full(const Inputs& in, std::size_t& state_bytes) {
  const Index n = in.q.rows(), d = in.q.cols();
  const double scale = 1.0 / std::sqrt(double(d));
  Matrix scores, out;
  double checksum = 0.0;
  for (Index r0 = 0; r0 < n; r0 += kSoftmaxBlock) {
    const Index rows = std::min(kSoftmaxBlock, n - r0);
    const Index visible = r0 + rows;
    scores.noalias() = in.q.middleRows(r0, rows) * in.k.topRows(visible).transpose();
    scores *= scale;
    for (Index i = 0; i < rows; ++i) {
      auto row = scores.row(i);
      const Index live = r0 + i + 1;
      row.tail(visible - live).setZero();
      const double m = row.head(live).maxCoeff();
      row.head(live) = (row.head(live).array() - m).exp().matrix();
      row.head(live) /= row.head(live).sum();
    }
    out.noalias() = scores * in.v.topRows(visible);
    checksum += out.sum();
  }
  // The key/value cache a decoder would hold, plus one block of scores.
  state_bytes = std::size_t(2 * n * d + kSoftmaxBlock * n) * sizeof(double);
  return checksum;
}

double chunked(const Inputs& in, Index width, std::size_t& state_bytes) {
  const Index d = in.q.cols();
  const Matrix out = attention::lasad_chunked(in.q, in.v, in.decay, width, std::min(kChunk, in.q.rows()));
  state_bytes = std::size_t(d * d + 2 * kChunk * d + kChunk * kChunk) * sizeof(double);
  return out.sum();
}

}  // namespace

std::vector<std::string> bench_mechanisms() {
  return {"lasad_recurrent", "hgrn2_recurrent", "linear_recurrent", "lasad_chunked", "softmax"};
}

double BenchReport::slope(std::string_view mechanism) const {
  for (const auto& [name, s] : slopes) {
    if (name == mechanism) return s;
  }
  return std::nan("");
}

double loglog_slope(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw InputError("loglog_slope: need >= 2 paired points");
  const double count = double(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0 && y[i] > 0.0)) throw DomainError("loglog_slope: values must be positive");
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= count;
  my /= count;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  if (sxx == 0.0) throw InputError("loglog_slope: x values must not all be equal");
  return sxy / sxx;
}

BenchReport run_bench(const BenchOptions& options) {
  if (options.repeats < 5) throw ConfigError("bench: repeats must be >= 5, got " + std::to_string(options.repeats));
  if (options.dim < 1) throw ConfigError("bench: d must be >= 1");
  if (options.n_list.empty()) throw ConfigError("bench: empty N list");
  for (std::size_t i = 0; i < options.n_list.size(); ++i) {
    if (options.n_list[i] < 1) throw ConfigError("bench: N must be >= 1");
    if (i > 0 && options.n_list[i] <= options.n_list[i - 1]) throw ConfigError("bench: N list must be ascending");
  }
  const auto known = bench_mechanisms();
  for (const auto& m : options.mechanisms) {
    if (std::find(known.begin(), known.end(), m) == known.end()) throw ConfigError("bench: unknown mechanism '" + m + "'");
  }

  BenchReport report;
  volatile double sink = 0.0;
  for (const auto& mechanism : options.mechanisms) {
    std::vector<double> xs, ys;
    for (int n : options.n_list) {
      const Inputs in = make_inputs(n, options.dim, options.seed + std::uint64_t(n));
      const Index width = std::max<Index>(1, Index(std::lround(std::sqrt(double(n)))));
      std::size_t state_bytes = 0;
      auto run_once = [&] {
        if (mechanism == "softmax") return softmax_full(in, state_bytes);
        if (mechanism == "lasad_chunked") return chunked(in, width, state_bytes);
        return decode(mechanism, in, width, state_bytes);
      };
      sink = sink + run_once();  // warm-up
      std::vector<double> times;
      for (int r = 0; r < options.repeats; ++r) {
        const auto start = std::chrono::steady_clock::now();
        sink = sink + run_once();
        times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
      }
      const double mean = std::accumulate(times.begin(), times.end(), 0.0) / double(times.size());
      double var = 0.0;
      for (double t : times) var += (t - mean) * (t - mean);
      const double stddev = std::sqrt(var / double(times.size() - 1));
      report.rows.push_back({mechanism, n, mean, stddev, mean / n, state_bytes});
      xs.push_back(n);
      ys.push_back(mean);
    }
    const bool fit = xs.size() >= 5 && xs.back() >= 16.0 * xs.front();
    if (fit) report.slopes.emplace_back(mechanism, loglog_slope(xs, ys));
  }
  return report;
}

void write_bench_csv(std::ostream& out, const BenchReport& report) {
  out << "mechanism,n,mean_seconds,std_seconds,per_step_seconds,state_bytes\n";
  out.precision(17);
  for (const auto& r : report.rows) {
    out << r.mechanism << ',' << r.n << ',' << r.mean_seconds << ',' << r.std_seconds << ',' << r.per_step_seconds
        << ',' << r.state_bytes << '\n';
  }
  for (const auto& [name, s] : report.slopes) out << "# slope " << name << ' ' << s << '\n';
}

std::vector<BenchRow> read_bench_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "mechanism,n,mean_seconds,std_seconds,per_step_seconds,state_bytes") {
    throw InputError("bench csv: missing header");
  }
  std::vector<BenchRow> rows;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream fields(line);
    BenchRow r;
    if (!(fields >> r.mechanism >> r.n >> r.mean_seconds >> r.std_seconds >> r.per_step_seconds >> r.state_bytes)) {
      throw InputError("bench csv: malformed row");
    }
    rows.push_back(r);
  }
  return rows;
}

}  // namespace lasad
