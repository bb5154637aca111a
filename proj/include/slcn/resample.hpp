#pragma once

// Windowed-sinc sample rate conversion.
//
// Each output sample evaluates a Kaiser-windowed sinc kernel centered at its
// position in source time, cut off below the Nyquist frequency of the lower
// rate. The kernel half-width is 16 samples at the lower of the two rates
// (about 32 taps per output), and the taps are renormalized so DC passes at
// unit gain even where the window is truncated at the edges.

#include <cmath>
#include <cstdint>
#include <vector>

#include "slcn/tensor.hpp"  // Error
#include "slcn/wav.hpp"

namespace slcn {

namespace detail {

inline double bessel_i0(double x) {
  // power series; converges fast for the argument range a Kaiser window uses
  double sum = 1.0, term = 1.0;
  double half = x / 2.0;
  for (int k = 1; k < 64; ++k) {
    term *= (half / k) * (half / k);
    sum += term;
    if (term < sum * 1e-14) break;
  }
  return sum;
}

}  // namespace detail

inline std::vector<float> resample(const std::vector<float>& x, int src_rate, int dst_rate) {
  if (src_rate < 1 || dst_rate < 1) throw Error("resample: rates must be >= 1");
  if (src_rate == dst_rate) return x;  // identity, bit for bit
  if (x.empty()) return {};

  const double ratio = static_cast<double>(dst_rate) / static_cast<double>(src_rate);
  const double cutoff = 0.45 * std::min(1.0, ratio);  // cycles per source sample
  const double half_width = 16.0 / std::min(1.0, ratio);
  const double beta = 9.0;
  const double i0_beta = detail::bessel_i0(beta);
  const auto n_in = static_cast<std::int64_t>(x.size());
  const auto n_out = static_cast<std::int64_t>(
      std::llround(static_cast<double>(n_in) * dst_rate / src_rate));

  auto kernel = [&](double d) {
    double u = d / half_width;
    if (u <= -1.0 || u >= 1.0) return 0.0;
    double window = detail::bessel_i0(beta * std::sqrt(1.0 - u * u)) / i0_beta;
    double v = 2.0 * cutoff * d;
    double sinc = v == 0.0 ? 1.0 : std::sin(M_PI * v) / (M_PI * v);
    return 2.0 * cutoff * sinc * window;
  };

  std::vector<float> y(static_cast<std::size_t>(n_out));
  for (std::int64_t m = 0; m < n_out; ++m) {
    double t = static_cast<double>(m) * src_rate / dst_rate;
    auto j0 = static_cast<std::int64_t>(std::ceil(t - half_width));
    auto j1 = static_cast<std::int64_t>(std::floor(t + half_width));
    j0 = std::max<std::int64_t>(j0, 0);
    j1 = std::min(j1, n_in - 1);
    double acc = 0.0, wsum = 0.0;
    for (std::int64_t j = j0; j <= j1; ++j) {
      double w = kernel(t - static_cast<double>(j));
      acc += w * static_cast<double>(x[static_cast<std::size_t>(j)]);
      wsum += w;
    }
    y[static_cast<std::size_t>(m)] = wsum != 0.0 ? static_cast<float>(acc / wsum) : 0.0f;
  }
  return y;
}

inline Waveform resample(const Waveform& wave, int dst_rate) {
  Waveform out;
  out.sample_rate = dst_rate;
  out.samples = resample(wave.samples, wave.sample_rate, dst_rate);
  return out;
}

}  // namespace slcn
