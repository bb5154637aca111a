#pragma once

// Filter visualization by gradient ascent in input space.
//
// For a target (layer, filter), start from small Gaussian noise and ascend
// the mean activation of that filter over the remaining temporal positions,
// minus an L2 penalty on the input. Steps use backtracking halving and only
// ever accept a non-decreasing objective, so the recorded trace is monotone.
// The result waveform is summarized as a log-magnitude spectrum; a layer
// sheet stacks every filter's spectrum, sorted by peak frequency bin.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "slcn/model.hpp"
#include "slcn/tensor.hpp"

namespace slcn {

struct VizConfig {
  std::int64_t noise_len = 729;
  std::int64_t steps = 256;
  double step_size = 0.1;
  double noise_scale = 0.01;
  double l2 = 1e-3;
  std::uint64_t seed = 1;
};

struct AscentResult {
  std::vector<float> waveform;
  std::vector<double> trace;  // objective per step, non-decreasing
  bool dead = false;          // activation gradient identically zero at start
};

namespace detail {

// Mixes (layer, filter) into the base seed so results are per-filter
// deterministic no matter how work is split across threads.
inline std::uint64_t viz_seed(std::uint64_t base, std::int64_t layer, std::int64_t filter) {
  std::uint64_t x = base ^ (0x9e3779b97f4a7c15ull * static_cast<std::uint64_t>(layer * 1000003 + filter + 1));
  x ^= x >> 33;
  x *= 0xff51afd7ed558ccdull;
  x ^= x >> 33;
  return x;
}

}  // namespace detail

/// Channel count of the probed layer (1 = stem output, 1 + k = block k).
inline std::int64_t viz_layer_channels(const ModelConfig& cfg, std::int64_t layer) {
  auto n_blocks = static_cast<std::int64_t>(cfg.blocks.size());
  if (layer < 1 || layer > n_blocks + 1)
    throw Error("viz: layer " + std::to_string(layer) + " out of range [1," +
                std::to_string(n_blocks + 1) + "]");
  return layer == 1 ? cfg.stem.filters : cfg.blocks[static_cast<std::size_t>(layer - 2)].filters;
}

template <class T>
AscentResult activation_maximization(Model<T>& model, std::int64_t layer, std::int64_t filter,
                                     const VizConfig& cfg) {
  if (cfg.noise_len < 1) throw Error("viz: noise_len must be >= 1");
  if (cfg.steps < 1) throw Error("viz: steps must be >= 1");
  if (!(cfg.step_size > 0)) throw Error("viz: step_size must be > 0");
  std::int64_t channels = viz_layer_channels(model.config, layer);
  if (filter < 0 || filter >= channels)
    throw Error("viz: filter " + std::to_string(filter) + " out of " + std::to_string(channels));

  std::mt19937 rng(static_cast<std::mt19937::result_type>(detail::viz_seed(cfg.seed, layer, filter)));
  std::normal_distribution<double> noise(0.0, cfg.noise_scale);
  std::vector<T> init(static_cast<std::size_t>(cfg.noise_len));
  for (auto& v : init) v = static_cast<T>(noise(rng));

  Tensor<T> x = Tensor<T>::from({1, 1, cfg.noise_len}, std::move(init));
  x.set_requires_grad(true);

  auto activation = [&](const Tensor<T>& input) {
    return mean_all(select_channel(model.forward_to_layer(input, layer, Mode::infer), filter));
  };
  auto objective = [&](const Tensor<T>& input) {
    return add(activation(input), scale(sum_all(mul(input, input)), static_cast<T>(-cfg.l2)));
  };
  auto value_at = [&](const Tensor<T>& input) {
    NoGradGuard ng;
    return static_cast<double>(objective(input).item());
  };
  // Objective value and its input gradient at the current x.
  auto grad_at = [&](std::vector<T>& grad_out) {
    x.zero_grad();
    Tensor<T> obj = objective(x);
    obj.backward();
    grad_out = x.grad();
    return static_cast<double>(obj.item());
  };

  AscentResult result;

  // A filter whose activation ignores the input cannot be ascended.
  {
    x.zero_grad();
    Tensor<T> act = activation(x);
    bool flat = !act.requires_grad();
    if (!flat) {
      act.backward();
      flat = true;
      for (T g : x.grad())
        if (g != T(0)) flat = false;
    }
    if (flat) {
      result.dead = true;
      double v = value_at(x);
      result.trace.assign(static_cast<std::size_t>(cfg.steps + 1), v);
      result.waveform.reserve(x.data().size());
      for (T v2 : x.data()) result.waveform.push_back(static_cast<float>(v2));
      return result;
    }
  }

  std::vector<T> grad;
  double f = grad_at(grad);
  result.trace.push_back(f);
  double step = cfg.step_size;

  std::vector<T> backup(x.data().size());
  for (std::int64_t it = 0; it < cfg.steps; ++it) {
    bool accepted = false;
    if (step > 1e-14) {
      backup = x.data();
      double s = step;
      for (int tries = 0; tries < 40 && s > 1e-14; ++tries, s /= 2) {
        auto& xd = x.data();
        for (std::size_t i = 0; i < xd.size(); ++i)
          xd[i] = backup[i] + static_cast<T>(s) * grad[i];
        double fc = value_at(x);
        if (fc >= f) {
          f = fc;
          step = std::min(s * 2.0, cfg.step_size * 16.0);
          accepted = true;
          break;
        }
        xd = backup;
      }
      if (!accepted) step = 0.0;  // no improving step at any tried scale
    }
    if (accepted) f = grad_at(grad);  // same value, fresh gradient
    result.trace.push_back(f);
  }

  result.waveform.reserve(x.data().size());
  for (T v : x.data()) result.waveform.push_back(static_cast<float>(v));
  return result;
}

// ---------------------------------------------------------------------------
// Spectra

/// Log-compressed magnitude spectrum, bins 0..floor(N/2). The rotation
/// recurrence keeps it O(N^2) without per-term trig calls.
inline std::vector<double> spectrum(const std::vector<float>& x) {
  auto n = static_cast<std::int64_t>(x.size());
  if (n < 2) throw Error("spectrum: need at least 2 samples");
  std::int64_t bins = n / 2 + 1;
  std::vector<double> out(static_cast<std::size_t>(bins));
  for (std::int64_t k = 0; k < bins; ++k) {
    double angle = -2.0 * M_PI * static_cast<double>(k) / static_cast<double>(n);
    double cr = std::cos(angle), ci = std::sin(angle);
    double rot_r = 1.0, rot_i = 0.0;
    double re = 0.0, im = 0.0;
    for (std::int64_t t = 0; t < n; ++t) {
      double v = static_cast<double>(x[static_cast<std::size_t>(t)]);
      re += v * rot_r;
      im += v * rot_i;
      double nr = rot_r * cr - rot_i * ci;
      rot_i = rot_r * ci + rot_i * cr;
      rot_r = nr;
    }
    out[static_cast<std::size_t>(k)] = std::log1p(std::hypot(re, im));
  }
  return out;
}

/// Permutation of row indices ordered by peak bin (first maximum); equal
/// peaks keep their original relative order.
inline std::vector<std::int64_t> sort_by_peak(const std::vector<std::vector<double>>& rows) {
  std::vector<std::int64_t> peaks(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].empty()) throw Error("sort_by_peak: empty spectrum row");
    std::size_t best = 0;
    for (std::size_t b = 1; b < rows[r].size(); ++b)
      if (rows[r][b] > rows[r][best]) best = b;
    peaks[r] = static_cast<std::int64_t>(best);
  }
  std::vector<std::int64_t> order(rows.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&peaks](std::int64_t a, std::int64_t b) { return peaks[a] < peaks[b]; });
  return order;
}

struct SpectrumSheet {
  std::int64_t layer = 0;
  double bin_hz = 0.0;                       // frequency step between bins
  std::vector<std::vector<double>> spectra;  // original filter order
  std::vector<std::int64_t> order;           // emission order, sorted by peak
  std::vector<std::uint8_t> dead;            // per filter
};

/// Runs activation maximization for every filter of a layer and stacks the
/// spectra. `workers` > 1 splits filters across threads; per-filter seeding
/// keeps the result identical either way.
template <class T>
SpectrumSheet make_sheet(Model<T>& model, std::int64_t layer, const VizConfig& cfg,
                         int workers = 1) {
  std::int64_t channels = viz_layer_channels(model.config, layer);
  SpectrumSheet sheet;
  sheet.layer = layer;
  sheet.bin_hz = static_cast<double>(model.config.sample_rate) / static_cast<double>(cfg.noise_len);
  sheet.spectra.resize(static_cast<std::size_t>(channels));
  sheet.dead.assign(static_cast<std::size_t>(channels), 0);

  // Freeze parameters: ascent needs gradients only for the input, and frozen
  // tensors are safe to share across the worker threads.
  std::vector<Tensor<T>> params = model.trainable();
  std::vector<char> saved;
  for (auto& p : params) {
    saved.push_back(p.requires_grad() ? 1 : 0);
    p.set_requires_grad(false);
  }

  auto run_range = [&](std::int64_t begin, std::int64_t end) {
    for (std::int64_t f = begin; f < end; ++f) {
      AscentResult r = activation_maximization(model, layer, f, cfg);
      sheet.spectra[static_cast<std::size_t>(f)] = spectrum(r.waveform);
      sheet.dead[static_cast<std::size_t>(f)] = r.dead ? 1 : 0;
    }
  };

  std::exception_ptr failure;
  try {
    if (workers <= 1) {
      run_range(0, channels);
    } else {
      int n_threads = std::min<int>(workers, static_cast<int>(channels));
      std::vector<std::thread> pool;
      std::mutex mu;
      for (int w = 0; w < n_threads; ++w) {
        std::int64_t begin = channels * w / n_threads;
        std::int64_t end = channels * (w + 1) / n_threads;
        pool.emplace_back([&, begin, end] {
          try {
            run_range(begin, end);
          } catch (...) {
            std::lock_guard<std::mutex> lock(mu);
            if (!failure) failure = std::current_exception();
          }
        });
      }
      for (auto& t : pool) t.join();
    }
  } catch (...) {
    failure = std::current_exception();
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i].set_requires_grad(saved[i] != 0);
  if (failure) std::rethrow_exception(failure);

  sheet.order = sort_by_peak(sheet.spectra);
  return sheet;
}

// ---------------------------------------------------------------------------
// Emission

/// Writes layer<k>.csv (one row per frequency bin ascending, one column per
/// filter in sorted order) and layer<k>.pgm (binary P5; low frequencies at
/// the bottom, same column order, min-max normalized over the sheet).
inline void emit_sheet(const SpectrumSheet& sheet, const std::string& out_dir) {
  if (sheet.spectra.empty()) throw Error("emit_sheet: empty sheet");
  std::filesystem::create_directories(out_dir);
  auto bins = sheet.spectra.front().size();
  for (const auto& row : sheet.spectra)
    if (row.size() != bins) throw Error("emit_sheet: ragged spectra");

  std::string base = out_dir + "/layer" + std::to_string(sheet.layer);

  std::ofstream csv(base + ".csv");
  if (!csv) throw Error("emit_sheet: cannot open '" + base + ".csv'");
  csv << "hz";
  for (auto f : sheet.order) csv << ",f" << f;
  csv << '\n';
  char buf[40];
  for (std::size_t b = 0; b < bins; ++b) {
    std::snprintf(buf, sizeof buf, "%.4f", sheet.bin_hz * static_cast<double>(b));
    csv << buf;
    for (auto f : sheet.order) {
      std::snprintf(buf, sizeof buf, "%.6f", sheet.spectra[static_cast<std::size_t>(f)][b]);
      csv << ',' << buf;
    }
    csv << '\n';
  }
  if (!csv) throw Error("emit_sheet: write failed for '" + base + ".csv'");
  csv.close();

  double lo = sheet.spectra[static_cast<std::size_t>(sheet.order[0])][0];
  double hi = lo;
  for (const auto& row : sheet.spectra)
    for (double v : row) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  std::ofstream pgm(base + ".pgm", std::ios::binary);
  if (!pgm) throw Error("emit_sheet: cannot open '" + base + ".pgm'");
  pgm << "P5\n" << sheet.order.size() << ' ' << bins << "\n255\n";
  bool flat = hi - lo < 1e-12;
  for (std::size_t b = bins; b-- > 0;) {  // top row = highest frequency
    for (auto f : sheet.order) {
      double v = sheet.spectra[static_cast<std::size_t>(f)][b];
      int px = flat ? 128 : static_cast<int>(std::lround((v - lo) / (hi - lo) * 255.0));
      pgm.put(static_cast<char>(std::min(255, std::max(0, px))));
    }
  }
  if (!pgm) throw Error("emit_sheet: write failed for '" + base + ".pgm'");
}

/// Parses a sheet CSV back: header names ("hz", "f<i>", ...) plus numeric rows.
inline std::pair<std::vector<std::string>, std::vector<std::vector<double>>> read_sheet_csv(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("read_sheet_csv: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw Error("read_sheet_csv: empty file");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    if (row.size() != header.size()) throw Error("read_sheet_csv: ragged row");
    rows.push_back(std::move(row));
  }
  return {header, rows};
}

/// The first six stages (stem and five blocks) must all be 3-sized with
/// stride/pool 3 for the spectral sheets to line up on a 3^k grid.
inline void validate_viz_geometry(const ModelConfig& cfg) {
  auto fail = [](const std::string& msg) { throw Error("viz: " + msg); };
  if (cfg.stem.kernel != 3 || cfg.stem.stride != 3)
    fail("stem must have kernel 3 and stride 3, got kernel " + std::to_string(cfg.stem.kernel) +
         " stride " + std::to_string(cfg.stem.stride));
  if (cfg.blocks.size() < 5) fail("need at least 5 blocks, got " + std::to_string(cfg.blocks.size()));
  for (std::size_t i = 0; i < 5; ++i) {
    if (cfg.blocks[i].conv_kernel != 3)
      fail("block " + std::to_string(i) + " conv_kernel must be 3");
    if (cfg.blocks[i].pool_size != 3)
      fail("block " + std::to_string(i) + " pool_size must be 3");
  }
}

}  // namespace slcn
