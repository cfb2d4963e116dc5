// Acceptance gate. Nine numbered criteria, each reported as a single
// [PASS]/[FAIL] line with its wall time and budget. Criteria 1-3 and 8-9 run
// in-process; criteria 4-7 drive the command-line tool end to end and share
// artifacts through a work directory, so they must run in order. With no
// arguments every criterion runs in a fresh work directory; passing criterion
// numbers re-runs a subset against the artifacts of a previous run.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "aver/checkpoint.hpp"
#include "aver/dsp.hpp"
#include "aver/losses.hpp"
#include "aver/metrics.hpp"
#include "aver/models.hpp"
#include "aver/ops.hpp"
#include "aver/rng.hpp"
#include "aver/tape.hpp"
#include "aver/tensor.hpp"
#include "support/grad_check.hpp"

namespace {

using namespace aver;
using aver::testing::check_gradients;
using aver::testing::GradCheckReport;
using aver::testing::LossFn;
using aver::testing::random_tensor;
using nlohmann::json;
namespace fs = std::filesystem;

fs::path g_work;
int g_cmd_counter = 0;

// ---------------------------------------------------------------------------
// harness utilities
// ---------------------------------------------------------------------------

[[noreturn]] void bail(const std::string& msg) { throw std::runtime_error(msg); }

void expect(bool cond, const std::string& msg) {
  if (!cond) bail(msg);
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os << std::setprecision(digits) << v;
  return os.str();
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  expect(in.good(), "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string wp(const std::string& rel) { return (g_work / rel).string(); }

void need_artifact(const std::string& rel, int produced_by) {
  expect(fs::exists(g_work / rel), "missing artifact " + rel + "; run criterion " +
                                       std::to_string(produced_by) + " first");
}

// Runs the tool, echoing the command; on a nonzero exit dumps the log tail.
void run_tool(const std::string& args) {
  const fs::path log = g_work / "logs" / ("cmd_" + std::to_string(g_cmd_counter++) + ".log");
  std::cout << "  $ aver " << args << "\n" << std::flush;
  const std::string cmd =
      std::string(AVER_TOOL_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  if (rc != 0) {
    std::string text = slurp(log);
    if (text.size() > 1500) text = "..." + text.substr(text.size() - 1500);
    std::cout << text << "\n";
    bail("command failed (status " + std::to_string(rc) + "): aver " + args);
  }
}

// Last JSONL record with the given event tag.
json last_event(const fs::path& metrics, const std::string& event) {
  std::ifstream in(metrics);
  expect(in.good(), "cannot read " + metrics.string());
  json found;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    if (j.value("event", "") == event) found = std::move(j);
  }
  expect(!found.is_null(), "no '" + event + "' event in " + metrics.string());
  return found;
}

bool same_bytes(const fs::path& a, const fs::path& b) { return slurp(a) == slurp(b); }

Tensor randn(Rng& rng, std::vector<int> shape, double scale = 1.0) {
  std::vector<float> v(numel_of(shape));
  for (float& x : v) x = static_cast<float>(rng.normal(0.0, scale));
  return Tensor(std::move(shape), std::move(v));
}

bool bits_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  if (a.numel() == 0) return true;
  return std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0;
}

double row_norm(const Tensor& t, int row) {
  double s = 0.0;
  const int d = t.dim(1);
  for (int j = 0; j < d; ++j) {
    const double v = t.data()[static_cast<std::size_t>(row) * d + j];
    s += v * v;
  }
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// criterion 1: gradient oracles
// ---------------------------------------------------------------------------

// Normal variates pushed away from zero, for finite-difference stability
// around relu and max-pool kinks.
Tensor64 random_offzero(Rng& rng, std::vector<int> shape) {
  std::vector<double> v(numel_of(shape));
  for (double& x : v) {
    const double n = rng.normal(0.0, 1.0);
    x = n + (n >= 0.0 ? 0.1 : -0.1);
  }
  return Tensor64(std::move(shape), std::move(v));
}

LstmLayerParamsT<double> random_lstm(Rng& rng, int input, int hidden) {
  LstmLayerParamsT<double> p;
  p.w_ih = random_tensor(rng, {4 * hidden, input}, 0.4);
  p.w_hh = random_tensor(rng, {4 * hidden, hidden}, 0.4);
  p.b_ih = random_tensor(rng, {4 * hidden}, 0.2);
  p.b_hh = random_tensor(rng, {4 * hidden}, 0.2);
  return p;
}

struct GradCase {
  const char* name;
  // Builds the loss function and its parameter list from a fresh rng stream.
  std::function<std::pair<LossFn, std::vector<Tensor64>>(Rng&)> make;
};

Tensor64 sumsq(Tape64& t, const Tensor64& y) { return sum_all(t, mul(t, y, y)); }

std::vector<GradCase> gradient_cases() {
  std::vector<GradCase> cases;

  cases.push_back({"elementwise", [](Rng& rng) {
    std::vector<Tensor64> p = {random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4})};
    LossFn fn = [](Tape64& t, const std::vector<Tensor64>& q) {
      Tensor64 y = mul(t, add(t, q[0], q[1]), sub(t, q[0], scale(t, q[1], 0.5)));
      return mean_all(t, mul(t, y, y));
    };
    return std::make_pair(fn, p);
  }});

  cases.push_back({"activations", [](Rng& rng) {
    std::vector<Tensor64> p = {random_offzero(rng, {4, 5})};
    LossFn fn = [](Tape64& t, const std::vector<Tensor64>& q) {
      return sumsq(t, tanh_act(t, relu(t, q[0])));
    };
    return std::make_pair(fn, p);
  }});

  cases.push_back({"dense", [](Rng& rng) {
    std::vector<Tensor64> p = {random_tensor(rng, {3, 4}), random_tensor(rng, {4, 3}, 0.5),
                               random_tensor(rng, {3}, 0.5)};
    LossFn fn = [](Tape64& t, const std::vector<Tensor64>& q) {
      return sumsq(t, dense(t, q[0], q[1], q[2]));
    };
    return std::make_pair(fn, p);
  }});

  cases.push_back({"plumbing", [](Rng& rng) {
    std::vector<Tensor64> p = {random_tensor(rng, {2, 3, 4}), random_tensor(rng, {6, 5}, 0.5),
                               random_tensor(rng, {5}, 0.5)};
    LossFn fn = [](Tape64& t, const std::vector<Tensor64>& q) {
      Tensor64 a = transpose_12(t, q[0]);          // [2,4,3]
      Tensor64 b = reshape(t, a, {4, 6});
      Tensor64 c = slice_rows(t, b, 0, 3);         // [3,6]
      Tensor64 d = dense(t, c, q[1], q[2]);        // [3,5]
      Tensor64 e = select_column(t, d, 2);         // [3]
      return sumsq(t, e);
    };
    return std::make_pair(fn, p);
  }});

  cases.push_back({"concat", [](Rng& rng) {
    std::vector<Tensor64> p = {random_tensor(rng, {2, 3}), random_tensor(rng, {2, 4})};
    LossFn fn = [](Tape64& t, const std::vector<Tensor64>& q) {
      return sumsq(t, concat(t, {q[0], q[1]}, 1));
    };
    return std::make_pair(fn, p);
  }});

  cases.push_back({"channel_bias", [](Rng& rng) {
    std::vector<Tensor64> p = {random_tensor(rng, {2, 3, 2, 2}), random_tensor(rng, {3}, 0.5)};
    LossFn fn = [](Tape64& t, const std::vector<Tensor64>& q) {
      return sumsq(t, add_channel_bias(t, q[0], q[1]));
    };
    return std::make_pair(fn, p);
  }});

  cases.push_back({"conv2d_s1p1", [](Rng& rng) {
    std::vector<Tensor64> p = {random_tensor(rng, {2, 2, 5, 5}),
                               random_tensor(rng, {3, 2, 3, 3}, 0.4)};
    LossFn fn = [](Tape64& t, const std::vector<Tensor64>& q) {
      return sumsq(t, conv2d(t, q[0], q[1], 1, 1));
    };
    return std::make_pair(fn, p);
  }});

  cases.push_back({"conv2d_s2p0", [](Rng& rng) {
    std::vector<Tensor64> p = {random_tensor(rng, {2, 2, 5, 5}),
                               random_tensor(rng, {3, 2, 3, 3}, 0.4)};
    LossFn fn = [](Tape64& t, const std::vector<Tensor64>& q) {
      return sumsq(t, conv2d(t, q[0], q[1], 2, 0));
    };
    return std::make_pair(fn, p);
  }});

  cases.push_back({"conv1d_s1p1", [](Rng& rng) {
    std::vector<Tensor64> p = {random_tensor(rng, {2, 3, 9}),
                               random_tensor(rng, {4, 3, 3}, 0.4)};
    LossFn fn = [](Tape64& t, const std::vector<Tensor64>& q) {
      return sumsq(t, conv1d(t, q[0], q[1], 1, 1));
    };
    return std::make_pair(fn, p);
  }});

  cases.push_back({"conv1d_s2p2_k5", [](Rng& rng) {
    std::vector<Tensor64> p = {random_tensor(rng, {2, 3, 9}),
                               random_tensor(rng, {4, 3, 5}, 0.4)};
    LossFn fn = [](Tape64& t, const std::vector<Tensor64>& q) {
      return sumsq(t, conv1d(t, q[0], q[1], 2, 2));
    };
    return std::make_pair(fn, p);
  }});

  cases.push_back({"batch_norm_train", [](Rng& rng) {
    std::vector<Tensor64> p = {random_tensor(rng, {4, 2, 3}), random_tensor(rng, {2}, 0.5),
                               random_tensor(rng, {2}, 0.5)};
    auto state = std::make_shared<BatchNormStateT<double>>(2);
    LossFn fn = [state](Tape64& t, const std::vector<Tensor64>& q) {
      return sumsq(t, batch_norm(t, q[0], q[1], q[2], *state, Phase::kTrain));
    };
    return std::make_pair(fn, p);
  }});

  cases.push_back({"batch_norm_eval", [](Rng& rng) {
    std::vector<Tensor64> p = {random_tensor(rng, {4, 2, 3}), random_tensor(rng, {2}, 0.5),
                               random_tensor(rng, {2}, 0.5)};
    auto state = std::make_shared<BatchNormStateT<double>>(2);
    state->running_mean = random_tensor(rng, {2}, 0.3);
    std::vector<double> var = {0.7 + rng.uniform(), 0.7 + rng.uniform()};
    state->running_var = Tensor64::from_vector(var);
    LossFn fn = [state](Tape64& t, const std::vector<Tensor64>& q) {
      return sumsq(t, batch_norm(t, q[0], q[1], q[2], *state, Phase::kEval));
    };
    return std::make_pair(fn, p);
  }});

  cases.push_back({"max_pool2d", [](Rng& rng) {
    std::vector<Tensor64> p = {random_tensor(rng, {2, 2, 6, 6})};
    LossFn fn = [](Tape64& t, const std::vector<Tensor64>& q) {
      return sumsq(t, max_pool2d(t, q[0], 2, 2));
    };
    return std::make_pair(fn, p);
  }});

  cases.push_back({"global_avg_pool", [](Rng& rng) {
    std::vector<Tensor64> p = {random_tensor(rng, {2, 3, 4, 4})};
    LossFn fn = [](Tape64& t, const std::vector<Tensor64>& q) {
      return sumsq(t, global_avg_pool(t, q[0]));
    };
    return std::make_pair(fn, p);
  }});

  cases.push_back({"adaptive_avg_pool1d", [](Rng& rng) {
    std::vector<Tensor64> p = {random_tensor(rng, {2, 3, 7})};
    LossFn fn = [](Tape64& t, const std::vector<Tensor64>& q) {
      return sumsq(t, adaptive_avg_pool1d(t, q[0], 3));
    };
    return std::make_pair(fn, p);
  }});

  cases.push_back({"avg_over_last_axis", [](Rng& rng) {
    std::vector<Tensor64> p = {random_tensor(rng, {2, 3, 2, 5})};
    LossFn fn = [](Tape64& t, const std::vector<Tensor64>& q) {
      return sumsq(t, avg_over_last_axis(t, q[0]));
    };
    return std::make_pair(fn, p);
  }});

  cases.push_back({"l2_normalize", [](Rng& rng) {
    std::vector<Tensor64> p = {random_tensor(rng, {3, 5})};
    Tensor64 w = random_tensor(rng, {3, 5});
    LossFn fn = [w](Tape64& t, const std::vector<Tensor64>& q) {
      return sum_all(t, mul(t, l2_normalize(t, q[0]), w));
    };
    return std::make_pair(fn, p);
  }});

  cases.push_back({"lstm_layer", [](Rng& rng) {
    LstmLayerParamsT<double> lp = random_lstm(rng, 3, 4);
    std::vector<Tensor64> p = {random_tensor(rng, {2, 3, 3}), lp.w_ih, lp.w_hh, lp.b_ih, lp.b_hh};
    LossFn fn = [](Tape64& t, const std::vector<Tensor64>& q) {
      LstmLayerParamsT<double> lay{q[1], q[2], q[3], q[4]};
      return sumsq(t, take_last_step(t, lstm_layer(t, q[0], lay)));
    };
    return std::make_pair(fn, p);
  }});

  cases.push_back({"lstm_forward_2layer", [](Rng& rng) {
    LstmLayerParamsT<double> l0 = random_lstm(rng, 3, 4);
    LstmLayerParamsT<double> l1 = random_lstm(rng, 4, 4);
    std::vector<Tensor64> p = {random_tensor(rng, {2, 3, 3}), l0.w_ih, l0.w_hh, l0.b_ih, l0.b_hh,
                               l1.w_ih, l1.w_hh, l1.b_ih, l1.b_hh};
    LossFn fn = [](Tape64& t, const std::vector<Tensor64>& q) {
      std::vector<LstmLayerParamsT<double>> layers = {{q[1], q[2], q[3], q[4]},
                                                      {q[5], q[6], q[7], q[8]}};
      return sumsq(t, lstm_forward(t, q[0], layers).final);
    };
    return std::make_pair(fn, p);
  }});

  cases.push_back({"neg_ccc_loss", [](Rng& rng) {
    std::vector<Tensor64> p = {random_tensor(rng, {12})};
    Tensor64 target = random_tensor(rng, {12});
    LossFn fn = [target](Tape64& t, const std::vector<Tensor64>& q) {
      return neg_ccc_loss(t, q[0], target);
    };
    return std::make_pair(fn, p);
  }});

  cases.push_back({"fec_triplet_loss", [](Rng& rng) {
    std::vector<Tensor64> p = {random_tensor(rng, {9, 5})};
    LossFn fn = [](Tape64& t, const std::vector<Tensor64>& q) {
      return fec_triplet_loss(t, l2_normalize(t, q[0]), {0, 1, 2}, 0.2);
    };
    return std::make_pair(fn, p);
  }});

  cases.push_back({"cross_entropy_loss", [](Rng& rng) {
    std::vector<Tensor64> p = {random_tensor(rng, {4, 6})};
    LossFn fn = [](Tape64& t, const std::vector<Tensor64>& q) {
      return cross_entropy_loss(t, q[0], {0, 3, 5, 1});
    };
    return std::make_pair(fn, p);
  }});

  cases.push_back({"rkd_loss", [](Rng& rng) {
    std::vector<Tensor64> p = {random_tensor(rng, {5, 4})};
    Tensor64 teacher = random_tensor(rng, {5, 4});
    LossFn fn = [teacher](Tape64& t, const std::vector<Tensor64>& q) {
      return rkd_loss(t, q[0], teacher);
    };
    return std::make_pair(fn, p);
  }});

  return cases;
}

std::string c1_gradient_oracles() {
  const std::vector<GradCase> cases = gradient_cases();
  const int seeds = 10;
  double max_rel = 0.0;
  double max_abs = 0.0;
  std::size_t checked = 0;
  for (std::size_t ci = 0; ci < cases.size(); ++ci) {
    for (int s = 0; s < seeds; ++s) {
      Rng rng(1000 + 97 * static_cast<std::uint64_t>(s) + 1013 * ci);
      auto [fn, params] = cases[ci].make(rng);
      const GradCheckReport rep = check_gradients(fn, std::move(params));
      checked += rep.checked;
      max_rel = std::max(max_rel, rep.max_rel_err);
      max_abs = std::max(max_abs, rep.max_abs_err);
      expect(rep.ok(), std::string(cases[ci].name) + " seed " + std::to_string(s) + ": " +
                           std::to_string(rep.failures) + " of " + std::to_string(rep.checked) +
                           " gradients off (" + rep.first_failure + ")");
    }
  }
  return std::to_string(cases.size()) + " cases x " + std::to_string(seeds) + " seeds, " +
         std::to_string(checked) + " partials, max abs err " + fmt(max_abs, 3) +
         ", max rel err " + fmt(max_rel, 3);
}

// ---------------------------------------------------------------------------
// criterion 2: concordance metric
// ---------------------------------------------------------------------------

std::string c2_ccc_metric() {
  Rng rng(42);

  // Self-agreement is exact.
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> x(50);
    for (double& v : x) v = rng.normal(0.0, 2.0);
    const double c = concordance(x, x).ccc;
    expect(std::fabs(c - 1.0) <= 1e-12, "ccc(x,x) = " + fmt(c, 17) + ", expected 1");
  }

  // Alternating-sign construction with exactly zero covariance.
  for (int trial = 0; trial < 10; ++trial) {
    const double mx = 0.5 * (trial - 4);
    const double my = 0.25 * trial;
    std::vector<double> x, y;
    for (int i = 0; i < 8; ++i) {
      x.push_back(mx + ((i % 2 == 0) ? 1.0 : -1.0));
      y.push_back(my + ((i % 4 < 2) ? 2.0 : -2.0));
    }
    const double c = concordance(x, y).ccc;
    expect(std::fabs(c) <= 1e-12, "zero-covariance ccc = " + fmt(c, 17) + ", expected 0");
  }

  // Worked value: unit-shifted ramp scores 5/7.
  {
    const std::vector<double> x = {1.0, 2.0, 3.0, 4.0};
    const std::vector<double> y = {2.0, 3.0, 4.0, 5.0};
    const double c = concordance(x, y).ccc;
    expect(std::fabs(c - 5.0 / 7.0) <= 1e-9,
           "ccc([1..4],[2..5]) = " + fmt(c, 12) + ", expected 5/7");
  }

  // Attenuation: |ccc| <= |pearson| on random pairs.
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> x(20), y(20);
    const double ox = rng.normal(0.0, 1.0), oy = rng.normal(0.0, 1.0);
    for (int i = 0; i < 20; ++i) {
      x[i] = ox + rng.normal(0.0, 1.5);
      y[i] = oy + rng.normal(0.0, 1.5);
    }
    const CccReport r = concordance(x, y);
    expect(std::fabs(r.ccc) <= std::fabs(r.pearson) + 1e-12,
           "pair " + std::to_string(trial) + ": |ccc| " + fmt(std::fabs(r.ccc)) +
               " > |pearson| " + fmt(std::fabs(r.pearson)));
  }

  return "identity, zero-covariance, 5/7 worked value, 1000 attenuation pairs";
}

// ---------------------------------------------------------------------------
// criterion 3: dsp oracles
// ---------------------------------------------------------------------------

std::string c3_dsp_oracles() {
  // Frame-count formula across window/hop/length combinations.
  int combos = 0;
  for (int window : {256, 640, 1024}) {
    for (int hop : {160, 320, 640}) {
      MelConfig cfg;
      cfg.window = window;
      cfg.hop = hop;
      for (std::size_t n : {static_cast<std::size_t>(window), static_cast<std::size_t>(window + 1),
                            static_cast<std::size_t>(window + hop - 1),
                            static_cast<std::size_t>(window + hop),
                            static_cast<std::size_t>(window + 7 * hop + 3),
                            static_cast<std::size_t>(16000), static_cast<std::size_t>(48000)}) {
        const std::size_t want = (n - static_cast<std::size_t>(window)) /
                                     static_cast<std::size_t>(hop) + 1;
        const std::size_t got = mel_frame_count(n, cfg);
        expect(got == want, "mel_frame_count(" + std::to_string(n) + ", w=" +
                                std::to_string(window) + ", h=" + std::to_string(hop) + ") = " +
                                std::to_string(got) + ", expected " + std::to_string(want));
        ++combos;
      }
    }
  }

  // The spectrogram row count obeys the same formula.
  {
    MelConfig cfg;
    cfg.window = 640;
    cfg.hop = 320;
    cfg.bands = 32;
    const int n = 640 + 7 * 320 + 5;
    std::vector<float> tone(n);
    for (int i = 0; i < n; ++i)
      tone[i] = 0.25f * std::sin(2.0 * 3.14159265358979323846 * 220.0 * i / 16000.0);
    const Tensor mel = mel_spectrogram(tone, 16000, cfg);
    expect(mel.dim(0) == 8 && mel.dim(1) == 32,
           "mel shape [" + std::to_string(mel.dim(0)) + "," + std::to_string(mel.dim(1)) +
               "], expected [8,32]");
  }

  // A 1 kHz tone at 16 kHz lands exactly on power-spectrum bin 64 of 1024.
  {
    std::vector<double> frame(1024);
    for (int i = 0; i < 1024; ++i)
      frame[i] = std::sin(2.0 * 3.14159265358979323846 * 1000.0 * i / 16000.0);
    const std::vector<double> hann = hann_periodic(1024);
    std::vector<double> windowed(1024);
    for (int i = 0; i < 1024; ++i) windowed[i] = frame[i] * hann[i];
    for (const std::vector<double>& f : {frame, windowed}) {
      const std::vector<double> power = power_spectrum(f, 1024);
      expect(power.size() == 513, "power spectrum size " + std::to_string(power.size()));
      const auto peak = std::max_element(power.begin(), power.end());
      const long bin = peak - power.begin();
      expect(bin == 64, "1 kHz tone peaks at bin " + std::to_string(bin) + ", expected 64");
    }
  }

  // Silence maps to the log floor in every cell.
  {
    const std::vector<float> silence(16000, 0.0f);
    const Tensor mel = mel_spectrogram(silence, 16000);
    const float floor_value = mel.data()[0];
    expect(std::fabs(static_cast<double>(floor_value) - std::log(1e-10)) <= 1e-5,
           "silence floor " + fmt(floor_value, 8) + ", expected log(1e-10)");
    for (float v : mel.data())
      expect(v == floor_value, "silence produced a non-floor cell " + fmt(v, 8));
  }

  return std::to_string(combos) + " frame-count combos, tone bin 64, silence at log floor";
}

// ---------------------------------------------------------------------------
// criterion 4: teacher training
// ---------------------------------------------------------------------------

std::string c4_teacher_training() {
  run_tool("train teacher --out " + wp("overfit") +
           " --set steps=500 --set train_faces=32 --set train_triplets=32 --force");
  const json over = last_event(g_work / "overfit" / "metrics.jsonl", "final");
  const double fec = over.at("train_fec_loss").get<double>();
  const double aff = over.at("train_affect_loss").get<double>();
  expect(fec < 0.05, "overfit train triplet loss " + fmt(fec) + " >= 0.05");
  expect(aff < 0.1, "overfit train affect loss " + fmt(aff) + " >= 0.1");

  run_tool("train teacher --out " + wp("teacher1") + " --set ckpt_name=teacher1.aver --force");
  const json full = last_event(g_work / "teacher1" / "metrics.jsonl", "final");
  const double bal = full.at("best_dev_balanced_accuracy").get<double>();
  const double tri = full.at("best_dev_triplet_accuracy").get<double>();
  expect(bal >= 0.85, "teacher dev balanced accuracy " + fmt(bal) + " < 0.85");
  expect(tri >= 0.90, "teacher dev triplet accuracy " + fmt(tri) + " < 0.90");

  return "overfit fec " + fmt(fec) + " affect " + fmt(aff) + "; full dev balanced " + fmt(bal) +
         " triplet " + fmt(tri);
}

// ---------------------------------------------------------------------------
// criterion 5: student distillation
// ---------------------------------------------------------------------------

std::string c5_student_distillation() {
  need_artifact("teacher1/teacher1.aver", 4);
  run_tool("train teacher --out " + wp("teacher2") +
           " --set seed=21 --set embed_dim=256 --set ckpt_name=teacher2.aver --force");

  const std::string teachers = " --teacher1 " + wp("teacher1/teacher1.aver") + " --teacher2 " +
                               wp("teacher2/teacher2.aver") + " --set steps=1200 --force";
  run_tool("train student --out " + wp("student_full") + teachers);
  run_tool("train student --out " + wp("student_no_distill") + teachers + " --no-distill");
  run_tool("train student --out " + wp("student_no_unlabeled") + teachers + " --no-unlabeled");

  const json t1 = last_event(g_work / "teacher1" / "metrics.jsonl", "final");
  const json t2 = last_event(g_work / "teacher2" / "metrics.jsonl", "final");
  const double teacher_tri = std::max(t1.at("best_dev_triplet_accuracy").get<double>(),
                                      t2.at("best_dev_triplet_accuracy").get<double>());

  json report;
  report["v"] = 1;
  report["teacher_best_dev_triplet_accuracy"] = teacher_tri;
  report["runs"] = json::array();
  double full_tri = 0.0;
  const std::array<std::pair<const char*, const char*>, 3> runs = {
      {{"student_full", "full"},
       {"student_no_distill", "no-distill"},
       {"student_no_unlabeled", "no-unlabeled"}}};
  for (const auto& [dir, label] : runs) {
    const json fin = last_event(g_work / dir / "metrics.jsonl", "final");
    const double tri = fin.at("best_dev_triplet_accuracy").get<double>();
    const double bal = fin.at("best_dev_balanced_accuracy").get<double>();
    if (std::string(label) == "full") full_tri = tri;
    report["runs"].push_back(json{{"run", label},
                                  {"best_dev_triplet_accuracy", tri},
                                  {"best_dev_balanced_accuracy", bal}});
    std::cout << "  student " << label << ": dev triplet " << tri << ", balanced " << bal << "\n";
  }
  std::ofstream(g_work / "student_report.json") << report.dump(2) << "\n";

  expect(full_tri >= teacher_tri - 0.02, "student dev triplet " + fmt(full_tri) +
                                             " < teacher best " + fmt(teacher_tri) + " - 0.02");
  return "student triplet " + fmt(full_tri) + " vs teacher " + fmt(teacher_tri) +
         "; 3-run report at student_report.json";
}

// ---------------------------------------------------------------------------
// criterion 6: audio fine-tuning
// ---------------------------------------------------------------------------

std::string c6_audio_finetune() {
  run_tool("gen-data --out " + wp("data") + " --force");
  run_tool("preprocess-audio --data " + wp("data/av") + " --cache " + wp("cache"));
  run_tool("train audio --out " + wp("audio") + " --data " + wp("data/av") + " --cache " +
           wp("cache") + " --force");
  const json fin = last_event(g_work / "audio" / "metrics.jsonl", "final");
  const double ccc = fin.at("best_dev_ccc").get<double>();
  expect(ccc >= 0.8, "held-out arousal ccc " + fmt(ccc) + " < 0.8");
  return "held-out arousal ccc " + fmt(ccc);
}

// ---------------------------------------------------------------------------
// criterion 7: fusion gain
// ---------------------------------------------------------------------------

std::string c7_fusion_gain() {
  need_artifact("student_full/student.aver", 5);
  need_artifact("audio/audio.aver", 6);
  need_artifact("data/av/manifest.json", 6);

  run_tool("train fusion --out " + wp("fusion") + " --data " + wp("data/av") + " --visual-ckpt " +
           wp("student_full/student.aver") + " --audio-ckpt " + wp("audio/audio.aver") +
           " --force");
  run_tool("eval --ckpt " + wp("fusion/fusion.aver") + " --data " + wp("data/av") +
           " --grid --csv " + wp("fusion_grid.csv") + " --report " + wp("fusion_grid.json"));

  const json report = json::parse(slurp(g_work / "fusion_grid.json"));
  const json& grid = report.at("grid");
  expect(grid.size() == 6, "grid has " + std::to_string(grid.size()) + " rows, expected 6");
  std::map<std::pair<std::string, std::string>, std::pair<double, double>> cells;
  for (const json& cell : grid) {
    cells[{cell.at("mask").get<std::string>(), cell.at("split").get<std::string>()}] = {
        cell.at("ccc_arousal").get<double>(), cell.at("ccc_valence").get<double>()};
  }
  expect(cells.size() == 6, "grid rows are not unique mask/split pairs");

  std::string detail;
  for (const std::string split : {"dev", "test"}) {
    const auto [a_ar, a_va] = cells.at({"audio-only", split});
    const auto [v_ar, v_va] = cells.at({"visual-only", split});
    const auto [f_ar, f_va] = cells.at({"audio-visual", split});
    const double uni_ar = std::max(a_ar, v_ar);
    const double uni_va = std::max(a_va, v_va);
    expect(f_ar >= uni_ar - 0.02, split + " fused arousal ccc " + fmt(f_ar) +
                                      " < best unimodal " + fmt(uni_ar) + " - 0.02");
    expect(f_va >= uni_va - 0.02, split + " fused valence ccc " + fmt(f_va) +
                                      " < best unimodal " + fmt(uni_va) + " - 0.02");
    detail += split + " fused (" + fmt(f_ar, 3) + "," + fmt(f_va, 3) + ") uni (" +
              fmt(uni_ar, 3) + "," + fmt(uni_va, 3) + ") ";
  }

  const std::string csv = slurp(g_work / "fusion_grid.csv");
  expect(csv.rfind("mask,dev_arousal,dev_valence,test_arousal,test_valence\n", 0) == 0,
         "grid csv header mismatch");
  expect(std::count(csv.begin(), csv.end(), '\n') == 4, "grid csv should have 4 lines");

  return detail + "(12-cell grid emitted)";
}

// ---------------------------------------------------------------------------
// criterion 8: determinism
// ---------------------------------------------------------------------------

std::string c8_determinism() {
  const std::string tiny_visual =
      " --set image_size=16 --set train_faces=48 --set train_triplets=48 --set dev_faces=24"
      " --set dev_triplets=16 --set steps=6 --set eval_every=3 --set log_every=1";
  run_tool("train teacher --out " + wp("det/t_a") + tiny_visual + " --force");
  run_tool("train teacher --out " + wp("det/t_b") + tiny_visual + " --force");
  expect(same_bytes(g_work / "det/t_a/metrics.jsonl", g_work / "det/t_b/metrics.jsonl"),
         "teacher reruns produced different metrics bytes");
  expect(same_bytes(g_work / "det/t_a/teacher.aver", g_work / "det/t_b/teacher.aver"),
         "teacher reruns produced different checkpoint bytes");

  const std::string tiny_gen = " --n-images 6 --n-triplets 6 --n-av 14 --duration 4"
                               " --image-size 16 --force";
  run_tool("gen-data --out " + wp("det/d_a") + tiny_gen);
  run_tool("gen-data --out " + wp("det/d_b") + tiny_gen);
  for (const std::string rel : {"manifest.json", "av/clip_0001.wav", "av/clip_0001.json"}) {
    expect(same_bytes(g_work / "det/d_a" / rel, g_work / "det/d_b" / rel),
           "regenerated dataset differs at " + rel);
  }

  run_tool("preprocess-audio --data " + wp("det/d_a/av") + " --cache " + wp("det/cache_a"));
  const std::string tiny_audio = " --data " + wp("det/d_a/av") + " --cache " + wp("det/cache_a") +
                                 " --set steps=8 --set eval_every=4 --set log_every=2 --force";
  run_tool("train audio --out " + wp("det/a_a") + tiny_audio);
  run_tool("train audio --out " + wp("det/a_b") + tiny_audio);
  expect(same_bytes(g_work / "det/a_a/metrics.jsonl", g_work / "det/a_b/metrics.jsonl"),
         "audio reruns produced different metrics bytes");

  // Checkpoint round trips reproduce forward outputs bit for bit.
  Rng rng(7);
  int roundtrips = 0;
  {
    VisualNetConfig cfg;
    cfg.image_size = 16;
    cfg.distill_head = true;
    VisualNet net = VisualNet::init(cfg, rng);
    const Tensor x = randn(rng, {2, 1, 16, 16});
    Tape tape;
    const VisualOut before = net.forward(tape, x, Phase::kEval, false);
    Checkpoint ck;
    net.save(ck);
    save_checkpoint(g_work / "det/visual.aver", ck);
    Rng other(991);
    VisualNet loaded = VisualNet::init(cfg, other);
    loaded.load(load_checkpoint(g_work / "det/visual.aver"));
    Tape tape2;
    const VisualOut after = loaded.forward(tape2, x, Phase::kEval, false);
    expect(bits_equal(before.face, after.face) && bits_equal(before.fec, after.fec) &&
               bits_equal(before.affect_logits, after.affect_logits) &&
               bits_equal(before.distill, after.distill),
           "visual checkpoint round trip changed forward bits");
    ++roundtrips;
  }
  {
    AudioNet net = AudioNet::init(AudioNetConfig{}, rng);
    const Tensor mel = randn(rng, {2, 16, 128});
    Tape tape;
    const AudioOut before = net.forward(tape, mel, false);
    Checkpoint ck;
    net.save(ck);
    save_checkpoint(g_work / "det/audio.aver", ck);
    Rng other(992);
    AudioNet loaded = AudioNet::init(AudioNetConfig{}, other);
    loaded.load(load_checkpoint(g_work / "det/audio.aver"));
    Tape tape2;
    const AudioOut after = loaded.forward(tape2, mel, false);
    expect(bits_equal(before.embedding, after.embedding) &&
               bits_equal(before.prediction, after.prediction),
           "audio checkpoint round trip changed forward bits");
    ++roundtrips;
  }
  {
    FusionNet net = FusionNet::init(FusionNetConfig{}, rng);
    const Tensor audio_seq = randn(rng, {2, 12, 128});
    const Tensor visual_seq = randn(rng, {2, 96, 128});
    Tape tape;
    const Tensor before = net.forward(tape, audio_seq, visual_seq, FusionMask::kBoth, false);
    Checkpoint ck;
    net.save(ck);
    save_checkpoint(g_work / "det/fusion.aver", ck);
    Rng other(993);
    FusionNet loaded = FusionNet::init(FusionNetConfig{}, other);
    loaded.load(load_checkpoint(g_work / "det/fusion.aver"));
    Tape tape2;
    const Tensor after = loaded.forward(tape2, audio_seq, visual_seq, FusionMask::kBoth, false);
    expect(bits_equal(before, after), "fusion checkpoint round trip changed forward bits");
    ++roundtrips;
  }

  return "teacher/audio/gen-data reruns byte-identical; " + std::to_string(roundtrips) +
         " checkpoint round trips bit-identical";
}

// ---------------------------------------------------------------------------
// criterion 9: shape contracts
// ---------------------------------------------------------------------------

std::string c9_shape_contracts() {
  Rng rng(11);

  VisualNetConfig tcfg1;  // 128-wide teacher
  VisualNetConfig tcfg2;
  tcfg2.embed_dim = 256;
  VisualNet teacher1 = VisualNet::init(tcfg1, rng);
  VisualNet teacher2 = VisualNet::init(tcfg2, rng);
  VisualNetConfig scfg;
  scfg.distill_head = true;
  VisualNet student = VisualNet::init(scfg, rng);

  const Tensor images = randn(rng, {2, 1, 32, 32});
  Tape tape;
  const VisualOut t1 = teacher1.forward(tape, images, Phase::kEval, false);
  const VisualOut t2 = teacher2.forward(tape, images, Phase::kEval, false);
  const VisualOut s = student.forward(tape, images, Phase::kEval, false);

  expect(t1.face.dim(0) == 2 && t1.face.dim(1) == 128, "teacher1 face embedding not [2,128]");
  expect(t2.face.dim(1) == 256, "teacher2 face embedding width not 256");
  for (const VisualOut* out : {&t1, &t2, &s}) {
    expect(out->fec.dim(0) == 2 && out->fec.dim(1) == 32, "expression head not [B,32]");
    expect(out->affect_logits.dim(0) == 2 && out->affect_logits.dim(1) == 8,
           "affect head not [B,8]");
    for (int r = 0; r < 2; ++r) {
      const double n = row_norm(out->fec, r);
      expect(std::fabs(n - 1.0) <= 1e-5, "expression row norm " + fmt(n, 8) + ", expected 1");
    }
  }
  expect(t1.distill.rank() == 0, "teacher grew a distillation head");
  expect(s.distill.dim(0) == 2 && s.distill.dim(1) == 80, "student distill head not [B,80]");

  const Tensor target = teacher_distill_target(t1, t2);
  expect(target.dim(0) == 2 && target.dim(1) == 80,
         "distill target not [B,80]: [" + std::to_string(target.dim(0)) + "," +
             std::to_string(target.dim(1)) + "]");
  for (int r = 0; r < 2; ++r) {
    const double n = row_norm(target, r);
    expect(std::fabs(n - 2.0) <= 1e-5, "distill target row norm " + fmt(n, 8) + ", expected 2");
  }

  FusionNet fusion = FusionNet::init(FusionNetConfig{}, rng);
  const Tensor audio_seq = randn(rng, {2, 12, 128});
  const Tensor visual_seq = randn(rng, {2, 96, 128});
  const Tensor ag = fusion.audio_grid(tape, audio_seq, false);
  const Tensor vg = fusion.visual_grid(tape, visual_seq, false);
  for (const Tensor* g : {&ag, &vg}) {
    expect(g->rank() == 3 && g->dim(0) == 2 && g->dim(1) == 9 && g->dim(2) == 64,
           "pre-transform grid not [B,9,64]");
  }
  const Tensor joint = concat(tape, {ag, vg}, 2);
  expect(joint.dim(1) == 9 && joint.dim(2) == 128, "fused grid not [B,9,128]");

  const Tensor out = fusion.forward(tape, audio_seq, visual_seq, FusionMask::kBoth, false);
  expect(out.rank() == 2 && out.dim(0) == 2 && out.dim(1) == 2, "fusion output not [B,2]");
  for (float v : out.data())
    expect(v > -1.0f && v < 1.0f, "fusion output " + fmt(v, 8) + " outside (-1,1)");

  AudioNet audio = AudioNet::init(AudioNetConfig{}, rng);
  const Tensor mel = randn(rng, {2, 16, 128});
  const AudioOut ao = audio.forward(tape, mel, false);
  expect(ao.embedding.dim(0) == 2 && ao.embedding.dim(1) == 128, "audio embedding not [2,128]");
  expect(ao.prediction.rank() == 1 && ao.prediction.dim(0) == 2, "audio prediction not [B]");
  for (float v : ao.prediction.data())
    expect(v > -1.0f && v < 1.0f, "audio prediction " + fmt(v, 8) + " outside (-1,1)");
  const Tensor seq = audio.features_sequence(tape, mel, false);
  expect(seq.rank() == 3 && seq.dim(0) == 2 && seq.dim(1) == 2 && seq.dim(2) == 128,
         "audio feature sequence not [2,2,128]");

  return "heads (128|256,32,8), distill target 80-d norm 2, grids [9,64]+[9,128], outputs in (-1,1)";
}

// ---------------------------------------------------------------------------
// runner
// ---------------------------------------------------------------------------

struct Criterion {
  int id;
  const char* label;
  double budget_s;  // 0 disables budget enforcement
  std::string (*fn)();
};

const std::array<Criterion, 9> kCriteria = {{
    {1, "gradient-oracles", 120.0, c1_gradient_oracles},
    {2, "ccc-metric", 10.0, c2_ccc_metric},
    {3, "dsp-oracles", 30.0, c3_dsp_oracles},
    {4, "teacher-training", 600.0, c4_teacher_training},
    {5, "student-distillation", 900.0, c5_student_distillation},
    {6, "audio-finetune", 600.0, c6_audio_finetune},
    {7, "fusion-gain", 900.0, c7_fusion_gain},
    {8, "determinism", 0.0, c8_determinism},
    {9, "shape-contracts", 0.0, c9_shape_contracts},
}};

}  // namespace

int main(int argc, char** argv) {
  std::vector<int> selected;
  bool keep = false;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--keep") {
      keep = true;
    } else {
      const int id = std::atoi(arg.c_str());
      if (id < 1 || id > 9) {
        std::cerr << "usage: test_acceptance [--keep] [criterion numbers 1-9]\n";
        return 2;
      }
      selected.push_back(id);
    }
  }
  if (!selected.empty()) keep = true;

  g_work = fs::temp_directory_path() / "aver_acceptance";
  if (!keep) fs::remove_all(g_work);
  fs::create_directories(g_work / "logs");
  std::cout << "work directory: " << g_work.string() << "\n";

  std::vector<std::string> lines;
  int failures = 0;
  for (const Criterion& c : kCriteria) {
    if (!selected.empty() &&
        std::find(selected.begin(), selected.end(), c.id) == selected.end()) {
      continue;
    }
    std::cout << "\n---- criterion " << c.id << ": " << c.label << " ----\n" << std::flush;
    const auto t0 = std::chrono::steady_clock::now();
    bool pass = true;
    std::string detail;
    try {
      detail = c.fn();
    } catch (const std::exception& e) {
      pass = false;
      detail = e.what();
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (pass && c.budget_s > 0.0 && secs > c.budget_s) {
      pass = false;
      detail = "passed checks but exceeded the " + fmt(c.budget_s, 3) + "s budget; " + detail;
    }
    std::ostringstream line;
    line << (pass ? "[PASS] " : "[FAIL] ") << c.id << " " << std::left << std::setw(22)
         << c.label << " (" << fmt(secs, 4) << "s";
    if (c.budget_s > 0.0) line << "/" << fmt(c.budget_s, 4) << "s";
    line << ") " << detail;
    lines.push_back(line.str());
    std::cout << lines.back() << "\n" << std::flush;
    if (!pass) ++failures;
  }

  std::cout << "\n==== acceptance summary ====\n";
  for (const std::string& line : lines) std::cout << line << "\n";
  std::cout << (failures == 0 ? "all criteria passed"
                              : std::to_string(failures) + " criteria failed")
            << "\n";
  return failures;
}
