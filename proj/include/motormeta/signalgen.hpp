#pragma once
// Synthetic stator-current generation, SNR calibration and sliding-window segmentation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "motormeta/error.hpp"
#include "motormeta/rng.hpp"

namespace motormeta {

struct MotorConfig {
  double supply_freq_hz = 50.0;
  int pole_pairs = 2;
  int rotor_bars = 28;
  double rated_speed_rpm = 1440.0;
  double sample_rate_hz = 10000.0;
  double fundamental_amp = 3.3 * std::numbers::sqrt2;  // rated phase current, peak

  void validate() const {
    require(supply_freq_hz > 0.0, "motor: supply_freq_hz must be positive");
    require(pole_pairs >= 1, "motor: pole_pairs must be >= 1");
    require(sample_rate_hz >= 4.0 * supply_freq_hz, "motor: sample_rate_hz must be >= 4 x supply frequency");
    require(fundamental_amp > 0.0, "motor: fundamental_amp must be positive");
  }
};

/// 6205 deep-groove ball bearing by default.
struct BearingGeometry {
  double ball_diameter_mm = 7.835;
  double cage_diameter_mm = 38.5;
  int n_balls = 9;
  double contact_angle_deg = 0.0;

  void validate() const {
    require(ball_diameter_mm >= 0.0 && ball_diameter_mm < cage_diameter_mm,
            "bearing: ball diameter must be smaller than cage diameter");
    require(n_balls >= 1, "bearing: n_balls must be >= 1");
  }
};

enum class FaultClass : int {
  healthy = 0,
  brb1,
  brb2,
  brb3,
  ecc_static,
  ecc_dynamic,
  bearing_outer,
  bearing_cage,
  bearing_ball,
};

inline constexpr int kNumFaultClasses = 9;

inline constexpr std::array<std::string_view, kNumFaultClasses> kFaultClassNames = {
    "healthy",     "brb1",          "brb2",         "brb3",        "ecc_static",
    "ecc_dynamic", "bearing_outer", "bearing_cage", "bearing_ball"};

inline std::string_view to_string(FaultClass c) { return kFaultClassNames.at(static_cast<std::size_t>(c)); }

inline FaultClass fault_class_from_index(int index) {
  require(index >= 0 && index < kNumFaultClasses, "unknown health state index " + std::to_string(index));
  return static_cast<FaultClass>(index);
}

inline FaultClass parse_fault_class(std::string_view name) {
  for (int i = 0; i < kNumFaultClasses; ++i)
    if (kFaultClassNames[static_cast<std::size_t>(i)] == name) return static_cast<FaultClass>(i);
  throw ValidationError("unknown health state '" + std::string(name) + "'");
}

struct HealthState {
  FaultClass cls = FaultClass::healthy;
  double severity = 1.0;  // in [0, 1]; ignored for healthy
};

struct OperatingPoint {
  double load_fraction = 0.0;
  double speed_rpm = 1492.0;
};

/// Load/speed pairs measured on the 1.5 kW test motor.
inline constexpr std::array<OperatingPoint, 5> kLoadSpeedTable = {{
    {0.00, 1492.0},
    {0.25, 1486.0},
    {0.50, 1482.0},
    {0.75, 1473.0},
    {1.00, 1464.0},
}};

inline int load_index(double load_fraction) {
  for (std::size_t i = 0; i < kLoadSpeedTable.size(); ++i)
    if (std::abs(kLoadSpeedTable[i].load_fraction - load_fraction) < 1e-9) return static_cast<int>(i);
  throw ValidationError("load fraction " + std::to_string(load_fraction) + " is not in the load/speed table");
}

struct RawSignal {
  std::vector<double> samples;
  double sample_rate_hz = 0.0;
  HealthState label;
  OperatingPoint op;
  std::optional<double> snr_db;  // absent means clean

  void validate() const {
    require(!samples.empty(), "signal has no samples");
    require(std::all_of(samples.begin(), samples.end(), [](double v) { return std::isfinite(v); }),
            "signal contains non-finite samples");
  }
};

struct SignalSegment {
  std::vector<double> values;  // n*n samples
  HealthState label;
  OperatingPoint op;
  std::optional<double> snr_db;
};

// ---------------------------------------------------------------------------
// Machine kinematics

inline double compute_slip(double speed_rpm, double supply_freq_hz, int pole_pairs) {
  require(supply_freq_hz > 0.0 && pole_pairs > 0, "invalid motor config: frequency and pole pairs must be positive");
  require(speed_rpm >= 0.0, "speed must be non-negative");
  const double n_sync = 60.0 * supply_freq_hz / pole_pairs;
  return (n_sync - speed_rpm) / n_sync;
}

struct BearingFrequencies {
  double outer = 0.0;  // ball pass frequency, outer race
  double cage = 0.0;   // fundamental train frequency
  double ball = 0.0;   // ball spin frequency
};

/// Standard rolling-element kinematics with stationary outer race:
///   cage  = f_r/2 * (1 - r cos(theta))
///   outer = N_b/2 * f_r * (1 - r cos(theta))
///   ball  = D_c/(2 D_b) * f_r * (1 - (r cos(theta))^2)      with r = D_b/D_c
inline BearingFrequencies bearing_char_freqs(const BearingGeometry& geom, double rotor_freq_hz) {
  geom.validate();
  require(rotor_freq_hz > 0.0, "rotor frequency must be positive");
  const double rc = geom.ball_diameter_mm / geom.cage_diameter_mm *
                    std::cos(geom.contact_angle_deg * std::numbers::pi / 180.0);
  BearingFrequencies f;
  f.cage = 0.5 * rotor_freq_hz * (1.0 - rc);
  f.outer = 0.5 * geom.n_balls * rotor_freq_hz * (1.0 - rc);
  f.ball = geom.ball_diameter_mm > 0.0
               ? geom.cage_diameter_mm / (2.0 * geom.ball_diameter_mm) * rotor_freq_hz * (1.0 - rc * rc)
               : 0.0;
  return f;
}

// ---------------------------------------------------------------------------
// Spectral model

struct SpectralComponent {
  double freq_hz;
  double rel_amp;      // relative to the fundamental amplitude at this load
  bool fault_signature;
};

/// Relative amplitudes of the synthetic current model.
struct SignatureLevels {
  double supply_h3 = 0.0;  // supply harmonics common to every class; off by default
  double supply_h5 = 0.0;
  double supply_h7 = 0.0;
  double brb_sideband = 0.060;   // one broken bar, (1 +- 2s) f
  double brb_sideband2 = 0.024;  // one broken bar, (1 +- 4s) f
  double brb_speed_ripple = 0.050;  // one broken bar, f (5 - 4s) and f (7 - 6s)
  double brb_bar_growth = 3.0;   // k broken bars scale the terms above by growth^(k-1)
  double ecc_static = 0.300;
  double ecc_dynamic = 0.100;
  double ecc_dynamic_2fr = 0.300;
  double bearing_m1 = 0.300;
  double bearing_m2 = 0.150;
  double noise_floor = 0.010;  // broadband std relative to fundamental
};

inline std::vector<SpectralComponent> spectral_components(const MotorConfig& cfg, const BearingGeometry& geom,
                                                          const HealthState& state, const OperatingPoint& op,
                                                          const SignatureLevels& lv = {}) {
  cfg.validate();
  require(state.severity >= 0.0 && state.severity <= 1.0, "severity must lie in [0, 1]");
  require(lv.brb_bar_growth > 1.0, "signature levels: brb_bar_growth must exceed 1");
  const double f = cfg.supply_freq_hz;
  const double s = compute_slip(op.speed_rpm, f, cfg.pole_pairs);
  const double fr = op.speed_rpm / 60.0;
  const double sev = state.severity;
  const double load_gain = 0.4 + 0.6 * std::clamp(op.load_fraction, 0.0, 1.0);

  std::vector<SpectralComponent> out = {
      {f, 1.0, false},
      {3.0 * f, lv.supply_h3, false},
      {5.0 * f, lv.supply_h5, false},
      {7.0 * f, lv.supply_h7, false},
  };
  auto pair = [&](double center, double offset, double amp) {
    out.push_back({std::abs(center - offset), amp, true});
    out.push_back({center + offset, amp, true});
  };

  switch (state.cls) {
    case FaultClass::healthy:
      break;
    case FaultClass::brb1:
    case FaultClass::brb2:
    case FaultClass::brb3: {
      const int k = static_cast<int>(state.cls) - static_cast<int>(FaultClass::brb1) + 1;
      const double bars = std::pow(lv.brb_bar_growth, k - 1);
      pair(f, 2.0 * s * f, lv.brb_sideband * bars * load_gain * sev);
      pair(f, 4.0 * s * f, lv.brb_sideband2 * bars * load_gain * sev);
      out.push_back({f * (5.0 - 4.0 * s), lv.brb_speed_ripple * bars * sev, true});
      out.push_back({f * (7.0 - 6.0 * s), lv.brb_speed_ripple * bars * sev, true});
      break;
    }
    case FaultClass::ecc_static:
      pair(f, fr, lv.ecc_static * sev);
      break;
    case FaultClass::ecc_dynamic:
      pair(f, fr, lv.ecc_dynamic * sev);
      pair(f, 2.0 * fr, lv.ecc_dynamic_2fr * sev);
      break;
    case FaultClass::bearing_outer:
    case FaultClass::bearing_cage:
    case FaultClass::bearing_ball: {
      const auto bf = bearing_char_freqs(geom, fr);
      const double fc = state.cls == FaultClass::bearing_outer ? bf.outer
                        : state.cls == FaultClass::bearing_cage ? bf.cage
                                                                : bf.ball;
      pair(f, fc, lv.bearing_m1 * sev);
      pair(f, 2.0 * fc, lv.bearing_m2 * sev);
      break;
    }
    default:
      throw ValidationError("unknown health state");
  }
  return out;
}

/// Frequencies at which the given fault class differs from a healthy motor.
inline std::vector<double> signature_frequencies(const MotorConfig& cfg, const BearingGeometry& geom,
                                                 const HealthState& state, const OperatingPoint& op) {
  std::vector<double> f;
  for (const auto& c : spectral_components(cfg, geom, state, op))
    if (c.fault_signature) f.push_back(c.freq_hz);
  return f;
}

/// Deterministic synthetic stator current. Every component receives a seeded random phase; a
/// Gaussian broadband floor is added on top.
inline RawSignal generate_signal(const MotorConfig& cfg, const BearingGeometry& geom, const HealthState& state,
                                 const OperatingPoint& op, double duration_s, std::uint64_t seed,
                                 std::size_t min_samples = 4096, const SignatureLevels& levels = {}) {
  cfg.validate();
  geom.validate();
  require(static_cast<int>(state.cls) >= 0 && static_cast<int>(state.cls) < kNumFaultClasses,
          "unknown health state");
  const auto n_samples = static_cast<std::size_t>(std::floor(duration_s * cfg.sample_rate_hz + 1e-6));
  require(duration_s > 0.0 && n_samples >= min_samples,
          "duration too short: " + std::to_string(n_samples) + " samples < " + std::to_string(min_samples));

  const auto components = spectral_components(cfg, geom, state, op, levels);
  const double amp = cfg.fundamental_amp * (0.4 + 0.6 * std::clamp(op.load_fraction, 0.0, 1.0));
  const double nyquist = 0.5 * cfg.sample_rate_hz;

  Rng rng = make_rng(seed, {0x5167u});
  std::uniform_real_distribution<double> phase_dist(0.0, 2.0 * std::numbers::pi);

  RawSignal sig;
  sig.sample_rate_hz = cfg.sample_rate_hz;
  sig.label = state;
  sig.op = op;
  sig.samples.assign(n_samples, 0.0);

  for (const auto& c : components) {
    const double phase = phase_dist(rng);
    if (c.freq_hz <= 0.0 || c.freq_hz >= nyquist || c.rel_amp == 0.0) continue;
    // Rotate a unit phasor instead of calling sin per sample; renormalize periodically.
    const double w = 2.0 * std::numbers::pi * c.freq_hz / cfg.sample_rate_hz;
    const double cw = std::cos(w), sw = std::sin(w);
    double re = std::cos(phase), im = std::sin(phase);
    const double a = amp * c.rel_amp;
    for (std::size_t t = 0; t < n_samples; ++t) {
      sig.samples[t] += a * im;
      const double nre = re * cw - im * sw;
      im = re * sw + im * cw;
      re = nre;
      if ((t & 1023u) == 1023u) {
        const double r = 1.0 / std::hypot(re, im);
        re *= r;
        im *= r;
      }
    }
  }

  std::normal_distribution<double> floor_dist(0.0, amp * levels.noise_floor);
  for (auto& v : sig.samples) v += floor_dist(rng);
  return sig;
}

// ---------------------------------------------------------------------------
// Noise

inline double mean_power(std::span<const double> x) {
  double acc = 0.0;
  for (double v : x) acc += v * v;
  return x.empty() ? 0.0 : acc / static_cast<double>(x.size());
}

/// 10 log10(P_clean / P_noise) where the noise is (noisy - clean).
inline double measure_snr(std::span<const double> clean, std::span<const double> noisy) {
  require(clean.size() == noisy.size(), "measure_snr: length mismatch");
  require(!clean.empty(), "measure_snr: empty input");
  double ps = 0.0, pn = 0.0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    ps += clean[i] * clean[i];
    const double d = noisy[i] - clean[i];
    pn += d * d;
  }
  require(ps > 0.0, "measure_snr: clean signal has zero power");
  require(pn > 0.0, "measure_snr: zero noise power (infinite SNR)");
  return 10.0 * std::log10(ps / pn);
}

namespace detail {

// Scales `noise` so that its realized power sits exactly at P_signal / 10^(snr/10), then adds it.
inline void add_calibrated(std::vector<double>& x, std::vector<double>& noise, double target_snr_db) {
  const double ps = mean_power(x);
  require(ps > 0.0, "cannot inject noise into a zero-power signal (SNR undefined)");
  const double pn_target = ps / std::pow(10.0, target_snr_db / 10.0);
  const double pn = mean_power(noise);
  require(pn > 0.0, "generated noise has zero power");
  const double scale = std::sqrt(pn_target / pn);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += scale * noise[i];
}

}  // namespace detail

/// Additive zero-mean Gaussian noise calibrated to the target SNR on this realization.
inline std::vector<double> inject_noise(std::span<const double> x, double target_snr_db, std::uint64_t seed) {
  require(std::isfinite(target_snr_db), "target SNR must be finite");
  Rng rng = make_rng(seed, {0x401Eu});
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> out(x.begin(), x.end());
  std::vector<double> noise(x.size());
  for (auto& v : noise) v = nd(rng);
  detail::add_calibrated(out, noise, target_snr_db);
  return out;
}

inline RawSignal inject_noise(const RawSignal& signal, double target_snr_db, std::uint64_t seed) {
  signal.validate();
  RawSignal out = signal;
  out.samples = inject_noise(std::span<const double>(signal.samples), target_snr_db, seed);
  out.snr_db = target_snr_db;
  return out;
}

/// Inverter-style disturbance: 5th and 7th supply harmonics with random phase plus broadband
/// Gaussian noise, jointly calibrated to the target SNR. `harmonic_fraction` is the share of noise
/// power carried by the harmonics.
inline std::vector<double> inject_drive_noise(std::span<const double> x, double target_snr_db, std::uint64_t seed,
                                              double supply_freq_hz, double sample_rate_hz,
                                              double harmonic_fraction = 0.5) {
  require(harmonic_fraction >= 0.0 && harmonic_fraction <= 1.0, "harmonic_fraction must lie in [0, 1]");
  Rng rng = make_rng(seed, {0xD21Eu});
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> ph(0.0, 2.0 * std::numbers::pi);
  const double p5 = ph(rng), p7 = ph(rng);
  const double w5 = 2.0 * std::numbers::pi * 5.0 * supply_freq_hz / sample_rate_hz;
  const double w7 = 2.0 * std::numbers::pi * 7.0 * supply_freq_hz / sample_rate_hz;

  std::vector<double> harm(x.size()), gauss(x.size());
  for (std::size_t t = 0; t < x.size(); ++t) {
    const double tt = static_cast<double>(t);
    harm[t] = std::sin(w5 * tt + p5) + 0.7 * std::sin(w7 * tt + p7);
    gauss[t] = nd(rng);
  }
  const double ph_pow = mean_power(harm), pg_pow = mean_power(gauss);
  std::vector<double> noise(x.size());
  const double hs = ph_pow > 0.0 ? std::sqrt(harmonic_fraction / ph_pow) : 0.0;
  const double gs = pg_pow > 0.0 ? std::sqrt((1.0 - harmonic_fraction) / pg_pow) : 0.0;
  for (std::size_t t = 0; t < x.size(); ++t) noise[t] = hs * harm[t] + gs * gauss[t];

  std::vector<double> out(x.begin(), x.end());
  detail::add_calibrated(out, noise, target_snr_db);
  return out;
}

// ---------------------------------------------------------------------------
// Segmentation

inline std::size_t segment_count(std::size_t length, int n, std::size_t stride) {
  const auto window = static_cast<std::size_t>(n) * static_cast<std::size_t>(n);
  return length < window ? 0 : (length - window) / stride + 1;
}

/// Sliding windows of n*n samples at offsets 0, stride, 2*stride, ...
inline std::vector<SignalSegment> segment(const RawSignal& signal, int n, std::size_t stride) {
  require(n >= 2, "segment side length must be >= 2");
  require(stride >= 1, "segment stride must be >= 1");
  const auto window = static_cast<std::size_t>(n) * static_cast<std::size_t>(n);
  require(signal.samples.size() >= window, "signal shorter than one segment (" + std::to_string(signal.samples.size()) +
                                               " < " + std::to_string(window) + ")");
  const std::size_t count = segment_count(signal.samples.size(), n, stride);
  std::vector<SignalSegment> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    const auto first = signal.samples.begin() + static_cast<std::ptrdiff_t>(k * stride);
    out.push_back(SignalSegment{std::vector<double>(first, first + static_cast<std::ptrdiff_t>(window)), signal.label,
                                signal.op, signal.snr_db});
  }
  return out;
}

}  // namespace motormeta
