//! Active drift compensation: the fibre-stretcher phase lock driven by the
//! reference-detector count rate, and the three-axis polarization walker
//! driven by the summed signal rate.
//!
//! The stretcher controller locks the reference pulses onto the dark fringe
//! of APD2. It applies a triangle-wave probe (the dither) on top of its
//! base voltage, demodulates the per-window counts against the probe to
//! estimate the residual phase error, and corrects with a PI step once per
//! dither period. Large disturbances (a stretcher reset, a phase shock, a
//! cold start far from the fringe) are handled by a measure-and-jump
//! acquisition mode that inverts the fringe shape directly. While either
//! the acquisition runs or the controller has not yet seen two quiet
//! windows in a row, key sifting is gated off and photons are wasted.

use serde::{Deserialize, Serialize};

use crate::error::DomainError;
use crate::util::{cos_deg, sin_deg, wrap_deg};

/// Default calibrated dither amplitude: half the observed peak-to-peak
/// voltage oscillation of the locked loop.
pub const DEFAULT_DITHER_AMPLITUDE_V: f64 = 0.035;

/// One feedback observation, produced once per integration window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackSample {
    /// Reference-detector (APD2) count rate, counts/s.
    pub apd2_rate: f64,
    /// Summed signal-detector (APD0 + APD1) count rate, counts/s.
    pub signal_rate: f64,
    /// Length of the window the rates were measured over, s.
    pub window_s: f64,
}

/// Stretcher hardware and loop parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StretcherConfig {
    /// Lower drive-voltage limit, V.
    pub v_min: f64,
    /// Upper drive-voltage limit, V.
    pub v_max: f64,
    /// Phase compensation coefficient, degrees per volt.
    pub coeff_deg_per_volt: f64,
    /// Dither (probe) amplitude, V.
    pub dither_amplitude_v: f64,
    /// Feedback integration window, s. One controller step per window.
    pub integration_window_s: f64,
    /// Windows per dither period (even).
    pub dither_period_epochs: u32,
    /// Proportional gain on the demodulated phase error.
    pub gain_p: f64,
    /// Integral gain on the demodulated phase error.
    pub gain_i: f64,
    /// Residual-phase threshold above which sifting is suspended, degrees.
    pub sift_gate_deg: f64,
    /// Drive voltage at the start of the run, V.
    pub initial_voltage_v: f64,
}

impl Default for StretcherConfig {
    fn default() -> Self {
        Self {
            v_min: -5.0,
            v_max: 5.0,
            coeff_deg_per_volt: 294.0,
            dither_amplitude_v: DEFAULT_DITHER_AMPLITUDE_V,
            integration_window_s: 0.2,
            dither_period_epochs: 10,
            gain_p: 0.6,
            gain_i: 0.2,
            sift_gate_deg: 25.0,
            initial_voltage_v: 0.0,
        }
    }
}

impl StretcherConfig {
    /// Phase applied by the stretcher at drive voltage `v`, degrees.
    pub fn phase_from_voltage(&self, v: f64) -> f64 {
        self.coeff_deg_per_volt * v
    }
}

/// Expected reference-detector counts per integration window as a function
/// of residual phase: `counts(delta) = amplitude * (1 - visibility * cos
/// delta) + background`. Derived from the run configuration; stands in for
/// the receiver's bench calibration.
#[derive(Debug, Clone, Copy)]
pub struct FringeCalibration {
    pub amplitude: f64,
    pub background: f64,
    pub visibility: f64,
}

impl FringeCalibration {
    pub fn expected_counts(&self, residual_deg: f64) -> f64 {
        self.amplitude * (1.0 - self.visibility * cos_deg(residual_deg)) + self.background
    }

    /// Invert the fringe shape for the magnitude of the residual phase.
    fn invert_magnitude_deg(&self, counts: f64) -> f64 {
        let c = ((1.0 - (counts - self.background) / self.amplitude) / self.visibility)
            .clamp(-1.0, 1.0);
        c.acos().to_degrees()
    }
}

/// Output of one controller step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StretcherStep {
    /// Voltage to drive during the next window (base plus dither), V.
    pub applied_voltage_v: f64,
    /// A range reset happened on this step.
    pub reset: bool,
    /// Whether key sifting is enabled going into the next window.
    pub sifting: bool,
    /// Verdict on the window just measured: true iff it was tracked,
    /// quiet, preceded by a quiet window, and ended without a reset.
    /// Detections from rejected windows are wasted.
    pub accept_window: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Mode {
    Track,
    AcquireMeasure,
    AcquireVerify { prev_counts: f64, jump_deg: f64 },
}

/// Fibre-stretcher feedback controller.
///
/// Deterministic: the same state and sample sequence always produces the
/// same voltage trace.
#[derive(Debug, Clone)]
pub struct StretcherController {
    cfg: StretcherConfig,
    cal: FringeCalibration,
    /// Counts threshold corresponding to `sift_gate_deg`.
    counts_threshold: f64,
    v_base: f64,
    levels: Vec<f64>,
    /// Index of the dither level for the upcoming window.
    level_pos: usize,
    /// Dither level in effect during the window being measured, if any.
    level_in_effect: Option<f64>,
    demod: Vec<(f64, f64)>,
    integrator_deg: f64,
    mode: Mode,
    acquire_sign: f64,
    consecutive_quiet: u32,
    just_reset: bool,
    reset_count: u32,
}

/// Triangle dither pattern: `n` midpoint levels in [-1, 1], each visited
/// exactly once per period, so the probe sweeps the dither span uniformly.
fn triangle_levels(n: u32) -> Vec<f64> {
    let n = n.max(2) & !1; // even, >= 2
    let half = (n / 2) as i64;
    let step = 4.0 / n as f64;
    let mut v = Vec::with_capacity(n as usize);
    for j in 0..half {
        v.push(-1.0 + step / 4.0 + j as f64 * step);
    }
    for j in 0..half {
        v.push(1.0 - step / 4.0 - j as f64 * step);
    }
    v
}

impl StretcherController {
    pub fn new(cfg: StretcherConfig, cal: FringeCalibration) -> Self {
        let levels = triangle_levels(cfg.dither_period_epochs);
        let counts_threshold = cal.expected_counts(cfg.sift_gate_deg);
        Self {
            v_base: cfg.initial_voltage_v,
            levels,
            level_pos: 0,
            level_in_effect: None,
            demod: Vec::new(),
            integrator_deg: 0.0,
            mode: Mode::Track,
            acquire_sign: 1.0,
            // warm start: the session begins on an already-aligned system
            consecutive_quiet: 2,
            just_reset: false,
            reset_count: 0,
            counts_threshold,
            cal,
            cfg,
        }
    }

    pub fn config(&self) -> &StretcherConfig {
        &self.cfg
    }

    /// Dither-free voltage setpoint, V.
    pub fn base_voltage(&self) -> f64 {
        self.v_base
    }

    pub fn reset_count(&self) -> u32 {
        self.reset_count
    }

    /// Voltage for the first window of a run.
    pub fn initial_applied_voltage(&mut self) -> f64 {
        let level = self.levels[self.level_pos];
        self.level_pos = (self.level_pos + 1) % self.levels.len();
        self.level_in_effect = Some(level);
        self.v_base + level * self.cfg.dither_amplitude_v
    }

    fn demodulate_deg(&self) -> f64 {
        // Counts against sin(dither): the slope is amplitude * visibility *
        // sin(error). The level multiset is symmetric, so the even part of
        // the fringe does not contaminate the fit.
        let amp_deg = self.cfg.dither_amplitude_v * self.cfg.coeff_deg_per_volt;
        let mut sxx = 0.0;
        let mut sxy = 0.0;
        let mut sy = 0.0;
        let m = self.demod.len() as f64;
        for &(frac, counts) in &self.demod {
            let x = sin_deg(frac * amp_deg);
            sxx += x * x;
            sxy += x * counts;
            sy += counts;
        }
        let _ = sy / m;
        if sxx == 0.0 {
            return 0.0;
        }
        let slope = sxy / sxx;
        let s = (slope / (self.cal.amplitude * self.cal.visibility)).clamp(-1.0, 1.0);
        s.asin().to_degrees()
    }

    fn rail_margin(&self) -> f64 {
        self.cfg.dither_amplitude_v
    }

    /// Feed one integration-window observation and obtain the drive for the
    /// next window.
    pub fn step(&mut self, sample: &FeedbackSample) -> Result<StretcherStep, DomainError> {
        if !(sample.window_s > 0.0) {
            return Err(DomainError::new(
                "feedback sample has a zero-duration window",
            ));
        }
        if sample.window_s + 1e-12 < self.cfg.integration_window_s {
            return Err(DomainError::new(format!(
                "feedback window {} s shorter than the integration window {} s",
                sample.window_s, self.cfg.integration_window_s
            )));
        }
        let counts = sample.apd2_rate * sample.window_s;
        let grace = std::mem::take(&mut self.just_reset);
        let entry_track = self.mode == Mode::Track;
        let entry_quiet = self.consecutive_quiet;
        let quiet_now = counts <= self.counts_threshold;

        match self.mode {
            Mode::Track => {
                if counts > self.counts_threshold && !grace {
                    // lock lost (shock or cold start): stop sifting, re-acquire
                    self.mode = Mode::AcquireMeasure;
                    self.consecutive_quiet = 0;
                    self.demod.clear();
                    self.level_in_effect = None;
                } else {
                    if counts <= self.counts_threshold {
                        self.consecutive_quiet = self.consecutive_quiet.saturating_add(1);
                    } else {
                        self.consecutive_quiet = 0;
                    }
                    if let Some(level) = self.level_in_effect.take() {
                        self.demod.push((level, counts));
                    }
                    if self.demod.len() >= self.levels.len() {
                        let est = self.demodulate_deg();
                        self.integrator_deg += est;
                        if self.cfg.gain_i > 0.0 {
                            let cap = 30.0 / self.cfg.gain_i;
                            self.integrator_deg = self.integrator_deg.clamp(-cap, cap);
                        }
                        let correction =
                            self.cfg.gain_p * est + self.cfg.gain_i * self.integrator_deg;
                        self.v_base -= correction / self.cfg.coeff_deg_per_volt;
                        self.demod.clear();
                    }
                }
            }
            Mode::AcquireMeasure => {
                self.level_in_effect = None;
                if counts <= self.counts_threshold {
                    self.consecutive_quiet = self.consecutive_quiet.saturating_add(1);
                    if self.consecutive_quiet >= 2 {
                        self.mode = Mode::Track;
                        self.demod.clear();
                    }
                } else {
                    self.consecutive_quiet = 0;
                    let mag = self.cal.invert_magnitude_deg(counts);
                    let jump = -self.acquire_sign * mag;
                    self.v_base += jump / self.cfg.coeff_deg_per_volt;
                    self.mode = Mode::AcquireVerify {
                        prev_counts: counts,
                        jump_deg: jump,
                    };
                }
            }
            Mode::AcquireVerify {
                prev_counts,
                jump_deg,
            } => {
                self.level_in_effect = None;
                if counts < prev_counts {
                    self.mode = Mode::AcquireMeasure;
                } else {
                    // wrong direction: undo twice over and flip the guess
                    self.v_base -= 2.0 * jump_deg / self.cfg.coeff_deg_per_volt;
                    self.acquire_sign = -self.acquire_sign;
                    self.mode = Mode::AcquireMeasure;
                }
            }
        }

        // Range check: the next applied voltage (base plus dither span)
        // must stay inside [v_min, v_max]; otherwise reset to exactly 0 V.
        let mut reset = false;
        if self.v_base > self.cfg.v_max - self.rail_margin()
            || self.v_base < self.cfg.v_min + self.rail_margin()
        {
            let jump_deg = wrap_deg(self.cfg.phase_from_voltage(self.v_base));
            // pre-position the setpoint for the fringe nearest to 0 V
            self.v_base = -jump_deg / self.cfg.coeff_deg_per_volt;
            reset = true;
            self.reset_count += 1;
            self.just_reset = true;
            self.consecutive_quiet = 0;
            self.mode = Mode::Track;
            self.demod.clear();
            self.level_in_effect = None;
        }

        let applied = if reset {
            0.0
        } else if self.mode == Mode::Track {
            let level = self.levels[self.level_pos];
            self.level_pos = (self.level_pos + 1) % self.levels.len();
            self.level_in_effect = Some(level);
            self.v_base + level * self.cfg.dither_amplitude_v
        } else {
            self.v_base
        };

        let sifting = !reset && self.mode == Mode::Track && self.consecutive_quiet >= 2;
        let accept_window = entry_track && !grace && quiet_now && entry_quiet >= 1 && !reset;

        Ok(StretcherStep {
            applied_voltage_v: applied,
            reset,
            sifting,
            accept_window,
        })
    }
}

/// Error-rate contribution of a residual phase spread `delta_phi`
/// (degrees, peak to peak), assuming the residual sweeps the range
/// uniformly: the normalized mean of `(1 - cos phi)/2` over
/// `[-delta_phi/2, +delta_phi/2]`, which closes to
/// `1/2 - sin(delta_phi/2) / delta_phi`.
pub fn qber_phase(delta_phi_deg: f64) -> Result<f64, DomainError> {
    if !delta_phi_deg.is_finite() || delta_phi_deg < 0.0 {
        return Err(DomainError::new(format!(
            "delta_phi_deg must be finite and >= 0, got {delta_phi_deg}"
        )));
    }
    if delta_phi_deg == 0.0 {
        return Ok(0.0);
    }
    Ok(0.5 - sin_deg(delta_phi_deg / 2.0) / delta_phi_deg.to_radians())
}

/// Polarization-walker parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WalkerConfig {
    /// Perturbation applied to one axis per decision, radians.
    pub step_size: f64,
    /// Integration windows per walker decision.
    pub decision_epochs: u32,
}

impl Default for WalkerConfig {
    fn default() -> Self {
        Self {
            step_size: 0.02,
            decision_epochs: 5,
        }
    }
}

/// Coordinate-wise hill climb over the three controller axes.
///
/// Each decision window, one axis carries a trial perturbation of
/// `step_size`; the perturbation is kept iff the summed signal rate did
/// not decrease relative to the reference rate. The reference is the rate
/// measured at the last accepted position, relaxed toward the most recent
/// measurement after each rejection so the climb keeps working while the
/// channel drifts. Axes are cycled round-robin; the preferred direction
/// of an axis flips when a trial on it is rejected.
#[derive(Debug, Clone)]
pub struct PolarizationWalker {
    axes: [f64; 3],
    step_size: f64,
    best_rate: f64,
    cursor: usize,
    dirs: [f64; 3],
    pending: bool,
    initialized: bool,
}

impl PolarizationWalker {
    pub fn new(cfg: &WalkerConfig) -> Self {
        Self {
            axes: [0.0; 3],
            step_size: cfg.step_size,
            best_rate: 0.0,
            cursor: 0,
            dirs: [1.0; 3],
            pending: false,
            initialized: false,
        }
    }

    /// Committed axes (without any trial perturbation).
    pub fn axes(&self) -> [f64; 3] {
        self.axes
    }

    /// Axes to drive during the next decision window.
    pub fn trial_axes(&self) -> [f64; 3] {
        let mut t = self.axes;
        if self.pending {
            t[self.cursor] += self.dirs[self.cursor] * self.step_size;
        }
        t
    }

    /// Feed the rate measured over the window the current trial drove, and
    /// arm the next trial. Returns the axes for the next window.
    pub fn observe(&mut self, sample: &FeedbackSample) -> [f64; 3] {
        if !self.initialized {
            // first window is a pure baseline measurement
            self.best_rate = sample.signal_rate;
            self.initialized = true;
            self.pending = true;
            return self.trial_axes();
        }
        if self.pending {
            if sample.signal_rate >= self.best_rate {
                self.axes = self.trial_axes();
                self.best_rate = sample.signal_rate;
            } else {
                self.dirs[self.cursor] = -self.dirs[self.cursor];
                self.best_rate += 0.2 * (sample.signal_rate - self.best_rate);
            }
            self.cursor = (self.cursor + 1) % 3;
        }
        self.pending = true;
        self.trial_axes()
    }
}
