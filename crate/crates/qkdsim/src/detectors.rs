//! Gated InGaAs avalanche photodiode click model.
//!
//! A gate can click because a photon was absorbed, because of a dark count,
//! or because a previous avalanche left trapped carriers (afterpulsing).
//! The per-gate click probability is
//! `1 - (1 - p_photon)(1 - p_dark)(1 - p_after)` with
//! `p_photon = 1 - exp(-mu * efficiency)`. Any click re-arms the afterpulse
//! state; while armed, the afterpulse probability starts at
//! `afterpulse_prob` on the next gate and halves every gate until the decay
//! window runs out.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::DomainError;

/// Static APD parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApdConfig {
    /// Overall detection efficiency, in [0, 1].
    pub efficiency: f64,
    /// Dark-count probability per gate, in [0, 1].
    pub dark_prob_per_gate: f64,
    /// Afterpulse probability on the first gate after an avalanche, in [0, 1].
    pub afterpulse_prob: f64,
    /// Number of gates over which the afterpulse probability decays to zero.
    pub afterpulse_decay_gates: u32,
}

impl ApdConfig {
    /// Signal-detector defaults for the 250 kHz operating point.
    pub fn signal_250khz() -> Self {
        Self {
            efficiency: 0.11,
            dark_prob_per_gate: 1e-6,
            afterpulse_prob: AFTERPULSE_PROB_250KHZ,
            afterpulse_decay_gates: 12,
        }
    }

    /// Reference-detector defaults (thermoelectrically cooled, noisier).
    pub fn reference_250khz() -> Self {
        Self {
            efficiency: 0.10,
            dark_prob_per_gate: 2e-5,
            afterpulse_prob: AFTERPULSE_PROB_250KHZ,
            afterpulse_decay_gates: 12,
        }
    }
}

/// Calibrated afterpulse probability at a 250 kHz gate rate. Together with
/// the dark counts this puts the detector share of the error rate at about
/// 0.15% of the sifted key.
pub const AFTERPULSE_PROB_250KHZ: f64 = 0.0012;

/// Calibrated afterpulse probability at 1 MHz: carriers trapped by an
/// avalanche see four times as many gates before they detrap, which raises
/// the per-gate afterpulse probability enough to push the error rate to
/// the observed ~1.8%.
pub const AFTERPULSE_PROB_1MHZ: f64 = 0.0105;

/// Detector identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DetectorId {
    Apd0,
    Apd1,
    Apd2,
}

/// Why a gate clicked. Diagnostics only: the receiver's protocol layer
/// never sees this.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClickCause {
    Photon,
    Dark,
    Afterpulse,
}

/// One recorded click.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectionEvent {
    pub clock_index: u64,
    pub detector: DetectorId,
    pub cause: ClickCause,
}

/// A gated APD with afterpulse memory.
#[derive(Debug, Clone)]
pub struct Apd {
    config: ApdConfig,
    /// Gates elapsed since the last avalanche, if within the decay window.
    armed_age: Option<u32>,
}

impl Apd {
    pub fn new(config: ApdConfig) -> Self {
        Self {
            config,
            armed_age: None,
        }
    }

    pub fn config(&self) -> &ApdConfig {
        &self.config
    }

    fn afterpulse_prob_now(&self) -> f64 {
        match self.armed_age {
            Some(age) if age < self.config.afterpulse_decay_gates => {
                self.config.afterpulse_prob * 0.5f64.powi(age as i32)
            }
            _ => 0.0,
        }
    }

    /// Probability that the next gate clicks for a pulse of `mean_photons`.
    pub fn click_probability(&self, mean_photons: f64) -> Result<f64, DomainError> {
        if !mean_photons.is_finite() || mean_photons < 0.0 {
            return Err(DomainError::new(format!(
                "mean_photons must be finite and >= 0, got {mean_photons}"
            )));
        }
        let p_photon = 1.0 - (-mean_photons * self.config.efficiency).exp();
        let p_dark = self.config.dark_prob_per_gate;
        let p_after = self.afterpulse_prob_now();
        Ok(1.0 - (1.0 - p_photon) * (1.0 - p_dark) * (1.0 - p_after))
    }

    /// Run one gate. Returns the click cause, or `None` for an empty gate.
    ///
    /// Cause attribution follows the avalanche hierarchy: a photon-seeded
    /// avalanche masks dark counts, which mask afterpulses.
    pub fn gate(
        &mut self,
        mean_photons: f64,
        rng: &mut impl Rng,
    ) -> Result<Option<ClickCause>, DomainError> {
        if !mean_photons.is_finite() || mean_photons < 0.0 {
            return Err(DomainError::new(format!(
                "mean_photons must be finite and >= 0, got {mean_photons}"
            )));
        }
        let p_photon = 1.0 - (-mean_photons * self.config.efficiency).exp();
        let p_dark = self.config.dark_prob_per_gate;
        let p_after = self.afterpulse_prob_now();

        // One uniform draw decides the gate; the cumulative segments give
        // exactly the composed click probability.
        let u: f64 = rng.gen();
        let c1 = p_photon;
        let c2 = c1 + (1.0 - p_photon) * p_dark;
        let c3 = c2 + (1.0 - p_photon) * (1.0 - p_dark) * p_after;

        let cause = if u < c1 {
            Some(ClickCause::Photon)
        } else if u < c2 {
            Some(ClickCause::Dark)
        } else if u < c3 {
            Some(ClickCause::Afterpulse)
        } else {
            None
        };

        match cause {
            Some(_) => self.armed_age = Some(0),
            None => {
                if let Some(age) = self.armed_age.as_mut() {
                    *age += 1;
                    if *age >= self.config.afterpulse_decay_gates {
                        self.armed_age = None;
                    }
                }
            }
        }
        Ok(cause)
    }

    /// Clear the afterpulse memory. Subsequent gates see `p_after = 0`
    /// until the next click. Idempotent.
    pub fn reset_afterpulse_state(&mut self) {
        self.armed_age = None;
    }

    #[cfg(test)]
    fn force_click(&mut self) {
        self.armed_age = Some(0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};

    fn quiet_apd(dark: f64, ap: f64) -> Apd {
        Apd::new(ApdConfig {
            efficiency: 0.11,
            dark_prob_per_gate: dark,
            afterpulse_prob: ap,
            afterpulse_decay_gates: 10,
        })
    }

    #[test]
    fn dark_only_probability() {
        let apd = quiet_apd(1e-6, 0.0);
        let p = apd.click_probability(0.0).unwrap();
        assert!((p - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn saturates_at_one() {
        let apd = quiet_apd(1e-6, 0.0);
        let p = apd.click_probability(1e9).unwrap();
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn poisson_photon_term() {
        let apd = quiet_apd(0.0, 0.0);
        let p = apd.click_probability(0.2).unwrap();
        let expect = 1.0 - (-0.2f64 * 0.11).exp(); // 0.02176
        assert!((p - expect).abs() < 1e-15);
        assert!((p - 0.02176).abs() < 5e-6);
    }

    #[test]
    fn rejects_negative_mean_photons() {
        let mut apd = quiet_apd(0.0, 0.0);
        assert!(apd.click_probability(-1.0).is_err());
        let mut rng = substream(1, Stream::Apd0);
        assert!(apd.gate(-1.0, &mut rng).is_err());
    }

    #[test]
    fn armed_state_exposes_afterpulse_and_decays() {
        let mut apd = quiet_apd(0.0, 0.04);
        apd.force_click();
        // next gate sees the full afterpulse probability
        assert!((apd.click_probability(0.0).unwrap() - 0.04).abs() < 1e-15);
        let mut rng = substream(2, Stream::Apd0);
        // march one empty gate (seed chosen: p=0.04 draw may click; use
        // probability accessors instead of relying on the sample)
        let mut misses = 0;
        while apd.click_probability(0.0).unwrap() > 0.0 {
            let before = apd.click_probability(0.0).unwrap();
            let clicked = apd.gate(0.0, &mut rng).unwrap();
            if clicked.is_none() {
                misses += 1;
                let after = apd.click_probability(0.0).unwrap();
                assert!(after == 0.0 || (after - before / 2.0).abs() < 1e-15);
            }
            if misses > 100 {
                break;
            }
        }
        assert_eq!(apd.click_probability(0.0).unwrap(), 0.0);
    }

    #[test]
    fn reset_clears_and_is_idempotent() {
        let mut apd = quiet_apd(0.0, 0.3);
        apd.force_click();
        assert!(apd.click_probability(0.0).unwrap() > 0.0);
        apd.reset_afterpulse_state();
        assert_eq!(apd.click_probability(0.0).unwrap(), 0.0);
        apd.reset_afterpulse_state();
        assert_eq!(apd.click_probability(0.0).unwrap(), 0.0);
    }

    #[test]
    fn click_probability_is_monotone() {
        let apd = quiet_apd(0.0, 0.0);
        let mut last = 0.0;
        for i in 0..50 {
            let p = apd.click_probability(i as f64 * 0.1).unwrap();
            assert!(p >= last);
            last = p;
        }
        let dim = quiet_apd(1e-6, 0.0);
        let bright = quiet_apd(1e-3, 0.0);
        assert!(bright.click_probability(0.1).unwrap() > dim.click_probability(0.1).unwrap());
        let mut armed = quiet_apd(1e-6, 0.05);
        armed.force_click();
        assert!(
            armed.click_probability(0.1).unwrap() > dim.click_probability(0.1).unwrap()
        );
    }

    #[test]
    fn noiseless_detector_never_clicks_on_empty_gates() {
        let mut apd = quiet_apd(0.0, 0.0);
        let mut rng = substream(3, Stream::Apd0);
        for _ in 0..1_000_000 {
            assert_eq!(apd.gate(0.0, &mut rng).unwrap(), None);
        }
    }

    #[test]
    fn empirical_dark_rate_matches_config() {
        let mut apd = quiet_apd(1e-6, 0.0);
        let mut rng = substream(4, Stream::Apd0);
        let gates = 10_000_000u64;
        let mut clicks = 0u64;
        for _ in 0..gates {
            if apd.gate(0.0, &mut rng).unwrap().is_some() {
                clicks += 1;
            }
        }
        let expect = gates as f64 * 1e-6;
        let sigma = expect.sqrt(); // binomial, p tiny
        assert!(
            (clicks as f64 - expect).abs() <= 3.0 * sigma,
            "dark clicks {clicks} vs {expect} +- {sigma:.1}"
        );
    }

    /// Afterpulse yield oracle: per real click, the expected number of
    /// afterpulse-tagged clicks is the geometric sum
    /// `ap * (2 - 2^(1-D))` to first order in `ap`.
    #[test]
    fn afterpulse_yield_matches_geometric_sum() {
        let ap = 0.005;
        let decay = 10u32;
        let mut apd = Apd::new(ApdConfig {
            efficiency: 1.0,
            dark_prob_per_gate: 0.0,
            afterpulse_prob: ap,
            afterpulse_decay_gates: decay,
        });
        let mut rng = substream(5, Stream::Apd0);
        let trials = 1_000_000u32;
        let mut afterpulses = 0u64;
        for _ in 0..trials {
            let c = apd.gate(1e9, &mut rng).unwrap();
            assert_eq!(c, Some(ClickCause::Photon));
            // drain the decay window (plus slack for re-arming chains)
            for _ in 0..(decay + 20) {
                if apd.gate(0.0, &mut rng).unwrap() == Some(ClickCause::Afterpulse) {
                    afterpulses += 1;
                }
            }
            apd.reset_afterpulse_state();
        }
        let per_click = afterpulses as f64 / trials as f64;
        let geometric = ap * (2.0 - 0.5f64.powi(decay as i32 - 1));
        assert!(
            (per_click - geometric).abs() / geometric < 0.05,
            "yield {per_click:.6} vs geometric sum {geometric:.6}"
        );
    }
}
