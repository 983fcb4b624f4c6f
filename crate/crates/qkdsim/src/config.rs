//! Run configuration: a single JSON document, schema-checked, with the
//! published operating points available as presets.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compensation::{StretcherConfig, WalkerConfig};
use crate::detectors::{ApdConfig, AFTERPULSE_PROB_1MHZ};
use crate::error::RunError;
use crate::physics::{ChannelConfig, InterferometerConfig};
use crate::protocol::SourceConfig;
use crate::transport::TransportSpec;

/// How the session's error rate is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    /// Compare both sifted keys directly (the simulator is omniscient).
    Characterize,
    /// Additionally sacrifice a fraction of kept bits in-protocol.
    ProtocolEstimate,
}

/// Sifting-channel parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiftingConfig {
    /// Block size of the error-rate series, bits.
    pub block_size_bits: usize,
    /// Detections per basis-reveal frame.
    pub reveal_batch: usize,
    /// Fraction of kept bits sacrificed for in-protocol estimation
    /// (protocol-estimate mode only).
    pub reveal_fraction: f64,
}

impl Default for SiftingConfig {
    fn default() -> Self {
        Self {
            block_size_bits: 5000,
            reveal_batch: 4096,
            reveal_fraction: 0.0,
        }
    }
}

impl Serialize for TransportSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.as_string())
    }
}

impl<'de> Deserialize<'de> for TransportSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        TransportSpec::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Full run description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub clock_hz: u64,
    pub duration_s: f64,
    pub seed: u64,
    pub transport: TransportSpec,
    pub mode: RunMode,
    pub source: SourceConfig,
    pub channel: ChannelConfig,
    pub interferometer: InterferometerConfig,
    pub apd0: ApdConfig,
    pub apd1: ApdConfig,
    pub apd2: ApdConfig,
    pub stretcher: StretcherConfig,
    pub walker: WalkerConfig,
    pub sifting: SiftingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::paper_250khz()
    }
}

impl RunConfig {
    /// The characterized operating point: 250 kHz clock, installed 20.3 km
    /// link, every published parameter at its measured value.
    pub fn paper_250khz() -> Self {
        Self {
            clock_hz: 250_000,
            duration_s: 120.0,
            seed: 1,
            transport: TransportSpec::Inproc,
            mode: RunMode::Characterize,
            source: SourceConfig::default(),
            channel: ChannelConfig::default(),
            interferometer: InterferometerConfig::default(),
            apd0: ApdConfig::signal_250khz(),
            apd1: ApdConfig::signal_250khz(),
            apd2: ApdConfig::reference_250khz(),
            stretcher: StretcherConfig::default(),
            walker: WalkerConfig::default(),
            sifting: SiftingConfig::default(),
        }
    }

    /// The 1 MHz operating point: same optics, afterpulse-limited detectors.
    pub fn paper_1mhz() -> Self {
        let mut cfg = Self::paper_250khz();
        cfg.clock_hz = 1_000_000;
        cfg.apd0.afterpulse_prob = AFTERPULSE_PROB_1MHZ;
        cfg.apd1.afterpulse_prob = AFTERPULSE_PROB_1MHZ;
        cfg.apd2.afterpulse_prob = AFTERPULSE_PROB_1MHZ;
        cfg
    }

    /// Every stochastic imperfection disabled: ideal visibility, no drift,
    /// no dark counts or afterpulsing, no dither. The sifted keys must then
    /// agree bit for bit.
    pub fn noise_free() -> Self {
        let mut cfg = Self::paper_250khz();
        cfg.interferometer.visibility = 1.0;
        cfg.channel.drift_rate_deg_per_s = 0.0;
        cfg.channel.drift_bias_deg_per_s = 0.0;
        cfg.channel.shock_rate_per_hour = 0.0;
        cfg.channel.pol_drift_rate_rad_per_s = 0.0;
        for apd in [&mut cfg.apd0, &mut cfg.apd1, &mut cfg.apd2] {
            apd.dark_prob_per_gate = 0.0;
            apd.afterpulse_prob = 0.0;
        }
        cfg.stretcher.dither_amplitude_v = 0.0;
        cfg
    }

    /// Accelerated-drift profile: a sustained thermal ramp with the
    /// stretcher starting near its rail, so a range reset happens within a
    /// two-minute run.
    pub fn accelerated_drift() -> Self {
        let mut cfg = Self::paper_250khz();
        cfg.channel.drift_bias_deg_per_s = -2.0;
        cfg.channel.shock_rate_per_hour = 0.0;
        cfg.stretcher.initial_voltage_v = 4.7;
        // start phase-locked at the initial voltage
        cfg.channel.initial_phase_offset_deg =
            -cfg.stretcher.coeff_deg_per_volt * cfg.stretcher.initial_voltage_v;
        cfg
    }

    pub fn from_json(s: &str) -> Result<Self, RunError> {
        serde_json::from_str(s).map_err(|e| RunError::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self, RunError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&raw)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// One failed invariant, with the path of the offending key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn check(v: &mut Vec<Violation>, ok: bool, path: &str, message: &str) {
    if !ok {
        v.push(Violation {
            path: path.to_string(),
            message: message.to_string(),
        });
    }
}

fn check_prob(v: &mut Vec<Violation>, x: f64, path: &str) {
    check(
        v,
        x.is_finite() && (0.0..=1.0).contains(&x),
        path,
        "must lie in [0, 1]",
    );
}

fn check_apd(v: &mut Vec<Violation>, apd: &ApdConfig, prefix: &str) {
    check_prob(v, apd.efficiency, &format!("{prefix}.efficiency"));
    check_prob(v, apd.dark_prob_per_gate, &format!("{prefix}.dark_prob_per_gate"));
    check_prob(v, apd.afterpulse_prob, &format!("{prefix}.afterpulse_prob"));
    check(
        v,
        apd.afterpulse_decay_gates > 0,
        &format!("{prefix}.afterpulse_decay_gates"),
        "must be a positive integer",
    );
}

/// Check every config invariant and report all violations.
pub fn validate(cfg: &RunConfig) -> Vec<Violation> {
    let mut v = Vec::new();

    check(&mut v, cfg.clock_hz > 0, "clock_hz", "must be positive");
    check(
        &mut v,
        cfg.duration_s.is_finite() && cfg.duration_s > 0.0,
        "duration_s",
        "must be positive",
    );

    let ch = &cfg.channel;
    check(
        &mut v,
        ch.length_km.is_finite() && ch.length_km >= 0.0,
        "channel.length_km",
        "must be finite and >= 0",
    );
    check(
        &mut v,
        ch.loss_db.is_finite() && ch.loss_db >= 0.0,
        "channel.loss_db",
        "must be finite and >= 0",
    );
    check(
        &mut v,
        ch.drift_rate_deg_per_s.is_finite() && ch.drift_rate_deg_per_s >= 0.0,
        "channel.drift_rate_deg_per_s",
        "must be finite and >= 0",
    );
    check(
        &mut v,
        ch.drift_bias_deg_per_s.is_finite(),
        "channel.drift_bias_deg_per_s",
        "must be finite",
    );
    check(
        &mut v,
        ch.shock_rate_per_hour.is_finite() && ch.shock_rate_per_hour >= 0.0,
        "channel.shock_rate_per_hour",
        "must be finite and >= 0",
    );
    check(
        &mut v,
        ch.shock_magnitude_deg.is_finite(),
        "channel.shock_magnitude_deg",
        "must be finite",
    );
    check(
        &mut v,
        ch.pol_drift_rate_rad_per_s.is_finite() && ch.pol_drift_rate_rad_per_s >= 0.0,
        "channel.pol_drift_rate_rad_per_s",
        "must be finite and >= 0",
    );
    check(
        &mut v,
        ch.initial_phase_offset_deg.is_finite(),
        "channel.initial_phase_offset_deg",
        "must be finite",
    );

    let optics = &cfg.interferometer;
    check_prob(&mut v, optics.visibility, "interferometer.visibility");
    check_prob(
        &mut v,
        optics.interfering_fraction,
        "interferometer.interfering_fraction",
    );
    check_prob(&mut v, optics.reference_split, "interferometer.reference_split");

    let src = &cfg.source;
    check(
        &mut v,
        src.signal_mean_photons.is_finite() && src.signal_mean_photons >= 0.0,
        "source.signal_mean_photons",
        "must be finite and >= 0",
    );
    check(
        &mut v,
        src.reference_mean_photons.is_finite() && src.reference_mean_photons >= 0.0,
        "source.reference_mean_photons",
        "must be finite and >= 0",
    );
    check(
        &mut v,
        src.delay_ns.is_finite() && src.delay_ns >= 0.0,
        "source.delay_ns",
        "must be finite and >= 0",
    );

    check_apd(&mut v, &cfg.apd0, "apd0");
    check_apd(&mut v, &cfg.apd1, "apd1");
    check_apd(&mut v, &cfg.apd2, "apd2");

    let st = &cfg.stretcher;
    check(
        &mut v,
        st.v_min.is_finite() && st.v_max.is_finite() && st.v_min < st.v_max,
        "stretcher.v_min",
        "requires v_min < v_max",
    );
    check(
        &mut v,
        st.coeff_deg_per_volt.is_finite() && st.coeff_deg_per_volt > 0.0,
        "stretcher.coeff_deg_per_volt",
        "must be positive",
    );
    check(
        &mut v,
        st.dither_amplitude_v.is_finite() && st.dither_amplitude_v >= 0.0,
        "stretcher.dither_amplitude_v",
        "must be finite and >= 0",
    );
    check(
        &mut v,
        st.integration_window_s.is_finite() && st.integration_window_s > 0.0,
        "stretcher.integration_window_s",
        "must be positive",
    );
    check(
        &mut v,
        st.dither_period_epochs >= 2 && st.dither_period_epochs % 2 == 0,
        "stretcher.dither_period_epochs",
        "must be an even integer >= 2",
    );
    check(
        &mut v,
        st.gain_p.is_finite() && st.gain_p >= 0.0,
        "stretcher.gain_p",
        "must be finite and >= 0",
    );
    check(
        &mut v,
        st.gain_i.is_finite() && st.gain_i >= 0.0,
        "stretcher.gain_i",
        "must be finite and >= 0",
    );
    check(
        &mut v,
        st.sift_gate_deg.is_finite() && st.sift_gate_deg > 0.0 && st.sift_gate_deg <= 180.0,
        "stretcher.sift_gate_deg",
        "must lie in (0, 180]",
    );
    check(
        &mut v,
        st.initial_voltage_v.is_finite()
            && st.initial_voltage_v >= st.v_min
            && st.initial_voltage_v <= st.v_max,
        "stretcher.initial_voltage_v",
        "must lie within [v_min, v_max]",
    );

    check(
        &mut v,
        cfg.walker.step_size.is_finite() && cfg.walker.step_size > 0.0,
        "walker.step_size",
        "must be positive",
    );
    check(
        &mut v,
        cfg.walker.decision_epochs > 0,
        "walker.decision_epochs",
        "must be a positive integer",
    );

    let sf = &cfg.sifting;
    check(
        &mut v,
        sf.block_size_bits > 0,
        "sifting.block_size_bits",
        "must be positive",
    );
    check(
        &mut v,
        sf.reveal_batch > 0,
        "sifting.reveal_batch",
        "must be positive",
    );
    check(
        &mut v,
        sf.reveal_fraction.is_finite() && (0.0..1.0).contains(&sf.reveal_fraction),
        "sifting.reveal_fraction",
        "must lie in [0, 1)",
    );

    // the event loop quantizes time into integration windows
    let gates_per_epoch = cfg.clock_hz as f64 * cfg.stretcher.integration_window_s;
    check(
        &mut v,
        gates_per_epoch >= 1.0,
        "stretcher.integration_window_s",
        "must span at least one clock cycle",
    );

    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_clean() {
        for cfg in [
            RunConfig::paper_250khz(),
            RunConfig::paper_1mhz(),
            RunConfig::noise_free(),
            RunConfig::accelerated_drift(),
        ] {
            let violations = validate(&cfg);
            assert!(violations.is_empty(), "violations: {violations:?}");
        }
    }

    #[test]
    fn out_of_range_visibility_is_reported_with_its_path() {
        let mut cfg = RunConfig::default();
        cfg.interferometer.visibility = 1.2;
        let violations = validate(&cfg);
        assert!(violations.iter().any(|v| v.path == "interferometer.visibility"));
    }

    #[test]
    fn negative_loss_is_reported_with_its_path() {
        let mut cfg = RunConfig::default();
        cfg.channel.loss_db = -1.0;
        let violations = validate(&cfg);
        assert!(violations.iter().any(|v| v.path == "channel.loss_db"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut json = serde_json::to_value(RunConfig::default()).unwrap();
        json.as_object_mut()
            .unwrap()
            .insert("bogus_key".into(), 1.into());
        let err = RunConfig::from_json(&json.to_string()).unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = RunConfig::paper_1mhz();
        let back = RunConfig::from_json(&cfg.to_json_pretty()).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), serde_json::to_string(&cfg).unwrap());
    }

    #[test]
    fn transport_spec_round_trips() {
        let cfg_json = RunConfig {
            transport: TransportSpec::Tcp("127.0.0.1:9000".into()),
            ..RunConfig::default()
        }
        .to_json_pretty();
        assert!(cfg_json.contains("\"tcp:127.0.0.1:9000\""));
        let back = RunConfig::from_json(&cfg_json).unwrap();
        assert_eq!(back.transport, TransportSpec::Tcp("127.0.0.1:9000".into()));

        let bad = cfg_json.replace("tcp:127.0.0.1:9000", "carrier-pigeon");
        assert!(RunConfig::from_json(&bad).is_err());
    }
}
