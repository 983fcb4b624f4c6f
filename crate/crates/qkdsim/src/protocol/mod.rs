//! BB84 phase encoding, pulse-pair preparation and the receiver-side
//! measurement, plus the framed classical sifting channel (`frames`,
//! `session`).

pub mod frames;
pub mod session;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detectors::{Apd, ClickCause};
use crate::error::DomainError;
use crate::physics::{interference_probabilities, InterferometerConfig};
use crate::rng::Stream;

/// Preparation/measurement basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Basis {
    Z,
    X,
}

impl Basis {
    pub fn as_byte(self) -> u8 {
        match self {
            Basis::Z => 0,
            Basis::X => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Basis::Z),
            1 => Some(Basis::X),
            _ => None,
        }
    }

    /// Phase applied by the receiver's modulator for this measurement basis.
    pub fn modulator_phase_deg(self) -> f64 {
        match self {
            Basis::Z => 0.0,
            Basis::X => 90.0,
        }
    }
}

/// Phase applied by the sender's modulator for `(basis, bit)`:
/// Z encodes {0, 180} degrees, X encodes {90, 270}.
pub fn encode_phase(basis: Basis, bit: u8) -> f64 {
    match (basis, bit & 1) {
        (Basis::Z, 0) => 0.0,
        (Basis::Z, _) => 180.0,
        (Basis::X, 0) => 90.0,
        (Basis::X, _) => 270.0,
    }
}

/// Inverse of [`encode_phase`] for the four valid phases.
pub fn decode_phase(phase_deg: f64) -> Option<(Basis, u8)> {
    match phase_deg as i64 {
        0 => Some((Basis::Z, 0)),
        180 => Some((Basis::Z, 1)),
        90 => Some((Basis::X, 0)),
        270 => Some((Basis::X, 1)),
        _ => None,
    }
}

/// One prepared qubit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QubitPrep {
    pub clock_index: u64,
    pub basis: Basis,
    pub bit: u8,
    pub phase_deg: i16,
}

/// Laser-pulse parameters of the source.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    /// Mean photon number of the (early) signal pulse.
    pub signal_mean_photons: f64,
    /// Mean photon number of the (late) reference pulse.
    pub reference_mean_photons: f64,
    /// Delay between the two pulses, ns.
    pub delay_ns: f64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            signal_mean_photons: 0.2,
            reference_mean_photons: 4.8,
            delay_ns: 40.0,
        }
    }
}

/// One clock cycle's signal + reference pulse pair. The reference pulse is
/// never phase-modulated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulsePair {
    pub clock_index: u64,
    pub signal_mean_photons: f64,
    pub reference_mean_photons: f64,
    pub delay_ns: f64,
    pub alice_phase_deg: f64,
}

/// The sender's random choices, derivable for any clock index.
///
/// One 32-bit word of the dedicated ChaCha stream is consumed per clock
/// cycle, so the preparation at index `i` can be regenerated at random --
/// this is how the sender's protocol task answers basis queries without
/// shipping her whole modulation record around.
#[derive(Debug, Clone)]
pub struct AliceSource {
    rng: ChaCha8Rng,
    next_pos: u64,
}

impl AliceSource {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(Stream::AlicePrep as u64);
        Self { rng, next_pos: 0 }
    }

    /// Basis and bit prepared at `clock_index`.
    pub fn prep_at(&mut self, clock_index: u64) -> QubitPrep {
        if self.next_pos != clock_index {
            self.rng.set_word_pos(clock_index as u128);
        }
        let w = self.rng.next_u32();
        self.next_pos = clock_index + 1;
        let basis = if w & 1 == 0 { Basis::Z } else { Basis::X };
        let bit = ((w >> 1) & 1) as u8;
        QubitPrep {
            clock_index,
            basis,
            bit,
            phase_deg: encode_phase(basis, bit) as i16,
        }
    }
}

/// Emit the pulse pair for one clock cycle: uniform i.i.d. basis and bit,
/// signal pulse modulated with the encoded phase.
pub fn alice_emit(
    source: &mut AliceSource,
    clock_index: u64,
    cfg: &SourceConfig,
) -> (QubitPrep, PulsePair) {
    let prep = source.prep_at(clock_index);
    let pair = PulsePair {
        clock_index,
        signal_mean_photons: cfg.signal_mean_photons,
        reference_mean_photons: cfg.reference_mean_photons,
        delay_ns: cfg.delay_ns,
        alice_phase_deg: prep.phase_deg as f64,
    };
    (prep, pair)
}

/// Result of gating both signal detectors on one pulse.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasureOutcome {
    NoClick,
    /// Exactly one detector fired; `bit` is 0 for APD0, 1 for APD1.
    Single { bit: u8, cause: ClickCause },
    /// Both detectors fired; the event is discarded by the protocol.
    Double,
}

/// Interfere the signal pulse in the receiver's interferometer and gate
/// both signal detectors.
///
/// `mean_photons_at_input` is the signal intensity arriving at the
/// receiver (already attenuated by the channel and polarization coupling);
/// the interfering time-bin fraction and the port split are applied here.
#[allow(clippy::too_many_arguments)]
pub fn bob_measure(
    prep_phase_deg: f64,
    bob_basis: Basis,
    residual_phase_deg: f64,
    mean_photons_at_input: f64,
    optics: &InterferometerConfig,
    apd0: &mut Apd,
    apd1: &mut Apd,
    rng0: &mut ChaCha8Rng,
    rng1: &mut ChaCha8Rng,
) -> Result<MeasureOutcome, DomainError> {
    let delta = prep_phase_deg - bob_basis.modulator_phase_deg() + residual_phase_deg;
    let (p0, p1) = interference_probabilities(delta, optics.visibility)?;
    let mu = mean_photons_at_input * optics.interfering_fraction;
    let c0 = apd0.gate(mu * p0, rng0)?;
    let c1 = apd1.gate(mu * p1, rng1)?;
    Ok(match (c0, c1) {
        (Some(cause), None) => MeasureOutcome::Single { bit: 0, cause },
        (None, Some(cause)) => MeasureOutcome::Single { bit: 1, cause },
        (Some(_), Some(_)) => MeasureOutcome::Double,
        (None, None) => MeasureOutcome::NoClick,
    })
}
