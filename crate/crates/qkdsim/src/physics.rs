//! Optical channel model: attenuation, phase drift, polarization drift and
//! the interference of the double asymmetric Mach-Zehnder pair.
//!
//! The fibre phase offset is a Wiener-like random walk whose mean absolute
//! increment per unit time equals the configured drift rate, with an
//! optional deterministic ramp (sustained thermal drift) and a Poisson
//! shock process for abrupt jumps. The offset is deliberately *not*
//! wrapped: the compensator has a finite range, so absolute accumulation
//! matters.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::DomainError;
use crate::util::cos_deg;

/// Fibre link parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    /// Installed fibre length, km (bookkeeping only; loss is given directly).
    pub length_km: f64,
    /// End-to-end transmission loss, dB.
    pub loss_db: f64,
    /// Mean absolute phase drift rate, degrees per second.
    pub drift_rate_deg_per_s: f64,
    /// Deterministic phase ramp, degrees per second. Zero for a stationary
    /// link; the accelerated test profile uses it to emulate a sustained
    /// thermal drift that exercises the compensator range.
    pub drift_bias_deg_per_s: f64,
    /// Rate of abrupt phase-jump events, per hour.
    pub shock_rate_per_hour: f64,
    /// Magnitude of one shock, degrees (sign is random).
    pub shock_magnitude_deg: f64,
    /// Polarization rotation rate on the Poincare sphere, radians per second.
    pub pol_drift_rate_rad_per_s: f64,
    /// Phase offset at the start of the run, degrees.
    pub initial_phase_offset_deg: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            length_km: 20.3,
            loss_db: 5.3,
            drift_rate_deg_per_s: 0.18,
            drift_bias_deg_per_s: 0.0,
            shock_rate_per_hour: 1.0,
            shock_magnitude_deg: 90.0,
            // one full Poincare revolution per 30 minutes
            pol_drift_rate_rad_per_s: std::f64::consts::TAU / 1800.0,
            initial_phase_offset_deg: 0.0,
        }
    }
}

/// Instantaneous channel state.
///
/// `pol_rotation` is a rotation vector (axis times angle, radians) on the
/// Poincare sphere; `pol_axis` is the slowly wandering direction along
/// which the rotation currently grows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftState {
    /// Accumulated interferometer phase offset, degrees (unwrapped).
    pub phase_offset_deg: f64,
    /// Polarization rotation vector, radians.
    pub pol_rotation: [f64; 3],
    /// Current drift direction of the polarization rotation (unit vector).
    pub pol_axis: [f64; 3],
}

impl DriftState {
    pub fn new(initial_phase_offset_deg: f64) -> Self {
        Self {
            phase_offset_deg: initial_phase_offset_deg,
            pol_rotation: [0.0; 3],
            pol_axis: [0.0, 0.0, 1.0],
        }
    }
}

/// Interferometer quality parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterferometerConfig {
    /// Classical fringe visibility, in [0, 1].
    pub visibility: f64,
    /// Fraction of photons arriving in the central, interfering time bin.
    pub interfering_fraction: f64,
    /// Fraction of the receiver input tapped off to the reference detector.
    pub reference_split: f64,
}

impl Default for InterferometerConfig {
    fn default() -> Self {
        Self {
            visibility: 0.9912,
            interfering_fraction: 0.5,
            reference_split: 0.18,
        }
    }
}

/// Power transmittance of a link with the given loss in dB.
pub fn transmittance(loss_db: f64) -> Result<f64, DomainError> {
    if !loss_db.is_finite() || loss_db < 0.0 {
        return Err(DomainError::new(format!(
            "loss_db must be finite and >= 0, got {loss_db}"
        )));
    }
    Ok(10f64.powf(-loss_db / 10.0))
}

/// Output-port probabilities of the interferometer for a residual phase
/// `delta` (degrees) and fringe visibility `v`.
///
/// Port 0 is the constructive port: `p0 = (1 + v cos delta) / 2`. The two
/// probabilities sum to exactly 1.
pub fn interference_probabilities(
    residual_phase_deg: f64,
    visibility: f64,
) -> Result<(f64, f64), DomainError> {
    if !(0.0..=1.0).contains(&visibility) {
        return Err(DomainError::new(format!(
            "visibility must lie in [0, 1], got {visibility}"
        )));
    }
    let p0 = (1.0 + visibility * cos_deg(residual_phase_deg)) / 2.0;
    Ok((p0, 1.0 - p0))
}

fn randn3(rng: &mut impl Rng) -> [f64; 3] {
    [
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    ]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n == 0.0 {
        [0.0, 0.0, 1.0]
    } else {
        [v[0] / n, v[1] / n, v[2] / n]
    }
}

impl ChannelConfig {
    /// Advance the drift state by `dt` seconds.
    ///
    /// The phase step is normal with std `rate * dt * sqrt(pi/2)`, chosen so
    /// that the mean absolute increment per step equals `rate * dt`; the
    /// long-run average of `|delta phi| / dt` therefore converges to the
    /// configured drift rate. A shock of random sign fires with probability
    /// `shock_rate_per_hour * dt / 3600`.
    pub fn advance_drift(
        &self,
        state: &DriftState,
        dt: f64,
        rng: &mut impl Rng,
    ) -> DriftState {
        if dt <= 0.0 {
            return state.clone();
        }
        let mut next = state.clone();

        let step_std = self.drift_rate_deg_per_s * dt * (std::f64::consts::PI / 2.0).sqrt();
        if step_std > 0.0 {
            let z: f64 = rng.sample(StandardNormal);
            next.phase_offset_deg += step_std * z;
        }
        next.phase_offset_deg += self.drift_bias_deg_per_s * dt;

        let p_shock = (self.shock_rate_per_hour * dt / 3600.0).min(1.0);
        if p_shock > 0.0 && rng.gen::<f64>() < p_shock {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            next.phase_offset_deg += sign * self.shock_magnitude_deg;
        }

        if self.pol_drift_rate_rad_per_s > 0.0 {
            // axis performs a slow random wander on the unit sphere
            let kick = randn3(rng);
            let eta = 0.2 * dt.sqrt();
            let axis = normalize([
                next.pol_axis[0] + eta * kick[0],
                next.pol_axis[1] + eta * kick[1],
                next.pol_axis[2] + eta * kick[2],
            ]);
            let step = self.pol_drift_rate_rad_per_s * dt;
            for i in 0..3 {
                next.pol_rotation[i] += step * axis[i];
            }
            next.pol_axis = axis;
        }

        next
    }
}

/// Intensity coupling after the polarization controller, in [0, 1].
///
/// The net mismatch is the vector sum of the channel rotation and the
/// controller's correction; perfect compensation (`axes = -pol_rotation`)
/// gives 1, an orthogonal state (mismatch angle pi) gives 0.
pub fn polarization_coupling(state: &DriftState, controller_axes: [f64; 3]) -> f64 {
    let m = [
        state.pol_rotation[0] + controller_axes[0],
        state.pol_rotation[1] + controller_axes[1],
        state.pol_rotation[2] + controller_axes[2],
    ];
    let theta = (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt();
    let c = (theta / 2.0).cos();
    c * c
}
