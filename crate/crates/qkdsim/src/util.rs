//! Degree-based trigonometry and small numeric helpers.
//!
//! Phases are carried in degrees everywhere; conversion to radians happens
//! only inside these wrappers. Angles are reduced modulo 360 in degrees
//! *before* conversion so that multiples of 360 evaluate exactly.

/// Sine of an angle given in degrees.
pub fn sin_deg(deg: f64) -> f64 {
    deg.rem_euclid(360.0).to_radians().sin()
}

/// Cosine of an angle given in degrees.
pub fn cos_deg(deg: f64) -> f64 {
    deg.rem_euclid(360.0).to_radians().cos()
}

/// Wrap an angle to the interval (-180, 180].
pub fn wrap_deg(deg: f64) -> f64 {
    let r = deg.rem_euclid(360.0);
    if r > 180.0 {
        r - 360.0
    } else {
        r
    }
}

/// Linear-interpolated percentile of a sample, `q` in [0, 1].
///
/// Returns `None` on an empty slice.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite sample"));
    let q = q.clamp(0.0, 1.0);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        Some(sorted[lo])
    } else {
        let frac = pos - lo as f64;
        Some(sorted[lo] * (1.0 - frac) + sorted[hi] * frac)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_at_cardinal_angles() {
        assert_eq!(sin_deg(0.0), 0.0);
        assert_eq!(sin_deg(360.0), 0.0);
        assert_eq!(sin_deg(720.0), 0.0);
        assert_eq!(sin_deg(-360.0), 0.0);
        assert_eq!(cos_deg(180.0), -1.0);
        assert!((cos_deg(90.0)).abs() < 1e-15);
    }

    #[test]
    fn wrap_into_half_open_interval() {
        assert_eq!(wrap_deg(0.0), 0.0);
        assert_eq!(wrap_deg(180.0), 180.0);
        assert_eq!(wrap_deg(181.0), -179.0);
        assert_eq!(wrap_deg(360.0), 0.0);
        assert_eq!(wrap_deg(-190.0), 170.0);
        assert!((wrap_deg(1470.0) - 30.0).abs() < 1e-9);
    }

    #[test]
    fn percentile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 0.0), Some(1.0));
        assert_eq!(percentile(&v, 1.0), Some(5.0));
        assert_eq!(percentile(&v, 0.5), Some(3.0));
        assert_eq!(percentile(&v, 0.25), Some(2.0));
        assert_eq!(percentile(&[], 0.5), None);
    }
}
