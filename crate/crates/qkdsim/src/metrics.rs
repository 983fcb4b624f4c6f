//! Figures of merit and file exports: per-block error-rate series and
//! histogram, duty cycle, bit rate, voltage traces, and the error-budget
//! decomposition.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compensation::qber_phase;
use crate::config::RunConfig;
use crate::detectors::ClickCause;
use crate::error::{DomainError, RunError};
use crate::util::percentile;

/// Error-rate statistics over one block of sifted key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockStats {
    pub block_index: usize,
    pub block_size_bits: usize,
    pub errors: usize,
    pub qber: f64,
    /// Trailing block shorter than the nominal block size.
    pub is_partial: bool,
}

/// Fixed-width error-rate histogram: 0.1% bins over [0, 3%] plus an
/// overflow bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QberHistogram {
    pub bin_width: f64,
    pub upper: f64,
    /// 30 in-range bins followed by one overflow bin.
    pub counts: Vec<u32>,
}

/// Decomposition of the mean error rate into its modeled causes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBudget {
    /// Interferometer imperfection: (1 - visibility)/2.
    pub optics: f64,
    /// Phase mis-compensation, from the residual spread.
    pub phase: f64,
    /// Erroneous detector counts (dark and afterpulse).
    pub detector: f64,
}

/// Headline results of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub sifted_bits: u64,
    /// Signal-detector clicks (double clicks discarded).
    pub photons_received: u64,
    pub mean_qber: f64,
    pub duty_cycle: f64,
    pub sifted_rate_bps: f64,
    pub reset_count: u32,
    pub qber_histogram: QberHistogram,
    pub error_budget: ErrorBudget,
    /// In-protocol estimate from sacrificed bits, when sampling is enabled.
    pub estimated_qber: Option<f64>,
    pub duration_s: f64,
    pub clock_hz: u64,
    pub seed: u64,
}

/// One sifted bit annotated with ground truth (diagnostics only).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiftRecord {
    pub error: bool,
    pub cause: ClickCause,
}

/// Per-integration-window trace row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub index: u64,
    pub t_s: f64,
    pub applied_voltage_v: f64,
    pub base_voltage_v: f64,
    pub reset: bool,
    pub sifting: bool,
    pub residual_deg: f64,
    pub base_error_deg: f64,
    pub apd2_counts: u32,
    pub signal_singles: u32,
    pub kept_bits: u32,
}

/// Duty cycle: twice the sifted key size over the number of photons
/// received.
pub fn duty_cycle(sifted_bits: u64, photons_received: u64) -> Result<f64, DomainError> {
    if photons_received == 0 {
        return Err(DomainError::new(
            "duty cycle undefined: no photons received",
        ));
    }
    Ok(2.0 * sifted_bits as f64 / photons_received as f64)
}

/// Per-block mismatch fraction between the two sifted keys.
pub fn qber_series(
    alice_key: &[u8],
    bob_key: &[u8],
    block_size_bits: usize,
) -> Result<Vec<BlockStats>, DomainError> {
    if alice_key.len() != bob_key.len() {
        return Err(DomainError::new(format!(
            "key length mismatch: {} vs {}",
            alice_key.len(),
            bob_key.len()
        )));
    }
    if block_size_bits == 0 {
        return Err(DomainError::new("block size must be positive"));
    }
    let mut blocks = Vec::new();
    for (i, (a, b)) in alice_key
        .chunks(block_size_bits)
        .zip(bob_key.chunks(block_size_bits))
        .enumerate()
    {
        let errors = a.iter().zip(b.iter()).filter(|(x, y)| x != y).count();
        blocks.push(BlockStats {
            block_index: i,
            block_size_bits: a.len(),
            errors,
            qber: errors as f64 / a.len() as f64,
            is_partial: a.len() < block_size_bits,
        });
    }
    Ok(blocks)
}

/// Number of in-range histogram bins (plus one overflow bin).
const HIST_BINS: usize = 30;
const HIST_BIN_WIDTH: f64 = 0.001;

/// Bin the block series into the fixed-width histogram.
pub fn qber_histogram(series: &[BlockStats]) -> QberHistogram {
    let mut counts = vec![0u32; HIST_BINS + 1];
    for block in series {
        let bin = (block.qber / HIST_BIN_WIDTH).floor() as usize;
        if bin < HIST_BINS {
            counts[bin] += 1;
        } else {
            counts[HIST_BINS] += 1;
        }
    }
    QberHistogram {
        bin_width: HIST_BIN_WIDTH,
        upper: HIST_BINS as f64 * HIST_BIN_WIDTH,
        counts,
    }
}

/// Envelope spread of the residual-phase trace, degrees peak to peak.
///
/// Uses the 0.5th-99.5th percentile span: the literal max-min of a
/// stochastic trace is dominated by single outliers, while the envelope a
/// strip-chart shows is what the error model needs.
pub fn residual_peak_to_peak_deg(residuals_deg: &[f64]) -> f64 {
    match (
        percentile(residuals_deg, 0.005),
        percentile(residuals_deg, 0.995),
    ) {
        (Some(lo), Some(hi)) => hi - lo,
        _ => 0.0,
    }
}

/// Decompose the mean error rate into optics, phase and detector terms.
///
/// `residuals_deg` are the per-window residual phases while sifting was
/// enabled; `records` carry the ground-truth cause of each sifted bit.
pub fn error_budget(
    visibility: f64,
    residuals_deg: &[f64],
    records: &[SiftRecord],
) -> Result<ErrorBudget, DomainError> {
    let optics = (1.0 - visibility) / 2.0;
    let phase = qber_phase(residual_peak_to_peak_deg(residuals_deg))?;
    let detector = if records.is_empty() {
        0.0
    } else {
        let noise_errors = records
            .iter()
            .filter(|r| r.error && r.cause != ClickCause::Photon)
            .count();
        noise_errors as f64 / records.len() as f64
    };
    Ok(ErrorBudget {
        optics,
        phase,
        detector,
    })
}

fn pack_bits(bits: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b & 1 == 1 {
            out[i / 8] |= 1 << (7 - (i % 8));
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], n_bits: usize) -> Vec<u8> {
    (0..n_bits)
        .map(|i| (bytes[i / 8] >> (7 - (i % 8))) & 1)
        .collect()
}

fn to_hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

fn from_hex(s: &str) -> Result<Vec<u8>, DomainError> {
    if s.len() % 2 != 0 {
        return Err(DomainError::new("odd-length hex string"));
    }
    (0..s.len() / 2)
        .map(|i| {
            u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
                .map_err(|e| DomainError::new(format!("bad hex: {e}")))
        })
        .collect()
}

/// Everything needed to recompute the metrics of a stored run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceFile {
    pub config: RunConfig,
    pub epochs: Vec<EpochRecord>,
    pub sifted_bits: u64,
    pub alice_key_hex: String,
    pub bob_key_hex: String,
    pub sift_records: Vec<SiftRecord>,
    pub photons_received: u64,
    pub estimated_qber: Option<f64>,
}

impl TraceFile {
    pub fn keys(&self) -> Result<(Vec<u8>, Vec<u8>), DomainError> {
        let a = unpack_bits(&from_hex(&self.alice_key_hex)?, self.sifted_bits as usize);
        let b = unpack_bits(&from_hex(&self.bob_key_hex)?, self.sifted_bits as usize);
        Ok((a, b))
    }

    pub fn pack_keys(alice_key: &[u8], bob_key: &[u8]) -> (String, String) {
        (to_hex(&pack_bits(alice_key)), to_hex(&pack_bits(bob_key)))
    }
}

fn f6(x: f64) -> String {
    format!("{x:.6}")
}

fn write_file(path: &Path, contents: &str) -> Result<(), RunError> {
    let mut f = fs::File::create(path)?;
    f.write_all(contents.as_bytes())?;
    Ok(())
}

/// Recompute summary and block series from a stored trace.
pub fn recompute_from_trace(trace: &TraceFile) -> Result<(RunSummary, Vec<BlockStats>), RunError> {
    let (alice_key, bob_key) = trace.keys()?;
    let blocks = qber_series(
        &alice_key,
        &bob_key,
        trace.config.sifting.block_size_bits,
    )?;
    let total_errors: usize = blocks.iter().map(|b| b.errors).sum();
    let mean_qber = if alice_key.is_empty() {
        0.0
    } else {
        total_errors as f64 / alice_key.len() as f64
    };
    let residuals: Vec<f64> = trace
        .epochs
        .iter()
        .filter(|e| e.sifting)
        .map(|e| e.residual_deg)
        .collect();
    let budget = error_budget(
        trace.config.interferometer.visibility,
        &residuals,
        &trace.sift_records,
    )?;
    let duty = if trace.photons_received > 0 {
        duty_cycle(alice_key.len() as u64, trace.photons_received)?
    } else {
        0.0
    };
    let summary = RunSummary {
        sifted_bits: alice_key.len() as u64,
        photons_received: trace.photons_received,
        mean_qber,
        duty_cycle: duty,
        sifted_rate_bps: alice_key.len() as f64 / trace.config.duration_s,
        reset_count: trace.epochs.iter().filter(|e| e.reset).count() as u32,
        qber_histogram: qber_histogram(&blocks),
        error_budget: budget,
        estimated_qber: trace.estimated_qber,
        duration_s: trace.config.duration_s,
        clock_hz: trace.config.clock_hz,
        seed: trace.config.seed,
    };
    Ok((summary, blocks))
}

/// Write every export of a run into `dir`: `summary.json`, the four figure
/// CSVs, and `traces.json`. Output is bit-stable for identical runs.
pub fn export_all(
    dir: &Path,
    summary: &RunSummary,
    blocks: &[BlockStats],
    epochs: &[EpochRecord],
    trace: &TraceFile,
) -> Result<(), RunError> {
    fs::create_dir_all(dir)?;

    let mut s = serde_json::to_string_pretty(summary)
        .map_err(|e| RunError::Io(std::io::Error::other(e)))?;
    s.push('\n');
    write_file(&dir.join("summary.json"), &s)?;

    let mut fig2 = String::from("block_index,start_bit,block_size_bits,errors,qber,is_partial\n");
    let mut start = 0usize;
    for b in blocks {
        fig2.push_str(&format!(
            "{},{},{},{},{},{}\n",
            b.block_index,
            start,
            b.block_size_bits,
            b.errors,
            f6(b.qber),
            b.is_partial as u8
        ));
        start += b.block_size_bits;
    }
    write_file(&dir.join("fig2_qber.csv"), &fig2)?;

    let mut fig3a = String::from("time_s,voltage_v,reset_flag\n");
    for e in epochs {
        fig3a.push_str(&format!(
            "{},{},{}\n",
            f6(e.t_s),
            f6(e.applied_voltage_v),
            e.reset as u8
        ));
    }
    write_file(&dir.join("fig3a_voltage.csv"), &fig3a)?;

    // duty cycle and bit rate over 10 s windows
    let mut fig3bc = String::from("time_s,duty_cycle,bit_rate_bps\n");
    if let Some(last) = epochs.last() {
        let window_s = 10.0;
        let epoch_s = if epochs.len() > 1 {
            epochs[1].t_s - epochs[0].t_s
        } else {
            last.t_s.max(1.0)
        };
        let per_window = (window_s / epoch_s).round().max(1.0) as usize;
        for chunk in epochs.chunks(per_window) {
            let kept: u64 = chunk.iter().map(|e| e.kept_bits as u64).sum();
            let singles: u64 = chunk.iter().map(|e| e.signal_singles as u64).sum();
            let duty = if singles > 0 {
                2.0 * kept as f64 / singles as f64
            } else {
                0.0
            };
            let span = chunk.len() as f64 * epoch_s;
            fig3bc.push_str(&format!(
                "{},{},{}\n",
                f6(chunk[0].t_s),
                f6(duty),
                f6(kept as f64 / span)
            ));
        }
    }
    write_file(&dir.join("fig3bc_duty_rate.csv"), &fig3bc)?;

    // 20 s close-up of the locked voltage trace, mid-run
    let mut fig4 = String::from("time_s,voltage_v,phase_compensated_deg,reset_flag\n");
    if let Some(last) = epochs.last() {
        let mid = last.t_s / 2.0;
        let (lo, hi) = (mid - 10.0, mid + 10.0);
        let coeff = trace.config.stretcher.coeff_deg_per_volt;
        for e in epochs.iter().filter(|e| e.t_s >= lo && e.t_s < hi) {
            fig4.push_str(&format!(
                "{},{},{},{}\n",
                f6(e.t_s),
                f6(e.applied_voltage_v),
                f6(e.applied_voltage_v * coeff),
                e.reset as u8
            ));
        }
    }
    write_file(&dir.join("fig4_voltage_zoom.csv"), &fig4)?;

    let mut t = serde_json::to_string(trace).map_err(|e| RunError::Io(std::io::Error::other(e)))?;
    t.push('\n');
    write_file(&dir.join("traces.json"), &t)?;

    Ok(())
}

/// Reload a stored trace, recompute all metrics, and rewrite the summary
/// and figure files. Returns the recomputed summary.
pub fn analyze_dir(dir: &Path) -> Result<RunSummary, RunError> {
    let raw = fs::read_to_string(dir.join("traces.json"))?;
    let trace: TraceFile =
        serde_json::from_str(&raw).map_err(|e| RunError::Config(format!("traces.json: {e}")))?;
    let (summary, blocks) = recompute_from_trace(&trace)?;
    export_all(dir, &summary, &blocks, &trace.epochs, &trace)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn duty_cycle_anchors() {
        assert_eq!(duty_cycle(50, 100).unwrap(), 1.0);
        assert_eq!(duty_cycle(0, 100).unwrap(), 0.0);
        assert!(duty_cycle(1, 0).is_err());
    }

    proptest! {
        #[test]
        fn duty_cycle_is_scale_invariant(s in 0u64..10_000, p in 1u64..10_000, k in 1u64..50) {
            let a = duty_cycle(s, p).unwrap();
            let b = duty_cycle(s * k, p * k).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn series_mean_is_block_size_invariant(
            bits in prop::collection::vec(0u8..2, 1..4000),
            flips in prop::collection::vec(any::<prop::sample::Index>(), 0..40),
            size_a in 1usize..500,
            size_b in 1usize..500,
        ) {
            let alice = bits.clone();
            let mut bob = bits;
            for f in flips {
                let i = f.index(bob.len());
                bob[i] ^= 1;
            }
            let mean = |blocks: &[BlockStats]| {
                let e: usize = blocks.iter().map(|b| b.errors).sum();
                let n: usize = blocks.iter().map(|b| b.block_size_bits).sum();
                e as f64 / n as f64
            };
            let a = mean(&qber_series(&alice, &bob, size_a).unwrap());
            let b = mean(&qber_series(&alice, &bob, size_b).unwrap());
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn series_anchors() {
        let key = vec![1u8; 12_000];
        let blocks = qber_series(&key, &key, 5000).unwrap();
        assert_eq!(blocks.len(), 3);
        assert!(blocks.iter().all(|b| b.qber == 0.0));
        assert!(!blocks[0].is_partial);
        assert!(blocks[2].is_partial);
        assert_eq!(blocks[2].block_size_bits, 2000);

        let flipped: Vec<u8> = key.iter().map(|b| b ^ 1).collect();
        let blocks = qber_series(&key, &flipped, 5000).unwrap();
        assert!(blocks.iter().all(|b| b.qber == 1.0));

        assert!(qber_series(&key, &key[..100], 5000).is_err());
    }

    #[test]
    fn histogram_anchors() {
        let h = qber_histogram(&[]);
        assert_eq!(h.counts.len(), 31);
        assert!(h.counts.iter().all(|&c| c == 0));

        let one = BlockStats {
            block_index: 0,
            block_size_bits: 5000,
            errors: 44,
            qber: 0.0087,
            is_partial: false,
        };
        let h = qber_histogram(&[one]);
        assert_eq!(h.counts[8], 1); // [0.8%, 0.9%)
        assert_eq!(h.counts.iter().sum::<u32>(), 1);

        let big = BlockStats {
            block_index: 1,
            block_size_bits: 5000,
            errors: 500,
            qber: 0.1,
            is_partial: false,
        };
        let h = qber_histogram(&[big]);
        assert_eq!(h.counts[30], 1); // overflow bin
    }

    #[test]
    fn budget_zero_case() {
        let b = error_budget(1.0, &[], &[]).unwrap();
        assert_eq!(b.optics, 0.0);
        assert_eq!(b.phase, 0.0);
        assert_eq!(b.detector, 0.0);
    }

    #[test]
    fn budget_terms() {
        // residual sweeping +-10.3 deg uniformly
        let residuals: Vec<f64> = (0..2000)
            .map(|i| -10.3 + 20.6 * (i as f64 + 0.5) / 2000.0)
            .collect();
        let records = vec![
            SiftRecord {
                error: true,
                cause: ClickCause::Dark,
            },
            SiftRecord {
                error: false,
                cause: ClickCause::Dark,
            },
            SiftRecord {
                error: true,
                cause: ClickCause::Photon,
            },
            SiftRecord {
                error: false,
                cause: ClickCause::Photon,
            },
        ];
        let b = error_budget(0.9912, &residuals, &records).unwrap();
        assert!((b.optics - 0.0044).abs() < 1e-12);
        assert!((b.phase - 0.002692).abs() < 2e-4);
        assert_eq!(b.detector, 0.25);
    }

    #[test]
    fn bit_packing_round_trips() {
        let bits: Vec<u8> = (0..103).map(|i| ((i * 7) % 3 == 0) as u8).collect();
        let packed = pack_bits(&bits);
        assert_eq!(unpack_bits(&packed, bits.len()), bits);
        let hex = to_hex(&packed);
        assert_eq!(from_hex(&hex).unwrap(), packed);
    }

    fn tiny_summary() -> RunSummary {
        RunSummary {
            sifted_bits: 0,
            photons_received: 0,
            mean_qber: 0.0,
            duty_cycle: 0.0,
            sifted_rate_bps: 0.0,
            reset_count: 0,
            qber_histogram: qber_histogram(&[]),
            error_budget: ErrorBudget {
                optics: 0.0044,
                phase: 0.0,
                detector: 0.0,
            },
            estimated_qber: None,
            duration_s: 1.0,
            clock_hz: 250_000,
            seed: 1,
        }
    }

    #[test]
    fn empty_run_exports_headers_only() {
        let dir = tempfile::tempdir().unwrap();
        let trace = TraceFile {
            config: RunConfig::default(),
            epochs: vec![],
            sifted_bits: 0,
            alice_key_hex: String::new(),
            bob_key_hex: String::new(),
            sift_records: vec![],
            photons_received: 0,
            estimated_qber: None,
        };
        export_all(dir.path(), &tiny_summary(), &[], &[], &trace).unwrap();
        for name in [
            "fig2_qber.csv",
            "fig3a_voltage.csv",
            "fig3bc_duty_rate.csv",
            "fig4_voltage_zoom.csv",
        ] {
            let contents = fs::read_to_string(dir.path().join(name)).unwrap();
            assert_eq!(contents.lines().count(), 1, "{name} should be header-only");
        }
    }

    #[test]
    fn summary_round_trips_through_json() {
        let summary = tiny_summary();
        let s = serde_json::to_string(&summary).unwrap();
        let back: RunSummary = serde_json::from_str(&s).unwrap();
        assert_eq!(back, summary);
    }

    #[test]
    fn voltage_csv_schema() {
        let dir = tempfile::tempdir().unwrap();
        let epochs = vec![EpochRecord {
            index: 0,
            t_s: 0.0,
            applied_voltage_v: -0.125,
            base_voltage_v: -0.1,
            reset: false,
            sifting: true,
            residual_deg: 1.0,
            base_error_deg: 0.5,
            apd2_counts: 5,
            signal_singles: 160,
            kept_bits: 80,
        }];
        let trace = TraceFile {
            config: RunConfig::default(),
            epochs: epochs.clone(),
            sifted_bits: 0,
            alice_key_hex: String::new(),
            bob_key_hex: String::new(),
            sift_records: vec![],
            photons_received: 160,
            estimated_qber: None,
        };
        export_all(dir.path(), &tiny_summary(), &[], &epochs, &trace).unwrap();
        let fig3a = fs::read_to_string(dir.path().join("fig3a_voltage.csv")).unwrap();
        let mut lines = fig3a.lines();
        assert_eq!(lines.next(), Some("time_s,voltage_v,reset_flag"));
        assert_eq!(lines.next(), Some("0.000000,-0.125000,0"));
    }

    #[test]
    fn analyze_reproduces_the_summary() {
        let dir = tempfile::tempdir().unwrap();
        let alice: Vec<u8> = (0..6000).map(|i| (i % 2) as u8).collect();
        let mut bob = alice.clone();
        bob[17] ^= 1;
        let (ah, bh) = TraceFile::pack_keys(&alice, &bob);
        let trace = TraceFile {
            config: RunConfig::default(),
            epochs: vec![],
            sifted_bits: alice.len() as u64,
            alice_key_hex: ah,
            bob_key_hex: bh,
            sift_records: vec![],
            photons_received: 12_345,
            estimated_qber: None,
        };
        let (summary, blocks) = recompute_from_trace(&trace).unwrap();
        export_all(dir.path(), &summary, &blocks, &[], &trace).unwrap();
        let re = analyze_dir(dir.path()).unwrap();
        assert_eq!(re, summary);
        assert_eq!(re.sifted_bits, 6000);
        assert!((re.mean_qber - 1.0 / 6000.0).abs() < 1e-12);
    }
}
