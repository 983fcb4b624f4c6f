//! Run orchestration: drives the optical model, detectors, compensation
//! loops and the sifting protocol through one seeded event loop.
//!
//! Simulated time is decoupled from wall time: the loop advances one
//! integration window at a time, `clock_hz * window` detector gates per
//! window, with the channel state held piecewise-constant across a window.
//! All randomness comes from named substreams of the master seed, so a
//! `(config, seed)` pair reproduces a run exactly, byte for byte.

use std::path::Path;
use std::thread::JoinHandle;

use rand::Rng;

use crate::compensation::{
    FeedbackSample, FringeCalibration, PolarizationWalker, StretcherController,
};
use crate::config::{validate, RunConfig, RunMode};
use crate::detectors::{Apd, ClickCause};
use crate::error::{RunError, TransportError};
use crate::metrics::{self, BlockStats, EpochRecord, RunSummary, SiftRecord, TraceFile};
use crate::physics::{polarization_coupling, transmittance, DriftState};
use crate::protocol::frames::{Message, SessionCtrl};
use crate::protocol::session::{AliceSifter, BobClick, BobSifter};
use crate::protocol::{alice_emit, bob_measure, AliceSource, Basis, MeasureOutcome};
use crate::rng::{substream, Stream};
use crate::transport::{
    spawn_alice_server, InprocTransport, SiftTransport, TapRecord, TcpTransport, TransportSpec,
};
use crate::util::{cos_deg, wrap_deg};

/// Ground-truth record of one detected gate (omniscient bookkeeping; the
/// protocol layers never see it).
#[derive(Debug, Clone, Copy)]
struct ClickRecord {
    clock_index: u64,
    alice_bit: u8,
    bob_bit: u8,
    cause: ClickCause,
}

/// Everything a run produces.
#[derive(Debug)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub blocks: Vec<BlockStats>,
    pub epochs: Vec<EpochRecord>,
    pub alice_key: Vec<u8>,
    pub bob_key: Vec<u8>,
    pub sift_records: Vec<SiftRecord>,
    /// Captured classical-channel frames (capture runs only).
    pub tap: Vec<TapRecord>,
}

enum Link {
    Inproc(InprocTransport),
    Tcp {
        transport: TcpTransport,
        handle: JoinHandle<Result<AliceSifter, TransportError>>,
    },
}

impl Link {
    fn transport(&mut self) -> &mut dyn SiftTransport {
        match self {
            Link::Inproc(t) => t,
            Link::Tcp { transport, .. } => transport,
        }
    }

    fn finish(self) -> Result<(AliceSifter, Vec<TapRecord>), RunError> {
        match self {
            Link::Inproc(t) => Ok(t.into_parts()),
            Link::Tcp { transport, handle } => {
                drop(transport);
                let alice = handle
                    .join()
                    .map_err(|_| RunError::Protocol("sender task panicked".into()))??;
                Ok((alice, Vec::new()))
            }
        }
    }
}

fn exchange_batches(
    bob: &mut BobSifter,
    transport: &mut dyn SiftTransport,
    batch: usize,
    flush: bool,
    estimate: bool,
) -> Result<(), RunError> {
    while let Some(reveal) = bob.next_batch(batch, flush) {
        transport.send(&reveal)?;
        match transport.recv()? {
            Message::SiftKeep(keep) => bob.on_keep(&keep)?,
            other => {
                return Err(RunError::Protocol(format!(
                    "expected sift-keep, got type {:#04x}",
                    other.msg_type()
                )))
            }
        }
        if estimate {
            match transport.recv()? {
                Message::QberSample(sample) => {
                    let report = bob.on_sample(&sample)?;
                    transport.send(&report)?;
                }
                other => {
                    return Err(RunError::Protocol(format!(
                        "expected qber-sample, got type {:#04x}",
                        other.msg_type()
                    )))
                }
            }
        }
        bob.finish_batch();
    }
    Ok(())
}

/// Execute one full session.
pub fn run(config: &RunConfig) -> Result<RunOutput, RunError> {
    run_with_capture(config, false)
}

/// Execute one full session, recording the classical channel's frames
/// (in-process transport only).
pub fn run_with_capture(config: &RunConfig, capture: bool) -> Result<RunOutput, RunError> {
    let violations = validate(config);
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return Err(RunError::Config(list.join("; ")));
    }

    let seed = config.seed;
    let epoch_s = config.stretcher.integration_window_s;
    let gates_per_epoch = (config.clock_hz as f64 * epoch_s).round() as u64;
    let n_epochs = ((config.duration_s / epoch_s).round() as u64).max(1);

    let t_chan = transmittance(config.channel.loss_db)?;
    let optics = &config.interferometer;
    let visibility = optics.visibility;

    let mut apd0 = Apd::new(config.apd0.clone());
    let mut apd1 = Apd::new(config.apd1.clone());
    let mut apd2 = Apd::new(config.apd2.clone());
    let mut r0 = substream(seed, Stream::Apd0);
    let mut r1 = substream(seed, Stream::Apd1);
    let mut r2 = substream(seed, Stream::Apd2);
    let mut bob_rng = substream(seed, Stream::BobBasis);
    let mut chan_rng = substream(seed, Stream::Channel);
    let mut alice_src = AliceSource::new(seed);
    let mut drift = DriftState::new(config.channel.initial_phase_offset_deg);

    // Receiver-side fringe calibration for the lock: expected APD2 counts
    // per window as a function of residual phase.
    let cal = FringeCalibration {
        amplitude: gates_per_epoch as f64
            * config.apd2.efficiency
            * config.source.reference_mean_photons
            * t_chan
            * optics.interfering_fraction
            * optics.reference_split
            / 2.0,
        background: gates_per_epoch as f64 * config.apd2.dark_prob_per_gate,
        visibility,
    };
    let mut stretcher = StretcherController::new(config.stretcher.clone(), cal);
    let mut walker = PolarizationWalker::new(&config.walker);

    let estimate = config.mode == RunMode::ProtocolEstimate && config.sifting.reveal_fraction > 0.0;
    let reveal_fraction = if estimate {
        config.sifting.reveal_fraction
    } else {
        0.0
    };
    let alice = AliceSifter::new(seed, reveal_fraction);
    let mut link = match &config.transport {
        TransportSpec::Inproc => Link::Inproc(InprocTransport::new(alice, capture)),
        TransportSpec::Tcp(addr) => {
            let (bound, handle) = spawn_alice_server(addr.as_str(), alice)?;
            let transport = TcpTransport::connect(&bound.to_string())?;
            Link::Tcp { transport, handle }
        }
    };
    let mut bob = BobSifter::new();

    link.transport()
        .send(&Message::SessionCtrl(SessionCtrl::Start))?;

    let mut applied_v = stretcher.initial_applied_voltage();
    let mut epochs: Vec<EpochRecord> = Vec::with_capacity(n_epochs as usize);
    let mut click_log: Vec<ClickRecord> = Vec::new();
    let mut window_clicks: Vec<BobClick> = Vec::new();
    let mut photons_received = 0u64;
    let mut sift_gate_open = true;
    let mut walker_counts = 0u64;
    let mut walker_windows = 0u32;

    for e in 0..n_epochs {
        if e > 0 {
            drift = config.channel.advance_drift(&drift, epoch_s, &mut chan_rng);
        }
        let axes = walker.trial_axes();
        let kappa = polarization_coupling(&drift, axes);
        let base_v_window = stretcher.base_voltage();
        let residual = wrap_deg(
            drift.phase_offset_deg + config.stretcher.phase_from_voltage(applied_v),
        );
        let base_error = wrap_deg(
            drift.phase_offset_deg + config.stretcher.phase_from_voltage(base_v_window),
        );
        let mu_at_bob = config.source.signal_mean_photons * t_chan * kappa;
        // unmodulated reference: interferes at the raw residual, one port
        // tapped to APD2
        let p_ref = (1.0 - visibility * cos_deg(residual)) / 2.0;
        let mu_apd2 = config.source.reference_mean_photons
            * t_chan
            * kappa
            * optics.interfering_fraction
            * optics.reference_split
            * p_ref;

        let mut apd2_counts = 0u32;
        let mut singles = 0u32;
        window_clicks.clear();
        let base_idx = e * gates_per_epoch;
        for g in 0..gates_per_epoch {
            let idx = base_idx + g;
            let (prep, pair) = alice_emit(&mut alice_src, idx, &config.source);
            let bob_basis = if bob_rng.gen::<bool>() {
                Basis::X
            } else {
                Basis::Z
            };
            let outcome = bob_measure(
                pair.alice_phase_deg,
                bob_basis,
                residual,
                mu_at_bob,
                optics,
                &mut apd0,
                &mut apd1,
                &mut r0,
                &mut r1,
            )?;
            match outcome {
                MeasureOutcome::Single { bit, cause } => {
                    photons_received += 1;
                    singles += 1;
                    window_clicks.push(BobClick {
                        clock_index: idx,
                        basis: bob_basis,
                        bit,
                    });
                    click_log.push(ClickRecord {
                        clock_index: idx,
                        alice_bit: prep.bit,
                        bob_bit: bit,
                        cause,
                    });
                }
                MeasureOutcome::Double | MeasureOutcome::NoClick => {}
            }
            if apd2.gate(mu_apd2, &mut r2)?.is_some() {
                apd2_counts += 1;
            }
        }

        let sample = FeedbackSample {
            apd2_rate: apd2_counts as f64 / epoch_s,
            signal_rate: singles as f64 / epoch_s,
            window_s: epoch_s,
        };
        let step = stretcher.step(&sample)?;

        walker_counts += singles as u64;
        walker_windows += 1;
        if walker_windows >= config.walker.decision_epochs {
            let span = walker_windows as f64 * epoch_s;
            walker.observe(&FeedbackSample {
                apd2_rate: 0.0,
                signal_rate: walker_counts as f64 / span,
                window_s: span,
            });
            walker_counts = 0;
            walker_windows = 0;
        }

        if step.accept_window != sift_gate_open {
            let ctrl = if step.accept_window {
                SessionCtrl::Resume
            } else {
                SessionCtrl::Suspend
            };
            link.transport().send(&Message::SessionCtrl(ctrl))?;
            sift_gate_open = step.accept_window;
        }
        bob.stage_window(&window_clicks, step.accept_window);
        exchange_batches(
            &mut bob,
            link.transport(),
            config.sifting.reveal_batch,
            false,
            estimate,
        )?;

        epochs.push(EpochRecord {
            index: e,
            t_s: e as f64 * epoch_s,
            applied_voltage_v: applied_v,
            base_voltage_v: base_v_window,
            reset: step.reset,
            sifting: step.accept_window,
            residual_deg: residual,
            base_error_deg: base_error,
            apd2_counts,
            signal_singles: singles,
            kept_bits: 0,
        });
        applied_v = step.applied_voltage_v;
    }

    exchange_batches(
        &mut bob,
        link.transport(),
        config.sifting.reveal_batch,
        true,
        estimate,
    )?;
    link.transport()
        .send(&Message::SessionCtrl(SessionCtrl::Stop))?;

    let (alice_sifter, tap) = link.finish()?;
    let alice_key = alice_sifter.into_key();
    let bob_key = bob.key().to_vec();
    if alice_key.len() != bob_key.len() {
        return Err(RunError::Protocol(format!(
            "sifted keys misaligned: {} vs {}",
            alice_key.len(),
            bob_key.len()
        )));
    }

    // join the kept indices with the ground-truth click log
    let kept = bob.kept_indices();
    let mut sift_records = Vec::with_capacity(kept.len());
    let mut li = 0usize;
    for (pos, &idx) in kept.iter().enumerate() {
        while li < click_log.len() && click_log[li].clock_index < idx {
            li += 1;
        }
        let rec = click_log
            .get(li)
            .filter(|r| r.clock_index == idx)
            .ok_or_else(|| RunError::Protocol(format!("kept index {idx} missing from the log")))?;
        debug_assert_eq!(rec.alice_bit, alice_key[pos]);
        debug_assert_eq!(rec.bob_bit, bob_key[pos]);
        sift_records.push(SiftRecord {
            error: rec.alice_bit != rec.bob_bit,
            cause: rec.cause,
        });
        epochs[(idx / gates_per_epoch) as usize].kept_bits += 1;
    }

    let blocks = metrics::qber_series(&alice_key, &bob_key, config.sifting.block_size_bits)?;
    let errors = sift_records.iter().filter(|r| r.error).count();
    let mean_qber = if alice_key.is_empty() {
        0.0
    } else {
        errors as f64 / alice_key.len() as f64
    };
    let residuals: Vec<f64> = epochs
        .iter()
        .filter(|e| e.sifting)
        .map(|e| e.residual_deg)
        .collect();
    let budget = metrics::error_budget(visibility, &residuals, &sift_records)?;
    let duty = if photons_received > 0 {
        metrics::duty_cycle(alice_key.len() as u64, photons_received)?
    } else {
        0.0
    };
    let summary = RunSummary {
        sifted_bits: alice_key.len() as u64,
        photons_received,
        mean_qber,
        duty_cycle: duty,
        sifted_rate_bps: alice_key.len() as f64 / config.duration_s,
        reset_count: stretcher.reset_count(),
        qber_histogram: metrics::qber_histogram(&blocks),
        error_budget: budget,
        estimated_qber: bob.estimate().map(|(e, t)| e as f64 / t as f64),
        duration_s: config.duration_s,
        clock_hz: config.clock_hz,
        seed,
    };

    Ok(RunOutput {
        summary,
        blocks,
        epochs,
        alice_key,
        bob_key,
        sift_records,
        tap,
    })
}

/// Build the stored-trace form of a run.
pub fn build_trace(config: &RunConfig, out: &RunOutput) -> TraceFile {
    let (alice_key_hex, bob_key_hex) = TraceFile::pack_keys(&out.alice_key, &out.bob_key);
    TraceFile {
        config: config.clone(),
        epochs: out.epochs.clone(),
        sifted_bits: out.alice_key.len() as u64,
        alice_key_hex,
        bob_key_hex,
        sift_records: out.sift_records.clone(),
        photons_received: out.summary.photons_received,
        estimated_qber: out.summary.estimated_qber,
    }
}

/// Write all exports of a finished run into `dir`.
pub fn export(config: &RunConfig, out: &RunOutput, dir: &Path) -> Result<(), RunError> {
    let trace = build_trace(config, out);
    metrics::export_all(dir, &out.summary, &out.blocks, &out.epochs, &trace)
}

/// Run a session and write its exports.
pub fn run_and_export(config: &RunConfig, dir: &Path) -> Result<RunOutput, RunError> {
    let out = run(config)?;
    export(config, &out, dir)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short(mut cfg: RunConfig, seconds: f64) -> RunConfig {
        cfg.duration_s = seconds;
        cfg
    }

    #[test]
    fn noise_free_run_has_zero_errors_and_identical_keys() {
        let cfg = short(RunConfig::noise_free(), 2.0);
        let out = run(&cfg).unwrap();
        assert!(out.summary.sifted_bits > 100);
        assert_eq!(out.alice_key, out.bob_key);
        assert_eq!(out.summary.mean_qber, 0.0);
        assert!(out.summary.duty_cycle > 0.9);
        assert_eq!(out.summary.reset_count, 0);
    }

    #[test]
    fn same_seed_reproduces_bit_for_bit() {
        let cfg = short(RunConfig::paper_250khz(), 2.0);
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert_eq!(a.summary, b.summary);
        assert_eq!(a.alice_key, b.alice_key);
        assert_eq!(a.bob_key, b.bob_key);
        let ta = serde_json::to_string(&build_trace(&cfg, &a)).unwrap();
        let tb = serde_json::to_string(&build_trace(&cfg, &b)).unwrap();
        assert_eq!(ta, tb);
    }

    #[test]
    fn tcp_transport_matches_inproc() {
        let inproc = short(RunConfig::paper_250khz(), 2.0);
        let mut tcp = inproc.clone();
        tcp.transport = TransportSpec::Tcp("127.0.0.1:0".into());
        let a = run(&inproc).unwrap();
        let b = run(&tcp).unwrap();
        assert_eq!(a.summary, b.summary);
        assert_eq!(a.bob_key, b.bob_key);
    }

    #[test]
    fn invalid_config_is_refused() {
        let mut cfg = RunConfig::default();
        cfg.interferometer.visibility = 2.0;
        match run(&cfg) {
            Err(RunError::Config(msg)) => assert!(msg.contains("interferometer.visibility")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn estimate_mode_tracks_the_true_error_rate() {
        let mut cfg = short(RunConfig::paper_250khz(), 6.0);
        cfg.mode = RunMode::ProtocolEstimate;
        cfg.sifting.reveal_fraction = 0.2;
        cfg.interferometer.visibility = 0.9; // 5% optics floor for signal
        let out = run(&cfg).unwrap();
        let est = out.summary.estimated_qber.expect("estimate produced");
        // sacrificed bits never enter the keys
        assert!(out.summary.sifted_bits > 0);
        let q = out.summary.mean_qber;
        let n = out.summary.sifted_bits as f64 * 0.25; // approx sample size
        let sigma = (q * (1.0 - q) / n).sqrt().max(1e-4);
        assert!(
            (est - q).abs() < 6.0 * sigma,
            "estimate {est:.5} vs true {q:.5}"
        );
    }
}
