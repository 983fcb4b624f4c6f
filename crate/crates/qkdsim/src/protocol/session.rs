//! Sender- and receiver-side sifting state machines.
//!
//! The receiver (Bob) reveals only clock indices and bases of gates with
//! exactly one signal-detector click; the sender (Alice) answers with the
//! matching-basis indices to keep. When a reveal fraction is configured,
//! Alice sacrifices every n-th kept bit by publishing her bit value; Bob
//! answers with an error tally. Sacrificed bits never enter either key.

use crate::error::RunError;
use crate::protocol::frames::{Message, SessionCtrl};
use crate::protocol::{AliceSource, Basis};

/// One reported detection, as the receiver's protocol layer sees it: no
/// click-cause information crosses this boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BobClick {
    pub clock_index: u64,
    pub basis: Basis,
    pub bit: u8,
}

/// Sender-side sifting machine.
#[derive(Debug)]
pub struct AliceSifter {
    source: AliceSource,
    reveal_period: u64,
    reveal_counter: u64,
    key: Vec<u8>,
    last_index_seen: Option<u64>,
    reported_errors: u64,
    reported_total: u64,
    suspended: bool,
    done: bool,
}

impl AliceSifter {
    /// `reveal_fraction` in [0, 1): fraction of kept bits sacrificed for
    /// in-protocol error estimation (0 disables sampling).
    pub fn new(seed: u64, reveal_fraction: f64) -> Self {
        let reveal_period = if reveal_fraction > 0.0 {
            (1.0 / reveal_fraction).ceil() as u64
        } else {
            0
        };
        Self {
            source: AliceSource::new(seed),
            reveal_period,
            reveal_counter: 0,
            key: Vec::new(),
            last_index_seen: None,
            reported_errors: 0,
            reported_total: 0,
            suspended: false,
            done: false,
        }
    }

    pub fn key(&self) -> &[u8] {
        &self.key
    }

    pub fn into_key(self) -> Vec<u8> {
        self.key
    }

    pub fn done(&self) -> bool {
        self.done
    }

    pub fn reported_estimate(&self) -> Option<(u64, u64)> {
        if self.reported_total > 0 {
            Some((self.reported_errors, self.reported_total))
        } else {
            None
        }
    }

    /// Process one inbound message and produce the responses to send back.
    pub fn handle(&mut self, msg: &Message) -> Result<Vec<Message>, RunError> {
        match msg {
            Message::BasisReveal(entries) => {
                let mut keep = Vec::new();
                let mut sample = Vec::new();
                for &(idx, bob_basis) in entries {
                    if let Some(last) = self.last_index_seen {
                        if idx <= last {
                            return Err(RunError::Protocol(format!(
                                "non-monotonic reveal index {idx} after {last}"
                            )));
                        }
                    }
                    self.last_index_seen = Some(idx);
                    let prep = self.source.prep_at(idx);
                    if prep.basis != bob_basis {
                        continue;
                    }
                    if self.reveal_period > 0 {
                        self.reveal_counter += 1;
                        if self.reveal_counter % self.reveal_period == 0 {
                            sample.push((idx, prep.bit));
                            continue;
                        }
                    }
                    keep.push(idx);
                    self.key.push(prep.bit);
                }
                let mut out = vec![Message::SiftKeep(keep)];
                if self.reveal_period > 0 {
                    out.push(Message::QberSample(sample));
                }
                Ok(out)
            }
            Message::SessionCtrl(ctrl) => {
                match ctrl {
                    SessionCtrl::Start => {}
                    SessionCtrl::Suspend => self.suspended = true,
                    SessionCtrl::Resume => self.suspended = false,
                    SessionCtrl::Stop => self.done = true,
                }
                Ok(vec![])
            }
            Message::EstimateReport { errors, total } => {
                self.reported_errors += errors;
                self.reported_total += total;
                Ok(vec![])
            }
            other => Err(RunError::Protocol(format!(
                "unexpected message type {:#04x} at the sender",
                other.msg_type()
            ))),
        }
    }
}

/// Receiver-side sifting machine.
#[derive(Debug, Default)]
pub struct BobSifter {
    queue: Vec<BobClick>,
    inflight: Vec<BobClick>,
    key: Vec<u8>,
    kept_indices: Vec<u64>,
    est_errors: u64,
    est_total: u64,
}

impl BobSifter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn key(&self) -> &[u8] {
        &self.key
    }

    pub fn kept_indices(&self) -> &[u64] {
        &self.kept_indices
    }

    pub fn estimate(&self) -> Option<(u64, u64)> {
        if self.est_total > 0 {
            Some((self.est_errors, self.est_total))
        } else {
            None
        }
    }

    /// Queue the detections of one integration window. When sifting is
    /// gated off the photons are wasted: nothing is queued or revealed.
    pub fn stage_window(&mut self, clicks: &[BobClick], sifting: bool) {
        if sifting {
            self.queue.extend_from_slice(clicks);
        }
    }

    pub fn pending(&self) -> usize {
        self.queue.len() + self.inflight.len()
    }

    /// Build the next reveal batch, if one is due.
    pub fn next_batch(&mut self, batch_size: usize, flush: bool) -> Option<Message> {
        if !self.inflight.is_empty() {
            return None; // one batch in flight at a time
        }
        if self.queue.len() >= batch_size {
            self.inflight = self.queue.drain(..batch_size).collect();
        } else if flush && !self.queue.is_empty() {
            self.inflight = std::mem::take(&mut self.queue);
        } else {
            return None;
        }
        Some(Message::BasisReveal(
            self.inflight
                .iter()
                .map(|c| (c.clock_index, c.basis))
                .collect(),
        ))
    }

    fn inflight_bit(&self, idx: u64) -> Result<u8, RunError> {
        self.inflight
            .binary_search_by_key(&idx, |c| c.clock_index)
            .map(|i| self.inflight[i].bit)
            .map_err(|_| RunError::Protocol(format!("keep/sample index {idx} was never revealed")))
    }

    /// Apply the sender's keep list for the batch in flight.
    pub fn on_keep(&mut self, keep: &[u64]) -> Result<(), RunError> {
        for &idx in keep {
            let bit = self.inflight_bit(idx)?;
            self.key.push(bit);
            self.kept_indices.push(idx);
        }
        Ok(())
    }

    /// Tally the sacrificed sample against the local bits and close the
    /// batch; returns the report to send back.
    pub fn on_sample(&mut self, sample: &[(u64, u8)]) -> Result<Message, RunError> {
        let mut errors = 0u64;
        for &(idx, alice_bit) in sample {
            let bit = self.inflight_bit(idx)?;
            if bit != alice_bit {
                errors += 1;
            }
        }
        self.est_errors += errors;
        self.est_total += sample.len() as u64;
        Ok(Message::EstimateReport {
            errors,
            total: sample.len() as u64,
        })
    }

    /// Close the batch in flight (characterization mode, no sample frame).
    pub fn finish_batch(&mut self) {
        self.inflight.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clicks_from_alice(seed: u64, n: u64, flip_basis: bool) -> Vec<BobClick> {
        let mut src = AliceSource::new(seed);
        (0..n)
            .map(|i| {
                let prep = src.prep_at(i);
                let basis = if flip_basis {
                    match prep.basis {
                        Basis::Z => Basis::X,
                        Basis::X => Basis::Z,
                    }
                } else {
                    prep.basis
                };
                BobClick {
                    clock_index: i,
                    basis,
                    bit: prep.bit,
                }
            })
            .collect()
    }

    #[test]
    fn matching_bases_keep_everything() {
        let mut alice = AliceSifter::new(3, 0.0);
        let mut bob = BobSifter::new();
        bob.stage_window(&clicks_from_alice(3, 500, false), true);
        let reveal = bob.next_batch(4096, true).unwrap();
        let responses = alice.handle(&reveal).unwrap();
        assert_eq!(responses.len(), 1);
        match &responses[0] {
            Message::SiftKeep(keep) => {
                assert_eq!(keep.len(), 500);
                bob.on_keep(keep).unwrap();
            }
            other => panic!("unexpected response {other:?}"),
        }
        bob.finish_batch();
        assert_eq!(alice.key(), bob.key());
        assert_eq!(bob.key().len(), 500);
    }

    #[test]
    fn opposite_bases_keep_nothing() {
        let mut alice = AliceSifter::new(4, 0.0);
        let mut bob = BobSifter::new();
        bob.stage_window(&clicks_from_alice(4, 300, true), true);
        let reveal = bob.next_batch(4096, true).unwrap();
        let responses = alice.handle(&reveal).unwrap();
        match &responses[0] {
            Message::SiftKeep(keep) => assert!(keep.is_empty()),
            other => panic!("unexpected response {other:?}"),
        }
        assert!(alice.key().is_empty());
    }

    #[test]
    fn suspended_windows_waste_their_clicks() {
        let mut bob = BobSifter::new();
        bob.stage_window(&clicks_from_alice(5, 100, false), false);
        assert_eq!(bob.pending(), 0);
        assert!(bob.next_batch(1, true).is_none());
    }

    #[test]
    fn sampling_removes_bits_from_both_keys_and_counts_errors() {
        let mut alice = AliceSifter::new(6, 0.25);
        let mut bob = BobSifter::new();
        let mut clicks = clicks_from_alice(6, 400, false);
        // corrupt one receiver bit that will be sampled or kept either way
        clicks[10].bit ^= 1;
        bob.stage_window(&clicks, true);
        let reveal = bob.next_batch(4096, true).unwrap();
        let responses = alice.handle(&reveal).unwrap();
        assert_eq!(responses.len(), 2);
        let keep = match &responses[0] {
            Message::SiftKeep(k) => k.clone(),
            other => panic!("unexpected {other:?}"),
        };
        let sample = match &responses[1] {
            Message::QberSample(s) => s.clone(),
            other => panic!("unexpected {other:?}"),
        };
        assert!(!sample.is_empty());
        // kept and sampled indices are disjoint
        for (idx, _) in &sample {
            assert!(!keep.contains(idx));
        }
        bob.on_keep(&keep).unwrap();
        let report = bob.on_sample(&sample).unwrap();
        alice.handle(&report).unwrap();
        bob.finish_batch();
        assert_eq!(alice.key().len(), bob.key().len());
        assert_eq!(alice.key().len(), keep.len());
        let (err, tot) = bob.estimate().unwrap();
        assert_eq!(tot, sample.len() as u64);
        // the corrupted bit shows up either in the sample tally or the key
        let key_mismatches = alice
            .key()
            .iter()
            .zip(bob.key().iter())
            .filter(|(a, b)| a != b)
            .count() as u64;
        assert_eq!(err + key_mismatches, 1);
        assert_eq!(alice.reported_estimate(), Some((err, tot)));
    }

    #[test]
    fn non_monotonic_reveal_aborts() {
        let mut alice = AliceSifter::new(7, 0.0);
        let reveal = Message::BasisReveal(vec![(5, Basis::Z), (4, Basis::Z)]);
        assert!(alice.handle(&reveal).is_err());
    }

    #[test]
    fn unknown_keep_index_aborts() {
        let mut bob = BobSifter::new();
        bob.stage_window(&clicks_from_alice(8, 10, false), true);
        let _ = bob.next_batch(4096, true).unwrap();
        assert!(bob.on_keep(&[999]).is_err());
    }
}
