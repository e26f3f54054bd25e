//! Joint training of linear classifier probes against a frozen anchor.
//!
//! A probe set holds one affine+softmax probe per activation position
//! 0..depth-1 of its anchor (position 0 probes the raw input, position p
//! probes block p's output). All probes train jointly: each mini-batch runs
//! the anchor once to extract every position's activations, then every
//! probe takes its own cross-entropy gradient step. The anchor forward
//! counter makes the amortization observable.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorModel;
use crate::data::{Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{
    affine_backward, affine_forward, cross_entropy_batch, softmax_batch, softmax_ce_grad, Tensor,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Probe {
    pub anchor_id: String,
    /// Activation position this probe reads (0 = raw input).
    pub position: usize,
    /// in_dim x num_classes.
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

impl Probe {
    fn zeros(anchor_id: &str, position: usize, in_dim: usize, num_classes: usize) -> Probe {
        Probe {
            anchor_id: anchor_id.to_string(),
            position,
            weight: Tensor::zeros(in_dim, num_classes),
            bias: vec![0.0; num_classes],
        }
    }

    /// Softmax probability rows for the given activations.
    pub fn distributions(&self, activations: &Tensor) -> Result<Tensor> {
        softmax_batch(&affine_forward(activations, &self.weight, &self.bias)?)
    }

    pub fn accuracy(&self, activations: &Tensor, labels: &[usize]) -> Result<f64> {
        let probs = self.distributions(activations)?;
        if probs.rows() != labels.len() || probs.rows() == 0 {
            return Err(Error::invalid("probe accuracy batch/label mismatch"));
        }
        let mut correct = 0usize;
        for (r, &label) in labels.iter().enumerate() {
            let row = probs.row(r);
            let mut best = 0;
            for (i, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = i;
                }
            }
            if best == label {
                correct += 1;
            }
        }
        Ok(correct as f64 / labels.len() as f64)
    }

    fn step(&mut self, activations: &Tensor, labels: &[usize], lr: f64) -> Result<f64> {
        let probs = self.distributions(activations)?;
        let loss = cross_entropy_batch(&probs, labels)?;
        let dlogits = softmax_ce_grad(&probs, labels)?;
        let (dw, db, _) = affine_backward(activations, &self.weight, &dlogits)?;
        for (p, g) in self.weight.data_mut().iter_mut().zip(dw.data()) {
            *p -= lr * g;
        }
        for (p, g) in self.bias.iter_mut().zip(&db) {
            *p -= lr * g;
        }
        self.weight.check_finite("probe update")?;
        Ok(loss)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProbeTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        ProbeTrainConfig {
            epochs: 30,
            lr: 0.1,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// One accuracy measurement: probe position, epoch (0 = before training),
/// split, accuracy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub position: usize,
    pub epoch: usize,
    pub split: SplitTag,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeSet {
    pub anchor_id: String,
    /// Anchor weight digest recorded when training started; training
    /// re-checks it on exit.
    pub anchor_digest: String,
    pub probes: Vec<Probe>,
    pub config: ProbeTrainConfig,
    /// Number of anchor activation-extraction passes performed during
    /// training.
    pub anchor_forward_passes: u64,
    pub trace: Vec<TraceRow>,
    /// Per-probe mean training CE loss per epoch.
    pub loss_trace: Vec<Vec<f64>>,
}

impl ProbeSet {
    pub fn depth(&self) -> usize {
        self.probes.len()
    }

    pub fn probe(&self, position: usize) -> Result<&Probe> {
        self.probes
            .get(position)
            .ok_or_else(|| Error::invalid(format!("no probe at position {position}")))
    }

    /// Runs the anchor prefix to position `p` and applies that probe.
    pub fn probe_distributions(
        &self,
        anchor: &AnchorModel,
        position: usize,
        batch: &Tensor,
    ) -> Result<Tensor> {
        if anchor.id != self.anchor_id {
            return Err(Error::invalid(format!(
                "probe set belongs to anchor '{}', got '{}'",
                self.anchor_id, anchor.id
            )));
        }
        let probe = self.probe(position)?;
        let acts = anchor.forward_prefix(position, batch)?;
        probe.distributions(&acts)
    }

    pub fn accuracy_trace(&self) -> &[TraceRow] {
        &self.trace
    }

    /// Writes the accuracy trace as CSV with columns
    /// block,epoch,split,accuracy.
    pub fn export_trace_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("block,epoch,split,accuracy\n");
        for row in &self.trace {
            let split = match row.split {
                SplitTag::Train => "train",
                SplitTag::Val => "val",
                SplitTag::Test => "test",
            };
            out.push_str(&format!(
                "{},{},{},{:.16e}\n",
                row.position, row.epoch, split, row.accuracy
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn check_frozen(anchor: &AnchorModel) -> Result<()> {
    if !anchor.frozen() {
        return Err(Error::State(format!(
            "anchor '{}' must be frozen before probe training",
            anchor.id
        )));
    }
    Ok(())
}

fn record_accuracies(
    probes: &[Probe],
    anchor: &AnchorModel,
    ds: &Dataset,
    split: SplitTag,
    epoch: usize,
    trace: &mut Vec<TraceRow>,
) -> Result<()> {
    let record = anchor.collect_activations(&ds.inputs)?;
    for probe in probes {
        let acts = record.position(probe.position)?;
        trace.push(TraceRow {
            position: probe.position,
            epoch,
            split,
            accuracy: probe.accuracy(acts, &ds.labels)?,
        });
    }
    Ok(())
}

/// Trains one probe per activation position of a frozen anchor. Each
/// mini-batch extracts all activations with a single anchor pass (counted),
/// then steps every probe on its own slice.
pub fn train_probeset(
    anchor: &AnchorModel,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &ProbeTrainConfig,
) -> Result<ProbeSet> {
    check_frozen(anchor)?;
    if train.input_dim() != anchor.input_dim || train.num_classes != anchor.num_classes {
        return Err(Error::invalid(
            "dataset shape does not match anchor input_dim/num_classes",
        ));
    }
    if cfg.lr <= 0.0 || cfg.batch_size == 0 {
        return Err(Error::invalid("probe training needs lr > 0 and batch_size >= 1"));
    }
    let digest_before = anchor.weight_digest();
    let depth = anchor.depth();
    let mut probes: Vec<Probe> = (0..depth)
        .map(|p| {
            let dim = anchor.activation_width(p)?;
            Ok(Probe::zeros(&anchor.id, p, dim, anchor.num_classes))
        })
        .collect::<Result<_>>()?;

    let mut trace = Vec::new();
    record_accuracies(&probes, anchor, train, SplitTag::Train, 0, &mut trace)?;
    if let Some(v) = val {
        record_accuracies(&probes, anchor, v, SplitTag::Val, 0, &mut trace)?;
    }

    let mut loss_trace = vec![Vec::with_capacity(cfg.epochs); depth];
    let mut forward_passes = 0u64;
    let mut rng = Rng::new(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_losses = vec![0.0; depth];
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let x = train.inputs.select_rows(chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            // one anchor pass serves every probe
            let record = anchor.collect_activations(&x)?;
            forward_passes += 1;
            for probe in probes.iter_mut() {
                let acts = record.position(probe.position)?;
                epoch_losses[probe.position] += probe.step(acts, &labels, cfg.lr)?;
            }
            batches += 1;
        }
        for (p, total) in epoch_losses.into_iter().enumerate() {
            loss_trace[p].push(total / batches.max(1) as f64);
        }
        record_accuracies(&probes, anchor, train, SplitTag::Train, epoch, &mut trace)?;
        if let Some(v) = val {
            record_accuracies(&probes, anchor, v, SplitTag::Val, epoch, &mut trace)?;
        }
    }

    if anchor.weight_digest() != digest_before {
        return Err(Error::State(format!(
            "anchor '{}' weights changed during probe training",
            anchor.id
        )));
    }
    Ok(ProbeSet {
        anchor_id: anchor.id.clone(),
        anchor_digest: digest_before,
        probes,
        config: *cfg,
        anchor_forward_passes: forward_passes,
        trace,
        loss_trace,
    })
}

/// Trains a single probe with the same seeded batch stream as
/// [`train_probeset`]. With zero init and a frozen anchor this produces
/// bit-identical weights to the jointly trained probe at the same position.
pub fn train_single_probe(
    anchor: &AnchorModel,
    position: usize,
    train: &Dataset,
    cfg: &ProbeTrainConfig,
) -> Result<Probe> {
    check_frozen(anchor)?;
    let dim = anchor.activation_width(position)?;
    if position >= anchor.depth() {
        return Err(Error::invalid(format!(
            "no probe position {position} in depth {}",
            anchor.depth()
        )));
    }
    let mut probe = Probe::zeros(&anchor.id, position, dim, anchor.num_classes);
    let mut rng = Rng::new(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let x = train.inputs.select_rows(chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let acts = anchor.forward_prefix(position, &x)?;
            probe.step(&acts, &labels, cfg.lr)?;
        }
    }
    Ok(probe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::{train_anchor, AnchorModel, StageSpec, TrainConfig};
    use crate::data::gen_blobs;

    fn frozen_anchor(seed: u64) -> (AnchorModel, Dataset) {
        let ds = gen_blobs(3, 60, 4, 0.5, seed).unwrap();
        let mut anchor = AnchorModel::new(
            "a",
            4,
            3,
            &[StageSpec {
                hidden_dim: 8,
                num_blocks: 3,
            }],
            seed,
        )
        .unwrap();
        train_anchor(
            &mut anchor,
            &ds,
            &TrainConfig {
                epochs: 10,
                lr: 0.05,
                batch_size: 32,
                seed,
            },
        )
        .unwrap();
        anchor.freeze();
        (anchor, ds)
    }

    #[test]
    fn rejects_unfrozen_anchor() {
        let ds = gen_blobs(3, 10, 4, 0.3, 1).unwrap();
        let anchor = AnchorModel::new(
            "u",
            4,
            3,
            &[StageSpec {
                hidden_dim: 8,
                num_blocks: 2,
            }],
            1,
        )
        .unwrap();
        let err = train_probeset(&anchor, &ds, None, &ProbeTrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn forward_counter_is_independent_of_probe_count() {
        let (anchor, ds) = frozen_anchor(2);
        let cfg = ProbeTrainConfig {
            epochs: 3,
            lr: 0.1,
            batch_size: 32,
            seed: 5,
        };
        let set = train_probeset(&anchor, &ds, None, &cfg).unwrap();
        let batches_per_epoch = ds.len().div_ceil(32) as u64;
        assert_eq!(set.anchor_forward_passes, batches_per_epoch * 3);
        assert_eq!(set.depth(), anchor.depth());
    }

    #[test]
    fn zero_epochs_leaves_probes_uniform() {
        let (anchor, ds) = frozen_anchor(3);
        let cfg = ProbeTrainConfig {
            epochs: 0,
            lr: 0.1,
            batch_size: 32,
            seed: 5,
        };
        let set = train_probeset(&anchor, &ds, None, &cfg).unwrap();
        assert_eq!(set.anchor_forward_passes, 0);
        let probs = set
            .probe_distributions(&anchor, 1, &ds.inputs)
            .unwrap();
        for r in 0..probs.rows() {
            for &p in probs.row(r) {
                assert!((p - 1.0 / 3.0).abs() < 1e-12, "zero probe not uniform: {p}");
            }
        }
        // untrained accuracy sits near chance for balanced data
        for row in set.accuracy_trace() {
            assert!(
                (row.accuracy - 1.0 / 3.0).abs() <= 0.05,
                "untrained accuracy {} at position {}",
                row.accuracy,
                row.position
            );
        }
    }

    #[test]
    fn anchor_digest_unchanged_by_probe_training() {
        let (anchor, ds) = frozen_anchor(4);
        let before = anchor.weight_digest();
        let set = train_probeset(&anchor, &ds, None, &ProbeTrainConfig::default()).unwrap();
        assert_eq!(anchor.weight_digest(), before);
        assert_eq!(set.anchor_digest, before);
    }

    #[test]
    fn joint_training_equals_independent_training() {
        let (anchor, ds) = frozen_anchor(5);
        let cfg = ProbeTrainConfig {
            epochs: 4,
            lr: 0.1,
            batch_size: 32,
            seed: 9,
        };
        let set = train_probeset(&anchor, &ds, None, &cfg).unwrap();
        for position in 0..anchor.depth() {
            let solo = train_single_probe(&anchor, position, &ds, &cfg).unwrap();
            assert_eq!(
                solo.weight,
                set.probes[position].weight,
                "probe {position} weights diverge"
            );
            assert_eq!(solo.bias, set.probes[position].bias);
        }
    }

    #[test]
    fn first_epoch_loss_decreases() {
        for seed in 1..=5 {
            let (anchor, ds) = frozen_anchor(seed);
            let cfg = ProbeTrainConfig {
                epochs: 2,
                lr: 0.1,
                batch_size: 32,
                seed,
            };
            let set = train_probeset(&anchor, &ds, None, &cfg).unwrap();
            for (p, losses) in set.loss_trace.iter().enumerate() {
                assert!(
                    losses[1] < losses[0],
                    "probe {p} seed {seed}: loss {} -> {}",
                    losses[0],
                    losses[1]
                );
            }
        }
    }

    #[test]
    fn probe_distribution_rows_sum_to_one_and_deterministic() {
        let (anchor, ds) = frozen_anchor(6);
        let set = train_probeset(
            &anchor,
            &ds,
            None,
            &ProbeTrainConfig {
                epochs: 3,
                lr: 0.1,
                batch_size: 32,
                seed: 2,
            },
        )
        .unwrap();
        let a = set.probe_distributions(&anchor, 2, &ds.inputs).unwrap();
        let b = set.probe_distributions(&anchor, 2, &ds.inputs).unwrap();
        assert_eq!(a, b);
        for r in 0..a.rows() {
            let s: f64 = a.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        assert!(set.probe_distributions(&anchor, 99, &ds.inputs).is_err());
    }

    #[test]
    fn trace_csv_export() {
        let (anchor, ds) = frozen_anchor(7);
        let set = train_probeset(
            &anchor,
            &ds,
            Some(&ds),
            &ProbeTrainConfig {
                epochs: 1,
                lr: 0.1,
                batch_size: 32,
                seed: 2,
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        set.export_trace_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("block,epoch,split,accuracy\n"));
        // epochs 0 and 1, two splits, depth probes
        assert_eq!(text.lines().count(), 1 + 2 * 2 * anchor.depth());
    }
}
