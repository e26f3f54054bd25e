//! Block-structured feedforward anchor models.
//!
//! An anchor is a sequence of affine+activation blocks grouped into stages
//! (a stage is a maximal run of blocks sharing a hidden width) followed by a
//! linear classifier head. Anchors support prefix execution (input through
//! block i), suffix execution (activations after block j through the head),
//! training, activation extraction, and FLOPs accounting.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{
    affine_backward, affine_forward, cross_entropy_batch, relu_backward, softmax_batch,
    softmax_ce_grad, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

/// A run of `num_blocks` blocks sharing `hidden_dim` as their output width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub hidden_dim: usize,
    pub num_blocks: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Block {
    pub spec: BlockSpec,
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnchorModel {
    pub id: String,
    pub stages: Vec<StageSpec>,
    pub blocks: Vec<Block>,
    pub input_dim: usize,
    pub num_classes: usize,
    pub head_weight: Tensor,
    pub head_bias: Vec<f64>,
    frozen: bool,
}

/// Per-position activations for one batch: `activations[p]` holds A_p, the
/// representation after p blocks (A_0 is the raw input).
#[derive(Debug, Clone)]
pub struct ActivationRecord {
    pub anchor_id: String,
    pub activations: Vec<Tensor>,
}

impl ActivationRecord {
    pub fn position(&self, p: usize) -> Result<&Tensor> {
        self.activations
            .get(p)
            .ok_or_else(|| Error::invalid(format!("activation position {p} out of range")))
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl AnchorModel {
    /// Builds an anchor with He-style random init. Block b of stage s maps
    /// the previous width to `stages[s].hidden_dim`; the first block starts
    /// from `input_dim`.
    pub fn new(
        id: impl Into<String>,
        input_dim: usize,
        num_classes: usize,
        stages: &[StageSpec],
        seed: u64,
    ) -> Result<AnchorModel> {
        if input_dim == 0 || num_classes < 2 {
            return Err(Error::invalid(
                "anchor needs input_dim >= 1 and num_classes >= 2",
            ));
        }
        if stages.is_empty() || stages.iter().any(|s| s.num_blocks == 0 || s.hidden_dim == 0) {
            return Err(Error::invalid("every stage needs >= 1 block and width >= 1"));
        }
        let mut rng = Rng::new(seed);
        let mut blocks = Vec::new();
        let mut prev = input_dim;
        for stage in stages {
            for _ in 0..stage.num_blocks {
                let spec = BlockSpec {
                    in_dim: prev,
                    out_dim: stage.hidden_dim,
                    activation: Activation::Relu,
                };
                let std = (2.0 / prev as f64).sqrt();
                blocks.push(Block {
                    spec,
                    weight: Tensor::random_normal(prev, stage.hidden_dim, std, &mut rng),
                    bias: vec![0.0; stage.hidden_dim],
                });
                prev = stage.hidden_dim;
            }
        }
        let std = (2.0 / prev as f64).sqrt();
        Ok(AnchorModel {
            id: id.into(),
            stages: stages.to_vec(),
            blocks,
            input_dim,
            num_classes,
            head_weight: Tensor::random_normal(prev, num_classes, std, &mut rng),
            head_bias: vec![0.0; num_classes],
            frozen: false,
        })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Width of activation position p: A_0 is the input, A_p (p >= 1) is
    /// block p's output.
    pub fn activation_width(&self, p: usize) -> Result<usize> {
        if p == 0 {
            Ok(self.input_dim)
        } else if p <= self.depth() {
            Ok(self.blocks[p - 1].spec.out_dim)
        } else {
            Err(Error::invalid(format!(
                "activation position {p} out of range for depth {}",
                self.depth()
            )))
        }
    }

    /// Stage index of activation position p, defined as the stage of the
    /// block that consumes A_p. Valid for p in 0..depth.
    pub fn stage_of_position(&self, p: usize) -> Result<usize> {
        if p >= self.depth() {
            return Err(Error::invalid(format!(
                "position {p} has no consuming block in depth {}",
                self.depth()
            )));
        }
        let mut block = 0;
        for (s, stage) in self.stages.iter().enumerate() {
            block += stage.num_blocks;
            if p < block {
                return Ok(s);
            }
        }
        unreachable!("stage specs partition the block list");
    }

    /// Activation positions belonging to the given stage.
    pub fn stage_positions(&self, stage: usize) -> Result<Vec<usize>> {
        if stage >= self.stages.len() {
            return Err(Error::invalid(format!("stage {stage} out of range")));
        }
        let start: usize = self.stages[..stage].iter().map(|s| s.num_blocks).sum();
        Ok((start..start + self.stages[stage].num_blocks).collect())
    }

    fn run_block(&self, b: usize, x: &Tensor) -> Result<Tensor> {
        let block = &self.blocks[b];
        let pre = affine_forward(x, &block.weight, &block.bias)?;
        Ok(match block.spec.activation {
            Activation::Relu => pre.relu(),
            Activation::Identity => pre,
        })
    }

    /// Runs blocks 1..=upto; upto = 0 returns the input unchanged.
    pub fn forward_prefix(&self, upto: usize, batch: &Tensor) -> Result<Tensor> {
        if upto > self.depth() {
            return Err(Error::invalid(format!(
                "prefix {upto} out of range for depth {}",
                self.depth()
            )));
        }
        if batch.cols() != self.input_dim {
            return Err(Error::invalid(format!(
                "batch width {} does not match input_dim {}",
                batch.cols(),
                self.input_dim
            )));
        }
        let mut x = batch.clone();
        for b in 0..upto {
            x = self.run_block(b, &x)?;
        }
        Ok(x)
    }

    /// Runs blocks after+1..=depth then the classifier head; rows of the
    /// result are softmax distributions. after = depth applies the head
    /// directly.
    pub fn forward_suffix(&self, after: usize, activations: &Tensor) -> Result<Tensor> {
        softmax_batch(&self.forward_suffix_logits(after, activations)?)
    }

    pub fn forward_suffix_logits(&self, after: usize, activations: &Tensor) -> Result<Tensor> {
        if after > self.depth() {
            return Err(Error::invalid(format!(
                "suffix start {after} out of range for depth {}",
                self.depth()
            )));
        }
        let expected = self.activation_width(after)?;
        if activations.cols() != expected {
            return Err(Error::invalid(format!(
                "activation width {} does not match position {after} width {expected}",
                activations.cols()
            )));
        }
        let mut x = activations.clone();
        for b in after..self.depth() {
            x = self.run_block(b, &x)?;
        }
        affine_forward(&x, &self.head_weight, &self.head_bias)
    }

    /// Full forward pass; rows are softmax distributions.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let features = self.forward_prefix(self.depth(), batch)?;
        self.forward_suffix(self.depth(), &features)
    }

    /// One pass collecting A_0..A_depth.
    pub fn collect_activations(&self, batch: &Tensor) -> Result<ActivationRecord> {
        if batch.cols() != self.input_dim {
            return Err(Error::invalid(format!(
                "batch width {} does not match input_dim {}",
                batch.cols(),
                self.input_dim
            )));
        }
        let mut acts = Vec::with_capacity(self.depth() + 1);
        acts.push(batch.clone());
        for b in 0..self.depth() {
            let next = self.run_block(b, &acts[b])?;
            acts.push(next);
        }
        Ok(ActivationRecord {
            anchor_id: self.id.clone(),
            activations: acts,
        })
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let probs = self.forward(batch)?;
        Ok((0..probs.rows())
            .map(|r| {
                let row = probs.row(r);
                let mut best = 0;
                for (i, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }

    pub fn accuracy(&self, ds: &Dataset) -> Result<f64> {
        let preds = self.predict(&ds.inputs)?;
        let correct = preds
            .iter()
            .zip(&ds.labels)
            .filter(|(p, l)| p == l)
            .count();
        Ok(correct as f64 / ds.len() as f64)
    }

    /// Per-sample FLOPs: 2 * in * out summed over every affine layer
    /// including the head. Biases and activations are not counted.
    pub fn flops(&self) -> u64 {
        let blocks: u64 = self
            .blocks
            .iter()
            .map(|b| affine_flops(b.spec.in_dim, b.spec.out_dim))
            .sum();
        blocks + self.head_flops()
    }

    /// FLOPs of blocks 1..=i.
    pub fn prefix_flops(&self, i: usize) -> u64 {
        self.blocks[..i]
            .iter()
            .map(|b| affine_flops(b.spec.in_dim, b.spec.out_dim))
            .sum()
    }

    /// FLOPs of blocks j+1..=depth, head excluded.
    pub fn suffix_flops(&self, j: usize) -> u64 {
        self.blocks[j..]
            .iter()
            .map(|b| affine_flops(b.spec.in_dim, b.spec.out_dim))
            .sum()
    }

    pub fn head_flops(&self) -> u64 {
        affine_flops(self.head_weight.rows(), self.num_classes)
    }

    /// SHA-256 over the canonical little-endian bytes of all parameters.
    pub fn weight_digest(&self) -> String {
        let mut hasher = Sha256::new();
        for block in &self.blocks {
            for v in block.weight.data() {
                hasher.update(v.to_le_bytes());
            }
            for v in &block.bias {
                hasher.update(v.to_le_bytes());
            }
        }
        for v in self.head_weight.data() {
            hasher.update(v.to_le_bytes());
        }
        for v in &self.head_bias {
            hasher.update(v.to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for byte in digest {
            let _ = write!(out, "{byte:02x}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("anchor serialization failed: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<AnchorModel> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("anchor parse failed: {e}")))
    }
}

pub fn affine_flops(in_dim: usize, out_dim: usize) -> u64 {
    2 * in_dim as u64 * out_dim as u64
}

/// FLOPs of the stitched composition: source prefix through block i, the
/// stitch layer, the target suffix after position j, and the target head.
pub fn stitched_flops(source: &AnchorModel, i: usize, target: &AnchorModel, j: usize) -> Result<u64> {
    if i > source.depth() || j > target.depth() {
        return Err(Error::invalid("stitch position out of range"));
    }
    let stitch = affine_flops(source.activation_width(i)?, target.activation_width(j)?);
    Ok(source.prefix_flops(i) + stitch + target.suffix_flops(j) + target.head_flops())
}

/// Mini-batch SGD on cross-entropy. Returns the per-epoch mean training
/// loss trace.
pub fn train_anchor(
    anchor: &mut AnchorModel,
    train: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if anchor.frozen {
        return Err(Error::State(format!(
            "anchor '{}' is frozen and cannot be trained",
            anchor.id
        )));
    }
    if train.input_dim() != anchor.input_dim || train.num_classes != anchor.num_classes {
        return Err(Error::invalid(
            "dataset shape does not match anchor input_dim/num_classes",
        ));
    }
    if cfg.lr <= 0.0 || cfg.batch_size == 0 {
        return Err(Error::invalid("training needs lr > 0 and batch_size >= 1"));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let x = train.inputs.select_rows(chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            epoch_loss += train_step(anchor, &x, &labels, cfg.lr)?;
            batches += 1;
        }
        trace.push(epoch_loss / batches.max(1) as f64);
    }
    Ok(trace)
}

/// One forward/backward pass with an SGD update on every block and the
/// head. Returns the batch loss.
fn train_step(anchor: &mut AnchorModel, x: &Tensor, labels: &[usize], lr: f64) -> Result<f64> {
    // forward, caching inputs and pre-activations per block
    let mut inputs = Vec::with_capacity(anchor.depth());
    let mut pres = Vec::with_capacity(anchor.depth());
    let mut cur = x.clone();
    for block in &anchor.blocks {
        let pre = affine_forward(&cur, &block.weight, &block.bias)?;
        let post = match block.spec.activation {
            Activation::Relu => pre.relu(),
            Activation::Identity => pre.clone(),
        };
        inputs.push(cur);
        pres.push(pre);
        cur = post;
    }
    let logits = affine_forward(&cur, &anchor.head_weight, &anchor.head_bias)?;
    let probs = softmax_batch(&logits)?;
    let loss = cross_entropy_batch(&probs, labels)?;

    // backward
    let dlogits = softmax_ce_grad(&probs, labels)?;
    let (dw_head, db_head, mut dx) = affine_backward(&cur, &anchor.head_weight, &dlogits)?;
    for b in (0..anchor.depth()).rev() {
        let dpre = match anchor.blocks[b].spec.activation {
            Activation::Relu => relu_backward(&pres[b], &dx)?,
            Activation::Identity => dx,
        };
        let (dw, db, dprev) = affine_backward(&inputs[b], &anchor.blocks[b].weight, &dpre)?;
        let block = &mut anchor.blocks[b];
        for (p, g) in block.weight.data_mut().iter_mut().zip(dw.data()) {
            *p -= lr * g;
        }
        for (p, g) in block.bias.iter_mut().zip(&db) {
            *p -= lr * g;
        }
        block.weight.check_finite("block weight update")?;
        dx = dprev;
    }
    for (p, g) in anchor.head_weight.data_mut().iter_mut().zip(dw_head.data()) {
        *p -= lr * g;
    }
    for (p, g) in anchor.head_bias.iter_mut().zip(&db_head) {
        *p -= lr * g;
    }
    anchor.head_weight.check_finite("head weight update")?;
    Ok(loss)
}

/// Loss and gradient w.r.t. the suffix input: mean cross-entropy of
/// forward_suffix(after, input) against the labels. Anchor weights are
/// read-only here; this is the path stitch-layer training backpropagates
/// through.
pub fn suffix_input_grad(
    anchor: &AnchorModel,
    after: usize,
    input: &Tensor,
    labels: &[usize],
) -> Result<(f64, Tensor)> {
    if after > anchor.depth() {
        return Err(Error::invalid("suffix start out of range"));
    }
    let mut inputs = Vec::new();
    let mut pres = Vec::new();
    let mut cur = input.clone();
    for b in after..anchor.depth() {
        let block = &anchor.blocks[b];
        let pre = affine_forward(&cur, &block.weight, &block.bias)?;
        let post = match block.spec.activation {
            Activation::Relu => pre.relu(),
            Activation::Identity => pre.clone(),
        };
        inputs.push(cur);
        pres.push(pre);
        cur = post;
    }
    let logits = affine_forward(&cur, &anchor.head_weight, &anchor.head_bias)?;
    let probs = softmax_batch(&logits)?;
    let loss = cross_entropy_batch(&probs, labels)?;

    let dlogits = softmax_ce_grad(&probs, labels)?;
    let (_, _, mut dx) = affine_backward(&cur, &anchor.head_weight, &dlogits)?;
    for (idx, b) in (after..anchor.depth()).enumerate().rev() {
        let dpre = match anchor.blocks[b].spec.activation {
            Activation::Relu => relu_backward(&pres[idx], &dx)?,
            Activation::Identity => dx,
        };
        let (_, _, dprev) = affine_backward(&inputs[idx], &anchor.blocks[b].weight, &dpre)?;
        dx = dprev;
    }
    Ok((loss, dx))
}

/// The default anchor family used by experiments: single-stage MLPs in
/// three sizes mirroring a Ti/S/B lineup.
pub fn default_family_specs() -> Vec<(String, Vec<StageSpec>)> {
    vec![
        (
            "ti".into(),
            vec![StageSpec {
                hidden_dim: 16,
                num_blocks: 4,
            }],
        ),
        (
            "s".into(),
            vec![StageSpec {
                hidden_dim: 32,
                num_blocks: 8,
            }],
        ),
        (
            "b".into(),
            vec![StageSpec {
                hidden_dim: 64,
                num_blocks: 8,
            }],
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;

    fn tiny_anchor(seed: u64) -> AnchorModel {
        AnchorModel::new(
            "tiny",
            4,
            3,
            &[StageSpec {
                hidden_dim: 8,
                num_blocks: 3,
            }],
            seed,
        )
        .unwrap()
    }

    #[test]
    fn prefix_zero_is_identity() {
        let anchor = tiny_anchor(1);
        let mut rng = Rng::new(2);
        let batch = Tensor::random_normal(5, 4, 1.0, &mut rng);
        let out = anchor.forward_prefix(0, &batch).unwrap();
        assert_eq!(out, batch);
    }

    #[test]
    fn prefix_then_head_equals_full_forward() {
        let anchor = tiny_anchor(3);
        let mut rng = Rng::new(4);
        let batch = Tensor::random_normal(6, 4, 1.0, &mut rng);
        let features = anchor.forward_prefix(anchor.depth(), &batch).unwrap();
        let via_suffix = anchor.forward_suffix(anchor.depth(), &features).unwrap();
        let full = anchor.forward(&batch).unwrap();
        assert_eq!(via_suffix, full);
    }

    #[test]
    fn prefix_suffix_composition_identity_all_positions() {
        let anchor = tiny_anchor(5);
        let mut rng = Rng::new(6);
        let batch = Tensor::random_normal(7, 4, 1.0, &mut rng);
        let full = anchor.forward(&batch).unwrap();
        for j in 0..=anchor.depth() {
            let acts = anchor.forward_prefix(j, &batch).unwrap();
            let probs = anchor.forward_suffix(j, &acts).unwrap();
            assert_eq!(probs, full, "composition identity broken at {j}");
        }
    }

    #[test]
    fn identity_blocks_pass_input_through() {
        let mut anchor = AnchorModel::new(
            "id",
            3,
            2,
            &[StageSpec {
                hidden_dim: 3,
                num_blocks: 2,
            }],
            0,
        )
        .unwrap();
        for block in &mut anchor.blocks {
            block.spec.activation = Activation::Identity;
            let mut eye = Tensor::zeros(3, 3);
            for d in 0..3 {
                eye.set(d, d, 1.0);
            }
            block.weight = eye;
            block.bias = vec![0.0; 3];
        }
        let mut rng = Rng::new(7);
        let batch = Tensor::random_normal(4, 3, 1.0, &mut rng);
        for i in 0..=anchor.depth() {
            assert_eq!(anchor.forward_prefix(i, &batch).unwrap(), batch);
        }
    }

    #[test]
    fn width_and_index_validation() {
        let anchor = tiny_anchor(8);
        let bad = Tensor::zeros(2, 5);
        assert!(anchor.forward_prefix(1, &bad).is_err());
        assert!(anchor.forward_prefix(4, &Tensor::zeros(2, 4)).is_err());
        assert!(anchor.forward_suffix(1, &Tensor::zeros(2, 4)).is_err());
    }

    #[test]
    fn flops_convention() {
        let single = AnchorModel::new(
            "one",
            4,
            2,
            &[StageSpec {
                hidden_dim: 3,
                num_blocks: 1,
            }],
            0,
        )
        .unwrap();
        // one 4->3 block (24) plus 3->2 head (12)
        assert_eq!(single.flops(), 36);
        assert_eq!(single.prefix_flops(1), 24);
        assert_eq!(affine_flops(4, 3), 24);
        assert_eq!(affine_flops(4, 3) + affine_flops(3, 2), 36);
    }

    #[test]
    fn flops_additive_over_blocks() {
        let anchor = tiny_anchor(9);
        let total: u64 = (0..anchor.depth())
            .map(|b| {
                affine_flops(
                    anchor.blocks[b].spec.in_dim,
                    anchor.blocks[b].spec.out_dim,
                )
            })
            .sum();
        assert_eq!(anchor.flops(), total + anchor.head_flops());
        for cut in 0..=anchor.depth() {
            assert_eq!(anchor.prefix_flops(cut) + anchor.suffix_flops(cut), total);
        }
    }

    #[test]
    fn training_zero_epochs_keeps_weights() {
        let mut anchor = tiny_anchor(10);
        let before = anchor.weight_digest();
        let ds = gen_blobs(3, 20, 4, 0.3, 11).unwrap();
        let trace = train_anchor(
            &mut anchor,
            &ds,
            &TrainConfig {
                epochs: 0,
                lr: 0.1,
                batch_size: 16,
                seed: 1,
            },
        )
        .unwrap();
        assert!(trace.is_empty());
        assert_eq!(anchor.weight_digest(), before);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let ds = gen_blobs(3, 30, 4, 0.3, 12).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            lr: 0.1,
            batch_size: 16,
            seed: 21,
        };
        let mut a = tiny_anchor(13);
        let mut b = tiny_anchor(13);
        let ta = train_anchor(&mut a, &ds, &cfg).unwrap();
        let tb = train_anchor(&mut b, &ds, &cfg).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(a.weight_digest(), b.weight_digest());
    }

    #[test]
    fn frozen_anchor_rejects_training() {
        let mut anchor = tiny_anchor(14);
        anchor.freeze();
        let ds = gen_blobs(3, 10, 4, 0.3, 15).unwrap();
        let err = train_anchor(
            &mut anchor,
            &ds,
            &TrainConfig {
                epochs: 1,
                lr: 0.1,
                batch_size: 8,
                seed: 1,
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn loss_trace_trends_down() {
        let ds = gen_blobs(3, 100, 4, 0.5, 16).unwrap();
        let mut anchor = tiny_anchor(17);
        let trace = train_anchor(
            &mut anchor,
            &ds,
            &TrainConfig {
                epochs: 20,
                lr: 0.05,
                batch_size: 32,
                seed: 2,
            },
        )
        .unwrap();
        // non-increasing after a smoothing window of 5
        let smooth: Vec<f64> = trace
            .windows(5)
            .map(|w| w.iter().sum::<f64>() / 5.0)
            .collect();
        for w in smooth.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-6,
                "smoothed loss increased: {} -> {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn save_load_round_trip() {
        let anchor = tiny_anchor(18);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("anchor.json");
        anchor.save(&path).unwrap();
        let loaded = AnchorModel::load(&path).unwrap();
        assert_eq!(loaded.weight_digest(), anchor.weight_digest());
        assert_eq!(loaded.id, anchor.id);
        assert_eq!(loaded.stages, anchor.stages);
    }

    #[test]
    fn stage_bookkeeping_two_stage_variant() {
        let anchor = AnchorModel::new(
            "two",
            4,
            3,
            &[
                StageSpec {
                    hidden_dim: 8,
                    num_blocks: 2,
                },
                StageSpec {
                    hidden_dim: 16,
                    num_blocks: 3,
                },
            ],
            19,
        )
        .unwrap();
        assert_eq!(anchor.depth(), 5);
        assert_eq!(anchor.stage_of_position(0).unwrap(), 0);
        assert_eq!(anchor.stage_of_position(1).unwrap(), 0);
        assert_eq!(anchor.stage_of_position(2).unwrap(), 1);
        assert_eq!(anchor.stage_of_position(4).unwrap(), 1);
        assert!(anchor.stage_of_position(5).is_err());
        assert_eq!(anchor.stage_positions(0).unwrap(), vec![0, 1]);
        assert_eq!(anchor.stage_positions(1).unwrap(), vec![2, 3, 4]);
        // widths: A_2 is still the first stage's output width
        assert_eq!(anchor.activation_width(2).unwrap(), 8);
        assert_eq!(anchor.activation_width(3).unwrap(), 16);
    }

    #[test]
    fn suffix_input_grad_matches_finite_differences() {
        let anchor = tiny_anchor(20);
        let mut rng = Rng::new(21);
        let input = Tensor::random_normal(4, 8, 1.0, &mut rng);
        let labels = vec![0, 1, 2, 0];
        let after = 1;
        let (_, grad) = suffix_input_grad(&anchor, after, &input, &labels).unwrap();
        let h = 1e-5;
        for r in 0..input.rows() {
            for c in 0..input.cols() {
                let mut plus = input.clone();
                plus.set(r, c, input.get(r, c) + h);
                let mut minus = input.clone();
                minus.set(r, c, input.get(r, c) - h);
                let lp = cross_entropy_batch(
                    &anchor.forward_suffix(after, &plus).unwrap(),
                    &labels,
                )
                .unwrap();
                let lm = cross_entropy_batch(
                    &anchor.forward_suffix(after, &minus).unwrap(),
                    &labels,
                )
                .unwrap();
                let fd = (lp - lm) / (2.0 * h);
                let a = grad.get(r, c);
                assert!(
                    (a - fd).abs() <= 1e-4 * a.abs().max(fd.abs()).max(1e-3),
                    "grad mismatch at ({r},{c}): {a} vs {fd}"
                );
            }
        }
    }
}
