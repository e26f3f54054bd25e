//! Stitch layers and stitched supernetworks.
//!
//! A stitch layer is the affine map carrying source activations into the
//! target's expected activation space. Layers are initialized by ridge
//! least squares on paired activations from a shared input batch, then
//! finetuned with per-batch random config sampling. Anchors stay frozen
//! throughout; the weight digests recorded at construction are re-checked
//! after every mutating operation.

use serde::{Deserialize, Serialize};

use crate::anchors::{suffix_input_grad, AnchorModel};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::ridge_affine_fit;
use crate::rng::Rng;
use crate::selection::{StitchConfig, StitchPlan};
use crate::tensor::{affine_backward, affine_forward, Tensor};

pub const STITCH_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StitchLayer {
    pub config: StitchConfig,
    /// source width x target width at the stitch point.
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

impl StitchLayer {
    pub fn apply(&self, source_acts: &Tensor) -> Result<Tensor> {
        affine_forward(source_acts, &self.weight, &self.bias)
    }
}

/// Least-squares initialization on paired activations computed from the
/// same input batch: argmin over (W, b) of ||[src 1][W; b] - tgt||^2 with a
/// small ridge.
pub fn init_stitch_layer(
    config: &StitchConfig,
    source_acts: &Tensor,
    target_acts: &Tensor,
) -> Result<StitchLayer> {
    if source_acts.rows() != target_acts.rows() {
        return Err(Error::invalid(format!(
            "stitch init row mismatch: {} source rows vs {} target rows",
            source_acts.rows(),
            target_acts.rows()
        )));
    }
    let fit = ridge_affine_fit(source_acts, target_acts, STITCH_RIDGE)?;
    Ok(StitchLayer {
        config: config.clone(),
        weight: fit.weight,
        bias: fit.bias,
    })
}

/// Per-config loss samples recorded during finetuning: (epoch, batch step
/// within the run, loss).
pub type LossTrace = Vec<(usize, usize, f64)>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StitchedSupernet {
    pub plan: StitchPlan,
    pub source_digest: String,
    pub target_digest: String,
    pub layers: Vec<StitchLayer>,
    initialized: bool,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 20,
            lr: 0.05,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Per-config evaluation result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigEval {
    pub config: StitchConfig,
    pub flops: u64,
    pub accuracy: f64,
}

impl StitchedSupernet {
    /// Builds an uninitialized supernet over a plan. Both anchors must be
    /// frozen; the plan's configs must reference exactly these anchors.
    pub fn new(source: &AnchorModel, target: &AnchorModel, plan: StitchPlan) -> Result<Self> {
        if !source.frozen() || !target.frozen() {
            return Err(Error::State(
                "both anchors must be frozen before stitching".into(),
            ));
        }
        for pc in &plan.configs {
            if pc.config.source_id != source.id || pc.config.target_id != target.id {
                return Err(Error::invalid(format!(
                    "plan config {} does not match anchors '{}' -> '{}'",
                    pc.config.label(),
                    source.id,
                    target.id
                )));
            }
        }
        if plan.configs.is_empty() {
            return Err(Error::invalid("plan has no configs to stitch"));
        }
        Ok(StitchedSupernet {
            plan,
            source_digest: source.weight_digest(),
            target_digest: target.weight_digest(),
            layers: Vec::new(),
            initialized: false,
        })
    }

    pub fn initialized(&self) -> bool {
        self.initialized
    }

    fn check_anchors(&self, source: &AnchorModel, target: &AnchorModel) -> Result<()> {
        if source.weight_digest() != self.source_digest
            || target.weight_digest() != self.target_digest
        {
            return Err(Error::State(
                "anchor weights do not match the digests recorded at construction".into(),
            ));
        }
        Ok(())
    }

    /// Initializes every layer from paired activations on `init_batch`.
    /// The batch should hold at least as many rows as the widest stitch
    /// dimension for the normal equations to be well posed.
    pub fn init_layers(
        &mut self,
        source: &AnchorModel,
        target: &AnchorModel,
        init_batch: &Tensor,
    ) -> Result<()> {
        self.check_anchors(source, target)?;
        let mut layers = Vec::with_capacity(self.plan.configs.len());
        let src_record = source.collect_activations(init_batch)?;
        let tgt_record = target.collect_activations(init_batch)?;
        for pc in &self.plan.configs {
            let src = src_record.position(pc.config.source_pos)?;
            let tgt = tgt_record.position(pc.config.target_pos)?;
            layers.push(init_stitch_layer(&pc.config, src, tgt)?);
        }
        self.layers = layers;
        self.initialized = true;
        self.check_anchors(source, target)
    }

    pub fn layer_for(&self, config: &StitchConfig) -> Result<&StitchLayer> {
        self.layers
            .iter()
            .find(|l| &l.config == config)
            .ok_or_else(|| Error::invalid(format!("unknown config {}", config.label())))
    }

    /// g_suffix(T(f_prefix(batch))): probability rows for one config.
    pub fn forward_stitched(
        &self,
        source: &AnchorModel,
        target: &AnchorModel,
        config: &StitchConfig,
        batch: &Tensor,
    ) -> Result<Tensor> {
        let layer = self.layer_for(config)?;
        let src_acts = source.forward_prefix(config.source_pos, batch)?;
        let mapped = layer.apply(&src_acts)?;
        target.forward_suffix(config.target_pos, &mapped)
    }

    /// Finetunes stitch layers only: each mini-batch samples one config
    /// uniformly and takes an SGD step on that config's layer. Returns one
    /// loss trace per plan config.
    pub fn finetune(
        &mut self,
        source: &AnchorModel,
        target: &AnchorModel,
        train: &Dataset,
        cfg: &FinetuneConfig,
    ) -> Result<Vec<LossTrace>> {
        if !self.initialized {
            return Err(Error::State(
                "stitch layers must be initialized before finetuning".into(),
            ));
        }
        self.check_anchors(source, target)?;
        if cfg.lr <= 0.0 || cfg.batch_size == 0 {
            return Err(Error::invalid("finetune needs lr > 0 and batch_size >= 1"));
        }
        let mut traces: Vec<LossTrace> = vec![Vec::new(); self.layers.len()];
        let mut rng = Rng::new(cfg.seed);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut step = 0usize;
        for epoch in 0..cfg.epochs {
            rng.shuffle(&mut order);
            for chunk in order.chunks(cfg.batch_size) {
                let pick = rng.index(self.layers.len());
                let x = train.inputs.select_rows(chunk)?;
                let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
                let loss = self.train_layer_step(source, target, pick, &x, &labels, cfg.lr)?;
                traces[pick].push((epoch, step, loss));
                step += 1;
            }
        }
        self.check_anchors(source, target)?;
        Ok(traces)
    }

    fn train_layer_step(
        &mut self,
        source: &AnchorModel,
        target: &AnchorModel,
        layer_idx: usize,
        x: &Tensor,
        labels: &[usize],
        lr: f64,
    ) -> Result<f64> {
        let config = self.layers[layer_idx].config.clone();
        let src_acts = source.forward_prefix(config.source_pos, x)?;
        let mapped = self.layers[layer_idx].apply(&src_acts)?;
        let (loss, dmapped) = suffix_input_grad(target, config.target_pos, &mapped, labels)?;
        let layer = &mut self.layers[layer_idx];
        let (dw, db, _) = affine_backward(&src_acts, &layer.weight, &dmapped)?;
        for (p, g) in layer.weight.data_mut().iter_mut().zip(dw.data()) {
            *p -= lr * g;
        }
        for (p, g) in layer.bias.iter_mut().zip(&db) {
            *p -= lr * g;
        }
        layer.weight.check_finite("stitch layer update")?;
        Ok(loss)
    }

    /// Exact top-1 accuracy per config over the full test split.
    pub fn evaluate(
        &self,
        source: &AnchorModel,
        target: &AnchorModel,
        test: &Dataset,
    ) -> Result<Vec<ConfigEval>> {
        if !self.initialized {
            return Err(Error::State("stitch layers are not initialized".into()));
        }
        if test.is_empty() {
            return Err(Error::invalid("evaluation needs a non-empty test set"));
        }
        self.check_anchors(source, target)?;
        let mut out = Vec::with_capacity(self.plan.configs.len());
        for pc in &self.plan.configs {
            let probs = self.forward_stitched(source, target, &pc.config, &test.inputs)?;
            let mut correct = 0usize;
            for (r, &label) in test.labels.iter().enumerate() {
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
            out.push(ConfigEval {
                config: pc.config.clone(),
                flops: pc.config.flops,
                accuracy: correct as f64 / test.len() as f64,
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::{stitched_flops, train_anchor, StageSpec, TrainConfig};
    use crate::data::gen_blobs;
    use crate::rng::Rng;
    use crate::selection::{Method, PlanConfig};

    fn frozen(id: &str, width: usize, depth: usize, seed: u64, ds: &Dataset) -> AnchorModel {
        let mut a = AnchorModel::new(
            id,
            ds.input_dim(),
            ds.num_classes,
            &[StageSpec {
                hidden_dim: width,
                num_blocks: depth,
            }],
            seed,
        )
        .unwrap();
        train_anchor(
            &mut a,
            ds,
            &TrainConfig {
                epochs: 10,
                lr: 0.05,
                batch_size: 32,
                seed,
            },
        )
        .unwrap();
        a.freeze();
        a
    }

    fn plan_for(source: &AnchorModel, target: &AnchorModel, pairs: &[(usize, usize)]) -> StitchPlan {
        let configs = pairs
            .iter()
            .map(|&(i, j)| PlanConfig {
                config: StitchConfig {
                    source_id: source.id.clone(),
                    target_id: target.id.clone(),
                    stage: 0,
                    source_pos: i,
                    target_pos: j,
                    flops: stitched_flops(source, i, target, j).unwrap(),
                },
                gamma: None,
                omega: None,
                sigma: None,
            })
            .collect();
        StitchPlan {
            method: Method::Klas,
            tau: Some(0.05),
            relative_tau: true,
            buckets: Vec::new(),
            configs,
            source_id: source.id.clone(),
            target_id: target.id.clone(),
        }
    }

    #[test]
    fn init_recovers_identity_on_equal_activations() {
        // full-rank activations: tgt = src pins W to the identity
        let mut rng = Rng::new(100);
        let acts = Tensor::random_normal(64, 8, 1.0, &mut rng);
        let config = StitchConfig {
            source_id: "a".into(),
            target_id: "b".into(),
            stage: 0,
            source_pos: 2,
            target_pos: 2,
            flops: 1,
        };
        let layer = init_stitch_layer(&config, &acts, &acts).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let expected = if r == c { 1.0 } else { 0.0 };
                assert!((layer.weight.get(r, c) - expected).abs() < 1e-6);
            }
        }
        for v in &layer.bias {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn identity_stitch_on_identical_anchors_reproduces_target() {
        let ds = gen_blobs(3, 60, 4, 0.5, 100).unwrap();
        let a = frozen("a", 8, 3, 101, &ds);
        let mut b = a.clone();
        b.id = "b".into();
        // identity-initialized T at the source's full depth: the stitched
        // network runs the same arithmetic as the target's full forward
        let i = a.depth();
        let plan = plan_for(&a, &b, &[(i, i)]);
        let mut net = StitchedSupernet::new(&a, &b, plan).unwrap();
        let mut eye = Tensor::zeros(8, 8);
        for d in 0..8 {
            eye.set(d, d, 1.0);
        }
        net.layers = vec![StitchLayer {
            config: net.plan.configs[0].config.clone(),
            weight: eye,
            bias: vec![0.0; 8],
        }];
        net.initialized = true;
        let stitched = net
            .forward_stitched(&a, &b, &net.plan.configs[0].config, &ds.inputs)
            .unwrap();
        let full = b.forward(&ds.inputs).unwrap();
        assert_eq!(stitched.data(), full.data());
        // and the evaluated accuracy matches the target's exactly
        let eval = net.evaluate(&a, &b, &ds).unwrap();
        assert_eq!(eval[0].accuracy, b.accuracy(&ds).unwrap());
    }

    #[test]
    fn init_exact_linear_relation() {
        let mut rng = Rng::new(102);
        let src = Tensor::random_normal(100, 6, 1.0, &mut rng);
        let m = Tensor::random_normal(6, 9, 1.0, &mut rng);
        let c: Vec<f64> = (0..9).map(|_| rng.normal()).collect();
        let tgt = src.matmul(&m).unwrap().add_row(&c).unwrap();
        let config = StitchConfig {
            source_id: "f".into(),
            target_id: "g".into(),
            stage: 0,
            source_pos: 1,
            target_pos: 1,
            flops: 1,
        };
        let layer = init_stitch_layer(&config, &src, &tgt).unwrap();
        let pred = layer.apply(&src).unwrap();
        let residual: f64 = pred
            .data()
            .iter()
            .zip(tgt.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert!(residual < 1e-8, "residual {residual}");
        // row-count mismatch is rejected
        let short = Tensor::zeros(10, 6);
        assert!(init_stitch_layer(&config, &short, &tgt).is_err());
    }

    #[test]
    fn init_is_locally_optimal_for_its_batch() {
        let mut rng = Rng::new(103);
        let src = Tensor::random_normal(80, 5, 1.0, &mut rng);
        let tgt = Tensor::random_normal(80, 7, 1.0, &mut rng);
        let config = StitchConfig {
            source_id: "f".into(),
            target_id: "g".into(),
            stage: 0,
            source_pos: 1,
            target_pos: 1,
            flops: 1,
        };
        let layer = init_stitch_layer(&config, &src, &tgt).unwrap();
        let base: f64 = layer
            .apply(&src)
            .unwrap()
            .data()
            .iter()
            .zip(tgt.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        for _ in 0..100 {
            let mut w = layer.weight.clone();
            let mut b = layer.bias.clone();
            // random direction of norm 1e-3 over all parameters
            let total = w.data().len() + b.len();
            let mut delta: Vec<f64> = (0..total).map(|_| rng.normal()).collect();
            let norm: f64 = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
            delta.iter_mut().for_each(|d| *d *= 1e-3 / norm);
            for (p, d) in w.data_mut().iter_mut().zip(&delta) {
                *p += d;
            }
            for (p, d) in b.iter_mut().zip(&delta[w.data().len()..]) {
                *p += d;
            }
            let perturbed: f64 = src
                .matmul(&w)
                .unwrap()
                .add_row(&b)
                .unwrap()
                .data()
                .iter()
                .zip(tgt.data())
                .map(|(a, t)| (a - t) * (a - t))
                .sum();
            assert!(
                perturbed >= base - 1e-12,
                "perturbation reduced residual: {base} -> {perturbed}"
            );
        }
    }

    #[test]
    fn finetune_freezes_anchors_and_isolates_layers() {
        let ds = gen_blobs(3, 80, 4, 0.8, 104).unwrap();
        let f = frozen("f", 6, 3, 105, &ds);
        let g = frozen("g", 12, 5, 106, &ds);
        let plan = plan_for(&f, &g, &[(1, 1), (2, 3)]);
        let mut net = StitchedSupernet::new(&f, &g, plan).unwrap();

        // finetune before init is a state error
        let err = net
            .finetune(&f, &g, &ds, &FinetuneConfig::default())
            .unwrap_err();
        assert!(matches!(err, Error::State(_)));

        net.init_layers(&f, &g, &ds.inputs).unwrap();
        let f_digest = f.weight_digest();
        let g_digest = g.weight_digest();

        // zero epochs leaves layers unchanged
        let w_before: Vec<Tensor> = net.layers.iter().map(|l| l.weight.clone()).collect();
        net.finetune(
            &f,
            &g,
            &ds,
            &FinetuneConfig {
                epochs: 0,
                lr: 0.05,
                batch_size: 32,
                seed: 7,
            },
        )
        .unwrap();
        for (l, w) in net.layers.iter().zip(&w_before) {
            assert_eq!(&l.weight, w);
        }

        let traces = net
            .finetune(
                &f,
                &g,
                &ds,
                &FinetuneConfig {
                    epochs: 4,
                    lr: 0.05,
                    batch_size: 32,
                    seed: 7,
                },
            )
            .unwrap();
        assert_eq!(f.weight_digest(), f_digest);
        assert_eq!(g.weight_digest(), g_digest);
        // every step trained exactly one config
        let total: usize = traces.iter().map(|t| t.len()).sum();
        let steps = 4 * ds.len().div_ceil(32);
        assert_eq!(total, steps);
    }

    #[test]
    fn single_config_loss_decreases() {
        let ds = gen_blobs(3, 100, 4, 0.8, 107).unwrap();
        let f = frozen("f", 6, 3, 108, &ds);
        let g = frozen("g", 12, 5, 109, &ds);
        // a deliberately mismatched pair so there is something to learn
        let plan = plan_for(&f, &g, &[(1, 3)]);
        let mut net = StitchedSupernet::new(&f, &g, plan).unwrap();
        net.init_layers(&f, &g, &ds.inputs).unwrap();
        // perturb the layer away from the least-squares optimum so the
        // first finetuning steps have visible room to improve
        let mut rng = Rng::new(1);
        for v in net.layers[0].weight.data_mut() {
            *v += 0.5 * rng.normal();
        }
        let traces = net
            .finetune(
                &f,
                &g,
                &ds,
                &FinetuneConfig {
                    epochs: 3,
                    lr: 0.05,
                    batch_size: 32,
                    seed: 11,
                },
            )
            .unwrap();
        let losses: Vec<f64> = traces[0].iter().map(|(_, _, l)| *l).collect();
        let head: f64 = losses[..3].iter().sum::<f64>() / 3.0;
        let n = losses.len();
        let tail: f64 = losses[n - 3..].iter().sum::<f64>() / 3.0;
        assert!(tail < head, "loss did not decrease: {head} -> {tail}");
    }

    #[test]
    fn evaluate_reports_probabilities_and_is_deterministic() {
        let ds = gen_blobs(3, 60, 4, 0.8, 110).unwrap();
        let f = frozen("f", 6, 3, 111, &ds);
        let g = frozen("g", 12, 5, 112, &ds);
        let plan = plan_for(&f, &g, &[(1, 1), (2, 2)]);
        let mut net = StitchedSupernet::new(&f, &g, plan).unwrap();
        net.init_layers(&f, &g, &ds.inputs).unwrap();
        let a = net.evaluate(&f, &g, &ds).unwrap();
        let b = net.evaluate(&f, &g, &ds).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.accuracy, y.accuracy);
            assert!((0.0..=1.0).contains(&x.accuracy));
            assert_eq!(x.flops, x.config.flops);
        }
        // distributions from the stitched forward are valid
        let probs = net
            .forward_stitched(&f, &g, &net.plan.configs[0].config, &ds.inputs)
            .unwrap();
        for r in 0..probs.rows() {
            let s: f64 = probs.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        // unknown config
        let stranger = StitchConfig {
            source_id: "f".into(),
            target_id: "g".into(),
            stage: 0,
            source_pos: 2,
            target_pos: 4,
            flops: 9,
        };
        assert!(net.forward_stitched(&f, &g, &stranger, &ds.inputs).is_err());
    }
}
