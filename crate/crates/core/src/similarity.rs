//! KL-divergence similarity between probe distributions, plus the baseline
//! representation-similarity metrics (MSE, CE, CKA, DM) and their
//! label-shuffle / class-conditional variants.
//!
//! Conventions: natural log; the source distribution is always the first
//! argument of the KL; both sides are smoothed by `LOG_EPS` inside the log
//! ratio so zero-probability classes from fresh probes stay finite.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorModel;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::ridge_affine_fit;
use crate::probenet::ProbeSet;
use crate::rng::Rng;
use crate::tensor::{ProbDist, Tensor, LOG_EPS};

/// D_KL(p || q) = sum_k p_k ln((p_k + eps) / (q_k + eps)).
pub fn kl_divergence(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    kl_divergence_rows(p.probs(), q.probs())
}

/// Slice form used on rows of batched distributions.
pub fn kl_divergence_rows(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid(format!(
            "KL dimension mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    if p.is_empty() {
        return Err(Error::invalid("KL of empty distributions"));
    }
    let mut total = 0.0;
    for (&pk, &qk) in p.iter().zip(q) {
        total += pk * ((pk + LOG_EPS) / (qk + LOG_EPS)).ln();
    }
    Ok(total)
}

/// Mean KL between two batches of probability rows.
fn mean_kl(p_rows: &Tensor, q_rows: &Tensor) -> Result<f64> {
    if p_rows.rows() != q_rows.rows() {
        return Err(Error::invalid("mean KL row-count mismatch"));
    }
    if p_rows.rows() == 0 {
        return Err(Error::invalid("mean KL over an empty batch"));
    }
    let mut total = 0.0;
    for r in 0..p_rows.rows() {
        total += kl_divergence_rows(p_rows.row(r), q_rows.row(r))?;
    }
    Ok(total / p_rows.rows() as f64)
}

/// Mean KL over the validation split between the source probe at position
/// `i` and the target probe at position `j`, with the source distribution
/// on the left. Positions must share a stage index.
pub fn theta(
    source: &AnchorModel,
    source_probes: &ProbeSet,
    target: &AnchorModel,
    target_probes: &ProbeSet,
    i: usize,
    j: usize,
    val: &Dataset,
) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::invalid("theta needs a non-empty validation set"));
    }
    if source.stage_of_position(i)? != target.stage_of_position(j)? {
        return Err(Error::invalid(format!(
            "positions {i} and {j} are not in the same stage"
        )));
    }
    let p = source_probes.probe_distributions(source, i, &val.inputs)?;
    let q = target_probes.probe_distributions(target, j, &val.inputs)?;
    mean_kl(&p, &q)
}

/// Theta values for every same-stage (source position, target position)
/// pair of one stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub source_id: String,
    pub target_id: String,
    pub stage: usize,
    pub source_positions: Vec<usize>,
    pub target_positions: Vec<usize>,
    /// theta[si][tj] for source_positions[si], target_positions[tj].
    pub theta: Vec<Vec<f64>>,
    pub num_samples: usize,
}

impl SimilarityMatrix {
    pub fn value_at(&self, i: usize, j: usize) -> Result<f64> {
        let si = self
            .source_positions
            .iter()
            .position(|&p| p == i)
            .ok_or_else(|| Error::invalid(format!("source position {i} not in matrix")))?;
        let tj = self
            .target_positions
            .iter()
            .position(|&p| p == j)
            .ok_or_else(|| Error::invalid(format!("target position {j} not in matrix")))?;
        Ok(self.theta[si][tj])
    }
}

/// Computes the full theta grid for every stage shared by the two anchors.
/// The source must have strictly lower FLOPs than the target.
pub fn similarity_matrices(
    source: &AnchorModel,
    source_probes: &ProbeSet,
    target: &AnchorModel,
    target_probes: &ProbeSet,
    val: &Dataset,
) -> Result<Vec<SimilarityMatrix>> {
    if source.flops() >= target.flops() {
        return Err(Error::invalid(format!(
            "source '{}' must have lower FLOPs than target '{}'",
            source.id, target.id
        )));
    }
    if val.is_empty() {
        return Err(Error::invalid("similarity needs a non-empty validation set"));
    }
    // one activation pass per anchor, then probe all positions
    let src_record = source.collect_activations(&val.inputs)?;
    let tgt_record = target.collect_activations(&val.inputs)?;
    let src_dists: Vec<Tensor> = (0..source.depth())
        .map(|p| {
            source_probes
                .probe(p)?
                .distributions(src_record.position(p)?)
        })
        .collect::<Result<_>>()?;
    let tgt_dists: Vec<Tensor> = (0..target.depth())
        .map(|p| {
            target_probes
                .probe(p)?
                .distributions(tgt_record.position(p)?)
        })
        .collect::<Result<_>>()?;

    let shared = source.stages.len().min(target.stages.len());
    let mut out = Vec::with_capacity(shared);
    for stage in 0..shared {
        let source_positions = source.stage_positions(stage)?;
        let target_positions = target.stage_positions(stage)?;
        let theta: Vec<Vec<f64>> = source_positions
            .par_iter()
            .map(|&i| {
                target_positions
                    .iter()
                    .map(|&j| mean_kl(&src_dists[i], &tgt_dists[j]))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        out.push(SimilarityMatrix {
            source_id: source.id.clone(),
            target_id: target.id.clone(),
            stage,
            source_positions,
            target_positions,
            theta,
            num_samples: val.len(),
        });
    }
    Ok(out)
}

/// Theta between consecutive positions of one anchor:
/// sigma[j] = theta(j, j+1), j in 0..depth-1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntraCapacityVector {
    pub anchor_id: String,
    pub sigma: Vec<f64>,
}

impl IntraCapacityVector {
    pub fn mean(&self) -> f64 {
        if self.sigma.is_empty() {
            0.0
        } else {
            self.sigma.iter().sum::<f64>() / self.sigma.len() as f64
        }
    }
}

pub fn intra_capacity(
    anchor: &AnchorModel,
    probes: &ProbeSet,
    val: &Dataset,
) -> Result<IntraCapacityVector> {
    if val.is_empty() {
        return Err(Error::invalid("intra capacity needs a non-empty validation set"));
    }
    let record = anchor.collect_activations(&val.inputs)?;
    let dists: Vec<Tensor> = (0..anchor.depth())
        .map(|p| probes.probe(p)?.distributions(record.position(p)?))
        .collect::<Result<_>>()?;
    let sigma = (0..anchor.depth().saturating_sub(1))
        .map(|j| mean_kl(&dists[j], &dists[j + 1]))
        .collect::<Result<Vec<f64>>>()?;
    Ok(IntraCapacityVector {
        anchor_id: anchor.id.clone(),
        sigma,
    })
}

/// Mean KL between the two anchors' own head distributions over the
/// validation split, the smaller anchor's output on the left. No probes
/// involved.
pub fn last_block_kl(f: &AnchorModel, g: &AnchorModel, val: &Dataset) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::invalid("last_block_kl needs a non-empty validation set"));
    }
    let p = f.forward(&val.inputs)?;
    let q = g.forward(&val.inputs)?;
    mean_kl(&p, &q)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMetric {
    Mse,
    Ce,
    Cka,
    Dm,
}

/// Baseline pair scores. `f_data`/`g_data` are activation batches for MSE,
/// DM, and CKA; for CE, `f_data` must hold the source probe's probability
/// rows and `g_data` is unused. Higher is more similar for CKA, lower for
/// the rest.
pub fn baseline_metric(
    kind: BaselineMetric,
    f_data: &Tensor,
    g_data: &Tensor,
    labels: Option<&[usize]>,
) -> Result<f64> {
    match kind {
        BaselineMetric::Mse => {
            if f_data.shape() != g_data.shape() {
                return Err(Error::invalid(format!(
                    "MSE needs equal activation shapes, got {:?} vs {:?}",
                    f_data.shape(),
                    g_data.shape()
                )));
            }
            if f_data.rows() == 0 {
                return Err(Error::invalid("MSE over an empty batch"));
            }
            let total: f64 = f_data
                .data()
                .iter()
                .zip(g_data.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            Ok(total / f_data.rows() as f64)
        }
        BaselineMetric::Ce => {
            let labels =
                labels.ok_or_else(|| Error::invalid("CE metric requires labels"))?;
            if labels.len() != f_data.rows() {
                return Err(Error::invalid("CE metric batch/label mismatch"));
            }
            let mut total = 0.0;
            for (r, &y) in labels.iter().enumerate() {
                let row = f_data.row(r);
                if y >= row.len() {
                    return Err(Error::invalid(format!("label {y} out of range")));
                }
                total += -(row[y] + LOG_EPS).ln();
            }
            Ok(total)
        }
        BaselineMetric::Cka => linear_cka(f_data, g_data),
        BaselineMetric::Dm => {
            let fit = ridge_affine_fit(f_data, g_data, 1e-8)?;
            Ok(fit.residual)
        }
    }
}

/// Linear CKA on column-centered activation matrices:
/// ||F^T G||_F^2 / (||F^T F||_F ||G^T G||_F).
pub fn linear_cka(f: &Tensor, g: &Tensor) -> Result<f64> {
    if f.rows() != g.rows() {
        return Err(Error::invalid("CKA needs equal sample counts"));
    }
    if f.rows() < 2 {
        return Err(Error::invalid("CKA needs at least 2 samples"));
    }
    let fc = f.center_columns();
    let gc = g.center_columns();
    let cross = fc.transpose().matmul(&gc)?.frobenius_norm();
    let fnorm = fc.transpose().matmul(&fc)?.frobenius_norm();
    let gnorm = gc.transpose().matmul(&gc)?.frobenius_norm();
    if fnorm == 0.0 || gnorm == 0.0 {
        return Err(Error::invalid("CKA of a zero-variance representation"));
    }
    Ok(cross * cross / (fnorm * gnorm))
}

/// CKA computed separately per class and averaged. Classes with fewer than
/// 2 samples are skipped; if every class is skipped this is an error.
pub fn class_conditional_cka(f: &Tensor, g: &Tensor, labels: &[usize]) -> Result<f64> {
    if f.rows() != g.rows() || f.rows() != labels.len() {
        return Err(Error::invalid("class-conditional CKA shape mismatch"));
    }
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut total = 0.0;
    let mut used = 0usize;
    for c in 0..num_classes {
        let idx: Vec<usize> = (0..labels.len()).filter(|&r| labels[r] == c).collect();
        if idx.len() < 2 {
            continue;
        }
        let fc = f.select_rows(&idx)?;
        let gc = g.select_rows(&idx)?;
        match linear_cka(&fc, &gc) {
            Ok(v) => {
                total += v;
                used += 1;
            }
            // a class collapsed to zero variance contributes nothing
            Err(Error::InvalidInput(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::invalid(
            "class-conditional CKA: every class was skipped",
        ));
    }
    Ok(total / used as f64)
}

/// Returns a copy of the dataset with labels permuted by a seeded shuffle.
/// Retraining probes on the result removes class semantics while keeping
/// feature structure, which is what the shuffled-label score variant needs.
pub fn shuffle_labels(ds: &Dataset, seed: u64) -> Result<Dataset> {
    let mut labels = ds.labels.clone();
    Rng::new(seed).shuffle(&mut labels);
    let mut out = Dataset::new(ds.inputs.clone(), labels, ds.num_classes)?;
    out.split = ds.split;
    out.origin_indices = ds.origin_indices.clone();
    Ok(out)
}

/// Writes the theta grid as CSV: header row holds target positions, each
/// data row starts with its source position. Values use 17 significant
/// digits so a parse reproduces them bit-exactly.
pub fn export_heatmap(matrix: &SimilarityMatrix, path: &Path) -> Result<()> {
    if matrix.theta.is_empty() || matrix.theta[0].is_empty() {
        return Err(Error::invalid("cannot export an empty similarity matrix"));
    }
    let mut out = String::from("source_pos");
    for j in &matrix.target_positions {
        out.push_str(&format!(",{j}"));
    }
    out.push('\n');
    for (si, row) in matrix.theta.iter().enumerate() {
        out.push_str(&format!("{}", matrix.source_positions[si]));
        for v in row {
            out.push_str(&format!(",{v:.16e}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parses a heatmap CSV written by [`export_heatmap`].
pub fn parse_heatmap(path: &Path) -> Result<(Vec<usize>, Vec<usize>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty heatmap file".into()))?;
    let target_positions: Vec<usize> = header
        .split(',')
        .skip(1)
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Format(format!("bad target position '{s}'")))
        })
        .collect::<Result<_>>()?;
    let mut source_positions = Vec::new();
    let mut values = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let sp = parts
            .next()
            .ok_or_else(|| Error::Format("missing source position".into()))?;
        source_positions.push(
            sp.parse()
                .map_err(|_| Error::Format(format!("bad source position '{sp}'")))?,
        );
        let row: Vec<f64> = parts
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Format(format!("bad theta value '{s}'")))
            })
            .collect::<Result<_>>()?;
        if row.len() != target_positions.len() {
            return Err(Error::Format("ragged heatmap row".into()));
        }
        values.push(row);
    }
    Ok((source_positions, target_positions, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::{train_anchor, StageSpec, TrainConfig};
    use crate::data::gen_blobs;
    use crate::probenet::{train_probeset, ProbeTrainConfig};
    use approx::assert_abs_diff_eq;

    fn dist(v: &[f64]) -> ProbDist {
        ProbDist::new(v.to_vec()).unwrap()
    }

    #[test]
    fn kl_identity_is_zero() {
        let p = dist(&[0.2, 0.3, 0.5]);
        assert!(kl_divergence(&p, &p).unwrap().abs() <= 1e-10);
    }

    #[test]
    fn kl_hand_computed_value() {
        let p = dist(&[0.5, 0.5]);
        let q = dist(&[0.25, 0.75]);
        // 0.5 ln 2 + 0.5 ln(2/3)
        let expected = 0.5 * (2.0f64).ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert_abs_diff_eq!(kl_divergence(&p, &q).unwrap(), expected, epsilon = 1e-10);
        assert_abs_diff_eq!(expected, 0.14384, epsilon = 1e-5);
    }

    #[test]
    fn kl_is_asymmetric() {
        let p = dist(&[0.9, 0.1]);
        let q = dist(&[0.5, 0.5]);
        let forward = kl_divergence(&p, &q).unwrap();
        let backward = kl_divergence(&q, &p).unwrap();
        assert_abs_diff_eq!(forward, 0.3681, epsilon = 1e-3);
        assert_abs_diff_eq!(backward, 0.5108, epsilon = 1e-3);
        assert!((forward - backward).abs() > 0.1);
    }

    #[test]
    fn kl_dimension_mismatch() {
        let p = dist(&[0.5, 0.5]);
        let q = dist(&[0.4, 0.3, 0.3]);
        assert!(kl_divergence(&p, &q).is_err());
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        let mut rng = Rng::new(31);
        for _ in 0..10_000 {
            let k = 2 + rng.index(6);
            let mut p: Vec<f64> = (0..k).map(|_| rng.next_f64() + 1e-6).collect();
            let mut q: Vec<f64> = (0..k).map(|_| rng.next_f64() + 1e-6).collect();
            let ps: f64 = p.iter().sum();
            let qs: f64 = q.iter().sum();
            p.iter_mut().for_each(|v| *v /= ps);
            q.iter_mut().for_each(|v| *v /= qs);
            let kl = kl_divergence_rows(&p, &q).unwrap();
            assert!(kl >= -1e-9, "negative KL {kl}");
        }
    }

    fn trained_pair() -> (AnchorModel, ProbeSet, AnchorModel, ProbeSet, Dataset) {
        let ds = gen_blobs(3, 80, 4, 0.8, 40).unwrap();
        let mut f = AnchorModel::new(
            "small",
            4,
            3,
            &[StageSpec {
                hidden_dim: 6,
                num_blocks: 3,
            }],
            41,
        )
        .unwrap();
        let mut g = AnchorModel::new(
            "large",
            4,
            3,
            &[StageSpec {
                hidden_dim: 12,
                num_blocks: 4,
            }],
            42,
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 15,
            lr: 0.05,
            batch_size: 32,
            seed: 43,
        };
        train_anchor(&mut f, &ds, &cfg).unwrap();
        train_anchor(&mut g, &ds, &cfg).unwrap();
        f.freeze();
        g.freeze();
        let pcfg = ProbeTrainConfig {
            epochs: 10,
            lr: 0.1,
            batch_size: 32,
            seed: 44,
        };
        let pf = train_probeset(&f, &ds, None, &pcfg).unwrap();
        let pg = train_probeset(&g, &ds, None, &pcfg).unwrap();
        (f, pf, g, pg, ds)
    }

    #[test]
    fn theta_identical_probes_is_zero() {
        let (f, pf, _, _, ds) = trained_pair();
        for i in 0..f.depth() {
            let v = theta(&f, &pf, &f, &pf, i, i, &ds).unwrap();
            assert!(v.abs() <= 1e-10, "theta({i},{i}) = {v}");
        }
    }

    #[test]
    fn theta_is_mean_of_per_sample_kls() {
        let (f, pf, g, pg, ds) = trained_pair();
        let v = theta(&f, &pf, &g, &pg, 1, 2, &ds).unwrap();
        // independent summation oracle
        let p = pf.probe_distributions(&f, 1, &ds.inputs).unwrap();
        let q = pg.probe_distributions(&g, 2, &ds.inputs).unwrap();
        let mut total = 0.0;
        for r in 0..p.rows() {
            let mut kl = 0.0;
            for (a, b) in p.row(r).iter().zip(q.row(r)) {
                kl += a * ((a + LOG_EPS) / (b + LOG_EPS)).ln();
            }
            total += kl;
        }
        let oracle = total / p.rows() as f64;
        assert!((v - oracle).abs() <= 1e-12, "{v} vs {oracle}");
    }

    #[test]
    fn similarity_matrix_shape_direction_and_determinism() {
        let (f, pf, g, pg, ds) = trained_pair();
        let ms = similarity_matrices(&f, &pf, &g, &pg, &ds).unwrap();
        assert_eq!(ms.len(), 1);
        let m = &ms[0];
        assert_eq!(m.theta.len(), f.depth());
        assert_eq!(m.theta[0].len(), g.depth());
        for row in &m.theta {
            for &v in row {
                assert!(v >= -1e-9);
            }
        }
        let ms2 = similarity_matrices(&f, &pf, &g, &pg, &ds).unwrap();
        assert_eq!(m.theta, ms2[0].theta);
        // direction violation
        assert!(similarity_matrices(&g, &pg, &f, &pf, &ds).is_err());
    }

    #[test]
    fn intra_capacity_length_and_sign() {
        let (_, _, g, pg, ds) = trained_pair();
        let intra = intra_capacity(&g, &pg, &ds).unwrap();
        assert_eq!(intra.sigma.len(), g.depth() - 1);
        for &v in &intra.sigma {
            assert!(v >= -1e-9);
        }
    }

    #[test]
    fn last_block_kl_cases() {
        let (f, _, g, _, ds) = trained_pair();
        assert!(last_block_kl(&f, &f, &ds).unwrap().abs() <= 1e-10);
        let fg = last_block_kl(&f, &g, &ds).unwrap();
        let gf = last_block_kl(&g, &f, &ds).unwrap();
        assert!(fg >= 0.0 && gf >= 0.0);
        assert!((fg - gf).abs() > 1e-12, "KL unexpectedly symmetric");
    }

    #[test]
    fn cka_self_is_one_and_range() {
        let mut rng = Rng::new(50);
        let f = Tensor::random_normal(40, 6, 1.0, &mut rng);
        assert_abs_diff_eq!(linear_cka(&f, &f).unwrap(), 1.0, epsilon = 1e-9);
        for _ in 0..100 {
            let a = Tensor::random_normal(30, 5, 1.0, &mut rng);
            let b = Tensor::random_normal(30, 7, 1.0, &mut rng);
            let v = linear_cka(&a, &b).unwrap();
            assert!((0.0..=1.0 + 1e-9).contains(&v), "CKA out of range: {v}");
        }
    }

    #[test]
    fn cka_orthogonal_invariance() {
        let mut rng = Rng::new(51);
        let f = Tensor::random_normal(40, 5, 1.0, &mut rng);
        // random orthogonal matrix via Gram-Schmidt on a Gaussian draw
        let raw = Tensor::random_normal(5, 5, 1.0, &mut rng);
        let mut q: Vec<Vec<f64>> = Vec::new();
        for c in 0..5 {
            let mut v: Vec<f64> = (0..5).map(|r| raw.get(r, c)).collect();
            for prev in &q {
                let dot: f64 = v.iter().zip(prev.iter()).map(|(a, b)| a * b).sum();
                for (vi, pi) in v.iter_mut().zip(prev.iter()) {
                    *vi -= dot * pi;
                }
            }
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            q.push(v);
        }
        let mut qm = Tensor::zeros(5, 5);
        for (c, col) in q.iter().enumerate() {
            for (r, &v) in col.iter().enumerate() {
                qm.set(r, c, v);
            }
        }
        let fq = f.matmul(&qm).unwrap();
        let base = linear_cka(&f, &f).unwrap();
        let rotated = linear_cka(&f, &fq).unwrap();
        assert_abs_diff_eq!(base, rotated, epsilon = 1e-6);
    }

    #[test]
    fn cka_isotropic_scale_invariance() {
        let mut rng = Rng::new(52);
        let f = Tensor::random_normal(30, 4, 1.0, &mut rng);
        let g = Tensor::random_normal(30, 6, 1.0, &mut rng);
        let base = linear_cka(&f, &g).unwrap();
        let scaled = linear_cka(&f.scale(7.3).unwrap(), &g.scale(0.02).unwrap()).unwrap();
        assert_abs_diff_eq!(base, scaled, epsilon = 1e-6);
    }

    #[test]
    fn dm_exact_linear_relation_and_ridge_monotonicity() {
        let mut rng = Rng::new(53);
        let f = Tensor::random_normal(50, 4, 1.0, &mut rng);
        let w = Tensor::random_normal(4, 6, 1.0, &mut rng);
        let b: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let g = f.matmul(&w).unwrap().add_row(&b).unwrap();
        let residual = baseline_metric(BaselineMetric::Dm, &f, &g, None).unwrap();
        assert!(residual < 1e-8, "DM residual {residual}");
        // residual shrinks toward zero as the ridge relaxes
        let mut prev = f64::INFINITY;
        for ridge in [1e-2, 1e-4, 1e-6, 1e-8] {
            let fit = ridge_affine_fit(&f, &g, ridge).unwrap();
            assert!(fit.residual <= prev + 1e-12);
            prev = fit.residual;
        }
        assert!(prev < 1e-8);
    }

    #[test]
    fn mse_requires_equal_dims() {
        let a = Tensor::zeros(5, 3);
        let b = Tensor::zeros(5, 4);
        assert!(baseline_metric(BaselineMetric::Mse, &a, &b, None).is_err());
        let c = Tensor::zeros(5, 3);
        assert_eq!(baseline_metric(BaselineMetric::Mse, &a, &c, None).unwrap(), 0.0);
    }

    #[test]
    fn ce_metric_literal_sum() {
        let probs = Tensor::from_vec(2, 2, vec![0.5, 0.5, 0.25, 0.75]).unwrap();
        let v = baseline_metric(BaselineMetric::Ce, &probs, &probs, Some(&[0, 1])).unwrap();
        let expected = -(0.5f64 + LOG_EPS).ln() - (0.75f64 + LOG_EPS).ln();
        assert_abs_diff_eq!(v, expected, epsilon = 1e-12);
        assert!(baseline_metric(BaselineMetric::Ce, &probs, &probs, None).is_err());
    }

    #[test]
    fn class_conditional_cka_single_class_degenerates_to_vanilla() {
        let mut rng = Rng::new(54);
        let f = Tensor::random_normal(20, 4, 1.0, &mut rng);
        let g = Tensor::random_normal(20, 5, 1.0, &mut rng);
        let labels = vec![0usize; 20];
        let conditional = class_conditional_cka(&f, &g, &labels).unwrap();
        let vanilla = linear_cka(&f, &g).unwrap();
        assert_abs_diff_eq!(conditional, vanilla, epsilon = 1e-12);
        // every class having one sample is an error
        let singles: Vec<usize> = (0..20).collect();
        assert!(class_conditional_cka(&f, &g, &singles).is_err());
    }

    #[test]
    fn shuffled_labels_keep_inputs_and_balance() {
        let ds = gen_blobs(4, 25, 3, 0.2, 60).unwrap();
        let shuffled = shuffle_labels(&ds, 61).unwrap();
        assert_eq!(shuffled.inputs, ds.inputs);
        assert_ne!(shuffled.labels, ds.labels);
        let mut a = ds.labels.clone();
        let mut b = shuffled.labels.clone();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn heatmap_round_trip_and_errors() {
        let matrix = SimilarityMatrix {
            source_id: "f".into(),
            target_id: "g".into(),
            stage: 0,
            source_positions: vec![0, 1],
            target_positions: vec![0, 1],
            theta: vec![vec![0.1234567890123456, 0.2], vec![1e-15, 3.0]],
            num_samples: 10,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("heat.csv");
        export_heatmap(&matrix, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3); // header + 2 rows
        let (sp, tp, vals) = parse_heatmap(&path).unwrap();
        assert_eq!(sp, matrix.source_positions);
        assert_eq!(tp, matrix.target_positions);
        assert_eq!(vals, matrix.theta); // bit-exact

        let empty = SimilarityMatrix {
            source_id: "f".into(),
            target_id: "g".into(),
            stage: 0,
            source_positions: vec![],
            target_positions: vec![],
            theta: vec![],
            num_samples: 0,
        };
        assert!(export_heatmap(&empty, &path).is_err());
    }
}
