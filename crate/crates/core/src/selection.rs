//! Stitch-configuration scoring and selection.
//!
//! A stitch configuration (i, j) runs the source prefix through block i,
//! maps its activations into the target's position-j space with a stitch
//! layer, and continues with the target's blocks j+1 onward. Candidates are
//! scored by gamma = omega / sigma (cross-anchor distance over intra-anchor
//! capacity), partitioned into equal-width FLOPs buckets, and selected per
//! bucket as the argmin plus everything within the threshold slack. The
//! heuristic baselines (proportional block mapping, globally lowest theta,
//! and confidence cascades) live here too.

use serde::{Deserialize, Serialize};

use crate::anchors::{stitched_flops, AnchorModel};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::probenet::ProbeSet;
use crate::similarity::{
    intra_capacity, last_block_kl, similarity_matrices, IntraCapacityVector, SimilarityMatrix,
};

/// Floor for the capacity denominator of the stitch score.
pub const SIGMA_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StitchConfig {
    pub source_id: String,
    pub target_id: String,
    pub stage: usize,
    /// Source cut: the prefix runs blocks 1..=i, so i >= 1.
    pub source_pos: usize,
    /// Target entry: the suffix runs blocks j+1.., so j < target depth.
    pub target_pos: usize,
    pub flops: u64,
}

impl StitchConfig {
    pub fn label(&self) -> String {
        format!(
            "{}-{}:s{}:i{}j{}",
            self.source_id, self.target_id, self.stage, self.source_pos, self.target_pos
        )
    }
}

/// A configuration with its stitch-score decomposition. Baseline plans may
/// carry configs without scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredConfig {
    pub config: StitchConfig,
    pub gamma: f64,
    pub omega: f64,
    pub sigma: f64,
}

/// FLOPs interval [lo, hi) holding member configs sorted by FLOPs; the last
/// bucket of a layout is closed on the right.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bucket {
    pub lo: f64,
    pub hi: f64,
    /// Indices into the config list handed to [`build_buckets`].
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Klas,
    Snnet,
    Minkl,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Klas => write!(f, "klas"),
            Method::Snnet => write!(f, "snnet"),
            Method::Minkl => write!(f, "minkl"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanConfig {
    pub config: StitchConfig,
    pub gamma: Option<f64>,
    pub omega: Option<f64>,
    pub sigma: Option<f64>,
}

/// The selected candidate set, with enough bookkeeping to reproduce the
/// selection: threshold, bucket layout, and per-config scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StitchPlan {
    pub method: Method,
    pub tau: Option<f64>,
    /// true: cutoff = (1 + tau) * bucket min; false: cutoff = tau.
    pub relative_tau: bool,
    pub buckets: Vec<Bucket>,
    pub configs: Vec<PlanConfig>,
    pub source_id: String,
    pub target_id: String,
}

impl StitchPlan {
    pub fn config_set(&self) -> Vec<StitchConfig> {
        self.configs.iter().map(|c| c.config.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }
}

/// Gamma, omega, sigma for one (i, j) pair. Sigma at the last target
/// position (which has no successor probe) falls back to the anchor's mean
/// sigma; the denominator is floored at `SIGMA_FLOOR`.
pub fn stitch_score(
    matrix: &SimilarityMatrix,
    intra: &IntraCapacityVector,
    i: usize,
    j: usize,
) -> Result<(f64, f64, f64)> {
    let omega = matrix.value_at(i, j)?;
    let sigma = if j < intra.sigma.len() {
        intra.sigma[j]
    } else if j == intra.sigma.len() {
        intra.mean()
    } else {
        return Err(Error::invalid(format!(
            "target position {j} out of range for {} sigma entries",
            intra.sigma.len()
        )));
    };
    let gamma = omega / sigma.max(SIGMA_FLOOR);
    Ok((gamma, omega, sigma))
}

/// Every scoreable (i, j) pair for a source/target anchor pair: i runs over
/// probed source positions >= 1, j over all target positions, restricted to
/// shared stages. The source must be the cheaper anchor.
pub fn enumerate_configs(source: &AnchorModel, target: &AnchorModel) -> Result<Vec<StitchConfig>> {
    if source.flops() >= target.flops() {
        return Err(Error::invalid(format!(
            "stitch direction violation: '{}' ({}) must be cheaper than '{}' ({})",
            source.id,
            source.flops(),
            target.id,
            target.flops()
        )));
    }
    let shared = source.stages.len().min(target.stages.len());
    let mut out = Vec::new();
    for stage in 0..shared {
        for &i in &source.stage_positions(stage)? {
            if i == 0 {
                continue; // a stitch must take at least one source block
            }
            for &j in &target.stage_positions(stage)? {
                out.push(StitchConfig {
                    source_id: source.id.clone(),
                    target_id: target.id.clone(),
                    stage,
                    source_pos: i,
                    target_pos: j,
                    flops: stitched_flops(source, i, target, j)?,
                });
            }
        }
    }
    Ok(out)
}

/// Equal-width FLOPs intervals over [min, max]; every config lands in
/// exactly one bucket and empty buckets are retained.
pub fn build_buckets(configs: &[ScoredConfig], num_buckets: usize) -> Result<Vec<Bucket>> {
    if configs.is_empty() {
        return Err(Error::invalid("cannot bucket an empty config set"));
    }
    if num_buckets == 0 {
        return Err(Error::invalid("need at least one bucket"));
    }
    let lo = configs.iter().map(|c| c.config.flops).min().unwrap() as f64;
    let hi = configs.iter().map(|c| c.config.flops).max().unwrap() as f64;
    let width = (hi - lo) / num_buckets as f64;
    let mut buckets: Vec<Bucket> = (0..num_buckets)
        .map(|b| Bucket {
            lo: lo + width * b as f64,
            hi: if b + 1 == num_buckets {
                hi
            } else {
                lo + width * (b + 1) as f64
            },
            members: Vec::new(),
        })
        .collect();
    for (idx, sc) in configs.iter().enumerate() {
        let f = sc.config.flops as f64;
        let b = if width == 0.0 {
            0
        } else {
            (((f - lo) / width) as usize).min(num_buckets - 1)
        };
        buckets[b].members.push(idx);
    }
    for bucket in &mut buckets {
        bucket
            .members
            .sort_by(|&a, &b| configs[a].config.flops.cmp(&configs[b].config.flops));
    }
    Ok(buckets)
}

/// Deterministic argmin ordering: gamma, then FLOPs, then source position,
/// then target position.
fn better(a: &ScoredConfig, b: &ScoredConfig) -> bool {
    (a.gamma, a.config.flops, a.config.source_pos, a.config.target_pos)
        < (b.gamma, b.config.flops, b.config.source_pos, b.config.target_pos)
}

/// Per-bucket candidate selection: the bucket's argmin gamma, plus every
/// member whose gamma is within the threshold. With `relative_tau` the
/// cutoff is (1 + tau) times the bucket minimum; otherwise tau is an
/// absolute cutoff. The union is then patched so that every target position
/// of the enumerated set is covered, adding the globally lowest-gamma
/// config for any missing position.
pub fn select_candidates(
    scored: &[ScoredConfig],
    buckets: &[Bucket],
    tau: f64,
    relative_tau: bool,
) -> Result<StitchPlan> {
    if scored.is_empty() {
        return Err(Error::invalid("cannot select from an empty config set"));
    }
    let mut chosen: Vec<bool> = vec![false; scored.len()];
    for bucket in buckets {
        if bucket.members.is_empty() {
            continue;
        }
        let mut best = bucket.members[0];
        for &m in &bucket.members {
            if better(&scored[m], &scored[best]) {
                best = m;
            }
        }
        chosen[best] = true;
        let cutoff = if relative_tau {
            (1.0 + tau) * scored[best].gamma
        } else {
            tau
        };
        for &m in &bucket.members {
            if scored[m].gamma <= cutoff {
                chosen[m] = true;
            }
        }
    }

    // coverage: every target position in the enumerated set appears in the
    // selection at least once
    let mut positions: Vec<usize> = scored.iter().map(|c| c.config.target_pos).collect();
    positions.sort_unstable();
    positions.dedup();
    for j in positions {
        let covered = chosen
            .iter()
            .enumerate()
            .any(|(idx, &c)| c && scored[idx].config.target_pos == j);
        if covered {
            continue;
        }
        let mut best: Option<usize> = None;
        for (idx, sc) in scored.iter().enumerate() {
            if sc.config.target_pos != j {
                continue;
            }
            match best {
                None => best = Some(idx),
                Some(b) if better(sc, &scored[b]) => best = Some(idx),
                _ => {}
            }
        }
        chosen[best.expect("position came from the config set")] = true;
    }

    let mut configs: Vec<PlanConfig> = scored
        .iter()
        .zip(&chosen)
        .filter(|(_, &c)| c)
        .map(|(sc, _)| PlanConfig {
            config: sc.config.clone(),
            gamma: Some(sc.gamma),
            omega: Some(sc.omega),
            sigma: Some(sc.sigma),
        })
        .collect();
    configs.sort_by(|a, b| a.config.cmp(&b.config));
    let (source_id, target_id) = (
        scored[0].config.source_id.clone(),
        scored[0].config.target_id.clone(),
    );
    Ok(StitchPlan {
        method: Method::Klas,
        tau: Some(tau),
        relative_tau,
        buckets: buckets.to_vec(),
        configs,
        source_id,
        target_id,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KlasParams {
    pub tau: f64,
    pub relative_tau: bool,
    /// None: one bucket per target block.
    pub num_buckets: Option<usize>,
}

impl Default for KlasParams {
    fn default() -> Self {
        KlasParams {
            tau: 0.05,
            relative_tau: true,
            num_buckets: None,
        }
    }
}

/// Scores every config of a fixed anchor pair.
pub fn score_pair(
    source: &AnchorModel,
    source_probes: &ProbeSet,
    target: &AnchorModel,
    target_probes: &ProbeSet,
    val: &Dataset,
) -> Result<Vec<ScoredConfig>> {
    let matrices = similarity_matrices(source, source_probes, target, target_probes, val)?;
    let intra = intra_capacity(target, target_probes, val)?;
    let configs = enumerate_configs(source, target)?;
    configs
        .into_iter()
        .map(|config| {
            let matrix = matrices
                .iter()
                .find(|m| m.stage == config.stage)
                .ok_or_else(|| Error::invalid(format!("no matrix for stage {}", config.stage)))?;
            let (gamma, omega, sigma) =
                stitch_score(matrix, &intra, config.source_pos, config.target_pos)?;
            Ok(ScoredConfig {
                config,
                gamma,
                omega,
                sigma,
            })
        })
        .collect()
}

/// Full selection pipeline: pick the most compatible small-to-large anchor
/// pair by last-block KL, score its configs, bucket them, and apply the
/// threshold selection.
pub fn klas(
    pool: &[(&AnchorModel, &ProbeSet)],
    val: &Dataset,
    params: &KlasParams,
) -> Result<StitchPlan> {
    let (source, source_probes, target, target_probes, _) = pick_anchor_pair(pool, val)?;
    let scored = score_pair(source, source_probes, target, target_probes, val)?;
    let num_buckets = params.num_buckets.unwrap_or(target.depth()).max(1);
    let buckets = build_buckets(&scored, num_buckets)?;
    select_candidates(&scored, &buckets, params.tau, params.relative_tau)
}

/// The small-to-large anchor pair with minimal last-block KL. Returns the
/// chosen pair plus the full ranking (pair ids and their KL values).
pub fn pick_anchor_pair<'a>(
    pool: &[(&'a AnchorModel, &'a ProbeSet)],
    val: &Dataset,
) -> Result<(
    &'a AnchorModel,
    &'a ProbeSet,
    &'a AnchorModel,
    &'a ProbeSet,
    Vec<(String, String, f64)>,
)> {
    if pool.len() < 2 {
        return Err(Error::invalid("anchor pool needs at least 2 anchors"));
    }
    let mut ranking = Vec::new();
    let mut best: Option<(usize, usize, f64)> = None;
    for a in 0..pool.len() {
        for b in 0..pool.len() {
            if a == b || pool[a].0.flops() >= pool[b].0.flops() {
                continue;
            }
            let kl = last_block_kl(pool[a].0, pool[b].0, val)?;
            ranking.push((pool[a].0.id.clone(), pool[b].0.id.clone(), kl));
            match best {
                None => best = Some((a, b, kl)),
                Some((_, _, k)) if kl < k => best = Some((a, b, kl)),
                _ => {}
            }
        }
    }
    let (a, b, _) =
        best.ok_or_else(|| Error::invalid("no valid small-to-large pair in the pool"))?;
    Ok((pool[a].0, pool[a].1, pool[b].0, pool[b].1, ranking))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SnnetMode {
    Paired,
    Unpaired,
}

/// Proportional block-mapping heuristic over nearest-neighbor anchor pairs.
/// Paired mode maps source cut i to target entry round(i * dg / df);
/// unpaired mode widens that by +-1. Mappings falling outside the valid
/// position ranges are dropped.
pub fn snnet_baseline(chain: &[&AnchorModel], mode: SnnetMode) -> Result<StitchPlan> {
    if chain.len() < 2 {
        return Err(Error::invalid("anchor chain needs at least 2 anchors"));
    }
    let mut ordered: Vec<&AnchorModel> = chain.to_vec();
    ordered.sort_by_key(|a| a.flops());
    let mut configs = Vec::new();
    for pair in ordered.windows(2) {
        let (source, target) = (pair[0], pair[1]);
        if source.flops() >= target.flops() {
            return Err(Error::invalid(
                "anchor chain contains anchors with equal FLOPs",
            ));
        }
        let df = source.depth() as f64;
        let dg = target.depth() as f64;
        for i in 1..source.depth() {
            let paired = (i as f64 * dg / df).round() as i64;
            let candidates: Vec<i64> = match mode {
                SnnetMode::Paired => vec![paired],
                SnnetMode::Unpaired => vec![paired - 1, paired, paired + 1],
            };
            for j in candidates {
                if j < 0 || j as usize >= target.depth() {
                    continue;
                }
                let j = j as usize;
                if source.stage_of_position(i)? != target.stage_of_position(j)? {
                    continue;
                }
                configs.push(PlanConfig {
                    config: StitchConfig {
                        source_id: source.id.clone(),
                        target_id: target.id.clone(),
                        stage: source.stage_of_position(i)?,
                        source_pos: i,
                        target_pos: j,
                        flops: stitched_flops(source, i, target, j)?,
                    },
                    gamma: None,
                    omega: None,
                    sigma: None,
                });
            }
        }
    }
    configs.sort_by(|a, b| a.config.cmp(&b.config));
    configs.dedup_by(|a, b| a.config == b.config);
    Ok(StitchPlan {
        method: Method::Snnet,
        tau: None,
        relative_tau: false,
        buckets: Vec::new(),
        configs,
        source_id: ordered.first().unwrap().id.clone(),
        target_id: ordered.last().unwrap().id.clone(),
    })
}

/// Selects the k configs with globally smallest theta, ignoring buckets and
/// capacity. k larger than the config count is clamped.
pub fn minkl_baseline(scored: &[ScoredConfig], k: usize) -> Result<StitchPlan> {
    if scored.is_empty() {
        return Err(Error::invalid("cannot select from an empty config set"));
    }
    if k == 0 {
        return Err(Error::invalid("minkl needs k >= 1"));
    }
    let k = if k > scored.len() {
        eprintln!(
            "minkl: k={k} exceeds {} configs, clamping",
            scored.len()
        );
        scored.len()
    } else {
        k
    };
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| {
        scored[a]
            .omega
            .partial_cmp(&scored[b].omega)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(scored[a].config.cmp(&scored[b].config))
    });
    let mut configs: Vec<PlanConfig> = order[..k]
        .iter()
        .map(|&idx| PlanConfig {
            config: scored[idx].config.clone(),
            gamma: Some(scored[idx].gamma),
            omega: Some(scored[idx].omega),
            sigma: Some(scored[idx].sigma),
        })
        .collect();
    configs.sort_by(|a, b| a.config.cmp(&b.config));
    Ok(StitchPlan {
        method: Method::Minkl,
        tau: None,
        relative_tau: false,
        buckets: Vec::new(),
        configs,
        source_id: scored[0].config.source_id.clone(),
        target_id: scored[0].config.target_id.clone(),
    })
}

/// One cascade operating point: route to the big anchor when the small
/// anchor's max softmax falls below the threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CascadePoint {
    pub threshold: f64,
    pub avg_flops: f64,
    pub accuracy: f64,
}

pub fn cascade_operating_points(
    small: &AnchorModel,
    big: &AnchorModel,
    thresholds: &[f64],
    eval: &Dataset,
) -> Result<Vec<CascadePoint>> {
    if eval.is_empty() {
        return Err(Error::invalid("cascade evaluation needs a non-empty set"));
    }
    if thresholds.iter().any(|t| *t <= 0.0 || *t > 1.0) {
        return Err(Error::invalid("cascade thresholds must lie in (0, 1]"));
    }
    let small_probs = small.forward(&eval.inputs)?;
    let big_preds = big.predict(&eval.inputs)?;
    let mut out = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let mut routed = 0usize;
        let mut correct = 0usize;
        for r in 0..eval.len() {
            let row = small_probs.row(r);
            let mut best = 0;
            for (i, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = i;
                }
            }
            let pred = if row[best] < t {
                routed += 1;
                big_preds[r]
            } else {
                best
            };
            if pred == eval.labels[r] {
                correct += 1;
            }
        }
        let routed_fraction = routed as f64 / eval.len() as f64;
        out.push(CascadePoint {
            threshold: t,
            avg_flops: small.flops() as f64 + routed_fraction * big.flops() as f64,
            accuracy: correct as f64 / eval.len() as f64,
        });
    }
    Ok(out)
}
