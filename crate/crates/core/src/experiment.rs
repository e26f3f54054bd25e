//! Pipeline stages behind the CLI subcommands.
//!
//! Every stage reads prerequisite artifacts from the run directory (one
//! directory per config digest, one subdirectory per seed), derives all of
//! its randomness from the seed through tagged streams, and writes versioned
//! artifacts carrying the digests of their inputs. Running any stage twice
//! over the same config is byte-identical.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchors::{train_anchor, AnchorModel, TrainConfig};
use crate::artifacts::{
    file_digest, load_artifact, read_csv, verify_inputs, write_artifact, write_csv, Artifact,
};
use crate::config::{DatasetSpec, ExperimentConfig};
use crate::data::{gen_blobs, gen_spirals, load_idx, split, Dataset, SplitPartition};
use crate::error::{Error, Result};
use crate::evaluation::{
    correlation_study, global_bounds, overlap, CorrelationRow, CurveSummary, ParetoPoint,
};
use crate::probenet::{train_probeset, ProbeSet, ProbeTrainConfig};
use crate::rng::derive_seed;
use crate::selection::{
    build_buckets, cascade_operating_points, minkl_baseline, score_pair, select_candidates,
    snnet_baseline, Method, ScoredConfig, SnnetMode, StitchConfig, StitchPlan,
};
use crate::similarity::{
    baseline_metric, class_conditional_cka, export_heatmap, shuffle_labels, BaselineMetric,
};
use crate::stitching::{FinetuneConfig, StitchedSupernet};

/// Pipeline stages, in their natural order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenData,
    TrainAnchors,
    TrainProbes,
    Similarity,
    Select,
    InitStitches,
    Finetune,
    Evaluate,
    Oracle,
    Report,
    AblateTau,
    AblateBuckets,
}

/// CLI-level overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub method: Option<Method>,
    pub tau: Option<f64>,
    pub buckets: Option<usize>,
    pub out: Option<PathBuf>,
}

pub struct RunContext {
    pub config: ExperimentConfig,
    pub config_digest: String,
    pub run_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub method: Method,
    pub tau: f64,
    pub num_buckets: Option<usize>,
}

impl RunContext {
    pub fn new(config: ExperimentConfig, overrides: &Overrides) -> Result<RunContext> {
        config.validate()?;
        let config_digest = config.digest();
        let out_root = overrides
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from(&config.out_dir));
        let run_dir = out_root.join(config.run_id());
        let seeds = match overrides.seed {
            Some(s) => vec![s],
            None => config.seeds.clone(),
        };
        if let Some(tau) = overrides.tau {
            if !(0.0..=1.0).contains(&tau) {
                return Err(Error::Config(format!("--tau {tau} must lie in [0, 1]")));
            }
        }
        if overrides.buckets == Some(0) {
            return Err(Error::Config("--buckets must be >= 1".into()));
        }
        Ok(RunContext {
            method: overrides.method.unwrap_or(config.selection.method),
            tau: overrides.tau.unwrap_or(config.selection.tau),
            num_buckets: overrides.buckets.or(config.selection.num_buckets),
            config,
            config_digest,
            run_dir,
            seeds,
        })
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.run_dir.join(format!("seed_{seed}"))
    }

    pub fn run(&self, stage: Stage) -> Result<()> {
        for &seed in &self.seeds {
            match stage {
                Stage::GenData => stage_gen_data(self, seed)?,
                Stage::TrainAnchors => stage_train_anchors(self, seed)?,
                Stage::TrainProbes => stage_train_probes(self, seed)?,
                Stage::Similarity => stage_similarity(self, seed)?,
                Stage::Select => stage_select(self, seed, self.method)?,
                Stage::InitStitches => stage_init_stitches(self, seed, self.method)?,
                Stage::Finetune => stage_finetune(self, seed, self.method)?,
                Stage::Evaluate => stage_evaluate(self, seed, self.method)?,
                Stage::Oracle => stage_oracle(self, seed)?,
                Stage::Report => stage_report(self, seed)?,
                Stage::AblateTau => stage_ablate_tau(self, seed)?,
                Stage::AblateBuckets => stage_ablate_buckets(self, seed)?,
            }
        }
        match stage {
            Stage::Report => write_run_summary(self)?,
            Stage::AblateTau => aggregate_ablation(self, "ablate_tau")?,
            Stage::AblateBuckets => aggregate_ablation(self, "ablate_buckets")?,
            _ => {}
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- payloads

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetPayload {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub partition: SplitPartition,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitAccuracies {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnchorsPayload {
    pub anchors: Vec<AnchorModel>,
    pub loss_traces: BTreeMap<String, Vec<f64>>,
    pub accuracies: BTreeMap<String, SplitAccuracies>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbesPayload {
    pub probesets: Vec<ProbeSet>,
}

/// One metric score for one candidate config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricScore {
    pub metric: String,
    pub config: StitchConfig,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairScores {
    pub source_id: String,
    pub target_id: String,
    pub scored: Vec<ScoredConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityPayload {
    pub pairs: Vec<PairScores>,
    /// (source id, target id, last-block KL) for every small-to-large pair.
    pub last_block_kl: Vec<(String, String, f64)>,
    pub metric_scores: Vec<MetricScore>,
}

// ------------------------------------------------------------------ stages

fn generate_dataset(ctx: &RunContext, seed: u64) -> Result<Dataset> {
    let data_seed = derive_seed(seed, "data");
    match &ctx.config.dataset.spec {
        DatasetSpec::Blobs {
            classes,
            per_class,
            input_dim,
            spread,
        } => gen_blobs(*classes, *per_class, *input_dim, *spread, data_seed),
        DatasetSpec::Spirals {
            classes,
            per_class,
            noise,
        } => gen_spirals(*classes, *per_class, *noise, data_seed),
        DatasetSpec::Idx { images, labels } => {
            load_idx(Path::new(images), Path::new(labels))
        }
    }
}

pub fn stage_gen_data(ctx: &RunContext, seed: u64) -> Result<()> {
    let full = generate_dataset(ctx, seed)?;
    let (train, val, test, partition) =
        split(&full, ctx.config.dataset.fractions, derive_seed(seed, "split"))?;
    let payload = DatasetPayload {
        train,
        val,
        test,
        partition,
    };
    write_artifact(
        &ctx.seed_dir(seed),
        "dataset.json",
        "dataset",
        &ctx.config_digest,
        seed,
        BTreeMap::new(),
        &payload,
    )?;
    Ok(())
}

fn load_dataset(ctx: &RunContext, seed: u64) -> Result<(Artifact<DatasetPayload>, String)> {
    let dir = ctx.seed_dir(seed);
    let artifact = load_artifact::<DatasetPayload>(&dir, "dataset.json", "dataset", "gen-data")?;
    let digest = file_digest(&dir.join("dataset.json"))?;
    Ok((artifact, digest))
}

pub fn stage_train_anchors(ctx: &RunContext, seed: u64) -> Result<()> {
    let dir = ctx.seed_dir(seed);
    let (data, data_digest) = load_dataset(ctx, seed)?;
    let t = &ctx.config.training;
    let mut anchors = Vec::new();
    let mut loss_traces = BTreeMap::new();
    let mut accuracies = BTreeMap::new();
    for spec in &ctx.config.anchors {
        let mut anchor = AnchorModel::new(
            spec.id.clone(),
            data.payload.train.input_dim(),
            data.payload.train.num_classes,
            &spec.stages,
            derive_seed(seed, &format!("anchor-init:{}", spec.id)),
        )?;
        let trace = train_anchor(
            &mut anchor,
            &data.payload.train,
            &TrainConfig {
                epochs: t.anchor_epochs,
                lr: t.anchor_lr,
                batch_size: t.anchor_batch,
                seed: derive_seed(seed, &format!("anchor-train:{}", spec.id)),
            },
        )?;
        anchor.freeze();
        accuracies.insert(
            spec.id.clone(),
            SplitAccuracies {
                train: anchor.accuracy(&data.payload.train)?,
                val: anchor.accuracy(&data.payload.val)?,
                test: anchor.accuracy(&data.payload.test)?,
            },
        );
        loss_traces.insert(spec.id.clone(), trace);
        anchors.push(anchor);
    }
    let mut inputs = BTreeMap::new();
    inputs.insert("dataset.json".to_string(), data_digest);
    write_artifact(
        &dir,
        "anchors.json",
        "anchors",
        &ctx.config_digest,
        seed,
        inputs,
        &AnchorsPayload {
            anchors,
            loss_traces,
            accuracies,
        },
    )?;
    Ok(())
}

fn load_anchors(ctx: &RunContext, seed: u64) -> Result<(Artifact<AnchorsPayload>, String)> {
    let dir = ctx.seed_dir(seed);
    let artifact =
        load_artifact::<AnchorsPayload>(&dir, "anchors.json", "anchors", "train-anchors")?;
    let digest = file_digest(&dir.join("anchors.json"))?;
    Ok((artifact, digest))
}

pub fn stage_train_probes(ctx: &RunContext, seed: u64) -> Result<()> {
    let dir = ctx.seed_dir(seed);
    let (data, data_digest) = load_dataset(ctx, seed)?;
    let (anchors, anchors_digest) = load_anchors(ctx, seed)?;
    let t = &ctx.config.training;
    let mut probesets = Vec::new();
    for anchor in &anchors.payload.anchors {
        let set = train_probeset(
            anchor,
            &data.payload.train,
            Some(&data.payload.val),
            &ProbeTrainConfig {
                epochs: t.probe_epochs,
                lr: t.probe_lr,
                batch_size: t.probe_batch,
                seed: derive_seed(seed, &format!("probes:{}", anchor.id)),
            },
        )?;
        set.export_trace_csv(&dir.join(format!("probe_trace_{}.csv", anchor.id)))?;
        probesets.push(set);
    }
    let mut inputs = BTreeMap::new();
    inputs.insert("dataset.json".to_string(), data_digest);
    inputs.insert("anchors.json".to_string(), anchors_digest);
    write_artifact(
        &dir,
        "probes.json",
        "probes",
        &ctx.config_digest,
        seed,
        inputs,
        &ProbesPayload { probesets },
    )?;
    Ok(())
}

fn load_probes(ctx: &RunContext, seed: u64) -> Result<(Artifact<ProbesPayload>, String)> {
    let dir = ctx.seed_dir(seed);
    let artifact = load_artifact::<ProbesPayload>(&dir, "probes.json", "probes", "train-probes")?;
    let digest = file_digest(&dir.join("probes.json"))?;
    Ok((artifact, digest))
}

fn probeset_for<'a>(probes: &'a ProbesPayload, anchor_id: &str) -> Result<&'a ProbeSet> {
    probes
        .probesets
        .iter()
        .find(|p| p.anchor_id == anchor_id)
        .ok_or_else(|| Error::MissingArtifact(format!("no probe set for anchor '{anchor_id}'")))
}

/// Baseline metric scores for one pair's candidate configs, joined later
/// with finetuned accuracies in the correlation study. MSE only applies
/// when the two positions share a width.
fn pair_metric_scores(
    source: &AnchorModel,
    source_probes: &ProbeSet,
    target: &AnchorModel,
    scored: &[ScoredConfig],
    shuffled: Option<&[ScoredConfig]>,
    val: &Dataset,
) -> Result<Vec<MetricScore>> {
    let src_record = source.collect_activations(&val.inputs)?;
    let tgt_record = target.collect_activations(&val.inputs)?;
    let mut out = Vec::new();
    for sc in scored {
        let (i, j) = (sc.config.source_pos, sc.config.target_pos);
        let f_acts = src_record.position(i)?;
        let g_acts = tgt_record.position(j)?;
        let mut push = |metric: &str, value: f64| {
            out.push(MetricScore {
                metric: metric.to_string(),
                config: sc.config.clone(),
                value,
            });
        };
        push("gamma", sc.gamma);
        push("theta", sc.omega);
        push(
            "cka",
            baseline_metric(BaselineMetric::Cka, f_acts, g_acts, None)?,
        );
        push(
            "dm",
            baseline_metric(BaselineMetric::Dm, f_acts, g_acts, None)?,
        );
        let probe_dists = source_probes.probe(i)?.distributions(f_acts)?;
        push(
            "ce",
            baseline_metric(BaselineMetric::Ce, &probe_dists, g_acts, Some(&val.labels))?,
        );
        push(
            "class_conditional_cka",
            class_conditional_cka(f_acts, g_acts, &val.labels)?,
        );
        if f_acts.cols() == g_acts.cols() {
            push(
                "mse",
                baseline_metric(BaselineMetric::Mse, f_acts, g_acts, None)?,
            );
        }
        if let Some(shuffled) = shuffled {
            if let Some(s) = shuffled.iter().find(|s| s.config == sc.config) {
                push("shuffled_gamma", s.gamma);
            }
        }
    }
    Ok(out)
}

pub fn stage_similarity(ctx: &RunContext, seed: u64) -> Result<()> {
    let dir = ctx.seed_dir(seed);
    let (data, data_digest) = load_dataset(ctx, seed)?;
    let (anchors, anchors_digest) = load_anchors(ctx, seed)?;
    let (probes, probes_digest) = load_probes(ctx, seed)?;
    let val = &data.payload.val;
    let train = &data.payload.train;
    let t = &ctx.config.training;

    // probes retrained on shuffled labels, for the label-free score variant
    let shuffled_train = shuffle_labels(train, derive_seed(seed, "shuffled-labels"))?;
    let mut shuffled_probes: BTreeMap<String, ProbeSet> = BTreeMap::new();
    for anchor in &anchors.payload.anchors {
        let set = train_probeset(
            anchor,
            &shuffled_train,
            None,
            &ProbeTrainConfig {
                epochs: t.probe_epochs,
                lr: t.probe_lr,
                batch_size: t.probe_batch,
                seed: derive_seed(seed, &format!("shuffled-probes:{}", anchor.id)),
            },
        )?;
        shuffled_probes.insert(anchor.id.clone(), set);
    }

    let mut pairs = Vec::new();
    let mut kl_table = Vec::new();
    let mut metric_scores = Vec::new();
    for source in &anchors.payload.anchors {
        for target in &anchors.payload.anchors {
            if source.id == target.id || source.flops() >= target.flops() {
                continue;
            }
            kl_table.push((
                source.id.clone(),
                target.id.clone(),
                crate::similarity::last_block_kl(source, target, val)?,
            ));
            let sp = probeset_for(&probes.payload, &source.id)?;
            let tp = probeset_for(&probes.payload, &target.id)?;
            let scored = score_pair(source, sp, target, tp, val)?;
            let shuffled_scored = score_pair(
                source,
                &shuffled_probes[&source.id],
                target,
                &shuffled_probes[&target.id],
                val,
            )?;
            let matrices =
                crate::similarity::similarity_matrices(source, sp, target, tp, val)?;
            for m in &matrices {
                export_heatmap(
                    m,
                    &dir.join(format!(
                        "heatmap_{}_{}_stage{}.csv",
                        source.id, target.id, m.stage
                    )),
                )?;
            }
            metric_scores.extend(pair_metric_scores(
                source,
                sp,
                target,
                &scored,
                Some(&shuffled_scored),
                val,
            )?);
            pairs.push(PairScores {
                source_id: source.id.clone(),
                target_id: target.id.clone(),
                scored,
            });
        }
    }
    let mut inputs = BTreeMap::new();
    inputs.insert("dataset.json".to_string(), data_digest);
    inputs.insert("anchors.json".to_string(), anchors_digest);
    inputs.insert("probes.json".to_string(), probes_digest);
    write_artifact(
        &dir,
        "similarity.json",
        "similarity",
        &ctx.config_digest,
        seed,
        inputs,
        &SimilarityPayload {
            pairs,
            last_block_kl: kl_table,
            metric_scores,
        },
    )?;
    Ok(())
}

fn load_similarity(ctx: &RunContext, seed: u64) -> Result<(Artifact<SimilarityPayload>, String)> {
    let dir = ctx.seed_dir(seed);
    let artifact =
        load_artifact::<SimilarityPayload>(&dir, "similarity.json", "similarity", "similarity")?;
    let digest = file_digest(&dir.join("similarity.json"))?;
    Ok((artifact, digest))
}

/// The pair with minimal last-block KL, as recorded by the similarity
/// stage.
fn best_pair(sim: &SimilarityPayload) -> Result<(String, String)> {
    sim.last_block_kl
        .iter()
        .min_by(|a, b| a.2.partial_cmp(&b.2).unwrap_or(std::cmp::Ordering::Equal))
        .map(|(f, g, _)| (f.clone(), g.clone()))
        .ok_or_else(|| Error::invalid("similarity artifact holds no anchor pairs"))
}

fn pair_scores<'a>(sim: &'a SimilarityPayload, f: &str, g: &str) -> Result<&'a [ScoredConfig]> {
    sim.pairs
        .iter()
        .find(|p| p.source_id == f && p.target_id == g)
        .map(|p| p.scored.as_slice())
        .ok_or_else(|| Error::invalid(format!("no scored configs for pair {f} -> {g}")))
}

pub fn stage_select(ctx: &RunContext, seed: u64, method: Method) -> Result<()> {
    let dir = ctx.seed_dir(seed);
    let (anchors, anchors_digest) = load_anchors(ctx, seed)?;
    let (sim, sim_digest) = load_similarity(ctx, seed)?;
    let plan = match method {
        Method::Klas => {
            let (f, g) = best_pair(&sim.payload)?;
            let scored = pair_scores(&sim.payload, &f, &g)?;
            let target = anchors
                .payload
                .anchors
                .iter()
                .find(|a| a.id == g)
                .ok_or_else(|| Error::invalid(format!("unknown anchor '{g}'")))?;
            let nb = ctx.num_buckets.unwrap_or(target.depth()).max(1);
            let buckets = build_buckets(scored, nb)?;
            select_candidates(scored, &buckets, ctx.tau, ctx.config.selection.relative_tau)?
        }
        Method::Snnet => {
            let refs: Vec<&AnchorModel> = anchors.payload.anchors.iter().collect();
            snnet_baseline(&refs, SnnetMode::Unpaired)?
        }
        Method::Minkl => {
            let (f, g) = best_pair(&sim.payload)?;
            let scored = pair_scores(&sim.payload, &f, &g)?;
            let k = match ctx.config.selection.minkl_k {
                Some(k) => k,
                None => {
                    let klas: Result<Artifact<StitchPlan>> =
                        load_artifact(&dir, "plan_klas.json", "plan", "select --method klas");
                    match klas {
                        Ok(plan) => plan.payload.len(),
                        Err(_) => {
                            return Err(Error::Config(
                                "minkl needs selection.minkl_k or an existing klas plan \
                                 to match set sizes"
                                    .into(),
                            ))
                        }
                    }
                }
            };
            minkl_baseline(scored, k)?
        }
    };
    let mut inputs = BTreeMap::new();
    inputs.insert("anchors.json".to_string(), anchors_digest);
    inputs.insert("similarity.json".to_string(), sim_digest);
    write_artifact(
        &dir,
        &format!("plan_{method}.json"),
        "plan",
        &ctx.config_digest,
        seed,
        inputs,
        &plan,
    )?;
    Ok(())
}

fn load_plan(ctx: &RunContext, seed: u64, method: Method) -> Result<(Artifact<StitchPlan>, String)> {
    let dir = ctx.seed_dir(seed);
    let name = format!("plan_{method}.json");
    let artifact = load_artifact::<StitchPlan>(
        &dir,
        &name,
        "plan",
        &format!("select --method {method}"),
    )?;
    let digest = file_digest(&dir.join(&name))?;
    Ok((artifact, digest))
}

fn anchor_by_id<'a>(anchors: &'a AnchorsPayload, id: &str) -> Result<&'a AnchorModel> {
    anchors
        .anchors
        .iter()
        .find(|a| a.id == id)
        .ok_or_else(|| Error::invalid(format!("unknown anchor '{id}'")))
}

/// Rows of the init batch: the leading validation samples, capped by the
/// configured sample budget.
fn init_batch(ctx: &RunContext, val: &Dataset) -> Result<crate::tensor::Tensor> {
    let n = ctx.config.training.init_samples.min(val.len());
    let idx: Vec<usize> = (0..n).collect();
    val.inputs.select_rows(&idx)
}

/// Plans that span several anchor pairs (the chain baseline) become one
/// supernet per pair.
fn plan_pairs(plan: &StitchPlan) -> Vec<(String, String)> {
    let mut pairs: Vec<(String, String)> = plan
        .configs
        .iter()
        .map(|c| (c.config.source_id.clone(), c.config.target_id.clone()))
        .collect();
    pairs.sort();
    pairs.dedup();
    pairs
}

fn subplan(plan: &StitchPlan, f: &str, g: &str) -> StitchPlan {
    StitchPlan {
        method: plan.method,
        tau: plan.tau,
        relative_tau: plan.relative_tau,
        buckets: plan.buckets.clone(),
        configs: plan
            .configs
            .iter()
            .filter(|c| c.config.source_id == f && c.config.target_id == g)
            .cloned()
            .collect(),
        source_id: f.to_string(),
        target_id: g.to_string(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupernetsPayload {
    pub supernets: Vec<StitchedSupernet>,
}

pub fn stage_init_stitches(ctx: &RunContext, seed: u64, method: Method) -> Result<()> {
    let dir = ctx.seed_dir(seed);
    let (data, data_digest) = load_dataset(ctx, seed)?;
    let (anchors, anchors_digest) = load_anchors(ctx, seed)?;
    let (plan, plan_digest) = load_plan(ctx, seed, method)?;
    let batch = init_batch(ctx, &data.payload.val)?;
    let mut supernets = Vec::new();
    for (f, g) in plan_pairs(&plan.payload) {
        let source = anchor_by_id(&anchors.payload, &f)?;
        let target = anchor_by_id(&anchors.payload, &g)?;
        let mut net = StitchedSupernet::new(source, target, subplan(&plan.payload, &f, &g))?;
        net.init_layers(source, target, &batch)?;
        supernets.push(net);
    }
    let mut inputs = BTreeMap::new();
    inputs.insert("dataset.json".to_string(), data_digest);
    inputs.insert("anchors.json".to_string(), anchors_digest);
    inputs.insert(format!("plan_{method}.json"), plan_digest);
    write_artifact(
        &dir,
        &format!("stitches_{method}.json"),
        "stitches",
        &ctx.config_digest,
        seed,
        inputs,
        &SupernetsPayload { supernets },
    )?;
    Ok(())
}

pub fn stage_finetune(ctx: &RunContext, seed: u64, method: Method) -> Result<()> {
    let dir = ctx.seed_dir(seed);
    let (data, data_digest) = load_dataset(ctx, seed)?;
    let (anchors, anchors_digest) = load_anchors(ctx, seed)?;
    let name = format!("stitches_{method}.json");
    let stitches = load_artifact::<SupernetsPayload>(
        &dir,
        &name,
        "stitches",
        &format!("init-stitches --method {method}"),
    )?;
    let stitches_digest = file_digest(&dir.join(&name))?;
    let t = &ctx.config.training;
    let mut supernets = stitches.payload.supernets;
    let mut trace_rows = Vec::new();
    for net in &mut supernets {
        let source = anchor_by_id(&anchors.payload, &net.plan.source_id)?;
        let target = anchor_by_id(&anchors.payload, &net.plan.target_id)?;
        let traces = net.finetune(
            source,
            target,
            &data.payload.train,
            &FinetuneConfig {
                epochs: t.stitch_epochs,
                lr: t.stitch_lr,
                batch_size: t.stitch_batch,
                seed: derive_seed(seed, &format!("finetune:{method}:{}", net.plan.target_id)),
            },
        )?;
        for (cfg_idx, trace) in traces.iter().enumerate() {
            let label = net.plan.configs[cfg_idx].config.label();
            let mut per_epoch: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
            for (epoch, _, loss) in trace {
                let e = per_epoch.entry(*epoch).or_insert((0.0, 0));
                e.0 += loss;
                e.1 += 1;
            }
            for (epoch, (total, count)) in per_epoch {
                trace_rows.push(format!(
                    "{label},{epoch},{:.16e},{count}",
                    total / count as f64
                ));
            }
        }
    }
    let mut inputs = BTreeMap::new();
    inputs.insert("dataset.json".to_string(), data_digest);
    inputs.insert("anchors.json".to_string(), anchors_digest);
    inputs.insert(name, stitches_digest);
    write_artifact(
        &dir,
        &format!("finetuned_{method}.json"),
        "finetuned",
        &ctx.config_digest,
        seed,
        inputs.clone(),
        &SupernetsPayload { supernets },
    )?;
    write_csv(
        &dir.join(format!("finetune_trace_{method}.csv")),
        &ctx.config_digest,
        &inputs,
        "config,epoch,mean_loss,steps",
        &trace_rows,
    )?;
    Ok(())
}

fn eval_row(config: &StitchConfig, gamma: Option<f64>, accuracy: f64) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        config.source_id,
        config.target_id,
        config.stage,
        config.source_pos,
        config.target_pos,
        config.flops,
        gamma.map_or_else(|| "".to_string(), |g| format!("{g:.16e}")),
        format_args!("{accuracy:.16e}")
    )
}

pub const EVAL_HEADER: &str = "source,target,stage,i,j,flops,gamma,accuracy";

pub fn stage_evaluate(ctx: &RunContext, seed: u64, method: Method) -> Result<()> {
    let dir = ctx.seed_dir(seed);
    let (data, data_digest) = load_dataset(ctx, seed)?;
    let (anchors, anchors_digest) = load_anchors(ctx, seed)?;
    let name = format!("finetuned_{method}.json");
    let finetuned = load_artifact::<SupernetsPayload>(
        &dir,
        &name,
        "finetuned",
        &format!("finetune --method {method}"),
    )?;
    let finetuned_digest = file_digest(&dir.join(&name))?;
    let mut rows = Vec::new();
    for net in &finetuned.payload.supernets {
        let source = anchor_by_id(&anchors.payload, &net.plan.source_id)?;
        let target = anchor_by_id(&anchors.payload, &net.plan.target_id)?;
        let evals = net.evaluate(source, target, &data.payload.test)?;
        for (pc, ev) in net.plan.configs.iter().zip(&evals) {
            rows.push(eval_row(&ev.config, pc.gamma, ev.accuracy));
        }
    }
    let mut inputs = BTreeMap::new();
    inputs.insert("dataset.json".to_string(), data_digest.clone());
    inputs.insert("anchors.json".to_string(), anchors_digest.clone());
    inputs.insert(name, finetuned_digest);
    write_csv(
        &dir.join(format!("eval_{method}.csv")),
        &ctx.config_digest,
        &inputs,
        EVAL_HEADER,
        &rows,
    )?;

    // cascade operating points between the cheapest and the most expensive
    // anchors; method-independent, refreshed on every evaluate
    let mut by_flops: Vec<&AnchorModel> = anchors.payload.anchors.iter().collect();
    by_flops.sort_by_key(|a| a.flops());
    let small = by_flops.first().unwrap();
    let big = by_flops.last().unwrap();
    let points = cascade_operating_points(
        small,
        big,
        &ctx.config.selection.cascade_thresholds,
        &data.payload.test,
    )?;
    let cascade_rows: Vec<String> = points
        .iter()
        .map(|p| {
            format!(
                "{:.16e},{:.16e},{:.16e}",
                p.threshold, p.avg_flops, p.accuracy
            )
        })
        .collect();
    let mut cascade_inputs = BTreeMap::new();
    cascade_inputs.insert("dataset.json".to_string(), data_digest);
    cascade_inputs.insert("anchors.json".to_string(), anchors_digest);
    write_csv(
        &dir.join("cascade.csv"),
        &ctx.config_digest,
        &cascade_inputs,
        "threshold,avg_flops,accuracy",
        &cascade_rows,
    )?;
    Ok(())
}

pub const ORACLE_HEADER: &str = "source,target,stage,i,j,flops,gamma,omega,sigma,accuracy";

/// Exhaustive per-config finetuning at the plan budget: every candidate of
/// every pair gets its own stitch layer, trained independently with the
/// same epochs as the joint phase, then evaluated on the test split.
pub fn stage_oracle(ctx: &RunContext, seed: u64) -> Result<()> {
    let dir = ctx.seed_dir(seed);
    let (data, data_digest) = load_dataset(ctx, seed)?;
    let (anchors, anchors_digest) = load_anchors(ctx, seed)?;
    let (sim, sim_digest) = load_similarity(ctx, seed)?;
    let batch = init_batch(ctx, &data.payload.val)?;
    let t = &ctx.config.training;
    let mut rows = Vec::new();
    for pair in &sim.payload.pairs {
        let source = anchor_by_id(&anchors.payload, &pair.source_id)?;
        let target = anchor_by_id(&anchors.payload, &pair.target_id)?;
        let results: Vec<Result<(ScoredConfig, f64)>> = pair
            .scored
            .par_iter()
            .map(|sc| {
                let plan = StitchPlan {
                    method: Method::Klas,
                    tau: None,
                    relative_tau: true,
                    buckets: Vec::new(),
                    configs: vec![crate::selection::PlanConfig {
                        config: sc.config.clone(),
                        gamma: Some(sc.gamma),
                        omega: Some(sc.omega),
                        sigma: Some(sc.sigma),
                    }],
                    source_id: source.id.clone(),
                    target_id: target.id.clone(),
                };
                let mut net = StitchedSupernet::new(source, target, plan)?;
                net.init_layers(source, target, &batch)?;
                net.finetune(
                    source,
                    target,
                    &data.payload.train,
                    &FinetuneConfig {
                        epochs: t.stitch_epochs,
                        lr: t.stitch_lr,
                        batch_size: t.stitch_batch,
                        seed: derive_seed(seed, &format!("oracle:{}", sc.config.label())),
                    },
                )?;
                let evals = net.evaluate(source, target, &data.payload.test)?;
                Ok((sc.clone(), evals[0].accuracy))
            })
            .collect();
        for r in results {
            let (sc, accuracy) = r?;
            rows.push(format!(
                "{},{},{},{},{},{},{:.16e},{:.16e},{:.16e},{accuracy:.16e}",
                sc.config.source_id,
                sc.config.target_id,
                sc.config.stage,
                sc.config.source_pos,
                sc.config.target_pos,
                sc.config.flops,
                sc.gamma,
                sc.omega,
                sc.sigma
            ));
        }
    }
    let mut inputs = BTreeMap::new();
    inputs.insert("dataset.json".to_string(), data_digest);
    inputs.insert("anchors.json".to_string(), anchors_digest);
    inputs.insert("similarity.json".to_string(), sim_digest);
    write_csv(
        &dir.join("oracle_eval.csv"),
        &ctx.config_digest,
        &inputs,
        ORACLE_HEADER,
        &rows,
    )?;
    Ok(())
}

/// Parsed oracle row key and accuracy.
#[derive(Debug, Clone)]
pub struct OracleEntry {
    pub config: StitchConfig,
    pub gamma: f64,
    pub omega: f64,
    pub sigma: f64,
    pub accuracy: f64,
}

pub fn load_oracle(dir: &Path) -> Result<Vec<OracleEntry>> {
    let (inputs, rows) = read_csv(&dir.join("oracle_eval.csv"), "oracle")?;
    verify_inputs(dir, "oracle_eval.csv", &inputs)?;
    rows.iter()
        .map(|row| {
            if row.len() != 10 {
                return Err(Error::Format(format!("bad oracle row {row:?}")));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::Format(format!("bad number '{s}'")))
            };
            Ok(OracleEntry {
                config: StitchConfig {
                    source_id: row[0].clone(),
                    target_id: row[1].clone(),
                    stage: row[2]
                        .parse()
                        .map_err(|_| Error::Format("bad stage".into()))?,
                    source_pos: row[3]
                        .parse()
                        .map_err(|_| Error::Format("bad i".into()))?,
                    target_pos: row[4]
                        .parse()
                        .map_err(|_| Error::Format("bad j".into()))?,
                    flops: row[5]
                        .parse()
                        .map_err(|_| Error::Format("bad flops".into()))?,
                },
                gamma: parse(&row[6])?,
                omega: parse(&row[7])?,
                sigma: parse(&row[8])?,
                accuracy: parse(&row[9])?,
            })
        })
        .collect()
}

fn plan_points_from_oracle(
    plan: &StitchPlan,
    oracle: &[OracleEntry],
) -> Result<Vec<ParetoPoint>> {
    plan.configs
        .iter()
        .map(|pc| {
            let entry = oracle
                .iter()
                .find(|e| e.config == pc.config)
                .ok_or_else(|| {
                    Error::MissingArtifact(format!(
                        "oracle has no entry for {}; re-run the oracle stage",
                        pc.config.label()
                    ))
                })?;
            Ok(ParetoPoint::new(
                pc.config.label(),
                pc.config.flops as f64,
                entry.accuracy,
            ))
        })
        .collect()
}

fn eval_points(dir: &Path, method: Method) -> Result<Option<Vec<ParetoPoint>>> {
    let path = dir.join(format!("eval_{method}.csv"));
    if !path.exists() {
        return Ok(None);
    }
    let (inputs, rows) = read_csv(&path, "evaluate")?;
    verify_inputs(dir, &format!("eval_{method}.csv"), &inputs)?;
    let mut points = Vec::new();
    for row in rows {
        if row.len() != 8 {
            return Err(Error::Format(format!("bad eval row {row:?}")));
        }
        let flops: f64 = row[5]
            .parse()
            .map_err(|_| Error::Format("bad flops".into()))?;
        let acc: f64 = row[7]
            .parse()
            .map_err(|_| Error::Format("bad accuracy".into()))?;
        points.push(ParetoPoint::new(
            format!("{}-{}:s{}:i{}j{}", row[0], row[1], row[2], row[3], row[4]),
            flops,
            acc,
        ));
    }
    Ok(Some(points))
}

/// Walks every artifact in a seed directory and verifies that the input
/// digests each one recorded still match the files on disk.
pub fn verify_chain(dir: &Path) -> Result<()> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok())
        .filter(|entry| entry.path().is_file())
        .map(|entry| entry.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    for name in names {
        let path = dir.join(&name);
        if name.ends_with(".json") {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let envelope: Artifact<serde_json::Value> = serde_json::from_str(&text)
                .map_err(|e| Error::Format(format!("artifact '{name}' parse: {e}")))?;
            verify_inputs(dir, &name, &envelope.inputs)?;
        } else if name.ends_with(".csv") {
            let (inputs, _) = read_csv(&path, "unknown")?;
            verify_inputs(dir, &name, &inputs)?;
        }
    }
    Ok(())
}

pub fn stage_report(ctx: &RunContext, seed: u64) -> Result<()> {
    let dir = ctx.seed_dir(seed);
    verify_chain(&dir)?;
    let (anchors, _) = load_anchors(ctx, seed)?;
    let (sim, _) = load_similarity(ctx, seed)?;
    verify_inputs(&dir, "similarity.json", &sim.inputs)?;

    let oracle = if dir.join("oracle_eval.csv").exists() {
        Some(load_oracle(&dir)?)
    } else {
        None
    };

    let methods = [Method::Klas, Method::Snnet, Method::Minkl];
    let mut plans: Vec<(Method, StitchPlan)> = Vec::new();
    for m in methods {
        let name = format!("plan_{m}.json");
        if dir.join(&name).exists() {
            let artifact = load_artifact::<StitchPlan>(&dir, &name, "plan", "select")?;
            verify_inputs(&dir, &name, &artifact.inputs)?;
            plans.push((m, artifact.payload));
        }
    }
    if plans.is_empty() {
        return Err(Error::MissingArtifact(
            "no plans found; run the 'select' stage first".into(),
        ));
    }

    // curve summaries: the supernet's own evaluation where present, plus
    // oracle-backed curves (equal per-config budget) when the oracle ran
    let mut named_points: Vec<(String, Vec<ParetoPoint>)> = Vec::new();
    for (m, _) in &plans {
        if let Some(points) = eval_points(&dir, *m)? {
            named_points.push((m.to_string(), points));
        }
    }
    if let Some(oracle) = &oracle {
        for (m, plan) in &plans {
            named_points.push((format!("{m}_oracle"), plan_points_from_oracle(plan, oracle)?));
        }
    }
    if named_points.is_empty() {
        return Err(Error::MissingArtifact(
            "no evaluation results found; run 'evaluate' or 'oracle' first".into(),
        ));
    }
    let all_sets: Vec<&[ParetoPoint]> = named_points.iter().map(|(_, p)| p.as_slice()).collect();
    let (lo, hi) = global_bounds(&all_sets)?;
    let summaries: Vec<CurveSummary> = named_points
        .iter()
        .map(|(name, points)| CurveSummary::new(name.clone(), points.clone(), lo, hi))
        .collect::<Result<_>>()?;

    // correlations of every recorded metric against the accuracy drop,
    // grouped per anchor pair so the target accuracy is well defined
    let mut correlations: Vec<CorrelationRow> = Vec::new();
    if let Some(oracle) = &oracle {
        let mut grouped: BTreeMap<(String, String), Vec<(f64, f64)>> = BTreeMap::new();
        for score in &sim.payload.metric_scores {
            if let Some(entry) = oracle.iter().find(|e| e.config == score.config) {
                grouped
                    .entry((score.config.target_id.clone(), score.metric.clone()))
                    .or_default()
                    .push((score.value, entry.accuracy));
            }
        }
        for ((target_id, metric), pairs) in grouped {
            if pairs.len() < 3 {
                continue;
            }
            let target_acc = anchors
                .payload
                .accuracies
                .get(&target_id)
                .map(|a| a.test)
                .ok_or_else(|| Error::invalid(format!("no accuracy for '{target_id}'")))?;
            match correlation_study(&[(metric, pairs)], target_acc) {
                Ok(mut rows) => correlations.append(&mut rows),
                Err(Error::UndefinedCorrelation(_)) => continue,
                Err(e) => return Err(e),
            }
        }
    }

    // overlaps: each plan against the oracle's best-k configs, plus the
    // klas plan against the heuristic baseline
    let mut overlaps: Vec<(String, String, f64)> = Vec::new();
    if let Some(oracle) = &oracle {
        for (m, plan) in &plans {
            let k = plan.len();
            let mut by_acc: Vec<&OracleEntry> = oracle.iter().collect();
            by_acc.sort_by(|a, b| {
                b.accuracy
                    .partial_cmp(&a.accuracy)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.config.cmp(&b.config))
            });
            let reference: Vec<StitchConfig> = by_acc
                .iter()
                .take(k)
                .map(|e| e.config.clone())
                .collect();
            overlaps.push((
                m.to_string(),
                format!("oracle_top_{k}"),
                overlap(&plan.config_set(), &reference)?,
            ));
        }
    }
    let klas_plan = plans.iter().find(|(m, _)| *m == Method::Klas);
    let snnet_plan = plans.iter().find(|(m, _)| *m == Method::Snnet);
    if let (Some((_, kp)), Some((_, sp))) = (klas_plan, snnet_plan) {
        overlaps.push((
            "klas".to_string(),
            "snnet".to_string(),
            overlap(&kp.config_set(), &sp.config_set())?,
        ));
    }

    let header = vec![
        format!("config_digest={}", ctx.config_digest),
        format!("seed={seed}"),
    ];
    crate::evaluation::write_report(
        &dir.join("report"),
        &summaries,
        &correlations,
        &overlaps,
        &header,
    )?;
    Ok(())
}

/// Aggregates per-seed AUC tables into <run>/report/summary.csv.
fn write_run_summary(ctx: &RunContext) -> Result<()> {
    let mut rows = Vec::new();
    for &seed in &ctx.config.seeds {
        let path = ctx.seed_dir(seed).join("report").join("auc.json");
        if !path.exists() {
            continue;
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let doc: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("auc.json parse: {e}")))?;
        if let Some(aucs) = doc.get("auc").and_then(|a| a.as_object()) {
            for (method, value) in aucs {
                if let Some(v) = value.as_f64() {
                    rows.push(format!("{seed},{method},{v:.16e}"));
                }
            }
        }
    }
    if rows.is_empty() {
        return Ok(());
    }
    let dir = ctx.run_dir.join("report");
    write_csv(
        &dir.join("summary.csv"),
        &ctx.config_digest,
        &BTreeMap::new(),
        "seed,method,auc",
        &rows,
    )
}

/// Shared body of the two ablation stages: re-select with swept parameters
/// and score each plan by its oracle-backed AUC.
fn ablate(
    ctx: &RunContext,
    seed: u64,
    sweep: &[(String, f64, Option<usize>)],
    out_name: &str,
) -> Result<Vec<String>> {
    let dir = ctx.seed_dir(seed);
    let (anchors, anchors_digest) = load_anchors(ctx, seed)?;
    let (sim, sim_digest) = load_similarity(ctx, seed)?;
    let oracle = load_oracle(&dir)?;
    let (f, g) = best_pair(&sim.payload)?;
    let scored = pair_scores(&sim.payload, &f, &g)?;
    let target = anchor_by_id(&anchors.payload, &g)?;
    let mut all_points: Vec<Vec<ParetoPoint>> = Vec::new();
    let mut plans = Vec::new();
    for (label, tau, buckets) in sweep {
        let nb = buckets.unwrap_or(target.depth()).max(1);
        let layout = build_buckets(scored, nb)?;
        let plan = select_candidates(scored, &layout, *tau, ctx.config.selection.relative_tau)?;
        let points = plan_points_from_oracle(&plan, &oracle)?;
        all_points.push(points);
        plans.push((label.clone(), tau, nb, plan));
    }
    let sets: Vec<&[ParetoPoint]> = all_points.iter().map(|p| p.as_slice()).collect();
    let (lo, hi) = global_bounds(&sets)?;
    let mut rows = Vec::new();
    for ((label, tau, nb, plan), points) in plans.into_iter().zip(&all_points) {
        let auc = crate::evaluation::auc(points, lo, hi)?;
        rows.push(format!(
            "{seed},{label},{tau},{nb},{},{auc:.16e}",
            plan.len()
        ));
        write_artifact(
            &dir,
            &format!("plan_ablate_{out_name}_{label}.json"),
            "plan",
            &ctx.config_digest,
            seed,
            {
                let mut inputs = BTreeMap::new();
                inputs.insert("anchors.json".to_string(), anchors_digest.clone());
                inputs.insert("similarity.json".to_string(), sim_digest.clone());
                inputs
            },
            &plan,
        )?;
    }
    Ok(rows)
}

pub fn stage_ablate_tau(ctx: &RunContext, seed: u64) -> Result<()> {
    let sweep: Vec<(String, f64, Option<usize>)> = ctx
        .config
        .selection
        .ablate_taus
        .iter()
        .map(|&tau| (format!("tau{tau}"), tau, ctx.num_buckets))
        .collect();
    let rows = ablate(ctx, seed, &sweep, "tau")?;
    let dir = ctx.seed_dir(seed);
    write_csv(
        &dir.join("ablate_tau.csv"),
        &ctx.config_digest,
        &BTreeMap::new(),
        "seed,label,tau,buckets,set_size,auc",
        &rows,
    )
}

pub fn stage_ablate_buckets(ctx: &RunContext, seed: u64) -> Result<()> {
    let sweep: Vec<(String, f64, Option<usize>)> = ctx
        .config
        .selection
        .ablate_buckets
        .iter()
        .map(|&nb| (format!("b{nb}"), ctx.tau, Some(nb)))
        .collect();
    let rows = ablate(ctx, seed, &sweep, "buckets")?;
    let dir = ctx.seed_dir(seed);
    write_csv(
        &dir.join("ablate_buckets.csv"),
        &ctx.config_digest,
        &BTreeMap::new(),
        "seed,label,tau,buckets,set_size,auc",
        &rows,
    )
}

/// Concatenates per-seed ablation tables at the run root.
fn aggregate_ablation(ctx: &RunContext, name: &str) -> Result<()> {
    let mut rows = Vec::new();
    for &seed in &ctx.config.seeds {
        let path = ctx.seed_dir(seed).join(format!("{name}.csv"));
        if !path.exists() {
            continue;
        }
        let (_, data) = read_csv(&path, name)?;
        for row in data {
            rows.push(row.join(","));
        }
    }
    if rows.is_empty() {
        return Ok(());
    }
    let dir = ctx.run_dir.join("report");
    write_csv(
        &dir.join(format!("{name}.csv")),
        &ctx.config_digest,
        &BTreeMap::new(),
        "seed,label,tau,buckets,set_size,auc",
        &rows,
    )
}

/// Convenience used by tests and the bindings: the full stage sequence for
/// one method.
pub fn run_full_pipeline(ctx: &RunContext) -> Result<()> {
    ctx.run(Stage::GenData)?;
    ctx.run(Stage::TrainAnchors)?;
    ctx.run(Stage::TrainProbes)?;
    ctx.run(Stage::Similarity)?;
    for method in [Method::Klas, Method::Snnet, Method::Minkl] {
        for &seed in &ctx.seeds {
            stage_select(ctx, seed, method)?;
            stage_init_stitches(ctx, seed, method)?;
            stage_finetune(ctx, seed, method)?;
            stage_evaluate(ctx, seed, method)?;
        }
    }
    ctx.run(Stage::Oracle)?;
    ctx.run(Stage::Report)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    fn tiny_config(out: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default_study();
        cfg.dataset.spec = DatasetSpec::Blobs {
            classes: 3,
            per_class: 40,
            input_dim: 4,
            spread: 1.0,
        };
        cfg.anchors[0].stages[0].hidden_dim = 6;
        cfg.anchors[0].stages[0].num_blocks = 3;
        cfg.anchors[1].stages[0].hidden_dim = 10;
        cfg.anchors[1].stages[0].num_blocks = 4;
        cfg.training.anchor_epochs = 6;
        cfg.training.probe_epochs = 4;
        cfg.training.stitch_epochs = 2;
        cfg.seeds = vec![5];
        cfg.out_dir = out.to_string_lossy().into_owned();
        cfg
    }

    #[test]
    fn pipeline_stages_chain_and_detect_missing() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_config(tmp.path());
        let ctx = RunContext::new(cfg, &Overrides::default()).unwrap();

        // later stage without its prerequisite names the missing stage
        let err = ctx.run(Stage::TrainAnchors).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
        assert!(err.to_string().contains("gen-data"), "{err}");

        ctx.run(Stage::GenData).unwrap();
        ctx.run(Stage::TrainAnchors).unwrap();
        ctx.run(Stage::TrainProbes).unwrap();
        ctx.run(Stage::Similarity).unwrap();
        ctx.run(Stage::Select).unwrap();
        ctx.run(Stage::InitStitches).unwrap();
        ctx.run(Stage::Finetune).unwrap();
        ctx.run(Stage::Evaluate).unwrap();

        let seed_dir = ctx.seed_dir(5);
        assert!(seed_dir.join("plan_klas.json").exists());
        assert!(seed_dir.join("eval_klas.csv").exists());
        assert!(seed_dir.join("cascade.csv").exists());

        // plan carries per-config gamma
        let plan: Artifact<StitchPlan> =
            load_artifact(&seed_dir, "plan_klas.json", "plan", "select").unwrap();
        assert!(!plan.payload.is_empty());
        for pc in &plan.payload.configs {
            assert!(pc.gamma.is_some());
        }
    }

    #[test]
    fn stale_artifact_detection_in_report() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_config(tmp.path());
        let ctx = RunContext::new(cfg, &Overrides::default()).unwrap();
        run_full_pipeline(&ctx).unwrap();
        ctx.run(Stage::Report).unwrap();

        // tamper with the plan; report must fail loudly
        let seed_dir = ctx.seed_dir(5);
        let plan_path = seed_dir.join("plan_klas.json");
        let mut text = std::fs::read_to_string(&plan_path).unwrap();
        text.push(' ');
        std::fs::write(&plan_path, text).unwrap();
        let err = ctx.run(Stage::Report).unwrap_err();
        assert!(matches!(err, Error::StaleArtifact(_)), "{err}");
    }
}
