//! Tradeoff-curve evaluation: Pareto fronts, area under the accuracy vs
//! normalized-FLOPs curve, selected-set overlap, and score-vs-accuracy-drop
//! correlation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::selection::StitchConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub id: String,
    pub flops: f64,
    pub accuracy: f64,
}

impl ParetoPoint {
    pub fn new(id: impl Into<String>, flops: f64, accuracy: f64) -> ParetoPoint {
        ParetoPoint {
            id: id.into(),
            flops,
            accuracy,
        }
    }
}

/// Keeps the non-dominated points (no other point with <= FLOPs and >=
/// accuracy, at least one strict), sorted by FLOPs. Duplicate
/// (flops, accuracy) pairs collapse to one point.
pub fn pareto_front(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let mut kept: Vec<ParetoPoint> = Vec::new();
    for p in points {
        let dominated = points.iter().any(|q| {
            q.flops <= p.flops
                && q.accuracy >= p.accuracy
                && (q.flops < p.flops || q.accuracy > p.accuracy)
        });
        if dominated {
            continue;
        }
        if kept
            .iter()
            .any(|q| q.flops == p.flops && q.accuracy == p.accuracy)
        {
            continue;
        }
        kept.push(p.clone());
    }
    kept.sort_by(|a, b| {
        a.flops
            .partial_cmp(&b.flops)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    kept
}

/// Area under accuracy vs normalized FLOPs, integrated over the Pareto
/// front with constant extension to x = 0 and x = 1. Points must lie inside
/// [flops_lo, flops_hi].
pub fn auc(points: &[ParetoPoint], flops_lo: f64, flops_hi: f64) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::invalid("auc needs at least 2 points"));
    }
    if flops_lo >= flops_hi {
        return Err(Error::invalid("auc needs flops_lo < flops_hi"));
    }
    let front = pareto_front(points);
    let span = flops_hi - flops_lo;
    let xs: Vec<f64> = front.iter().map(|p| (p.flops - flops_lo) / span).collect();
    if xs.iter().any(|&x| !(-1e-12..=1.0 + 1e-12).contains(&x)) {
        return Err(Error::invalid(
            "auc points fall outside the normalization bounds",
        ));
    }
    let mut area = xs[0] * front[0].accuracy; // step extension to x = 0
    for k in 1..front.len() {
        area += (xs[k] - xs[k - 1]) * (front[k].accuracy + front[k - 1].accuracy) / 2.0;
    }
    area += (1.0 - xs[xs.len() - 1]) * front[front.len() - 1].accuracy; // to x = 1
    Ok(area)
}

/// 100 * |A intersect B| / |B|.
pub fn overlap(selected: &[StitchConfig], reference: &[StitchConfig]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("overlap against an empty reference set"));
    }
    let hits = reference
        .iter()
        .filter(|r| selected.contains(r))
        .count();
    Ok(100.0 * hits as f64 / reference.len() as f64)
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::invalid("correlation needs >= 3 paired samples"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "zero variance in correlation input".into(),
        ));
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()))
}

/// Average ranks, ties share the mean of their positions.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::invalid("correlation needs >= 3 paired samples"));
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub metric: String,
    pub pearson: f64,
    pub spearman: f64,
    pub samples: usize,
}

/// Pearson and Spearman between each metric's scores and the accuracy drop
/// relative to the target model. Entries are (score, stitched accuracy)
/// pairs per config.
pub fn correlation_study(
    metrics: &[(String, Vec<(f64, f64)>)],
    target_accuracy: f64,
) -> Result<Vec<CorrelationRow>> {
    let mut out = Vec::with_capacity(metrics.len());
    for (name, pairs) in metrics {
        if pairs.len() < 3 {
            return Err(Error::invalid(format!(
                "metric '{name}' has {} configs, need >= 3",
                pairs.len()
            )));
        }
        let scores: Vec<f64> = pairs.iter().map(|(s, _)| *s).collect();
        let drops: Vec<f64> = pairs
            .iter()
            .map(|(_, acc)| target_accuracy - acc)
            .collect();
        out.push(CorrelationRow {
            metric: name.clone(),
            pearson: pearson(&scores, &drops)?,
            spearman: spearman(&scores, &drops)?,
            samples: pairs.len(),
        });
    }
    Ok(out)
}

/// One method's points plus its normalized AUC.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveSummary {
    pub method: String,
    pub points: Vec<ParetoPoint>,
    pub auc: f64,
    pub flops_lo: f64,
    pub flops_hi: f64,
}

impl CurveSummary {
    pub fn new(
        method: impl Into<String>,
        points: Vec<ParetoPoint>,
        flops_lo: f64,
        flops_hi: f64,
    ) -> Result<CurveSummary> {
        let auc = auc(&points, flops_lo, flops_hi)?;
        Ok(CurveSummary {
            method: method.into(),
            points,
            auc,
            flops_lo,
            flops_hi,
        })
    }
}

/// Shared normalization bounds for a multi-method comparison: the global
/// min/max FLOPs across all compared points.
pub fn global_bounds(point_sets: &[&[ParetoPoint]]) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for set in point_sets {
        for p in *set {
            lo = lo.min(p.flops);
            hi = hi.max(p.flops);
        }
    }
    if !lo.is_finite() || !hi.is_finite() || lo >= hi {
        return Err(Error::invalid("degenerate FLOPs bounds across methods"));
    }
    Ok((lo, hi))
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes the report bundle: pareto.csv, auc.json, correlations.csv,
/// overlap.csv, and a plot-ready long.csv (method, x, y). `header_comment`
/// lines (e.g. input digests) are embedded at the top of each CSV.
pub fn write_report(
    dir: &Path,
    summaries: &[CurveSummary],
    correlations: &[CorrelationRow],
    overlaps: &[(String, String, f64)],
    header_comment: &[String],
) -> Result<()> {
    if summaries.is_empty() {
        return Err(Error::invalid("report needs at least one curve summary"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let comment: String = header_comment
        .iter()
        .map(|l| format!("# {l}\n"))
        .collect();

    let mut pareto = comment.clone();
    pareto.push_str("method,id,flops,accuracy\n");
    for s in summaries {
        for p in pareto_front(&s.points) {
            pareto.push_str(&format!(
                "{},{},{},{}\n",
                s.method,
                p.id,
                fmt17(p.flops),
                fmt17(p.accuracy)
            ));
        }
    }
    let path = dir.join("pareto.csv");
    std::fs::write(&path, pareto).map_err(|e| Error::io(&path, e))?;

    let mut long = comment.clone();
    long.push_str("method,x,y\n");
    for s in summaries {
        for p in &s.points {
            long.push_str(&format!(
                "{},{},{}\n",
                s.method,
                fmt17(p.flops),
                fmt17(p.accuracy)
            ));
        }
    }
    let path = dir.join("long.csv");
    std::fs::write(&path, long).map_err(|e| Error::io(&path, e))?;

    let mut aucs = BTreeMap::new();
    for s in summaries {
        aucs.insert(s.method.clone(), s.auc);
    }
    let mut deltas = BTreeMap::new();
    for a in summaries {
        for b in summaries {
            if a.method != b.method {
                deltas.insert(format!("{}-{}", a.method, b.method), a.auc - b.auc);
            }
        }
    }
    let auc_doc = serde_json::json!({
        "bounds": { "flops_lo": summaries[0].flops_lo, "flops_hi": summaries[0].flops_hi },
        "integration": "pareto_front_trapezoid_step_extended",
        "auc": aucs,
        "delta_auc": deltas,
        "inputs": header_comment,
    });
    let path = dir.join("auc.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&auc_doc)
            .map_err(|e| Error::Format(format!("auc.json serialization: {e}")))?,
    )
    .map_err(|e| Error::io(&path, e))?;

    let mut corr = comment.clone();
    corr.push_str("metric,pearson,spearman,samples\n");
    for row in correlations {
        corr.push_str(&format!(
            "{},{},{},{}\n",
            row.metric,
            fmt17(row.pearson),
            fmt17(row.spearman),
            row.samples
        ));
    }
    let path = dir.join("correlations.csv");
    std::fs::write(&path, corr).map_err(|e| Error::io(&path, e))?;

    let mut ov = comment;
    ov.push_str("selected,reference,overlap_pct\n");
    for (a, b, pct) in overlaps {
        ov.push_str(&format!("{a},{b},{}\n", fmt17(*pct)));
    }
    let path = dir.join("overlap.csv");
    std::fs::write(&path, ov).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Reads back a pareto.csv written by [`write_report`], skipping comments.
pub fn read_pareto_csv(path: &Path) -> Result<Vec<(String, ParetoPoint)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.starts_with('#')).skip(1) {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::Format(format!("bad pareto row '{line}'")));
        }
        let flops: f64 = parts[2]
            .parse()
            .map_err(|_| Error::Format(format!("bad flops '{}'", parts[2])))?;
        let accuracy: f64 = parts[3]
            .parse()
            .map_err(|_| Error::Format(format!("bad accuracy '{}'", parts[3])))?;
        out.push((
            parts[0].to_string(),
            ParetoPoint::new(parts[1], flops, accuracy),
        ));
    }
    Ok(out)
}
