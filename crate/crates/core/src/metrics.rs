//! Evaluation metrics: shape Chamfer (SCD), part accuracy (PA), connectivity
//! accuracy (CA), success rate (SR), plus the contact extraction CA relies on.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geom::{apply_pose, chamfer, dist_sq, PartCloud, Point3, Pose};
use crate::knowledge::SymmetryGrouping;
use crate::objective::{match_groups, Matching};

/// Environment variable capping evaluation threads.
pub const THREADS_ENV: &str = "SPA_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("cannot aggregate an empty report list")]
    Empty,
    #[error("{0}")]
    Domain(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    /// Per-part Chamfer threshold for PA.
    pub epsilon: f64,
    /// Squared-distance threshold for CA.
    pub tau: f64,
    /// Distance below which two GT-placed parts count as touching.
    pub contact_delta: f64,
    pub scd_scale: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            tau: 0.01,
            contact_delta: 0.025,
            scd_scale: 1000.0,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<(), String> {
        let all = [self.epsilon, self.tau, self.contact_delta, self.scd_scale];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err("metrics.epsilon, tau, contact_delta and scd_scale must be positive".into())
        }
    }
}

/// Touching part pair with the closest points in each part's canonical frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Contact {
    pub i: usize,
    pub j: usize,
    pub c_ij: Point3,
    pub c_ji: Point3,
}

/// Number of worker threads from `SPA_THREADS` (default 1, minimum 1).
pub fn eval_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(1)
        .max(1)
}

fn aabb(points: &[Point3]) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (lo, hi)
}

fn aabb_gap_sq(a: &([f64; 3], [f64; 3]), b: &([f64; 3], [f64; 3])) -> f64 {
    (0..3)
        .map(|k| {
            let gap = (b.0[k] - a.1[k]).max(a.0[k] - b.1[k]).max(0.0);
            gap * gap
        })
        .sum()
}

/// Pairs whose GT placements come closer than `delta`. The contact points are
/// the closest pair, smallest indices first on ties.
pub fn extract_contacts(parts: &[PartCloud], gt: &[Pose], delta: f64) -> Vec<Contact> {
    let placed: Vec<PartCloud> = parts
        .iter()
        .zip(gt)
        .map(|(p, pose)| apply_pose(pose, p).expect("GT poses are valid"))
        .collect();
    let boxes: Vec<_> = placed.iter().map(|p| aabb(p.points())).collect();
    let d2 = delta * delta;
    let mut out = Vec::new();
    for i in 0..parts.len() {
        for j in i + 1..parts.len() {
            if aabb_gap_sq(&boxes[i], &boxes[j]) >= d2 {
                continue;
            }
            let (a, b) = (placed[i].points(), placed[j].points());
            let mut best = (f64::INFINITY, 0, 0);
            for (ia, pa) in a.iter().enumerate() {
                for (ib, pb) in b.iter().enumerate() {
                    let d = dist_sq(pa, pb);
                    if d < best.0 {
                        best = (d, ia, ib);
                    }
                }
            }
            if best.0 < d2 {
                out.push(Contact {
                    i,
                    j,
                    c_ij: parts[i].points()[best.1],
                    c_ji: parts[j].points()[best.2],
                });
            }
        }
    }
    out
}

fn placed_union(poses: &[Pose], parts: &[PartCloud]) -> Vec<Point3> {
    let mut all = Vec::new();
    for (pose, p) in poses.iter().zip(parts) {
        all.extend_from_slice(apply_pose(pose, p).expect("poses are valid").points());
    }
    all
}

/// Chamfer distance of the assembled shapes, scaled by `scale`.
pub fn metric_scd(pred: &[Pose], gt: &[Pose], parts: &[PartCloud], scale: f64) -> f64 {
    let a = placed_union(pred, parts);
    let b = placed_union(gt, parts);
    crate::geom::chamfer_points(&a, &b).expect("nonempty parts") * scale
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartAccuracy {
    pub fraction: f64,
    pub flags: Vec<bool>,
    /// Per-part Chamfer errors behind the flags.
    pub errors: Vec<f64>,
}

impl PartAccuracy {
    pub fn correct(&self) -> usize {
        self.flags.iter().filter(|f| **f).count()
    }
}

fn pa_under(
    pred: &[Pose],
    gt: &[Pose],
    parts: &[PartCloud],
    m: &Matching,
    eps: f64,
) -> PartAccuracy {
    let errors: Vec<f64> = (0..parts.len())
        .map(|i| {
            let j = m.gt_for(i);
            let a = apply_pose(&pred[i], &parts[i]).expect("valid pose");
            let b = apply_pose(&gt[j], &parts[j]).expect("valid pose");
            chamfer(&a, &b)
        })
        .collect();
    let flags: Vec<bool> = errors.iter().map(|e| *e < eps).collect();
    let fraction = flags.iter().filter(|f| **f).count() as f64 / flags.len() as f64;
    PartAccuracy {
        fraction,
        flags,
        errors,
    }
}

/// PA after matching predictions to GT within symmetry groups.
pub fn metric_pa(
    pred: &[Pose],
    gt: &[Pose],
    parts: &[PartCloud],
    grouping: &SymmetryGrouping,
    eps: f64,
) -> PartAccuracy {
    let m = match_groups(pred, parts, gt, grouping);
    pa_under(pred, gt, parts, &m, eps)
}

/// PA with every prediction scored against its own GT slot.
pub fn metric_pa_strict(pred: &[Pose], gt: &[Pose], parts: &[PartCloud], eps: f64) -> PartAccuracy {
    pa_under(pred, gt, parts, &Matching::identity(parts.len()), eps)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConnectivityAccuracy {
    pub fraction: f64,
    pub correct: usize,
    pub total: usize,
    /// No contacts to score; `fraction` is reported as 1.
    pub vacuous: bool,
}

/// Fraction of contacts whose two points stay within `τ` (squared) under `pred`.
pub fn metric_ca(pred: &[Pose], contacts: &[Contact], tau: f64) -> ConnectivityAccuracy {
    if contacts.is_empty() {
        return ConnectivityAccuracy {
            fraction: 1.0,
            correct: 0,
            total: 0,
            vacuous: true,
        };
    }
    let correct = contacts
        .iter()
        .filter(|c| {
            let a = pred[c.i].transform_point(&c.c_ij);
            let b = pred[c.j].transform_point(&c.c_ji);
            dist_sq(&a, &b) < tau
        })
        .count();
    ConnectivityAccuracy {
        fraction: correct as f64 / contacts.len() as f64,
        correct,
        total: contacts.len(),
        vacuous: false,
    }
}

pub fn metric_sr(flags: &[bool]) -> u8 {
    u8::from(flags.iter().all(|f| *f))
}

/// Every metric for one object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectReport {
    pub id: String,
    pub category: String,
    pub parts: usize,
    pub scd: f64,
    pub pa: f64,
    pub pa_correct: usize,
    pub pa_strict: f64,
    pub pa_strict_correct: usize,
    pub ca: f64,
    pub ca_correct: usize,
    pub ca_total: usize,
    pub ca_vacuous: bool,
    pub sr: u8,
}

/// One object's metrics. Predictions are matched within symmetry groups
/// before PA and CA.
pub fn evaluate_object(
    id: &str,
    category: &str,
    parts: &[PartCloud],
    gt: &[Pose],
    pred: &[Pose],
    grouping: &SymmetryGrouping,
    contacts: &[Contact],
    cfg: &MetricConfig,
) -> ObjectReport {
    let m = match_groups(pred, parts, gt, grouping);
    let pa = pa_under(pred, gt, parts, &m, cfg.epsilon);
    let strict = metric_pa_strict(pred, gt, parts, cfg.epsilon);
    let slotted = m.permute_predictions(pred);
    let ca = metric_ca(&slotted, contacts, cfg.tau);
    ObjectReport {
        id: id.to_string(),
        category: category.to_string(),
        parts: parts.len(),
        scd: metric_scd(pred, gt, parts, cfg.scd_scale),
        pa: pa.fraction,
        pa_correct: pa.correct(),
        pa_strict: strict.fraction,
        pa_strict_correct: strict.correct(),
        ca: ca.fraction,
        ca_correct: ca.correct,
        ca_total: ca.total,
        ca_vacuous: ca.vacuous,
        sr: metric_sr(&pa.flags),
    }
}

/// Means over a set of objects. PA is part-weighted, CA contact-weighted,
/// SCD and SR object-weighted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub objects: usize,
    pub parts: usize,
    pub contacts: usize,
    pub scd: f64,
    pub pa: f64,
    pub pa_strict: f64,
    pub ca: f64,
    pub sr: f64,
    /// Objects without contacts (CA counted as 1 for them at object level).
    pub ca_vacuous: usize,
}

fn summarize(reports: &[&ObjectReport]) -> Summary {
    let objects = reports.len();
    let parts: usize = reports.iter().map(|r| r.parts).sum();
    let contacts: usize = reports.iter().map(|r| r.ca_total).sum();
    let pa_hits: usize = reports.iter().map(|r| r.pa_correct).sum();
    let strict_hits: usize = reports.iter().map(|r| r.pa_strict_correct).sum();
    let ca_hits: usize = reports.iter().map(|r| r.ca_correct).sum();
    let mut scd = 0.0;
    let mut sr = 0usize;
    for r in reports {
        scd += r.scd;
        sr += r.sr as usize;
    }
    Summary {
        objects,
        parts,
        contacts,
        scd: scd / objects as f64,
        pa: pa_hits as f64 / parts as f64,
        pa_strict: strict_hits as f64 / parts as f64,
        ca: if contacts == 0 {
            1.0
        } else {
            ca_hits as f64 / contacts as f64
        },
        sr: sr as f64 / objects as f64,
        ca_vacuous: reports.iter().filter(|r| r.ca_vacuous).count(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_object: Vec<ObjectReport>,
    pub per_category: BTreeMap<String, Summary>,
    pub overall: Summary,
    pub config: serde_json::Value,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Per-category and overall summaries, accumulated in list order.
pub fn aggregate(
    reports: Vec<ObjectReport>,
    config: serde_json::Value,
) -> Result<MetricReport, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut by_cat: BTreeMap<String, Vec<&ObjectReport>> = BTreeMap::new();
    for r in &reports {
        by_cat.entry(r.category.clone()).or_default().push(r);
    }
    let per_category = by_cat
        .iter()
        .map(|(k, v)| (k.clone(), summarize(v)))
        .collect();
    let overall = summarize(&reports.iter().collect::<Vec<_>>());
    Ok(MetricReport {
        per_object: reports,
        per_category,
        overall,
        config,
    })
}
