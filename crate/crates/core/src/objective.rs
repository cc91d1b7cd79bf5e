//! Losses, within-group matching and the training loop.
//!
//! Predictions of interchangeable parts are matched to GT slots by an exact
//! minimum-cost assignment inside each symmetry group. The assignment is
//! recomputed from forward values every step and held fixed for the backward
//! pass.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::AssemblyTask;
use crate::generator::{poses_from_output, AssemblyModel, ModelError};
use crate::geom::{
    apply_pose, chamfer, chamfer_points, farthest_point_sample, rotate_cloud, GeomError, PartCloud,
    Pose,
};
use crate::knowledge::SymmetryGrouping;
use crate::metrics::{evaluate_object, metric_pa, Contact, MetricConfig, ObjectReport};
use crate::numerics::{
    adam_step, step_lr, AdamConfig, AdamState, Bound, Graph, NumericsError, ParamStore, Tensor, Var,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub translation: f64,
    pub rotation: f64,
    pub shape: f64,
    /// Apply the full pose (not only the rotation) inside the rotation term.
    pub rotation_with_translation: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            translation: 1.0,
            rotation: 10.0,
            shape: 1.0,
            rotation_with_translation: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        if [self.translation, self.rotation, self.shape]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0)
        {
            Ok(())
        } else {
            Err("loss weights must be finite and nonnegative".into())
        }
    }
}

/// Prediction `i` is scored against GT slot `assignment[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Matching {
    assignment: Vec<usize>,
}

impl Matching {
    pub fn identity(n: usize) -> Self {
        Matching {
            assignment: (0..n).collect(),
        }
    }

    pub fn gt_for(&self, pred: usize) -> usize {
        self.assignment[pred]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn is_identity(&self) -> bool {
        self.assignment.iter().enumerate().all(|(i, &j)| i == j)
    }

    /// Predictions rearranged so entry `j` is the one matched to GT slot `j`.
    pub fn permute_predictions<T: Clone>(&self, pred: &[T]) -> Vec<T> {
        let mut out = pred.to_vec();
        for (i, &j) in self.assignment.iter().enumerate() {
            out[j] = pred[i].clone();
        }
        out
    }
}

/// Minimum total cost of a square assignment (Hungarian method with potentials).
pub fn min_assignment_cost(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    if n == 0 {
        return 0.0;
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut total = 0.0;
    for j in 1..=n {
        total += cost[p[j] - 1][j - 1];
    }
    total
}

/// Optimal assignment `row → column`; among optimal ones (within
/// `1e-9 · max(1, |cost*|)`) the lexicographically smallest.
pub fn solve_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let best = min_assignment_cost(cost);
    let tol = 1e-9 * best.abs().max(1.0);
    let mut fixed = 0.0;
    let mut free_cols: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(n);
    for r in 0..n {
        let mut chosen = None;
        for (k, &c) in free_cols.iter().enumerate() {
            let rest: Vec<usize> = free_cols.iter().copied().filter(|&x| x != c).collect();
            let sub: Vec<Vec<f64>> = (r + 1..n)
                .map(|rr| rest.iter().map(|&cc| cost[rr][cc]).collect())
                .collect();
            if fixed + cost[r][c] + min_assignment_cost(&sub) <= best + tol {
                chosen = Some(k);
                break;
            }
        }
        // falls back to the cheapest column if rounding rejected every candidate
        let k = chosen.unwrap_or_else(|| {
            (0..free_cols.len())
                .min_by(|&a, &b| cost[r][free_cols[a]].total_cmp(&cost[r][free_cols[b]]))
                .expect("free column")
        });
        let c = free_cols.remove(k);
        fixed += cost[r][c];
        out.push(c);
    }
    out
}

/// Within every symmetry group, the assignment of predictions to GT slots
/// minimizing the summed per-part Chamfer distance of the placed parts.
/// Groups containing a non-finite prediction keep the identity.
pub fn match_groups(
    pred: &[Pose],
    parts: &[PartCloud],
    gt: &[Pose],
    grouping: &SymmetryGrouping,
) -> Matching {
    let mut assignment: Vec<usize> = (0..parts.len()).collect();
    for members in grouping.groups() {
        if members.len() < 2 || members.iter().any(|&i| pred[i].validate().is_err()) {
            continue;
        }
        let placed_pred: Vec<PartCloud> = members
            .iter()
            .map(|&i| apply_pose(&pred[i], &parts[i]).expect("valid pose"))
            .collect();
        let placed_gt: Vec<PartCloud> = members
            .iter()
            .map(|&j| apply_pose(&gt[j], &parts[j]).expect("valid pose"))
            .collect();
        let cost: Vec<Vec<f64>> = placed_pred
            .iter()
            .map(|a| placed_gt.iter().map(|b| chamfer(a, b)).collect())
            .collect();
        if cost.iter().flatten().any(|c| !c.is_finite()) {
            continue;
        }
        for (a, b) in solve_assignment(&cost).into_iter().enumerate() {
            assignment[members[a]] = members[b];
        }
    }
    Matching { assignment }
}

/// `Σ_i ‖t_i − t*_σ(i)‖²`.
pub fn loss_translation(pred: &[Pose], gt: &[Pose], m: &Matching) -> f64 {
    pred.iter()
        .enumerate()
        .map(|(i, p)| {
            let g = &gt[m.gt_for(i)];
            (0..3)
                .map(|k| (p.translation[k] - g.translation[k]).powi(2))
                .sum::<f64>()
        })
        .sum()
}

/// `Σ_i CD(R_i p_i, R*_σ(i) p_σ(i))`, or with full poses when `with_translation`.
pub fn loss_rotation(
    pred: &[Pose],
    gt: &[Pose],
    parts: &[PartCloud],
    m: &Matching,
    with_translation: bool,
) -> f64 {
    let place = |pose: &Pose, c: &PartCloud| {
        if with_translation {
            apply_pose(pose, c)
        } else {
            rotate_cloud(pose, c)
        }
        .expect("valid pose")
    };
    (0..parts.len())
        .map(|i| {
            let j = m.gt_for(i);
            chamfer(&place(&pred[i], &parts[i]), &place(&gt[j], &parts[j]))
        })
        .sum()
}

/// Chamfer distance of the assembled unions.
pub fn loss_shape(pred: &[Pose], gt: &[Pose], parts: &[PartCloud]) -> f64 {
    let union = |poses: &[Pose]| -> Vec<_> {
        poses
            .iter()
            .zip(parts)
            .flat_map(|(p, c)| apply_pose(p, c).expect("valid pose").into_points())
            .collect()
    };
    chamfer_points(&union(pred), &union(gt)).expect("nonempty parts")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub translation: f64,
    pub rotation: f64,
    pub shape: f64,
    pub total: f64,
}

/// Matching followed by the weighted sum of the three terms.
pub fn total_loss(
    pred: &[Pose],
    gt: &[Pose],
    parts: &[PartCloud],
    grouping: &SymmetryGrouping,
    w: &LossWeights,
) -> LossBreakdown {
    let m = match_groups(pred, parts, gt, grouping);
    let translation = loss_translation(pred, gt, &m);
    let rotation = loss_rotation(pred, gt, parts, &m, w.rotation_with_translation);
    let shape = loss_shape(pred, gt, parts);
    LossBreakdown {
        translation,
        rotation,
        shape,
        total: w.translation * translation + w.rotation * rotation + w.shape * shape,
    }
}

fn cloud_tensor(c: &PartCloud) -> Tensor {
    Tensor::matrix(c.len(), 3, c.points().iter().flatten().copied().collect()).expect("n×3")
}

/// Places `[K, 3]` points with the pose in row `row` of `pred`.
fn place_on_graph(
    g: &mut Graph,
    pred: Var,
    row: usize,
    pts: Var,
    translate: bool,
) -> Result<Var, NumericsError> {
    let r = g.gather_rows(pred, &[row])?;
    let q = g.slice(r, 0, 4)?;
    let m = g.quat_to_mat(q)?;
    let mt = g.transpose(m)?;
    let rotated = g.matmul(pts, mt)?;
    if !translate {
        return Ok(rotated);
    }
    let t = g.slice(r, 4, 3)?;
    let k = g.value(pts).rows();
    let t = g.repeat_rows(t, k)?;
    g.add(rotated, t)
}

/// Differentiable loss terms for head output `pred: [N, 7]` under a fixed matching.
pub struct LossVars {
    pub translation: Var,
    pub rotation: Var,
    pub shape: Var,
    pub total: Var,
}

pub fn loss_graph(
    g: &mut Graph,
    pred: Var,
    parts: &[&PartCloud],
    gt: &[Pose],
    m: &Matching,
    w: &LossWeights,
) -> Result<LossVars, NumericsError> {
    let n = parts.len();
    let gt_t: Vec<f64> = (0..n).flat_map(|i| gt[m.gt_for(i)].translation).collect();
    let gt_t = g.constant(Tensor::matrix(n, 3, gt_t)?);
    let t = g.slice(pred, 4, 3)?;
    let diff = g.sub(t, gt_t)?;
    let sq = g.square(diff);
    let translation = g.sum(sq);

    let mut rot_terms = Vec::with_capacity(n);
    let mut placed = Vec::with_capacity(n);
    let mut placed_gt = Vec::with_capacity(n);
    for (i, part) in parts.iter().enumerate() {
        let j = m.gt_for(i);
        let pts = g.constant(cloud_tensor(part));
        let rot = place_on_graph(g, pred, i, pts, w.rotation_with_translation)?;
        let target = if w.rotation_with_translation {
            apply_pose(&gt[j], parts[j])
        } else {
            rotate_cloud(&gt[j], parts[j])
        }
        .map_err(|e| NumericsError::Domain(e.to_string()))?;
        let target = g.constant(cloud_tensor(&target));
        rot_terms.push(g.chamfer(rot, target)?);
        placed.push(place_on_graph(g, pred, i, pts, true)?);
        let gt_placed =
            apply_pose(&gt[i], parts[i]).map_err(|e| NumericsError::Domain(e.to_string()))?;
        placed_gt.push(g.constant(cloud_tensor(&gt_placed)));
    }
    let mut rotation = rot_terms[0];
    for &r in &rot_terms[1..] {
        rotation = g.add(rotation, r)?;
    }
    let a = g.concat_rows(&placed)?;
    let b = g.concat_rows(&placed_gt)?;
    let shape = g.chamfer(a, b)?;

    let lt = g.scale(translation, w.translation);
    let lr = g.scale(rotation, w.rotation);
    let ls = g.scale(shape, w.shape);
    let s = g.add(lt, lr)?;
    let total = g.add(s, ls)?;
    Ok(LossVars {
        translation,
        rotation,
        shape,
        total,
    })
}

/// A task laid out in assembly order, with encoder-sized inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub category: String,
    /// Full-resolution parts in assembly order.
    pub parts: Vec<PartCloud>,
    /// Farthest-point subsample of every part fed to the encoder and the loss.
    pub inputs: Vec<PartCloud>,
    pub gt: Vec<Pose>,
    /// Indexed by sequence position.
    pub grouping: SymmetryGrouping,
    /// Indices are sequence positions.
    pub contacts: Vec<Contact>,
}

impl Sample {
    /// Lays out `task` along `order` (its own chain when `None`).
    pub fn from_task(
        task: &AssemblyTask,
        points: usize,
        order: Option<&[usize]>,
    ) -> Result<Self, GeomError> {
        let order = order.unwrap_or(&task.chain);
        let mut pos = vec![0usize; order.len()];
        for (k, &i) in order.iter().enumerate() {
            pos[i] = k;
        }
        let parts: Vec<PartCloud> = order.iter().map(|&i| task.parts[i].clone()).collect();
        let inputs = parts
            .iter()
            .map(|p| {
                if p.len() == points {
                    Ok(p.clone())
                } else {
                    farthest_point_sample(p, points, 0).map(|idx| p.select(&idx))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        let contacts = task
            .contacts
            .iter()
            .map(|c| {
                let (a, b) = (pos[c.i], pos[c.j]);
                if a < b {
                    Contact { i: a, j: b, ..*c }
                } else {
                    Contact {
                        i: b,
                        j: a,
                        c_ij: c.c_ji,
                        c_ji: c.c_ij,
                    }
                }
            })
            .collect();
        Ok(Sample {
            id: task.id.clone(),
            category: task.category.clone(),
            parts,
            inputs,
            gt: order.iter().map(|&i| task.gt[i]).collect(),
            grouping: task.grouping.reordered(order),
            contacts,
        })
    }

    pub fn input_refs(&self) -> Vec<&PartCloud> {
        self.inputs.iter().collect()
    }

    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (objects: {objects:?})")]
    NonFinite {
        epoch: usize,
        batch: usize,
        objects: Vec<String>,
    },
    #[error("no training samples")]
    Empty,
    #[error("thread pool: {0}")]
    Threads(String),
}

/// Forward, match, and weighted loss for one sample. Gradients land on `p`'s vars.
pub fn sample_loss(
    model: &AssemblyModel,
    g: &mut Graph,
    p: &Bound,
    s: &Sample,
    cfg: &RunConfig,
) -> Result<LossVars, ModelError> {
    let refs = s.input_refs();
    let out = model.forward(g, p, &refs, &s.grouping, cfg.encodings)?;
    let pred = poses_from_output(g.value(out));
    let inputs: Vec<PartCloud> = s.inputs.clone();
    let m = match_groups(&pred, &inputs, &s.gt, &s.grouping);
    Ok(loss_graph(g, out, &refs, &s.gt, &m, &cfg.loss)?)
}

/// One Adam step on the mean loss of `batch`; returns that mean.
pub fn train_step(
    model: &AssemblyModel,
    store: &mut ParamStore,
    adam: &mut AdamState,
    batch: &[&Sample],
    cfg: &RunConfig,
    lr: f64,
) -> Result<f64, ModelError> {
    let mut grads: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    let mut total = 0.0;
    let inv = 1.0 / batch.len() as f64;
    for s in batch {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let loss = sample_loss(model, &mut g, &p, s, cfg)?;
        let value = g.value(loss.total).item();
        total += value * inv;
        if !value.is_finite() {
            return Ok(f64::NAN);
        }
        let scaled = g.scale(loss.total, inv);
        g.backward(scaled)?;
        for (acc, gr) in grads.iter_mut().zip(p.grads(&g)) {
            for (a, b) in acc.iter_mut().zip(gr) {
                *a += b;
            }
        }
    }
    adam_step(
        store.tensors_mut(),
        &grads,
        adam,
        lr,
        &AdamConfig::default(),
    )?;
    Ok(total)
}

/// Predictions for every sample, in order. Up to `threads` run at once.
pub fn predict_all(
    model: &AssemblyModel,
    store: &ParamStore,
    samples: &[Sample],
    cfg: &RunConfig,
    threads: usize,
) -> Result<Vec<Vec<Pose>>, TrainError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| TrainError::Threads(e.to_string()))?;
    let preds: Result<Vec<_>, ModelError> = pool.install(|| {
        samples
            .par_iter()
            .map(|s| model.predict(store, &s.input_refs(), &s.grouping, cfg.encodings))
            .collect()
    });
    Ok(preds?)
}

/// Metrics of `preds` against every sample, on full-resolution parts.
pub fn evaluate_predictions(
    samples: &[Sample],
    preds: &[Vec<Pose>],
    metrics: &MetricConfig,
    threads: usize,
) -> Result<Vec<ObjectReport>, TrainError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| TrainError::Threads(e.to_string()))?;
    Ok(pool.install(|| {
        samples
            .par_iter()
            .zip(preds)
            .map(|(s, pred)| {
                evaluate_object(
                    &s.id,
                    &s.category,
                    &s.parts,
                    &s.gt,
                    pred,
                    &s.grouping,
                    &s.contacts,
                    metrics,
                )
            })
            .collect()
    }))
}

pub fn evaluate_model(
    model: &AssemblyModel,
    store: &ParamStore,
    samples: &[Sample],
    cfg: &RunConfig,
    threads: usize,
) -> Result<Vec<ObjectReport>, TrainError> {
    let preds = predict_all(model, store, samples, cfg, threads)?;
    evaluate_predictions(samples, &preds, &cfg.metrics, threads)
}

/// Part-weighted matched PA of the model on `samples`, without the other metrics.
pub fn validation_pa(
    model: &AssemblyModel,
    store: &ParamStore,
    samples: &[Sample],
    cfg: &RunConfig,
    threads: usize,
) -> Result<f64, TrainError> {
    let preds = predict_all(model, store, samples, cfg, threads)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| TrainError::Threads(e.to_string()))?;
    let hits: Vec<(usize, usize)> = pool.install(|| {
        samples
            .par_iter()
            .zip(&preds)
            .map(|(s, pred)| {
                (
                    metric_pa(pred, &s.gt, &s.parts, &s.grouping, cfg.metrics.epsilon).correct(),
                    s.len(),
                )
            })
            .collect()
    });
    let (correct, parts) = hits.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(correct as f64 / parts.max(1) as f64)
}

/// Part-weighted PA over reports.
pub fn part_accuracy(reports: &[ObjectReport]) -> f64 {
    let parts: usize = reports.iter().map(|r| r.parts).sum();
    let hits: usize = reports.iter().map(|r| r.pa_correct).sum();
    if parts == 0 {
        0.0
    } else {
        hits as f64 / parts as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// `None` on epochs without validation.
    pub val_pa: Option<f64>,
}

pub struct FitResult {
    /// Parameters from the epoch with the best validation PA (earliest on ties).
    pub best: ParamStore,
    pub last: ParamStore,
    pub best_epoch: usize,
    pub best_val_pa: Option<f64>,
    pub history: Vec<EpochRecord>,
}

/// Adam training with step decay, seeded per-epoch shuffling and model
/// selection on validation PA. With no validation samples the last epoch wins.
pub fn fit(
    model: &AssemblyModel,
    store: ParamStore,
    train: &[Sample],
    val: &[Sample],
    cfg: &RunConfig,
    threads: usize,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitResult, TrainError> {
    if train.is_empty() {
        return Err(TrainError::Empty);
    }
    let tc = &cfg.train;
    let mut store = store;
    let mut adam = AdamState::for_params(store.tensors());
    let mut history = Vec::with_capacity(tc.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..tc.epochs {
        let lr = step_lr(tc.lr, tc.decay, tc.decay_every, epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(
            tc.seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(tc.batch).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let loss = train_step(model, &mut store, &mut adam, &batch, cfg, lr)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: b,
                    objects: batch.iter().map(|s| s.id.clone()).collect(),
                });
            }
            sum += loss;
            batches += 1;
        }
        let validate =
            !val.is_empty() && ((epoch + 1) % tc.val_every == 0 || epoch + 1 == tc.epochs);
        let val_pa = if validate {
            Some(validation_pa(model, &store, val, cfg, threads)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: sum / batches as f64,
            val_pa,
        };
        on_epoch(&record);
        history.push(record);
        if let Some(pa) = val_pa {
            if best.as_ref().is_none_or(|(b, _, _)| pa > *b) {
                best = Some((pa, epoch, store.clone()));
            }
        }
    }
    let (best_val_pa, best_epoch, best_store) = match best {
        Some((pa, e, s)) => (Some(pa), e, s),
        None => (None, tc.epochs - 1, store.clone()),
    };
    Ok(FitResult {
        best: best_store,
        last: store,
        best_epoch,
        best_val_pa,
        history,
    })
}
