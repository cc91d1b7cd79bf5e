//! Order, relation and symmetry encodings, and size-based symmetry grouping.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{bbox_extents, PartCloud};
use crate::numerics::{Graph, NumericsError, Tensor, Var};

pub const DEFAULT_GROUP_TOLERANCE: f64 = 0.02;
pub const DEFAULT_ROTARY_BASE: f64 = 10_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KnowledgeError {
    #[error("{what} {index} exceeds model capacity {capacity}")]
    Capacity {
        what: &'static str,
        index: usize,
        capacity: usize,
    },
    #[error("rotary dimension must be even and positive, got {0}")]
    OddDimension(usize),
    #[error("vector of length {got} does not match rotary dimension {expected}")]
    Length { got: usize, expected: usize },
}

/// One-hot of assembly position `i` in a vector of length `n_max`.
pub fn order_encoding(i: usize, n_max: usize) -> Result<Vec<f64>, KnowledgeError> {
    if i >= n_max {
        return Err(KnowledgeError::Capacity {
            what: "position",
            index: i,
            capacity: n_max,
        });
    }
    let mut v = vec![0.0; n_max];
    v[i] = 1.0;
    Ok(v)
}

/// One-hot of 1-based symmetry group `s` in a vector of length `m_max`.
pub fn symmetry_encoding(s: usize, m_max: usize) -> Result<Vec<f64>, KnowledgeError> {
    if s == 0 || s > m_max {
        return Err(KnowledgeError::Capacity {
            what: "symmetry group",
            index: s,
            capacity: m_max,
        });
    }
    let mut v = vec![0.0; m_max];
    v[s - 1] = 1.0;
    Ok(v)
}

/// Partition of parts into groups of matching bounding-box size.
/// Group ids are 1-based and contiguous.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymmetryGrouping {
    group_of: Vec<usize>,
    count: usize,
}

impl SymmetryGrouping {
    /// Validates ids are contiguous from 1 and builds the grouping.
    pub fn from_ids(group_of: Vec<usize>) -> Result<Self, String> {
        let count = group_of.iter().copied().max().unwrap_or(0);
        if group_of.contains(&0) {
            return Err("group ids are 1-based".into());
        }
        for g in 1..=count {
            if !group_of.contains(&g) {
                return Err(format!("group ids are not contiguous: {g} is missing"));
            }
        }
        Ok(Self { group_of, count })
    }

    /// Every part in its own group, numbered by index.
    pub fn singletons(n: usize) -> Self {
        Self {
            group_of: (1..=n).collect(),
            count: n,
        }
    }

    pub fn group_of(&self, part: usize) -> usize {
        self.group_of[part]
    }

    pub fn ids(&self) -> &[usize] {
        &self.group_of
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn len(&self) -> usize {
        self.group_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.group_of.is_empty()
    }

    /// Part indices of group `g` (1-based), ascending.
    pub fn members(&self, g: usize) -> Vec<usize> {
        (0..self.group_of.len())
            .filter(|&i| self.group_of[i] == g)
            .collect()
    }

    pub fn groups(&self) -> Vec<Vec<usize>> {
        (1..=self.count).map(|g| self.members(g)).collect()
    }

    /// Same grouping with parts listed in the order `perm` (new index k holds old part `perm[k]`),
    /// renumbered in first-seen order.
    pub fn reordered(&self, perm: &[usize]) -> Self {
        let mut map = vec![0usize; self.count + 1];
        let mut next = 0;
        let ids = perm
            .iter()
            .map(|&p| {
                let g = self.group_of[p];
                if map[g] == 0 {
                    next += 1;
                    map[g] = next;
                }
                map[g]
            })
            .collect();
        Self {
            group_of: ids,
            count: self.count,
        }
    }
}

fn extents_match(a: &[f64; 3], seed: &[f64; 3], rel_tol: f64) -> bool {
    (0..3).all(|k| {
        let scale = seed[k].abs().max(a[k].abs()).max(1e-9);
        (a[k] - seed[k]).abs() <= rel_tol * scale
    })
}

/// Groups parts whose sorted PCA extents agree within `rel_tol` of the cluster seed.
pub fn group_by_symmetry(parts: &[PartCloud], rel_tol: f64) -> SymmetryGrouping {
    let extents: Vec<[f64; 3]> = parts.iter().map(bbox_extents).collect();
    group_by_extents(&extents, rel_tol)
}

/// Grouping from precomputed sorted extents.
pub fn group_by_extents(extents: &[[f64; 3]], rel_tol: f64) -> SymmetryGrouping {
    let mut order: Vec<usize> = (0..extents.len()).collect();
    order.sort_by(|&a, &b| {
        for k in 0..3 {
            match extents[a][k].partial_cmp(&extents[b][k]) {
                Some(std::cmp::Ordering::Equal) | None => continue,
                Some(o) => return o,
            }
        }
        a.cmp(&b)
    });
    let mut cluster = vec![usize::MAX; extents.len()];
    let mut seed: Option<[f64; 3]> = None;
    let mut current = 0;
    for &i in &order {
        match seed {
            Some(s) if extents_match(&extents[i], &s, rel_tol) => {}
            _ => {
                current += 1;
                seed = Some(extents[i]);
            }
        }
        cluster[i] = current;
    }
    let mut relabel = vec![0usize; current + 1];
    let mut next = 0;
    let group_of = cluster
        .iter()
        .map(|&c| {
            if relabel[c] == 0 {
                next += 1;
                relabel[c] = next;
            }
            relabel[c]
        })
        .collect();
    SymmetryGrouping {
        group_of,
        count: next,
    }
}

/// Rotary position embedding over pairs `(x_{2k}, x_{2k+1})`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotaryConfig {
    pub dim: usize,
    pub base: f64,
}

impl RotaryConfig {
    pub fn new(dim: usize) -> Result<Self, KnowledgeError> {
        Self::with_base(dim, DEFAULT_ROTARY_BASE)
    }

    pub fn with_base(dim: usize, base: f64) -> Result<Self, KnowledgeError> {
        if dim == 0 || dim % 2 != 0 {
            return Err(KnowledgeError::OddDimension(dim));
        }
        Ok(Self { dim, base })
    }

    /// `θ_k = base^(−2k/d)` for `k = 0..d/2`; strictly decreasing.
    pub fn thetas(&self) -> Vec<f64> {
        (0..self.dim / 2)
            .map(|k| self.base.powf(-2.0 * k as f64 / self.dim as f64))
            .collect()
    }
}

/// Rotates each consecutive pair of `x` by `pos · θ_k`.
pub fn rotary_rotate(
    x: &[f64],
    pos: usize,
    cfg: &RotaryConfig,
) -> Result<Vec<f64>, KnowledgeError> {
    if x.len() != cfg.dim {
        return Err(KnowledgeError::Length {
            got: x.len(),
            expected: cfg.dim,
        });
    }
    let mut out = vec![0.0; x.len()];
    for (k, theta) in cfg.thetas().into_iter().enumerate() {
        let (s, c) = (pos as f64 * theta).sin_cos();
        let (a, b) = (x[2 * k], x[2 * k + 1]);
        out[2 * k] = a * c - b * s;
        out[2 * k + 1] = a * s + b * c;
    }
    Ok(out)
}

/// Differentiable rotary rotation of a `[T, d]` block where row `t` sits at
/// sequence position `positions[t]`: `x ⊙ C + swap(x) ⊙ S`.
pub fn rotary_graph(
    g: &mut Graph,
    x: Var,
    positions: &[usize],
    cfg: &RotaryConfig,
) -> Result<Var, NumericsError> {
    let d = cfg.dim;
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != d || shape[0] != positions.len() {
        return Err(NumericsError::Shape {
            op: "rotary",
            lhs: shape,
            rhs: vec![positions.len(), d],
        });
    }
    let thetas = cfg.thetas();
    let t = positions.len();
    let mut cos = vec![0.0; t * d];
    let mut sin = vec![0.0; t * d];
    for (r, &p) in positions.iter().enumerate() {
        for (k, th) in thetas.iter().enumerate() {
            let (s, c) = (p as f64 * th).sin_cos();
            cos[r * d + 2 * k] = c;
            cos[r * d + 2 * k + 1] = c;
            sin[r * d + 2 * k] = -s;
            sin[r * d + 2 * k + 1] = s;
        }
    }
    let mut swap = vec![0.0; d * d];
    for k in 0..d / 2 {
        swap[(2 * k + 1) * d + 2 * k] = 1.0;
        swap[(2 * k) * d + 2 * k + 1] = 1.0;
    }
    let cos = g.constant(Tensor::matrix(t, d, cos)?);
    let sin = g.constant(Tensor::matrix(t, d, sin)?);
    let swap = g.constant(Tensor::matrix(d, d, swap)?);
    let xs = g.matmul(x, swap)?;
    let a = g.mul(x, cos)?;
    let b = g.mul(xs, sin)?;
    g.add(a, b)
}
