//! Assembly tasks, synthetic cuboid furniture, sequence patterns, dataset
//! files, splits and point-cloud export.
//!
//! Coordinates are y-up. Every part is stored canonicalized together with the
//! GT pose that places it in the object.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geom::{
    apply_pose, bbox_extents, canonicalize, farthest_point_sample, PartCloud, Point3, Pose,
};
use crate::knowledge::{group_by_symmetry, SymmetryGrouping, DEFAULT_GROUP_TOLERANCE};
use crate::metrics::{extract_contacts, Contact, MetricConfig};

/// Points stored per part.
pub const POINTS_PER_PART: usize = 1000;
const JITTER_SIGMA: f64 = 0.002;
const CANDIDATES: usize = 4000;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("object {object}: {message}")]
    Schema { object: String, message: String },
    #[error("object {object}: {message}")]
    Invalid { object: String, message: String },
    #[error("unknown {what} `{value}`")]
    Unknown { what: &'static str, value: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// How the assembly order is derived from the GT layout.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pattern {
    /// Ascending `c_x + c_y + c_z` of the GT centroid.
    #[default]
    Diagonal,
    TopToBottom,
    BottomToTop,
    /// Descending bounding-box volume.
    DescendingSize,
    Random,
}

impl Pattern {
    pub const ALL: [Pattern; 5] = [
        Pattern::Diagonal,
        Pattern::TopToBottom,
        Pattern::BottomToTop,
        Pattern::DescendingSize,
        Pattern::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pattern::Diagonal => "diagonal",
            Pattern::TopToBottom => "top-to-bottom",
            Pattern::BottomToTop => "bottom-to-top",
            Pattern::DescendingSize => "descending-size",
            Pattern::Random => "random",
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pattern {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Pattern::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| DataError::Unknown {
                what: "pattern",
                value: s.into(),
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Table,
    Chair,
    Shelf,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Table, Category::Chair, Category::Shelf];

    pub fn name(self) -> &'static str {
        match self {
            Category::Table => "table",
            Category::Chair => "chair",
            Category::Shelf => "shelf",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| DataError::Unknown {
                what: "category",
                value: s.into(),
            })
    }
}

/// One object to assemble. Parts, poses, grouping and contacts are indexed by
/// part; `chain` lists part indices in assembly order.
#[derive(Clone, Debug, PartialEq)]
pub struct AssemblyTask {
    pub id: String,
    pub category: String,
    pub parts: Vec<PartCloud>,
    pub gt: Vec<Pose>,
    pub chain: Vec<usize>,
    pub grouping: SymmetryGrouping,
    pub contacts: Vec<Contact>,
    pub pattern: Pattern,
    pub seed: u64,
}

impl AssemblyTask {
    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| {
            Err(DataError::Invalid {
                object: self.id.clone(),
                message: m,
            })
        };
        let n = self.parts.len();
        if n == 0 {
            return bad("no parts".into());
        }
        if self.gt.len() != n || self.grouping.len() != n || self.chain.len() != n {
            return bad(format!(
                "{n} parts but {} poses, {} group ids, {} chain entries",
                self.gt.len(),
                self.grouping.len(),
                self.chain.len()
            ));
        }
        for (k, pose) in self.gt.iter().enumerate() {
            if let Err(e) = pose.validate() {
                return bad(format!("part {k}: {e}"));
            }
        }
        let mut seen = vec![false; n];
        for &c in &self.chain {
            if c >= n || seen[c] {
                return bad(format!(
                    "chain {:?} is not a permutation of 0..{n}",
                    self.chain
                ));
            }
            seen[c] = true;
        }
        for c in &self.contacts {
            if c.i >= c.j || c.j >= n {
                return bad(format!("contact ({}, {}) out of order or range", c.i, c.j));
            }
        }
        Ok(())
    }

    /// GT-placed centroid of every part.
    pub fn gt_centroids(&self) -> Vec<Point3> {
        self.parts
            .iter()
            .zip(&self.gt)
            .map(|(p, pose)| pose.transform_point(&p.centroid()))
            .collect()
    }

    pub fn extents(&self) -> Vec<[f64; 3]> {
        self.parts.iter().map(bbox_extents).collect()
    }

    /// Assembly order for another pattern.
    pub fn sequence(&self, pattern: Pattern, seed: u64) -> Vec<usize> {
        make_sequence(&self.gt_centroids(), &self.extents(), pattern, seed)
    }

    /// GT-placed union of all parts, in part order.
    pub fn assembled(&self) -> Vec<Point3> {
        self.parts
            .iter()
            .zip(&self.gt)
            .flat_map(|(p, pose)| apply_pose(pose, p).expect("validated").into_points())
            .collect()
    }
}

/// Part indices sorted by `pattern`; ties keep the smaller index first.
pub fn make_sequence(
    centroids: &[Point3],
    extents: &[[f64; 3]],
    pattern: Pattern,
    seed: u64,
) -> Vec<usize> {
    let mut order: Vec<usize> = (0..centroids.len()).collect();
    let key: Box<dyn Fn(usize) -> f64> = match pattern {
        Pattern::Diagonal => Box::new(|i| centroids[i][0] + centroids[i][1] + centroids[i][2]),
        Pattern::TopToBottom => Box::new(|i| -centroids[i][1]),
        Pattern::BottomToTop => Box::new(|i| centroids[i][1]),
        Pattern::DescendingSize => Box::new(|i| -(extents[i][0] * extents[i][1] * extents[i][2])),
        Pattern::Random => {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            return order;
        }
    };
    order.sort_by(|&a, &b| key(a).total_cmp(&key(b)).then(a.cmp(&b)));
    order
}

/// Axis-aligned cuboid placed in the object, optionally rotated about `x`.
#[derive(Clone, Copy, Debug)]
struct Cuboid {
    size: [f64; 3],
    center: Point3,
    tilt_x: f64,
    /// Parts sharing a template get the same point cloud.
    template: usize,
}

fn surface_samples(size: [f64; 3], rng: &mut ChaCha8Rng) -> Vec<Point3> {
    let [a, b, c] = size;
    let faces = [
        (b * c, 0),
        (b * c, 0),
        (a * c, 1),
        (a * c, 1),
        (a * b, 2),
        (a * b, 2),
    ];
    let total: f64 = faces.iter().map(|f| f.0).sum();
    let mut pts = Vec::with_capacity(CANDIDATES);
    for _ in 0..CANDIDATES {
        let mut r = rng.random_range(0.0..total);
        let mut face = 5;
        for (k, f) in faces.iter().enumerate() {
            if r < f.0 {
                face = k;
                break;
            }
            r -= f.0;
        }
        let axis = faces[face].1;
        let side = if face % 2 == 0 { -0.5 } else { 0.5 };
        let mut p = [0.0; 3];
        for k in 0..3 {
            p[k] = if k == axis {
                side * size[k]
            } else {
                rng.random_range(-0.5..0.5) * size[k]
            };
        }
        pts.push(p);
    }
    pts
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
}

fn round_f32(p: Point3) -> Point3 {
    p.map(|v| v as f32 as f64)
}

/// Canonical cloud of a jittered cuboid template and the pose mapping it back
/// to the template's own centered frame.
fn template_cloud(size: [f64; 3], rng: &mut ChaCha8Rng) -> (PartCloud, Pose) {
    let candidates = PartCloud::new(surface_samples(size, rng)).expect("finite");
    let idx = farthest_point_sample(&candidates, POINTS_PER_PART, 0).expect("enough candidates");
    let jittered: Vec<Point3> = candidates
        .select(&idx)
        .into_points()
        .into_iter()
        .map(|p| p.map(|v| v + JITTER_SIGMA * gaussian(rng)))
        .collect();
    let (canon, frame) = canonicalize(&PartCloud::new(jittered).expect("finite"));
    let rounded =
        PartCloud::new(canon.into_points().into_iter().map(round_f32).collect()).expect("finite");
    (rounded, frame.to_pose())
}

fn compose(place: &Pose, local: &Pose) -> Pose {
    let r = place.rotation_matrix() * local.rotation_matrix();
    Pose::from_matrix(&r, place.transform_point(&local.translation))
}

fn table_layout(rng: &mut ChaCha8Rng) -> Vec<Cuboid> {
    let width = rng.random_range(0.9..1.3);
    let depth = rng.random_range(0.5..0.75);
    let thick = rng.random_range(0.03..0.05);
    let height = rng.random_range(0.45..0.7);
    let leg_a = rng.random_range(0.045..0.065);
    let leg_b = leg_a * 0.7;
    let inset = rng.random_range(0.03..0.08);
    let mut parts = vec![Cuboid {
        size: [width, thick, depth],
        center: [0.0, height + thick / 2.0, 0.0],
        tilt_x: 0.0,
        template: 0,
    }];
    let lx = width / 2.0 - inset - leg_a / 2.0;
    let lz = depth / 2.0 - inset - leg_b / 2.0;
    for (sx, sz) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
        parts.push(Cuboid {
            size: [leg_a, height, leg_b],
            center: [sx * lx, height / 2.0, sz * lz],
            tilt_x: 0.0,
            template: 1,
        });
    }
    if rng.random_bool(0.5) {
        let len = 2.0 * lx - leg_a;
        let y = height * rng.random_range(0.15..0.3);
        for sz in [-1.0, 1.0] {
            parts.push(Cuboid {
                size: [len, 0.03, 0.02],
                center: [0.0, y, sz * lz],
                tilt_x: 0.0,
                template: 2,
            });
        }
    }
    parts
}

fn chair_layout(rng: &mut ChaCha8Rng) -> Vec<Cuboid> {
    let width = rng.random_range(0.42..0.55);
    let depth = rng.random_range(0.4..0.5);
    let seat_t = rng.random_range(0.04..0.06);
    let seat_y = rng.random_range(0.4..0.48);
    let leg_a = rng.random_range(0.035..0.05);
    let leg_b = leg_a * 0.75;
    let back_h = rng.random_range(0.35..0.5);
    let back_t = rng.random_range(0.025..0.04);
    let tilt: f64 = rng.random_range(0.05..0.2);
    let mut parts = vec![Cuboid {
        size: [width, seat_t, depth],
        center: [0.0, seat_y + seat_t / 2.0, 0.0],
        tilt_x: 0.0,
        template: 0,
    }];
    let lx = width / 2.0 - leg_a / 2.0;
    let lz = depth / 2.0 - leg_b / 2.0;
    for (sx, sz) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
        parts.push(Cuboid {
            size: [leg_a, seat_y, leg_b],
            center: [sx * lx, seat_y / 2.0, sz * lz],
            tilt_x: 0.0,
            template: 1,
        });
    }
    // back panel hinged on the rear edge of the seat, leaning backwards
    let top = seat_y + seat_t;
    let (s, c) = tilt.sin_cos();
    parts.push(Cuboid {
        size: [width, back_h, back_t],
        center: [
            0.0,
            top + c * back_h / 2.0,
            -depth / 2.0 + back_t / 2.0 - s * back_h / 2.0,
        ],
        tilt_x: -tilt,
        template: 2,
    });
    if rng.random_bool(0.5) {
        let post_h = rng.random_range(0.18..0.25);
        let post_a = 0.03;
        let arm_len = depth * 0.8;
        for sx in [-1.0, 1.0] {
            let x = sx * (width / 2.0 - post_a / 2.0);
            parts.push(Cuboid {
                size: [post_a, post_h, 0.022],
                center: [x, top + post_h / 2.0, depth / 2.0 - 0.05],
                tilt_x: 0.0,
                template: 3,
            });
            parts.push(Cuboid {
                size: [0.06, 0.025, arm_len],
                center: [x, top + post_h + 0.0125, depth / 2.0 - arm_len / 2.0],
                tilt_x: 0.0,
                template: 4,
            });
        }
    }
    parts
}

fn shelf_layout(rng: &mut ChaCha8Rng) -> Vec<Cuboid> {
    let width = rng.random_range(0.6..1.0);
    let depth = rng.random_range(0.25..0.4);
    let height = rng.random_range(0.9..1.6);
    let side_t = rng.random_range(0.02..0.03);
    let board_t = side_t * 1.3;
    let boards = rng.random_range(2..=5usize);
    let inner = width - 2.0 * side_t;
    let mut parts = Vec::new();
    for sx in [-1.0, 1.0] {
        parts.push(Cuboid {
            size: [side_t, height, depth],
            center: [sx * (width - side_t) / 2.0, height / 2.0, 0.0],
            tilt_x: 0.0,
            template: 0,
        });
    }
    for k in 0..boards {
        let y = board_t / 2.0 + (height - board_t) * k as f64 / (boards - 1) as f64;
        parts.push(Cuboid {
            size: [inner, board_t, depth],
            center: [0.0, y, 0.0],
            tilt_x: 0.0,
            template: 1,
        });
    }
    if rng.random_bool(0.5) {
        parts.push(Cuboid {
            size: [inner, height, 0.012],
            center: [0.0, height / 2.0, -depth / 2.0 - 0.006],
            tilt_x: 0.0,
            template: 2,
        });
    }
    parts
}

/// Group ids from template ids, 1-based in first-seen order.
fn template_grouping(layout: &[Cuboid]) -> SymmetryGrouping {
    let mut map = std::collections::BTreeMap::new();
    let ids = layout
        .iter()
        .map(|c| {
            let next = map.len() + 1;
            *map.entry(c.template).or_insert(next)
        })
        .collect();
    SymmetryGrouping::from_ids(ids).expect("contiguous")
}

/// Deterministic procedural object with the given assembly pattern.
///
/// Identical parts share one template cloud, so the construction grouping is
/// exactly the shape-based grouping; layouts where unrelated parts would also
/// look alike are redrawn.
pub fn synth_object_with(kind: Category, seed: u64, pattern: Pattern) -> AssemblyTask {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (kind as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    loop {
        let layout = match kind {
            Category::Table => table_layout(&mut rng),
            Category::Chair => chair_layout(&mut rng),
            Category::Shelf => shelf_layout(&mut rng),
        };
        let templates = layout.iter().map(|c| c.template).max().unwrap_or(0) + 1;
        let mut clouds = Vec::with_capacity(templates);
        for t in 0..templates {
            let size = layout
                .iter()
                .find(|c| c.template == t)
                .expect("template used")
                .size;
            clouds.push(template_cloud(size, &mut rng));
        }
        let mut parts = Vec::with_capacity(layout.len());
        let mut gt = Vec::with_capacity(layout.len());
        for c in &layout {
            let (cloud, local) = &clouds[c.template];
            let half = c.tilt_x / 2.0;
            let place =
                Pose::new([half.cos(), half.sin(), 0.0, 0.0], c.center).expect("unit quaternion");
            parts.push(cloud.clone());
            gt.push(compose(&place, local));
        }
        let grouping = template_grouping(&layout);
        if group_by_symmetry(&parts, DEFAULT_GROUP_TOLERANCE) != grouping {
            continue;
        }
        let contacts = extract_contacts(&parts, &gt, MetricConfig::default().contact_delta);
        let mut task = AssemblyTask {
            id: format!("{kind}-{seed:06}"),
            category: kind.name().into(),
            parts,
            gt,
            chain: Vec::new(),
            grouping,
            contacts,
            pattern,
            seed,
        };
        task.chain = task.sequence(pattern, seed);
        return task;
    }
}

/// [`synth_object_with`] using the diagonal pattern.
pub fn synth_object(kind: Category, seed: u64) -> AssemblyTask {
    synth_object_with(kind, seed, Pattern::Diagonal)
}

/// Object kinds for `count` objects: one kind, or round-robin over all.
pub fn synth_dataset(
    kinds: &[Category],
    count: usize,
    seed: u64,
    pattern: Pattern,
) -> Vec<AssemblyTask> {
    (0..count)
        .map(|k| {
            let kind = kinds[k % kinds.len()];
            synth_object_with(
                kind,
                seed.wrapping_mul(1_000_003).wrapping_add(k as u64),
                pattern,
            )
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    points: Option<Vec<Point3>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n_points: Option<usize>,
    gt_t: [f64; 3],
    gt_q: [f64; 4],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskRecord {
    id: String,
    category: String,
    pattern: Pattern,
    seed: u64,
    parts: Vec<PartRecord>,
    chain: Vec<usize>,
    groups: Vec<usize>,
    contacts: Vec<Contact>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sidecar: Option<String>,
}

/// Points are written inline or into a little-endian `f32` sidecar file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointStorage {
    Inline,
    Sidecar,
}

fn task_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("objects").join(format!("{id}.json"))
}

pub fn save_task(task: &AssemblyTask, dir: &Path, storage: PointStorage) -> Result<(), DataError> {
    let objects = dir.join("objects");
    fs::create_dir_all(&objects).map_err(io_err(&objects))?;
    let sidecar = (storage == PointStorage::Sidecar).then(|| format!("{}.bin", task.id));
    if let Some(name) = &sidecar {
        let path = objects.join(name);
        let mut buf = Vec::new();
        for p in &task.parts {
            for pt in p.points() {
                for v in pt {
                    let f = *v as f32;
                    if f as f64 != *v {
                        return Err(DataError::Invalid {
                            object: task.id.clone(),
                            message: "points are not f32-exact; use inline storage".into(),
                        });
                    }
                    buf.extend_from_slice(&f.to_le_bytes());
                }
            }
        }
        fs::write(&path, buf).map_err(io_err(&path))?;
    }
    let record = TaskRecord {
        id: task.id.clone(),
        category: task.category.clone(),
        pattern: task.pattern,
        seed: task.seed,
        parts: task
            .parts
            .iter()
            .zip(&task.gt)
            .map(|(p, pose)| PartRecord {
                points: sidecar.is_none().then(|| p.points().to_vec()),
                n_points: sidecar.is_some().then(|| p.len()),
                gt_t: pose.translation,
                gt_q: pose.rotation,
            })
            .collect(),
        chain: task.chain.clone(),
        groups: task.grouping.ids().to_vec(),
        contacts: task.contacts.clone(),
        sidecar,
    };
    let path = task_path(dir, &task.id);
    let json = serde_json::to_string(&record).expect("record serializes");
    fs::write(&path, json).map_err(io_err(&path))
}

pub fn load_task(path: &Path) -> Result<AssemblyTask, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let record: TaskRecord = serde_json::from_str(&text).map_err(|e| DataError::Schema {
        object: stem.clone(),
        message: e.to_string(),
    })?;
    let id = record.id.clone();
    let schema = |m: String| DataError::Schema {
        object: id.clone(),
        message: m,
    };
    let mut sidecar_vals: Option<(Vec<f32>, usize)> = None;
    if let Some(name) = &record.sidecar {
        let p = path.with_file_name(name);
        let bytes = fs::read(&p).map_err(io_err(&p))?;
        if bytes.len() % 4 != 0 {
            return Err(schema(format!(
                "sidecar {name} length {} is not a multiple of 4",
                bytes.len()
            )));
        }
        let vals = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        sidecar_vals = Some((vals, 0));
    }
    let mut parts = Vec::with_capacity(record.parts.len());
    let mut gt = Vec::with_capacity(record.parts.len());
    for (k, pr) in record.parts.into_iter().enumerate() {
        let points = match (pr.points, pr.n_points, sidecar_vals.as_mut()) {
            (Some(p), None, None) => p,
            (None, Some(n), Some((vals, offset))) => {
                let end = *offset + 3 * n;
                if end > vals.len() {
                    return Err(schema(format!("part {k}: sidecar too short")));
                }
                let pts = vals[*offset..end]
                    .chunks_exact(3)
                    .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
                    .collect();
                *offset = end;
                pts
            }
            _ => {
                return Err(schema(format!(
                    "part {k}: needs either `points` or `n_points` with a sidecar"
                )))
            }
        };
        parts.push(PartCloud::new(points).map_err(|e| schema(format!("part {k}: {e}")))?);
        gt.push(Pose::new(pr.gt_q, pr.gt_t).map_err(|e| schema(format!("part {k}: gt_q: {e}")))?);
    }
    if let Some((vals, offset)) = &sidecar_vals {
        if *offset != vals.len() {
            return Err(schema("sidecar has trailing values".into()));
        }
    }
    let grouping =
        SymmetryGrouping::from_ids(record.groups).map_err(|e| schema(format!("groups: {e}")))?;
    let task = AssemblyTask {
        id: record.id,
        category: record.category,
        parts,
        gt,
        chain: record.chain,
        grouping,
        contacts: record.contacts,
        pattern: record.pattern,
        seed: record.seed,
    };
    task.validate()?;
    Ok(task)
}

/// Which ids go to training, validation and testing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x1000_0000_01b3);
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

/// 70/10/20 split by ranking ids on a seeded hash.
pub fn split_ids(ids: &[String], seed: u64) -> SplitManifest {
    let mut ranked: Vec<&String> = ids.iter().collect();
    ranked.sort_by_key(|id| (fnv1a(id.as_bytes(), seed), (*id).clone()));
    let n = ids.len();
    let n_train = (n as f64 * 0.7).round() as usize;
    let n_val = ((n as f64 * 0.1).round() as usize).min(n - n_train);
    let take = |range: std::ops::Range<usize>| {
        let mut v: Vec<String> = ranked[range].iter().map(|s| (*s).clone()).collect();
        v.sort();
        v
    };
    SplitManifest {
        train: take(0..n_train),
        val: take(n_train..n_train + n_val),
        test: take(n_train + n_val..n),
        seed,
    }
}

/// Tasks sorted by id plus the split manifest, if present.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub tasks: Vec<AssemblyTask>,
    pub split: Option<SplitManifest>,
}

impl Dataset {
    pub fn get(&self, id: &str) -> Option<&AssemblyTask> {
        self.tasks
            .binary_search_by(|t| t.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.tasks[i])
    }

    /// Tasks listed under `ids`, in that order.
    pub fn subset(&self, ids: &[String]) -> Result<Vec<AssemblyTask>, DataError> {
        ids.iter()
            .map(|id| {
                self.get(id).cloned().ok_or_else(|| DataError::Invalid {
                    object: id.clone(),
                    message: "listed in split.json but missing from objects/".into(),
                })
            })
            .collect()
    }
}

pub fn save_dataset(
    tasks: &[AssemblyTask],
    split: Option<&SplitManifest>,
    dir: &Path,
    storage: PointStorage,
) -> Result<(), DataError> {
    for t in tasks {
        save_task(t, dir, storage)?;
    }
    if let Some(s) = split {
        let path = dir.join("split.json");
        fs::write(
            &path,
            serde_json::to_string_pretty(s).expect("manifest serializes"),
        )
        .map_err(io_err(&path))?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let objects = dir.join("objects");
    let mut paths: Vec<PathBuf> = fs::read_dir(&objects)
        .map_err(io_err(&objects))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    let mut tasks = paths
        .iter()
        .map(|p| load_task(p))
        .collect::<Result<Vec<_>, _>>()?;
    tasks.sort_by(|a, b| a.id.cmp(&b.id));
    let split_path = dir.join("split.json");
    let split = if split_path.exists() {
        let text = fs::read_to_string(&split_path).map_err(io_err(&split_path))?;
        Some(
            serde_json::from_str(&text).map_err(|source| DataError::Json {
                path: split_path.clone(),
                source,
            })?,
        )
    } else {
        None
    };
    Ok(Dataset { tasks, split })
}

/// Export format, chosen from the file extension.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeshFormat {
    Ply,
    Obj,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Result<Self, DataError> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("ply") => Ok(MeshFormat::Ply),
            Some("obj") => Ok(MeshFormat::Obj),
            _ => Err(DataError::Unknown {
                what: "export format",
                value: path.display().to_string(),
            }),
        }
    }
}

/// Distinct color per part from golden-ratio hue steps.
pub fn part_color(k: usize) -> [u8; 3] {
    let h = (k as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let c = |v: f64| (40.0 + v * 200.0).round() as u8;
    [c(r), c(g), c(b)]
}

/// Placed union as PLY or OBJ text.
pub fn render_shape(parts: &[PartCloud], poses: &[Pose], format: MeshFormat) -> Vec<u8> {
    let placed: Vec<PartCloud> = parts
        .iter()
        .zip(poses)
        .map(|(p, pose)| {
            apply_pose(&Pose::from_raw(pose.rotation, pose.translation), p).expect("normalized")
        })
        .collect();
    let total: usize = placed.iter().map(PartCloud::len).sum();
    let mut out = Vec::new();
    match format {
        MeshFormat::Ply => {
            write!(
                out,
                "ply\nformat ascii 1.0\ncomment parts {}\nelement vertex {total}\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
                placed.len()
            )
            .expect("in-memory write");
            for (k, p) in placed.iter().enumerate() {
                let [r, g, b] = part_color(k);
                for q in p.points() {
                    writeln!(
                        out,
                        "{} {} {} {r} {g} {b}",
                        q[0] as f32, q[1] as f32, q[2] as f32
                    )
                    .expect("in-memory write");
                }
            }
        }
        MeshFormat::Obj => {
            for (k, p) in placed.iter().enumerate() {
                writeln!(out, "o part{k}").expect("in-memory write");
                for q in p.points() {
                    writeln!(out, "v {} {} {}", q[0] as f32, q[1] as f32, q[2] as f32)
                        .expect("in-memory write");
                }
            }
        }
    }
    out
}

pub fn export_shape(parts: &[PartCloud], poses: &[Pose], path: &Path) -> Result<(), DataError> {
    let bytes = render_shape(parts, poses, MeshFormat::from_path(path)?);
    fs::write(path, bytes).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::evaluate_object;

    #[test]
    fn sequences_follow_their_keys() {
        let c = [
            [0.0, 0.3, 0.0],
            [1.0, 0.1, 0.0],
            [0.0, 0.9, 0.5],
            [0.2, 0.5, 0.1],
        ];
        let e = [
            [1.0, 1.0, 1.0],
            [2.0, 1.0, 1.0],
            [0.5, 0.5, 0.5],
            [3.0, 1.0, 1.0],
        ];
        assert_eq!(
            make_sequence(&c, &e, Pattern::Diagonal, 0),
            vec![0, 3, 1, 2]
        );
        let t2b = make_sequence(&c, &e, Pattern::TopToBottom, 0);
        let mut b2t = make_sequence(&c, &e, Pattern::BottomToTop, 0);
        assert_eq!(t2b, vec![2, 3, 0, 1]);
        b2t.reverse();
        assert_eq!(b2t, t2b);
        assert_eq!(
            make_sequence(&c, &e, Pattern::DescendingSize, 0),
            vec![3, 1, 0, 2]
        );
        assert_eq!(
            make_sequence(&c, &e, Pattern::Random, 9),
            make_sequence(&c, &e, Pattern::Random, 9)
        );
    }

    #[test]
    fn ties_keep_index_order() {
        let c = [[0.0, 1.0, 0.0]; 4];
        let e = [[1.0; 3]; 4];
        for p in [
            Pattern::Diagonal,
            Pattern::TopToBottom,
            Pattern::BottomToTop,
            Pattern::DescendingSize,
        ] {
            assert_eq!(make_sequence(&c, &e, p, 0), vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn pattern_names_roundtrip() {
        for p in Pattern::ALL {
            assert_eq!(p.name().parse::<Pattern>().unwrap(), p);
            assert_eq!(serde_json::to_string(&p).unwrap(), format!("\"{p}\""));
        }
        assert!("zigzag".parse::<Pattern>().is_err());
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_object(Category::Table, 7);
        let b = synth_object(Category::Table, 7);
        assert_eq!(a, b);
        assert_ne!(a, synth_object(Category::Table, 8));
    }

    #[test]
    fn table_structure() {
        for seed in 0..6 {
            let t = synth_object(Category::Table, seed);
            t.validate().unwrap();
            assert!(t.len() == 5 || t.len() == 7);
            assert!(t.parts.iter().all(|p| p.len() == POINTS_PER_PART));
            // top touches every leg, legs never touch each other
            for leg in 1..=4 {
                assert!(
                    t.contacts.iter().any(|c| c.i == 0 && c.j == leg),
                    "seed {seed}: leg {leg}"
                );
                for other in leg + 1..=4 {
                    assert!(!t.contacts.iter().any(|c| c.i == leg && c.j == other));
                }
            }
            assert_eq!(t.grouping.ids()[..5], [1, 2, 2, 2, 2]);
            let b2t = t.sequence(Pattern::BottomToTop, 0);
            assert_eq!(b2t[b2t.len() - 1], 0);
        }
    }

    #[test]
    fn part_counts_in_range() {
        for kind in Category::ALL {
            for seed in 0..8 {
                let t = synth_object(kind, seed);
                assert!((4..=16).contains(&t.len()), "{kind} {seed}: {}", t.len());
            }
        }
    }

    #[test]
    fn grouping_matches_shape_grouping() {
        for kind in Category::ALL {
            for seed in 0..5 {
                let t = synth_object(kind, seed);
                assert_eq!(
                    group_by_symmetry(&t.parts, DEFAULT_GROUP_TOLERANCE),
                    t.grouping
                );
            }
        }
    }

    #[test]
    fn gt_metrics_are_perfect() {
        let cfg = MetricConfig::default();
        for kind in Category::ALL {
            for seed in 0..4 {
                let t = synth_object(kind, seed);
                let r = evaluate_object(
                    &t.id,
                    &t.category,
                    &t.parts,
                    &t.gt,
                    &t.gt,
                    &t.grouping,
                    &t.contacts,
                    &cfg,
                );
                assert_eq!((r.scd, r.pa, r.ca, r.sr), (0.0, 1.0, 1.0, 1), "{}", t.id);
                assert!(!r.ca_vacuous);
            }
        }
    }

    #[test]
    fn parts_are_canonical_and_f32_exact() {
        let t = synth_object(Category::Chair, 3);
        for p in &t.parts {
            let c = p.centroid();
            assert!(c.iter().all(|v| v.abs() < 1e-6));
            assert!(p
                .points()
                .iter()
                .flatten()
                .all(|v| (*v as f32) as f64 == *v));
        }
    }

    #[test]
    fn save_load_roundtrip_both_storages() {
        let dir = tempfile::tempdir().unwrap();
        let tasks = vec![
            synth_object(Category::Table, 1),
            synth_object(Category::Shelf, 2),
        ];
        let ids: Vec<String> = tasks.iter().map(|t| t.id.clone()).collect();
        let split = split_ids(&ids, 1);
        for storage in [PointStorage::Inline, PointStorage::Sidecar] {
            let d = dir.path().join(format!("{storage:?}"));
            save_dataset(&tasks, Some(&split), &d, storage).unwrap();
            let loaded = load_dataset(&d).unwrap();
            let mut expected = tasks.clone();
            expected.sort_by(|a, b| a.id.cmp(&b.id));
            assert_eq!(loaded.tasks, expected);
            assert_eq!(loaded.split.as_ref(), Some(&split));
        }
    }

    #[test]
    fn missing_quaternion_names_the_object() {
        let dir = tempfile::tempdir().unwrap();
        let t = synth_object(Category::Table, 4);
        save_task(&t, dir.path(), PointStorage::Inline).unwrap();
        let path = task_path(dir.path(), &t.id);
        let mut v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        v["parts"][0].as_object_mut().unwrap().remove("gt_q");
        fs::write(&path, v.to_string()).unwrap();
        let err = load_task(&path).unwrap_err().to_string();
        assert!(err.contains(&t.id) && err.contains("gt_q"), "{err}");
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let ids: Vec<String> = (0..100).map(|k| format!("obj-{k:03}")).collect();
        let s = split_ids(&ids, 1);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 10, 20));
        let mut all: Vec<String> = s
            .train
            .iter()
            .chain(&s.val)
            .chain(&s.test)
            .cloned()
            .collect();
        all.sort();
        assert_eq!(all, ids);
        assert_eq!(split_ids(&ids, 1), s);
        assert_ne!(split_ids(&ids, 2).train, s.train);
    }

    #[test]
    fn export_examples() {
        let t = synth_object(Category::Table, 5);
        let one = render_shape(&t.parts[..1], &t.gt[..1], MeshFormat::Ply);
        let text = String::from_utf8(one.clone()).unwrap();
        assert!(text.contains("element vertex 1000\n"));
        let body = text.split("end_header\n").nth(1).unwrap();
        assert_eq!(body.lines().count(), 1000);
        assert_eq!(
            one,
            render_shape(&t.parts[..1], &t.gt[..1], MeshFormat::Ply)
        );

        let all = String::from_utf8(render_shape(&t.parts, &t.gt, MeshFormat::Ply)).unwrap();
        let colors: std::collections::BTreeSet<&str> = all
            .split("end_header\n")
            .nth(1)
            .unwrap()
            .lines()
            .map(|l| l.splitn(4, ' ').nth(3).unwrap())
            .collect();
        assert_eq!(colors.len(), t.len());

        let obj = String::from_utf8(render_shape(&t.parts, &t.gt, MeshFormat::Obj)).unwrap();
        assert_eq!(
            obj.lines().filter(|l| l.starts_with("v ")).count(),
            t.len() * 1000
        );
        assert!(MeshFormat::from_path(Path::new("x.stl")).is_err());
    }
}
