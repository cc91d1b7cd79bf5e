//! Pose math, Chamfer distance, PCA canonicalization and farthest point sampling.
//!
//! Everything here is a pure function over immutable inputs. Points are plain
//! `[f64; 3]` arrays; quaternions are `(w, x, y, z)`.

use nalgebra::{Matrix3, Rotation3, SymmetricEigen, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point3 = [f64; 3];

/// Allowed deviation of a pose quaternion from unit norm.
pub const UNIT_TOLERANCE: f64 = 1e-6;

const EIGEN_TIE_REL: f64 = 1e-9;
const SKEW_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("point {index} has a non-finite coordinate")]
    NonFinite { index: usize },
    #[error("invalid pose: quaternion norm {norm} is not within {UNIT_TOLERANCE} of 1")]
    InvalidPose { norm: f64 },
    #[error("cannot sample {k} points from a cloud of {available}")]
    SampleCount { k: usize, available: usize },
    #[error("start index {start} out of range for a cloud of {len} points")]
    StartIndex { start: usize, len: usize },
}

/// A part's point set. Never empty, every coordinate finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point3>", into = "Vec<Point3>")]
pub struct PartCloud {
    points: Vec<Point3>,
}

impl PartCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self, GeomError> {
        if points.is_empty() {
            return Err(GeomError::EmptyCloud);
        }
        if let Some(index) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(GeomError::NonFinite { index });
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    pub fn centroid(&self) -> Point3 {
        centroid(&self.points)
    }

    /// Cloud made of the points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> PartCloud {
        PartCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
        }
    }
}

impl TryFrom<Vec<Point3>> for PartCloud {
    type Error = GeomError;
    fn try_from(points: Vec<Point3>) -> Result<Self, Self::Error> {
        PartCloud::new(points)
    }
}

impl From<PartCloud> for Vec<Point3> {
    fn from(c: PartCloud) -> Self {
        c.points
    }
}

/// Rigid transform: unit quaternion `(w, x, y, z)` followed by a translation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        rotation: [1.0, 0.0, 0.0, 0.0],
        translation: [0.0; 3],
    };

    /// Validates unit norm and applies the canonical sign.
    pub fn new(rotation: [f64; 4], translation: [f64; 3]) -> Result<Self, GeomError> {
        let pose = Pose {
            rotation: canonical_sign(rotation),
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    /// Normalizes an arbitrary nonzero quaternion.
    pub fn from_raw(rotation: [f64; 4], translation: [f64; 3]) -> Self {
        let n = quat_norm(&rotation);
        let q = if n > 0.0 {
            rotation.map(|c| c / n)
        } else {
            [1.0, 0.0, 0.0, 0.0]
        };
        Pose {
            rotation: canonical_sign(q),
            translation,
        }
    }

    /// Pose whose rotation is the given proper rotation matrix.
    pub fn from_matrix(rotation: &Matrix3<f64>, translation: [f64; 3]) -> Self {
        let rot = Rotation3::from_matrix_unchecked(*rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        Pose::from_raw([q.w, q.i, q.j, q.k], translation)
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        let norm = quat_norm(&self.rotation);
        if !norm.is_finite()
            || (norm - 1.0).abs() >= UNIT_TOLERANCE
            || self.translation.iter().any(|t| !t.is_finite())
        {
            return Err(GeomError::InvalidPose { norm });
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == [1.0, 0.0, 0.0, 0.0] && self.translation == [0.0; 3]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(&self.rotation)
    }

    pub fn transform_point(&self, p: &Point3) -> Point3 {
        let r = self.rotation_matrix();
        let mut out = rotate(&r, p);
        for (o, t) in out.iter_mut().zip(self.translation) {
            *o += t;
        }
        out
    }

    /// Maps a world point back into the part frame.
    pub fn inverse_transform_point(&self, p: &Point3) -> Point3 {
        let r = self.rotation_matrix();
        let d = Vector3::new(
            p[0] - self.translation[0],
            p[1] - self.translation[1],
            p[2] - self.translation[2],
        );
        let v = r.transpose() * d;
        [v.x, v.y, v.z]
    }
}

pub fn quat_norm(q: &[f64; 4]) -> f64 {
    q.iter().map(|c| c * c).sum::<f64>().sqrt()
}

/// Flips `q` so that `w >= 0`, or the first nonzero component is positive when `w == 0`.
pub fn canonical_sign(q: [f64; 4]) -> [f64; 4] {
    let lead = q.iter().copied().find(|c| *c != 0.0).unwrap_or(0.0);
    if lead < 0.0 {
        q.map(|c| -c)
    } else {
        q
    }
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

#[inline]
pub fn rotate(r: &Matrix3<f64>, p: &Point3) -> Point3 {
    [
        r[(0, 0)] * p[0] + r[(0, 1)] * p[1] + r[(0, 2)] * p[2],
        r[(1, 0)] * p[0] + r[(1, 1)] * p[1] + r[(1, 2)] * p[2],
        r[(2, 0)] * p[0] + r[(2, 1)] * p[1] + r[(2, 2)] * p[2],
    ]
}

/// `p ↦ R(q)·p + t` for every point.
pub fn apply_pose(pose: &Pose, cloud: &PartCloud) -> Result<PartCloud, GeomError> {
    pose.validate()?;
    if pose.is_identity() {
        return Ok(cloud.clone());
    }
    Ok(PartCloud {
        points: transform_points(pose, cloud.points()),
    })
}

/// Rotation only; the translation of `pose` is ignored.
pub fn rotate_cloud(pose: &Pose, cloud: &PartCloud) -> Result<PartCloud, GeomError> {
    apply_pose(
        &Pose {
            rotation: pose.rotation,
            translation: [0.0; 3],
        },
        cloud,
    )
}

pub(crate) fn transform_points(pose: &Pose, points: &[Point3]) -> Vec<Point3> {
    let r = pose.rotation_matrix();
    points
        .iter()
        .map(|p| {
            let q = rotate(&r, p);
            [
                q[0] + pose.translation[0],
                q[1] + pose.translation[1],
                q[2] + pose.translation[2],
            ]
        })
        .collect()
}

#[inline]
pub fn dist_sq(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// For every point of `from`, the index of and squared distance to its nearest
/// point in `to` (first index on ties). Brute force.
pub fn nearest_neighbors(from: &[Point3], to: &[Point3]) -> (Vec<usize>, Vec<f64>) {
    let mut idx = Vec::with_capacity(from.len());
    let mut d = Vec::with_capacity(from.len());
    for p in from {
        let mut best = f64::INFINITY;
        let mut best_j = 0;
        for (j, q) in to.iter().enumerate() {
            let dd = dist_sq(p, q);
            if dd < best {
                best = dd;
                best_j = j;
            }
        }
        idx.push(best_j);
        d.push(best);
    }
    (idx, d)
}

fn directed_mean(from: &[Point3], to: &[Point3]) -> f64 {
    let mut sum = 0.0;
    if to.len() < TREE_MIN {
        for p in from {
            let mut best = f64::INFINITY;
            for q in to {
                let dd = dist_sq(p, q);
                if dd < best {
                    best = dd;
                }
            }
            sum += best;
        }
    } else {
        let tree =
            kiddo::ImmutableKdTree::<f64, 3>::new_from_slice(to).expect("nonempty finite cloud");
        for p in from {
            sum += tree
                .query(p)
                .nearest_one::<kiddo::SquaredEuclidean<f64>>()
                .execute()
                .distance;
        }
    }
    sum / from.len() as f64
}

/// Below this many target points a brute-force scan beats building a k-d tree.
const TREE_MIN: usize = 64;

/// Symmetric Chamfer distance with mean-reduced directed terms.
pub fn chamfer_points(a: &[Point3], b: &[Point3]) -> Result<f64, GeomError> {
    if a.is_empty() || b.is_empty() {
        return Err(GeomError::EmptyCloud);
    }
    Ok(directed_mean(a, b) + directed_mean(b, a))
}

pub fn chamfer(a: &PartCloud, b: &PartCloud) -> f64 {
    directed_mean(a.points(), b.points()) + directed_mean(b.points(), a.points())
}

pub fn centroid(points: &[Point3]) -> Point3 {
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    c.map(|v| v / n)
}

/// Maps raw coordinates into a part's canonical space: `R · (p − center)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CanonicalFrame {
    pub rotation: Matrix3<f64>,
    pub center: Point3,
}

impl CanonicalFrame {
    pub fn apply(&self, p: &Point3) -> Point3 {
        let d = [
            p[0] - self.center[0],
            p[1] - self.center[1],
            p[2] - self.center[2],
        ];
        rotate(&self.rotation, &d)
    }

    /// Pose taking canonical coordinates back to the raw frame.
    pub fn to_pose(&self) -> Pose {
        Pose::from_matrix(&self.rotation.transpose(), self.center)
    }
}

fn covariance(points: &[Point3], c: &Point3) -> Matrix3<f64> {
    let mut m = Matrix3::zeros();
    for p in points {
        let d = Vector3::new(p[0] - c[0], p[1] - c[1], p[2] - c[2]);
        m += d * d.transpose();
    }
    m / points.len() as f64
}

/// Principal axes sorted by descending variance, with tied subspaces resolved
/// against the coordinate axes.
fn principal_axes(cov: &Matrix3<f64>) -> [Vector3<f64>; 3] {
    let eig = SymmetricEigen::new(*cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs: Vec<Vector3<f64>> = order
        .iter()
        .map(|&i| eig.eigenvectors.column(i).into_owned())
        .collect();

    let scale = vals[0].abs().max(f64::MIN_POSITIVE);
    let mut axes: Vec<Vector3<f64>> = Vec::with_capacity(3);
    let mut i = 0;
    while i < 3 {
        let mut j = i + 1;
        while j < 3 && (vals[i] - vals[j]).abs() <= EIGEN_TIE_REL * scale {
            j += 1;
        }
        if j - i == 1 {
            axes.push(vecs[i]);
        } else {
            // Coordinate axes ordered by coordinate variance, projected into
            // the tied subspace.
            let mut coords = [0usize, 1, 2];
            coords.sort_by(|&a, &b| {
                cov[(b, b)]
                    .partial_cmp(&cov[(a, a)])
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            let basis = &vecs[i..j];
            let mut taken = 0;
            for &c in &coords {
                if taken == j - i {
                    break;
                }
                let e = Vector3::ith(c, 1.0);
                let mut v = basis
                    .iter()
                    .fold(Vector3::zeros(), |acc, b| acc + b * b.dot(&e));
                for a in &axes {
                    v -= a * a.dot(&v);
                }
                let n = v.norm();
                if n > 1e-6 {
                    axes.push(v / n);
                    taken += 1;
                }
            }
            for b in basis.iter().skip(taken) {
                let mut v = *b;
                for a in &axes {
                    v -= a * a.dot(&v);
                }
                axes.push(v.normalize());
            }
        }
        i = j;
    }
    [axes[0], axes[1], axes[2]]
}

/// Zero-centers the cloud and rotates its principal axes onto x, y, z.
pub fn canonicalize(raw: &PartCloud) -> (PartCloud, CanonicalFrame) {
    let pts = raw.points();
    let center = centroid(pts);
    if pts.len() == 1 {
        return (
            PartCloud {
                points: vec![[0.0; 3]],
            },
            CanonicalFrame {
                rotation: Matrix3::identity(),
                center,
            },
        );
    }
    let cov = covariance(pts, &center);
    let [mut a0, mut a1, _] = principal_axes(&cov);

    let centered: Vec<Vector3<f64>> = pts
        .iter()
        .map(|p| Vector3::new(p[0] - center[0], p[1] - center[1], p[2] - center[2]))
        .collect();
    let lex_max = centered
        .iter()
        .copied()
        .fold(None::<Vector3<f64>>, |best, v| match best {
            Some(b) if lex_cmp(&b, &v) != std::cmp::Ordering::Less => Some(b),
            _ => Some(v),
        })
        .expect("nonempty");
    for axis in [&mut a0, &mut a1] {
        let skew = centered.iter().map(|v| v.dot(axis).powi(3)).sum::<f64>() / pts.len() as f64;
        let flip = if skew.abs() < SKEW_EPS {
            lex_max.dot(axis) < 0.0
        } else {
            skew < 0.0
        };
        if flip {
            *axis = -*axis;
        }
    }
    let a2 = a0.cross(&a1);
    let rotation = Matrix3::from_rows(&[a0.transpose(), a1.transpose(), a2.transpose()]);
    let frame = CanonicalFrame { rotation, center };
    let points = pts.iter().map(|p| frame.apply(p)).collect();
    (PartCloud { points }, frame)
}

fn lex_cmp(a: &Vector3<f64>, b: &Vector3<f64>) -> std::cmp::Ordering {
    for k in 0..3 {
        match a[k].partial_cmp(&b[k]) {
            Some(std::cmp::Ordering::Equal) | None => continue,
            Some(o) => return o,
        }
    }
    std::cmp::Ordering::Equal
}

/// Greedy max-min sampling starting from `start`; ties go to the smallest index.
pub fn farthest_point_sample(
    cloud: &PartCloud,
    k: usize,
    start: usize,
) -> Result<Vec<usize>, GeomError> {
    let pts = cloud.points();
    if k == 0 || k > pts.len() {
        return Err(GeomError::SampleCount {
            k,
            available: pts.len(),
        });
    }
    if start >= pts.len() {
        return Err(GeomError::StartIndex {
            start,
            len: pts.len(),
        });
    }
    let mut chosen = Vec::with_capacity(k);
    let mut min_d = vec![f64::INFINITY; pts.len()];
    let mut current = start;
    chosen.push(current);
    min_d[current] = f64::NEG_INFINITY;
    while chosen.len() < k {
        let c = pts[current];
        let mut best = f64::NEG_INFINITY;
        let mut best_i = usize::MAX;
        for (i, p) in pts.iter().enumerate() {
            if min_d[i] == f64::NEG_INFINITY {
                continue;
            }
            let d = dist_sq(p, &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best {
                best = min_d[i];
                best_i = i;
            }
        }
        current = best_i;
        min_d[current] = f64::NEG_INFINITY;
        chosen.push(current);
    }
    Ok(chosen)
}

/// Bounding-box extents in the cloud's own PCA frame, sorted descending.
pub fn bbox_extents(cloud: &PartCloud) -> [f64; 3] {
    let (canon, _) = canonicalize(cloud);
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in canon.points() {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let mut e = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    e.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(points: &[Point3]) -> PartCloud {
        PartCloud::new(points.to_vec()).unwrap()
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize, scale: [f64; 3]) -> PartCloud {
        let pts = (0..n)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0) * scale[0] + rng.random::<f64>().powi(3) * 0.2,
                    rng.random_range(-1.0..1.0) * scale[1] + rng.random::<f64>().powi(2) * 0.1,
                    rng.random_range(-1.0..1.0) * scale[2] + rng.random::<f64>().powi(4) * 0.05,
                ]
            })
            .collect();
        PartCloud::new(pts).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let q = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        Pose::from_raw(
            q,
            [
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                0.3,
            ],
        )
    }

    /// Symmetric grid on the surface of an axis-aligned centered box.
    pub(crate) fn box_grid(ext: [f64; 3], n: usize) -> PartCloud {
        let mut pts = Vec::new();
        let h = ext.map(|e| e / 2.0);
        for i in 0..=n {
            for j in 0..=n {
                let u = -1.0 + 2.0 * i as f64 / n as f64;
                let v = -1.0 + 2.0 * j as f64 / n as f64;
                for s in [-1.0, 1.0] {
                    pts.push([s * h[0], u * h[1], v * h[2]]);
                    pts.push([u * h[0], s * h[1], v * h[2]]);
                    pts.push([u * h[0], v * h[1], s * h[2]]);
                }
            }
        }
        cloud(&pts)
    }

    #[test]
    fn apply_pose_examples() {
        let p = cloud(&[[0.0, 0.0, 0.0]]);
        let out = apply_pose(
            &Pose::new([1.0, 0.0, 0.0, 0.0], [1.0, 2.0, 3.0]).unwrap(),
            &p,
        )
        .unwrap();
        assert_eq!(out.points(), &[[1.0, 2.0, 3.0]]);

        let c = cloud(&[[0.3, -0.0, 5.0], [1.0, 2.0, 3.0]]);
        let same = apply_pose(&Pose::IDENTITY, &c).unwrap();
        assert_eq!(same, c);
        assert_eq!(same.points()[0][1].to_bits(), (-0.0f64).to_bits());

        let h = std::f64::consts::FRAC_1_SQRT_2;
        let pose = Pose::new([h, 0.0, 0.0, h], [0.0, 0.0, 1.0]).unwrap();
        let out = apply_pose(&pose, &cloud(&[[1.0, 0.0, 0.0]])).unwrap();
        // oracle: 90 degrees about z as an explicit matrix
        let oracle = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let v = oracle * Vector3::new(1.0, 0.0, 0.0) + Vector3::new(0.0, 0.0, 1.0);
        for k in 0..3 {
            assert!((out.points()[0][k] - v[k]).abs() < 1e-12);
        }
        assert!(
            (out.points()[0][1] - 1.0).abs() < 1e-12 && (out.points()[0][2] - 1.0).abs() < 1e-12
        );
    }

    #[test]
    fn invalid_pose_rejected() {
        let bad = Pose {
            rotation: [1.0, 0.1, 0.0, 0.0],
            translation: [0.0; 3],
        };
        assert!(matches!(
            apply_pose(&bad, &cloud(&[[0.0; 3]])),
            Err(GeomError::InvalidPose { .. })
        ));
        assert!(Pose::new([2.0, 0.0, 0.0, 0.0], [0.0; 3]).is_err());
    }

    #[test]
    fn canonical_quaternion_sign() {
        let p = Pose::new([-1.0, 0.0, 0.0, 0.0], [0.0; 3]).unwrap();
        assert_eq!(p.rotation, [1.0, 0.0, 0.0, 0.0]);
        let p = Pose::new([0.0, -1.0, 0.0, 0.0], [0.0; 3]).unwrap();
        assert_eq!(p.rotation, [0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn double_cover_and_matrix_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = random_cloud(&mut rng, 50, [1.0, 0.5, 0.2]);
        for _ in 0..20 {
            let p = random_pose(&mut rng);
            let neg = Pose {
                rotation: p.rotation.map(|x| -x),
                translation: p.translation,
            };
            let a = apply_pose(&p, &c).unwrap();
            let b = apply_pose(&neg, &c).unwrap();
            for (x, y) in a.points().iter().zip(b.points()) {
                assert!(dist_sq(x, y).sqrt() < 1e-9);
            }
            let back = Pose::from_matrix(&p.rotation_matrix(), p.translation);
            for k in 0..4 {
                assert!((back.rotation[k] - p.rotation[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn chamfer_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_cloud(&mut rng, 40, [1.0, 1.0, 1.0]);
        assert_eq!(chamfer(&a, &a), 0.0);
        assert_eq!(
            chamfer(&cloud(&[[0.0; 3]]), &cloud(&[[1.0, 0.0, 0.0]])),
            2.0
        );

        let x = [[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let y = [[0.0, 0.0, 0.0]];
        // all-pairs oracle
        let brute = |a: &[Point3], b: &[Point3]| -> f64 {
            let d = |p: &Point3, q: &Point3| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>();
            let ab: f64 = a
                .iter()
                .map(|p| b.iter().map(|q| d(p, q)).fold(f64::MAX, f64::min))
                .sum::<f64>()
                / a.len() as f64;
            let ba: f64 = b
                .iter()
                .map(|q| a.iter().map(|p| d(p, q)).fold(f64::MAX, f64::min))
                .sum::<f64>()
                / b.len() as f64;
            ab + ba
        };
        assert_eq!(brute(&x, &y), 2.0);
        assert_eq!(chamfer_points(&x, &y).unwrap(), 2.0);
        assert_eq!(chamfer_points(&[], &y), Err(GeomError::EmptyCloud));

        // large clouds take the sweep path; the value must not change
        for (na, nb) in [(300, 500), (64, 64), (1000, 70)] {
            let a = random_cloud(&mut rng, na, [1.0, 0.3, 0.6]);
            let mut bp = random_cloud(&mut rng, nb, [0.5, 0.9, 0.2]).into_points();
            bp[1][0] = bp[0][0];
            let b = cloud(&bp);
            assert_eq!(chamfer(&a, &b), brute(a.points(), b.points()));
        }
    }

    #[test]
    fn chamfer_symmetric_and_rigid_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let a = random_cloud(&mut rng, 60, [1.0, 0.4, 0.3]);
            let b = random_cloud(&mut rng, 45, [0.7, 0.8, 0.1]);
            assert_eq!(chamfer(&a, &b), chamfer(&b, &a));
            let p = random_pose(&mut rng);
            let ta = apply_pose(&p, &a).unwrap();
            let tb = apply_pose(&p, &b).unwrap();
            assert!((chamfer(&ta, &tb) - chamfer(&a, &b)).abs() < 1e-6);
        }
    }

    #[test]
    fn canonicalize_grid_box_is_fixed_point() {
        let b = box_grid([2.0, 1.0, 0.5], 6);
        let (out, frame) = canonicalize(&b);
        for (p, q) in b.points().iter().zip(out.points()) {
            assert!(dist_sq(p, q).sqrt() < 1e-5, "{p:?} vs {q:?}");
        }
        assert!((frame.rotation.determinant() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn canonicalize_rotated_grid_box_matches() {
        let b = box_grid([2.0, 1.0, 0.5], 6);
        let (c0, _) = canonicalize(&b);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let rotated = apply_pose(&random_pose(&mut rng), &b).unwrap();
            let (c1, frame) = canonicalize(&rotated);
            // The grid is symmetric, so compare as point sets.
            let (_, d) = nearest_neighbors(c1.points(), c0.points());
            assert!(d.iter().all(|x| x.sqrt() < 1e-5));
            let det = frame.rotation.determinant();
            assert!((det - 1.0).abs() < 1e-6);
            let rrt = frame.rotation * frame.rotation.transpose();
            assert!((rrt - Matrix3::identity()).abs().max() < 1e-6);
        }
    }

    #[test]
    fn canonicalize_skewed_cloud_is_rotation_invariant_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = random_cloud(&mut rng, 300, [1.0, 0.5, 0.25]);
        let (c0, _) = canonicalize(&c);
        for _ in 0..5 {
            let moved = apply_pose(&random_pose(&mut rng), &c).unwrap();
            let (c1, _) = canonicalize(&moved);
            for (p, q) in c0.points().iter().zip(c1.points()) {
                assert!(dist_sq(p, q).sqrt() < 1e-5);
            }
        }
    }

    #[test]
    fn canonical_invariants_and_idempotence() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = apply_pose(
            &random_pose(&mut rng),
            &random_cloud(&mut rng, 200, [1.0, 0.6, 0.2]),
        )
        .unwrap();
        let (out, frame) = canonicalize(&c);
        let cen = out.centroid();
        assert!(cen.iter().map(|x| x * x).sum::<f64>().sqrt() < 1e-6);
        let cov = covariance(out.points(), &cen);
        let largest = cov[(0, 0)];
        assert!(cov[(0, 0)] >= cov[(1, 1)] && cov[(1, 1)] >= cov[(2, 2)]);
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            assert!(cov[(i, j)].abs() < 1e-5 * largest);
        }
        for (p, q) in c.points().iter().zip(out.points()) {
            assert!(dist_sq(&frame.apply(p), q).sqrt() < 1e-6);
        }
        let (again, _) = canonicalize(&out);
        for (p, q) in out.points().iter().zip(again.points()) {
            assert!(dist_sq(p, q).sqrt() < 1e-6);
        }
        // to_pose inverts the frame
        let back = apply_pose(&frame.to_pose(), &out).unwrap();
        for (p, q) in c.points().iter().zip(back.points()) {
            assert!(dist_sq(p, q).sqrt() < 1e-9);
        }
    }

    #[test]
    fn canonicalize_single_point() {
        let (out, frame) = canonicalize(&cloud(&[[3.0, 4.0, 5.0]]));
        assert_eq!(out.points(), &[[0.0; 3]]);
        assert_eq!(frame.center, [3.0, 4.0, 5.0]);
        assert_eq!(frame.rotation, Matrix3::identity());
    }

    #[test]
    fn canonicalize_degenerate_inputs_stay_proper() {
        for pts in [
            vec![[1.0, 1.0, 1.0]; 4],
            vec![[0.0, 0.0, 0.0], [1.0, 1.0, 0.0], [2.0, 2.0, 0.0]],
            vec![
                [1.0, 0.0, 0.0],
                [-1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, -1.0, 0.0],
            ],
        ] {
            let (out, frame) = canonicalize(&cloud(&pts));
            assert!((frame.rotation.determinant() - 1.0).abs() < 1e-6);
            assert!(out.points().iter().all(|p| p.iter().all(|c| c.is_finite())));
        }
    }

    #[test]
    fn fps_examples() {
        let line: Vec<Point3> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
        let c = cloud(&line);
        assert_eq!(farthest_point_sample(&c, 3, 0).unwrap(), vec![0, 9, 4]);
        assert_eq!(farthest_point_sample(&c, 1, 5).unwrap(), vec![5]);
        let mut all = farthest_point_sample(&c, 10, 2).unwrap();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(matches!(
            farthest_point_sample(&c, 11, 0),
            Err(GeomError::SampleCount { .. })
        ));
        assert!(farthest_point_sample(&c, 2, 10).is_err());
    }

    #[test]
    fn fps_matches_bruteforce_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = random_cloud(&mut rng, 80, [1.0, 1.0, 1.0]);
        let got = farthest_point_sample(&c, 20, 7).unwrap();
        // oracle: recompute min distance to the chosen set from scratch at each step
        let mut chosen = vec![7usize];
        while chosen.len() < 20 {
            let mut best = (-1.0, 0);
            for i in 0..c.len() {
                if chosen.contains(&i) {
                    continue;
                }
                let d = chosen
                    .iter()
                    .map(|&j| dist_sq(&c.points()[i], &c.points()[j]))
                    .fold(f64::INFINITY, f64::min);
                if d > best.0 {
                    best = (d, i);
                }
            }
            chosen.push(best.1);
        }
        assert_eq!(got, chosen);
    }

    #[test]
    fn bbox_extent_examples() {
        let mut corners = Vec::new();
        for x in [-1.0, 1.0] {
            for y in [-0.5, 0.5] {
                for z in [-0.25, 0.25] {
                    corners.push([x, y, z]);
                }
            }
        }
        let e = bbox_extents(&cloud(&corners));
        for (a, b) in e.iter().zip([2.0, 1.0, 0.5]) {
            assert!((a - b).abs() < 1e-9);
        }
        let sq = cloud(&[
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
        ]);
        assert!(bbox_extents(&sq)[2].abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = random_cloud(&mut rng, 200, [1.0, 0.5, 0.2]);
        let e0 = bbox_extents(&c);
        for _ in 0..5 {
            let e1 = bbox_extents(&apply_pose(&random_pose(&mut rng), &c).unwrap());
            for k in 0..3 {
                assert!((e0[k] - e1[k]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn cloud_rejects_bad_input() {
        assert_eq!(PartCloud::new(vec![]), Err(GeomError::EmptyCloud));
        assert_eq!(
            PartCloud::new(vec![[0.0; 3], [f64::NAN, 0.0, 0.0]]),
            Err(GeomError::NonFinite { index: 1 })
        );
    }
}
