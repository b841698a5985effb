//! Principal-axis pose normalization of binary masks.

use thiserror::Error;

use crate::volio::{Volume, VolumeError};

#[derive(Debug, Error)]
pub enum PoseError {
    #[error("degenerate mask: {0}")]
    DegenerateMask(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Result<T> = std::result::Result<T, PoseError>;

pub type Mat3 = [[f64; 3]; 3];

/// Relative tolerance under which a third moment counts as zero.
const SKEW_TOL: f64 = 1e-9;
/// Relative eigenvalue gap under which axis order is ambiguous.
const GAP_TOL: f64 = 1e-9;
/// Relative smallest-eigenvalue bound for a rank-deficient covariance.
const RANK_TOL: f64 = 1e-12;

/// First and second moments of a mask's foreground coordinates.
///
/// Coordinates are taken relative to `anchor`, the first foreground voxel in
/// scan order, and summed in integers so a translated mask yields identical
/// statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub anchor: [i64; 3],
    pub count: usize,
    /// Centroid relative to `anchor`.
    pub centroid_rel: [f64; 3],
    pub covariance: Mat3,
    rel_coords: Vec<[i64; 3]>,
}

impl Moments {
    pub fn centroid(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.anchor[a] as f64 + self.centroid_rel[a])
    }

    /// Mean cubed centered coordinate along unit direction `v`.
    pub fn third_moment(&self, v: [f64; 3]) -> f64 {
        let s: f64 = self
            .rel_coords
            .iter()
            .map(|r| {
                let t = dot(v, sub(to_f(*r), self.centroid_rel));
                t * t * t
            })
            .sum();
        s / self.count as f64
    }

    /// Centered coordinates of the foreground voxel farthest from the
    /// centroid; ties go to the last in scan order.
    fn farthest(&self) -> [f64; 3] {
        let mut best = [0.0; 3];
        let mut best_d = -1.0;
        for r in &self.rel_coords {
            let c = sub(to_f(*r), self.centroid_rel);
            let d = dot(c, c);
            if d >= best_d {
                best_d = d;
                best = c;
            }
        }
        best
    }
}

/// Foreground statistics of a mask; nonzero voxels are foreground.
pub fn foreground_moments(mask: &Volume) -> Result<Moments> {
    let dims = mask.dims();
    let data = mask.to_f32();
    let mut anchor = None;
    let mut rel_coords = Vec::new();
    let mut s1 = [0i128; 3];
    let mut s2 = [[0i128; 3]; 3];
    for (i, &v) in data.iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        let p = [
            i % dims[0],
            (i / dims[0]) % dims[1],
            i / (dims[0] * dims[1]),
        ];
        let p = p.map(|c| c as i64);
        let a = *anchor.get_or_insert(p);
        let r: [i64; 3] = std::array::from_fn(|k| p[k] - a[k]);
        for j in 0..3 {
            s1[j] += r[j] as i128;
            for k in 0..3 {
                s2[j][k] += (r[j] * r[k]) as i128;
            }
        }
        rel_coords.push(r);
    }
    let Some(anchor) = anchor else {
        return Err(PoseError::DegenerateMask("empty mask".into()));
    };
    let n = rel_coords.len() as i128;
    let nf = n as f64;
    let centroid_rel = s1.map(|s| s as f64 / nf);
    // n^2 * cov = n * S2 - S1 S1^T, exact in integers
    let covariance = std::array::from_fn(|j| {
        std::array::from_fn(|k| (n * s2[j][k] - s1[j] * s1[k]) as f64 / (nf * nf))
    });
    Ok(Moments {
        anchor,
        count: rel_coords.len(),
        centroid_rel,
        covariance,
        rel_coords,
    })
}

/// Eigen-decomposition of a symmetric 3x3 matrix by cyclic Jacobi sweeps.
/// Returns eigenvalues and eigenvectors as columns of the second matrix,
/// in no particular order.
pub fn symmetric_eigen(m: &Mat3) -> ([f64; 3], Mat3) {
    let mut a = *m;
    let mut v = identity();
    for _ in 0..64 {
        let off = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
        let scale = a[0][0].powi(2) + a[1][1].powi(2) + a[2][2].powi(2);
        if off <= f64::EPSILON * f64::EPSILON * scale || off == 0.0 {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q] == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            // a <- J^T a J with J the rotation in the (p, q) plane
            for k in 0..3 {
                let (akp, akq) = (a[k][p], a[k][q]);
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let (apk, aqk) = (a[p][k], a[q][k]);
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for row in v.iter_mut() {
                let (vp, vq) = (row[p], row[q]);
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
    }
    ([a[0][0], a[1][1], a[2][2]], v)
}

/// Rigid map from a mask's principal frame onto an output grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseTransform {
    /// Rows are the principal axes, largest variance first.
    pub rotation: Mat3,
    pub anchor: [i64; 3],
    pub centroid_rel: [f64; 3],
    pub out_dims: [usize; 3],
    /// Set when two eigenvalues are too close to order reliably.
    pub ambiguous_order: bool,
}

impl PoseTransform {
    pub fn identity(centroid: [i64; 3], out_dims: [usize; 3]) -> Self {
        PoseTransform {
            rotation: identity(),
            anchor: centroid,
            centroid_rel: [0.0; 3],
            out_dims,
            ambiguous_order: false,
        }
    }

    pub fn centroid(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.anchor[a] as f64 + self.centroid_rel[a])
    }
}

/// Principal axes of the foreground, sign-fixed and made right-handed.
pub fn canonical_rotation(m: &Moments, out_dims: [usize; 3]) -> Result<PoseTransform> {
    let (vals, vecs) = symmetric_eigen(&m.covariance);
    let mut order = [0usize, 1, 2];
    // stable: equal eigenvalues keep axis-index order
    order.sort_by(|&i, &j| vals[j].total_cmp(&vals[i]));
    let sorted = order.map(|i| vals[i]);
    let top = sorted[0].abs().max(1.0);
    if sorted[2] < RANK_TOL * top {
        return Err(PoseError::DegenerateMask(format!(
            "rank-deficient covariance, eigenvalues {sorted:?}"
        )));
    }
    let ambiguous_order = (0..2).any(|i| sorted[i] - sorted[i + 1] < GAP_TOL * top);
    let far = m.farthest();
    let mut rotation = [[0.0; 3]; 3];
    for (row, &i) in rotation.iter_mut().zip(&order) {
        let mut v = [vecs[0][i], vecs[1][i], vecs[2][i]];
        let sigma3 = vals[i].max(0.0).powf(1.5);
        let skew = m.third_moment(v);
        let flip = if skew.abs() > SKEW_TOL * sigma3 {
            skew < 0.0
        } else {
            dot(v, far) < 0.0
        };
        if flip {
            v = v.map(|x| -x);
        }
        *row = v;
    }
    if det(&rotation) < 0.0 {
        rotation[2] = rotation[2].map(|x| -x);
    }
    Ok(PoseTransform {
        rotation,
        anchor: m.anchor,
        centroid_rel: m.centroid_rel,
        out_dims,
        ambiguous_order,
    })
}

/// Nearest-neighbor inverse mapping of `mask` through `t`. Output voxel `o`
/// reads source `round(R^T (o - out_center) + centroid)`, halves rounding up;
/// misses read 0.
pub fn resample_canonical(mask: &Volume, t: &PoseTransform) -> Result<Volume> {
    let src = mask.to_f32();
    let sd = mask.dims();
    let od = t.out_dims;
    let center = od.map(|d| (d as f64 - 1.0) / 2.0);
    let r = &t.rotation;
    let mut out = vec![0u8; od.iter().product()];
    let mut i = 0;
    for z in 0..od[2] {
        for y in 0..od[1] {
            for x in 0..od[0] {
                let q = [
                    x as f64 - center[0],
                    y as f64 - center[1],
                    z as f64 - center[2],
                ];
                let mut inside = true;
                let mut s = [0usize; 3];
                for a in 0..3 {
                    let rel = r[0][a] * q[0] + r[1][a] * q[1] + r[2][a] * q[2] + t.centroid_rel[a];
                    let c = (rel + 0.5).floor() as i64 + t.anchor[a];
                    if c < 0 || c >= sd[a] as i64 {
                        inside = false;
                        break;
                    }
                    s[a] = c as usize;
                }
                if inside && src[mask.index(s[0], s[1], s[2])] != 0.0 {
                    out[i] = 1;
                }
                i += 1;
            }
        }
    }
    Ok(Volume::label(od, out)?.with_spacing(mask.spacing())?)
}

/// Rotates a mask into its principal-axis frame on an `out_dims` grid.
pub fn canonicalize(mask: &Volume, out_dims: [usize; 3]) -> Result<Volume> {
    let m = foreground_moments(mask)?;
    let t = canonical_rotation(&m, out_dims)?;
    resample_canonical(mask, &t)
}

fn identity() -> Mat3 {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

fn to_f(p: [i64; 3]) -> [f64; 3] {
    p.map(|c| c as f64)
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Largest entry of `|R^T R - I|`.
pub fn orthonormality_error(m: &Mat3) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let s: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
            let e = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((s - e).abs());
        }
    }
    worst
}
