//! Homography estimation by homogeneous DLT and upward-view rectification.

use nalgebra::{Matrix3, Vector3};

use crate::edgemap::EdgeMap;
use crate::error::{Error, Result};
use crate::geometry::{project_point, CameraPose, WorldPoint};

const SVD_TOL: f64 = 1e-12;
const SVD_MAX_SWEEPS: usize = 100;
/// Singular values below this fraction of the largest count as zero.
const RANK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointCorrespondence {
    /// Point in the upward-looking image.
    pub source: (f64, f64),
    /// Matching point in the horizontal-view image.
    pub target: (f64, f64),
}

impl PointCorrespondence {
    pub fn new(source: (f64, f64), target: (f64, f64)) -> Self {
        Self { source, target }
    }
}

/// Row-major 3x3 homography with unit Frobenius norm and `h33 >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    pub h: [f64; 9],
}

impl Homography {
    /// Normalizes an arbitrary nonzero matrix.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let mut h = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                h[r * 3 + c] = m[(r, c)];
            }
        }
        Self::normalized(h)
    }

    fn normalized(mut h: [f64; 9]) -> Self {
        let norm = h.iter().map(|x| x * x).sum::<f64>().sqrt();
        let sign = if h[8] < 0.0 { -1.0 } else { 1.0 };
        for x in h.iter_mut() {
            *x *= sign / norm;
        }
        Self { h }
    }

    pub fn identity() -> Self {
        Self::from_matrix(&Matrix3::identity())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.h)
    }

    /// Maps `(x, y)`; `None` when the point lands at infinity.
    pub fn apply(&self, p: (f64, f64)) -> Option<(f64, f64)> {
        apply_matrix(&self.matrix(), p)
    }

    pub fn inverse(&self) -> Result<Self> {
        self.matrix()
            .try_inverse()
            .filter(|m| m.iter().all(|x| x.is_finite()))
            .map(|m| Self::from_matrix(&m))
            .ok_or(Error::SingularHomography)
    }

    /// `self` applied after `other`.
    pub fn compose(&self, other: &Homography) -> Self {
        Self::from_matrix(&(self.matrix() * other.matrix()))
    }

    /// Largest absolute component difference, after aligning signs.
    pub fn max_abs_diff(&self, other: &Homography) -> f64 {
        let direct = self.h.iter().zip(&other.h).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let flipped = self.h.iter().zip(&other.h).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max);
        direct.min(flipped)
    }
}

fn apply_matrix(m: &Matrix3<f64>, p: (f64, f64)) -> Option<(f64, f64)> {
    let q = m * Vector3::new(p.0, p.1, 1.0);
    if q.z.abs() < 1e-300 {
        None
    } else {
        Some((q.x / q.z, q.y / q.z))
    }
}

/// Two rows per correspondence; a solution `h` satisfies `A h = 0`.
pub fn build_dlt_system(pairs: &[PointCorrespondence]) -> Result<Vec<[f64; 9]>> {
    if pairs.len() < 4 {
        return Err(Error::TooFewPoints(pairs.len()));
    }
    let mut rows = Vec::with_capacity(pairs.len() * 2);
    for pc in pairs {
        let (sx, sy) = pc.source;
        let (tx, ty) = pc.target;
        rows.push([sx, sy, 1.0, 0.0, 0.0, 0.0, -tx * sx, -tx * sy, -tx]);
        rows.push([0.0, 0.0, 0.0, sx, sy, 1.0, -ty * sx, -ty * sy, -ty]);
    }
    Ok(rows)
}

/// Singular values and right-singular vectors (as columns of `v`) of an
/// `m x 9` matrix, by one-sided Jacobi rotations.
pub fn jacobi_svd(a: &[[f64; 9]]) -> ([f64; 9], [[f64; 9]; 9]) {
    let mut w: Vec<[f64; 9]> = a.to_vec();
    let mut v = [[0.0; 9]; 9];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _ in 0..SVD_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..9 {
            for q in (p + 1)..9 {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for row in &w {
                    alpha += row[p] * row[p];
                    beta += row[q] * row[q];
                    gamma += row[p] * row[q];
                }
                if gamma.abs() <= SVD_TOL * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for row in w.iter_mut() {
                    let (x, y) = (row[p], row[q]);
                    row[p] = c * x - s * y;
                    row[q] = s * x + c * y;
                }
                for row in v.iter_mut() {
                    let (x, y) = (row[p], row[q]);
                    row[p] = c * x - s * y;
                    row[q] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sigma = [0.0; 9];
    for (j, s) in sigma.iter_mut().enumerate() {
        *s = w.iter().map(|row| row[j] * row[j]).sum::<f64>().sqrt();
    }
    (sigma, v)
}

/// Unit vector minimizing `|A h|`.
pub fn solve_homography(a: &[[f64; 9]]) -> Result<Homography> {
    let (sigma, v) = jacobi_svd(a);
    let max = sigma.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return Err(Error::DegenerateConfiguration(9));
    }
    let nullity = sigma.iter().filter(|&&s| s <= RANK_TOL * max).count();
    if nullity > 1 {
        return Err(Error::DegenerateConfiguration(nullity));
    }
    let j = (0..9).min_by(|&x, &y| sigma[x].total_cmp(&sigma[y])).unwrap();
    let mut h = [0.0; 9];
    for (i, hi) in h.iter_mut().enumerate() {
        *hi = v[i][j];
    }
    Ok(Homography::normalized(h))
}

/// Similarity moving the points to zero mean and RMS distance sqrt(2).
fn normalizing_transform(points: impl Iterator<Item = (f64, f64)> + Clone) -> Matrix3<f64> {
    let n = points.clone().count() as f64;
    let (mx, my) = points.clone().fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1));
    let (mx, my) = (mx / n, my / n);
    let rms = (points.map(|p| (p.0 - mx).powi(2) + (p.1 - my).powi(2)).sum::<f64>() / n).sqrt();
    let s = if rms > 0.0 { std::f64::consts::SQRT_2 / rms } else { 1.0 };
    Matrix3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0)
}

/// Estimates the homography mapping sources to targets. With `normalize`,
/// both point sets are conditioned before the DLT and the result de-normalized.
pub fn estimate_homography(pairs: &[PointCorrespondence], normalize: bool) -> Result<Homography> {
    if !normalize {
        return solve_homography(&build_dlt_system(pairs)?);
    }
    if pairs.len() < 4 {
        return Err(Error::TooFewPoints(pairs.len()));
    }
    let ts = normalizing_transform(pairs.iter().map(|p| p.source));
    let tt = normalizing_transform(pairs.iter().map(|p| p.target));
    let conditioned: Vec<_> = pairs
        .iter()
        .map(|p| {
            PointCorrespondence::new(
                apply_matrix(&ts, p.source).unwrap(),
                apply_matrix(&tt, p.target).unwrap(),
            )
        })
        .collect();
    let hn = solve_homography(&build_dlt_system(&conditioned)?)?;
    let tt_inv = tt.try_inverse().ok_or(Error::SingularHomography)?;
    Ok(Homography::from_matrix(&(tt_inv * hn.matrix() * ts)))
}

/// Inverse-warps `map` so that output pixel `q` samples the source at `h^-1 q`.
pub fn rectify_image(map: &EdgeMap, h: &Homography) -> Result<EdgeMap> {
    let inv = h.inverse()?.matrix();
    let (w, hgt) = (map.width(), map.height());
    let mut out = EdgeMap::new(w, hgt);
    let (xmax, ymax) = (w as f64 - 1.0, hgt as f64 - 1.0);
    for y in 0..hgt {
        for x in 0..w {
            let Some((sx, sy)) = apply_matrix(&inv, (x as f64, y as f64)) else {
                continue;
            };
            let eps = 1e-9;
            if sx < -eps || sy < -eps || sx > xmax + eps || sy > ymax + eps {
                continue;
            }
            let value = map.sample_bilinear(sx.clamp(0.0, xmax), sy.clamp(0.0, ymax));
            out.set(x, y, value.round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

/// Homography taking raster points of the pitched camera to the raster of the
/// same camera with zero pitch, from projections of a facade quad.
pub fn pitch_homography(pose: &CameraPose) -> Result<Homography> {
    if pose.pitch.abs() >= std::f64::consts::FRAC_PI_2 {
        return Err(Error::InvalidPose(format!("|pitch| must be < pi/2, got {}", pose.pitch)));
    }
    let level = pose.with_pitch(0.0);
    let fwd = pose.forward();
    let right = pose.right();
    let depth = 50.0;
    let ahead = |lateral: f64, z: f64| {
        WorldPoint::new(
            pose.position.x + fwd.x * depth + right.x * lateral,
            pose.position.y + fwd.y * depth + right.y * lateral,
            z,
        )
    };
    let base = pose.mount_height;
    let quad = [
        ahead(-10.0, base - 5.0),
        ahead(10.0, base - 5.0),
        ahead(10.0, base + 15.0),
        ahead(-10.0, base + 15.0),
        ahead(0.0, base + 5.0),
        ahead(-5.0, base + 10.0),
    ];
    let mut pairs = Vec::with_capacity(quad.len());
    for p in &quad {
        let src = pose.to_raster(&project_point(pose, p)?);
        let dst = level.to_raster(&project_point(&level, p)?);
        pairs.push(PointCorrespondence::new(src, dst));
    }
    estimate_homography(&pairs, true)
}
