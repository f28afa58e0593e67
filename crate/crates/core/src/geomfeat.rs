//! Local PCA shape descriptors.
//!
//! The 3×3 population covariance of a neighbourhood is diagonalised in closed
//! form (trigonometric roots of the characteristic cubic) and the sorted
//! eigenvalues are turned into linearity, planarity and saliency.

use serde::{Deserialize, Serialize};

use crate::error::{GecoError, Result};
use crate::pointcloud::{centroid, LocalGroup, Point3};

/// Eigenvalue magnitude (m²) below which a neighbourhood counts as a single point.
pub const DEGENERATE_EIGVAL: f64 = 1e-24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyFormula {
    /// `λ3 / (λ1 + λ2 + λ3)`
    #[default]
    SurfaceVariation,
    /// `λ3 / λ1`
    MinOverMax,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeomFeatures {
    pub linearity: f64,
    pub planarity: f64,
    pub saliency: f64,
    /// Sorted descending.
    pub eigvals: [f64; 3],
    pub degenerate: bool,
}

impl GeomFeatures {
    pub fn from_eigvals(eigvals: [f64; 3], formula: SaliencyFormula) -> Self {
        let [l1, l2, l3] = eigvals;
        if l1 <= DEGENERATE_EIGVAL {
            return Self { linearity: 0.0, planarity: 0.0, saliency: 0.0, eigvals, degenerate: true };
        }
        let saliency = match formula {
            SaliencyFormula::SurfaceVariation => l3 / (l1 + l2 + l3),
            SaliencyFormula::MinOverMax => l3 / l1,
        };
        Self {
            linearity: ((l1 - l2) / l1).clamp(0.0, 1.0),
            planarity: ((l2 - l3) / l1).clamp(0.0, 1.0),
            saliency: saliency.clamp(0.0, 1.0),
            eigvals,
            degenerate: false,
        }
    }
}

/// Population covariance (divisor = member count) as `[xx, yy, zz, xy, xz, yz]`.
pub fn covariance(points: &[Point3]) -> [f64; 6] {
    let c = centroid(points);
    let mut m = [0.0; 6];
    for p in points {
        let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
        m[0] += d[0] * d[0];
        m[1] += d[1] * d[1];
        m[2] += d[2] * d[2];
        m[3] += d[0] * d[1];
        m[4] += d[0] * d[2];
        m[5] += d[1] * d[2];
    }
    let n = points.len().max(1) as f64;
    m.map(|v| v / n)
}

/// Eigenvalues of a symmetric 3×3 matrix given as `[xx, yy, zz, xy, xz, yz]`,
/// sorted descending.
pub fn symmetric_eigvals(m: [f64; 6]) -> [f64; 3] {
    let [a00, a11, a22, a01, a02, a12] = m;
    let p1 = a01 * a01 + a02 * a02 + a12 * a12;
    let mut ev = if p1 == 0.0 {
        [a00, a11, a22]
    } else {
        let q = (a00 + a11 + a22) / 3.0;
        let p2 = (a00 - q).powi(2) + (a11 - q).powi(2) + (a22 - q).powi(2) + 2.0 * p1;
        let p = (p2 / 6.0).sqrt();
        let (b00, b11, b22) = ((a00 - q) / p, (a11 - q) / p, (a22 - q) / p);
        let (b01, b02, b12) = (a01 / p, a02 / p, a12 / p);
        let det_b = b00 * (b11 * b22 - b12 * b12) - b01 * (b01 * b22 - b12 * b02)
            + b02 * (b01 * b12 - b11 * b02);
        let r = (det_b / 2.0).clamp(-1.0, 1.0);
        let phi = r.acos() / 3.0;
        let e1 = q + 2.0 * p * phi.cos();
        let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::FRAC_PI_3).cos();
        [e1, 3.0 * q - e1 - e3, e3]
    };
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

pub fn covariance_eigvals(group: &LocalGroup) -> Result<[f64; 3]> {
    points_eigvals(&group.members)
}

/// Covariance eigenvalues of a raw point set, clamped at zero.
pub fn points_eigvals(points: &[Point3]) -> Result<[f64; 3]> {
    if points.len() < 3 {
        return Err(GecoError::DegenerateGroup(points.len()));
    }
    Ok(symmetric_eigvals(covariance(points)).map(|v| v.max(0.0)))
}

pub fn geometric_features(group: &LocalGroup) -> Result<GeomFeatures> {
    geometric_features_with(group, SaliencyFormula::default())
}

pub fn geometric_features_with(group: &LocalGroup, formula: SaliencyFormula) -> Result<GeomFeatures> {
    Ok(GeomFeatures::from_eigvals(covariance_eigvals(group)?, formula))
}

/// CSV rows `group_index,linearity,planarity,saliency,l1,l2,l3`.
pub fn features_csv(features: &[GeomFeatures]) -> String {
    let mut s = String::from("group_index,linearity,planarity,saliency,l1,l2,l3\n");
    for (i, f) in features.iter().enumerate() {
        s.push_str(&format!(
            "{i},{},{},{},{},{},{}\n",
            f.linearity, f.planarity, f.saliency, f.eigvals[0], f.eigvals[1], f.eigvals[2]
        ));
    }
    s
}
