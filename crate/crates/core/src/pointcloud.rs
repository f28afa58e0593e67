//! Point-cloud acquisition pipeline.
//!
//! Camera views are moved into the robot base frame, concatenated, cropped to
//! the workspace box and downsampled with farthest point sampling. Local
//! neighbourhoods for the geometric features are built with k-NN around FPS
//! centers.
//!
//! Every selection in this module breaks ties by lowest point index so that
//! results are reproducible bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GecoError, Result};

pub type Point3 = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    Camera,
    Base,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub frame: Frame,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, frame: Frame) -> Self {
        Self { points, frame }
    }

    pub fn base(points: Vec<Point3>) -> Self {
        Self::new(points, Frame::Base)
    }

    pub fn camera(points: Vec<Point3>) -> Self {
        Self::new(points, Frame::Camera)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.iter().all(|c| c.is_finite()))
    }
}

/// Pose of a camera in the base frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraExtrinsics {
    rotation: [[f64; 3]; 3],
    translation: Point3,
}

const ORTHO_TOL: f64 = 1e-9;

impl CameraExtrinsics {
    pub fn new(rotation: [[f64; 3]; 3], translation: Point3) -> Result<Self> {
        if rotation.iter().flatten().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(GecoError::InvalidExtrinsics("non-finite entry".into()));
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|r| rotation[r][i] * rotation[r][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > ORTHO_TOL {
                    return Err(GecoError::InvalidExtrinsics(format!(
                        "R^T R deviates from identity at ({i},{j}) by {:e}",
                        dot - want
                    )));
                }
            }
        }
        let det = det3(&rotation);
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(GecoError::InvalidExtrinsics(format!("det(R) = {det}, expected 1")));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Camera looking from `eye` towards `target`, with the camera z axis along the
    /// viewing direction.
    pub fn look_at(eye: Point3, target: Point3) -> Result<Self> {
        let fwd = normalize(sub(target, eye))
            .ok_or_else(|| GecoError::InvalidExtrinsics("eye equals target".into()))?;
        let up_hint = if fwd[2].abs() > 0.99 { [0.0, 1.0, 0.0] } else { [0.0, 0.0, 1.0] };
        let right = normalize(cross(fwd, up_hint))
            .ok_or_else(|| GecoError::InvalidExtrinsics("degenerate view direction".into()))?;
        let down = cross(fwd, right);
        // Columns are the camera axes expressed in the base frame.
        let rotation = [
            [right[0], down[0], fwd[0]],
            [right[1], down[1], fwd[1]],
            [right[2], down[2], fwd[2]],
        ];
        Self::new(rotation, eye)
    }

    pub fn rotation(&self) -> &[[f64; 3]; 3] {
        &self.rotation
    }

    pub fn translation(&self) -> Point3 {
        self.translation
    }

    /// `R p + t`
    pub fn apply(&self, p: Point3) -> Point3 {
        let r = &self.rotation;
        let t = self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    /// `R^T (p - t)`, the base-to-camera direction.
    pub fn apply_inverse(&self, p: Point3) -> Point3 {
        let r = &self.rotation;
        let d = sub(p, self.translation);
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }

    /// Parses 12 whitespace-separated numbers: row-major R then p.
    pub fn parse(text: &str) -> Result<Self> {
        let nums: Vec<f64> = text
            .lines()
            .map(|l| l.trim())
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .flat_map(|l| l.split_whitespace())
            .map(|tok| tok.parse::<f64>().map_err(|e| GecoError::Parse(format!("{tok:?}: {e}"))))
            .collect::<Result<_>>()?;
        if nums.len() != 12 {
            return Err(GecoError::Parse(format!("extrinsics need 12 numbers, found {}", nums.len())));
        }
        let rotation = [
            [nums[0], nums[1], nums[2]],
            [nums[3], nums[4], nums[5]],
            [nums[6], nums[7], nums[8]],
        ];
        Self::new(rotation, [nums[9], nums[10], nums[11]])
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for row in &self.rotation {
            let _ = writeln!(s, "{:?} {:?} {:?}", row[0], row[1], row[2]);
        }
        let t = self.translation;
        let _ = writeln!(s, "{:?} {:?} {:?}", t[0], t[1], t[2]);
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalGroup {
    pub center_index: usize,
    /// Indices into the cloud the group was built from; the center comes first.
    pub member_indices: Vec<usize>,
    pub members: Vec<Point3>,
    pub centroid: Point3,
}

impl LocalGroup {
    pub fn from_members(center_index: usize, member_indices: Vec<usize>, members: Vec<Point3>) -> Self {
        let centroid = centroid(&members);
        Self { center_index, member_indices, members, centroid }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

pub fn transform_to_base(cloud: &PointCloud, ext: &CameraExtrinsics) -> Result<PointCloud> {
    if cloud.frame != Frame::Camera {
        return Err(GecoError::FrameMismatch { expected: Frame::Camera, found: cloud.frame });
    }
    Ok(PointCloud::base(cloud.points.iter().map(|&p| ext.apply(p)).collect()))
}

pub fn fuse_views(clouds: &[PointCloud]) -> Result<PointCloud> {
    let total = clouds.iter().map(PointCloud::len).sum();
    let mut points = Vec::with_capacity(total);
    for c in clouds {
        if c.frame != Frame::Base {
            return Err(GecoError::FrameMismatch { expected: Frame::Base, found: c.frame });
        }
        points.extend_from_slice(&c.points);
    }
    Ok(PointCloud::base(points))
}

/// Keeps points inside the closed box `[lo, hi]`.
pub fn crop_aabb(cloud: &PointCloud, lo: Point3, hi: Point3) -> Result<PointCloud> {
    if (0..3).any(|i| lo[i] > hi[i]) {
        return Err(GecoError::InvalidBox { lo, hi });
    }
    let points = cloud
        .points
        .iter()
        .copied()
        .filter(|p| (0..3).all(|i| lo[i] <= p[i] && p[i] <= hi[i]))
        .collect();
    Ok(PointCloud::new(points, cloud.frame))
}

/// Seeded FPS start index.
pub fn fps_start_index(len: usize, seed: u64) -> usize {
    ChaCha8Rng::seed_from_u64(seed).random_range(0..len)
}

/// Farthest point sampling returning indices in selection order.
///
/// If the cloud has at most `n` points every index is returned in order.
pub fn fps_indices(points: &[Point3], n: usize, start: usize) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(GecoError::EmptyInput("farthest point sampling needs at least one point"));
    }
    if n == 0 {
        return Err(GecoError::Config("fps budget must be at least 1".into()));
    }
    if points.len() <= n {
        return Ok((0..points.len()).collect());
    }
    if start >= points.len() {
        return Err(GecoError::Config(format!("fps start {start} out of range {}", points.len())));
    }
    let mut selected = Vec::with_capacity(n);
    let mut taken = vec![false; points.len()];
    let mut min_d2 = vec![f64::INFINITY; points.len()];
    let mut current = start;
    loop {
        selected.push(current);
        taken[current] = true;
        if selected.len() == n {
            break;
        }
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_d2 = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d2 = dist2(*p, c);
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
            if min_d2[i] > best_d2 {
                best_d2 = min_d2[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(selected)
}

pub fn fps_downsample(cloud: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(GecoError::EmptyInput("farthest point sampling needs at least one point"));
    }
    if cloud.len() <= n {
        return Ok(cloud.clone());
    }
    let start = fps_start_index(cloud.len(), seed);
    let idx = fps_indices(&cloud.points, n, start)?;
    Ok(PointCloud::new(idx.into_iter().map(|i| cloud.points[i]).collect(), cloud.frame))
}

/// Indices of the `k` nearest points to `points[center]`, center first, then by
/// (distance, index).
pub fn knn_indices(points: &[Point3], center: usize, k: usize) -> Vec<usize> {
    let c = points[center];
    let mut order: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != center)
        .map(|(i, p)| (dist2(*p, c), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    std::iter::once(center)
        .chain(order.into_iter().map(|(_, i)| i))
        .take(k)
        .collect()
}

/// Groups of `k` nearest neighbours around `centers` FPS-selected points.
pub fn knn_groups(cloud: &PointCloud, centers: usize, k: usize, seed: u64) -> Result<Vec<LocalGroup>> {
    if centers == 0 {
        return Err(GecoError::Config("need at least one group center".into()));
    }
    if k == 0 || cloud.len() < k {
        return Err(GecoError::InsufficientPoints { needed: k.max(1), have: cloud.len() });
    }
    let start = fps_start_index(cloud.len(), seed);
    let center_idx = fps_indices(&cloud.points, centers, start)?;
    Ok(center_idx
        .into_iter()
        .map(|ci| {
            let idx = knn_indices(&cloud.points, ci, k);
            let members = idx.iter().map(|&i| cloud.points[i]).collect();
            LocalGroup::from_members(ci, idx, members)
        })
        .collect())
}

/// Pads a cloud to exactly `n` points by cycling through its points, or truncates.
pub fn pad_to_budget(cloud: &PointCloud, n: usize) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(GecoError::EmptyInput("cannot pad an empty cloud"));
    }
    let points = (0..n).map(|i| cloud.points[i % cloud.len()]).collect();
    Ok(PointCloud::new(points, cloud.frame))
}

pub fn parse_cloud(text: &str, frame: Frame) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| GecoError::Parse(format!("line {}: {e}", lineno + 1)))?;
        if vals.len() != 3 || vals.iter().any(|v| !v.is_finite()) {
            return Err(GecoError::Parse(format!(
                "line {}: expected 3 finite coordinates",
                lineno + 1
            )));
        }
        points.push([vals[0], vals[1], vals[2]]);
    }
    Ok(PointCloud::new(points, frame))
}

pub fn format_cloud(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(cloud.len() * 32);
    for p in &cloud.points {
        let _ = writeln!(s, "{:?} {:?} {:?}", p[0], p[1], p[2]);
    }
    s
}

pub fn read_cloud(path: &Path, frame: Frame) -> Result<PointCloud> {
    parse_cloud(&std::fs::read_to_string(path)?, frame)
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    std::fs::write(path, format_cloud(cloud))?;
    Ok(())
}

// small vector helpers shared across the crate

pub fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: Point3, s: f64) -> Point3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Point3, b: Point3) -> Point3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn norm(a: Point3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Point3) -> Option<Point3> {
    let n = norm(a);
    (n > 1e-12).then(|| scale(a, 1.0 / n))
}

pub fn dist2(a: Point3, b: Point3) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

pub fn centroid(points: &[Point3]) -> Point3 {
    if points.is_empty() {
        return [0.0; 3];
    }
    let mut c = [0.0; 3];
    for p in points {
        c = add(c, *p);
    }
    scale(c, 1.0 / points.len() as f64)
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Rotation about z by `angle` radians.
pub fn rot_z(angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Point3, b: Point3, tol: f64) -> bool {
        (0..3).all(|i| (a[i] - b[i]).abs() <= tol)
    }

    #[test]
    fn identity_transform_keeps_points() {
        let cloud = PointCloud::camera(vec![[1.0, 2.0, 3.0]]);
        let out = transform_to_base(&cloud, &CameraExtrinsics::identity()).unwrap();
        assert_eq!(out.points, vec![[1.0, 2.0, 3.0]]);
        assert_eq!(out.frame, Frame::Base);
    }

    #[test]
    fn quarter_turn_about_z_with_lift() {
        let ext = CameraExtrinsics::new(rot_z(std::f64::consts::FRAC_PI_2), [0.0, 0.0, 0.5]).unwrap();
        let out = transform_to_base(&PointCloud::camera(vec![[1.0, 0.0, 0.0]]), &ext).unwrap();
        assert!(close(out.points[0], [0.0, 1.0, 0.5], 1e-12), "{:?}", out.points[0]);
    }

    #[test]
    fn transform_empty_and_wrong_frame() {
        let ext = CameraExtrinsics::identity();
        assert!(transform_to_base(&PointCloud::camera(vec![]), &ext).unwrap().is_empty());
        assert!(matches!(
            transform_to_base(&PointCloud::base(vec![]), &ext),
            Err(GecoError::FrameMismatch { .. })
        ));
    }

    #[test]
    fn rejects_non_orthonormal_rotation() {
        let r = [[2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(matches!(CameraExtrinsics::new(r, [0.0; 3]), Err(GecoError::InvalidExtrinsics(_))));
        // reflection: orthonormal but det = -1
        let r = [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(CameraExtrinsics::new(r, [0.0; 3]).is_err());
    }

    #[test]
    fn look_at_points_z_axis_at_target() {
        let ext = CameraExtrinsics::look_at([0.5, -0.5, 0.5], [0.0, 0.0, 0.0]).unwrap();
        let p = ext.apply_inverse([0.0, 0.0, 0.0]);
        assert!(p[0].abs() < 1e-12 && p[1].abs() < 1e-12 && p[2] > 0.0);
        let back = ext.apply(p);
        assert!(close(back, [0.0; 3], 1e-12));
    }

    #[test]
    fn extrinsics_text_roundtrip() {
        let ext = CameraExtrinsics::new(rot_z(0.3), [0.1, -0.2, 0.7]).unwrap();
        assert_eq!(CameraExtrinsics::parse(&ext.to_text()).unwrap(), ext);
        assert!(CameraExtrinsics::parse("1 0 0 0 1 0").is_err());
    }

    #[test]
    fn fuse_concatenates_in_order() {
        let a = PointCloud::base(vec![[1.0, 0.0, 0.0]]);
        let b = PointCloud::base(vec![[2.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        let out = fuse_views(&[a.clone(), b]).unwrap();
        assert_eq!(out.points, vec![[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        let out = fuse_views(&[PointCloud::base(vec![]), a.clone()]).unwrap();
        assert_eq!(out.points, a.points);
        assert!(fuse_views(&[a, PointCloud::camera(vec![])]).is_err());
    }

    #[test]
    fn crop_keeps_boundary_and_rejects_bad_box() {
        let cloud = PointCloud::base(vec![[0.5, 0.5, 0.5], [2.0, 0.0, 0.0], [1.0, 1.0, 1.0]]);
        let out = crop_aabb(&cloud, [0.0; 3], [1.0; 3]).unwrap();
        assert_eq!(out.points, vec![[0.5, 0.5, 0.5], [1.0, 1.0, 1.0]]);
        assert!(matches!(
            crop_aabb(&cloud, [0.0, 2.0, 0.0], [1.0; 3]),
            Err(GecoError::InvalidBox { .. })
        ));
    }

    #[test]
    fn fps_small_cases() {
        let one = PointCloud::base(vec![[0.3, 0.2, 0.1]]);
        assert_eq!(fps_downsample(&one, 1, 7).unwrap(), one);
        let line: Vec<Point3> = (0..4).map(|i| [i as f64, 0.0, 0.0]).collect();
        assert_eq!(fps_indices(&line, 2, 0).unwrap(), vec![0, 3]);
        assert!(matches!(
            fps_downsample(&PointCloud::base(vec![]), 3, 0),
            Err(GecoError::EmptyInput(_))
        ));
    }

    #[test]
    fn fps_skips_duplicates_of_selected_points() {
        let pts = vec![[0.0; 3], [0.0; 3], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        assert_eq!(fps_indices(&pts, 3, 0).unwrap(), vec![0, 2, 1]);
    }

    #[test]
    fn knn_basic_cases() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [5.0, 0.0, 0.0]];
        assert_eq!(knn_indices(&pts, 0, 2), vec![0, 1]);
        let cloud = PointCloud::base(pts.clone());
        let groups = knn_groups(&cloud, 1, 3, 11).unwrap();
        assert_eq!(groups.len(), 1);
        let mut m = groups[0].member_indices.clone();
        m.sort();
        assert_eq!(m, vec![0, 1, 2]);
        assert!(matches!(
            knn_groups(&cloud, 1, 4, 0),
            Err(GecoError::InsufficientPoints { needed: 4, have: 3 })
        ));
    }

    #[test]
    fn group_centroid_is_member_mean() {
        let cloud = PointCloud::base(vec![[0.0; 3], [2.0, 0.0, 0.0], [0.0, 4.0, 0.0], [9.0, 9.0, 9.0]]);
        let g = &knn_groups(&cloud, 1, 3, 0).unwrap()[0];
        let c = centroid(&g.members);
        assert_eq!(g.centroid, c);
        assert!(g.member_indices.contains(&g.center_index));
    }

    #[test]
    fn cloud_text_roundtrip_with_comments() {
        let text = "# header\n0.1 0.2 0.3\n\n-1 2 3.5\n";
        let cloud = parse_cloud(text, Frame::Base).unwrap();
        assert_eq!(cloud.points, vec![[0.1, 0.2, 0.3], [-1.0, 2.0, 3.5]]);
        assert_eq!(parse_cloud(&format_cloud(&cloud), Frame::Base).unwrap(), cloud);
        assert!(parse_cloud("1 2", Frame::Base).is_err());
    }

    #[test]
    fn padding_cycles_points() {
        let cloud = PointCloud::base(vec![[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let p = pad_to_budget(&cloud, 5).unwrap();
        assert_eq!(p.len(), 5);
        assert_eq!(p.points[4], [1.0, 0.0, 0.0]);
    }
}
