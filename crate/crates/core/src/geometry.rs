//! 2D↔3D transforms between point clouds, depth images and silhouettes.
//!
//! Camera coordinates are right-handed with `x` right, `y` down and `z` forward.
//! Pixel `(u, v)` addresses column `u`, row `v`; images are stored row-major.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Pinhole intrinsics `K = [[fx, 0, cx], [0, fy, cy], [0, 0, 1]]`, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::Invalid(format!("focal lengths must be positive, got fx={fx} fy={fy}")));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// The default virtual camera for pseudo data: `f = 500` and the principal point
    /// at the image center.
    pub fn virtual_default(width: usize, height: usize) -> Self {
        Self {
            fx: 500.0,
            fy: 500.0,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
        }
    }

    /// Continuous pixel coordinates of a camera-frame point (`z > 0`).
    pub fn project(&self, p: [f64; 3]) -> (f64, f64) {
        (self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy)
    }

    /// `d · K⁻¹ [u, v, 1]ᵀ`.
    pub fn unproject(&self, u: f64, v: f64, d: f64) -> [f64; 3] {
        [d * (u - self.cx) / self.fx, d * (v - self.cy) / self.fy, d]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Per-pixel depth in meters; `0.0` marks an empty pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
}

impl DepthImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, depth: vec![0.0; width * height] }
    }

    pub fn new(width: usize, height: usize, depth: Vec<f64>) -> Result<Self> {
        if depth.len() != width * height {
            return Err(Error::Invalid(format!("depth buffer holds {} values for {width}x{height}", depth.len())));
        }
        if depth.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::Invalid("depth values must be finite and non-negative".into()));
        }
        Ok(Self { width, height, depth })
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.depth[v * self.width + u]
    }

    pub fn filled(&self) -> usize {
        self.depth.iter().filter(|&&d| d > 0.0).count()
    }

    pub fn normalize_crop(&self, size: usize) -> Result<Self> {
        let depth = normalize_grid(self.width, self.height, &self.depth, size)?;
        Ok(Self { width: size, height: size, depth })
    }
}

/// Foreground mask with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteFrame {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<f32>,
}

impl SilhouetteFrame {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, mask: vec![0.0; width * height] }
    }

    pub fn new(width: usize, height: usize, mask: Vec<f32>) -> Result<Self> {
        if mask.len() != width * height {
            return Err(Error::Invalid(format!("mask holds {} values for {width}x{height}", mask.len())));
        }
        if mask.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Invalid("mask values must lie in [0, 1]".into()));
        }
        Ok(Self { width, height, mask })
    }

    pub fn at(&self, u: usize, v: usize) -> f32 {
        self.mask[v * self.width + u]
    }

    pub fn foreground(&self) -> usize {
        self.mask.iter().filter(|&&m| m > 0.0).count()
    }

    pub fn normalize_crop(&self, size: usize) -> Result<Self> {
        let mask = normalize_grid(self.width, self.height, &self.mask, size)?;
        Ok(Self { width: size, height: size, mask })
    }

    /// Replicates the mask into three identical channels (`[3, H, W]` order).
    pub fn to_channels(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(3 * self.mask.len());
        for _ in 0..3 {
            out.extend_from_slice(&self.mask);
        }
        out
    }
}

/// Pinhole projection with a nearest-depth z-buffer.
///
/// Points with `z ≤ 0` or landing outside the image are dropped. When two points
/// share a pixel at exactly the same depth the earlier one is kept.
pub fn project_points(cloud: &PointCloud, k: &CameraIntrinsics, width: usize, height: usize) -> DepthImage {
    let mut img = DepthImage::zeros(width, height);
    for p in &cloud.points {
        if !(p[2] > 0.0) {
            continue;
        }
        let (uf, vf) = k.project(*p);
        let (u, v) = (libm::round(uf), libm::round(vf));
        if !(u >= 0.0 && v >= 0.0 && u < width as f64 && v < height as f64) {
            continue;
        }
        let idx = v as usize * width + u as usize;
        let cur = img.depth[idx];
        if cur == 0.0 || p[2] < cur {
            img.depth[idx] = p[2];
        }
    }
    img
}

/// Fills each empty pixel within Chebyshev distance `radius` of a filled pixel with
/// the depth of the nearest (Euclidean) filled pixel. Ties go to the smaller depth,
/// then to the earlier pixel in row-major order. Filled pixels are never changed.
pub fn interpolate_depth(sparse: &DepthImage, radius: usize) -> Result<DepthImage> {
    if radius < 1 {
        return Err(Error::Invalid("interpolation radius must be at least 1".into()));
    }
    let (w, h) = (sparse.width as isize, sparse.height as isize);
    let r = radius as isize;
    let mut out = sparse.clone();
    // scatter from filled pixels in row-major order; only strict improvements
    // replace, so equal candidates resolve to the earliest source
    let mut best: Vec<Option<(isize, f64)>> = vec![None; sparse.depth.len()];
    for sv in 0..h {
        for su in 0..w {
            let d = sparse.depth[(sv * w + su) as usize];
            if d <= 0.0 {
                continue;
            }
            for v in (sv - r).max(0)..=(sv + r).min(h - 1) {
                for u in (su - r).max(0)..=(su + r).min(w - 1) {
                    let idx = (v * w + u) as usize;
                    if sparse.depth[idx] > 0.0 {
                        continue;
                    }
                    let dist = (sv - v) * (sv - v) + (su - u) * (su - u);
                    let better = match best[idx] {
                        None => true,
                        Some((bd, bz)) => dist < bd || (dist == bd && d < bz),
                    };
                    if better {
                        best[idx] = Some((dist, d));
                    }
                }
            }
        }
    }
    for (o, b) in out.depth.iter_mut().zip(&best) {
        if let Some((_, d)) = b {
            *o = *d;
        }
    }
    Ok(out)
}

/// Back-projects every pixel with positive depth (and mask above 0.5, if given)
/// through `K⁻¹`, in row-major pixel order.
pub fn back_project(depth: &DepthImage, k: &CameraIntrinsics, mask: Option<&SilhouetteFrame>) -> Result<PointCloud> {
    if let Some(m) = mask {
        if m.width != depth.width || m.height != depth.height {
            return Err(Error::Invalid(format!(
                "mask is {}x{} but depth is {}x{}",
                m.width, m.height, depth.width, depth.height
            )));
        }
    }
    let mut points = Vec::new();
    for v in 0..depth.height {
        for u in 0..depth.width {
            let d = depth.at(u, v);
            if d <= 0.0 {
                continue;
            }
            if let Some(m) = mask {
                if m.at(u, v) <= 0.5 {
                    continue;
                }
            }
            points.push(k.unproject(u as f64, v as f64, d));
        }
    }
    Ok(PointCloud { points })
}

/// Replaces the points in each occupied voxel `floor(coord / voxel)` by their
/// centroid. Output is ordered by ascending `(ix, iy, iz)`.
pub fn voxel_downsample(cloud: &PointCloud, voxel: f64) -> Result<PointCloud> {
    if !(voxel > 0.0) {
        return Err(Error::Invalid(format!("voxel size must be positive, got {voxel}")));
    }
    let mut cells: BTreeMap<(i64, i64, i64), ([f64; 3], usize)> = BTreeMap::new();
    for p in &cloud.points {
        let key = (
            libm::floor(p[0] / voxel) as i64,
            libm::floor(p[1] / voxel) as i64,
            libm::floor(p[2] / voxel) as i64,
        );
        let e = cells.entry(key).or_insert(([0.0; 3], 0));
        for (acc, &c) in e.0.iter_mut().zip(p) {
            *acc += c;
        }
        e.1 += 1;
    }
    Ok(PointCloud {
        points: cells
            .values()
            .map(|(s, n)| {
                let n = *n as f64;
                [s[0] / n, s[1] / n, s[2] / n]
            })
            .collect(),
    })
}

/// Tight-bounding-box normalization: the foreground (values `> 0`) is scaled so its
/// height fills `size` rows, centered horizontally on its centroid column and
/// cropped or zero-padded to `size` columns. Nearest-neighbor sampling; values are
/// copied, never rescaled.
pub fn normalize_grid<T: Copy + Default + PartialOrd>(width: usize, height: usize, data: &[T], size: usize) -> Result<Vec<T>> {
    let zero = T::default();
    let mut top = usize::MAX;
    let mut bottom = 0;
    let mut col_sum = 0.0f64;
    let mut count = 0usize;
    for v in 0..height {
        for u in 0..width {
            if data[v * width + u] > zero {
                top = top.min(v);
                bottom = bottom.max(v);
                col_sum += u as f64 + 0.5;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyFrame);
    }
    let box_h = (bottom - top + 1) as f64;
    let scale = size as f64 / box_h;
    let center = col_sum / count as f64;
    let half = size as f64 / 2.0;
    let mut out = vec![zero; size * size];
    for oy in 0..size {
        let sy = (top + libm::floor((oy as f64 + 0.5) / scale) as usize).min(bottom);
        for ox in 0..size {
            let sx = libm::floor(center + (ox as f64 + 0.5 - half) / scale);
            if sx >= 0.0 && sx < width as f64 {
                out[oy * size + ox] = data[sy * width + sx as usize];
            }
        }
    }
    Ok(out)
}

/// Encodes depth as three identical channels in `[0, 1]` (`[3, H, W]` order).
///
/// Non-empty pixels map to `t = (d − z_near) / (z_far − z_near)` clamped to
/// `[1/255, 1]`, so a surface at `z_near` stays distinguishable from an empty pixel.
pub fn depth_to_channels(depth: &DepthImage, z_near: f64, z_far: f64) -> Result<Vec<f32>> {
    depth_to_channels_with(depth, z_near, z_far, |t| [t as f32; 3])
}

/// [`depth_to_channels`] with a custom colormap applied to the normalized depth.
pub fn depth_to_channels_with(
    depth: &DepthImage,
    z_near: f64,
    z_far: f64,
    colormap: impl Fn(f64) -> [f32; 3],
) -> Result<Vec<f32>> {
    if !(z_near < z_far) {
        return Err(Error::Invalid(format!("z_near {z_near} must be below z_far {z_far}")));
    }
    let hw = depth.width * depth.height;
    let mut out = vec![0.0f32; 3 * hw];
    for (i, &d) in depth.depth.iter().enumerate() {
        if d <= 0.0 {
            continue;
        }
        let t = ((d - z_near) / (z_far - z_near)).clamp(1.0 / 255.0, 1.0);
        let c = colormap(t);
        for ch in 0..3 {
            out[ch * hw + i] = c[ch];
        }
    }
    Ok(out)
}

/// Inverse of the grayscale encoding for one non-empty channel value.
pub fn channel_to_depth(t: f32, z_near: f64, z_far: f64) -> f64 {
    z_near + t as f64 * (z_far - z_near)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k500() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap()
    }

    #[test]
    fn projects_hand_evaluated_point() {
        // u = 500·2/2 + 320 = 820, v = 240
        let img = project_points(&PointCloud::new(vec![[2.0, 0.0, 2.0]]), &k500(), 1000, 480);
        assert_eq!(img.at(820, 240), 2.0);
        assert_eq!(img.filled(), 1);
    }

    #[test]
    fn empty_cloud_projects_to_zero_image() {
        let img = project_points(&PointCloud::default(), &k500(), 16, 8);
        assert!(img.depth.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn zbuffer_keeps_nearest_point() {
        let cloud = PointCloud::new(vec![[0.3, 0.1, 3.0], [0.1, 0.1 / 3.0, 1.0]]);
        let img = project_points(&cloud, &k500(), 640, 480);
        let (u, v) = (libm::round(500.0 * 0.1 + 320.0) as usize, libm::round(500.0 * 0.1 / 3.0 + 240.0) as usize);
        assert_eq!(img.at(u, v), 1.0);
        assert_eq!(img.filled(), 1);
    }

    #[test]
    fn drops_points_behind_or_outside() {
        let cloud = PointCloud::new(vec![[0.0, 0.0, -1.0], [0.0, 0.0, 0.0], [100.0, 0.0, 1.0]]);
        assert_eq!(project_points(&cloud, &k500(), 640, 480).filled(), 0);
    }

    #[test]
    fn interpolation_is_noop_on_dense_input() {
        let d = DepthImage::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(interpolate_depth(&d, 2).unwrap(), d);
    }

    #[test]
    fn single_pixel_fills_its_neighborhood() {
        let mut d = DepthImage::zeros(5, 5);
        d.depth[2 * 5 + 2] = 2.0;
        let out = interpolate_depth(&d, 1).unwrap();
        for v in 0..5 {
            for u in 0..5 {
                let inside = (1..=3).contains(&u) && (1..=3).contains(&v);
                assert_eq!(out.at(u, v), if inside { 2.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn equidistant_tie_takes_smaller_depth() {
        let mut d = DepthImage::zeros(3, 1);
        d.depth[0] = 3.0;
        d.depth[2] = 1.0;
        assert_eq!(interpolate_depth(&d, 1).unwrap().at(1, 0), 1.0);
        assert!(interpolate_depth(&d, 0).is_err());
    }

    #[test]
    fn identity_intrinsics_back_projection() {
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
        let d = DepthImage::new(3, 2, vec![1.0; 6]).unwrap();
        let pc = back_project(&d, &k, None).unwrap();
        let expected: Vec<[f64; 3]> = (0..2).flat_map(|v| (0..3).map(move |u| [u as f64, v as f64, 1.0])).collect();
        assert_eq!(pc.points, expected);
    }

    #[test]
    fn back_projects_hand_evaluated_pixel() {
        let mut d = DepthImage::zeros(1000, 480);
        d.depth[240 * 1000 + 820] = 2.0;
        let pc = back_project(&d, &k500(), None).unwrap();
        assert_eq!(pc.points, vec![[2.0, 0.0, 2.0]]);
        assert!(back_project(&DepthImage::zeros(4, 4), &k500(), None).unwrap().is_empty());
    }

    #[test]
    fn back_projection_honours_mask() {
        let d = DepthImage::new(2, 1, vec![1.0, 1.0]).unwrap();
        let m = SilhouetteFrame::new(2, 1, vec![1.0, 0.0]).unwrap();
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
        assert_eq!(back_project(&d, &k, Some(&m)).unwrap().len(), 1);
        let bad = SilhouetteFrame::zeros(3, 1);
        assert!(back_project(&d, &k, Some(&bad)).is_err());
    }

    #[test]
    fn voxel_single_cell_centroid() {
        let pc = PointCloud::new(vec![[0.1, 0.1, 0.1], [0.2, 0.2, 0.2], [0.3, 0.3, 0.3]]);
        let out = voxel_downsample(&pc, 1.0).unwrap();
        assert_eq!(out.len(), 1);
        for a in 0..3 {
            assert!((out.points[0][a] - 0.2).abs() < 1e-15);
        }
        assert!(voxel_downsample(&PointCloud::default(), 1.0).unwrap().is_empty());
        assert!(voxel_downsample(&pc, 0.0).is_err());
    }

    #[test]
    fn voxel_sparse_points_are_reordered_copies() {
        let pc = PointCloud::new(vec![[2.5, 0.5, 0.5], [0.5, 3.5, 0.5], [0.5, 0.5, 1.5]]);
        let out = voxel_downsample(&pc, 1.0).unwrap();
        assert_eq!(out.points, vec![[0.5, 0.5, 1.5], [0.5, 3.5, 0.5], [2.5, 0.5, 0.5]]);
    }

    #[test]
    fn normalize_is_identity_on_centered_full_height_frame() {
        let mut m = SilhouetteFrame::zeros(64, 64);
        for v in 0..64 {
            for u in 24..40 {
                m.mask[v * 64 + u] = 1.0;
            }
        }
        assert_eq!(m.normalize_crop(64).unwrap(), m);
    }

    #[test]
    fn normalize_scales_height_to_64() {
        let mut m = SilhouetteFrame::zeros(128, 128);
        for v in 32..96 {
            for u in 60..68 {
                m.mask[v * 128 + u] = 1.0;
            }
        }
        let n = m.normalize_crop(64).unwrap();
        let rows = (0..64).filter(|&v| (0..64).any(|u| n.at(u, v) > 0.0)).count();
        assert_eq!(rows, 64);
    }

    #[test]
    fn normalize_recenters_offset_subject() {
        let mut m = SilhouetteFrame::zeros(128, 96);
        for v in 10..80 {
            for u in 5..21 {
                m.mask[v * 128 + u] = 1.0;
            }
        }
        let n = m.normalize_crop(64).unwrap();
        // centroid oracle over the output mask
        let (mut s, mut c) = (0.0, 0.0);
        for v in 0..64 {
            for u in 0..64 {
                if n.at(u, v) > 0.0 {
                    s += u as f64 + 0.5;
                    c += 1.0;
                }
            }
        }
        assert!((s / c - 32.0).abs() <= 1.0, "{}", s / c);
    }

    #[test]
    fn normalize_rejects_empty_frame() {
        assert_eq!(SilhouetteFrame::zeros(8, 8).normalize_crop(64).unwrap_err(), Error::EmptyFrame);
        assert_eq!(DepthImage::zeros(8, 8).normalize_crop(64).unwrap_err(), Error::EmptyFrame);
    }

    #[test]
    fn depth_values_are_not_rescaled() {
        let mut d = DepthImage::zeros(20, 40);
        for v in 5..25 {
            for u in 8..12 {
                d.depth[v * 20 + u] = 4.0 + 0.01 * v as f64;
            }
        }
        let n = d.normalize_crop(64).unwrap();
        assert!(n.depth.iter().all(|&x| x == 0.0 || d.depth.contains(&x)));
    }

    #[test]
    fn depth_channel_encoding() {
        let d = DepthImage::new(4, 1, vec![1.0, 10.0, 5.5, 0.0]).unwrap();
        let c = depth_to_channels(&d, 1.0, 10.0).unwrap();
        for ch in 0..3 {
            assert_eq!(c[ch * 4], 1.0 / 255.0);
            assert_eq!(c[ch * 4 + 1], 1.0);
            assert!((c[ch * 4 + 2] - 0.5).abs() < 1e-6);
            assert_eq!(c[ch * 4 + 3], 0.0);
        }
        assert!((channel_to_depth(c[2], 1.0, 10.0) - 5.5).abs() < 1e-5);
        assert!(depth_to_channels(&d, 2.0, 2.0).is_err());
    }
}
