//! Paired cross-modality gait data.
//!
//! Two producers live here. [`synth_walker`] renders a procedural articulated walker
//! as frame-synchronized silhouettes (orthographic rasterization) and point clouds
//! (ray casting from a virtual range sensor). [`pseudo_pairs_from_depth`] turns a
//! silhouette and an externally estimated depth map into a pseudo point cloud and
//! its re-projected depth image.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::{PI, TAU};

use crate::error::{Error, Result};
use crate::geometry::{
    back_project, interpolate_depth, project_points, voxel_downsample, CameraIntrinsics, DepthImage, PointCloud,
    SilhouetteFrame,
};
use crate::rng::{derive_seed, name_key, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "lowercase"))]
pub enum Modality {
    Silhouette,
    #[cfg_attr(feature = "serde", serde(rename = "pointcloud"))]
    PointCloud,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "lowercase"))]
pub enum Condition {
    Normal,
    Bag,
    Umbrella,
    Night,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::Normal, Condition::Bag, Condition::Umbrella, Condition::Night];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Normal => "normal",
            Condition::Bag => "bag",
            Condition::Umbrella => "umbrella",
            Condition::Night => "night",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown condition {s:?}")))
    }

    pub fn index(self) -> u64 {
        self as u64
    }
}

/// Segment lengths in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LimbLengths {
    pub thigh: f64,
    pub shin: f64,
    pub upper_arm: f64,
    pub forearm: f64,
    pub torso: f64,
}

/// Body and gait parameters of one synthetic subject.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IdentityParams {
    pub height: f64,
    pub limb_lengths: LimbLengths,
    pub stride_freq: f64,
    pub stride_amp: f64,
    pub phase: f64,
    pub body_width: f64,
}

const NECK_FRACTION: f64 = 0.03;

impl IdentityParams {
    /// Draws the parameters of identity `index` under `seed`.
    pub fn sample(seed: u64, index: u64) -> Self {
        let mut s = Stream::new(derive_seed(seed, &[index]), name_key("identity"));
        let height = s.uniform_in(1.5, 1.95);
        let mut frac = |base: f64, spread: f64| height * base * (1.0 + s.uniform_in(-spread, spread));
        let limb_lengths = LimbLengths {
            thigh: frac(0.245, 0.06),
            shin: frac(0.245, 0.06),
            upper_arm: frac(0.17, 0.08),
            forearm: frac(0.155, 0.08),
            torso: frac(0.34, 0.06),
        };
        Self {
            height,
            limb_lengths,
            stride_freq: s.uniform_in(0.8, 1.25),
            stride_amp: s.uniform_in(0.3, 0.55),
            phase: s.uniform_in(0.0, TAU),
            body_width: s.uniform_in(0.32, 0.5),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = &self.limb_lengths;
        let all = [self.height, l.thigh, l.shin, l.upper_arm, l.forearm, l.torso, self.stride_freq, self.stride_amp, self.body_width];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) || !self.phase.is_finite() {
            return Err(Error::Invalid("identity parameters must be finite and positive".into()));
        }
        if !(1.4..=2.0).contains(&self.height) {
            return Err(Error::Invalid(format!("height {} outside [1.4, 2.0] m", self.height)));
        }
        if self.head_radius() <= 0.02 {
            return Err(Error::Invalid("limb lengths leave no room for the head".into()));
        }
        Ok(())
    }

    /// Whatever the legs, torso and neck leave of the stature goes to the head.
    pub fn head_radius(&self) -> f64 {
        let l = &self.limb_lengths;
        (self.height * (1.0 - NECK_FRACTION) - l.thigh - l.shin - l.torso) / 2.0
    }
}

/// An ordered, timestamped run of frames of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct GaitSequence<F> {
    pub identity: u32,
    /// Degrees, a multiple of 45 in `[0, 360)`.
    pub view: u16,
    pub condition: Condition,
    pub modality: Modality,
    pub frames: Vec<F>,
    pub timestamps: Vec<f64>,
}

impl<F> GaitSequence<F> {
    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::EmptySequence);
        }
        if self.frames.len() != self.timestamps.len() {
            return Err(Error::Invalid("one timestamp per frame required".into()));
        }
        if self.timestamps.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Invalid("timestamps must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Rendering and sensing setup for [`synth_walker`].
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SynthOptions {
    /// Side of the square silhouette raster, pixels.
    pub raster_size: usize,
    pub pixels_per_meter: f64,
    /// Rows between the ground line and the bottom of the raster.
    pub ground_margin: usize,
    pub fps: f64,
    /// Subject distance along the sensor axis, meters.
    pub sensor_distance: f64,
    /// Maximum per-sequence deviation of the subject distance, meters.
    pub distance_jitter: f64,
    /// Sensor height above ground, meters.
    pub sensor_height: f64,
    /// Angular spacing of the range-sensor rays, degrees.
    pub angular_res_deg: f64,
    /// Full horizontal and vertical field of view of the range sensor, degrees.
    pub fov_deg: f64,
    /// Standard deviation of the Gaussian range noise, meters.
    pub range_noise: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            raster_size: 128,
            pixels_per_meter: 56.0,
            ground_margin: 8,
            fps: 10.0,
            sensor_distance: 5.0,
            distance_jitter: 0.2,
            sensor_height: 1.0,
            angular_res_deg: 0.3,
            fov_deg: 30.0,
            range_noise: 0.01,
        }
    }
}

impl SynthOptions {
    /// Rays per frame; an upper bound on the point count.
    pub fn ray_budget(&self) -> usize {
        let n = self.rays_per_axis();
        n * n
    }

    fn rays_per_axis(&self) -> usize {
        libm::floor(self.fov_deg / self.angular_res_deg) as usize
    }
}

#[derive(Debug, Clone, Copy)]
struct Capsule {
    a: [f64; 3],
    b: [f64; 3],
    r: f64,
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn mul(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Body-frame basis: forward, lateral and up, expressed in camera coordinates.
struct Frame {
    origin: [f64; 3],
    forward: [f64; 3],
    lateral: [f64; 3],
    up: [f64; 3],
}

impl Frame {
    fn at(&self, f: f64, l: f64, u: f64) -> [f64; 3] {
        add(self.origin, add(mul(self.forward, f), add(mul(self.lateral, l), mul(self.up, u))))
    }
}

/// Capsules of the walker at time `t`. Coordinates are camera coordinates with the
/// ground plane at `y = sensor_height`.
#[allow(clippy::too_many_arguments)]
fn pose(p: &IdentityParams, condition: Condition, view_deg: f64, t: f64, phase0: f64, amp: f64, distance: f64, opts: &SynthOptions) -> Vec<Capsule> {
    let l = &p.limb_lengths;
    let bw = p.body_width;
    let phi = TAU * p.stride_freq * t + p.phase + phase0;
    let theta = view_deg.to_radians();
    let forward = [libm::cos(theta), 0.0, -libm::sin(theta)];
    let up = [0.0, -1.0, 0.0];
    let lateral = [libm::sin(theta), 0.0, libm::cos(theta)];

    // 2D sagittal kinematics in (forward, up) relative to the pelvis
    let leg = |phase: f64| {
        let hip = amp * libm::sin(phase);
        let knee = amp * (0.15 + 0.85 * (0.5 + 0.5 * libm::cos(phase - 1.2)));
        let kf = l.thigh * libm::sin(hip);
        let ku = -l.thigh * libm::cos(hip);
        let af = kf + l.shin * libm::sin(hip - knee);
        let au = ku - l.shin * libm::cos(hip - knee);
        ((kf, ku), (af, au))
    };
    let (lk, la) = leg(phi);
    let (rk, ra) = leg(phi + PI);
    let (r_torso, r_ua, r_fa, r_thigh, r_shin) = (0.36 * bw, 0.11 * bw, 0.09 * bw, 0.16 * bw, 0.12 * bw);
    let pelvis_h = (-la.1).max(-ra.1) + r_shin;
    let frame = Frame {
        origin: [0.0, opts.sensor_height - pelvis_h, distance],
        forward,
        lateral,
        up,
    };
    let hip_w = 0.22 * bw;
    let shoulder_w = bw / 2.0 - r_ua;
    let shoulder_u = 0.92 * l.torso;
    let head_r = p.head_radius();
    let head_u = l.torso + NECK_FRACTION * p.height + head_r;

    let arm = |phase: f64| {
        let sh = -0.8 * amp * libm::sin(phase);
        let elbow = 0.25 + 0.3 * (0.5 + 0.5 * libm::sin(phase));
        let ef = l.upper_arm * libm::sin(sh);
        let eu = -l.upper_arm * libm::cos(sh);
        let wf = ef + l.forearm * libm::sin(sh + elbow);
        let wu = eu - l.forearm * libm::cos(sh + elbow);
        ((ef, eu), (wf, wu))
    };
    let (le, lw) = arm(phi);
    let (re, rw) = arm(phi + PI);

    let mut caps = Vec::with_capacity(13);
    let c = |a: [f64; 3], b: [f64; 3], r: f64| Capsule { a, b, r };
    caps.push(c(frame.at(0.0, 0.0, 0.0), frame.at(0.0, 0.0, l.torso), r_torso));
    let head = frame.at(0.0, 0.0, head_u);
    caps.push(c(head, head, head_r));
    for (side, (e, w)) in [(1.0, (le, lw)), (-1.0, (re, rw))] {
        let s = frame.at(0.0, side * shoulder_w, shoulder_u);
        let elbow = frame.at(e.0, side * shoulder_w, shoulder_u + e.1);
        let wrist = frame.at(w.0, side * shoulder_w, shoulder_u + w.1);
        caps.push(c(s, elbow, r_ua));
        caps.push(c(elbow, wrist, r_fa));
    }
    for (side, (k, a)) in [(1.0, (lk, la)), (-1.0, (rk, ra))] {
        let hip = frame.at(0.0, side * hip_w, 0.0);
        let knee = frame.at(k.0, side * hip_w, k.1);
        let ankle = frame.at(a.0, side * hip_w, a.1);
        caps.push(c(hip, knee, r_thigh));
        caps.push(c(knee, ankle, r_shin));
    }
    match condition {
        Condition::Bag => {
            // hangs from the right wrist
            let wrist = frame.at(rw.0, -shoulder_w - 0.04, shoulder_u + rw.1);
            let bottom = add(wrist, mul(up, -0.28));
            caps.push(c(add(wrist, mul(up, -0.1)), bottom, 0.11));
        }
        Condition::Umbrella => {
            let top = head_u + head_r + 0.18;
            caps.push(c(frame.at(-0.42, 0.0, top), frame.at(0.42, 0.0, top), 0.09));
            caps.push(c(frame.at(0.0, -0.42, top), frame.at(0.0, 0.42, top), 0.09));
            caps.push(c(frame.at(0.0, 0.0, top), frame.at(0.0, 0.0, shoulder_u), 0.015));
        }
        Condition::Normal | Condition::Night => {}
    }
    caps
}

fn rasterize(caps: &[Capsule], opts: &SynthOptions) -> SilhouetteFrame {
    let n = opts.raster_size;
    let s = opts.pixels_per_meter;
    let ground_row = (n - opts.ground_margin) as f64;
    let mut frame = SilhouetteFrame::zeros(n, n);
    // orthographic image coordinates: u from x, v from height above ground
    let to_img = |p: [f64; 3]| (n as f64 / 2.0 + s * p[0], ground_row - s * (opts.sensor_height - p[1]));
    for cap in caps {
        let (a, b) = (to_img(cap.a), to_img(cap.b));
        let r = cap.r * s;
        let (ba_x, ba_y) = (b.0 - a.0, b.1 - a.1);
        let len2 = ba_x * ba_x + ba_y * ba_y;
        let u0 = libm::floor(a.0.min(b.0) - r).max(0.0) as usize;
        let u1 = (libm::ceil(a.0.max(b.0) + r).max(0.0) as usize).min(n);
        let v0 = libm::floor(a.1.min(b.1) - r).max(0.0) as usize;
        let v1 = (libm::ceil(a.1.max(b.1) + r).max(0.0) as usize).min(n);
        for v in v0..v1 {
            for u in u0..u1 {
                let (px, py) = (u as f64 + 0.5, v as f64 + 0.5);
                let (pa_x, pa_y) = (px - a.0, py - a.1);
                let h = if len2 > 0.0 { ((pa_x * ba_x + pa_y * ba_y) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let (dx, dy) = (pa_x - h * ba_x, pa_y - h * ba_y);
                if dx * dx + dy * dy <= r * r {
                    frame.mask[v * n + u] = 1.0;
                }
            }
        }
    }
    frame
}

fn sphere_hit(ro: [f64; 3], rd: [f64; 3], c: [f64; 3], r: f64) -> Option<f64> {
    let oc = sub(ro, c);
    let b = dot(rd, oc);
    let h = b * b - (dot(oc, oc) - r * r);
    if h < 0.0 {
        return None;
    }
    let t = -b - libm::sqrt(h);
    (t > 0.0).then_some(t)
}

/// First intersection of a unit-direction ray with a capsule.
fn capsule_hit(ro: [f64; 3], rd: [f64; 3], cap: &Capsule) -> Option<f64> {
    let ba = sub(cap.b, cap.a);
    let baba = dot(ba, ba);
    if baba < 1e-18 {
        return sphere_hit(ro, rd, cap.a, cap.r);
    }
    let oa = sub(ro, cap.a);
    let bard = dot(ba, rd);
    let baoa = dot(ba, oa);
    let a = baba - bard * bard;
    let mut best: Option<f64> = None;
    if a > 1e-12 {
        let b = baba * dot(rd, oa) - baoa * bard;
        let c = baba * dot(oa, oa) - baoa * baoa - cap.r * cap.r * baba;
        let h = b * b - a * c;
        if h >= 0.0 {
            let t = (-b - libm::sqrt(h)) / a;
            let y = baoa + t * bard;
            if t > 0.0 && y > 0.0 && y < baba {
                best = Some(t);
            }
        }
    }
    for end in [cap.a, cap.b] {
        if let Some(t) = sphere_hit(ro, rd, end, cap.r) {
            best = Some(best.map_or(t, |b| b.min(t)));
        }
    }
    best
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    mul(v, 1.0 / libm::sqrt(dot(v, v)))
}

fn scan(caps: &[Capsule], opts: &SynthOptions, noise: &mut Stream) -> PointCloud {
    let n = opts.rays_per_axis();
    let res = opts.angular_res_deg.to_radians();
    let half = opts.fov_deg.to_radians() / 2.0;
    let angle = |i: usize| -half + (i as f64 + 0.5) * res;
    let origin = [0.0; 3];
    // restrict the scan to rays that can reach the body's bounding box
    let (mut lo_x, mut hi_x, mut lo_y, mut hi_y) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for c in caps {
        for p in [c.a, c.b] {
            let z = (p[2] - c.r).max(1e-3);
            for (x, y) in [(p[0] - c.r, p[1] - c.r), (p[0] + c.r, p[1] + c.r)] {
                for zz in [z, p[2] + c.r] {
                    lo_x = lo_x.min(libm::atan2(x, zz));
                    hi_x = hi_x.max(libm::atan2(x, zz));
                    lo_y = lo_y.min(libm::atan2(y, zz));
                    hi_y = hi_y.max(libm::atan2(y, zz));
                }
            }
        }
    }
    let mut points = Vec::new();
    for j in 0..n {
        let el = angle(j);
        if el < lo_y - res || el > hi_y + res {
            continue;
        }
        for i in 0..n {
            let az = angle(i);
            if az < lo_x - res || az > hi_x + res {
                continue;
            }
            let rd = normalize([libm::tan(az), libm::tan(el), 1.0]);
            let hit = caps
                .iter()
                .filter_map(|c| capsule_hit(origin, rd, c))
                .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.min(t))));
            if let Some(t) = hit {
                let range = t + opts.range_noise * noise.normal();
                points.push(mul(rd, range));
            }
        }
    }
    PointCloud { points }
}

/// Renders `frames` synchronized silhouette and point-cloud frames of one subject.
///
/// Everything random (start phase, distance jitter, stride variation, range noise)
/// is drawn from `seed`, so identical arguments give bit-identical output.
pub fn synth_walker(
    identity: u32,
    params: &IdentityParams,
    view: u16,
    condition: Condition,
    frames: usize,
    seed: u64,
    opts: &SynthOptions,
) -> Result<(GaitSequence<SilhouetteFrame>, GaitSequence<PointCloud>)> {
    if frames < 8 {
        return Err(Error::Invalid(format!("at least 8 frames required, got {frames}")));
    }
    params.validate()?;
    let mut seq_rng = Stream::new(seed, name_key("sequence"));
    let phase0 = seq_rng.uniform_in(0.0, TAU);
    let distance = opts.sensor_distance + seq_rng.uniform_in(-opts.distance_jitter, opts.distance_jitter);
    let amp = params.stride_amp * seq_rng.uniform_in(0.97, 1.03);
    let mut noise = Stream::new(seed, name_key("range-noise"));

    let timestamps: Vec<f64> = (0..frames).map(|i| i as f64 / opts.fps).collect();
    let mut sils = Vec::with_capacity(frames);
    let mut clouds = Vec::with_capacity(frames);
    for &t in &timestamps {
        let caps = pose(params, condition, view as f64, t, phase0, amp, distance, opts);
        sils.push(rasterize(&caps, opts));
        clouds.push(scan(&caps, opts, &mut noise));
    }
    let sil = GaitSequence { identity, view, condition, modality: Modality::Silhouette, frames: sils, timestamps: timestamps.clone() };
    let pcd = GaitSequence { identity, view, condition, modality: Modality::PointCloud, frames: clouds, timestamps };
    Ok((sil, pcd))
}

/// Per-sequence seed derived from the global seed and the sequence's labels, so a
/// sequence's content does not depend on generation order.
pub fn sequence_seed(global: u64, identity: u32, view: u16, condition: Condition, repeat: u32) -> u64 {
    derive_seed(global, &[identity as u64, view as u64, condition.index(), repeat as u64])
}

/// Projection + interpolation of a point cloud into a dense depth image.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DepthRender {
    pub intrinsics: CameraIntrinsics,
    pub width: usize,
    pub height: usize,
    pub radius: usize,
}

impl Default for DepthRender {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics { fx: 250.0, fy: 250.0, cx: 160.0, cy: 120.0 },
            width: 320,
            height: 240,
            radius: 2,
        }
    }
}

impl DepthRender {
    pub fn render(&self, cloud: &PointCloud) -> Result<DepthImage> {
        let sparse = project_points(cloud, &self.intrinsics, self.width, self.height);
        interpolate_depth(&sparse, self.radius)
    }
}

/// Output of [`pseudo_pairs_from_depth`].
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoPair {
    /// Normalized silhouette.
    pub silhouette: SilhouetteFrame,
    /// Voxel-downsampled pseudo point cloud.
    pub points: PointCloud,
    /// Normalized pseudo depth image.
    pub depth: DepthImage,
    /// Re-projected and interpolated depth at the input resolution, before normalization.
    pub reprojected: DepthImage,
}

/// Masks `depth` by `silhouette`, back-projects it through `k`, downsamples the
/// pseudo points on a voxel grid and re-projects them into a depth image. Both
/// image outputs are normalized to `size × size`.
pub fn pseudo_pairs_from_depth(
    silhouette: &SilhouetteFrame,
    depth: &DepthImage,
    k: &CameraIntrinsics,
    voxel: f64,
    radius: usize,
    size: usize,
) -> Result<PseudoPair> {
    if silhouette.width != depth.width || silhouette.height != depth.height {
        return Err(Error::Invalid(format!(
            "silhouette is {}x{} but depth is {}x{}",
            silhouette.width, silhouette.height, depth.width, depth.height
        )));
    }
    let raw = back_project(depth, k, Some(silhouette))?;
    if raw.is_empty() {
        return Err(Error::NoOverlap);
    }
    let points = voxel_downsample(&raw, voxel)?;
    let sparse = project_points(&points, k, depth.width, depth.height);
    let reprojected = interpolate_depth(&sparse, radius)?;
    Ok(PseudoPair {
        silhouette: silhouette.normalize_crop(size)?,
        depth: reprojected.normalize_crop(size)?,
        points,
        reprojected,
    })
}

pub fn describe(params: &IdentityParams) -> String {
    format!(
        "height {:.3} m, stride {:.3} Hz x {:.3} rad, width {:.3} m",
        params.height, params.stride_freq, params.stride_amp, params.body_width
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn opts() -> SynthOptions {
        SynthOptions::default()
    }

    #[test]
    fn sampled_identities_are_valid() {
        for i in 0..200 {
            IdentityParams::sample(11, i).validate().unwrap();
        }
    }

    #[test]
    fn too_few_frames_is_an_error() {
        let p = IdentityParams::sample(1, 0);
        assert!(synth_walker(0, &p, 0, Condition::Normal, 7, 3, &opts()).is_err());
    }

    #[test]
    fn walker_is_deterministic_and_synchronized() {
        let p = IdentityParams::sample(1, 0);
        let a = synth_walker(0, &p, 90, Condition::Bag, 8, 42, &opts()).unwrap();
        let b = synth_walker(0, &p, 90, Condition::Bag, 8, 42, &opts()).unwrap();
        assert_eq!(a, b);
        a.0.validate().unwrap();
        a.1.validate().unwrap();
        assert_eq!(a.0.timestamps, a.1.timestamps);
        let budget = opts().ray_budget();
        for (s, c) in a.0.frames.iter().zip(&a.1.frames) {
            assert!(s.foreground() > 0);
            assert!(!c.is_empty() && c.len() <= budget);
        }
    }

    #[test]
    fn opposite_views_are_mirror_images() {
        let p = IdentityParams::sample(5, 3);
        let (front, _) = synth_walker(0, &p, 0, Condition::Normal, 8, 9, &opts()).unwrap();
        let (back, _) = synth_walker(0, &p, 180, Condition::Normal, 8, 9, &opts()).unwrap();
        let n = opts().raster_size;
        for (f, b) in front.frames.iter().zip(&back.frames) {
            let mut differ = 0;
            for v in 0..n {
                for u in 0..n {
                    if f.at(u, v) != b.at(n - 1 - u, v) {
                        differ += 1;
                    }
                }
            }
            let fg = f.foreground().max(1);
            assert!(differ * 100 <= fg, "{differ} of {fg} foreground pixels differ");
        }
    }

    #[test]
    fn conditions_change_the_silhouette() {
        let p = IdentityParams::sample(2, 1);
        let (normal, _) = synth_walker(0, &p, 0, Condition::Normal, 8, 4, &opts()).unwrap();
        let (bag, _) = synth_walker(0, &p, 0, Condition::Bag, 8, 4, &opts()).unwrap();
        let (night, _) = synth_walker(0, &p, 0, Condition::Night, 8, 4, &opts()).unwrap();
        assert!(bag.frames[0].foreground() > normal.frames[0].foreground());
        assert_eq!(night.frames, normal.frames);
    }

    fn mean_iou(a: &[SilhouetteFrame], b: &[SilhouetteFrame]) -> f64 {
        let mut total = 0.0;
        for (x, y) in a.iter().zip(b) {
            let inter = x.mask.iter().zip(&y.mask).filter(|(p, q)| **p > 0.0 && **q > 0.0).count();
            let union = x.mask.iter().zip(&y.mask).filter(|(p, q)| **p > 0.0 || **q > 0.0).count();
            total += inter as f64 / union as f64;
        }
        total / a.len() as f64
    }

    #[test]
    fn five_percent_parameter_changes_are_distinguishable() {
        let base = IdentityParams::sample(8, 0);
        let scale_h = |p: &IdentityParams, f: f64| {
            let mut q = *p;
            q.height *= f;
            let l = &mut q.limb_lengths;
            for v in [&mut l.thigh, &mut l.shin, &mut l.upper_arm, &mut l.forearm, &mut l.torso] {
                *v *= f;
            }
            q
        };
        let mut faster = base;
        faster.stride_freq *= 1.05;
        let taller = scale_h(&base, 1.05);
        let o = opts();
        let (a, _) = synth_walker(0, &base, 0, Condition::Normal, 24, 1, &o).unwrap();
        for other in [faster, taller] {
            let (b, _) = synth_walker(0, &other, 0, Condition::Normal, 24, 1, &o).unwrap();
            let iou = mean_iou(&a.frames, &b.frames);
            assert!(iou < 0.95, "mean IoU {iou}");
        }
    }

    #[test]
    fn capsule_intersection_hits_cylinder_and_caps() {
        let cap = Capsule { a: [0.0, -1.0, 5.0], b: [0.0, 1.0, 5.0], r: 0.5 };
        let t = capsule_hit([0.0; 3], [0.0, 0.0, 1.0], &cap).unwrap();
        assert!((t - 4.5).abs() < 1e-12);
        // through the body and through the upper cap
        for dir in [[0.0, 1.0, 5.0], [0.0, 1.3, 5.0], [0.05, -1.2, 5.0]] {
            let rd = normalize(dir);
            let t = capsule_hit([0.0; 3], rd, &cap).unwrap();
            let p = mul(rd, t);
            let ba = sub(cap.b, cap.a);
            let h = (dot(sub(p, cap.a), ba) / dot(ba, ba)).clamp(0.0, 1.0);
            let d = sub(p, add(cap.a, mul(ba, h)));
            assert!((libm::sqrt(dot(d, d)) - 0.5).abs() < 1e-9, "{dir:?}");
        }
        assert!(capsule_hit([0.0; 3], normalize([1.0, 0.0, 1.0]), &cap).is_none());
    }

    #[test]
    fn pseudo_pair_rejects_empty_silhouette() {
        let sil = SilhouetteFrame::zeros(16, 16);
        let depth = DepthImage::new(16, 16, vec![3.0; 256]).unwrap();
        let k = CameraIntrinsics::virtual_default(16, 16);
        assert_eq!(pseudo_pairs_from_depth(&sil, &depth, &k, 0.05, 2, 64).unwrap_err(), Error::NoOverlap);
    }

    #[test]
    fn pseudo_pair_point_count_is_bounded_by_mask() {
        let mut sil = SilhouetteFrame::zeros(40, 40);
        let mut depth = DepthImage::zeros(40, 40);
        for v in 5..35 {
            for u in 15..25 {
                sil.mask[v * 40 + u] = 1.0;
                depth.depth[v * 40 + u] = 4.0 + 0.01 * u as f64;
            }
        }
        let k = CameraIntrinsics::virtual_default(40, 40);
        let pair = pseudo_pairs_from_depth(&sil, &depth, &k, 0.02, 2, 64).unwrap();
        assert!(pair.points.len() <= sil.foreground());
        assert_eq!(pair.depth.width, 64);
        assert_eq!(pair.silhouette.height, 64);
    }
}
