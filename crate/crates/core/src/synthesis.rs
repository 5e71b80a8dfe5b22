//! Synthetic training views mined from an SfM point cloud.
//!
//! Poses are sampled around the training cameras, pruned, and every
//! surviving pose receives the cloud points that a detector would plausibly
//! find again there (scale and viewing-angle gates), followed by descriptor,
//! pixel and outlier corruption.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{stream_rng, PoseSample};
use crate::error::{Error, Result};
use crate::geometry::{
    apply_homography, fit_homography, fit_horizontal_plane, project, quat_angular_error_deg,
    quat_normalize, CameraIntrinsics, PlaneFitConfig, Pose, Quaternion, Vec2, Vec3,
};
use crate::scene::{read_sidecar, write_sidecar, ImageRecord, Keypoint, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    /// Shifts within the fitted ground plane, yaw about its normal.
    #[default]
    Outdoor,
    /// Shifts in a cube, rotation about a random axis.
    Indoor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub mode: AugmentMode,
    pub samples_per_pose: usize,
    pub outdoor_shift_m: f64,
    pub indoor_shift_m: f64,
    pub max_angle_deg: f64,
    pub dedup_dist_m: f64,
    pub dedup_angle_deg: f64,
    pub inside_count: usize,
    pub inside_radius_m: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub view_cone_deg: f64,
    pub outlier_fraction: f64,
    pub homography_min_inliers: usize,
    pub pixel_noise_sigma: f64,
    /// Add Gaussian descriptor noise with the variance estimated from tracks.
    pub descriptor_noise: bool,
    /// Sustainability grid (columns, rows) and the minimum non-empty cells.
    pub grid_check: [usize; 2],
    pub grid_check_min: usize,
    pub plane_fit: PlaneFitConfig,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            mode: AugmentMode::Outdoor,
            samples_per_pose: 50,
            outdoor_shift_m: 2.5,
            indoor_shift_m: 0.25,
            max_angle_deg: 30.0,
            dedup_dist_m: 0.1,
            dedup_angle_deg: 1.0,
            inside_count: 25,
            inside_radius_m: 1.0,
            scale_min: 1.25,
            scale_max: 120.0,
            view_cone_deg: 20.0,
            outlier_fraction: 0.25,
            homography_min_inliers: 50,
            pixel_noise_sigma: 1.0,
            descriptor_noise: true,
            grid_check: [4, 4],
            grid_check_min: 4,
            plane_fit: PlaneFitConfig::default(),
        }
    }
}

impl AugmentationConfig {
    /// Configuration with every corruption step switched off.
    pub fn noise_free(self) -> Self {
        AugmentationConfig {
            outlier_fraction: 0.0,
            pixel_noise_sigma: 0.0,
            descriptor_noise: false,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            self.outdoor_shift_m,
            self.indoor_shift_m,
            self.max_angle_deg,
            self.dedup_dist_m,
            self.dedup_angle_deg,
            self.inside_radius_m,
            self.view_cone_deg,
            self.pixel_noise_sigma,
        ];
        let ok = nonneg.iter().all(|v| *v >= 0.0)
            && self.scale_min > 0.0
            && self.scale_max >= self.scale_min
            && (0.0..1.0).contains(&self.outlier_fraction)
            && self.grid_check[0] > 0
            && self.grid_check[1] > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidScene(format!(
                "invalid augmentation configuration {self:?}"
            )))
        }
    }
}

/// A sampled pose together with the training image it was derived from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidatePose {
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
    pub source: usize,
}

/// Where a synthetic keypoint came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KeypointOrigin {
    /// Projection of cloud point `point`; attributes copied from keypoint
    /// `keypoint` of training image `image`.
    Inlier {
        point: usize,
        image: usize,
        keypoint: usize,
    },
    /// Uniformly placed outlier with attributes of a random observation.
    RandomOutlier {
        point: usize,
        image: usize,
        keypoint: usize,
    },
    /// Non-SfM keypoint of the source image mapped through a homography.
    HomographyOutlier { image: usize, keypoint: usize },
}

impl KeypointOrigin {
    /// Training image the keypoint's descriptor was copied from.
    pub fn descriptor_image(&self) -> usize {
        match *self {
            KeypointOrigin::Inlier { image, .. }
            | KeypointOrigin::RandomOutlier { image, .. }
            | KeypointOrigin::HomographyOutlier { image, .. } => image,
        }
    }

    pub fn is_inlier(&self) -> bool {
        matches!(self, KeypointOrigin::Inlier { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticView {
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
    pub keypoints: Vec<Keypoint>,
    /// Parallel to `keypoints`.
    pub origins: Vec<KeypointOrigin>,
    /// Noise-free projection of each inlier, `None` for outliers.
    pub clean_pixels: Vec<Option<Vec2>>,
    /// Training image whose pose was perturbed.
    pub provenance: usize,
}

impl SyntheticView {
    pub fn inlier_count(&self) -> usize {
        self.origins.iter().filter(|o| o.is_inlier()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    /// Too few grid cells hold a keypoint.
    Sustainability,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Synthesized {
    Accepted(SyntheticView),
    Rejected(Rejection),
}

fn uniform_axis<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Applies a world-frame rotation about `axis` by `angle` to the camera.
fn rotate_camera(pose: &Pose, axis: &Vec3, angle: f64) -> Result<Quaternion> {
    quat_normalize(pose.rotation * Quaternion::from_axis_angle(axis, -angle))
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, half: f64) -> f64 {
    if half > 0.0 {
        rng.random_range(-half..=half)
    } else {
        0.0
    }
}

/// `samples_per_pose` perturbations of every training pose, in image order.
pub fn augment_poses<R: Rng + ?Sized>(
    scene: &Scene,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<Vec<CandidatePose>> {
    let training: Vec<&ImageRecord> = scene.training_images().collect();
    if training.is_empty() {
        return Err(Error::InsufficientData(
            "scene has no training images".into(),
        ));
    }
    let plane = match cfg.mode {
        AugmentMode::Outdoor => {
            let centers: Vec<Vec3> = training.iter().map(|im| im.pose.center).collect();
            Some(fit_horizontal_plane(&centers, &cfg.plane_fit, rng)?)
        }
        AugmentMode::Indoor => None,
    };
    let max_angle = cfg.max_angle_deg.to_radians();
    let mut out = Vec::with_capacity(training.len() * cfg.samples_per_pose);
    for im in training {
        for _ in 0..cfg.samples_per_pose {
            let (offset, axis) = match &plane {
                Some(plane) => {
                    let (u, v) = plane.basis();
                    let s = cfg.outdoor_shift_m;
                    (u * symmetric(rng, s) + v * symmetric(rng, s), plane.normal)
                }
                None => {
                    let s = cfg.indoor_shift_m;
                    let offset = Vec3::new(symmetric(rng, s), symmetric(rng, s), symmetric(rng, s));
                    (offset, uniform_axis(rng))
                }
            };
            let angle = symmetric(rng, max_angle);
            out.push(CandidatePose {
                pose: Pose::new(
                    rotate_camera(&im.pose, &axis, angle)?,
                    im.pose.center + offset,
                ),
                intrinsics: im.intrinsics,
                source: im.id,
            });
        }
    }
    Ok(out)
}

fn near_duplicate(a: &Pose, b: &Pose, cfg: &AugmentationConfig) -> bool {
    (a.center - b.center).norm() <= cfg.dedup_dist_m
        && quat_angular_error_deg(&a.rotation, &b.rotation) <= cfg.dedup_angle_deg
}

/// Number of cloud points in the frustum and within `radius` of the camera.
pub fn points_near_camera(scene: &Scene, pose: &Pose, k: &CameraIntrinsics, radius: f64) -> usize {
    scene
        .points
        .iter()
        .filter(|pt| {
            (pt.position - pose.center).norm() <= radius
                && project(&pt.position, pose, k).is_ok_and(|(px, _)| k.contains(&px))
        })
        .count()
}

/// Greedy removal of near-duplicate poses and poses crowding the cloud.
pub fn prune_poses(
    candidates: &[CandidatePose],
    training: &[Pose],
    scene: &Scene,
    cfg: &AugmentationConfig,
) -> Vec<CandidatePose> {
    let mut kept: Vec<CandidatePose> = Vec::new();
    for c in candidates {
        let dup = training.iter().any(|t| near_duplicate(&c.pose, t, cfg))
            || kept.iter().any(|k| near_duplicate(&c.pose, &k.pose, cfg));
        if dup {
            continue;
        }
        if points_near_camera(scene, &c.pose, &c.intrinsics, cfg.inside_radius_m) > cfg.inside_count
        {
            continue;
        }
        kept.push(*c);
    }
    kept
}

/// Relative scale of an observation when seen from a new camera.
pub fn relative_scale(s_obs: f64, depth_obs: f64, depth_new: f64, f_obs: f64, f_new: f64) -> f64 {
    s_obs * (depth_obs / depth_new) * (f_new / f_obs)
}

fn ray_angle_deg(x: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let (u, v) = (x - a, x - b);
    let c = u.dot(&v) / (u.norm() * v.norm());
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Number of non-empty cells of a `cols x rows` partition of the image.
pub fn occupied_cells<'a>(
    pixels: impl IntoIterator<Item = &'a Vec2>,
    k: &CameraIntrinsics,
    grid: [usize; 2],
) -> usize {
    let mut occ = vec![false; grid[0] * grid[1]];
    for p in pixels {
        let i = ((p.x / k.width as f64 * grid[0] as f64) as usize).min(grid[0] - 1);
        let j = ((p.y / k.height as f64 * grid[1] as f64) as usize).min(grid[1] - 1);
        occ[i * grid[1] + j] = true;
    }
    occ.iter().filter(|o| **o).count()
}

/// Keypoints a detector would find at `candidate`, before corruption.
pub fn synthesize_view(
    candidate: &CandidatePose,
    scene: &Scene,
    cfg: &AugmentationConfig,
) -> Synthesized {
    let pose = &candidate.pose;
    let k = &candidate.intrinsics;
    let mut keypoints = Vec::new();
    let mut origins = Vec::new();
    let mut clean = Vec::new();
    for (pi, pt) in scene.points.iter().enumerate() {
        let Ok((pixel, depth)) = project(&pt.position, pose, k) else {
            continue;
        };
        if !storable(k, &pixel) {
            continue;
        }
        // nearest accepting observation: (distance, image, keypoint, scale)
        let mut best: Option<(f64, usize, usize, f64)> = None;
        for o in &pt.observations {
            let im = &scene.images[o.image];
            if !im.is_training {
                continue;
            }
            let Some(kp) = im.keypoints.get(o.keypoint) else {
                continue;
            };
            let depth_obs = im.pose.world_to_camera(&pt.position).z;
            if !(depth_obs > 0.0) {
                continue;
            }
            let s = relative_scale(kp.scale, depth_obs, depth, im.intrinsics.focal, k.focal);
            if !(s >= cfg.scale_min && s <= cfg.scale_max) {
                continue;
            }
            if ray_angle_deg(&pt.position, &pose.center, &im.pose.center) > cfg.view_cone_deg {
                continue;
            }
            let d = (im.pose.center - pose.center).norm();
            if best.is_none_or(|b| (d, o.image) < (b.0, b.1)) {
                best = Some((d, o.image, o.keypoint, s));
            }
        }
        if let Some((_, image, keypoint, scale)) = best {
            let src = &scene.images[image].keypoints[keypoint];
            keypoints.push(Keypoint {
                p: pixel.x,
                q: pixel.y,
                scale,
                orientation: src.orientation,
                descriptor: src.descriptor.clone(),
            });
            origins.push(KeypointOrigin::Inlier {
                point: pi,
                image,
                keypoint,
            });
            clean.push(Some(pixel));
        }
    }
    let pixels: Vec<Vec2> = clean.iter().flatten().copied().collect();
    if occupied_cells(&pixels, k, cfg.grid_check) < cfg.grid_check_min {
        return Synthesized::Rejected(Rejection::Sustainability);
    }
    Synthesized::Accepted(SyntheticView {
        pose: *pose,
        intrinsics: *k,
        keypoints,
        origins,
        clean_pixels: clean,
        provenance: candidate.source,
    })
}

/// Inside the image even after rounding to the 32-bit storage precision.
pub fn storable(k: &CameraIntrinsics, px: &Vec2) -> bool {
    k.contains(px) && k.contains(&Vec2::new(px.x as f32 as f64, px.y as f32 as f64))
}

fn clamp_into(v: f64, size: u32) -> f64 {
    // largest f32 below `size`, so stored pixels stay in bounds
    let hi = f32::from_bits((size as f32).to_bits() - 1) as f64;
    v.clamp(0.0, hi)
}

/// Adds descriptor noise, pixel noise, random outliers and homography outliers.
///
/// `variance` holds the per-dimension descriptor noise variance.
pub fn corrupt_view<R: Rng + ?Sized>(
    view: &SyntheticView,
    scene: &Scene,
    source: &ImageRecord,
    variance: &[f64],
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<SyntheticView> {
    let mut out = view.clone();
    let k = out.intrinsics;
    let inliers = out.keypoints.len();

    if cfg.descriptor_noise {
        for kp in &mut out.keypoints {
            if kp.descriptor.len() != variance.len() {
                return Err(Error::ShapeError(format!(
                    "descriptor length {} but {} noise variances",
                    kp.descriptor.len(),
                    variance.len()
                )));
            }
            for (d, var) in kp.descriptor.iter_mut().zip(variance) {
                let n: f64 = StandardNormal.sample(rng);
                *d = (*d as f64 + var.sqrt() * n) as f32;
            }
        }
    }

    if cfg.pixel_noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.pixel_noise_sigma)
            .map_err(|e| Error::NumericalError(e.to_string()))?;
        for kp in &mut out.keypoints {
            kp.p = clamp_into(kp.p + noise.sample(rng), k.width);
            kp.q = clamp_into(kp.q + noise.sample(rng), k.height);
        }
    }

    let n_random = (cfg.outlier_fraction * inliers as f64).ceil() as usize;
    let observed: Vec<usize> = (0..scene.points.len())
        .filter(|&i| !scene.points[i].observations.is_empty())
        .collect();
    if n_random > 0 && !observed.is_empty() {
        for _ in 0..n_random {
            let pi = observed[rng.random_range(0..observed.len())];
            let obs = &scene.points[pi].observations;
            let o = obs[rng.random_range(0..obs.len())];
            let src = scene.keypoint(&o);
            let p = clamp_into(rng.random_range(0.0..k.width as f64), k.width);
            let q = clamp_into(rng.random_range(0.0..k.height as f64), k.height);
            out.keypoints.push(Keypoint {
                p,
                q,
                scale: src.scale,
                orientation: src.orientation,
                descriptor: src.descriptor.clone(),
            });
            out.origins.push(KeypointOrigin::RandomOutlier {
                point: pi,
                image: o.image,
                keypoint: o.keypoint,
            });
            out.clean_pixels.push(None);
        }
    }

    if cfg.outlier_fraction > 0.0 {
        add_homography_outliers(&mut out, view, scene, source, cfg, rng)?;
    }
    Ok(out)
}

fn add_homography_outliers<R: Rng + ?Sized>(
    out: &mut SyntheticView,
    view: &SyntheticView,
    scene: &Scene,
    source: &ImageRecord,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<()> {
    // correspondences through points seen by both the source image and the view
    let mut src_px = Vec::new();
    let mut dst_px = Vec::new();
    for (i, origin) in view.origins.iter().enumerate() {
        let KeypointOrigin::Inlier { point, .. } = origin else {
            continue;
        };
        if let Some(o) = scene.points[*point]
            .observations
            .iter()
            .find(|o| o.image == source.id)
        {
            if let Some(kp) = source.keypoints.get(o.keypoint) {
                src_px.push(kp.pixel());
                dst_px.push(out.keypoints[i].pixel());
            }
        }
    }
    if src_px.len() < cfg.homography_min_inliers.max(4) {
        return Ok(());
    }
    let Ok(h) = fit_homography(&src_px, &dst_px) else {
        return Ok(());
    };
    let mut sfm = vec![false; source.keypoints.len()];
    for pt in &scene.points {
        for o in pt.observations.iter().filter(|o| o.image == source.id) {
            if let Some(m) = sfm.get_mut(o.keypoint) {
                *m = true;
            }
        }
    }
    let free: Vec<usize> = (0..sfm.len()).filter(|&i| !sfm[i]).collect();
    let n = ((cfg.outlier_fraction * free.len() as f64).ceil() as usize).min(free.len());
    if n == 0 {
        return Ok(());
    }
    let mut chosen: Vec<usize> = sample_indices(rng, free.len(), n)
        .into_iter()
        .map(|i| free[i])
        .collect();
    chosen.sort_unstable();
    let k = out.intrinsics;
    for idx in chosen {
        let kp = &source.keypoints[idx];
        let Some(px) = apply_homography(&h, &kp.pixel()) else {
            continue;
        };
        if !storable(&k, &px) {
            continue;
        }
        out.keypoints.push(Keypoint {
            p: px.x,
            q: px.y,
            ..kp.clone()
        });
        out.origins.push(KeypointOrigin::HomographyOutlier {
            image: source.id,
            keypoint: idx,
        });
        out.clean_pixels.push(None);
    }
    Ok(())
}

/// Pooled within-track variance of descriptors, per dimension.
///
/// Uses `Σ (f - mean_track)^2 / Σ (n_track - 1)` over training observations.
pub fn estimate_descriptor_variance(scene: &Scene) -> Result<Vec<f64>> {
    let dim = scene.descriptor_dim;
    let mut sum = vec![0.0; dim];
    let mut dof = 0usize;
    for pt in &scene.points {
        let descs: Vec<&[f32]> = pt
            .observations
            .iter()
            .filter(|o| scene.images[o.image].is_training)
            .filter_map(|o| scene.images[o.image].keypoints.get(o.keypoint))
            .map(|k| k.descriptor.as_slice())
            .filter(|d| d.len() == dim)
            .collect();
        if descs.len() < 2 {
            continue;
        }
        let n = descs.len() as f64;
        for d in 0..dim {
            let mean = descs.iter().map(|x| x[d] as f64).sum::<f64>() / n;
            sum[d] += descs
                .iter()
                .map(|x| (x[d] as f64 - mean).powi(2))
                .sum::<f64>();
        }
        dof += descs.len() - 1;
    }
    if dof == 0 || dim == 0 {
        return Err(Error::InsufficientData(
            "no track with two or more described training observations".into(),
        ));
    }
    Ok(sum.into_iter().map(|s| s / dof as f64).collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisStats {
    pub candidates: usize,
    pub pruned: usize,
    pub accepted: usize,
    pub rejected_sustainability: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisOutput {
    pub views: Vec<SyntheticView>,
    pub stats: SynthesisStats,
}

/// Per-pose generator: stream 1 of `seed XOR index`.
fn pose_rng(seed: u64, index: usize) -> ChaCha8Rng {
    stream_rng(seed ^ index as u64, 1)
}

/// Full pipeline on a preprocessed scene; identical output for any thread count.
pub fn run_algorithm1(
    scene: &Scene,
    cfg: &AugmentationConfig,
    seed: u64,
) -> Result<SynthesisOutput> {
    cfg.validate()?;
    let mut rng = stream_rng(seed, 0);
    let candidates = augment_poses(scene, cfg, &mut rng)?;
    let training: Vec<Pose> = scene.training_images().map(|im| im.pose).collect();
    let kept = prune_poses(&candidates, &training, scene, cfg);
    let variance = if cfg.descriptor_noise && !kept.is_empty() {
        estimate_descriptor_variance(scene)?
    } else {
        vec![0.0; scene.descriptor_dim]
    };
    let results: Vec<Result<Option<SyntheticView>>> = kept
        .par_iter()
        .enumerate()
        .map(|(i, c)| match synthesize_view(c, scene, cfg) {
            Synthesized::Rejected(_) => Ok(None),
            Synthesized::Accepted(v) => {
                let mut rng = pose_rng(seed, i);
                corrupt_view(&v, scene, &scene.images[c.source], &variance, cfg, &mut rng).map(Some)
            }
        })
        .collect();
    let mut views = Vec::new();
    for r in results {
        if let Some(v) = r? {
            views.push(v);
        }
    }
    let stats = SynthesisStats {
        candidates: candidates.len(),
        pruned: candidates.len() - kept.len(),
        accepted: views.len(),
        rejected_sustainability: kept.len() - views.len(),
    };
    Ok(SynthesisOutput { views, stats })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestView {
    /// Section id in the sidecar file.
    pub id: u32,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
    pub provenance: usize,
    pub keypoints: usize,
    pub inliers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisManifest {
    pub seed: u64,
    pub config: AugmentationConfig,
    pub stats: SynthesisStats,
    pub views: Vec<ManifestView>,
}

impl SynthesisManifest {
    pub fn new(output: &SynthesisOutput, cfg: &AugmentationConfig, seed: u64) -> Self {
        SynthesisManifest {
            seed,
            config: cfg.clone(),
            stats: output.stats,
            views: output
                .views
                .iter()
                .enumerate()
                .map(|(i, v)| ManifestView {
                    id: i as u32,
                    pose: v.pose,
                    intrinsics: v.intrinsics,
                    provenance: v.provenance,
                    keypoints: v.keypoints.len(),
                    inliers: v.inlier_count(),
                })
                .collect(),
        }
    }
}

/// Writes view keypoints as a sidecar, one section per view.
pub fn write_views_sidecar<W: Write>(w: W, views: &[SyntheticView]) -> Result<()> {
    write_sidecar(
        w,
        views
            .iter()
            .enumerate()
            .map(|(i, v)| (i as u32, v.keypoints.as_slice())),
    )
}

/// Training samples from a manifest and its sidecar.
pub fn load_synthetic_samples<R: Read>(
    manifest: &SynthesisManifest,
    sidecar: R,
) -> Result<Vec<PoseSample>> {
    let mut sections: HashMap<u32, Vec<Keypoint>> = HashMap::new();
    for s in read_sidecar(sidecar)? {
        if sections.insert(s.id, s.keypoints).is_some() {
            return Err(Error::parse(
                None,
                format!("duplicate sidecar section {}", s.id),
            ));
        }
    }
    manifest
        .views
        .iter()
        .map(|v| {
            let keypoints = sections.remove(&v.id).ok_or_else(|| {
                Error::parse(None, format!("sidecar has no section for view {}", v.id))
            })?;
            if keypoints.len() != v.keypoints {
                return Err(Error::parse(
                    None,
                    format!(
                        "view {} lists {} keypoints, sidecar holds {}",
                        v.id,
                        v.keypoints,
                        keypoints.len()
                    ),
                ));
            }
            Ok(PoseSample {
                keypoints,
                width: v.intrinsics.width,
                height: v.intrinsics.height,
                pose: v.pose,
            })
        })
        .collect()
}
