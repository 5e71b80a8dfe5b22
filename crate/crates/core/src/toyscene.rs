//! Deterministic synthetic room scenes with known ground truth.
//!
//! Points lie on the four vertical walls of an axis-aligned room (z up).
//! Training cameras sit on a circle around the room center looking outward;
//! test cameras are displaced radially and in yaw from that circle.

use std::collections::BTreeSet;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::stream_rng;
use crate::error::{Error, Result};
use crate::geometry::{project, CameraIntrinsics, Mat3, Pose, Quaternion, Vec3};
use crate::scene::{ImageRecord, Keypoint, Observation, Scene, TrackedPoint};
use crate::synthesis::storable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySceneConfig {
    pub n_points: usize,
    pub n_train_cams: usize,
    pub n_test_cams: usize,
    /// Room extents along x, y, z in meters.
    pub room: [f64; 3],
    pub descriptor_dim: usize,
    pub descriptor_noise_std: f64,
    pub seed: u64,
    pub focal: f64,
    pub width: u32,
    pub height: u32,
    /// Radius of the training trajectory around the room center.
    pub trajectory_radius: f64,
    pub camera_height: f64,
    /// Radial displacement of test cameras is drawn from this range, with random sign.
    pub test_offset_m: [f64; 2],
    pub test_yaw_max_deg: f64,
    /// Physical feature size; keypoint scale is `focal * base_size / depth`.
    pub base_size: f64,
    /// Observations are kept for depths inside this band.
    pub depth_band: [f64; 2],
    /// Keypoints per image that belong to no track.
    pub distractors_per_image: usize,
}

impl Default for ToySceneConfig {
    fn default() -> Self {
        ToySceneConfig {
            n_points: 2000,
            n_train_cams: 60,
            n_test_cams: 20,
            room: [10.0, 10.0, 3.0],
            descriptor_dim: 128,
            descriptor_noise_std: 0.02,
            seed: 0,
            focal: 500.0,
            width: 640,
            height: 480,
            trajectory_radius: 2.0,
            camera_height: 1.5,
            test_offset_m: [0.5, 1.5],
            test_yaw_max_deg: 20.0,
            base_size: 0.02,
            depth_band: [0.3, 15.0],
            distractors_per_image: 60,
        }
    }
}

impl ToySceneConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_points > 0
            && self.n_train_cams > 0
            && self.room.iter().all(|v| *v > 0.0)
            && self.descriptor_dim > 0
            && self.descriptor_noise_std >= 0.0
            && self.focal > 0.0
            && self.width > 0
            && self.height > 0
            && self.base_size > 0.0
            && self.depth_band[0] < self.depth_band[1]
            && self.test_offset_m[0] <= self.test_offset_m[1];
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidScene(format!(
                "invalid toy scene configuration {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyScene {
    /// Every image with keypoints; test images have `is_training == false`.
    pub scene: Scene,
    pub test_ids: BTreeSet<usize>,
}

/// Camera at `center` looking horizontally along `yaw` (radians from +x).
pub fn outward_pose(center: Vec3, yaw: f64) -> Pose {
    let z = Vec3::new(yaw.cos(), yaw.sin(), 0.0);
    let y = Vec3::new(0.0, 0.0, -1.0);
    let x = y.cross(&z);
    let r = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    Pose::new(Quaternion::from_rotation_matrix(&r), center)
}

fn unit_vector<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn to_f32_unit(v: &[f64]) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

fn wall_point<R: Rng + ?Sized>(rng: &mut R, room: [f64; 3]) -> Vec3 {
    let [lx, ly, lz] = room;
    let z = rng.random_range(0.0..lz);
    let t = rng.random_range(0.0..2.0 * (lx + ly));
    if t < lx {
        Vec3::new(t, 0.0, z)
    } else if t < lx + ly {
        Vec3::new(lx, t - lx, z)
    } else if t < 2.0 * lx + ly {
        Vec3::new(2.0 * lx + ly - t, ly, z)
    } else {
        Vec3::new(0.0, 2.0 * (lx + ly) - t, z)
    }
}

fn wrap_angle(a: f64) -> f64 {
    let w =
        (a + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI;
    if w >= std::f64::consts::PI {
        -std::f64::consts::PI
    } else {
        w
    }
}

pub fn generate(cfg: &ToySceneConfig) -> Result<ToyScene> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, 0);
    let [lx, ly, _] = cfg.room;
    let mid = Vec3::new(lx / 2.0, ly / 2.0, cfg.camera_height);
    let intr = CameraIntrinsics::centered(cfg.focal, cfg.width, cfg.height);

    let mut poses = Vec::new();
    for i in 0..cfg.n_train_cams {
        let yaw = 2.0 * std::f64::consts::PI * i as f64 / cfg.n_train_cams as f64;
        let c = mid + Vec3::new(yaw.cos(), yaw.sin(), 0.0) * cfg.trajectory_radius;
        poses.push((outward_pose(c, yaw), true));
    }
    for j in 0..cfg.n_test_cams {
        let yaw = 2.0 * std::f64::consts::PI * (j as f64 + 0.5) / cfg.n_test_cams as f64;
        let [lo, hi] = cfg.test_offset_m;
        let mag = if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        };
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let r = cfg.trajectory_radius + sign * mag;
        let c = mid + Vec3::new(yaw.cos(), yaw.sin(), 0.0) * r;
        let dyaw = if cfg.test_yaw_max_deg > 0.0 {
            rng.random_range(-cfg.test_yaw_max_deg..=cfg.test_yaw_max_deg)
                .to_radians()
        } else {
            0.0
        };
        poses.push((outward_pose(c, yaw + dyaw), false));
    }

    let dim = cfg.descriptor_dim;
    let prototypes: Vec<(Vec3, Vec<f64>, f64, [u8; 3])> = (0..cfg.n_points)
        .map(|_| {
            let x = wall_point(&mut rng, cfg.room);
            let proto = unit_vector(&mut rng, dim);
            let orientation = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let color = [rng.random(), rng.random(), rng.random()];
            (x, proto, orientation, color)
        })
        .collect();

    let mut images: Vec<ImageRecord> = poses
        .iter()
        .enumerate()
        .map(|(id, (pose, train))| ImageRecord {
            id,
            name: format!("{}_{id:04}.jpg", if *train { "train" } else { "test" }),
            pose: *pose,
            intrinsics: intr,
            keypoints: Vec::new(),
            is_training: *train,
        })
        .collect();
    let mut points = Vec::with_capacity(cfg.n_points);
    for (x, proto, orientation, color) in &prototypes {
        let mut observations = Vec::new();
        for im in images.iter_mut() {
            let Ok((px, depth)) = project(x, &im.pose, &intr) else {
                continue;
            };
            if !storable(&intr, &px) || depth < cfg.depth_band[0] || depth > cfg.depth_band[1] {
                continue;
            }
            let noisy: Vec<f64> = proto
                .iter()
                .map(|v| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    v + cfg.descriptor_noise_std * n
                })
                .collect();
            observations.push(Observation {
                image: im.id,
                keypoint: im.keypoints.len(),
                pixel: px,
            });
            im.keypoints.push(Keypoint {
                p: px.x,
                q: px.y,
                scale: cfg.focal * cfg.base_size / depth,
                orientation: *orientation,
                descriptor: to_f32_unit(&noisy),
            });
        }
        if !observations.is_empty() {
            points.push(TrackedPoint {
                position: *x,
                color: *color,
                observations,
            });
        }
    }
    if points.is_empty() {
        return Err(Error::DegenerateGeometry(
            "no point is visible from any camera".into(),
        ));
    }
    let well_observed = points
        .iter()
        .filter(|p| {
            p.observations
                .iter()
                .filter(|o| images[o.image].is_training)
                .count()
                >= 2
        })
        .count();
    if (well_observed as f64) < 0.9 * cfg.n_points as f64 {
        return Err(Error::DegenerateGeometry(format!(
            "only {well_observed} of {} points have two training observations",
            cfg.n_points
        )));
    }

    for im in images.iter_mut() {
        for _ in 0..cfg.distractors_per_image {
            let d = unit_vector(&mut rng, dim);
            let p = rng.random_range(0.0..cfg.width as f64 - 0.5);
            let q = rng.random_range(0.0..cfg.height as f64 - 0.5);
            im.keypoints.push(Keypoint {
                p,
                q,
                scale: rng.random_range(1.5..20.0),
                orientation: wrap_angle(rng.random_range(-4.0..4.0)),
                descriptor: to_f32_unit(&d),
            });
        }
    }

    let test_ids = images
        .iter()
        .filter(|im| !im.is_training)
        .map(|im| im.id)
        .collect();
    let scene = Scene {
        images,
        points,
        descriptor_dim: dim,
    };
    scene.validate()?;
    Ok(ToyScene { scene, test_ids })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthImage {
    pub id: usize,
    pub name: String,
    pub split: Split,
    pub pose: Pose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Ground-truth poses and split, stored next to the NVM file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub width: u32,
    pub height: u32,
    pub images: Vec<GroundTruthImage>,
}

impl GroundTruth {
    pub fn from_scene(toy: &ToyScene) -> Self {
        let first = toy.scene.images.first().map(|im| im.intrinsics);
        GroundTruth {
            width: first.map_or(0, |k| k.width),
            height: first.map_or(0, |k| k.height),
            images: toy
                .scene
                .images
                .iter()
                .map(|im| GroundTruthImage {
                    id: im.id,
                    name: im.name.clone(),
                    split: if toy.test_ids.contains(&im.id) {
                        Split::Test
                    } else {
                        Split::Train
                    },
                    pose: im.pose,
                })
                .collect(),
        }
    }

    pub fn test_ids(&self) -> BTreeSet<usize> {
        self.images
            .iter()
            .filter(|i| i.split == Split::Test)
            .map(|i| i.id)
            .collect()
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }
}
