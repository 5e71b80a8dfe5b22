//! In-memory SfM reconstruction: images with poses and keypoints, and 3D
//! points with their observation tracks.

mod nvm;
mod sidecar;

pub use nvm::{parse_nvm, serialize_nvm, NvmOptions};
pub use sidecar::{
    load_descriptors, read_sidecar, write_sidecar, DescriptorOptions, SidecarImage, SIDECAR_MAGIC,
    SIDECAR_VERSION,
};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose, Vec2, Vec3};

/// A detected feature: pixel position, scale, orientation and descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub p: f64,
    pub q: f64,
    pub scale: f64,
    /// Radians in `[-pi, pi)`.
    pub orientation: f64,
    pub descriptor: Vec<f32>,
}

impl Keypoint {
    pub fn pixel(&self) -> Vec2 {
        Vec2::new(self.p, self.q)
    }
}

/// One 2D measurement of a 3D point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub image: usize,
    pub keypoint: usize,
    /// Absolute pixel coordinates of the measurement.
    pub pixel: Vec2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    /// Equal to the record's index in [`Scene::images`].
    pub id: usize,
    pub name: String,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
    pub keypoints: Vec<Keypoint>,
    pub is_training: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackedPoint {
    pub position: Vec3,
    pub color: [u8; 3],
    pub observations: Vec<Observation>,
}

/// Point cloud, cameras and tracks.
///
/// `descriptor_dim == 0` means keypoints have not been loaded yet; keypoint
/// indices in tracks are only range-checked once they have.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Scene {
    pub images: Vec<ImageRecord>,
    pub points: Vec<TrackedPoint>,
    pub descriptor_dim: usize,
}

impl Scene {
    pub fn has_descriptors(&self) -> bool {
        self.descriptor_dim > 0
    }

    pub fn training_images(&self) -> impl Iterator<Item = &ImageRecord> {
        self.images.iter().filter(|im| im.is_training)
    }

    pub fn keypoint(&self, obs: &Observation) -> &Keypoint {
        &self.images[obs.image].keypoints[obs.keypoint]
    }

    /// Per image, which keypoints are referenced by some track.
    pub fn sfm_keypoint_masks(&self) -> Vec<Vec<bool>> {
        let mut masks: Vec<Vec<bool>> = self
            .images
            .iter()
            .map(|im| vec![false; im.keypoints.len()])
            .collect();
        for pt in &self.points {
            for o in &pt.observations {
                if let Some(m) = masks[o.image].get_mut(o.keypoint) {
                    *m = true;
                }
            }
        }
        masks
    }

    /// Checks referential integrity and per-record invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidScene(msg));
        for (i, im) in self.images.iter().enumerate() {
            if im.id != i {
                return bad(format!("image at index {i} carries id {}", im.id));
            }
            im.intrinsics.validate()?;
            if self.has_descriptors() {
                for (k, kp) in im.keypoints.iter().enumerate() {
                    if !(kp.scale > 0.0) {
                        return bad(format!("image {i} keypoint {k} has scale {}", kp.scale));
                    }
                    if kp.descriptor.len() != self.descriptor_dim {
                        return bad(format!(
                            "image {i} keypoint {k} has descriptor length {}, scene uses {}",
                            kp.descriptor.len(),
                            self.descriptor_dim
                        ));
                    }
                }
            }
        }
        for (pi, pt) in self.points.iter().enumerate() {
            for o in &pt.observations {
                let Some(im) = self.images.get(o.image) else {
                    return bad(format!("point {pi} references missing image {}", o.image));
                };
                if self.has_descriptors() && o.keypoint >= im.keypoints.len() {
                    return bad(format!(
                        "point {pi} references keypoint {} of image {} which has {}",
                        o.keypoint,
                        o.image,
                        im.keypoints.len()
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Removes every trace of the test images from the tracks and drops points
/// left with fewer than two training observations.
///
/// Test image records are kept (with `is_training == false` and their
/// keypoints cleared) so image ids stay stable.
pub fn preprocess_scene(scene: &Scene, test_image_ids: &BTreeSet<usize>) -> Scene {
    let mut images = scene.images.clone();
    for im in &mut images {
        if test_image_ids.contains(&im.id) {
            im.is_training = false;
        }
        if !im.is_training {
            im.keypoints.clear();
        }
    }
    let points = scene
        .points
        .iter()
        .filter_map(|pt| {
            let observations: Vec<Observation> = pt
                .observations
                .iter()
                .filter(|o| images[o.image].is_training)
                .copied()
                .collect();
            (observations.len() >= 2).then(|| TrackedPoint {
                observations,
                ..pt.clone()
            })
        })
        .collect();
    Scene {
        images,
        points,
        descriptor_dim: scene.descriptor_dim,
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::geometry::Quaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random scene with valid references; keypoints populated when `dim > 0`.
    pub(crate) fn random_scene(rng: &mut impl Rng, dim: usize) -> Scene {
        let n_images = rng.random_range(1..6);
        let images: Vec<ImageRecord> = (0..n_images)
            .map(|id| {
                let n_kp = rng.random_range(3..12);
                ImageRecord {
                    id,
                    name: format!("img_{id:04}.jpg"),
                    pose: Pose::new(
                        crate::geometry::quat_normalize(Quaternion::new(
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                            rng.random_range(0.1..1.0),
                        ))
                        .unwrap(),
                        Vec3::new(
                            rng.random_range(-9.0..9.0),
                            rng.random_range(-9.0..9.0),
                            rng.random_range(-9.0..9.0),
                        ),
                    ),
                    intrinsics: CameraIntrinsics {
                        radial_k1: rng.random_range(-0.1..0.1),
                        ..CameraIntrinsics::centered(rng.random_range(200.0..900.0), 640, 480)
                    },
                    keypoints: if dim == 0 {
                        Vec::new()
                    } else {
                        (0..n_kp)
                            .map(|_| Keypoint {
                                p: rng.random_range(0.0..640.0f32) as f64,
                                q: rng.random_range(0.0..480.0f32) as f64,
                                scale: rng.random_range(0.5..30.0f32) as f64,
                                orientation: rng.random_range(-3.0..3.0f32) as f64,
                                descriptor: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                            })
                            .collect()
                    },
                    is_training: true,
                }
            })
            .collect();
        let n_points = rng.random_range(0..15);
        let points = (0..n_points)
            .map(|_| {
                let n_obs = rng.random_range(1..=n_images);
                let observations = (0..n_obs)
                    .map(|image| {
                        let keypoint = if dim == 0 {
                            rng.random_range(0..20)
                        } else {
                            rng.random_range(0..images[image].keypoints.len())
                        };
                        Observation {
                            image,
                            keypoint,
                            pixel: Vec2::new(
                                rng.random_range(0.0..640.0),
                                rng.random_range(0.0..480.0),
                            ),
                        }
                    })
                    .collect();
                TrackedPoint {
                    position: Vec3::new(
                        rng.random_range(-20.0..20.0),
                        rng.random_range(-20.0..20.0),
                        rng.random_range(-20.0..20.0),
                    ),
                    color: [rng.random(), rng.random(), rng.random()],
                    observations,
                }
            })
            .collect();
        Scene {
            images,
            points,
            descriptor_dim: dim,
        }
    }

    #[test]
    fn preprocess_keeps_clean_scene() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut scene = random_scene(&mut rng, 4);
        scene.points.retain(|p| p.observations.len() >= 2);
        let out = preprocess_scene(&scene, &BTreeSet::new());
        assert_eq!(out, scene);
    }

    #[test]
    fn preprocess_drops_test_only_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut scene = random_scene(&mut rng, 4);
        while scene.images.len() < 3 {
            scene = random_scene(&mut rng, 4);
        }
        let pixel = Vec2::new(1.0, 1.0);
        scene.points = vec![TrackedPoint {
            position: Vec3::zeros(),
            color: [0; 3],
            observations: vec![
                Observation {
                    image: 0,
                    keypoint: 0,
                    pixel,
                },
                Observation {
                    image: 1,
                    keypoint: 0,
                    pixel,
                },
            ],
        }];
        let out = preprocess_scene(&scene, &BTreeSet::from([0, 1]));
        assert!(out.points.is_empty());
        assert!(!out.images[0].is_training && !out.images[1].is_training);
    }

    #[test]
    fn preprocess_invariants_on_random_scenes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let scene = random_scene(&mut rng, 3);
            let test: BTreeSet<usize> = (0..scene.images.len())
                .filter(|_| rng.random_bool(0.3))
                .collect();
            let out = preprocess_scene(&scene, &test);
            out.validate().unwrap();
            for pt in &out.points {
                let training = pt
                    .observations
                    .iter()
                    .filter(|o| out.images[o.image].is_training && !test.contains(&o.image))
                    .count();
                assert!(training >= 2);
                assert_eq!(training, pt.observations.len());
            }
            // brute force: every original point with >= 2 training observations survives
            let expected = scene
                .points
                .iter()
                .filter(|p| {
                    p.observations
                        .iter()
                        .filter(|o| !test.contains(&o.image))
                        .count()
                        >= 2
                })
                .count();
            assert_eq!(out.points.len(), expected);
            assert_eq!(preprocess_scene(&out, &test), out);
        }
    }

    #[test]
    fn validate_catches_dangling_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut scene = random_scene(&mut rng, 2);
        scene.points.push(TrackedPoint {
            position: Vec3::zeros(),
            color: [0; 3],
            observations: vec![Observation {
                image: 0,
                keypoint: 999,
                pixel: Vec2::zeros(),
            }],
        });
        assert!(matches!(scene.validate(), Err(Error::InvalidScene(_))));
    }
}
