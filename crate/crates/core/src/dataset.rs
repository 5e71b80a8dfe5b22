//! Pose-labelled keypoint sets: the unit consumed by training and evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::Pose;
use crate::scene::{Keypoint, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSample {
    pub keypoints: Vec<Keypoint>,
    pub width: u32,
    pub height: u32,
    pub pose: Pose,
}

/// Samples for the given images of a scene, in the order given.
pub fn samples_from_scene(scene: &Scene, ids: impl IntoIterator<Item = usize>) -> Vec<PoseSample> {
    ids.into_iter()
        .map(|id| {
            let im = &scene.images[id];
            PoseSample {
                keypoints: im.keypoints.clone(),
                width: im.intrinsics.width,
                height: im.intrinsics.height,
                pose: im.pose,
            }
        })
        .collect()
}

/// Independent generator for stream `stream` of a seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
