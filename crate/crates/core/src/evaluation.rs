//! Localization accuracy metrics and feature-contribution analysis.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{stream_rng, PoseSample};
use crate::error::{Error, Result};
use crate::geometry::{quat_angular_error_deg, quat_normalize, Quaternion, Vec3};
use crate::grid::{bin_features, cell_index, GridSpec, GEOMETRY_CHANNELS};
use crate::net::{forward, positive_contribution_counts, Mode, SppNetParams};
use crate::scene::Keypoint;

/// Averaged network prediction for one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub translation: Vec3,
    /// Unit quaternion, hemisphere-aligned average over repeats.
    pub rotation: Quaternion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageError {
    pub pos_err_m: f64,
    pub ang_err_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_image: Vec<ImageError>,
    pub median_pos_err_m: f64,
    pub median_ang_err_deg: f64,
    /// Ascending positional errors (cumulative histogram support).
    pub sorted_pos_err_m: Vec<f64>,
    pub sorted_ang_err_deg: Vec<f64>,
}

/// Lower median (element `(n - 1) / 2` of the sorted values); NaN when empty.
pub fn lower_median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}

fn descriptor_dim(params: &SppNetParams) -> Result<usize> {
    params
        .config
        .input_channels
        .checked_sub(GEOMETRY_CHANNELS)
        .ok_or_else(|| Error::ShapeError("network input too narrow for geometry channels".into()))
}

fn predict_one(
    params: &SppNetParams,
    s: &PoseSample,
    spec: &GridSpec,
    repeats: usize,
    seed: u64,
    index: usize,
) -> Result<Prediction> {
    let dim = descriptor_dim(params)?;
    let mut rng = stream_rng(seed, index as u64);
    let mut t_sum = Vec3::zeros();
    let mut q_sum = [0.0; 4];
    let mut reference: Option<Quaternion> = None;
    for _ in 0..repeats {
        let grid = bin_features(&s.keypoints, s.width, s.height, spec, dim, &mut rng)?;
        let (t, q, _) = forward(params, &grid, Mode::Eval, &mut rng)?;
        let mut qn = quat_normalize(q)?;
        let r = *reference.get_or_insert(qn);
        if qn.dot(&r) < 0.0 {
            qn = -qn;
        }
        t_sum += t;
        q_sum
            .iter_mut()
            .zip(qn.to_array())
            .for_each(|(a, b)| *a += b);
    }
    Ok(Prediction {
        translation: t_sum / repeats as f64,
        rotation: quat_normalize(Quaternion::from_array(q_sum))?,
    })
}

/// Eval-mode predictions, each averaged over `repeats` binnings. Image `i`
/// draws from stream `i` of `seed`, so results do not depend on threading.
pub fn predict_poses(
    params: &SppNetParams,
    samples: &[PoseSample],
    spec: &GridSpec,
    repeats: usize,
    seed: u64,
) -> Result<Vec<Prediction>> {
    if repeats == 0 {
        return Err(Error::InsufficientData("repeats must be at least 1".into()));
    }
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| predict_one(params, s, spec, repeats, seed, i))
        .collect()
}

/// Errors of predictions against ground-truth poses.
pub fn report_from_predictions(preds: &[Prediction], samples: &[PoseSample]) -> Result<EvalReport> {
    if samples.is_empty() || preds.len() != samples.len() {
        return Err(Error::InsufficientData(format!(
            "{} predictions for {} images",
            preds.len(),
            samples.len()
        )));
    }
    let per_image: Vec<ImageError> = preds
        .iter()
        .zip(samples)
        .map(|(p, s)| ImageError {
            pos_err_m: (p.translation - s.pose.center).norm(),
            ang_err_deg: quat_angular_error_deg(&p.rotation, &s.pose.rotation),
        })
        .collect();
    let mut pos: Vec<f64> = per_image.iter().map(|e| e.pos_err_m).collect();
    let mut ang: Vec<f64> = per_image.iter().map(|e| e.ang_err_deg).collect();
    pos.sort_by(f64::total_cmp);
    ang.sort_by(f64::total_cmp);
    Ok(EvalReport {
        median_pos_err_m: lower_median(&pos),
        median_ang_err_deg: lower_median(&ang),
        per_image,
        sorted_pos_err_m: pos,
        sorted_ang_err_deg: ang,
    })
}

pub fn evaluate(
    params: &SppNetParams,
    samples: &[PoseSample],
    spec: &GridSpec,
    repeats: usize,
    seed: u64,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("empty evaluation set".into()));
    }
    let preds = predict_poses(params, samples, spec, repeats, seed)?;
    report_from_predictions(&preds, samples)
}

/// Two-column `error,cumulative_fraction` CSV of ascending errors.
pub fn write_cumulative_csv<W: Write>(mut w: W, sorted: &[f64]) -> Result<()> {
    writeln!(w, "error,cumulative_fraction")?;
    let n = sorted.len() as f64;
    for (i, e) in sorted.iter().enumerate() {
        writeln!(w, "{e},{}", (i + 1) as f64 / n)?;
    }
    Ok(())
}

/// Average number of pooling units each keypoint wins over `runs` binnings.
///
/// Units whose winning activation is not positive are not attributed.
pub fn contribution_map<R: Rng + ?Sized>(
    params: &SppNetParams,
    keypoints: &[Keypoint],
    width: u32,
    height: u32,
    spec: &GridSpec,
    runs: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if runs == 0 {
        return Err(Error::InsufficientData("runs must be at least 1".into()));
    }
    let dim = descriptor_dim(params)?;
    let mut totals = vec![0u64; keypoints.len()];
    for _ in 0..runs {
        let grid = bin_features(keypoints, width, height, spec, dim, rng)?;
        let (_, _, trace) = forward(params, &grid, Mode::Eval, rng)?;
        let counts = positive_contribution_counts(&trace, 0);
        for (cell, k) in grid.selected.iter().enumerate() {
            if let Some(k) = k {
                totals[*k] += counts[cell] as u64;
            }
        }
    }
    Ok(totals.iter().map(|t| *t as f64 / runs as f64).collect())
}

/// Fraction of grid cells holding no keypoint; out-of-image keypoints are ignored.
pub fn empty_cell_fraction(
    keypoints: &[Keypoint],
    width: u32,
    height: u32,
    d1: usize,
    d2: usize,
) -> f64 {
    let mut occupied = vec![false; d1 * d2];
    for k in keypoints {
        if let Ok(c) = cell_index(k.p, k.q, width, height, d1, d2) {
            occupied[c] = true;
        }
    }
    occupied.iter().filter(|o| !**o).count() as f64 / (d1 * d2) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;
    use crate::net::{contribution_counts, init_params, SppNetConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(c: Vec3) -> PoseSample {
        PoseSample {
            keypoints: Vec::new(),
            width: 64,
            height: 48,
            pose: Pose::new(Quaternion::IDENTITY, c),
        }
    }

    #[test]
    fn perfect_predictions() {
        let s = vec![sample(Vec3::new(1.0, 2.0, 3.0)), sample(Vec3::zeros())];
        let preds: Vec<Prediction> = s
            .iter()
            .map(|x| Prediction {
                translation: x.pose.center,
                rotation: x.pose.rotation,
            })
            .collect();
        let r = report_from_predictions(&preds, &s).unwrap();
        assert_eq!((r.median_pos_err_m, r.median_ang_err_deg), (0.0, 0.0));
    }

    #[test]
    fn lower_median_of_even_count() {
        let s = vec![sample(Vec3::zeros()), sample(Vec3::zeros())];
        let preds = [0.3, 0.1].map(|x| Prediction {
            translation: Vec3::new(x, 0.0, 0.0),
            rotation: Quaternion::IDENTITY,
        });
        let r = report_from_predictions(&preds, &s).unwrap();
        assert!((r.median_pos_err_m - 0.1).abs() < 1e-15);
        assert_eq!(lower_median(&[4.0, 1.0, 3.0, 2.0]), 2.0);
        assert_eq!(lower_median(&[2.0, 1.0, 3.0]), 2.0);
        let mut csv = Vec::new();
        write_cumulative_csv(&mut csv, &r.sorted_pos_err_m).unwrap();
        assert_eq!(
            String::from_utf8(csv)
                .unwrap()
                .lines()
                .last()
                .unwrap()
                .split(',')
                .nth(1),
            Some("1")
        );
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let cfg = SppNetConfig {
            width_multiplier: 0.01,
            ..SppNetConfig::new(4, 4, 8)
        };
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let r = evaluate(&p, &[], &GridSpec::new(4, 4), 1, 0);
        assert!(matches!(r, Err(Error::InsufficientData(_))));
    }

    fn kp(p: f64, q: f64) -> Keypoint {
        Keypoint {
            p,
            q,
            scale: 3.0,
            orientation: 0.5,
            descriptor: vec![0.5, -0.25, 1.0],
        }
    }

    #[test]
    fn repeats_average_to_unit_quaternion() {
        let cfg = SppNetConfig {
            width_multiplier: 0.01,
            ..SppNetConfig::new(4, 4, 8)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = init_params(&cfg, &mut rng).unwrap();
        let mut s = sample(Vec3::zeros());
        s.keypoints = (0..40)
            .map(|i| kp((i * 13 % 64) as f64, (i * 7 % 48) as f64))
            .collect();
        let one =
            predict_poses(&p, std::slice::from_ref(&s), &GridSpec::new(4, 4), 1, 3).unwrap()[0];
        let dim = 3;
        let grid = bin_features(
            &s.keypoints,
            64,
            48,
            &GridSpec::new(4, 4),
            dim,
            &mut stream_rng(3, 0),
        )
        .unwrap();
        let (t, q, _) = forward(&p, &grid, Mode::Eval, &mut rng).unwrap();
        assert_eq!(one.translation, t);
        let qn = quat_normalize(q).unwrap();
        assert!(one
            .rotation
            .to_array()
            .iter()
            .zip(qn.to_array())
            .all(|(a, b)| (a - b).abs() < 1e-15));
        let many = predict_poses(&p, &[s.clone(), s], &GridSpec::new(4, 4), 7, 3).unwrap();
        for m in &many {
            assert!((m.rotation.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn contribution_of_single_run_matches_counts() {
        let cfg = SppNetConfig {
            width_multiplier: 0.05,
            ..SppNetConfig::new(8, 8, 8)
        };
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let kps: Vec<Keypoint> = (0..50)
            .map(|i| kp((i * 37 % 64) as f64 + 0.5, (i * 11 % 48) as f64))
            .collect();
        let spec = GridSpec::new(8, 8);
        let map = contribution_map(
            &p,
            &kps,
            64,
            48,
            &spec,
            1,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grid = bin_features(&kps, 64, 48, &spec, 3, &mut rng).unwrap();
        let (_, _, tr) = forward(&p, &grid, Mode::Eval, &mut rng).unwrap();
        let counts = positive_contribution_counts(&tr, 0);
        let mut expect = vec![0.0; kps.len()];
        for (cell, k) in grid.selected.iter().enumerate() {
            if let Some(k) = k {
                expect[*k] += counts[cell] as f64;
            }
        }
        assert_eq!(map, expect);
        assert!(map.iter().sum::<f64>() <= cfg.pooled_len() as f64);
        let _ = contribution_counts(&tr, 0);
    }

    #[test]
    fn single_keypoint_contribution_is_constant() {
        let cfg = SppNetConfig {
            width_multiplier: 0.05,
            ..SppNetConfig::new(8, 8, 8)
        };
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let kps = [kp(10.0, 10.0)];
        let spec = GridSpec::new(8, 8);
        let one = contribution_map(
            &p,
            &kps,
            64,
            48,
            &spec,
            1,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let many = contribution_map(
            &p,
            &kps,
            64,
            48,
            &spec,
            100,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert_eq!(one, many);
    }

    #[test]
    fn empty_cells() {
        assert_eq!(empty_cell_fraction(&[], 64, 48, 16, 16), 1.0);
        let full: Vec<Keypoint> = (0..16)
            .flat_map(|i| (0..16).map(move |j| kp(i as f64 * 4.0 + 1.0, j as f64 * 3.0 + 1.0)))
            .collect();
        assert_eq!(empty_cell_fraction(&full, 64, 48, 16, 16), 0.0);
    }

    #[test]
    fn empty_fraction_matches_occupancy_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let trials = 10_000;
        let mut sum = 0.0;
        for _ in 0..trials {
            let kps: Vec<Keypoint> = (0..256)
                .map(|_| Keypoint {
                    p: rng.random_range(0.0..640.0),
                    q: rng.random_range(0.0..480.0),
                    scale: 1.0,
                    orientation: 0.0,
                    descriptor: Vec::new(),
                })
                .collect();
            sum += empty_cell_fraction(&kps, 640, 480, 16, 16);
        }
        let expect = (1.0f64 - 1.0 / 256.0).powi(256);
        assert!((sum / trials as f64 / expect - 1.0).abs() < 0.03);
    }
}
