//! Binning a variable-size keypoint set into the fixed `d1 x d2 x (D + 5)`
//! network input.
//!
//! Cell `(i, j)` covers `p` in `[i W/d1, (i+1) W/d1)` and `q` in
//! `[j H/d2, (j+1) H/d2)`; its linear index is `i * d2 + j`. Per cell the
//! channel layout is `[descriptor (D), p mod d1, q mod d2, sin θ, cos θ, ln(1+s)]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::Keypoint;

/// Extra channels appended after the descriptor.
pub const GEOMETRY_CHANNELS: usize = 5;

/// How the in-cell position channels are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionEncoding {
    /// `p mod d1`, `q mod d2`.
    #[default]
    Literal,
    /// `p mod (W/d1)`, `q mod (H/d2)`: offset inside the cell.
    CellOffset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub d1: usize,
    pub d2: usize,
    #[serde(default)]
    pub encoding: PositionEncoding,
}

impl GridSpec {
    pub fn new(d1: usize, d2: usize) -> Self {
        GridSpec {
            d1,
            d2,
            encoding: PositionEncoding::Literal,
        }
    }

    pub fn cells(&self) -> usize {
        self.d1 * self.d2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub d1: usize,
    pub d2: usize,
    pub channels: usize,
    /// Cell-major, `cells * channels` values.
    pub data: Vec<f64>,
    pub occupancy: Vec<bool>,
    /// Index into the input keypoint list of the feature chosen for each cell.
    pub selected: Vec<Option<usize>>,
}

impl FeatureGrid {
    pub fn empty(d1: usize, d2: usize, channels: usize) -> Self {
        FeatureGrid {
            d1,
            d2,
            channels,
            data: vec![0.0; d1 * d2 * channels],
            occupancy: vec![false; d1 * d2],
            selected: vec![None; d1 * d2],
        }
    }

    pub fn cells(&self) -> usize {
        self.d1 * self.d2
    }

    pub fn cell(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|o| **o).count()
    }
}

/// Linear cell index of a pixel, or `OutOfBounds`.
pub fn cell_index(p: f64, q: f64, width: u32, height: u32, d1: usize, d2: usize) -> Result<usize> {
    let (w, h) = (width as f64, height as f64);
    if !(p >= 0.0 && p < w && q >= 0.0 && q < h) {
        return Err(Error::OutOfBounds {
            p,
            q,
            width,
            height,
        });
    }
    let i = ((p * d1 as f64 / w).floor() as usize).min(d1 - 1);
    let j = ((q * d2 as f64 / h).floor() as usize).min(d2 - 1);
    Ok(i * d2 + j)
}

/// Bins keypoints into a grid, picking one keypoint uniformly at random in
/// every multiply-occupied cell.
pub fn bin_features<R: Rng + ?Sized>(
    keypoints: &[Keypoint],
    width: u32,
    height: u32,
    spec: &GridSpec,
    descriptor_dim: usize,
    rng: &mut R,
) -> Result<FeatureGrid> {
    if width == 0 || height == 0 || spec.d1 == 0 || spec.d2 == 0 {
        return Err(Error::ShapeError(format!(
            "cannot bin a {width}x{height} image into {}x{} cells",
            spec.d1, spec.d2
        )));
    }
    let channels = descriptor_dim + GEOMETRY_CHANNELS;
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); spec.cells()];
    for (k, kp) in keypoints.iter().enumerate() {
        if kp.descriptor.len() != descriptor_dim {
            return Err(Error::ShapeError(format!(
                "keypoint {k} has descriptor length {}, expected {descriptor_dim}",
                kp.descriptor.len()
            )));
        }
        buckets[cell_index(kp.p, kp.q, width, height, spec.d1, spec.d2)?].push(k);
    }

    let (mod_p, mod_q) = match spec.encoding {
        PositionEncoding::Literal => (spec.d1 as f64, spec.d2 as f64),
        PositionEncoding::CellOffset => (
            width as f64 / spec.d1 as f64,
            height as f64 / spec.d2 as f64,
        ),
    };
    let mut grid = FeatureGrid::empty(spec.d1, spec.d2, channels);
    for (cell, bucket) in buckets.iter().enumerate() {
        if bucket.is_empty() {
            continue;
        }
        let k = bucket[rng.random_range(0..bucket.len())];
        let kp = &keypoints[k];
        let out = &mut grid.data[cell * channels..(cell + 1) * channels];
        for (o, d) in out.iter_mut().zip(&kp.descriptor) {
            *o = *d as f64;
        }
        let (s, c) = kp.orientation.sin_cos();
        out[descriptor_dim..].copy_from_slice(&[
            kp.p.rem_euclid(mod_p),
            kp.q.rem_euclid(mod_q),
            s,
            c,
            kp.scale.ln_1p(),
        ]);
        grid.occupancy[cell] = true;
        grid.selected[cell] = Some(k);
    }
    Ok(grid)
}
