//! Binary keypoint/descriptor sidecar.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "PKDS" | version u32 = 1 | image count u32
//! per image: image id u32 | keypoint count u32 | D u32
//!            per keypoint: (4 + D) f32 = p, q, scale, orientation, descriptor
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::scene::{Keypoint, Scene};

pub const SIDECAR_MAGIC: &[u8; 4] = b"PKDS";
pub const SIDECAR_VERSION: u32 = 1;

/// One image section of a sidecar file.
#[derive(Debug, Clone, PartialEq)]
pub struct SidecarImage {
    pub id: u32,
    pub descriptor_dim: usize,
    pub keypoints: Vec<Keypoint>,
}

#[derive(Debug, Clone, Copy)]
pub struct DescriptorOptions {
    /// Rescale descriptors to unit L2 norm while loading.
    pub normalize: bool,
    /// Reject files whose descriptor length differs from this.
    pub expected_dim: Option<usize>,
}

impl Default for DescriptorOptions {
    fn default() -> Self {
        DescriptorOptions {
            normalize: true,
            expected_dim: None,
        }
    }
}

pub fn write_sidecar<'a, W, I>(mut w: W, images: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (u32, &'a [Keypoint])>,
    I::IntoIter: ExactSizeIterator,
{
    let images = images.into_iter();
    w.write_all(SIDECAR_MAGIC)?;
    w.write_all(&SIDECAR_VERSION.to_le_bytes())?;
    w.write_all(&(images.len() as u32).to_le_bytes())?;
    for (id, keypoints) in images {
        let dim = keypoints.first().map_or(0, |k| k.descriptor.len());
        w.write_all(&id.to_le_bytes())?;
        w.write_all(&(keypoints.len() as u32).to_le_bytes())?;
        w.write_all(&(dim as u32).to_le_bytes())?;
        for kp in keypoints {
            if kp.descriptor.len() != dim {
                return Err(Error::ShapeError(format!(
                    "image {id} mixes descriptor lengths {dim} and {}",
                    kp.descriptor.len()
                )));
            }
            for v in [kp.p, kp.q, kp.scale, kp.orientation] {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
            for v in &kp.descriptor {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

struct ByteReader<R> {
    inner: R,
    offset: usize,
}

impl<R: Read> ByteReader<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| {
            let reason = if e.kind() == std::io::ErrorKind::UnexpectedEof {
                "truncated file".to_string()
            } else {
                e.to_string()
            };
            Error::parse(
                None,
                format!("{reason} while reading {what} at byte {}", self.offset),
            )
        })?;
        self.offset += N;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(what)?))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes(what)?))
    }
}

pub fn read_sidecar<R: Read>(reader: R) -> Result<Vec<SidecarImage>> {
    let mut r = ByteReader {
        inner: reader,
        offset: 0,
    };
    let magic: [u8; 4] = r.bytes("magic")?;
    if &magic != SIDECAR_MAGIC {
        return Err(Error::parse(None, format!("bad sidecar magic {magic:?}")));
    }
    let version = r.u32("version")?;
    if version != SIDECAR_VERSION {
        return Err(Error::parse(
            None,
            format!("unsupported sidecar version {version}"),
        ));
    }
    let count = r.u32("image count")?;
    let mut images = Vec::new();
    for _ in 0..count {
        let id = r.u32("image id")?;
        let n = r.u32("keypoint count")? as usize;
        let dim = r.u32("descriptor length")? as usize;
        let mut keypoints = Vec::new();
        for _ in 0..n {
            let p = r.f32("p")? as f64;
            let q = r.f32("q")? as f64;
            let scale = r.f32("scale")? as f64;
            let orientation = r.f32("orientation")? as f64;
            let descriptor = (0..dim)
                .map(|_| r.f32("descriptor"))
                .collect::<Result<Vec<f32>>>()?;
            keypoints.push(Keypoint {
                p,
                q,
                scale,
                orientation,
                descriptor,
            });
        }
        images.push(SidecarImage {
            id,
            descriptor_dim: dim,
            keypoints,
        });
    }
    Ok(images)
}

fn check_keypoint(image: u32, k: usize, kp: &Keypoint) -> Result<()> {
    let finite = [kp.p, kp.q, kp.scale, kp.orientation]
        .iter()
        .all(|v| v.is_finite())
        && kp.descriptor.iter().all(|v| v.is_finite());
    if !finite {
        return Err(Error::parse(
            None,
            format!("image {image} keypoint {k} has non-finite values"),
        ));
    }
    if !(kp.scale > 0.0) {
        return Err(Error::parse(
            None,
            format!(
                "image {image} keypoint {k} has non-positive scale {}",
                kp.scale
            ),
        ));
    }
    Ok(())
}

fn normalize_descriptor(d: &mut [f32]) {
    let norm = d
        .iter()
        .map(|v| (*v as f64) * (*v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > 0.0 {
        for v in d {
            *v = (*v as f64 / norm) as f32;
        }
    }
}

/// Fills every image's keypoints from a sidecar stream.
pub fn load_descriptors<R: Read>(
    scene: &Scene,
    reader: R,
    opts: &DescriptorOptions,
) -> Result<Scene> {
    let sections = read_sidecar(reader)?;
    let mut by_id: BTreeMap<u32, SidecarImage> = BTreeMap::new();
    let mut dim = opts
        .expected_dim
        .or((scene.descriptor_dim > 0).then_some(scene.descriptor_dim));
    for s in sections {
        if !s.keypoints.is_empty() {
            match dim {
                Some(d) if d != s.descriptor_dim => {
                    return Err(Error::parse(
                        None,
                        format!(
                            "image {} has descriptor length {}, expected {d}",
                            s.id, s.descriptor_dim
                        ),
                    ))
                }
                None => dim = Some(s.descriptor_dim),
                _ => {}
            }
        }
        if (s.id as usize) >= scene.images.len() {
            return Err(Error::parse(
                None,
                format!("sidecar section for unknown image {}", s.id),
            ));
        }
        let id = s.id;
        if by_id.insert(id, s).is_some() {
            return Err(Error::parse(
                None,
                format!("duplicate sidecar section for image {id}"),
            ));
        }
    }

    let mut max_ref = vec![None::<usize>; scene.images.len()];
    for pt in &scene.points {
        for o in &pt.observations {
            let m = &mut max_ref[o.image];
            *m = Some(m.map_or(o.keypoint, |v| v.max(o.keypoint)));
        }
    }

    let mut out = scene.clone();
    for im in &mut out.images {
        let mut section = by_id.remove(&(im.id as u32)).ok_or_else(|| {
            Error::parse(None, format!("sidecar has no section for image {}", im.id))
        })?;
        if let Some(m) = max_ref[im.id] {
            if m >= section.keypoints.len() {
                return Err(Error::parse(
                    None,
                    format!(
                        "image {} has {} keypoints but tracks reference index {m}",
                        im.id,
                        section.keypoints.len()
                    ),
                ));
            }
        }
        for (k, kp) in section.keypoints.iter_mut().enumerate() {
            check_keypoint(section.id, k, kp)?;
            if opts.normalize {
                normalize_descriptor(&mut kp.descriptor);
            }
        }
        im.keypoints = section.keypoints;
    }
    out.descriptor_dim = dim.unwrap_or(0);
    Ok(out)
}
