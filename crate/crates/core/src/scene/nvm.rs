//! VisualSFM `NVM_V3` reconstruction files.
//!
//! Camera lines are `<file> <focal> <qw> <qx> <qy> <qz> <cx> <cy> <cz> <k1> 0`
//! (world-to-camera rotation, camera center). Point lines are
//! `<X> <Y> <Z> <R> <G> <B> <n> {<image> <feature> <x> <y>}*n` with the
//! measurement relative to the image center. Only the first model in a file
//! is read.

use std::io::{BufRead, Write};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{quat_normalize, CameraIntrinsics, Pose, Quaternion, Vec2, Vec3};
use crate::scene::{ImageRecord, Observation, Scene, TrackedPoint};

/// NVM files carry no image size; every camera gets this one.
#[derive(Debug, Clone, Copy)]
pub struct NvmOptions {
    pub width: u32,
    pub height: u32,
}

impl Default for NvmOptions {
    fn default() -> Self {
        NvmOptions {
            width: 640,
            height: 480,
        }
    }
}

struct Lines<R> {
    inner: R,
    line_no: usize,
    buf: String,
}

impl<R: BufRead> Lines<R> {
    /// Next non-blank line, or a truncation error naming `what`.
    fn next_content(&mut self, what: &str) -> Result<(usize, String)> {
        loop {
            self.buf.clear();
            let n = self
                .inner
                .read_line(&mut self.buf)
                .map_err(|e| Error::parse(Some(self.line_no + 1), format!("read failed: {e}")))?;
            if n == 0 {
                return Err(Error::parse(
                    Some(self.line_no),
                    format!("unexpected end of file, expected {what}"),
                ));
            }
            self.line_no += 1;
            let trimmed = self.buf.trim();
            if !trimmed.is_empty() {
                return Ok((self.line_no, trimmed.to_string()));
            }
        }
    }
}

struct Fields<'a> {
    iter: std::str::SplitWhitespace<'a>,
    line: usize,
}

impl<'a> Fields<'a> {
    fn new(text: &'a str, line: usize) -> Self {
        Fields {
            iter: text.split_whitespace(),
            line,
        }
    }

    fn next_str(&mut self, what: &str) -> Result<&'a str> {
        self.iter
            .next()
            .ok_or_else(|| Error::parse(Some(self.line), format!("missing {what}")))
    }

    fn next<T: FromStr>(&mut self, what: &str) -> Result<T> {
        let tok = self.next_str(what)?;
        tok.parse()
            .map_err(|_| Error::parse(Some(self.line), format!("invalid {what} `{tok}`")))
    }

    fn next_real(&mut self, what: &str) -> Result<f64> {
        let v: f64 = self.next(what)?;
        if !v.is_finite() {
            return Err(Error::parse(Some(self.line), format!("non-finite {what}")));
        }
        Ok(v)
    }
}

pub fn parse_nvm<R: BufRead>(reader: R, opts: &NvmOptions) -> Result<Scene> {
    let mut lines = Lines {
        inner: reader,
        line_no: 0,
        buf: String::new(),
    };
    let (ln, header) = lines.next_content("NVM header")?;
    let tag = header.split_whitespace().next().unwrap_or("");
    if tag != "NVM_V3" {
        let msg = if tag.starts_with("NVM_V") {
            format!("unsupported NVM version `{tag}`")
        } else {
            format!("malformed header `{header}`")
        };
        return Err(Error::parse(Some(ln), msg));
    }

    let (ln, count) = lines.next_content("camera count")?;
    let n_cams: usize = Fields::new(&count, ln).next("camera count")?;
    let mut images = Vec::with_capacity(n_cams.min(1 << 16));
    for id in 0..n_cams {
        let (ln, text) = lines.next_content("camera line")?;
        let mut f = Fields::new(&text, ln);
        let name = f.next_str("file name")?.to_string();
        let focal = f.next_real("focal length")?;
        if !(focal > 0.0) {
            return Err(Error::parse(
                Some(ln),
                format!("non-positive focal length {focal}"),
            ));
        }
        let q = Quaternion::new(
            f.next_real("qw")?,
            f.next_real("qx")?,
            f.next_real("qy")?,
            f.next_real("qz")?,
        );
        let rotation =
            quat_normalize(q).map_err(|_| Error::parse(Some(ln), "zero-norm camera quaternion"))?;
        let center = Vec3::new(f.next_real("cx")?, f.next_real("cy")?, f.next_real("cz")?);
        let radial_k1 = f.next_real("radial distortion")?;
        let _terminator: f64 = f.next_real("trailing zero")?;
        images.push(ImageRecord {
            id,
            name,
            pose: Pose::new(rotation, center),
            intrinsics: CameraIntrinsics {
                radial_k1,
                ..CameraIntrinsics::centered(focal, opts.width, opts.height)
            },
            keypoints: Vec::new(),
            is_training: true,
        });
    }

    let (ln, count) = lines.next_content("point count")?;
    let n_points: usize = Fields::new(&count, ln).next("point count")?;
    let mut points = Vec::with_capacity(n_points.min(1 << 20));
    for _ in 0..n_points {
        let (ln, text) = lines.next_content("point line")?;
        let mut f = Fields::new(&text, ln);
        let position = Vec3::new(f.next_real("X")?, f.next_real("Y")?, f.next_real("Z")?);
        let color = [f.next("red")?, f.next("green")?, f.next("blue")?];
        let n_meas: usize = f.next("measurement count")?;
        let mut observations = Vec::with_capacity(n_meas.min(n_cams.max(1)));
        for _ in 0..n_meas {
            let image: usize = f.next("image index")?;
            let keypoint: usize = f.next("feature index")?;
            let x = f.next_real("measurement x")?;
            let y = f.next_real("measurement y")?;
            let Some(im) = images.get(image) else {
                return Err(Error::parse(
                    Some(ln),
                    format!("measurement references image {image} but only {n_cams} cameras exist"),
                ));
            };
            observations.push(Observation {
                image,
                keypoint,
                pixel: Vec2::new(x, y) + im.intrinsics.principal_point,
            });
        }
        if f.iter.next().is_some() {
            return Err(Error::parse(Some(ln), "trailing tokens after measurements"));
        }
        points.push(TrackedPoint {
            position,
            color,
            observations,
        });
    }
    Ok(Scene {
        images,
        points,
        descriptor_dim: 0,
    })
}

/// Writes the scene as `NVM_V3`; reals use the shortest round-trip form.
pub fn serialize_nvm<W: Write>(scene: &Scene, mut w: W) -> Result<()> {
    writeln!(w, "NVM_V3")?;
    writeln!(w)?;
    writeln!(w, "{}", scene.images.len())?;
    for im in &scene.images {
        let q = im.pose.rotation;
        let c = im.pose.center;
        let name = if im.name.is_empty() || im.name.contains(char::is_whitespace) {
            format!("image_{:06}", im.id)
        } else {
            im.name.clone()
        };
        writeln!(
            w,
            "{name} {} {} {} {} {} {} {} {} {} 0",
            im.intrinsics.focal, q.w, q.x, q.y, q.z, c.x, c.y, c.z, im.intrinsics.radial_k1
        )?;
    }
    writeln!(w)?;
    writeln!(w, "{}", scene.points.len())?;
    for pt in &scene.points {
        let p = pt.position;
        write!(
            w,
            "{} {} {} {} {} {} {}",
            p.x,
            p.y,
            p.z,
            pt.color[0],
            pt.color[1],
            pt.color[2],
            pt.observations.len()
        )?;
        for o in &pt.observations {
            let rel = o.pixel - scene.images[o.image].intrinsics.principal_point;
            write!(w, " {} {} {} {}", o.image, o.keypoint, rel.x, rel.y)?;
        }
        writeln!(w)?;
    }
    writeln!(w)?;
    writeln!(w, "0")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::tests::random_scene;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const MINIMAL: &str =
        "NVM_V3\n\n1\nimg.jpg 500 1 0 0 0 0 0 0 0 0\n1\n0 0 5 255 0 0 1 0 3 10.5 -4\n";

    fn parse(text: &str) -> Result<Scene> {
        parse_nvm(text.as_bytes(), &NvmOptions::default())
    }

    #[test]
    fn minimal_file() {
        let scene = parse(MINIMAL).unwrap();
        assert_eq!(scene.images.len(), 1);
        assert_eq!(scene.points.len(), 1);
        let o = scene.points[0].observations[0];
        assert_eq!((o.image, o.keypoint), (0, 3));
        assert_eq!(o.pixel, Vec2::new(330.5, 236.0));
        assert_eq!(scene.images[0].intrinsics.focal, 500.0);
    }

    #[test]
    fn rejects_other_versions() {
        let err = parse(&MINIMAL.replace("NVM_V3", "NVM_V2")).unwrap_err();
        assert!(err.to_string().contains("unsupported NVM version"), "{err}");
        assert!(matches!(
            parse("PLY\n"),
            Err(Error::ParseError { line: Some(1), .. })
        ));
    }

    #[test]
    fn rejects_bad_image_index() {
        let bad = MINIMAL.replace("1 0 3 10.5", "1 4 3 10.5");
        assert!(matches!(
            parse(&bad),
            Err(Error::ParseError { line: Some(6), .. })
        ));
    }

    #[test]
    fn rejects_truncation() {
        for cut in 0..MINIMAL.len() - 1 {
            let text = &MINIMAL[..cut];
            // cutting inside the final number can still leave a valid file
            if text.ends_with("-4") || text.ends_with("-") {
                continue;
            }
            assert!(parse(text).is_err(), "accepted truncated input {text:?}");
        }
    }

    #[test]
    fn quaternions_are_normalized() {
        let scene = parse(&MINIMAL.replace("500 1 0 0 0", "500 -2 0 0 0")).unwrap();
        assert_eq!(scene.images[0].pose.rotation, Quaternion::IDENTITY);
    }

    /// Structural equality with reals compared to an absolute tolerance.
    fn scenes_close(a: &Scene, b: &Scene, tol: f64) -> bool {
        let near = |x: f64, y: f64| (x - y).abs() <= tol;
        a.images.len() == b.images.len()
            && a.points.len() == b.points.len()
            && a.images.iter().zip(&b.images).all(|(x, y)| {
                x.id == y.id
                    && x.name == y.name
                    && near(x.intrinsics.focal, y.intrinsics.focal)
                    && near(x.intrinsics.radial_k1, y.intrinsics.radial_k1)
                    && x.intrinsics.principal_point == y.intrinsics.principal_point
                    && (x.pose.center - y.pose.center).amax() <= tol
                    && x.pose
                        .rotation
                        .to_array()
                        .iter()
                        .zip(y.pose.rotation.to_array())
                        .all(|(u, v)| near(*u, v))
            })
            && a.points.iter().zip(&b.points).all(|(x, y)| {
                (x.position - y.position).amax() <= tol
                    && x.color == y.color
                    && x.observations.len() == y.observations.len()
                    && x.observations.iter().zip(&y.observations).all(|(o, p)| {
                        o.image == p.image
                            && o.keypoint == p.keypoint
                            && (o.pixel - p.pixel).amax() <= tol
                    })
            })
    }

    fn round_trip(scene: &Scene) -> Scene {
        let mut buf = Vec::new();
        serialize_nvm(scene, &mut buf).unwrap();
        parse_nvm(buf.as_slice(), &NvmOptions::default()).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn serialize_parse_round_trip(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let original = random_scene(&mut rng, 0);
            let scene = round_trip(&original);
            prop_assert!(scenes_close(&scene, &original, 1e-6));
            prop_assert!(scenes_close(&round_trip(&scene), &scene, 1e-6));
        }

        #[test]
        fn arbitrary_text_never_panics(text in "(NVM_V3\n)?[0-9a-z .\n-]{0,200}") {
            let _ = parse(&text);
        }
    }
}
