//! On-disk layout of scene and synthesis directories.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use posekit::dataset::{samples_from_scene, PoseSample};
use posekit::scene::{load_descriptors, parse_nvm, DescriptorOptions, NvmOptions, Scene};
use posekit::synthesis::{load_synthetic_samples, SynthesisManifest};
use posekit::toyscene::GroundTruth;

pub const SCENE_NVM: &str = "scene.nvm";
pub const SCENE_DESCRIPTORS: &str = "descriptors.pkds";
pub const GROUND_TRUTH: &str = "ground_truth.json";
pub const MANIFEST: &str = "manifest.json";
pub const VIEWS: &str = "views.pkds";

/// Which images of a scene directory a command consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Train,
    Eval,
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Ok(BufReader::new(f))
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .with_context(|| format!("cannot create {}", parent.display()))?;
    }
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

/// Writes through a buffer and flushes, so IO errors surface here.
pub fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush()
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

pub fn load_scene(nvm: &Path, descriptors: &Path, width: u32, height: u32) -> Result<Scene> {
    let opts = NvmOptions { width, height };
    let scene =
        parse_nvm(open(nvm)?, &opts).with_context(|| format!("reading {}", nvm.display()))?;
    let scene = load_descriptors(&scene, open(descriptors)?, &DescriptorOptions::default())
        .with_context(|| format!("reading {}", descriptors.display()))?;
    Ok(scene)
}

/// Test image ids from a ground-truth JSON file or a whitespace-separated list.
pub fn read_test_ids(path: &Path) -> Result<BTreeSet<usize>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    if text.trim_start().starts_with('{') {
        let gt: GroundTruth =
            serde_json::from_str(&text).with_context(|| format!("reading {}", path.display()))?;
        return Ok(gt.test_ids());
    }
    text.split_whitespace()
        .map(|t| {
            t.parse::<usize>()
                .with_context(|| format!("bad image id {t:?} in {}", path.display()))
        })
        .collect()
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruth> {
    serde_json::from_reader(open(path)?).with_context(|| format!("reading {}", path.display()))
}

fn in_dir(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

/// Samples held by a scene directory (split by its ground truth) or a
/// synthesis directory (all views, training role only).
pub fn load_samples(dir: &Path, role: Role) -> Result<Vec<PoseSample>> {
    if !dir.is_dir() {
        bail!(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("data directory {} does not exist", dir.display())
        ));
    }
    let manifest = in_dir(dir, MANIFEST);
    if manifest.exists() {
        if role == Role::Eval {
            bail!(posekit::Error::InsufficientData(format!(
                "{} holds synthetic views, which carry no test images",
                dir.display()
            )));
        }
        let m: SynthesisManifest = serde_json::from_reader(open(&manifest)?)
            .with_context(|| format!("reading {}", manifest.display()))?;
        let views = in_dir(dir, VIEWS);
        return load_synthetic_samples(&m, open(&views)?)
            .with_context(|| format!("reading {}", views.display()));
    }
    let gt = read_ground_truth(&in_dir(dir, GROUND_TRUTH))?;
    let scene = load_scene(
        &in_dir(dir, SCENE_NVM),
        &in_dir(dir, SCENE_DESCRIPTORS),
        gt.width,
        gt.height,
    )?;
    let test = gt.test_ids();
    let ids: Vec<usize> = scene
        .images
        .iter()
        .map(|im| im.id)
        .filter(|id| test.contains(id) == (role == Role::Eval))
        .collect();
    Ok(samples_from_scene(&scene, ids))
}

pub fn load_all(dirs: &[PathBuf], role: Role) -> Result<Vec<PoseSample>> {
    let mut out = Vec::new();
    for d in dirs {
        out.extend(load_samples(d, role)?);
    }
    Ok(out)
}
