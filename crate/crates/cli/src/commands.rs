use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

use posekit::dataset::stream_rng;
use posekit::evaluation::{contribution_map, evaluate, write_cumulative_csv};
use posekit::net::{read_checkpoint, write_checkpoint, Checkpoint, SppNetConfig};
use posekit::scene::{preprocess_scene, read_sidecar, serialize_nvm, write_sidecar};
use posekit::synthesis::{
    run_algorithm1, write_views_sidecar, AugmentMode, AugmentationConfig, SynthesisManifest,
};
use posekit::toyscene::{generate, GroundTruth, ToySceneConfig};
use posekit::training::{grid_spec, write_metrics_csv, TrainConfig, Trainer};
use posekit::Error;

use crate::data::{self, Role};
use crate::{Command, ConfigKind, Mode};

fn load_toml<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("reading {}", p.display()))
        }
    }
}

fn read_params(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(data::open(path)?).with_context(|| format!("reading {}", path.display()))
}

fn print_toml<T: Serialize>(value: &T) -> Result<()> {
    print!("{}", toml::to_string_pretty(value)?);
    Ok(())
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::ToyScene { config, out, seed } => toy_scene(config.as_deref(), &out, seed),
        Command::Synthesize {
            scene,
            descriptors,
            test_ids,
            mode,
            out,
            seed,
            config,
            samples_per_pose,
            width,
            height,
        } => {
            let mut cfg: AugmentationConfig = load_toml(config.as_deref())?;
            if let Some(m) = mode {
                cfg.mode = match m {
                    Mode::Indoor => AugmentMode::Indoor,
                    Mode::Outdoor => AugmentMode::Outdoor,
                };
            }
            if let Some(n) = samples_per_pose {
                cfg.samples_per_pose = n;
            }
            let scene = data::load_scene(&scene, &descriptors, width, height)?;
            let test = data::read_test_ids(&test_ids)?;
            synthesize(&scene, &test, &cfg, seed, &out)
        }
        Command::Train {
            data,
            eval,
            net_config,
            train_config,
            out,
            metrics,
            checkpoint_every,
            resume,
            seed,
            epochs,
        } => {
            let mut tc: TrainConfig = load_toml(train_config.as_deref())?;
            if let Some(s) = seed {
                tc.seed = s;
            }
            if let Some(e) = epochs {
                tc.epochs = e;
            }
            let net: Option<SppNetConfig> = net_config
                .as_deref()
                .map(|p| load_toml(Some(p)))
                .transpose()?;
            let metrics = metrics.unwrap_or_else(|| out.with_extension("metrics.csv"));
            train(TrainArgs {
                data: &data,
                eval: eval.as_deref(),
                net,
                config: tc,
                out: &out,
                metrics: &metrics,
                checkpoint_every,
                resume: resume.as_deref(),
            })
        }
        Command::Eval {
            checkpoint,
            data,
            repeats,
            out,
            train_config,
            cdf_prefix,
            seed,
        } => {
            let tc: TrainConfig = load_toml(train_config.as_deref())?;
            let ck = read_params(&checkpoint)?;
            let samples = data::load_samples(&data, Role::Eval)?;
            let spec = grid_spec(&ck.params.config, tc.position_encoding);
            let report = evaluate(&ck.params, &samples, &spec, repeats, seed)?;
            data::write_file(&out, |w| {
                Ok(serde_json::to_writer_pretty(&mut *w, &report)?)
            })?;
            if let Some(prefix) = cdf_prefix {
                let pos = PathBuf::from(format!("{prefix}pos.csv"));
                data::write_file(&pos, |w| {
                    Ok(write_cumulative_csv(w, &report.sorted_pos_err_m)?)
                })?;
                let ang = PathBuf::from(format!("{prefix}ang.csv"));
                data::write_file(&ang, |w| {
                    Ok(write_cumulative_csv(w, &report.sorted_ang_err_deg)?)
                })?;
            }
            println!(
                "images {}  median position error {:.4} m  median rotation error {:.3} deg",
                samples.len(),
                report.median_pos_err_m,
                report.median_ang_err_deg
            );
            Ok(())
        }
        Command::Contrib {
            checkpoint,
            image_features,
            image,
            runs,
            out,
            width,
            height,
            train_config,
            seed,
        } => {
            let tc: TrainConfig = load_toml(train_config.as_deref())?;
            let ck = read_params(&checkpoint)?;
            let sections = read_sidecar(data::open(&image_features)?)
                .with_context(|| format!("reading {}", image_features.display()))?;
            let section = match image {
                Some(id) => sections.into_iter().find(|s| s.id == id),
                None => sections.into_iter().next(),
            }
            .ok_or_else(|| {
                Error::InsufficientData(format!("{} has no such image", image_features.display()))
            })?;
            let spec = grid_spec(&ck.params.config, tc.position_encoding);
            let mut rng = stream_rng(seed, 0);
            let c = contribution_map(
                &ck.params,
                &section.keypoints,
                width,
                height,
                &spec,
                runs,
                &mut rng,
            )?;
            data::write_file(&out, |w| {
                writeln!(w, "keypoint,p,q,contribution")?;
                for (i, (kp, v)) in section.keypoints.iter().zip(&c).enumerate() {
                    writeln!(w, "{i},{},{},{v}", kp.p, kp.q)?;
                }
                Ok(())
            })?;
            println!("image {}  keypoints {}  runs {runs}", section.id, c.len());
            Ok(())
        }
        Command::Defaults { kind } => match kind {
            ConfigKind::Toy => print_toml(&ToySceneConfig::default()),
            ConfigKind::Augment => print_toml(&AugmentationConfig::default()),
            ConfigKind::Net => print_toml(&SppNetConfig::default()),
            ConfigKind::Train => print_toml(&TrainConfig::default()),
        },
    }
}

fn toy_scene(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg: ToySceneConfig = load_toml(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let toy = generate(&cfg)?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    data::write_file(&out.join(data::SCENE_NVM), |w| {
        Ok(serialize_nvm(&toy.scene, w)?)
    })?;
    data::write_file(&out.join(data::SCENE_DESCRIPTORS), |w| {
        let images = toy
            .scene
            .images
            .iter()
            .map(|im| (im.id as u32, im.keypoints.as_slice()));
        Ok(write_sidecar(w, images.collect::<Vec<_>>())?)
    })?;
    data::write_file(&out.join(data::GROUND_TRUTH), |w| {
        Ok(GroundTruth::from_scene(&toy).write_json(w)?)
    })?;
    println!(
        "images {}  test images {}  points {}",
        toy.scene.images.len(),
        toy.test_ids.len(),
        toy.scene.points.len()
    );
    Ok(())
}

fn synthesize(
    scene: &posekit::scene::Scene,
    test: &std::collections::BTreeSet<usize>,
    cfg: &AugmentationConfig,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let pre = preprocess_scene(scene, test);
    let output = run_algorithm1(&pre, cfg, seed)?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let manifest = SynthesisManifest::new(&output, cfg, seed);
    data::write_file(&out.join(data::MANIFEST), |w| {
        Ok(serde_json::to_writer_pretty(&mut *w, &manifest)?)
    })?;
    data::write_file(&out.join(data::VIEWS), |w| {
        Ok(write_views_sidecar(w, &output.views)?)
    })?;
    let s = output.stats;
    println!(
        "candidates {}  pruned {}  accepted {}  rejected-by-sustainability {}",
        s.candidates, s.pruned, s.accepted, s.rejected_sustainability
    );
    Ok(())
}

struct TrainArgs<'a> {
    data: &'a [PathBuf],
    eval: Option<&'a Path>,
    net: Option<SppNetConfig>,
    config: TrainConfig,
    out: &'a Path,
    metrics: &'a Path,
    checkpoint_every: usize,
    resume: Option<&'a Path>,
}

/// Metrics rows of an earlier run, for epochs before `until`.
fn earlier_rows(path: &Path, until: usize) -> Vec<String> {
    let Ok(text) = fs::read_to_string(path) else {
        return Vec::new();
    };
    text.lines()
        .skip(1)
        .filter(|l| {
            l.split(',')
                .next()
                .and_then(|e| e.parse::<usize>().ok())
                .is_some_and(|e| e < until)
        })
        .map(str::to_owned)
        .collect()
}

fn save(trainer: &mut Trainer, path: &Path) -> Result<()> {
    let state = trainer.checkpoint_state();
    data::write_file(path, |w| {
        Ok(write_checkpoint(w, &trainer.params, Some(&state))?)
    })
}

// the training callback speaks the library error type; output failures are IO
fn as_io(e: anyhow::Error) -> Error {
    Error::Io(std::io::Error::other(format!("{e:#}")))
}

fn train(args: TrainArgs<'_>) -> Result<()> {
    let samples = data::load_all(args.data, Role::Train)?;
    if samples.is_empty() {
        bail!(Error::InsufficientData(
            "no training samples in the data directories".into()
        ));
    }
    let eval = args
        .eval
        .map(|d| data::load_samples(d, Role::Eval))
        .transpose()?;
    let mut trainer = match args.resume {
        Some(path) => {
            let ck = read_params(path)?;
            if let Some(net) = &args.net {
                if *net != ck.params.config {
                    bail!(Error::ShapeError(format!(
                        "network configuration differs from the one stored in {}",
                        path.display()
                    )));
                }
            }
            Trainer::from_params(ck.params, &args.config, ck.state)
        }
        None => Trainer::new(&args.net.unwrap_or_default(), &args.config)?,
    };
    let earlier = if args.resume.is_some() {
        earlier_rows(args.metrics, trainer.epoch)
    } else {
        Vec::new()
    };
    let write_metrics = |t: &Trainer| -> Result<()> {
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &t.metrics)?;
        let text = String::from_utf8(buf)?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        data::write_file(args.metrics, |w| {
            writeln!(w, "{header}")?;
            for l in earlier.iter().map(String::as_str).chain(lines) {
                writeln!(w, "{l}")?;
            }
            Ok(())
        })
    };
    let every = args.checkpoint_every;
    trainer.train(&samples, eval.as_deref(), |t| {
        write_metrics(t).map_err(as_io)?;
        if every > 0 && t.epoch % every == 0 {
            save(t, args.out).map_err(as_io)?;
        }
        Ok(())
    })?;
    write_metrics(&trainer)?;
    save(&mut trainer, args.out)?;
    if let Some(m) = trainer.metrics.last() {
        println!(
            "epoch {}  lr {}  train loss {:.6}{}",
            m.epoch,
            m.lr,
            m.train_loss,
            m.eval_loss
                .map(|l| format!("  eval loss {l:.6}"))
                .unwrap_or_default()
        );
    }
    Ok(())
}
