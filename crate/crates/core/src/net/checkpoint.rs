//! `PKNW` parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"PKNW" | version u32 | config_len u32 | config JSON
//! n_params u64 | n_params x f32        (tensor order of `Layout`)
//! n_running u64 | n_running x f32      (running means/variances)
//! has_state u8 | [epoch u64 | adam_step u64 | n_params x f32 (m) | n_params x f32 (v)]
//! ```

use std::io::{Read, Write};

use super::config::SppNetConfig;
use super::params::SppNetParams;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PKNW";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Optimizer progress stored alongside the parameters for resuming.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    /// Number of completed epochs.
    pub epoch: u64,
    pub adam_step: u64,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: SppNetParams,
    pub state: Option<TrainingState>,
}

/// Rounds every stored real to the checkpoint precision in place.
pub fn quantize(values: &mut [f64]) {
    values.iter_mut().for_each(|v| *v = *v as f32 as f64);
}

fn write_reals<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    params: &SppNetParams,
    state: Option<&TrainingState>,
) -> Result<()> {
    let config = serde_json::to_vec(&params.config)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(config.len() as u32).to_le_bytes())?;
    w.write_all(&config)?;
    w.write_all(&(params.values.len() as u64).to_le_bytes())?;
    write_reals(&mut w, &params.values)?;
    w.write_all(&(params.running.len() as u64).to_le_bytes())?;
    write_reals(&mut w, &params.running)?;
    match state {
        None => w.write_all(&[0])?,
        Some(s) => {
            if s.adam_m.len() != params.values.len() || s.adam_v.len() != params.values.len() {
                return Err(Error::ShapeError(
                    "optimizer state does not match parameters".into(),
                ));
            }
            w.write_all(&[1])?;
            w.write_all(&s.epoch.to_le_bytes())?;
            w.write_all(&s.adam_step.to_le_bytes())?;
            write_reals(&mut w, &s.adam_m)?;
            write_reals(&mut w, &s.adam_v)?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        (&mut self.inner).take(n as u64).read_to_end(&mut buf)?;
        if buf.len() != n {
            return Err(Error::parse(
                None,
                format!("checkpoint truncated in {what}"),
            ));
        }
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.bytes(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn reals(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let b = self.bytes(n * 4, what)?;
        let v: Vec<f64> = b
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::parse(None, format!("non-finite value in {what}")));
        }
        Ok(v)
    }

    fn counted_reals(&mut self, expected: usize, what: &str) -> Result<Vec<f64>> {
        let n = self.u64(what)?;
        if n != expected as u64 {
            return Err(Error::ShapeError(format!(
                "checkpoint has {n} {what} but the config implies {expected}"
            )));
        }
        self.reals(expected, what)
    }
}

pub fn read_checkpoint<R: Read>(reader: R) -> Result<Checkpoint> {
    let mut r = Reader { inner: reader };
    if r.bytes(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::parse(None, "not a PKNW checkpoint"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::parse(
            None,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let len = r.u32("config length")? as usize;
    if len > 1 << 20 {
        return Err(Error::parse(None, "config record too large"));
    }
    let config: SppNetConfig = serde_json::from_slice(&r.bytes(len, "config")?)?;
    config.validate()?;
    let layout = super::params::Layout::new(&config);
    let values = r.counted_reals(layout.total, "parameters")?;
    let running = r.counted_reals(layout.running_total, "running statistics")?;
    let state = match r.bytes(1, "state flag")?[0] {
        0 => None,
        1 => {
            let epoch = r.u64("epoch")?;
            let adam_step = r.u64("step")?;
            let adam_m = r.reals(layout.total, "first moments")?;
            let adam_v = r.reals(layout.total, "second moments")?;
            Some(TrainingState {
                epoch,
                adam_step,
                adam_m,
                adam_v,
            })
        }
        f => return Err(Error::parse(None, format!("invalid state flag {f}"))),
    };
    Ok(Checkpoint {
        params: SppNetParams::from_parts(config, values, running)?,
        state,
    })
}
