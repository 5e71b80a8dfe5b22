//! Flat parameter storage and its fixed tensor layout.
//!
//! Tensor order (also the checkpoint order): for branch `s = 0, 1, 2` and
//! layer `l = 1..=4`: `conv{s}/{l}.weight [out, in]`, `.bias`, `.bn_gain`,
//! `.bn_offset`; then `fc6`, `fc7`, `fc8_t`, `fc8_q`, `pose_t`, `pose_q`
//! (each `.weight [out, in]` then `.bias`); then `log_sigma_q_sq` and
//! `log_sigma_t_sq`. Batch-norm running statistics live in a separate array
//! ordered by branch and layer, mean before variance.

use std::ops::Range;

use rand::Rng;
use serde::Serialize;

use super::config::SppNetConfig;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    BnGain,
    BnOffset,
    LogSigma,
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub kind: ParamKind,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ConvSlots {
    pub inp: usize,
    pub out: usize,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
    pub gain: Range<usize>,
    pub offset: Range<usize>,
    pub running_mean: Range<usize>,
    pub running_var: Range<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct DenseSlots {
    pub inp: usize,
    pub out: usize,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub tensors: Vec<TensorInfo>,
    pub total: usize,
    pub running_total: usize,
    pub(crate) convs: Vec<Vec<ConvSlots>>,
    pub(crate) fc6: DenseSlots,
    pub(crate) fc7: DenseSlots,
    pub(crate) head_t: DenseSlots,
    pub(crate) head_q: DenseSlots,
    pub(crate) out_t: DenseSlots,
    pub(crate) out_q: DenseSlots,
    pub(crate) log_sigma_q: usize,
    pub(crate) log_sigma_t: usize,
}

struct Builder {
    tensors: Vec<TensorInfo>,
    total: usize,
    running: usize,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, kind: ParamKind) -> Range<usize> {
        let info = TensorInfo {
            name,
            shape,
            offset: self.total,
            kind,
        };
        let r = info.range();
        self.total = r.end;
        self.tensors.push(info);
        r
    }

    fn running(&mut self, n: usize) -> Range<usize> {
        let r = self.running..self.running + n;
        self.running = r.end;
        r
    }

    fn dense(&mut self, name: &str, inp: usize, out: usize) -> DenseSlots {
        DenseSlots {
            inp,
            out,
            weight: self.push(format!("{name}.weight"), vec![out, inp], ParamKind::Weight),
            bias: self.push(format!("{name}.bias"), vec![out], ParamKind::Bias),
        }
    }
}

impl Layout {
    pub fn new(cfg: &SppNetConfig) -> Layout {
        let mut b = Builder {
            tensors: Vec::new(),
            total: 0,
            running: 0,
        };
        let convs = (0..3)
            .map(|s| {
                let mut inp = cfg.input_channels;
                cfg.branch_widths(s)
                    .iter()
                    .enumerate()
                    .map(|(l, &out)| {
                        let name = format!("conv{s}/{}", l + 1);
                        let slots = ConvSlots {
                            inp,
                            out,
                            weight: b.push(
                                format!("{name}.weight"),
                                vec![out, inp],
                                ParamKind::Weight,
                            ),
                            bias: b.push(format!("{name}.bias"), vec![out], ParamKind::Bias),
                            gain: b.push(format!("{name}.bn_gain"), vec![out], ParamKind::BnGain),
                            offset: b.push(
                                format!("{name}.bn_offset"),
                                vec![out],
                                ParamKind::BnOffset,
                            ),
                            running_mean: b.running(out),
                            running_var: b.running(out),
                        };
                        inp = out;
                        slots
                    })
                    .collect()
            })
            .collect();
        let fc = cfg.fc_width();
        let fc6 = b.dense("fc6", cfg.pooled_len(), fc);
        let fc7 = b.dense("fc7", fc, fc);
        let head_t = b.dense("fc8_t", fc, cfg.head_dim);
        let head_q = b.dense("fc8_q", fc, cfg.head_dim);
        let out_t = b.dense("pose_t", cfg.head_dim, 3);
        let out_q = b.dense("pose_q", cfg.head_dim, 4);
        let log_sigma_q = b
            .push("log_sigma_q_sq".into(), vec![1], ParamKind::LogSigma)
            .start;
        let log_sigma_t = b
            .push("log_sigma_t_sq".into(), vec![1], ParamKind::LogSigma)
            .start;
        Layout {
            tensors: b.tensors,
            total: b.total,
            running_total: b.running,
            convs,
            fc6,
            fc7,
            head_t,
            head_q,
            out_t,
            out_q,
            log_sigma_q,
            log_sigma_t,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Mask of entries that receive weight decay (conv and fc weights).
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.total];
        for t in &self.tensors {
            if t.kind == ParamKind::Weight {
                mask[t.range()].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }
}

/// One row per layer as laid out in the reference layer table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCount {
    pub name: String,
    pub weights: usize,
    pub biases: usize,
    /// Batch-norm gain and offset.
    pub norm: usize,
}

impl LayerCount {
    pub fn total(&self) -> usize {
        self.weights + self.biases + self.norm
    }
}

/// Closed-form per-layer parameter counts.
pub fn layer_counts(cfg: &SppNetConfig) -> Vec<LayerCount> {
    let mut rows = Vec::new();
    for s in 0..3 {
        let mut inp = cfg.input_channels;
        for (l, out) in cfg.branch_widths(s).into_iter().enumerate() {
            rows.push(LayerCount {
                name: format!("conv{s}/{}", l + 1),
                weights: inp * out,
                biases: out,
                norm: 2 * out,
            });
            inp = out;
        }
    }
    let fc = cfg.fc_width();
    let dense = |name: &str, inp: usize, out: usize| LayerCount {
        name: name.into(),
        weights: inp * out,
        biases: out,
        norm: 0,
    };
    rows.push(dense("fc6", cfg.pooled_len(), fc));
    rows.push(dense("fc7", fc, fc));
    rows.push(dense("fc8_t", fc, cfg.head_dim));
    rows.push(dense("fc8_q", fc, cfg.head_dim));
    rows.push(dense("pose_t", cfg.head_dim, 3));
    rows.push(dense("pose_q", cfg.head_dim, 4));
    rows.push(LayerCount {
        name: "log_sigma".into(),
        weights: 0,
        biases: 0,
        norm: 0,
    });
    rows.last_mut().expect("just pushed").biases = 2;
    rows
}

/// Multiply-accumulates of one forward pass (weights times positions).
pub fn forward_flops(cfg: &SppNetConfig) -> u64 {
    let cells = cfg.cells() as u64;
    layer_counts(cfg)
        .iter()
        .map(|r| {
            let w = r.weights as u64;
            if r.name.starts_with("conv") {
                w * cells
            } else {
                w
            }
        })
        .sum()
}

#[derive(Debug, Clone)]
pub struct SppNetParams {
    pub config: SppNetConfig,
    pub layout: Layout,
    pub values: Vec<f64>,
    /// Batch-norm running means and variances.
    pub running: Vec<f64>,
    /// Incremented whenever trainable values change.
    pub version: u64,
}

/// Gradient record with the same layout as [`SppNetParams::values`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub values: Vec<f64>,
}

impl Gradients {
    pub fn zeros(layout: &Layout) -> Self {
        Gradients {
            values: vec![0.0; layout.total],
        }
    }

    pub fn tensor(&self, t: &TensorInfo) -> &[f64] {
        &self.values[t.range()]
    }
}

impl SppNetParams {
    pub fn parameter_count(&self) -> usize {
        self.values.len()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.tensor(name).map(|t| &self.values[t.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.layout.tensor(name)?.range();
        self.version += 1;
        Some(&mut self.values[r])
    }

    pub fn log_sigma_q_sq(&self) -> f64 {
        self.values[self.layout.log_sigma_q]
    }

    pub fn log_sigma_t_sq(&self) -> f64 {
        self.values[self.layout.log_sigma_t]
    }

    pub(crate) fn log_sigma_indices(&self) -> (usize, usize) {
        (self.layout.log_sigma_q, self.layout.log_sigma_t)
    }

    /// Marks the parameters as modified so outstanding traces become stale.
    pub fn touch(&mut self) {
        self.version += 1;
    }

    /// Builds parameters from raw arrays, checking their lengths.
    pub fn from_parts(config: SppNetConfig, values: Vec<f64>, running: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if values.len() != layout.total || running.len() != layout.running_total {
            return Err(crate::Error::ShapeError(format!(
                "expected {} parameters and {} running statistics, got {} and {}",
                layout.total,
                layout.running_total,
                values.len(),
                running.len()
            )));
        }
        Ok(SppNetParams {
            config,
            layout,
            values,
            running,
            version: 0,
        })
    }
}

/// Glorot-uniform weights, zero biases except an identity rotation in the
/// `pose_q` bias, identity batch norm, unit sigmas.
pub fn init_params<R: Rng + ?Sized>(cfg: &SppNetConfig, rng: &mut R) -> Result<SppNetParams> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let mut values = vec![0.0; layout.total];
    for t in &layout.tensors {
        match t.kind {
            ParamKind::Weight => {
                let (out, inp) = (t.shape[0], t.shape[1]);
                let limit = (6.0 / (inp + out) as f64).sqrt();
                for v in &mut values[t.range()] {
                    *v = rng.random_range(-limit..limit);
                }
            }
            ParamKind::BnGain => values[t.range()].iter_mut().for_each(|v| *v = 1.0),
            ParamKind::Bias | ParamKind::BnOffset | ParamKind::LogSigma => {}
        }
    }
    // a head whose units are all inactive would otherwise predict q = 0
    values[layout.out_q.bias.start] = 1.0;
    let mut running = vec![0.0; layout.running_total];
    for branch in &layout.convs {
        for c in branch {
            running[c.running_var.clone()]
                .iter_mut()
                .for_each(|v| *v = 1.0);
        }
    }
    Ok(SppNetParams {
        config: cfg.clone(),
        layout,
        values,
        running,
        version: 0,
    })
}
