//! Forward and reverse passes of the pyramid pose network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{BnOrder, SppNetConfig};
use super::linalg::{accumulate_column_sums, accumulate_weight_grad, input_grad, linear};
use super::params::{ConvSlots, DenseSlots, Gradients, SppNetParams};
use crate::error::{Error, Result};
use crate::geometry::{Quaternion, Vec3};
use crate::grid::FeatureGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

#[derive(Debug, Clone)]
pub struct ConvTrace {
    /// Layer output after activation and normalization, `rows x out`.
    pub out: Vec<f64>,
    pub xhat: Vec<f64>,
    /// Statistics actually used: batch statistics in train mode, running ones in eval.
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Active ReLU units (only recorded for `ConvReluBn`).
    pub relu_mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct DenseTrace {
    /// Post-ReLU activations before dropout, `batch x out`.
    pub act: Vec<f64>,
    /// Inverted-dropout multipliers (empty when dropout is off).
    pub dropout: Vec<f64>,
}

impl DenseTrace {
    fn output(&self) -> Vec<f64> {
        if self.dropout.is_empty() {
            self.act.clone()
        } else {
            self.act
                .iter()
                .zip(&self.dropout)
                .map(|(a, m)| a * m)
                .collect()
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub mode: Mode,
    pub batch: usize,
    pub cells: usize,
    /// Parameter version the trace was recorded against.
    pub version: u64,
    /// Stacked input, `batch * cells x channels`.
    pub input: Vec<f64>,
    /// Per branch; `None` for pyramid levels that are not in use.
    pub branches: Vec<Option<Vec<ConvTrace>>>,
    /// Concatenated pooled features, `batch x pooled_len`.
    pub pooled: Vec<f64>,
    /// Winning cell (within its example) of every pooled entry.
    pub argmax: Vec<u32>,
    pub fc6: DenseTrace,
    pub fc7: DenseTrace,
    pub head_t: Vec<f64>,
    pub head_q: Vec<f64>,
}

impl ForwardTrace {
    pub fn pooled_len(&self) -> usize {
        self.pooled.len() / self.batch.max(1)
    }

    /// Pooled feature vector of example `b`.
    pub fn pooled_features(&self, b: usize) -> &[f64] {
        let n = self.pooled_len();
        &self.pooled[b * n..(b + 1) * n]
    }
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub translations: Vec<[f64; 3]>,
    /// Raw, unnormalized quaternion outputs `(w, x, y, z)`.
    pub rotations: Vec<[f64; 4]>,
    pub trace: ForwardTrace,
}

fn check_grid(cfg: &SppNetConfig, g: &FeatureGrid) -> Result<()> {
    if g.d1 != cfg.d1 || g.d2 != cfg.d2 || g.channels != cfg.input_channels {
        return Err(Error::ShapeError(format!(
            "grid {}x{}x{} does not match network input {}x{}x{}",
            g.d1, g.d2, g.channels, cfg.d1, cfg.d2, cfg.input_channels
        )));
    }
    if g.data.len() != g.d1 * g.d2 * g.channels {
        return Err(Error::ShapeError(
            "grid data length does not match its dimensions".into(),
        ));
    }
    Ok(())
}

fn conv_forward(
    params: &SppNetParams,
    slots: &ConvSlots,
    x: &[f64],
    rows: usize,
    mode: Mode,
) -> ConvTrace {
    let cfg = &params.config;
    let v = &params.values;
    let c = slots.out;
    let mut z = linear(
        x,
        rows,
        slots.inp,
        &v[slots.weight.clone()],
        &v[slots.bias.clone()],
    );
    let mut relu_mask = Vec::new();
    if cfg.bn_order == BnOrder::ConvReluBn {
        relu_mask = z.iter().map(|a| *a > 0.0).collect();
        z.iter_mut().for_each(|a| *a = a.max(0.0));
    }
    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0; c];
            accumulate_column_sums(&z, c, &mut mean);
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0.0; c];
            for row in z.chunks_exact(c) {
                for ((s, a), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (a - m) * (a - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= rows as f64);
            (mean, var)
        }
        Mode::Eval => (
            params.running[slots.running_mean.clone()].to_vec(),
            params.running[slots.running_var.clone()].to_vec(),
        ),
    };
    let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + cfg.bn_eps).sqrt()).collect();
    let gain = &v[slots.gain.clone()];
    let offset = &v[slots.offset.clone()];
    let mut xhat = z;
    let mut out = vec![0.0; xhat.len()];
    for (xr, or) in xhat.chunks_exact_mut(c).zip(out.chunks_exact_mut(c)) {
        for k in 0..c {
            let h = (xr[k] - mean[k]) * inv_std[k];
            xr[k] = h;
            let y = gain[k] * h + offset[k];
            or[k] = match cfg.bn_order {
                BnOrder::ConvBnRelu => y.max(0.0),
                BnOrder::ConvReluBn => y,
            };
        }
    }
    ConvTrace {
        out,
        xhat,
        mean,
        var,
        inv_std,
        relu_mask,
    }
}

fn dense_forward<R: Rng + ?Sized>(
    params: &SppNetParams,
    slots: &DenseSlots,
    x: &[f64],
    batch: usize,
    dropout_p: Option<f64>,
    rng: &mut R,
) -> DenseTrace {
    let v = &params.values;
    let mut act = linear(
        x,
        batch,
        slots.inp,
        &v[slots.weight.clone()],
        &v[slots.bias.clone()],
    );
    act.iter_mut().for_each(|a| *a = a.max(0.0));
    let dropout = match dropout_p {
        Some(p) if p > 0.0 => {
            let keep = 1.0 / (1.0 - p);
            (0..act.len())
                .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                .collect()
        }
        _ => Vec::new(),
    };
    DenseTrace { act, dropout }
}

/// Max-pools branch output `a` (`batch * cells x c`) into `pooled` at level `s`.
fn pool_level(
    cfg: &SppNetConfig,
    s: usize,
    a: &[f64],
    batch: usize,
    pooled: &mut [f64],
    argmax: &mut [u32],
) {
    let c = cfg.branch_output(s);
    let cells = cfg.cells();
    let regions = SppNetConfig::regions_per_side(s);
    let (h, w) = (cfg.d1 / regions, cfg.d2 / regions);
    let plen = cfg.pooled_len();
    let base = cfg.level_offset(s);
    for b in 0..batch {
        let ex = &a[b * cells * c..(b + 1) * cells * c];
        for ri in 0..regions {
            for rj in 0..regions {
                let at = b * plen + base + (ri * regions + rj) * c;
                let best = &mut pooled[at..at + c];
                let arg = &mut argmax[at..at + c];
                let mut first = true;
                // increasing linear index; strict comparison keeps the lowest index on ties
                for i in ri * h..(ri + 1) * h {
                    for j in rj * w..(rj + 1) * w {
                        let cell = i * cfg.d2 + j;
                        let row = &ex[cell * c..(cell + 1) * c];
                        if first {
                            best.copy_from_slice(row);
                            arg.iter_mut().for_each(|x| *x = cell as u32);
                            first = false;
                            continue;
                        }
                        for k in 0..c {
                            if row[k] > best[k] {
                                best[k] = row[k];
                                arg[k] = cell as u32;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Runs the network on a batch of grids.
///
/// Train mode normalizes with batch statistics and samples dropout masks from
/// `rng`; eval mode uses running statistics and never touches `rng`.
pub fn forward_batch<R: Rng + ?Sized>(
    params: &SppNetParams,
    grids: &[&FeatureGrid],
    mode: Mode,
    rng: &mut R,
) -> Result<BatchOutput> {
    let cfg = &params.config;
    if grids.is_empty() {
        return Err(Error::ShapeError("empty batch".into()));
    }
    for g in grids {
        check_grid(cfg, g)?;
    }
    let batch = grids.len();
    let cells = cfg.cells();
    let rows = batch * cells;
    let mut input = Vec::with_capacity(rows * cfg.input_channels);
    for g in grids {
        input.extend_from_slice(&g.data);
    }

    let plen = cfg.pooled_len();
    let mut pooled = vec![0.0; batch * plen];
    let mut argmax = vec![0u32; batch * plen];
    let mut branches = Vec::with_capacity(3);
    for s in 0..3 {
        if !cfg.uses_level(s) {
            branches.push(None);
            continue;
        }
        let mut layers: Vec<ConvTrace> = Vec::with_capacity(4);
        for slots in &params.layout.convs[s] {
            let x = layers.last().map_or(input.as_slice(), |t| t.out.as_slice());
            let t = conv_forward(params, slots, x, rows, mode);
            layers.push(t);
        }
        let last = &layers.last().expect("four conv layers").out;
        pool_level(cfg, s, last, batch, &mut pooled, &mut argmax);
        branches.push(Some(layers));
    }

    let p = (mode == Mode::Train).then_some(cfg.dropout_p);
    let l = &params.layout;
    let fc6 = dense_forward(params, &l.fc6, &pooled, batch, p, rng);
    let h6 = fc6.output();
    let fc7 = dense_forward(params, &l.fc7, &h6, batch, p, rng);
    let h7 = fc7.output();
    let v = &params.values;
    let relu = |mut x: Vec<f64>| {
        x.iter_mut().for_each(|a| *a = a.max(0.0));
        x
    };
    let head_t = relu(linear(
        &h7,
        batch,
        l.head_t.inp,
        &v[l.head_t.weight.clone()],
        &v[l.head_t.bias.clone()],
    ));
    let head_q = relu(linear(
        &h7,
        batch,
        l.head_q.inp,
        &v[l.head_q.weight.clone()],
        &v[l.head_q.bias.clone()],
    ));
    let t = linear(
        &head_t,
        batch,
        l.out_t.inp,
        &v[l.out_t.weight.clone()],
        &v[l.out_t.bias.clone()],
    );
    let q = linear(
        &head_q,
        batch,
        l.out_q.inp,
        &v[l.out_q.weight.clone()],
        &v[l.out_q.bias.clone()],
    );

    Ok(BatchOutput {
        translations: t.chunks_exact(3).map(|r| [r[0], r[1], r[2]]).collect(),
        rotations: q
            .chunks_exact(4)
            .map(|r| [r[0], r[1], r[2], r[3]])
            .collect(),
        trace: ForwardTrace {
            mode,
            batch,
            cells,
            version: params.version,
            input,
            branches,
            pooled,
            argmax,
            fc6,
            fc7,
            head_t,
            head_q,
        },
    })
}

/// Single-example forward; the quaternion is returned unnormalized.
pub fn forward<R: Rng + ?Sized>(
    params: &SppNetParams,
    grid: &FeatureGrid,
    mode: Mode,
    rng: &mut R,
) -> Result<(Vec3, Quaternion, ForwardTrace)> {
    let out = forward_batch(params, &[grid], mode, rng)?;
    let t = out.translations[0];
    Ok((
        Vec3::new(t[0], t[1], t[2]),
        Quaternion::from_array(out.rotations[0]),
        out.trace,
    ))
}

fn dense_backward(
    params: &SppNetParams,
    slots: &DenseSlots,
    x: &[f64],
    batch: usize,
    dz: &[f64],
    grads: &mut Gradients,
) -> Vec<f64> {
    accumulate_weight_grad(
        dz,
        x,
        batch,
        slots.out,
        slots.inp,
        &mut grads.values[slots.weight.clone()],
    );
    accumulate_column_sums(dz, slots.out, &mut grads.values[slots.bias.clone()]);
    input_grad(
        dz,
        &params.values[slots.weight.clone()],
        batch,
        slots.out,
        slots.inp,
    )
}

/// Gradient through ReLU and dropout of a hidden fc layer.
fn through_hidden(trace: &DenseTrace, mut d: Vec<f64>) -> Vec<f64> {
    if !trace.dropout.is_empty() {
        d.iter_mut().zip(&trace.dropout).for_each(|(g, m)| *g *= m);
    }
    d.iter_mut().zip(&trace.act).for_each(|(g, a)| {
        if *a <= 0.0 {
            *g = 0.0
        }
    });
    d
}

fn conv_backward(
    params: &SppNetParams,
    slots: &ConvSlots,
    t: &ConvTrace,
    x: &[f64],
    rows: usize,
    mode: Mode,
    mut d_out: Vec<f64>,
    grads: &mut Gradients,
    need_input_grad: bool,
) -> Option<Vec<f64>> {
    let c = slots.out;
    let order = params.config.bn_order;
    if order == BnOrder::ConvBnRelu {
        d_out.iter_mut().zip(&t.out).for_each(|(g, a)| {
            if *a <= 0.0 {
                *g = 0.0
            }
        });
    }
    // d_out now holds the gradient w.r.t. the batch-norm output
    let gain = &params.values[slots.gain.clone()];
    let mut dgain = vec![0.0; c];
    let mut doffset = vec![0.0; c];
    for (dr, hr) in d_out.chunks_exact(c).zip(t.xhat.chunks_exact(c)) {
        for k in 0..c {
            dgain[k] += dr[k] * hr[k];
            doffset[k] += dr[k];
        }
    }
    let mut dz = d_out;
    match mode {
        Mode::Train => {
            let n = rows as f64;
            // dxhat = dy * gain; mean(dxhat) = gain * doffset / n; mean(dxhat * xhat) = gain * dgain / n
            for (dr, hr) in dz.chunks_exact_mut(c).zip(t.xhat.chunks_exact(c)) {
                for k in 0..c {
                    let g = gain[k];
                    dr[k] = t.inv_std[k] * g * (dr[k] - doffset[k] / n - hr[k] * dgain[k] / n);
                }
            }
        }
        Mode::Eval => {
            for dr in dz.chunks_exact_mut(c) {
                for k in 0..c {
                    dr[k] *= gain[k] * t.inv_std[k];
                }
            }
        }
    }
    if order == BnOrder::ConvReluBn {
        dz.iter_mut().zip(&t.relu_mask).for_each(|(g, on)| {
            if !on {
                *g = 0.0
            }
        });
    }
    let g = &mut grads.values;
    g[slots.gain.clone()]
        .iter_mut()
        .zip(&dgain)
        .for_each(|(a, b)| *a += b);
    g[slots.offset.clone()]
        .iter_mut()
        .zip(&doffset)
        .for_each(|(a, b)| *a += b);
    accumulate_column_sums(&dz, c, &mut g[slots.bias.clone()]);
    accumulate_weight_grad(&dz, x, rows, c, slots.inp, &mut g[slots.weight.clone()]);
    need_input_grad.then(|| {
        input_grad(
            &dz,
            &params.values[slots.weight.clone()],
            rows,
            c,
            slots.inp,
        )
    })
}

/// Exact reverse-mode gradients of `Σ_b <grad_t[b], T_b> + <grad_q[b], q_b>`.
pub fn backward(
    params: &SppNetParams,
    trace: &ForwardTrace,
    grad_t: &[[f64; 3]],
    grad_q: &[[f64; 4]],
) -> Result<Gradients> {
    if trace.version != params.version {
        return Err(Error::TraceMismatch {
            trace: trace.version,
            params: params.version,
        });
    }
    let batch = trace.batch;
    if grad_t.len() != batch || grad_q.len() != batch {
        return Err(Error::ShapeError(format!(
            "{} / {} upstream gradients for a batch of {batch}",
            grad_t.len(),
            grad_q.len()
        )));
    }
    let cfg = &params.config;
    let l = &params.layout;
    let mut grads = Gradients::zeros(l);

    let dt: Vec<f64> = grad_t.iter().flatten().copied().collect();
    let dq: Vec<f64> = grad_q.iter().flatten().copied().collect();
    let relu_grad = |mut d: Vec<f64>, act: &[f64]| {
        d.iter_mut().zip(act).for_each(|(g, a)| {
            if *a <= 0.0 {
                *g = 0.0
            }
        });
        d
    };
    let dht = relu_grad(
        dense_backward(params, &l.out_t, &trace.head_t, batch, &dt, &mut grads),
        &trace.head_t,
    );
    let dhq = relu_grad(
        dense_backward(params, &l.out_q, &trace.head_q, batch, &dq, &mut grads),
        &trace.head_q,
    );
    let h7 = trace.fc7.output();
    let mut dh7 = dense_backward(params, &l.head_t, &h7, batch, &dht, &mut grads);
    let d_from_q = dense_backward(params, &l.head_q, &h7, batch, &dhq, &mut grads);
    dh7.iter_mut().zip(&d_from_q).for_each(|(a, b)| *a += b);

    let dz7 = through_hidden(&trace.fc7, dh7);
    let h6 = trace.fc6.output();
    let dh6 = dense_backward(params, &l.fc7, &h6, batch, &dz7, &mut grads);
    let dz6 = through_hidden(&trace.fc6, dh6);
    let dpooled = dense_backward(params, &l.fc6, &trace.pooled, batch, &dz6, &mut grads);

    let cells = trace.cells;
    let rows = batch * cells;
    let plen = cfg.pooled_len();
    for s in 0..3 {
        let Some(layers) = &trace.branches[s] else {
            continue;
        };
        let c = cfg.branch_output(s);
        let units = 4usize.pow(s as u32) * c;
        let base = cfg.level_offset(s);
        let mut d = vec![0.0; rows * c];
        for b in 0..batch {
            for u in 0..units {
                let at = b * plen + base + u;
                let cell = trace.argmax[at] as usize;
                d[(b * cells + cell) * c + u % c] += dpooled[at];
            }
        }
        for li in (0..layers.len()).rev() {
            let x = if li == 0 {
                &trace.input
            } else {
                &layers[li - 1].out
            };
            let next = conv_backward(
                params,
                &l.convs[s][li],
                &layers[li],
                x,
                rows,
                trace.mode,
                d,
                &mut grads,
                li > 0,
            );
            match next {
                Some(n) => d = n,
                None => break,
            }
        }
    }
    Ok(grads)
}

/// Per-cell number of pooling units won by each cell of example `b`,
/// summing to the total number of pooling units.
pub fn contribution_counts(trace: &ForwardTrace, b: usize) -> Vec<u32> {
    count_winners(trace, b, false)
}

/// Like [`contribution_counts`] but ignoring units whose winning value is
/// not strictly positive.
pub fn positive_contribution_counts(trace: &ForwardTrace, b: usize) -> Vec<u32> {
    count_winners(trace, b, true)
}

fn count_winners(trace: &ForwardTrace, b: usize, positive_only: bool) -> Vec<u32> {
    let n = trace.pooled_len();
    let mut counts = vec![0u32; trace.cells];
    let vals = &trace.pooled[b * n..(b + 1) * n];
    let args = &trace.argmax[b * n..(b + 1) * n];
    for (v, a) in vals.iter().zip(args) {
        if !positive_only || *v > 0.0 {
            counts[*a as usize] += 1;
        }
    }
    counts
}

impl SppNetParams {
    /// Folds the batch statistics of a train-mode trace into the running averages.
    pub fn update_running_stats(&mut self, trace: &ForwardTrace) {
        if trace.mode != Mode::Train {
            return;
        }
        let m = self.config.bn_momentum;
        let rows = (trace.batch * trace.cells) as f64;
        let unbias = if rows > 1.0 { rows / (rows - 1.0) } else { 1.0 };
        for (s, branch) in trace.branches.iter().enumerate() {
            let Some(layers) = branch else { continue };
            for (slots, t) in self.layout.convs[s].iter().zip(layers) {
                let rm = &mut self.running[slots.running_mean.clone()];
                rm.iter_mut()
                    .zip(&t.mean)
                    .for_each(|(r, b)| *r = m * *r + (1.0 - m) * b);
                let rv = &mut self.running[slots.running_var.clone()];
                rv.iter_mut()
                    .zip(&t.var)
                    .for_each(|(r, b)| *r = m * *r + (1.0 - m) * b * unbias);
            }
        }
    }
}
