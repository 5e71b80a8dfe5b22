//! Pose loss with learned uncertainty weights, Adam, and the training loop.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{stream_rng, PoseSample};
use crate::error::{Error, Result};
use crate::evaluation::{lower_median, predict_poses};
use crate::geometry::{quat_angular_error_deg, Quaternion, Vec3};
use crate::grid::{bin_features, FeatureGrid, GridSpec, PositionEncoding, GEOMETRY_CHANNELS};
use crate::net::{
    backward, forward_batch, init_params, quantize, Mode, SppNetConfig, SppNetParams, TrainingState,
};

/// Norm used for the two residual terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualNorm {
    #[default]
    L2,
    L1,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseLoss {
    pub loss: f64,
    pub grad_q: [f64; 4],
    pub grad_t: [f64; 3],
    pub grad_log_sigma_q_sq: f64,
    pub grad_log_sigma_t_sq: f64,
    pub q_residual: f64,
    pub t_residual: f64,
}

/// Norm of `r` and its gradient with respect to `r`.
fn norm_and_grad<const N: usize>(r: [f64; N], norm: ResidualNorm) -> (f64, [f64; N]) {
    match norm {
        ResidualNorm::L2 => {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                (0.0, [0.0; N])
            } else {
                (n, r.map(|v| v / n))
            }
        }
        ResidualNorm::L1 => (
            r.iter().map(|v| v.abs()).sum(),
            r.map(|v| v.signum() * (v != 0.0) as u8 as f64),
        ),
    }
}

/// `e^{-lq} ||q_gt - q/||q|| || + e^{-lt} ||T_gt - T|| + lq + lt` and its gradients.
///
/// `q_gt` is first flipped onto the hemisphere of `q_pred`.
pub fn pose_loss(
    q_pred: [f64; 4],
    t_pred: [f64; 3],
    q_gt: &Quaternion,
    t_gt: &Vec3,
    log_sigma_q_sq: f64,
    log_sigma_t_sq: f64,
    norm: ResidualNorm,
) -> Result<PoseLoss> {
    let qn = q_pred.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(qn > 0.0) || !qn.is_finite() {
        return Err(Error::DegenerateQuaternion);
    }
    let qhat = q_pred.map(|v| v / qn);
    let mut gt = q_gt.to_array();
    if gt.iter().zip(&q_pred).map(|(a, b)| a * b).sum::<f64>() < 0.0 {
        gt = gt.map(|v| -v);
    }
    let rq: [f64; 4] = std::array::from_fn(|k| gt[k] - qhat[k]);
    let rt: [f64; 3] = std::array::from_fn(|k| t_gt[k] - t_pred[k]);
    let (eq, gq) = norm_and_grad(rq, norm);
    let (et, gt_) = norm_and_grad(rt, norm);
    let wq = (-log_sigma_q_sq).exp();
    let wt = (-log_sigma_t_sq).exp();

    // d eq / d qhat = -gq; d qhat / d q = (I - qhat qhat^T) / ||q||
    let dqhat = gq.map(|v| -wq * v);
    let proj: f64 = dqhat.iter().zip(&qhat).map(|(a, b)| a * b).sum();
    let grad_q = std::array::from_fn(|k| (dqhat[k] - qhat[k] * proj) / qn);
    Ok(PoseLoss {
        loss: wq * eq + wt * et + log_sigma_q_sq + log_sigma_t_sq,
        grad_q,
        grad_t: gt_.map(|v| -wt * v),
        grad_log_sigma_q_sq: 1.0 - wq * eq,
        grad_log_sigma_t_sq: 1.0 - wt * et,
        q_residual: eq,
        t_residual: et,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub residual_norm: ResidualNorm,
    pub position_encoding: PositionEncoding,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 300,
            epochs: 400,
            lr0: 1e-3,
            lr_decay_factor: 10.0,
            lr_decay_every: 100,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            residual_norm: ResidualNorm::L2,
            position_encoding: PositionEncoding::Literal,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size > 0
            && self.lr0 > 0.0
            && self.lr_decay_factor > 0.0
            && self.lr_decay_every > 0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeError(format!(
                "invalid training configuration {self:?}"
            )))
        }
    }

    /// Step-decayed learning rate for a zero-based epoch.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let k = (epoch / self.lr_decay_every) as i32;
        self.lr0 / self.lr_decay_factor.powi(k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// Bias-corrected Adam with decoupled weight decay on conv and fc weights.
pub fn adam_step(
    params: &mut SppNetParams,
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
    decay_mask: &[bool],
) -> Result<()> {
    let n = params.values.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n || decay_mask.len() != n {
        return Err(Error::ShapeError(
            "optimizer buffers do not match the parameters".into(),
        ));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        let name = params
            .layout
            .tensors
            .iter()
            .find(|t| t.range().contains(&i))
            .map_or("?", |t| t.name.as_str());
        return Err(Error::NumericalError(format!(
            "non-finite gradient in {name} at step {}",
            state.step + 1
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..n {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        let theta = params.values[i];
        let decay = if decay_mask[i] {
            cfg.weight_decay * theta
        } else {
            0.0
        };
        params.values[i] = theta - lr * (mhat / (vhat.sqrt() + cfg.adam_eps) + decay);
    }
    params.touch();
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
    pub median_pos_err_m: Option<f64>,
    pub median_ang_err_deg: Option<f64>,
}

pub const METRICS_HEADER: &str =
    "epoch,lr,train_loss,eval_loss,median_pos_err_m,median_ang_err_deg";

pub fn write_metrics_csv<W: Write>(mut w: W, metrics: &[EpochMetrics]) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for m in metrics {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            m.epoch,
            m.lr,
            m.train_loss,
            opt(m.eval_loss),
            opt(m.median_pos_err_m),
            opt(m.median_ang_err_deg)
        )?;
    }
    Ok(())
}

/// Grid layout matching a network configuration.
pub fn grid_spec(net: &SppNetConfig, encoding: PositionEncoding) -> GridSpec {
    GridSpec {
        d1: net.d1,
        d2: net.d2,
        encoding,
    }
}

pub fn descriptor_dim(net: &SppNetConfig) -> Result<usize> {
    net.input_channels
        .checked_sub(GEOMETRY_CHANNELS)
        .ok_or_else(|| {
            Error::ShapeError(format!(
                "{} input channels cannot hold the {GEOMETRY_CHANNELS} geometry channels",
                net.input_channels
            ))
        })
}

/// Splits shuffled indices into batches, merging a trailing singleton.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().expect("at least one batch") = &order[start..];
    }
    out
}

const INIT_STREAM: u64 = 0;

fn epoch_stream(epoch: usize) -> u64 {
    2 * epoch as u64 + 1
}

fn eval_stream(epoch: usize) -> u64 {
    2 * epoch as u64 + 2
}

/// Resumable training state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub params: SppNetParams,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub metrics: Vec<EpochMetrics>,
    decay_mask: Vec<bool>,
}

impl Trainer {
    pub fn new(net: &SppNetConfig, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        descriptor_dim(net)?;
        let params = init_params(net, &mut stream_rng(config.seed, INIT_STREAM))?;
        Ok(Self::from_params(params, config, None))
    }

    pub fn from_params(
        params: SppNetParams,
        config: &TrainConfig,
        state: Option<TrainingState>,
    ) -> Self {
        let n = params.values.len();
        let (adam, epoch) = match state {
            Some(s) => (
                AdamState {
                    m: s.adam_m,
                    v: s.adam_v,
                    step: s.adam_step,
                },
                s.epoch as usize,
            ),
            None => (AdamState::new(n), 0),
        };
        Trainer {
            config: config.clone(),
            decay_mask: params.layout.decay_mask(),
            params,
            adam,
            epoch,
            metrics: Vec::new(),
        }
    }

    /// Rounds parameters and optimizer state to checkpoint precision so a
    /// run resumed from the checkpoint continues identically.
    pub fn checkpoint_state(&mut self) -> TrainingState {
        quantize(&mut self.params.values);
        quantize(&mut self.params.running);
        quantize(&mut self.adam.m);
        quantize(&mut self.adam.v);
        self.params.touch();
        TrainingState {
            epoch: self.epoch as u64,
            adam_step: self.adam.step,
            adam_m: self.adam.m.clone(),
            adam_v: self.adam.v.clone(),
        }
    }

    fn spec(&self) -> GridSpec {
        grid_spec(&self.params.config, self.config.position_encoding)
    }

    /// One pass over `data` followed by optional evaluation on `eval`.
    pub fn run_epoch(
        &mut self,
        data: &[PoseSample],
        eval: Option<&[PoseSample]>,
    ) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(Error::InsufficientData("empty training set".into()));
        }
        let epoch = self.epoch;
        let lr = self.config.learning_rate(epoch);
        let spec = self.spec();
        let dim = descriptor_dim(&self.params.config)?;
        let mut rng = stream_rng(self.config.seed, epoch_stream(epoch));
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for batch in batches(&order, self.config.batch_size) {
            let grids = batch
                .iter()
                .map(|&i| {
                    let s = &data[i];
                    bin_features(&s.keypoints, s.width, s.height, &spec, dim, &mut rng)
                })
                .collect::<Result<Vec<FeatureGrid>>>()?;
            let refs: Vec<&FeatureGrid> = grids.iter().collect();
            let out = forward_batch(&self.params, &refs, Mode::Train, &mut rng)?;

            let b = batch.len() as f64;
            let (lq, lt) = (self.params.log_sigma_q_sq(), self.params.log_sigma_t_sq());
            let mut grad_t = Vec::with_capacity(batch.len());
            let mut grad_q = Vec::with_capacity(batch.len());
            let (mut g_lq, mut g_lt) = (0.0, 0.0);
            for (k, &i) in batch.iter().enumerate() {
                let pose = &data[i].pose;
                let l = pose_loss(
                    out.rotations[k],
                    out.translations[k],
                    &pose.rotation,
                    &pose.center,
                    lq,
                    lt,
                    self.config.residual_norm,
                )?;
                loss_sum += l.loss;
                grad_t.push(l.grad_t.map(|g| g / b));
                grad_q.push(l.grad_q.map(|g| g / b));
                g_lq += l.grad_log_sigma_q_sq / b;
                g_lt += l.grad_log_sigma_t_sq / b;
            }
            let mut grads = backward(&self.params, &out.trace, &grad_t, &grad_q)?;
            let (iq, it) = self.params.log_sigma_indices();
            grads.values[iq] += g_lq;
            grads.values[it] += g_lt;
            adam_step(
                &mut self.params,
                &grads.values,
                &mut self.adam,
                lr,
                &self.config,
                &self.decay_mask,
            )?;
            self.params.update_running_stats(&out.trace);
        }

        let mut m = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / data.len() as f64,
            eval_loss: None,
            median_pos_err_m: None,
            median_ang_err_deg: None,
        };
        if let Some(eval) = eval.filter(|e| !e.is_empty()) {
            let (loss, pos, ang) = self.eval_metrics(eval, eval_stream(epoch))?;
            m.eval_loss = Some(loss);
            m.median_pos_err_m = Some(pos);
            m.median_ang_err_deg = Some(ang);
        }
        self.epoch += 1;
        self.metrics.push(m.clone());
        Ok(m)
    }

    /// Mean eval-mode loss and median errors on a held-out set.
    pub fn eval_metrics(&self, eval: &[PoseSample], stream: u64) -> Result<(f64, f64, f64)> {
        let spec = self.spec();
        let preds = predict_poses(
            &self.params,
            eval,
            &spec,
            1,
            self.config.seed ^ stream.rotate_left(32),
        )?;
        let (lq, lt) = (self.params.log_sigma_q_sq(), self.params.log_sigma_t_sq());
        let mut loss = 0.0;
        let mut pos = Vec::with_capacity(eval.len());
        let mut ang = Vec::with_capacity(eval.len());
        for (s, p) in eval.iter().zip(&preds) {
            let l = pose_loss(
                p.rotation.to_array(),
                p.translation.into(),
                &s.pose.rotation,
                &s.pose.center,
                lq,
                lt,
                self.config.residual_norm,
            )?;
            loss += l.loss;
            pos.push((p.translation - s.pose.center).norm());
            ang.push(quat_angular_error_deg(&p.rotation, &s.pose.rotation));
        }
        Ok((
            loss / eval.len() as f64,
            lower_median(&pos),
            lower_median(&ang),
        ))
    }

    /// Runs epochs until `config.epochs`, calling `after_epoch` after each.
    pub fn train<F>(
        &mut self,
        data: &[PoseSample],
        eval: Option<&[PoseSample]>,
        mut after_epoch: F,
    ) -> Result<()>
    where
        F: FnMut(&mut Trainer) -> Result<()>,
    {
        while self.epoch < self.config.epochs {
            self.run_epoch(data, eval)?;
            after_epoch(self)?;
        }
        Ok(())
    }
}

/// Trains a freshly initialized network for `config.epochs` epochs.
pub fn train(
    data: &[PoseSample],
    eval: Option<&[PoseSample]>,
    config: &TrainConfig,
    net: &SppNetConfig,
) -> Result<Trainer> {
    if data.is_empty() {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    let mut t = Trainer::new(net, config)?;
    t.train(data, eval, |_| Ok(()))?;
    Ok(t)
}
