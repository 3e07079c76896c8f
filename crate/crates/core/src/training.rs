//! Loss, optimizer, learning-rate schedule and the truncated-BPTT training
//! loop for the joint predictor/corrector.
//!
//! The objective over a batch of `S` segments with `N` predicted frames and
//! `H` warm-up frames is
//! `(1/SN) ΣΣ ‖ẑ − z_D‖₂ + (λ/SH) ΣΣ_{k≤H} ‖y − E(ẑ)‖₂` (un-squared norms).

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assimilation::{
    correct_tape, estimate_measurement_tape, CAdjoint, CorrectorParams, CorrectorVars, MeasurementNetParams,
};
use crate::autodiff::{finite_difference_check, FdReport, Tape, Tensor, Var};
use crate::dataset::{apply_measurement, observe, Equation, MeasurementOperator, ObservationSet, Trajectory};
use crate::error::{Error, Result};
use crate::operator::{
    fno_block, predictor_forward, read_model, write_model, BlockVars, FnoConfig, PredictorParams, PredictorVars,
};

/// Predictor plus corrector.
#[derive(Clone, Debug, PartialEq)]
pub struct NodaParams {
    pub predictor: PredictorParams,
    pub corrector: CorrectorParams,
}

/// Tape handles for [`NodaParams`].
#[derive(Clone, Debug)]
pub struct NodaVars {
    pub predictor: PredictorVars,
    pub corrector: CorrectorVars,
}

impl NodaVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.predictor.vars();
        v.extend(self.corrector.vars());
        v
    }
}

impl NodaParams {
    pub fn init(fno: &FnoConfig, op: &MeasurementOperator, hidden: usize, learnable_c: bool, seed: u64) -> Result<Self> {
        let predictor = PredictorParams::init(fno, seed)?;
        let mut corrector = CorrectorParams::init(op.d(), op.p(), hidden, learnable_c, seed.wrapping_add(1));
        corrector.attach_operator(op)?;
        Ok(NodaParams { predictor, corrector })
    }

    pub fn named(&self) -> Vec<(String, &Arc<Tensor>)> {
        let mut v = self.predictor.named();
        v.extend(self.corrector.named());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Arc<Tensor>> {
        let mut v = self.predictor.tensors_mut();
        v.extend(self.corrector.tensors_mut());
        v
    }

    pub fn bind(&self, tape: &mut Tape, learnable: bool) -> NodaVars {
        NodaVars {
            predictor: self.predictor.bind(tape, learnable),
            corrector: self.corrector.bind(tape, learnable),
        }
    }

    /// Rebuild tape handles from leaves created in [`NodaParams::named`]
    /// order; a fixed `Ĉ*` gets its own constant leaf.
    pub fn vars_from(&self, tape: &mut Tape, leaves: &[Var]) -> Result<NodaVars> {
        let want = self.named().len();
        if leaves.len() != want {
            return Err(Error::shape("vars_from", format!("{} leaves for {want} parameters", leaves.len())));
        }
        let cfg = self.predictor.config();
        let nb = cfg.blocks;
        let p = &leaves[..4 + 3 * nb];
        let predictor = PredictorVars {
            lift: (p[0], p[1]),
            blocks: (0..nb)
                .map(|i| BlockVars {
                    w: (p[2 + 3 * i], p[3 + 3 * i]),
                    conv: p[4 + 3 * i],
                })
                .collect(),
            proj: (p[2 + 3 * nb], p[3 + 3 * nb]),
            config: cfg,
        };
        let mut corrector = self.corrector.bind(tape, false);
        let c = &leaves[4 + 3 * nb..];
        corrector.w1 = c[0];
        corrector.b1 = c[1];
        corrector.w2 = c[2];
        corrector.b2 = c[3];
        corrector.w_z = c[4];
        corrector.w_y = c[5];
        corrector.b = c[6];
        if let CAdjoint::Learnable(_) = self.corrector.gain.c_adj {
            corrector.c_adj = Some(c[7]);
        }
        Ok(NodaVars { predictor, corrector })
    }

    /// Blob list as stored in a model file.
    pub fn blobs(&self) -> Vec<(String, Tensor)> {
        self.named().into_iter().map(|(n, t)| (n, (**t).clone())).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let blobs = self.blobs();
        write_model(path, blobs.iter().map(|(n, t)| (n.as_str(), t)))
    }
}

/// Load a model file; the corrector is absent for predictor-only files.
/// Optimizer blobs, if present, are ignored.
pub fn load_model(path: impl AsRef<Path>) -> Result<(PredictorParams, Option<CorrectorParams>)> {
    let blobs: BTreeMap<String, Tensor> = read_model(path)?.into_iter().collect();
    Ok((PredictorParams::from_named(&blobs)?, CorrectorParams::from_named(&blobs)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lambda: f64,
    /// Warm-up frames corrected at the start of every training segment.
    pub t_h_train: usize,
    pub bptt_window: usize,
    pub seed: u64,
    pub width: usize,
    pub modes: usize,
    pub hidden: usize,
    pub coords: bool,
    /// Frames per training segment including the initial state; 0 = whole trajectory.
    pub segment_len: usize,
    pub snr_db: f64,
    /// `identity` or `random`.
    pub measurement: String,
    pub measurement_seed: u64,
    pub learnable_c: bool,
    pub clip: f64,
    /// `random`, or `operator` to start E as an exact copy of the known Ĉ
    /// (requires `hidden = 2d`).
    pub e_init: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            lr_decay: 0.5,
            lr_decay_every: 50,
            epochs: 300,
            batch: 32,
            lambda: 0.5,
            t_h_train: 500,
            bptt_window: 10,
            seed: 0,
            width: 64,
            modes: 20,
            hidden: 256,
            coords: true,
            segment_len: 0,
            snr_db: 30.0,
            measurement: "identity".into(),
            measurement_seed: 0,
            learnable_c: false,
            clip: 1.0,
            e_init: "random".into(),
        }
    }
}

impl TrainConfig {
    /// Reference hyperparameters for an equation.
    pub fn reference(equation: Equation) -> Self {
        TrainConfig {
            t_h_train: match equation {
                Equation::Ns => 300,
                Equation::Ks | Equation::Kdv => 500,
            },
            ..Self::default()
        }
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("lr_decay", self.lr_decay),
            ("clip", self.clip),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("{name} must be positive, got {v}")));
        }
        if self.lr_decay_every == 0 || self.batch == 0 || self.bptt_window == 0 || self.width == 0 || self.modes == 0 || self.hidden == 0 {
            return Err(Error::Config("lr_decay_every, batch, bptt_window, width, modes and hidden must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.snr_db.is_nan() {
            return Err(Error::Config("snr_db must be a number or inf".into()));
        }
        if self.measurement != "identity" && self.measurement != "random" {
            return Err(Error::Config(format!("measurement must be identity or random, got {}", self.measurement)));
        }
        if self.e_init != "random" && self.e_init != "operator" {
            return Err(Error::Config(format!("e_init must be random or operator, got {}", self.e_init)));
        }
        Ok(())
    }

    /// Parse JSON (`{…}`) or `key = value` lines (`#` comments allowed).
    pub fn parse(text: &str) -> Result<Self> {
        let trimmed = text.trim_start();
        let cfg: TrainConfig = if trimmed.starts_with('{') {
            serde_json::from_str(text)?
        } else {
            let mut map = serde_json::Map::new();
            for (i, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
                let v = v.trim();
                let value = match v {
                    "inf" | "+inf" => serde_json::Value::from(f64::MAX),
                    _ => serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.to_string())),
                };
                map.insert(k.trim().to_string(), value);
            }
            let mut cfg: TrainConfig = serde_json::from_value(serde_json::Value::Object(map))?;
            if cfg.snr_db == f64::MAX {
                cfg.snr_db = f64::INFINITY;
            }
            cfg
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn fno(&self, ndims: usize) -> FnoConfig {
        FnoConfig {
            ndims,
            width: self.width,
            modes: self.modes,
            blocks: 4,
            coords: self.coords,
        }
    }

    pub fn operator(&self, d: usize) -> MeasurementOperator {
        match self.measurement.as_str() {
            "random" => MeasurementOperator::dense_random(d, d, self.measurement_seed),
            _ => MeasurementOperator::identity(d),
        }
    }
}

/// One segment's contribution to the objective, on plain data.
#[derive(Clone, Debug)]
pub struct LossSample<'a> {
    /// `ẑ_{t_k}` for `k = 1..=N`.
    pub estimates: &'a [Vec<f64>],
    /// `z_D(t_k)` for `k = 1..=N`.
    pub truth: &'a [Vec<f64>],
    /// `E(ẑ_{t_k})` for `k = 1..=H`.
    pub measured: &'a [Vec<f64>],
    /// `y(t_k)` for `k = 1..=H`.
    pub y: &'a [Vec<f64>],
}

fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// The training objective over a batch of segments.
pub fn loss_j(samples: &[LossSample], lambda: f64) -> Result<f64> {
    let s = samples.len() as f64;
    let mut total = 0.0;
    for sample in samples {
        let n = sample.estimates.len();
        if sample.truth.len() != n || sample.measured.len() != sample.y.len() {
            return Err(Error::shape("loss_j", "estimates/truth or E(ẑ)/y lengths differ"));
        }
        let h = sample.y.len();
        if h == 0 && lambda > 0.0 {
            return Err(Error::InvalidArgument("measurement term needs at least one warm-up frame".into()));
        }
        let rec: f64 = sample.estimates.iter().zip(sample.truth).map(|(a, b)| l2_diff(a, b)).sum();
        total += rec / (s * n as f64);
        if lambda > 0.0 {
            let meas: f64 = sample.measured.iter().zip(sample.y).map(|(a, b)| l2_diff(a, b)).sum();
            total += lambda * meas / (s * h as f64);
        }
    }
    Ok(total)
}

/// Adam moments in [`NodaParams::named`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl Adam {
    pub fn new(shapes: &[&[usize]]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
        }
    }

    pub fn for_params(params: &NodaParams) -> Self {
        let named = params.named();
        let shapes: Vec<&[usize]> = named.iter().map(|(_, t)| t.shape()).collect();
        Adam::new(&shapes)
    }
}

/// One Adam update with bias correction.
pub fn adam_step(params: &mut [&mut Arc<Tensor>], grads: &[Tensor], state: &mut Adam, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} params, {} grads, {} moment slots", params.len(), grads.len(), state.m.len()),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let pd = Arc::make_mut(p).data_mut();
        for j in 0..pd.len() {
            let gj = g.data()[j];
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            pd[j] -= lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Rescale `grads` so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::norm_sqr).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// A training window of a trajectory with its measurements.
#[derive(Clone, Debug)]
pub struct Segment<'a> {
    /// `z_D(t_0..=t_N)`.
    pub truth: &'a [Vec<f64>],
    /// `y(t_1..=t_H)`.
    pub y: Vec<&'a [f64]>,
    pub spatial: &'a [usize],
}

/// Reconstruction and measurement coefficients `1/(S N)` and `λ/(S H)`.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub reconstruction: f64,
    pub measurement: f64,
}

impl LossWeights {
    pub fn new(batch: usize, n: usize, h: usize, lambda: f64) -> Self {
        LossWeights {
            reconstruction: 1.0 / (batch * n) as f64,
            measurement: if h == 0 { 0.0 } else { lambda / (batch * h) as f64 },
        }
    }
}

/// Record frames `first..=last` of a segment rollout on `tape`, starting from
/// the (detached) estimate `z`. Returns the summed loss and the last estimate.
pub fn record_window(
    tape: &mut Tape,
    nv: &NodaVars,
    seg: &Segment,
    z: Var,
    first: usize,
    last: usize,
    weights: LossWeights,
) -> Result<(Option<Var>, Var)> {
    let mut loss: Option<Var> = None;
    let mut z = z;
    let mut push = |tape: &mut Tape, term: Var| -> Result<()> {
        loss = Some(match loss {
            Some(l) => tape.add(l, term)?,
            None => term,
        });
        Ok(())
    };
    for k in first..=last {
        let pred = predictor_forward(tape, &nv.predictor, z)?;
        z = match seg.y.get(k - 1) {
            Some(y) => {
                let yv = tape.constant(Tensor::vector(y.to_vec()));
                let (est, _) = correct_tape(tape, &nv.corrector, pred, yv)?;
                if weights.measurement > 0.0 {
                    let e = estimate_measurement_tape(tape, &nv.corrector, est)?;
                    let r = tape.sub(yv, e)?;
                    let n = tape.l2_norm(r);
                    let term = tape.scale(n, weights.measurement);
                    push(tape, term)?;
                }
                est
            }
            None => pred,
        };
        let truth = tape.constant(Tensor::new(seg.spatial.to_vec(), seg.truth[k].clone())?);
        let r = tape.sub(z, truth)?;
        let n = tape.l2_norm(r);
        let term = tape.scale(n, weights.reconstruction);
        push(tape, term)?;
    }
    Ok((loss, z))
}

/// Loss and gradients of one segment under truncated BPTT.
pub fn segment_gradients(
    params: &NodaParams,
    seg: &Segment,
    window: usize,
    weights: LossWeights,
) -> Result<(f64, Vec<Tensor>)> {
    let n = seg.truth.len() - 1;
    let named = params.named();
    let mut grads: Vec<Tensor> = named.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    let mut total = 0.0;
    let mut z = Tensor::new(seg.spatial.to_vec(), seg.truth[0].clone())?;
    let mut first = 1;
    while first <= n {
        let last = (first + window - 1).min(n);
        let mut tape = Tape::new();
        let nv = params.bind(&mut tape, true);
        let zv = tape.constant(z);
        let (loss, est) = record_window(&mut tape, &nv, seg, zv, first, last, weights)?;
        let loss = loss.expect("window has at least one frame");
        total += tape.value(loss).item();
        let mut g = tape.backward(loss)?;
        for (acc, v) in grads.iter_mut().zip(nv.vars()) {
            if let Some(t) = g.take(v) {
                acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b);
            }
        }
        z = tape.value(est).clone();
        first = last + 1;
    }
    Ok((total, grads))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: NodaParams,
    pub adam: Adam,
    /// Mean batch loss per epoch.
    pub history: Vec<f64>,
}

/// Observations on every frame of each training trajectory, with noise drawn
/// from `seed + 1000 + i`.
fn observe_all(train: &[Trajectory], op: &Arc<MeasurementOperator>, snr_db: f64, seed: u64) -> Result<Vec<ObservationSet>> {
    train
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let frames: Vec<usize> = (0..t.n_frames()).collect();
            observe(t, Arc::clone(op), &frames, snr_db, seed.wrapping_add(1000 + i as u64))
        })
        .collect()
}

/// Train from a fresh initialization.
pub fn train(train_set: &[Trajectory], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let first = train_set
        .first()
        .ok_or_else(|| Error::InvalidArgument("training set is empty".into()))?;
    let op = config.operator(first.frame_size());
    let mut params = NodaParams::init(&config.fno(first.domain.ndims()), &op, config.hidden, config.learnable_c, config.seed)?;
    if config.e_init == "operator" {
        if config.hidden != 2 * op.d() {
            return Err(Error::Config(format!("e_init = operator needs hidden = 2d = {}, got {}", 2 * op.d(), config.hidden)));
        }
        params.corrector.measure = MeasurementNetParams::from_operator(&op);
    }
    let adam = Adam::for_params(&params);
    train_from(train_set, config, params, adam, 0)
}

/// Continue training `params` from epoch `start_epoch`.
pub fn train_from(
    train_set: &[Trajectory],
    config: &TrainConfig,
    mut params: NodaParams,
    mut adam: Adam,
    start_epoch: usize,
) -> Result<TrainOutcome> {
    config.validate()?;
    let first = train_set
        .first()
        .ok_or_else(|| Error::InvalidArgument("training set is empty".into()))?;
    let spatial = first.domain.shape();
    if let Some(t) = train_set.iter().find(|t| t.domain.shape() != spatial) {
        return Err(Error::shape("train", format!("mixed grids {:?} and {:?}", spatial, t.domain.shape())));
    }
    let op = Arc::new(config.operator(first.frame_size()));
    let min_frames = train_set.iter().map(Trajectory::n_frames).min().unwrap_or(0);
    let seg_len = if config.segment_len == 0 { min_frames } else { config.segment_len.min(min_frames) };
    if seg_len < 2 {
        return Err(Error::InvalidArgument("training trajectories need at least two frames".into()));
    }
    let n = seg_len - 1;
    let h = config.t_h_train.min(n);
    if h == 0 && config.lambda > 0.0 {
        return Err(Error::Config("t_h_train = 0 leaves the measurement term undefined for lambda > 0".into()));
    }

    let observations = observe_all(train_set, &op, config.snr_db, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in start_epoch..start_epoch + config.epochs {
        // One segment per trajectory, at a random offset.
        let mut work: Vec<(usize, usize)> = train_set
            .iter()
            .enumerate()
            .map(|(i, t)| (i, rng.random_range(0..=t.n_frames() - seg_len)))
            .collect();
        work.shuffle(&mut rng);
        let lr = config.lr_at(epoch);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for (b, chunk) in work.chunks(config.batch).enumerate() {
            let weights = LossWeights::new(chunk.len(), n, h, config.lambda);
            let results: Vec<Result<(f64, Vec<Tensor>)>> = chunk
                .par_iter()
                .map(|&(i, off)| {
                    let traj = &train_set[i];
                    let obs = &observations[i];
                    let y = (1..=h)
                        .map(|k| obs.get(off + k).ok_or(Error::MissingObservation { frame: off + k }))
                        .collect::<Result<Vec<_>>>()?;
                    let seg = Segment {
                        truth: &traj.frames[off..off + seg_len],
                        y,
                        spatial: &spatial,
                    };
                    segment_gradients(&params, &seg, config.bptt_window, weights)
                })
                .collect();
            let mut loss = 0.0;
            let mut grads: Option<Vec<Tensor>> = None;
            for r in results {
                let (l, g) = r?;
                loss += l;
                match &mut grads {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, t) in acc.iter_mut().zip(&g) {
                            a.data_mut().iter_mut().zip(t.data()).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            let mut grads = grads.expect("non-empty batch");
            if !loss.is_finite() || grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Numerical(format!("non-finite loss or gradient at epoch {epoch}, batch {b}")));
            }
            clip_global_norm(&mut grads, config.clip);
            let mut tensors = params.tensors_mut();
            adam_step(&mut tensors, &grads, &mut adam, lr)?;
            epoch_loss += loss;
            batches += 1;
        }
        let mean = epoch_loss / batches as f64;
        info!("epoch {epoch}: loss {mean:.6e} lr {lr:.3e}");
        history.push(mean);
    }
    Ok(TrainOutcome { params, adam, history })
}

/// Model blobs plus `adam.m.*`, `adam.v.*` and `adam.step`.
pub fn save_checkpoint(path: impl AsRef<Path>, params: &NodaParams, adam: &Adam) -> Result<()> {
    let mut blobs = params.blobs();
    let names: Vec<String> = blobs.iter().map(|(n, _)| n.clone()).collect();
    for (name, m) in names.iter().zip(&adam.m) {
        blobs.push((format!("adam.m.{name}"), m.clone()));
    }
    for (name, v) in names.iter().zip(&adam.v) {
        blobs.push((format!("adam.v.{name}"), v.clone()));
    }
    blobs.push(("adam.step".into(), Tensor::scalar(adam.step as f64)));
    write_model(path, blobs.iter().map(|(n, t)| (n.as_str(), t)))
}

/// Inverse of [`save_checkpoint`]. A fixed `Ĉ*` is re-attached from `op`.
pub fn load_checkpoint(path: impl AsRef<Path>, op: &MeasurementOperator) -> Result<(NodaParams, Adam)> {
    let blobs: BTreeMap<String, Tensor> = read_model(path)?.into_iter().collect();
    let predictor = PredictorParams::from_named(&blobs)?;
    let mut corrector = CorrectorParams::from_named(&blobs)?
        .ok_or_else(|| Error::Config("checkpoint has no corrector".into()))?;
    corrector.attach_operator(op)?;
    let params = NodaParams { predictor, corrector };
    let mut adam = Adam::for_params(&params);
    for (i, (name, _)) in params.named().iter().enumerate() {
        for (slot, kind) in [(&mut adam.m[i], "m"), (&mut adam.v[i], "v")] {
            let t = blobs
                .get(&format!("adam.{kind}.{name}"))
                .ok_or_else(|| Error::Config(format!("checkpoint is missing adam.{kind}.{name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Config(format!("adam.{kind}.{name} has shape {:?}", t.shape())));
            }
            *slot = t.clone();
        }
    }
    adam.step = blobs.get("adam.step").map_or(0, |t| t.item() as u64);
    Ok((params, adam))
}

/// Finite-difference checks of an FNO block and a three-step NODA rollout
/// with a dense measurement operator, on small random instances.
pub fn gradient_check(seed: u64, eps: f64, n_coords: usize) -> Result<Vec<(String, FdReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let fno = FnoConfig { ndims: 1, width: 8, modes: 6, blocks: 4, coords: true };
    let p = PredictorParams::init(&fno, seed)?;
    let blk = &p.blocks[0];
    let v: Vec<f64> = (0..8 * 32).map(|_| rng.random_range(-1.0..1.0)).collect();
    let params = vec![
        (*blk.w.weight).clone(),
        (*blk.w.bias).clone(),
        (*blk.conv.weight).clone(),
        Tensor::new(vec![8, 32], v)?,
    ];
    let r = finite_difference_check(
        |t, ps| {
            let block = BlockVars { w: (ps[0], ps[1]), conv: ps[2] };
            let y = fno_block(t, ps[3], &block, fno.modes, false)?;
            Ok(t.l2_norm(y))
        },
        &params,
        eps,
        n_coords,
        seed,
    )?;
    reports.push(("fno_block".to_string(), r));

    let n = 32;
    let op = MeasurementOperator::dense_random(n, n, seed);
    let mut params = NodaParams::init(&FnoConfig { width: 6, modes: 5, ..fno }, &op, 16, false, seed)?;
    // Push the gain and the predictor away from their near-zero initialization.
    for t in [&mut params.corrector.gain.w_z, &mut params.corrector.gain.w_y] {
        Arc::make_mut(t).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
    }
    Arc::make_mut(&mut params.predictor.proj.weight).data_mut().iter_mut().for_each(|v| *v *= 30.0);
    let phase: f64 = rng.random_range(0.0..1.0);
    let truth: Vec<Vec<f64>> = (0..4)
        .map(|k| (0..n).map(|j| ((j + 3 * k) as f64 * 0.3 + phase).sin() + 0.1).collect())
        .collect();
    let y = truth.iter().map(|z| apply_measurement(&op, z)).collect::<Result<Vec<_>>>()?;
    let spatial = [n];
    let seg = Segment { truth: &truth, y: vec![&y[1], &y[2]], spatial: &spatial };
    let weights = LossWeights::new(1, 3, 2, 0.5);
    let flat: Vec<Tensor> = params.named().iter().map(|(_, t)| (***t).clone()).collect();
    let r = finite_difference_check(
        |tape, leaves| {
            let nv = params.vars_from(tape, leaves)?;
            let z0 = tape.constant(Tensor::new(vec![n], truth[0].clone())?);
            let (loss, _) = record_window(tape, &nv, &seg, z0, 1, 3, weights)?;
            loss.ok_or_else(|| Error::Autodiff("empty rollout".into()))
        },
        &flat,
        eps,
        n_coords,
        seed.wrapping_add(1),
    )?;
    reports.push(("noda_rollout_3".to_string(), r));
    Ok(reports)
}
