//! Observer-style correction and the recursive predict/correct rollout.
//!
//! The correction of a forecast `ẑ_pred` given a measurement `y` is
//! `ẑ = ẑ_pred + tanh(W_z E(ẑ_pred) + W_y y + b) ⊙ (Ĉ* (y − E(ẑ_pred)))`,
//! where `E` is a learned two-layer estimate of the measurement operator.
//! Fields are flattened to `d` values for every map here.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::dataset::{MeasurementOperator, ObservationSet, Schedule};
use crate::error::{Error, Result};
use crate::operator::{predictor_forward, PredictorParams, PredictorVars};

pub const DEFAULT_HIDDEN: usize = 256;

/// `E(z) = w2 relu(w1 z + b1) + b2` with `w1 [H, d]`, `w2 [p, H]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementNetParams {
    pub w1: Arc<Tensor>,
    pub b1: Arc<Tensor>,
    pub w2: Arc<Tensor>,
    pub b2: Arc<Tensor>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Arc<Tensor> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Arc::new(Tensor::new(shape.to_vec(), data).unwrap())
}

fn zeros(shape: &[usize]) -> Arc<Tensor> {
    Arc::new(Tensor::zeros(shape))
}

impl MeasurementNetParams {
    pub fn init(d: usize, p: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let b1 = 1.0 / (d as f64).sqrt();
        let b2 = 1.0 / (hidden as f64).sqrt();
        MeasurementNetParams {
            w1: uniform(rng, &[hidden, d], b1),
            b1: uniform(rng, &[hidden], b1),
            w2: uniform(rng, &[p, hidden], b2),
            b2: uniform(rng, &[p], b2),
        }
    }

    pub fn zeros(d: usize, p: usize, hidden: usize) -> Self {
        MeasurementNetParams {
            w1: zeros(&[hidden, d]),
            b1: zeros(&[hidden]),
            w2: zeros(&[p, hidden]),
            b2: zeros(&[p]),
        }
    }

    /// Exact identity through `relu(z) - relu(-z)`, hidden width `2d`.
    pub fn identity(d: usize) -> Self {
        let mut w1 = Tensor::zeros(&[2 * d, d]);
        let mut w2 = Tensor::zeros(&[d, 2 * d]);
        for i in 0..d {
            w1.data_mut()[i * d + i] = 1.0;
            w1.data_mut()[(d + i) * d + i] = -1.0;
            w2.data_mut()[i * 2 * d + i] = 1.0;
            w2.data_mut()[i * 2 * d + d + i] = -1.0;
        }
        MeasurementNetParams {
            w1: Arc::new(w1),
            b1: zeros(&[2 * d]),
            w2: Arc::new(w2),
            b2: zeros(&[d]),
        }
    }

    /// Exact copy of a known operator, `Ĉ relu(z) - Ĉ relu(-z)`, hidden width `2d`.
    pub fn from_operator(op: &MeasurementOperator) -> Self {
        let (p, d) = (op.p(), op.d());
        let mut net = Self::identity(d);
        if let MeasurementOperator::DenseRandom { matrix, .. } = op {
            let mut w2 = Tensor::zeros(&[p, 2 * d]);
            for r in 0..p {
                for c in 0..d {
                    w2.data_mut()[r * 2 * d + c] = matrix[r * d + c];
                    w2.data_mut()[r * 2 * d + d + c] = -matrix[r * d + c];
                }
            }
            net.w2 = Arc::new(w2);
            net.b2 = zeros(&[p]);
        }
        net
    }

    pub fn d(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn p(&self) -> usize {
        self.w2.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[0]
    }
}

/// The `Ĉ*` factor of the gain.
#[derive(Clone, Debug, PartialEq)]
pub enum CAdjoint {
    /// `Ĉ* = I`; requires `p == d`.
    Identity,
    /// Known transpose `Ĉᵀ`, `[d, p]`, not trained.
    Fixed(Arc<Tensor>),
    /// Learned `[d, p]` map.
    Learnable(Arc<Tensor>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GainParams {
    /// `[d, p]`
    pub w_z: Arc<Tensor>,
    /// `[d, p]`
    pub w_y: Arc<Tensor>,
    /// `[d]`
    pub b: Arc<Tensor>,
    pub c_adj: CAdjoint,
}

impl GainParams {
    pub fn init(d: usize, p: usize, learnable_c: bool, rng: &mut ChaCha8Rng) -> Self {
        let bound = 0.01 / (p as f64).sqrt();
        let w_z = uniform(rng, &[d, p], bound);
        let w_y = uniform(rng, &[d, p], bound);
        let c_adj = if learnable_c {
            CAdjoint::Learnable(uniform(rng, &[d, p], 1.0 / (p as f64).sqrt()))
        } else {
            CAdjoint::Identity
        };
        GainParams {
            w_z,
            w_y,
            b: zeros(&[d]),
            c_adj,
        }
    }

    pub fn zeros(d: usize, p: usize) -> Self {
        GainParams {
            w_z: zeros(&[d, p]),
            w_y: zeros(&[d, p]),
            b: zeros(&[d]),
            c_adj: CAdjoint::Identity,
        }
    }

    pub fn d(&self) -> usize {
        self.w_z.shape()[0]
    }

    pub fn p(&self) -> usize {
        self.w_z.shape()[1]
    }
}

/// Everything the correction step learns.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrectorParams {
    pub measure: MeasurementNetParams,
    pub gain: GainParams,
}

impl CorrectorParams {
    pub fn init(d: usize, p: usize, hidden: usize, learnable_c: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let measure = MeasurementNetParams::init(d, p, hidden, &mut rng);
        let gain = GainParams::init(d, p, learnable_c, &mut rng);
        CorrectorParams { measure, gain }
    }

    /// Use `Ĉᵀ` of a known operator for `Ĉ*` unless `Ĉ*` is learned.
    pub fn attach_operator(&mut self, op: &MeasurementOperator) -> Result<()> {
        if op.d() != self.gain.d() || op.p() != self.gain.p() {
            return Err(Error::shape(
                "attach_operator",
                format!(
                    "operator {}x{} for a corrector with p={} d={}",
                    op.p(),
                    op.d(),
                    self.gain.p(),
                    self.gain.d()
                ),
            ));
        }
        if matches!(self.gain.c_adj, CAdjoint::Learnable(_)) {
            return Ok(());
        }
        self.gain.c_adj = match op.transpose() {
            None => CAdjoint::Identity,
            Some(t) => CAdjoint::Fixed(Arc::new(Tensor::new(vec![op.d(), op.p()], t)?)),
        };
        Ok(())
    }

    /// Trainable tensors in canonical order with blob names.
    pub fn named(&self) -> Vec<(String, &Arc<Tensor>)> {
        let m = &self.measure;
        let g = &self.gain;
        let mut out = vec![
            ("measure.w1".to_string(), &m.w1),
            ("measure.b1".to_string(), &m.b1),
            ("measure.w2".to_string(), &m.w2),
            ("measure.b2".to_string(), &m.b2),
            ("gain.w_z".to_string(), &g.w_z),
            ("gain.w_y".to_string(), &g.w_y),
            ("gain.b".to_string(), &g.b),
        ];
        if let CAdjoint::Learnable(c) = &g.c_adj {
            out.push(("gain.c_adj".to_string(), c));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Arc<Tensor>> {
        let m = &mut self.measure;
        let g = &mut self.gain;
        let mut out = vec![&mut m.w1, &mut m.b1, &mut m.w2, &mut m.b2, &mut g.w_z, &mut g.w_y, &mut g.b];
        if let CAdjoint::Learnable(c) = &mut g.c_adj {
            out.push(c);
        }
        out
    }

    /// `None` when the blobs hold no corrector.
    pub fn from_named(blobs: &BTreeMap<String, Tensor>) -> Result<Option<Self>> {
        if !blobs.contains_key("measure.w1") {
            return Ok(None);
        }
        let get = |name: &str| -> Result<Arc<Tensor>> {
            blobs
                .get(name)
                .cloned()
                .map(Arc::new)
                .ok_or_else(|| Error::Config(format!("model is missing blob {name}")))
        };
        let measure = MeasurementNetParams {
            w1: get("measure.w1")?,
            b1: get("measure.b1")?,
            w2: get("measure.w2")?,
            b2: get("measure.b2")?,
        };
        let c_adj = match blobs.get("gain.c_adj") {
            Some(c) => CAdjoint::Learnable(Arc::new(c.clone())),
            None => CAdjoint::Identity,
        };
        let gain = GainParams {
            w_z: get("gain.w_z")?,
            w_y: get("gain.w_y")?,
            b: get("gain.b")?,
            c_adj,
        };
        let params = CorrectorParams { measure, gain };
        params.check_shapes()?;
        Ok(Some(params))
    }

    fn check_shapes(&self) -> Result<()> {
        let (d, p, h) = (self.measure.d(), self.measure.p(), self.measure.hidden());
        let expect: [(&str, &Tensor, Vec<usize>); 7] = [
            ("measure.b1", &self.measure.b1, vec![h]),
            ("measure.w2", &self.measure.w2, vec![p, h]),
            ("measure.b2", &self.measure.b2, vec![p]),
            ("gain.w_z", &self.gain.w_z, vec![d, p]),
            ("gain.w_y", &self.gain.w_y, vec![d, p]),
            ("gain.b", &self.gain.b, vec![d]),
            ("measure.w1", &self.measure.w1, vec![h, d]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "blob {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        match &self.gain.c_adj {
            CAdjoint::Identity if p != d => Err(Error::Config(format!(
                "identity Ĉ* needs p == d, got p={p} d={d}"
            ))),
            CAdjoint::Fixed(c) | CAdjoint::Learnable(c) if c.shape() != [d, p] => Err(Error::Config(format!(
                "Ĉ* has shape {:?}, expected [{d}, {p}]",
                c.shape()
            ))),
            _ => Ok(()),
        }
    }

    pub fn bind(&self, tape: &mut Tape, learnable: bool) -> CorrectorVars {
        let mut leaf = |t: &Arc<Tensor>, train: bool| {
            if train {
                tape.param_shared(Arc::clone(t))
            } else {
                tape.constant_shared(Arc::clone(t))
            }
        };
        let m = &self.measure;
        let g = &self.gain;
        CorrectorVars {
            w1: leaf(&m.w1, learnable),
            b1: leaf(&m.b1, learnable),
            w2: leaf(&m.w2, learnable),
            b2: leaf(&m.b2, learnable),
            w_z: leaf(&g.w_z, learnable),
            w_y: leaf(&g.w_y, learnable),
            b: leaf(&g.b, learnable),
            c_adj: match &g.c_adj {
                CAdjoint::Identity => None,
                CAdjoint::Fixed(c) => Some(leaf(c, false)),
                CAdjoint::Learnable(c) => Some(leaf(c, learnable)),
            },
            c_learnable: matches!(g.c_adj, CAdjoint::Learnable(_)),
        }
    }
}

/// Tape handles mirroring [`CorrectorParams`].
#[derive(Clone, Debug)]
pub struct CorrectorVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w_z: Var,
    pub w_y: Var,
    pub b: Var,
    pub c_adj: Option<Var>,
    c_learnable: bool,
}

impl CorrectorVars {
    /// Same order as [`CorrectorParams::named`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.w1, self.b1, self.w2, self.b2, self.w_z, self.w_y, self.b];
        if self.c_learnable {
            out.extend(self.c_adj);
        }
        out
    }
}

fn flat(tape: &mut Tape, z: Var) -> Result<Var> {
    let n = tape.value(z).len();
    tape.reshape(z, &[n])
}

/// `E(ẑ)` for a field of any spatial shape.
pub fn estimate_measurement_tape(tape: &mut Tape, cv: &CorrectorVars, z: Var) -> Result<Var> {
    let z = flat(tape, z)?;
    let h = tape.matmul(cv.w1, z)?;
    let h = tape.add_bias(h, cv.b1)?;
    let h = tape.relu(h);
    let e = tape.matmul(cv.w2, h)?;
    tape.add_bias(e, cv.b2)
}

/// `tanh(W_z e + W_y y + b) ⊙ (Ĉ* u)` as a flat `d`-vector.
pub fn gain_apply_tape(tape: &mut Tape, cv: &CorrectorVars, e: Var, y: Var, u: Var) -> Result<Var> {
    let a = tape.matmul(cv.w_z, e)?;
    let b = tape.matmul(cv.w_y, y)?;
    let s = tape.add(a, b)?;
    let s = tape.add(s, cv.b)?;
    let gate = tape.tanh(s);
    let cu = match cv.c_adj {
        Some(c) => tape.matmul(c, u)?,
        None => u,
    };
    tape.mul(gate, cu)
}

/// Corrected estimate and `E(ẑ_pred)`; the estimate keeps `z_pred`'s shape.
pub fn correct_tape(tape: &mut Tape, cv: &CorrectorVars, z_pred: Var, y: Var) -> Result<(Var, Var)> {
    let shape = tape.value(z_pred).shape().to_vec();
    let e = estimate_measurement_tape(tape, cv, z_pred)?;
    let u = tape.sub(y, e)?;
    let k = gain_apply_tape(tape, cv, e, y, u)?;
    let zf = flat(tape, z_pred)?;
    let z = tape.add(zf, k)?;
    Ok((tape.reshape(z, &shape)?, e))
}

/// `E(ẑ_pred)` on plain data.
pub fn estimate_measurement(params: &CorrectorParams, z_pred: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let cv = params.bind(&mut tape, false);
    let z = tape.constant(Tensor::vector(z_pred.to_vec()));
    let e = estimate_measurement_tape(&mut tape, &cv, z)?;
    Ok(tape.value(e).data().to_vec())
}

/// Gain applied to an innovation `u` on plain data.
pub fn gain_apply(params: &CorrectorParams, z_pred: &[f64], y: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let cv = params.bind(&mut tape, false);
    let z = tape.constant(Tensor::vector(z_pred.to_vec()));
    let e = estimate_measurement_tape(&mut tape, &cv, z)?;
    let yv = tape.constant(Tensor::vector(y.to_vec()));
    let uv = tape.constant(Tensor::vector(u.to_vec()));
    let k = gain_apply_tape(&mut tape, &cv, e, yv, uv)?;
    Ok(tape.value(k).data().to_vec())
}

/// `ẑ = ẑ_pred + K(ẑ_pred)[y − E(ẑ_pred)]` on plain (flattened) data.
pub fn correct_step(params: &CorrectorParams, z_pred: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let cv = params.bind(&mut tape, false);
    let z = tape.constant(Tensor::vector(z_pred.to_vec()));
    let yv = tape.constant(Tensor::vector(y.to_vec()));
    let (out, _) = correct_tape(&mut tape, &cv, z, yv)?;
    Ok(tape.value(out).data().to_vec())
}

/// Estimator state between frames.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutState {
    pub estimate: Vec<f64>,
    pub frame: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub prediction: Vec<f64>,
    pub estimate: Vec<f64>,
}

/// One predict (+ correct when `y` is given and a corrector exists) step.
pub fn step(
    predictor: &PredictorParams,
    corrector: Option<&CorrectorParams>,
    z: &[f64],
    spatial: &[usize],
    y: Option<&[f64]>,
) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let pv: PredictorVars = predictor.bind(&mut tape, false);
    let zv = tape.constant(Tensor::new(spatial.to_vec(), z.to_vec())?);
    let pred = predictor_forward(&mut tape, &pv, zv)?;
    let est = match (corrector, y) {
        (Some(c), Some(y)) => {
            let cv = c.bind(&mut tape, false);
            let yv = tape.constant(Tensor::vector(y.to_vec()));
            correct_tape(&mut tape, &cv, pred, yv)?.0
        }
        _ => pred,
    };
    Ok(StepOutput {
        prediction: tape.value(pred).data().to_vec(),
        estimate: tape.value(est).data().to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutOutput {
    /// `ẑ_{t_k}` for `k = 0..=t_f`; frame 0 is the initial condition.
    pub estimates: Vec<Vec<f64>>,
    /// `ẑ_pred` for `k = 1..=t_f` (index `k - 1`).
    pub predictions: Vec<Vec<f64>>,
    /// Frames at which the corrector ran.
    pub corrected: Vec<usize>,
}

/// Recursive estimation from `ẑ_{t_0} = z0` through frame `schedule.t_f`.
/// Without a corrector every step is prediction only.
pub fn rollout(
    predictor: &PredictorParams,
    corrector: Option<&CorrectorParams>,
    z0: &[f64],
    spatial: &[usize],
    observations: &ObservationSet,
    schedule: &Schedule,
) -> Result<RolloutOutput> {
    let mut state = RolloutState {
        estimate: z0.to_vec(),
        frame: 0,
    };
    let mut out = RolloutOutput {
        estimates: vec![z0.to_vec()],
        predictions: Vec::with_capacity(schedule.t_f),
        corrected: Vec::new(),
    };
    while state.frame < schedule.t_f {
        let k = state.frame + 1;
        let y = match corrector {
            Some(_) if schedule.is_corrected(k) => {
                Some(observations.get(k).ok_or(Error::MissingObservation { frame: k })?)
            }
            _ => None,
        };
        let s = step(predictor, corrector, &state.estimate, spatial, y)?;
        if s.estimate.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite estimate at frame {k}")));
        }
        if y.is_some() {
            out.corrected.push(k);
        }
        state = RolloutState {
            estimate: s.estimate,
            frame: k,
        };
        out.predictions.push(s.prediction);
        out.estimates.push(state.estimate.clone());
    }
    Ok(out)
}
