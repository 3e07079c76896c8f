//! RelMSE scoring, baselines, the three experiment protocols and timing.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assimilation::{rollout, step, CorrectorParams};
use crate::dataset::{
    observe, read_trajectory_dir, sample_schedule, split, write_trajectory, Equation, MeasurementOperator,
    Schedule, Trajectory,
};
use crate::error::{Error, Result};
use crate::operator::PredictorParams;
use crate::training::load_model;

/// `Σ‖z_D − ẑ‖² / Σ‖z_D‖²` over the listed frames.
pub fn relmse_frames(estimate: &[Vec<f64>], truth: &[Vec<f64>], frames: &[usize]) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for &k in frames {
        let (e, t) = match (estimate.get(k), truth.get(k)) {
            (Some(e), Some(t)) if e.len() == t.len() => (e, t),
            _ => {
                return Err(Error::shape(
                    "relmse",
                    format!("frame {k} missing or misaligned ({} vs {} frames)", estimate.len(), truth.len()),
                ))
            }
        };
        num += e.iter().zip(t).map(|(a, b)| (b - a).powi(2)).sum::<f64>();
        den += t.iter().map(|b| b * b).sum::<f64>();
    }
    if den == 0.0 {
        return Err(Error::Numerical("RelMSE denominator is zero".into()));
    }
    Ok(num / den)
}

/// RelMSE over frames `t_h..=t_f`.
pub fn relmse(estimate: &Trajectory, truth: &Trajectory, t_h: usize, t_f: usize) -> Result<f64> {
    if t_h > t_f {
        return Err(Error::InvalidArgument(format!("empty scoring window {t_h}..={t_f}")));
    }
    let frames: Vec<usize> = (t_h..=t_f).collect();
    relmse_frames(&estimate.frames, &truth.frames, &frames)
}

/// One row of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub equation: String,
    pub t_f: f64,
    pub snr_db: f64,
    pub alpha: f64,
    pub t_h: f64,
    pub mean_relmse: f64,
    pub std_relmse: f64,
    pub time_per_step: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn emit_csv(rows: &[MetricRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// `|ẑ − z_D|` per frame, stored in the trajectory format.
pub fn heatmap(estimate: &Trajectory, truth: &Trajectory) -> Result<Trajectory> {
    if estimate.n_frames() != truth.n_frames() || estimate.frame_size() != truth.frame_size() {
        return Err(Error::shape("heatmap", "estimate and truth differ in shape"));
    }
    let frames = estimate
        .frames
        .iter()
        .zip(&truth.frames)
        .map(|(e, t)| e.iter().zip(t).map(|(a, b)| (a - b).abs()).collect())
        .collect();
    Trajectory::new(truth.equation, truth.domain, truth.h, frames, truth.seed)
}

pub fn emit_heatmap_data(estimate: &Trajectory, truth: &Trajectory, path: impl AsRef<Path>) -> Result<()> {
    write_trajectory(path, &heatmap(estimate, truth)?)
}

/// Baseline holding `z_D(t_h)` for every later frame.
pub fn persistence(truth: &Trajectory, t_h: usize) -> Vec<Vec<f64>> {
    (0..truth.n_frames())
        .map(|k| truth.frames[k.min(t_h)].clone())
        .collect()
}

/// Predictor-only rollout started from the true state at `t_h`.
pub fn prediction_only(predictor: &PredictorParams, truth: &Trajectory, t_h: usize, t_f: usize) -> Result<Vec<Vec<f64>>> {
    let spatial = truth.domain.shape();
    let mut frames: Vec<Vec<f64>> = truth.frames[..=t_h].to_vec();
    let mut z = truth.frames[t_h].clone();
    for _ in t_h..t_f {
        z = step(predictor, None, &z, &spatial, None)?.estimate;
        frames.push(z.clone());
    }
    Ok(frames)
}

/// Seeds for measurement noise and schedule sampling of one evaluation.
#[derive(Clone, Copy, Debug)]
pub struct EvalSeeds {
    pub noise: u64,
    pub schedule: u64,
}

impl EvalSeeds {
    pub fn from_base(seed: u64, index: usize) -> Self {
        EvalSeeds {
            noise: seed.wrapping_mul(1_000_003).wrapping_add(2 * index as u64 + 1),
            schedule: seed.wrapping_mul(1_000_003).wrapping_add(2 * index as u64 + 2),
        }
    }
}

/// Observe, roll out and return the estimate plus the schedule used.
#[allow(clippy::too_many_arguments)]
pub fn assimilate(
    predictor: &PredictorParams,
    corrector: Option<&CorrectorParams>,
    truth: &Trajectory,
    op: &Arc<MeasurementOperator>,
    snr_db: f64,
    t_h: usize,
    t_f: usize,
    alpha: f64,
    seeds: EvalSeeds,
) -> Result<(Vec<Vec<f64>>, Schedule)> {
    let schedule = if alpha > 0.0 {
        sample_schedule(t_h, t_f, alpha, seeds.schedule)?
    } else {
        Schedule::warmup_only(t_h, t_f)
    };
    let frames: Vec<usize> = (0..=t_f).collect();
    let obs = observe(truth, Arc::clone(op), &frames, snr_db, seeds.noise)?;
    let out = rollout(predictor, corrector, &truth.frames[0], &truth.domain.shape(), &obs, &schedule)?;
    Ok((out.estimates, schedule))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub equation: String,
    pub model: PathBuf,
    pub data: PathBuf,
    /// Leading trajectories of `data` reserved for training and skipped here.
    pub n_train: usize,
    /// Final time in seconds.
    pub t_f: f64,
    pub snr: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Warm-up end in seconds.
    pub t_h: f64,
    /// Warm-up ends (seconds) swept by the warm-up experiment.
    pub warmup_t_h: Vec<f64>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// Any of `prediction`, `assimilation`, `warmup`.
    pub experiments: Vec<String>,
    pub exclude_observed: bool,
    pub measurement: String,
    pub measurement_seed: u64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            equation: "ks".into(),
            model: PathBuf::from("model.nodm"),
            data: PathBuf::from("data"),
            n_train: 0,
            t_f: 30.0,
            snr: vec![30.0],
            alpha: vec![0.0, 0.1, 0.2, 0.3],
            t_h: 10.0,
            warmup_t_h: vec![0.25, 2.5, 10.0],
            seeds: vec![0],
            out: PathBuf::from("results"),
            experiments: vec!["prediction".into(), "assimilation".into(), "warmup".into()],
            exclude_observed: false,
            measurement: "identity".into(),
            measurement_seed: 0,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.equation.parse::<Equation>()?;
        if self.snr.is_empty() || self.alpha.is_empty() || self.seeds.is_empty() || self.warmup_t_h.is_empty() {
            return Err(Error::Config("snr, alpha, seeds and warmup_t_h must be non-empty".into()));
        }
        if let Some(e) = self.experiments.iter().find(|e| !["prediction", "assimilation", "warmup"].contains(&e.as_str())) {
            return Err(Error::Config(format!("unknown experiment {e}")));
        }
        if self.measurement != "identity" && self.measurement != "random" {
            return Err(Error::Config(format!("measurement must be identity or random, got {}", self.measurement)));
        }
        Ok(())
    }
}

/// Loaded model and test trajectories for an experiment run.
pub struct ExperimentContext {
    pub spec: ExperimentSpec,
    pub predictor: PredictorParams,
    pub corrector: Option<CorrectorParams>,
    pub op: Arc<MeasurementOperator>,
    pub test: Vec<Trajectory>,
}

impl ExperimentContext {
    pub fn load(spec: ExperimentSpec) -> Result<Self> {
        spec.validate()?;
        let (predictor, corrector) = load_model(&spec.model)?;
        let all = read_trajectory_dir(&spec.data)?;
        let (_, test) = split(all, spec.n_train)?;
        Self::new(spec, predictor, corrector, test)
    }

    pub fn new(
        spec: ExperimentSpec,
        predictor: PredictorParams,
        mut corrector: Option<CorrectorParams>,
        test: Vec<Trajectory>,
    ) -> Result<Self> {
        spec.validate()?;
        let first = test
            .first()
            .ok_or_else(|| Error::InvalidArgument("no test trajectories".into()))?;
        let d = first.frame_size();
        let op = Arc::new(match spec.measurement.as_str() {
            "random" => MeasurementOperator::dense_random(d, d, spec.measurement_seed),
            _ => MeasurementOperator::identity(d),
        });
        if let Some(c) = &mut corrector {
            c.attach_operator(&op)?;
        }
        Ok(ExperimentContext {
            spec,
            predictor,
            corrector,
            op,
            test,
        })
    }

    fn frames_of(&self, seconds: f64) -> usize {
        let h = self.test[0].h;
        (seconds / h).round() as usize
    }

    /// Per-trajectory RelMSE of NODA over `(t_h, t_f]` for one configuration.
    pub fn score_noda(&self, snr_db: f64, alpha: f64, t_h: usize, t_f: usize, seed: u64) -> Result<Vec<f64>> {
        self.score_noda_from(snr_db, alpha, t_h, t_h + 1, t_f, seed)
    }

    /// As [`Self::score_noda`], scoring frames `from..=t_f` only.
    pub fn score_noda_from(
        &self,
        snr_db: f64,
        alpha: f64,
        t_h: usize,
        from: usize,
        t_f: usize,
        seed: u64,
    ) -> Result<Vec<f64>> {
        self.test
            .par_iter()
            .enumerate()
            .map(|(i, truth)| {
                if t_f >= truth.n_frames() {
                    return Err(Error::InvalidArgument(format!(
                        "t_f frame {t_f} beyond trajectory of {} frames",
                        truth.n_frames()
                    )));
                }
                let seeds = EvalSeeds::from_base(seed, i);
                let (est, schedule) = assimilate(
                    &self.predictor,
                    self.corrector.as_ref(),
                    truth,
                    &self.op,
                    snr_db,
                    t_h,
                    t_f,
                    alpha,
                    seeds,
                )?;
                let frames: Vec<usize> = (from..=t_f)
                    .filter(|k| !self.spec.exclude_observed || !schedule.is_corrected(*k))
                    .collect();
                relmse_frames(&est, &truth.frames, &frames)
            })
            .collect()
    }

    pub fn score_baselines(&self, t_h: usize, t_f: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let frames: Vec<usize> = (t_h + 1..=t_f).collect();
        let pairs: Vec<(f64, f64)> = self
            .test
            .par_iter()
            .map(|truth| {
                let p = relmse_frames(&persistence(truth, t_h), &truth.frames, &frames)?;
                let f = relmse_frames(&prediction_only(&self.predictor, truth, t_h, t_f)?, &truth.frames, &frames)?;
                Ok((p, f))
            })
            .collect::<Result<_>>()?;
        Ok(pairs.into_iter().unzip())
    }

    fn row(&self, method: &str, snr: f64, alpha: f64, t_h: usize, t_f: usize, values: &[f64]) -> MetricRow {
        let (mean, std) = mean_std(values);
        let h = self.test[0].h;
        MetricRow {
            method: method.into(),
            equation: self.spec.equation.clone(),
            t_f: t_f as f64 * h,
            snr_db: snr,
            alpha,
            t_h: t_h as f64 * h,
            mean_relmse: mean,
            std_relmse: std,
            time_per_step: f64::NAN,
        }
    }

    fn pooled(&self, snr: f64, alpha: f64, t_h: usize, from: usize, t_f: usize) -> Result<Vec<f64>> {
        let mut all = Vec::new();
        for &seed in &self.spec.seeds {
            all.extend(self.score_noda_from(snr, alpha, t_h, from, t_f, seed)?);
        }
        Ok(all)
    }

    /// Warm-up then free prediction; baselines included.
    pub fn experiment_prediction(&self) -> Result<Vec<MetricRow>> {
        let (t_h, t_f) = (self.frames_of(self.spec.t_h), self.frames_of(self.spec.t_f));
        let mut rows = Vec::new();
        for &snr in &self.spec.snr {
            rows.push(self.row("noda", snr, 0.0, t_h, t_f, &self.pooled(snr, 0.0, t_h, t_h + 1, t_f)?));
        }
        let (pers, pred) = self.score_baselines(t_h, t_f)?;
        rows.push(self.row("persistence", f64::INFINITY, 0.0, t_h, t_f, &pers));
        rows.push(self.row("prediction_only", f64::INFINITY, 0.0, t_h, t_f, &pred));
        Ok(rows)
    }

    /// α sweep with corrections inside the horizon.
    pub fn experiment_assimilation(&self) -> Result<Vec<MetricRow>> {
        let (t_h, t_f) = (self.frames_of(self.spec.t_h), self.frames_of(self.spec.t_f));
        let mut rows = Vec::new();
        for &snr in &self.spec.snr {
            for &alpha in &self.spec.alpha {
                rows.push(self.row("noda", snr, alpha, t_h, t_f, &self.pooled(snr, alpha, t_h, t_h + 1, t_f)?));
            }
        }
        Ok(rows)
    }

    /// Sweep of the warm-up length at α = 0. Every row is scored on the same
    /// frames, after the longest warm-up.
    pub fn experiment_warmup(&self) -> Result<Vec<MetricRow>> {
        let t_f = self.frames_of(self.spec.t_f);
        let from = self.spec.warmup_t_h.iter().map(|&th| self.frames_of(th)).max().unwrap_or(0) + 1;
        let mut rows = Vec::new();
        for &snr in &self.spec.snr {
            for &th in &self.spec.warmup_t_h {
                let t_h = self.frames_of(th);
                rows.push(self.row("noda", snr, 0.0, t_h, t_f, &self.pooled(snr, 0.0, t_h, from, t_f)?));
            }
        }
        Ok(rows)
    }

    /// Run the requested experiments and write `<name>.csv` files to `out`.
    pub fn run(&self, out: &Path) -> Result<Vec<MetricRow>> {
        std::fs::create_dir_all(out)?;
        let mut all = Vec::new();
        for name in &self.spec.experiments {
            let rows = match name.as_str() {
                "prediction" => self.experiment_prediction()?,
                "assimilation" => self.experiment_assimilation()?,
                _ => self.experiment_warmup()?,
            };
            emit_csv(&rows, out.join(format!("{name}.csv")))?;
            all.extend(rows);
        }
        Ok(all)
    }
}

/// Median per-call wall time of predict-only and predict+correct steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepTiming {
    pub predict: f64,
    pub predict_correct: f64,
}

impl StepTiming {
    pub fn ratio(&self) -> f64 {
        self.predict_correct / self.predict
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median seconds per step over `calls` (at least 1000) timed invocations each.
pub fn time_per_step(
    predictor: &PredictorParams,
    corrector: &CorrectorParams,
    z: &[f64],
    spatial: &[usize],
    y: &[f64],
    calls: usize,
) -> Result<StepTiming> {
    let calls = calls.max(1000);
    let warm = 50;
    let time = |with_y: bool| -> Result<f64> {
        let yo = with_y.then_some(y);
        for _ in 0..warm {
            std::hint::black_box(step(predictor, Some(corrector), z, spatial, yo)?);
        }
        let mut samples = Vec::with_capacity(calls);
        for _ in 0..calls {
            let t0 = Instant::now();
            std::hint::black_box(step(predictor, Some(corrector), z, spatial, yo)?);
            samples.push(t0.elapsed().as_secs_f64());
        }
        Ok(median(samples))
    };
    // Interleave the two measurements so drift in machine load hits both.
    let p1 = time(false)?;
    let c1 = time(true)?;
    let p2 = time(false)?;
    let c2 = time(true)?;
    Ok(StepTiming {
        predict: p1.min(p2),
        predict_correct: c1.min(c2),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid1D;
    use crate::solvers::Domain;

    fn traj(frames: Vec<Vec<f64>>) -> Trajectory {
        let n = frames[0].len();
        Trajectory::new(Equation::Ks, Domain::D1(Grid1D::new(n, 1.0).unwrap()), 0.25, frames, 0).unwrap()
    }

    #[test]
    fn relmse_hand_cases() {
        let truth = vec![vec![1.0, 0.0], vec![1.0, 1.0]];
        let est = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        assert_eq!(relmse_frames(&truth, &truth, &[0, 1]).unwrap(), 0.0);
        let zero = vec![vec![0.0; 2]; 2];
        assert_eq!(relmse_frames(&zero, &truth, &[0, 1]).unwrap(), 1.0);
        assert_eq!(relmse_frames(&est, &truth, &[0, 1]).unwrap(), 1.0 / 3.0);
        assert!(relmse_frames(&est, &zero, &[0, 1]).is_err());
        assert!(relmse_frames(&est, &truth, &[2]).is_err());
    }

    #[test]
    fn relmse_is_scale_invariant() {
        let n = 8;
        let t: Vec<Vec<f64>> = (0..3).map(|k| (0..n).map(|j| ((j + k) as f64).sin()).collect()).collect();
        let e: Vec<Vec<f64>> = t.iter().map(|f| f.iter().map(|v| v * 0.9 + 0.01).collect()).collect();
        let base = relmse(&traj(e.clone()), &traj(t.clone()), 0, 2).unwrap();
        for c in [-3.0, 0.5, 1e3] {
            let se: Vec<Vec<f64>> = e.iter().map(|f| f.iter().map(|v| v * c).collect()).collect();
            let st: Vec<Vec<f64>> = t.iter().map(|f| f.iter().map(|v| v * c).collect()).collect();
            let r = relmse(&traj(se), &traj(st), 0, 2).unwrap();
            assert!((r - base).abs() < 1e-12 * base);
        }
    }

    #[test]
    fn persistence_holds_warmup_state() {
        let t = traj((0..5).map(|k| vec![k as f64; 8]).collect());
        let p = persistence(&t, 2);
        assert_eq!(p[1], vec![1.0; 8]);
        assert_eq!(p[4], vec![2.0; 8]);
    }

    #[test]
    fn csv_round_trip_has_fixed_headers() {
        let rows = vec![MetricRow {
            method: "noda".into(),
            equation: "ks".into(),
            t_f: 30.0,
            snr_db: 30.0,
            alpha: 0.1,
            t_h: 10.0,
            mean_relmse: 0.25,
            std_relmse: 0.01,
            time_per_step: 1e-3,
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.csv");
        emit_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("method,equation,t_f,snr_db,alpha,t_h,mean_relmse,std_relmse,time_per_step\n"));
        assert_eq!(read_csv(&path).unwrap(), rows);
    }

    #[test]
    fn heatmap_is_absolute_error() {
        let t = traj(vec![vec![1.0; 8], vec![2.0; 8]]);
        let e = traj(vec![vec![0.5; 8], vec![3.0; 8]]);
        let h = heatmap(&e, &t).unwrap();
        assert_eq!(h.frames[0], vec![0.5; 8]);
        assert_eq!(h.frames[1], vec![1.0; 8]);
    }
}
