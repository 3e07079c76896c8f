//! Trajectories, measurement models, noise injection, assimilation schedules
//! and the little-endian binary container used for all of them.
//!
//! Container layout (52-byte header, then payload):
//!
//! | offset | type   | field                          |
//! |--------|--------|--------------------------------|
//! | 0      | [u8;4] | magic `NODA`                   |
//! | 4      | u8     | version (1)                    |
//! | 5      | u8     | equation (1 KS, 2 KdV, 3 NS)   |
//! | 6      | u8     | spatial dims                   |
//! | 7      | u8     | dtype (0 = f64)                |
//! | 8      | u32    | nx                             |
//! | 12     | u32    | ny                             |
//! | 16     | u32    | frame count                    |
//! | 20     | f64    | h                              |
//! | 28     | f64    | length_x                       |
//! | 36     | f64    | length_y                       |
//! | 44     | u64    | seed                           |
//!
//! Frames follow row-major as f64. Observation files reuse the header with
//! `nx = p`, `ny = 1`, one dim, and append a u32 table of observed frame
//! indices after the values.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::{Grid1D, Grid2D};
use crate::solvers::Domain;

pub const MAGIC: &[u8; 4] = b"NODA";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 52;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Equation {
    Ks,
    Kdv,
    Ns,
}

impl Equation {
    pub fn code(self) -> u8 {
        match self {
            Equation::Ks => 1,
            Equation::Kdv => 2,
            Equation::Ns => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Equation::Ks),
            2 => Some(Equation::Kdv),
            3 => Some(Equation::Ns),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Equation::Ks => "ks",
            Equation::Kdv => "kdv",
            Equation::Ns => "ns",
        }
    }
}

impl std::str::FromStr for Equation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ks" => Ok(Equation::Ks),
            "kdv" => Ok(Equation::Kdv),
            "ns" => Ok(Equation::Ns),
            other => Err(Error::InvalidArgument(format!("unknown equation '{other}'"))),
        }
    }
}

impl std::fmt::Display for Equation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A discretized PDE solution: frames at `0, h, 2h, …`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub equation: Equation,
    pub domain: Domain,
    pub h: f64,
    pub frames: Vec<Vec<f64>>,
    pub seed: u64,
}

impl Trajectory {
    pub fn new(
        equation: Equation,
        domain: Domain,
        h: f64,
        frames: Vec<Vec<f64>>,
        seed: u64,
    ) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InvalidArgument("trajectory needs at least one frame".into()));
        }
        let d = domain.size();
        for (k, f) in frames.iter().enumerate() {
            if f.len() != d {
                return Err(Error::shape(
                    "trajectory",
                    format!("frame {k} has {} values, grid has {d}", f.len()),
                ));
            }
            if !f.iter().all(|v| v.is_finite()) {
                return Err(Error::BlowUp { frame: k });
            }
        }
        Ok(Trajectory {
            equation,
            domain,
            h,
            frames,
            seed,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn frame_size(&self) -> usize {
        self.domain.size()
    }

    /// Keep frames `0..n`.
    pub fn truncated(&self, n: usize) -> Trajectory {
        Trajectory {
            frames: self.frames[..n.min(self.frames.len())].to_vec(),
            ..self.clone()
        }
    }

    /// Subsample every `stride`-th grid point along each axis. Used to store a
    /// resolved simulation on a coarser learning grid.
    pub fn strided(&self, stride: usize) -> Result<Trajectory> {
        let shape = self.domain.shape();
        if stride == 0 || shape.iter().any(|n| n % stride != 0) {
            return Err(Error::InvalidArgument(format!("stride {stride} does not divide grid {shape:?}")));
        }
        let domain = match &self.domain {
            Domain::D1(g) => Domain::D1(Grid1D::new(g.n() / stride, g.length())?),
            Domain::D2(g) => Domain::D2(Grid2D::new(g.nx() / stride, g.ny() / stride)?),
        };
        let frames = self
            .frames
            .iter()
            .map(|f| match &self.domain {
                Domain::D1(_) => f.iter().step_by(stride).copied().collect(),
                Domain::D2(g) => (0..g.nx())
                    .step_by(stride)
                    .flat_map(|i| f[i * g.ny()..(i + 1) * g.ny()].iter().step_by(stride).copied())
                    .collect(),
            })
            .collect();
        Trajectory::new(self.equation, domain, self.h, frames, self.seed)
    }

    /// Frame index nearest to time `t` seconds.
    pub fn frame_at(&self, t: f64) -> usize {
        (t / self.h).round() as usize
    }
}

/// Discretized measurement operator `Ĉ`.
#[derive(Clone, Debug, PartialEq)]
pub enum MeasurementOperator {
    Identity { d: usize },
    DenseRandom {
        p: usize,
        d: usize,
        /// Row-major `p × d`, entries uniform in `[0, 1]`.
        matrix: Vec<f64>,
        seed: u64,
    },
}

impl MeasurementOperator {
    pub fn identity(d: usize) -> Self {
        MeasurementOperator::Identity { d }
    }

    pub fn dense_random(p: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let matrix = (0..p * d).map(|_| rng.random_range(0.0..=1.0)).collect();
        MeasurementOperator::DenseRandom { p, d, matrix, seed }
    }

    /// Dense operator from an explicit row-major `p × d` matrix.
    pub fn from_matrix(p: usize, d: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != p * d {
            return Err(Error::shape(
                "measurement operator",
                format!("{} entries for a {p}x{d} matrix", matrix.len()),
            ));
        }
        Ok(MeasurementOperator::DenseRandom {
            p,
            d,
            matrix,
            seed: 0,
        })
    }

    pub fn p(&self) -> usize {
        match self {
            MeasurementOperator::Identity { d } => *d,
            MeasurementOperator::DenseRandom { p, .. } => *p,
        }
    }

    pub fn d(&self) -> usize {
        match self {
            MeasurementOperator::Identity { d } | MeasurementOperator::DenseRandom { d, .. } => *d,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            MeasurementOperator::Identity { .. } => 0,
            MeasurementOperator::DenseRandom { seed, .. } => *seed,
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, MeasurementOperator::Identity { .. })
    }

    /// Row-major `d × p` transpose; `None` for the identity.
    pub fn transpose(&self) -> Option<Vec<f64>> {
        match self {
            MeasurementOperator::Identity { .. } => None,
            MeasurementOperator::DenseRandom { p, d, matrix, .. } => {
                let mut t = vec![0.0; p * d];
                for i in 0..*p {
                    for j in 0..*d {
                        t[j * p + i] = matrix[i * d + j];
                    }
                }
                Some(t)
            }
        }
    }
}

/// Noiseless measurement `Ĉ z` of one flattened frame.
pub fn apply_measurement(op: &MeasurementOperator, frame: &[f64]) -> Result<Vec<f64>> {
    if frame.len() != op.d() {
        return Err(Error::shape(
            "apply_measurement",
            format!("frame of {} values, operator expects {}", frame.len(), op.d()),
        ));
    }
    match op {
        MeasurementOperator::Identity { .. } => Ok(frame.to_vec()),
        MeasurementOperator::DenseRandom { p, d, matrix, .. } => Ok((0..*p)
            .map(|i| {
                matrix[i * d..(i + 1) * d]
                    .iter()
                    .zip(frame)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()),
    }
}

/// Add white Gaussian noise at the requested SNR, defined against the mean
/// power of the whole observation set.
pub fn add_noise_snr(y_clean: &[Vec<f64>], snr_db: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    if snr_db == f64::INFINITY {
        return Ok(y_clean.to_vec());
    }
    if snr_db.is_nan() {
        return Err(Error::InvalidArgument("SNR must be a number or +inf".into()));
    }
    let count: usize = y_clean.iter().map(Vec::len).sum();
    let power = if count == 0 {
        0.0
    } else {
        y_clean.iter().flatten().map(|v| v * v).sum::<f64>() / count as f64
    };
    if power == 0.0 {
        return Err(Error::ZeroSignalPower);
    }
    let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Numerical(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(y_clean
        .iter()
        .map(|row| row.iter().map(|v| v + normal.sample(&mut rng)).collect())
        .collect())
}

/// Sparse, noisy measurements of a trajectory.
#[derive(Clone, Debug)]
pub struct ObservationSet {
    /// Observed frame indices, strictly increasing.
    pub times: Vec<usize>,
    pub y: Vec<Vec<f64>>,
    pub snr_db: f64,
    pub op: Arc<MeasurementOperator>,
}

impl ObservationSet {
    pub fn new(times: Vec<usize>, y: Vec<Vec<f64>>, snr_db: f64, op: Arc<MeasurementOperator>) -> Result<Self> {
        if times.len() != y.len() {
            return Err(Error::shape(
                "observation set",
                format!("{} times for {} measurements", times.len(), y.len()),
            ));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("observation times must be strictly increasing".into()));
        }
        if let Some(row) = y.iter().find(|r| r.len() != op.p()) {
            return Err(Error::shape(
                "observation set",
                format!("measurement of length {}, operator output {}", row.len(), op.p()),
            ));
        }
        Ok(ObservationSet { times, y, snr_db, op })
    }

    pub fn get(&self, frame: usize) -> Option<&[f64]> {
        self.times
            .binary_search(&frame)
            .ok()
            .map(|i| self.y[i].as_slice())
    }
}

/// Measure `frames` of `traj` through `op` and add noise at `snr_db`.
pub fn observe(
    traj: &Trajectory,
    op: Arc<MeasurementOperator>,
    frames: &[usize],
    snr_db: f64,
    seed: u64,
) -> Result<ObservationSet> {
    let mut times = frames.to_vec();
    times.sort_unstable();
    times.dedup();
    if let Some(&t) = times.last() {
        if t >= traj.n_frames() {
            return Err(Error::InvalidArgument(format!(
                "observation frame {t} outside trajectory of {} frames",
                traj.n_frames()
            )));
        }
    }
    let clean = times
        .iter()
        .map(|&k| apply_measurement(&op, &traj.frames[k]))
        .collect::<Result<Vec<_>>>()?;
    let y = add_noise_snr(&clean, snr_db, seed)?;
    ObservationSet::new(times, y, snr_db, op)
}

/// Which frames get a correction step during a rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    /// Last warm-up frame; frames `1..=t_h` are all corrected.
    pub t_h: usize,
    /// Final frame index of the rollout.
    pub t_f: usize,
    /// Sorted frames in `(t_h, t_f]` that receive a measurement.
    pub assim_times: Vec<usize>,
    pub alpha: f64,
}

impl Schedule {
    pub fn warmup_only(t_h: usize, t_f: usize) -> Self {
        Schedule {
            t_h,
            t_f,
            assim_times: Vec::new(),
            alpha: 0.0,
        }
    }

    pub fn is_corrected(&self, frame: usize) -> bool {
        (frame >= 1 && frame <= self.t_h) || self.assim_times.binary_search(&frame).is_ok()
    }

    /// Every frame the schedule will correct, in order.
    pub fn corrected_frames(&self) -> Vec<usize> {
        (1..=self.t_h.min(self.t_f))
            .chain(self.assim_times.iter().copied())
            .collect()
    }
}

pub fn sample_schedule(t_h: usize, t_f: usize, alpha: f64, seed: u64) -> Result<Schedule> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    if t_h >= t_f {
        return Err(Error::InvalidArgument(format!(
            "warm-up end {t_h} must precede final frame {t_f}"
        )));
    }
    let horizon = t_f - t_h;
    let count = (alpha * horizon as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assim_times: Vec<usize> = index::sample(&mut rng, horizon, count)
        .into_iter()
        .map(|i| t_h + 1 + i)
        .collect();
    assim_times.sort_unstable();
    Ok(Schedule {
        t_h,
        t_f,
        assim_times,
        alpha,
    })
}

/// Split by index order into `(train, test)`.
pub fn split<T>(mut items: Vec<T>, n_train: usize) -> Result<(Vec<T>, Vec<T>)> {
    if n_train > items.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot take {n_train} training items from {}",
            items.len()
        )));
    }
    let test = items.split_off(n_train);
    Ok((items, test))
}

struct Header {
    equation: Equation,
    ndims: u8,
    nx: u32,
    ny: u32,
    n_frames: u32,
    h: f64,
    length_x: f64,
    length_y: f64,
    seed: u64,
}

impl Header {
    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.equation.code());
        out.push(self.ndims);
        out.push(0);
        out.extend_from_slice(&self.nx.to_le_bytes());
        out.extend_from_slice(&self.ny.to_le_bytes());
        out.extend_from_slice(&self.n_frames.to_le_bytes());
        out.extend_from_slice(&self.h.to_le_bytes());
        out.extend_from_slice(&self.length_x.to_le_bytes());
        out.extend_from_slice(&self.length_y.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic {magic:?}, expected \"NODA\""),
            });
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        let code = r.u8()?;
        let equation = Equation::from_code(code).ok_or_else(|| Error::Format {
            offset: 5,
            message: format!("unknown equation code {code}"),
        })?;
        let ndims = r.u8()?;
        let dtype = r.u8()?;
        if dtype != 0 {
            return Err(Error::Format {
                offset: 7,
                message: format!("unsupported dtype {dtype}"),
            });
        }
        Ok(Header {
            equation,
            ndims,
            nx: r.u32()?,
            ny: r.u32()?,
            n_frames: r.u32()?,
            h: r.f64()?,
            length_x: r.f64()?,
            length_y: r.f64()?,
            seed: r.u64()?,
        })
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated: needed {n} bytes, {} left", self.remaining()),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} exceeds u32")))
}

pub fn encode_trajectory(traj: &Trajectory) -> Result<Vec<u8>> {
    let shape = traj.domain.shape();
    let lengths = traj.domain.lengths();
    let header = Header {
        equation: traj.equation,
        ndims: traj.domain.ndims() as u8,
        nx: to_u32(shape[0], "nx")?,
        ny: to_u32(shape.get(1).copied().unwrap_or(1), "ny")?,
        n_frames: to_u32(traj.n_frames(), "frame count")?,
        h: traj.h,
        length_x: lengths[0],
        length_y: lengths.get(1).copied().unwrap_or(0.0),
        seed: traj.seed,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + traj.n_frames() * traj.frame_size() * 8);
    header.encode(&mut out);
    for f in &traj.frames {
        for v in f {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_trajectory(bytes: &[u8]) -> Result<Trajectory> {
    let mut r = Reader::new(bytes);
    let hd = Header::decode(&mut r)?;
    let domain = match hd.ndims {
        1 => Domain::D1(Grid1D::new(hd.nx as usize, hd.length_x).map_err(|e| Error::Format {
            offset: 8,
            message: e.to_string(),
        })?),
        2 => Domain::D2(Grid2D::new(hd.nx as usize, hd.ny as usize).map_err(|e| Error::Format {
            offset: 8,
            message: e.to_string(),
        })?),
        other => {
            return Err(Error::Format {
                offset: 6,
                message: format!("unsupported dimension count {other}"),
            })
        }
    };
    let d = domain.size();
    let mut frames = Vec::with_capacity(hd.n_frames as usize);
    for _ in 0..hd.n_frames {
        frames.push(r.f64s(d)?);
    }
    if r.remaining() != 0 {
        return Err(Error::Format {
            offset: r.offset(),
            message: format!("{} trailing bytes", r.remaining()),
        });
    }
    Trajectory::new(hd.equation, domain, hd.h, frames, hd.seed)
}

pub fn write_trajectory(path: impl AsRef<Path>, traj: &Trajectory) -> Result<()> {
    fs::write(path, encode_trajectory(traj)?)?;
    Ok(())
}

pub fn read_trajectory(path: impl AsRef<Path>) -> Result<Trajectory> {
    decode_trajectory(&fs::read(path)?)
}

/// Observation values as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationRecord {
    pub equation: Equation,
    pub h: f64,
    pub length_x: f64,
    pub length_y: f64,
    /// Seed of the measurement operator.
    pub seed: u64,
    pub times: Vec<usize>,
    pub y: Vec<Vec<f64>>,
}

pub fn encode_observations(obs: &ObservationSet, traj: &Trajectory) -> Result<Vec<u8>> {
    let lengths = traj.domain.lengths();
    let header = Header {
        equation: traj.equation,
        ndims: 1,
        nx: to_u32(obs.op.p(), "measurement dimension")?,
        ny: 1,
        n_frames: to_u32(obs.times.len(), "observation count")?,
        h: traj.h,
        length_x: lengths[0],
        length_y: lengths.get(1).copied().unwrap_or(0.0),
        seed: obs.op.seed(),
    };
    let mut out = Vec::new();
    header.encode(&mut out);
    for row in &obs.y {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for &t in &obs.times {
        out.extend_from_slice(&to_u32(t, "frame index")?.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_observations(bytes: &[u8]) -> Result<ObservationRecord> {
    let mut r = Reader::new(bytes);
    let hd = Header::decode(&mut r)?;
    let p = hd.nx as usize;
    let y = (0..hd.n_frames)
        .map(|_| r.f64s(p))
        .collect::<Result<Vec<_>>>()?;
    let times = (0..hd.n_frames)
        .map(|_| r.u32().map(|t| t as usize))
        .collect::<Result<Vec<_>>>()?;
    if r.remaining() != 0 {
        return Err(Error::Format {
            offset: r.offset(),
            message: format!("{} trailing bytes", r.remaining()),
        });
    }
    Ok(ObservationRecord {
        equation: hd.equation,
        h: hd.h,
        length_x: hd.length_x,
        length_y: hd.length_y,
        seed: hd.seed,
        times,
        y,
    })
}

pub fn write_observations(path: impl AsRef<Path>, obs: &ObservationSet, traj: &Trajectory) -> Result<()> {
    fs::write(path, encode_observations(obs, traj)?)?;
    Ok(())
}

pub fn read_observations(path: impl AsRef<Path>) -> Result<ObservationRecord> {
    decode_observations(&fs::read(path)?)
}

/// All `*.noda` trajectory files in a directory, sorted by name.
pub fn read_trajectory_dir(dir: impl AsRef<Path>) -> Result<Vec<Trajectory>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "noda"))
        .collect();
    paths.sort();
    paths.iter().map(read_trajectory).collect()
}
