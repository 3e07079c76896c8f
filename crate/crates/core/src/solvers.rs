//! Ground-truth generators: ETDRK4 for the 1D Kuramoto–Sivashinsky and
//! Korteweg–de Vries equations, and a Crank–Nicolson pseudo-spectral scheme
//! for 2D Navier–Stokes in vorticity form on the unit torus.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::dataset::{Equation, Trajectory};
use crate::error::{Error, Result};
use crate::grid::{self, dealias_mask, fft_nd, ifft_nd, Grid1D, Grid2D};

const CONTOUR_POINTS: usize = 32;

/// Spatial domain of a trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Domain {
    D1(Grid1D),
    D2(Grid2D),
}

impl Domain {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            Domain::D1(g) => vec![g.n()],
            Domain::D2(g) => vec![g.nx(), g.ny()],
        }
    }

    pub fn lengths(&self) -> Vec<f64> {
        match self {
            Domain::D1(g) => vec![g.length()],
            Domain::D2(_) => vec![1.0, 1.0],
        }
    }

    /// Flattened point count.
    pub fn size(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn ndims(&self) -> usize {
        match self {
            Domain::D1(_) => 1,
            Domain::D2(_) => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KsConfig {
    pub grid: Grid1D,
    pub h: f64,
    pub inner_steps: usize,
}

impl Default for KsConfig {
    fn default() -> Self {
        KsConfig {
            grid: Grid1D::new(512, 64.0 * PI).expect("static grid"),
            h: 0.25,
            inner_steps: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KdvConfig {
    pub grid: Grid1D,
    pub h: f64,
    pub inner_steps: usize,
}

impl Default for KdvConfig {
    fn default() -> Self {
        KdvConfig {
            grid: Grid1D::new(128, 128.0).expect("static grid"),
            h: 0.5,
            inner_steps: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NsConfig {
    pub grid: Grid2D,
    pub h: f64,
    pub re: f64,
    pub inner_steps: usize,
}

impl NsConfig {
    pub fn viscosity(&self) -> f64 {
        1.0 / self.re
    }
}

impl Default for NsConfig {
    fn default() -> Self {
        NsConfig {
            grid: Grid2D::new(64, 64).expect("static grid"),
            h: 1.0,
            re: 40.0,
            inner_steps: 16,
        }
    }
}

/// `f(x, y) = sin(2π(x+y)) + cos(2π(x+y))`.
pub fn ns_forcing(grid: &Grid2D) -> Vec<f64> {
    let (nx, ny) = (grid.nx(), grid.ny());
    let mut f = Vec::with_capacity(nx * ny);
    for i in 0..nx {
        for j in 0..ny {
            let s = 2.0 * PI * (i as f64 / nx as f64 + j as f64 / ny as f64);
            f.push(s.sin() + s.cos());
        }
    }
    f
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SolverConfig {
    Ks(KsConfig),
    Kdv(KdvConfig),
    Ns(NsConfig),
}

impl SolverConfig {
    pub fn equation(&self) -> Equation {
        match self {
            SolverConfig::Ks(_) => Equation::Ks,
            SolverConfig::Kdv(_) => Equation::Kdv,
            SolverConfig::Ns(_) => Equation::Ns,
        }
    }

    pub fn h(&self) -> f64 {
        match self {
            SolverConfig::Ks(c) => c.h,
            SolverConfig::Kdv(c) => c.h,
            SolverConfig::Ns(c) => c.h,
        }
    }

    pub fn domain(&self) -> Domain {
        match self {
            SolverConfig::Ks(c) => Domain::D1(c.grid),
            SolverConfig::Kdv(c) => Domain::D1(c.grid),
            SolverConfig::Ns(c) => Domain::D2(c.grid),
        }
    }

    fn validate(&self) -> Result<()> {
        let (h, inner) = match self {
            SolverConfig::Ks(c) => (c.h, c.inner_steps),
            SolverConfig::Kdv(c) => (c.h, c.inner_steps),
            SolverConfig::Ns(c) => {
                if !(c.re > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "Reynolds number must be positive, got {}",
                        c.re
                    )));
                }
                (c.h, c.inner_steps)
            }
        };
        if !(h > 0.0) || inner == 0 {
            return Err(Error::InvalidArgument(format!(
                "timestep must be positive and inner_steps >= 1 (h={h}, inner_steps={inner})"
            )));
        }
        Ok(())
    }
}

/// Initial-condition sampler parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GrfSpec {
    /// Gaussian random field with spectral amplitude `(|k|² + τ²)^(-decay/2)`.
    Matern {
        decay: f64,
        tau: f64,
        amplitude: f64,
        seed: u64,
    },
    /// Sum of the lowest `modes` sine/cosine pairs with unit-variance
    /// Gaussian amplitudes, rescaled so that `max|z0| == peak`.
    LowModes { modes: usize, peak: f64, seed: u64 },
}

impl GrfSpec {
    pub fn seed(&self) -> u64 {
        match self {
            GrfSpec::Matern { seed, .. } | GrfSpec::LowModes { seed, .. } => *seed,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        match self {
            GrfSpec::Matern {
                decay,
                tau,
                amplitude,
                ..
            } => GrfSpec::Matern {
                decay,
                tau,
                amplitude,
                seed,
            },
            GrfSpec::LowModes { modes, peak, .. } => GrfSpec::LowModes { modes, peak, seed },
        }
    }

    /// Shipped default for each equation.
    pub fn default_for(equation: Equation, seed: u64) -> Self {
        match equation {
            Equation::Ns => {
                let tau: f64 = 7.0;
                let decay = 2.5;
                GrfSpec::Matern {
                    decay,
                    tau,
                    amplitude: 2f64.sqrt() * tau.powf(decay - 1.0),
                    seed,
                }
            }
            Equation::Ks | Equation::Kdv => GrfSpec::LowModes {
                modes: 10,
                peak: 2.0,
                seed,
            },
        }
    }
}

pub fn sample_initial_condition(spec: &GrfSpec, domain: &Domain) -> Vec<f64> {
    let shape = domain.shape();
    let lengths = domain.lengths();
    let total: usize = shape.iter().product();
    match *spec {
        GrfSpec::Matern {
            decay,
            tau,
            amplitude,
            seed,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut c: Vec<Complex64> = (0..total)
                .map(|_| Complex64::new(StandardNormal.sample(&mut rng), 0.0))
                .collect();
            fft_nd(&mut c, &shape);
            let ks: Vec<Vec<f64>> = shape
                .iter()
                .zip(&lengths)
                .map(|(&n, &l)| grid::axis_wavenumbers(n, l))
                .collect();
            let norm = (total as f64).sqrt() * amplitude;
            for (flat, v) in c.iter_mut().enumerate() {
                let mut rem = flat;
                let mut k2 = 0.0;
                for axis in (0..shape.len()).rev() {
                    let i = rem % shape[axis];
                    rem /= shape[axis];
                    k2 += ks[axis][i] * ks[axis][i];
                }
                *v *= norm * (k2 + tau * tau).powf(-decay / 2.0);
            }
            c[0] = Complex64::new(0.0, 0.0);
            ifft_nd(&mut c, &shape);
            c.into_iter().map(|v| v.re).collect()
        }
        GrfSpec::LowModes { modes, peak, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let amps: Vec<(f64, f64)> = (0..modes)
                .map(|_| (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)))
                .collect();
            let mut z = vec![0.0; total];
            // 2D fields use modes along both axes jointly via x + y phases
            for (flat, v) in z.iter_mut().enumerate() {
                let mut phase = 0.0;
                let mut rem = flat;
                for axis in (0..shape.len()).rev() {
                    let i = rem % shape[axis];
                    rem /= shape[axis];
                    phase += 2.0 * PI * i as f64 / shape[axis] as f64;
                }
                for (m, (a, b)) in amps.iter().enumerate() {
                    let th = (m + 1) as f64 * phase;
                    *v += a * th.cos() + b * th.sin();
                }
            }
            let max = z.iter().map(|v| v.abs()).fold(0.0, f64::max);
            if max > 0.0 {
                let s = peak / max;
                z.iter_mut().for_each(|v| *v *= s);
            }
            z
        }
    }
}

fn check_finite(state: &[f64], frame: usize) -> Result<()> {
    if state.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::BlowUp { frame })
    }
}

/// Exponential time differencing RK4 for `v̂' = L v̂ + N(v)` with
/// `N(v) = -v v_x`, coefficients precomputed by contour averaging.
#[derive(Clone, Debug)]
pub struct Etdrk4 {
    n: usize,
    e: Vec<Complex64>,
    e2: Vec<Complex64>,
    q: Vec<Complex64>,
    f1: Vec<Complex64>,
    f2: Vec<Complex64>,
    f3: Vec<Complex64>,
    nonlinear_factor: Vec<Complex64>,
    nonlinear: bool,
}

impl Etdrk4 {
    pub fn new(grid: &Grid1D, symbol: impl Fn(f64) -> Complex64, dt: f64) -> Self {
        let n = grid.n();
        let k = grid.wavenumbers();
        let mask = dealias_mask(n);
        let roots: Vec<Complex64> = (1..=CONTOUR_POINTS)
            .map(|m| {
                Complex64::from_polar(1.0, PI * (m as f64 - 0.5) / CONTOUR_POINTS as f64 * 2.0)
            })
            .collect();
        let mut s = Etdrk4 {
            n,
            e: Vec::with_capacity(n),
            e2: Vec::with_capacity(n),
            q: Vec::with_capacity(n),
            f1: Vec::with_capacity(n),
            f2: Vec::with_capacity(n),
            f3: Vec::with_capacity(n),
            nonlinear_factor: Vec::with_capacity(n),
            nonlinear: true,
        };
        let m = CONTOUR_POINTS as f64;
        for j in 0..n {
            let lin = symbol(k[j]) * dt;
            s.e.push(lin.exp());
            s.e2.push((lin / 2.0).exp());
            let (mut q, mut f1, mut f2, mut f3) = (Complex64::default(), Complex64::default(), Complex64::default(), Complex64::default());
            for root in &roots {
                let r = lin + root;
                let er = r.exp();
                let r3 = r * r * r;
                q += ((r / 2.0).exp() - 1.0) / r;
                f1 += (-4.0 - r + er * (4.0 - 3.0 * r + r * r)) / r3;
                f2 += (2.0 + r + er * (r - 2.0)) / r3;
                f3 += (-4.0 - 3.0 * r - r * r + er * (4.0 - r)) / r3;
            }
            s.q.push(q * dt / m);
            s.f1.push(f1 * dt / m);
            s.f2.push(f2 * dt / m);
            s.f3.push(f3 * dt / m);
            let g = if mask[j] {
                Complex64::new(0.0, -0.5 * k[j])
            } else {
                Complex64::new(0.0, 0.0)
            };
            s.nonlinear_factor.push(g);
        }
        s
    }

    /// Kuramoto–Sivashinsky: `L(k) = k² - k⁴`.
    pub fn kuramoto_sivashinsky(config: &KsConfig) -> Self {
        let dt = config.h / config.inner_steps as f64;
        Self::new(&config.grid, |k| Complex64::new(k * k - k.powi(4), 0.0), dt)
    }

    /// Korteweg–de Vries `z_t = -z z_x - z_xxx`: `L(k) = i k³`.
    pub fn korteweg_de_vries(config: &KdvConfig) -> Self {
        let dt = config.h / config.inner_steps as f64;
        Self::new(&config.grid, |k| Complex64::new(0.0, k.powi(3)), dt)
    }

    /// Drop the nonlinear term, leaving the exact linear propagator.
    pub fn linear_only(mut self) -> Self {
        self.nonlinear = false;
        self
    }

    fn nonlinear_term(&self, v: &[Complex64], out: &mut [Complex64], buf: &mut [Complex64]) {
        if !self.nonlinear {
            out.iter_mut().for_each(|c| *c = Complex64::default());
            return;
        }
        buf.copy_from_slice(v);
        ifft_nd(buf, &[self.n]);
        for c in buf.iter_mut() {
            *c = Complex64::new(c.re * c.re, 0.0);
        }
        fft_nd(buf, &[self.n]);
        for ((o, b), g) in out.iter_mut().zip(buf.iter()).zip(&self.nonlinear_factor) {
            *o = b * g;
        }
    }

    /// Advance the spectral state by one substep.
    pub fn step_spectral(&self, v: &mut [Complex64]) {
        let n = self.n;
        let zero = Complex64::default();
        let mut buf = vec![zero; n];
        let (mut nv, mut na, mut nb, mut nc) = (vec![zero; n], vec![zero; n], vec![zero; n], vec![zero; n]);
        let mut a = vec![zero; n];
        let mut b = vec![zero; n];
        let mut c = vec![zero; n];
        self.nonlinear_term(v, &mut nv, &mut buf);
        for j in 0..n {
            a[j] = self.e2[j] * v[j] + self.q[j] * nv[j];
        }
        self.nonlinear_term(&a, &mut na, &mut buf);
        for j in 0..n {
            b[j] = self.e2[j] * v[j] + self.q[j] * na[j];
        }
        self.nonlinear_term(&b, &mut nb, &mut buf);
        for j in 0..n {
            c[j] = self.e2[j] * a[j] + self.q[j] * (2.0 * nb[j] - nv[j]);
        }
        self.nonlinear_term(&c, &mut nc, &mut buf);
        for j in 0..n {
            v[j] = self.e[j] * v[j]
                + nv[j] * self.f1[j]
                + 2.0 * (na[j] + nb[j]) * self.f2[j]
                + nc[j] * self.f3[j];
        }
    }

    /// One substep on a real field.
    pub fn step(&self, state: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.n {
            return Err(Error::shape(
                "etdrk4_step",
                format!("state of {} values on a {}-point grid", state.len(), self.n),
            ));
        }
        check_finite(state, 0)?;
        let mut v: Vec<Complex64> = state.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        fft_nd(&mut v, &[self.n]);
        self.step_spectral(&mut v);
        ifft_nd(&mut v, &[self.n]);
        let out: Vec<f64> = v.into_iter().map(|c| c.re).collect();
        check_finite(&out, 0)?;
        Ok(out)
    }
}

/// Single ETDRK4 substep for KS or KdV.
pub fn etdrk4_step(state: &[f64], config: &SolverConfig) -> Result<Vec<f64>> {
    match config {
        SolverConfig::Ks(c) => Etdrk4::kuramoto_sivashinsky(c).step(state),
        SolverConfig::Kdv(c) => Etdrk4::korteweg_de_vries(c).step(state),
        SolverConfig::Ns(_) => Err(Error::InvalidArgument(
            "ETDRK4 is used for the 1D equations only".into(),
        )),
    }
}

/// Pseudo-spectral vorticity stepper: explicit advection and forcing,
/// Crank–Nicolson diffusion.
#[derive(Clone, Debug)]
pub struct NsStepper {
    shape: [usize; 2],
    dt: f64,
    nu: f64,
    kx: Vec<f64>,
    ky: Vec<f64>,
    mask: Vec<bool>,
    forcing_hat: Vec<Complex64>,
    nonlinear: bool,
}

impl NsStepper {
    pub fn new(config: &NsConfig) -> Self {
        let (nx, ny) = (config.grid.nx(), config.grid.ny());
        let (kx, ky) = config.grid.wavenumbers();
        let mx = dealias_mask(nx);
        let my = dealias_mask(ny);
        let mut mask = Vec::with_capacity(nx * ny);
        for i in 0..nx {
            for j in 0..ny {
                mask.push(mx[i] && my[j]);
            }
        }
        let mut forcing_hat: Vec<Complex64> = ns_forcing(&config.grid)
            .into_iter()
            .map(|v| Complex64::new(v, 0.0))
            .collect();
        fft_nd(&mut forcing_hat, &[nx, ny]);
        NsStepper {
            shape: [nx, ny],
            dt: config.h / config.inner_steps as f64,
            nu: config.viscosity(),
            kx,
            ky,
            mask,
            forcing_hat,
            nonlinear: true,
        }
    }

    pub fn without_forcing(mut self) -> Self {
        self.forcing_hat.iter_mut().for_each(|c| *c = Complex64::default());
        self
    }

    pub fn linear_only(mut self) -> Self {
        self.nonlinear = false;
        self
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    fn k2(&self, i: usize, j: usize) -> f64 {
        self.kx[i] * self.kx[i] + self.ky[j] * self.ky[j]
    }

    /// Crank–Nicolson amplification of the diffusion term for mode `(i, j)`.
    pub fn diffusion_factor(&self, i: usize, j: usize) -> f64 {
        let a = 0.5 * self.dt * self.nu * self.k2(i, j);
        (1.0 - a) / (1.0 + a)
    }

    pub fn step_spectral(&self, w: &mut [Complex64]) {
        let [nx, ny] = self.shape;
        let shape = [nx, ny];
        let zero = Complex64::default();
        let mut nl_hat = vec![zero; nx * ny];
        if self.nonlinear {
            let (u, v) = velocity_spectral(&self.kx, &self.ky, w);
            let mut wx = vec![zero; nx * ny];
            let mut wy = vec![zero; nx * ny];
            for i in 0..nx {
                for j in 0..ny {
                    let idx = i * ny + j;
                    wx[idx] = Complex64::new(0.0, self.kx[i]) * w[idx];
                    wy[idx] = Complex64::new(0.0, self.ky[j]) * w[idx];
                }
            }
            let mut u = u;
            let mut v = v;
            for buf in [&mut u, &mut v, &mut wx, &mut wy] {
                ifft_nd(buf, &shape);
            }
            for idx in 0..nx * ny {
                nl_hat[idx] = Complex64::new(-(u[idx].re * wx[idx].re + v[idx].re * wy[idx].re), 0.0);
            }
            fft_nd(&mut nl_hat, &shape);
            for (c, &keep) in nl_hat.iter_mut().zip(&self.mask) {
                if !keep {
                    *c = zero;
                }
            }
        }
        for i in 0..nx {
            for j in 0..ny {
                let idx = i * ny + j;
                let a = 0.5 * self.dt * self.nu * self.k2(i, j);
                w[idx] = ((1.0 - a) * w[idx] + self.dt * (nl_hat[idx] + self.forcing_hat[idx])) / (1.0 + a);
            }
        }
        w[0] = zero;
    }

    pub fn step(&self, vorticity: &[f64]) -> Result<Vec<f64>> {
        let shape = self.shape;
        if vorticity.len() != shape[0] * shape[1] {
            return Err(Error::shape(
                "ns_crank_nicolson_step",
                format!("vorticity of {} values on a {:?} grid", vorticity.len(), shape),
            ));
        }
        check_finite(vorticity, 0)?;
        let mut w: Vec<Complex64> = vorticity.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        fft_nd(&mut w, &shape);
        self.step_spectral(&mut w);
        ifft_nd(&mut w, &shape);
        let out: Vec<f64> = w.into_iter().map(|c| c.re).collect();
        check_finite(&out, 0)?;
        Ok(out)
    }
}

fn velocity_spectral(kx: &[f64], ky: &[f64], w: &[Complex64]) -> (Vec<Complex64>, Vec<Complex64>) {
    let (nx, ny) = (kx.len(), ky.len());
    let mut u = vec![Complex64::default(); nx * ny];
    let mut v = vec![Complex64::default(); nx * ny];
    for i in 0..nx {
        for j in 0..ny {
            let idx = i * ny + j;
            let k2 = kx[i] * kx[i] + ky[j] * ky[j];
            if k2 == 0.0 {
                continue;
            }
            let psi = w[idx] / k2;
            u[idx] = Complex64::new(0.0, ky[j]) * psi;
            v[idx] = Complex64::new(0.0, -kx[i]) * psi;
        }
    }
    (u, v)
}

/// Velocity `(u, v) = (∂ψ/∂y, -∂ψ/∂x)` with `-Δψ = ω`.
pub fn velocity_from_vorticity(grid: &Grid2D, vorticity: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let shape = [grid.nx(), grid.ny()];
    let (kx, ky) = grid.wavenumbers();
    let mut w: Vec<Complex64> = vorticity.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft_nd(&mut w, &shape);
    let (mut u, mut v) = velocity_spectral(&kx, &ky, &w);
    ifft_nd(&mut u, &shape);
    ifft_nd(&mut v, &shape);
    (
        u.into_iter().map(|c| c.re).collect(),
        v.into_iter().map(|c| c.re).collect(),
    )
}

/// Single Crank–Nicolson substep of the vorticity equation.
pub fn ns_crank_nicolson_step(vorticity: &[f64], config: &NsConfig) -> Result<Vec<f64>> {
    NsStepper::new(config).step(vorticity)
}

fn frame_count(t_f: f64, h: f64) -> Result<usize> {
    let ratio = t_f / h;
    let steps = ratio.round();
    if !(t_f >= 0.0) || (ratio - steps).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "t_f={t_f} is not a non-negative multiple of h={h}"
        )));
    }
    Ok(steps as usize + 1)
}

/// Integrate from `z0` and record frames at `0, h, …, t_f`.
pub fn rollout(config: &SolverConfig, z0: &[f64], t_f: f64) -> Result<Trajectory> {
    config.validate()?;
    let domain = config.domain();
    let shape = domain.shape();
    if z0.len() != domain.size() {
        return Err(Error::shape(
            "rollout",
            format!("initial state of {} values on grid {:?}", z0.len(), shape),
        ));
    }
    check_finite(z0, 0)?;
    let n_frames = frame_count(t_f, config.h())?;
    let mut frames = Vec::with_capacity(n_frames);
    frames.push(z0.to_vec());
    let mut v: Vec<Complex64> = z0.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft_nd(&mut v, &shape);

    let mut advance: Box<dyn FnMut(&mut [Complex64])> = match config {
        SolverConfig::Ks(c) => {
            let s = Etdrk4::kuramoto_sivashinsky(c);
            let inner = c.inner_steps;
            Box::new(move |v| (0..inner).for_each(|_| s.step_spectral(v)))
        }
        SolverConfig::Kdv(c) => {
            let s = Etdrk4::korteweg_de_vries(c);
            let inner = c.inner_steps;
            Box::new(move |v| (0..inner).for_each(|_| s.step_spectral(v)))
        }
        SolverConfig::Ns(c) => {
            let s = NsStepper::new(c);
            let inner = c.inner_steps;
            Box::new(move |v| (0..inner).for_each(|_| s.step_spectral(v)))
        }
    };

    for frame in 1..n_frames {
        advance(&mut v);
        let mut buf = v.clone();
        ifft_nd(&mut buf, &shape);
        let z: Vec<f64> = buf.into_iter().map(|c| c.re).collect();
        check_finite(&z, frame)?;
        frames.push(z);
    }
    Trajectory::new(config.equation(), domain, config.h(), frames, 0)
}

/// Sample an initial condition and integrate it.
pub fn generate(config: &SolverConfig, ic: &GrfSpec, t_f: f64) -> Result<Trajectory> {
    let z0 = sample_initial_condition(ic, &config.domain());
    let mut traj = rollout(config, &z0, t_f)?;
    traj.seed = ic.seed();
    Ok(traj)
}

/// Generate `count` trajectories in parallel with seeds `base_seed + i`.
pub fn generate_many(
    config: &SolverConfig,
    ic: &GrfSpec,
    base_seed: u64,
    count: usize,
    t_f: f64,
) -> Result<Vec<Trajectory>> {
    (0..count)
        .into_par_iter()
        .map(|i| generate(config, &ic.with_seed(base_seed + i as u64), t_f))
        .collect()
}
