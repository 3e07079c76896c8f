use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use noda::assimilation::rollout as noda_rollout;
use noda::dataset::{
    observe, read_trajectory, read_trajectory_dir, sample_schedule, write_trajectory, Equation, MeasurementOperator,
    Schedule, Trajectory,
};
use noda::evaluation::{emit_csv, relmse, time_per_step, ExperimentContext, ExperimentSpec, MetricRow};
use noda::grid::{Grid1D, Grid2D};
use noda::solvers::{generate_many, GrfSpec, KdvConfig, KsConfig, NsConfig, SolverConfig};
use noda::training::{gradient_check, load_model, train, TrainConfig};
use noda::Error;

const EXIT_USAGE: u8 = 2;
const EXIT_FORMAT: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser)]
#[command(name = "noda", version, about = "Neural-operator data assimilation on semilinear PDEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MeasurementKind {
    Identity,
    Random,
}

#[derive(Subcommand)]
enum Command {
    /// Generate ground-truth trajectories.
    Generate {
        #[arg(long)]
        equation: Equation,
        #[arg(long = "n-traj", default_value_t = 1)]
        n_traj: usize,
        /// Final time in seconds.
        #[arg(long)]
        tf: f64,
        /// Recorded timestep in seconds; equation default if omitted.
        #[arg(long)]
        dt: Option<f64>,
        /// Grid points, `N` or `NX,NY`.
        #[arg(long, value_delimiter = ',')]
        resolution: Option<Vec<usize>>,
        #[arg(long)]
        re: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a directory of trajectories.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Warm up and roll out a model on one trajectory.
    Rollout {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        traj: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
        /// SNR in dB, or `inf` for noise-free observations.
        #[arg(long, default_value = "inf", value_parser = parse_snr)]
        snr: f64,
        /// Warm-up horizon in seconds.
        #[arg(long)]
        th: f64,
        #[arg(long, value_enum, default_value_t = MeasurementKind::Identity)]
        c: MeasurementKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score an estimate against ground truth.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Start of the scored window in seconds.
        #[arg(long)]
        th: f64,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Run the experiments described by a JSON spec.
    Experiment {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time predict-only against predict+correct steps.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        traj: PathBuf,
    },
}

fn parse_snr(s: &str) -> Result<f64, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
        t => t.parse::<f64>().map_err(|e| format!("invalid SNR {s:?}: {e}")),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Grid(_) | Error::InvalidArgument(_) | Error::Config(_) => EXIT_USAGE,
        Error::BlowUp { .. } | Error::Numerical(_) | Error::Autodiff(_) | Error::ZeroSignalPower => EXIT_NUMERICAL,
        Error::Shape { .. }
        | Error::Format { .. }
        | Error::MissingObservation { .. }
        | Error::Io(_)
        | Error::Csv(_)
        | Error::Json(_) => EXIT_FORMAT,
    }
}

fn solver_config(
    equation: Equation,
    dt: Option<f64>,
    resolution: Option<&[usize]>,
    re: Option<f64>,
) -> noda::Result<SolverConfig> {
    let one = |r: Option<&[usize]>, default: usize| -> noda::Result<usize> {
        match r {
            None => Ok(default),
            Some([n]) => Ok(*n),
            Some(v) => Err(Error::InvalidArgument(format!("{equation} takes one resolution value, got {}", v.len()))),
        }
    };
    if re.is_some() && equation != Equation::Ns {
        return Err(Error::InvalidArgument("--re only applies to ns".into()));
    }
    Ok(match equation {
        Equation::Ks => {
            let d = KsConfig::default();
            let grid = Grid1D::new(one(resolution, d.grid.n())?, 64.0 * PI)?;
            SolverConfig::Ks(KsConfig { grid, h: dt.unwrap_or(d.h), ..d })
        }
        Equation::Kdv => {
            let d = KdvConfig::default();
            let grid = Grid1D::new(one(resolution, d.grid.n())?, d.grid.length())?;
            SolverConfig::Kdv(KdvConfig { grid, h: dt.unwrap_or(d.h), ..d })
        }
        Equation::Ns => {
            let d = NsConfig::default();
            let (nx, ny) = match resolution {
                None => (d.grid.nx(), d.grid.ny()),
                Some([n]) => (*n, *n),
                Some([nx, ny]) => (*nx, *ny),
                Some(v) => return Err(Error::InvalidArgument(format!("ns takes one or two resolution values, got {}", v.len()))),
            };
            SolverConfig::Ns(NsConfig { grid: Grid2D::new(nx, ny)?, h: dt.unwrap_or(d.h), re: re.unwrap_or(d.re), ..d })
        }
    })
}

fn check_positive(name: &str, v: f64) -> noda::Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} must be positive and finite, got {v}")))
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    equation: Equation,
    n_traj: usize,
    tf: f64,
    dt: Option<f64>,
    resolution: Option<Vec<usize>>,
    re: Option<f64>,
    seed: u64,
    out: &Path,
) -> noda::Result<()> {
    check_positive("--tf", tf)?;
    if let Some(dt) = dt {
        check_positive("--dt", dt)?;
    }
    if let Some(re) = re {
        check_positive("--re", re)?;
    }
    if n_traj == 0 {
        return Err(Error::InvalidArgument("--n-traj must be at least 1".into()));
    }
    let config = solver_config(equation, dt, resolution.as_deref(), re)?;
    let trajs = generate_many(&config, &GrfSpec::default_for(equation, seed), seed, n_traj, tf)?;
    fs::create_dir_all(out)?;
    for (i, t) in trajs.iter().enumerate() {
        write_trajectory(out.join(format!("traj_{i:05}.noda")), t)?;
    }
    info!("wrote {n_traj} {equation} trajectories of {} frames to {}", trajs[0].n_frames(), out.display());
    Ok(())
}

fn cmd_train(data: &Path, config: Option<&Path>, out: &Path) -> noda::Result<()> {
    let trajs = read_trajectory_dir(data)?;
    let first = trajs
        .first()
        .ok_or_else(|| Error::InvalidArgument(format!("no .noda files in {}", data.display())))?;
    let cfg = match config {
        Some(p) => TrainConfig::parse(&fs::read_to_string(p)?)?,
        None => TrainConfig::reference(first.equation),
    };
    info!("training on {} trajectories for {} epochs", trajs.len(), cfg.epochs);
    let outcome = train(&trajs, &cfg)?;
    outcome.params.save(out)?;
    if let Some(last) = outcome.history.last() {
        info!("final epoch loss {last:.6}");
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_rollout(
    model: &Path,
    traj: &Path,
    alpha: f64,
    snr: f64,
    th: f64,
    c: MeasurementKind,
    seed: u64,
    out: &Path,
) -> noda::Result<()> {
    let truth = read_trajectory(traj)?;
    let (predictor, mut corrector) = load_model(model)?;
    let t_f = truth.n_frames() - 1;
    let t_h = truth.frame_at(th);
    if t_h < 1 || t_h > t_f {
        return Err(Error::InvalidArgument(format!("--th {th} s maps to frame {t_h}, outside 1..={t_f}")));
    }
    let d = truth.frame_size();
    let op = Arc::new(match c {
        MeasurementKind::Identity => MeasurementOperator::identity(d),
        MeasurementKind::Random => MeasurementOperator::dense_random(d, d, seed),
    });
    if let Some(corr) = corrector.as_mut() {
        corr.attach_operator(&op)?;
    }
    let schedule = if alpha > 0.0 {
        sample_schedule(t_h, t_f, alpha, seed.wrapping_add(2))?
    } else {
        Schedule::warmup_only(t_h, t_f)
    };
    let frames: Vec<usize> = (0..=t_f).collect();
    let obs = observe(&truth, Arc::clone(&op), &frames, snr, seed.wrapping_add(1))?;
    let result = noda_rollout(&predictor, corrector.as_ref(), &truth.frames[0], &truth.domain.shape(), &obs, &schedule)?;
    let est = Trajectory::new(truth.equation, truth.domain, truth.h, result.estimates, truth.seed)?;
    write_trajectory(out, &est)?;
    info!("rolled out {t_f} frames ({} corrected) to {}", result.corrected.len(), out.display());
    Ok(())
}

fn cmd_eval(est: &Path, gt: &Path, th: f64, csv: &Path) -> noda::Result<()> {
    let est = read_trajectory(est)?;
    let gt = read_trajectory(gt)?;
    if est.domain != gt.domain {
        return Err(Error::InvalidArgument("estimate and ground truth are on different grids".into()));
    }
    let t_f = est.n_frames().min(gt.n_frames()) - 1;
    let t_h = gt.frame_at(th);
    if t_h > t_f {
        return Err(Error::InvalidArgument(format!("--th {th} s maps to frame {t_h}, beyond last frame {t_f}")));
    }
    let r = relmse(&est, &gt, t_h, t_f)?;
    let row = MetricRow {
        method: "estimate".into(),
        equation: gt.equation.to_string(),
        t_f: t_f as f64 * gt.h,
        snr_db: f64::NAN,
        alpha: f64::NAN,
        t_h: t_h as f64 * gt.h,
        mean_relmse: r,
        std_relmse: 0.0,
        time_per_step: f64::NAN,
    };
    emit_csv(&[row], csv)?;
    println!("{r:.6e}");
    Ok(())
}

fn cmd_experiment(spec: &Path, out: &Path) -> noda::Result<()> {
    let spec: ExperimentSpec = serde_json::from_str(&fs::read_to_string(spec)?)?;
    let ctx = ExperimentContext::load(spec)?;
    let rows = ctx.run(out)?;
    info!("wrote {} metric rows to {}", rows.len(), out.display());
    Ok(())
}

const GRADCHECK_EPS: f64 = 1e-6;
const GRADCHECK_TOL: f64 = 1e-5;

fn cmd_gradcheck(seed: u64) -> noda::Result<()> {
    let reports = gradient_check(seed, GRADCHECK_EPS, 200)?;
    let mut worst: f64 = 0.0;
    for (name, r) in &reports {
        println!(
            "{name}: max relative error {:.3e} over {} coordinates ({} excluded)",
            r.max_rel_error, r.checked, r.excluded
        );
        worst = worst.max(r.max_rel_error);
    }
    if worst < GRADCHECK_TOL {
        Ok(())
    } else {
        Err(Error::Numerical(format!("gradient check failed: {worst:.3e} >= {GRADCHECK_TOL:.0e}")))
    }
}

#[derive(Serialize)]
struct BenchReport {
    predict_seconds: f64,
    predict_correct_seconds: f64,
    ratio: f64,
}

fn cmd_bench(model: &Path, traj: &Path) -> noda::Result<()> {
    let truth = read_trajectory(traj)?;
    let (predictor, corrector) = load_model(model)?;
    let corrector = corrector.ok_or_else(|| Error::InvalidArgument("model file has no corrector".into()))?;
    let z = &truth.frames[0];
    let y = &truth.frames[truth.n_frames().min(2) - 1];
    let t = time_per_step(&predictor, &corrector, z, &truth.domain.shape(), y, 1000)?;
    let report = BenchReport { predict_seconds: t.predict, predict_correct_seconds: t.predict_correct, ratio: t.ratio() };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn run(cli: Cli) -> noda::Result<()> {
    match cli.command {
        Command::Generate { equation, n_traj, tf, dt, resolution, re, seed, out } => {
            cmd_generate(equation, n_traj, tf, dt, resolution, re, seed, &out)
        }
        Command::Train { data, config, out } => cmd_train(&data, config.as_deref(), &out),
        Command::Rollout { model, traj, alpha, snr, th, c, seed, out } => {
            cmd_rollout(&model, &traj, alpha, snr, th, c, seed, &out)
        }
        Command::Eval { est, gt, th, csv } => cmd_eval(&est, &gt, th, &csv),
        Command::Experiment { spec, out } => cmd_experiment(&spec, &out),
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
        Command::Bench { model, traj } => cmd_bench(&model, &traj),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
