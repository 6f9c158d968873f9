//! Command-line surface: thin shells over the library operations plus the
//! dataset pipeline and file formats. Machine-readable CSV/JSON goes to
//! `--out` (or standard output), human summaries to standard error.
//!
//! Exit codes: 0 success, 1 invalid flags/input, 2 numerical failure,
//! 3 I/O failure.

pub mod dataset;
pub mod pgm;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::bounds::{
    hashin_shtrikman_scalar, hill_average, inside_envelope, mori_tanaka_circular, reuss_bound,
    voigt_bound, PhasePair,
};
use crate::error::{Error, Result};
use crate::fftsolver::{homogenize, threshold_sweep, ReferenceMedium, SolverConfig};
use crate::inverse::{
    coupling_ratio, diagonal_asymmetry, multistart_optimize, verify_candidates, MultistartConfig,
    Objective,
};
use crate::mandel::{
    directional_young, format_f64, plane_strain_stiffness, IsotropicPhase, MandelMatrix,
};
use crate::microgen::{
    equispaced_taus, field, range_normalize, symmetrize, threshold_hard, AmplitudeGrid, MicroSpec,
    SymmetryClass, T_PRODUCTION,
};
use crate::surrogate::{train, ForwardInput, Model, ModelConfig, TrainConfig};
use dataset::{build_dataset, read_manifest, read_records, write_dataset, DatasetParams};

#[derive(Parser)]
#[command(
    name = "vrnet",
    version,
    about = "Voigt-Reuss bounded surrogates and inverse design for plane-strain composites"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample unit-cell specifications (amplitude matrices + thresholds)
    Gen(GenArgs),
    /// Render a specification to a binary PGM image
    Render(RenderArgs),
    /// Homogenize a binary image with the FFT oracle
    Homog(HomogArgs),
    /// Print Voigt/Reuss/Hill/Hashin-Shtrikman/Mori-Tanaka reference rows
    Bounds(BoundsArgs),
    /// Build a labeled dataset (generation, filtering, homogenization)
    Dataset(DatasetArgs),
    /// Train the surrogate on a dataset directory
    Train(TrainArgs),
    /// Predict effective stiffness from a spec or an image
    Predict(PredictArgs),
    /// Threshold sweep of the oracle (optionally with surrogate columns)
    Sweep(SweepArgs),
    /// Batched multistart inverse design through a trained surrogate
    Invert(InvertArgs),
    /// Directional Young's modulus table E(theta)
    Polar(PolarArgs),
}

#[derive(Args)]
struct CommonPhases {
    /// phase constants E0,nu0,E1,nu1 (Pa, -)
    #[arg(long, default_value = "1e9,0.3,1e6,0.49")]
    phases: String,
}

#[derive(Args)]
struct GenArgs {
    /// mode set, e.g. 3x3
    #[arg(long, default_value = "3x3")]
    modes: String,
    /// number of amplitude matrices
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// thresholds per amplitude matrix (equi-spaced in (0,1))
    #[arg(long, default_value_t = 25)]
    ntau: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// symmetry class: none | diagonal | orthotropic | square
    #[arg(long, default_value = "none")]
    symmetry: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    /// spec JSONL file
    #[arg(long)]
    spec: PathBuf,
    /// line index into the spec file
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, default_value_t = 100)]
    resolution: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct HomogArgs {
    /// binary PGM image (P2, maxval 1)
    #[arg(long)]
    image: PathBuf,
    #[command(flatten)]
    phases: CommonPhases,
    /// relative equilibrium residual tolerance
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 5000)]
    max_iter: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BoundsArgs {
    /// volume fraction of phase 0
    #[arg(long)]
    c0: f64,
    #[command(flatten)]
    phases: CommonPhases,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DatasetArgs {
    /// comma-separated mode sets, e.g. 3x3,5x5
    #[arg(long, default_value = "3x3,5x5,7x7,9x9,11x11")]
    modes: String,
    #[arg(long, default_value_t = 50)]
    namplitudes: usize,
    #[arg(long, default_value_t = 25)]
    ntau: usize,
    /// retention band for c0, e.g. 0.01,0.99
    #[arg(long, default_value = "0.01,0.99")]
    filter: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    resolution: usize,
    #[command(flatten)]
    phases: CommonPhases,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// output directory (records.jsonl + manifest.json)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// dataset directory produced by `dataset`
    #[arg(long)]
    dataset: PathBuf,
    /// checkpoint output directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-1)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    /// plateau patience in epochs before halving the learning rate
    #[arg(long, default_value_t = 50)]
    patience: usize,
    /// channel/width scale factor (0.5 = desk scale, 1.0 = full size)
    #[arg(long, default_value_t = 0.5)]
    scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// stop once the validation loss reaches this value
    #[arg(long)]
    val_target: Option<f64>,
    /// wall-clock cap in seconds
    #[arg(long)]
    time_limit_secs: Option<u64>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// binary PGM input (direct image inference)
    #[arg(long)]
    image: Option<PathBuf>,
    /// threshold metadata for the image path
    #[arg(long)]
    tau: Option<f64>,
    /// spec JSONL input
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// spec JSONL file (threshold column is swept, the stored tau ignored)
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, default_value_t = 100)]
    ntau: usize,
    #[arg(long, default_value_t = 100)]
    resolution: usize,
    #[command(flatten)]
    phases: CommonPhases,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// add surrogate prediction columns from this checkpoint
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InvertArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// target stiffness JSON (row-major array, or an object with "cbar")
    #[arg(long)]
    target: Option<PathBuf>,
    /// objective when no target is given: coupling
    #[arg(long, default_value = "match")]
    objective: String,
    #[arg(long, default_value_t = 64)]
    nstart: usize,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    topk: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// output directory for candidate bundles
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PolarArgs {
    /// stiffness JSON (row-major array or object with "cbar")
    #[arg(long)]
    cbar: Option<PathBuf>,
    /// binary PGM to homogenize first
    #[arg(long)]
    image: Option<PathBuf>,
    #[command(flatten)]
    phases: CommonPhases,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 180)]
    ntheta: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Entry point used by the binary; returns the process exit code.
pub fn run() -> i32 {
    if let Ok(threads) = std::env::var("VRNET_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("vrnet: ignoring invalid VRNET_THREADS='{threads}'");
            }
        }
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through the error path with code 0
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("vrnet: error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::DimMismatch(_) | Error::Parse(_) => 1,
        Error::Singular(_)
        | Error::BoundsViolation(_)
        | Error::NoConvergence(_)
        | Error::Numerical(_) => 2,
        Error::Io(_) => 3,
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Gen(a) => cmd_gen(a),
        Command::Render(a) => cmd_render(a),
        Command::Homog(a) => cmd_homog(a),
        Command::Bounds(a) => cmd_bounds(a),
        Command::Dataset(a) => cmd_dataset(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Invert(a) => cmd_invert(a),
        Command::Polar(a) => cmd_polar(a),
    }
}

fn parse_phases(s: &str) -> Result<(IsotropicPhase, IsotropicPhase)> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| Error::Parse(format!("phases: {e}"))))
        .collect::<Result<_>>()?;
    if parts.len() != 4 {
        return Err(Error::InvalidArgument("phases need E0,nu0,E1,nu1".into()));
    }
    Ok((IsotropicPhase::new(parts[0], parts[1])?, IsotropicPhase::new(parts[2], parts[3])?))
}

fn parse_mode_pair(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s
        .split_once('x')
        .ok_or_else(|| Error::InvalidArgument(format!("mode set '{s}' must look like 3x3")))?;
    Ok((
        a.trim().parse().map_err(|e| Error::Parse(format!("modes: {e}")))?,
        b.trim().parse().map_err(|e| Error::Parse(format!("modes: {e}")))?,
    ))
}

fn emit(out: &Option<PathBuf>, content: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, content)?,
        None => print!("{content}"),
    }
    Ok(())
}

/// Minimal spec record for gen/render/predict/sweep inputs.
#[derive(Debug, Clone, Deserialize)]
pub struct SpecRecord {
    pub m1: usize,
    pub m2: usize,
    pub a: Vec<f64>,
    pub tau: f64,
}

impl SpecRecord {
    pub fn to_json_line(&self) -> String {
        let mut s = String::with_capacity(128);
        write!(s, "{{\"m1\":{},\"m2\":{},\"a\":[", self.m1, self.m2).unwrap();
        for (k, v) in self.a.iter().enumerate() {
            if k > 0 {
                s.push(',');
            }
            s.push_str(&format_f64(*v));
        }
        write!(s, "],\"tau\":{}}}", format_f64(self.tau)).unwrap();
        s
    }

    pub fn grid(&self) -> Result<AmplitudeGrid> {
        AmplitudeGrid::new(self.m1, self.m2, self.a.clone())
    }
}

pub fn read_spec_line(path: &Path, index: usize) -> Result<SpecRecord> {
    let text = fs::read_to_string(path)?;
    let line = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .nth(index)
        .ok_or_else(|| Error::InvalidArgument(format!("spec file has no line {index}")))?;
    serde_json::from_str(line).map_err(|e| Error::Parse(format!("spec record: {e}")))
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let modes = parse_mode_pair(&a.modes)?;
    let class: SymmetryClass = a.symmetry.parse()?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(a.seed);
    let mut out = String::new();
    let taus = equispaced_taus(a.ntau);
    for _ in 0..a.count {
        let grid = symmetrize(&AmplitudeGrid::sample(&mut rng, modes.0, modes.1)?, class)?;
        for &tau in &taus {
            let rec = SpecRecord {
                m1: modes.0,
                m2: modes.1,
                a: grid.data().to_vec(),
                tau,
            };
            out.push_str(&rec.to_json_line());
            out.push('\n');
        }
    }
    emit(&a.out, &out)?;
    eprintln!("generated {} specs ({} grids x {} thresholds)", a.count * a.ntau, a.count, a.ntau);
    Ok(())
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let rec = read_spec_line(&a.spec, a.index)?;
    let spec = MicroSpec::new(&rec.grid()?, rec.tau, T_PRODUCTION)?;
    let f = range_normalize(&field(&spec, a.resolution, a.resolution)?);
    let img = threshold_hard(&f, rec.tau)?;
    let path = a.out.unwrap_or_else(|| PathBuf::from("cell.pgm"));
    pgm::write_pgm(&img, &path)?;
    eprintln!(
        "rendered {}x{} cell: c0 = {:.4}, c1 = {:.4} -> {}",
        a.resolution,
        a.resolution,
        img.c0(),
        img.c1(),
        path.display()
    );
    Ok(())
}

fn stiffness_json(c: &MandelMatrix, extra: &[(&str, String)]) -> String {
    let mut s = String::from("{");
    write!(s, "\"cbar\":{}", c.to_json_array()).unwrap();
    let eigs = c.eigenvalues();
    s.push_str(",\"eigenvalues\":[");
    for (k, v) in eigs.iter().enumerate() {
        if k > 0 {
            s.push(',');
        }
        s.push_str(&format_f64(*v));
    }
    s.push(']');
    for (key, value) in extra {
        write!(s, ",\"{key}\":{value}").unwrap();
    }
    s.push_str("}\n");
    s
}

fn cmd_homog(a: HomogArgs) -> Result<()> {
    let phases = parse_phases(&a.phases.phases)?;
    let img = pgm::read_pgm(&a.image)?;
    let cfg = SolverConfig { tol: a.tol, max_iter: a.max_iter, reference: ReferenceMedium::Mean };
    let res = homogenize(&img, (&phases.0, &phases.1), &cfg)?;
    let json = stiffness_json(
        &res.cbar,
        &[
            ("envelope_ok", res.envelope_ok.to_string()),
            ("c0", format_f64(img.c0())),
            ("iterations", format!("[{},{},{}]", res.iterations[0], res.iterations[1], res.iterations[2])),
            (
                "residuals",
                format!(
                    "[{},{},{}]",
                    format_f64(res.residuals[0]),
                    format_f64(res.residuals[1]),
                    format_f64(res.residuals[2])
                ),
            ),
        ],
    );
    emit(&a.out, &json)?;
    eprintln!(
        "homogenized {}x{} image (c0 = {:.4}): {} iterations, envelope_ok = {}",
        img.width(),
        img.height(),
        img.c0(),
        res.iterations.iter().sum::<usize>(),
        res.envelope_ok
    );
    Ok(())
}

fn bounds_csv_row(name: &str, c: &MandelMatrix, pair: &PhasePair) -> Result<String> {
    let e = c.eigenvalues();
    let env_ok = inside_envelope(c, pair, 1e-9)?;
    Ok(format!(
        "{},{},{},{},{},{},{},{},{},{},{}\n",
        name,
        format_f64(c.get(0, 0)),
        format_f64(c.get(1, 1)),
        format_f64(c.get(2, 2)),
        format_f64(c.get(0, 1)),
        format_f64(c.get(0, 2)),
        format_f64(c.get(1, 2)),
        format_f64(e[0]),
        format_f64(e[1]),
        format_f64(e[2]),
        env_ok
    ))
}

fn cmd_bounds(a: BoundsArgs) -> Result<()> {
    let phases = parse_phases(&a.phases.phases)?;
    let pair = PhasePair::new(
        plane_strain_stiffness(&phases.0),
        plane_strain_stiffness(&phases.1),
        a.c0,
    )?;
    let mut csv = String::from("name,c11,c22,c33,c12,c13,c23,eig1,eig2,eig3,envelope_ok\n");
    csv.push_str(&bounds_csv_row("voigt", &voigt_bound(&pair), &pair)?);
    csv.push_str(&bounds_csv_row("reuss", &reuss_bound(&pair)?, &pair)?);
    csv.push_str(&bounds_csv_row("hill", &hill_average(&pair)?, &pair)?);
    let (lo, hi) = hashin_shtrikman_scalar(&pair, false)?;
    csv.push_str(&bounds_csv_row("hs_lower", &lo, &pair)?);
    csv.push_str(&bounds_csv_row("hs_upper", &hi, &pair)?);
    csv.push_str(&bounds_csv_row("mori_tanaka", &mori_tanaka_circular(&pair)?, &pair)?);
    emit(&a.out, &csv)?;
    eprintln!("bounds and estimates at c0 = {}", a.c0);
    Ok(())
}

fn parse_filter(s: &str) -> Result<[f64; 2]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| Error::Parse(format!("filter: {e}"))))
        .collect::<Result<_>>()?;
    if parts.len() != 2 {
        return Err(Error::InvalidArgument("filter needs lo,hi".into()));
    }
    Ok([parts[0], parts[1]])
}

fn cmd_dataset(a: DatasetArgs) -> Result<()> {
    let mode_sets = a
        .modes
        .split(',')
        .map(parse_mode_pair)
        .collect::<Result<Vec<_>>>()?;
    let phases = parse_phases(&a.phases.phases)?;
    let params = DatasetParams {
        mode_sets,
        n_amplitudes: a.namplitudes,
        n_tau: a.ntau,
        filter: parse_filter(&a.filter)?,
        seed: a.seed,
        resolution: a.resolution,
        phases,
        solver: SolverConfig { tol: a.tol, ..Default::default() },
    };
    let built = build_dataset(&params)?;
    write_dataset(&a.out, &built)?;
    eprintln!(
        "dataset: {} generated, {} retained ({} solver failures, {} invariant failures) -> {}",
        built.manifest.generated,
        built.manifest.retained,
        built.manifest.solver_failures,
        built.manifest.invariant_failures,
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let manifest = read_manifest(&a.dataset)?;
    let records = read_records(&a.dataset.join(&manifest.records_file))?;
    let samples = records
        .iter()
        .map(|r| r.to_train_sample())
        .collect::<Result<Vec<_>>>()?;
    let phases = (
        IsotropicPhase::new(manifest.phases[0], manifest.phases[1])?,
        IsotropicPhase::new(manifest.phases[2], manifest.phases[3])?,
    );
    let mcfg = ModelConfig {
        resolution: manifest.resolution,
        scale: a.scale,
        seed: a.seed,
        ..Default::default()
    };
    let mut model = Model::new(mcfg, phases)?;
    let tcfg = TrainConfig {
        batch_size: a.batch,
        initial_lr: a.lr,
        epochs: a.epochs,
        seed: a.seed,
        weight_decay: a.weight_decay,
        lr_patience: a.patience,
        val_target: a.val_target,
        time_limit: a.time_limit_secs.map(Duration::from_secs),
        log_every: 1,
        ..Default::default()
    };
    let report = train(&mut model, &samples, &tcfg)?;
    model.save(&a.out)?;
    let mut csv = String::from("epoch,lr,loss_train,loss_val\n");
    for m in &report.metrics {
        writeln!(
            csv,
            "{},{},{},{}",
            m.epoch,
            format_f64(m.lr),
            format_f64(m.train_loss),
            format_f64(m.val_loss)
        )
        .unwrap();
    }
    fs::write(a.out.join("metrics.csv"), csv)?;
    eprintln!(
        "trained {} epochs on {} samples: best val loss {:.4} (epoch {}), {} admissibility violations -> {}",
        report.metrics.len(),
        samples.len(),
        report.best_val,
        report.best_epoch,
        report.admissibility_violations,
        a.out.display()
    );
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let mut model = Model::load(&a.checkpoint)?;
    let pred = match (&a.image, &a.spec) {
        (Some(image), None) => {
            let img = pgm::read_pgm(image)?;
            model.predict(ForwardInput::Image { img: &img, tau: a.tau })?
        }
        (None, Some(spec)) => {
            let rec = read_spec_line(spec, a.index)?;
            let s = MicroSpec::new(&rec.grid()?, rec.tau, model.cfg.temperature)?;
            model.predict(ForwardInput::Spec(&s))?
        }
        _ => {
            return Err(Error::InvalidArgument(
                "predict needs exactly one of --image or --spec".into(),
            ))
        }
    };
    let mut xi = String::from("[");
    for (k, v) in pred.xi.iter().enumerate() {
        if k > 0 {
            xi.push(',');
        }
        xi.push_str(&format_f64(*v));
    }
    xi.push(']');
    let json = stiffness_json(
        &pred.cbar,
        &[
            ("xi", xi),
            ("c0", format_f64(pred.c0)),
            ("tau_aux", format_f64(pred.tau_aux)),
            ("tau_from_c0", pred.tau_from_c0.to_string()),
            ("envelope_ok", pred.envelope_ok.to_string()),
        ],
    );
    emit(&a.out, &json)?;
    eprintln!(
        "prediction at c0 = {:.4}: envelope_ok = {} (tau fallback: {})",
        pred.c0, pred.envelope_ok, pred.tau_from_c0
    );
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let rec = read_spec_line(&a.spec, a.index)?;
    let grid = rec.grid()?;
    let phases = parse_phases(&a.phases.phases)?;
    let cfg = SolverConfig { tol: a.tol, ..Default::default() };
    let rows = threshold_sweep(&grid, (&phases.0, &phases.1), a.resolution, a.ntau, &cfg)?;

    let surrogate_rows = match &a.checkpoint {
        Some(dir) => {
            let mut model = Model::load(dir)?;
            if model.cfg.resolution != a.resolution {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint resolution {} differs from sweep resolution {}",
                    model.cfg.resolution, a.resolution
                )));
            }
            Some(model.tau_sensitivity(&grid, a.ntau, None)?)
        }
        None => None,
    };

    let mut csv = String::from(
        "tau,c0,status,c11,c22,c33,c12,c13,c23,eig1,eig2,eig3,comps0,comps1,transition,envelope_ok",
    );
    if surrogate_rows.is_some() {
        csv.push_str(",surr_norm,surr_dnorm_dtau");
    }
    csv.push('\n');
    let mut failures = 0usize;
    for (i, row) in rows.iter().enumerate() {
        let (status, entries, eigs, env_ok) = match &row.result {
            Ok(res) => {
                let c = &res.cbar;
                let e = row.eigenvalues.unwrap();
                (
                    "ok",
                    [
                        c.get(0, 0),
                        c.get(1, 1),
                        c.get(2, 2),
                        c.get(0, 1),
                        c.get(0, 2),
                        c.get(1, 2),
                    ],
                    e,
                    res.envelope_ok,
                )
            }
            Err(_) => {
                failures += 1;
                ("failed", [f64::NAN; 6], [f64::NAN; 3], false)
            }
        };
        write!(
            csv,
            "{},{},{status}",
            format_f64(row.tau),
            format_f64(row.c0)
        )
        .unwrap();
        for v in entries.iter().chain(eigs.iter()) {
            csv.push(',');
            csv.push_str(&format_f64(*v));
        }
        write!(
            csv,
            ",{},{},{},{}",
            row.components_phase0, row.components_phase1, row.transition, env_ok
        )
        .unwrap();
        if let Some(srows) = &surrogate_rows {
            write!(
                csv,
                ",{},{}",
                format_f64(srows[i].norm),
                format_f64(srows[i].dnorm_dtau)
            )
            .unwrap();
        }
        csv.push('\n');
    }
    emit(&a.out, &csv)?;
    let transitions = rows.iter().filter(|r| r.transition).count();
    eprintln!(
        "swept {} thresholds: {} solver failures, {} topology transitions",
        rows.len(),
        failures,
        transitions
    );
    Ok(())
}

fn read_target(path: &Path) -> Result<MandelMatrix> {
    let text = fs::read_to_string(path)?;
    let trimmed = text.trim();
    if trimmed.starts_with('[') {
        return MandelMatrix::from_json_array(trimmed);
    }
    #[derive(Deserialize)]
    struct WithCbar {
        cbar: Vec<f64>,
    }
    let parsed: WithCbar =
        serde_json::from_str(trimmed).map_err(|e| Error::Parse(format!("target: {e}")))?;
    MandelMatrix::new(3, &parsed.cbar)
}

fn polar_csv(c: &MandelMatrix, ntheta: usize) -> Result<String> {
    let mut csv = String::from("theta,young_modulus\n");
    for k in 0..ntheta {
        let theta = 2.0 * std::f64::consts::PI * k as f64 / ntheta as f64;
        let e = directional_young(c, theta)?;
        writeln!(csv, "{},{}", format_f64(theta), format_f64(e)).unwrap();
    }
    Ok(csv)
}

fn cmd_invert(a: InvertArgs) -> Result<()> {
    let mut model = Model::load(&a.checkpoint)?;
    let objective = match (&a.target, a.objective.as_str()) {
        (Some(path), _) => Objective::MatchTarget(read_target(path)?),
        (None, "coupling") => Objective::Coupling,
        (None, other) => {
            return Err(Error::InvalidArgument(format!(
                "objective '{other}' needs --target (or use --objective coupling)"
            )))
        }
    };
    let cfg = MultistartConfig {
        n_start: a.nstart,
        steps: a.steps,
        lr: a.lr,
        seed: a.seed,
        check_admissibility: true,
    };
    let run = multistart_optimize(&mut model, &objective, &cfg)?;
    let solver = SolverConfig { tol: a.tol, ..Default::default() };
    let reports = verify_candidates(&mut model, &run, &solver, a.topk, 0.05)?;

    fs::create_dir_all(&a.out)?;
    let mut summary = String::from("{\"objective\":\"");
    summary.push_str(match &objective {
        Objective::MatchTarget(_) => "match",
        Objective::Coupling => "coupling",
    });
    summary.push_str("\",\"admissibility_violations\":");
    summary.push_str(&run.admissibility_violations.to_string());
    summary.push_str(",\"candidates\":[");
    for (k, rep) in reports.iter().enumerate() {
        if k > 0 {
            summary.push(',');
        }
        // bundle: spec line, hard render, polar table
        let spec_rec = SpecRecord {
            m1: rep.amplitude.modes().0,
            m2: rep.amplitude.modes().1,
            a: rep.amplitude.data().to_vec(),
            tau: rep.tau,
        };
        fs::write(
            a.out.join(format!("candidate_{k:02}.jsonl")),
            format!("{}\n", spec_rec.to_json_line()),
        )?;
        let spec = MicroSpec::new(&rep.amplitude, rep.tau, T_PRODUCTION)?;
        let f = range_normalize(&field(&spec, model.cfg.resolution, model.cfg.resolution)?);
        let img = threshold_hard(&f, rep.tau)?;
        pgm::write_pgm(&img, &a.out.join(format!("candidate_{k:02}.pgm")))?;

        let (oracle_json, env_ok, polar_source) = match (&rep.oracle_objective, &rep.oracle_cbar)
        {
            (Ok(v), Some(cbar)) => {
                let pair = PhasePair::new(
                    plane_strain_stiffness(&model.phases().0),
                    plane_strain_stiffness(&model.phases().1),
                    rep.c0_hard,
                )?;
                let ok = inside_envelope(cbar, &pair, 1e-8)?;
                (format_f64(*v), ok, Some(cbar.clone()))
            }
            (Err(e), _) => (format!("\"{e}\""), false, None),
            (Ok(_), None) => unreachable!("oracle value without tensor"),
        };
        if let Some(cbar) = &polar_source {
            fs::write(a.out.join(format!("candidate_{k:02}_polar.csv")), polar_csv(cbar, 180)?)?;
            write!(
                summary,
                "{{\"rank\":{},\"tau\":{},\"c0\":{},\"surrogate_objective\":{},\
                 \"oracle_objective\":{},\"envelope_ok\":{},\"soft_hard_mismatch\":{},\
                 \"flagged\":{},\"coupling_ratio\":{},\"diagonal_asymmetry\":{},\"cbar\":{}}}",
                rep.rank,
                format_f64(rep.tau),
                format_f64(rep.c0_hard),
                format_f64(rep.surrogate_objective),
                oracle_json,
                env_ok,
                format_f64(rep.soft_hard_mismatch),
                rep.flagged,
                format_f64(coupling_ratio(cbar)),
                format_f64(diagonal_asymmetry(cbar)?),
                cbar.to_json_array(),
            )
            .unwrap();
        } else {
            write!(
                summary,
                "{{\"rank\":{},\"tau\":{},\"c0\":{},\"surrogate_objective\":{},\
                 \"oracle_objective\":{oracle_json},\"envelope_ok\":false,\
                 \"soft_hard_mismatch\":{},\"flagged\":{}}}",
                rep.rank,
                format_f64(rep.tau),
                format_f64(rep.c0_hard),
                format_f64(rep.surrogate_objective),
                format_f64(rep.soft_hard_mismatch),
                rep.flagged,
            )
            .unwrap();
        }
    }
    summary.push_str("]}\n");
    fs::write(a.out.join("summary.json"), &summary)?;
    let best = reports.first();
    eprintln!(
        "inverse design: {} starts, best objective {} -> {}",
        a.nstart,
        best.map_or(f64::NAN, |r| r.surrogate_objective),
        a.out.display()
    );
    Ok(())
}

fn cmd_polar(a: PolarArgs) -> Result<()> {
    let cbar = match (&a.cbar, &a.image) {
        (Some(path), None) => read_target(path)?,
        (None, Some(image)) => {
            let phases = parse_phases(&a.phases.phases)?;
            let img = pgm::read_pgm(image)?;
            let cfg = SolverConfig { tol: a.tol, ..Default::default() };
            let res = homogenize(&img, (&phases.0, &phases.1), &cfg)?;
            eprintln!("homogenized image first: envelope_ok = {}", res.envelope_ok);
            res.cbar
        }
        _ => {
            return Err(Error::InvalidArgument(
                "polar needs exactly one of --cbar or --image".into(),
            ))
        }
    };
    if a.ntheta < 4 {
        return Err(Error::InvalidArgument("ntheta must be at least 4".into()));
    }
    emit(&a.out, &polar_csv(&cbar, a.ntheta)?)?;
    eprintln!("E(theta) table with {} angles", a.ntheta);
    Ok(())
}
