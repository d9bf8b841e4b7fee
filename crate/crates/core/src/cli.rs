//! Command-line front end. Exit codes: 0 success, 2 usage error, 3 data
//! error, 4 numerical failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::correct::{correct_scene, HomogeneityCriterion};
use crate::error::{Error, Result};
use crate::evaluate::{accuracy_report, consistency_report, GoodnessReport};
use crate::phantom::{generate_phantom_pair, CohortVariation, PhantomSpec};
use crate::pipeline::{load_results, run_plan, ExperimentPlan};
use crate::register::{register, Prealign, RegistrationConfig};
use crate::scene::{header_path, load_scene, save_scene, Scene};
use crate::standardize::{
    inject_with_draw, level_by_id, standardize_scene, train_model, LevelId, StandardizationModel, DEFAULT_PC1,
    DEFAULT_PC2, DEFAULT_S1, DEFAULT_S2,
};
use crate::transform::{resample, AffineParams, DeformationCell};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "nsreg", version, about = "Intensity standardization vs. affine registration toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a T2/PD phantom pair.
    Phantom(PhantomArgs),
    /// Remove smooth intensity non-uniformity.
    Correct(CorrectArgs),
    /// Train a standardization model on scenes of one protocol.
    Train(TrainArgs),
    /// Map a scene onto the standard scale.
    Standardize(StandardizeArgs),
    /// Inject non-standardness into a standardized scene.
    Inject(InjectArgs),
    /// Apply a known affine deformation.
    Deform(DeformArgs),
    /// Register a source scene to a target scene.
    Register(RegisterArgs),
    /// Run (or resume) a full experiment plan.
    Run(RunArgs),
    /// Accuracy goodness table from cell records.
    ReportAccuracy(ReportArgs),
    /// Consistency goodness table from cell records.
    ReportConsistency(ReportArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub seed: u64,
    /// Edge length of the cubic grid.
    #[arg(long, default_value_t = 64)]
    pub dims: usize,
    #[arg(long, default_value_t = 12.0)]
    pub noise: f64,
    /// Peak-to-peak multiplicative bias amplitude.
    #[arg(long, default_value_t = 0.1)]
    pub bias: f64,
    /// Apply per-subject geometry and gain variation.
    #[arg(long)]
    pub vary: bool,
    #[arg(long, default_value = "phantom")]
    pub name: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CorrectArgs {
    pub input: PathBuf,
    /// Homogeneity threshold as a fraction of the foreground median.
    #[arg(long, default_value_t = 0.05)]
    pub fraction: f64,
    #[arg(long, default_value_t = 10)]
    pub max_iters: usize,
    /// Relative region growth below which iteration stops.
    #[arg(long, default_value_t = 0.05)]
    pub growth_tol: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_PC1)]
    pub pc1: f64,
    #[arg(long, default_value_t = DEFAULT_PC2)]
    pub pc2: f64,
    #[arg(long, default_value_t = DEFAULT_S1)]
    pub s1: u16,
    #[arg(long, default_value_t = DEFAULT_S2)]
    pub s2: u16,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StandardizeArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InjectArgs {
    pub input: PathBuf,
    /// `psibar1` … `psibar7` (or `clean`).
    #[arg(long)]
    pub level: LevelId,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DeformArgs {
    pub input: PathBuf,
    /// Grid cell such as `r1t2s0h1`.
    #[arg(long, conflicts_with = "params")]
    pub cell: Option<String>,
    /// Twelve comma-separated numbers: tx,ty,tz,rx,ry,rz,sx,sy,sz,hxy,hxz,hyz.
    #[arg(long)]
    pub params: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Init {
    Identity,
    Centroid,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    pub source: PathBuf,
    pub target: PathBuf,
    #[arg(long, value_enum, default_value_t = Init::Identity)]
    pub init: Init,
    #[arg(long, default_value_t = 3)]
    pub pyramid_levels: usize,
    #[arg(long, default_value_t = 50)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub damping: f64,
    /// Optional JSON file for the full result.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Plan file; defaults to the desk-scale plan.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Master seed (overrides the plan's).
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Output directory (overrides the plan's).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run output directory or its `cells/` subdirectory.
    pub results: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// CSV table to write; the JSON summary goes next to it.
    #[arg(long)]
    pub out: PathBuf,
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn stem(path: &Path) -> String {
    header_path(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scene".into())
}

fn save_into(dir: &Path, name: &str, scene: &Scene) -> Result<PathBuf> {
    mkdir(dir)?;
    let path = dir.join(format!("{name}.scnh"));
    save_scene(scene, &path)?;
    println!("{}", path.display());
    Ok(path)
}

fn parse_params(text: &str) -> Result<AffineParams<f64>> {
    let values = text
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::InvalidArgument(format!("bad --params: {e}")))?;
    let arr: [f64; 12] = values
        .try_into()
        .map_err(|v: Vec<f64>| Error::InvalidArgument(format!("--params needs 12 numbers, got {}", v.len())))?;
    Ok(AffineParams::from_array(arr))
}

fn write_report(report: &GoodnessReport, out: &Path) -> Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        mkdir(dir)?;
    }
    report.write_csv(out)?;
    report.write_json(out.with_extension("json"))?;
    print!("{}", report.to_csv()?);
    if report.excluded > 0 {
        eprintln!("excluded {} failed record(s)", report.excluded);
    }
    Ok(())
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Phantom(a) => {
            let mut spec = PhantomSpec::brain([a.dims; 3], a.seed);
            spec.noise_sigma = a.noise;
            spec.bias_amplitude = a.bias;
            if a.vary {
                spec = CohortVariation::default().subject_spec(&spec, a.seed);
            }
            let (t2, pd) = generate_phantom_pair(&spec)?;
            save_into(&a.out, &format!("{}_T2", a.name), &t2)?;
            save_into(&a.out, &format!("{}_PD", a.name), &pd)?;
        }
        Command::Correct(a) => {
            let scene = load_scene(&a.input)?;
            let crit = HomogeneityCriterion::relative_to_median(&scene, a.fraction)?;
            let out = correct_scene(&scene, crit, a.max_iters, a.growth_tol)?;
            save_into(&a.out, &format!("{}_corrected", stem(&a.input)), &out)?;
        }
        Command::Train(a) => {
            let scenes = a.inputs.iter().map(load_scene).collect::<Result<Vec<_>>>()?;
            let model = train_model(&scenes, a.pc1, a.pc2, a.s1, a.s2)?;
            if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
                mkdir(dir)?;
            }
            model.save(&a.out)?;
            println!("mu_s = {}", model.mu_s);
        }
        Command::Standardize(a) => {
            let scene = load_scene(&a.input)?;
            let model = StandardizationModel::load(&a.model)?;
            let out = standardize_scene(&scene, &model)?;
            save_into(&a.out, &format!("{}_std", stem(&a.input)), &out)?;
        }
        Command::Inject(a) => {
            let scene = load_scene(&a.input)?;
            let level =
                level_by_id(a.level).ok_or_else(|| Error::InvalidArgument(format!("unknown level {}", a.level)))?;
            let (out, draw) = inject_with_draw(&scene, &level, a.seed)?;
            save_into(&a.out, &format!("{}_{}", stem(&a.input), a.level), &out)?;
            println!("m1 = {} m2 = {}", draw.m1_applied, draw.m2_applied);
        }
        Command::Deform(a) => {
            let scene = load_scene(&a.input)?;
            let (params, tag) = match (&a.cell, &a.params) {
                (Some(name), None) => (
                    DeformationCell::parse_name(name)
                        .ok_or_else(|| Error::InvalidArgument(format!("unknown deformation cell {name:?}")))?
                        .params,
                    name.clone(),
                ),
                (None, Some(text)) => (parse_params(text)?, "affine".to_string()),
                _ => return Err(Error::InvalidArgument("give exactly one of --cell or --params".into())),
            };
            let out = resample(&scene, &params)?;
            save_into(&a.out, &format!("{}_{tag}", stem(&a.input)), &out)?;
        }
        Command::Register(a) => {
            let source = load_scene(&a.source)?;
            let target = load_scene(&a.target)?;
            let config = RegistrationConfig::<f64> {
                pyramid_levels: a.pyramid_levels,
                max_iters: a.max_iters,
                convergence_tol: a.tol,
                damping: a.damping,
                initial_params: AffineParams::identity(),
                prealign: match a.init {
                    Init::Identity => Prealign::None,
                    Init::Centroid => Prealign::Centroid,
                },
            };
            let r = register(&source, &target, &config)?;
            let names = [
                "tx", "ty", "tz", "rx", "ry", "rz", "sx", "sy", "sz", "hxy", "hxz", "hyz",
            ];
            for (n, v) in names.iter().zip(r.params.to_array()) {
                println!("{n} {v:.6}");
            }
            println!("ssd {:.6}", r.final_ssd);
            println!("converged {}", r.converged);
            if let Some(path) = a.out {
                let mut text = serde_json::to_string_pretty(&r)?;
                text.push('\n');
                fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            }
        }
        Command::Run(a) => {
            let mut plan = match &a.plan {
                Some(p) => ExperimentPlan::load(p)?,
                None => ExperimentPlan::desk("results", a.seed),
            };
            plan.master_seed = a.seed;
            if let Some(out) = a.out {
                plan.output_dir = out;
            }
            let (_, summary) = run_plan(&plan, a.workers)?;
            println!(
                "cells {} registrations {} written {} failed {} skipped {}",
                summary.cells,
                summary.registrations_performed,
                summary.records_written,
                summary.failed,
                summary.skipped
            );
        }
        Command::ReportAccuracy(a) => {
            let cells = load_results(&a.results)?;
            write_report(&accuracy_report(&cells, a.alpha)?, &a.out)?;
        }
        Command::ReportConsistency(a) => {
            let cells = load_results(&a.results)?;
            write_report(&consistency_report(&cells, a.alpha)?, &a.out)?;
        }
    }
    Ok(())
}

pub fn exit_code(err: &Error) -> i32 {
    if err.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_DATA
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
