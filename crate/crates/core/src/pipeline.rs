//! End-to-end study driver: cohort, correction then standardization,
//! non-standardness injection, known deformations, both registration arms
//! and one persisted record per experiment cell.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::correct::{correct_scene, HomogeneityCriterion};
use crate::error::{Error, Result};
use crate::phantom::{generate_phantom_pair, CohortVariation, PhantomSpec};
use crate::register::{register, Prealign, RegistrationConfig, RegistrationResult};
use crate::scene::{foreground_bounding_box, load_scene, BoundingBox, Scene};
use crate::standardize::{
    inject_with_draw, level_by_id, standardize_scene, train_model, InjectionDraw, LevelId, StandardizationModel,
    DEFAULT_PC1, DEFAULT_PC2, DEFAULT_S1, DEFAULT_S2,
};
use crate::transform::{
    deformation_grid, desk_grid, resample, rmse_corners_params, AffineParams, DeformGroup, DeformationCell,
};

pub const BODY_REGION: &str = "head";

/// Stable 64-bit seed for an address under the master seed.
pub fn derive_seed(master: u64, address: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(address.as_bytes());
    let out = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&out[..8]);
    u64::from_le_bytes(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrectionConfig {
    pub enabled: bool,
    /// Homogeneity threshold as a fraction of the foreground median.
    pub homogeneity_fraction: f64,
    pub max_iters: usize,
    pub growth_tol: f64,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        CorrectionConfig {
            enabled: true,
            homogeneity_fraction: 0.05,
            max_iters: 10,
            growth_tol: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StandardizationConfig {
    pub pc1: f64,
    pub pc2: f64,
    pub s1: u16,
    pub s2: u16,
}

impl Default for StandardizationConfig {
    fn default() -> Self {
        StandardizationConfig {
            pc1: DEFAULT_PC1,
            pc2: DEFAULT_PC2,
            s1: DEFAULT_S1,
            s2: DEFAULT_S2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum CohortSource {
    /// Synthetic subjects: the base spec varied per subject.
    Phantom {
        base: PhantomSpec,
        #[serde(default)]
        variation: CohortVariation,
    },
    /// `.scnh` scenes; the k-th scene of each protocol (by file name) is subject k.
    Directory { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", untagged)]
pub enum GridSelection {
    Named(GridName),
    Cells(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridName {
    Full,
    Desk,
}

impl GridSelection {
    pub fn cells(&self) -> Result<Vec<DeformationCell>> {
        match self {
            GridSelection::Named(GridName::Full) => Ok(deformation_grid()),
            GridSelection::Named(GridName::Desk) => Ok(desk_grid()),
            GridSelection::Cells(names) => names
                .iter()
                .map(|n| {
                    DeformationCell::parse_name(n)
                        .ok_or_else(|| Error::InvalidArgument(format!("unknown deformation cell {n:?}")))
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub subjects: usize,
    pub cohort: CohortSource,
    pub levels: Vec<LevelId>,
    pub grid: GridSelection,
    #[serde(default)]
    pub correction: CorrectionConfig,
    #[serde(default)]
    pub standardization: StandardizationConfig,
    pub registration: RegistrationConfig<f64>,
    pub master_seed: u64,
    pub output_dir: PathBuf,
}

impl ExperimentPlan {
    /// 3 subjects, the 27-cell grid and levels clean, ψ̄2, ψ̄4, ψ̄7.
    pub fn desk(output_dir: impl Into<PathBuf>, master_seed: u64) -> Self {
        ExperimentPlan {
            subjects: 3,
            cohort: CohortSource::Phantom {
                base: PhantomSpec::brain([64; 3], 0),
                variation: CohortVariation::default(),
            },
            levels: [0, 2, 4, 7].into_iter().map(LevelId).collect(),
            grid: GridSelection::Named(GridName::Desk),
            correction: CorrectionConfig::default(),
            standardization: StandardizationConfig::default(),
            registration: RegistrationConfig {
                prealign: Prealign::Centroid,
                ..RegistrationConfig::default()
            },
            master_seed,
            output_dir: output_dir.into(),
        }
    }

    /// 10 subjects, all 81 cells and all 8 levels.
    pub fn full(output_dir: impl Into<PathBuf>, master_seed: u64) -> Self {
        ExperimentPlan {
            subjects: 10,
            levels: (0..=7).map(LevelId).collect(),
            grid: GridSelection::Named(GridName::Full),
            ..Self::desk(output_dir, master_seed)
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path.as_ref(), text.as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects < 2 {
            return Err(Error::InvalidArgument("standardization training needs at least 2 subjects".into()));
        }
        if self.levels.is_empty() {
            return Err(Error::InvalidArgument("plan has no non-standardness levels".into()));
        }
        for id in &self.levels {
            level_by_id(*id).ok_or_else(|| Error::InvalidArgument(format!("unknown level {id}")))?;
        }
        if self.grid.cells()?.is_empty() {
            return Err(Error::InvalidArgument("plan has an empty deformation grid".into()));
        }
        self.registration.validate()
    }

    /// Registrations a complete run performs: the standardized arm once per
    /// (subject, protocol, cell), shared by every level, plus one
    /// non-standard arm per injected level.
    pub fn registration_count(&self, protocols: usize) -> Result<usize> {
        let cells = self.grid.cells()?.len();
        let injected = self.levels.iter().filter(|l| !l.is_clean()).count();
        Ok(self.subjects * protocols * cells * (1 + injected))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    RegistrationFailed,
    Skipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelTrace {
    pub level: usize,
    pub start_ssd: f64,
    pub end_ssd: f64,
    pub accepted_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationSummary {
    pub params: AffineParams<f64>,
    pub final_ssd: f64,
    pub iterations_used: usize,
    pub converged: bool,
    pub trace: Vec<LevelTrace>,
}

impl From<&RegistrationResult<f64>> for RegistrationSummary {
    fn from(r: &RegistrationResult<f64>) -> Self {
        let mut trace: Vec<LevelTrace> = Vec::new();
        for e in &r.per_level_trace {
            match trace.last_mut() {
                Some(t) if t.level == e.level => {
                    t.end_ssd = e.ssd;
                    t.accepted_steps += 1;
                }
                _ => trace.push(LevelTrace {
                    level: e.level,
                    start_ssd: e.ssd,
                    end_ssd: e.ssd,
                    accepted_steps: 0,
                }),
            }
        }
        RegistrationSummary {
            params: r.params,
            final_ssd: r.final_ssd,
            iterations_used: r.iterations_used,
            converged: r.converged,
            trace,
        }
    }
}

/// One (subject, protocol, level, deformation cell) unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentCell {
    pub subject: usize,
    pub protocol: String,
    pub level: LevelId,
    pub cell_id: usize,
    pub cell: String,
    pub group: DeformGroup,
    pub truth: AffineParams<f64>,
    pub draw: Option<InjectionDraw>,
    pub result_s: Option<RegistrationSummary>,
    pub result_ns: Option<RegistrationSummary>,
    pub rmse_s: Option<f64>,
    pub rmse_ns: Option<f64>,
    pub status: CellStatus,
    pub failure: Option<String>,
    /// Foreground box of the clean source; corners are measured here.
    pub bbox: BoundingBox,
    pub center: [f64; 3],
    pub voxel_size: [f64; 3],
}

impl ExperimentCell {
    pub fn sort_key(&self) -> (LevelId, usize, usize, String) {
        (self.level, self.cell_id, self.subject, self.protocol.clone())
    }
}

/// Standardized-arm record, shared by every level of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArmRecord {
    result: Option<RegistrationSummary>,
    failure: Option<String>,
    status: CellStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub cells: usize,
    pub registrations_performed: usize,
    pub records_written: usize,
    pub failed: usize,
    pub skipped: usize,
}

pub struct CleanSet {
    /// `scenes[subject][protocol]`.
    pub scenes: Vec<Vec<Scene>>,
    pub protocols: Vec<String>,
    pub models: BTreeMap<String, StandardizationModel>,
}

/// Correction (κ) then standardization (ψ), one model per protocol trained
/// on the corrected cohort itself. `raw[subject][protocol]`.
pub fn build_clean_set(
    raw: &[Vec<Scene>],
    correction: &CorrectionConfig,
    standardization: &StandardizationConfig,
) -> Result<CleanSet> {
    if raw.len() < 2 {
        return Err(Error::InvalidArgument("a clean set needs at least 2 scenes per protocol".into()));
    }
    let protocols: Vec<String> = raw[0].iter().map(|s| s.protocol.clone()).collect();
    for subject in raw {
        let tags: Vec<String> = subject.iter().map(|s| s.protocol.clone()).collect();
        if tags != protocols {
            return Err(Error::ProtocolMismatch {
                expected: protocols.join(","),
                found: tags.join(","),
            });
        }
    }
    let corrected: Vec<Vec<Scene>> = raw
        .par_iter()
        .map(|subject| {
            subject
                .iter()
                .map(|s| {
                    if !correction.enabled {
                        return Ok(s.clone());
                    }
                    let crit = HomogeneityCriterion::relative_to_median(s, correction.homogeneity_fraction)?;
                    correct_scene(s, crit, correction.max_iters, correction.growth_tol)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut models = BTreeMap::new();
    for (k, protocol) in protocols.iter().enumerate() {
        let cohort: Vec<Scene> = corrected.iter().map(|s| s[k].clone()).collect();
        let model = train_model(
            &cohort,
            standardization.pc1,
            standardization.pc2,
            standardization.s1,
            standardization.s2,
        )?;
        models.insert(protocol.clone(), model);
    }
    let scenes = corrected
        .iter()
        .map(|subject| {
            subject
                .iter()
                .zip(&protocols)
                .map(|(s, p)| standardize_scene(s, &models[p]))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(CleanSet {
        scenes,
        protocols,
        models,
    })
}

/// Raw cohort `[subject][protocol]` for a plan.
pub fn load_cohort(plan: &ExperimentPlan) -> Result<Vec<Vec<Scene>>> {
    match &plan.cohort {
        CohortSource::Phantom { base, variation } => (0..plan.subjects)
            .map(|i| {
                let spec = variation.subject_spec(base, derive_seed(plan.master_seed, &format!("subject/{i}")));
                let (t2, pd) = generate_phantom_pair(&spec)?;
                Ok(vec![t2.with_body_region(BODY_REGION), pd.with_body_region(BODY_REGION)])
            })
            .collect(),
        CohortSource::Directory { path } => {
            let mut files: Vec<PathBuf> = fs::read_dir(path)
                .map_err(|e| Error::io(path, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == crate::scene::HEADER_EXT))
                .collect();
            files.sort();
            let mut by_protocol: BTreeMap<String, Vec<Scene>> = BTreeMap::new();
            for f in files {
                let s = load_scene(&f)?;
                by_protocol.entry(s.protocol.clone()).or_default().push(s);
            }
            let available = by_protocol.values().map(Vec::len).min().unwrap_or(0);
            if available < plan.subjects {
                return Err(Error::InvalidArgument(format!(
                    "{} holds {available} subject(s) per protocol, plan needs {}",
                    path.display(),
                    plan.subjects
                )));
            }
            Ok((0..plan.subjects)
                .map(|i| by_protocol.values().map(|v| v[i].clone()).collect())
                .collect())
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn cell_dir(out: &Path, subject: usize, protocol: &str, cell: &DeformationCell) -> PathBuf {
    out.join("cells")
        .join(format!("subject{subject:03}"))
        .join(protocol)
        .join(cell.name())
}

fn run_registration(
    source: &Scene,
    target: &Scene,
    config: &RegistrationConfig<f64>,
) -> (Option<RegistrationSummary>, CellStatus, Option<String>) {
    if target.foreground_count() == 0 {
        return (None, CellStatus::Skipped, Some("deformed target left the field of view".into()));
    }
    match register(source, target, config) {
        Ok(r) => (Some(RegistrationSummary::from(&r)), CellStatus::Ok, None),
        Err(e) => (None, CellStatus::RegistrationFailed, Some(e.to_string())),
    }
}

struct UnitOutput {
    cells: Vec<ExperimentCell>,
    registrations: usize,
    written: usize,
}

fn run_unit(
    plan: &ExperimentPlan,
    clean: &Scene,
    subject: usize,
    protocol: &str,
    cell: &DeformationCell,
) -> Result<UnitOutput> {
    let dir = cell_dir(&plan.output_dir, subject, protocol, cell);
    let mut out = UnitOutput {
        cells: Vec::new(),
        registrations: 0,
        written: 0,
    };
    let pending: Vec<LevelId> = plan
        .levels
        .iter()
        .copied()
        .filter(|l| !dir.join(format!("{l}.json")).exists())
        .collect();
    if !pending.is_empty() {
        let bbox = foreground_bounding_box(clean)?;
        let center = clean.center();
        let rmse = |r: &Option<RegistrationSummary>| {
            r.as_ref()
                .map(|r| rmse_corners_params(&cell.params, &r.params, center, &bbox, clean.voxel_size()))
        };
        let arm_path = dir.join("arm_s.json");
        let arm: ArmRecord = if arm_path.exists() {
            read_json(&arm_path)?
        } else {
            let target = resample(clean, &cell.params)?;
            let (result, status, failure) = run_registration(clean, &target, &plan.registration);
            out.registrations += 1;
            let arm = ArmRecord {
                result,
                failure,
                status,
            };
            write_json(&arm_path, &arm)?;
            arm
        };
        for level_id in pending {
            let level = level_by_id(level_id).ok_or_else(|| Error::InvalidArgument(format!("unknown level {level_id}")))?;
            let (draw, result_ns, status_ns, failure_ns) = if level_id.is_clean() {
                (None, arm.result.clone(), arm.status, arm.failure.clone())
            } else {
                let seed = derive_seed(
                    plan.master_seed,
                    &format!("inject/{subject}/{protocol}/{level_id}/{}", cell.name()),
                );
                let (injected, draw) = inject_with_draw(clean, &level, seed)?;
                let target = resample(&injected, &cell.params)?;
                let (r, st, f) = run_registration(clean, &target, &plan.registration);
                out.registrations += 1;
                (Some(draw), r, st, f)
            };
            let status = match (arm.status, status_ns) {
                (CellStatus::Ok, CellStatus::Ok) => CellStatus::Ok,
                (CellStatus::RegistrationFailed, _) | (_, CellStatus::RegistrationFailed) => {
                    CellStatus::RegistrationFailed
                }
                _ => CellStatus::Skipped,
            };
            let record = ExperimentCell {
                subject,
                protocol: protocol.to_string(),
                level: level_id,
                cell_id: cell.id,
                cell: cell.name(),
                group: cell.group,
                truth: cell.params,
                draw,
                rmse_s: rmse(&arm.result),
                rmse_ns: rmse(&result_ns),
                result_s: arm.result.clone(),
                result_ns,
                status,
                failure: arm.failure.clone().or(failure_ns),
                bbox,
                center,
                voxel_size: clean.voxel_size(),
            };
            write_json(&dir.join(format!("{level_id}.json")), &record)?;
            out.written += 1;
        }
    }
    for l in &plan.levels {
        out.cells.push(read_json(&dir.join(format!("{l}.json")))?);
    }
    Ok(out)
}

/// Runs (or resumes) a plan with `workers` threads and returns every cell
/// record in (level, cell, subject, protocol) order.
pub fn run_plan(plan: &ExperimentPlan, workers: usize) -> Result<(Vec<ExperimentCell>, RunSummary)> {
    plan.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))?;
    pool.install(|| run_plan_inner(plan))
}

fn run_plan_inner(plan: &ExperimentPlan) -> Result<(Vec<ExperimentCell>, RunSummary)> {
    let out = &plan.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    plan.save(out.join("plan.json"))?;
    let raw = load_cohort(plan)?;
    let clean = build_clean_set(&raw, &plan.correction, &plan.standardization)?;
    for (protocol, model) in &clean.models {
        write_json(&out.join("models").join(format!("{protocol}.json")), model)?;
    }
    let grid = plan.grid.cells()?;
    let mut units = Vec::new();
    for subject in 0..plan.subjects {
        for (k, protocol) in clean.protocols.iter().enumerate() {
            for cell in &grid {
                units.push((subject, k, protocol.as_str(), cell));
            }
        }
    }
    let outputs: Vec<UnitOutput> = units
        .par_iter()
        .map(|&(subject, k, protocol, cell)| run_unit(plan, &clean.scenes[subject][k], subject, protocol, cell))
        .collect::<Result<_>>()?;
    let mut cells = Vec::new();
    let mut summary = RunSummary {
        cells: 0,
        registrations_performed: 0,
        records_written: 0,
        failed: 0,
        skipped: 0,
    };
    for o in outputs {
        summary.registrations_performed += o.registrations;
        summary.records_written += o.written;
        cells.extend(o.cells);
    }
    cells.sort_by_key(|c| c.sort_key());
    summary.cells = cells.len();
    summary.failed = cells.iter().filter(|c| c.status == CellStatus::RegistrationFailed).count();
    summary.skipped = cells.iter().filter(|c| c.status == CellStatus::Skipped).count();
    Ok((cells, summary))
}

/// Reads every cell record under `dir` (a run's output directory or its
/// `cells/` subdirectory).
pub fn load_results(dir: impl AsRef<Path>) -> Result<Vec<ExperimentCell>> {
    let root = dir.as_ref();
    let start = if root.join("cells").is_dir() {
        root.join("cells")
    } else {
        root.to_path_buf()
    };
    let mut stack = vec![start];
    let mut cells = Vec::new();
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|x| x == "json")
                && path.file_name().is_some_and(|n| n != "arm_s.json")
            {
                cells.push(read_json::<ExperimentCell>(&path)?);
            }
        }
    }
    if cells.is_empty() {
        return Err(Error::InvalidArgument(format!("no cell records under {}", root.display())));
    }
    cells.sort_by_key(|c| c.sort_key());
    Ok(cells)
}
