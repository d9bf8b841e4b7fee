//! Accuracy and consistency evaluation: paired t-tests on corner RMSE,
//! win/loss/no-difference counting per deformation group and the goodness
//! ratio γ.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{CellStatus, ExperimentCell};
use crate::standardize::LevelId;
use crate::transform::{rmse_corners_params, DeformGroup};

/// Lanczos approximation (g = 7, nine terms) of ln Γ(x) for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

// continued fraction for the incomplete beta, modified Lentz
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function I_x(a, b).
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Two-tailed Student-t p-value P(|T| ≥ |t|) with `df` degrees of freedom.
pub fn student_t_two_tailed(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    incomplete_beta(df / 2.0, 0.5, df / (df + t * t))
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

// Chebyshev fit, fractional error below 1.2e-7
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let poly = -z * z - 1.265_512_23
        + t * (1.000_023_68
            + t * (0.374_091_96
                + t * (0.096_784_18
                    + t * (-0.186_288_06
                        + t * (0.278_868_07
                            + t * (-1.135_203_98 + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77))))))));
    let r = t * poly.exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub rmse_s: Vec<f64>,
    pub rmse_ns: Vec<f64>,
}

impl PairedSample {
    pub fn new(rmse_s: Vec<f64>, rmse_ns: Vec<f64>) -> Result<Self> {
        if rmse_s.len() != rmse_ns.len() {
            return Err(Error::InvalidArgument(format!(
                "paired sample lengths differ: {} vs {}",
                rmse_s.len(),
                rmse_ns.len()
            )));
        }
        if rmse_s.len() < 2 {
            return Err(Error::InvalidArgument("a paired t-test needs at least 2 pairs".into()));
        }
        if rmse_s.iter().chain(&rmse_ns).any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument("RMSE values must be finite and non-negative".into()));
        }
        Ok(PairedSample { rmse_s, rmse_ns })
    }

    pub fn len(&self) -> usize {
        self.rmse_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rmse_s.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    NsWins,
    NsLoses,
    NoDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    /// Mean of `rmse_ns − rmse_s`.
    pub mean_diff: f64,
    /// `None` when the differences have zero variance.
    pub t: Option<f64>,
    pub df: usize,
    pub p: f64,
    pub outcome: Outcome,
}

/// Two-tailed paired t-test on `d = rmse_ns − rmse_s`.
pub fn paired_t_test(sample: &PairedSample, alpha: f64) -> Result<TTest> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let n = sample.len();
    if n < 2 || sample.rmse_ns.len() != n {
        return Err(Error::InvalidArgument("a paired t-test needs at least 2 pairs".into()));
    }
    let d: Vec<f64> = sample.rmse_ns.iter().zip(&sample.rmse_s).map(|(a, b)| a - b).collect();
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let df = n - 1;
    let (t, p) = if var > 0.0 {
        let t = mean / (var / nf).sqrt();
        (Some(t), student_t_two_tailed(t, df as f64))
    } else if mean == 0.0 {
        (None, 1.0)
    } else {
        (None, 0.0)
    };
    let outcome = if p <= alpha && mean < 0.0 {
        Outcome::NsWins
    } else if p <= alpha && mean > 0.0 {
        Outcome::NsLoses
    } else {
        Outcome::NoDifference
    };
    Ok(TTest {
        mean_diff: mean,
        t,
        df,
        p,
        outcome,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WinLossRecord {
    pub w: usize,
    pub l: usize,
    pub n: usize,
}

impl WinLossRecord {
    pub fn total(&self) -> usize {
        self.w + self.l + self.n
    }

    pub fn add(&mut self, outcome: Outcome) {
        match outcome {
            Outcome::NsWins => self.w += 1,
            Outcome::NsLoses => self.l += 1,
            Outcome::NoDifference => self.n += 1,
        }
    }

    pub fn w_x(&self) -> f64 {
        self.w as f64 / self.total() as f64
    }

    pub fn l_x(&self) -> f64 {
        self.l as f64 / self.total() as f64
    }
}

/// γ, flagged infinite at the all-win corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gamma {
    Finite(f64),
    Infinite,
}

impl Gamma {
    pub fn value(self) -> f64 {
        match self {
            Gamma::Finite(v) => v,
            Gamma::Infinite => f64::INFINITY,
        }
    }
}

impl fmt::Display for Gamma {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Gamma::Finite(v) => write!(f, "{v:.4}"),
            Gamma::Infinite => write!(f, "inf"),
        }
    }
}

impl Serialize for Gamma {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Gamma::Finite(v) => s.serialize_f64(*v),
            Gamma::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Gamma {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(Gamma::Finite(v)),
            Repr::Str(s) if s == "inf" => Ok(Gamma::Infinite),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("bad gamma {s:?}"))),
        }
    }
}

/// γ = √(((1 − L)² + W²) / ((1 − W)² + L²)): distance to the all-loss corner
/// over distance to the all-win corner.
pub fn goodness(record: &WinLossRecord) -> Result<Gamma> {
    if record.total() == 0 {
        return Err(Error::InvalidArgument("goodness of an empty win/loss record".into()));
    }
    Ok(goodness_from_fractions(record.w_x(), record.l_x()))
}

pub fn goodness_from_fractions(w: f64, l: f64) -> Gamma {
    let den = (1.0 - w).powi(2) + l * l;
    if den == 0.0 {
        return Gamma::Infinite;
    }
    Gamma::Finite((((1.0 - l).powi(2) + w * w) / den).sqrt())
}

/// One-sided Mann-Whitney test of "x tends to be smaller than y" with the
/// normal approximation, tie correction and continuity correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankTest {
    pub u: f64,
    pub z: f64,
    pub p: f64,
}

pub fn mann_whitney_less(x: &[f64], y: &[f64]) -> Result<RankTest> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::InvalidArgument("rank test needs two non-empty samples".into()));
    }
    let (n1, n2) = (x.len() as f64, y.len() as f64);
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let ranks = average_ranks(&pooled);
    let r1: f64 = ranks[..x.len()].iter().sum();
    let u = r1 - n1 * (n1 + 1.0) / 2.0;
    let n = n1 + n2;
    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let mut ties = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        i = j + 1;
    }
    let var = n1 * n2 / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
    let mean = n1 * n2 / 2.0;
    if !(var > 0.0) {
        return Ok(RankTest { u, z: 0.0, p: 1.0 });
    }
    let z = (u - mean + 0.5) / var.sqrt();
    Ok(RankTest { u, z, p: normal_cdf(z) })
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; `None` when either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Column of a goodness table: a deformation group or the total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Column {
    Small,
    Medium,
    Large,
    Total,
}

impl Column {
    pub const ALL: [Column; 4] = [Column::Small, Column::Medium, Column::Large, Column::Total];

    pub fn name(self) -> &'static str {
        match self {
            Column::Small => "small",
            Column::Medium => "medium",
            Column::Large => "large",
            Column::Total => "total",
        }
    }

    fn of(group: DeformGroup) -> Column {
        match group {
            DeformGroup::Small => Column::Small,
            DeformGroup::Medium => Column::Medium,
            DeformGroup::Large => Column::Large,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoodnessCell {
    pub level: LevelId,
    pub group: Column,
    pub record: WinLossRecord,
    pub w_x: Option<f64>,
    pub l_x: Option<f64>,
    /// `None` when no deformation cell of this group was tested.
    pub gamma: Option<Gamma>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellTest {
    pub level: LevelId,
    pub cell: String,
    pub group: DeformGroup,
    pub test: TTest,
    pub sample: PairedSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportKind {
    Accuracy,
    Consistency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoodnessReport {
    pub kind: ReportKind,
    pub alpha: f64,
    /// Row-major: one entry per (level, column).
    pub table: Vec<GoodnessCell>,
    pub cell_tests: Vec<CellTest>,
    /// Records dropped because a registration failed.
    pub excluded: usize,
    /// Cells with fewer than two usable pairs.
    pub gaps: Vec<String>,
}

impl GoodnessReport {
    pub fn levels(&self) -> Vec<LevelId> {
        let mut v: Vec<LevelId> = self.table.iter().map(|c| c.level).collect();
        v.dedup();
        v
    }

    pub fn cell(&self, level: LevelId, column: Column) -> Option<&GoodnessCell> {
        self.table.iter().find(|c| c.level == level && c.group == column)
    }

    /// `level,small,medium,large,total` with γ to four decimals, `inf` or `na`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["level", "small", "medium", "large", "total"])?;
        for level in self.levels() {
            let mut row = vec![level.to_string()];
            for col in Column::ALL {
                row.push(match self.cell(level, col).and_then(|c| c.gamma) {
                    Some(g) => g.to_string(),
                    None => "na".to_string(),
                });
            }
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

type SampleKey = (LevelId, usize);

fn build_report(
    kind: ReportKind,
    samples: BTreeMap<SampleKey, (DeformGroup, String, Vec<f64>, Vec<f64>)>,
    excluded: usize,
    alpha: f64,
) -> Result<GoodnessReport> {
    let mut records: BTreeMap<(LevelId, Column), WinLossRecord> = BTreeMap::new();
    let mut levels: Vec<LevelId> = samples.keys().map(|k| k.0).collect();
    levels.dedup();
    let mut cell_tests = Vec::new();
    let mut gaps = Vec::new();
    for ((level, _), (group, name, s, ns)) in samples {
        if s.len() < 2 {
            gaps.push(format!("{level}/{name}: {} usable pair(s)", s.len()));
            continue;
        }
        let sample = PairedSample::new(s, ns)?;
        let test = paired_t_test(&sample, alpha)?;
        records.entry((level, Column::of(group))).or_default().add(test.outcome);
        records.entry((level, Column::Total)).or_default().add(test.outcome);
        cell_tests.push(CellTest {
            level,
            cell: name,
            group,
            test,
            sample,
        });
    }
    let mut table = Vec::new();
    for level in levels {
        for col in Column::ALL {
            let record = records.get(&(level, col)).copied().unwrap_or_default();
            let filled = record.total() > 0;
            table.push(GoodnessCell {
                level,
                group: col,
                record,
                w_x: filled.then(|| record.w_x()),
                l_x: filled.then(|| record.l_x()),
                gamma: if filled { Some(goodness(&record)?) } else { None },
            });
        }
    }
    Ok(GoodnessReport {
        kind,
        alpha,
        table,
        cell_tests,
        excluded,
        gaps,
    })
}

fn usable(c: &ExperimentCell) -> bool {
    c.status == CellStatus::Ok && c.rmse_s.is_some() && c.rmse_ns.is_some()
}

/// Pools both protocols and all subjects into one paired sample per
/// (level, deformation cell); the clean level is not a row.
pub fn accuracy_report(results: &[ExperimentCell], alpha: f64) -> Result<GoodnessReport> {
    let mut sorted: Vec<&ExperimentCell> = results.iter().filter(|c| !c.level.is_clean()).collect();
    sorted.sort_by_key(|a| a.sort_key());
    let mut samples = BTreeMap::new();
    let mut excluded = 0;
    for c in sorted {
        let entry = samples
            .entry((c.level, c.cell_id))
            .or_insert_with(|| (c.group, c.cell.clone(), Vec::new(), Vec::new()));
        if !usable(c) {
            excluded += 1;
            continue;
        }
        entry.2.push(c.rmse_s.unwrap_or_default());
        entry.3.push(c.rmse_ns.unwrap_or_default());
    }
    build_report(ReportKind::Accuracy, samples, excluded, alpha)
}

/// Consistency RMSE between the T2 and PD recoveries of one subject, for
/// both arms, keyed by (level, cell, subject).
pub fn consistency_pairs(results: &[ExperimentCell]) -> Result<Vec<ConsistencyPair>> {
    let mut by_key: BTreeMap<(LevelId, usize, usize), Vec<&ExperimentCell>> = BTreeMap::new();
    for c in results {
        by_key.entry((c.level, c.cell_id, c.subject)).or_default().push(c);
    }
    let mut out = Vec::new();
    for ((level, cell_id, subject), mut cells) in by_key {
        cells.sort_by(|a, b| a.protocol.cmp(&b.protocol));
        let t2 = cells.iter().find(|c| c.protocol == "T2");
        let pd = cells.iter().find(|c| c.protocol == "PD");
        let (t2, pd) = match (t2, pd) {
            (Some(a), Some(b)) => (*a, *b),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "subject {subject} level {level} cell {cell_id} lacks a T2/PD pair"
                )))
            }
        };
        let ok = usable(t2) && usable(pd);
        let pair = |a: &ExperimentCell, b: &ExperimentCell, ns: bool| -> Option<f64> {
            let (ra, rb) = if ns {
                (a.result_ns.as_ref()?, b.result_ns.as_ref()?)
            } else {
                (a.result_s.as_ref()?, b.result_s.as_ref()?)
            };
            Some(rmse_corners_params(&ra.params, &rb.params, t2.center, &t2.bbox, t2.voxel_size))
        };
        out.push(ConsistencyPair {
            level,
            cell_id,
            cell: t2.cell.clone(),
            group: t2.group,
            subject,
            consistency_s: if ok { pair(t2, pd, false) } else { None },
            consistency_ns: if ok { pair(t2, pd, true) } else { None },
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyPair {
    pub level: LevelId,
    pub cell_id: usize,
    pub cell: String,
    pub group: DeformGroup,
    pub subject: usize,
    pub consistency_s: Option<f64>,
    pub consistency_ns: Option<f64>,
}

pub fn consistency_report(results: &[ExperimentCell], alpha: f64) -> Result<GoodnessReport> {
    let pairs = consistency_pairs(results)?;
    let mut samples = BTreeMap::new();
    let mut excluded = 0;
    for p in pairs.iter().filter(|p| !p.level.is_clean()) {
        let entry = samples
            .entry((p.level, p.cell_id))
            .or_insert_with(|| (p.group, p.cell.clone(), Vec::new(), Vec::new()));
        match (p.consistency_s, p.consistency_ns) {
            (Some(s), Some(ns)) => {
                entry.2.push(s);
                entry.3.push(ns);
            }
            _ => excluded += 1,
        }
    }
    build_report(ReportKind::Consistency, samples, excluded, alpha)
}
