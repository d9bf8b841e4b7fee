//! Acceptance criteria A1–A8. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nsreg::correct::{correct_scene, HomogeneityCriterion};
use nsreg::evaluate::{
    accuracy_report, consistency_pairs, consistency_report, goodness, mann_whitney_less, paired_t_test, spearman,
    Column, Gamma, PairedSample, WinLossRecord,
};
use nsreg::phantom::{generate_phantom_pair, CohortVariation, PhantomSpec};
use nsreg::pipeline::{
    build_clean_set, derive_seed, load_cohort, run_plan, CleanSet, CorrectionConfig, ExperimentPlan,
    StandardizationConfig,
};
use nsreg::register::{register, Prealign, RegistrationConfig};
use nsreg::scene::{foreground_bounding_box, Scene};
use nsreg::standardize::{
    extract_landmarks, inject_nonstandardness, level_by_id, standardize_scene, train_model, LevelId,
};
use nsreg::transform::{deformation_grid, resample, rmse_corners_params, DeformGroup};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

const SEED: u64 = 20_240_601;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct Cohort {
    specs: Vec<PhantomSpec>,
    clean: CleanSet,
}

fn cohort(subjects: usize) -> Cohort {
    let mut plan = ExperimentPlan::desk("unused", SEED);
    plan.subjects = subjects;
    let raw = load_cohort(&plan).unwrap();
    let clean = build_clean_set(&raw, &CorrectionConfig::default(), &StandardizationConfig::default()).unwrap();
    let base = PhantomSpec::brain([64; 3], 0);
    let specs = (0..subjects)
        .map(|i| CohortVariation::default().subject_spec(&base, derive_seed(SEED, &format!("subject/{i}"))))
        .collect();
    Cohort { specs, clean }
}

fn tissue_means(scene: &Scene, labels: &[u8]) -> BTreeMap<u8, f64> {
    let mut acc: BTreeMap<u8, (f64, usize)> = BTreeMap::new();
    for (&v, &l) in scene.data().iter().zip(labels) {
        if l > 0 {
            let e = acc.entry(l).or_default();
            e.0 += v as f64;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(l, (s, n))| (l, s / n as f64)).collect()
}

fn cv(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    var.sqrt() / mean
}

/// Per tissue: across-scene CV of the mean tissue intensity.
fn across_scene_cv(scenes: &[Scene], labels: &[Vec<u8>]) -> BTreeMap<u8, f64> {
    let means: Vec<BTreeMap<u8, f64>> = scenes.iter().zip(labels).map(|(s, l)| tissue_means(s, l)).collect();
    means[0]
        .keys()
        .map(|&k| {
            let v: Vec<f64> = means.iter().map(|m| m[&k]).collect();
            (k, cv(&v))
        })
        .collect()
}

/// Injects ψ̄3..ψ̄5 cyclically into one protocol of `scenes`, then trains and
/// standardizes. Returns (SD of the mapped medians, smallest per-tissue CV ratio).
fn standardization_effect(scenes: &[Scene], labels: &[Vec<u8>], tag: &str) -> (f64, f64) {
    let injected: Vec<Scene> = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let level = level_by_id(LevelId(3 + (i % 3) as u8)).unwrap();
            inject_nonstandardness(s, &level, derive_seed(SEED, &format!("a1/{tag}/{i}"))).unwrap()
        })
        .collect();
    let model = train_model(&injected, 0.0, 99.8, 1, 4095).unwrap();
    let standardized: Vec<Scene> = injected.iter().map(|s| standardize_scene(s, &model).unwrap()).collect();
    let medians: Vec<f64> = standardized
        .iter()
        .map(|s| extract_landmarks(s, 0.0, 99.8).unwrap().mu as f64)
        .collect();
    let m = medians.iter().sum::<f64>() / medians.len() as f64;
    let sd = (medians.iter().map(|v| (v - m).powi(2)).sum::<f64>() / medians.len() as f64).sqrt();
    let pre = across_scene_cv(&injected, labels);
    let post = across_scene_cv(&standardized, labels);
    let ratio = pre.iter().map(|(l, p)| p / post[l]).fold(f64::INFINITY, f64::min);
    (sd, ratio)
}

/// The criterion is checked on six ideal phantoms (no noise, no bias) so the
/// minimum-intensity landmark is a tissue value rather than a noise extreme.
/// The same measurement on the noisy, corrected cohort is reported alongside.
fn a1(c: &Cohort) -> Outcome {
    let mut base = PhantomSpec::brain([64; 3], 0);
    base.noise_sigma = 0.0;
    base.bias_amplitude = 0.0;
    let specs: Vec<PhantomSpec> = (0..6)
        .map(|i| CohortVariation::default().subject_spec(&base, derive_seed(SEED, &format!("a1/subject/{i}"))))
        .collect();
    let labels: Vec<Vec<u8>> = specs.iter().map(|s| s.label_map()).collect();
    let pairs: Vec<(Scene, Scene)> = specs.iter().map(|s| generate_phantom_pair(s).unwrap()).collect();
    let mut median_sd = 0.0f64;
    let mut worst_ratio = f64::INFINITY;
    for k in 0..2 {
        let scenes: Vec<Scene> = pairs.iter().map(|p| if k == 0 { p.0.clone() } else { p.1.clone() }).collect();
        let (sd, ratio) = standardization_effect(&scenes, &labels, &format!("ideal/{k}"));
        median_sd = median_sd.max(sd);
        worst_ratio = worst_ratio.min(ratio);
    }

    let noisy_labels: Vec<Vec<u8>> = c.specs.iter().map(|s| s.label_map()).collect();
    let mut noisy_ratio = f64::INFINITY;
    for (k, protocol) in c.clean.protocols.iter().enumerate() {
        let scenes: Vec<Scene> = c.clean.scenes.iter().map(|s| s[k].clone()).collect();
        noisy_ratio = noisy_ratio.min(standardization_effect(&scenes, &noisy_labels, protocol).1);
    }
    outcome(
        median_sd == 0.0 && worst_ratio >= 5.0,
        format!(
            "ideal cohort: median SD {median_sd}, smallest per-tissue CV reduction {worst_ratio:.1}x \
             (need 0 and >= 5x); noisy corrected cohort for reference: {noisy_ratio:.1}x"
        ),
    )
}

fn a2(c: &Cohort) -> Outcome {
    let config = RegistrationConfig::<f64> {
        prealign: Prealign::Centroid,
        ..RegistrationConfig::default()
    };
    let mut worst_small_medium = 0.0f64;
    let mut large_ok = 0usize;
    let mut large_total = 0usize;
    let mut failures = Vec::new();
    for scene in &c.clean.scenes[0] {
        let bbox = foreground_bounding_box(scene).unwrap();
        for cell in deformation_grid() {
            let target = resample(scene, &cell.params).unwrap();
            let err = match register(scene, &target, &config) {
                Ok(r) => rmse_corners_params(&cell.params, &r.params, scene.center(), &bbox, [1.0; 3]),
                Err(_) => f64::INFINITY,
            };
            match cell.group {
                DeformGroup::Large => {
                    large_total += 1;
                    if err < 2.0 {
                        large_ok += 1;
                    } else {
                        failures.push(format!("{}/{}={err:.2}", scene.protocol, cell.name()));
                    }
                }
                _ => worst_small_medium = worst_small_medium.max(err),
            }
        }
    }
    let frac = large_ok as f64 / large_total as f64;
    outcome(
        worst_small_medium < 1.0 && frac >= 0.9,
        format!(
            "81 cells x 2 protocols at 64^3: worst small/medium RMSE {worst_small_medium:.4} voxel (need < 1), \
             large < 2 voxels in {large_ok}/{large_total} = {:.1}% (need >= 90%); failures: [{}]",
            100.0 * frac,
            failures.join(", ")
        ),
    )
}

fn a3(c: &Cohort) -> Outcome {
    let mut worst = 1.0f64;
    let mut worst_at = String::from("every scene and level");
    for (k, protocol) in c.clean.protocols.iter().enumerate() {
        let model = &c.clean.models[protocol];
        for (i, subject) in c.clean.scenes.iter().enumerate() {
            let clean = &subject[k];
            for id in 1..=7u8 {
                let level = level_by_id(LevelId(id)).unwrap();
                let seed = derive_seed(SEED, &format!("a3/{i}/{protocol}/{id}"));
                let back = standardize_scene(&inject_nonstandardness(clean, &level, seed).unwrap(), model).unwrap();
                let (mut fg, mut close) = (0usize, 0usize);
                for (&a, &b) in clean.data().iter().zip(back.data()) {
                    if a > 0 {
                        fg += 1;
                        if (a as i32 - b as i32).abs() <= 2 {
                            close += 1;
                        }
                    }
                }
                let frac = close as f64 / fg as f64;
                if frac < worst {
                    worst = frac;
                    worst_at = format!("subject {i} {protocol} psibar{id}");
                }
            }
        }
    }
    outcome(
        worst >= 0.99,
        format!("worst foreground fraction within +-2: {:.4}% at {worst_at} (need >= 99%)", 100.0 * worst),
    )
}

fn total_gammas(report: &nsreg::evaluate::GoodnessReport) -> Vec<(LevelId, f64)> {
    report
        .levels()
        .into_iter()
        .map(|l| (l, report.cell(l, Column::Total).and_then(|c| c.gamma).map_or(f64::NAN, Gamma::value)))
        .collect()
}

fn a4(cells: &[nsreg::pipeline::ExperimentCell]) -> Outcome {
    let report = accuracy_report(cells, 0.05).unwrap();
    let totals = total_gammas(&report);
    let below: bool = totals.iter().filter(|(l, _)| l.0 >= 4).all(|(_, g)| *g < 1.0);
    let x: Vec<f64> = totals.iter().map(|(l, _)| l.0 as f64).collect();
    let y: Vec<f64> = totals.iter().map(|(_, g)| *g).collect();
    let rho = spearman(&x, &y);
    let row: Vec<String> = totals.iter().map(|(l, g)| format!("{l}={g:.4}")).collect();
    outcome(
        totals.len() == 7 && below && rho.is_some_and(|r| r < 0.0),
        format!(
            "Total gamma [{}]; Spearman(level, gamma) = {} (need gamma < 1 for psibar4-7 and rho < 0); excluded {}",
            row.join(", "),
            rho.map_or("undefined".into(), |r| format!("{r:.3}")),
            report.excluded
        ),
    )
}

fn a5(cells: &[nsreg::pipeline::ExperimentCell]) -> Outcome {
    let report = consistency_report(cells, 0.05).unwrap();
    let shape_ok = report.levels().len() == 7 && report.table.len() == 28;
    let pairs = consistency_pairs(cells).unwrap();
    let worst = LevelId(7);
    let s: Vec<f64> = pairs.iter().filter(|p| p.level == worst).filter_map(|p| p.consistency_s).collect();
    let ns: Vec<f64> = pairs.iter().filter(|p| p.level == worst).filter_map(|p| p.consistency_ns).collect();
    let test = mann_whitney_less(&s, &ns).unwrap();
    let totals = total_gammas(&report);
    let row: Vec<String> = totals.iter().map(|(l, g)| format!("{l}={g:.4}")).collect();
    outcome(
        shape_ok && test.p <= 0.05,
        format!(
            "table {}x4; clean-arm vs psibar7 consistency RMSE rank test p = {:.3e} over {}+{} values \
             (need <= 0.05); Total gamma [{}]",
            report.levels().len(),
            test.p,
            s.len(),
            ns.len(),
            row.join(", ")
        ),
    )
}

// Simpson integration of the Student-t density, independent of any special function
fn brute_two_tailed(t: f64, df: f64) -> f64 {
    let ln_c = statrs::function::gamma::ln_gamma((df + 1.0) / 2.0)
        - statrs::function::gamma::ln_gamma(df / 2.0)
        - 0.5 * (df * std::f64::consts::PI).ln();
    let pdf = |x: f64| (ln_c - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();
    let a = t.abs();
    let steps = 200_000;
    let h = a / steps as f64;
    let mut acc = pdf(0.0) + pdf(a);
    for i in 1..steps {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(i as f64 * h);
    }
    1.0 - 2.0 * acc * h / 3.0
}

fn a6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst_p = 0.0f64;
    let mut t_table_ok = true;
    // two-tailed critical values at alpha = 0.05, 0.01 from a printed t-table
    for (t, df, p) in [(2.262, 9.0, 0.05), (3.250, 9.0, 0.01), (2.093, 19.0, 0.05), (2.861, 19.0, 0.01)] {
        let reference = 2.0 * (1.0 - StudentsT::new(0.0, 1.0, df).unwrap().cdf(t));
        t_table_ok &= (reference - p).abs() < 5e-4;
    }
    for k in 0..100 {
        let n = if k % 2 == 0 { 10 } else { 20 };
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
        let ns: Vec<f64> = s.iter().map(|v| (v + rng.gen_range(-0.8..1.0)).max(0.0)).collect();
        let sample = PairedSample::new(s.clone(), ns.clone()).unwrap();
        let got = paired_t_test(&sample, 0.05).unwrap();
        let d: Vec<f64> = ns.iter().zip(&s).map(|(a, b)| a - b).collect();
        let mean = d.iter().sum::<f64>() / n as f64;
        let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
        let t = mean / (sd / (n as f64).sqrt());
        let df = (n - 1) as f64;
        let reference = 2.0 * (1.0 - StudentsT::new(0.0, 1.0, df).unwrap().cdf(t.abs()));
        let brute = brute_two_tailed(t, df);
        worst_p = worst_p
            .max((got.p - reference).abs())
            .max((got.p - brute).abs())
            .max((got.t.unwrap() - t).abs());
    }
    let mut worst_g = 0.0f64;
    let mut specials_ok = true;
    for k in 0..1000 {
        let (w, l, n) = match k % 10 {
            0 => {
                let w = rng.gen_range(0..40);
                (w, w, rng.gen_range(0..40).max(if w == 0 { 1 } else { 0 }))
            }
            1 => (rng.gen_range(1..40), 0, 0),
            _ => {
                let w = rng.gen_range(0..40);
                let l = rng.gen_range(0..40);
                (w, l, rng.gen_range(0..40).max(if w + l == 0 { 1 } else { 0 }))
            }
        };
        let total = (w + l + n) as f64;
        let (wx, lx) = (w as f64 / total, l as f64 / total);
        let got = goodness(&WinLossRecord { w, l, n }).unwrap();
        if w > 0 && l == 0 && n == 0 {
            specials_ok &= got == Gamma::Infinite;
            continue;
        }
        let hand = (((1.0 - lx) * (1.0 - lx) + wx * wx) / ((1.0 - wx) * (1.0 - wx) + lx * lx)).sqrt();
        if w == l {
            specials_ok &= (got.value() - 1.0).abs() < 1e-12;
        }
        worst_g = worst_g.max((got.value() - hand).abs());
    }
    outcome(
        worst_p < 1e-6 && worst_g < 1e-12 && specials_ok && t_table_ok,
        format!(
            "max |p - reference| {worst_p:.2e} (need < 1e-6), max |gamma - hand| {worst_g:.2e} (need < 1e-12), \
             symmetry/infinity cases {}, t-table {}",
            if specials_ok { "ok" } else { "WRONG" },
            if t_table_ok { "ok" } else { "WRONG" }
        ),
    )
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "plan.json" {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn a7(tmp: &Path) -> Outcome {
    let mut reports = Vec::new();
    let mut trees = Vec::new();
    let mut performed = Vec::new();
    for (dir, workers) in [("a7_w1", 1), ("a7_w3", 3)] {
        let plan = ExperimentPlan::desk(tmp.join(dir), SEED);
        let (cells, summary) = run_plan(&plan, workers).unwrap();
        performed.push(summary.registrations_performed);
        let acc = accuracy_report(&cells, 0.05).unwrap();
        let con = consistency_report(&cells, 0.05).unwrap();
        acc.write_csv(tmp.join(dir).join("accuracy.csv")).unwrap();
        acc.write_json(tmp.join(dir).join("accuracy.json")).unwrap();
        con.write_csv(tmp.join(dir).join("consistency.csv")).unwrap();
        con.write_json(tmp.join(dir).join("consistency.json")).unwrap();
        reports.push(files_under(&tmp.join(dir)));
        trees.push(cells);
    }
    let plan = ExperimentPlan::desk(tmp.join("a7_w1"), SEED);
    let (_, again) = run_plan(&plan, 2).unwrap();
    let expected = plan.registration_count(2).unwrap();
    let identical = reports[0] == reports[1] && trees[0] == trees[1];
    outcome(
        identical && again.registrations_performed == 0 && performed[0] == expected,
        format!(
            "{} files byte-identical across 1 and 3 workers: {identical}; registrations {} (planned {expected}); \
             resumed re-run performed {}",
            reports[0].len(),
            performed[0],
            again.registrations_performed
        ),
    )
}

fn a8() -> Outcome {
    let mut worst_ratio = f64::INFINITY;
    let mut worst_unchanged = 1.0f64;
    for (bias, noise) in [(0.2, 0.0), (0.0, 0.0)] {
        let mut spec = PhantomSpec::brain([64; 3], SEED);
        spec.bias_amplitude = bias;
        spec.noise_sigma = noise;
        let labels = spec.label_map();
        let (t2, pd) = generate_phantom_pair(&spec).unwrap();
        for scene in [t2, pd] {
            let crit = HomogeneityCriterion::relative_to_median(&scene, 0.05).unwrap();
            let out = correct_scene(&scene, crit, 10, 0.05).unwrap();
            if bias > 0.0 {
                let within = |s: &Scene| {
                    let mut per: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
                    for (&v, &l) in s.data().iter().zip(&labels) {
                        if l > 0 {
                            per.entry(l).or_default().push(v as f64);
                        }
                    }
                    per.into_iter().map(|(l, v)| (l, cv(&v))).collect::<BTreeMap<u8, f64>>()
                };
                let (before, after) = (within(&scene), within(&out));
                for (l, b) in &before {
                    worst_ratio = worst_ratio.min(b / after[l].max(1e-12));
                }
            } else {
                let same = scene.data().iter().zip(out.data()).filter(|(a, b)| a == b).count();
                worst_unchanged = worst_unchanged.min(same as f64 / scene.len() as f64);
            }
        }
    }
    outcome(
        worst_ratio >= 5.0 && worst_unchanged >= 0.99,
        format!(
            "bias 0.2: smallest per-tissue CV reduction {worst_ratio:.1}x (need >= 5x); bias-free: {:.3}% voxels \
             unchanged (need >= 99%)",
            100.0 * worst_unchanged
        ),
    )
}

fn report(id: &str, title: &str, start: Instant, o: Outcome, failed: &mut bool) {
    *failed |= !o.pass;
    let mut out = std::io::stdout().lock();
    writeln!(
        out,
        "{id} {} {title} ({:.1}s): {}",
        if o.pass { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64(),
        o.detail
    )
    .unwrap();
    out.flush().unwrap();
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let mut failed = false;

    let t = Instant::now();
    report("A6", "statistics oracle", t, a6(), &mut failed);

    let t = Instant::now();
    report("A8", "correction efficacy", t, a8(), &mut failed);

    let t = Instant::now();
    let c = cohort(6);
    let setup = t.elapsed();
    let t = Instant::now();
    let mut o = a1(&c);
    o.detail = format!("{}; cohort setup {:.1}s", o.detail, setup.as_secs_f64());
    report("A1", "standardization correctness", t, o, &mut failed);

    let t = Instant::now();
    report("A3", "roundtrip invariance", t, a3(&c), &mut failed);

    let t = Instant::now();
    report("A2", "registration recovery", t, a2(&c), &mut failed);

    let t = Instant::now();
    let mut plan = ExperimentPlan::desk(tmp.path().join("a4"), SEED);
    plan.subjects = 5;
    plan.levels = (0..=7).map(LevelId).collect();
    let (cells, summary) = run_plan(&plan, 8).unwrap();
    let mut o = a4(&cells);
    o.detail = format!("{}; {} registrations", o.detail, summary.registrations_performed);
    report("A4", "headline trend (accuracy)", t, o, &mut failed);

    let t = Instant::now();
    report("A5", "consistency harness", t, a5(&cells), &mut failed);

    let t = Instant::now();
    report("A7", "determinism", t, a7(tmp.path()), &mut failed);

    if failed {
        std::process::exit(1);
    }
}
