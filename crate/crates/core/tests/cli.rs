use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nsreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nsreg")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn make_pair(dir: &Path, dims: &str) {
    let out = nsreg(&["phantom", "--seed", "3", "--dims", dims, "--out", p(dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn usage_and_data_errors() {
    assert_eq!(nsreg(&["phantom", "--out", "x"]).status.code(), Some(2));
    assert_eq!(nsreg(&["inject", "--level", "psibar7", "in.scnh", "--out", "o"]).status.code(), Some(2));
    assert_eq!(nsreg(&["frobnicate"]).status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.scnh");
    assert_eq!(nsreg(&["correct", p(&missing), "--out", p(tmp.path())]).status.code(), Some(3));
    let help = nsreg(&["register", "--help"]);
    let text = String::from_utf8_lossy(&help.stdout);
    assert!(help.status.success());
    for flag in ["--init", "--pyramid-levels", "--max-iters", "--tol", "--damping"] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
    assert!(text.contains("[default: 3]") && text.contains("[default: 50]"));
}

#[test]
fn singular_deformation_is_a_numerical_failure() {
    let tmp = tempfile::tempdir().unwrap();
    make_pair(tmp.path(), "16");
    let src = tmp.path().join("phantom_T2.scnh");
    let out = nsreg(&["deform", p(&src), "--params", "0,0,0,0,0,0,0,1,1,0,0,0", "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn stage_commands_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    make_pair(d, "32");
    let t2 = d.join("phantom_T2.scnh");
    assert!(d.join("phantom_PD.scnr").exists());

    assert!(nsreg(&["correct", p(&t2), "--out", p(d)]).status.success());
    let corrected = d.join("phantom_T2_corrected.scnh");
    assert!(corrected.exists());

    let other = d.join("other");
    assert!(nsreg(&["phantom", "--seed", "4", "--dims", "32", "--vary", "--out", p(&other)]).status.success());
    let model = d.join("t2_model.json");
    let out = nsreg(&["train", p(&corrected), p(&other.join("phantom_T2.scnh")), "--out", p(&model)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mixed = nsreg(&["train", p(&corrected), p(&other.join("phantom_PD.scnh")), "--out", p(&model)]);
    assert_eq!(mixed.status.code(), Some(3));

    assert!(nsreg(&["standardize", p(&corrected), "--model", p(&model), "--out", p(d)]).status.success());
    let std_scene = d.join("phantom_T2_corrected_std.scnh");

    let o1 = d.join("o1");
    let o2 = d.join("o2");
    for o in [&o1, &o2] {
        let out = nsreg(&["inject", "--level", "psibar7", "--seed", "42", p(&std_scene), "--out", p(o)]);
        assert!(out.status.success());
    }
    for ext in ["scnh", "scnr"] {
        let name = format!("phantom_T2_corrected_std_psibar7.{ext}");
        assert_eq!(fs::read(o1.join(&name)).unwrap(), fs::read(o2.join(&name)).unwrap());
    }

    assert!(nsreg(&["deform", p(&std_scene), "--cell", "r0t1s0h0", "--out", p(d)]).status.success());
    let moved = d.join("phantom_T2_corrected_std_r0t1s0h0.scnh");
    let out = nsreg(&["register", "--init", "identity", p(&std_scene), p(&moved)]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = text.lines().collect();
    let names = ["tx", "ty", "tz", "rx", "ry", "rz", "sx", "sy", "sz", "hxy", "hxz", "hyz", "ssd"];
    for (line, name) in lines.iter().zip(names) {
        assert!(line.starts_with(&format!("{name} ")), "{line}");
    }
    let tx: f64 = lines[0].split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!((tx - 5.0).abs() < 0.5, "{tx}");
}

#[test]
fn run_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let mut plan = nsreg::pipeline::ExperimentPlan::desk(d.join("ignored"), 0);
    plan.subjects = 2;
    plan.levels = (0..=7).map(nsreg::standardize::LevelId).collect();
    plan.grid = nsreg::pipeline::GridSelection::Cells(vec!["r0t1s0h0".into()]);
    plan.cohort = nsreg::pipeline::CohortSource::Phantom {
        base: nsreg::phantom::PhantomSpec::brain([32; 3], 0),
        variation: Default::default(),
    };
    let plan_path = d.join("plan.json");
    plan.save(&plan_path).unwrap();
    let results = d.join("results");
    let out = nsreg(&["run", "--plan", p(&plan_path), "--seed", "11", "--workers", "2", "--out", p(&results)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("registrations 32"));

    let rerun = nsreg(&["run", "--plan", p(&plan_path), "--seed", "11", "--out", p(&results)]);
    assert!(String::from_utf8_lossy(&rerun.stdout).contains("registrations 0"));

    for (cmd, file) in [("report-accuracy", "acc.csv"), ("report-consistency", "con.csv")] {
        let csv = d.join(file);
        assert!(nsreg(&[cmd, p(&results), "--out", p(&csv)]).status.success());
        let text = fs::read_to_string(&csv).unwrap();
        let rows: Vec<&str> = text.lines().collect();
        assert_eq!(rows[0], "level,small,medium,large,total");
        assert_eq!(rows.len(), 8);
        for (k, row) in rows[1..].iter().enumerate() {
            let cols: Vec<&str> = row.split(',').collect();
            assert_eq!(cols.len(), 5);
            assert_eq!(cols[0], format!("psibar{}", k + 1));
        }
        assert!(csv.with_extension("json").exists());
    }
}
