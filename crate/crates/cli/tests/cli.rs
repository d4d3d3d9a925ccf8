use std::path::{Path, PathBuf};
use std::process::Command;

use stvcm::simulate::{Noise, SimulationScenario, Surface};

fn run(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_stvcm"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn ok(dir: &Path, args: &[&str]) {
    let (code, err) = run(dir, args);
    assert_eq!(code, 0, "{args:?}: {err}");
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

fn rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn meta(text: &str, key: &str) -> Option<String> {
    text.lines()
        .take_while(|l| l.starts_with('#'))
        .find_map(|l| l.strip_prefix(&format!("# {key}=")).map(str::to_string))
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn simulated(dir: &Path) {
    ok(
        dir,
        &[
            "simulate",
            "--s",
            "20",
            "--t",
            "6",
            "--seed",
            "3",
            "--out",
            "panel.csv",
            "--truth",
            "truth.csv",
        ],
    );
}

#[test]
fn access_matches_hand_computation() {
    let d = tempfile::tempdir().unwrap();
    write(
        d.path(),
        "sites.csv",
        "year,x,y\n2000,0,0\n2000,3,0\n2000,0,4\n2001,0,0\n",
    );
    write(
        d.path(),
        "comm.csv",
        "community_id,point_index,x,y\nA,0,1,0\nA,1,0,1\nB,0,10,10\n",
    );
    ok(
        d.path(),
        &[
            "access",
            "--sites",
            "sites.csv",
            "--communities",
            "comm.csv",
            "--q",
            "1",
            "--beta",
            "2",
            "--out",
            "a.csv",
        ],
    );
    let text = read(d.path(), "a.csv");
    assert_eq!(meta(&text, "beta").as_deref(), Some("2"));
    assert_eq!(meta(&text, "beta_estimated").as_deref(), Some("false"));
    let r = rows(&text);
    let value = |id: &str, y: &str| -> f64 { r.iter().find(|v| v[0] == id && v[1] == y).unwrap()[2].parse().unwrap() };
    assert_eq!(value("A", "2000"), 1.0);
    assert!((value("B", "2000") - 136.0).abs() < 1e-9);
    assert!((value("B", "2001") - 200.0).abs() < 1e-9);
    assert!((value("A", "2001") - 1.0).abs() < 1e-12);
}

#[test]
fn estimated_beta_is_recorded_and_reruns_are_identical() {
    let d = tempfile::tempdir().unwrap();
    write(d.path(), "sites.csv", "year,x,y\n2000,0,0\n2000,5,5\n2000,9,1\n");
    let mut comm = String::from("community_id,point_index,x,y\n");
    for c in 0..6 {
        for b in 0..3 {
            comm.push_str(&format!(
                "C{c},{b},{},{}\n",
                c as f64 * 1.7 + b as f64 * 0.3,
                (c * b) as f64 * 0.4 + 0.1
            ));
        }
    }
    write(d.path(), "comm.csv", &comm);
    let mut pop = String::from("year,x,y\n");
    for k in 0..20 {
        pop.push_str(&format!("2000,{},{}\n", (k * 7 % 10) as f64, (k * 3 % 10) as f64 * 0.5));
    }
    write(d.path(), "pop.csv", &pop);
    let args = |out: &'static str| {
        vec![
            "access",
            "--sites",
            "sites.csv",
            "--communities",
            "comm.csv",
            "--population",
            "pop.csv",
            "--service",
            "0.5",
            "--beta",
            "estimate",
            "--out",
            out,
        ]
    };
    ok(d.path(), &args("a.csv"));
    ok(d.path(), &args("b.csv"));
    let a = read(d.path(), "a.csv");
    assert_eq!(a, read(d.path(), "b.csv"));
    assert_eq!(meta(&a, "beta_estimated").as_deref(), Some("true"));
    assert!(meta(&a, "beta").unwrap().parse::<f64>().unwrap().is_finite());
}

#[test]
fn simulate_fit_round_trip() {
    let d = tempfile::tempdir().unwrap();
    simulated(d.path());
    ok(
        d.path(),
        &[
            "fit",
            "--panel",
            "panel.csv",
            "--knots-temporal",
            "3",
            "--knots-spatial",
            "4",
            "--out",
            "m.json",
            "--coefficients",
            "c.csv",
            "--diagnostics",
            "diag.json",
            "--knots-out",
            "k.json",
        ],
    );
    let model = read(d.path(), "m.json");
    assert!(model.starts_with("{\"config_hash\":\""));
    let c = rows(&read(d.path(), "c.csv"));
    assert_eq!(c.len(), 2 * 20 * 6);
    for r in &c {
        let v: Vec<f64> = r[3..].iter().map(|x| x.parse().unwrap()).collect();
        assert!((v[0] + v[1] + v[2] - v[3]).abs() < 1e-9 * (1.0 + v[3].abs()));
    }
    ok(
        d.path(),
        &["fit", "--panel", "panel.csv", "--knots", "k.json", "--out", "m2.json"],
    );
    let strip = |s: &str| s.split_once(",\"format\"").unwrap().1.to_string();
    assert_eq!(strip(&model), strip(&read(d.path(), "m2.json")));
}

#[test]
fn duplicated_covariate_is_rank_deficient() {
    let d = tempfile::tempdir().unwrap();
    simulated(d.path());
    let text = read(d.path(), "panel.csv");
    let dup: String = text
        .lines()
        .map(|l| {
            if l.starts_with('#') {
                format!("{l}\n")
            } else {
                let last = l.rsplit(',').next().unwrap();
                format!("{l},{}\n", if last == "x2" { "x3" } else { last })
            }
        })
        .collect();
    write(d.path(), "dup.csv", &dup);
    let (code, err) = run(
        d.path(),
        &[
            "fit",
            "--panel",
            "dup.csv",
            "--knots-temporal",
            "3",
            "--knots-spatial",
            "4",
            "--out",
            "m.json",
        ],
    );
    assert_eq!(code, 4, "{err}");
    assert!(err.contains("tau0[3]") || err.contains("[3]"), "{err}");
}

#[test]
fn knot_separation_violation_is_identifiability_error() {
    let d = tempfile::tempdir().unwrap();
    ok(
        d.path(),
        &[
            "simulate",
            "--s",
            "15",
            "--t",
            "6",
            "--seed",
            "4",
            "--providers",
            "2",
            "--out",
            "mp.csv",
        ],
    );
    ok(
        d.path(),
        &[
            "fit-multilevel",
            "--panel",
            "mp.csv",
            "--knots-temporal",
            "3",
            "--knots-spatial",
            "3",
            "--out",
            "ml.json",
            "--knots-out",
            "k.json",
        ],
    );
    let mut k: serde_json::Value = serde_json::from_str(&read(d.path(), "k.json")).unwrap();
    let base = k["layout"]["temporal"].clone();
    k["layout"]["providers"][0]["temporal"] = base;
    write(d.path(), "bad.json", &k.to_string());
    let (code, err) = run(
        d.path(),
        &[
            "fit-multilevel",
            "--panel",
            "mp.csv",
            "--knots",
            "bad.json",
            "--out",
            "x.json",
        ],
    );
    assert_eq!(code, 6, "{err}");
    let (code, _) = run(
        d.path(),
        &[
            "fit-multilevel",
            "--panel",
            "mp.csv",
            "--knots-temporal",
            "3",
            "--sep-temporal",
            "50",
            "--out",
            "x.json",
        ],
    );
    assert_eq!(code, 6);
}

#[test]
fn known_linear_coefficient_is_classified_linear() {
    let d = tempfile::tempdir().unwrap();
    let sc = SimulationScenario {
        s: 25,
        t: 10,
        surfaces: vec![Surface::Sum {
            terms: vec![
                Surface::Linear {
                    intercept: 0.2,
                    time: 0.4,
                    s1: 0.0,
                    s2: 0.0,
                },
                Surface::Linear {
                    intercept: 0.0,
                    time: 0.0,
                    s1: 1.0,
                    s2: -1.0,
                },
            ],
        }],
        noise: Noise::Sd { sd: 0.3 },
        covariates: Default::default(),
        seed: 8,
    };
    write(d.path(), "sc.json", &sc.to_json());
    ok(d.path(), &["simulate", "--scenario", "sc.json", "--out", "p.csv"]);
    ok(
        d.path(),
        &[
            "fit",
            "--panel",
            "p.csv",
            "--knots-temporal",
            "4",
            "--knots-spatial",
            "5",
            "--out",
            "m.json",
        ],
    );
    ok(
        d.path(),
        &[
            "shape",
            "--model",
            "m.json",
            "--grid-times",
            "1:10:37",
            "--out",
            "s.json",
        ],
    );
    let v: serde_json::Value = serde_json::from_str(&read(d.path(), "s.json")).unwrap();
    let verdict = &v["verdicts"][0];
    assert_eq!(verdict["shape"], "linear", "{v}");
    let b = verdict["witness"]["b"].as_f64().unwrap();
    assert!((b - 0.4).abs() < 0.2, "{b}");
}

#[test]
fn band_files_nest_across_levels() {
    let d = tempfile::tempdir().unwrap();
    simulated(d.path());
    ok(
        d.path(),
        &[
            "fit",
            "--panel",
            "panel.csv",
            "--knots-temporal",
            "3",
            "--knots-spatial",
            "4",
            "--out",
            "m.json",
        ],
    );
    for (lvl, out) in [("0.05", "b05.csv"), ("0.10", "b10.csv")] {
        ok(
            d.path(),
            &[
                "bands",
                "--model",
                "m.json",
                "--predictor",
                "2",
                "--grid-times",
                "1:6:21",
                "--level",
                lvl,
                "--draws",
                "3000",
                "--seed",
                "9",
                "--out",
                out,
            ],
        );
    }
    let wide = rows(&read(d.path(), "b05.csv"));
    let narrow = rows(&read(d.path(), "b10.csv"));
    assert_eq!(wide.len(), 21);
    for (w, n) in wide.iter().zip(&narrow) {
        let f = |r: &Vec<String>, i: usize| r[i].parse::<f64>().unwrap();
        assert_eq!(w[0], n[0]);
        assert!(f(w, 2) <= f(n, 2) && f(w, 3) >= f(n, 3));
    }
}

#[test]
fn interaction_test_output_contract() {
    let d = tempfile::tempdir().unwrap();
    ok(
        d.path(),
        &["simulate", "--s", "12", "--t", "5", "--seed", "5", "--out", "p.csv"],
    );
    ok(
        d.path(),
        &[
            "test-interaction",
            "--panel",
            "p.csv",
            "--knots-temporal",
            "2",
            "--knots-spatial",
            "3",
            "--boot",
            "500",
            "--out",
            "t.json",
        ],
    );
    let v: serde_json::Value = serde_json::from_str(&read(d.path(), "t.json")).unwrap();
    let p = v["p_value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));
    assert_eq!(v["null_draws"], 500);
    assert!(v["rlrt_stat"].as_f64().unwrap() >= 0.0);
    let (code, _) = run(
        d.path(),
        &[
            "test-interaction",
            "--panel",
            "p.csv",
            "--boot",
            "10",
            "--out",
            "t.json",
        ],
    );
    assert_eq!(code, 2);
}

#[test]
fn version_mismatch_and_usage_errors() {
    let d = tempfile::tempdir().unwrap();
    simulated(d.path());
    ok(
        d.path(),
        &[
            "fit",
            "--panel",
            "panel.csv",
            "--knots-temporal",
            "3",
            "--knots-spatial",
            "4",
            "--out",
            "m.json",
        ],
    );
    let bumped = read(d.path(), "m.json").replacen("\"version\":1", "\"version\":2", 1);
    write(d.path(), "m2.json", &bumped);
    let (code, err) = run(
        d.path(),
        &["bands", "--model", "m2.json", "--grid-times", "1:6:5", "--out", "b.csv"],
    );
    assert_eq!(code, 7, "{err}");
    let panel = read(d.path(), "panel.csv").replacen("# version=1", "# version=3", 1);
    write(d.path(), "p3.csv", &panel);
    assert_eq!(run(d.path(), &["fit", "--panel", "p3.csv", "--out", "x.json"]).0, 7);
    let sc =
        SimulationScenario::default_two_predictor(5, 4, 1)
            .to_json()
            .replacen("\"version\": 1", "\"version\": 2", 1);
    write(d.path(), "sc.json", &sc);
    assert_eq!(
        run(d.path(), &["simulate", "--scenario", "sc.json", "--out", "x.csv"]).0,
        7
    );
    assert_eq!(
        run(
            d.path(),
            &[
                "bands",
                "--model",
                "m.json",
                "--grid-times",
                "1:6:5",
                "--level",
                "1.5",
                "--out",
                "b.csv"
            ]
        )
        .0,
        2
    );
    assert_eq!(
        run(
            d.path(),
            &[
                "bands",
                "--model",
                "m.json",
                "--grid-times",
                "1:6:5",
                "--predictor",
                "3",
                "--out",
                "b.csv"
            ]
        )
        .0,
        2
    );
    assert_eq!(
        run(d.path(), &["fit", "--panel", "missing.csv", "--out", "x.json"]).0,
        3
    );
    assert_eq!(run(d.path(), &["fit"]).0, 2);
    let (code, err) = run(
        d.path(),
        &[
            "shape",
            "--model",
            "m.json",
            "--part",
            "full",
            "--panel",
            "panel.csv",
            "--out",
            "s.json",
        ],
    );
    assert_eq!(code, 2, "{err}");
}

#[test]
fn multilevel_artifacts() {
    let d = tempfile::tempdir().unwrap();
    write(
        d.path(),
        "dev.json",
        r#"[[{"kind":"linear","intercept":0.5,"time":0.1,"s1":0,"s2":0}],[{"kind":"constant","value":0}],[{"kind":"constant","value":0}]]"#,
    );
    let sc = SimulationScenario {
        s: 15,
        t: 6,
        surfaces: vec![Surface::TemporalSine {
            amplitude: 1.0,
            frequency: 0.6,
            phase: 0.0,
        }],
        noise: Noise::Sd { sd: 0.4 },
        covariates: Default::default(),
        seed: 2,
    };
    write(d.path(), "sc.json", &sc.to_json());
    ok(
        d.path(),
        &[
            "simulate",
            "--scenario",
            "sc.json",
            "--deviations",
            "dev.json",
            "--out",
            "mp.csv",
            "--truth",
            "mt.csv",
        ],
    );
    ok(
        d.path(),
        &[
            "fit-multilevel",
            "--panel",
            "mp.csv",
            "--knots-temporal",
            "3",
            "--knots-spatial",
            "3",
            "--out",
            "ml.json",
            "--coefficients",
            "mc.csv",
        ],
    );
    for r in rows(&read(d.path(), "mc.csv")) {
        let v: Vec<f64> = r[4..].iter().map(|x| x.parse().unwrap()).collect();
        assert!((v[2] - v[0] - v[1]).abs() <= 1e-12 * (1.0 + v[0].abs() + v[1].abs()));
    }
    ok(
        d.path(),
        &[
            "bands",
            "--model",
            "ml.json",
            "--panel",
            "mp.csv",
            "--joint-level",
            "0.05",
            "--draws",
            "2000",
            "--out",
            "mb.csv",
        ],
    );
    let text = read(d.path(), "mb.csv");
    let b = rows(&text);
    assert_eq!(b.len(), 3 * 6);
    assert_eq!(
        meta(&text, "coverage").unwrap().parse::<f64>().unwrap(),
        1.0 - 0.05 / 3.0
    );
    ok(
        d.path(),
        &[
            "bands",
            "--model",
            "ml.json",
            "--part",
            "spatial",
            "--panel",
            "mp.csv",
            "--combined",
            "--draws",
            "2000",
            "--out",
            "ms.csv",
            "--significance",
            "sig.csv",
        ],
    );
    assert_eq!(rows(&read(d.path(), "sig.csv")).len(), 3 * 15);
}
