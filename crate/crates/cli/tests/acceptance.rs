//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails at the end if any criterion failed.
//!
//! Training runs go through the `ncg` binary at a scaled budget (1e5
//! samples, 50 epochs, batch 1e4) and take roughly 17 minutes on one core.
//! Run with `cargo test -p ncg-cli --test acceptance -- --nocapture`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use ncg_core::analysis::{coarse_predictive_information, ntic, DiscreteProcess};
use ncg_core::autodiff::{Tape, Tensor};
use ncg_core::gradcheck::{run_suite, GradcheckConfig, SUITE_OPS};
use ncg_core::linalg;
use ncg_core::loss::{ncg_loss, ncg_loss_continuous, ClassDistributionSeries, ResidualSeries, DEFAULT_RIDGE};
use ncg_core::rng::{SeedSource, StreamRng};
use ncg_core::signals::{gen_noise, NoiseSpec};
use rand::Rng;
use serde_json::{json, Value};

const SEEDS: [u64; 3] = [0, 1, 2];
const EPOCHS: usize = 50;
const SAMPLES: usize = 100_000;

struct Report {
    failed: Vec<String>,
}

impl Report {
    fn check(&mut self, name: &str, ok: bool, detail: String, started: Instant) {
        let status = if ok { "PASS" } else { "FAIL" };
        println!("{status} {name}: {detail} ({:.1}s)", started.elapsed().as_secs_f64());
        if !ok {
            self.failed.push(name.to_owned());
        }
    }
}

fn ncg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ncg"))
        .args(args)
        .current_dir(dir)
        .env("NCG_DETERMINISTIC", "1")
        .output()
        .unwrap()
}

fn run_ok(dir: &Path, args: &[&str]) {
    let o = ncg(dir, args);
    assert!(o.status.success(), "ncg {args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn median(v: &[f64]) -> f64 {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// One trained and evaluated run.
struct Run {
    pearson: f64,
    test_q: f64,
    transitions: Value,
}

fn train_task(root: &Path, name: &str, a: Value) -> Vec<Run> {
    let dir = root.join(name);
    fs::create_dir_all(&dir).unwrap();
    let cfg = json!({
        "data": {"source": "noise", "n": SAMPLES, "a": a, "b": {"kind": "gaussian"}},
        "train": {"epochs": EPOCHS, "batch_size": 10_000},
        "output": "run"
    });
    fs::write(dir.join("c.json"), cfg.to_string()).unwrap();
    SEEDS
        .iter()
        .map(|seed| {
            let s = seed.to_string();
            let out = format!("seed={seed}");
            run_ok(&dir, &["train", "--config", "c.json", "--seed", &s, "--out", &out]);
            run_ok(&dir, &["eval", "--config", "c.json", "--seed", &s, "--out", &out]);
            let out = dir.join(out);
            let run = Run {
                pearson: read_json(&out.join("correlation.json"))["pearson"].as_f64().unwrap(),
                test_q: read_json(&out.join("summary.json"))["final_test_q"].as_f64().unwrap(),
                transitions: read_json(&out.join("transitions.json")),
            };
            println!("  {name} seed {seed}: |r| = {:.4}, test Q = {:.4}", run.pearson, run.test_q);
            run
        })
        .collect()
}

fn gradients(r: &mut Report) {
    let t = Instant::now();
    let ops = run_suite(SUITE_OPS, 100, 0, &GradcheckConfig::default()).unwrap();
    let worst = ops.iter().map(|o| o.report.max_rel_err).fold(0.0, f64::max);
    let failing: Vec<&str> = ops.iter().filter(|o| !o.passed() || o.instances < 100).map(|o| o.op.as_str()).collect();
    let ok = failing.is_empty() && t.elapsed().as_secs() < 120;
    r.check(
        "1 gradient suite",
        ok,
        format!("{} ops x 100 instances, worst rel err {worst:.2e}, failing {failing:?}", ops.len()),
        t,
    );
}

fn plateau(r: &mut Report) {
    let t = Instant::now();
    let mut worst = 0.0f64;
    for k in [2usize, 5, 20] {
        for b in [1usize, 4, 16] {
            let s = ClassDistributionSeries::new(Tensor::full(&[b, k, 64], 1.0 / k as f64), 0).unwrap();
            let shat = ClassDistributionSeries::new(Tensor::full(&[b, k, 50], 1.0 / k as f64), 0).unwrap();
            worst = worst.max(ncg_loss(&s, &shat, 14).unwrap().abs());
        }
    }
    r.check("2 loss plateau", worst < 1e-9, format!("max |Q| = {worst:.1e}"), t);
}

fn random_chain(rng: &mut StreamRng) -> DiscreteProcess {
    let x = rng.random_range(1..=5);
    let y = rng.random_range(1..=5);
    let kernel = (0..x)
        .map(|_| {
            let raw: Vec<f64> = (0..x).map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random::<f64>() + 1e-3 }).collect();
            let total: f64 = raw.iter().sum();
            if total == 0.0 {
                return (0..x).map(|j| f64::from(u8::from(j == 0))).collect();
            }
            let mut row: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let big = (0..x).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            row[big] = 0.0;
            row[big] = 1.0 - row.iter().sum::<f64>();
            row
        })
        .collect();
    let map = (0..x).map(|_| rng.random_range(0..y)).collect();
    DiscreteProcess::new(kernel, map, y).unwrap()
}

fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|v| -v * v.ln()).sum()
}

/// `H(Y') - H(Y'|Y)` from the joint of consecutive coarse states.
fn coarse_oracle(p: &DiscreteProcess) -> f64 {
    let ny = p.y_size;
    let mut joint = vec![vec![0.0; ny]; ny];
    for (x, row) in p.kernel.iter().enumerate() {
        for (x2, &k) in row.iter().enumerate() {
            joint[p.map[x]][p.map[x2]] += p.stationary[x] * k;
        }
    }
    let next: Vec<f64> = (0..ny).map(|j| joint.iter().map(|r| r[j]).sum()).collect();
    let h_cond: f64 = joint
        .iter()
        .map(|r| {
            let m: f64 = r.iter().sum();
            if m > 0.0 {
                m * entropy(&r.iter().map(|v| v / m).collect::<Vec<_>>())
            } else {
                0.0
            }
        })
        .sum();
    entropy(&next) - h_cond
}

fn ntic_identity(r: &mut Report) {
    let t = Instant::now();
    let mut rng = SeedSource::new(11).stream("chains");
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let p = random_chain(&mut rng);
        let oracle = coarse_oracle(&p);
        worst = worst.max((ntic(&p) - oracle).abs()).max((coarse_predictive_information(&p) - oracle).abs());
    }
    let ok = worst < 1e-10 && t.elapsed().as_secs() < 10;
    r.check("3 ntic identity", ok, format!("100 chains, max deviation {worst:.1e}"), t);
}

fn moments(r: &mut Report) {
    let t = Instant::now();
    let n = 1_000_000;
    let stats = |x: &[f64]| {
        let m = x.iter().sum::<f64>() / n as f64;
        let v = x.iter().map(|s| (s - m).powi(2)).sum::<f64>() / n as f64;
        let c = x.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum::<f64>() / (n - 1) as f64;
        (m, v, c / v)
    };
    let half_sqrt3 = 3f64.sqrt() / 2.0;
    let sources = [
        (NoiseSpec::Ar1Cos { cos_theta: half_sqrt3 }, Some(half_sqrt3)),
        (NoiseSpec::Ar1Cos { cos_theta: 0.3 }, Some(0.3)),
        (NoiseSpec::Ar1 { theta: 1.0 }, Some(1f64.cos())),
        (NoiseSpec::Gaussian, Some(0.0)),
        (NoiseSpec::Binary, None),
        (NoiseSpec::TernaryBalanced, None),
        (NoiseSpec::TernaryUnbalanced, None),
    ];
    let mut ok = true;
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    for (i, (spec, lag)) in sources.iter().enumerate() {
        let x = gen_noise(spec, n, &mut SeedSource::new(i as u64).stream("moments")).unwrap();
        let (m, v, c) = stats(&x.samples);
        let lag_err = lag.map_or(0.0, |l| (c - l).abs());
        worst = (worst.0.max(m.abs()), worst.1.max((v - 1.0).abs()), worst.2.max(lag_err));
        ok &= m.abs() <= 0.01 && (v - 1.0).abs() <= 0.01 && lag_err <= 0.01;
    }
    ok &= t.elapsed().as_secs() < 30;
    r.check(
        "4 generator moments",
        ok,
        format!("max |mean| {:.4}, max |var-1| {:.4}, max lag-1 error {:.4}", worst.0, worst.1, worst.2),
        t,
    );
}

fn cofactor(m: &[Vec<f64>]) -> f64 {
    if m.len() == 1 {
        return m[0][0];
    }
    (0..m.len())
        .map(|j| {
            let minor: Vec<Vec<f64>> = m[1..]
                .iter()
                .map(|row| row.iter().enumerate().filter(|&(c, _)| c != j).map(|(_, &v)| v).collect())
                .collect();
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            sign * m[0][j] * cofactor(&minor)
        })
        .sum()
}

fn q_reg(r: &mut Report) {
    let t = Instant::now();
    let n = 100_000;
    let y = gen_noise(&NoiseSpec::Gaussian, 3 * n, &mut SeedSource::new(5).stream("qreg")).unwrap().samples;
    let eps: Vec<f64> = y.iter().map(|v| v / 2.0).collect();
    let y = Tensor::new(vec![1, 3, n], y).unwrap();
    let eps = ResidualSeries::new(Tensor::new(vec![1, 3, n], eps).unwrap()).unwrap();
    let q = ncg_loss_continuous(&y, &eps, DEFAULT_RIDGE).unwrap();
    let target = 6.0 * std::f64::consts::LN_2;

    let mut rng = SeedSource::new(6).stream("det");
    let mut worst = 0.0f64;
    for d in 1..=4 {
        for _ in 0..50 {
            let a: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.5..1.5)).collect();
            let mut m = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    m[i * d + j] = (0..d).map(|k| a[i * d + k] * a[j * d + k]).sum::<f64>() + f64::from(u8::from(i == j));
                }
            }
            let rows: Vec<Vec<f64>> = m.chunks(d).map(<[f64]>::to_vec).collect();
            let oracle = cofactor(&rows);
            let (log_det, _) = linalg::spd_log_det_and_inverse(&m, d).unwrap();
            worst = worst.max((linalg::determinant(&m, d) - oracle).abs()).max((log_det - oracle.ln()).abs());
        }
    }
    // The tape op on a sample whose covariance is exactly diagonal.
    let mut tape: Tape<f64> = Tape::new();
    let x = Tensor::new(vec![1, 2, 4], vec![1.0, -1.0, 1.0, -1.0, 2.0, 2.0, -2.0, -2.0]).unwrap();
    let xv = tape.constant(x).unwrap();
    let ld = tape.log_det_cov(xv, 0.0).unwrap();
    worst = worst.max((tape.value(ld).data()[0] - 4f64.ln()).abs());

    let ok = (q - target).abs() < 0.1 && worst < 1e-10;
    r.check("9 Q_reg", ok, format!("Monte-Carlo {q:.4} vs {target:.4}, determinant max error {worst:.1e}"), t);
}

/// Every file below `dir`, relative path to contents.
fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism(r: &mut Report, root: &Path) {
    let t = Instant::now();
    let cfg = json!({
        "data": {"source": "noise", "n": 8000},
        "train": {"epochs": 2, "batch_size": 4000, "chunk_length": 500},
        "output": "out"
    });
    let commands: [&[&str]; 5] = [
        &["generate", "--config", "c.json", "--out", "out/gen"],
        &["train", "--config", "c.json", "--seed", "4"],
        &["eval", "--config", "c.json", "--seed", "4"],
        &["sweep", "--config", "c.json", "--param", "cos_theta", "--values", "0.5,0.9", "--seeds", "2", "--out", "out/sweep"],
        &["gradcheck", "--instances", "5", "--out", "out/gc"],
    ];
    let trees: Vec<_> = ["a", "b"]
        .iter()
        .map(|name| {
            let dir = root.join("determinism").join(name);
            fs::create_dir_all(&dir).unwrap();
            fs::write(dir.join("c.json"), cfg.to_string()).unwrap();
            let stdout: Vec<Vec<u8>> = commands
                .iter()
                .map(|args| {
                    let o = ncg(&dir, args);
                    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
                    o.stdout
                })
                .collect();
            (tree(&dir.join("out")), stdout)
        })
        .collect();
    let differing: Vec<String> = trees[0]
        .0
        .iter()
        .filter(|(p, bytes)| trees[1].0.get(*p) != Some(bytes))
        .map(|(p, _)| p.display().to_string())
        .collect();
    let same_listing = trees[0].0.keys().eq(trees[1].0.keys());
    let ok = differing.is_empty() && same_listing && trees[0].1 == trees[1].1;
    r.check(
        "8 determinism",
        ok,
        format!("{} output files over {} commands, differing {differing:?}", trees[0].0.len(), commands.len()),
        t,
    );
}

fn self_loops(run: &Run) -> (f64, bool) {
    let m = &run.transitions["matrix"];
    let min_self = (0..2).map(|i| m[i][i].as_f64().unwrap()).fold(1.0, f64::min);
    let edges = run.transitions["edges"].as_array().unwrap();
    let has = |i: u64| edges.iter().any(|e| e["from"] == i && e["to"] == i);
    (min_self, has(0) && has(1))
}

#[test]
fn acceptance_suite() {
    let root = tempfile::tempdir().unwrap();
    let mut r = Report { failed: Vec::new() };

    gradients(&mut r);
    plateau(&mut r);
    ntic_identity(&mut r);
    moments(&mut r);
    q_reg(&mut r);
    determinism(&mut r, root.path());

    let t = Instant::now();
    let strong = train_task(root.path(), "cos0.866", json!({"kind": "ar1_cos", "cos_theta": 3f64.sqrt() / 2.0}));
    let strong_r: Vec<f64> = strong.iter().map(|x| x.pearson).collect();
    r.check("5 envelope recovery", median(&strong_r) >= 0.7, format!("median |r| {:.4} over {strong_r:.4?}", median(&strong_r)), t);
    let escaped = strong.iter().filter(|x| x.test_q < -0.2).count();
    r.check(
        "train: plateau escape",
        escaped >= 2,
        format!("{escaped} of 3 seeds with held-out Q < -0.2 ({:.4?})", strong.iter().map(|x| x.test_q).collect::<Vec<_>>()),
        t,
    );

    let t = Instant::now();
    let loops: Vec<(f64, bool)> = strong.iter().map(self_loops).collect();
    let ok = loops.iter().all(|&(min_self, both)| min_self > 0.9 && both);
    r.check("7 transition graph", ok, format!("per seed (min self-transition, both self-loops): {loops:.4?}"), t);

    let t = Instant::now();
    let weak = train_task(root.path(), "cos0.3", json!({"kind": "ar1_cos", "cos_theta": 0.3}));
    let ternary = train_task(root.path(), "ternary", json!({"kind": "ternary_balanced"}));
    let weak_r: Vec<f64> = weak.iter().map(|x| x.pearson).collect();
    let tern_r: Vec<f64> = ternary.iter().map(|x| x.pearson).collect();
    let tern_q: Vec<f64> = ternary.iter().map(|x| x.test_q).collect();
    let ordered = median(&strong_r) > median(&weak_r);
    let tern_ok = median(&tern_r) < 0.1 && median(&tern_q).abs() <= 0.05;
    r.check(
        "6 hardness ordering",
        ordered && tern_ok,
        format!(
            "median |r| {:.4} (0.866) vs {:.4} (0.3); ternary median |r| {:.4}, median Q {:.4}",
            median(&strong_r),
            median(&weak_r),
            median(&tern_r),
            median(&tern_q)
        ),
        t,
    );
    let tern_max_q = tern_q.iter().map(|q| q.abs()).fold(0.0, f64::max);
    r.check("train: ternary failure mode", tern_max_q <= 0.02, format!("max |Q| {tern_max_q:.4} over {tern_q:.4?}"), t);

    assert!(r.failed.is_empty(), "failed criteria: {:?}", r.failed);
}
