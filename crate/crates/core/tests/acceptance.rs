//! End-to-end acceptance checks. Each test prints one `[PASS]` or `[FAIL]`
//! line. The desk-scale runs (c5 to c8) share one generated dataset and take
//! hours on a single core.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ncdeon::autodiff::{Tape, Tensor};
use ncdeon::evaluation::GridPredictor;
use ncdeon::ncde::{tight_solver, Ncde, NcdeDims};
use ncdeon::nn::ParamSet;
use ncdeon::ode::{integrate_adaptive, integrate_fixed, Method, SolverConfig};
use ncdeon::operator::{ModelConfig, OperatorModel, TrunkKind};
use ncdeon::path::{ControlPath, TimeSeriesSignal};
use ncdeon::pde_data::{max_principle_violation, sample_signal, solve_poisson, OperatorDataset, PoissonConfig, SignalConfig};
use ncdeon::Error;

const BIN: &str = env!("CARGO_BIN_EXE_ncdeon");
const DESK_EPOCHS: &str = "300";

fn verdict(id: &str, ok: bool, detail: &str) {
    let line = format!("[{}] {id}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    // straight to the process stdout so the line shows without --nocapture
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(ok, "{id} failed: {detail}");
}

fn work_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

struct Output {
    ok: bool,
    stdout: String,
    stderr: String,
    elapsed: Duration,
}

fn run(args: &[&str]) -> Output {
    let start = Instant::now();
    let out = Command::new(BIN).args(args).output().expect("binary runs");
    Output {
        ok: out.status.success(),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        elapsed: start.elapsed(),
    }
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.ok, "ncdeon {args:?} failed: {}", out.stderr);
    out
}

fn field(stdout: &str, key: &str) -> f64 {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(key)?.trim().strip_prefix('=').map(|v| v.trim().parse::<f64>()))
        .unwrap_or_else(|| panic!("no {key} in {stdout:?}"))
        .expect("number")
}

fn desk_data() -> &'static PathBuf {
    static DATA: OnceLock<PathBuf> = OnceLock::new();
    DATA.get_or_init(|| {
        let dir = work_dir().join("desk");
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        let data = dir.join("data");
        run_ok(&["generate", "--out", data.to_str().unwrap()]);
        data
    })
}

struct DeskRun {
    dir: PathBuf,
    train: Output,
}

fn desk_run(name: &str, extra: &[&str]) -> DeskRun {
    let data = desk_data();
    let dir = work_dir().join("desk").join(name);
    let mut args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
        "--epochs",
        DESK_EPOCHS,
    ];
    args.extend_from_slice(extra);
    // one training at a time so the timing is not shared
    static TRAINING: Mutex<()> = Mutex::new(());
    let _guard = TRAINING.lock().unwrap_or_else(|e| e.into_inner());
    let train = run_ok(&args);
    DeskRun { dir, train }
}

fn ncde_run() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(|| desk_run("ncde", &["--model", "ncde"]))
}

fn gru_run() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(|| desk_run("gru", &["--model", "gru"]))
}

fn spatial_run() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(|| desk_run("spatial", &["--model", "ncde", "--trunk", "spatial"]))
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den
}

fn flat(mut grads: Vec<(usize, Tensor)>) -> Vec<f64> {
    grads.sort_by_key(|(i, _)| *i);
    grads.iter().flat_map(|(_, t)| t.data().to_vec()).collect()
}

#[test]
fn c1_gradient_correctness() {
    let start = Instant::now();
    let cfg = tight_solver();
    // RK4 steps aligned with the knots, where the path derivative is smooth
    let rk4 = SolverConfig {
        method: Method::Rk4,
        fixed_steps: 200,
        ..SolverConfig::default()
    };
    let (mut worst_tape, mut worst_fd) = (0.0f64, 0.0f64);
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut ps = ParamSet::new();
        let dims = NcdeDims {
            latent: 4,
            path_dim: 2,
            width: 8,
            depth: 2,
        };
        let m = Ncde::init(&mut ps, "b", dims, &mut rng);
        // irregular knots on [0, 1], gaps within a factor of three
        let n = rng.gen_range(5..12);
        let gaps: Vec<f64> = (0..n - 1).map(|_| rng.gen_range(0.5..1.5)).collect();
        let total: f64 = gaps.iter().sum();
        let mut times = vec![0.0];
        for g in &gaps {
            times.push(times[times.len() - 1] + g / total);
        }
        times[n - 1] = 1.0;
        let values = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let path = ControlPath::build(&TimeSeriesSignal::scalar(times.clone(), values).unwrap()).unwrap();
        let c: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let z = m.forward(&ps, &path, &cfg, &[]).unwrap().z_end;
        let adj = flat(m.adjoint_backward(&ps, &path, &cfg, &z, &c).unwrap());

        let tape = Tape::new();
        let p = ps.leaves(&tape);
        let zt = m.forward_tape_at(&p, &[&path], &times, Method::Rk4, 200).unwrap().pop().unwrap();
        let cv = tape.constant(Tensor::new(vec![1, 4], c.clone()).unwrap());
        let mut g = tape.backward(&zt.mul(&cv).unwrap().sum()).unwrap();
        let tape_g = flat(m.param_indices().into_iter().map(|i| (i, g.take(&p[i]))).collect());

        let loss = |ps: &ParamSet| -> f64 {
            let z = m.forward(ps, &path, &rk4, &times[1..]).unwrap().z_end;
            z.iter().zip(&c).map(|(a, b)| a * b).sum()
        };
        let mut idx = m.param_indices();
        idx.sort_unstable();
        let mut fd = Vec::new();
        for i in idx {
            let base = ps.get(i).clone();
            for k in 0..base.len() {
                let mut pp = ps.clone();
                let mut v = base.data().to_vec();
                v[k] += 1e-5;
                pp.set(i, Tensor::new(base.shape().to_vec(), v.clone()).unwrap()).unwrap();
                let lp = loss(&pp);
                v[k] -= 2e-5;
                pp.set(i, Tensor::new(base.shape().to_vec(), v).unwrap()).unwrap();
                fd.push((lp - loss(&pp)) / 2e-5);
            }
        }
        worst_tape = worst_tape.max(rel(&adj, &tape_g));
        worst_fd = worst_fd.max(rel(&adj, &fd));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "c1 gradient correctness",
        worst_tape <= 1e-3 && worst_fd <= 1e-4 && secs < 120.0,
        &format!("20 instances, adjoint vs tape {worst_tape:.2e} (<=1e-3), vs central FD {worst_fd:.2e} (<=1e-4), {secs:.1}s"),
    );
}

#[test]
fn c2_solver_order() {
    let mut f = |_t: f64, z: &Vec<f64>| -> ncdeon::Result<Vec<f64>> { Ok(z.clone()) };
    let err = |n: usize, f: &mut dyn FnMut(f64, &Vec<f64>) -> ncdeon::Result<Vec<f64>>| {
        let z = integrate_fixed(f, vec![1.0], 0.0, 2.0, n, Method::Tsit5).unwrap();
        (z[0] - 2f64.exp()).abs()
    };
    let solve = |n: usize, f: &mut dyn FnMut(f64, &Vec<f64>) -> ncdeon::Result<Vec<f64>>| {
        integrate_fixed(f, vec![1.0], 0.0, 2.0, n, Method::Tsit5).unwrap()[0]
    };
    // Richardson: successive differences of the 64, 128 and 256 step solutions
    let (a, b, c) = (solve(64, &mut f), solve(128, &mut f), solve(256, &mut f));
    let richardson = ((a - b) / (b - c)).abs().log2();
    let orders: Vec<f64> = [32usize, 64]
        .iter()
        .map(|&n| (err(n, &mut f) / err(2 * n, &mut f)).log2())
        .collect();
    let order = orders[1];
    let mut rhs = |_t: f64, z: &[f64], out: &mut [f64]| -> ncdeon::Result<()> {
        out[0] = z[0];
        Ok(())
    };
    let cfg = SolverConfig::default();
    let sol = integrate_adaptive(&mut rhs, &[1.0], 0.0, 1.0, &cfg, &[]).unwrap();
    let e = std::f64::consts::E;
    let gap = (sol.state[0] - e).abs();
    verdict(
        "c2 solver order",
        order >= 4.8 && gap <= cfg.rtol * e + cfg.atol,
        &format!(
            "step-halving order against exp(2) {orders:.3?} (last >= 4.8), three-level Richardson {richardson:.3}, adaptive |z(1)-e| = {gap:.2e} in {} steps",
            sol.accepted
        ),
    );
}

#[test]
fn c3_interpolation_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut knot_err, mut c1_err, mut fd_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let n = rng.gen_range(3..30);
        let mut t = 0.0;
        let times: Vec<f64> = (0..n)
            .map(|_| {
                t += rng.gen_range(0.05..0.3);
                t
            })
            .collect();
        let d = rng.gen_range(1..4);
        let values: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let sig = TimeSeriesSignal::new(times.clone(), values.clone(), d).unwrap();
        let path = ControlPath::build(&sig).unwrap();
        for k in 0..n {
            let x = path.eval(times[k]).values;
            for c in 0..d {
                knot_err = knot_err.max((x[c] - values[k * d + c]).abs());
            }
            if k > 0 && k + 1 < n {
                // the derivative is quadratic on each segment, so extrapolating
                // three interior samples gives the one-sided limits exactly
                let limit = |a: f64, b: f64| -> Vec<f64> {
                    let at = |s: f64| path.deriv(a + s * (b - a)).values;
                    let (p, q, r) = (at(0.25), at(0.5), at(0.75));
                    (0..=d).map(|c| p[c] - 3.0 * q[c] + 3.0 * r[c]).collect()
                };
                let left = limit(times[k - 1], times[k]);
                let right = limit(times[k + 1], times[k]);
                for c in 0..=d {
                    c1_err = c1_err.max((left[c] - right[c]).abs());
                }
            }
        }
        for _ in 0..20 {
            let s = rng.gen_range(times[0] + 1e-3..times[n - 1] - 1e-3);
            let h = 1e-6;
            let dv = path.deriv(s).values;
            let (p, m) = (path.eval(s + h).values, path.eval(s - h).values);
            for c in 0..=d {
                fd_err = fd_err.max((dv[c] - (p[c] - m[c]) / (2.0 * h)).abs());
            }
        }
    }
    verdict(
        "c3 interpolation contract",
        knot_err <= 1e-12 && c1_err <= 1e-10 && fd_err <= 1e-6,
        &format!("knot error {knot_err:.1e}, C1 jump {c1_err:.1e}, derivative vs FD {fd_err:.1e}"),
    );
}

#[test]
fn c4_ground_truth_validity() {
    let cfg = PoissonConfig::default();
    let zero = solve_poisson(|_| 0.0, &cfg).unwrap();
    let nullity = zero.iter().all(|&v| v == 0.0);
    let one = solve_poisson(|_| 1.0, &cfg).unwrap();
    let n = cfg.nx * cfg.ny;
    let coords = cfg.coords();
    let steady = (0..n)
        .map(|k| (one[(cfg.saves - 1) * n + k] - coords.row(k)[0]).abs())
        .fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for k in 0..200 {
        let scfg = SignalConfig {
            family: if k % 2 == 0 {
                ncdeon::pde_data::SignalFamily::Fourier
            } else {
                ncdeon::pde_data::SignalFamily::PiecewiseLinear
            },
            ..SignalConfig::default()
        };
        let sig = sample_signal(&scfg, &mut rng).unwrap();
        let u = solve_poisson(|t| sig.eval(t), &cfg).unwrap();
        worst = worst.max(max_principle_violation(&u, &cfg, |t| sig.eval(t)));
    }
    verdict(
        "c4 ground truth validity",
        nullity && steady < 1e-3 && worst <= 1e-10,
        &format!("zero bc exact: {nullity}, steady-state deviation {steady:.2e}, max principle slack {worst:.1e} over 200 samples"),
    );
}

#[test]
fn c5_desk_scale_end_to_end() {
    let r = ncde_run();
    let mean = field(&r.train.stdout, "mean_relative_l2");
    let median = field(&r.train.stdout, "median_relative_l2");
    let secs = r.train.elapsed.as_secs_f64();
    let ckpt = r.dir.join("model.ckpt");
    let eval = run_ok(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", desk_data().join("test").to_str().unwrap()]);
    let eval_mean = field(&eval.stdout, "mean_relative_l2");
    let losses: Vec<f64> = std::fs::read_to_string(r.dir.join("loss.txt"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split('\t').nth(2).unwrap().parse().unwrap())
        .collect();
    let w = (losses.len() / 10).max(1);
    let head = losses[..w].iter().sum::<f64>() / w as f64;
    let tail = losses[losses.len() - w..].iter().sum::<f64>() / w as f64;
    verdict(
        "c5 desk-scale end-to-end",
        mean < 5e-2 && median < 4e-2 && secs <= 7200.0 && (eval_mean - mean).abs() <= 1e-12 && tail < head,
        &format!(
            "NCDE test mean {mean:.4e} (<5e-2), median {median:.4e} (<4e-2), training {:.1} min (<=120), eval reproduces {eval_mean:.4e}, loss {head:.3e} -> {tail:.3e}",
            secs / 60.0
        ),
    );
}

#[test]
fn c6_baseline_ordering() {
    let ncde = field(&ncde_run().train.stdout, "mean_relative_l2");
    let gru = field(&gru_run().train.stdout, "mean_relative_l2");
    verdict(
        "c6 baseline ordering",
        gru >= ncde,
        &format!("GRU mean {gru:.4e} >= NCDE mean {ncde:.4e}"),
    );
}

#[test]
fn c7_resolution_independence() {
    let ckpt = ncde_run().dir.join("model.ckpt");
    let out = work_dir().join("desk").join("resample");
    let data = desk_data();
    run_ok(&[
        "resample",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("resample.json")).unwrap()).unwrap();
    let factors: Vec<f64> = serde_json::from_value(report["factors"].clone()).unwrap();
    let disc: Vec<Vec<f64>> = serde_json::from_value(report["discrepancy"].clone()).unwrap();
    let mut fractions = Vec::new();
    for (f, d) in factors.iter().zip(&disc) {
        if *f != 1.0 {
            let within = d.iter().filter(|&&x| x <= 5e-2).count() as f64 / d.len() as f64;
            fractions.push((*f, within));
        }
    }
    let gru_ckpt = gru_run().dir.join("model.ckpt");
    let refused = run(&["resample", "--ckpt", gru_ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    let defined_error = !refused.ok && refused.stderr.starts_with("error: unsupported model") && refused.stderr.lines().count() == 1;
    verdict(
        "c7 resolution independence",
        fractions.len() == 2 && fractions.iter().all(|&(_, w)| w >= 0.9) && defined_error,
        &format!(
            "share of test samples within 5e-2 per factor {fractions:?} (>=0.9), GRU refused: {:?}",
            refused.stderr.trim()
        ),
    );
}

#[test]
fn c8_spatial_only_trunk() {
    let r = spatial_run();
    let mean = field(&r.train.stdout, "mean_relative_l2");
    let model = OperatorModel::load(&r.dir.join("model.ckpt")).unwrap();
    let test = OperatorDataset::read(&desk_data().join("test.ds")).unwrap();
    let input = model.prepare(&test.signal(0).unwrap()).unwrap();
    let t = model.train_times.len();
    let past_end = model.predict_spatial_only(&input, &test.coords, t + 1);
    let zero = model.predict_spatial_only(&input, &test.coords, 0);
    let last = model.predict_spatial_only(&input, &test.coords, t);
    let q = Tensor::new(vec![1, 3], vec![0.5, 0.5, 0.37]).unwrap();
    let off_grid = model.predict(&input, &q);
    let mut shifted = test.clone();
    shifted.query_times[1] += 1e-3;
    let grid = GridPredictor::new(&model, &shifted);
    let refuses = matches!(past_end, Err(Error::TimeIndexOutOfRange { .. }))
        && matches!(zero, Err(Error::TimeIndexOutOfRange { .. }))
        && matches!(off_grid, Err(Error::UnsupportedModel(_)))
        && grid.is_err()
        && last.is_ok();
    verdict(
        "c8 spatial-only trunk",
        model.config.trunk == TrunkKind::Spatial && refuses && mean < 5e-2,
        &format!("final-grid test mean {mean:.4e} (<5e-2), off-grid time queries refused: {refuses}"),
    );
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.cfg");
    std::fs::write(
        &path,
        "# tiny profile\nn_train = 6\nn_test = 3\nnx = 8\nny = 8\nsaves = 9\nlatent = 4\nfield_width = 8\n\
         field_depth = 2\ntrunk_width = 8\ntrunk_depth = 2\nembed = 4\ngru_hidden = 4\nfixed_steps = 8\n\
         batch_size = 4\nqueries = 16\nepochs = 3\n",
    )
    .unwrap();
    path
}

fn same_files(a: &Path, b: &Path, names: &[&str]) -> bool {
    names.iter().all(|n| {
        let (x, y) = (std::fs::read(a.join(n)), std::fs::read(b.join(n)));
        matches!((x, y), (Ok(x), Ok(y)) if x == y)
    })
}

#[test]
fn c9_determinism() {
    let dir = work_dir().join("determinism");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = small_config(&dir);
    let c = cfg.to_str().unwrap();
    let p = |name: &str| dir.join(name).to_str().unwrap().to_string();
    let mut checks = Vec::new();

    run_ok(&["generate", "--config", c, "--out", &p("data_a"), "--threads", "1"]);
    run_ok(&["generate", "--config", c, "--out", &p("data_b"), "--threads", "1"]);
    checks.push(("generate", same_files(&dir.join("data_a"), &dir.join("data_b"), &["train.ds", "test.ds"])));

    let files = ["model.ckpt", "loss.txt", "config.txt", "validation.txt", "validation.json"];
    for model in ["ncde", "gru"] {
        let a = format!("{model}_a");
        let b = format!("{model}_b");
        let t2 = format!("{model}_t2");
        let o1 = run_ok(&["train", "--config", c, "--data", &p("data_a"), "--out", &p(&a), "--model", model, "--threads", "1"]);
        let o2 = run_ok(&["train", "--config", c, "--data", &p("data_a"), "--out", &p(&b), "--model", model, "--threads", "1"]);
        run_ok(&["train", "--config", c, "--data", &p("data_a"), "--out", &p(&t2), "--model", model, "--threads", "2"]);
        checks.push(("train", same_files(&dir.join(&a), &dir.join(&b), &files) && o1.stdout == o2.stdout));
        // config.txt records the thread count itself
        checks.push(("train threads", same_files(&dir.join(&a), &dir.join(&t2), &[files[0], files[1], files[3], files[4]])));
        let ckpt = dir.join(&a).join("model.ckpt");
        let e1 = run_ok(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", &p("data_a"), "--out", &p(&format!("{a}_e1")), "--threads", "1"]);
        let e2 = run_ok(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", &p("data_a"), "--out", &p(&format!("{a}_e2")), "--threads", "1"]);
        checks.push(("eval", e1.stdout == e2.stdout && same_files(&dir.join(format!("{a}_e1")), &dir.join(format!("{a}_e2")), &["eval.txt", "eval.json"])));
        checks.push(("eval reproduces validation", e1.stdout == o1.stdout));
    }
    let ckpt = dir.join("ncde_a").join("model.ckpt");
    run_ok(&["resample", "--ckpt", ckpt.to_str().unwrap(), "--data", &p("data_a"), "--out", &p("rs1"), "--threads", "1"]);
    run_ok(&["resample", "--ckpt", ckpt.to_str().unwrap(), "--data", &p("data_a"), "--out", &p("rs2"), "--threads", "1"]);
    checks.push(("resample", same_files(&dir.join("rs1"), &dir.join("rs2"), &["resample.txt", "resample.json"])));

    // zero epochs write the initialization
    run_ok(&["train", "--config", c, "--data", &p("data_a"), "--out", &p("init"), "--epochs", "0"]);
    let data = OperatorDataset::read(&dir.join("data_a").join("train.ds")).unwrap();
    let s = ncdeon::config::Settings::from_file(&cfg).unwrap();
    let times = data.query_times.iter().map(|t| t / data.norm.time_scale).collect();
    let model_cfg = ModelConfig {
        input_channels: 1,
        spatial_dims: 2,
        output_channels: 1,
        ..s.model
    };
    let init = OperatorModel::new(model_cfg, data.norm.clone(), s.solver, times, s.seed).unwrap();
    let bytes = std::fs::read(dir.join("init").join("model.ckpt")).unwrap();
    checks.push(("zero epochs", bytes == init.to_container().unwrap().to_bytes()));

    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    verdict(
        "c9 determinism",
        failed.is_empty(),
        &format!("{} byte-identity checks, failing: {failed:?}", checks.len()),
    );
}
