//! Acceptance criteria for `cycleflow`, each returning an [`Outcome`].
//! The `acceptance` test target runs them and prints one line apiece.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use cycleflow::cli::{self as commands, Context, RunConfig};
use cycleflow::condnets::{FieldNet, FieldNetConfig};
use cycleflow::cyclereg::{CycleLossReport, CycleWeights};
use cycleflow::evalkit::{self, logf0_pcc, sliced_wasserstein, EvalReport};
use cycleflow::flowcore::{ode_sample, ot_path, target_field, FlowHyper, Solver};
use cycleflow::gradcore::{value_and_grad, AdamHyper, ParamSet};
use cycleflow::pipeline::{self, load_checkpoint, NetsConfig, Trainer};
use cycleflow::rng::{self, Rng};
use cycleflow::synthworld::World;
use cycleflow::Error;
use ndarray::Array2;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }

    fn error(e: impl std::fmt::Display) -> Self {
        Self::new(false, format!("error: {e}"))
    }
}

fn within(elapsed: Duration, limit_s: f64) -> (bool, String) {
    let s = elapsed.as_secs_f64();
    (s < limit_s, format!("{s:.1}s of {limit_s:.0}s"))
}

/// Runs `f`, appending the elapsed time; with a limit, exceeding it fails.
pub fn timed(limit_s: Option<f64>, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let out = f();
    let Some(limit) = limit_s else {
        return Outcome::new(
            out.pass,
            format!("{} [{:.1}s]", out.detail, start.elapsed().as_secs_f64()),
        );
    };
    let (fast, t) = within(start.elapsed(), limit);
    Outcome::new(out.pass && fast, format!("{} [{t}]", out.detail))
}

fn run_commands(cfg: &RunConfig, out: &Path) -> Result<(), String> {
    let ctx = Context::new(cfg.clone(), out.to_path_buf()).map_err(|e| commands::error_line(&e))?;
    commands::cmd_gen_data(&ctx)
        .and_then(|()| commands::cmd_train(&ctx))
        .and_then(|()| commands::cmd_eval(&ctx, None))
        .map_err(|e| commands::error_line(&e))
}

fn shipped_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.cfg")
}

fn testdata(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/testdata")
        .join(name)
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn exactness() -> Outcome {
    let mut r = rng::seeded(101);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let rows = 1 + rng::index(&mut r, 6);
        let cols = 1 + rng::index(&mut r, 5);
        let x0 = rng::normal_matrix(&mut r, rows, cols);
        let x1 = rng::normal_matrix(&mut r, rows, cols);
        let sigma = rng::uniform_range(&mut r, 0.0, 0.2);
        let t = rng::uniform(&mut r);
        let (Ok(start), Ok(end), Ok(mid), Ok(v)) = (
            ot_path(&x0, &x1, 0.0, sigma),
            ot_path(&x0, &x1, 1.0, sigma),
            ot_path(&x0, &x1, t, sigma),
            target_field(&x0, &x1, sigma),
        ) else {
            return Outcome::new(false, "ot_path/target_field rejected valid input");
        };
        let want_end = &(&x0 * sigma) + &x1;
        let want_mid = &x0 * (1.0 - (1.0 - sigma) * t) + &(&x1 * t);
        let want_v = &x1 - &(&x0 * (1.0 - sigma));
        for (a, b) in [(&start, &x0), (&end, &want_end), (&mid, &want_mid), (&v, &want_v)] {
            worst = worst.max(max_abs_diff(a, b));
        }

        let n = 3 + rng::index(&mut r, 30);
        let a: Vec<f64> = (0..n).map(|_| rng::normal(&mut r)).collect();
        let b: Vec<f64> = a.iter().map(|x| x + 0.5 * rng::normal(&mut r)).collect();
        let (s1, o1) = (
            rng::uniform_range(&mut r, 0.1, 5.0),
            rng::uniform_range(&mut r, -3.0, 3.0),
        );
        let (s2, o2) = (
            rng::uniform_range(&mut r, 0.1, 5.0),
            rng::uniform_range(&mut r, -3.0, 3.0),
        );
        let a2: Vec<f64> = a.iter().map(|x| s1 * x + o1).collect();
        let b2: Vec<f64> = b.iter().map(|x| s2 * x + o2).collect();
        match (logf0_pcc(&a, &b), logf0_pcc(&a2, &b2)) {
            (Ok(p), Ok(q)) => worst = worst.max((p - q).abs()),
            _ => return Outcome::new(false, "pcc failed on non-constant input"),
        }

        let w = CycleWeights {
            l1: rng::uniform(&mut r),
            l2: rng::uniform(&mut r),
            l3: rng::uniform(&mut r),
        };
        let x = [rng::uniform(&mut r), rng::uniform(&mut r), rng::uniform(&mut r)];
        let y = [rng::uniform(&mut r), rng::uniform(&mut r), rng::uniform(&mut r)];
        let rep = CycleLossReport::assemble(&w, x, y);
        let l_x = w.l1 * x[0] + w.l2 * x[1] + w.l3 * x[2];
        let l_y = w.l1 * y[0] + w.l2 * y[1] + w.l3 * y[2];
        for (got, want) in [
            (rep.l_x, l_x),
            (rep.l_y, l_y),
            (rep.total, l_x + l_y),
            (rep.l_xx, x[0]),
            (rep.l_xyx, x[1]),
            (rep.l_xyy, x[2]),
            (rep.l_yy, y[0]),
            (rep.l_yxy, y[1]),
            (rep.l_yxx, y[2]),
        ] {
            worst = worst.max((got - want).abs());
        }
    }
    Outcome::new(
        worst <= 1e-12,
        format!("max abs error {worst:.2e} (tol 1e-12) over 200 draws"),
    )
}

fn randomized(cfg: FieldNetConfig, r: &mut Rng) -> cycleflow::Result<FieldNet> {
    let mut net = FieldNet::init(cfg, r)?;
    for (_, p) in net.params.iter_mut() {
        let fan_in = p.nrows().max(1) as f64;
        *p = rng::normal_matrix(r, p.nrows(), p.ncols()) * (1.0 / fan_in.sqrt());
    }
    Ok(net)
}

fn regression_loss(net: &FieldNet, params: &ParamSet, x: &Array2<f64>, target: &Array2<f64>) -> cycleflow::Result<f64> {
    let probe = FieldNet::from_params(net.config, params.clone())?;
    let out = probe.eval(&[x.view()])?;
    Ok((&out - target).mapv(|e| e * e).mean().unwrap_or(0.0))
}

/// Directional derivative along a random unit direction against a central
/// difference of the same loss.
fn gradient_draw(cfg: FieldNetConfig, r: &mut Rng) -> cycleflow::Result<f64> {
    let net = randomized(cfg, r)?;
    let rows = 1 + rng::index(r, 6);
    let x = rng::normal_matrix(r, rows, cfg.input_dim());
    let target = rng::normal_matrix(r, rows, cfg.output_dim);
    let (_, grads) = value_and_grad(&net.params, |tape, b| {
        let xv = tape.constant(x.clone());
        let out = net.apply(tape, b, &[xv]);
        let tv = tape.constant(target.clone());
        let d = tape.sub(out, tv);
        Ok::<_, Error>(tape.mean_sq(d))
    })?;
    let mut dir = net.params.zeros_like();
    for (_, d) in dir.iter_mut() {
        *d = rng::normal_matrix(r, d.nrows(), d.ncols());
    }
    let norm = dir.sq_norm().sqrt();
    dir.scale(1.0 / norm);
    let analytic: f64 = grads.iter().zip(dir.iter()).map(|((_, g), (_, d))| (g * d).sum()).sum();
    let h = 1e-5;
    let shifted = |sign: f64| {
        let mut p = net.params.clone();
        for ((_, v), (_, d)) in p.iter_mut().zip(dir.iter()) {
            *v = &*v + &(d * (sign * h));
        }
        p
    };
    let up = regression_loss(&net, &shifted(1.0), &x, &target)?;
    let down = regression_loss(&net, &shifted(-1.0), &x, &target)?;
    let fd = (up - down) / (2.0 * h);
    Ok((analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8))
}

pub fn gradients() -> Outcome {
    let world = match RunConfig::default().build_world() {
        Ok(w) => w,
        Err(e) => return Outcome::error(e),
    };
    let tiny = NetsConfig {
        hidden_dim: 16,
        n_layers: 2,
        ..NetsConfig::default()
    };
    let mut configs = Vec::new();
    for nets in [NetsConfig::default(), tiny] {
        configs.push(nets.encoder(&world.cfg));
        configs.push(nets.pitch_field(&world.cfg));
        configs.push(nets.mel_field(&world.cfg));
    }
    configs.push(FieldNetConfig::unconditional(2, 16, 128, 3));
    let mut r = rng::seeded(202);
    let mut worst = 0.0f64;
    for cfg in &configs {
        for _ in 0..100 {
            match gradient_draw(*cfg, &mut r) {
                Ok(e) => worst = worst.max(e),
                Err(e) => return Outcome::error(e),
            }
        }
    }
    Outcome::new(
        worst < 1e-4,
        format!(
            "max rel error {worst:.2e} (tol 1e-4), {} configs x 100 draws",
            configs.len()
        ),
    )
}

fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

pub fn solver_order() -> Outcome {
    // dx/dt = t from x(0) = 0, so x(1) = 1/2.
    let ns = [4usize, 8, 16, 32, 64];
    let mut pass = true;
    let mut parts = Vec::new();
    for (solver, order, tol) in [(Solver::Euler, 1.0, 0.1), (Solver::Midpoint, 2.0, 0.2)] {
        let mut errs = Vec::new();
        for &n in &ns {
            let hyper = FlowHyper {
                sigma: 0.0,
                solver,
                n_steps: n,
            };
            match ode_sample(|x, t| Ok(Array2::from_elem(x.dim(), t)), Array2::zeros((1, 1)), &hyper) {
                Ok(x) => errs.push((x[[0, 0]] - 0.5).abs()),
                Err(e) => return Outcome::error(e),
            }
        }
        let xs: Vec<f64> = ns.iter().map(|&n| (1.0 / n as f64).ln()).collect();
        let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
        let slope = fit_slope(&xs, &ys);
        let ok = (slope - order).abs() <= tol;
        pass &= ok;
        let shown: Vec<String> = errs.iter().map(|e| format!("{e:.1e}")).collect();
        parts.push(format!(
            "{solver} slope {slope:.3} (want {order}±{tol}) errors [{}]",
            shown.join(" ")
        ));
    }
    Outcome::new(pass, parts.join("; "))
}

fn eight_gaussians(r: &mut Rng, n: usize) -> Array2<f64> {
    let scale = 4.0 / 2f64.sqrt();
    let noise = 0.5 / 2f64.sqrt();
    let mut out = Array2::zeros((n, 2));
    for i in 0..n {
        let k = rng::index(r, 8) as f64;
        let angle = k * PI / 4.0;
        out[[i, 0]] = scale * angle.cos() + noise * rng::normal(r);
        out[[i, 1]] = scale * angle.sin() + noise * rng::normal(r);
    }
    out
}

pub fn base_cfm() -> Outcome {
    let cfg = pipeline::UncondTrain {
        steps: 5000,
        batch: 256,
        adam: AdamHyper {
            lr: 1e-3,
            ..AdamHyper::default()
        },
        warmup_steps: 100,
        sigma: 1e-4,
    };
    let run = || -> cycleflow::Result<(f64, f64)> {
        let mut init = rng::stream(303, 0);
        let mut net = pipeline::unconditional_net(2, 128, 3, &mut init)?;
        let losses = pipeline::train_unconditional(&mut net, eight_gaussians, &cfg, &mut rng::stream(303, 1))?;
        let hyper = FlowHyper {
            sigma: cfg.sigma,
            solver: Solver::Midpoint,
            n_steps: 20,
        };
        let generated = pipeline::sample_unconditional(&net, 2000, &hyper, &mut rng::stream(303, 2))?;
        let held_out = eight_gaussians(&mut rng::stream(303, 3), 2000);
        let swd = sliced_wasserstein(generated.view(), held_out.view(), 64, &mut rng::stream(303, 4))?;
        let tail = losses[losses.len() - 100..].iter().sum::<f64>() / 100.0;
        Ok((swd, tail))
    };
    match run() {
        Ok((swd, tail)) => Outcome::new(
            swd < 0.15,
            format!("sliced W2 {swd:.4} (need < 0.15) after 5000 steps, final loss {tail:.3}"),
        ),
        Err(e) => Outcome::error(e),
    }
}

/// `gen-data`, `train` and `eval` on the shipped config.
pub struct DefaultRun {
    _dir: tempfile::TempDir,
    out: PathBuf,
    cfg: RunConfig,
    world: World,
    elapsed: Duration,
}

impl DefaultRun {
    pub fn start() -> Result<Self, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let out = dir.path().join("out");
        let cfg_path = shipped_config();
        let cfg = RunConfig::load(&cfg_path).map_err(|e| e.to_string())?;
        let start = Instant::now();
        run_commands(&cfg, &out)?;
        let elapsed = start.elapsed();
        let world = cfg.build_world().map_err(|e| e.to_string())?;
        Ok(Self {
            _dir: dir,
            out,
            cfg,
            world,
            elapsed,
        })
    }

    fn path(&self, rel: &Path) -> PathBuf {
        self.out.join(rel)
    }

    fn mean_row(&self) -> Result<String, String> {
        let text = std::fs::read_to_string(self.path(&self.cfg.paths.report)).map_err(|e| e.to_string())?;
        text.lines()
            .last()
            .filter(|l| l.starts_with("mean,"))
            .map(str::to_string)
            .ok_or_else(|| "report has no mean row".to_string())
    }
}

fn field(row: &str, idx: usize) -> f64 {
    row.split(',').nth(idx).and_then(|s| s.parse().ok()).unwrap_or(f64::NAN)
}

pub fn end_to_end(run: &Result<DefaultRun, String>) -> Outcome {
    let run = match run {
        Ok(r) => r,
        Err(e) => return Outcome::error(e),
    };
    let row = match run.mean_row() {
        Ok(r) => r,
        Err(e) => return Outcome::error(e),
    };
    let (pcc, style, content, pmean) = (field(&row, 3), field(&row, 5), field(&row, 6), field(&row, 7));
    let (fast, t) = within(run.elapsed, 30.0 * 60.0);
    let pass = pcc >= 0.90 && style >= 0.90 && content >= 0.95 && pmean < 0.1 && fast;
    Outcome::new(
        pass,
        format!(
            "pcc {pcc:.4} (>= 0.90) style {style:.4} (>= 0.90) content {content:.4} (>= 0.95) \
             pitch mean err {pmean:.4} (< 0.1) over {} pairs [{t}]",
            run.cfg.n_eval
        ),
    )
}

struct Variants {
    full: EvalReport,
    no_cycle: EvalReport,
    no_pitch: EvalReport,
}

fn variants_from_base(
    world: &World,
    base: &Trainer,
    run_cfg: &RunConfig,
    train_cfg: &pipeline::TrainConfig,
    full: Option<&pipeline::DualModels>,
) -> cycleflow::Result<Variants> {
    let [full_cfg, no_cycle_cfg, no_pitch_cfg] = evalkit::ablation_configs(train_cfg);
    let eval = |m: &pipeline::DualModels| evalkit::evaluate(m, world, run_cfg.n_eval, run_cfg.seeds.eval);
    let full = match full {
        Some(m) => eval(m)?,
        None => eval(&pipeline::train_cycle(world, base.clone(), &full_cfg)?.models)?,
    };
    let no_cycle = eval(&pipeline::train_cycle(world, base.clone(), &no_cycle_cfg)?.models)?;
    let no_pitch = eval(&pipeline::train_cycle(world, base.clone(), &no_pitch_cfg)?.models)?;
    Ok(Variants {
        full,
        no_cycle,
        no_pitch,
    })
}

pub fn ablations(run: &Result<DefaultRun, String>) -> Outcome {
    let run = match run {
        Ok(r) => r,
        Err(e) => return Outcome::error(e),
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in [run.cfg.seeds.train, run.cfg.seeds.train + 1, run.cfg.seeds.train + 2] {
        let mut cfg = run.cfg.train_config();
        cfg.seed = seed;
        let result = if seed == run.cfg.seeds.train {
            // Reuse the default run: its base checkpoint carries the full
            // training state, and its final checkpoint is the full model.
            load_checkpoint(run.path(&run.cfg.paths.base_checkpoint))
                .and_then(Trainer::resume)
                .and_then(|base| {
                    let full = load_checkpoint(run.path(&run.cfg.paths.checkpoint))?;
                    variants_from_base(&run.world, &base, &run.cfg, &cfg, Some(&full.models))
                })
        } else {
            pipeline::train_base(&run.world, &cfg)
                .and_then(|base| variants_from_base(&run.world, &base, &run.cfg, &cfg, None))
        };
        let v = match result {
            Ok(v) => v,
            Err(e) => return Outcome::error(e),
        };
        let d_style = v.full.style_sim - v.no_cycle.style_sim;
        let d_pcc = v.full.logf0_pcc - v.no_pitch.logf0_pcc;
        pass &= d_style >= 0.02 && d_pcc >= 0.05;
        parts.push(format!(
            "seed {seed}: style {:.4} vs {:.4} w/o cycle (drop {d_style:+.4}, need >= 0.02), \
             pcc {:.4} vs {:.4} w/o pitch stage (drop {d_pcc:+.4}, need >= 0.05)",
            v.full.style_sim, v.no_cycle.style_sim, v.full.logf0_pcc, v.no_pitch.logf0_pcc
        ));
    }
    Outcome::new(pass, parts.join("; "))
}

pub fn round_trip(run: &Result<DefaultRun, String>) -> Outcome {
    let run = match run {
        Ok(r) => r,
        Err(e) => return Outcome::error(e),
    };
    let rt = load_checkpoint(run.path(&run.cfg.paths.checkpoint))
        .and_then(|c| evalkit::round_trip(&c.models, &run.world, run.cfg.n_eval, run.cfg.seeds.eval));
    match rt {
        Ok(rt) => Outcome::new(
            rt.content_acc >= 0.95 && rt.style_sim_to_source >= 0.90,
            format!(
                "content {:.4} (>= 0.95) style to source {:.4} (>= 0.90) over {} pairs",
                rt.content_acc, rt.style_sim_to_source, run.cfg.n_eval
            ),
        ),
        Err(e) => Outcome::error(e),
    }
}

const SMALL: &str = "\
world.frames=8
net.hidden_dim=32
net.n_layers=2
flow.n_steps=4
optim.lr=1e-3
optim.warmup_steps=10
schedule.base_steps=60
schedule.cycle_steps=30
schedule.batch=8
eval.n_eval=8
";

const COMPARED: [&str; 6] = [
    "world.arrays",
    "dataset.arrays",
    "checkpoint_base.arrays",
    "checkpoint.arrays",
    "train_log.csv",
    "eval_report.csv",
];

pub fn reproducibility(run: &Result<DefaultRun, String>) -> Outcome {
    let small = || -> Result<Vec<Vec<u8>>, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg = RunConfig::parse(SMALL).map_err(|e| e.to_string())?;
        let out = dir.path().join("out");
        run_commands(&cfg, &out)?;
        COMPARED
            .iter()
            .map(|f| std::fs::read(out.join(f)).map_err(|e| format!("{f}: {e}")))
            .collect()
    };
    let (a, b) = match (small(), small()) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return Outcome::error(e),
    };
    let differing: Vec<&str> = COMPARED
        .iter()
        .zip(a.iter().zip(&b))
        .filter(|(_, (x, y))| x != y)
        .map(|(f, _)| *f)
        .collect();
    let mut parts = vec![if differing.is_empty() {
        format!("two runs agree byte-for-byte on {} files", COMPARED.len())
    } else {
        format!("runs differ in {}", differing.join(", "))
    }];
    let mut pass = differing.is_empty();

    // The default run's aggregate report is frozen; a re-run must match it.
    match run.as_ref().map_err(String::clone).and_then(DefaultRun::mean_row) {
        Ok(row) => {
            let golden = testdata("default_eval_mean.csv");
            let line = format!("{}\n{row}\n", evalkit::REPORT_HEADER);
            match std::fs::read_to_string(&golden) {
                Ok(frozen) => {
                    let same = frozen == line;
                    pass &= same;
                    parts.push(format!(
                        "default aggregate {} the frozen report",
                        if same { "matches" } else { "differs from" }
                    ));
                }
                Err(_) => {
                    let _ = std::fs::write(&golden, &line);
                    parts.push("default aggregate frozen (first run)".into());
                }
            }
        }
        Err(e) => {
            pass = false;
            parts.push(format!("no default run: {e}"));
        }
    }
    Outcome::new(pass, parts.join("; "))
}
