//! Frozen outputs. A missing golden file is written on first run; set
//! `CYCLEFLOW_BLESS=1` to rewrite all of them.

use std::path::PathBuf;

use cycleflow::arrayfile::ArrayFile;
use cycleflow::cyclereg::{self, CycleWeights};
use cycleflow::evalkit::{self, sliced_wasserstein};
use cycleflow::flowcore::FlowHyper;
use cycleflow::pipeline::{self, Checkpoint, DualModels, NetsConfig, Schedule, TrainConfig, Trainer};
use cycleflow::rng;
use cycleflow::synthworld::{World, WorldConfig};
use ndarray::{Array1, Array2};

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("testdata").join(name)
}

fn bless() -> bool {
    std::env::var_os("CYCLEFLOW_BLESS").is_some_and(|v| v != "0")
}

/// Byte-exact comparison against a frozen file.
fn check_bytes(name: &str, actual: &str) {
    let path = golden_path(name);
    if bless() || !path.exists() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
        eprintln!("wrote golden {}", path.display());
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap();
    assert!(expected == actual, "{name} differs from its golden file");
}

/// `name value` lines compared with an absolute tolerance.
fn check_scalars(name: &str, values: &[(&str, f64)], tol: f64) {
    let text: String = values.iter().map(|(k, v)| format!("{k} {v:e}\n")).collect();
    let path = golden_path(name);
    if bless() || !path.exists() {
        check_bytes(name, &text);
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap();
    let frozen: Vec<(String, f64)> = expected
        .lines()
        .map(|l| {
            let (k, v) = l.split_once(' ').unwrap();
            (k.to_string(), v.parse().unwrap())
        })
        .collect();
    assert_eq!(frozen.len(), values.len(), "{name}: entry count");
    for ((fk, fv), (k, v)) in frozen.iter().zip(values) {
        assert_eq!(fk, k);
        assert!((fv - v).abs() <= tol, "{name}.{k}: {v:e} vs frozen {fv:e}");
    }
}

fn small_world() -> World {
    World::new(
        11,
        WorldConfig {
            frames: 6,
            ..WorldConfig::default()
        },
    )
    .unwrap()
}

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        nets: NetsConfig {
            hidden_dim: 16,
            n_layers: 2,
            ..NetsConfig::default()
        },
        hyper: FlowHyper {
            n_steps: 4,
            ..FlowHyper::default()
        },
        adam: cycleflow::gradcore::AdamHyper {
            lr: 1e-3,
            ..Default::default()
        },
        warmup_steps: 10,
        schedule: Schedule {
            base_steps: 40,
            cycle_steps: 20,
            batch: 8,
            joint: false,
        },
        seed: 4,
        ..TrainConfig::default()
    }
}

fn informative_models(world: &World) -> DualModels {
    // A short run so that every output layer is nonzero.
    let cfg = TrainConfig {
        schedule: Schedule {
            base_steps: 15,
            cycle_steps: 0,
            ..tiny_cfg().schedule
        },
        ..tiny_cfg()
    };
    pipeline::train_base(world, &cfg).unwrap().models
}

#[test]
fn golden_world_file() {
    let w = World::new(7, WorldConfig::default()).unwrap();
    check_bytes("world_seed7.arrays", &w.to_file().to_text());
}

#[test]
fn golden_sliced_wasserstein_of_gaussian_clouds() {
    let mut r = rng::seeded(2024);
    let a = rng::normal_matrix(&mut r, 2000, 3);
    let b = rng::normal_matrix(&mut r, 2000, 3) * 1.5 + 0.25;
    let lib = sliced_wasserstein(a.view(), b.view(), 64, &mut rng::seeded(3)).unwrap();
    // Equal sample counts: W2 is the RMS gap of the sorted projections.
    let mut pr = rng::seeded(3);
    let mut acc = 0.0;
    for _ in 0..64 {
        let v = Array1::from_shape_fn(3, |_| rng::normal(&mut pr));
        let dir = &v / v.dot(&v).sqrt();
        let mut pa = a.dot(&dir).to_vec();
        let mut pb = b.dot(&dir).to_vec();
        pa.sort_by(f64::total_cmp);
        pb.sort_by(f64::total_cmp);
        let ms: f64 = pa.iter().zip(&pb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 2000.0;
        acc += ms.sqrt();
    }
    let oracle = acc / 64.0;
    assert!((lib - oracle).abs() < 1e-12, "{lib} vs {oracle}");
    check_scalars("swd_gaussian_clouds.txt", &[("swd", lib)], 1e-12);
}

#[test]
fn golden_cycle_terms() {
    let w = small_world();
    let m = informative_models(&w);
    let hyper = m.hyper;
    let mut r = rng::seeded(31);
    let x = w.sample_utterance(1, &mut r).unwrap();
    let y = w.sample_utterance(6, &mut r).unwrap();
    let s_x = w.speaker(1).unwrap().style.clone();
    let s_y = w.speaker(6).unwrap().style.clone();
    let y_hat = cyclereg::forward_convert(&m, &w, &x, &s_y, &hyper, &mut rng::seeded(1)).unwrap();
    let rec = cyclereg::reconstruction_loss(&m, &w, &x, &s_x, hyper.sigma, &mut rng::seeded(2)).unwrap();
    let cyc = cyclereg::cycle_loss(&m, &w, &x, &s_x, &s_y, hyper.sigma, &hyper, &mut rng::seeded(3)).unwrap();
    let inv = cyclereg::invariance_loss(&m, &w, &x, &s_y, hyper.sigma, &hyper, &mut rng::seeded(4)).unwrap();
    let rep = cyclereg::cycle_objective(
        &m,
        &w,
        &[x.clone()],
        &[y],
        CycleWeights::default(),
        &hyper,
        &mut rng::seeded(5),
    )
    .unwrap();
    let mut f = ArrayFile::new("golden");
    f.insert("y_hat", y_hat);
    check_bytes("forward_convert.arrays", &f.to_text());
    check_scalars(
        "cycle_terms.txt",
        &[
            ("reconstruction", rec),
            ("cycle", cyc),
            ("invariance", inv),
            ("l_xx", rep.l_xx),
            ("l_yy", rep.l_yy),
            ("l_xyx", rep.l_xyx),
            ("l_xyy", rep.l_xyy),
            ("l_yxy", rep.l_yxy),
            ("l_yxx", rep.l_yxx),
            ("total", rep.total),
        ],
        1e-9,
    );
}

fn tiny_run(world: &World) -> Trainer {
    let mut t = Trainer::new(world, tiny_cfg()).unwrap();
    t.run(world).unwrap();
    t
}

#[test]
fn golden_training_run_and_conversion() {
    let w = small_world();
    let t = tiny_run(&w);
    let last = t.log.last().unwrap();
    let base_last = t.log[tiny_cfg().schedule.base_steps as usize - 1];
    check_scalars(
        "tiny_training.txt",
        &[
            ("base_final_total", base_last.total),
            ("final_total", last.total),
            ("final_l_xyx", last.cycle.l_xyx),
            ("final_l_xyy", last.cycle.l_xyy),
        ],
        1e-9,
    );
    check_bytes("tiny_training_log.csv", &t.log_csv());

    let utt = w.sample_utterance(2, &mut rng::seeded(77)).unwrap();
    let res = pipeline::convert(&t.models, &w, &utt, 5, 123).unwrap();
    check_bytes("tiny_conversion.arrays", &res.to_file().to_text());
    let oracle = w.oracle_convert(&utt, 5).unwrap();
    check_bytes(
        "tiny_contours.csv",
        &evalkit::pitch_contours_csv(&utt, &res, &oracle).unwrap(),
    );

    // A reloaded checkpoint reproduces the frozen conversion bit for bit.
    let text = t.checkpoint().to_file().to_text();
    let loaded = Checkpoint::from_file(&ArrayFile::parse(&text).unwrap()).unwrap();
    let again = pipeline::convert(&loaded.models, &w, &utt, 5, 123).unwrap();
    assert_eq!(again, res);
    check_bytes("tiny_conversion.arrays", &again.to_file().to_text());
}

#[test]
fn golden_tiny_eval_report() {
    let w = small_world();
    let t = tiny_run(&w);
    let rep = evalkit::evaluate(&t.models, &w, 6, 9).unwrap();
    check_bytes("tiny_eval_report.csv", &rep.to_csv());
}

#[test]
fn base_training_loss_trends_down() {
    let w = small_world();
    let cfg = TrainConfig {
        schedule: Schedule {
            base_steps: 400,
            cycle_steps: 0,
            ..tiny_cfg().schedule
        },
        ..tiny_cfg()
    };
    let t = pipeline::train_base(&w, &cfg).unwrap();
    let ma = |s: usize| t.log[s..s + 100].iter().map(|r| r.total).sum::<f64>() / 100.0;
    let (first, mid, last) = (ma(0), ma(150), ma(300));
    assert!(first > mid && mid > last, "{first} {mid} {last}");
}

#[test]
fn zero_base_steps_returns_initial_models() {
    let w = small_world();
    let cfg = TrainConfig {
        schedule: Schedule {
            base_steps: 0,
            ..tiny_cfg().schedule
        },
        ..tiny_cfg()
    };
    let t = pipeline::train_base(&w, &cfg).unwrap();
    assert_eq!(t.models, Trainer::new(&w, cfg).unwrap().models);
}

#[test]
fn zero_weights_continue_base_training() {
    let w = small_world();
    let t = pipeline::train_base(&w, &tiny_cfg()).unwrap();
    let zero = TrainConfig {
        weights: CycleWeights::ZERO,
        ..tiny_cfg()
    };
    let cycled = pipeline::train_cycle(&w, t.clone(), &zero).unwrap();
    let mut plain = t;
    for _ in 0..zero.schedule.cycle_steps {
        plain.step_once(&w, false).unwrap();
    }
    let tail = |tr: &Trainer| -> Vec<(f64, f64)> { tr.log.iter().map(|r| (r.l_pitch, r.l_mel)).collect() };
    assert_eq!(tail(&cycled), tail(&plain));
    assert_eq!(cycled.models.pitch_encoder, plain.models.pitch_encoder);
    assert_eq!(cycled.models.pitch_field, plain.models.pitch_field);
    assert_eq!(cycled.models.mel_field, plain.models.mel_field);
}

#[test]
fn cycle_losses_decrease_during_cycle_training() {
    let w = small_world();
    let cfg = TrainConfig {
        schedule: Schedule {
            base_steps: 200,
            cycle_steps: 300,
            ..tiny_cfg().schedule
        },
        ..tiny_cfg()
    };
    let t = pipeline::train_cycle(&w, pipeline::train_base(&w, &cfg).unwrap(), &cfg).unwrap();
    let cyc: Vec<f64> = t.log[200..].iter().map(|r| r.cycle.l_xyx).collect();
    let start = cyc[..50].iter().sum::<f64>() / 50.0;
    let end = cyc[cyc.len() - 50..].iter().sum::<f64>() / 50.0;
    assert!(end < start, "moving-average l_xyx {start} -> {end}");
}

#[test]
fn noise_free_teacher_forced_mel_loss_is_small() {
    let w = World::new(
        11,
        WorldConfig {
            frames: 8,
            noise_std: 0.0,
            ..WorldConfig::default()
        },
    )
    .unwrap();
    let cfg = TrainConfig {
        nets: NetsConfig::default(),
        schedule: Schedule {
            base_steps: 20_000,
            cycle_steps: 0,
            batch: 16,
            joint: false,
        },
        adam: cycleflow::gradcore::AdamHyper {
            lr: 2e-3,
            ..Default::default()
        },
        warmup_steps: 100,
        ..tiny_cfg()
    };
    let t = pipeline::train_base(&w, &cfg).unwrap();
    let tail = &t.log[t.log.len() - 100..];
    let mel = tail.iter().map(|r| r.l_mel).sum::<f64>() / 100.0;
    assert!(mel < 0.05, "final mel loss {mel}");
}

#[test]
fn probe_field_sees_pitch_before_frames() {
    let w = small_world();
    let m = informative_models(&w);
    let utt = w.sample_utterance(0, &mut rng::seeded(1)).unwrap();
    let cond = pipeline::conversion_cond(&w, &utt, 6).unwrap();
    let embed = m.pitch_embed(&cond).unwrap();
    let order = std::cell::RefCell::new(String::new());
    let mut r = rng::seeded(2);
    let z0 = rng::normal_matrix(&mut r, utt.len(), 1);
    let x0: Array2<f64> = rng::normal_matrix(&mut r, utt.len(), w.cfg.feature_dim);
    pipeline::dual_sample(
        |z, t| {
            order.borrow_mut().push('p');
            m.pitch_velocity(z, t, &cond.style, &embed)
        },
        |x, t, f| {
            order.borrow_mut().push('m');
            m.mel_velocity(x, t, &cond.with_log_f0(f.clone()))
        },
        Some(z0),
        &cond.log_f0,
        x0,
        &m.hyper,
    )
    .unwrap();
    let seq = order.into_inner();
    let first_m = seq.find('m').unwrap();
    assert!(seq[..first_m].chars().all(|c| c == 'p') && !seq[first_m..].contains('p'));
}
