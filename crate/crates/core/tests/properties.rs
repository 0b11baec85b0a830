use approx::assert_abs_diff_eq;
use cycleflow::cli::RunConfig;
use cycleflow::evalkit::{content_accuracy, logf0_pcc, sliced_wasserstein, style_similarity};
use cycleflow::flowcore::{ode_sample, ot_path, target_field, FlowHyper, Solver};
use cycleflow::rng;
use cycleflow::synthworld::{World, WorldConfig};
use ndarray::Array2;
use proptest::prelude::*;

fn golden_world() -> World {
    World::new(7, WorldConfig::default()).unwrap()
}

fn matrix(vals: &[f64], cols: usize) -> Array2<f64> {
    Array2::from_shape_vec((vals.len() / cols, cols), vals.to_vec()).unwrap()
}

proptest! {
    #[test]
    fn pcc_is_invariant_under_positive_affine_maps(
        a in prop::collection::vec(-5.0f64..5.0, 3..40),
        noise in prop::collection::vec(-1.0f64..1.0, 40),
        s1 in 0.1f64..10.0, o1 in -5.0f64..5.0,
        s2 in 0.1f64..10.0, o2 in -5.0f64..5.0,
    ) {
        let b: Vec<f64> = a.iter().zip(&noise).map(|(x, n)| x + n).collect();
        let Ok(base) = logf0_pcc(&a, &b) else { return Ok(()) };
        let a2: Vec<f64> = a.iter().map(|x| s1 * x + o1).collect();
        let b2: Vec<f64> = b.iter().map(|x| s2 * x + o2).collect();
        let mapped = logf0_pcc(&a2, &b2).unwrap();
        prop_assert!((base - mapped).abs() < 1e-9, "{base} vs {mapped}");
        prop_assert!((-1.0..=1.0).contains(&mapped));
    }

    #[test]
    fn ot_path_hits_endpoints_and_has_constant_velocity(
        x0 in prop::collection::vec(-3.0f64..3.0, 6),
        x1 in prop::collection::vec(-3.0f64..3.0, 6),
        t in 0.01f64..0.99,
        sigma in 0.0f64..0.1,
    ) {
        let (x0, x1) = (matrix(&x0, 3), matrix(&x1, 3));
        let start = ot_path(&x0, &x1, 0.0, sigma).unwrap();
        let end = ot_path(&x0, &x1, 1.0, sigma).unwrap();
        let v = target_field(&x0, &x1, sigma).unwrap();
        for k in 0..6 {
            let (r, c) = (k / 3, k % 3);
            prop_assert_eq!(start[[r, c]], x0[[r, c]]);
            prop_assert!((end[[r, c]] - (sigma * x0[[r, c]] + x1[[r, c]])).abs() < 1e-12);
        }
        let h = 1e-6;
        let fd = (ot_path(&x0, &x1, t + h, sigma).unwrap() - ot_path(&x0, &x1, t - h, sigma).unwrap()) / (2.0 * h);
        for (a, b) in fd.iter().zip(v.iter()) {
            prop_assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn sliced_wasserstein_is_symmetric(
        a in prop::collection::vec(-3.0f64..3.0, 4..30),
        b in prop::collection::vec(-3.0f64..3.0, 4..30),
        seed in any::<u64>(),
    ) {
        let a = matrix(&a[..a.len() / 2 * 2], 2);
        let b = matrix(&b[..b.len() / 2 * 2], 2);
        prop_assume!(a.nrows() >= 2 && b.nrows() >= 2);
        let ab = sliced_wasserstein(a.view(), b.view(), 8, &mut rng::seeded(seed)).unwrap();
        let ba = sliced_wasserstein(b.view(), a.view(), 8, &mut rng::seeded(seed)).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(sliced_wasserstein(a.view(), a.view(), 8, &mut rng::seeded(seed)).unwrap(), 0.0);
    }

    #[test]
    fn config_round_trip(
        sigma in 0.0f64..0.5,
        l2 in 0.0f64..3.0,
        steps in 1usize..50,
        batch in 2usize..64,
        seed in any::<u64>(),
        midpoint in any::<bool>(),
    ) {
        let text = format!(
            "flow.sigma={sigma}\ncycle.l2={l2}\nflow.n_steps={steps}\nschedule.batch={batch}\nseed.train={seed}\nflow.solver={}\n",
            if midpoint { "midpoint" } else { "euler" }
        );
        let a = RunConfig::parse(&text).unwrap();
        let b = RunConfig::parse(&a.serialize()).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.flow.sigma, sigma);
    }
}

#[test]
fn style_of_oracle_conversions_prefers_the_target() {
    let w = golden_world();
    let mut r = rng::seeded(21);
    for src in 0..w.n_speakers() {
        let u = w.sample_utterance(src, &mut r).unwrap();
        for tgt in (0..w.n_speakers()).filter(|&t| t != src) {
            let o = w.oracle_convert(&u, tgt).unwrap();
            let to_target = style_similarity(&w, o.frames.view(), tgt).unwrap();
            let to_source = style_similarity(&w, o.frames.view(), src).unwrap();
            assert_abs_diff_eq!(to_target, 1.0, epsilon = 1e-9);
            assert!(to_target > to_source, "{src}->{tgt}: {to_target} vs {to_source}");
            // Own speaker scores highest among all candidates.
            for other in (0..w.n_speakers()).filter(|&k| k != tgt) {
                assert!(style_similarity(&w, o.frames.view(), other).unwrap() < to_target);
            }
        }
    }
}

#[test]
fn other_speaker_style_is_near_orthogonal() {
    let w = golden_world();
    let mut r = rng::seeded(5);
    for _ in 0..200 {
        let s = rng::index(&mut r, 8);
        let o = (s + 1 + rng::index(&mut r, 7)) % 8;
        let u = w.sample_utterance(s, &mut r).unwrap();
        assert!(style_similarity(&w, u.frames.view(), o).unwrap().abs() < 0.1);
    }
}

#[test]
fn noise_frames_score_chance_content_accuracy() {
    let w = golden_world();
    let mut r = rng::seeded(8);
    let (mut hits, mut n) = (0.0, 0usize);
    for _ in 0..100 {
        let u = w.sample_utterance(rng::index(&mut r, 8), &mut r).unwrap();
        let noise = rng::normal_matrix(&mut r, u.len(), w.cfg.feature_dim);
        hits += content_accuracy(&w, noise.view(), &u.log_f0, &u.tokens).unwrap() * u.len() as f64;
        n += u.len();
    }
    let p = 1.0 / w.cfg.vocab as f64;
    let acc = hits / n as f64;
    let sd = (p * (1.0 - p) / n as f64).sqrt();
    assert!((acc - p).abs() < 3.0 * sd, "accuracy {acc} vs chance {p} (sd {sd})");
}

#[test]
fn oracle_content_accuracy_is_perfect() {
    let w = golden_world();
    let mut r = rng::seeded(9);
    for s in 0..8 {
        let u = w.sample_utterance(s, &mut r).unwrap();
        let o = w.oracle_convert(&u, (s + 3) % 8).unwrap();
        assert_eq!(
            content_accuracy(&w, o.frames.view(), &o.log_f0, &o.tokens).unwrap(),
            1.0
        );
    }
}

#[test]
fn midpoint_is_second_order_on_a_curved_field() {
    // dx/dt = cos(t), x(0) = 0 → x(1) = sin(1).
    let err = |solver, n| {
        let hyper = FlowHyper {
            sigma: 0.0,
            solver,
            n_steps: n,
        };
        let x = ode_sample(
            |x, t| Ok(Array2::from_elem(x.dim(), t.cos())),
            Array2::zeros((1, 1)),
            &hyper,
        )
        .unwrap();
        (x[[0, 0]] - 1f64.sin()).abs()
    };
    for (solver, order) in [(Solver::Euler, 1.0), (Solver::Midpoint, 2.0)] {
        let ns = [4usize, 8, 16, 32, 64];
        let xs: Vec<f64> = ns.iter().map(|&n| (1.0 / n as f64).ln()).collect();
        let ys: Vec<f64> = ns.iter().map(|&n| err(solver, n).ln()).collect();
        let slope = fit_slope(&xs, &ys);
        assert!((slope - order).abs() < 0.1 * order, "{solver}: slope {slope}");
    }
}

fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}
