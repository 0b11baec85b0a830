//! Objective metrics against the world's analytic oracles.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::cyclereg::CycleWeights;
use crate::error::{Error, Result};
use crate::pipeline::{self, ConversionResult, DualModels, TrainConfig};
use crate::rng::{self, Rng};
use crate::synthworld::{Domain, Utterance, World};

pub const DEFAULT_N_PROJ: usize = 64;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Pearson correlation coefficient.
pub fn logf0_pcc(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} values", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Precondition("PCC needs at least two values".into()));
    }
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::ZeroVariance);
    }
    if !(sab.is_finite() && saa.is_finite() && sbb.is_finite()) {
        return Err(Error::NonFinite {
            what: "PCC input".into(),
        });
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine of a zero vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine between the probed style of `frames` and the target speaker's style.
pub fn style_similarity(world: &World, frames: ArrayView2<f64>, target_id: usize) -> Result<f64> {
    let target = &world.speaker(target_id)?.style;
    cosine(&world.probe_style(frames)?, target)
}

/// Fraction of frames whose probed token matches `true_tokens`.
pub fn content_accuracy(world: &World, frames: ArrayView2<f64>, logf0: &[f64], true_tokens: &[usize]) -> Result<f64> {
    if frames.nrows() == 0 || true_tokens.is_empty() {
        return Err(Error::Precondition("content accuracy needs at least one frame".into()));
    }
    if frames.nrows() != true_tokens.len() {
        return Err(Error::Shape(format!(
            "{} frames but {} tokens",
            frames.nrows(),
            true_tokens.len()
        )));
    }
    let probed = world.probe_content(frames, logf0)?;
    let hits = probed.iter().zip(true_tokens).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / true_tokens.len() as f64)
}

/// Exact 2-Wasserstein distance between two 1-D empirical distributions,
/// integrating the squared quantile difference over the merged breakpoints.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0;
    let mut acc = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        let d = a[i] - b[j];
        acc += (next - u) * d * d;
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    acc.max(0.0).sqrt()
}

/// Mean over `n_proj` random unit directions of the projected 1-D
/// 2-Wasserstein distance.
pub fn sliced_wasserstein(
    samples_a: ArrayView2<f64>,
    samples_b: ArrayView2<f64>,
    n_proj: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let d = samples_a.ncols();
    if samples_b.ncols() != d {
        return Err(Error::Shape(format!("dimension {d} vs {}", samples_b.ncols())));
    }
    if samples_a.nrows() < 2 || samples_b.nrows() < 2 {
        return Err(Error::Precondition(
            "sliced Wasserstein needs at least two samples per set".into(),
        ));
    }
    if n_proj == 0 {
        return Err(Error::Precondition("n_proj must be >= 1".into()));
    }
    let mut total = 0.0;
    for _ in 0..n_proj {
        let dir = loop {
            let v = Array1::from_shape_fn(d, |_| rng::normal(rng));
            let norm = v.dot(&v).sqrt();
            if norm > 0.0 {
                break v / norm;
            }
        };
        let pa = samples_a.dot(&dir);
        let pb = samples_b.dot(&dir);
        total += wasserstein_1d(pa.as_slice().expect("owned"), pb.as_slice().expect("owned"));
    }
    Ok(total / n_proj as f64)
}

pub const CONTOUR_HEADER: &str = "frame,source_logf0,converted_logf0,oracle_target_logf0";

pub fn pitch_contours_csv(source: &Utterance, result: &ConversionResult, oracle_target: &Utterance) -> Result<String> {
    let t = source.len();
    if result.refined_logf0.len() != t || oracle_target.len() != t {
        return Err(Error::Shape("contour lengths disagree".into()));
    }
    let mut s = String::from(CONTOUR_HEADER);
    s.push('\n');
    for i in 0..t {
        let _ = writeln!(
            s,
            "{i},{:e},{:e},{:e}",
            source.log_f0[i], result.refined_logf0[i], oracle_target.log_f0[i]
        );
    }
    Ok(s)
}

/// Writes the per-frame source, converted and oracle-target contours.
pub fn export_pitch_contours(
    source: &Utterance,
    result: &ConversionResult,
    oracle_target: &Utterance,
    path: impl AsRef<Path>,
) -> Result<()> {
    write_text(path, &pitch_contours_csv(source, result, oracle_target)?)
}

pub(crate) fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub source_speaker: usize,
    pub target_speaker: usize,
    /// Against the oracle target contour.
    pub logf0_pcc: f64,
    /// Against the source contour.
    pub source_logf0_pcc: f64,
    pub style_sim: f64,
    pub content_acc: f64,
    /// `|mean(converted) - mean(oracle target)|` of the log-F0 contour.
    pub pitch_mean_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub items: Vec<EvalItem>,
    pub logf0_pcc: f64,
    pub source_logf0_pcc: f64,
    pub style_sim: f64,
    pub content_acc: f64,
    pub pitch_mean_err: f64,
    /// Converted frames against the oracle target frames, pooled over items.
    pub swd: f64,
    pub n_items: usize,
}

pub const REPORT_HEADER: &str =
    "item,source_speaker,target_speaker,logf0_pcc,source_logf0_pcc,style_sim,content_acc,pitch_mean_err,swd";

impl EvalReport {
    pub fn from_items(items: Vec<EvalItem>, swd: f64) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::config("eval.n_eval", "must be >= 1"));
        }
        let avg = |f: fn(&EvalItem) -> f64| items.iter().map(f).sum::<f64>() / items.len() as f64;
        Ok(Self {
            logf0_pcc: avg(|i| i.logf0_pcc),
            source_logf0_pcc: avg(|i| i.source_logf0_pcc),
            style_sim: avg(|i| i.style_sim),
            content_acc: avg(|i| i.content_acc),
            pitch_mean_err: avg(|i| i.pitch_mean_err),
            swd,
            n_items: items.len(),
            items,
        })
    }

    /// One row per item plus a `mean` row. Per-item rows leave `swd` empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for (k, i) in self.items.iter().enumerate() {
            let _ = writeln!(
                s,
                "{k},{},{},{:e},{:e},{:e},{:e},{:e},",
                i.source_speaker,
                i.target_speaker,
                i.logf0_pcc,
                i.source_logf0_pcc,
                i.style_sim,
                i.content_acc,
                i.pitch_mean_err
            );
        }
        let _ = writeln!(
            s,
            "mean,,,{:e},{:e},{:e},{:e},{:e},{:e}",
            self.logf0_pcc, self.source_logf0_pcc, self.style_sim, self.content_acc, self.pitch_mean_err, self.swd
        );
        s
    }
}

/// One held-out cross-domain pair: even items go low → high, odd items high → low.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub source: Utterance,
    pub target_id: usize,
    pub seed: u64,
}

pub fn eval_pairs(world: &World, n_eval: usize, eval_seed: u64) -> Result<Vec<EvalPair>> {
    if n_eval == 0 {
        return Err(Error::config("eval.n_eval", "must be >= 1"));
    }
    let low = world.speakers_in(Domain::Low);
    let high = world.speakers_in(Domain::High);
    if low.is_empty() || high.is_empty() {
        return Err(Error::Precondition("need speakers in both pitch domains".into()));
    }
    let mut r = rng::stream(eval_seed, 0);
    (0..n_eval)
        .map(|i| {
            let (from, to) = if i % 2 == 0 { (&low, &high) } else { (&high, &low) };
            let src = from[rng::index(&mut r, from.len())];
            let tgt = to[rng::index(&mut r, to.len())];
            Ok(EvalPair {
                source: world.sample_utterance(src, &mut r)?,
                target_id: tgt,
                seed: rng::derive_seed(eval_seed, i as u64),
            })
        })
        .collect()
}

pub fn score_conversion(world: &World, source: &Utterance, result: &ConversionResult) -> Result<EvalItem> {
    let oracle = world.oracle_convert(source, result.target_speaker)?;
    let f = &result.refined_logf0;
    Ok(EvalItem {
        source_speaker: source.speaker_id,
        target_speaker: result.target_speaker,
        logf0_pcc: logf0_pcc(f, &oracle.log_f0)?,
        source_logf0_pcc: logf0_pcc(f, &source.log_f0)?,
        style_sim: style_similarity(world, result.frames.view(), result.target_speaker)?,
        content_acc: content_accuracy(world, result.frames.view(), f, &source.tokens)?,
        pitch_mean_err: (mean(f) - mean(&oracle.log_f0)).abs(),
    })
}

/// Converts `n_eval` held-out cross-domain pairs and scores them.
pub fn evaluate(models: &DualModels, world: &World, n_eval: usize, eval_seed: u64) -> Result<EvalReport> {
    let pairs = eval_pairs(world, n_eval, eval_seed)?;
    let mut items = Vec::with_capacity(pairs.len());
    let mut converted = Vec::with_capacity(pairs.len());
    let mut oracle = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let res = pipeline::convert(models, world, &p.source, p.target_id, p.seed)?;
        items.push(score_conversion(world, &p.source, &res)?);
        oracle.push(world.oracle_convert(&p.source, p.target_id)?.frames);
        converted.push(res.frames);
    }
    let stack = |v: &[Array2<f64>]| -> Result<Array2<f64>> {
        let views: Vec<_> = v.iter().map(|a| a.view()).collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
    };
    let mut swd_rng = rng::stream(eval_seed, 1);
    let swd = sliced_wasserstein(
        stack(&converted)?.view(),
        stack(&oracle)?.view(),
        DEFAULT_N_PROJ,
        &mut swd_rng,
    )?;
    EvalReport::from_items(items, swd)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundTrip {
    pub content_acc: f64,
    pub style_sim_to_source: f64,
}

/// `x → y → x` on the held-out pairs; the intermediate tokens are the
/// probed content of the first conversion.
pub fn round_trip(models: &DualModels, world: &World, n_eval: usize, eval_seed: u64) -> Result<RoundTrip> {
    let pairs = eval_pairs(world, n_eval, eval_seed)?;
    let (mut acc, mut sim) = (0.0, 0.0);
    for (i, p) in pairs.iter().enumerate() {
        let there = pipeline::convert(models, world, &p.source, p.target_id, p.seed)?;
        let mid = pipeline::result_as_utterance(world, &there)?;
        let back_seed = rng::derive_seed(eval_seed ^ 0x5eed, i as u64);
        let back = pipeline::convert(models, world, &mid, p.source.speaker_id, back_seed)?;
        acc += content_accuracy(world, back.frames.view(), &back.refined_logf0, &p.source.tokens)?;
        sim += style_similarity(world, back.frames.view(), p.source.speaker_id)?;
    }
    let n = pairs.len() as f64;
    Ok(RoundTrip {
        content_acc: acc / n,
        style_sim_to_source: sim / n,
    })
}

/// The three ablation variants trained from one shared base phase.
#[derive(Debug, Clone, PartialEq)]
pub struct Ablation {
    pub full: EvalReport,
    /// Cycle phase with reconstruction only (`λ2 = λ3 = 0`).
    pub no_cycle: EvalReport,
    /// Frame stage conditioned on the source contour; no pitch stage.
    pub no_pitch: EvalReport,
}

pub fn ablation_configs(cfg: &TrainConfig) -> [TrainConfig; 3] {
    let full = *cfg;
    let no_cycle = TrainConfig {
        weights: CycleWeights {
            l2: 0.0,
            l3: 0.0,
            ..cfg.weights
        },
        ..*cfg
    };
    let no_pitch = TrainConfig {
        use_pitch_stage: false,
        ..*cfg
    };
    [full, no_cycle, no_pitch]
}

pub fn ablate(world: &World, cfg: &TrainConfig, n_eval: usize, eval_seed: u64) -> Result<Ablation> {
    let base = pipeline::train_base(world, cfg)?;
    let mut reports = Vec::with_capacity(3);
    for variant in ablation_configs(cfg) {
        let trained = pipeline::train_cycle(world, base.clone(), &variant)?;
        reports.push(evaluate(&trained.models, world, n_eval, eval_seed)?);
    }
    let no_pitch = reports.pop().expect("three variants");
    let no_cycle = reports.pop().expect("three variants");
    let full = reports.pop().expect("three variants");
    Ok(Ablation {
        full,
        no_cycle,
        no_pitch,
    })
}
