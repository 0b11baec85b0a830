//! Consistency losses over unpaired style domains.
//!
//! For a source item `x` (style `s_x`, content `c_x`) and a target style
//! `s_y`, a forward conversion produces `ŷ₁`, held constant. Four terms
//! regularize the frame field `v`:
//!
//! ```text
//! L_xx  = ‖v(x_t, s_x, c_x) - (x₁ - (1-σ)x0)‖²
//! L_xyx = ‖v(y_t, s_x, c_x) - (ŷ₁ - (1-σ)y0) + v(x_t, s_y, c_x) - (x₁ - (1-σ)x0)‖²
//! L_xyy = ‖v(x_t, s_y, c_x) - v(x_t, s_y, c_ŷ)‖²
//! L_x   = λ1 L_xx + λ2 L_xyx + λ3 L_xyy,   total = L_x + L_y
//! ```
//!
//! `c_ŷ` is read back from `ŷ₁` with the world's content probe. Squared norms
//! are averaged over all entries, matching the base CFM loss.

use ndarray::Array2;

use crate::condnets;
use crate::error::{Error, Result};
use crate::flowcore::{FlowHyper, FlowSample};
use crate::gradcore::{Tape, Var};
use crate::pipeline::{self, BoundModels, DualModels, FrameCond, UttBatch};
use crate::rng::{self, Rng};
use crate::synthworld::{Utterance, World};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleWeights {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
}

impl Default for CycleWeights {
    fn default() -> Self {
        Self {
            l1: 1.0,
            l2: 0.5,
            l3: 0.5,
        }
    }
}

impl CycleWeights {
    pub const ZERO: CycleWeights = CycleWeights {
        l1: 0.0,
        l2: 0.0,
        l3: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (key, w) in [("cycle.l1", self.l1), ("cycle.l2", self.l2), ("cycle.l3", self.l3)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::config(key, format!("must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }

    /// Weighted sum in a fixed order, shared by the tape and the report.
    pub fn combine(&self, l_rec: f64, l_cyc: f64, l_inv: f64) -> f64 {
        self.l1 * l_rec + self.l2 * l_cyc + self.l3 * l_inv
    }

    fn needs_conversion(&self) -> bool {
        self.l2 != 0.0 || self.l3 != 0.0
    }
}

/// Terms for both directions. The `x` side uses `l_xx, l_xyx, l_xyy`; the `y`
/// side the mirrored `l_yy, l_yxy, l_yxx`. Terms with zero weight are not
/// evaluated and read 0.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CycleLossReport {
    pub l_xx: f64,
    pub l_yy: f64,
    pub l_xyx: f64,
    pub l_xyy: f64,
    pub l_yxy: f64,
    pub l_yxx: f64,
    pub l_x: f64,
    pub l_y: f64,
    pub total: f64,
}

impl CycleLossReport {
    pub fn assemble(w: &CycleWeights, x: [f64; 3], y: [f64; 3]) -> Self {
        let l_x = w.combine(x[0], x[1], x[2]);
        let l_y = w.combine(y[0], y[1], y[2]);
        Self {
            l_xx: x[0],
            l_xyx: x[1],
            l_xyy: x[2],
            l_yy: y[0],
            l_yxy: y[1],
            l_yxx: y[2],
            l_x,
            l_y,
            total: l_x + l_y,
        }
    }
}

/// A forward conversion of a source batch, held constant for the loss terms.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub source: UttBatch,
    pub target_style: Array2<f64>,
    pub frames: Array2<f64>,
    pub refined_logf0: Array2<f64>,
    /// Content embedding of the probed tokens of `frames`.
    pub content: Array2<f64>,
    pub tokens: Vec<usize>,
}

impl ForwardPass {
    /// `(s_x, f_x, c_x)`.
    pub fn source_cond(&self) -> &FrameCond {
        &self.source.cond
    }

    /// `(s_y, f̂, c_x)`.
    pub fn target_cond(&self) -> FrameCond {
        self.source
            .cond
            .with_style(self.target_style.clone())
            .with_log_f0(self.refined_logf0.clone())
    }

    /// `(s_y, f̂, c_ŷ)`.
    pub fn swapped_cond(&self) -> FrameCond {
        self.target_cond().with_content(self.content.clone())
    }

    /// Pitch-stage view of the forward conversion input, `(s_y, f_x, c_x)`.
    pub fn pitch_target_cond(&self) -> FrameCond {
        self.source.cond.with_style(self.target_style.clone())
    }
}

/// Converts every item of `source` to the per-row `target_style` without
/// recording gradients, then probes the content of the result.
pub fn forward_pass(
    models: &DualModels,
    world: &World,
    source: &UttBatch,
    target_style: Array2<f64>,
    hyper: &FlowHyper,
    rng: &mut Rng,
) -> Result<ForwardPass> {
    if target_style.dim() != source.cond.style.dim() {
        return Err(Error::Shape("target style rows must match the source batch".into()));
    }
    let cond = source.cond.with_style(target_style.clone());
    let (refined, frames) = models.convert_rows(&cond, hyper, rng)?;
    let t = source.cond.item_len;
    let mut tokens = Vec::with_capacity(frames.nrows());
    for i in 0..source.n_items() {
        let rows = ndarray::s![i * t..(i + 1) * t, ..];
        let f0: Vec<f64> = refined.slice(rows).iter().copied().collect();
        tokens.extend(world.probe_content(frames.slice(rows), &f0)?);
    }
    Ok(ForwardPass {
        source: source.clone(),
        target_style,
        frames,
        refined_logf0: refined,
        content: condnets::content_encode(&world.token_embeds, &tokens)?,
        tokens,
    })
}

/// Single-utterance forward conversion to `target_style`; a constant with
/// respect to all parameters.
pub fn forward_convert(
    models: &DualModels,
    world: &World,
    utt_x: &Utterance,
    target_style: &[f64],
    hyper: &FlowHyper,
    rng: &mut Rng,
) -> Result<Array2<f64>> {
    let batch = UttBatch::stack(world, std::slice::from_ref(utt_x))?;
    let style = condnets::repeat_row(target_style, utt_x.len());
    Ok(forward_pass(models, world, &batch, style, hyper, rng)?.frames)
}

fn item_times(rng: &mut Rng, rows: usize, item_len: usize) -> Vec<f64> {
    let items: Vec<f64> = (0..rows / item_len).map(|_| rng::uniform(rng)).collect();
    items.iter().flat_map(|&t| std::iter::repeat_n(t, item_len)).collect()
}

/// Frame-field CFM residual `v(x_t, cond) - target` for a drawn sample.
fn mel_residual(tape: &mut Tape, b: &BoundModels, models: &DualModels, s: &FlowSample, cond: &FrameCond) -> Var {
    let v = models.mel_field_tape(tape, b, &s.x_t, &s.t, cond);
    let target = tape.constant(s.v_target.clone());
    tape.sub(v, target)
}

fn pitch_residual(tape: &mut Tape, b: &BoundModels, models: &DualModels, s: &FlowSample, cond: &FrameCond) -> Var {
    let v = models.pitch_field_tape(tape, b, &s.x_t, &s.t, cond);
    let target = tape.constant(s.v_target.clone());
    tape.sub(v, target)
}

/// CFM loss of the frame field on `frames` under `cond`.
pub fn reconstruction_term(
    tape: &mut Tape,
    b: &BoundModels,
    models: &DualModels,
    frames: &Array2<f64>,
    cond: &FrameCond,
    sigma: f64,
    rng: &mut Rng,
) -> Result<Var> {
    let s = FlowSample::draw(frames.clone(), cond.item_len, sigma, rng)?;
    let r = mel_residual(tape, b, models, &s, cond);
    Ok(tape.mean_sq(r))
}

/// CFM loss of the pitch field on the contour carried by `cond`.
pub fn pitch_reconstruction_term(
    tape: &mut Tape,
    b: &BoundModels,
    models: &DualModels,
    cond: &FrameCond,
    sigma: f64,
    rng: &mut Rng,
) -> Result<Var> {
    let s = FlowSample::draw(cond.log_f0.clone(), cond.item_len, sigma, rng)?;
    let r = pitch_residual(tape, b, models, &s, cond);
    Ok(tape.mean_sq(r))
}

/// Summed-residual transitivity term. Draws one time per item, then `y0`,
/// then `x0`.
pub fn cycle_term(
    tape: &mut Tape,
    b: &BoundModels,
    models: &DualModels,
    fwd: &ForwardPass,
    sigma: f64,
    pitch_stage: bool,
    rng: &mut Rng,
) -> Result<Var> {
    let item_len = fwd.source.cond.item_len;
    let rows = fwd.frames.nrows();
    let t = item_times(rng, rows, item_len);
    let d = fwd.frames.ncols();
    let y0 = rng::normal_matrix(rng, rows, d);
    let x0 = rng::normal_matrix(rng, rows, d);
    let ys = FlowSample::from_parts(y0, fwd.frames.clone(), t.clone(), sigma)?;
    let xs = FlowSample::from_parts(x0, fwd.source.frames.clone(), t.clone(), sigma)?;
    let ra = mel_residual(tape, b, models, &ys, fwd.source_cond());
    let rb = mel_residual(tape, b, models, &xs, &fwd.target_cond());
    let sum = tape.add(ra, rb);
    let mut loss = tape.mean_sq(sum);
    if pitch_stage {
        let zy0 = rng::normal_matrix(rng, rows, 1);
        let zx0 = rng::normal_matrix(rng, rows, 1);
        let zy = FlowSample::from_parts(zy0, fwd.refined_logf0.clone(), t.clone(), sigma)?;
        let zx = FlowSample::from_parts(zx0, fwd.source.cond.log_f0.clone(), t, sigma)?;
        let pa = pitch_residual(tape, b, models, &zy, fwd.source_cond());
        let pb = pitch_residual(tape, b, models, &zx, &fwd.pitch_target_cond());
        let psum = tape.add(pa, pb);
        let pl = tape.mean_sq(psum);
        loss = tape.add(loss, pl);
    }
    Ok(loss)
}

/// Content-invariance term at a shared `(x_t, t)` on the path to `x₁`.
pub fn invariance_term(
    tape: &mut Tape,
    b: &BoundModels,
    models: &DualModels,
    fwd: &ForwardPass,
    sigma: f64,
    pitch_stage: bool,
    rng: &mut Rng,
) -> Result<Var> {
    let item_len = fwd.source.cond.item_len;
    let xs = FlowSample::draw(fwd.source.frames.clone(), item_len, sigma, rng)?;
    let va = models.mel_field_tape(tape, b, &xs.x_t, &xs.t, &fwd.target_cond());
    let vb = models.mel_field_tape(tape, b, &xs.x_t, &xs.t, &fwd.swapped_cond());
    let diff = tape.sub(va, vb);
    let mut loss = tape.mean_sq(diff);
    if pitch_stage {
        let zs = FlowSample::draw(fwd.source.cond.log_f0.clone(), item_len, sigma, rng)?;
        let pa = models.pitch_field_tape(tape, b, &zs.x_t, &zs.t, &fwd.pitch_target_cond());
        let pb = models.pitch_field_tape(tape, b, &zs.x_t, &zs.t, &fwd.swapped_cond());
        let pd = tape.sub(pa, pb);
        let pl = tape.mean_sq(pd);
        loss = tape.add(loss, pl);
    }
    Ok(loss)
}

/// Settings shared by every cycle evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleSettings {
    pub weights: CycleWeights,
    pub hyper: FlowHyper,
    /// Also regularize the pitch field.
    pub pitch_stage: bool,
}

/// One direction: `[reconstruction, cycle, invariance]`, zero-weight terms skipped.
fn direction_terms(
    tape: &mut Tape,
    b: &BoundModels,
    models: &DualModels,
    world: &World,
    source: &UttBatch,
    target_style: Array2<f64>,
    set: &CycleSettings,
    rng: &mut Rng,
) -> Result<[Option<Var>; 3]> {
    let sigma = set.hyper.sigma;
    let w = set.weights;
    let rec = if w.l1 != 0.0 {
        let mut l = reconstruction_term(tape, b, models, &source.frames, &source.cond, sigma, rng)?;
        if set.pitch_stage {
            let p = pitch_reconstruction_term(tape, b, models, &source.cond, sigma, rng)?;
            l = tape.add(l, p);
        }
        Some(l)
    } else {
        None
    };
    if !w.needs_conversion() {
        return Ok([rec, None, None]);
    }
    let fwd = forward_pass(models, world, source, target_style, &set.hyper, rng)?;
    let cyc = if w.l2 != 0.0 {
        Some(cycle_term(tape, b, models, &fwd, sigma, set.pitch_stage, rng)?)
    } else {
        None
    };
    let inv = if w.l3 != 0.0 {
        Some(invariance_term(tape, b, models, &fwd, sigma, set.pitch_stage, rng)?)
    } else {
        None
    };
    Ok([rec, cyc, inv])
}

fn values(tape: &Tape, terms: &[Option<Var>; 3]) -> [f64; 3] {
    terms.map(|v| v.map_or(0.0, |v| tape.scalar(v)))
}

fn weighted(tape: &mut Tape, w: &CycleWeights, terms: &[Option<Var>; 3]) -> Option<Var> {
    let parts: Vec<(f64, Var)> = [w.l1, w.l2, w.l3]
        .into_iter()
        .zip(terms.iter())
        .filter_map(|(wi, v)| v.map(|v| (wi, v)))
        .collect();
    (!parts.is_empty()).then(|| tape.weighted_sum(&parts))
}

/// Records the full objective on `tape` for source batch `x` converted to the
/// styles of `y`, and `y` converted to the styles of `x`. Items are paired by
/// index; both batches must have equal shape.
pub fn cycle_objective_tape(
    tape: &mut Tape,
    b: &BoundModels,
    models: &DualModels,
    world: &World,
    x: &UttBatch,
    y: &UttBatch,
    set: &CycleSettings,
    rng: &mut Rng,
) -> Result<(Option<Var>, CycleLossReport)> {
    set.weights.validate()?;
    if x.cond.style.dim() != y.cond.style.dim() || x.cond.item_len != y.cond.item_len {
        return Err(Error::Shape("cycle batches must have equal shape".into()));
    }
    let tx = direction_terms(tape, b, models, world, x, y.cond.style.clone(), set, rng)?;
    let ty = direction_terms(tape, b, models, world, y, x.cond.style.clone(), set, rng)?;
    let report = CycleLossReport::assemble(&set.weights, values(tape, &tx), values(tape, &ty));
    let lx = weighted(tape, &set.weights, &tx);
    let ly = weighted(tape, &set.weights, &ty);
    let total = match (lx, ly) {
        (Some(a), Some(c)) => Some(tape.add(a, c)),
        (a, c) => a.or(c),
    };
    Ok((total, report))
}

/// Scalar objective over two unpaired utterance lists of equal length.
pub fn cycle_objective(
    models: &DualModels,
    world: &World,
    batch_x: &[Utterance],
    batch_y: &[Utterance],
    weights: CycleWeights,
    hyper: &FlowHyper,
    rng: &mut Rng,
) -> Result<CycleLossReport> {
    if batch_x.len() != batch_y.len() || batch_x.is_empty() {
        return Err(Error::Precondition(
            "cycle batches must be nonempty and of equal size".into(),
        ));
    }
    let x = UttBatch::stack(world, batch_x)?;
    let y = UttBatch::stack(world, batch_y)?;
    let mut tape = Tape::new();
    let b = models.bind(&mut tape);
    let set = CycleSettings {
        weights,
        hyper: *hyper,
        pitch_stage: false,
    };
    let (_, report) = cycle_objective_tape(&mut tape, &b, models, world, &x, &y, &set, rng)?;
    Ok(report)
}

fn own_cond(world: &World, utt: &Utterance, style: &[f64]) -> Result<(UttBatch, FrameCond)> {
    let batch = UttBatch::stack(world, std::slice::from_ref(utt))?;
    let cond = batch.cond.with_style(condnets::repeat_row(style, utt.len()));
    Ok((batch, cond))
}

/// Frame-field CFM loss of `utt` under its own style, contour and content.
pub fn reconstruction_loss(
    models: &DualModels,
    world: &World,
    utt: &Utterance,
    own_style: &[f64],
    sigma: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let (batch, cond) = own_cond(world, utt, own_style)?;
    let mut tape = Tape::new();
    let b = models.bind(&mut tape);
    let l = reconstruction_term(&mut tape, &b, models, &batch.frames, &cond, sigma, rng)?;
    Ok(tape.scalar(l))
}

fn single_forward(
    models: &DualModels,
    world: &World,
    utt_x: &Utterance,
    s_x: &[f64],
    s_y: &[f64],
    hyper: &FlowHyper,
    rng: &mut Rng,
) -> Result<ForwardPass> {
    let (mut batch, cond) = own_cond(world, utt_x, s_x)?;
    batch.cond = cond;
    forward_pass(
        models,
        world,
        &batch,
        condnets::repeat_row(s_y, utt_x.len()),
        hyper,
        rng,
    )
}

/// `L_{x→y→x}` for one utterance. `sigma` overrides `hyper.sigma`.
pub fn cycle_loss(
    models: &DualModels,
    world: &World,
    utt_x: &Utterance,
    s_x: &[f64],
    s_y: &[f64],
    sigma: f64,
    hyper: &FlowHyper,
    rng: &mut Rng,
) -> Result<f64> {
    let fwd = single_forward(models, world, utt_x, s_x, s_y, hyper, rng)?;
    let mut tape = Tape::new();
    let b = models.bind(&mut tape);
    let l = cycle_term(&mut tape, &b, models, &fwd, sigma, false, rng)?;
    Ok(tape.scalar(l))
}

/// `L_{x→y→y}` for one utterance.
pub fn invariance_loss(
    models: &DualModels,
    world: &World,
    utt_x: &Utterance,
    s_y: &[f64],
    sigma: f64,
    hyper: &FlowHyper,
    rng: &mut Rng,
) -> Result<f64> {
    let s_x = world.speaker(utt_x.speaker_id)?.style.clone();
    let fwd = single_forward(models, world, utt_x, &s_x, s_y, hyper, rng)?;
    let mut tape = Tape::new();
    let b = models.bind(&mut tape);
    let l = invariance_term(&mut tape, &b, models, &fwd, sigma, false, rng)?;
    Ok(tape.scalar(l))
}

/// Per-item target style rows for pairing `source` with `targets`.
pub fn paired_styles(world: &World, targets: &[usize], item_len: usize) -> Result<Array2<f64>> {
    pipeline::target_style_rows(world, targets, item_len)
}
