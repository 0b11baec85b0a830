//! Dual-CFM orchestration: a pitch stage that refines the log-F0 contour for
//! the target speaker, followed by a frame stage conditioned on it.

mod checkpoint;
mod train;
mod uncond;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainState};
pub use train::{train_base, train_cycle, LogRow, Schedule, TrainConfig, Trainer};
pub use uncond::{sample_unconditional, train_unconditional, unconditional_net, UncondTrain};

use ndarray::{Array2, Axis};

use crate::condnets::{self, FieldNet, FieldNetConfig};
use crate::cyclereg::CycleWeights;
use crate::error::{Error, Result};
use crate::flowcore::{self, FlowHyper};
use crate::gradcore::{Bound, Tape, Var};
use crate::rng::{self, Rng};
use crate::synthworld::{Utterance, World, WorldConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetsConfig {
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub time_embed_dim: usize,
    pub pitch_embed_dim: usize,
}

impl Default for NetsConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 128,
            n_layers: 3,
            time_embed_dim: 16,
            pitch_embed_dim: 4,
        }
    }
}

impl NetsConfig {
    pub fn encoder(&self, w: &WorldConfig) -> FieldNetConfig {
        FieldNetConfig::pitch_encoder(
            w.content_dim,
            w.style_dim,
            self.pitch_embed_dim,
            self.hidden_dim,
            self.n_layers,
        )
    }

    pub fn pitch_field(&self, w: &WorldConfig) -> FieldNetConfig {
        FieldNetConfig::pitch_field(
            w.style_dim,
            self.pitch_embed_dim,
            self.time_embed_dim,
            self.hidden_dim,
            self.n_layers,
        )
    }

    pub fn mel_field(&self, w: &WorldConfig) -> FieldNetConfig {
        FieldNetConfig::mel_field(
            w.feature_dim,
            w.style_dim,
            w.content_dim,
            self.time_embed_dim,
            self.hidden_dim,
            self.n_layers,
        )
    }

    pub fn validate(&self, w: &WorldConfig) -> Result<()> {
        self.encoder(w).validate()?;
        self.pitch_field(w).validate()?;
        self.mel_field(w).validate()
    }
}

/// Per-row conditioning for a stack of utterances of `item_len` frames each.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameCond {
    pub item_len: usize,
    pub style: Array2<f64>,
    /// `N × 1`: the contour fed to the pitch encoder or to the frame field.
    pub log_f0: Array2<f64>,
    pub content: Array2<f64>,
}

impl FrameCond {
    pub fn rows(&self) -> usize {
        self.style.nrows()
    }

    pub fn with_log_f0(&self, log_f0: Array2<f64>) -> Self {
        Self { log_f0, ..self.clone() }
    }

    pub fn with_style(&self, style: Array2<f64>) -> Self {
        Self { style, ..self.clone() }
    }

    pub fn with_content(&self, content: Array2<f64>) -> Self {
        Self {
            content,
            ..self.clone()
        }
    }
}

/// Stacked utterances with their own-speaker conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct UttBatch {
    pub cond: FrameCond,
    pub frames: Array2<f64>,
    pub speakers: Vec<usize>,
    pub tokens: Vec<usize>,
}

impl UttBatch {
    pub fn stack(world: &World, utts: &[Utterance]) -> Result<Self> {
        let t = utts.first().map_or(world.cfg.frames, Utterance::len);
        if t == 0 || utts.iter().any(|u| u.len() != t) {
            return Err(Error::Shape("utterances in a batch must share a nonzero length".into()));
        }
        let mut tokens = Vec::with_capacity(utts.len() * t);
        let mut f0 = Vec::with_capacity(utts.len() * t);
        let mut styles = Vec::with_capacity(utts.len() * t);
        for u in utts {
            tokens.extend_from_slice(&u.tokens);
            f0.extend_from_slice(&u.log_f0);
            let s = &world.speaker(u.speaker_id)?.style;
            styles.extend(std::iter::repeat_n(s, t));
        }
        let views: Vec<_> = utts.iter().map(|u| u.frames.view()).collect();
        let frames = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        let ds = world.cfg.style_dim;
        let style = Array2::from_shape_fn((styles.len(), ds), |(r, j)| styles[r][j]);
        Ok(Self {
            cond: FrameCond {
                item_len: t,
                style,
                log_f0: condnets::column(&f0),
                content: condnets::content_encode(&world.token_embeds, &tokens)?,
            },
            frames,
            speakers: utts.iter().map(|u| u.speaker_id).collect(),
            tokens,
        })
    }

    pub fn n_items(&self) -> usize {
        self.speakers.len()
    }
}

/// Style rows for a list of per-item target speakers.
pub fn target_style_rows(world: &World, targets: &[usize], item_len: usize) -> Result<Array2<f64>> {
    let ds = world.cfg.style_dim;
    let mut out = Array2::zeros((targets.len() * item_len, ds));
    for (i, &id) in targets.iter().enumerate() {
        let s = ndarray::ArrayView1::from(&world.speaker(id)?.style[..]);
        for r in 0..item_len {
            out.row_mut(i * item_len + r).assign(&s);
        }
    }
    Ok(out)
}

/// The three networks of the Dual-CFM plus the flow and cycle settings.
#[derive(Debug, Clone, PartialEq)]
pub struct DualModels {
    pub pitch_encoder: FieldNet,
    pub pitch_field: FieldNet,
    pub mel_field: FieldNet,
    pub hyper: FlowHyper,
    pub weights: CycleWeights,
    /// `false` skips the pitch stage and conditions the frame stage on the source contour.
    pub use_pitch_stage: bool,
}

pub struct BoundModels {
    pub encoder: Bound,
    pub pitch: Bound,
    pub mel: Bound,
}

impl DualModels {
    pub fn init(
        world: &WorldConfig,
        nets: &NetsConfig,
        hyper: FlowHyper,
        weights: CycleWeights,
        rng: &mut Rng,
    ) -> Result<Self> {
        nets.validate(world)?;
        hyper.validate()?;
        weights.validate()?;
        Ok(Self {
            pitch_encoder: FieldNet::init(nets.encoder(world), rng)?,
            pitch_field: FieldNet::init(nets.pitch_field(world), rng)?,
            mel_field: FieldNet::init(nets.mel_field(world), rng)?,
            hyper,
            weights,
            use_pitch_stage: true,
        })
    }

    pub fn check_world(&self, world: &WorldConfig) -> Result<()> {
        let e = &self.pitch_encoder.config;
        let m = &self.mel_field.config;
        let p = &self.pitch_field.config;
        let consistent = e.content_dim == world.content_dim
            && e.style_dim == world.style_dim
            && m.state_dim == world.feature_dim
            && m.style_dim == world.style_dim
            && m.content_dim == world.content_dim
            && p.style_dim == world.style_dim
            && p.pitch_dim == e.output_dim;
        if consistent {
            Ok(())
        } else {
            Err(Error::Shape("model dimensions do not match the world".into()))
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModels {
        BoundModels {
            encoder: tape.bind(&self.pitch_encoder.params),
            pitch: tape.bind(&self.pitch_field.params),
            mel: tape.bind(&self.mel_field.params),
        }
    }

    pub fn pitch_embed_tape(&self, tape: &mut Tape, b: &BoundModels, cond: &FrameCond) -> Var {
        let norm = condnets::normalize_items(cond.log_f0.as_slice().expect("contiguous"), cond.item_len);
        let c = tape.constant(cond.content.clone());
        let s = tape.constant(cond.style.clone());
        let f = tape.constant(norm);
        self.pitch_encoder.apply(tape, &b.encoder, &[c, s, f])
    }

    /// Pitch-stage field at `z_t`, with the encoder evaluated from `cond`.
    pub fn pitch_field_tape(
        &self,
        tape: &mut Tape,
        b: &BoundModels,
        z_t: &Array2<f64>,
        t: &[f64],
        cond: &FrameCond,
    ) -> Var {
        let embed = self.pitch_embed_tape(tape, b, cond);
        let z = tape.constant(z_t.clone());
        let temb = tape.constant(condnets::time_rows(t, self.pitch_field.config.time_embed_dim));
        let s = tape.constant(cond.style.clone());
        self.pitch_field.apply(tape, &b.pitch, &[z, temb, s, embed])
    }

    pub fn mel_field_tape(
        &self,
        tape: &mut Tape,
        b: &BoundModels,
        x_t: &Array2<f64>,
        t: &[f64],
        cond: &FrameCond,
    ) -> Var {
        let x = tape.constant(x_t.clone());
        let temb = tape.constant(condnets::time_rows(t, self.mel_field.config.time_embed_dim));
        let s = tape.constant(cond.style.clone());
        let f = tape.constant(cond.log_f0.clone());
        let c = tape.constant(cond.content.clone());
        self.mel_field.apply(tape, &b.mel, &[x, temb, s, f, c])
    }

    pub fn pitch_embed(&self, cond: &FrameCond) -> Result<Array2<f64>> {
        let norm = condnets::normalize_items(cond.log_f0.as_slice().expect("contiguous"), cond.item_len);
        self.pitch_encoder
            .eval(&[cond.content.view(), cond.style.view(), norm.view()])
    }

    pub fn pitch_velocity(
        &self,
        z: &Array2<f64>,
        t: f64,
        style: &Array2<f64>,
        embed: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        let temb = condnets::repeat_row(
            &condnets::time_embedding(t, self.pitch_field.config.time_embed_dim),
            z.nrows(),
        );
        self.pitch_field
            .eval(&[z.view(), temb.view(), style.view(), embed.view()])
    }

    pub fn mel_velocity(&self, x: &Array2<f64>, t: f64, cond: &FrameCond) -> Result<Array2<f64>> {
        let temb = condnets::repeat_row(
            &condnets::time_embedding(t, self.mel_field.config.time_embed_dim),
            x.nrows(),
        );
        self.mel_field.eval(&[
            x.view(),
            temb.view(),
            cond.style.view(),
            cond.log_f0.view(),
            cond.content.view(),
        ])
    }

    /// Batched conversion. `cond` carries the target style, the source
    /// contour and the source content. Draws the pitch noise, then the frame
    /// noise, even when the pitch stage is disabled, so that ablations share
    /// noise with the full model.
    pub fn convert_rows(
        &self,
        cond: &FrameCond,
        hyper: &FlowHyper,
        rng: &mut Rng,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let n = cond.rows();
        let z0 = rng::normal_matrix(rng, n, 1);
        let x0 = rng::normal_matrix(rng, n, self.mel_field.config.state_dim);
        let use_pitch = self.use_pitch_stage;
        let embed = if use_pitch { Some(self.pitch_embed(cond)?) } else { None };
        dual_sample(
            |z, t| {
                let embed = embed.as_ref().expect("pitch stage enabled");
                self.pitch_velocity(z, t, &cond.style, embed)
            },
            |x, t, refined| self.mel_velocity(x, t, &cond.with_log_f0(refined.clone())),
            if use_pitch { Some(z0) } else { None },
            &cond.log_f0,
            x0,
            hyper,
        )
    }
}

/// Runs the pitch solve to completion and then the frame solve conditioned
/// on its result. With `z0 = None` the pitch stage is skipped and
/// `source_log_f0` conditions the frame stage directly.
pub fn dual_sample<P, M>(
    pitch_field: P,
    mut mel_field: M,
    z0: Option<Array2<f64>>,
    source_log_f0: &Array2<f64>,
    x0: Array2<f64>,
    hyper: &FlowHyper,
) -> Result<(Array2<f64>, Array2<f64>)>
where
    P: FnMut(&Array2<f64>, f64) -> Result<Array2<f64>>,
    M: FnMut(&Array2<f64>, f64, &Array2<f64>) -> Result<Array2<f64>>,
{
    let refined = match z0 {
        Some(z0) => flowcore::ode_sample(pitch_field, z0, hyper)?,
        None => source_log_f0.clone(),
    };
    let frames = flowcore::ode_sample(|x, t| mel_field(x, t, &refined), x0, hyper)?;
    Ok((refined, frames))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverMeta {
    pub method: flowcore::Solver,
    pub n_steps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConversionResult {
    pub refined_logf0: Vec<f64>,
    pub frames: Array2<f64>,
    pub source_speaker: usize,
    pub target_speaker: usize,
    pub meta: SolverMeta,
}

impl ConversionResult {
    pub fn to_file(&self) -> crate::arrayfile::ArrayFile {
        let mut f = crate::arrayfile::ArrayFile::new("conversion");
        f.set_meta("source_speaker", self.source_speaker);
        f.set_meta("target_speaker", self.target_speaker);
        f.set_meta("solver", self.meta.method);
        f.set_meta("n_steps", self.meta.n_steps);
        f.set_meta("seed", self.meta.seed);
        f.insert("refined_logf0", condnets::column(&self.refined_logf0));
        f.insert("frames", self.frames.clone());
        f
    }
}

/// Conditioning for converting `utt` to `target_id`: target style, source contour, source content.
pub fn conversion_cond(world: &World, utt: &Utterance, target_id: usize) -> Result<FrameCond> {
    let t = utt.len();
    if t == 0 {
        return Err(Error::Precondition("cannot convert an empty utterance".into()));
    }
    Ok(FrameCond {
        item_len: t,
        style: target_style_rows(world, &[target_id], t)?,
        log_f0: condnets::column(&utt.log_f0),
        content: condnets::content_encode(&world.token_embeds, &utt.tokens)?,
    })
}

/// Two-stage conversion of one utterance, reproducible from `seed`.
pub fn convert(
    models: &DualModels,
    world: &World,
    utt: &Utterance,
    target_id: usize,
    seed: u64,
) -> Result<ConversionResult> {
    world.speaker(target_id)?;
    world.speaker(utt.speaker_id)?;
    models.check_world(&world.cfg)?;
    let cond = conversion_cond(world, utt, target_id)?;
    let mut rng = rng::seeded(seed);
    let (refined, frames) = models.convert_rows(&cond, &models.hyper, &mut rng)?;
    Ok(ConversionResult {
        refined_logf0: refined.iter().copied().collect(),
        frames,
        source_speaker: utt.speaker_id,
        target_speaker: target_id,
        meta: SolverMeta {
            method: models.hyper.solver,
            n_steps: models.hyper.n_steps,
            seed,
        },
    })
}

/// Re-reads a conversion as a source utterance: content tokens come from
/// the content probe, pitch from the refined contour.
pub fn result_as_utterance(world: &World, result: &ConversionResult) -> Result<Utterance> {
    let tokens = world.probe_content(result.frames.view(), &result.refined_logf0)?;
    Ok(Utterance {
        tokens,
        log_f0: result.refined_logf0.clone(),
        frames: result.frames.clone(),
        speaker_id: result.target_speaker,
    })
}
