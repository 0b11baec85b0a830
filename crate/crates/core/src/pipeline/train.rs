use std::fmt::Write as _;

use crate::cyclereg::{self, CycleLossReport, CycleSettings, CycleWeights};
use crate::error::{Error, Result};
use crate::flowcore::FlowHyper;
use crate::gradcore::{warmup_lr, AdamHyper, OptState, ParamSet, Tape};
use crate::rng::{self, Rng};
use crate::synthworld::{Domain, Utterance, World};

use super::{DualModels, NetsConfig, UttBatch};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_steps: u64,
    pub cycle_steps: u64,
    /// Utterances per base batch; the cycle batch uses half from each domain.
    pub batch: usize,
    /// Train with the cycle objective from the first step instead of two phases.
    pub joint: bool,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            base_steps: 5000,
            cycle_steps: 3000,
            batch: 32,
            joint: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub nets: NetsConfig,
    pub hyper: FlowHyper,
    pub weights: CycleWeights,
    pub adam: AdamHyper,
    pub warmup_steps: u64,
    pub schedule: Schedule,
    /// Apply the cycle terms to the pitch field as well.
    pub cycle_pitch_stage: bool,
    /// Skip the pitch stage in forward conversions and at inference.
    pub use_pitch_stage: bool,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            nets: NetsConfig::default(),
            hyper: FlowHyper::default(),
            weights: CycleWeights::default(),
            adam: AdamHyper::default(),
            warmup_steps: 500,
            schedule: Schedule::default(),
            cycle_pitch_stage: false,
            use_pitch_stage: true,
            grad_clip: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, world: &World) -> Result<()> {
        self.nets.validate(&world.cfg)?;
        self.hyper.validate()?;
        self.weights.validate()?;
        let a = &self.adam;
        if !(a.lr.is_finite() && a.lr > 0.0) {
            return Err(Error::config("optim.lr", "must be finite and > 0"));
        }
        if !(0.0..1.0).contains(&a.beta1) {
            return Err(Error::config("optim.beta1", "must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&a.beta2) {
            return Err(Error::config("optim.beta2", "must be in [0, 1)"));
        }
        if !(a.eps.is_finite() && a.eps > 0.0) {
            return Err(Error::config("optim.eps", "must be finite and > 0"));
        }
        if self.schedule.batch < 2 {
            return Err(Error::config("schedule.batch", "must be >= 2"));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return Err(Error::config("optim.grad_clip", "must be finite and >= 0"));
        }
        if world.speakers_in(Domain::Low).is_empty() || world.speakers_in(Domain::High).is_empty() {
            return Err(Error::config("world.n_speakers", "need speakers in both pitch domains"));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub l_pitch: f64,
    pub l_mel: f64,
    pub cycle: CycleLossReport,
    pub total: f64,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "step,l_pitch,l_mel,l_xx,l_yy,l_xyx,l_xyy,total";

    pub fn csv(rows: &[LogRow]) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in rows {
            let c = &r.cycle;
            let _ = writeln!(
                s,
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                r.step, r.l_pitch, r.l_mel, c.l_xx, c.l_yy, c.l_xyx, c.l_xyy, r.total
            );
        }
        s
    }
}

/// Owns the models, optimizer state and random streams of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub models: DualModels,
    pub opt: [OptState; 3],
    pub step: u64,
    pub base_done: u64,
    pub cycle_done: u64,
    pub data_rng: Rng,
    pub cycle_rng: Rng,
    pub log: Vec<LogRow>,
}

const INIT_STREAM: u64 = 0;
const DATA_STREAM: u64 = 1;
const CYCLE_STREAM: u64 = 2;

impl Trainer {
    pub fn new(world: &World, cfg: TrainConfig) -> Result<Self> {
        cfg.validate(world)?;
        let mut init = rng::stream(cfg.seed, INIT_STREAM);
        let mut models = DualModels::init(&world.cfg, &cfg.nets, cfg.hyper, cfg.weights, &mut init)?;
        models.use_pitch_stage = cfg.use_pitch_stage;
        Ok(Self::with_models(cfg, models))
    }

    pub fn with_models(cfg: TrainConfig, mut models: DualModels) -> Self {
        models.weights = cfg.weights;
        models.hyper = cfg.hyper;
        models.use_pitch_stage = cfg.use_pitch_stage;
        let opt = [
            OptState::new(&models.pitch_encoder.params),
            OptState::new(&models.pitch_field.params),
            OptState::new(&models.mel_field.params),
        ];
        Self {
            cfg,
            models,
            opt,
            step: 0,
            base_done: 0,
            cycle_done: 0,
            data_rng: rng::stream(cfg.seed, DATA_STREAM),
            cycle_rng: rng::stream(cfg.seed, CYCLE_STREAM),
            log: Vec::new(),
        }
    }

    fn sample_batch(&mut self, world: &World) -> Result<UttBatch> {
        let n = world.n_speakers();
        let utts: Vec<Utterance> = (0..self.cfg.schedule.batch)
            .map(|_| {
                let id = rng::index(&mut self.data_rng, n);
                world.sample_utterance(id, &mut self.data_rng)
            })
            .collect::<Result<_>>()?;
        UttBatch::stack(world, &utts)
    }

    fn sample_domain_batch(&mut self, world: &World, domain: Domain, n: usize) -> Result<UttBatch> {
        let ids = world.speakers_in(domain);
        let utts: Vec<Utterance> = (0..n)
            .map(|_| {
                let id = ids[rng::index(&mut self.cycle_rng, ids.len())];
                world.sample_utterance(id, &mut self.cycle_rng)
            })
            .collect::<Result<_>>()?;
        UttBatch::stack(world, &utts)
    }

    /// One optimizer step. With `cycle`, the consistency objective is added
    /// to the base losses on a fresh pair of cross-domain batches.
    pub fn step_once(&mut self, world: &World, cycle: bool) -> Result<LogRow> {
        let step = self.step;
        self.step_inner(world, cycle).map_err(|e| match e {
            Error::NonFiniteLoss { .. } | Error::NonFinite { .. } | Error::SolverDiverged { .. } => {
                Error::TrainingDiverged {
                    step,
                    source: Box::new(e),
                }
            }
            other => other,
        })
    }

    fn step_inner(&mut self, world: &World, cycle: bool) -> Result<LogRow> {
        let sigma = self.cfg.hyper.sigma;
        let batch = self.sample_batch(world)?;
        let cycle_batches = if cycle && self.cfg.weights != CycleWeights::ZERO {
            let half = (self.cfg.schedule.batch / 2).max(1);
            let x = self.sample_domain_batch(world, Domain::Low, half)?;
            let y = self.sample_domain_batch(world, Domain::High, half)?;
            Some((x, y))
        } else {
            None
        };

        let models = &self.models;
        let mut tape = Tape::new();
        let b = models.bind(&mut tape);
        let l_pitch =
            cyclereg::pitch_reconstruction_term(&mut tape, &b, models, &batch.cond, sigma, &mut self.data_rng)?;
        let l_mel = cyclereg::reconstruction_term(
            &mut tape,
            &b,
            models,
            &batch.frames,
            &batch.cond,
            sigma,
            &mut self.data_rng,
        )?;
        let mut total = tape.add(l_pitch, l_mel);
        let mut report = CycleLossReport::default();
        if let Some((x, y)) = &cycle_batches {
            let set = CycleSettings {
                weights: self.cfg.weights,
                hyper: self.cfg.hyper,
                pitch_stage: self.cfg.cycle_pitch_stage,
            };
            let (c, rep) =
                cyclereg::cycle_objective_tape(&mut tape, &b, models, world, x, y, &set, &mut self.cycle_rng)?;
            report = rep;
            if let Some(c) = c {
                total = tape.add(total, c);
            }
        }
        let (lp, lm, value) = (tape.scalar(l_pitch), tape.scalar(l_mel), tape.scalar(total));
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { param: None });
        }
        let g = tape.backward(total)?;
        let mut grads = [
            g.of(&b.encoder, &models.pitch_encoder.params),
            g.of(&b.pitch, &models.pitch_field.params),
            g.of(&b.mel, &models.mel_field.params),
        ];
        drop(tape);
        clip(&mut grads, self.cfg.grad_clip);
        let hyper = AdamHyper {
            lr: warmup_lr(self.cfg.adam.lr, self.step, self.cfg.warmup_steps),
            ..self.cfg.adam
        };
        let nets = [
            &mut self.models.pitch_encoder,
            &mut self.models.pitch_field,
            &mut self.models.mel_field,
        ];
        for ((net, opt), g) in nets.into_iter().zip(self.opt.iter_mut()).zip(grads.iter()) {
            opt.adam_step(&mut net.params, g, &hyper)?;
            if let Some(p) = net.params.first_non_finite() {
                return Err(Error::NonFiniteLoss {
                    param: Some(format!("{}.{p}", net.config.role.name())),
                });
            }
        }
        let row = LogRow {
            step: self.step,
            l_pitch: lp,
            l_mel: lm,
            cycle: report,
            total: value,
        };
        self.models.weights = self.cfg.weights;
        self.step += 1;
        if cycle {
            self.cycle_done += 1;
        } else {
            self.base_done += 1;
        }
        self.log.push(row);
        Ok(row)
    }

    /// Runs the remaining steps of the schedule.
    pub fn run(&mut self, world: &World) -> Result<()> {
        let s = self.cfg.schedule;
        if s.joint {
            while self.cycle_done < s.base_steps + s.cycle_steps {
                self.step_once(world, true)?;
            }
            return Ok(());
        }
        while self.base_done < s.base_steps {
            self.step_once(world, false)?;
        }
        while self.cycle_done < s.cycle_steps {
            self.step_once(world, true)?;
        }
        Ok(())
    }

    pub fn log_csv(&self) -> String {
        LogRow::csv(&self.log)
    }
}

/// Base phase only: `L_pitch + L_mel`, teacher-forced on ground-truth pitch.
pub fn train_base(world: &World, cfg: &TrainConfig) -> Result<Trainer> {
    let mut t = Trainer::new(world, *cfg)?;
    while t.base_done < cfg.schedule.base_steps {
        t.step_once(world, false)?;
    }
    Ok(t)
}

/// Cycle phase continuing `trainer` (or a fresh run when the schedule is joint).
pub fn train_cycle(world: &World, mut trainer: Trainer, cfg: &TrainConfig) -> Result<Trainer> {
    cfg.validate(world)?;
    trainer.cfg = *cfg;
    trainer.models.weights = cfg.weights;
    trainer.models.use_pitch_stage = cfg.use_pitch_stage;
    let target = if cfg.schedule.joint {
        cfg.schedule.base_steps + cfg.schedule.cycle_steps
    } else {
        cfg.schedule.cycle_steps
    };
    while trainer.cycle_done < target {
        trainer.step_once(world, true)?;
    }
    Ok(trainer)
}

fn clip(grads: &mut [ParamSet; 3], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.iter().map(ParamSet::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        for g in grads.iter_mut() {
            g.scale(max_norm / norm);
        }
    }
}
