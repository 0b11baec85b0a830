use std::path::Path;

use crate::arrayfile::ArrayFile;
use crate::condnets::{FieldNet, FieldNetConfig, NetRole};
use crate::cyclereg::CycleWeights;
use crate::error::{Error, Result};
use crate::flowcore::{FlowHyper, Solver};
use crate::gradcore::{AdamHyper, OptState, ParamSet};
use crate::rng::{self, Rng};

use super::train::{Schedule, TrainConfig, Trainer};
use super::{DualModels, NetsConfig};

const KIND: &str = "checkpoint";
const NETS: [&str; 3] = ["pitch_encoder", "pitch_field", "mel_field"];

/// Optimizer and stream state needed to resume training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub cfg: TrainConfig,
    pub opt: [OptState; 3],
    pub step: u64,
    pub base_done: u64,
    pub cycle_done: u64,
    pub data_rng: Rng,
    pub cycle_rng: Rng,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub models: DualModels,
    pub state: Option<TrainState>,
}

impl Trainer {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            models: self.models.clone(),
            state: Some(TrainState {
                cfg: self.cfg,
                opt: self.opt.clone(),
                step: self.step,
                base_done: self.base_done,
                cycle_done: self.cycle_done,
                data_rng: self.data_rng.clone(),
                cycle_rng: self.cycle_rng.clone(),
            }),
        }
    }

    /// Resumes from a checkpoint. The in-memory log starts empty.
    pub fn resume(ckpt: Checkpoint) -> Result<Self> {
        let st = ckpt
            .state
            .ok_or_else(|| Error::Precondition("checkpoint holds no training state".into()))?;
        Ok(Self {
            cfg: st.cfg,
            models: ckpt.models,
            opt: st.opt,
            step: st.step,
            base_done: st.base_done,
            cycle_done: st.cycle_done,
            data_rng: st.data_rng,
            cycle_rng: st.cycle_rng,
            log: Vec::new(),
        })
    }
}

fn nets(m: &DualModels) -> [&FieldNet; 3] {
    [&m.pitch_encoder, &m.pitch_field, &m.mel_field]
}

fn write_net_config(f: &mut ArrayFile, p: &str, c: &FieldNetConfig) {
    f.set_meta(format!("{p}.role"), c.role.name());
    f.set_meta(format!("{p}.state_dim"), c.state_dim);
    f.set_meta(format!("{p}.time_embed_dim"), c.time_embed_dim);
    f.set_meta(format!("{p}.style_dim"), c.style_dim);
    f.set_meta(format!("{p}.pitch_dim"), c.pitch_dim);
    f.set_meta(format!("{p}.content_dim"), c.content_dim);
    f.set_meta(format!("{p}.hidden_dim"), c.hidden_dim);
    f.set_meta(format!("{p}.n_layers"), c.n_layers);
    f.set_meta(format!("{p}.output_dim"), c.output_dim);
}

fn read_net_config(f: &ArrayFile, p: &str) -> Result<FieldNetConfig> {
    let u = |k: &str| f.meta_parse::<usize>(&format!("{p}.{k}"));
    Ok(FieldNetConfig {
        role: NetRole::parse(f.meta_str(&format!("{p}.role"))?)?,
        state_dim: u("state_dim")?,
        time_embed_dim: u("time_embed_dim")?,
        style_dim: u("style_dim")?,
        pitch_dim: u("pitch_dim")?,
        content_dim: u("content_dim")?,
        hidden_dim: u("hidden_dim")?,
        n_layers: u("n_layers")?,
        output_dim: u("output_dim")?,
    })
}

fn write_rng(f: &mut ArrayFile, p: &str, r: &Rng) {
    let (seed, stream, pos) = rng::snapshot(r);
    f.set_meta(format!("{p}.seed"), seed);
    f.set_meta(format!("{p}.stream"), stream);
    f.set_meta(format!("{p}.word_pos"), pos);
}

fn read_rng(f: &ArrayFile, p: &str) -> Result<Rng> {
    rng::restore(
        f.meta_str(&format!("{p}.seed"))?,
        f.meta_parse(&format!("{p}.stream"))?,
        f.meta_parse(&format!("{p}.word_pos"))?,
    )
    .ok_or_else(|| Error::Corrupt(format!("bad rng state `{p}`")))
}

fn corrupt_solver(s: String) -> Error {
    Error::Corrupt(s)
}

impl Checkpoint {
    pub fn to_file(&self) -> ArrayFile {
        let mut f = ArrayFile::new(KIND);
        let m = &self.models;
        f.set_meta("flow.sigma", m.hyper.sigma);
        f.set_meta("flow.solver", m.hyper.solver);
        f.set_meta("flow.n_steps", m.hyper.n_steps);
        f.set_meta("cycle.l1", m.weights.l1);
        f.set_meta("cycle.l2", m.weights.l2);
        f.set_meta("cycle.l3", m.weights.l3);
        f.set_meta("use_pitch_stage", m.use_pitch_stage);
        for (name, net) in NETS.iter().zip(nets(m)) {
            write_net_config(&mut f, &format!("net.{name}"), &net.config);
            net.params.write_into(&mut f, &format!("{name}."));
        }
        f.set_meta("has_state", self.state.is_some());
        if let Some(st) = &self.state {
            let c = &st.cfg;
            f.set_meta("train.hidden_dim", c.nets.hidden_dim);
            f.set_meta("train.n_layers", c.nets.n_layers);
            f.set_meta("train.time_embed_dim", c.nets.time_embed_dim);
            f.set_meta("train.pitch_embed_dim", c.nets.pitch_embed_dim);
            f.set_meta("train.lr", c.adam.lr);
            f.set_meta("train.beta1", c.adam.beta1);
            f.set_meta("train.beta2", c.adam.beta2);
            f.set_meta("train.eps", c.adam.eps);
            f.set_meta("train.warmup_steps", c.warmup_steps);
            f.set_meta("train.base_steps", c.schedule.base_steps);
            f.set_meta("train.cycle_steps", c.schedule.cycle_steps);
            f.set_meta("train.batch", c.schedule.batch);
            f.set_meta("train.joint", c.schedule.joint);
            f.set_meta("train.cycle_pitch_stage", c.cycle_pitch_stage);
            f.set_meta("train.grad_clip", c.grad_clip);
            f.set_meta("train.seed", c.seed);
            f.set_meta("train.step", st.step);
            f.set_meta("train.base_done", st.base_done);
            f.set_meta("train.cycle_done", st.cycle_done);
            write_rng(&mut f, "rng.data", &st.data_rng);
            write_rng(&mut f, "rng.cycle", &st.cycle_rng);
            for (name, opt) in NETS.iter().zip(st.opt.iter()) {
                opt.write_into(&mut f, &format!("adam.{name}."));
            }
        }
        f
    }

    pub fn from_file(f: &ArrayFile) -> Result<Self> {
        f.expect_kind(KIND)?;
        let hyper = FlowHyper {
            sigma: f.meta_parse("flow.sigma")?,
            solver: f.meta_str("flow.solver")?.parse::<Solver>().map_err(corrupt_solver)?,
            n_steps: f.meta_parse("flow.n_steps")?,
        };
        let weights = CycleWeights {
            l1: f.meta_parse("cycle.l1")?,
            l2: f.meta_parse("cycle.l2")?,
            l3: f.meta_parse("cycle.l3")?,
        };
        let mut loaded = Vec::with_capacity(3);
        for name in NETS {
            let cfg = read_net_config(f, &format!("net.{name}"))?;
            let params: ParamSet = ParamSet::read_from(f, &format!("{name}."));
            loaded.push(FieldNet::from_params(cfg, params)?);
        }
        let mel_field = loaded.pop().expect("three nets");
        let pitch_field = loaded.pop().expect("three nets");
        let pitch_encoder = loaded.pop().expect("three nets");
        let models = DualModels {
            pitch_encoder,
            pitch_field,
            mel_field,
            hyper,
            weights,
            use_pitch_stage: f.meta_parse("use_pitch_stage")?,
        };
        let state = if f.meta_parse::<bool>("has_state")? {
            let cfg = TrainConfig {
                nets: NetsConfig {
                    hidden_dim: f.meta_parse("train.hidden_dim")?,
                    n_layers: f.meta_parse("train.n_layers")?,
                    time_embed_dim: f.meta_parse("train.time_embed_dim")?,
                    pitch_embed_dim: f.meta_parse("train.pitch_embed_dim")?,
                },
                hyper,
                weights,
                adam: AdamHyper {
                    lr: f.meta_parse("train.lr")?,
                    beta1: f.meta_parse("train.beta1")?,
                    beta2: f.meta_parse("train.beta2")?,
                    eps: f.meta_parse("train.eps")?,
                },
                warmup_steps: f.meta_parse("train.warmup_steps")?,
                schedule: Schedule {
                    base_steps: f.meta_parse("train.base_steps")?,
                    cycle_steps: f.meta_parse("train.cycle_steps")?,
                    batch: f.meta_parse("train.batch")?,
                    joint: f.meta_parse("train.joint")?,
                },
                cycle_pitch_stage: f.meta_parse("train.cycle_pitch_stage")?,
                use_pitch_stage: models.use_pitch_stage,
                grad_clip: f.meta_parse("train.grad_clip")?,
                seed: f.meta_parse("train.seed")?,
            };
            let ns = nets(&models);
            let opt = [
                OptState::read_from(f, "adam.pitch_encoder.", &ns[0].params)?,
                OptState::read_from(f, "adam.pitch_field.", &ns[1].params)?,
                OptState::read_from(f, "adam.mel_field.", &ns[2].params)?,
            ];
            Some(TrainState {
                cfg,
                opt,
                step: f.meta_parse("train.step")?,
                base_done: f.meta_parse("train.base_done")?,
                cycle_done: f.meta_parse("train.cycle_done")?,
                data_rng: read_rng(f, "rng.data")?,
                cycle_rng: read_rng(f, "rng.cycle")?,
            })
        } else {
            None
        };
        Ok(Self { models, state })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    ckpt.to_file().save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_file(&ArrayFile::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{World, WorldConfig};

    fn small_trainer() -> (World, Trainer) {
        let world = World::new(
            5,
            WorldConfig {
                frames: 4,
                ..WorldConfig::default()
            },
        )
        .unwrap();
        let cfg = TrainConfig {
            nets: NetsConfig {
                hidden_dim: 6,
                n_layers: 2,
                ..NetsConfig::default()
            },
            hyper: FlowHyper {
                n_steps: 2,
                ..FlowHyper::default()
            },
            schedule: Schedule {
                base_steps: 2,
                cycle_steps: 2,
                batch: 4,
                joint: false,
            },
            seed: 3,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(&world, cfg).unwrap();
        t.run(&world).unwrap();
        (world, t)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (_, t) = small_trainer();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        save_checkpoint(&t.checkpoint(), &a).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        assert_eq!(loaded, t.checkpoint());
        save_checkpoint(&loaded, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn truncated_checkpoint_is_corrupt() {
        let (_, t) = small_trainer();
        let text = t.checkpoint().to_file().to_text();
        let cut = &text[..text.len() / 2];
        assert!(matches!(
            ArrayFile::parse(cut).and_then(|f| Checkpoint::from_file(&f)),
            Err(Error::Corrupt(_))
        ));
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let (world, t) = small_trainer();
        let mut longer = t.clone();
        longer.step_once(&world, true).unwrap();
        let text = t.checkpoint().to_file().to_text();
        let ckpt = Checkpoint::from_file(&ArrayFile::parse(&text).unwrap()).unwrap();
        let mut resumed = Trainer::resume(ckpt).unwrap();
        resumed.step_once(&world, true).unwrap();
        assert_eq!(resumed.models, longer.models);
        assert_eq!(resumed.log.last(), longer.log.last());
    }
}
