//! Flat `section.key=value` run configuration.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cyclereg::CycleWeights;
use crate::error::{Error, Result};
use crate::flowcore::FlowHyper;
use crate::gradcore::AdamHyper;
use crate::pipeline::{NetsConfig, Schedule, TrainConfig};
use crate::synthworld::{World, WorldConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Seeds {
    pub world: u64,
    pub train: u64,
    pub eval: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub world: PathBuf,
    pub dataset: PathBuf,
    pub manifest: PathBuf,
    pub checkpoint: PathBuf,
    pub base_checkpoint: PathBuf,
    pub train_log: PathBuf,
    pub report: PathBuf,
    pub conversion: PathBuf,
    pub contours: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            world: "world.arrays".into(),
            dataset: "dataset.arrays".into(),
            manifest: "manifest.csv".into(),
            checkpoint: "checkpoint.arrays".into(),
            base_checkpoint: "checkpoint_base.arrays".into(),
            train_log: "train_log.csv".into(),
            report: "eval_report.csv".into(),
            conversion: "conversion.arrays".into(),
            contours: "contours.csv".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub flow: FlowHyper,
    pub nets: NetsConfig,
    pub weights: CycleWeights,
    pub cycle_pitch_stage: bool,
    pub adam: AdamHyper,
    pub warmup_steps: u64,
    pub grad_clip: f64,
    pub schedule: Schedule,
    pub seeds: Seeds,
    pub n_eval: usize,
    /// Generated utterances per speaker in the dataset file.
    pub n_per_speaker: usize,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            world: WorldConfig::default(),
            flow: t.hyper,
            nets: t.nets,
            weights: t.weights,
            cycle_pitch_stage: t.cycle_pitch_stage,
            adam: t.adam,
            warmup_steps: t.warmup_steps,
            grad_clip: t.grad_clip,
            schedule: t.schedule,
            seeds: Seeds {
                world: 7,
                train: 1,
                eval: 99,
            },
            n_eval: 64,
            n_per_speaker: 4,
            paths: Paths::default(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>()
        .map_err(|e| Error::config(key, format!("cannot parse `{raw}`: {e}")))
}

/// Declares every key once: its accessor, used for both parsing and printing.
macro_rules! keys {
    ($($key:literal => $($field:ident).+ : $ty:ty),* $(,)?) => {
        const KEYS: &[&str] = &[$($key),*];

        fn set_key(c: &mut RunConfig, key: &str, raw: &str) -> Result<()> {
            match key {
                $($key => c.$($field).+ = parse_value::<$ty>(key, raw)?.into(),)*
                _ => return Err(Error::config(key, "unknown key")),
            }
            Ok(())
        }

        fn get_key(c: &RunConfig, key: &str) -> String {
            match key {
                $($key => display(&c.$($field).+),)*
                _ => unreachable!("key list is closed"),
            }
        }
    };
}

trait Show {
    fn show(&self) -> String;
}

macro_rules! show_via_display {
    ($($t:ty),*) => { $(impl Show for $t { fn show(&self) -> String { self.to_string() } })* };
}
show_via_display!(u64, usize, f64, bool, crate::flowcore::Solver);

impl Show for PathBuf {
    fn show(&self) -> String {
        self.display().to_string()
    }
}

fn display<T: Show>(v: &T) -> String {
    v.show()
}

keys! {
    "world.vocab" => world.vocab: usize,
    "world.frames" => world.frames: usize,
    "world.style_dim" => world.style_dim: usize,
    "world.content_dim" => world.content_dim: usize,
    "world.feature_dim" => world.feature_dim: usize,
    "world.n_speakers" => world.n_speakers: usize,
    "world.noise_std" => world.noise_std: f64,
    "world.orthogonal_styles" => world.orthogonal_styles: bool,
    "flow.sigma" => flow.sigma: f64,
    "flow.solver" => flow.solver: crate::flowcore::Solver,
    "flow.n_steps" => flow.n_steps: usize,
    "net.hidden_dim" => nets.hidden_dim: usize,
    "net.n_layers" => nets.n_layers: usize,
    "net.time_embed_dim" => nets.time_embed_dim: usize,
    "net.pitch_embed_dim" => nets.pitch_embed_dim: usize,
    "cycle.l1" => weights.l1: f64,
    "cycle.l2" => weights.l2: f64,
    "cycle.l3" => weights.l3: f64,
    "cycle.pitch_stage" => cycle_pitch_stage: bool,
    "optim.lr" => adam.lr: f64,
    "optim.beta1" => adam.beta1: f64,
    "optim.beta2" => adam.beta2: f64,
    "optim.eps" => adam.eps: f64,
    "optim.warmup_steps" => warmup_steps: u64,
    "optim.grad_clip" => grad_clip: f64,
    "schedule.base_steps" => schedule.base_steps: u64,
    "schedule.cycle_steps" => schedule.cycle_steps: u64,
    "schedule.batch" => schedule.batch: usize,
    "schedule.joint" => schedule.joint: bool,
    "seed.world" => seeds.world: u64,
    "seed.train" => seeds.train: u64,
    "seed.eval" => seeds.eval: u64,
    "eval.n_eval" => n_eval: usize,
    "data.n_per_speaker" => n_per_speaker: usize,
    "paths.world" => paths.world: PathBuf,
    "paths.dataset" => paths.dataset: PathBuf,
    "paths.manifest" => paths.manifest: PathBuf,
    "paths.checkpoint" => paths.checkpoint: PathBuf,
    "paths.base_checkpoint" => paths.base_checkpoint: PathBuf,
    "paths.train_log" => paths.train_log: PathBuf,
    "paths.report" => paths.report: PathBuf,
    "paths.conversion" => paths.conversion: PathBuf,
    "paths.contours" => paths.contours: PathBuf,
}

impl RunConfig {
    /// Parses `key=value` lines over the defaults. Blank lines and lines
    /// starting with `#` are ignored; repeated keys are an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line{}", n + 1), "expected key=value"))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::config(key, "given twice"));
            }
            set_key(&mut c, key, value.trim())?;
        }
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key, in declaration order.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            s.push_str(key);
            s.push('=');
            s.push_str(&get_key(self, key));
            s.push('\n');
        }
        s
    }

    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            nets: self.nets,
            hyper: self.flow,
            weights: self.weights,
            adam: self.adam,
            warmup_steps: self.warmup_steps,
            schedule: self.schedule,
            cycle_pitch_stage: self.cycle_pitch_stage,
            use_pitch_stage: true,
            grad_clip: self.grad_clip,
            seed: self.seeds.train,
        }
    }

    /// All checks that need no files, run before any command does work.
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.flow.validate()?;
        self.nets.validate(&self.world)?;
        self.weights.validate()?;
        if self.n_eval == 0 {
            return Err(Error::config("eval.n_eval", "must be >= 1"));
        }
        if self.n_per_speaker == 0 {
            return Err(Error::config("data.n_per_speaker", "must be >= 1"));
        }
        if self.world.frames < 2 {
            return Err(Error::config("world.frames", "must be >= 2 for contour correlation"));
        }
        let t = self.train_config();
        let a = &t.adam;
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
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return Err(Error::config("optim.grad_clip", "must be finite and >= 0"));
        }
        if self.schedule.batch < 2 {
            return Err(Error::config("schedule.batch", "must be >= 2"));
        }
        if self.world.n_speakers < 2 {
            return Err(Error::config("world.n_speakers", "need speakers in both pitch domains"));
        }
        Ok(())
    }

    pub fn build_world(&self) -> Result<World> {
        World::new(self.seeds.world, self.world)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_identity() {
        let text = "flow.sigma=0.001\nflow.solver=midpoint\ncycle.l2=0.25\nseed.train=9\npaths.report=r/x.csv\n";
        let a = RunConfig::parse(text).unwrap();
        let b = RunConfig::parse(&a.serialize()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.serialize(), b.serialize());
        assert_eq!(a.flow.sigma, 1e-3);
        assert_eq!(
            RunConfig::parse(&RunConfig::default().serialize()).unwrap(),
            RunConfig::default()
        );
    }

    #[test]
    fn errors_name_the_key() {
        let key_of = |text: &str| match RunConfig::parse(text) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected config error, got {other:?}"),
        };
        assert_eq!(key_of("flow.n_steps=ten"), "flow.n_steps");
        assert_eq!(key_of("flow.bogus=1"), "flow.bogus");
        assert_eq!(key_of("a=1\na=2"), "a");
        let c = RunConfig::parse("eval.n_eval=0").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config { key, .. }) if key == "eval.n_eval"));
        let c = RunConfig::parse("flow.sigma=1.5").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config { key, .. }) if key == "flow.sigma"));
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let c = RunConfig::parse("# header\n\n  schedule.batch = 8  \n").unwrap();
        assert_eq!(c.schedule.batch, 8);
    }
}
