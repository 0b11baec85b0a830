//! Command implementations behind the `cycleflow` binary.

mod config;

pub use config::{Paths, RunConfig, Seeds};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::arrayfile::ArrayFile;
use crate::error::{Error, Result};
use crate::evalkit::{self, write_text};
use crate::pipeline::{self, load_checkpoint, save_checkpoint};
use crate::synthworld::{Utterance, World};

pub const OUT_ENV: &str = "CYCLEFLOW_OUT";

/// A validated configuration bound to an output directory.
#[derive(Debug, Clone)]
pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Context {
    pub fn new(cfg: RunConfig, out: PathBuf) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, out })
    }

    pub fn path(&self, rel: &Path) -> PathBuf {
        if rel.is_absolute() {
            rel.to_path_buf()
        } else {
            self.out.join(rel)
        }
    }

    fn load_world(&self) -> Result<World> {
        let world = World::from_file(&ArrayFile::load(self.path(&self.cfg.paths.world))?)?;
        if world.cfg != self.cfg.world || world.seed != self.cfg.seeds.world {
            return Err(Error::config(
                "world",
                "world file does not match the config; rerun gen-data",
            ));
        }
        Ok(world)
    }

    fn load_dataset(&self) -> Result<Vec<Utterance>> {
        let f = ArrayFile::load(self.path(&self.cfg.paths.dataset))?;
        f.expect_kind("dataset")?;
        let n: usize = f.meta_parse("n_utterances")?;
        (0..n).map(|i| Utterance::read_from(&f, &format!("utt{i}."))).collect()
    }
}

/// Resolves the output directory: `CYCLEFLOW_OUT`, then `--out`, then `out`.
pub fn resolve_out(flag: Option<PathBuf>) -> PathBuf {
    match std::env::var_os(OUT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => flag.unwrap_or_else(|| PathBuf::from("out")),
    }
}

/// World file, dataset file with `data.n_per_speaker` utterances per speaker,
/// and a CSV manifest of the dataset.
pub fn cmd_gen_data(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let world = cfg.build_world()?;
    world.to_file().save(ctx.path(&cfg.paths.world))?;
    let mut rng = crate::rng::stream(cfg.seeds.world, 1 << 32);
    let mut data = ArrayFile::new("dataset");
    let mut manifest = String::from("utterance,speaker_id,domain,frames\n");
    let mut i = 0usize;
    for spk in 0..world.n_speakers() {
        let domain = match world.domain_of(spk)? {
            crate::synthworld::Domain::Low => "low",
            crate::synthworld::Domain::High => "high",
        };
        for _ in 0..cfg.n_per_speaker {
            let u = world.sample_utterance(spk, &mut rng)?;
            u.write_into(&mut data, &format!("utt{i}."));
            let _ = writeln!(manifest, "{i},{spk},{domain},{}", u.len());
            i += 1;
        }
    }
    data.set_meta("n_utterances", i);
    data.save(ctx.path(&cfg.paths.dataset))?;
    write_text(ctx.path(&cfg.paths.manifest), &manifest)
}

/// Base phase, base checkpoint, cycle phase, final checkpoint and the
/// training log.
pub fn cmd_train(ctx: &Context) -> Result<()> {
    let world = ctx.load_world()?;
    let tcfg = ctx.cfg.train_config();
    let base = pipeline::train_base(&world, &tcfg)?;
    save_checkpoint(&base.checkpoint(), ctx.path(&ctx.cfg.paths.base_checkpoint))?;
    let done = pipeline::train_cycle(&world, base, &tcfg)?;
    save_checkpoint(&done.checkpoint(), ctx.path(&ctx.cfg.paths.checkpoint))?;
    write_text(ctx.path(&ctx.cfg.paths.train_log), &done.log_csv())
}

fn checkpoint_path(ctx: &Context, flag: Option<&Path>) -> PathBuf {
    flag.map_or_else(|| ctx.path(&ctx.cfg.paths.checkpoint), Path::to_path_buf)
}

/// Converts dataset utterance `utt` to `target`, writing the conversion and
/// its contour CSV.
pub fn cmd_convert(ctx: &Context, checkpoint: Option<&Path>, utt: usize, target: usize) -> Result<()> {
    let world = ctx.load_world()?;
    world.speaker(target)?;
    let data = ctx.load_dataset()?;
    let source = data
        .get(utt)
        .ok_or_else(|| Error::config("utt", format!("index {utt} out of range ({} utterances)", data.len())))?;
    let ckpt = load_checkpoint(checkpoint_path(ctx, checkpoint))?;
    let result = pipeline::convert(&ckpt.models, &world, source, target, ctx.cfg.seeds.eval)?;
    result.to_file().save(ctx.path(&ctx.cfg.paths.conversion))?;
    let oracle = world.oracle_convert(source, target)?;
    evalkit::export_pitch_contours(source, &result, &oracle, ctx.path(&ctx.cfg.paths.contours))
}

/// EvalReport CSV over `eval.n_eval` held-out cross-domain pairs.
pub fn cmd_eval(ctx: &Context, checkpoint: Option<&Path>) -> Result<()> {
    let world = ctx.load_world()?;
    let ckpt = load_checkpoint(checkpoint_path(ctx, checkpoint))?;
    let report = evalkit::evaluate(&ckpt.models, &world, ctx.cfg.n_eval, ctx.cfg.seeds.eval)?;
    write_text(ctx.path(&ctx.cfg.paths.report), &report.to_csv())
}

pub const ABLATION_FILES: [&str; 3] = ["ablate_full.csv", "ablate_no_cycle.csv", "ablate_no_pitch.csv"];

/// Trains the full model and both ablations from one base phase and writes
/// one EvalReport per variant plus a summary of the aggregates.
pub fn cmd_ablate(ctx: &Context) -> Result<()> {
    let world = ctx.load_world()?;
    let ab = evalkit::ablate(&world, &ctx.cfg.train_config(), ctx.cfg.n_eval, ctx.cfg.seeds.eval)?;
    let mut summary = String::from("variant,logf0_pcc,source_logf0_pcc,style_sim,content_acc,pitch_mean_err,swd\n");
    for ((name, file), r) in
        ["full", "no_cycle", "no_pitch"]
            .iter()
            .zip(ABLATION_FILES)
            .zip([&ab.full, &ab.no_cycle, &ab.no_pitch])
    {
        write_text(ctx.out.join(file), &r.to_csv())?;
        let _ = writeln!(
            summary,
            "{name},{:e},{:e},{:e},{:e},{:e},{:e}",
            r.logf0_pcc, r.source_logf0_pcc, r.style_sim, r.content_acc, r.pitch_mean_err, r.swd
        );
    }
    write_text(ctx.out.join("ablate_summary.csv"), &summary)
}

/// One-line, `key=value` rendering of an error for the process exit path.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace('"', "'");
    match e {
        Error::Config { key, .. } => format!("error kind=config key={key} msg=\"{msg}\""),
        Error::MissingFile(p) => format!("error kind=missing_file path={} msg=\"{msg}\"", p.display()),
        _ => format!("error kind={} msg=\"{msg}\"", e.kind()),
    }
}
