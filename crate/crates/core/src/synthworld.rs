//! Seeded linear-Gaussian "speech world".
//!
//! An utterance is a token sequence (content), a per-frame log-F0 contour
//! (pitch) and per-frame feature vectors generated as
//!
//! ```text
//! frame[t] = W_c e[tok[t]] + W_p log_f0[t] + W_s style
//! log_f0[t] = alpha * p[tok[t]] + beta
//! ```
//!
//! plus Gaussian noise. Because the map is linear and `[W_c | W_p | W_s]`
//! has full column rank, conversions have an analytic ground truth and the
//! style/content probes are exact on noise-free frames.

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::arrayfile::ArrayFile;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

const RANK_TOL: f64 = 1e-8;
const MAX_ATTEMPTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldConfig {
    pub vocab: usize,
    pub frames: usize,
    pub style_dim: usize,
    pub content_dim: usize,
    pub feature_dim: usize,
    pub n_speakers: usize,
    pub noise_std: f64,
    /// Gram-Schmidt the speaker styles (requires `n_speakers <= style_dim`).
    pub orthogonal_styles: bool,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            vocab: 16,
            frames: 32,
            style_dim: 8,
            content_dim: 8,
            feature_dim: 24,
            n_speakers: 8,
            noise_std: 0.05,
            orthogonal_styles: true,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("world.vocab", self.vocab),
            ("world.frames", self.frames),
            ("world.style_dim", self.style_dim),
            ("world.content_dim", self.content_dim),
            ("world.feature_dim", self.feature_dim),
            ("world.n_speakers", self.n_speakers),
        ];
        for (key, v) in dims {
            if v == 0 {
                return Err(Error::config(key, "must be >= 1"));
            }
        }
        if self.vocab < 2 {
            return Err(Error::config("world.vocab", "must be >= 2"));
        }
        if self.n_speakers < 2 {
            return Err(Error::config("world.n_speakers", "must be >= 2"));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::config("world.noise_std", "must be finite and >= 0"));
        }
        if self.orthogonal_styles && self.n_speakers > self.style_dim {
            return Err(Error::config(
                "world.orthogonal_styles",
                "needs n_speakers <= style_dim",
            ));
        }
        Ok(())
    }

    /// Columns of the stacked mixing matrix `[W_c | W_p | W_s]`.
    pub fn n_factors(&self) -> usize {
        self.content_dim + 1 + self.style_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerSpec {
    pub id: usize,
    /// Unit-norm timbre vector.
    pub style: Vec<f64>,
    pub pitch_scale: f64,
    pub pitch_offset: f64,
}

/// Pitch-range half a speaker belongs to; stands in for the inter-gender split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Low,
    High,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub tokens: Vec<usize>,
    pub log_f0: Vec<f64>,
    pub frames: Array2<f64>,
    pub speaker_id: usize,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn write_into(&self, file: &mut ArrayFile, prefix: &str) {
        let t = self.len();
        let tokens = Array2::from_shape_fn((t, 1), |(i, _)| self.tokens[i] as f64);
        let f0 = Array2::from_shape_fn((t, 1), |(i, _)| self.log_f0[i]);
        file.insert(format!("{prefix}tokens"), tokens);
        file.insert(format!("{prefix}log_f0"), f0);
        file.insert(format!("{prefix}frames"), self.frames.clone());
        file.set_meta(format!("{prefix}speaker_id"), self.speaker_id);
    }

    pub fn read_from(file: &ArrayFile, prefix: &str) -> Result<Self> {
        let tokens = file
            .array(&format!("{prefix}tokens"))?
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Corrupt(format!("bad token value {v}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let log_f0 = file.array(&format!("{prefix}log_f0"))?.iter().copied().collect();
        let frames = file.array(&format!("{prefix}frames"))?.clone();
        let utt = Utterance {
            tokens,
            log_f0,
            frames,
            speaker_id: file.meta_parse(&format!("{prefix}speaker_id"))?,
        };
        if utt.log_f0.len() != utt.len() || utt.frames.nrows() != utt.len() {
            return Err(Error::Corrupt(format!("utterance `{prefix}` has ragged lengths")));
        }
        Ok(utt)
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub cfg: WorldConfig,
    pub seed: u64,
    pub token_contours: Vec<f64>,
    pub token_embeds: Array2<f64>,
    pub mix_content: Array2<f64>,
    pub mix_pitch: Array2<f64>,
    pub mix_style: Array2<f64>,
    pub speakers: Vec<SpeakerSpec>,
    // derived
    content_atoms: Array2<f64>,
    style_atoms: Array2<f64>,
    factor_pinv: Array2<f64>,
    min_singular_value: f64,
}

impl PartialEq for World {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg
            && self.seed == other.seed
            && self.token_contours == other.token_contours
            && self.token_embeds == other.token_embeds
            && self.mix_content == other.mix_content
            && self.mix_pitch == other.mix_pitch
            && self.mix_style == other.mix_style
            && self.speakers == other.speakers
    }
}

fn gram_schmidt_rows(m: &mut Array2<f64>) -> Result<()> {
    for i in 0..m.nrows() {
        for j in 0..i {
            let (done, mut rest) = m.view_mut().split_at(Axis(0), i);
            let prev = done.row(j);
            let mut row = rest.row_mut(0);
            let d = row.dot(&prev);
            row.scaled_add(-d, &prev);
        }
        let n = m.row(i).dot(&m.row(i)).sqrt();
        if n < 1e-12 {
            return Err(Error::Degenerate("style vectors are linearly dependent".into()));
        }
        m.row_mut(i).mapv_inplace(|x| x / n);
    }
    Ok(())
}

/// Singular values (descending) and pseudo-inverse of a dense matrix.
fn svd_pinv(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let (r, c) = a.dim();
    let m = DMatrix::from_fn(r, c, |i, j| a[[i, j]]);
    let svd = m.svd(true, true);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    let pinv = svd.pseudo_inverse(RANK_TOL).expect("svd computed with u and v");
    let out = Array2::from_shape_fn((c, r), |(i, j)| pinv[(i, j)]);
    (sv, out)
}

impl World {
    pub fn new(seed: u64, cfg: WorldConfig) -> Result<World> {
        cfg.validate()?;
        let mut min_sv = 0.0;
        for attempt in 0..MAX_ATTEMPTS {
            let mut rng = rng::stream(seed, attempt as u64);
            let world = Self::draw(seed, &cfg, &mut rng)?;
            if world.min_singular_value > RANK_TOL {
                return Ok(world);
            }
            min_sv = world.min_singular_value;
        }
        Err(Error::RankDeficient {
            attempts: MAX_ATTEMPTS,
            min_sv,
        })
    }

    fn draw(seed: u64, cfg: &WorldConfig, rng: &mut Rng) -> Result<World> {
        let (v, dc, dx, ds, n) = (
            cfg.vocab,
            cfg.content_dim,
            cfg.feature_dim,
            cfg.style_dim,
            cfg.n_speakers,
        );
        let token_contours: Vec<f64> = (0..v).map(|_| rng::uniform_range(rng, -1.0, 1.0)).collect();
        let token_embeds = rng::normal_matrix(rng, v, dc);
        let mix_scale = 1.0 / (dx as f64).sqrt();
        let mix_content = rng::normal_matrix(rng, dx, dc) * mix_scale;
        let mix_pitch = rng::normal_matrix(rng, dx, 1) * mix_scale;
        let mix_style = rng::normal_matrix(rng, dx, ds) * mix_scale;

        let mut styles = rng::normal_matrix(rng, n, ds);
        if cfg.orthogonal_styles {
            gram_schmidt_rows(&mut styles)?;
        } else {
            for mut row in styles.rows_mut() {
                let norm = row.dot(&row).sqrt();
                row.mapv_inplace(|x| x / norm);
            }
        }
        // First half of the speakers get the low pitch range, second half the high one.
        let speakers = (0..n)
            .map(|id| {
                let (alpha, beta) = if id < n / 2 {
                    (rng::uniform_range(rng, 0.5, 1.0), rng::uniform_range(rng, -1.0, 0.0))
                } else {
                    (rng::uniform_range(rng, 1.0, 2.0), rng::uniform_range(rng, 0.0, 1.0))
                };
                SpeakerSpec {
                    id,
                    style: styles.row(id).to_vec(),
                    pitch_scale: alpha,
                    pitch_offset: beta,
                }
            })
            .collect();

        Ok(Self::assemble(
            cfg.clone(),
            seed,
            token_contours,
            token_embeds,
            mix_content,
            mix_pitch,
            mix_style,
            speakers,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        cfg: WorldConfig,
        seed: u64,
        token_contours: Vec<f64>,
        token_embeds: Array2<f64>,
        mix_content: Array2<f64>,
        mix_pitch: Array2<f64>,
        mix_style: Array2<f64>,
        speakers: Vec<SpeakerSpec>,
    ) -> World {
        let content_atoms = token_embeds.dot(&mix_content.t());
        let styles = Array2::from_shape_fn((speakers.len(), cfg.style_dim), |(i, j)| speakers[i].style[j]);
        let style_atoms = styles.dot(&mix_style.t());
        let stacked = ndarray::concatenate(Axis(1), &[mix_content.view(), mix_pitch.view(), mix_style.view()])
            .expect("mixing matrices share rows");
        let (sv, factor_pinv) = svd_pinv(&stacked);
        // A tall matrix with fewer rows than columns has rank < columns.
        let min_singular_value = if stacked.nrows() < stacked.ncols() {
            0.0
        } else {
            sv.last().copied().unwrap_or(0.0)
        };
        World {
            cfg,
            seed,
            token_contours,
            token_embeds,
            mix_content,
            mix_pitch,
            mix_style,
            speakers,
            content_atoms,
            style_atoms,
            factor_pinv,
            min_singular_value,
        }
    }

    pub fn min_singular_value(&self) -> f64 {
        self.min_singular_value
    }

    pub fn n_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn speaker(&self, id: usize) -> Result<&SpeakerSpec> {
        self.speakers.get(id).ok_or(Error::InvalidSpeaker {
            id,
            n: self.speakers.len(),
        })
    }

    /// Lower half of the speakers by `alpha + beta` is [`Domain::Low`].
    pub fn domain_of(&self, id: usize) -> Result<Domain> {
        let key = |s: &SpeakerSpec| s.pitch_scale + s.pitch_offset;
        let me = key(self.speaker(id)?);
        let rank = self
            .speakers
            .iter()
            .filter(|s| {
                let k = key(s);
                k < me || (k == me && s.id < id)
            })
            .count();
        Ok(if rank < self.speakers.len() / 2 {
            Domain::Low
        } else {
            Domain::High
        })
    }

    pub fn speakers_in(&self, domain: Domain) -> Vec<usize> {
        (0..self.n_speakers())
            .filter(|&id| self.domain_of(id).ok() == Some(domain))
            .collect()
    }

    /// Token contour mapped into a speaker's pitch range, noise-free.
    pub fn clean_log_f0(&self, speaker_id: usize, tokens: &[usize]) -> Result<Vec<f64>> {
        let spk = self.speaker(speaker_id)?;
        tokens
            .iter()
            .map(|&tok| {
                self.check_token(tok)?;
                Ok(spk.pitch_scale * self.token_contours[tok] + spk.pitch_offset)
            })
            .collect()
    }

    /// Generative equation without noise.
    pub fn clean_frames(&self, speaker_id: usize, tokens: &[usize], log_f0: &[f64]) -> Result<Array2<f64>> {
        self.speaker(speaker_id)?;
        if tokens.len() != log_f0.len() {
            return Err(Error::Shape(format!(
                "{} tokens but {} pitch values",
                tokens.len(),
                log_f0.len()
            )));
        }
        let dx = self.cfg.feature_dim;
        let style = self.style_atoms.row(speaker_id);
        let pitch = self.mix_pitch.column(0);
        let mut frames = Array2::zeros((tokens.len(), dx));
        for (t, (&tok, &f)) in tokens.iter().zip(log_f0).enumerate() {
            self.check_token(tok)?;
            let atom = self.content_atoms.row(tok);
            let mut row = frames.row_mut(t);
            for k in 0..dx {
                row[k] = atom[k] + pitch[k] * f + style[k];
            }
        }
        Ok(frames)
    }

    fn check_token(&self, tok: usize) -> Result<()> {
        if tok >= self.cfg.vocab {
            return Err(Error::TokenOutOfRange {
                token: tok,
                vocab: self.cfg.vocab,
            });
        }
        Ok(())
    }

    pub fn sample_utterance(&self, speaker_id: usize, rng: &mut Rng) -> Result<Utterance> {
        self.speaker(speaker_id)?;
        let t = self.cfg.frames;
        let sd = self.cfg.noise_std;
        let tokens: Vec<usize> = (0..t).map(|_| rng::index(rng, self.cfg.vocab)).collect();
        let mut log_f0 = self.clean_log_f0(speaker_id, &tokens)?;
        for f in &mut log_f0 {
            *f += sd * rng::normal(rng);
        }
        let mut frames = self.clean_frames(speaker_id, &tokens, &log_f0)?;
        frames.mapv_inplace(|x| x + sd * rng::normal(rng));
        Ok(Utterance {
            tokens,
            log_f0,
            frames,
            speaker_id,
        })
    }

    /// Analytic ground-truth conversion: same tokens, target pitch range and timbre, no noise.
    pub fn oracle_convert(&self, utt: &Utterance, target_id: usize) -> Result<Utterance> {
        let log_f0 = self.clean_log_f0(target_id, &utt.tokens)?;
        let frames = self.clean_frames(target_id, &utt.tokens, &log_f0)?;
        Ok(Utterance {
            tokens: utt.tokens.clone(),
            log_f0,
            frames,
            speaker_id: target_id,
        })
    }

    /// Least-squares factor coordinates `[content | pitch | style]` of one frame.
    pub fn factor_coordinates(&self, frame: ArrayView1<f64>) -> Array1<f64> {
        self.factor_pinv.dot(&frame)
    }

    fn check_frames(&self, frames: &ArrayView2<f64>) -> Result<()> {
        if frames.ncols() != self.cfg.feature_dim {
            return Err(Error::Shape(format!(
                "frames have {} features, world has {}",
                frames.ncols(),
                self.cfg.feature_dim
            )));
        }
        Ok(())
    }

    /// Style coordinates recovered from the mean frame. The mean of the
    /// generative equation is still linear in the factors, so the joint
    /// least-squares solve isolates the (constant) style exactly.
    pub fn probe_style(&self, frames: ArrayView2<f64>) -> Result<Vec<f64>> {
        self.check_frames(&frames)?;
        if frames.nrows() == 0 {
            return Err(Error::Precondition("probe_style needs at least one frame".into()));
        }
        if frames.iter().all(|&x| x == 0.0) {
            return Err(Error::Degenerate("all-zero frames carry no style".into()));
        }
        if frames.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: "frames passed to probe_style".into(),
            });
        }
        let mean = frames.mean_axis(Axis(0)).expect("nonempty");
        let coords = self.factor_coordinates(mean.view());
        let off = self.cfg.content_dim + 1;
        Ok(coords.slice(s![off..]).to_vec())
    }

    /// Nearest token per frame after removing the pitch term and the estimated style.
    pub fn probe_content(&self, frames: ArrayView2<f64>, log_f0: &[f64]) -> Result<Vec<usize>> {
        self.check_frames(&frames)?;
        if frames.nrows() != log_f0.len() {
            return Err(Error::Shape(format!(
                "{} frames but {} pitch values",
                frames.nrows(),
                log_f0.len()
            )));
        }
        if frames.nrows() == 0 {
            return Ok(Vec::new());
        }
        let style = Array1::from(self.probe_style(frames)?);
        let style_part = self.mix_style.dot(&style);
        let pitch = self.mix_pitch.column(0);
        let dx = self.cfg.feature_dim;
        let mut residual = vec![0.0; dx];
        let tokens = frames
            .rows()
            .into_iter()
            .zip(log_f0)
            .map(|(row, &f)| {
                for k in 0..dx {
                    residual[k] = row[k] - pitch[k] * f - style_part[k];
                }
                let mut best = (0usize, f64::INFINITY);
                for (v, atom) in self.content_atoms.rows().into_iter().enumerate() {
                    let d: f64 = residual.iter().zip(atom).map(|(r, a)| (r - a) * (r - a)).sum();
                    if d < best.1 {
                        best = (v, d);
                    }
                }
                best.0
            })
            .collect();
        Ok(tokens)
    }

    pub fn to_file(&self) -> ArrayFile {
        let c = &self.cfg;
        let mut f = ArrayFile::new("world");
        f.set_meta("seed", self.seed);
        f.set_meta("vocab", c.vocab);
        f.set_meta("frames", c.frames);
        f.set_meta("style_dim", c.style_dim);
        f.set_meta("content_dim", c.content_dim);
        f.set_meta("feature_dim", c.feature_dim);
        f.set_meta("n_speakers", c.n_speakers);
        f.set_meta("noise_std", c.noise_std);
        f.set_meta("orthogonal_styles", c.orthogonal_styles);
        let v = self.token_contours.len();
        f.insert(
            "token_contours",
            Array2::from_shape_fn((v, 1), |(i, _)| self.token_contours[i]),
        );
        f.insert("token_embeds", self.token_embeds.clone());
        f.insert("mix_content", self.mix_content.clone());
        f.insert("mix_pitch", self.mix_pitch.clone());
        f.insert("mix_style", self.mix_style.clone());
        let n = self.speakers.len();
        f.insert(
            "speaker_style",
            Array2::from_shape_fn((n, c.style_dim), |(i, j)| self.speakers[i].style[j]),
        );
        f.insert(
            "speaker_pitch",
            Array2::from_shape_fn((n, 2), |(i, j)| {
                let s = &self.speakers[i];
                if j == 0 {
                    s.pitch_scale
                } else {
                    s.pitch_offset
                }
            }),
        );
        f
    }

    pub fn from_file(f: &ArrayFile) -> Result<World> {
        f.expect_kind("world")?;
        let cfg = WorldConfig {
            vocab: f.meta_parse("vocab")?,
            frames: f.meta_parse("frames")?,
            style_dim: f.meta_parse("style_dim")?,
            content_dim: f.meta_parse("content_dim")?,
            feature_dim: f.meta_parse("feature_dim")?,
            n_speakers: f.meta_parse("n_speakers")?,
            noise_std: f.meta_parse("noise_std")?,
            orthogonal_styles: f.meta_parse("orthogonal_styles")?,
        };
        let (v, dc, dx, ds, n) = (
            cfg.vocab,
            cfg.content_dim,
            cfg.feature_dim,
            cfg.style_dim,
            cfg.n_speakers,
        );
        let shaped = |name: &str, shape: (usize, usize)| -> Result<Array2<f64>> {
            let a = f.array(name)?;
            if a.dim() != shape {
                return Err(Error::Corrupt(format!(
                    "array `{name}` is {:?}, expected {shape:?}",
                    a.dim()
                )));
            }
            Ok(a.clone())
        };
        let token_contours = shaped("token_contours", (v, 1))?.iter().copied().collect();
        let styles = shaped("speaker_style", (n, ds))?;
        let pitch = shaped("speaker_pitch", (n, 2))?;
        let speakers = (0..n)
            .map(|id| SpeakerSpec {
                id,
                style: styles.row(id).to_vec(),
                pitch_scale: pitch[[id, 0]],
                pitch_offset: pitch[[id, 1]],
            })
            .collect();
        Ok(Self::assemble(
            cfg,
            f.meta_parse("seed")?,
            token_contours,
            shaped("token_embeds", (v, dc))?,
            shaped("mix_content", (dx, dc))?,
            shaped("mix_pitch", (dx, 1))?,
            shaped("mix_style", (dx, ds))?,
            speakers,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world(noise: f64) -> World {
        World::new(
            7,
            WorldConfig {
                noise_std: noise,
                ..WorldConfig::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn invariants_hold_on_default_world() {
        let w = world(0.05);
        assert_eq!(w.n_speakers(), 8);
        assert!(w.min_singular_value() > RANK_TOL);
        for s in &w.speakers {
            let n: f64 = s.style.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
            assert!((0.5..=2.0).contains(&s.pitch_scale));
            assert!((-1.0..=1.0).contains(&s.pitch_offset));
        }
        assert_eq!(w.speakers_in(Domain::Low), vec![0, 1, 2, 3]);
        assert_eq!(w.speakers_in(Domain::High), vec![4, 5, 6, 7]);
    }

    #[test]
    fn construction_is_deterministic() {
        let a = world(0.05);
        let b = world(0.05);
        assert_eq!(a, b);
        assert_eq!(a.to_file().to_text(), b.to_file().to_text());
    }

    #[test]
    fn bad_configs_are_rejected() {
        let cfg = WorldConfig {
            n_speakers: 0,
            ..WorldConfig::default()
        };
        assert!(matches!(World::new(7, cfg), Err(Error::Config { .. })));
        let cfg = WorldConfig {
            vocab: 1,
            ..WorldConfig::default()
        };
        assert!(matches!(World::new(7, cfg), Err(Error::Config { .. })));
    }

    #[test]
    fn too_few_features_is_rank_deficient() {
        // 16 features cannot host 8 + 1 + 8 independent factor columns.
        let cfg = WorldConfig {
            feature_dim: 16,
            ..WorldConfig::default()
        };
        assert!(matches!(
            World::new(7, cfg),
            Err(Error::RankDeficient { attempts: 10, .. })
        ));
    }

    #[test]
    fn noise_free_pitch_follows_generative_equation() {
        let mut w = world(0.0);
        w.speakers[0].pitch_scale = 1.0;
        w.speakers[0].pitch_offset = 0.0;
        w.token_contours[3] = 0.5;
        let utt = Utterance {
            tokens: vec![3, 3],
            log_f0: vec![0.0; 2],
            frames: Array2::zeros((2, w.cfg.feature_dim)),
            speaker_id: 0,
        };
        let clean = w.oracle_convert(&utt, 0).unwrap();
        assert_eq!(clean.log_f0, vec![0.5, 0.5]);
    }

    #[test]
    fn oracle_convert_maps_pitch_range() {
        let mut w = world(0.0);
        w.speakers[1].pitch_scale = 2.0;
        w.speakers[1].pitch_offset = 1.0;
        w.token_contours[0] = 0.5;
        w.token_contours[1] = -0.5;
        let utt = Utterance {
            tokens: vec![0, 1],
            log_f0: vec![0.5, -0.5],
            frames: Array2::zeros((2, w.cfg.feature_dim)),
            speaker_id: 0,
        };
        let out = w.oracle_convert(&utt, 1).unwrap();
        assert_eq!(out.log_f0, vec![2.0, 0.0]);
        assert_eq!(out.speaker_id, 1);
        assert!(matches!(
            w.oracle_convert(&utt, 99),
            Err(Error::InvalidSpeaker { id: 99, .. })
        ));
    }

    #[test]
    fn sampled_shapes_agree() {
        let w = world(0.05);
        let mut rng = rng::seeded(11);
        let u = w.sample_utterance(2, &mut rng).unwrap();
        assert_eq!(u.tokens.len(), 32);
        assert_eq!(u.log_f0.len(), 32);
        assert_eq!(u.frames.dim(), (32, 24));
        assert!(w.sample_utterance(8, &mut rng).is_err());
    }

    #[test]
    fn noise_free_frames_match_naive_generative_sum() {
        let w = world(0.0);
        let mut rng = rng::seeded(3);
        let u = w.sample_utterance(5, &mut rng).unwrap();
        let style = &w.speakers[5].style;
        for t in 0..u.len() {
            for k in 0..w.cfg.feature_dim {
                let mut x = w.mix_pitch[[k, 0]] * u.log_f0[t];
                for j in 0..w.cfg.content_dim {
                    x += w.mix_content[[k, j]] * w.token_embeds[[u.tokens[t], j]];
                }
                for j in 0..w.cfg.style_dim {
                    x += w.mix_style[[k, j]] * style[j];
                }
                assert!((x - u.frames[[t, k]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn probes_reject_bad_input() {
        let w = world(0.05);
        let zeros = Array2::zeros((4, 24));
        assert!(matches!(w.probe_style(zeros.view()), Err(Error::Degenerate(_))));
        let empty = Array2::<f64>::zeros((0, 24));
        assert_eq!(w.probe_content(empty.view(), &[]).unwrap(), Vec::<usize>::new());
        let frames = Array2::ones((3, 24));
        assert!(matches!(
            w.probe_content(frames.view(), &[0.0; 2]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn file_round_trip_preserves_world() {
        let w = world(0.05);
        let text = w.to_file().to_text();
        let back = World::from_file(&ArrayFile::parse(&text).unwrap()).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.to_file().to_text(), text);
    }
}
