//! Conditioned per-frame networks: the pitch encoder, the pitch vector
//! field and the frame (mel-analog) vector field, plus the content lookup.
//!
//! All networks are dense SiLU MLPs applied independently to every frame.
//! Inputs are concatenated in a fixed order per role:
//!
//! | role            | input columns                                   | output        |
//! |-----------------|-------------------------------------------------|---------------|
//! | `PitchEncoder`  | content, style, normalized source log-F0        | pitch embed   |
//! | `PitchField`    | z_t, time embedding, style, pitch embed         | 1             |
//! | `MelField`      | x_t, time embedding, style, log-F0, content     | feature dim   |
//! | `Unconditional` | x_t, time embedding                             | state dim     |

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::gradcore::{Bound, ParamSet, Tape, Var};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetRole {
    PitchEncoder,
    PitchField,
    MelField,
    Unconditional,
}

impl NetRole {
    pub fn name(self) -> &'static str {
        match self {
            NetRole::PitchEncoder => "pitch_encoder",
            NetRole::PitchField => "pitch_field",
            NetRole::MelField => "mel_field",
            NetRole::Unconditional => "unconditional",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "pitch_encoder" => NetRole::PitchEncoder,
            "pitch_field" => NetRole::PitchField,
            "mel_field" => NetRole::MelField,
            "unconditional" => NetRole::Unconditional,
            other => return Err(Error::Corrupt(format!("unknown net role `{other}`"))),
        })
    }

    fn is_field(self) -> bool {
        !matches!(self, NetRole::PitchEncoder)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldNetConfig {
    pub role: NetRole,
    /// Width of the flowing state (`z_t` or `x_t`); 0 for the encoder.
    pub state_dim: usize,
    pub time_embed_dim: usize,
    pub style_dim: usize,
    /// Width of the per-frame pitch input (log-F0 or the pitch embedding).
    pub pitch_dim: usize,
    pub content_dim: usize,
    pub hidden_dim: usize,
    /// Number of linear layers, including the output layer.
    pub n_layers: usize,
    pub output_dim: usize,
}

impl FieldNetConfig {
    pub fn pitch_encoder(
        content_dim: usize,
        style_dim: usize,
        embed_dim: usize,
        hidden_dim: usize,
        n_layers: usize,
    ) -> Self {
        Self {
            role: NetRole::PitchEncoder,
            state_dim: 0,
            time_embed_dim: 0,
            style_dim,
            pitch_dim: 1,
            content_dim,
            hidden_dim,
            n_layers,
            output_dim: embed_dim,
        }
    }

    pub fn pitch_field(
        style_dim: usize,
        embed_dim: usize,
        time_embed_dim: usize,
        hidden_dim: usize,
        n_layers: usize,
    ) -> Self {
        Self {
            role: NetRole::PitchField,
            state_dim: 1,
            time_embed_dim,
            style_dim,
            pitch_dim: embed_dim,
            content_dim: 0,
            hidden_dim,
            n_layers,
            output_dim: 1,
        }
    }

    pub fn mel_field(
        feature_dim: usize,
        style_dim: usize,
        content_dim: usize,
        time_embed_dim: usize,
        hidden_dim: usize,
        n_layers: usize,
    ) -> Self {
        Self {
            role: NetRole::MelField,
            state_dim: feature_dim,
            time_embed_dim,
            style_dim,
            pitch_dim: 1,
            content_dim,
            hidden_dim,
            n_layers,
            output_dim: feature_dim,
        }
    }

    pub fn unconditional(state_dim: usize, time_embed_dim: usize, hidden_dim: usize, n_layers: usize) -> Self {
        Self {
            role: NetRole::Unconditional,
            state_dim,
            time_embed_dim,
            style_dim: 0,
            pitch_dim: 0,
            content_dim: 0,
            hidden_dim,
            n_layers,
            output_dim: state_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim + self.time_embed_dim + self.style_dim + self.pitch_dim + self.content_dim
    }

    pub fn validate(&self) -> Result<()> {
        let key = |k: &str| format!("net.{}.{k}", self.role.name());
        let mut required = vec![("hidden_dim", self.hidden_dim), ("output_dim", self.output_dim)];
        match self.role {
            NetRole::PitchEncoder => {
                required.extend([("style_dim", self.style_dim), ("content_dim", self.content_dim)]);
            }
            NetRole::PitchField => required.extend([
                ("time_embed_dim", self.time_embed_dim),
                ("style_dim", self.style_dim),
                ("pitch_dim", self.pitch_dim),
            ]),
            NetRole::MelField => required.extend([
                ("state_dim", self.state_dim),
                ("time_embed_dim", self.time_embed_dim),
                ("style_dim", self.style_dim),
                ("content_dim", self.content_dim),
            ]),
            NetRole::Unconditional => {
                required.extend([("state_dim", self.state_dim), ("time_embed_dim", self.time_embed_dim)])
            }
        }
        for (k, v) in required {
            if v == 0 {
                return Err(Error::config(key(k), "must be >= 1"));
            }
        }
        if self.n_layers < 2 {
            return Err(Error::config(key("n_layers"), "must be >= 2"));
        }
        if self.role.is_field() && self.state_dim != self.output_dim {
            return Err(Error::config(key("output_dim"), "field output must match state width"));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.n_layers);
        let mut fan_in = self.input_dim();
        for l in 0..self.n_layers {
            let out = if l + 1 == self.n_layers {
                self.output_dim
            } else {
                self.hidden_dim
            };
            dims.push((fan_in, out));
            fan_in = out;
        }
        dims
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldNet {
    pub config: FieldNetConfig,
    pub params: ParamSet,
}

fn w_name(l: usize) -> String {
    format!("l{l}.w")
}

fn b_name(l: usize) -> String {
    format!("l{l}.b")
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

impl FieldNet {
    /// Fan-in scaled Gaussian weights, zero biases. Field roles get a zero
    /// output layer so the initial vector field is identically zero.
    pub fn init(config: FieldNetConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let dims = config.layer_dims();
        for (l, &(fan_in, out)) in dims.iter().enumerate() {
            let last = l + 1 == dims.len();
            let w = if last && config.role.is_field() {
                Array2::zeros((fan_in, out))
            } else {
                rng::normal_matrix(rng, fan_in, out) * (1.0 / (fan_in as f64).sqrt())
            };
            params.insert(w_name(l), w)?;
            params.insert(b_name(l), Array2::zeros((1, out)))?;
        }
        Ok(Self { config, params })
    }

    pub fn zeros(config: FieldNetConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        for (l, (fan_in, out)) in config.layer_dims().into_iter().enumerate() {
            params.insert(w_name(l), Array2::zeros((fan_in, out)))?;
            params.insert(b_name(l), Array2::zeros((1, out)))?;
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: FieldNetConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let expected = Self::zeros(config)?;
        if !expected.params.same_layout(&params) {
            return Err(Error::Corrupt(format!(
                "parameters do not match the {} layout",
                config.role.name()
            )));
        }
        Ok(Self { config, params })
    }

    /// Zeroes the output layer, making the network the zero map.
    pub fn zero_output_layer(&mut self) {
        let last = self.config.n_layers - 1;
        for name in [w_name(last), b_name(last)] {
            if let Some(p) = self.params.get_mut(&name) {
                p.fill(0.0);
            }
        }
    }

    fn check_input_width(&self, width: usize) {
        assert_eq!(
            width,
            self.config.input_dim(),
            "{} input width mismatch",
            self.config.role.name()
        );
    }

    /// MLP over already-concatenated inputs, recorded on the tape.
    pub fn apply(&self, tape: &mut Tape, bound: &Bound, inputs: &[Var]) -> Var {
        let mut h = if inputs.len() == 1 {
            inputs[0]
        } else {
            tape.concat_cols(inputs)
        };
        self.check_input_width(tape.value(h).ncols());
        for l in 0..self.config.n_layers {
            let z = tape.matmul(h, bound.var(&w_name(l)));
            let z = tape.add_row(z, bound.var(&b_name(l)));
            h = if l + 1 < self.config.n_layers { tape.silu(z) } else { z };
        }
        h
    }

    /// Plain forward pass without a tape; numerically identical to [`Self::apply`].
    pub fn eval(&self, inputs: &[ArrayView2<f64>]) -> Result<Array2<f64>> {
        let mut h = ndarray::concatenate(Axis(1), inputs)
            .map_err(|e| Error::Shape(format!("{} inputs: {e}", self.config.role.name())))?;
        if h.ncols() != self.config.input_dim() {
            return Err(Error::Shape(format!(
                "{} expects {} input columns, got {}",
                self.config.role.name(),
                self.config.input_dim(),
                h.ncols()
            )));
        }
        for l in 0..self.config.n_layers {
            let w = self.params.get(&w_name(l)).expect("layer weight");
            let b = self.params.get(&b_name(l)).expect("layer bias");
            let mut z = h.dot(w);
            z = &z + b;
            if l + 1 < self.config.n_layers {
                z.mapv_inplace(silu);
            }
            h = z;
        }
        if h.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("{} output", self.config.role.name()),
            });
        }
        Ok(h)
    }
}

/// Sinusoidal features of `t` at geometrically spaced frequencies in `[1, 64]`.
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    let freq = |k: usize| {
        if half <= 1 {
            1.0
        } else {
            64f64.powf(k as f64 / (half - 1) as f64)
        }
    };
    out.extend((0..half).map(|k| (freq(k) * t).sin()));
    out.extend((0..half).map(|k| (freq(k) * t).cos()));
    if dim % 2 == 1 {
        out.push(t);
    }
    out
}

/// Time embedding for each row.
pub fn time_rows(t: &[f64], dim: usize) -> Array2<f64> {
    let mut out = Array2::zeros((t.len(), dim));
    let mut cache: Option<(f64, Vec<f64>)> = None;
    for (r, &tr) in t.iter().enumerate() {
        let emb = match &cache {
            Some((tc, e)) if *tc == tr => e.clone(),
            _ => {
                let e = time_embedding(tr, dim);
                cache = Some((tr, e.clone()));
                e
            }
        };
        out.row_mut(r).assign(&ndarray::ArrayView1::from(&emb));
    }
    out
}

/// Repeats one row vector `rows` times.
pub fn repeat_row(v: &[f64], rows: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, v.len()), |(_, j)| v[j])
}

pub fn column(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_fn((v.len(), 1), |(i, _)| v[i])
}

/// Per-frame embedding lookup. The frame rate already matches, so no upsampling.
pub fn content_encode(table: &Array2<f64>, tokens: &[usize]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((tokens.len(), table.ncols()));
    for (r, &tok) in tokens.iter().enumerate() {
        if tok >= table.nrows() {
            return Err(Error::TokenOutOfRange {
                token: tok,
                vocab: table.nrows(),
            });
        }
        out.row_mut(r).assign(&table.row(tok));
    }
    Ok(out)
}

/// Zero-mean, unit-variance contour (mean removal only if the contour is flat).
pub fn normalize_contour(f: &[f64]) -> Vec<f64> {
    if f.is_empty() {
        return Vec::new();
    }
    let n = f.len() as f64;
    let mean = f.iter().sum::<f64>() / n;
    let var = f.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    let scale = if sd > 1e-8 { 1.0 / sd } else { 1.0 };
    f.iter().map(|x| (x - mean) * scale).collect()
}

/// Normalizes each consecutive item of `item_len` values independently.
pub fn normalize_items(f: &[f64], item_len: usize) -> Array2<f64> {
    let v: Vec<f64> = f.chunks(item_len.max(1)).flat_map(normalize_contour).collect();
    column(&v)
}

fn check_rows(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Shape(format!("{what}: expected {expected} rows, got {got}")));
    }
    Ok(())
}

pub fn pitch_encoder_forward(
    net: &FieldNet,
    content_enc: &Array2<f64>,
    style: &[f64],
    src_logf0: &[f64],
) -> Result<Array2<f64>> {
    let t = content_enc.nrows();
    check_rows("source log-F0", t, src_logf0.len())?;
    let style = repeat_row(style, t);
    let f = column(&normalize_contour(src_logf0));
    net.eval(&[content_enc.view(), style.view(), f.view()])
}

pub fn pitch_field_forward(
    net: &FieldNet,
    z_t: &Array2<f64>,
    t: f64,
    style: &[f64],
    pitch_cond: &Array2<f64>,
) -> Result<Array2<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Precondition(format!("time {t} outside [0, 1]")));
    }
    let rows = z_t.nrows();
    check_rows("pitch conditioning", rows, pitch_cond.nrows())?;
    let temb = repeat_row(&time_embedding(t, net.config.time_embed_dim), rows);
    let style = repeat_row(style, rows);
    net.eval(&[z_t.view(), temb.view(), style.view(), pitch_cond.view()])
}

pub fn mel_field_forward(
    net: &FieldNet,
    x_t: &Array2<f64>,
    t: f64,
    style: &[f64],
    f_r: &[f64],
    content_enc: &Array2<f64>,
) -> Result<Array2<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Precondition(format!("time {t} outside [0, 1]")));
    }
    let rows = x_t.nrows();
    check_rows("log-F0 conditioning", rows, f_r.len())?;
    check_rows("content conditioning", rows, content_enc.nrows())?;
    let temb = repeat_row(&time_embedding(t, net.config.time_embed_dim), rows);
    let style = repeat_row(style, rows);
    let f = column(f_r);
    net.eval(&[x_t.view(), temb.view(), style.view(), f.view(), content_enc.view()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::{finite_difference, value_and_grad};
    use ndarray::array;

    fn small_mel() -> FieldNetConfig {
        FieldNetConfig::mel_field(3, 2, 2, 4, 5, 3)
    }

    #[test]
    fn content_lookup() {
        let table = array![[1.0, 2.0], [3.0, 4.0]];
        let c = content_encode(&table, &[0, 0]).unwrap();
        assert_eq!(c, array![[1.0, 2.0], [1.0, 2.0]]);
        assert_eq!(content_encode(&table, &[]).unwrap().dim(), (0, 2));
        assert!(matches!(
            content_encode(&table, &[2]),
            Err(Error::TokenOutOfRange { token: 2, vocab: 2 })
        ));
    }

    #[test]
    fn zero_encoder_outputs_zero() {
        let cfg = FieldNetConfig::pitch_encoder(2, 2, 3, 4, 3);
        let net = FieldNet::zeros(cfg).unwrap();
        let out = pitch_encoder_forward(
            &net,
            &array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]],
            &[0.6, 0.8],
            &[0.1, 0.2, 0.4],
        )
        .unwrap();
        assert_eq!(out, Array2::zeros((3, 3)));
    }

    #[test]
    fn fresh_fields_are_zero_and_shape_preserving() {
        let mut rng = rng::seeded(2);
        let net = FieldNet::init(small_mel(), &mut rng).unwrap();
        let x = rng::normal_matrix(&mut rng, 4, 3);
        let c = rng::normal_matrix(&mut rng, 4, 2);
        let v = mel_field_forward(&net, &x, 0.3, &[1.0, 0.0], &[0.1; 4], &c).unwrap();
        assert_eq!(v, Array2::zeros((4, 3)));

        let pcfg = FieldNetConfig::pitch_field(2, 3, 4, 5, 2);
        let pnet = FieldNet::init(pcfg, &mut rng).unwrap();
        let z = rng::normal_matrix(&mut rng, 7, 1);
        let pc = rng::normal_matrix(&mut rng, 7, 3);
        let v = pitch_field_forward(&pnet, &z, 1.0, &[0.0, 1.0], &pc).unwrap();
        assert_eq!(v.dim(), (7, 1));
        assert!(pitch_field_forward(&pnet, &z, 1.5, &[0.0, 1.0], &pc).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_mel();
        cfg.n_layers = 1;
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
        let mut cfg = small_mel();
        cfg.hidden_dim = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn tape_and_plain_forward_agree_bitwise() {
        let mut rng = rng::seeded(4);
        let mut net = FieldNet::init(small_mel(), &mut rng).unwrap();
        for (_, p) in net.params.iter_mut() {
            p.mapv_inplace(|_| 0.3 * rng::normal(&mut rng));
        }
        let x = rng::normal_matrix(&mut rng, 5, net.config.input_dim());
        let plain = net.eval(&[x.view()]).unwrap();
        let mut tape = Tape::new();
        let b = tape.bind(&net.params);
        let xv = tape.constant(x);
        let out = net.apply(&mut tape, &b, &[xv]);
        assert_eq!(tape.value(out), &plain);
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut rng = rng::seeded(8);
        let mut net = FieldNet::init(small_mel(), &mut rng).unwrap();
        for (_, p) in net.params.iter_mut() {
            p.mapv_inplace(|_| 0.5 * rng::normal(&mut rng));
        }
        let x = rng::normal_matrix(&mut rng, 6, net.config.input_dim());
        let y = rng::normal_matrix(&mut rng, 6, 3);
        let loss_of = |p: &ParamSet| {
            let n = FieldNet::from_params(net.config, p.clone())?;
            let out = n.eval(&[x.view()])?;
            Ok((&out - &y).mapv(|e| e * e).mean().unwrap())
        };
        let (_, g) = value_and_grad::<_, Error>(&net.params, |tape, b| {
            let xv = tape.constant(x.clone());
            let out = net.apply(tape, b, &[xv]);
            let yv = tape.constant(y.clone());
            let d = tape.sub(out, yv);
            Ok(tape.mean_sq(d))
        })
        .unwrap();
        let fd = finite_difference(&net.params, 1e-5, loss_of).unwrap();
        for ((name, a), (_, b)) in g.iter().zip(fd.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                let denom = x.abs().max(y.abs()).max(1e-6);
                assert!((x - y).abs() / denom < 1e-4, "{name}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn normalization_handles_flat_contours() {
        let n = normalize_contour(&[2.0, 2.0, 2.0]);
        assert_eq!(n, vec![0.0, 0.0, 0.0]);
        let n = normalize_contour(&[1.0, 3.0]);
        assert_eq!(n, vec![-1.0, 1.0]);
    }

    #[test]
    fn time_embedding_shape() {
        assert_eq!(time_embedding(0.5, 16).len(), 16);
        assert_eq!(time_embedding(0.5, 5).len(), 5);
        let rows = time_rows(&[0.1, 0.1, 0.7], 4);
        assert_eq!(rows.row(0), rows.row(1));
        assert_ne!(rows.row(0), rows.row(2));
    }
}
