//! OT-CFM mathematics: the straight-line probability path, its constant
//! target field, the regression loss, and fixed-step ODE samplers.
//!
//! Path and target for noise `x0`, data `x1` and `t ∈ [0, 1]`:
//!
//! ```text
//! x_t = (1 - (1 - sigma) t) x0 + t x1
//! v   = x1 - (1 - sigma) x0
//! ```

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const DEFAULT_SIGMA: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Solver {
    Euler,
    Midpoint,
}

impl fmt::Display for Solver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Solver::Euler => "euler",
            Solver::Midpoint => "midpoint",
        })
    }
}

impl FromStr for Solver {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "euler" => Ok(Solver::Euler),
            "midpoint" => Ok(Solver::Midpoint),
            other => Err(format!("unknown solver `{other}` (euler|midpoint)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowHyper {
    pub sigma: f64,
    pub solver: Solver,
    pub n_steps: usize,
}

impl Default for FlowHyper {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            solver: Solver::Euler,
            n_steps: 10,
        }
    }
}

impl FlowHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma < 1.0) {
            return Err(Error::config("flow.sigma", "must satisfy 0 <= sigma < 1"));
        }
        if self.n_steps == 0 {
            return Err(Error::config("flow.n_steps", "must be >= 1"));
        }
        Ok(())
    }
}

fn same_shape(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Precondition(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

pub fn ot_path(x0: &Array2<f64>, x1: &Array2<f64>, t: f64, sigma: f64) -> Result<Array2<f64>> {
    same_shape(x0, x1)?;
    check_time(t)?;
    let a = 1.0 - (1.0 - sigma) * t;
    Ok(Zip::from(x0).and(x1).map_collect(|&n, &d| a * n + t * d))
}

pub fn target_field(x0: &Array2<f64>, x1: &Array2<f64>, sigma: f64) -> Result<Array2<f64>> {
    same_shape(x0, x1)?;
    let c = 1.0 - sigma;
    Ok(Zip::from(x0).and(x1).map_collect(|&n, &d| d - c * n))
}

/// One CFM training draw over a stack of items. Rows belonging to the same
/// item (consecutive runs of `item_len` rows) share one time value.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub x0: Array2<f64>,
    pub x1: Array2<f64>,
    /// Time per row.
    pub t: Vec<f64>,
    pub x_t: Array2<f64>,
    pub v_target: Array2<f64>,
}

impl FlowSample {
    /// Draws one time per item (uniform on `[0, 1]`), then the noise endpoint
    /// row-major from a standard normal.
    pub fn draw(x1: Array2<f64>, item_len: usize, sigma: f64, rng: &mut Rng) -> Result<Self> {
        let rows = x1.nrows();
        if item_len == 0 || rows % item_len != 0 {
            return Err(Error::Shape(format!(
                "{rows} rows do not split into items of {item_len}"
            )));
        }
        let item_t: Vec<f64> = (0..rows / item_len).map(|_| rng::uniform(rng)).collect();
        let t = item_t
            .iter()
            .flat_map(|&ti| std::iter::repeat_n(ti, item_len))
            .collect();
        let x0 = rng::normal_matrix(rng, rows, x1.ncols());
        Self::from_parts(x0, x1, t, sigma)
    }

    pub fn from_parts(x0: Array2<f64>, x1: Array2<f64>, t: Vec<f64>, sigma: f64) -> Result<Self> {
        same_shape(&x0, &x1)?;
        if t.len() != x1.nrows() {
            return Err(Error::Shape(format!("{} time values for {} rows", t.len(), x1.nrows())));
        }
        let c = 1.0 - sigma;
        let mut x_t = Array2::zeros(x1.dim());
        for (r, &tr) in t.iter().enumerate() {
            check_time(tr)?;
            let a = 1.0 - c * tr;
            for k in 0..x1.ncols() {
                x_t[[r, k]] = a * x0[[r, k]] + tr * x1[[r, k]];
            }
        }
        let v_target = target_field(&x0, &x1, sigma)?;
        Ok(Self {
            x0,
            x1,
            t,
            x_t,
            v_target,
        })
    }
}

/// Mean over elements of the squared difference.
pub fn mean_sq_error(pred: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    same_shape(pred, target)?;
    if pred.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            what: "field prediction".into(),
        });
    }
    let n = pred.len().max(1) as f64;
    Ok(Zip::from(pred)
        .and(target)
        .fold(0.0, |acc, &p, &q| acc + (p - q) * (p - q))
        / n)
}

/// CFM regression loss treating `x1` as a single data item.
pub fn cfm_loss<F>(field: F, x1: &Array2<f64>, sigma: f64, rng: &mut Rng) -> Result<f64>
where
    F: FnMut(&Array2<f64>, &[f64]) -> Result<Array2<f64>>,
{
    let rows = x1.nrows().max(1);
    cfm_loss_batched(field, x1, rows, sigma, rng)
}

/// CFM regression loss over a stack of items of `item_len` rows each.
pub fn cfm_loss_batched<F>(mut field: F, x1: &Array2<f64>, item_len: usize, sigma: f64, rng: &mut Rng) -> Result<f64>
where
    F: FnMut(&Array2<f64>, &[f64]) -> Result<Array2<f64>>,
{
    let sample = FlowSample::draw(x1.clone(), item_len, sigma, rng)?;
    let pred = field(&sample.x_t, &sample.t)?;
    mean_sq_error(&pred, &sample.v_target)
}

/// Integrates `dx/dt = field(x, t)` from 0 to 1 on a uniform grid.
pub fn ode_sample<F>(mut field: F, x0: Array2<f64>, hyper: &FlowHyper) -> Result<Array2<f64>>
where
    F: FnMut(&Array2<f64>, f64) -> Result<Array2<f64>>,
{
    if hyper.n_steps == 0 {
        return Err(Error::Precondition("n_steps must be >= 1".into()));
    }
    let h = 1.0 / hyper.n_steps as f64;
    let mut x = x0;
    for step in 0..hyper.n_steps {
        let t = step as f64 * h;
        let v = match hyper.solver {
            Solver::Euler => field(&x, t)?,
            Solver::Midpoint => {
                let k1 = field(&x, t)?;
                let mid = &x + &(k1 * (0.5 * h));
                field(&mid, t + 0.5 * h)?
            }
        };
        if v.dim() != x.dim() {
            return Err(Error::Shape(format!(
                "field returned {:?} for state {:?}",
                v.dim(),
                x.dim()
            )));
        }
        x.scaled_add(h, &v);
        if x.iter().any(|e| !e.is_finite()) {
            return Err(Error::SolverDiverged { step });
        }
    }
    Ok(x)
}
