//! Minimal reverse-mode tape over dense float64 matrices.
//!
//! Every value is a 2-D array; scalars are `1 × 1`. Nodes are appended in
//! evaluation order, so a reverse sweep over the node list is a valid
//! topological order for backpropagation.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis, Zip};

use super::params::ParamSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    ConcatCols(Vec<Var>),
    MeanSq(Var),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Parameters of one [`ParamSet`] bound as leaves on a tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` is not bound on this tape"),
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient for every parameter of `bound`; parameters the loss never
    /// touched get zeros.
    pub fn of(&self, bound: &Bound, params: &ParamSet) -> ParamSet {
        let mut out = params.zeros_like();
        for (name, slot) in out.iter_mut() {
            let var = bound.var(name);
            if let Some(g) = &self.grads[var.0] {
                slot.assign(g);
            }
        }
        out
    }

    pub fn get(&self, var: Var) -> Option<&Array2<f64>> {
        self.grads[var.0].as_ref()
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn bind(&mut self, params: &ParamSet) -> Bound {
        let vars = params
            .iter()
            .map(|(name, value)| (name.to_string(), self.leaf(value.clone())))
            .collect();
        Bound { vars }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    /// `a + row`, broadcasting a `1 × m` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(silu);
        let rg = self.rg(a);
        self.push(value, Op::Silu(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let rg = parts.iter().any(|v| self.rg(*v));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Mean of squared entries, as a `1 × 1` scalar.
    pub fn mean_sq(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.len().max(1) as f64;
        let v = x.iter().map(|e| e * e).sum::<f64>() / n;
        let rg = self.rg(a);
        self.push(Array2::from_elem((1, 1), v), Op::MeanSq(a), rg)
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Var {
        let mut acc: Option<Var> = None;
        for &(w, v) in terms {
            let term = self.scale(v, w);
            acc = Some(match acc {
                None => term,
                Some(prev) => self.add(prev, term),
            });
        }
        acc.unwrap_or_else(|| self.constant(Array2::zeros((1, 1))))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_val = self.value(output);
        if out_val.dim() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a 1x1 output, got {:?}",
                out_val.dim()
            )));
        }
        let mut grads: Vec<Option<Array2<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[output.0] = Some(Array2::from_elem((1, 1), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, -&g);
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *row, gr);
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, f) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g * *f);
                    }
                }
                Op::Silu(a) => {
                    if self.rg(*a) {
                        let mut ga = g;
                        Zip::from(&mut ga)
                            .and(self.value(*a))
                            .for_each(|gi, &x| *gi *= silu_grad(x));
                        accumulate(&mut grads, *a, ga);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        if self.rg(*p) {
                            let gp = g.slice(s![.., col..col + w]).to_owned();
                            accumulate(&mut grads, *p, gp);
                        }
                        col += w;
                    }
                }
                Op::MeanSq(a) => {
                    if self.rg(*a) {
                        let x = self.value(*a);
                        let c = 2.0 * g[[0, 0]] / x.len().max(1) as f64;
                        accumulate(&mut grads, *a, x * c);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn concat_and_broadcast_gradients() {
        let mut tape = Tape::new();
        let a = tape.leaf(array![[1.0], [2.0]]);
        let b = tape.leaf(array![[3.0], [4.0]]);
        let bias = tape.leaf(array![[0.5, -0.5]]);
        let c = tape.concat_cols(&[a, b]);
        let d = tape.add_row(c, bias);
        let l = tape.mean_sq(d);
        let g = tape.backward(l).unwrap();
        // d = [[1.5, 2.5], [2.5, 3.5]]; dl/dd = d / 2
        assert_eq!(g.get(a).unwrap(), &array![[0.75], [1.25]]);
        assert_eq!(g.get(b).unwrap(), &array![[1.25], [1.75]]);
        assert_eq!(g.get(bias).unwrap(), &array![[2.0, 3.0]]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(array![[1.0, 2.0]]);
        let w = tape.leaf(array![[1.0], [1.0]]);
        let y = tape.matmul(x, w);
        let l = tape.mean_sq(y);
        let g = tape.backward(l).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.get(w).unwrap(), &array![[6.0], [12.0]]);
    }
}
