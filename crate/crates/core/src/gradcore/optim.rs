use crate::arrayfile::ArrayFile;
use crate::error::{Error, Result};

use super::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Linear warmup from `lr / warmup` to `lr` over the first `warmup` steps.
pub fn warmup_lr(base_lr: f64, step: u64, warmup: u64) -> f64 {
    if warmup == 0 {
        return base_lr;
    }
    base_lr * ((step + 1) as f64 / warmup as f64).min(1.0)
}

/// First and second moments mirroring a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub step_count: u64,
}

impl OptState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step_count: 0,
        }
    }

    /// One bias-corrected Adam update, in place. `hyper.lr` is used as given;
    /// schedules are applied by the caller.
    pub fn adam_step(&mut self, params: &mut ParamSet, grads: &ParamSet, hyper: &AdamHyper) -> Result<()> {
        params.check_layout(grads, "gradient")?;
        params.check_layout(&self.m, "optimizer state")?;
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - hyper.beta1.powi(t);
        let bc2 = 1.0 - hyper.beta2.powi(t);
        let AdamHyper { lr, beta1, beta2, eps } = *hyper;
        for (((_, p), (_, g)), ((_, m), (_, v))) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= lr * mh / (vh.sqrt() + eps);
            });
        }
        Ok(())
    }

    pub fn write_into(&self, file: &mut ArrayFile, prefix: &str) {
        file.set_meta(format!("{prefix}step_count"), self.step_count);
        self.m.write_into(file, &format!("{prefix}m."));
        self.v.write_into(file, &format!("{prefix}v."));
    }

    pub fn read_from(file: &ArrayFile, prefix: &str, params: &ParamSet) -> Result<Self> {
        let state = Self {
            m: ParamSet::read_from(file, &format!("{prefix}m.")),
            v: ParamSet::read_from(file, &format!("{prefix}v.")),
            step_count: file.meta_parse(&format!("{prefix}step_count"))?,
        };
        if !params.same_layout(&state.m) || !params.same_layout(&state.v) {
            return Err(Error::Corrupt(format!(
                "optimizer state `{prefix}` does not match parameters"
            )));
        }
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn scalar_set(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", array![[v]]).unwrap();
        p
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // m1 = 0.1 g, v1 = 0.001 g^2; bias-corrected m̂ = g, v̂ = g^2,
        // so Δw = -lr * g / (|g| + eps).
        let mut p = scalar_set(0.0);
        let g = scalar_set(1.0);
        let mut st = OptState::new(&p);
        let hyper = AdamHyper {
            lr: 0.1,
            ..AdamHyper::default()
        };
        st.adam_step(&mut p, &g, &hyper).unwrap();
        let expected = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p.get("w").unwrap()[[0, 0]] - expected).abs() < 1e-15);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = scalar_set(0.5);
        let mut st = OptState::new(&p);
        st.m.set("w", array![[0.2]]).unwrap();
        st.v.set("w", array![[0.4]]).unwrap();
        st.step_count = 3;
        let mut hyper = AdamHyper::default();
        hyper.lr = 0.0;
        st.adam_step(&mut p, &scalar_set(0.0), &hyper).unwrap();
        assert_eq!(p.get("w").unwrap()[[0, 0]], 0.5);
        assert!((st.m.get("w").unwrap()[[0, 0]] - 0.18).abs() < 1e-15);
        assert!((st.v.get("w").unwrap()[[0, 0]] - 0.4 * 0.999).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_with_nonzero_lr_keeps_params_from_zero_state() {
        let mut p = scalar_set(0.5);
        let mut st = OptState::new(&p);
        st.adam_step(&mut p, &scalar_set(0.0), &AdamHyper::default()).unwrap();
        assert_eq!(p.get("w").unwrap()[[0, 0]], 0.5);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = scalar_set(0.0);
        let mut g = ParamSet::new();
        g.insert("w", array![[1.0, 2.0]]).unwrap();
        let mut st = OptState::new(&p);
        assert!(matches!(
            st.adam_step(&mut p, &g, &AdamHyper::default()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn warmup_is_linear_then_flat() {
        assert!((warmup_lr(1e-3, 0, 10) - 1e-4).abs() < 1e-18);
        assert!((warmup_lr(1e-3, 9, 10) - 1e-3).abs() < 1e-18);
        assert_eq!(warmup_lr(1e-3, 1000, 10), 1e-3);
        assert_eq!(warmup_lr(1e-3, 0, 0), 1e-3);
    }
}
