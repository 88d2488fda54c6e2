//! Momentum SGD with per-entry gradient masks.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-entry trainability of one parameter tensor: `true` entries move.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradientMask {
    shape: Vec<usize>,
    open: Vec<bool>,
}

impl GradientMask {
    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, false)
    }

    fn filled(shape: &[usize], v: bool) -> Self {
        Self {
            shape: shape.to_vec(),
            open: vec![v; shape.iter().product()],
        }
    }

    /// Reads a 0/1 tensor; any other value is rejected.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let open = t
            .data()
            .iter()
            .map(|&v| {
                if v == T::one() {
                    Ok(true)
                } else if v == T::zero() {
                    Ok(false)
                } else {
                    Err(invalid(format!("mask entry {v} is not 0 or 1")))
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            shape: t.shape().to_vec(),
            open,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn is_open(&self, flat: usize) -> bool {
        self.open[flat]
    }

    pub fn set(&mut self, flat: usize, open: bool) {
        self.open[flat] = open;
    }

    /// Opens or closes the rectangular block `rows × cols` of a matrix mask.
    pub fn set_block(&mut self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, open: bool) {
        let width = self.shape.get(1).copied().unwrap_or(1);
        for r in rows {
            for c in cols.clone() {
                self.open[r * width + c] = open;
            }
        }
    }

    /// Opens or closes whole rows (for a vector: entries).
    pub fn set_rows(&mut self, rows: std::ops::Range<usize>, open: bool) {
        let width = self.shape.get(1).copied().unwrap_or(1);
        for r in rows {
            for c in 0..width {
                self.open[r * width + c] = open;
            }
        }
    }

    pub fn open_count(&self) -> usize {
        self.open.iter().filter(|&&o| o).count()
    }

    pub fn is_frozen(&self) -> bool {
        self.open_count() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        self.open.iter().copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Decoupled weight decay applied to unmasked entries.
    pub l2_factor: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            l2_factor: 0.01,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum must lie in [0, 1)"));
        }
        if !(self.l2_factor >= 0.0 && self.l2_factor.is_finite()) {
            return Err(invalid("l2_factor must be non-negative"));
        }
        Ok(())
    }
}

/// Optimizer state: one velocity buffer per parameter tensor.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    cfg: SgdConfig,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(cfg: SgdConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            velocity: Vec::new(),
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    /// One update over all parameters.
    ///
    /// Entries whose mask is closed are never written, nor is their velocity.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], masks: &[GradientMask]) -> Result<()> {
        let grads: Vec<Option<&Tensor<T>>> = grads.iter().map(Some).collect();
        self.step_partial(params, &grads, masks)
    }

    /// Like [`Sgd::step`], with `None` standing for an all-zero gradient.
    pub fn step_partial(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[Option<&Tensor<T>>],
        masks: &[GradientMask],
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != masks.len() {
            return Err(shape_err(
                "sgd_step",
                format!(
                    "{} params, {} grads, {} masks",
                    params.len(),
                    grads.len(),
                    masks.len()
                ),
            ));
        }
        for (i, ((p, g), m)) in params.iter().zip(grads).zip(masks).enumerate() {
            let grad_ok = g.is_none_or(|g| g.shape() == p.shape());
            if !grad_ok || p.shape() != m.shape() {
                return Err(shape_err(
                    "sgd_step",
                    format!(
                        "parameter {i}: param {:?}, grad {:?}, mask {:?}",
                        p.shape(),
                        g.map(|g| g.shape()),
                        m.shape()
                    ),
                ));
            }
        }
        if self.velocity.len() != params.len()
            || self.velocity.iter().zip(params.iter()).any(|(v, p)| v.shape() != p.shape())
        {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        let lr = T::lit(self.cfg.learning_rate);
        let mu = T::lit(self.cfg.momentum);
        let decay = T::lit(self.cfg.learning_rate * self.cfg.l2_factor);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(masks)
            .zip(self.velocity.iter_mut())
        {
            if m.is_frozen() {
                continue;
            }
            let pd = p.data_mut();
            let vd = v.data_mut();
            for (k, open) in m.iter().enumerate() {
                if !open {
                    continue;
                }
                let gk = g.map_or(T::zero(), |g| g.data()[k]);
                vd[k] = mu * vd[k] + gk;
                pd[k] = pd[k] - lr * vd[k] - decay * pd[k];
            }
        }
        Ok(())
    }
}

/// Single masked update with fresh optimizer state.
pub fn sgd_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    masks: &[GradientMask],
    cfg: SgdConfig,
) -> Result<()> {
    Sgd::new(cfg)?.step(params, grads, masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults() {
        let c = SgdConfig::default();
        assert_eq!((c.learning_rate, c.momentum, c.l2_factor), (0.01, 0.9, 0.01));
    }

    #[test]
    fn fully_frozen_mask_leaves_params() {
        let mut w = Tensor::<f64>::from_fn(&[2, 2], |i| i as f64 + 0.5);
        let before = w.clone();
        let g = Tensor::full(&[2, 2], 3.0);
        sgd_step(&mut [&mut w], &[g], &[GradientMask::zeros(&[2, 2])], SgdConfig::default()).unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn plain_step() {
        let mut w = Tensor::<f64>::scalar(0.0);
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            l2_factor: 0.0,
        };
        sgd_step(&mut [&mut w], &[Tensor::scalar(1.0)], &[GradientMask::ones(&[1])], cfg).unwrap();
        assert_eq!(w.item(), -0.1);
    }

    #[test]
    fn two_momentum_steps_follow_recursion() {
        let cfg = SgdConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            l2_factor: 0.01,
        };
        let (g1, g2) = (0.4, -1.3);
        // hand-rolled recursion
        let mut w_ref = 2.0_f64;
        let mut v = 0.0;
        for g in [g1, g2] {
            v = 0.9 * v + g;
            w_ref = w_ref - 0.05 * v - 0.05 * 0.01 * w_ref;
        }
        let mut opt = Sgd::new(cfg).unwrap();
        let mut w = Tensor::<f64>::scalar(2.0);
        let mask = [GradientMask::ones(&[1])];
        opt.step(&mut [&mut w], &[Tensor::scalar(g1)], &mask).unwrap();
        opt.step(&mut [&mut w], &[Tensor::scalar(g2)], &mask).unwrap();
        assert_eq!(w.item(), w_ref);
        assert_eq!(opt.velocity()[0].item(), 0.9 * g1 + g2);
    }

    #[test]
    fn rejects_bad_shapes_and_values() {
        let mut w = Tensor::<f64>::zeros(&[2]);
        let r = sgd_step(
            &mut [&mut w],
            &[Tensor::zeros(&[3])],
            &[GradientMask::ones(&[2])],
            SgdConfig::default(),
        );
        assert!(r.is_err());
        let bad = Tensor::<f64>::new(vec![2], vec![1.0, 0.5]).unwrap();
        assert!(GradientMask::from_tensor(&bad).is_err());
        assert!(SgdConfig { momentum: 1.0, ..SgdConfig::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn closed_entries_never_move(
            init in proptest::collection::vec(-5.0f64..5.0, 6),
            grads in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 6), 1..20),
            open in proptest::collection::vec(any::<bool>(), 6),
        ) {
            let mut w = Tensor::new(vec![2, 3], init.clone()).unwrap();
            let mut mask = GradientMask::zeros(&[2, 3]);
            for (k, &o) in open.iter().enumerate() { mask.set(k, o); }
            let mut opt = Sgd::new(SgdConfig::default()).unwrap();
            for g in grads {
                let g = Tensor::new(vec![2, 3], g).unwrap();
                opt.step(&mut [&mut w], &[g], std::slice::from_ref(&mask)).unwrap();
            }
            for k in 0..6 {
                if !open[k] {
                    prop_assert_eq!(w.data()[k].to_bits(), init[k].to_bits());
                    prop_assert_eq!(opt.velocity()[0].data()[k], 0.0);
                }
            }
        }
    }
}
