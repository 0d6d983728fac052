//! Adam with serializable moment state so that resumed runs continue on
//! the exact trajectory of an uninterrupted one.

use candle_core::{Tensor, Var};

use crate::error::{Error, Result};
use crate::immunizer::checkpoint::TensorEntry;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[Var], lr: f64) -> Result<Self> {
        let zeros = |p: &Var| p.as_tensor().zeros_like();
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(zeros).collect::<candle_core::Result<_>>()?,
            v: params.iter().map(zeros).collect::<candle_core::Result<_>>()?,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update. `grads[i]` of `None` is treated as a zero gradient.
    pub fn step(&mut self, params: &[Var], grads: &[Option<Tensor>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::InvalidArgument("optimizer/parameter count mismatch".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter().enumerate() {
            let g = match &grads[i] {
                Some(g) => g.clone(),
                None => p.as_tensor().zeros_like()?,
            };
            self.m[i] = ((&self.m[i] * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            self.v[i] = ((&self.v[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let mhat = (&self.m[i] / bc1)?;
            let vhat = (&self.v[i] / bc2)?;
            let update = (mhat / (vhat.sqrt()? + self.eps)?)?;
            p.set(&(p.as_tensor() - (update * self.lr)?)?)?;
        }
        Ok(())
    }

    pub(crate) fn to_entries(&self) -> Result<Vec<(TensorEntry, Vec<f64>)>> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (kind, list) in [("m", &self.m), ("v", &self.v)] {
            for (i, t) in list.iter().enumerate() {
                out.push((
                    TensorEntry {
                        name: format!("adam.{kind}.{i}"),
                        shape: t.dims().to_vec(),
                    },
                    t.flatten_all()?.to_vec1::<f64>()?,
                ));
            }
        }
        Ok(out)
    }

    pub(crate) fn restore(
        &mut self,
        t: u64,
        lookup: impl Fn(&str) -> Option<(Vec<usize>, Vec<f64>)>,
    ) -> Result<()> {
        self.t = t;
        for (kind, list) in [("m", &mut self.m), ("v", &mut self.v)] {
            for (i, slot) in list.iter_mut().enumerate() {
                let name = format!("adam.{kind}.{i}");
                let (shape, data) =
                    lookup(&name).ok_or_else(|| Error::Version(format!("checkpoint lacks `{name}`")))?;
                if shape != slot.dims() {
                    return Err(Error::Version(format!("`{name}` has wrong shape")));
                }
                *slot = Tensor::from_vec(data, shape, slot.device())?;
            }
        }
        Ok(())
    }
}
