//! Named trainable parameters and the Adam optimizer state.
//!
//! Parameters live outside any computation graph; each training step binds
//! them into a fresh [`crate::autodiff::Graph`] as gradient-tracked leaves,
//! runs backward, then applies one Adam update. Names are stable and unique:
//! they key the checkpoint format.

use ndarray::Array2;

use crate::autodiff::{Graph, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
    /// Adam first/second moment estimates, same shape as `value`.
    pub m: Array2<f64>,
    pub v: Array2<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    /// Adam step count (number of optimizer updates applied).
    pub step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Array2<f64>) -> ParamId {
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name '{name}'"
        );
        let shape = value.raw_dim();
        self.params.push(Param {
            name: name.to_string(),
            value,
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.params[id.0].value
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Binds the parameter into a graph as a gradient-tracked leaf.
    pub fn bind(&self, g: &mut Graph, id: ParamId) -> NodeId {
        g.leaf(self.params[id.0].value.clone(), true)
    }

    /// One Adam update over all parameters. `grads[i]` pairs with parameter
    /// id order; `None` means the parameter received no gradient this step
    /// (treated as zero, so moments still decay).
    pub fn adam_step(&mut self, grads: &[Option<Array2<f64>>], lr: f64) {
        assert_eq!(grads.len(), self.params.len(), "gradient list length mismatch");
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - ADAM_BETA1.powi(t);
        let bias2 = 1.0 - ADAM_BETA2.powi(t);
        for (param, grad) in self.params.iter_mut().zip(grads) {
            let zero;
            let g = match grad {
                Some(g) => {
                    assert_eq!(g.raw_dim(), param.value.raw_dim(), "gradient shape mismatch for '{}'", param.name);
                    g
                }
                None => {
                    zero = Array2::zeros(param.value.raw_dim());
                    &zero
                }
            };
            param.m.zip_mut_with(g, |m, &gv| *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * gv);
            param.v.zip_mut_with(g, |v, &gv| *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * gv * gv);
            ndarray::Zip::from(&mut param.value)
                .and(&param.m)
                .and(&param.v)
                .for_each(|w, &m, &v| {
                    let m_hat = m / bias1;
                    let v_hat = v / bias2;
                    *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        // Minimize 0.5*||w||^2; gradient = w.
        let mut store = ParamStore::new();
        let id = store.add("w", Array2::from_elem((2, 2), 5.0));
        for _ in 0..2000 {
            let g = store.value(id).clone();
            store.adam_step(&[Some(g)], 0.05);
        }
        assert!(store.value(id).iter().all(|v| v.abs() < 1e-2));
        assert_eq!(store.step, 2000);
    }

    #[test]
    fn missing_gradient_decays_moments_only() {
        let mut store = ParamStore::new();
        let id = store.add("w", Array2::from_elem((1, 1), 1.0));
        store.adam_step(&[None], 0.1);
        // Zero gradient with zero moments leaves the value unchanged.
        assert_eq!(store.value(id)[(0, 0)], 1.0);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_panic() {
        let mut store = ParamStore::new();
        store.add("w", Array2::zeros((1, 1)));
        store.add("w", Array2::zeros((1, 1)));
    }
}
