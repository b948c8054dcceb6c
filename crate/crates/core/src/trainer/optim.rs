use serde::{Deserialize, Serialize};

use crate::diffgraph::{Gradients, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction. Rows listed in `frozen_rows` are reset to
/// zero after every step.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u32,
    frozen_rows: Vec<(ParamId, usize)>,
    scratch: Vec<f64>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            config,
            first: zeros.clone(),
            second: zeros,
            step: 0,
            frozen_rows: Vec::new(),
            scratch: Vec::new(),
        }
    }

    pub fn freeze_row(mut self, id: ParamId, row: usize) -> Self {
        self.frozen_rows.push((id, row));
        self
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> &[f64] {
        &self.first[id.index()]
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            let n = params.get(id).numel();
            self.scratch.resize(n, 0.0);
            grads.write_dense(id, &mut self.scratch);
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            let theta = params.get_mut(id).data_mut();
            for k in 0..n {
                let g = self.scratch[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                theta[k] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        for &(id, row) in &self.frozen_rows {
            let cols = params.get(id).last_dim();
            params.get_mut(id).row_mut(row).iter_mut().for_each(|v| *v = 0.0);
            self.first[id.index()][row * cols..(row + 1) * cols].fill(0.0);
            self.second[id.index()][row * cols..(row + 1) * cols].fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffgraph::{Tape, Tensor};

    #[test]
    fn zero_gradient_leaves_fresh_params_alone() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![0.3, -0.2]));
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let zero = Gradients::for_store(&store);
        adam.step(&mut store, &zero);
        assert_eq!(store.get(w).data(), &[0.3, -0.2]);

        // After a real step the first moment decays geometrically under zero gradients.
        let mut g = Gradients::for_store(&store);
        g.add_dense(w, &[1.0, 1.0]);
        adam.step(&mut store, &g);
        let m1 = adam.first_moment(w)[0];
        adam.step(&mut store, &zero);
        assert!((adam.first_moment(w)[0] - 0.9 * m1).abs() < 1e-15);
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        // f(x) = (x - 3)², minimum at 3.
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::vector(vec![0.0]));
        let mut adam = Adam::new(
            AdamConfig {
                learning_rate: 0.1,
                ..AdamConfig::default()
            },
            &store,
        );
        for _ in 0..500 {
            let mut grads = Gradients::for_store(&store);
            {
                let mut tape = Tape::new(&store);
                let xv = tape.param(x).unwrap();
                let c = tape.constant(Tensor::vector(vec![-3.0])).unwrap();
                let d = tape.add(xv, c).unwrap();
                let m = tape.stack_columns(&[d]).unwrap();
                let dv = tape.reshape(d, &[1, 1]).unwrap();
                let zero = tape.constant(Tensor::vector(vec![0.0])).unwrap();
                let sq = tape.affine(dv, m, zero).unwrap();
                let loss = tape.sum(sq).unwrap();
                tape.backward(loss, &mut grads).unwrap();
            }
            adam.step(&mut store, &grads);
        }
        assert!((store.get(x).item() - 3.0).abs() < 1e-3, "{}", store.get(x).item());
    }

    #[test]
    fn frozen_rows_stay_zero_and_runs_repeat() {
        let run = || {
            let mut store = ParamStore::new();
            let e = store.add_table("e", Tensor::matrix(2, 2, vec![0.0, 0.0, 0.5, 0.5]).unwrap());
            let mut adam = Adam::new(AdamConfig::default(), &store).freeze_row(e, 0);
            for i in 0..5 {
                let mut g = Gradients::for_store(&store);
                g.add_dense(e, &[1.0, -1.0, 0.1 * i as f64, 0.2]);
                adam.step(&mut store, &g);
            }
            store.get(e).clone()
        };
        let a = run();
        assert_eq!(a.row(0), &[0.0, 0.0]);
        assert_eq!(a, run());
    }
}
