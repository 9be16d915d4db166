use super::{Grads, ParamSet, Scalar};

/// Adam with bias correction and optional global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<F: Scalar>(params: &ParamSet<F>, lr: f64, clip_norm: Option<f64>) -> Self {
        let zeros: Vec<Vec<f64>> = params.entries().iter().map(|e| vec![0.0; e.data.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step<F: Scalar>(&mut self, params: &mut ParamSet<F>, grads: &Grads<F>) {
        self.step += 1;
        let norm = grads.global_norm().to_f64().unwrap_or(f64::INFINITY);
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, entry) in params.entries_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in entry.data.iter_mut().enumerate() {
                let g = grads.0[i][j].to_f64().unwrap_or(0.0) * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let update = self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                *p = *p - F::from_f64(update);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let mut params = ParamSet::<f64>::new();
        let id = params.add("x", vec![2], vec![3.0, -2.0]);
        let mut opt = Adam::new(&params, 0.05, None);
        for _ in 0..2000 {
            let mut g = params.zeros_like();
            let x = params.get(id).to_vec();
            g.get_mut(id).copy_from_slice(&[2.0 * (x[0] - 1.0), 2.0 * (x[1] + 0.5)]);
            opt.step(&mut params, &g);
        }
        let x = params.get(id);
        assert!((x[0] - 1.0).abs() < 1e-3 && (x[1] + 0.5).abs() < 1e-3);
        assert_eq!(opt.steps_taken(), 2000);
    }
}
