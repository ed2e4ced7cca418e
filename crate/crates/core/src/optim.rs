//! Full-batch Adam over a flat parameter vector.

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One bias-corrected update of `params` along `grad`.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), self.m.len());
        debug_assert_eq!(grad.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let step_size = self.lr / bc1;
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= step_size * *m / ((*v / bc2).sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut opt = Adam::new(2, 0.1, 0.9, 0.999, 1e-12);
        let mut p = [1.0, -1.0];
        opt.update(&mut p, &[3.0, -0.01]);
        assert!((p[0] - 0.9).abs() < 1e-9);
        assert!((p[1] + 0.9).abs() < 1e-9);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut opt = Adam::new(2, 0.05, 0.9, 0.999, 1e-8);
        let mut p = [3.0, -2.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.0), 4.0 * (p[1] + 0.5)];
            opt.update(&mut p, &g);
        }
        assert!((p[0] - 1.0).abs() < 1e-3);
        assert!((p[1] + 0.5).abs() < 1e-3);
    }
}
