use std::f64::consts::PI;

/// Linear warmup over the first `warmup_fraction` of the run, cosine decay to
/// zero afterwards.
pub fn learning_rate(step: usize, total: usize, base: f64, warmup_fraction: f64) -> f64 {
    let total = total.max(1);
    let warm = ((warmup_fraction * total as f64).ceil() as usize).min(total);
    if step < warm {
        return base * (step + 1) as f64 / warm as f64;
    }
    let span = (total - warm).max(1) as f64;
    let p = ((step - warm) as f64 / span).min(1.0);
    0.5 * base * (1.0 + (PI * p).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moment estimates plus the number of updates taken.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// One decoupled-weight-decay update of `theta` in place.
    pub fn update(&mut self, theta: &mut [f64], grad: &[f64], lr: f64, cfg: &AdamWConfig) {
        assert_eq!(theta.len(), grad.len());
        assert_eq!(theta.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let step = (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + cfg.eps) + cfg.weight_decay * theta[i];
            theta[i] -= lr * step;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let lr = |s| learning_rate(s, 100, 1.0, 0.1);
        assert!((lr(0) - 0.1).abs() < 1e-12);
        assert!((lr(9) - 1.0).abs() < 1e-12);
        assert!((lr(10) - 1.0).abs() < 1e-12);
        assert!((lr(55) - 0.5).abs() < 1e-12);
        assert!(lr(99) < 1e-3);
        for s in 10..99 {
            assert!(lr(s + 1) <= lr(s));
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-12, weight_decay: 0.0 };
        let mut st = AdamState::new(2);
        let mut theta = vec![1.0, -1.0];
        st.update(&mut theta, &[3.0, -0.5], 0.01, &cfg);
        assert!((theta[0] - 0.99).abs() < 1e-9);
        assert!((theta[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn zero_rate_is_a_no_op() {
        let cfg = AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.1 };
        let mut st = AdamState::new(3);
        let mut theta = vec![0.3, -2.0, 5.0];
        let before = theta.clone();
        st.update(&mut theta, &[1.0, 2.0, 3.0], 0.0, &cfg);
        assert_eq!(theta, before);
    }
}
