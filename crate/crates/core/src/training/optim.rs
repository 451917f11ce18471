//! Adam and the plateau learning-rate schedule.

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    pub fn new(len: usize, beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Divides the rate by `factor` once the windowed mean loss has failed to
/// improve on its best by a relative `tolerance` for `patience` windows.
#[derive(Debug, Clone)]
pub struct Plateau {
    window: usize,
    patience: usize,
    tolerance: f64,
    factor: f64,
    sum: f64,
    count: usize,
    best: Option<f64>,
    stale: usize,
}

impl Plateau {
    pub fn new(window: usize, patience: usize, tolerance: f64, factor: f64) -> Self {
        Self {
            window: window.max(1),
            patience: patience.max(1),
            tolerance,
            factor,
            sum: 0.0,
            count: 0,
            best: None,
            stale: 0,
        }
    }

    /// Feeds one loss value; returns the new rate when it changes.
    pub fn observe(&mut self, loss: f64, lr: f64) -> Option<f64> {
        self.sum += loss;
        self.count += 1;
        if self.count < self.window {
            return None;
        }
        let mean = self.sum / self.count as f64;
        self.sum = 0.0;
        self.count = 0;
        match self.best {
            Some(best) if mean >= best - self.tolerance * best.abs() => {
                self.stale += 1;
                self.best = Some(best.min(mean));
                if self.stale >= self.patience {
                    self.stale = 0;
                    return Some(lr / self.factor);
                }
            }
            _ => {
                self.best = Some(mean);
                self.stale = 0;
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.9, 0.999);
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
            opt.update(&mut p, &g, 0.01);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-2), "{p:?}");
    }

    #[test]
    fn first_adam_step_has_rate_magnitude() {
        let mut p = vec![0.0];
        Adam::new(1, 0.9, 0.999).update(&mut p, &[123.0], 0.5);
        assert!((p[0] + 0.5).abs() < 1e-6);
    }

    #[test]
    fn plateau_decays_after_patience_windows() {
        let mut s = Plateau::new(2, 3, 1e-3, 5.0);
        let mut lr = 1.0;
        let mut changes = vec![];
        for i in 0..20 {
            if let Some(new) = s.observe(1.0, lr) {
                lr = new;
                changes.push(i);
            }
        }
        // First window sets the best, then three stale windows each time.
        assert_eq!(changes, vec![7, 13, 19]);
        assert!((lr - 0.008).abs() < 1e-12);

        let mut s = Plateau::new(1, 1, 1e-3, 5.0);
        assert!((0..50).all(|i| s.observe(100.0 - i as f64, 1.0).is_none()));
    }
}
