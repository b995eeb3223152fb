//! First-order optimizers over flat `f64` parameter vectors.
//!
//! Both optimizers mutate the parameter slice in place given a gradient of
//! the same length. State (for Adam) is per-instance; create one instance
//! per parameter vector being trained.

/// Plain stochastic gradient descent: `w ← w − lr · g`.
#[derive(Debug, Clone, Copy)]
pub struct Sgd {
    lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        assert!(lr > 0.0, "learning rate must be positive, got {lr}");
        Sgd { lr }
    }

    pub fn step(&self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len(), "gradient length mismatch");
        for (w, g) in params.iter_mut().zip(grad) {
            *w -= self.lr * g;
        }
    }
}

/// Adaptive moment estimation with bias correction.
///
/// Defaults: step 1e-3, first/second moment decay 0.9/0.999, epsilon 1e-8.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(dim: usize, lr: f64) -> Self {
        Adam::with_betas(dim, lr, 0.9, 0.999)
    }

    pub fn with_betas(dim: usize, lr: f64, beta1: f64, beta2: f64) -> Self {
        assert!(lr > 0.0, "learning rate must be positive, got {lr}");
        assert!((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2));
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "parameter length mismatch");
        assert_eq!(params.len(), grad.len(), "gradient length mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
