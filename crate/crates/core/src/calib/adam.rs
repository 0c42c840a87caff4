use nalgebra::SVector;

/// Adam with bias correction (Kingma & Ba), fixed-size parameter vector.
#[derive(Debug, Clone)]
pub struct Adam<const N: usize> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: SVector<f64, N>,
    v: SVector<f64, N>,
}

impl<const N: usize> Adam<N> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: SVector::zeros(),
            v: SVector::zeros(),
        }
    }

    /// Applies one descent step to `params` in place.
    pub fn step(&mut self, params: &mut SVector<f64, N>, grad: &SVector<f64, N>) {
        self.step += 1;
        self.m = self.m * self.beta1 + grad * (1.0 - self.beta1);
        self.v = self.v * self.beta2 + grad.component_mul(grad) * (1.0 - self.beta2);
        let m_corr = 1.0 - self.beta1.powi(self.step);
        let v_corr = 1.0 - self.beta2.powi(self.step);
        for i in 0..N {
            let m_hat = self.m[i] / m_corr;
            let v_hat = self.v[i] / v_corr;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
