use crate::tensor::Tensor;

pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update of a flat parameter slice. `t` is the
/// 1-based step count after this update.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
) {
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Adam state over an ordered list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[&Tensor], beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    /// Applies one update using each tensor's accumulated gradient (a
    /// missing gradient counts as zero).
    pub fn step(&mut self, params: Vec<&mut Tensor>, lr: f64) {
        assert_eq!(params.len(), self.m.len(), "optimizer/parameter mismatch");
        self.t += 1;
        for (i, p) in params.into_iter().enumerate() {
            let grad = p.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]);
            adam_step(
                p.data_mut(),
                &grad,
                &mut self.m[i],
                &mut self.v[i],
                self.t,
                lr,
                self.beta1,
                self.beta2,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![1.0, -2.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adam_step(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, 0.5, 0.999);
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = vec![0.0; 3];
        let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
        adam_step(&mut p, &[3.0, -0.2, 1e-3], &mut m, &mut v, 1, 0.01, 0.5, 0.999);
        for (x, s) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - 0.01 * s).abs() < 1e-6, "{x}");
        }
    }
}
