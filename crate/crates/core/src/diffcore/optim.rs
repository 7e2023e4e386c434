use super::{Array, DiffError};

/// Plain gradient descent: `p <- p - lr * g` for every aligned pair.
pub fn sgd_step(params: &mut [Array], grads: &[Array], lr: f64) -> Result<(), DiffError> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(DiffError::InvalidLearningRate(lr));
    }
    check_aligned("sgd_step", params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        p.axpy(-lr, g)?;
    }
    Ok(())
}

fn check_aligned(op: &'static str, params: &[Array], grads: &[Array]) -> Result<(), DiffError> {
    if params.len() != grads.len() {
        return Err(DiffError::ParamCount {
            params: params.len(),
            grads: grads.len(),
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(DiffError::shape(op, &[p.shape(), g.shape()]));
        }
        if !g.all_finite() {
            return Err(DiffError::NonFinite("gradient"));
        }
    }
    Ok(())
}

/// Adam with bias correction, used by the backbone training loops.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Array>,
    v: Vec<Array>,
}

impl Adam {
    pub fn new(lr: f64, params: &[Array]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(Array::zeros_like).collect(),
            v: params.iter().map(Array::zeros_like).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Array], grads: &[Array]) -> Result<(), DiffError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(DiffError::InvalidLearningRate(self.lr));
        }
        check_aligned("adam", params, grads)?;
        if params.len() != self.m.len() {
            return Err(DiffError::ParamCount {
                params: params.len(),
                grads: self.m.len(),
            });
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (pd, gd) = (p.data_mut(), g.data());
            for (((pv, &gv), mv), vv) in pd.iter_mut().zip(gd).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_definition() {
        let mut p = vec![Array::scalar(1.0)];
        sgd_step(&mut p, &[Array::scalar(0.5)], 0.1).unwrap();
        assert!((p[0].data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = vec![Array::from_vec(vec![1.5, -2.0])];
        sgd_step(&mut p, &[Array::zeros(&[2])], 0.3).unwrap();
        assert_eq!(p[0].data(), &[1.5, -2.0]);
    }

    #[test]
    fn quadratic_contracts_to_minimum() {
        // d/dp (p-3)^2 = 2(p-3); with lr=0.4 the error shrinks by |1-0.8| per step.
        let mut p = vec![Array::scalar(0.0)];
        for _ in 0..50 {
            let g = Array::scalar(2.0 * (p[0].data()[0] - 3.0));
            sgd_step(&mut p, &[g], 0.4).unwrap();
        }
        assert!((p[0].data()[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = vec![Array::scalar(0.0)];
        let err = sgd_step(&mut p, &[Array::scalar(f64::NAN)], 0.1).unwrap_err();
        assert!(matches!(err, DiffError::NonFinite(_)));
    }

    #[test]
    fn misaligned_shapes_are_rejected() {
        let mut p = vec![Array::zeros(&[2])];
        assert!(sgd_step(&mut p, &[Array::zeros(&[3])], 0.1).is_err());
        assert!(sgd_step(&mut p, &[], 0.1).is_err());
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = vec![Array::scalar(1.0)];
        let mut opt = Adam::new(0.1, &p);
        opt.step(&mut p, &[Array::scalar(2.0)]).unwrap();
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
    }
}
