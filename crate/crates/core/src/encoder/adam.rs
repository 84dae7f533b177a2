use super::{EncoderError, ParamSet, Scalar};

/// Bias-corrected Adam. Moments are kept in `f64` regardless of the parameter type.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<F: Scalar>(params: &ParamSet<F>, lr: f64) -> Self {
        let zeros = || params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect::<Vec<_>>();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.v
    }
}

pub fn adam_step<F: Scalar>(params: &mut ParamSet<F>, grads: &ParamSet<F>, state: &mut AdamState) -> Result<(), EncoderError> {
    let shape_ok = params.same_shapes(grads)
        && state.m.len() == params.tensors.len()
        && state.m.iter().zip(&params.tensors).all(|(m, t)| m.len() == t.data.len());
    if !shape_ok {
        return Err(EncoderError::ShapeMismatch {
            expected: params.tensors.iter().map(|t| t.data.len()).collect(),
            got: grads.tensors.iter().map(|t| t.data.len()).collect(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (((p, g), m), v) in params
        .tensors
        .iter_mut()
        .zip(&grads.tensors)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for (((pi, &gi), mi), vi) in p.data.iter_mut().zip(&g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gi = gi.as_f64();
            *mi = state.beta1 * *mi + (1.0 - state.beta1) * gi;
            *vi = state.beta2 * *vi + (1.0 - state.beta2) * gi * gi;
            let update = state.lr * (*mi / c1) / ((*vi / c2).sqrt() + state.eps);
            *pi = F::from_f64(pi.as_f64() - update);
        }
    }
    params.bump();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Tensor;

    fn scalar(v: f64) -> ParamSet<f64> {
        ParamSet::new(vec![Tensor {
            name: "w".into(),
            shape: vec![1],
            data: vec![v],
        }])
    }

    #[test]
    fn first_step_by_hand() {
        let mut p = scalar(1.0);
        let mut state = AdamState::new(&p, 0.001);
        adam_step(&mut p, &scalar(1.0), &mut state).unwrap();
        assert_eq!(state.step, 1);
        // m̂ = v̂ = 1, so the update is lr / (1 + eps).
        assert!((p.tensors[0].data[0] - (1.0 - 0.001 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn zero_grads_leave_params() {
        let mut p = scalar(0.25);
        let mut state = AdamState::new(&p, 0.001);
        for _ in 0..3 {
            adam_step(&mut p, &scalar(0.0), &mut state).unwrap();
        }
        assert_eq!(p.tensors[0].data[0], 0.25);
        assert_eq!(state.step, 3);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = scalar(0.0);
        let mut state = AdamState::new(&p, 0.001);
        let g = ParamSet::new(vec![Tensor {
            name: "w".into(),
            shape: vec![2],
            data: vec![0.0, 0.0],
        }]);
        assert!(matches!(adam_step(&mut p, &g, &mut state), Err(EncoderError::ShapeMismatch { .. })));
    }
}
