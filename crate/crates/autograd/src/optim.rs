use crate::error::{AutogradError, Result};
use crate::params::{Gradients, ParamStore};
use crate::tensor::{real, Real, Tensor};

/// Running averages kept by AdaDelta, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaDeltaState<T> {
    pub accum_grad_sq: Vec<Tensor<T>>,
    pub accum_update_sq: Vec<Tensor<T>>,
    pub rho: f64,
    pub epsilon: f64,
}

impl<T: Real> AdaDeltaState<T> {
    pub fn new(params: &ParamStore<T>, rho: f64, epsilon: f64) -> Self {
        let zeros: Vec<_> = params
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            accum_grad_sq: zeros.clone(),
            accum_update_sq: zeros,
            rho,
            epsilon,
        }
    }

    fn check(&self, params: &ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        if self.accum_grad_sq.len() != params.len() || grads.len() != params.len() {
            return Err(AutogradError::invalid(
                "adadelta_step",
                "state, gradients and parameters differ in count",
            ));
        }
        for ((id, _, p), g) in params.iter().zip(grads.iter()) {
            let i = id.index();
            if p.shape() != g.shape()
                || p.shape() != self.accum_grad_sq[i].shape()
                || p.shape() != self.accum_update_sq[i].shape()
            {
                return Err(AutogradError::Shape {
                    op: "adadelta_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

/// One AdaDelta update in place:
///
/// ```text
/// E[g²] ← ρ·E[g²] + (1−ρ)·g²
/// Δ     ← −√(E[Δ²]+ε) / √(E[g²]+ε) · g
/// E[Δ²] ← ρ·E[Δ²] + (1−ρ)·Δ²
/// θ     ← θ + lr·Δ
/// ```
pub fn adadelta_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut AdaDeltaState<T>,
    lr: f64,
) -> Result<()> {
    state.check(params, grads)?;
    let rho = real::<T>(state.rho);
    let one_minus = real::<T>(1.0 - state.rho);
    let eps = real::<T>(state.epsilon);
    let lr = real::<T>(lr);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let i = id.index();
        let g = grads.get(id).data();
        let eg = state.accum_grad_sq[i].data_mut();
        let ed = state.accum_update_sq[i].data_mut();
        let p = params.get_mut(id).data_mut();
        for j in 0..p.len() {
            eg[j] = rho * eg[j] + one_minus * g[j] * g[j];
            let delta = -((ed[j] + eps).sqrt() / (eg[j] + eps).sqrt()) * g[j];
            ed[j] = rho * ed[j] + one_minus * delta * delta;
            p[j] = p[j] + lr * delta;
        }
    }
    Ok(())
}

/// Divides gradients by the utterance count, then rescales them so the global
/// L2 norm does not exceed `clip`. Returns the norm measured after the division
/// and before clipping.
pub fn scale_and_clip<T: Real>(
    grads: &mut Gradients<T>,
    num_utterances: usize,
    clip: f64,
) -> Result<f64> {
    if num_utterances == 0 {
        return Err(AutogradError::invalid(
            "scale_and_clip",
            "num_utterances must be >= 1",
        ));
    }
    let inv = real::<T>(1.0 / num_utterances as f64);
    grads.iter_mut().for_each(|g| g.scale_in_place(inv));
    let norm = grads.global_norm().as_f64();
    if norm > clip && norm > 0.0 {
        let k = real::<T>(clip / norm);
        grads.iter_mut().for_each(|g| g.scale_in_place(k));
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(v)).unwrap();
        s
    }

    fn grads_of(store: &ParamStore<f64>, v: f64) -> Gradients<f64> {
        let mut g = Gradients::zeros_like(store);
        g.get_mut(store.id("w").unwrap()).data_mut()[0] = v;
        g
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = scalar_store(0.0);
        let mut st = AdaDeltaState::new(&p, 0.95, 1e-6);
        let g = grads_of(&p, 1.0);
        adadelta_step(&mut p, &g, &mut st, 1.0).unwrap();
        let expected = -(1e-6f64 / 0.050001).sqrt();
        let got = p.by_name("w").unwrap().item();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert!((expected + 0.004472).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = scalar_store(2.0);
        let mut st = AdaDeltaState::new(&p, 0.95, 1e-6);
        st.accum_grad_sq[0].data_mut()[0] = 4.0;
        st.accum_update_sq[0].data_mut()[0] = 1.0;
        let g = grads_of(&p, 0.0);
        adadelta_step(&mut p, &g, &mut st, 1.0).unwrap();
        assert_eq!(p.by_name("w").unwrap().item(), 2.0);
        assert!((st.accum_grad_sq[0].item() - 3.8).abs() < 1e-12);
        assert!((st.accum_update_sq[0].item() - 0.95).abs() < 1e-12);
    }

    #[test]
    fn two_steps_match_formula() {
        let mut p = scalar_store(0.0);
        let mut st = AdaDeltaState::new(&p, 0.95, 1e-6);
        let g = grads_of(&p, 1.0);
        adadelta_step(&mut p, &g, &mut st, 1.0).unwrap();
        let w1 = p.by_name("w").unwrap().item();
        adadelta_step(&mut p, &g, &mut st, 1.0).unwrap();
        let w2 = p.by_name("w").unwrap().item();

        let (rho, eps) = (0.95f64, 1e-6f64);
        let eg1 = (1.0 - rho) * 1.0;
        let d1 = -(eps.sqrt() / (eg1 + eps).sqrt());
        let ed1 = (1.0 - rho) * d1 * d1;
        let eg2 = rho * eg1 + (1.0 - rho);
        let d2 = -((ed1 + eps).sqrt() / (eg2 + eps).sqrt());
        assert!((w1 - d1).abs() < 1e-15);
        assert!((w2 - w1 - d2).abs() < 1e-15);
        assert!(d2.abs() > 0.0);
    }

    #[test]
    fn clip_halves_norm_twenty() {
        let p = scalar_store(0.0);
        let mut g = grads_of(&p, 20.0);
        let n = scale_and_clip(&mut g, 1, 10.0).unwrap();
        assert_eq!(n, 20.0);
        assert_eq!(g.get(p.id("w").unwrap()).item(), 10.0);
    }

    #[test]
    fn clip_leaves_small_norm() {
        let p = scalar_store(0.0);
        let mut g = grads_of(&p, 5.0);
        scale_and_clip(&mut g, 1, 10.0).unwrap();
        assert_eq!(g.get(p.id("w").unwrap()).item(), 5.0);
    }

    #[test]
    fn divides_by_utterances_first() {
        let p = scalar_store(0.0);
        let mut g = grads_of(&p, 8.0);
        let n = scale_and_clip(&mut g, 4, 10.0).unwrap();
        assert_eq!(n, 2.0);
        assert_eq!(g.get(p.id("w").unwrap()).item(), 2.0);
        assert!(scale_and_clip(&mut g, 0, 10.0).is_err());
    }
}
