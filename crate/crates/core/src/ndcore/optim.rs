use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentumState {
    velocity: Vec<f64>,
}

impl MomentumState {
    pub fn new(n: usize) -> Self {
        MomentumState { velocity: vec![0.0; n] }
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            first: vec![0.0; n],
            second: vec![0.0; n],
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamHyper {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

fn check_len(context: &'static str, params: &[f64], grads: &[f64], state: usize) -> Result<()> {
    if grads.len() != params.len() || state != params.len() {
        return Err(Error::shape(
            context,
            params.len(),
            format!("grads {}, state {}", grads.len(), state),
        ));
    }
    Ok(())
}

/// Heavy-ball SGD with L2 weight decay folded into the gradient:
/// `v ← μ·v + (g + λ·p)`, `p ← p − lr·v`.
pub fn sgd_momentum_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut MomentumState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    check_len("sgd_momentum_step", params, grads, state.velocity.len())?;
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        *v = momentum * *v + (g + weight_decay * *p);
        *p -= lr * *v;
    }
    Ok(())
}

/// Adam with bias-corrected moments. Weight decay is classic L2: it is added
/// to the gradient before the moments are updated.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, hyper: &AdamHyper) -> Result<()> {
    check_len("adam_step", params, grads, state.first.len())?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i] + hyper.weight_decay * *p;
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
        *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(())
}

/// Cosine decay from `lr0` at step 0 to zero at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Range {
            what: "scheduler step",
            detail: format!("{step} > {total_steps}"),
        });
    }
    if total_steps == 0 {
        return Ok(lr0);
    }
    let frac = step as f64 / total_steps as f64;
    Ok(0.5 * lr0 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_zero_grad_is_noop() {
        let mut p = vec![1.0, -2.0];
        let mut s = MomentumState::new(2);
        sgd_momentum_step(&mut p, &[0.0, 0.0], &mut s, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn sgd_scalar_step() {
        let mut p = vec![1.0];
        let mut s = MomentumState::new(1);
        sgd_momentum_step(&mut p, &[2.0], &mut s, 0.1, 0.0, 0.0).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_two_momentum_steps() {
        // v1 = g1 = 1.0, p1 = 1 - 0.1 = 0.9
        // v2 = 0.9*1.0 + 0.5 = 1.4, p2 = 0.9 - 0.14 = 0.76
        let mut p = vec![1.0];
        let mut s = MomentumState::new(1);
        sgd_momentum_step(&mut p, &[1.0], &mut s, 0.1, 0.9, 0.0).unwrap();
        sgd_momentum_step(&mut p, &[0.5], &mut s, 0.1, 0.9, 0.0).unwrap();
        assert!((p[0] - 0.76).abs() < 1e-14);
        assert!((s.velocity()[0] - 1.4).abs() < 1e-14);
    }

    #[test]
    fn sgd_weight_decay_enters_velocity() {
        let mut p = vec![2.0];
        let mut s = MomentumState::new(1);
        sgd_momentum_step(&mut p, &[0.0], &mut s, 0.5, 0.9, 0.1).unwrap();
        assert!((p[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn optimizer_shape_errors() {
        let mut p = vec![0.0; 2];
        assert!(sgd_momentum_step(&mut p, &[0.0], &mut MomentumState::new(2), 0.1, 0.9, 0.0).is_err());
        assert!(adam_step(&mut p, &[0.0; 2], &mut AdamState::new(3), &AdamHyper::new(1e-3, 0.0)).is_err());
    }

    #[test]
    fn adam_zero_grad_is_noop() {
        let mut p = vec![0.3, -0.7];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, &AdamHyper::new(1e-3, 0.0)).unwrap();
        assert_eq!(p, vec![0.3, -0.7]);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn adam_first_step_scalar() {
        // m̂ = 1, v̂ = 1 after bias correction, so the step is lr / (1 + ε).
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s, &AdamHyper::new(1e-3, 0.0)).unwrap();
        assert!((p[0] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn adam_scalar_recurrence() {
        let grads = [0.5, -0.25, 1.5, 0.1];
        let mut p = vec![0.2];
        let mut s = AdamState::new(1);
        let h = AdamHyper::new(1e-2, 1e-3);
        let (mut m, mut v, mut q) = (0.0f64, 0.0f64, 0.2f64);
        for (t, &g) in grads.iter().enumerate() {
            adam_step(&mut p, &[g], &mut s, &h).unwrap();
            let g = g + 1e-3 * q;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let k = (t + 1) as i32;
            q -= 1e-2 * (m / (1.0 - 0.9f64.powi(k))) / ((v / (1.0 - 0.999f64.powi(k))).sqrt() + 1e-8);
            assert!((p[0] - q).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = vec![0.1, 0.2, 0.3];
            let mut s = AdamState::new(3);
            for k in 0..5 {
                let g: Vec<f64> = p.iter().map(|x| x * (k as f64 + 1.0) - 0.05).collect();
                adam_step(&mut p, &g, &mut s, &AdamHyper::new(1e-3, 1e-3)).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.01).unwrap(), 0.01);
        assert!(cosine_lr(100, 100, 0.01).unwrap().abs() < 1e-18);
        assert!((cosine_lr(50, 100, 0.01).unwrap() - 0.005).abs() < 1e-15);
        assert!(matches!(cosine_lr(101, 100, 0.01), Err(Error::Range { .. })));
    }
}
