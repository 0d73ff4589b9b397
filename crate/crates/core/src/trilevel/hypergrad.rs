use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{axpy, norm2, MlpParams};
use crate::networks::{MatchingNet, SiameseNet};
use crate::similarity::SimilarityMatrix;

use super::losses::{loss_matching, loss_siamese, loss_validation, LossContext, MatchLoss, SiameseLoss};

/// Directions shorter than this are treated as zero.
pub const ZERO_DIRECTION_EPS: f64 = 1e-12;
/// Perturbation length: `α = FD_SCALE/‖direction‖`.
pub const FD_SCALE: f64 = 0.01;

/// A finite-difference Hessian-vector product and the step it used.
#[derive(Debug, Clone, PartialEq)]
pub struct FdHvp {
    pub value: Vec<f64>,
    /// Zero when the direction was flagged.
    pub alpha: f64,
    pub zero_direction: bool,
}

pub fn fd_alpha(direction_norm: f64) -> f64 {
    FD_SCALE / direction_norm
}

/// `[g(p + α·d) − g(p − α·d)]/(2α)` with `α = 0.01/‖d‖`, i.e. the product of
/// the Jacobian of `g` at `p` with `d`. `out_len` sizes the zero result of a
/// flagged direction.
pub fn fd_cross_hvp<F>(mut grad_at: F, point: &[f64], direction: &[f64], out_len: usize) -> Result<FdHvp>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if direction.len() != point.len() {
        return Err(Error::shape("fd direction", point.len(), direction.len()));
    }
    let n = norm2(direction);
    if !n.is_finite() {
        return Err(Error::NonFinite("fd direction".into()));
    }
    if n < ZERO_DIRECTION_EPS {
        return Ok(FdHvp {
            value: vec![0.0; out_len],
            alpha: 0.0,
            zero_direction: true,
        });
    }
    let alpha = fd_alpha(n);
    let mut plus = point.to_vec();
    axpy(&mut plus, alpha, direction);
    let mut minus = point.to_vec();
    axpy(&mut minus, -alpha, direction);
    let gp = grad_at(&plus)?;
    let gm = grad_at(&minus)?;
    if gp.len() != out_len || gm.len() != out_len {
        return Err(Error::shape("fd gradient", out_len, gp.len()));
    }
    let value = gp.iter().zip(&gm).map(|(p, m)| (p - m) / (2.0 * alpha)).collect();
    Ok(FdHvp {
        value,
        alpha,
        zero_direction: false,
    })
}

fn replace_encoder(encoder: &MlpParams, flat: &[f64]) -> Result<MlpParams> {
    encoder.with_flat(flat.to_vec())
}

/// `∇²_{S,T′} L_match · v`: how the stage-two gradient in `T′` moves when `S`
/// is pushed along `v`.
pub fn fd_hvp_ts(
    ctx: &LossContext,
    t_prime: &SiameseNet,
    s: &MatchingNet,
    batch: &[usize],
    v: &[f64],
) -> Result<FdHvp> {
    fd_cross_hvp(
        |p| {
            let s_pert = MatchingNet {
                encoder: replace_encoder(&s.encoder, p)?,
                ..s.clone()
            };
            Ok(loss_matching(ctx, t_prime, &s_pert, batch)?.grad_t.into_flat())
        },
        s.encoder.flat(),
        v,
        t_prime.encoder.num_params(),
    )
}

/// `∇²_{T,A} L_siamese · w`: how the stage-one gradient in `A` moves when `T`
/// is pushed along `w`.
pub fn fd_hvp_at(
    ctx: &LossContext,
    sim: &SimilarityMatrix,
    t: &SiameseNet,
    batch: &[usize],
    w: &[f64],
) -> Result<FdHvp> {
    fd_cross_hvp(
        |p| {
            let t_pert = SiameseNet {
                encoder: replace_encoder(&t.encoder, p)?,
                ..t.clone()
            };
            Ok(loss_siamese(ctx, sim, &t_pert, batch)?.grad_a)
        },
        t.encoder.flat(),
        w,
        sim.num_pairs(),
    )
}

/// `params − ξ·grad`.
pub fn sgd_virtual(params: &MlpParams, grad: &MlpParams, xi: f64) -> Result<MlpParams> {
    let mut flat = params.flat().to_vec();
    if grad.num_params() != flat.len() {
        return Err(Error::shape("virtual step", flat.len(), grad.num_params()));
    }
    axpy(&mut flat, -xi, grad.flat());
    params.with_flat(flat)
}

/// `T′ = T − ξ_T·∇_T L_siamese(A, T)`, with the loss evaluated at `T`.
pub fn virtual_step_t(
    ctx: &LossContext,
    sim: &SimilarityMatrix,
    t: &SiameseNet,
    batch: &[usize],
    xi_t: f64,
) -> Result<(SiameseNet, SiameseLoss)> {
    let l = loss_siamese(ctx, sim, t, batch)?;
    let t_prime = SiameseNet {
        encoder: sgd_virtual(&t.encoder, &l.grad_t, xi_t)?,
        ..t.clone()
    };
    Ok((t_prime, l))
}

/// `S′ = S − ξ_S·∇_S L_match(T′, S)`, with the loss evaluated at `S`.
pub fn virtual_step_s(
    ctx: &LossContext,
    t_prime: &SiameseNet,
    s: &MatchingNet,
    batch: &[usize],
    xi_s: f64,
) -> Result<(MatchingNet, MatchLoss)> {
    let l = loss_matching(ctx, t_prime, s, batch)?;
    let s_prime = MatchingNet {
        encoder: sgd_virtual(&s.encoder, &l.grad_s, xi_s)?,
        ..s.clone()
    };
    Ok((s_prime, l))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypergradReport {
    /// Gradient of the validation loss with respect to each stored `A` entry.
    pub grad_a: Vec<f64>,
    pub alpha_t: f64,
    pub alpha_s: f64,
    /// `‖∇_{T′} L_val‖` and `‖∇_{S′} L_val‖`.
    pub norm_u: f64,
    pub norm_v: f64,
    /// Norm of the composed direction `u − ξ_S·h`.
    pub norm_w: f64,
    pub zero_direction_t: bool,
    pub zero_direction_s: bool,
    pub loss_t: f64,
    pub loss_s: f64,
    pub loss_val: f64,
    pub clamps: usize,
}

/// Gradient of `L_val(T′(A), S′(T′(A)))` with respect to `A` through the
/// one-step virtual updates. Stage one uses every pair inside `batch`;
/// stage two queries `batch`; the validation loss queries `val_batch`.
#[allow(clippy::too_many_arguments)]
pub fn hypergrad_a(
    ctx: &LossContext,
    sim: &SimilarityMatrix,
    t: &SiameseNet,
    s: &MatchingNet,
    batch: &[usize],
    val_batch: &[usize],
    xi_t: f64,
    xi_s: f64,
) -> Result<HypergradReport> {
    let (t_prime, l1) = virtual_step_t(ctx, sim, t, batch, xi_t)?;
    let (s_prime, l2) = virtual_step_s(ctx, &t_prime, s, batch, xi_s)?;
    let lv = loss_validation(ctx, &t_prime, &s_prime, val_batch)?;
    let u = lv.grad_t.flat();
    let v = lv.grad_s.flat();
    let h = fd_hvp_ts(ctx, &t_prime, s, batch, v)?;
    let mut w = u.to_vec();
    axpy(&mut w, -xi_s, &h.value);
    let g = fd_hvp_at(ctx, sim, t, batch, &w)?;
    let grad_a: Vec<f64> = g.value.iter().map(|x| -xi_t * x).collect();
    if grad_a.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("hypergradient".into()));
    }
    Ok(HypergradReport {
        grad_a,
        alpha_t: g.alpha,
        alpha_s: h.alpha,
        norm_u: norm2(u),
        norm_v: norm2(v),
        norm_w: norm2(&w),
        zero_direction_t: g.zero_direction,
        zero_direction_s: h.zero_direction,
        loss_t: l1.loss,
        loss_s: l2.loss,
        loss_val: lv.loss,
        clamps: l1.clamps + l2.clamps + lv.clamps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{gen_blobs, Dataset};
    use crate::networks::{CodeMode, Head};
    use crate::rng::{stream, Stream};
    use crate::trilevel::losses::Noise;
    use crate::trilevel::settings::{LossMode, PredictMode};
    use rand::Rng;

    #[test]
    fn zero_direction_is_flagged() {
        let r = fd_cross_hvp(|p| Ok(p.to_vec()), &[1.0, 2.0], &[0.0, 0.0], 2).unwrap();
        assert!(r.zero_direction);
        assert_eq!(r.value, vec![0.0, 0.0]);
        assert_eq!(r.alpha, 0.0);
    }

    #[test]
    fn alpha_rule() {
        assert_eq!(fd_alpha(2.0), 0.005);
        let r = fd_cross_hvp(|p| Ok(p.to_vec()), &[0.0, 0.0], &[0.0, 2.0], 2).unwrap();
        assert_eq!(r.alpha, 0.005);
    }

    #[test]
    fn bilinear_cross_hessian() {
        // L(t, s) = (a·t)(b·s): ∇_t L(t, s) = a·(b·s), so the FD product along
        // v is (b·v)·a exactly.
        let mut rng = stream(3, Stream::Data);
        for _ in 0..20 {
            let a: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let s: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let v: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let r = fd_cross_hvp(
                |sp| {
                    let bs = crate::ndcore::dot(&b, sp);
                    Ok(a.iter().map(|x| x * bs).collect())
                },
                &s,
                &v,
                5,
            )
            .unwrap();
            let bv = crate::ndcore::dot(&b, &v);
            for (got, x) in r.value.iter().zip(&a) {
                assert!(
                    (got - bv * x).abs() <= 1e-6 * (bv * x).abs().max(1e-12),
                    "{got} {}",
                    bv * x
                );
            }
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(fd_cross_hvp(|p| Ok(p.to_vec()), &[1.0], &[1.0, 2.0], 1).is_err());
        assert!(fd_cross_hvp(|p| Ok(p.to_vec()), &[1.0], &[1.0], 3).is_err());
    }

    struct Fixture {
        train: Dataset,
        val: Dataset,
        noise: Noise,
        t: SiameseNet,
        s: MatchingNet,
        sim: SimilarityMatrix,
    }

    impl Fixture {
        fn new(seed: u64) -> Self {
            let mut rng = stream(seed, Stream::Init);
            let t = SiameseNet::new(MlpParams::init(&[2, 4, 3], &mut rng).unwrap(), 0.5, Head::Cosine).unwrap();
            let s = MatchingNet {
                encoder: MlpParams::init(&[2, 4, 3], &mut rng).unwrap(),
                head: Head::Cosine,
                tied: false,
            };
            let mut sim = SimilarityMatrix::new(6);
            let mut r = stream(seed, Stream::Data);
            sim.set_logits((0..15).map(|_| r.random_range(-1.0..1.0)).collect())
                .unwrap();
            Fixture {
                train: gen_blobs(2, 3, 2, 1.0, seed).unwrap(),
                val: gen_blobs(2, 2, 2, 1.0, seed + 1).unwrap(),
                noise: Noise::default(),
                t,
                s,
                sim,
            }
        }

        fn ctx(&self, mode: LossMode) -> LossContext<'_> {
            LossContext {
                train: &self.train,
                val: &self.val,
                loss_mode: mode,
                predict_mode: PredictMode::Soft,
                allow_self_match: false,
                code_mode: CodeMode::Soft,
                noise: &self.noise,
            }
        }
    }

    #[test]
    fn virtual_steps() {
        let f = Fixture::new(1);
        let ctx = f.ctx(LossMode::Bce);
        let batch = [0, 1, 2, 3, 4, 5];
        let (t0, s0) = (f.t.clone(), f.s.clone());
        let (tp, l) = virtual_step_t(&ctx, &f.sim, &f.t, &batch, 0.1).unwrap();
        let (sp, _) = virtual_step_s(&ctx, &tp, &f.s, &batch, 0.1).unwrap();
        assert_eq!(f.t, t0);
        assert_eq!(f.s, s0);
        for ((a, b), g) in tp.encoder.flat().iter().zip(t0.encoder.flat()).zip(l.grad_t.flat()) {
            assert!((a - (b - 0.1 * g)).abs() < 1e-15);
        }
        assert_ne!(sp.encoder, s0.encoder);

        let p = MlpParams::zeros(&[1, 1]).unwrap().with_flat(vec![1.0, 0.0]).unwrap();
        let g = p.with_flat(vec![2.0, 0.0]).unwrap();
        assert!((sgd_virtual(&p, &g, 0.1).unwrap().flat()[0] - 0.8).abs() < 1e-15);
        assert_eq!(sgd_virtual(&p, &p.zeros_like(), 0.1).unwrap(), p);
    }

    #[test]
    fn virtual_steps_descend() {
        let mut failures = 0;
        for seed in 0..100 {
            let f = Fixture::new(seed);
            let ctx = f.ctx(LossMode::Bce);
            let batch = [0, 1, 2, 3, 4, 5];
            let (tp, l) = virtual_step_t(&ctx, &f.sim, &f.t, &batch, 1e-3).unwrap();
            let after_t = loss_siamese(&ctx, &f.sim, &tp, &batch).unwrap().loss;
            let (sp, m) = virtual_step_s(&ctx, &tp, &f.s, &batch, 1e-3).unwrap();
            let after_s = loss_matching(&ctx, &tp, &sp, &batch).unwrap().loss;
            if after_t > l.loss || after_s > m.loss {
                failures += 1;
            }
        }
        assert_eq!(failures, 0);
    }

    #[test]
    fn literal_at_entries_are_log_ratios() {
        let f = Fixture::new(2);
        let ctx = f.ctx(LossMode::Literal);
        let batch = [0, 2, 3, 5];
        let w: Vec<f64> = (0..f.t.encoder.num_params())
            .map(|k| ((k * 7 % 5) as f64 - 2.0) * 0.1)
            .collect();
        let r = fd_hvp_at(&ctx, &f.sim, &f.t, &batch, &w).unwrap();
        let shift = |sign: f64| {
            let mut p = f.t.encoder.flat().to_vec();
            axpy(&mut p, sign * r.alpha, &w);
            SiameseNet {
                encoder: f.t.encoder.with_flat(p).unwrap(),
                ..f.t.clone()
            }
        };
        let (tp, tm) = (shift(1.0), shift(-1.0));
        let n_pairs = 6.0;
        for (a, b) in [(0, 2), (3, 5), (0, 5)] {
            let (xa, xb) = (f.train.features().row(a), f.train.features().row(b));
            let lp = crate::networks::siamese_prob(&tp, xa, xb).unwrap().ln();
            let lm = crate::networks::siamese_prob(&tm, xa, xb).unwrap().ln();
            let expect = -(lp - lm) / (2.0 * r.alpha) / n_pairs;
            let got = r.value[crate::similarity::pair_index(6, a, b)];
            assert!((got - expect).abs() < 1e-9 * expect.abs().max(1.0), "{got} {expect}");
        }
        assert_eq!(r.value[crate::similarity::pair_index(6, 1, 4)], 0.0);
    }

    #[test]
    fn second_pathway_vanishes_without_xi_s() {
        let f = Fixture::new(3);
        let ctx = f.ctx(LossMode::Bce);
        let batch = [0, 1, 2, 3, 4, 5];
        let val = [0, 1, 2, 3];
        let r = hypergrad_a(&ctx, &f.sim, &f.t, &f.s, &batch, &val, 0.05, 0.0).unwrap();
        let (tp, _) = virtual_step_t(&ctx, &f.sim, &f.t, &batch, 0.05).unwrap();
        let lv = loss_validation(&ctx, &tp, &f.s, &val).unwrap();
        let direct = fd_hvp_at(&ctx, &f.sim, &f.t, &batch, lv.grad_t.flat()).unwrap();
        for (a, b) in r.grad_a.iter().zip(&direct.value) {
            assert!((a + 0.05 * b).abs() < 1e-15);
        }
        assert_eq!(r.norm_w, r.norm_u);
    }

    #[test]
    fn zero_validation_gradients_give_zero_hypergradient() {
        // Identical labels everywhere: every prediction is certain, so the
        // validation loss is flat in both networks.
        let mut f = Fixture::new(4);
        f.train = Dataset::new(f.train.features().clone(), vec![0; 6], 1).unwrap();
        f.val = Dataset::new(f.val.features().clone(), vec![0; 4], 1).unwrap();
        let ctx = f.ctx(LossMode::Bce);
        let r = hypergrad_a(&ctx, &f.sim, &f.t, &f.s, &[0, 1, 2, 3, 4, 5], &[0, 1, 2, 3], 0.1, 0.1).unwrap();
        assert!(r.zero_direction_s && r.zero_direction_t);
        assert!(r.grad_a.iter().all(|&g| g == 0.0));
        assert!(r.loss_val.abs() < 1e-12);
    }
}
