//! Ground truth for the finite-difference machinery: brute-force perturbation
//! of every similarity logit through the one-step pipeline, exact quadratic
//! Hessian-vector products, and gradient checks of every stage loss.

use std::fmt::Write as _;

use rand::Rng;
use serde::Serialize;

use crate::datasets::{gen_blobs, Dataset};
use crate::error::{Error, Result};
use crate::ndcore::{cosine_similarity, dot, grad_check, norm2, Matrix2D, MlpParams};
use crate::networks::{CodeMode, Head, MatchingNet, SiameseNet};
use crate::rng::{stream, Stream};
use crate::similarity::SimilarityMatrix;
use crate::trilevel::{
    fd_cross_hvp, hypergrad_a, loss_matching, loss_siamese, loss_validation, virtual_step_s, virtual_step_t,
    LossContext, LossMode, Noise, PredictMode,
};

/// A problem small enough to perturb every logit separately.
#[derive(Debug, Clone)]
pub struct TinyInstance {
    pub train: Dataset,
    pub val: Dataset,
    pub t: SiameseNet,
    pub s: MatchingNet,
    pub sim: SimilarityMatrix,
    pub xi_t: f64,
    pub xi_s: f64,
    pub loss_mode: LossMode,
    pub noise: Noise,
}

pub const MAX_TRAIN: usize = 8;
pub const MAX_VAL: usize = 6;
pub const DEFAULT_EPS: f64 = 1e-5;

impl TinyInstance {
    /// Six training and four validation examples in two classes, 2-d
    /// features, linear 2→2 cosine encoders, random logits in `[−1, 1]`.
    pub fn random(seed: u64) -> Self {
        let mut rng = stream(seed, Stream::Init);
        let linear = |rng: &mut _| MlpParams::init(&[2, 2], rng).expect("dims");
        let t = SiameseNet::new(linear(&mut rng), 0.5, Head::Cosine).expect("tau");
        let s = MatchingNet {
            encoder: linear(&mut rng),
            head: Head::Cosine,
            tied: false,
        };
        let train = gen_blobs(2, 3, 2, 1.0, seed).expect("blobs");
        let val = gen_blobs(2, 2, 2, 1.0, seed.wrapping_add(1_000)).expect("blobs");
        let mut sim = SimilarityMatrix::new(train.len());
        let logits = (0..sim.num_pairs()).map(|_| rng.random_range(-1.0..1.0)).collect();
        sim.set_logits(logits).expect("pairs");
        TinyInstance {
            train,
            val,
            t,
            s,
            sim,
            xi_t: 0.1,
            xi_s: 0.1,
            loss_mode: LossMode::Bce,
            noise: Noise::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.len() > MAX_TRAIN || self.val.len() > MAX_VAL {
            return Err(Error::Contract(format!(
                "tiny instance has {} train / {} val examples",
                self.train.len(),
                self.val.len()
            )));
        }
        if self.sim.n() != self.train.len() {
            return Err(Error::shape("tiny instance similarity", self.train.len(), self.sim.n()));
        }
        Ok(())
    }

    pub fn ctx(&self) -> LossContext<'_> {
        LossContext {
            train: &self.train,
            val: &self.val,
            loss_mode: self.loss_mode,
            predict_mode: PredictMode::Soft,
            allow_self_match: false,
            code_mode: CodeMode::Soft,
            noise: &self.noise,
        }
    }

    fn train_rows(&self) -> Vec<usize> {
        (0..self.train.len()).collect()
    }

    fn val_rows(&self) -> Vec<usize> {
        (0..self.val.len()).collect()
    }

    /// `L_val(T′, S′)` after one virtual step of each stage from `sim`.
    pub fn pipeline_loss(&self, sim: &SimilarityMatrix) -> Result<f64> {
        let ctx = self.ctx();
        let rows = self.train_rows();
        let (t_prime, _) = virtual_step_t(&ctx, sim, &self.t, &rows, self.xi_t)?;
        let (s_prime, _) = virtual_step_s(&ctx, &t_prime, &self.s, &rows, self.xi_s)?;
        let l = loss_validation(&ctx, &t_prime, &s_prime, &self.val_rows())?.loss;
        if !l.is_finite() {
            return Err(Error::NonFinite("oracle pipeline loss".into()));
        }
        Ok(l)
    }

    /// Production hypergradient, chained to the logits.
    pub fn production_hypergrad(&self) -> Result<Vec<f64>> {
        let r = hypergrad_a(
            &self.ctx(),
            &self.sim,
            &self.t,
            &self.s,
            &self.train_rows(),
            &self.val_rows(),
            self.xi_t,
            self.xi_s,
        )?;
        self.sim.chain_to_logits(&r.grad_a)
    }
}

/// Central difference of the whole pipeline in each stored logit.
pub fn perturbation_hypergrad(instance: &TinyInstance, eps: f64) -> Result<Vec<f64>> {
    instance.validate()?;
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Range {
            what: "oracle eps",
            detail: format!("{eps} outside [1e-6, 1e-3]"),
        });
    }
    let base = instance.sim.logits().to_vec();
    let mut sim = instance.sim.clone();
    let mut grad = Vec::with_capacity(base.len());
    for k in 0..base.len() {
        let mut at = |delta: f64| {
            let mut l = base.clone();
            l[k] += delta;
            sim.set_logits(l)?;
            instance.pipeline_loss(&sim)
        };
        let plus = at(eps)?;
        let minus = at(-eps)?;
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// `H·v` for a symmetric `H`.
pub fn exact_hvp_quadratic(h: &Matrix2D, v: &[f64]) -> Result<Vec<f64>> {
    let n = h.rows();
    if h.cols() != n || v.len() != n {
        return Err(Error::shape(
            "exact_hvp_quadratic",
            format!("{n}x{n} and {n}"),
            format!("{}x{} and {}", h.rows(), h.cols(), v.len()),
        ));
    }
    if n > 50 {
        return Err(Error::Range {
            what: "quadratic dimension",
            detail: format!("{n} > 50"),
        });
    }
    for i in 0..n {
        for j in i + 1..n {
            if h[(i, j)] != h[(j, i)] {
                return Err(Error::Contract(format!("H is not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok((0..n).map(|i| dot(h.row(i), v)).collect())
}

/// One named comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub cosine: Option<f64>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub checks: Vec<OracleCheck>,
}

impl OracleReport {
    pub fn new(checks: Vec<OracleCheck>) -> Result<Self> {
        if checks.is_empty() {
            return Err(Error::Contract("no checks were run".into()));
        }
        Ok(OracleReport { checks })
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect()
    }

    /// One line per check, then a summary line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let cos = c.cosine.map_or(String::new(), |v| format!(" cosine={v:.6}"));
            let _ = writeln!(
                out,
                "{} {} max_rel_error={:.3e}{cos}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.max_rel_error
            );
        }
        let failed = self.failures().len();
        let _ = writeln!(
            out,
            "{} of {} checks passed{}",
            self.checks.len() - failed,
            self.checks.len(),
            if failed == 0 {
                String::new()
            } else {
                format!("; failing: {}", self.failures().join(", "))
            }
        );
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("check,max_rel_error,cosine,passed\n");
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                c.name,
                c.max_rel_error,
                c.cosine.map_or(String::new(), |v| v.to_string()),
                c.passed
            );
        }
        out
    }
}

/// Relative L2 error of `got` against `want`.
pub fn rel_l2(got: &[f64], want: &[f64]) -> f64 {
    let diff: Vec<f64> = got.iter().zip(want).map(|(a, b)| a - b).collect();
    norm2(&diff) / norm2(want).max(1e-300)
}

/// Hypergradient vs perturbation oracle on `n` seeded instances.
pub fn hypergrad_checks(n: usize, first_seed: u64) -> Result<Vec<OracleCheck>> {
    (0..n as u64)
        .map(|k| {
            let inst = TinyInstance::random(first_seed + k);
            let want = perturbation_hypergrad(&inst, DEFAULT_EPS)?;
            let got = inst.production_hypergrad()?;
            let cos = cosine_similarity(&got, &want);
            let rel = rel_l2(&got, &want);
            Ok(OracleCheck {
                name: format!("hypergrad/instance-{}", first_seed + k),
                max_rel_error: rel,
                cosine: Some(cos),
                passed: cos >= 0.99 && rel <= 1e-2,
            })
        })
        .collect()
}

/// Finite-difference cross products on random quadratics and bilinear forms.
pub fn hvp_checks(n: usize, seed: u64) -> Result<Vec<OracleCheck>> {
    let mut rng = stream(seed, Stream::Data);
    let mut checks = Vec::with_capacity(n + 1);
    for case in 0..n {
        let dim = rng.random_range(2..=12);
        let mut h = Matrix2D::zeros(dim, dim);
        for i in 0..dim {
            for j in i..dim {
                let x = rng.random_range(-2.0..2.0);
                h[(i, j)] = x;
                h[(j, i)] = x;
            }
        }
        let point: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let want = exact_hvp_quadratic(&h, &v)?;
        let got = if case % 2 == 0 {
            // Quadratic ½xᵀHx: the gradient is Hx.
            fd_cross_hvp(|x| exact_hvp_quadratic(&h, x), &point, &v, dim)?.value
        } else {
            // Bilinear tᵀH s in (t, s): the gradient in t is Hs.
            fd_cross_hvp(|s| exact_hvp_quadratic(&h, s), &point, &v, dim)?.value
        };
        let rel = rel_l2(&got, &want);
        checks.push(OracleCheck {
            name: format!("fd-hvp/{}-{case}", if case % 2 == 0 { "quadratic" } else { "bilinear" }),
            max_rel_error: rel,
            cosine: None,
            passed: rel <= 1e-4,
        });
    }
    let r = fd_cross_hvp(|x| Ok(x.to_vec()), &[0.0, 0.0], &[0.0, 2.0], 2)?;
    checks.push(OracleCheck {
        name: "fd-hvp/alpha-rule".into(),
        max_rel_error: (r.alpha - 0.005).abs() / 0.005,
        cosine: None,
        passed: r.alpha == 0.005,
    });
    Ok(checks)
}

/// The oracle at `ε` and `ε/2` differ by `O(ε²)`: halving again shrinks the
/// gap about fourfold.
pub fn richardson_check(seed: u64) -> Result<OracleCheck> {
    let inst = TinyInstance::random(seed);
    let eps = 1e-3;
    let g1 = perturbation_hypergrad(&inst, eps)?;
    let g2 = perturbation_hypergrad(&inst, eps / 2.0)?;
    let g4 = perturbation_hypergrad(&inst, eps / 4.0)?;
    let d12: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a - b).collect();
    let d24: Vec<f64> = g2.iter().zip(&g4).map(|(a, b)| a - b).collect();
    let ratio = norm2(&d12) / norm2(&d24).max(1e-300);
    let rel = rel_l2(&g1, &g2);
    Ok(OracleCheck {
        name: format!("oracle/richardson-{seed}"),
        max_rel_error: rel,
        cosine: None,
        passed: rel <= 1e-4 && (2.5..=6.0).contains(&ratio),
    })
}

fn loss_check<F>(name: &str, params: &[f64], f: F) -> Result<OracleCheck>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let r = grad_check(f, params, 1e-6)?;
    Ok(OracleCheck {
        name: name.into(),
        max_rel_error: r.max_rel_error,
        cosine: None,
        passed: r.max_rel_error <= 1e-4,
    })
}

/// Analytic gradients of every stage loss (and the encoder backward pass)
/// against central differences on a seeded six-example problem with
/// two-layer encoders.
pub fn gradient_checks(seed: u64) -> Result<Vec<OracleCheck>> {
    let train = gen_blobs(2, 3, 2, 1.0, seed)?;
    let val = gen_blobs(2, 2, 2, 1.0, seed.wrapping_add(1))?;
    let mut rng = stream(seed, Stream::Init);
    let t = SiameseNet::new(MlpParams::init(&[2, 4, 3], &mut rng)?, 0.5, Head::Cosine)?;
    let s = MatchingNet {
        encoder: MlpParams::init(&[2, 4, 3], &mut rng)?,
        head: Head::Cosine,
        tied: false,
    };
    let mut sim = SimilarityMatrix::new(6);
    sim.set_logits((0..15).map(|_| rng.random_range(-2.0..2.0)).collect())?;
    let noise = Noise::default();
    let batch: Vec<usize> = (0..6).collect();
    let vb: Vec<usize> = (0..4).collect();
    let with_t = |v: &[f64]| -> Result<SiameseNet> {
        Ok(SiameseNet {
            encoder: t.encoder.with_flat(v.to_vec())?,
            ..t.clone()
        })
    };
    let with_s = |v: &[f64]| -> Result<MatchingNet> {
        Ok(MatchingNet {
            encoder: s.encoder.with_flat(v.to_vec())?,
            ..s.clone()
        })
    };
    let mut checks = Vec::new();
    for mode in [LossMode::Bce, LossMode::Literal] {
        let ctx = LossContext {
            train: &train,
            val: &val,
            loss_mode: mode,
            predict_mode: PredictMode::Soft,
            allow_self_match: false,
            code_mode: CodeMode::Soft,
            noise: &noise,
        };
        let tag = if mode == LossMode::Bce { "bce" } else { "literal" };
        checks.push(loss_check(&format!("siamese-loss/{tag}/T"), t.encoder.flat(), |v| {
            let l = loss_siamese(&ctx, &sim, &with_t(v)?, &batch)?;
            Ok((l.loss, l.grad_t.into_flat()))
        })?);
        checks.push(loss_check(&format!("siamese-loss/{tag}/A"), sim.logits(), |v| {
            let mut m = sim.clone();
            m.set_logits(v.to_vec())?;
            let l = loss_siamese(&ctx, &m, &t, &batch)?;
            Ok((l.loss, m.chain_to_logits(&l.grad_a)?))
        })?);
    }
    let ctx = LossContext {
        train: &train,
        val: &val,
        loss_mode: LossMode::Bce,
        predict_mode: PredictMode::Soft,
        allow_self_match: false,
        code_mode: CodeMode::Soft,
        noise: &noise,
    };
    checks.push(loss_check("matching-loss/S", s.encoder.flat(), |v| {
        let l = loss_matching(&ctx, &t, &with_s(v)?, &batch)?;
        Ok((l.loss, l.grad_s.into_flat()))
    })?);
    checks.push(loss_check("matching-loss/T", t.encoder.flat(), |v| {
        let l = loss_matching(&ctx, &with_t(v)?, &s, &batch)?;
        Ok((l.loss, l.grad_t.into_flat()))
    })?);
    checks.push(loss_check("validation-loss/S", s.encoder.flat(), |v| {
        let l = loss_validation(&ctx, &t, &with_s(v)?, &vb)?;
        Ok((l.loss, l.grad_s.into_flat()))
    })?);
    checks.push(loss_check("validation-loss/T", t.encoder.flat(), |v| {
        let l = loss_validation(&ctx, &with_t(v)?, &s, &vb)?;
        Ok((l.loss, l.grad_t.into_flat()))
    })?);
    // Encoder backward on its own: loss = Σ w ⊙ output.
    let x = train.features().clone();
    let weights = Matrix2D::from_vec(6, 3, (0..18).map(|k| ((k % 5) as f64 - 2.0) * 0.3).collect())?;
    checks.push(loss_check("mlp-backward", t.encoder.flat(), |v| {
        let p = t.encoder.with_flat(v.to_vec())?;
        let (out, cache) = p.forward(&x)?;
        let loss = dot(out.data(), weights.data());
        Ok((loss, p.backward(&cache, &weights)?.0.into_flat()))
    })?);
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_matches_production_hypergradient() {
        for check in hypergrad_checks(4, 100).unwrap() {
            assert!(check.passed, "{check:?}");
        }
    }

    #[test]
    fn constant_predictions_give_zero_gradient() {
        let mut inst = TinyInstance::random(3);
        inst.train = Dataset::new(inst.train.features().clone(), vec![0; 6], 1).unwrap();
        inst.val = Dataset::new(inst.val.features().clone(), vec![0; 4], 1).unwrap();
        let g = perturbation_hypergrad(&inst, DEFAULT_EPS).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-9), "{g:?}");
    }

    #[test]
    fn no_first_stage_step_gives_zero_gradient() {
        let mut inst = TinyInstance::random(4);
        inst.xi_t = 0.0;
        let g = perturbation_hypergrad(&inst, DEFAULT_EPS).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
        assert!(inst.production_hypergrad().unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn hashed_instance_agrees() {
        let mut inst = TinyInstance::random(9);
        let head = Head::Hash {
            code_bits: 2,
            gumbel_temp: 1.0,
        };
        inst.t.head = head;
        inst.s.head = head;
        let mut rng = stream(9, Stream::Gumbel);
        inst.noise = Noise {
            siamese: Some(crate::networks::logistic_noise(10, 2, &mut rng)),
            matching: Some(crate::networks::logistic_noise(10, 2, &mut rng)),
        };
        let want = perturbation_hypergrad(&inst, DEFAULT_EPS).unwrap();
        let got = inst.production_hypergrad().unwrap();
        assert!(cosine_similarity(&got, &want) >= 0.99);
        assert!(rel_l2(&got, &want) <= 1e-2);
    }

    #[test]
    fn eps_and_size_limits() {
        let inst = TinyInstance::random(1);
        assert!(perturbation_hypergrad(&inst, 1e-2).is_err());
        assert!(perturbation_hypergrad(&inst, 1e-7).is_err());
        let mut big = inst.clone();
        big.train = gen_blobs(3, 3, 2, 1.0, 1).unwrap();
        big.sim = SimilarityMatrix::new(9);
        assert!(matches!(perturbation_hypergrad(&big, 1e-5), Err(Error::Contract(_))));
    }

    #[test]
    fn quadratic_hvp() {
        let v = [1.0, -2.0, 0.5];
        assert_eq!(exact_hvp_quadratic(&Matrix2D::identity(3), &v).unwrap(), v.to_vec());
        assert_eq!(exact_hvp_quadratic(&Matrix2D::zeros(3, 3), &v).unwrap(), vec![0.0; 3]);
        let asym = Matrix2D::from_rows(&[[1.0, 2.0], [0.0, 1.0]]).unwrap();
        assert!(matches!(
            exact_hvp_quadratic(&asym, &[1.0, 1.0]),
            Err(Error::Contract(_))
        ));
        for c in hvp_checks(10, 5).unwrap() {
            assert!(c.passed && c.max_rel_error <= 1e-6, "{c:?}");
        }
    }

    #[test]
    fn oracle_is_self_consistent() {
        let c = richardson_check(11).unwrap();
        assert!(c.passed, "{c:?}");
    }

    #[test]
    fn gradient_suite_passes_and_names_are_unique() {
        let checks = gradient_checks(6).unwrap();
        assert!(checks.iter().all(|c| c.passed), "{checks:?}");
        let mut names: Vec<_> = checks.iter().map(|c| c.name.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), checks.len());
    }

    #[test]
    fn sign_error_is_caught() {
        let c = loss_check("flipped", &[0.3, -0.2], |v| {
            Ok((v[0] * v[0] + v[1], vec![-2.0 * v[0], 1.0]))
        })
        .unwrap();
        assert!(!c.passed);
    }

    #[test]
    fn report_lists_failures() {
        assert!(OracleReport::new(vec![]).is_err());
        let ok = OracleCheck {
            name: "a".into(),
            max_rel_error: 0.0,
            cosine: None,
            passed: true,
        };
        let bad = OracleCheck {
            name: "b".into(),
            max_rel_error: 1.0,
            cosine: Some(0.5),
            passed: false,
        };
        let good = OracleReport::new(vec![ok.clone()]).unwrap();
        assert!(good.all_passed());
        assert!(good.render().contains("1 of 1 checks passed\n"));
        let r = OracleReport::new(vec![ok, bad]).unwrap();
        assert!(!r.all_passed());
        assert_eq!(r.failures(), vec!["b"]);
        assert!(r.render().contains("FAIL b"));
        assert!(r.render().ends_with("failing: b\n"));
        assert_eq!(r.to_csv().lines().count(), 3);
    }
}
