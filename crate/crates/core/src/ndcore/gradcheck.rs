use crate::error::{Error, Result};

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter index where `max_rel_error` was attained.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the gradient returned by `loss_fn` at `params` with central
/// differences of its loss, one coordinate at a time.
///
/// The relative error of a coordinate is
/// `|analytic − fd| / max(|analytic|, |fd|, 1e-12)`.
pub fn grad_check<F>(loss_fn: F, params: &[f64], eps: f64) -> Result<GradCheck>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (loss, analytic) = loss_fn(params)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }
    if analytic.len() != params.len() {
        return Err(Error::shape("grad_check gradient", params.len(), analytic.len()));
    }
    let mut probe = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    for k in 0..params.len() {
        probe[k] = params[k] + eps;
        let (up, _) = loss_fn(&probe)?;
        probe[k] = params[k] - eps;
        let (down, _) = loss_fn(&probe)?;
        probe[k] = params[k];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("grad_check loss at coordinate {k}")));
        }
        numeric.push((up - down) / (2.0 * eps));
    }
    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-12))
        .enumerate()
        .fold((0, 0.0), |best, (k, e)| if e > best.1 { (k, e) } else { best });
    Ok(GradCheck {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let p = [0.3, -1.2, 2.5, 0.7];
        let check = grad_check(
            |x| Ok((0.5 * x.iter().map(|v| v * v).sum::<f64>(), x.to_vec())),
            &p,
            1e-5,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-8, "{}", check.max_rel_error);
        assert_eq!(check.analytic, p.to_vec());
    }

    #[test]
    fn catches_a_wrong_gradient() {
        let check = grad_check(|x| Ok((x[0] * x[0], vec![-2.0 * x[0]])), &[1.5], 1e-5).unwrap();
        assert!(check.max_rel_error > 1.0);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let r = grad_check(|x| Ok((x[0].ln(), vec![1.0 / x[0]])), &[-1.0], 1e-5);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
