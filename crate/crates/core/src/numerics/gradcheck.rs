use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NumericsError, Scalar, Tensor, Var};

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// Maximum of `|g_a - g_n| / max(|g_a|, |g_n|, 1e-8)` per parameter tensor.
    pub max_rel_error: Vec<f64>,
    /// Number of elements compared per parameter tensor.
    pub checked: Vec<usize>,
    pub eps: f64,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks the gradient of `loss_fn` with respect to every element of
/// `params` (or, when `subset` is `Some((n, seed))`, a seeded random sample of
/// at most `n` elements per tensor).
///
/// `loss_fn` receives a fresh graph and one leaf per parameter and must
/// return a single-element loss node. It must be deterministic.
pub fn grad_check<S, F, E>(
    params: &[Tensor<S>],
    eps: f64,
    subset: Option<(usize, u64)>,
    mut loss_fn: F,
) -> Result<GradReport, NumericsError>
where
    S: Scalar,
    F: FnMut(&mut Graph<S>, &[Var]) -> Result<Var, E>,
    E: std::fmt::Display,
{
    if !(eps > 0.0) {
        return Err(NumericsError::GradCheck(format!("eps must be positive, got {eps}")));
    }
    let mut eval = |values: &[Tensor<S>], with_grad: bool| -> Result<(f64, Option<Vec<Tensor<S>>>), NumericsError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), with_grad)).collect();
        let loss = loss_fn(&mut g, &vars).map_err(|e| NumericsError::GradCheck(e.to_string()))?;
        let lv = g.value(loss).data()[0].f64();
        if !lv.is_finite() {
            return Err(NumericsError::NonFinite { op: "grad_check loss" });
        }
        if !with_grad {
            return Ok((lv, None));
        }
        let mut grads = g.backward(loss)?;
        let out = vars
            .iter()
            .zip(values)
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((lv, Some(out)))
    };

    let (_, analytic) = eval(params, true)?;
    let analytic = analytic.expect("gradients requested");
    let mut work: Vec<Tensor<S>> = params.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(subset.map_or(0, |s| s.1));
    let mut report = GradReport { max_rel_error: Vec::new(), checked: Vec::new(), eps };
    for p in 0..params.len() {
        let n = params[p].len();
        let indices: Vec<usize> = match subset {
            Some((limit, _)) if limit < n => sample(&mut rng, n, limit).into_vec(),
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        for &i in &indices {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = S::of(orig.f64() + eps);
            let (fp, _) = eval(&work, false)?;
            work[p].data_mut()[i] = S::of(orig.f64() - eps);
            let (fm, _) = eval(&work, false)?;
            work[p].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[p].data()[i].f64(), numeric));
        }
        report.max_rel_error.push(worst);
        report.checked.push(indices.len());
    }
    Ok(report)
}
