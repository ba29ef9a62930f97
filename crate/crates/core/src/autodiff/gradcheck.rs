//! Central-difference gradient verification (64-bit only).

use super::{backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true gradient is ~0 are compared absolutely at `tol * floor`.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coordinate {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
    pub checked: usize,
    pub passed: bool,
    /// Set when evaluation hit a non-finite value or failed outright.
    pub failure: Option<String>,
}

impl GradCheckReport {
    fn failed(reason: String) -> Self {
        Self {
            max_rel_error: f64::INFINITY,
            worst: None,
            checked: 0,
            passed: false,
            failure: Some(reason),
        }
    }
}

/// Gradient of `f` at `params` by reverse-mode differentiation. Parameters
/// the loss does not reach get zero gradient.
pub fn analytic_gradient<F>(f: &mut F, params: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>
where
    F: FnMut(&mut Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var<f64>> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    loss.value().check_finite("loss")?;
    let grads = backward(&tape, &loss)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(v, p)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape()))
        })
        .collect())
}

fn evaluate<F>(f: &mut F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var<f64>> = params.iter().map(|p| Var::constant(p.clone())).collect();
    f(&mut tape, &vars)?.value().item()
}

/// Central differences `(f(θ+h) − f(θ−h)) / 2h`, one coordinate at a time.
pub fn numeric_gradient<F>(f: &mut F, params: &[Tensor<f64>], h: f64) -> Result<Vec<Tensor<f64>>>
where
    F: FnMut(&mut Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Tensor::zeros(params[p].shape());
        for i in 0..params[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let plus = evaluate(f, &work)?;
            work[p].data_mut()[i] = orig - h;
            let minus = evaluate(f, &work)?;
            work[p].data_mut()[i] = orig;
            let d = (plus - minus) / (2.0 * h);
            if !d.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("finite difference of parameter {p}"),
                    index: i,
                });
            }
            g.data_mut()[i] = d;
        }
        out.push(g);
    }
    Ok(out)
}

pub fn compare_gradients(
    analytic: &[Tensor<f64>],
    numeric: &[Tensor<f64>],
    cfg: &GradCheckConfig,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        passed: true,
        failure: None,
    };
    for (p, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        if a.shape() != n.shape() {
            return GradCheckReport::failed(format!(
                "parameter {p}: analytic shape {:?} vs numeric {:?}",
                a.shape(),
                n.shape()
            ));
        }
        for (index, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            if !av.is_finite() || !nv.is_finite() {
                return GradCheckReport::failed(format!(
                    "non-finite gradient at parameter {p}, index {index}"
                ));
            }
            let rel = (av - nv).abs() / av.abs().max(nv.abs()).max(cfg.floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some(Coordinate {
                    param: p,
                    index,
                    analytic: av,
                    numeric: nv,
                });
            }
        }
    }
    report.passed = report.max_rel_error <= cfg.tol;
    report
}

/// Checks reverse-mode gradients of `f` against central differences.
pub fn grad_check<F>(mut f: F, params: &[Tensor<f64>], cfg: &GradCheckConfig) -> GradCheckReport
where
    F: FnMut(&mut Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    if !(cfg.step > 0.0) {
        return GradCheckReport::failed(format!("step must be positive, got {}", cfg.step));
    }
    let analytic = match analytic_gradient(&mut f, params) {
        Ok(a) => a,
        Err(e) => return GradCheckReport::failed(e.to_string()),
    };
    let numeric = match numeric_gradient(&mut f, params, cfg.step) {
        Ok(n) => n,
        Err(e) => return GradCheckReport::failed(e.to_string()),
    };
    compare_gradients(&analytic, &numeric, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn linear_map_is_exact_to_rounding() {
        let a = Tensor::from_f64(&[1, 3], &[0.5, -1.25, 2.0]).unwrap();
        let x = Tensor::from_f64(&[3, 1], &[1.0, 2.0, 3.0]).unwrap();
        let report = grad_check(
            |tape, p| {
                let y = tape.matmul(&Var::constant(a.clone()), &p[0])?;
                tape.sum(&y)
            },
            &[x],
            &GradCheckConfig::default(),
        );
        assert!(report.passed);
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn two_layer_relu_network() {
        let mut rng = Rng::new(5);
        let x: Tensor<f64> = rng.normal(&[3, 2], 0.0, 1.0).unwrap();
        let w1: Tensor<f64> = rng.normal(&[2, 4], 0.0, 1.0).unwrap();
        let w2: Tensor<f64> = rng.normal(&[4, 3], 0.0, 1.0).unwrap();
        // 8 + 12 = 20 parameters
        let report = grad_check(
            |tape, p| {
                let h = tape.matmul(&Var::constant(x.clone()), &p[0])?;
                let h = tape.relu(&h)?;
                let y = tape.matmul(&h, &p[1])?;
                let sq = tape.mul(&y, &y)?;
                tape.mean(&sq)
            },
            &[w1, w2],
            &GradCheckConfig::default(),
        );
        assert_eq!(report.checked, 20);
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let x = Tensor::from_f64(&[2], &[0.7, -1.3]).unwrap();
        let mut f = |tape: &mut Tape<f64>, p: &[Var<f64>]| {
            let sq = tape.mul(&p[0], &p[0])?;
            tape.sum(&sq)
        };
        let cfg = GradCheckConfig::default();
        let mut analytic = analytic_gradient(&mut f, &[x.clone()]).unwrap();
        let numeric = numeric_gradient(&mut f, &[x], cfg.step).unwrap();
        assert!(compare_gradients(&analytic, &numeric, &cfg).passed);
        analytic[0] = analytic[0].scale(1.01);
        let report = compare_gradients(&analytic, &numeric, &cfg);
        assert!(!report.passed);
        assert!(report.max_rel_error > 0.009);
    }

    #[test]
    fn non_finite_is_reported() {
        let x = Tensor::from_f64(&[1], &[f64::NAN]).unwrap();
        let report = grad_check(|tape, p| tape.sum(&p[0]), &[x], &GradCheckConfig::default());
        assert!(!report.passed);
        assert!(report.failure.is_some());
    }
}
