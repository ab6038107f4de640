//! Central finite-difference gradient checking.

use super::graph::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Worst-coordinate summary of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input index, flat coordinate)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coordinates_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Relative error with a denominator floor, so that two tiny gradients
/// compare by absolute difference instead of blowing up.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-4;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compare analytic gradients of a scalar function of `inputs` against
/// central differences `(f(x+eps) - f(x-eps)) / 2eps`, one coordinate at a time.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    assert!(eps > 0.0, "eps must be positive");
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let loss = f(&mut graph, &vars)?;
    let grads = graph.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coordinates_checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("param gradient").clone();
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[j];
            let rel = relative_error(a, numeric);
            report.coordinates_checked += 1;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((i, j));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::<f64>::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let report = finite_diff_check(
            |g, v| {
                let z = g.scale(v[0], 0.0);
                let z = g.add_scalar(z, 4.0);
                Ok(g.sum(z))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(report.max_abs_error, 0.0);
        assert_eq!(report.analytic_at_worst, 0.0);
        assert_eq!(report.numeric_at_worst, 0.0);
    }

    #[test]
    fn linear_layer_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        let w = Tensor::uniform(&[5, 4], 1.0, &mut rng);
        let b = Tensor::uniform(&[5], 1.0, &mut rng);
        let report = finite_diff_check(
            |g, v| {
                let y = g.linear(v[0], v[1], Some(v[2]))?;
                let y2 = g.mul(y, y)?;
                Ok(g.sum(y2))
            },
            &[x, w, b],
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-8), "{report:?}");
        assert_eq!(report.coordinates_checked, 12 + 20 + 5);
    }

    #[test]
    fn relu_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut x = Tensor::<f64>::uniform(&[20], 1.0, &mut rng);
        x.data_mut().iter_mut().for_each(|v| {
            if v.abs() < 0.01 {
                *v = 0.5
            }
        });
        let report = finite_diff_check(
            |g, v| {
                let r = g.relu(v[0]);
                let r2 = g.mul(r, r)?;
                Ok(g.sum(r2))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-8), "{report:?}");
    }
}
