use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::{Error, Result};
use std::collections::BTreeMap;

/// Default relative error bound for accepting an analytic gradient.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Default central difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// One compared gradient entry.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Outcome of a finite difference check over one or more parameters.
#[derive(Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }

    /// Entries whose relative error exceeds the tolerance.
    pub fn flagged(&self) -> Vec<&GradCheckEntry> {
        self.entries
            .iter()
            .filter(|e| e.rel_err > self.tolerance)
            .collect()
    }
}

/// Relative error with a floor on the denominator so that near-zero true
/// gradients compare in absolute terms instead of amplifying float dust.
fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-2);
    (analytic - numeric).abs() / denom
}

/// Checks the analytic gradient of a scalar expression against central
/// differences at `point`. `build` receives a fresh graph and the parameter
/// node (registered under the name "x") and returns the loss node.
pub fn gradient_check<F>(build: F, point: &Tensor<f64>, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
{
    let mut params = BTreeMap::new();
    params.insert("x".to_string(), point.clone());
    gradient_check_params(
        |g, nodes| build(g, nodes["x"]),
        &params,
        step,
        DEFAULT_TOLERANCE,
    )
}

/// Multi-parameter variant: every entry of every parameter is perturbed.
/// `build` receives the registered parameter nodes keyed by name.
pub fn gradient_check_params<F>(
    build: F,
    params: &BTreeMap<String, Tensor<f64>>,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &BTreeMap<String, NodeId>) -> Result<NodeId>,
{
    if !(step > 0.0) {
        return Err(Error::invalid("finite difference step must be positive"));
    }
    if !(tolerance > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }

    let eval = |point: &BTreeMap<String, Tensor<f64>>| -> Result<(f64, Option<Graph<f64>>, Option<NodeId>)> {
        let mut g = Graph::new();
        let mut nodes = BTreeMap::new();
        for (name, value) in point {
            nodes.insert(name.clone(), g.param(name, value)?);
        }
        let loss = build(&mut g, &nodes)?;
        let t = g.value(loss);
        if t.numel() != 1 {
            return Err(Error::invalid(format!(
                "gradient check loss must be scalar, got {:?}",
                t.shape()
            )));
        }
        let v = t.data()[0];
        if !v.is_finite() {
            return Err(Error::invalid("gradient check loss is not finite"));
        }
        Ok((v, Some(g), Some(loss)))
    };

    // Analytic pass.
    let (_, g, loss) = eval(params)?;
    let grads = g.unwrap().backward(loss.unwrap())?;

    let mut entries = Vec::new();
    let mut max_rel_err: f64 = 0.0;
    let mut work = params.clone();
    for (name, base) in params {
        let analytic = grads
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no gradient for {name}")))?
            .data()
            .to_vec();
        for i in 0..base.numel() {
            let x0 = base.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = x0 + step;
            let (f_plus, _, _) = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = x0 - step;
            let (f_minus, _, _) = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = x0;

            let numeric = (f_plus - f_minus) / (2.0 * step);
            let rel_err = relative_error(analytic[i], numeric);
            max_rel_err = max_rel_err.max(rel_err);
            entries.push(GradCheckEntry {
                param: name.clone(),
                index: i,
                analytic: analytic[i],
                numeric,
                rel_err,
            });
        }
    }

    Ok(GradCheckReport {
        entries,
        max_rel_err,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vector(rng: &mut ChaCha8Rng, len: usize) -> Tensor<f64> {
        Tensor::vector((0..len).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
    }

    #[test]
    fn quadratic_gradient_passes_and_report_carries_entries() {
        // loss = sum(x .* x), gradient 2x.
        let point = Tensor::vector(vec![0.7, -0.3, 1.2]).unwrap();
        let report = gradient_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum_all(sq)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
        assert_eq!(report.entries.len(), 3);
        assert!((report.entries[0].analytic - 1.4).abs() < 1e-12);
        assert!(report.flagged().is_empty());
    }

    #[test]
    fn relative_error_flags_real_discrepancies_only() {
        assert!(relative_error(1.0, 1.1) > DEFAULT_TOLERANCE);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        // Float dust around a true zero gradient stays under tolerance.
        assert!(relative_error(1e-9, -1e-9) < DEFAULT_TOLERANCE);
    }

    #[test]
    fn per_primitive_random_instances_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..100 {
            let x = random_vector(&mut rng, 6);
            let m = random_matrix(&mut rng, 6, 4);
            let which = case % 10;
            let report = gradient_check(
                |g, xn| {
                    let mn = g.constant(m.clone());
                    let out = match which {
                        0 => g.vecmat(xn, mn)?,
                        1 => {
                            let y = g.constant(random_vector(
                                &mut ChaCha8Rng::seed_from_u64(case as u64),
                                6,
                            ));
                            g.add(xn, y)?
                        }
                        2 => {
                            let y = g.constant(random_vector(
                                &mut ChaCha8Rng::seed_from_u64(case as u64),
                                6,
                            ));
                            g.mul(xn, y)?
                        }
                        3 => g.tanh(xn)?,
                        4 => g.sigmoid(xn)?,
                        5 => g.softmax(xn)?,
                        6 => {
                            let s = g.slice(xn, 0, 1)?;
                            g.mul_scalar(xn, s)?
                        }
                        7 => {
                            let sig = g.sigmoid(xn)?;
                            g.log_clamped(sig, 1e-12)?
                        }
                        8 => {
                            let rows = g.constant(random_matrix(
                                &mut ChaCha8Rng::seed_from_u64(1000 + case as u64),
                                3,
                                6,
                            ));
                            g.cosine_rows(xn, rows)?
                        }
                        _ => {
                            let a = g.slice(xn, 0, 3)?;
                            let b = g.slice(xn, 3, 3)?;
                            let st = g.stack_rows(&[a, b])?;
                            g.mean_rows(st)?
                        }
                    };
                    // Weighted sum makes the loss sensitive to each output.
                    let numel = g.value(out).numel();
                    let w = g.constant_vector(
                        (0..numel).map(|i| 0.3 + 0.17 * i as f64).collect(),
                    )?;
                    let flat = g.concat(&[out])?;
                    let weighted = g.mul(flat, w)?;
                    g.sum_all(weighted)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(
                report.passed(),
                "primitive case {which} (iteration {case}) failed: max rel err {}",
                report.max_rel_err
            );
        }
    }

    #[test]
    fn matmul_parameter_gradients_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = BTreeMap::new();
        params.insert("a".to_string(), random_matrix(&mut rng, 3, 4));
        params.insert("b".to_string(), random_matrix(&mut rng, 4, 2));
        let report = gradient_check_params(
            |g, nodes| {
                let c = g.matmul(nodes["a"], nodes["b"])?;
                let t = g.tanh(c)?;
                g.sum_all(t)
            },
            &params,
            1e-5,
            DEFAULT_TOLERANCE,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let point = Tensor::vector(vec![1.0]).unwrap();
        assert!(gradient_check(|g, x| g.sum_all(x), &point, 0.0).is_err());
    }
}
