//! Central-difference gradient verification.

use super::{Graph, Result, Tensor, TensorError, Var};

/// Worst disagreement observed for one parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tolerance)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so entries where both
    /// gradients vanish compare as equal.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { epsilon: 1e-5, tolerance: 1e-4, abs_floor: 1e-6 }
    }
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` builds a scalar loss on a fresh graph from one `Var` per entry of
/// `params`; it must be deterministic.
pub fn finite_diff_check<F>(mut f: F, params: &[(String, Tensor)], cfg: GradCheckConfig) -> Result<CheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&cfg.epsilon) {
        return Err(TensorError::Usage(format!("epsilon {} outside [1e-7, 1e-4]", cfg.epsilon)));
    }
    let mut eval = |values: &[Tensor], with_grad: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), with_grad)).collect();
        let loss = f(&mut g, &vars)?;
        let value = g.value(loss).item()?;
        let grads = if with_grad {
            g.backward(loss)?;
            vars.iter().map(|&v| g.grad(v).cloned().unwrap()).collect()
        } else {
            Vec::new()
        };
        Ok((value, grads))
    };

    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let (base, analytic) = eval(&values, true)?;
    if !base.is_finite() {
        return Err(TensorError::Numeric { param: "<loss>".into(), detail: format!("loss is {base}") });
    }

    let mut report = Vec::with_capacity(params.len());
    for (p, (name, _)) in params.iter().enumerate() {
        let mut check = ParamCheck { name: name.clone(), max_rel_error: 0.0, max_abs_error: 0.0, worst_index: 0 };
        for k in 0..values[p].len() {
            let orig = values[p].data()[k];
            values[p].data_mut()[k] = orig + cfg.epsilon;
            let (up, _) = eval(&values, false)?;
            values[p].data_mut()[k] = orig - cfg.epsilon;
            let (down, _) = eval(&values, false)?;
            values[p].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * cfg.epsilon);
            let a = analytic[p].data()[k];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(TensorError::Numeric {
                    param: name.clone(),
                    detail: format!("entry {k}: analytic {a}, numeric {numeric}"),
                });
            }
            let rel = rel_error(a, numeric, cfg.abs_floor);
            check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
            if rel > check.max_rel_error {
                check.max_rel_error = rel;
                check.worst_index = k;
            }
        }
        report.push(check);
    }
    Ok(CheckReport { params: report, tolerance: cfg.tolerance })
}
