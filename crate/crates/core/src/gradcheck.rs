//! Central finite-difference check of hand-derived gradients.

use std::fmt;

use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// `|a - f| / max(|a|, |f|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.blocks.iter().all(|b| b.max_rel_error < tolerance)
    }

    pub fn failing(&self, tolerance: f64) -> Vec<&BlockReport> {
        self.blocks
            .iter()
            .filter(|b| !(b.max_rel_error < tolerance))
            .collect()
    }

    pub fn block(&self, name: &str) -> Option<&BlockReport> {
        self.blocks.iter().find(|b| b.name == name)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "block,entries,max_rel_error,worst_index,analytic,numeric"
        )?;
        for b in &self.blocks {
            writeln!(
                f,
                "{},{},{:.3e},{},{:.9e},{:.9e}",
                b.name,
                b.entries,
                b.max_rel_error,
                b.worst_index,
                b.worst_analytic,
                b.worst_numeric
            )?;
        }
        Ok(())
    }
}

/// Compares `analytic[i]` with central differences of `loss` with respect to
/// every element of `blocks[i]`. `loss` receives all blocks, one of them
/// perturbed. Never fails; non-finite differences show up as infinite error.
pub fn grad_check<F>(
    names: &[&str],
    blocks: &[Tensor],
    analytic: &[Tensor],
    loss: F,
    eps: f64,
) -> GradCheckReport
where
    F: Fn(&[Tensor]) -> f64,
{
    assert_eq!(names.len(), blocks.len(), "one name per block");
    assert_eq!(analytic.len(), blocks.len(), "one gradient per block");
    let mut work: Vec<Tensor> = blocks.to_vec();
    let mut report = GradCheckReport::default();
    for (b, name) in names.iter().enumerate() {
        assert_eq!(
            work[b].shape(),
            analytic[b].shape(),
            "gradient shape for {name}"
        );
        let mut block = BlockReport {
            name: name.to_string(),
            entries: work[b].len(),
            max_rel_error: 0.0,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for i in 0..work[b].len() {
            let orig = work[b].data()[i];
            work[b].data_mut()[i] = orig + eps;
            let plus = loss(&work);
            work[b].data_mut()[i] = orig - eps;
            let minus = loss(&work);
            work[b].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[b].data()[i];
            let err = if numeric.is_finite() && a.is_finite() {
                relative_error(a, numeric)
            } else {
                f64::INFINITY
            };
            if err > block.max_rel_error {
                block.max_rel_error = err;
                block.worst_index = i;
                block.worst_analytic = a;
                block.worst_numeric = numeric;
            }
        }
        report.blocks.push(block);
    }
    report
}
