use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing tape gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (leaf index, element index) of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_ERR_FLOOR: f64 = 1e-3;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Checks the gradient of the scalar computation `f` at `leaves`.
///
/// `f` is rebuilt on a fresh tape for every evaluation; it receives the
/// leaf handles in the order given.
pub fn grad_check<F>(f: F, leaves: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
        tol,
    };
    let mut probe = leaves.to_vec();
    for (li, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var);
        for ei in 0..leaves[li].len() {
            let orig = leaves[li].data()[ei];
            probe[li].data_mut()[ei] = orig + h;
            let up = eval(&probe)?;
            probe[li].data_mut()[ei] = orig - h;
            let down = eval(&probe)?;
            probe[li].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = rel_err(analytic.data()[ei], numeric);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (li, ei);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_passes_tight_tolerance() {
        let report = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            },
            &[Tensor::vector(vec![1.0, 2.0])],
            1e-6,
            1e-8,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.checked, 2);
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // relu at a kink: one-sided differences disagree with the zero subgradient
        let report = grad_check(
            |t, v| {
                let r = t.relu(v[0])?;
                t.sum(r)
            },
            &[Tensor::vector(vec![0.0])],
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
    }
}
