use crate::error::{GtpError, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Normalized-temperature cross entropy over `2K` projections.
///
/// Rows `2m` and `2m+1` are the two views of patch `m`. For each row `i`
/// with partner `j`, `l(i,j) = -log(exp(sim(i,j)/τ) / Σ_{k≠i} exp(sim(i,k)/τ))`
/// with cosine `sim`; the result is the mean over all `2K` rows, which
/// covers both `(i,j)` and `(j,i)`.
pub fn nt_xent_loss(tape: &mut Tape, z: Var, tau: f64) -> Result<Var> {
    let rows = tape.value(z).rows();
    if !(tau > 0.0) {
        return Err(GtpError::invalid(format!("temperature {tau} must be positive")));
    }
    if rows < 2 || rows % 2 != 0 {
        return Err(GtpError::invalid(format!("{rows} rows is not 2K views with K >= 1")));
    }
    let unit = tape.l2_normalize_rows(z)?;
    let unit_t = tape.transpose(unit)?;
    let sim = tape.matmul(unit, unit_t)?;
    let logits = tape.scale(sim, 1.0 / tau)?;
    let partners: Vec<usize> = (0..rows).map(|i| i ^ 1).collect();
    tape.cross_entropy_rows(logits, &partners, true)
}

/// Loss value without keeping a tape around.
pub fn nt_xent_value(z: &Tensor, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(z.clone());
    let loss = nt_xent_loss(&mut tape, v, tau)?;
    Ok(tape.value(loss).data()[0])
}
