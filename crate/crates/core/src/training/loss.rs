use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};

/// Mean negative log-softmax of the true class over a `[N, C]` batch.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// Mean column cosine between two `[N, H, T, T]` maps, over samples, heads
/// and input tokens. Zero-norm columns contribute 0.
pub fn mean_map_cosine(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a).len() != 4 {
        return Err(Error::dim(format!("maps must be [N, H, T, T], got {:?}", tape.shape(a))));
    }
    // columns A[n, h, :, t] run along axis 2
    let c = tape.cosine(a, b, 2)?;
    Ok(tape.mean(c))
}

/// `CE + λ · Σ_{l=0}^{reg_blocks} meanCos(A^l, A^{l+1})` over the raw maps.
///
/// Needs `reg_blocks + 2` maps, since the sum covers `reg_blocks + 1`
/// adjacent pairs. With `λ = 0` this is exactly the cross-entropy.
pub fn similarity_regularized_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    maps: &[Var],
    lambda: f64,
    reg_blocks: usize,
) -> Result<Var> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::param(format!("lambda {lambda} must be finite and non-negative")));
    }
    let ce = cross_entropy(tape, logits, labels)?;
    if lambda == 0.0 {
        return Ok(ce);
    }
    if reg_blocks + 2 > maps.len() {
        return Err(Error::param(format!(
            "reg_blocks {reg_blocks} needs {} maps, got {}",
            reg_blocks + 2,
            maps.len()
        )));
    }
    let mut reg = mean_map_cosine(tape, maps[0], maps[1])?;
    for l in 1..=reg_blocks {
        let s = mean_map_cosine(tape, maps[l], maps[l + 1])?;
        reg = tape.add(reg, s)?;
    }
    let reg = tape.scale(reg, lambda);
    tape.add(ce, reg)
}

/// Regularised block count used at the depths the method was specified for.
pub fn default_reg_blocks(num_blocks: usize) -> Option<usize> {
    match num_blocks {
        16 => Some(4),
        24 => Some(8),
        32 => Some(12),
        _ => None,
    }
}
