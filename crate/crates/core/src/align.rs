//! Monotonic alignment search and duration handling.

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Monotone token-to-frame assignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alignment {
    /// Frames per token (0 for masked tokens).
    pub durations: Vec<usize>,
    /// Token index of every valid frame, in frame order.
    pub assignment: Vec<usize>,
}

impl Alignment {
    pub fn from_durations(durations: Vec<usize>) -> Self {
        let assignment = durations
            .iter()
            .enumerate()
            .flat_map(|(i, &d)| std::iter::repeat_n(i, d))
            .collect();
        Self {
            durations,
            assignment,
        }
    }
}

/// `log N(x; mu, I)` for one frame against one token mean.
pub fn gaussian_log_likelihood(x: &[f64], mu: &[f64]) -> f64 {
    let sq: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * sq - 0.5 * x.len() as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Most likely monotone surjective alignment of valid frames to valid tokens
/// under `N(target_t; mu_i, I)`.
///
/// Ties are broken toward staying on the current token while backtracking,
/// so token boundaries land at the earliest feasible frames.
pub fn mas_align(mu: &Tensor, target: &Tensor, token_mask: &[bool], frame_mask: &[bool]) -> Result<Alignment> {
    if mu.rank() != 2 || target.rank() != 2 || mu.cols() != target.cols() {
        return Err(Error::shape("mas_align", mu.shape(), target.shape()));
    }
    if token_mask.len() != mu.rows() || frame_mask.len() != target.rows() {
        return Err(Error::shape(
            "mas_align masks",
            &[mu.rows(), target.rows()],
            &[token_mask.len(), frame_mask.len()],
        ));
    }
    let tokens: Vec<usize> = (0..mu.rows()).filter(|&i| token_mask[i]).collect();
    let frames: Vec<usize> = (0..target.rows()).filter(|&t| frame_mask[t]).collect();
    let (n, t_len) = (tokens.len(), frames.len());
    if n == 0 {
        return Err(Error::invalid("mas_align needs at least one valid token"));
    }
    if t_len < n {
        return Err(Error::invalid(format!(
            "no monotone surjective alignment of {n} tokens onto {t_len} frames"
        )));
    }

    let ll = |i: usize, t: usize| gaussian_log_likelihood(target.row(frames[t]), mu.row(tokens[i]));
    let mut q = vec![f64::NEG_INFINITY; n * t_len];
    q[0] = ll(0, 0);
    for t in 1..t_len {
        for i in 0..n.min(t + 1) {
            let stay = q[i * t_len + t - 1];
            let advance = if i > 0 {
                q[(i - 1) * t_len + t - 1]
            } else {
                f64::NEG_INFINITY
            };
            q[i * t_len + t] = ll(i, t) + stay.max(advance);
        }
    }

    let mut compact = vec![0usize; t_len];
    let mut i = n - 1;
    for t in (0..t_len).rev() {
        compact[t] = i;
        if t > 0 && i > 0 {
            let stay = q[i * t_len + t - 1];
            let advance = q[(i - 1) * t_len + t - 1];
            if advance > stay {
                i -= 1;
            }
        }
    }
    debug_assert_eq!(i, 0);

    let mut durations = vec![0usize; mu.rows()];
    let assignment: Vec<usize> = compact.iter().map(|&k| tokens[k]).collect();
    for &tok in &assignment {
        durations[tok] += 1;
    }
    Ok(Alignment {
        durations,
        assignment,
    })
}

fn repeat_index(durations: &[usize]) -> Result<Vec<Option<usize>>> {
    if durations.iter().sum::<usize>() == 0 {
        return Err(Error::invalid("upsample needs at least one nonzero duration"));
    }
    Ok(durations
        .iter()
        .enumerate()
        .flat_map(|(i, &d)| std::iter::repeat_n(Some(i), d))
        .collect())
}

/// Repeats row `i` of `mu` `durations[i]` times.
pub fn upsample<'t>(mu: Var<'t>, durations: &[usize]) -> Result<Var<'t>> {
    if durations.len() != mu.shape()[0] {
        return Err(Error::shape("upsample", &mu.shape(), &[durations.len()]));
    }
    mu.gather_rows(repeat_index(durations)?)
}

/// Value-level [`upsample`].
pub fn upsample_tensor(mu: &Tensor, durations: &[usize]) -> Result<Tensor> {
    if durations.len() != mu.rows() {
        return Err(Error::shape("upsample", mu.shape(), &[durations.len()]));
    }
    let idx = repeat_index(durations)?;
    let cols = mu.cols();
    let mut data = Vec::with_capacity(idx.len() * cols);
    for i in idx.into_iter().flatten() {
        data.extend_from_slice(mu.row(i));
    }
    Tensor::new(vec![data.len() / cols, cols], data)
}

/// Synthesis-time durations: `round(exp(l)·scale)` with halves rounded up,
/// at least 1 for valid tokens and 0 for masked ones.
pub fn durations_from_log(log_durations: &[f64], frame_rate_scale: f64, token_mask: &[bool]) -> Vec<usize> {
    log_durations
        .iter()
        .zip(token_mask)
        .map(|(&l, &valid)| {
            if !valid {
                return 0;
            }
            let d = (l.exp() * frame_rate_scale + 0.5).floor();
            if d.is_finite() {
                (d.max(1.0)) as usize
            } else {
                1
            }
        })
        .collect()
}
