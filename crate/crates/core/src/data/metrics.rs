use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sequence::JointFrameSequence;
use crate::tensor::Rng;

/// Frames per set used by [`energy_distance`].
pub const ENERGY_MAX_FRAMES: usize = 10_000;

fn inv_sqrt(s: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(s.clone());
    let top = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let d = eig
        .eigenvalues
        .map(|l| if l > 1e-10 * top { 1.0 / l.sqrt() } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Largest canonical correlation between the acoustic and motion channels.
///
/// Frames are centered per utterance; the per-utterance covariance blocks
/// are averaged (weighted by frame count) before the canonical analysis.
pub fn cross_modal_dependence(samples: &[JointFrameSequence]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::invalid("cross-modal dependence needs at least two samples"));
    }
    let (da, dm) = (samples[0].acoustic_dim, samples[0].motion_dim);
    if da == 0 || dm == 0 {
        return Err(Error::invalid("both modalities need at least one channel"));
    }
    let d = da + dm;
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut count = 0usize;
    for s in samples {
        if s.acoustic_dim != da || s.motion_dim != dm {
            return Err(Error::shape("cross_modal_dependence", &[da, dm], &[s.acoustic_dim, s.motion_dim]));
        }
        let rows: Vec<&[f64]> = (0..s.len()).filter(|&t| s.mask[t]).map(|t| s.frames.row(t)).collect();
        if rows.is_empty() {
            continue;
        }
        let mut mean = vec![0.0; d];
        for r in &rows {
            mean.iter_mut().zip(*r).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
        for r in &rows {
            let c: Vec<f64> = r.iter().zip(&mean).map(|(v, m)| v - m).collect();
            for i in 0..d {
                for j in i..d {
                    cov[(i, j)] += c[i] * c[j];
                }
            }
        }
        count += rows.len();
    }
    for i in 0..d {
        for j in 0..i {
            cov[(i, j)] = cov[(j, i)];
        }
    }
    cov /= count.max(1) as f64;
    let scale = (0..d).map(|i| cov[(i, i)]).fold(0.0f64, f64::max);
    if let Some(c) = (0..d).find(|&i| !(cov[(i, i)] > 1e-12 * scale.max(1e-300))) {
        return Err(Error::Numerical(format!("channel {c} is constant within every utterance")));
    }
    let sxx = cov.view((0, 0), (da, da)).into_owned();
    let syy = cov.view((da, da), (dm, dm)).into_owned();
    let sxy = cov.view((0, da), (da, dm)).into_owned();
    let m = inv_sqrt(&sxx) * sxy * inv_sqrt(&syy);
    let top = m.singular_values().iter().cloned().fold(0.0f64, f64::max);
    Ok(top.clamp(0.0, 1.0))
}

fn pooled(samples: &[JointFrameSequence]) -> Result<(usize, Vec<f64>)> {
    let d = samples.first().map_or(0, |s| s.frames.cols());
    let mut out = Vec::new();
    for s in samples {
        if s.frames.cols() != d {
            return Err(Error::shape("energy_distance", &[d], &[s.frames.cols()]));
        }
        for t in 0..s.len() {
            if s.mask[t] {
                out.extend_from_slice(s.frames.row(t));
            }
        }
    }
    Ok((d, out))
}

fn subsample(d: usize, data: Vec<f64>, mut rng: Rng) -> Vec<f64> {
    let n = data.len() / d.max(1);
    if n <= ENERGY_MAX_FRAMES {
        return data;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..ENERGY_MAX_FRAMES {
        let j = i + rng.below(n - i);
        idx.swap(i, j);
    }
    idx.truncate(ENERGY_MAX_FRAMES);
    idx.sort_unstable();
    idx.iter().flat_map(|&i| data[i * d..(i + 1) * d].iter().copied()).collect()
}

/// Mean Euclidean distance over all ordered pairs (a V-statistic).
fn mean_distance(d: usize, a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() / d, b.len() / d);
    let total: f64 = (0..na)
        .into_par_iter()
        .map(|i| {
            let x = &a[i * d..(i + 1) * d];
            b.chunks_exact(d)
                .map(|y| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
                .sum::<f64>()
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    total / (na * nb) as f64
}

/// Energy distance `2E‖X − Y‖ − E‖X − X'‖ − E‖Y − Y'‖` on pooled valid
/// frames, each set subsampled to at most [`ENERGY_MAX_FRAMES`].
pub fn energy_distance(a: &[JointFrameSequence], b: &[JointFrameSequence], rng: &Rng) -> Result<f64> {
    let (da, xa) = pooled(a)?;
    let (db, xb) = pooled(b)?;
    if xa.is_empty() || xb.is_empty() {
        return Err(Error::invalid("energy distance needs two non-empty sample sets"));
    }
    if da != db {
        return Err(Error::shape("energy_distance", &[da], &[db]));
    }
    let sub = rng.named("energy.subsample");
    let xa = subsample(da, xa, sub.clone());
    let xb = subsample(da, xb, sub);
    Ok(energy_distance_raw(da, &xa, &xb))
}

/// [`energy_distance`] on row-major point sets of dimension `d`, without
/// subsampling.
pub fn energy_distance_raw(d: usize, a: &[f64], b: &[f64]) -> f64 {
    let ab = mean_distance(d, a, b);
    let aa = mean_distance(d, a, a);
    let bb = mean_distance(d, b, b);
    (2.0 * ab - aa - bb).max(0.0)
}
