use serde::{Deserialize, Serialize};

use crate::decoder::FlowDecoder;
use crate::error::{Error, Result};
use crate::sequence::JointFrameSequence;
use crate::tensor::{Rng, Tape, Tensor, Var};

/// Lower end of the diffusion-time interval used by score matching.
pub const SM_T_EPS: f64 = 1e-5;

/// Anything that maps `(x_t, t, mu)` to a `T×D` output.
pub trait VectorField {
    fn predict<'t>(&self, tape: &'t Tape, x_t: Var<'t>, t: f64, mu: Var<'t>, mask: &[bool]) -> Result<Var<'t>>;
}

impl VectorField for FlowDecoder {
    fn predict<'t>(&self, tape: &'t Tape, x_t: Var<'t>, t: f64, mu: Var<'t>, mask: &[bool]) -> Result<Var<'t>> {
        self.forward(tape, x_t, t, mu, mask)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OtcfmConfig {
    pub sigma_min: f64,
}

impl Default for OtcfmConfig {
    fn default() -> Self {
        Self { sigma_min: 1e-4 }
    }
}

impl OtcfmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sigma_min) {
            return Err(Error::Config(format!("sigma_min {} must lie in [0, 1)", self.sigma_min)));
        }
        Ok(())
    }
}

/// Linear variance-preserving schedule `β_t = β₀ + (β₁ − β₀)t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreMatchingConfig {
    pub beta_0: f64,
    pub beta_1: f64,
}

impl Default for ScoreMatchingConfig {
    fn default() -> Self {
        Self {
            beta_0: 0.05,
            beta_1: 20.0,
        }
    }
}

impl ScoreMatchingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.beta_0 && self.beta_0 < self.beta_1) {
            return Err(Error::Config(format!(
                "score-matching schedule needs 0 < beta_0 < beta_1, got {} and {}",
                self.beta_0, self.beta_1
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.beta_0 + (self.beta_1 - self.beta_0) * t
    }

    /// `∫₀ᵗ β_s ds`.
    pub fn integral(&self, t: f64) -> f64 {
        self.beta_0 * t + 0.5 * (self.beta_1 - self.beta_0) * t * t
    }

    /// Mean decay `exp(-½∫β)` of the perturbation kernel.
    pub fn mean_coef(&self, t: f64) -> f64 {
        (-0.5 * self.integral(t)).exp()
    }

    /// Perturbation-kernel variance `1 − exp(-∫β)`.
    pub fn variance(&self, t: f64) -> f64 {
        -(-self.integral(t)).exp_m1()
    }
}

/// Mean of `(pred − target)²` over valid rows and every channel.
pub fn masked_mse<'t>(pred: Var<'t>, target: Var<'t>, mask: &[bool]) -> Result<Var<'t>> {
    let valid = mask.iter().filter(|&&m| m).count();
    if valid == 0 {
        return Err(Error::invalid("loss over a fully masked sequence"));
    }
    let cols = pred.value().cols();
    Ok(pred
        .sub(target)?
        .mask_rows(mask)?
        .square()
        .sum()
        .scale(1.0 / (valid * cols) as f64))
}

fn check_aligned(x1: &JointFrameSequence, mu_frames: &Var<'_>) -> Result<()> {
    if x1.frames.shape() != mu_frames.shape().as_slice() {
        return Err(Error::shape("loss inputs", x1.frames.shape(), &mu_frames.shape()));
    }
    Ok(())
}

/// `x_t = (1 − (1 − σ)t)·x₀ + t·x₁` and target `u = x₁ − (1 − σ)·x₀`.
pub fn otcfm_interpolant(x0: &Tensor, x1: &Tensor, t: f64, sigma_min: f64) -> Result<(Tensor, Tensor)> {
    let a = 1.0 - (1.0 - sigma_min) * t;
    let x_t = x0.zip_map(x1, |n, d| a * n + t * d)?;
    let u = x0.zip_map(x1, |n, d| d - (1.0 - sigma_min) * n)?;
    Ok((x_t, u))
}

/// OT-CFM regression at a given `(t, x₀)`.
pub fn otcfm_loss_at<'t, F: VectorField>(
    tape: &'t Tape,
    x1: &JointFrameSequence,
    mu_frames: Var<'t>,
    model: &F,
    cfg: &OtcfmConfig,
    t: f64,
    x0: &Tensor,
) -> Result<Var<'t>> {
    check_aligned(x1, &mu_frames)?;
    let (x_t, u) = otcfm_interpolant(x0, &x1.frames, t, cfg.sigma_min)?;
    let v = model.predict(tape, tape.constant(x_t), t, mu_frames, &x1.mask)?;
    masked_mse(v, tape.constant(u), &x1.mask)
}

/// OT-CFM loss with `t ~ U[0,1]` and `x₀ ~ N(0, I)` drawn from `rng`.
pub fn otcfm_loss<'t, F: VectorField>(
    tape: &'t Tape,
    x1: &JointFrameSequence,
    mu_frames: Var<'t>,
    model: &F,
    cfg: &OtcfmConfig,
    rng: &mut Rng,
) -> Result<Var<'t>> {
    let t = rng.uniform();
    let x0 = Tensor::gaussian(rng, x1.frames.shape());
    otcfm_loss_at(tape, x1, mu_frames, model, cfg, t, &x0)
}

/// Score of the perturbation kernel for a network output `out`, which
/// estimates the injected noise: `s = −out/σ_t`.
pub fn score_from_output(out: &Tensor, cfg: &ScoreMatchingConfig, t: f64) -> Tensor {
    let sigma = cfg.variance(t).sqrt();
    out.scale(-1.0 / sigma)
}

/// Denoising score matching at a given `(t, z)`.
///
/// `x_t = a_t·x₁ + σ_t·z`; the weighted objective `σ_t²‖s − (−z/σ_t)‖²` with
/// `s = −out/σ_t` reduces to `‖out − z‖²`.
pub fn score_matching_loss_at<'t, F: VectorField>(
    tape: &'t Tape,
    x1: &JointFrameSequence,
    mu_frames: Var<'t>,
    model: &F,
    cfg: &ScoreMatchingConfig,
    t: f64,
    z: &Tensor,
) -> Result<Var<'t>> {
    check_aligned(x1, &mu_frames)?;
    let a = cfg.mean_coef(t);
    let sigma = cfg.variance(t).sqrt();
    let x_t = x1.frames.zip_map(z, |d, n| a * d + sigma * n)?;
    let out = model.predict(tape, tape.constant(x_t), t, mu_frames, &x1.mask)?;
    masked_mse(out, tape.constant(z.clone()), &x1.mask)
}

/// Score-matching loss with `t ~ U[ε, 1]`, `z ~ N(0, I)`.
pub fn score_matching_loss<'t, F: VectorField>(
    tape: &'t Tape,
    x1: &JointFrameSequence,
    mu_frames: Var<'t>,
    model: &F,
    cfg: &ScoreMatchingConfig,
    rng: &mut Rng,
) -> Result<Var<'t>> {
    let t = SM_T_EPS + (1.0 - SM_T_EPS) * rng.uniform();
    let z = Tensor::gaussian(rng, x1.frames.shape());
    score_matching_loss_at(tape, x1, mu_frames, model, cfg, t, &z)
}

/// Mean over valid frames of `½‖x₁ − μ‖² + (D/2)·ln 2π`.
pub fn prior_loss<'t>(mu_frames: Var<'t>, x1: &Tensor, mask: &[bool]) -> Result<Var<'t>> {
    let tape = mu_frames.tape();
    if x1.shape() != mu_frames.shape().as_slice() || mask.len() != x1.rows() {
        return Err(Error::shape("prior_loss", x1.shape(), &mu_frames.shape()));
    }
    let valid = mask.iter().filter(|&&m| m).count();
    if valid == 0 {
        return Err(Error::invalid("prior loss over a fully masked sequence"));
    }
    let d = x1.cols() as f64;
    let sq = mu_frames
        .sub(tape.constant(x1.clone()))?
        .mask_rows(mask)?
        .square()
        .sum()
        .scale(0.5 / valid as f64);
    let konst = 0.5 * d * (2.0 * std::f64::consts::PI).ln();
    sq.add(tape.constant(Tensor::scalar(konst)))
}

/// MSE between predicted log-durations and `log(d + 1e-8)` over valid tokens.
pub fn duration_loss<'t>(predicted: Var<'t>, durations: &[usize], token_mask: &[bool]) -> Result<Var<'t>> {
    let tape = predicted.tape();
    if predicted.shape() != [durations.len()] || token_mask.len() != durations.len() {
        return Err(Error::shape("duration_loss", &predicted.shape(), &[durations.len()]));
    }
    let valid = token_mask.iter().filter(|&&m| m).count();
    if valid == 0 {
        return Err(Error::invalid("duration loss with no valid tokens"));
    }
    let target: Vec<f64> = durations.iter().map(|&d| (d as f64 + 1e-8).ln()).collect();
    Ok(predicted
        .sub(tape.constant(Tensor::vector(target)))?
        .mask_rows(token_mask)?
        .square()
        .sum()
        .scale(1.0 / valid as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Returns a fixed tensor regardless of input.
    struct Fixed(Tensor);

    impl VectorField for Fixed {
        fn predict<'t>(&self, tape: &'t Tape, _: Var<'t>, _: f64, _: Var<'t>, _: &[bool]) -> Result<Var<'t>> {
            Ok(tape.constant(self.0.clone()))
        }
    }

    /// Returns `(x1 - x_t)/(1 - t)`-style exact target, given knowledge of x₀.
    struct Oracle {
        target: Tensor,
    }

    impl VectorField for Oracle {
        fn predict<'t>(&self, tape: &'t Tape, _: Var<'t>, _: f64, _: Var<'t>, _: &[bool]) -> Result<Var<'t>> {
            Ok(tape.constant(self.target.clone()))
        }
    }

    fn seq(rng: &mut Rng, t: usize, d: usize) -> JointFrameSequence {
        JointFrameSequence::new(Tensor::gaussian(rng, &[t, d]), d - 1, 1, 10.0).unwrap()
    }

    #[test]
    fn exact_field_has_zero_loss() {
        let mut rng = Rng::new(0, 0);
        let x1 = seq(&mut rng, 5, 3);
        let x0 = Tensor::gaussian(&mut rng, &[5, 3]);
        let cfg = OtcfmConfig::default();
        let (_, u) = otcfm_interpolant(&x0, &x1.frames, 0.37, cfg.sigma_min).unwrap();
        let tape = Tape::empty();
        let mu = tape.constant(Tensor::zeros(&[5, 3]));
        let loss = otcfm_loss_at(&tape, &x1, mu, &Oracle { target: u }, &cfg, 0.37, &x0).unwrap();
        assert_eq!(loss.value().item(), 0.0);
    }

    #[test]
    fn interpolant_endpoints() {
        let mut rng = Rng::new(1, 0);
        let x0 = Tensor::gaussian(&mut rng, &[4, 2]);
        let x1 = Tensor::gaussian(&mut rng, &[4, 2]);
        let (xt, u) = otcfm_interpolant(&x0, &x1, 0.0, 0.0).unwrap();
        assert_eq!(xt, x0);
        assert_eq!(u, x1.sub(&x0).unwrap());
        let sigma = 1e-4;
        let (xt1, _) = otcfm_interpolant(&x0, &x1, 1.0, sigma).unwrap();
        let expect = x0.zip_map(&x1, |n, d| sigma * n + d).unwrap();
        assert!(xt1.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn constant_model_loss_matches_closed_form() {
        // E‖u − c‖² per element = (x1 − c)² + (1 − σ)² averaged over elements.
        let mut rng = Rng::new(2, 0);
        let x1 = seq(&mut rng, 4, 3);
        let c = Tensor::full(&[4, 3], 0.25);
        let cfg = OtcfmConfig::default();
        let model = Fixed(c.clone());
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let tape = Tape::empty();
            let mu = tape.constant(Tensor::zeros(&[4, 3]));
            acc += otcfm_loss(&tape, &x1, mu, &model, &cfg, &mut rng).unwrap().value().item();
        }
        let mc = acc / n as f64;
        let s = 1.0 - cfg.sigma_min;
        let exact = x1.frames.data().iter().map(|v| (v - 0.25).powi(2) + s * s).sum::<f64>() / 12.0;
        assert!(((mc - exact) / exact).abs() < 0.01, "mc {mc} exact {exact}");
    }

    #[test]
    fn masked_frames_do_not_contribute() {
        let mut rng = Rng::new(3, 0);
        let mut frames = Tensor::gaussian(&mut rng, &[5, 2]);
        let mask = vec![true, true, true, false, false];
        let x1a = JointFrameSequence::with_mask(frames.clone(), 1, 1, mask.clone(), 10.0).unwrap();
        frames.data_mut()[8] = 99.0;
        let x1b = JointFrameSequence::with_mask(frames, 1, 1, mask.clone(), 10.0).unwrap();
        let x0 = Tensor::gaussian(&mut rng, &[5, 2]);
        let cfg = OtcfmConfig::default();
        let model = Fixed(Tensor::zeros(&[5, 2]));
        let tape = Tape::empty();
        let mu = tape.constant(Tensor::zeros(&[5, 2]));
        let la = otcfm_loss_at(&tape, &x1a, mu, &model, &cfg, 0.5, &x0).unwrap().value().item();
        let lb = otcfm_loss_at(&tape, &x1b, mu, &model, &cfg, 0.5, &x0).unwrap().value().item();
        assert_eq!(la, lb);
        let za = score_matching_loss_at(&tape, &x1a, mu, &model, &ScoreMatchingConfig::default(), 0.5, &x0).unwrap();
        let zb = score_matching_loss_at(&tape, &x1b, mu, &model, &ScoreMatchingConfig::default(), 0.5, &x0).unwrap();
        assert_eq!(za.value().item(), zb.value().item());
        let pa = prior_loss(mu, &x1a.frames, &mask).unwrap().value().item();
        let pb = prior_loss(mu, &x1b.frames, &mask).unwrap().value().item();
        assert_eq!(pa, pb);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let mut rng = Rng::new(4, 0);
        let x1 = seq(&mut rng, 5, 3);
        let tape = Tape::empty();
        let mu = tape.constant(Tensor::zeros(&[4, 3]));
        let model = Fixed(Tensor::zeros(&[5, 3]));
        assert!(otcfm_loss(&tape, &x1, mu, &model, &OtcfmConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = ScoreMatchingConfig::default();
        assert!(cfg.variance(SM_T_EPS) <= 1e-4);
        let expected = (-0.5f64 * (0.05 + (20.0 - 0.05) / 2.0)).exp();
        assert!((cfg.mean_coef(1.0) - expected).abs() < 1e-15);
        assert!((cfg.mean_coef(1.0) - (-5.0125f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn prior_loss_cases() {
        let tape = Tape::empty();
        let x = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mu = tape.constant(x.clone());
        let l = prior_loss(mu, &x, &[true; 3]).unwrap().value().item();
        assert!((l - (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);

        let mut rng = Rng::new(6, 0);
        let m = Tensor::gaussian(&mut rng, &[3, 2]);
        let l = prior_loss(tape.constant(m.clone()), &x, &[true; 3]).unwrap().value().item();
        let direct: f64 = (0..3)
            .map(|i| {
                let sq: f64 = (0..2).map(|j| (x.get(i, j) - m.get(i, j)).powi(2)).sum();
                0.5 * sq + (2.0 * std::f64::consts::PI).ln()
            })
            .sum::<f64>()
            / 3.0;
        assert!((l - direct).abs() < 1e-12);
    }

    #[test]
    fn duration_loss_cases() {
        let tape = Tape::empty();
        let durs = [1usize, 3, 5];
        let perfect: Vec<f64> = durs.iter().map(|&d| (d as f64 + 1e-8).ln()).collect();
        let l = duration_loss(tape.constant(Tensor::vector(perfect)), &durs, &[true; 3]).unwrap();
        assert_eq!(l.value().item(), 0.0);
        assert!((1.0f64 + 1e-8).ln().abs() < 1e-7);

        let pred = [0.3, -0.2, 1.1];
        let l = duration_loss(tape.constant(Tensor::vector(pred.to_vec())), &durs, &[true, false, true]).unwrap();
        let direct = ((0.3 - (1.0f64 + 1e-8).ln()).powi(2) + (1.1 - (5.0f64 + 1e-8).ln()).powi(2)) / 2.0;
        assert!((l.value().item() - direct).abs() < 1e-12);
    }
}
