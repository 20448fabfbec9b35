//! Generalized dice loss and least-squares adversarial objectives.
//!
//! Values and gradients are accumulated in f64. The slice-level functions
//! accept any element convertible to f64 so they can be checked in double
//! precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub gdl_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 5.0,
            gdl_eps: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::config(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if !(self.gdl_eps > 0.0) {
            return Err(Error::config(format!(
                "gdl eps must be > 0, got {}",
                self.gdl_eps
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorLoss {
    pub total: f64,
    pub adversarial: f64,
    pub gdl: f64,
}

fn check_pair<T: Copy + Into<f64>>(a: &[T], b: &[T], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "{what}: lengths {} and {} differ",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::shape(format!("{what}: empty input")));
    }
    if a.iter().chain(b).any(|v| !(*v).into().is_finite()) {
        return Err(Error::shape(format!("{what}: non-finite input")));
    }
    Ok(())
}

/// Intermediate sums shared by the value and the gradient.
struct GdlParts {
    weights: Vec<f64>,
    intersection: f64,
    union: f64,
}

/// `y` and `yhat` are laid out as `(batch, classes, voxels)`.
fn gdl_parts<T: Copy + Into<f64>>(
    y: &[T],
    yhat: &[T],
    batch: usize,
    classes: usize,
    eps: f64,
) -> Result<GdlParts> {
    check_pair(y, yhat, "generalized dice")?;
    if batch == 0 || classes == 0 || y.len() % (batch * classes) != 0 {
        return Err(Error::shape(format!(
            "length {} is not batch {batch} x classes {classes} x voxels",
            y.len()
        )));
    }
    let voxels = y.len() / (batch * classes);
    let mut volume = vec![0.0f64; classes];
    let mut inter = vec![0.0f64; classes];
    let mut sums = vec![0.0f64; classes];
    for b in 0..batch {
        for (l, ((vol, int), sum)) in volume.iter_mut().zip(&mut inter).zip(&mut sums).enumerate() {
            let start = (b * classes + l) * voxels;
            for i in start..start + voxels {
                let (t, p) = (y[i].into(), yhat[i].into());
                *vol += t;
                *int += t * p;
                *sum += t + p;
            }
        }
    }
    let weights: Vec<f64> = volume.iter().map(|v| 1.0 / (v * v + eps)).collect();
    let intersection = weights.iter().zip(&inter).map(|(w, i)| w * i).sum();
    let union = weights.iter().zip(&sums).map(|(w, s)| w * s).sum();
    Ok(GdlParts {
        weights,
        intersection,
        union,
    })
}

fn gdl_from(parts: &GdlParts) -> f64 {
    if parts.union == 0.0 {
        return 0.0;
    }
    1.0 - 2.0 * parts.intersection / parts.union
}

pub fn generalized_dice<T: Copy + Into<f64>>(
    y: &[T],
    yhat: &[T],
    batch: usize,
    classes: usize,
    eps: f64,
) -> Result<f64> {
    Ok(gdl_from(&gdl_parts(y, yhat, batch, classes, eps)?))
}

/// Value and gradient with respect to `yhat`.
pub fn generalized_dice_grad<T: Copy + Into<f64>>(
    y: &[T],
    yhat: &[T],
    batch: usize,
    classes: usize,
    eps: f64,
) -> Result<(f64, Vec<f64>)> {
    let parts = gdl_parts(y, yhat, batch, classes, eps)?;
    let voxels = y.len() / (batch * classes);
    let (i_sum, u) = (parts.intersection, parts.union);
    let mut grad = vec![0.0f64; y.len()];
    if u != 0.0 {
        for (idx, g) in grad.iter_mut().enumerate() {
            let l = (idx / voxels) % classes;
            *g = -2.0 * parts.weights[l] * (y[idx].into() * u - i_sum) / (u * u);
        }
    }
    Ok((gdl_from(&parts), grad))
}

fn mse_to<T: Copy + Into<f64>>(scores: &[T], target: f64) -> (f64, Vec<f64>) {
    let n = scores.len() as f64;
    let mut value = 0.0;
    let grad = scores
        .iter()
        .map(|s| {
            let d = (*s).into() - target;
            value += d * d;
            2.0 * d / n
        })
        .collect();
    (value / n, grad)
}

/// `mean((real - 1)^2) + mean(fake^2)` with gradients for both fields.
pub fn discriminator_loss_grad<T: Copy + Into<f64>>(
    real: &[T],
    fake: &[T],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_pair(real, fake, "discriminator loss")?;
    let (lr, gr) = mse_to(real, 1.0);
    let (lf, gf) = mse_to(fake, 0.0);
    Ok((lr + lf, gr, gf))
}

/// Loss plus gradients with respect to the fake score field and `yhat`.
/// With `alpha == 0` the dice term is reported but contributes no gradient.
#[allow(clippy::type_complexity)]
pub fn generator_loss_grad<T: Copy + Into<f64>>(
    fake: &[T],
    y: &[T],
    yhat: &[T],
    batch: usize,
    classes: usize,
    cfg: &LossConfig,
) -> Result<(GeneratorLoss, Vec<f64>, Vec<f64>)> {
    cfg.validate()?;
    if fake.is_empty() || fake.iter().any(|v| !(*v).into().is_finite()) {
        return Err(Error::shape("generator loss: empty or non-finite scores"));
    }
    let (adversarial, d_fake) = mse_to(fake, 1.0);
    let (gdl, mut d_yhat) = generalized_dice_grad(y, yhat, batch, classes, cfg.gdl_eps)?;
    for g in &mut d_yhat {
        *g *= cfg.alpha;
    }
    let loss = GeneratorLoss {
        total: adversarial + cfg.alpha * gdl,
        adversarial,
        gdl,
    };
    Ok((loss, d_fake, d_yhat))
}

fn batch_classes(t: &Tensor) -> Result<(usize, usize)> {
    let (n, c, _) = t.dims5()?;
    Ok((n, c))
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn to_tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::from_vec(shape, data.into_iter().map(|v| v as f32).collect())
        .expect("gradient matches input shape")
}

/// Dice loss of a `(N, C, X, Y, Z)` probability batch against the truth.
pub fn generalized_dice_loss(y: &Tensor, yhat: &Tensor, eps: f64) -> Result<f64> {
    same_shape(y, yhat)?;
    let (n, c) = batch_classes(y)?;
    generalized_dice(y.data(), yhat.data(), n, c, eps)
}

pub fn generalized_dice_loss_grad(y: &Tensor, yhat: &Tensor, eps: f64) -> Result<(f64, Tensor)> {
    same_shape(y, yhat)?;
    let (n, c) = batch_classes(y)?;
    let (v, g) = generalized_dice_grad(y.data(), yhat.data(), n, c, eps)?;
    Ok((v, to_tensor(yhat.shape(), g)))
}

pub fn discriminator_loss(real: &Tensor, fake: &Tensor) -> Result<f64> {
    Ok(discriminator_loss_tensors(real, fake)?.0)
}

pub fn discriminator_loss_tensors(real: &Tensor, fake: &Tensor) -> Result<(f64, Tensor, Tensor)> {
    same_shape(real, fake)?;
    let (v, gr, gf) = discriminator_loss_grad(real.data(), fake.data())?;
    Ok((v, to_tensor(real.shape(), gr), to_tensor(fake.shape(), gf)))
}

pub fn generator_loss(
    fake: &Tensor,
    y: &Tensor,
    yhat: &Tensor,
    cfg: &LossConfig,
) -> Result<GeneratorLoss> {
    Ok(generator_loss_tensors(fake, y, yhat, cfg)?.0)
}

/// Loss with gradients for the fake score field and the prediction.
pub fn generator_loss_tensors(
    fake: &Tensor,
    y: &Tensor,
    yhat: &Tensor,
    cfg: &LossConfig,
) -> Result<(GeneratorLoss, Tensor, Tensor)> {
    same_shape(y, yhat)?;
    let (n, c) = batch_classes(y)?;
    let (loss, gf, gy) = generator_loss_grad(fake.data(), y.data(), yhat.data(), n, c, cfg)?;
    Ok((
        loss,
        to_tensor(fake.shape(), gf),
        to_tensor(yhat.shape(), gy),
    ))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::rng::StreamRng;

    const EPS: f64 = 1e-6;

    /// Straight transcription of the formula with explicit loops over
    /// class, sample and voxel.
    fn gdl_oracle(y: &[f64], p: &[f64], n: usize, c: usize, v: usize, eps: f64) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for l in 0..c {
            let mut vol = 0.0;
            for b in 0..n {
                for i in 0..v {
                    vol += y[(b * c + l) * v + i];
                }
            }
            let w = 1.0 / (vol * vol + eps);
            let mut inter = 0.0;
            let mut sum = 0.0;
            for b in 0..n {
                for i in 0..v {
                    let k = (b * c + l) * v + i;
                    inter += y[k] * p[k];
                    sum += y[k] + p[k];
                }
            }
            num += w * inter;
            den += w * sum;
        }
        1.0 - 2.0 * num / den
    }

    fn one_hot(labels: &[usize], n: usize, c: usize, v: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * c * v];
        for b in 0..n {
            for i in 0..v {
                out[(b * c + labels[b * v + i]) * v + i] = 1.0;
            }
        }
        out
    }

    fn random_probs(rng: &mut StreamRng, n: usize, c: usize, v: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * c * v];
        for b in 0..n {
            for i in 0..v {
                let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                for l in 0..c {
                    out[(b * c + l) * v + i] = raw[l] / s;
                }
            }
        }
        out
    }

    fn random_instance(rng: &mut StreamRng) -> (Vec<f64>, Vec<f64>, usize, usize) {
        let n = rng.gen_range(1..=2);
        let side = [
            rng.gen_range(1..=4),
            rng.gen_range(1..=4),
            rng.gen_range(1..=4),
        ];
        let v = side.iter().product();
        let labels: Vec<usize> = (0..n * v).map(|_| rng.gen_range(0..4)).collect();
        (one_hot(&labels, n, 4, v), random_probs(rng, n, 4, v), n, v)
    }

    #[test]
    fn gdl_matches_loop_oracle_on_random_instances() {
        let mut rng = StreamRng::seed_from_u64(11);
        for _ in 0..100 {
            let (y, p, n, v) = random_instance(&mut rng);
            let got = generalized_dice(&y, &p, n, 4, EPS).unwrap();
            let want = gdl_oracle(&y, &p, n, 4, v, EPS);
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn adversarial_losses_match_loop_oracles() {
        let mut rng = StreamRng::seed_from_u64(12);
        for _ in 0..100 {
            let len = rng.gen_range(1..=64);
            let real: Vec<f64> = (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let fake: Vec<f64> = (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut a = 0.0;
            let mut b = 0.0;
            for i in 0..len {
                a += (real[i] - 1.0) * (real[i] - 1.0);
                b += fake[i] * fake[i];
            }
            let want_d = a / len as f64 + b / len as f64;
            let (got_d, _, _) = discriminator_loss_grad(&real, &fake).unwrap();
            assert!((got_d - want_d).abs() < 1e-6);

            let (y, p, n, v) = random_instance(&mut rng);
            let alpha = rng.gen_range(0.0..10.0);
            let cfg = LossConfig {
                alpha,
                gdl_eps: EPS,
            };
            let mut adv = 0.0;
            for s in &fake {
                adv += (s - 1.0) * (s - 1.0);
            }
            adv /= len as f64;
            let want_g = adv + alpha * gdl_oracle(&y, &p, n, 4, v, EPS);
            let (got, _, _) = generator_loss_grad(&fake, &y, &p, n, 4, &cfg).unwrap();
            assert!((got.total - want_g).abs() < 1e-6);
            assert!((got.adversarial - adv).abs() < 1e-6);
        }
    }

    #[test]
    fn gdl_trivial_cases() {
        let labels = [0, 1, 2, 3, 1, 1, 0, 2];
        let y = one_hot(&labels, 1, 4, 8);
        assert!(generalized_dice(&y, &y, 1, 4, EPS).unwrap() <= 1e-6);
        let shifted: Vec<usize> = labels.iter().map(|l| (l + 1) % 4).collect();
        let p = one_hot(&shifted, 1, 4, 8);
        assert!((generalized_dice(&y, &p, 1, 4, EPS).unwrap() - 1.0).abs() < 1e-6);

        // all-background truth against a uniform prediction on 2x2x2
        let y = one_hot(&[0; 8], 1, 4, 8);
        let p = vec![0.25; 32];
        let w0 = 1.0 / (64.0 + EPS);
        let w_empty = 1.0 / EPS;
        let num = w0 * 8.0 * 0.25;
        let den = w0 * (8.0 + 2.0) + 3.0 * w_empty * 2.0;
        let want = 1.0 - 2.0 * num / den;
        let got = generalized_dice(&y, &p, 1, 4, EPS).unwrap();
        assert!((got - want).abs() < 1e-6);
        assert!((got - gdl_oracle(&y, &p, 1, 4, 8, EPS)).abs() < 1e-12);
    }

    #[test]
    fn discriminator_loss_examples() {
        let ones = Tensor::full(&[1, 1, 2, 2, 2], 1.0);
        let zeros = Tensor::zeros(&[1, 1, 2, 2, 2]);
        let half = Tensor::full(&[1, 1, 2, 2, 2], 0.5);
        assert_eq!(discriminator_loss(&ones, &zeros).unwrap(), 0.0);
        assert!((discriminator_loss(&half, &half).unwrap() - 0.5).abs() < 1e-12);
        assert!((discriminator_loss(&zeros, &ones).unwrap() - 2.0).abs() < 1e-12);
        let other = Tensor::zeros(&[1, 1, 1, 2, 2]);
        assert!(matches!(
            discriminator_loss(&ones, &other),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn generator_loss_examples() {
        let labels = [0, 1, 2, 3, 0, 0, 1, 2];
        let y = Tensor::from_vec(
            &[1, 4, 2, 2, 2],
            one_hot(&labels, 1, 4, 8)
                .into_iter()
                .map(|v| v as f32)
                .collect(),
        )
        .unwrap();
        let ones = Tensor::full(&[1, 1, 1, 1, 1], 1.0);
        let perfect = generator_loss(&ones, &y, &y, &LossConfig::default()).unwrap();
        assert!(perfect.total.abs() < 1e-6);

        let p = Tensor::full(&[1, 4, 2, 2, 2], 0.25);
        let fake = Tensor::full(&[1, 1, 1, 1, 1], 0.3);
        let at = |alpha| {
            generator_loss(
                &fake,
                &y,
                &p,
                &LossConfig {
                    alpha,
                    gdl_eps: EPS,
                },
            )
            .unwrap()
        };
        let pure = at(0.0);
        assert_eq!(pure.total, pure.adversarial);
        assert!(pure.gdl > 0.0);
        let (five, one) = (at(5.0), at(1.0));
        assert!((five.total - one.total - 4.0 * five.gdl).abs() < 1e-6);
        assert!(matches!(
            generator_loss(
                &fake,
                &y,
                &p,
                &LossConfig {
                    alpha: -1.0,
                    gdl_eps: EPS
                }
            ),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn non_finite_inputs_rejected() {
        let y = Tensor::full(&[1, 4, 1, 1, 2], 0.25);
        let mut p = y.clone();
        p.data_mut()[3] = f32::NAN;
        assert!(generalized_dice_loss(&y, &p, EPS).is_err());
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = StreamRng::seed_from_u64(13);
        let (n, c, v) = (1, 4, 8);
        let h = 1e-4;
        for _ in 0..5 {
            let labels: Vec<usize> = (0..v).map(|_| rng.gen_range(0..4)).collect();
            let y = one_hot(&labels, n, c, v);
            let p = random_probs(&mut rng, n, c, v);
            let (_, grad) = generalized_dice_grad(&y, &p, n, c, EPS).unwrap();
            for i in 0..p.len() {
                let (mut up, mut dn) = (p.clone(), p.clone());
                up[i] += h;
                dn[i] -= h;
                let fd = (generalized_dice(&y, &up, n, c, EPS).unwrap()
                    - generalized_dice(&y, &dn, n, c, EPS).unwrap())
                    / (2.0 * h);
                assert!(rel_err(grad[i], fd) < 1e-3, "gdl {i}: {} vs {fd}", grad[i]);
            }

            let real: Vec<f64> = (0..v).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let fake: Vec<f64> = (0..v).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let (_, gr, gf) = discriminator_loss_grad(&real, &fake).unwrap();
            let cfg = LossConfig::default();
            let (_, gfake, gyhat) = generator_loss_grad(&fake, &y, &p, n, c, &cfg).unwrap();
            for i in 0..v {
                let d = |r: &[f64], f: &[f64]| discriminator_loss_grad(r, f).unwrap().0;
                let (mut up, mut dn) = (real.clone(), real.clone());
                up[i] += h;
                dn[i] -= h;
                let fd = (d(&up, &fake) - d(&dn, &fake)) / (2.0 * h);
                assert!(rel_err(gr[i], fd) < 1e-3);
                let (mut up, mut dn) = (fake.clone(), fake.clone());
                up[i] += h;
                dn[i] -= h;
                let fd = (d(&real, &up) - d(&real, &dn)) / (2.0 * h);
                assert!(rel_err(gf[i], fd) < 1e-3);

                let g = |f: &[f64], q: &[f64]| {
                    generator_loss_grad(f, &y, q, n, c, &cfg).unwrap().0.total
                };
                let fd = (g(&up, &p) - g(&dn, &p)) / (2.0 * h);
                assert!(rel_err(gfake[i], fd) < 1e-3);
            }
            for i in 0..p.len() {
                let g = |q: &[f64]| {
                    generator_loss_grad(&fake, &y, q, n, c, &cfg)
                        .unwrap()
                        .0
                        .total
                };
                let (mut up, mut dn) = (p.clone(), p.clone());
                up[i] += h;
                dn[i] -= h;
                let fd = (g(&up) - g(&dn)) / (2.0 * h);
                assert!(rel_err(gyhat[i], fd) < 1e-3, "{i}: {} vs {fd}", gyhat[i]);
            }
        }
    }

    #[test]
    fn pure_gan_update_ignores_dice() {
        let y = one_hot(&[0, 1, 2, 3], 1, 4, 4);
        let p = vec![0.25; 16];
        let cfg = LossConfig {
            alpha: 0.0,
            gdl_eps: EPS,
        };
        let (loss, _, gy) = generator_loss_grad(&[0.2], &y, &p, 1, 4, &cfg).unwrap();
        assert!(loss.gdl > 0.0);
        assert!(gy.iter().all(|g| *g == 0.0));
    }

    proptest! {
        #[test]
        fn gdl_in_unit_interval(seed in any::<u64>()) {
            let mut rng = StreamRng::seed_from_u64(seed);
            let (y, p, n, _) = random_instance(&mut rng);
            let g = generalized_dice(&y, &p, n, 4, EPS).unwrap();
            prop_assert!((0.0..=1.0).contains(&g));
            prop_assert!(generalized_dice(&y, &y, n, 4, EPS).unwrap() <= 1e-6);
        }

        #[test]
        fn generator_loss_increasing_in_alpha(seed in any::<u64>(), a in 0.0f64..10.0, step in 0.01f64..5.0) {
            let mut rng = StreamRng::seed_from_u64(seed);
            let (y, p, n, _) = random_instance(&mut rng);
            let fake = [rng.gen_range(-1.0..1.0)];
            let total = |alpha| {
                generator_loss_grad(&fake, &y, &p, n, 4, &LossConfig { alpha, gdl_eps: EPS })
                    .unwrap()
                    .0
            };
            let (lo, hi) = (total(a), total(a + step));
            prop_assume!(lo.gdl > 0.0);
            prop_assert!(hi.total > lo.total);
        }
    }
}
