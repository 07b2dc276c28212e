//! Training losses and image-quality metrics.

use crate::error::{Error, Result};
use crate::params::kaiming_uniform;
use crate::rng::{stream, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of the perceptual term; `1 - lambda` weights Charbonnier.
    pub lambda: f64,
    pub epsilon: f64,
    pub reduction: Reduction,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            epsilon: 1e-3,
            reduction: Reduction::Sum,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda {} outside [0,1]",
                self.lambda
            )));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Config(format!(
                "epsilon {} must be positive",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

fn same_shape<T: Real>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa.len() != sb.len() {
        return Err(Error::Rank {
            op,
            expected: sa.len(),
            found: sb.to_vec(),
        });
    }
    for (&x, &y) in sa.iter().zip(sb) {
        if x != y {
            return Err(Error::Dimension {
                op,
                axis: "extent",
                expected: x,
                found: y,
            });
        }
    }
    Ok(())
}

/// `sum sqrt((pred - ref)^2 + eps^2)` over every element (or the mean).
pub fn charbonnier<T: Real>(
    tape: &mut Tape<T>,
    pred: Var,
    reference: Var,
    eps: f64,
    red: Reduction,
) -> Result<Var> {
    same_shape(tape, "charbonnier", pred, reference)?;
    let d = tape.sub(pred, reference)?;
    let d2 = tape.square(d)?;
    let s = tape.add_scalar(d2, T::of(eps * eps))?;
    let r = tape.sqrt(s)?;
    match red {
        Reduction::Sum => tape.sum(r),
        Reduction::Mean => tape.mean(r),
    }
}

/// Plain `sum |pred - ref|`, the loss of the l1-only ablation.
pub fn l1<T: Real>(tape: &mut Tape<T>, pred: Var, reference: Var, red: Reduction) -> Result<Var> {
    same_shape(tape, "l1", pred, reference)?;
    let d = tape.sub(pred, reference)?;
    let a = tape.abs(d)?;
    match red {
        Reduction::Sum => tape.sum(a),
        Reduction::Mean => tape.mean(a),
    }
}

pub const FEATURE_CHANNELS: [usize; 6] = [3, 8, 16, 16, 32, 32];

/// Frozen random conv feature extractor: five 3x3 conv + ReLU stages,
/// stride 2 from the second stage on.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNet<T> {
    pub layers: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Real> FeatureNet<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = stream(seed, Stream::FeatureNet);
        let layers = FEATURE_CHANNELS
            .windows(2)
            .map(|io| {
                // ReLU gain: bound sqrt(6 / fan_in).
                let w: Tensor<T> = kaiming_uniform(&[io[1], io[0], 3, 3], &mut rng);
                (w.map(|v| v * T::of(2f64.sqrt())), Tensor::zeros(&[io[1]]))
            })
            .collect();
        Self { layers }
    }

    /// Places the weights on the tape as constants: they never receive
    /// gradients.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<(Var, Var)> {
        self.layers
            .iter()
            .map(|(w, b)| (tape.constant(w.clone()), tape.constant(b.clone())))
            .collect()
    }

    /// Output of each ReLU stage, using weights from [`FeatureNet::bind`].
    pub fn features(&self, tape: &mut Tape<T>, x: Var, bound: &[(Var, Var)]) -> Result<Vec<Var>> {
        let (_, _, h, w) = tape.value(x).dims4("perceptual")?;
        if h < 32 || w < 32 {
            return Err(Error::invalid(
                "perceptual",
                format!("{h}x{w} is smaller than 32x32"),
            ));
        }
        let mut out = Vec::with_capacity(self.layers.len());
        let mut cur = x;
        for (i, &(wv, bv)) in bound.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            let y = tape.conv2d(cur, wv, Some(bv), stride, 1)?;
            cur = tape.relu(y)?;
            out.push(cur);
        }
        Ok(out)
    }
}

/// Sum over stages of the squared feature difference, each stage divided
/// by its `C*H*W` (so per image it is a mean; images in a batch add up).
pub fn perceptual<T: Real>(
    tape: &mut Tape<T>,
    pred: Var,
    reference: Var,
    net: &FeatureNet<T>,
) -> Result<Var> {
    let bound = net.bind(tape);
    perceptual_bound(tape, pred, reference, net, &bound)
}

/// [`perceptual`] with feature weights already on the tape.
pub fn perceptual_bound<T: Real>(
    tape: &mut Tape<T>,
    pred: Var,
    reference: Var,
    net: &FeatureNet<T>,
    bound: &[(Var, Var)],
) -> Result<Var> {
    same_shape(tape, "perceptual", pred, reference)?;
    let fp = net.features(tape, pred, bound)?;
    let fr = net.features(tape, reference, bound)?;
    let mut total: Option<Var> = None;
    for (a, b) in fp.into_iter().zip(fr) {
        let s = tape.shape(a);
        let chw: usize = s[1..].iter().product();
        let d = tape.sub(a, b)?;
        let d2 = tape.square(d)?;
        let sum = tape.sum(d2)?;
        let term = tape.scale(sum, T::of(1.0 / chw as f64))?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("feature net has stages"))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub perceptual: f64,
    pub charbonnier: f64,
}

/// `lambda * perceptual + (1 - lambda) * charbonnier`. The perceptual term
/// is skipped (reported as 0) when `lambda == 0`.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    pred: Var,
    reference: Var,
    w: &LossWeights,
    net: &FeatureNet<T>,
) -> Result<(Var, LossParts)> {
    w.validate()?;
    let c = charbonnier(tape, pred, reference, w.epsilon, w.reduction)?;
    let cv = tape.value(c).item()?.as_f64();
    let wc = tape.scale(c, T::of(1.0 - w.lambda))?;
    if w.lambda == 0.0 {
        return Ok((
            wc,
            LossParts {
                total: tape.value(wc).item()?.as_f64(),
                perceptual: 0.0,
                charbonnier: cv,
            },
        ));
    }
    let p = perceptual(tape, pred, reference, net)?;
    let pv = tape.value(p).item()?.as_f64();
    let wp = tape.scale(p, T::of(w.lambda))?;
    let t = tape.add(wp, wc)?;
    Ok((
        t,
        LossParts {
            total: tape.value(t).item()?.as_f64(),
            perceptual: pv,
            charbonnier: cv,
        },
    ))
}

/// Largest PSNR reported; identical images would otherwise give infinity.
pub const PSNR_CAP: f64 = 99.0;

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

/// Peak signal-to-noise ratio in dB for images in `[0,1]`.
pub fn psnr<T: Real>(pred: &Tensor<T>, reference: &Tensor<T>) -> Result<f64> {
    if pred.shape() != reference.shape() {
        return Err(Error::invalid(
            "psnr",
            format!(
                "shapes {:?} and {:?} differ",
                pred.shape(),
                reference.shape()
            ),
        ));
    }
    if pred.is_empty() {
        return Err(Error::invalid("psnr", "empty image"));
    }
    let se: f64 = pred
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    Ok(psnr_from_mse(se / pred.len() as f64))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let x = i as f64 - c;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable Gaussian filter over the valid region of an `h x w` plane.
fn blur_valid(x: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for xo in 0..wo {
            rows[y * wo + xo] = (0..SSIM_WINDOW).map(|k| g[k] * x[y * w + xo + k]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for yo in 0..ho {
        for xo in 0..wo {
            out[yo * wo + xo] = (0..SSIM_WINDOW)
                .map(|k| g[k] * rows[(yo + k) * wo + xo])
                .sum();
        }
    }
    out
}

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5), K1 =
/// 0.01, K2 = 0.03 and unit dynamic range, over the valid region of every
/// channel, averaged over channels and images. Accepts `[C,H,W]` or
/// `[B,C,H,W]`.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(
            "ssim",
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    let (planes, h, w) = match a.shape() {
        [c, h, w] => (*c, *h, *w),
        [n, c, h, w] => (n * c, *h, *w),
        other => {
            return Err(Error::Rank {
                op: "ssim",
                expected: 4,
                found: other.to_vec(),
            })
        }
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW || planes == 0 {
        return Err(Error::invalid(
            "ssim",
            format!("{h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let g = gaussian_window();
    let mut total = 0.0;
    for p in 0..planes {
        let x: Vec<f64> = a.data()[p * h * w..][..h * w]
            .iter()
            .map(|v| v.as_f64())
            .collect();
        let y: Vec<f64> = b.data()[p * h * w..][..h * w]
            .iter()
            .map(|v| v.as_f64())
            .collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(u, v)| u * v).collect();
        let (mx, my) = (blur_valid(&x, h, w, &g), blur_valid(&y, h, w, &g));
        let (exx, eyy, exy) = (
            blur_valid(&xx, h, w, &g),
            blur_valid(&yy, h, w, &g),
            blur_valid(&xy, h, w, &g),
        );
        let mut s = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let (vx, vy, cxy) = (exx[i] - ux * ux, eyy[i] - uy * uy, exy[i] - ux * uy);
            s += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += s / mx.len() as f64;
    }
    Ok(total / planes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_is_normalized_and_symmetric() {
        let g = gaussian_window();
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..SSIM_WINDOW {
            assert_eq!(g[i], g[SSIM_WINDOW - 1 - i]);
        }
    }
}
