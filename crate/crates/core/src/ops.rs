//! Composite layers built from tape primitives.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Real;

/// Depthwise 3x3 (pad 1, groups = C, no bias) followed by a pointwise 1x1
/// convolution `pw: [C',C,1,1]` with bias `b: [C']`. Spatial size is kept.
pub fn depthwise_separable_conv<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    dw: Var,
    pw: Var,
    b: Var,
) -> Result<Var> {
    let (_, c, _, _) = tape.value(x).dims4("depthwise_separable_conv")?;
    let dws = tape.shape(dw).to_vec();
    if dws.len() != 4 || dws[0] != c || dws[1] != 1 {
        return Err(Error::Dimension {
            op: "depthwise_separable_conv",
            axis: "channels",
            expected: c,
            found: dws.first().copied().unwrap_or(0),
        });
    }
    let pad = dws[2] / 2;
    let mid = tape.conv2d_grouped(x, dw, None, 1, pad, c)?;
    tape.conv2d(mid, pw, Some(b), 1, 0)
}

/// Stride-2 4x4 convolution (pad 1): halves the spatial extent, `w: [2C,C,4,4]`.
pub fn resample_down<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let (_, _, h, wd) = tape.value(x).dims4("resample_down")?;
    if h % 2 != 0 || wd % 2 != 0 {
        return Err(Error::invalid(
            "resample_down",
            format!("spatial extent {h}x{wd} is odd; pad the input to a multiple of 4"),
        ));
    }
    tape.conv2d(x, w, Some(b), 2, 1)
}

/// Nearest 2x upsampling followed by a 1x1 convolution `w: [C/2,C,1,1]`.
///
/// A pointwise convolution commutes exactly with nearest duplication, so the
/// convolution runs first on the small grid; the values are bitwise those of
/// duplicate-then-convolve.
pub fn resample_up<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let (_, c, _, _) = tape.value(x).dims4("resample_up")?;
    if c % 2 != 0 {
        return Err(Error::invalid(
            "resample_up",
            format!("{c} channels is odd"),
        ));
    }
    let y = tape.conv2d(x, w, Some(b), 1, 0)?;
    tape.upsample2x(y)
}

pub fn concat_channels<T: Real>(tape: &mut Tape<T>, a: Var, c: Var) -> Result<Var> {
    tape.concat_channels(a, c)
}

pub fn matmul_batched<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    tape.matmul(a, b)
}

pub fn softmax_lastdim<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    tape.softmax_lastdim(x)
}

/// `sum(out * weights)` for a fixed weight tensor: turns any activation into
/// a scalar with non-degenerate gradients, for gradient checks.
pub fn weighted_sum<T: Real>(
    tape: &mut Tape<T>,
    out: Var,
    weights: &crate::Tensor<T>,
) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let m = tape.mul(out, w)?;
    tape.sum(m)
}
