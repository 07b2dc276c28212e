//! Dense row-major tensors and the scalar trait every kernel is generic over.
//!
//! Verification runs in `f64`; training and inference may run in `f32`.
//! Both widths share one code path through [`Real`].

use std::fmt::{Debug, Display};
use std::io::{Read, Write};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};

/// Floating-point element type of a [`Tensor`].
pub trait Real:
    Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const NAME: &'static str;

    /// Vector of this scalar used by the hot kernels.
    type Lanes: crate::simd::Lanes<Self>;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Branch-free `exp` accurate to a couple of ulps; written so that loops
    /// over slices vectorize.
    fn exp_fast(self) -> Self;
}

/// Horner coefficients, highest degree first, of the f32 `exp_fast` kernel.
pub(crate) const EXP32_POLY: [f32; 6] = [
    0.008_290_318,
    0.041_897_934,
    0.166_676_36,
    0.499_991_5,
    0.999_999_7,
    1.0,
];
/// Turns the bits of `k + 1.5 * 2^23` into the biased exponent of `2^k`.
pub(crate) const EXP32_BIAS: u32 = 127u32.wrapping_sub(12_582_912.0f32.to_bits());

impl Real for f32 {
    const NAME: &'static str = "f32";
    type Lanes = wide::f32x16;

    #[inline(always)]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline(always)]
    fn exp_fast(self) -> Self {
        const SHIFT: f32 = 12_582_912.0; // 1.5 * 2^23
        let x = self.max(-87.0).min(88.0);
        let t = x.mul_add(std::f32::consts::LOG2_E, SHIFT);
        let k = t - SHIFT;
        let r = k.mul_add(-0.693_145_75, x);
        let r = k.mul_add(-1.428_606_8e-6, r);
        // Degree-5 fit of e^r on [-ln2/2, ln2/2], relative error below 1e-7.
        let mut p = EXP32_POLY[0];
        for c in &EXP32_POLY[1..] {
            p = p.mul_add(r, *c);
        }
        // The low mantissa bits of `t` hold k; reading them avoids a
        // saturating float-to-int cast, which blocks vectorization.
        let scale = f32::from_bits(t.to_bits().wrapping_add(EXP32_BIAS) << 23);
        p * scale
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";
    type Lanes = wide::f64x4;

    #[inline(always)]
    fn of(v: f64) -> Self {
        v
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }

    #[inline(always)]
    fn exp_fast(self) -> Self {
        const SHIFT: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
        let x = self.max(-708.0).min(709.0);
        let t = x * std::f64::consts::LOG2_E + SHIFT;
        let k = t - SHIFT;
        let r = x - k * 6.931_471_803_691_238e-1 - k * 1.908_214_929_270_587_7e-10;
        let mut p = 1.0 / 479_001_600.0;
        p = p.mul_add(r, 1.0 / 39_916_800.0);
        p = p.mul_add(r, 1.0 / 3_628_800.0);
        p = p.mul_add(r, 1.0 / 362_880.0);
        p = p.mul_add(r, 1.0 / 40_320.0);
        p = p.mul_add(r, 1.0 / 5_040.0);
        p = p.mul_add(r, 1.0 / 720.0);
        p = p.mul_add(r, 1.0 / 120.0);
        p = p.mul_add(r, 1.0 / 24.0);
        p = p.mul_add(r, 1.0 / 6.0);
        p = p.mul_add(r, 0.5);
        p = p.mul_add(r, 1.0);
        p = p.mul_add(r, 1.0);
        let scale =
            f64::from_bits(t.to_bits().wrapping_sub(SHIFT.to_bits()).wrapping_add(1023) << 52);
        p * scale
    }
}

/// A dense N-dimensional array stored row-major.
///
/// Activations are conventionally `B x C x H x W`. Gradient bookkeeping lives
/// on the [`crate::tape::Tape`], not here: a `Tensor` is an immutable value
/// once an op has produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, rejecting length mismatches and non-finite elements.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(Error::Length {
                shape,
                expected,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "Tensor::new" });
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for kernel outputs whose length is known correct.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Uniform samples from `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::of(rng.gen_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::invalid(
                "item",
                format!("tensor of shape {:?} is not a scalar", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    /// `(B, C, H, W)` of a rank-4 tensor.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::Rank {
                op,
                expected: 4,
                found: self.shape.clone(),
            }),
        }
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Rank {
                op,
                expected: 3,
                found: self.shape.clone(),
            }),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Length {
                shape: shape.to_vec(),
                expected: n,
                found: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack", "no tensors to stack"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::invalid(
                    "stack",
                    format!("shape {:?} differs from {:?}", t.shape, first.shape),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    /// The `index`-th slab along the leading axis.
    pub fn unstack(&self, index: usize) -> Result<Self> {
        let (&lead, rest) = self
            .shape
            .split_first()
            .ok_or_else(|| Error::invalid("unstack", "scalar has no leading axis"))?;
        if index >= lead {
            return Err(Error::Dimension {
                op: "unstack",
                axis: "leading",
                expected: lead,
                found: index,
            });
        }
        let n: usize = rest.iter().product();
        Ok(Self {
            shape: rest.to_vec(),
            data: self.data[index * n..(index + 1) * n].to_vec(),
        })
    }

    /// Serializes as `ECAT`: magic, version, rank, extents (all u32 LE),
    /// then row-major little-endian `f32` elements.
    pub fn write_ecat<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(ECAT_MAGIC)?;
        out.write_all(&ECAT_VERSION.to_le_bytes())?;
        out.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            let d =
                u32::try_from(d).map_err(|_| Error::invalid("write_ecat", "extent exceeds u32"))?;
            out.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_ecat<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != ECAT_MAGIC {
            return Err(Error::format("tensor", format!("bad magic {magic:?}")));
        }
        let version = read_u32(input)?;
        if version != ECAT_VERSION {
            return Err(Error::format(
                "tensor",
                format!("unsupported version {version}"),
            ));
        }
        let rank = read_u32(input)? as usize;
        if rank > 16 {
            return Err(Error::format("tensor", format!("implausible rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| read_u32(input).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        input.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        Tensor::new(shape, data)
    }

    /// Size in bytes of the `ECAT` encoding.
    pub fn ecat_len(&self) -> usize {
        12 + 4 * self.shape.len() + 4 * self.data.len()
    }
}

const ECAT_MAGIC: &[u8; 4] = b"ECAT";
const ECAT_VERSION: u32 = 1;

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn new_rejects_length_mismatch_and_nan() {
        assert!(matches!(
            Tensor::<f64>::new(vec![2, 2], vec![0.0; 3]),
            Err(Error::Length {
                expected: 4,
                found: 3,
                ..
            })
        ));
        assert!(matches!(
            Tensor::<f64>::new(vec![1], vec![f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn exp_fast_matches_std() {
        let mut worst32 = 0.0f64;
        let mut worst64 = 0.0f64;
        for i in 0..200_000 {
            let x = -80.0 + i as f64 * 0.0004;
            let e = x.exp();
            worst64 = worst64.max(((x.exp_fast() - e) / e).abs());
            let x32 = x as f32;
            let e32 = (x32 as f64).exp();
            worst32 = worst32.max(((x32.exp_fast() as f64 - e32) / e32).abs());
        }
        assert!(worst64 < 1e-15, "f64 exp rel err {worst64:e}");
        assert!(worst32 < 5e-7, "f32 exp rel err {worst32:e}");
        assert_eq!(0.0f64.exp_fast(), 1.0);
        assert_eq!(0.0f32.exp_fast(), 1.0);
    }

    #[test]
    fn ecat_header_layout() {
        let t = Tensor::<f64>::new(vec![1, 2], vec![1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        t.write_ecat(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"ECAT");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..16], &1u32.to_le_bytes());
        assert_eq!(&buf[16..20], &2u32.to_le_bytes());
        assert_eq!(&buf[20..24], &1.5f32.to_le_bytes());
        assert_eq!(buf.len(), t.ecat_len());
    }

    #[test]
    fn ecat_rejects_bad_magic() {
        let buf = b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00".to_vec();
        assert!(Tensor::<f32>::read_ecat(&mut buf.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn ecat_round_trips_f32(shape in proptest::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::<f32>::rand_uniform(&shape, -10.0, 10.0, &mut rng);
            let mut buf = Vec::new();
            t.write_ecat(&mut buf).unwrap();
            let back = Tensor::<f32>::read_ecat(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
