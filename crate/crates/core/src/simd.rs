//! Fixed-width vector lanes used by the hot kernels.

use std::ops::{Add, Mul, Sub};

use wide::{f32x16, f64x4, u32x16, u64x4};

use crate::tensor::{EXP32_BIAS, EXP32_POLY};

pub trait Lanes<T>: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> {
    const WIDTH: usize;

    fn splat(v: T) -> Self;
    /// Reads the first `WIDTH` elements of `s`.
    fn load(s: &[T]) -> Self;
    /// Writes into the first `WIDTH` elements of `s`.
    fn store(self, s: &mut [T]);
    /// `self * b + c`, fused.
    fn mul_add(self, b: Self, c: Self) -> Self;
    fn max(self, o: Self) -> Self;
    fn reduce_add(self) -> T;
    fn reduce_max(self) -> T;
    /// Lane-wise version of [`crate::Real::exp_fast`], same formula.
    fn exp_fast(self) -> Self;
}

impl Lanes<f32> for f32x16 {
    const WIDTH: usize = 16;

    #[inline(always)]
    fn splat(v: f32) -> Self {
        f32x16::splat(v)
    }

    #[inline(always)]
    fn load(s: &[f32]) -> Self {
        let a: [f32; 16] = s[..16].try_into().unwrap();
        f32x16::from(a)
    }

    #[inline(always)]
    fn store(self, s: &mut [f32]) {
        s[..16].copy_from_slice(&self.to_array());
    }

    #[inline(always)]
    fn mul_add(self, b: Self, c: Self) -> Self {
        f32x16::mul_add(self, b, c)
    }

    #[inline(always)]
    fn max(self, o: Self) -> Self {
        self.fast_max(o)
    }

    #[inline(always)]
    fn reduce_add(self) -> f32 {
        f32x16::reduce_add(self)
    }

    #[inline(always)]
    fn reduce_max(self) -> f32 {
        self.to_array()
            .into_iter()
            .fold(f32::NEG_INFINITY, |m, v| if v > m { v } else { m })
    }

    #[inline(always)]
    fn exp_fast(self) -> Self {
        const SHIFT: f32 = 12_582_912.0;
        let x = self
            .fast_max(f32x16::splat(-87.0))
            .fast_min(f32x16::splat(88.0));
        let t = x.mul_add(
            f32x16::splat(std::f32::consts::LOG2_E),
            f32x16::splat(SHIFT),
        );
        let k = t - f32x16::splat(SHIFT);
        let r = k.mul_add(f32x16::splat(-0.693_145_75), x);
        let r = k.mul_add(f32x16::splat(-1.428_606_8e-6), r);
        let mut p = f32x16::splat(EXP32_POLY[0]);
        for c in &EXP32_POLY[1..] {
            p = p.mul_add(r, f32x16::splat(*c));
        }
        let bits: u32x16 = bytemuck::cast(t);
        let e = (bits + u32x16::splat(EXP32_BIAS)) << 23;
        p * bytemuck::cast::<u32x16, f32x16>(e)
    }
}

impl Lanes<f64> for f64x4 {
    const WIDTH: usize = 4;

    #[inline(always)]
    fn splat(v: f64) -> Self {
        f64x4::splat(v)
    }

    #[inline(always)]
    fn load(s: &[f64]) -> Self {
        let a: [f64; 4] = s[..4].try_into().unwrap();
        f64x4::from(a)
    }

    #[inline(always)]
    fn store(self, s: &mut [f64]) {
        s[..4].copy_from_slice(&self.to_array());
    }

    #[inline(always)]
    fn mul_add(self, b: Self, c: Self) -> Self {
        f64x4::mul_add(self, b, c)
    }

    #[inline(always)]
    fn max(self, o: Self) -> Self {
        self.fast_max(o)
    }

    #[inline(always)]
    fn reduce_add(self) -> f64 {
        f64x4::reduce_add(self)
    }

    #[inline(always)]
    fn reduce_max(self) -> f64 {
        self.to_array()
            .into_iter()
            .fold(f64::NEG_INFINITY, |m, v| if v > m { v } else { m })
    }

    #[inline(always)]
    fn exp_fast(self) -> Self {
        const SHIFT: f64 = 6_755_399_441_055_744.0;
        let x = self
            .fast_max(f64x4::splat(-708.0))
            .fast_min(f64x4::splat(709.0));
        let t = x * f64x4::splat(std::f64::consts::LOG2_E) + f64x4::splat(SHIFT);
        let k = t - f64x4::splat(SHIFT);
        let r = x
            - k * f64x4::splat(6.931_471_803_691_238e-1)
            - k * f64x4::splat(1.908_214_929_270_587_7e-10);
        let mut p = f64x4::splat(1.0 / 479_001_600.0);
        for c in [
            1.0 / 39_916_800.0,
            1.0 / 3_628_800.0,
            1.0 / 362_880.0,
            1.0 / 40_320.0,
            1.0 / 5_040.0,
            1.0 / 720.0,
            1.0 / 120.0,
            1.0 / 24.0,
            1.0 / 6.0,
            0.5,
            1.0,
            1.0,
        ] {
            p = p.mul_add(r, f64x4::splat(c));
        }
        let bits: u64x4 = bytemuck::cast(t);
        let e = (bits - u64x4::splat(SHIFT.to_bits()) + u64x4::splat(1023)) << 52;
        p * bytemuck::cast::<u64x4, f64x4>(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Real;

    #[test]
    fn lane_exp_matches_scalar_bitwise() {
        let xs: Vec<f32> = (0..64).map(|i| -90.0 + i as f32 * 2.9).collect();
        for c in xs.chunks(16) {
            let v = f32x16::load(c).exp_fast().to_array();
            for (a, b) in v.iter().zip(c) {
                assert_eq!(a.to_bits(), b.exp_fast().to_bits(), "{b}");
            }
        }
        let xs: Vec<f64> = (0..64).map(|i| -700.0 + i as f64 * 22.1).collect();
        for c in xs.chunks(4) {
            let v = f64x4::load(c).exp_fast().to_array();
            for (a, b) in v.iter().zip(c) {
                assert_eq!(a.to_bits(), b.exp_fast().to_bits(), "{b}");
            }
        }
    }
}
