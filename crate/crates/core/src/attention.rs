//! Attention layers over paired visual/semantic feature maps.
//!
//! Tokens are flattened spatial positions; heads split the channel axis.
//! Every layer takes the `Var` slice produced by [`ParamStore::bind`] and
//! looks its weights up by [`ParamId`].

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::resample_up;
use crate::params::{kaiming_uniform, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// The two feature streams; both halves always share a shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeaturePair {
    pub visual: Var,
    pub semantic: Var,
}

impl FeaturePair {
    pub fn new(visual: Var, semantic: Var) -> Self {
        Self { visual, semantic }
    }

    pub fn swapped(self) -> Self {
        Self {
            visual: self.semantic,
            semantic: self.visual,
        }
    }

    fn check<T: Real>(&self, tape: &Tape<T>, op: &'static str) -> Result<()> {
        tape.value(self.visual).dims4(op)?;
        same_dims(op, tape.shape(self.visual), tape.shape(self.semantic))
    }
}

fn same_dims(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    const AXES: [&str; 4] = ["batch", "channels", "height", "width"];
    if a.len() != b.len() {
        return Err(Error::Rank {
            op,
            expected: a.len(),
            found: b.to_vec(),
        });
    }
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if x != y {
            return Err(Error::Dimension {
                op,
                axis: AXES.get(i).copied().unwrap_or("axis"),
                expected: *x,
                found: *y,
            });
        }
    }
    Ok(())
}

/// Weights for one stream of an attention block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnParams {
    pub wq: ParamId,
    pub bq: ParamId,
    /// Keys carry no bias: softmax is invariant to it.
    pub wk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    /// Per-head logit scale, starts at `1/sqrt(d_k)`.
    pub zeta: ParamId,
    /// Depthwise 3x3 position embedding on the value path.
    pub pos: ParamId,
    pub channels: usize,
    pub heads: usize,
}

impl AttnParams {
    pub fn register<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{prefix}: {channels} channels not divisible by {heads} heads"
            )));
        }
        let c = channels;
        let proj =
            |store: &mut ParamStore<T>, name: &str, rng: &mut R| -> Result<(ParamId, ParamId)> {
                let w = store.register(
                    format!("{prefix}.{name}.weight"),
                    kaiming_uniform(&[c, c, 1, 1], rng),
                )?;
                let b = store.register(format!("{prefix}.{name}.bias"), Tensor::zeros(&[c]))?;
                Ok((w, b))
            };
        let (wq, bq) = proj(store, "q", rng)?;
        let wk = store.register(
            format!("{prefix}.k.weight"),
            kaiming_uniform(&[c, c, 1, 1], rng),
        )?;
        let (wv, bv) = proj(store, "v", rng)?;
        let (wo, bo) = proj(store, "out", rng)?;
        let d = (c / heads) as f64;
        let zeta = store.register(
            format!("{prefix}.zeta"),
            Tensor::full(&[heads], T::of(1.0 / d.sqrt())),
        )?;
        let pos = store.register(format!("{prefix}.pos"), kaiming_uniform(&[c, 1, 3, 3], rng))?;
        Ok(Self {
            wq,
            bq,
            wk,
            wv,
            bv,
            wo,
            bo,
            zeta,
            pos,
            channels,
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// Every parameter id, in registration order.
    pub fn ids(&self) -> [ParamId; 9] {
        [
            self.wq, self.bq, self.wk, self.wv, self.bv, self.wo, self.bo, self.zeta, self.pos,
        ]
    }
}

/// Weights of one cross-scale decoder block at `channels` channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CrossScaleParams {
    /// Residual/mid interaction for the visual stream: `.0` drives the
    /// residual side, `.1` the mid side.
    pub inner_visual: (AttnParams, AttnParams),
    pub inner_semantic: (AttnParams, AttnParams),
    /// `2C -> C` fusion `(weight [C,2C,1,1], bias [C])` per stream.
    pub fuse_visual: (ParamId, ParamId),
    pub fuse_semantic: (ParamId, ParamId),
    /// Interaction of the fused streams: `.0` visual, `.1` semantic.
    pub outer: (AttnParams, AttnParams),
    /// Trailing `C -> C/2` upsampling `(weight, bias)` per stream.
    pub up_visual: (ParamId, ParamId),
    pub up_semantic: (ParamId, ParamId),
    pub channels: usize,
}

impl CrossScaleParams {
    pub fn register<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let c = channels;
        if !c.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "{prefix}: {c} channels cannot be halved by upsampling"
            )));
        }
        let attn = |store: &mut ParamStore<T>, name: &str, rng: &mut R| {
            AttnParams::register(store, &format!("{prefix}.{name}"), c, heads, rng)
        };
        let inner_visual = (
            attn(store, "inner_v.res", rng)?,
            attn(store, "inner_v.mid", rng)?,
        );
        let inner_semantic = (
            attn(store, "inner_s.res", rng)?,
            attn(store, "inner_s.mid", rng)?,
        );
        let conv =
            |store: &mut ParamStore<T>, name: &str, shape: [usize; 4], rng: &mut R| -> Result<_> {
                let w = store.register(
                    format!("{prefix}.{name}.weight"),
                    kaiming_uniform(&shape, rng),
                )?;
                let b =
                    store.register(format!("{prefix}.{name}.bias"), Tensor::zeros(&[shape[0]]))?;
                Ok((w, b))
            };
        let fuse_visual = conv(store, "fuse_v", [c, 2 * c, 1, 1], rng)?;
        let fuse_semantic = conv(store, "fuse_s", [c, 2 * c, 1, 1], rng)?;
        let outer = (attn(store, "outer.v", rng)?, attn(store, "outer.s", rng)?);
        let up_visual = conv(store, "up_v", [c / 2, c, 1, 1], rng)?;
        let up_semantic = conv(store, "up_s", [c / 2, c, 1, 1], rng)?;
        Ok(Self {
            inner_visual,
            inner_semantic,
            fuse_visual,
            fuse_semantic,
            outer,
            up_visual,
            up_semantic,
            channels,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttentionKind {
    /// Queries of each stream attend over the other stream's keys.
    #[default]
    Dual,
    /// Plain per-stream self-attention, no key crossing.
    Single,
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionKind::Dual => "dmsa",
            AttentionKind::Single => "mhsa",
        })
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dmsa" => Ok(AttentionKind::Dual),
            "mhsa" => Ok(AttentionKind::Single),
            other => Err(Error::Config(format!(
                "attention must be dmsa or mhsa, got `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockOptions {
    pub kind: AttentionKind,
    pub posemb: bool,
    /// Channel-normalize block inputs before projecting.
    pub norm: bool,
    /// Fuse the attended mid features instead of the raw ones in the
    /// cross-scale block.
    pub mid_primed: bool,
}

impl Default for BlockOptions {
    fn default() -> Self {
        Self {
            kind: AttentionKind::Dual,
            posemb: true,
            norm: false,
            mid_primed: false,
        }
    }
}

fn conv1x1<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    w: ParamId,
    b: ParamId,
    vars: &[Var],
) -> Result<Var> {
    tape.conv2d(x, w.var(vars), Some(b.var(vars)), 1, 0)
}

fn check_heads<T: Real>(tape: &Tape<T>, x: Var, p: &AttnParams, op: &'static str) -> Result<()> {
    let (_, c, _, _) = tape.value(x).dims4(op)?;
    if c != p.channels {
        return Err(Error::Dimension {
            op,
            axis: "channels",
            expected: p.channels,
            found: c,
        });
    }
    Ok(())
}

/// `softmax(Q K^T / sqrt(d_k)) V` per head, assembled from generic tape ops
/// (head split, batched matmul, transpose, softmax). Inputs are `[B,C,H,W]`.
pub fn mhsa_attention<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<Var> {
    let (_, c, h, w) = tape.value(q).dims4("mhsa")?;
    same_dims("mhsa", tape.shape(q), tape.shape(k))?;
    same_dims("mhsa", tape.shape(q), tape.shape(v))?;
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!(
            "{c} channels not divisible by {heads} heads"
        )));
    }
    let d = (c / heads) as f64;
    let qh = tape.to_heads(q, heads)?;
    let kh = tape.to_heads(k, heads)?;
    let vh = tape.to_heads(v, heads)?;
    let kt = tape.transpose_last2(kh)?;
    let s = tape.matmul(qh, kt)?;
    let s = tape.scale(s, T::of(1.0 / d.sqrt()))?;
    let p = tape.softmax_lastdim(s)?;
    let o = tape.matmul(p, vh)?;
    tape.from_heads(o, h, w)
}

/// Single-stream multi-head self-attention: 1x1 Q/K/V projections,
/// attention with the fixed `1/sqrt(d_k)` scale, 1x1 output projection.
pub fn mhsa<T: Real>(tape: &mut Tape<T>, x: Var, p: &AttnParams, vars: &[Var]) -> Result<Var> {
    check_heads(tape, x, p, "mhsa")?;
    let q = conv1x1(tape, x, p.wq, p.bq, vars)?;
    let k = tape.conv2d(x, p.wk.var(vars), None, 1, 0)?;
    let v = conv1x1(tape, x, p.wv, p.bv, vars)?;
    let scale = T::of(1.0 / (p.head_dim() as f64).sqrt());
    let zeta = tape.constant(Tensor::full(&[p.heads], scale));
    let a = tape.cross_attention(q, k, v, zeta)?;
    conv1x1(tape, a, p.wo, p.bo, vars)
}

/// `softmax(Q_a K_b^T * zeta_h) V_a` per head, with one learnable scale per
/// head in `zeta: [heads]`.
pub fn dmsa_core<T: Real>(tape: &mut Tape<T>, qa: Var, kb: Var, va: Var, zeta: Var) -> Result<Var> {
    tape.cross_attention(qa, kb, va, zeta)
}

/// One output stream of the dual block: queries and values from `xa` under
/// `pa`, keys from `xb` under `pb`'s key projection.
pub fn dmsa_stream<T: Real>(
    tape: &mut Tape<T>,
    xa: Var,
    xb: Var,
    pa: &AttnParams,
    pb: &AttnParams,
    vars: &[Var],
    opts: &BlockOptions,
) -> Result<Var> {
    check_heads(tape, xa, pa, "dmsa_block")?;
    check_heads(tape, xb, pb, "dmsa_block")?;
    if pa.heads != pb.heads {
        return Err(Error::Dimension {
            op: "dmsa_block",
            axis: "heads",
            expected: pa.heads,
            found: pb.heads,
        });
    }
    let (xa, xb) = if opts.norm {
        (tape.channel_norm(xa)?, tape.channel_norm(xb)?)
    } else {
        (xa, xb)
    };
    if opts.kind == AttentionKind::Single {
        return mhsa(tape, xa, pa, vars);
    }
    let q = conv1x1(tape, xa, pa.wq, pa.bq, vars)?;
    let k = tape.conv2d(xb, pb.wk.var(vars), None, 1, 0)?;
    let v = conv1x1(tape, xa, pa.wv, pa.bv, vars)?;
    let mut a = dmsa_core(tape, q, k, v, pa.zeta.var(vars))?;
    if opts.posemb {
        let pe = tape.conv2d_grouped(v, pa.pos.var(vars), None, 1, 1, pa.channels)?;
        a = tape.add(a, pe)?;
    }
    conv1x1(tape, a, pa.wo, pa.bo, vars)
}

/// Dual attention block: the visual stream attends over semantic keys and
/// vice versa. `p` drives the visual stream, `q` the semantic one.
pub fn dmsa_block<T: Real>(
    tape: &mut Tape<T>,
    pair: FeaturePair,
    p: &AttnParams,
    q: &AttnParams,
    vars: &[Var],
    opts: &BlockOptions,
) -> Result<FeaturePair> {
    pair.check(tape, "dmsa_block")?;
    let visual = dmsa_stream(tape, pair.visual, pair.semantic, p, q, vars, opts)?;
    let semantic = dmsa_stream(tape, pair.semantic, pair.visual, q, p, vars, opts)?;
    Ok(FeaturePair { visual, semantic })
}

/// Cross-scale decoder block. Per stream, the residual and mid features
/// interact through a dual block, the attended residual is fused with the
/// mid features by a `2C -> C` projection, the fused streams interact through
/// a second dual block, and both are upsampled to twice the spatial extent
/// at half the channels.
pub fn csdmsa<T: Real>(
    tape: &mut Tape<T>,
    mid: FeaturePair,
    res: FeaturePair,
    cp: &CrossScaleParams,
    vars: &[Var],
    opts: &BlockOptions,
) -> Result<FeaturePair> {
    mid.check(tape, "csdmsa")?;
    res.check(tape, "csdmsa")?;
    same_dims("csdmsa", tape.shape(mid.visual), tape.shape(res.visual))?;

    let fuse = |tape: &mut Tape<T>,
                r: Var,
                m: Var,
                inner: &(AttnParams, AttnParams),
                w: (ParamId, ParamId)| {
        let r2 = dmsa_stream(tape, r, m, &inner.0, &inner.1, vars, opts)?;
        // The mid side's attended output only matters when it is fused.
        let m2 = if opts.mid_primed {
            dmsa_stream(tape, m, r, &inner.1, &inner.0, vars, opts)?
        } else {
            m
        };
        let cat = tape.concat_channels(r2, m2)?;
        conv1x1(tape, cat, w.0, w.1, vars)
    };
    let agg_v = fuse(
        tape,
        res.visual,
        mid.visual,
        &cp.inner_visual,
        cp.fuse_visual,
    )?;
    let agg_s = fuse(
        tape,
        res.semantic,
        mid.semantic,
        &cp.inner_semantic,
        cp.fuse_semantic,
    )?;

    let out = dmsa_block(
        tape,
        FeaturePair::new(agg_v, agg_s),
        &cp.outer.0,
        &cp.outer.1,
        vars,
        opts,
    )?;
    let visual = resample_up(
        tape,
        out.visual,
        cp.up_visual.0.var(vars),
        cp.up_visual.1.var(vars),
    )?;
    let semantic = resample_up(
        tape,
        out.semantic,
        cp.up_semantic.0.var(vars),
        cp.up_semantic.1.var(vars),
    )?;
    Ok(FeaturePair { visual, semantic })
}
