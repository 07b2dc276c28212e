//! Self-checks behind the `verify` subcommand and the acceptance suite:
//! gradient checks, exact reductions and identities, and capacity bounds.
//! Each group returns one `Check` per property.

use rand::Rng;

use crate::attention::{
    csdmsa, dmsa_block, dmsa_core, dmsa_stream, mhsa, mhsa_attention, AttnParams, BlockOptions,
    CrossScaleParams, FeaturePair,
};
use crate::error::Result;
use crate::gradcheck::{check_gradients, GradCheckOptions};
use crate::network::{Model, ModelConfig};
use crate::objectives::{
    charbonnier, perceptual, psnr, psnr_from_mse, ssim, total_loss, FeatureNet, LossWeights,
    Reduction,
};
use crate::ops::{depthwise_separable_conv, resample_down, resample_up, weighted_sum};
use crate::params::ParamStore;
use crate::rng::{stream_at, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::training::{dihedral, dihedral_inverse};

/// Relative-error bound of the gradient checks.
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Multiplies analytic gradients in the gradient checks; anything other
    /// than 1 plants a fault the checks must catch.
    pub grad_scale: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            grad_scale: 1.0,
        }
    }
}

fn rand_t(shape: &[usize], seed: u64, index: u64) -> Tensor<f64> {
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut stream_at(seed, Stream::Test, index))
}

/// Gradient check of `sum(f(inputs) * r)` for fixed random `r` per output.
fn grad_check<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    o: &VerifyOptions,
    max_elements: Option<usize>,
    f: F,
) -> Result<Check>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Vec<Var>>,
{
    let probes: Vec<Tensor<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let outs = f(&mut tape, &vars)?;
        outs.iter()
            .enumerate()
            .map(|(i, y)| rand_t(tape.shape(*y), o.seed, 900 + i as u64))
            .collect()
    };
    let opts = GradCheckOptions {
        max_elements,
        seed: o.seed,
        grad_scale: o.grad_scale,
        ..Default::default()
    };
    let report = check_gradients(
        |tape, vars| {
            let mut total: Option<Var> = None;
            for (y, p) in f(tape, vars)?.into_iter().zip(&probes) {
                let l = weighted_sum(tape, y, p)?;
                total = Some(match total {
                    Some(t) => tape.add(t, l)?,
                    None => l,
                });
            }
            Ok(total.expect("at least one output"))
        },
        inputs,
        &opts,
    )?;
    Ok(Check::new(
        format!("grad {name}"),
        report.max_rel_error < GRAD_TOL,
        format!(
            "max rel error {:.3e} over {} elements",
            report.max_rel_error, report.checked
        ),
    ))
}

fn attn_store(
    c: usize,
    heads: usize,
    seed: u64,
) -> Result<(ParamStore<f64>, AttnParams, AttnParams)> {
    let mut s = ParamStore::new();
    let mut r = stream_at(seed, Stream::Test, 1);
    let p = AttnParams::register(&mut s, "p", c, heads, &mut r)?;
    let q = AttnParams::register(&mut s, "q", c, heads, &mut r)?;
    // Non-zero biases reach more of the backward paths.
    for (i, id) in [p.bq, p.bv, p.bo, q.bq, q.bv, q.bo].into_iter().enumerate() {
        s.set(id, rand_t(&[c], seed, 10 + i as u64).map(|v| 0.1 * v))?;
    }
    Ok((s, p, q))
}

/// Gradient checks in f64 with a central step of 1e-4.
pub fn gradient_checks(o: &VerifyOptions) -> Result<Vec<Check>> {
    let s = o.seed;
    let mut out = Vec::new();

    let conv = [
        rand_t(&[2, 3, 6, 7], s, 100),
        rand_t(&[4, 3, 3, 3], s, 101),
        rand_t(&[4], s, 102),
    ];
    out.push(grad_check("conv2d", &conv, o, None, |t, v| {
        Ok(vec![t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?])
    })?);
    let strided = [
        rand_t(&[1, 2, 7, 6], s, 103),
        rand_t(&[3, 2, 4, 4], s, 104),
        rand_t(&[3], s, 105),
    ];
    out.push(grad_check("conv2d stride 2", &strided, o, None, |t, v| {
        Ok(vec![t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?])
    })?);

    let ds = [
        rand_t(&[1, 3, 6, 5], s, 110),
        rand_t(&[3, 1, 3, 3], s, 111),
        rand_t(&[5, 3, 1, 1], s, 112),
        rand_t(&[5], s, 113),
    ];
    out.push(grad_check("dsconv", &ds, o, None, |t, v| {
        Ok(vec![depthwise_separable_conv(t, v[0], v[1], v[2], v[3])?])
    })?);

    let down = [
        rand_t(&[1, 2, 6, 8], s, 120),
        rand_t(&[4, 2, 4, 4], s, 121),
        rand_t(&[4], s, 122),
    ];
    out.push(grad_check("resample down", &down, o, None, |t, v| {
        Ok(vec![resample_down(t, v[0], v[1], v[2])?])
    })?);
    let up = [
        rand_t(&[1, 4, 3, 5], s, 123),
        rand_t(&[2, 4, 1, 1], s, 124),
        rand_t(&[2], s, 125),
    ];
    out.push(grad_check("resample up", &up, o, None, |t, v| {
        Ok(vec![resample_up(t, v[0], v[1], v[2])?])
    })?);

    let (store, p, q) = attn_store(4, 2, s.wrapping_add(130))?;
    let np = store.len();
    let mut inputs = store.values();
    inputs.extend([rand_t(&[1, 4, 3, 3], s, 131), rand_t(&[1, 4, 3, 3], s, 132)]);
    out.push(grad_check("mhsa", &inputs, o, None, |t, v| {
        Ok(vec![mhsa(t, v[np], &p, &v[..np])?])
    })?);
    let block_opts = BlockOptions::default();
    out.push(grad_check("dmsa_block", &inputs, o, None, |t, v| {
        let r = dmsa_block(
            t,
            FeaturePair::new(v[np], v[np + 1]),
            &p,
            &q,
            &v[..np],
            &block_opts,
        )?;
        Ok(vec![r.visual, r.semantic])
    })?);

    let mut cs_store = ParamStore::new();
    let cp = CrossScaleParams::register(
        &mut cs_store,
        "cs",
        4,
        2,
        &mut stream_at(s, Stream::Test, 140),
    )?;
    let np = cs_store.len();
    let mut inputs = cs_store.values();
    inputs.extend((0..4).map(|i| rand_t(&[1, 4, 2, 2], s, 141 + i)));
    out.push(grad_check("csdmsa", &inputs, o, None, |t, v| {
        let mid = FeaturePair::new(v[np], v[np + 1]);
        let res = FeaturePair::new(v[np + 2], v[np + 3]);
        let r = csdmsa(t, mid, res, &cp, &v[..np], &block_opts)?;
        Ok(vec![r.visual, r.semantic])
    })?);

    let img = |i| {
        Tensor::rand_uniform(
            &[1, 3, 32, 32],
            0.0,
            1.0,
            &mut stream_at(s, Stream::Test, i),
        )
    };
    let (pred, reference) = (img(150), img(151));
    let small = [pred.clone(), reference.clone()]
        .map(|t| Tensor::new(vec![1, 3, 4, 4], t.data()[..48].to_vec()));
    let [sp, sr] = small;
    let (sp, sr) = (sp?, sr?);
    out.push(grad_check("charbonnier", &[sp], o, None, |t, v| {
        let r = t.constant(sr.clone());
        Ok(vec![charbonnier(t, v[0], r, 1e-3, Reduction::Sum)?])
    })?);
    let net = FeatureNet::<f64>::new(s);
    out.push(grad_check("perceptual", &[pred], o, None, |t, v| {
        let r = t.constant(reference.clone());
        Ok(vec![perceptual(t, v[0], r, &net)?])
    })?);

    let mut model: Model<f64> = Model::new(ModelConfig {
        c0: 4,
        seed: s,
        ..ModelConfig::default()
    })?;
    // The zero-initialized head would hide every upstream gradient.
    let (hw, hb) = model.layout.head;
    let ws = model.store.get(hw).shape().to_vec();
    model.store.set(hw, rand_t(&ws, s, 160).map(|v| 0.05 * v))?;
    model
        .store
        .set(hb, rand_t(&[3], s, 161).map(|v| 0.05 * v))?;
    let x = Tensor::rand_uniform(
        &[1, 3, 12, 12],
        0.3,
        0.7,
        &mut stream_at(s, Stream::Test, 162),
    );
    let sample = model.param_count().div_ceil(100);
    out.push(grad_check(
        "forward (1% of parameters)",
        &model.store.values(),
        o,
        Some(sample),
        |t, v| {
            let xv = t.constant(x.clone());
            Ok(vec![model.forward(t, v, xv)?])
        },
    )?);
    Ok(out)
}

/// Dual attention with both streams equal and `zeta = 1/sqrt(d)` against
/// standard scaled dot-product attention, over 24 random configurations.
pub fn reduction_checks(o: &VerifyOptions) -> Result<Vec<Check>> {
    let mut worst: f64 = 0.0;
    let configs = 24;
    for i in 0..configs {
        let mut r = stream_at(o.seed, Stream::Test, 200 + i);
        let heads = [1, 2, 4][i as usize % 3];
        let c = heads * r.gen_range(1..5);
        let shape = [r.gen_range(1..3), c, r.gen_range(1..7), r.gen_range(1..7)];
        let mk = |r: &mut rand_chacha::ChaCha8Rng, scale: f64| {
            Tensor::rand_uniform(&shape, -scale, scale, r)
        };
        let (q, k, v) = (mk(&mut r, 3.0), mk(&mut r, 3.0), mk(&mut r, 1.0));
        let mut tape = Tape::<f64>::new();
        let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v));
        let z = tape.constant(Tensor::full(&[heads], 1.0 / ((c / heads) as f64).sqrt()));
        let dual = dmsa_core(&mut tape, qv, kv, vv, z)?;
        let std = mhsa_attention(&mut tape, qv, kv, vv, heads)?;
        worst = worst.max(tape.value(dual).max_abs_diff(tape.value(std)));
    }
    Ok(vec![Check::new(
        "dual attention reduces to standard",
        worst <= 1e-6,
        format!("max abs diff {worst:.3e} over {configs} configs"),
    )])
}

/// Exact structural identities.
pub fn structural_checks(o: &VerifyOptions) -> Result<Vec<Check>> {
    let s = o.seed;
    let mut out = Vec::new();

    let mut tape = Tape::<f64>::new();
    let logits = tape.constant(rand_t(&[2, 3, 37], s, 300).map(|v| 30.0 * v));
    let p = tape.softmax_lastdim(logits)?;
    let dev = tape
        .value(p)
        .data()
        .chunks(37)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    // The fused attention never materializes its rows; with all-ones values
    // its output is exactly the row sums.
    let mut t32 = Tape::<f32>::new();
    let shape = [1, 4, 5, 9];
    let q = t32.constant(rand_t(&shape, s, 301).map(|v| 4.0 * v).cast());
    let k = t32.constant(rand_t(&shape, s, 302).map(|v| 4.0 * v).cast());
    let ones = t32.constant(Tensor::full(&shape, 1.0));
    let z = t32.constant(Tensor::full(&[2], 1.0));
    let a = dmsa_core(&mut t32, q, k, ones, z)?;
    let dev32 = t32
        .value(a)
        .data()
        .iter()
        .map(|&v| (v as f64 - 1.0).abs())
        .fold(0.0, f64::max);
    out.push(Check::new(
        "softmax rows sum to one",
        dev <= 1e-6 && dev32 <= 1e-6,
        format!("max deviation {dev:.2e} (softmax), {dev32:.2e} (fused attention, f32)"),
    ));

    let (a, b) = (
        rand_t(&[2, 3, 4, 5], s, 310).cast::<f32>(),
        rand_t(&[2, 2, 4, 5], s, 311).cast::<f32>(),
    );
    let mut tape = Tape::<f32>::new();
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.concat_channels(av, bv)?;
    let (sa, sb) = (tape.slice_channels(c, 0, 3)?, tape.slice_channels(c, 3, 5)?);
    out.push(Check::new(
        "concat then slice is bitwise",
        tape.value(sa) == &a && tape.value(sb) == &b,
        "split of [a|b] returns a and b",
    ));

    let img = rand_t(&[3, 7, 7], s, 320).cast::<f32>();
    let mut ok = true;
    for k in 0..8u8 {
        ok &= dihedral(&dihedral(&img, k)?, dihedral_inverse(k))? == img;
    }
    out.push(Check::new(
        "dihedral inverses are bitwise",
        ok,
        "8 transforms on a 7x7 image",
    ));

    out.push(csdmsa_stepwise(s)?);
    Ok(out)
}

/// The fused cross-scale block against its three steps written out.
fn csdmsa_stepwise(seed: u64) -> Result<Check> {
    let mut ok = true;
    for mid_primed in [false, true] {
        let mut store = ParamStore::<f32>::new();
        let cp = CrossScaleParams::register(
            &mut store,
            "cs",
            8,
            2,
            &mut stream_at(seed, Stream::Test, 330),
        )?;
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, false);
        let mut mk = |i: u64| tape.constant(rand_t(&[2, 8, 4, 4], seed, 331 + i).cast());
        let (mid, res) = (
            FeaturePair::new(mk(0), mk(1)),
            FeaturePair::new(mk(2), mk(3)),
        );
        let opts = BlockOptions {
            mid_primed,
            ..Default::default()
        };
        let fused = csdmsa(&mut tape, mid, res, &cp, &vars, &opts)?;

        let fuse = |tape: &mut Tape<f32>,
                    r: Var,
                    m: Var,
                    inner: &(AttnParams, AttnParams),
                    w: (crate::ParamId, crate::ParamId)| {
            let r2 = dmsa_stream(tape, r, m, &inner.0, &inner.1, &vars, &opts)?;
            let m2 = if mid_primed {
                dmsa_stream(tape, m, r, &inner.1, &inner.0, &vars, &opts)?
            } else {
                m
            };
            let cat = tape.concat_channels(r2, m2)?;
            tape.conv2d(cat, w.0.var(&vars), Some(w.1.var(&vars)), 1, 0)
        };
        let av = fuse(
            &mut tape,
            res.visual,
            mid.visual,
            &cp.inner_visual,
            cp.fuse_visual,
        )?;
        let as_ = fuse(
            &mut tape,
            res.semantic,
            mid.semantic,
            &cp.inner_semantic,
            cp.fuse_semantic,
        )?;
        let o = dmsa_block(
            &mut tape,
            FeaturePair::new(av, as_),
            &cp.outer.0,
            &cp.outer.1,
            &vars,
            &opts,
        )?;
        let ov = resample_up(
            &mut tape,
            o.visual,
            cp.up_visual.0.var(&vars),
            cp.up_visual.1.var(&vars),
        )?;
        let os = resample_up(
            &mut tape,
            o.semantic,
            cp.up_semantic.0.var(&vars),
            cp.up_semantic.1.var(&vars),
        )?;
        ok &= tape.value(fused.visual) == tape.value(ov)
            && tape.value(fused.semantic) == tape.value(os);
    }
    Ok(Check::new(
        "csdmsa fused equals stepwise",
        ok,
        "bitwise, with raw and attended mid features",
    ))
}

/// Input sizes for the identity check; several are not multiples of 4.
pub const IDENTITY_SIZES: [(usize, usize); 6] =
    [(8, 8), (13, 17), (9, 31), (20, 20), (16, 10), (31, 11)];

/// A freshly initialized model returns its input unchanged.
pub fn identity_checks(o: &VerifyOptions) -> Result<Vec<Check>> {
    let model: Model<f32> = Model::new(ModelConfig {
        seed: o.seed,
        ..ModelConfig::default()
    })?;
    let mut out = Vec::new();
    for (i, &(h, w)) in IDENTITY_SIZES.iter().enumerate() {
        let img: Tensor<f32> = Tensor::rand_uniform(
            &[1, 3, h, w],
            0.0,
            1.0,
            &mut stream_at(o.seed, Stream::Test, 400 + i as u64),
        );
        let y = model.enhance(&img)?;
        let same = y == img;
        let detail = if same {
            "bitwise".to_string()
        } else {
            format!("max abs diff {:.3e}", y.max_abs_diff(&img))
        };
        out.push(Check::new(
            format!("identity at init {h}x{w}"),
            same,
            detail,
        ));
    }
    Ok(out)
}

/// Exact values of the losses and metrics at known points.
pub fn loss_checks(o: &VerifyOptions) -> Result<Vec<Check>> {
    let s = o.seed;
    let mut out = Vec::new();
    let x = Tensor::rand_uniform(
        &[2, 3, 5, 7],
        0.0,
        1.0,
        &mut stream_at(s, Stream::Test, 500),
    );
    let n = x.len() as f64;
    let charb = |eps: f64| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let (p, r) = (tape.constant(x.clone()), tape.constant(x.clone()));
        let l = charbonnier(&mut tape, p, r, eps, Reduction::Sum)?;
        tape.value(l).item()
    };
    // A power-of-two epsilon makes every step exact.
    let eps2 = 2f64.powi(-10);
    let (exact, near) = (charb(eps2)?, charb(1e-3)?);
    out.push(Check::new(
        "charbonnier of equal images is n*eps",
        exact == n * eps2 && (near - n * 1e-3).abs() <= 1e-15,
        format!(
            "eps=2^-10: {exact} vs {}, eps=1e-3: off by {:.1e}",
            n * eps2,
            (near - n * 1e-3).abs()
        ),
    ));

    let net = FeatureNet::<f64>::new(s);
    let img = |i| {
        Tensor::rand_uniform(
            &[1, 3, 32, 32],
            0.0,
            1.0,
            &mut stream_at(s, Stream::Test, i),
        )
    };
    let (p, r) = (img(501), img(502));
    let mut tape = Tape::new();
    let (pv, rv) = (tape.constant(p.clone()), tape.constant(r.clone()));
    let self_p = perceptual(&mut tape, pv, pv, &net)?;
    let lp = tape.value(self_p).item()?;
    out.push(Check::new(
        "perceptual of equal images is zero",
        lp == 0.0,
        format!("{lp}"),
    ));

    let w = LossWeights::default();
    let (_, only_c) = total_loss(&mut tape, pv, rv, &LossWeights { lambda: 0.0, ..w }, &net)?;
    let (_, only_p) = total_loss(&mut tape, pv, rv, &LossWeights { lambda: 1.0, ..w }, &net)?;
    out.push(Check::new(
        "lambda 0 and 1 select one component",
        only_c.total == only_c.charbonnier && only_p.total == only_p.perceptual,
        format!(
            "lambda=0: {} vs {}, lambda=1: {} vs {}",
            only_c.total, only_c.charbonnier, only_p.total, only_p.perceptual
        ),
    ));

    let direct = psnr_from_mse(0.01);
    let shifted = psnr(&r.map(|v| 0.8 * v + 0.1), &r.map(|v| 0.8 * v))?;
    out.push(Check::new(
        "psnr at mse 0.01 is 20 dB",
        (direct - 20.0).abs() <= 1e-6 && (shifted - 20.0).abs() <= 1e-6,
        format!("{direct} from mse, {shifted} from a uniform 0.1 offset"),
    ));

    let self_ssim = ssim(&p, &p)?;
    out.push(Check::new(
        "ssim of an image with itself is 1",
        self_ssim == 1.0,
        format!("{self_ssim}"),
    ));
    Ok(out)
}

/// Widths at which the parameter count is reported.
pub const CAPACITY_WIDTHS: [usize; 4] = [2, 4, 8, 16];
pub const MAX_PARAMS_AT_8: usize = 200_000;

/// Parameter count grows with the width and stays small at the default.
pub fn capacity_checks() -> Result<Vec<Check>> {
    let mut counts = Vec::new();
    for c0 in CAPACITY_WIDTHS {
        counts.push(
            Model::<f32>::new(ModelConfig {
                c0,
                ..ModelConfig::default()
            })?
            .param_count(),
        );
    }
    let at8 = counts[2];
    let detail = CAPACITY_WIDTHS
        .iter()
        .zip(&counts)
        .map(|(c, n)| format!("c0={c}: {n}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(vec![
        Check::new(
            "parameter count grows with c0",
            counts.windows(2).all(|w| w[0] < w[1]),
            detail,
        ),
        Check::new(
            format!("under {MAX_PARAMS_AT_8} parameters at c0=8"),
            at8 < MAX_PARAMS_AT_8,
            format!("{at8}"),
        ),
    ])
}

/// Every group in order.
pub fn run_all(o: &VerifyOptions) -> Result<Vec<Check>> {
    let mut out = gradient_checks(o)?;
    out.extend(reduction_checks(o)?);
    out.extend(structural_checks(o)?);
    out.extend(identity_checks(o)?);
    out.extend(loss_checks(o)?);
    out.extend(capacity_checks()?);
    Ok(out)
}
