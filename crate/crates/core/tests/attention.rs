use ecaformer::attention::{
    csdmsa, dmsa_block, dmsa_core, dmsa_stream, mhsa, mhsa_attention, AttentionKind, AttnParams,
    BlockOptions, CrossScaleParams, FeaturePair,
};
use ecaformer::gradcheck::{check_gradients, GradCheckOptions};
use ecaformer::ops::{resample_up, weighted_sum};
use ecaformer::rng::{stream_at, Stream};
use ecaformer::{ParamStore, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn rng(i: u64) -> ChaCha8Rng {
    stream_at(11, Stream::Test, i)
}

fn rand_t(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::rand_uniform(shape, -1.0, 1.0, r)
}

/// Per-head attention with explicit token loops over `[C, N]` planes of a
/// single batch element.
fn loop_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    c: usize,
    n: usize,
    heads: usize,
    scale: &[f64],
) -> Vec<f64> {
    let d = c / heads;
    let mut out = vec![0.0; c * n];
    for h in 0..heads {
        for i in 0..n {
            let mut logits = vec![0.0; n];
            for (j, l) in logits.iter_mut().enumerate() {
                let mut s = 0.0;
                for cc in h * d..(h + 1) * d {
                    s += q[cc * n + i] * k[cc * n + j];
                }
                *l = s * scale[h];
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for cc in h * d..(h + 1) * d {
                out[cc * n + i] = (0..n).map(|j| e[j] / z * v[cc * n + j]).sum();
            }
        }
    }
    out
}

fn conv1x1_ref(x: &[f64], w: &[f64], b: &[f64], c: usize, n: usize) -> Vec<f64> {
    let mut y = vec![0.0; c * n];
    for o in 0..c {
        for t in 0..n {
            y[o * n + t] = b[o] + (0..c).map(|i| w[o * c + i] * x[i * n + t]).sum::<f64>();
        }
    }
    y
}

fn store_with_attn(c: usize, heads: usize, seed: u64) -> (ParamStore<f64>, AttnParams, AttnParams) {
    let mut s = ParamStore::new();
    let mut r = rng(seed);
    let p = AttnParams::register(&mut s, "p", c, heads, &mut r).unwrap();
    let q = AttnParams::register(&mut s, "q", c, heads, &mut r).unwrap();
    // Non-zero biases exercise more of the gradient paths.
    for id in [p.bq, p.bv, p.bo, q.bq, q.bv, q.bo] {
        let t = rand_t(&[c], &mut r).map(|x| 0.1 * x);
        s.set(id, t).unwrap();
    }
    (s, p, q)
}

#[test]
fn mhsa_matches_loop_oracle() {
    let (c, h, w, heads) = (4, 3, 3, 2);
    let (s, p, _) = store_with_attn(c, heads, 1);
    let x = rand_t(&[1, c, h, w], &mut rng(2));
    let mut tape = Tape::new();
    let vars = s.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let out = mhsa(&mut tape, xv, &p, &vars).unwrap();

    let n = h * w;
    let g = |id: ecaformer::ParamId| s.get(id).data().to_vec();
    let q = conv1x1_ref(x.data(), &g(p.wq), &g(p.bq), c, n);
    let k = conv1x1_ref(x.data(), &g(p.wk), &[0.0; 4], c, n);
    let v = conv1x1_ref(x.data(), &g(p.wv), &g(p.bv), c, n);
    let scale = vec![1.0 / 2f64.sqrt(); heads];
    let a = loop_attention(&q, &k, &v, c, n, heads, &scale);
    let want = conv1x1_ref(&a, &g(p.wo), &g(p.bo), c, n);
    let got = tape.value(out).data();
    let err = got
        .iter()
        .zip(&want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn single_token_attention_returns_values() {
    let mut r = rng(3);
    let (q, k, v) = (
        rand_t(&[2, 4, 1, 1], &mut r),
        rand_t(&[2, 4, 1, 1], &mut r),
        rand_t(&[2, 4, 1, 1], &mut r),
    );
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v.clone()));
    let a = mhsa_attention(&mut tape, qv, kv, vv, 2).unwrap();
    assert_eq!(tape.value(a), &v);
    let z = tape.constant(Tensor::full(&[2], 0.7));
    let b = dmsa_core(&mut tape, qv, kv, vv, z).unwrap();
    assert_eq!(tape.value(b), &v);
}

fn token_mean_broadcast(v: &Tensor<f64>) -> Tensor<f64> {
    let (b, c, h, w) = v.dims4("test").unwrap();
    let n = h * w;
    let mut out = v.clone();
    for plane in 0..b * c {
        let m: f64 = v.data()[plane * n..(plane + 1) * n].iter().sum::<f64>() / n as f64;
        out.data_mut()[plane * n..(plane + 1) * n].fill(m);
    }
    out
}

#[test]
fn zero_queries_give_uniform_attention() {
    let mut r = rng(4);
    let (k, v) = (rand_t(&[1, 4, 3, 2], &mut r), rand_t(&[1, 4, 3, 2], &mut r));
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::zeros(&[1, 4, 3, 2]));
    let (kv, vv) = (tape.constant(k), tape.constant(v.clone()));
    let a = mhsa_attention(&mut tape, q, kv, vv, 2).unwrap();
    assert!(tape.value(a).max_abs_diff(&token_mean_broadcast(&v)) < 1e-12);
}

#[test]
fn zero_projection_in_mhsa_layer_gives_mean_of_values() {
    let (c, heads) = (4, 2);
    let (mut s, p, _) = store_with_attn(c, heads, 5);
    s.set(p.wq, Tensor::zeros(&[c, c, 1, 1])).unwrap();
    s.set(p.bq, Tensor::zeros(&[c])).unwrap();
    let x = rand_t(&[1, c, 3, 3], &mut rng(6));
    let mut tape = Tape::new();
    let vars = s.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let out = mhsa(&mut tape, xv, &p, &vars).unwrap();
    let n = 9;
    let v = conv1x1_ref(x.data(), s.get(p.wv).data(), s.get(p.bv).data(), c, n);
    let vt = Tensor::new(vec![1, c, 3, 3], v).unwrap();
    let mean = token_mean_broadcast(&vt);
    let want = conv1x1_ref(mean.data(), s.get(p.wo).data(), s.get(p.bo).data(), c, n);
    let err = tape
        .value(out)
        .data()
        .iter()
        .zip(&want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-12, "{err}");
}

#[test]
fn zero_zeta_gives_mean_of_values() {
    let mut r = rng(7);
    let (q, k, v) = (
        rand_t(&[2, 4, 2, 3], &mut r),
        rand_t(&[2, 4, 2, 3], &mut r),
        rand_t(&[2, 4, 2, 3], &mut r),
    );
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v.clone()));
    let z = tape.constant(Tensor::zeros(&[2]));
    let a = dmsa_core(&mut tape, qv, kv, vv, z).unwrap();
    assert!(tape.value(a).max_abs_diff(&token_mean_broadcast(&v)) < 1e-12);
}

#[test]
fn dual_core_matches_written_out_formula() {
    // One head, d_k = 2, two tokens laid out as [C=2, N=2] planes.
    let q: [f64; 4] = [0.3, -0.7, 1.1, 0.4];
    let k = [-0.5, 0.9, 0.2, -1.3];
    let v = [2.0, -1.0, 0.5, 3.0];
    let zeta: f64 = 0.8;
    let mut want = [0.0; 4];
    for i in 0..2 {
        let s0 = (q[i] * k[0] + q[2 + i] * k[2]) * zeta;
        let s1 = (q[i] * k[1] + q[2 + i] * k[3]) * zeta;
        let p0 = s0.exp() / (s0.exp() + s1.exp());
        let p1 = s1.exp() / (s0.exp() + s1.exp());
        want[i] = p0 * v[0] + p1 * v[1];
        want[2 + i] = p0 * v[2] + p1 * v[3];
    }
    let mut tape = Tape::new();
    let t = |a: [f64; 4]| Tensor::new(vec![1, 2, 1, 2], a.to_vec()).unwrap();
    let (qv, kv, vv) = (
        tape.constant(t(q)),
        tape.constant(t(k)),
        tape.constant(t(v)),
    );
    let z = tape.constant(Tensor::full(&[1], zeta));
    let a = dmsa_core(&mut tape, qv, kv, vv, z).unwrap();
    for (g, w) in tape.value(a).data().iter().zip(want) {
        assert!((g - w).abs() <= 1e-9, "{g} vs {w}");
    }
}

#[test]
fn dual_core_reduces_to_standard_attention() {
    for seed in 0..24u64 {
        let mut r = rng(100 + seed);
        let heads = [1, 2, 4][seed as usize % 3];
        let c = heads * r.gen_range(1..4);
        let (b, h, w) = (r.gen_range(1..3), r.gen_range(1..6), r.gen_range(1..6));
        let shape = [b, c, h, w];
        let q = rand_t(&shape, &mut r).map(|x| 3.0 * x);
        let k = rand_t(&shape, &mut r).map(|x| 3.0 * x);
        let v = rand_t(&shape, &mut r);
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v));
        let z = tape.constant(Tensor::full(&[heads], 1.0 / ((c / heads) as f64).sqrt()));
        let dual = dmsa_core(&mut tape, qv, kv, vv, z).unwrap();
        let std = mhsa_attention(&mut tape, qv, kv, vv, heads).unwrap();
        let err = tape.value(dual).max_abs_diff(tape.value(std));
        assert!(err <= 1e-6, "seed {seed}: {err}");
    }
}

#[test]
fn attention_rows_are_stochastic() {
    let mut r = rng(8);
    let x = rand_t(&[2, 3, 17], &mut r).map(|v| 20.0 * v);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let p = tape.softmax_lastdim(xv).unwrap();
    for row in tape.value(p).data().chunks(17) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }
}

fn pair_inputs(shape: &[usize], seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut r = rng(seed);
    (rand_t(shape, &mut r), rand_t(shape, &mut r))
}

#[test]
fn dual_block_is_symmetric_under_stream_swap() {
    let (s, p, q) = store_with_attn(4, 2, 9);
    let (a, b) = pair_inputs(&[1, 4, 3, 4], 10);
    let mut tape = Tape::new();
    let vars = s.bind(&mut tape, false);
    let pair = FeaturePair::new(tape.constant(a), tape.constant(b));
    let opts = BlockOptions::default();
    let out = dmsa_block(&mut tape, pair, &p, &q, &vars, &opts).unwrap();
    let swapped = dmsa_block(&mut tape, pair.swapped(), &q, &p, &vars, &opts).unwrap();
    assert_eq!(tape.value(out.visual), tape.value(swapped.semantic));
    assert_eq!(tape.value(out.semantic), tape.value(swapped.visual));
}

#[test]
fn degenerate_block_gives_equal_streams() {
    let (mut s, p, q) = store_with_attn(4, 2, 11);
    for (a, b) in p.ids().into_iter().zip(q.ids()) {
        let v = s.get(a).clone();
        s.set(b, v).unwrap();
    }
    s.set(p.pos, Tensor::zeros(&[4, 1, 3, 3])).unwrap();
    s.set(q.pos, Tensor::zeros(&[4, 1, 3, 3])).unwrap();
    let (a, _) = pair_inputs(&[2, 4, 3, 3], 12);
    let mut tape = Tape::new();
    let vars = s.bind(&mut tape, false);
    let x = tape.constant(a);
    let out = dmsa_block(
        &mut tape,
        FeaturePair::new(x, x),
        &p,
        &q,
        &vars,
        &BlockOptions::default(),
    )
    .unwrap();
    assert_eq!(tape.value(out.visual), tape.value(out.semantic));
}

#[test]
fn dual_core_is_permutation_equivariant() {
    let mut r = rng(13);
    let shape = [1, 4, 3, 3];
    let (q, k, v) = (
        rand_t(&shape, &mut r),
        rand_t(&shape, &mut r),
        rand_t(&shape, &mut r),
    );
    let n = 9;
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, r.gen_range(0..=i));
    }
    let permute = |t: &Tensor<f64>| {
        let mut o = t.clone();
        for c in 0..4 {
            for (i, &p) in perm.iter().enumerate() {
                o.data_mut()[c * n + i] = t.data()[c * n + p];
            }
        }
        o
    };
    let run = |q: Tensor<f64>, k: Tensor<f64>, v: Tensor<f64>| {
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v));
        let z = tape.constant(Tensor::full(&[2], 0.6));
        let a = dmsa_core(&mut tape, qv, kv, vv, z).unwrap();
        tape.value(a).clone()
    };
    let base = run(q.clone(), k.clone(), v.clone());
    let permuted = run(permute(&q), permute(&k), permute(&v));
    assert!(permute(&base).max_abs_diff(&permuted) < 1e-12);
}

#[test]
fn indivisible_heads_are_a_config_error() {
    let mut s = ParamStore::<f64>::new();
    let err = AttnParams::register(&mut s, "p", 6, 4, &mut rng(0)).unwrap_err();
    assert!(matches!(err, ecaformer::Error::Config(_)), "{err}");
}

/// Gradient check over all parameters and both inputs of a block.
fn block_gradcheck<F>(s: &ParamStore<f64>, inputs: &[Tensor<f64>], out_shape: &[usize], f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var], &[Var]) -> ecaformer::Result<Vec<Var>>,
{
    let weights: Vec<Tensor<f64>> = (0..4)
        .map(|i| rand_t(out_shape, &mut rng(900 + i)))
        .collect();
    let mut all = s.values();
    let np = all.len();
    all.extend(inputs.iter().cloned());
    let report = check_gradients(
        |tape, vars| {
            let outs = f(tape, &vars[..np], &vars[np..])?;
            let mut total: Option<Var> = None;
            for (o, w) in outs.into_iter().zip(&weights) {
                let l = weighted_sum(tape, o, w)?;
                total = Some(match total {
                    Some(t) => tape.add(t, l)?,
                    None => l,
                });
            }
            Ok(total.unwrap())
        },
        &all,
        &GradCheckOptions::default(),
    )
    .unwrap();
    report.max_rel_error
}

#[test]
fn mhsa_gradients_match_finite_differences() {
    let (s, p, _) = store_with_attn(4, 2, 14);
    let (a, _) = pair_inputs(&[1, 4, 3, 3], 15);
    let err = block_gradcheck(&s, &[a], &[1, 4, 3, 3], |tape, pv, xs| {
        Ok(vec![mhsa(tape, xs[0], &p, pv)?])
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn dual_block_gradients_match_finite_differences() {
    let (s, p, q) = store_with_attn(4, 2, 16);
    let (a, b) = pair_inputs(&[1, 4, 4, 4], 17);
    for opts in [
        BlockOptions::default(),
        BlockOptions {
            norm: true,
            ..Default::default()
        },
    ] {
        let err = block_gradcheck(
            &s,
            &[a.clone(), b.clone()],
            &[1, 4, 4, 4],
            |tape, pv, xs| {
                let o = dmsa_block(tape, FeaturePair::new(xs[0], xs[1]), &p, &q, pv, &opts)?;
                Ok(vec![o.visual, o.semantic])
            },
        );
        assert!(err < 1e-4, "{opts:?}: {err}");
    }
}

fn cross_scale_store(c: usize, heads: usize, seed: u64) -> (ParamStore<f64>, CrossScaleParams) {
    let mut s = ParamStore::new();
    let cp = CrossScaleParams::register(&mut s, "cs", c, heads, &mut rng(seed)).unwrap();
    (s, cp)
}

#[test]
fn cross_scale_gradients_match_finite_differences() {
    let (s, cp) = cross_scale_store(4, 2, 18);
    let shape = [1, 4, 2, 2];
    let mut r = rng(19);
    let inputs: Vec<Tensor<f64>> = (0..4).map(|_| rand_t(&shape, &mut r)).collect();
    for mid_primed in [false, true] {
        let opts = BlockOptions {
            mid_primed,
            ..Default::default()
        };
        let err = block_gradcheck(&s, &inputs, &[1, 2, 4, 4], |tape, pv, xs| {
            let o = csdmsa(
                tape,
                FeaturePair::new(xs[0], xs[1]),
                FeaturePair::new(xs[2], xs[3]),
                &cp,
                pv,
                &opts,
            )?;
            Ok(vec![o.visual, o.semantic])
        });
        assert!(err < 1e-4, "mid_primed={mid_primed}: {err}");
    }
}

#[test]
fn cross_scale_shape_contract_and_scale_check() {
    let (s, cp) = cross_scale_store(8, 2, 20);
    let mut r = rng(21);
    let mut tape = Tape::new();
    let vars = s.bind(&mut tape, false);
    let mut mk = |shape: &[usize]| tape.constant(rand_t(shape, &mut r));
    let (m0, m1, r0, r1) = (
        mk(&[2, 8, 4, 4]),
        mk(&[2, 8, 4, 4]),
        mk(&[2, 8, 4, 4]),
        mk(&[2, 8, 4, 4]),
    );
    let bad = mk(&[2, 8, 2, 2]);
    let opts = BlockOptions::default();
    let out = csdmsa(
        &mut tape,
        FeaturePair::new(m0, m1),
        FeaturePair::new(r0, r1),
        &cp,
        &vars,
        &opts,
    )
    .unwrap();
    assert_eq!(tape.shape(out.visual), &[2, 4, 8, 8]);
    assert_eq!(tape.shape(out.semantic), &[2, 4, 8, 8]);
    let err = csdmsa(
        &mut tape,
        FeaturePair::new(m0, m1),
        FeaturePair::new(bad, bad),
        &cp,
        &vars,
        &opts,
    );
    assert!(matches!(err, Err(ecaformer::Error::Dimension { .. })));
}

#[test]
fn selecting_fusion_passes_attended_residual_through() {
    let (mut s, cp) = cross_scale_store(4, 2, 22);
    let c = 4;
    let select = Tensor::from_fn(&[c, 2 * c, 1, 1], |i| {
        if i % (2 * c) == i / (2 * c) {
            1.0
        } else {
            0.0
        }
    });
    s.set(cp.fuse_visual.0, select).unwrap();
    let mut r = rng(23);
    let mut tape = Tape::new();
    let vars = s.bind(&mut tape, false);
    let res = tape.constant(rand_t(&[1, c, 3, 3], &mut r));
    let mid = tape.constant(rand_t(&[1, c, 3, 3], &mut r));
    let opts = BlockOptions::default();
    let (pr, pm) = &cp.inner_visual;
    let res2 = dmsa_stream(&mut tape, res, mid, pr, pm, &vars, &opts).unwrap();
    let cat = tape.concat_channels(res2, mid).unwrap();
    let (fw, fb) = cp.fuse_visual;
    let agg = tape
        .conv2d(cat, fw.var(&vars), Some(fb.var(&vars)), 1, 0)
        .unwrap();
    assert_eq!(tape.value(agg), tape.value(res2));
}

#[test]
fn cross_scale_equals_stepwise_composition() {
    for mid_primed in [false, true] {
        let (s, cp) = cross_scale_store(8, 2, 24);
        let mut r = rng(25);
        let mut tape = Tape::new();
        let vars = s.bind(&mut tape, false);
        let mut mk = || tape.constant(rand_t(&[2, 8, 4, 4], &mut r));
        let (mid, res) = (FeaturePair::new(mk(), mk()), FeaturePair::new(mk(), mk()));
        let opts = BlockOptions {
            mid_primed,
            ..Default::default()
        };
        let fused = csdmsa(&mut tape, mid, res, &cp, &vars, &opts).unwrap();

        // Step 1: residual/mid interaction per stream.
        let iv = dmsa_block(
            &mut tape,
            FeaturePair::new(res.visual, mid.visual),
            &cp.inner_visual.0,
            &cp.inner_visual.1,
            &vars,
            &opts,
        )
        .unwrap();
        let is = dmsa_block(
            &mut tape,
            FeaturePair::new(res.semantic, mid.semantic),
            &cp.inner_semantic.0,
            &cp.inner_semantic.1,
            &vars,
            &opts,
        )
        .unwrap();
        // Step 2: fusion.
        let (mv, ms) = if mid_primed {
            (iv.semantic, is.semantic)
        } else {
            (mid.visual, mid.semantic)
        };
        let cv = tape.concat_channels(iv.visual, mv).unwrap();
        let cs = tape.concat_channels(is.visual, ms).unwrap();
        let av = tape
            .conv2d(
                cv,
                cp.fuse_visual.0.var(&vars),
                Some(cp.fuse_visual.1.var(&vars)),
                1,
                0,
            )
            .unwrap();
        let as_ = tape
            .conv2d(
                cs,
                cp.fuse_semantic.0.var(&vars),
                Some(cp.fuse_semantic.1.var(&vars)),
                1,
                0,
            )
            .unwrap();
        // Step 3: outer interaction and upsampling.
        let o = dmsa_block(
            &mut tape,
            FeaturePair::new(av, as_),
            &cp.outer.0,
            &cp.outer.1,
            &vars,
            &opts,
        )
        .unwrap();
        let ov = resample_up(
            &mut tape,
            o.visual,
            cp.up_visual.0.var(&vars),
            cp.up_visual.1.var(&vars),
        )
        .unwrap();
        let os = resample_up(
            &mut tape,
            o.semantic,
            cp.up_semantic.0.var(&vars),
            cp.up_semantic.1.var(&vars),
        )
        .unwrap();

        assert_eq!(tape.value(fused.visual), tape.value(ov));
        assert_eq!(tape.value(fused.semantic), tape.value(os));
    }
}

#[test]
fn single_kind_uses_plain_self_attention() {
    let (s, p, q) = store_with_attn(4, 2, 26);
    let (a, b) = pair_inputs(&[1, 4, 3, 3], 27);
    let mut tape = Tape::new();
    let vars = s.bind(&mut tape, false);
    let pair = FeaturePair::new(tape.constant(a), tape.constant(b));
    let opts = BlockOptions {
        kind: AttentionKind::Single,
        ..Default::default()
    };
    let out = dmsa_block(&mut tape, pair, &p, &q, &vars, &opts).unwrap();
    let want_v = mhsa(&mut tape, pair.visual, &p, &vars).unwrap();
    let want_s = mhsa(&mut tape, pair.semantic, &q, &vars).unwrap();
    assert_eq!(tape.value(out.visual), tape.value(want_v));
    assert_eq!(tape.value(out.semantic), tape.value(want_s));
    assert_eq!(
        "mhsa".parse::<AttentionKind>().unwrap(),
        AttentionKind::Single
    );
    assert!("flash".parse::<AttentionKind>().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dual_block_preserves_shape(
        c in prop::sample::select(vec![2usize, 4, 8]),
        h in prop::sample::select(vec![2usize, 4, 8]),
        w in prop::sample::select(vec![2usize, 4, 8]),
        heads in 1usize..=2,
        posemb: bool,
        seed in 0u64..1000,
    ) {
        let (s, p, q) = store_with_attn(c, heads, seed);
        let (a, b) = pair_inputs(&[1, c, h, w], seed + 1);
        let mut tape = Tape::new();
        let vars = s.bind(&mut tape, false);
        let pair = FeaturePair::new(tape.constant(a), tape.constant(b));
        let opts = BlockOptions { posemb, ..Default::default() };
        let out = dmsa_block(&mut tape, pair, &p, &q, &vars, &opts).unwrap();
        prop_assert_eq!(tape.shape(out.visual), &[1, c, h, w]);
        prop_assert_eq!(tape.shape(out.semantic), &[1, c, h, w]);
    }
}

#[test]
fn fused_kernel_matches_loop_oracle_across_head_sizes() {
    // Head sizes with and without a specialised kernel, token counts that
    // leave partial lanes and partial row blocks.
    for (seed, &(d, heads, h, w)) in [
        (3, 2, 1, 7),
        (5, 1, 6, 6),
        (8, 2, 3, 13),
        (12, 1, 5, 7),
        (16, 1, 4, 9),
        (16, 1, 3, 5),
        (32, 1, 2, 3),
        (4, 2, 5, 9),
    ]
    .iter()
    .enumerate()
    {
        let c = d * heads;
        let shape = [2, c, h, w];
        let mut r = rng(700 + seed as u64);
        let q = rand_t(&shape, &mut r).map(|x| 2.0 * x);
        let k = rand_t(&shape, &mut r).map(|x| 2.0 * x);
        let v = rand_t(&shape, &mut r);
        let zeta: Vec<f64> = (0..heads).map(|i| 0.3 + 0.2 * i as f64).collect();
        let n = h * w;
        let mut want = Vec::new();
        for b in 0..2 {
            let sl = |t: &Tensor<f64>| t.data()[b * c * n..(b + 1) * c * n].to_vec();
            want.extend(loop_attention(
                &sl(&q),
                &sl(&k),
                &sl(&v),
                c,
                n,
                heads,
                &zeta,
            ));
        }

        let mut tape = Tape::new();
        let (qv, kv, vv) = (
            tape.constant(q.clone()),
            tape.constant(k.clone()),
            tape.constant(v.clone()),
        );
        let z = tape.constant(Tensor::new(vec![heads], zeta.clone()).unwrap());
        let a = dmsa_core(&mut tape, qv, kv, vv, z).unwrap();
        let err = tape
            .value(a)
            .data()
            .iter()
            .zip(&want)
            .map(|(g, w)| (g - w).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-12, "d={d} n={n}: f64 error {err}");

        let mut tape = Tape::<f32>::new();
        let (qv, kv, vv) = (
            tape.constant(q.cast()),
            tape.constant(k.cast()),
            tape.constant(v.cast()),
        );
        let z = tape.constant(Tensor::new(vec![heads], zeta.clone()).unwrap().cast());
        let a = dmsa_core(&mut tape, qv, kv, vv, z).unwrap();
        let err = tape
            .value(a)
            .data()
            .iter()
            .zip(&want)
            .map(|(g, w)| (*g as f64 - w).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-5, "d={d} n={n}: f32 error {err}");
    }
}

#[test]
fn fused_kernel_gradients_match_finite_differences() {
    for (seed, &(d, heads, h, w)) in [
        (4, 2, 5, 9),
        (12, 1, 3, 7),
        (3, 1, 4, 5),
        (16, 1, 3, 5),
        (8, 1, 3, 3),
    ]
    .iter()
    .enumerate()
    {
        let shape = [1, d * heads, h, w];
        let mut r = rng(750 + seed as u64);
        let inputs = vec![
            rand_t(&shape, &mut r),
            rand_t(&shape, &mut r),
            rand_t(&shape, &mut r),
            Tensor::new(
                vec![heads],
                (0..heads).map(|i| 0.5 + 0.25 * i as f64).collect(),
            )
            .unwrap(),
        ];
        let err = block_gradcheck(&ParamStore::new(), &inputs, &shape, |tape, _, xs| {
            Ok(vec![dmsa_core(tape, xs[0], xs[1], xs[2], xs[3])?])
        });
        assert!(err < 1e-6, "d={d}: {err}");
    }
}

#[test]
fn oversized_heads_are_rejected() {
    let shape = [1, 65, 2, 2];
    let x = Tensor::<f64>::zeros(&shape);
    let mut tape = Tape::new();
    let (q, k, v) = (
        tape.constant(x.clone()),
        tape.constant(x.clone()),
        tape.constant(x),
    );
    let z = tape.constant(Tensor::full(&[1], 1.0));
    assert!(dmsa_core(&mut tape, q, k, v, z).is_err());
}
