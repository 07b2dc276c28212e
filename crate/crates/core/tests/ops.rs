use ecaformer::gradcheck::{check_gradients, GradCheckOptions};
use ecaformer::ops::{depthwise_separable_conv, resample_down, resample_up, weighted_sum};
use ecaformer::rng::{stream_at, Stream};
use ecaformer::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand_chacha::ChaCha8Rng;

fn rng(i: u64) -> ChaCha8Rng {
    stream_at(5, Stream::Test, i)
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng(seed))
}

/// Direct seven-loop convolution with zero padding.
fn conv_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &[f64],
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor<f64> {
    let s = x.shape();
    let (n, cin, h, wd) = (s[0], s[1], s[2], s[3]);
    let ws = w.shape();
    let (cout, cin_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let cout_g = cout / groups;
    let mut out = Tensor::zeros(&[n, cout, ho, wo]);
    for bi in 0..n {
        for co in 0..cout {
            let g = co / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.get(co).copied().unwrap_or(0.0);
                    for cl in 0..cin_g {
                        let ci = g * cin_g + cl;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()
                                    [((bi * cin + ci) * h + iy as usize) * wd + ix as usize];
                                acc += xv * w.data()[((co * cin_g + cl) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out.data_mut()[((bi * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

fn run_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor<f64> {
    let mut tape = Tape::new();
    let (xv, wv, bv) = (
        tape.constant(x.clone()),
        tape.constant(w.clone()),
        tape.constant(b.clone()),
    );
    let y = tape
        .conv2d_grouped(xv, wv, Some(bv), stride, pad, groups)
        .unwrap();
    tape.value(y).clone()
}

/// Gradient check of `sum(f(inputs) * r)` for a fixed random `r`.
fn grad_err(
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Tape<f64>, &[Var]) -> ecaformer::Result<Var>,
) -> f64 {
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = f(&mut tape, &vars).unwrap();
        rand_t(tape.shape(y), 999)
    };
    let report = check_gradients(
        |tape, vars| {
            let y = f(tape, vars)?;
            weighted_sum(tape, y, &probe)
        },
        inputs,
        &GradCheckOptions::default(),
    )
    .unwrap();
    report.max_rel_error
}

#[test]
fn conv_matches_loop_oracle() {
    // Unit, even and odd strides, grouped and depthwise, odd extents.
    let cases = [
        (2, 3, 7, 9, 4, 3, 3, 1, 1, 1),
        (1, 4, 8, 8, 6, 4, 4, 2, 1, 1),
        (2, 4, 9, 7, 4, 4, 4, 2, 1, 2),
        (1, 3, 10, 11, 2, 3, 3, 3, 1, 1),
        (1, 4, 6, 6, 4, 3, 3, 1, 1, 4),
        (1, 2, 5, 5, 3, 1, 1, 1, 0, 1),
        (1, 2, 9, 8, 2, 3, 2, 2, 0, 1),
    ];
    for (i, &(n, cin, h, w, cout, kh, kw, stride, pad, groups)) in cases.iter().enumerate() {
        let x = rand_t(&[n, cin, h, w], 10 + i as u64);
        let wt = rand_t(&[cout, cin / groups, kh, kw], 20 + i as u64);
        let b = rand_t(&[cout], 30 + i as u64);
        let got = run_conv(&x, &wt, &b, stride, pad, groups);
        let want = conv_oracle(&x, &wt, b.data(), stride, pad, groups);
        assert_eq!(got.shape(), want.shape(), "case {i}");
        assert!(
            got.max_abs_diff(&want) <= 1e-12,
            "case {i}: {}",
            got.max_abs_diff(&want)
        );
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    for (i, &(stride, pad, groups, k)) in [
        (1, 1, 1, 3),
        (2, 1, 1, 4),
        (2, 1, 2, 3),
        (3, 1, 1, 3),
        (1, 0, 1, 1),
    ]
    .iter()
    .enumerate()
    {
        let x = rand_t(&[2, 4, 7, 6], 40 + i as u64);
        let w = rand_t(&[4, 4 / groups, k, k], 50 + i as u64);
        let b = rand_t(&[4], 60 + i as u64);
        let err = grad_err(&[x, w, b], |t, v| {
            t.conv2d_grouped(v[0], v[1], Some(v[2]), stride, pad, groups)
        });
        assert!(err < 1e-4, "stride {stride} groups {groups}: {err}");
    }
}

#[test]
fn depthwise_separable_gradients_match_finite_differences() {
    let inputs = [
        rand_t(&[1, 3, 6, 5], 70),
        rand_t(&[3, 1, 3, 3], 71),
        rand_t(&[5, 3, 1, 1], 72),
        rand_t(&[5], 73),
    ];
    let err = grad_err(&inputs, |t, v| {
        depthwise_separable_conv(t, v[0], v[1], v[2], v[3])
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn resample_gradients_match_finite_differences() {
    let down = [
        rand_t(&[1, 2, 6, 8], 80),
        rand_t(&[4, 2, 4, 4], 81),
        rand_t(&[4], 82),
    ];
    let err = grad_err(&down, |t, v| resample_down(t, v[0], v[1], v[2]));
    assert!(err < 1e-4, "down: {err}");
    let up = [
        rand_t(&[1, 4, 3, 5], 83),
        rand_t(&[2, 4, 1, 1], 84),
        rand_t(&[2], 85),
    ];
    let err = grad_err(&up, |t, v| resample_up(t, v[0], v[1], v[2]));
    assert!(err < 1e-4, "up: {err}");
}

#[test]
fn resample_shapes_and_errors() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(rand_t(&[1, 2, 6, 8], 90));
    let w = tape.constant(rand_t(&[4, 2, 4, 4], 91));
    let b = tape.constant(Tensor::zeros(&[4]));
    let d = resample_down(&mut tape, x, w, b).unwrap();
    assert_eq!(tape.shape(d), &[1, 4, 3, 4]);
    let odd = tape.constant(rand_t(&[1, 2, 5, 8], 92));
    assert!(resample_down(&mut tape, odd, w, b).is_err());

    let wu = tape.constant(rand_t(&[2, 4, 1, 1], 93));
    let bu = tape.constant(rand_t(&[2], 94));
    let u = resample_up(&mut tape, d, wu, bu).unwrap();
    assert_eq!(tape.shape(u), &[1, 2, 6, 8]);
    // Nearest duplication: each 2x2 block is constant.
    let v = tape.value(u).data();
    for c in 0..2 {
        for y in 0..6 {
            for xx in 0..8 {
                assert_eq!(
                    v[(c * 6 + y) * 8 + xx],
                    v[(c * 6 + y / 2 * 2) * 8 + xx / 2 * 2]
                );
            }
        }
    }
}

#[test]
fn concat_then_slice_is_bitwise() {
    let (a, b) = (rand_t(&[2, 3, 4, 5], 100), rand_t(&[2, 2, 4, 5], 101));
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.concat_channels(av, bv).unwrap();
    let (sa, sb) = (
        tape.slice_channels(c, 0, 3).unwrap(),
        tape.slice_channels(c, 3, 5).unwrap(),
    );
    assert_eq!(tape.value(sa), &a);
    assert_eq!(tape.value(sb), &b);
    let err = grad_err(&[a, b], |t, v| {
        let c = t.concat_channels(v[0], v[1])?;
        t.slice_channels(c, 1, 4)
    });
    assert!(err < 1e-8, "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn strided_conv_agrees_with_oracle_in_f32(
        h in 4usize..14, w in 4usize..14, stride in 1usize..4, k in 1usize..5, seed in 0u64..1000,
    ) {
        let pad = k / 2;
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let x = rand_t(&[1, 3, h, w], seed);
        let wt = rand_t(&[2, 3, k, k], seed + 1);
        let b = Tensor::zeros(&[2]);
        let want = conv_oracle(&x, &wt, b.data(), stride, pad, 1);
        let mut tape = Tape::<f32>::new();
        let (xv, wv) = (tape.constant(x.cast()), tape.constant(wt.cast()));
        let y = tape.conv2d(xv, wv, None, stride, pad).unwrap();
        prop_assert!(tape.value(y).cast::<f64>().max_abs_diff(&want) <= 1e-5);
    }
}
