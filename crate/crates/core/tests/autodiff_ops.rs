use rspnet::gradcheck::{grad_check, ScalarFn};
use rspnet::rng::seeded;
use rspnet::{ConvSpec, Result, Scalar, Tape, Tape64, Tensor, Tensor64, Var};

/// Fixed f32 draws widened to `T`, so both precisions see the same map.
fn fixed<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    Tensor::<f32>::uniform(shape, -1.0, 1.0, &mut seeded(seed))
        .unwrap()
        .cast()
}

fn project<T: Scalar>(tape: &mut Tape<T>, out: Var, seed: u64) -> Result<Var> {
    let r = tape.constant(fixed(&tape.shape(out).to_vec(), seed));
    let p = tape.mul(out, r)?;
    Ok(tape.sum(p))
}

#[derive(Clone, Copy, Debug)]
enum Op {
    ConvInput(ConvSpec, [usize; 4]),
    ConvWeight(ConvSpec, [usize; 4]),
    ConvBias,
    Softmax(usize),
    Sigmoid,
    ChannelNorm,
    Bilinear(usize, usize),
    CrossEntropy,
    ConcatSplit,
    SumMeanAxis,
    ChannelDot,
    ScaleBy,
}

impl ScalarFn for Op {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let out = match *self {
            Op::ConvInput(spec, w) => {
                let w = tape.constant(fixed(&w, 1));
                tape.conv2d(x, w, None, spec)?
            }
            Op::ConvWeight(spec, xs) => {
                let input = tape.constant(fixed(&xs, 2));
                tape.conv2d(input, x, None, spec)?
            }
            Op::ConvBias => {
                let input = tape.constant(fixed(&[2, 3, 5, 5], 3));
                let w = tape.constant(fixed(&[4, 3, 3, 3], 4));
                tape.conv2d(input, w, Some(x), ConvSpec::new(1, 1, 1, 1))?
            }
            Op::Softmax(axis) => tape.softmax(x, axis)?,
            Op::Sigmoid => tape.sigmoid(x),
            Op::ChannelNorm => tape.channel_norm(x)?,
            Op::Bilinear(h, w) => tape.interpolate_bilinear(x, h, w)?,
            Op::CrossEntropy => {
                let (n, _, h, w) = tape.value(x).dims4()?;
                let labels: Vec<u8> = (0..n * h * w)
                    .map(|i| if i % 7 == 3 { 255 } else { (i % 3) as u8 })
                    .collect();
                return tape.cross_entropy(x, &labels);
            }
            Op::ConcatSplit => {
                let parts = tape.split(x, 1, &[1, 3])?;
                let a = tape.sigmoid(parts[0]);
                let joined = tape.concat(&[parts[1], a], 1)?;
                tape.slice(joined, 1, 1, 3)?
            }
            Op::SumMeanAxis => {
                let s = tape.sum_axis(x, 3)?;
                let s = tape.sigmoid(s);
                tape.mean_axis(s, 0)?
            }
            Op::ChannelDot => {
                let m = tape.mean_axis(x, 0)?;
                let other = tape.constant(fixed(&[1, 4, 3, 3], 5));
                let d = tape.channel_dot(m, other)?;
                let sq = tape.channel_dot(m, m)?;
                tape.add(d, sq)?
            }
            Op::ScaleBy => {
                let coef = tape.sigmoid(x);
                let s = tape.scale_by(x, coef, 2)?;
                tape.scale(s, -1.5)
            }
        };
        project(tape, out, 99)
    }
}

fn check(op: Op, shape: &[usize]) {
    let x: Tensor64 = fixed(shape, 42);
    let r = grad_check(&op, &x, 1e-5).unwrap();
    assert!(r.max_rel_error < 1e-6, "{op:?}: rel err {:.3e}", r.max_rel_error);
}

#[test]
fn conv_input_gradients() {
    for spec in [
        ConvSpec::new(1, 1, 1, 1),
        ConvSpec::new(2, 1, 1, 1),
        ConvSpec::new(1, 2, 2, 1),
        ConvSpec::new(1, 1, 1, 4),
        ConvSpec::new(2, 2, 1, 2),
    ] {
        let cin_g = 4 / spec.groups;
        check(Op::ConvInput(spec, [4, cin_g, 3, 3]), &[2, 4, 7, 6]);
    }
}

#[test]
fn conv_weight_and_bias_gradients() {
    check(Op::ConvWeight(ConvSpec::new(1, 2, 1, 1), [2, 3, 6, 6]), &[5, 3, 5, 5]);
    check(Op::ConvWeight(ConvSpec::new(1, 2, 2, 3), [1, 3, 7, 7]), &[3, 1, 3, 3]);
    check(Op::ConvBias, &[4]);
}

#[test]
fn pointwise_and_reduction_gradients() {
    check(Op::Softmax(0), &[3, 4]);
    check(Op::Softmax(1), &[2, 5, 3]);
    check(Op::Sigmoid, &[2, 3, 4]);
    check(Op::ChannelNorm, &[3, 2, 4, 4]);
    check(Op::Bilinear(9, 7), &[2, 2, 4, 3]);
    check(Op::Bilinear(2, 2), &[1, 2, 5, 5]);
    check(Op::CrossEntropy, &[2, 3, 4, 4]);
    check(Op::ConcatSplit, &[2, 4, 3, 3]);
    check(Op::SumMeanAxis, &[3, 2, 2, 4]);
    check(Op::ChannelDot, &[2, 4, 3, 3]);
    check(Op::ScaleBy, &[2, 3, 3]);
}

/// Direct six-loop convolution.
fn naive_conv(x: &Tensor64, w: &Tensor64, spec: ConvSpec) -> Vec<f64> {
    let (n, cin, h, wd) = x.dims4().unwrap();
    let (cout, cin_g, kh, kw) = w.dims4().unwrap();
    let ho = (h + 2 * spec.padding - spec.dilation * (kh - 1) - 1) / spec.stride + 1;
    let wo = (wd + 2 * spec.padding - spec.dilation * (kw - 1) - 1) / spec.stride + 1;
    let cout_g = cout / spec.groups;
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; n * cout * ho * wo];
    for b in 0..n {
        for o in 0..cout {
            let g = o / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cin_g {
                        let c = g * cin_g + ci;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                                let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += xd[((b * cin + c) * h + iy as usize) * wd + ix as usize]
                                    * wdat[((o * cin_g + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((b * cout + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_forward_matches_direct_loops() {
    for (spec, k) in [
        (ConvSpec::new(1, 1, 1, 1), 3),
        (ConvSpec::new(1, 2, 1, 1), 5),
        (ConvSpec::new(1, 2, 2, 1), 3),
        (ConvSpec::new(2, 1, 1, 1), 3),
        (ConvSpec::new(1, 1, 1, 6), 3),
        (ConvSpec::new(1, 0, 1, 2), 1),
    ] {
        let x: Tensor64 = fixed(&[2, 6, 9, 8], 7);
        let w: Tensor64 = fixed(&[6, 6 / spec.groups, k, k], 8);
        let want = naive_conv(&x, &w, spec);
        let mut tape = Tape64::new();
        let xv = tape.constant(x);
        let wv = tape.constant(w);
        let y = tape.conv2d(xv, wv, None, spec).unwrap();
        let got = tape.value(y).data();
        assert_eq!(got.len(), want.len());
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{spec:?}: {a} vs {b}");
        }
    }
}

#[test]
fn f32_conv_is_bit_reproducible() {
    let run = || {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(fixed(&[2, 4, 8, 8], 1));
        let w = tape.input(fixed(&[4, 4, 3, 3], 2));
        let y = tape.conv2d(x, w, None, ConvSpec::new(1, 1, 1, 1)).unwrap();
        let l = project(&mut tape, y, 3).unwrap();
        tape.backward(l).unwrap();
        (tape.value(y).data().to_vec(), tape.grad(w).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}
