use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// Max relative error of analytic vs central-difference gradients of
/// `sum(w ⊙ op(inputs))` over every input coordinate.
fn fd_check(build: &Build, inputs: &[Tensor<f64>], seed: u64) -> f64 {
    let h = 1e-4;
    let mut r = rng(seed);
    let eval = |xs: &[Tensor<f64>], w: Option<&Tensor<f64>>| -> (f64, Option<Vec<Tensor<f64>>>, Tensor<f64>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone()).unwrap()).collect();
        let out = build(&mut g, &vars).unwrap();
        let shape = g.shape(out).to_vec();
        let w = w.cloned().unwrap_or_else(|| Tensor::from_fn(shape, |i| ((i * 37 % 11) as f64 - 5.0) * 0.2 + 0.1));
        let m = g.mul_const(out, &w).unwrap();
        let l = g.sum(m).unwrap();
        let grads = g.backward(l).unwrap();
        let gs = vars.iter().map(|&v| grads.tensor(&g, v)).collect();
        (g.value(l).data()[0], Some(gs), w)
    };
    let (_, grads, w) = eval(inputs, None);
    let grads = grads.unwrap();
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        // Sample at most 64 coordinates per input to bound runtime.
        let n = x.len();
        let picks: Vec<usize> = if n <= 64 { (0..n).collect() } else { (0..64).map(|_| r.random_range(0..n)).collect() };
        for i in picks {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let fd = (eval(&plus, Some(&w)).0 - eval(&minus, Some(&w)).0) / (2.0 * h);
            let an = grads[k].data()[i];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    worst
}

fn dims(r: &mut ChaCha8Rng) -> usize {
    r.random_range(1..=8)
}

#[test]
fn matmul_identity_and_oracle() {
    let mut g = Graph::<f64>::new();
    let m = g.constant(Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    let i = g.constant(Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
    let p = g.matmul(m, i).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
    let p = g.matmul(i, m).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let mut r = rng(7);
    let a = Tensor::<f64>::randn([3, 4], 1.0, &mut r);
    let b = Tensor::<f64>::randn([4, 2], 1.0, &mut r);
    let mut oracle = vec![0.0; 6];
    for i in 0..3 {
        for j in 0..2 {
            for k in 0..4 {
                oracle[i * 2 + j] += a.at(&[i, k]) * b.at(&[k, j]);
            }
        }
    }
    let (av, bv) = (g.constant(a.clone()).unwrap(), g.constant(b.clone()).unwrap());
    let p = g.matmul(av, bv).unwrap();
    assert!(g.value(p).max_abs_diff(&Tensor::new([3, 2], oracle.clone()).unwrap()) < 1e-14);
    // Transposed-operand variants agree with explicit transposes.
    let at = Tensor::from_fn([4, 3], |i| a.at(&[i % 3, i / 3]));
    let atv = g.constant(at).unwrap();
    let p2 = g.matmul_t(atv, bv, true, false).unwrap();
    assert!(g.value(p2).max_abs_diff(g.value(p)) < 1e-14);
    assert!(matches!(g.matmul(av, av), Err(Error::Dimension(_))));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros([1, 3])).unwrap();
    let s = g.softmax_rows(x).unwrap();
    for &p in g.value(s).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let c = 1.7;
    for base in [-50.0, 0.0, 300.0] {
        let x = g.constant(Tensor::new([1, 2], vec![base, base + c]).unwrap()).unwrap();
        let s = g.softmax_rows(x).unwrap();
        let e = c.exp();
        assert!((g.value(s).data()[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((g.value(s).data()[1] - e / (1.0 + e)).abs() < 1e-12);
    }
    let x = g.constant(Tensor::randn([5, 7], 3.0, &mut rng(1))).unwrap();
    let s = g.softmax_rows(x).unwrap();
    for row in g.value(s).data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&p| p >= 0.0));
    }
}

#[test]
fn resize_examples() {
    let mut g = Graph::<f64>::new();
    let c = g.constant(Tensor::full([3, 5, 2], 2.5)).unwrap();
    for (oh, ow) in [(1, 1), (7, 2), (12, 20)] {
        let y = g.bilinear_resize(c, oh, ow).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 2.5).abs() < 1e-6));
    }
    let x = Tensor::<f64>::randn([4, 6, 3], 1.0, &mut rng(2));
    let xv = g.constant(x.clone()).unwrap();
    let same = g.bilinear_resize(xv, 4, 6).unwrap();
    assert!(g.value(same).max_abs_diff(&x) < 1e-6);
    assert!(matches!(g.bilinear_resize(xv, 0, 3), Err(Error::Dimension(_))));

    // 2×2 → 4×4: source coordinate s = (o + 0.5)/2 − 0.5 clamped to [0, 1].
    let src = [[0.0, 1.0], [2.0, 3.0]];
    let x = g.constant(Tensor::new([2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap()).unwrap();
    let y = g.bilinear_resize(x, 4, 4).unwrap();
    let coord = |o: usize| -> f64 { ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 1.0) };
    for oy in 0..4 {
        for ox in 0..4 {
            let (sy, sx) = (coord(oy), coord(ox));
            let expect = (1.0 - sy) * (1.0 - sx) * src[0][0]
                + (1.0 - sy) * sx * src[0][1]
                + sy * (1.0 - sx) * src[1][0]
                + sy * sx * src[1][1];
            assert!((g.value(y).at(&[oy, ox, 0]) - expect).abs() < 1e-12);
        }
    }
    // Row 0 is [0, .25, .75, 1] by hand.
    let row0: Vec<f64> = (0..4).map(|ox| g.value(y).at(&[0, ox, 0])).collect();
    assert_eq!(row0, vec![0.0, 0.25, 0.75, 1.0]);
}

#[test]
fn concat_and_split_roundtrip() {
    let mut g = Graph::<f64>::new();
    let a = Tensor::<f64>::randn([2, 2, 1], 1.0, &mut rng(3));
    let b = Tensor::<f64>::randn([2, 2, 1], 1.0, &mut rng(4));
    let (av, bv) = (g.constant(a.clone()).unwrap(), g.constant(b.clone()).unwrap());
    let one = g.concat_channels(&[av]).unwrap();
    assert_eq!(g.value(one), &a);
    let ab = g.concat_channels(&[av, bv]).unwrap();
    assert_eq!(g.shape(ab), &[2, 2, 2]);
    let back_a = g.slice_channels(ab, 0, 1).unwrap();
    let back_b = g.slice_channels(ab, 1, 1).unwrap();
    assert_eq!(g.value(back_a), &a);
    assert_eq!(g.value(back_b), &b);
    let c = g.constant(Tensor::zeros([3, 2, 1])).unwrap();
    assert!(matches!(g.concat_channels(&[av, c]), Err(Error::Dimension(_))));
}

#[test]
fn conv_relu_linear_examples() {
    let mut g = Graph::<f64>::new();
    let x = Tensor::<f64>::randn([5, 5, 1], 1.0, &mut rng(5));
    let xv = g.constant(x.clone()).unwrap();
    let k1 = g.constant(Tensor::full([1, 1, 1, 1], 1.0)).unwrap();
    let y = g.conv2d(xv, k1, 1, 0).unwrap();
    assert_eq!(g.value(y), &x);
    assert!(matches!(g.conv2d(xv, k1, 0, 0), Err(Error::Parameter(_))));

    let r = g.constant(Tensor::new([3], vec![-1.0, 0.0, 2.0]).unwrap()).unwrap();
    let r = g.relu(r).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

    // 3×3 conv with stride and padding vs a sliding-window reference.
    let mut rr = rng(6);
    let (cin, cout) = (2, 3);
    let x = Tensor::<f64>::randn([5, 5, cin], 1.0, &mut rr);
    let k = Tensor::<f64>::randn([3, 3, cin, cout], 1.0, &mut rr);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let (xv, kv) = (g.constant(x.clone()).unwrap(), g.constant(k.clone()).unwrap());
        let y = g.conv2d(xv, kv, stride, pad).unwrap();
        let ho = (5 + 2 * pad - 3) / stride + 1;
        assert_eq!(g.shape(y), &[ho, ho, cout]);
        for oy in 0..ho {
            for ox in 0..ho {
                for co in 0..cout {
                    let mut s = 0.0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if !(0..5).contains(&iy) || !(0..5).contains(&ix) {
                                continue;
                            }
                            for ci in 0..cin {
                                s += x.at(&[iy as usize, ix as usize, ci]) * k.at(&[ky, kx, ci, co]);
                            }
                        }
                    }
                    assert!((g.value(y).at(&[oy, ox, co]) - s).abs() < 1e-12);
                }
            }
        }
    }

    let xv = g.constant(Tensor::new([1, 2], vec![1.0, -1.0]).unwrap()).unwrap();
    let w = g.constant(Tensor::new([2, 1], vec![2.0, 3.0]).unwrap()).unwrap();
    let b = g.constant(Tensor::new([1], vec![0.5]).unwrap()).unwrap();
    let y = g.linear(xv, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[-0.5]);
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    let k = 4;
    let u = g.constant(Tensor::full([2, 2, k], 0.3)).unwrap();
    let l = g.cross_entropy(u, &[0, 1, 2, 3]).unwrap();
    assert!((g.value(l).data()[0] - (k as f64).ln()).abs() < 1e-12);

    let mut prev = f64::INFINITY;
    for margin in [1.0, 5.0, 20.0, 60.0] {
        let x = g.constant(Tensor::new([1, 2], vec![margin, 0.0]).unwrap()).unwrap();
        let lv = g.cross_entropy(x, &[0]).unwrap();
        let l = g.value(lv).data()[0];
        assert!(l < prev);
        prev = l;
    }
    assert!(prev < 1e-20);

    let x = Tensor::<f64>::randn([4, 4, 3], 2.0, &mut rng(8));
    let target: Vec<usize> = (0..16).map(|i| (i * 5) % 3).collect();
    let mut oracle = 0.0;
    for p in 0..16 {
        let z: Vec<f64> = (0..3).map(|c| x.data()[p * 3 + c]).collect();
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        oracle -= (z[target[p]].exp() / denom).ln();
    }
    oracle /= 16.0;
    let xv = g.constant(x).unwrap();
    let l = g.cross_entropy(xv, &target).unwrap();
    assert!((g.value(l).data()[0] - oracle).abs() < 1e-12);
    assert!(matches!(g.cross_entropy(xv, &[3; 16]), Err(Error::Data(_))));
}

#[test]
fn backward_simple_cases() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::new([3], vec![1.0, -2.0, 5.0]).unwrap()).unwrap();
    let s = g.sum(x).unwrap();
    let gr = g.backward(s).unwrap();
    assert_eq!(gr.get(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::new([1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
    let xt = g.reshape(x, [2, 1]).unwrap();
    let sq = g.matmul(x, xt).unwrap();
    let s = g.sum(sq).unwrap();
    let gr = g.backward(s).unwrap();
    assert_eq!(gr.get(x).unwrap(), &[2.0, 4.0]);
    assert!(matches!(g.backward(x), Err(Error::Dimension(_))));
}

#[test]
fn non_finite_results_are_errors() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full([2], 3e38f32)).unwrap();
    let y = g.add(x, x);
    assert!(matches!(y, Err(Error::NonFinite(_))));
}

#[test]
fn every_op_matches_finite_differences() {
    let mut r = rng(11);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut note = |name: &'static str, e: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some((_, w)) => *w = w.max(e),
        None => worst.push((name, e)),
    };
    for trial in 0..100u64 {
        let (m, k, n) = (dims(&mut r), dims(&mut r), dims(&mut r));
        let a = Tensor::randn([m, k], 1.0, &mut r);
        let b = Tensor::randn([k, n], 1.0, &mut r);
        note("matmul", fd_check(&|g, v| g.matmul(v[0], v[1]), &[a.clone(), b], trial));
        let bt = Tensor::randn([n, k], 1.0, &mut r);
        note("matmul_nt", fd_check(&|g, v| g.matmul_nt(v[0], v[1]), &[a.clone(), bt], trial));
        let at = Tensor::randn([k, m], 1.0, &mut r);
        let bt2 = Tensor::randn([n, k], 1.0, &mut r);
        note("matmul_tt", fd_check(&|g, v| g.matmul_t(v[0], v[1], true, true), &[at, bt2], trial));

        note("softmax", fd_check(&|g, v| g.softmax_rows(v[0]), &[a.clone()], trial));
        let relu_in = a.map(|x| if x.abs() < 1e-3 { x + 0.01 } else { x });
        note("relu", fd_check(&|g, v| g.relu(v[0]), &[relu_in], trial));

        let (h, w, c) = (dims(&mut r), dims(&mut r), dims(&mut r));
        let (oh, ow) = (dims(&mut r), dims(&mut r));
        let img = Tensor::randn([h, w, c], 1.0, &mut r);
        note("resize", fd_check(&move |g, v| g.bilinear_resize(v[0], oh, ow), &[img.clone()], trial));

        let c2 = dims(&mut r);
        let img2 = Tensor::randn([h, w, c2], 1.0, &mut r);
        note("concat", fd_check(&|g, v| g.concat_channels(&[v[0], v[1]]), &[img.clone(), img2], trial));
        let start = r.random_range(0..c);
        let len = r.random_range(1..=c - start);
        note("slice", fd_check(&move |g, v| g.slice_channels(v[0], start, len), &[img.clone()], trial));

        let bias = Tensor::randn([c], 1.0, &mut r);
        note("add_bias", fd_check(&|g, v| g.add_bias(v[0], v[1]), &[img.clone(), bias], trial));

        let (kh, kw) = (r.random_range(1..=3.min(h + 2)), r.random_range(1..=3.min(w + 2)));
        let stride = r.random_range(1..=2);
        let cout = dims(&mut r);
        let kern = Tensor::randn([kh, kw, c, cout], 0.5, &mut r);
        note("conv2d", fd_check(&move |g, v| g.conv2d(v[0], v[1], stride, 1), &[img.clone(), kern], trial));

        let kk = r.random_range(2..=8);
        let logits = Tensor::randn([h, w, kk], 1.0, &mut r);
        let target: Vec<usize> = (0..h * w).map(|_| r.random_range(0..kk)).collect();
        note("cross_entropy", fd_check(&move |g, v| g.cross_entropy(v[0], &target), &[logits], trial));

        note(
            "dfft2",
            fd_check(
                &|g, v| {
                    let z = g.dfft2(v[0])?;
                    let m = g.scale(z.im, 0.7)?;
                    g.add(z.re, m)
                },
                &[img.clone()],
                trial,
            ),
        );
        note(
            "idfft2",
            fd_check(
                &|g, v| {
                    let z = g.dfft2(v[0])?;
                    let re = g.scale(z.re, 1.3)?;
                    g.idfft2(CVar { re, im: z.im })
                },
                &[img],
                trial,
            ),
        );
    }
    for (name, e) in &worst {
        assert!(*e < 1e-6, "{name}: max relative error {e:e}");
    }
}

#[test]
fn backward_replay_is_bit_identical() {
    let run = || {
        let mut r = rng(21);
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::randn([6, 6, 3], 1.0, &mut r)).unwrap();
        let k = g.param(Tensor::randn([3, 3, 3, 4], 0.3, &mut r)).unwrap();
        let y = g.conv2d(x, k, 2, 1).unwrap();
        let y = g.relu(y).unwrap();
        let y = g.bilinear_resize(y, 6, 6).unwrap();
        let l = g.cross_entropy(y, &[1; 36]).unwrap();
        let gr = g.backward(l).unwrap();
        (gr.get(x).unwrap().to_vec(), gr.get(k).unwrap().to_vec())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

proptest! {
    #[test]
    fn softmax_rows_normalize_and_shift(rows in 1usize..6, cols in 1usize..9, shift in -50.0f64..50.0, seed in any::<u64>()) {
        let x = Tensor::<f64>::randn([rows, cols], 2.0, &mut rng(seed));
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let xs = g.constant(x.map(|v| v + shift)).unwrap();
        let a = g.softmax_rows(xv).unwrap();
        let b = g.softmax_rows(xs).unwrap();
        for row in g.value(a).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        prop_assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-6);
    }

    #[test]
    fn resize_is_linear(h in 1usize..7, w in 1usize..7, oh in 1usize..12, ow in 1usize..12, a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = Tensor::<f64>::randn([h, w, 2], 1.0, &mut r);
        let y = Tensor::<f64>::randn([h, w, 2], 1.0, &mut r);
        let mix = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let mut g = Graph::new();
        let (xv, yv, mv) = (g.constant(x).unwrap(), g.constant(y).unwrap(), g.constant(mix).unwrap());
        let rx = g.bilinear_resize(xv, oh, ow).unwrap();
        let ry = g.bilinear_resize(yv, oh, ow).unwrap();
        let rm = g.bilinear_resize(mv, oh, ow).unwrap();
        let comb = g.value(rx).zip_map(g.value(ry), |p, q| a * p + b * q).unwrap();
        prop_assert!(g.value(rm).max_abs_diff(&comb) < 1e-6);
    }
}
