//! Runtime invariant suites, one per module, checked against the reference
//! implementations in [`crate::oracle`].

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    agent_cross_attention_set, agent_mixing, cross_attention, mutual_agent_cross_attention, mutual_cross_attention,
    AgentTokens, FeatureLabel, FeatureSet, Projection, ProjectionPack, TokenSeq,
};
use crate::data::{generate_scene, Dataset, Mask, PlacedShape, SceneConfig, Shape};
use crate::error::Result;
use crate::fem::{fem_bands, fem_enhance, FemConfig, FemInput};
use crate::gradcheck::{grad_check, Component, DEFAULT_EPS, DEFAULT_TOLERANCE};
use crate::metrics::{boundary_counts, ConfusionMatrix};
use crate::model::{Model, ModelConfig};
use crate::numerics::{ntf, AdamW, AdamWConfig, Graph, ParamStore, Scalar, Tensor};
use crate::oracle;
use crate::spectral::{dfft2, idfft2, split_bands, BandMode, ComplexTensor};
use crate::trainer::{evaluate, poly_lr, train, AblationGrid, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {}/{}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.detail
        )
    }
}

struct Recorder {
    suite: &'static str,
    checks: Vec<Check>,
}

impl Recorder {
    fn new(suite: &'static str) -> Self {
        Recorder {
            suite,
            checks: Vec::new(),
        }
    }

    fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            suite: self.suite,
            name: name.to_string(),
            passed,
            detail: detail.into(),
        });
    }

    /// `value < limit`, reported with both numbers.
    fn below(&mut self, name: &str, value: f64, limit: f64) {
        self.check(name, value < limit, format!("{value:.3e} < {limit:.0e}"));
    }

    /// Record an error from a fallible block as a failed check.
    fn attempt(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<()>) {
        if let Err(e) = f(self) {
            self.check(name, false, format!("error: {e}"));
        }
    }
}

pub const SUITES: [&str; 10] = [
    "numerics",
    "spectral",
    "attention",
    "fem",
    "complexity",
    "model",
    "data_metrics",
    "trainer",
    "gradcheck",
    "ablation",
];

pub fn run_suite(name: &str) -> Option<Vec<Check>> {
    Some(match name {
        "numerics" => numerics(),
        "spectral" => spectral(),
        "attention" => attention(),
        "fem" => fem(),
        "complexity" => complexity(8),
        "model" => model(),
        "data_metrics" => data_metrics(),
        "trainer" => trainer(),
        "gradcheck" => gradcheck(20),
        "ablation" => ablation(),
        _ => return None,
    })
}

pub fn run_all() -> Vec<Check> {
    SUITES.iter().flat_map(|s| run_suite(s).unwrap_or_default()).collect()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn to_mat(t: &Tensor<f64>) -> oracle::Mat {
    let c = t.shape()[1];
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

fn mat_diff(t: &Tensor<f64>, m: &oracle::Mat) -> f64 {
    t.data()
        .iter()
        .zip(m.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

fn numerics() -> Vec<Check> {
    let mut r = Recorder::new("numerics");
    r.attempt("ntf_roundtrip", |r| {
        let mut g = rng(1);
        let a = Tensor::<f32>::randn([3, 5, 2], 1.0, &mut g);
        let b = Tensor::<f64>::randn([7], 1e3, &mut g);
        let a2: Tensor<f32> = ntf::decode(&ntf::encode(&a))?;
        let b2: Tensor<f64> = ntf::decode(&ntf::encode(&b))?;
        let exact = a2.data().iter().zip(a.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            && b2.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        r.check("ntf_roundtrip", exact && a2.shape() == a.shape(), "f32 and f64 payloads bit-exact");
        Ok(())
    });
    r.attempt("adamw_closed_form", |r| {
        let mut params = ParamStore::new();
        params.insert("p", Tensor::<f64>::new([2], vec![1.0, -2.0])?);
        let cfg = AdamWConfig::default();
        let mut opt = AdamW::new(&params, cfg);
        let g = Tensor::new([2], vec![0.5, -0.25])?;
        opt.step(&mut params, std::slice::from_ref(&g), 0.1)?;
        let mut worst = 0.0f64;
        for (i, (&p0, &gi)) in [1.0f64, -2.0].iter().zip(g.data()).enumerate() {
            let m = (1.0 - cfg.beta1) * gi / (1.0 - cfg.beta1);
            let v = (1.0 - cfg.beta2) * gi * gi / (1.0 - cfg.beta2);
            let expect = p0 * (1.0 - 0.1 * cfg.weight_decay) - 0.1 * m / (v.sqrt() + cfg.eps);
            worst = worst.max((params.get(0).data()[i] - expect).abs());
        }
        r.below("adamw_closed_form", worst, 1e-12);
        Ok(())
    });
    r.attempt("backward_replay", |r| {
        let mut gen = rng(2);
        let x = Tensor::<f32>::randn([6, 5], 1.0, &mut gen);
        let w = Tensor::<f32>::randn([5, 4], 1.0, &mut gen);
        let run = || -> Result<Vec<f32>> {
            let mut g = Graph::new();
            let (xv, wv) = (g.param(x.clone())?, g.param(w.clone())?);
            let y = g.matmul(xv, wv)?;
            let s = g.softmax_rows(y)?;
            let l = g.sum(s)?;
            let l = g.scale(l, 0.5)?;
            let grads = g.backward(l)?;
            Ok(grads.get(xv).unwrap().to_vec())
        };
        let (a, b) = (run()?, run()?);
        r.check(
            "backward_replay",
            a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()),
            "two backward passes bit-identical",
        );
        Ok(())
    });
    r.checks
}

fn spectral() -> Vec<Check> {
    let mut r = Recorder::new("spectral");
    r.attempt("roundtrip_f32", |r| {
        let x = Tensor::<f32>::randn([32, 32, 8], 1.0, &mut rng(3));
        let back = idfft2(&dfft2(&x)?)?;
        r.below("roundtrip_f32", back.max_abs_diff(&x), 1e-5);
        Ok(())
    });
    r.attempt("parseval", |r| {
        let x = Tensor::<f32>::randn([32, 32, 8], 1.0, &mut rng(4));
        let spatial: f64 = x.data().iter().map(|&v| (v as f64).powi(2)).sum();
        let freq = dfft2(&x)?.bands.energy();
        r.below("parseval", (spatial - freq).abs() / spatial, 1e-4);
        Ok(())
    });
    r.attempt("partition_exact", |r| {
        let x = Tensor::<f64>::randn([8, 6, 3], 1.0, &mut rng(5));
        let s = dfft2(&x)?;
        let mut exact = true;
        for mode in [BandMode::Radial, BandMode::Magnitude] {
            for tau in [0.0, 0.1, 0.3, 0.5, 1.0] {
                let b = split_bands(&s, tau, mode)?;
                let sum = b.hi.add(&b.lo)?;
                exact &= sum.re.data().iter().zip(s.bands.re.data()).all(|(a, c)| a.to_bits() == c.to_bits());
                exact &= sum.im.data().iter().zip(s.bands.im.data()).all(|(a, c)| a.to_bits() == c.to_bits());
            }
        }
        r.check("partition_exact", exact, "hi + lo == spectrum bitwise, both modes");
        Ok(())
    });
    r.attempt("naive_dft_4x4", |r| {
        let x = Tensor::<f64>::randn([4, 4, 2], 1.0, &mut rng(6));
        let fast = dfft2(&x)?;
        let slow = oracle::dft2_centered(&oracle::planes(x.data(), 4, 4, 2), false);
        let (re, im) = oracle::interleave(&slow);
        let fwd = fast.bands.re.data().iter().zip(&re).chain(fast.bands.im.data().iter().zip(&im));
        let err_f = fwd.map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let z = ComplexTensor::new(
            Tensor::randn([4, 4, 2], 1.0, &mut rng(7)),
            Tensor::randn([4, 4, 2], 1.0, &mut rng(8)),
        )?;
        let (fr, fi) = crate::spectral::fft::inverse_centered(z.re.data(), z.im.data(), 4, 4, 2);
        let mut planes = oracle::planes(z.re.data(), 4, 4, 2);
        for (ch, p) in planes.iter_mut().enumerate() {
            for (y, row) in p.iter_mut().enumerate() {
                for (xx, v) in row.iter_mut().enumerate() {
                    v.1 = z.im.data()[(y * 4 + xx) * 2 + ch];
                }
            }
        }
        let (sr, si) = oracle::interleave(&oracle::dft2_centered(&planes, true));
        let err_i = fr
            .iter()
            .zip(&sr)
            .chain(fi.iter().zip(&si))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        r.below("naive_dft_4x4", err_f.max(err_i), 1e-10);
        Ok(())
    });
    r.attempt("odd_grid_roundtrip", |r| {
        let x = Tensor::<f64>::randn([5, 3, 2], 1.0, &mut rng(9));
        r.below("odd_grid_roundtrip", idfft2(&dfft2(&x)?)?.max_abs_diff(&x), 1e-12);
        Ok(())
    });
    r.checks
}

/// Random projection registered in `g` with its oracle twin.
fn rand_lin<T: Scalar>(g: &mut Graph<T>, r: &mut ChaCha8Rng, din: usize, dout: usize) -> Result<(Projection, oracle::Lin)> {
    let w = Tensor::<f64>::randn([din, dout], 1.0 / (din as f64).sqrt(), r);
    let b = Tensor::<f64>::randn([dout], 0.1, r);
    let lin = oracle::Lin {
        w: to_mat(&w),
        b: b.data().to_vec(),
    };
    Ok((
        Projection {
            w: g.constant(w.cast())?,
            b: g.constant(b.cast())?,
        },
        lin,
    ))
}

fn rand_pack<T: Scalar>(g: &mut Graph<T>, r: &mut ChaCha8Rng, d: usize, heads: usize) -> Result<(ProjectionPack, oracle::Pack)> {
    let (q, oq) = rand_lin(g, r, d, d)?;
    let (k, ok) = rand_lin(g, r, d, d)?;
    let (v, ov) = rand_lin(g, r, d, d)?;
    Ok((
        ProjectionPack { q, k, v, heads },
        oracle::Pack {
            q: oq,
            k: ok,
            v: ov,
            heads,
        },
    ))
}

fn tokens<T: Scalar>(g: &mut Graph<T>, t: &Tensor<f64>, h: usize, w: usize, label: FeatureLabel) -> Result<TokenSeq> {
    let v = g.constant(t.cast())?;
    TokenSeq::new(g, v, h, w, label)
}

fn attention() -> Vec<Check> {
    let mut r = Recorder::new("attention");
    let (d, heads) = (8, 2);
    r.attempt("mixing_rows_stochastic", |r| {
        let mut gen = rng(10);
        let mut g = Graph::<f32>::new();
        let x = tokens(&mut g, &Tensor::randn([20, d], 1.0, &mut gen), 4, 5, FeatureLabel::Encoder(1))?;
        let y = tokens(&mut g, &Tensor::randn([12, d], 1.0, &mut gen), 3, 4, FeatureLabel::Encoder(2))?;
        let a = g.constant(Tensor::randn([5, d], 1.0, &mut gen))?;
        let agents = AgentTokens::new(&g, a)?;
        let (pack, _) = rand_pack(&mut g, &mut gen, d, heads)?;
        let mut worst = 0.0f64;
        for m in agent_mixing(&mut g, &x, &y, &agents, &pack)? {
            for row in m.data().chunks(12) {
                worst = worst.max((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
            }
        }
        r.below("mixing_rows_stochastic", worst, 1e-5);
        Ok(())
    });
    r.attempt("convex_hull", |r| {
        let mut gen = rng(11);
        let mut g = Graph::<f64>::new();
        let x = tokens(&mut g, &Tensor::randn([9, d], 1.0, &mut gen), 3, 3, FeatureLabel::Encoder(1))?;
        let y = tokens(&mut g, &Tensor::randn([6, d], 1.0, &mut gen), 2, 3, FeatureLabel::Encoder(2))?;
        let a = g.constant(Tensor::randn([4, d], 1.0, &mut gen))?;
        let agents = AgentTokens::new(&g, a)?;
        let (pack, _) = rand_pack(&mut g, &mut gen, d, heads)?;
        let out = agent_cross_attention_set(&mut g, &x, &FeatureSet { members: vec![y] }, &agents, &pack)?;
        let vals = pack.v.apply(&mut g, y.tokens)?;
        let v = g.value(vals).clone();
        let o = g.value(out.tokens);
        let mut inside = true;
        for c in 0..d {
            let col = v.data().iter().skip(c).step_by(d);
            let lo = col.clone().copied().fold(f64::INFINITY, f64::min);
            let hi = col.copied().fold(f64::NEG_INFINITY, f64::max);
            for row in o.data().chunks(d) {
                inside &= row[c] >= lo - 1e-12 && row[c] <= hi + 1e-12;
            }
        }
        r.check("convex_hull", inside, "x→y outputs within per-channel value range");
        Ok(())
    });
    r.attempt("kv_permutation", |r| {
        let mut gen = rng(12);
        let xt = Tensor::<f64>::randn([9, d], 1.0, &mut gen);
        let yt = Tensor::<f64>::randn([8, d], 1.0, &mut gen);
        let at = Tensor::<f64>::randn([3, d], 1.0, &mut gen);
        let mut perm: Vec<usize> = (0..8).collect();
        perm.shuffle(&mut gen);
        let yp = Tensor::from_fn([8, d], |i| yt.data()[perm[i / d] * d + i % d]);
        let seed_pack = gen.random::<u64>();
        let run = |y: &Tensor<f64>| -> Result<Tensor<f64>> {
            let mut g = Graph::<f64>::new();
            let x = tokens(&mut g, &xt, 3, 3, FeatureLabel::Encoder(1))?;
            let y = tokens(&mut g, y, 2, 4, FeatureLabel::Encoder(2))?;
            let a = g.constant(at.clone())?;
            let agents = AgentTokens::new(&g, a)?;
            let (pack, _) = rand_pack(&mut g, &mut rng(seed_pack), d, heads)?;
            let o = agent_cross_attention_set(&mut g, &x, &FeatureSet { members: vec![y] }, &agents, &pack)?;
            Ok(g.value(o.tokens).clone())
        };
        r.below("kv_permutation", run(&yt)?.max_abs_diff(&run(&yp)?), 1e-6);
        Ok(())
    });
    r.attempt("single_agent_collapse", |r| {
        let mut gen = rng(13);
        let mut g = Graph::<f64>::new();
        let x = tokens(&mut g, &Tensor::randn([12, d], 1.0, &mut gen), 3, 4, FeatureLabel::Encoder(1))?;
        let y = tokens(&mut g, &Tensor::randn([5, d], 1.0, &mut gen), 1, 5, FeatureLabel::Encoder(2))?;
        let a = g.constant(Tensor::randn([1, d], 1.0, &mut gen))?;
        let agents = AgentTokens::new(&g, a)?;
        let (pack, _) = rand_pack(&mut g, &mut gen, d, heads)?;
        let o = agent_cross_attention_set(&mut g, &x, &FeatureSet { members: vec![y] }, &agents, &pack)?;
        let rows: Vec<&[f64]> = g.value(o.tokens).data().chunks(d).collect();
        let spread = rows
            .iter()
            .flat_map(|row| row.iter().zip(rows[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        r.below("single_agent_collapse", spread, 1e-6);
        Ok(())
    });
    r.attempt("oracle_equivalence", |r| {
        let mut worst: f64 = 0.0;
        for trial in 0..4u64 {
            let mut gen = rng(100 + trial);
            let mut g = Graph::<f64>::new();
            let xt = Tensor::randn([4, d], 1.0, &mut gen);
            let yt = Tensor::randn([3, d], 1.0, &mut gen);
            let zt = Tensor::randn([4, d], 1.0, &mut gen);
            let at = Tensor::randn([2, d], 1.0, &mut gen);
            let x = tokens(&mut g, &xt, 2, 2, FeatureLabel::Encoder(1))?;
            let y = tokens(&mut g, &yt, 1, 3, FeatureLabel::Encoder(2))?;
            let z = tokens(&mut g, &zt, 2, 2, FeatureLabel::Decoder(3))?;
            let a = g.constant(at.clone())?;
            let agents = AgentTokens::new(&g, a)?;
            let (p1, o1) = rand_pack(&mut g, &mut gen, d, heads)?;
            let (p2, o2) = rand_pack(&mut g, &mut gen, d, heads)?;
            let og = |t: &Tensor<f64>, h, w| oracle::Grid {
                tokens: to_mat(t),
                h,
                w,
            };
            let (ox, oy, oz) = (og(&xt, 2, 2), og(&yt, 1, 3), og(&zt, 2, 2));

            let ca = cross_attention(&mut g, &x, &y, &p1)?;
            worst = worst.max(mat_diff(g.value(ca.tokens), &oracle::cross_attention(&ox.tokens, &oy.tokens, &o1)));

            let mca = mutual_cross_attention(&mut g, &x, &y, &p1, &p2)?;
            let want = oracle::mutual_attention(&ox, std::slice::from_ref(&oy), None, &o1, &o2);
            worst = worst.max(mat_diff(g.value(mca.tokens), &want));

            let set = FeatureSet { members: vec![y, z] };
            let maca = mutual_agent_cross_attention(&mut g, &x, &set, &agents, &p1, &p2)?;
            let want = oracle::mutual_attention(&ox, &[oy.clone(), oz], Some(&to_mat(&at)), &o1, &o2);
            worst = worst.max(mat_diff(g.value(maca.tokens), &want));
        }
        r.below("oracle_equivalence", worst, 1e-10);
        Ok(())
    });
    r.checks
}

fn fem() -> Vec<Check> {
    let mut r = Recorder::new("fem");
    r.attempt("zero_complement", |r| {
        let (h, w, d) = (8, 8, 4);
        let e = Tensor::<f32>::randn([h, w, d], 1.0, &mut rng(20));
        let mut worst = 0.0f64;
        for mode in [BandMode::Radial, BandMode::Magnitude] {
            let mut g = Graph::<f32>::new();
            let e1 = g.constant(e.clone())?;
            let ei = g.constant(e.clone())?;
            let inp = FemInput::new(&g, e1, ei, 2)?;
            let out = fem_enhance(&mut g, &inp, FemConfig { tau: 0.5, mode })?;
            let o = g.value(out);
            for p in 0..h * w {
                for c in 0..d {
                    worst = worst.max(o.data()[p * 2 * d + c].abs() as f64);
                    let twice = 2.0 * e.data()[p * d + c];
                    worst = worst.max((o.data()[p * 2 * d + d + c] - twice).abs() as f64);
                }
            }
        }
        r.below("zero_complement", worst, 1e-5);
        Ok(())
    });
    r.attempt("oracle_8x8x2", |r| {
        let (h, w, d) = (8, 8, 2);
        let mut worst = 0.0f64;
        for (trial, mode) in [BandMode::Radial, BandMode::Magnitude].into_iter().enumerate() {
            for tau in [0.1, 0.3, 0.5] {
                let mut gen = rng(30 + trial as u64);
                let e1 = Tensor::<f64>::randn([h, w, d], 1.0, &mut gen);
                let ei = Tensor::<f64>::randn([h, w, d], 1.0, &mut gen);
                let want = oracle::fem_enhance(e1.data(), ei.data(), h, w, d, tau, mode == BandMode::Magnitude);
                let mut g = Graph::<f64>::new();
                let (a, b) = (g.constant(e1.clone())?, g.constant(ei.clone())?);
                let inp = FemInput::new(&g, a, b, 3)?;
                let cfg = FemConfig { tau, mode };
                let bands = fem_bands(&mut g, &inp, cfg)?;
                let got = fem_enhance(&mut g, &inp, cfg)?;
                worst = worst.max(
                    g.value(got)
                        .data()
                        .iter()
                        .zip(&want.out)
                        .map(|(x, y)| (x - y).abs())
                        .fold(0.0, f64::max),
                );
                for (cv, planes) in [
                    (bands.d_h, &want.d_h),
                    (bands.d_l, &want.d_l),
                    (bands.f_1to_i, &want.f_1to_i),
                    (bands.f_ito_1, &want.f_ito_1),
                ] {
                    let (re, im) = oracle::interleave(planes);
                    let diff = g
                        .value(cv.re)
                        .data()
                        .iter()
                        .zip(&re)
                        .chain(g.value(cv.im).data().iter().zip(&im))
                        .map(|(x, y)| (x - y).abs())
                        .fold(0.0, f64::max);
                    worst = worst.max(diff);
                }
            }
        }
        r.below("oracle_8x8x2", worst, 1e-10);
        Ok(())
    });
    r.checks
}

/// Shortest span one timing repetition averages over.
const MIN_REP_SECONDS: f64 = 0.025;

/// Median forward wall time of agent and dense attention per token count.
/// Each repetition averages enough calls to span [`MIN_REP_SECONDS`];
/// each repetition sweeps every size of one kind back to back, after one
/// warm-up pass per cell.
pub fn attention_timings(sizes: &[usize], reps: usize, d: usize, n_agent: usize) -> Result<Vec<(usize, f64, f64)>> {
    let inputs: Vec<_> = sizes
        .iter()
        .map(|&n| {
            let mut gen = rng(n as u64);
            let xt = Tensor::<f32>::randn([n, d], 1.0, &mut gen);
            let yt = Tensor::<f32>::randn([n, d], 1.0, &mut gen);
            let at = Tensor::<f32>::randn([n_agent, d], 1.0, &mut gen);
            (n, xt, yt, at, gen.random::<u64>())
        })
        .collect();
    let once = |i: usize, agent: bool| -> Result<f64> {
        let (n, xt, yt, at, pseed) = &inputs[i];
        let mut g = Graph::<f32>::new();
        let xv = g.constant(xt.clone())?;
        let yv = g.constant(yt.clone())?;
        let x = TokenSeq::new(&g, xv, 1, *n, FeatureLabel::Encoder(1))?;
        let y = TokenSeq::new(&g, yv, 1, *n, FeatureLabel::Encoder(2))?;
        let (pack, _) = rand_pack(&mut g, &mut rng(*pseed), d, 2)?;
        let a = g.constant(at.clone())?;
        let agents = AgentTokens::new(&g, a)?;
        let set = FeatureSet { members: vec![y] };
        let t = Instant::now();
        if agent {
            agent_cross_attention_set(&mut g, &x, &set, &agents, &pack)?;
        } else {
            cross_attention(&mut g, &x, &y, &pack)?;
        }
        Ok(t.elapsed().as_secs_f64())
    };
    let mut calls = vec![[1usize; 2]; sizes.len()];
    for (i, c) in calls.iter_mut().enumerate() {
        for (k, agent) in [true, false].into_iter().enumerate() {
            let t = once(i, agent)?;
            c[k] = ((MIN_REP_SECONDS / t).ceil() as usize).clamp(1, 64);
        }
    }
    let mut ts = vec![[Vec::with_capacity(reps), Vec::with_capacity(reps)]; sizes.len()];
    for _ in 0..reps {
        for (k, agent) in [true, false].into_iter().enumerate() {
            for (i, slot) in ts.iter_mut().enumerate() {
                let mut total = 0.0;
                for _ in 0..calls[i][k] {
                    total += once(i, agent)?;
                }
                slot[k].push(total / calls[i][k] as f64);
            }
        }
    }
    Ok(sizes
        .iter()
        .zip(&ts)
        .map(|(&n, [a, dn])| (n, crate::trainer::median(a), crate::trainer::median(dn)))
        .collect())
}

fn complexity(reps: usize) -> Vec<Check> {
    let mut r = Recorder::new("complexity");
    r.attempt("scaling", |r| {
        let t = attention_timings(&[1024, 2048, 4096], reps, 64, 16)?;
        let ratios: Vec<(f64, f64)> = t.windows(2).map(|w| (w[1].1 / w[0].1, w[1].2 / w[0].2)).collect();
        let agent_max = ratios.iter().map(|x| x.0).fold(0.0, f64::max);
        let dense_min = ratios.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
        let table = t
            .iter()
            .map(|(n, a, dn)| format!("N={n}: agent {:.2}ms dense {:.2}ms", a * 1e3, dn * 1e3))
            .collect::<Vec<_>>()
            .join("; ");
        r.check("agent_linear", agent_max <= 2.5, format!("max doubling ratio {agent_max:.2} <= 2.5 ({table})"));
        r.check("dense_quadratic", dense_min >= 3.2, format!("min doubling ratio {dense_min:.2} >= 3.2"));
        Ok(())
    });
    r.checks
}

fn small_model(attention: crate::attention::AttentionKind, fem: bool, seed: u64) -> ModelConfig {
    ModelConfig {
        d: 8,
        heads: 2,
        n_agent: 4,
        attention,
        fem_enabled: fem,
        encoder_channels: [4, 8, 8, 8],
        seed,
        ..Default::default()
    }
}

fn model() -> Vec<Check> {
    use crate::attention::AttentionKind::*;
    let mut r = Recorder::new("model");
    r.attempt("shapes", |r| {
        let m = Model::<f32>::new(ModelConfig::default())?;
        let mut g = Graph::new();
        let b = m.bind(&mut g)?;
        let x = g.constant(Tensor::uniform([64, 64, 3], 0.0, 1.0, &mut rng(40)))?;
        let f = m.forward_graph(&mut g, &b, x)?;
        let shapes: Vec<Vec<usize>> = f.pyramid.e.iter().map(|&v| g.shape(v).to_vec()).collect();
        let want = vec![vec![16, 16, 16], vec![8, 8, 32], vec![4, 4, 64], vec![2, 2, 128]];
        r.check("pyramid_shapes", shapes == want, format!("{shapes:?}"));
        r.check("spatial_shape", g.shape(f.spatial) == [16, 16, 256], format!("{:?}", g.shape(f.spatial)));
        r.check("logit_shape", g.shape(f.logits) == [64, 64, 4], format!("{:?}", g.shape(f.logits)));
        let order: Vec<String> = f.stage_log.iter().map(|s| s.output.to_string()).collect();
        r.check("stage_order", order == ["S4", "S3", "S2", "S1"], order.join(","));
        let last: Vec<String> = f.stage_log[3].members.iter().map(|l| l.to_string()).collect();
        r.check("g4_members", last == ["E1", "S2", "S3", "S4"], last.join(","));
        Ok(())
    });
    r.attempt("determinism", |r| {
        let img = Tensor::uniform([32, 32, 3], 0.0, 1.0, &mut rng(41));
        let a = Model::<f32>::new(small_model(Maca, true, 3))?.forward(&img)?;
        let b = Model::<f32>::new(small_model(Maca, true, 3))?.forward(&img)?;
        let same = a.logits.data().iter().zip(b.logits.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        r.check("determinism", same, "same seed gives bit-identical logits");
        Ok(())
    });
    r.attempt("fem_off_independent", |r| {
        let img = Tensor::uniform([32, 32, 3], 0.0, 1.0, &mut rng(42));
        let base = Model::<f32>::new(small_model(Maca, false, 3))?;
        let mut other = base.cast::<f32>();
        let mut gen = rng(99);
        for id in 0..other.params.len() {
            if Model::<f32>::is_fem_param(other.params.name(id)) {
                let shape = other.params.get(id).shape().to_vec();
                *other.params.get_mut(id) = Tensor::randn(shape, 1.0, &mut gen);
            }
        }
        let (a, b) = (base.forward(&img)?, other.forward(&img)?);
        let same = a.logits.data().iter().zip(b.logits.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        r.check("fem_off_independent", same, "fem parameters do not reach the logits when disabled");
        Ok(())
    });
    r.attempt("param_order", |r| {
        let n = |k| Model::<f32>::new(ModelConfig { attention: k, ..Default::default() }).map(|m| m.num_params());
        let (ca, mca, maca) = (n(Ca)?, n(Mca)?, n(Maca)?);
        r.check("param_order", ca < mca && mca < maca, format!("CA {ca} < MCA {mca} < MACA {maca}"));
        Ok(())
    });
    r.attempt("zero_image", |r| {
        let m = Model::<f64>::new(small_model(Maca, true, 0))?;
        let mut g = Graph::new();
        let b = m.bind(&mut g)?;
        let x = g.constant(Tensor::zeros([32, 32, 3]))?;
        let p = m.encoder_forward(&mut g, &b, x)?;
        let zero = p.e.iter().all(|&v| g.value(v).data().iter().all(|&z| z == 0.0));
        r.check("zero_image", zero, "zero image and biases give zero stages");
        Ok(())
    });
    r.checks
}

fn data_metrics() -> Vec<Check> {
    let mut r = Recorder::new("data_metrics");
    r.attempt("determinism", |r| {
        let cfg = SceneConfig::default();
        r.check(
            "determinism",
            generate_scene(&cfg, 11)? == generate_scene(&cfg, 11)?,
            "same (seed, index) gives identical samples",
        );
        Ok(())
    });
    r.attempt("disk_cardinality", |r| {
        let (h, w, rad) = (40usize, 40usize, 9.5f64);
        let (cx, cy) = (h as f64 / 2.0, w as f64 / 2.0);
        let s = crate::data::rasterize(
            Tensor::zeros([h, w, 3]),
            &[PlacedShape {
                shape: Shape::Disk { cx, cy, r: rad },
                class: 1,
                color: [1.0, 0.0, 0.0],
            }],
        )?;
        let mut brute = 0;
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if (px - cx).powi(2) + (py - cy).powi(2) <= rad * rad {
                    brute += 1;
                }
            }
        }
        r.check("disk_cardinality", s.mask.count(1) == brute, format!("{} == {brute}", s.mask.count(1)));
        Ok(())
    });
    r.attempt("miou_bruteforce", |r| {
        let mut gen = rng(50);
        let mut ok = true;
        for _ in 0..50 {
            let k = 3;
            let gt = Mask::from_fn(8, 8, |_, _| 0);
            let gt = Mask {
                labels: gt.labels.iter().map(|_| gen.random_range(0..k)).collect(),
                ..gt
            };
            let pred = Mask {
                labels: gt.labels.iter().map(|_| gen.random_range(0..k)).collect(),
                ..gt.clone()
            };
            let mut cm = ConfusionMatrix::new(k);
            cm.add(&pred, &gt)?;
            let mut ious = Vec::new();
            for c in 0..k {
                let inter = (0..64).filter(|&i| gt.labels[i] == c && pred.labels[i] == c).count();
                let union = (0..64).filter(|&i| gt.labels[i] == c || pred.labels[i] == c).count();
                if union > 0 {
                    ious.push(inter as f64 / union as f64);
                }
            }
            let brute = ious.iter().sum::<f64>() / ious.len() as f64;
            ok &= cm.miou()? == brute;
        }
        r.check("miou_bruteforce", ok, "matches per-pixel set computation exactly");
        Ok(())
    });
    r.attempt("boundary_symmetry", |r| {
        let a = generate_scene(&SceneConfig::default(), 1)?.mask;
        let b = generate_scene(&SceneConfig::default(), 2)?.mask;
        let ab = boundary_counts(&a, &b, 2)?;
        let ba = boundary_counts(&b, &a, 2)?;
        let swapped = ab.precision() == ba.recall() && ab.recall() == ba.precision();
        r.check(
            "boundary_symmetry",
            swapped && ab.f_score() == ba.f_score(),
            format!("F {:.4} both ways", ab.f_score()),
        );
        Ok(())
    });
    r.attempt("dataset_roundtrip", |r| {
        let dir = std::env::temp_dir().join(format!("freqseg-verify-{}", std::process::id()));
        let cfg = SceneConfig::default();
        crate::data::write_dataset(&dir, &cfg, 4, 0)?;
        let back = crate::data::read_dataset(&dir)?;
        let orig = Dataset::generate(&cfg, 0, 4)?;
        let _ = std::fs::remove_dir_all(&dir);
        r.check(
            "dataset_roundtrip",
            back.samples == orig.samples,
            "write then read of 4 samples is bit-identical",
        );
        Ok(())
    });
    r.checks
}

fn tiny_train(seed: u64, iterations: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        model: small_model(crate::attention::AttentionKind::Maca, true, seed),
        lr,
        iterations,
        batch: 2,
        eval_every: iterations,
        seed,
        ..Default::default()
    }
}

fn tiny_data(seed: u64, n: usize) -> Result<Dataset> {
    Dataset::generate(
        &SceneConfig {
            h: 32,
            w: 32,
            seed,
            ..Default::default()
        },
        0,
        n,
    )
}

fn trainer() -> Vec<Check> {
    let mut r = Recorder::new("trainer");
    r.check(
        "poly_decay",
        [0, 50, 99].iter().all(|&t| poly_lr(0.01, t, 100) == 0.01 * (1.0 - t as f64 / 100.0)),
        "lr(t) = lr0 (1 - t/T) at t = 0, T/2, T-1",
    );
    r.attempt("one_iteration", |r| {
        let ds = tiny_data(0, 4)?;
        let out = train::<f32>(&tiny_train(0, 1, 1e-3), &ds, None)?;
        r.check(
            "one_iteration",
            out.steps == 1 && out.log.records().len() == 1,
            format!("{} steps, {} records", out.steps, out.log.records().len()),
        );
        let zero = TrainConfig {
            iterations: 0,
            ..tiny_train(0, 1, 1e-3)
        };
        r.check("zero_iterations_rejected", train::<f32>(&zero, &ds, None).is_err(), "iterations = 0 is an error");
        Ok(())
    });
    r.attempt("lr_zero_fixed_point", |r| {
        let ds = tiny_data(0, 4)?;
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..tiny_train(5, 3, 0.0)
        };
        let out = train::<f32>(&cfg, &ds, None)?;
        let init = Model::<f32>::new(cfg.model.clone())?;
        let same = out.model.params.iter().zip(init.params.iter()).all(|((_, a), (_, b))| a == b);
        r.check("lr_zero_fixed_point", same, "parameters unchanged after 3 steps");
        Ok(())
    });
    r.attempt("checkpoint_roundtrip", |r| {
        let ds = tiny_data(0, 4)?;
        let dir = std::env::temp_dir().join(format!("freqseg-verify-ckpt-{}", std::process::id()));
        let cfg = TrainConfig {
            checkpoint_dir: Some(dir.clone()),
            ..tiny_train(1, 2, 1e-3)
        };
        let a = train::<f32>(&cfg, &ds, None)?;
        let b = train::<f32>(&cfg, &ds, None)?;
        let bitwise = a.model.params.iter().zip(b.model.params.iter()).all(|((_, x), (_, y))| {
            x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
        });
        r.check("deterministic_checkpoints", bitwise, "two runs with one seed are bit-identical");
        let loaded = Model::<f32>::load(&dir)?;
        let m1 = evaluate(&a.model, &ds)?;
        let m2 = evaluate(&loaded, &ds)?;
        let _ = std::fs::remove_dir_all(&dir);
        r.check("checkpoint_roundtrip", m1 == m2, format!("mIoU {:.4} == {:.4}", m1.miou, m2.miou));
        Ok(())
    });
    r.attempt("seed_isolation", |r| {
        let cfg = tiny_train(2, 1, 0.0);
        let a = Model::<f32>::new(cfg.model.clone())?;
        let data_a = evaluate(&a, &tiny_data(10, 3)?)?;
        let data_b = evaluate(&a, &tiny_data(11, 3)?)?;
        let other = Model::<f32>::new(ModelConfig { seed: 3, ..cfg.model.clone() })?;
        let init_changed = a.params.iter().zip(other.params.iter()).any(|((_, x), (_, y))| x != y);
        r.check(
            "seed_isolation",
            data_a != data_b && init_changed,
            "data seed changes metrics; model seed changes init",
        );
        Ok(())
    });
    r.checks
}

fn gradcheck(trials: usize) -> Vec<Check> {
    let mut r = Recorder::new("gradcheck");
    r.attempt("linear", |r| {
        let rep = grad_check(Component::Linear, trials, 1.0 / 1024.0, 0)?;
        r.check("linear", rep.max_rel_err < 1e-12, format!("{rep}"));
        Ok(())
    });
    for c in Component::ALL {
        let name = c.to_string();
        r.attempt(&name, |r| {
            let t = Instant::now();
            let rep = grad_check(c, trials, DEFAULT_EPS, 0)?;
            r.check(
                &name,
                rep.max_rel_err < DEFAULT_TOLERANCE,
                format!("{rep} ({:.1}s)", t.elapsed().as_secs_f64()),
            );
            Ok(())
        });
    }
    r.checks
}

fn ablation() -> Vec<Check> {
    let mut r = Recorder::new("ablation");
    r.attempt("table_grid", |r| {
        let ds = tiny_data(0, 4)?;
        let base = tiny_train(0, 1, 1e-3);
        let grid = AblationGrid {
            seeds: vec![0],
            ..AblationGrid::table()
        };
        let res = crate::trainer::ablate::<f32>(&base, &grid, &ds, None, None)?;
        let ok = res.len() == 6 && res.iter().all(|c| c.failures() == 0);
        r.check("table_grid", ok, format!("{} cells, all runnable", res.len()));
        let p = |k| res.iter().find(|c| c.cell.attention == k && !c.cell.fem_enabled).map(|c| c.params);
        use crate::attention::AttentionKind::*;
        let (ca, mca, maca) = (p(Ca), p(Mca), p(Maca));
        r.check("param_order", ca < mca && mca < maca, format!("{ca:?} < {mca:?} < {maca:?}"));
        let mut worst = (0.0f64, String::new());
        for cell in AblationGrid::table().cells() {
            let cfg = ModelConfig {
                attention: cell.attention,
                fem_enabled: cell.fem_enabled,
                init_std: 0.25,
                ..crate::gradcheck::full_config(0)
            };
            let rep = crate::gradcheck::grad_check_model(&cfg, 3, DEFAULT_EPS, 7)?;
            if rep.max_rel_err >= worst.0 {
                worst = (rep.max_rel_err, format!("{cell}: {}", rep.worst));
            }
        }
        r.check(
            "cells_gradcheck",
            worst.0 < DEFAULT_TOLERANCE,
            format!("max rel err {:.3e} < 1e-6 over 6 cells (worst {})", worst.0, worst.1),
        );
        let sweep = AblationGrid::tau_sweep().cells();
        r.check("tau_sweep_rows", sweep.len() == 5, format!("{} rows", sweep.len()));
        Ok(())
    });
    r.checks
}
