//! Analytic vs central-difference gradient comparison on random small
//! instances of each model component, at 64-bit.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    mutual_agent_cross_attention, AgentTokens, FeatureLabel, FeatureSet, Projection, ProjectionPack, TokenSeq,
};
use crate::error::{Error, Result};
use crate::fem::{fem_aggregate, FemConfig, FemParams};
use crate::model::{Model, ModelConfig};
use crate::numerics::{Graph, Tensor, Var};
use crate::spectral::BandMode;

pub const DEFAULT_EPS: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-6;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-3;
const COORDS_PER_TRIAL: usize = 8;
const MAX_REDRAWS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Linear,
    Maca,
    Fem,
    Head,
    Full,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::Maca, Component::Fem, Component::Head, Component::Full];
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::Linear => "linear",
            Component::Maca => "maca",
            Component::Fem => "fem",
            Component::Head => "head",
            Component::Full => "full",
        })
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Component::Linear),
            "maca" => Ok(Component::Maca),
            "fem" => Ok(Component::Fem),
            "head" => Ok(Component::Head),
            "full" => Ok(Component::Full),
            other => Err(Error::Config(format!(
                "unknown component `{other}` (linear, maca, fem, head, full)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub component: Component,
    pub trials: usize,
    pub coords: usize,
    pub max_rel_err: f64,
    /// `name[index]` of the worst coordinate.
    pub worst: String,
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} trials, {} coordinates, max rel err {:.3e} at {}",
            self.component, self.trials, self.coords, self.max_rel_err, self.worst
        )
    }
}

/// Named leaves plus a scalar-loss builder.
struct Problem {
    leaves: Vec<(String, Tensor<f64>)>,
    build: Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>,
}

impl Problem {
    /// Loss value, leaf gradients and the relu sign pattern.
    fn eval(&self, leaves: &[Tensor<f64>], grads: bool) -> Result<(f64, Vec<Tensor<f64>>, Vec<bool>)> {
        let mut g = Graph::new();
        let vars = leaves.iter().map(|t| g.param(t.clone())).collect::<Result<Vec<_>>>()?;
        let loss = (self.build)(&mut g, &vars)?;
        let value = g.value(loss).data()[0];
        let pattern = g.relu_pattern();
        let gs = if grads {
            let gr = g.backward(loss)?;
            vars.iter().map(|&v| gr.tensor(&g, v)).collect()
        } else {
            Vec::new()
        };
        Ok((value, gs, pattern))
    }
}

fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = Tensor::uniform(g.shape(out).to_vec(), -1.0, 1.0, &mut r);
    let m = g.mul_const(out, &w)?;
    g.sum(m)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), std, rng)
}

fn lin_leaves(rng: &mut ChaCha8Rng, name: &str, din: usize, dout: usize, out: &mut Vec<(String, Tensor<f64>)>) {
    out.push((format!("{name}.weight"), randn(rng, &[din, dout], 1.0 / (din as f64).sqrt())));
    out.push((format!("{name}.bias"), randn(rng, &[dout], 0.1)));
}

fn proj(v: &[Var], at: usize) -> Projection {
    Projection { w: v[at], b: v[at + 1] }
}

/// Dyadic inputs and weights keep every product exact, so the only error
/// left is the rounding of the perturbed coordinate.
fn linear_problem(rng: &mut ChaCha8Rng, seed: u64) -> Problem {
    let mut dyadic = |shape: &[usize]| Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-8i32..=8) as f64 / 8.0);
    let leaves = vec![
        ("x".to_string(), dyadic(&[4, 5])),
        ("lin.weight".to_string(), dyadic(&[5, 3])),
        ("lin.bias".to_string(), dyadic(&[3])),
    ];
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = Tensor::from_fn([4, 3], |_| r.random_range(-4i32..=4) as f64 / 4.0);
    Problem {
        leaves,
        build: Box::new(move |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            let m = g.mul_const(y, &w)?;
            g.sum(m)
        }),
    }
}

fn maca_problem(rng: &mut ChaCha8Rng, seed: u64) -> Problem {
    let d = 8;
    let heads = 2;
    let n_agent = rng.random_range(1..=4);
    let mut leaves = vec![
        ("x".to_string(), randn(rng, &[9, d], 1.0)),
        ("y1".to_string(), randn(rng, &[9, d], 1.0)),
        ("y2".to_string(), randn(rng, &[4, d], 1.0)),
        ("agents".to_string(), randn(rng, &[n_agent, d], 1.0)),
    ];
    for dir in ["xy", "yx"] {
        for p in ["q", "k", "v"] {
            lin_leaves(rng, &format!("{dir}.{p}"), d, d, &mut leaves);
        }
    }
    Problem {
        leaves,
        build: Box::new(move |g, v| {
            let x = TokenSeq::new(g, v[0], 3, 3, FeatureLabel::Encoder(1))?;
            let y1 = TokenSeq::new(g, v[1], 3, 3, FeatureLabel::Encoder(1))?;
            let y2 = TokenSeq::new(g, v[2], 2, 2, FeatureLabel::Encoder(2))?;
            let agents = AgentTokens::new(g, v[3])?;
            let pack = |at: usize| ProjectionPack {
                q: proj(v, at),
                k: proj(v, at + 2),
                v: proj(v, at + 4),
                heads,
            };
            let set = FeatureSet { members: vec![y1, y2] };
            let out = mutual_agent_cross_attention(g, &x, &set, &agents, &pack(4), &pack(10))?;
            weighted_sum(g, out.tokens, seed)
        }),
    }
}

fn fem_problem(rng: &mut ChaCha8Rng, seed: u64) -> Problem {
    let d = 3;
    let chans = [2, 3, 4, 4];
    let grids = [8, 4, 2, 1];
    let mut leaves = Vec::new();
    for i in 0..4 {
        leaves.push((format!("e{}", i + 1), randn(rng, &[grids[i], grids[i], chans[i]], 1.0)));
    }
    for (i, &c) in chans.iter().enumerate() {
        lin_leaves(rng, &format!("fem.lateral{}", i + 1), c, d, &mut leaves);
    }
    lin_leaves(rng, "fem.out", 6 * d, 4 * d, &mut leaves);
    let cfg = FemConfig {
        tau: 0.5,
        mode: BandMode::Radial,
    };
    Problem {
        leaves,
        build: Box::new(move |g, v| {
            let params = FemParams {
                lateral: std::array::from_fn(|i| proj(v, 4 + 2 * i)),
                out: proj(v, 12),
            };
            let f = fem_aggregate(g, &v[..4], cfg, &params)?;
            weighted_sum(g, f, seed)
        }),
    }
}

fn head_problem(rng: &mut ChaCha8Rng, _seed: u64) -> Problem {
    let (c, k) = (8, 3);
    let mut leaves = vec![("features".to_string(), randn(rng, &[4, 4, c], 1.0))];
    lin_leaves(rng, "head", c, k, &mut leaves);
    let labels: Vec<usize> = (0..64).map(|_| rng.random_range(0..k)).collect();
    Problem {
        leaves,
        build: Box::new(move |g, v| {
            let flat = g.reshape(v[0], [16, c])?;
            let logits = Projection { w: v[1], b: v[2] }.apply(g, flat)?;
            let map = g.reshape(logits, [4, 4, k])?;
            let up = g.bilinear_resize(map, 8, 8)?;
            let up = g.reshape(up, [64, k])?;
            g.cross_entropy(up, &labels)
        }),
    }
}

/// Small full model on a 32×32 image with cross-entropy against a random mask.
pub fn full_config(seed: u64) -> ModelConfig {
    ModelConfig {
        d: 8,
        heads: 2,
        n_agent: 4,
        num_classes: 3,
        encoder_channels: [4, 6, 8, 8],
        seed,
        init_std: 0.4,
        ..Default::default()
    }
}

fn full_problem(rng: &mut ChaCha8Rng, cfg: ModelConfig) -> Result<Problem> {
    let k = cfg.num_classes;
    let model = Model::<f64>::new(cfg)?;
    let mut leaves: Vec<(String, Tensor<f64>)> =
        model.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    leaves.push(("image".to_string(), Tensor::uniform([32, 32, 3], 0.0, 1.0, rng)));
    let labels: Vec<usize> = (0..32 * 32).map(|_| rng.random_range(0..k)).collect();
    let n_params = model.params.len();
    Ok(Problem {
        leaves,
        build: Box::new(move |g, v| {
            let bound = crate::model::Bound { vars: v[..n_params].to_vec() };
            let out = model.forward_graph(g, &bound, v[n_params])?;
            let flat = g.reshape(out.logits, [32 * 32, k])?;
            g.cross_entropy(flat, &labels)
        }),
    })
}

fn problem(component: Component, seed: u64) -> Result<Problem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match component {
        Component::Linear => linear_problem(&mut rng, seed),
        Component::Maca => maca_problem(&mut rng, seed),
        Component::Fem => fem_problem(&mut rng, seed),
        Component::Head => head_problem(&mut rng, seed),
        Component::Full => full_problem(&mut rng, full_config(seed))?,
    })
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare gradients on `trials` random instances, [`COORDS_PER_TRIAL`]
/// coordinates each. Probes whose `±eps` points change any relu sign are
/// redrawn.
pub fn grad_check(component: Component, trials: usize, eps: f64, seed: u64) -> Result<GradReport> {
    run_checks(component, trials, eps, seed, |s| problem(component, s))
}

/// Full-model check on `cfg` (image 32×32); the model seed varies per trial.
pub fn grad_check_model(cfg: &ModelConfig, trials: usize, eps: f64, seed: u64) -> Result<GradReport> {
    run_checks(Component::Full, trials, eps, seed, |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        full_problem(&mut rng, ModelConfig { seed: s, ..cfg.clone() })
    })
}

fn run_checks(
    component: Component,
    trials: usize,
    eps: f64,
    seed: u64,
    make: impl Fn(u64) -> Result<Problem>,
) -> Result<GradReport> {
    if trials == 0 {
        return Err(Error::Config("gradient check needs at least one trial".into()));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("finite-difference step {eps} must be positive")));
    }
    let mut worst = (0.0f64, String::from("-"));
    let mut coords = 0;
    for t in 0..trials {
        let base_seed = seed.wrapping_mul(1_000_003).wrapping_add(t as u64);
        let p = make(base_seed)?;
        let values: Vec<Tensor<f64>> = p.leaves.iter().map(|(_, t)| t.clone()).collect();
        let (_, grads, pattern) = p.eval(&values, true)?;
        let sizes: Vec<usize> = values.iter().map(Tensor::len).collect();
        let total: usize = sizes.iter().sum();
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed ^ 0xc0ffee);
        for _ in 0..COORDS_PER_TRIAL {
            let mut probe = None;
            for _ in 0..MAX_REDRAWS {
                let mut flat = rng.random_range(0..total);
                let mut leaf = 0;
                while flat >= sizes[leaf] {
                    flat -= sizes[leaf];
                    leaf += 1;
                }
                let mut plus = values.clone();
                plus[leaf].data_mut()[flat] += eps;
                let mut minus = values.clone();
                minus[leaf].data_mut()[flat] -= eps;
                let (lp, _, pp) = p.eval(&plus, false)?;
                let (lm, _, pm) = p.eval(&minus, false)?;
                if pp == pattern && pm == pattern {
                    probe = Some((leaf, flat, (lp - lm) / (2.0 * eps)));
                    break;
                }
            }
            let Some((leaf, idx, numeric)) = probe else {
                continue;
            };
            coords += 1;
            let analytic = grads[leaf].data()[idx];
            let e = rel_err(analytic, numeric);
            if e >= worst.0 {
                worst = (e, format!("{}[{idx}]", p.leaves[leaf].0));
            }
        }
    }
    if coords == 0 {
        return Err(Error::Numerical(format!("{component}: every probe straddled a relu kink")));
    }
    Ok(GradReport {
        component,
        trials,
        coords,
        max_rel_err: worst.0,
        worst: worst.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_is_exact() {
        let r = grad_check(Component::Linear, 3, 1.0 / 1024.0, 1).unwrap();
        assert!(r.max_rel_err < 1e-12, "{r}");
    }

    #[test]
    fn component_names_roundtrip() {
        for c in [Component::Linear, Component::Maca, Component::Fem, Component::Head, Component::Full] {
            assert_eq!(c.to_string().parse::<Component>().unwrap(), c);
        }
        assert!("attn".parse::<Component>().is_err());
    }
}
