//! Encoder stub → decoder attention stages (spatial path) + frequency path
//! → 1×1 head → per-pixel logits.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    cross_attention_set, mutual_agent_cross_attention, mutual_cross_attention_set, select_feature_set,
    AgentTokens, AttentionKind, FeatureLabel, FeatureSet, Projection, ProjectionPack, TokenSeq,
};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::fem::{fem_aggregate, project_map, FemConfig, FemParams};
use crate::numerics::{ntf, Graph, ParamStore, Scalar, Tensor, Var};
use crate::spectral::BandMode;

pub const STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Common decoder width every stage is projected to.
    pub d: usize,
    pub heads: usize,
    pub n_agent: usize,
    pub attention: AttentionKind,
    pub fem_enabled: bool,
    pub fem: FemConfig,
    pub num_classes: usize,
    pub encoder_channels: [usize; STAGES],
    pub seed: u64,
    /// Reuse the forward projection pack for the reverse direction.
    pub shared_direction_proj: bool,
    /// Test hook: every decoder stage attends only to its own encoder tokens.
    pub single_member_sets: bool,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            heads: 2,
            n_agent: 16,
            attention: AttentionKind::Maca,
            fem_enabled: true,
            fem: FemConfig::default(),
            num_classes: 4,
            encoder_channels: [16, 32, 64, 128],
            seed: 0,
            shared_direction_proj: false,
            single_member_sets: false,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.n_agent == 0 {
            return Err(Error::Config("need at least one agent token".into()));
        }
        if self.encoder_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("encoder channels must be positive".into()));
        }
        crate::spectral::check_tau(self.fem.tau)?;
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("width", self.d);
        kv.set("heads", self.heads);
        kv.set("agents", self.n_agent);
        kv.set("attention", self.attention);
        kv.set("fem", if self.fem_enabled { "on" } else { "off" });
        kv.set("fem_tau", self.fem.tau);
        kv.set("fem_mode", self.fem.mode);
        kv.set("classes", self.num_classes);
        kv.set(
            "encoder_channels",
            self.encoder_channels.map(|c| c.to_string()).join(","),
        );
        kv.set("model_seed", self.seed);
        kv.set("shared_direction_proj", self.shared_direction_proj);
        kv.set("single_member_sets", self.single_member_sets);
        kv.set("init_std", self.init_std);
        kv
    }

    /// Overlay recognized keys of `kv` on `self`.
    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<()> {
        self.d = kv.parse_or("width", self.d)?;
        self.heads = kv.parse_or("heads", self.heads)?;
        self.n_agent = kv.parse_or("agents", self.n_agent)?;
        self.attention = kv.parse_or("attention", self.attention)?;
        if let Some(v) = kv.get("fem") {
            self.fem_enabled = parse_switch(v)?;
        }
        self.fem.tau = kv.parse_or("fem_tau", self.fem.tau)?;
        self.fem.mode = kv.parse_or::<BandMode>("fem_mode", self.fem.mode)?;
        self.num_classes = kv.parse_or("classes", self.num_classes)?;
        if let Some(v) = kv.get("encoder_channels") {
            let parts: Vec<usize> = v
                .split(',')
                .map(|p| p.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("encoder_channels `{v}`: {e}")))?;
            self.encoder_channels = parts
                .try_into()
                .map_err(|_| Error::Config(format!("encoder_channels needs {STAGES} entries")))?;
        }
        self.seed = kv.parse_or("model_seed", self.seed)?;
        self.shared_direction_proj = kv.parse_or("shared_direction_proj", self.shared_direction_proj)?;
        self.single_member_sets = kv.parse_or("single_member_sets", self.single_member_sets)?;
        self.init_std = kv.parse_or("init_std", self.init_std)?;
        self.validate()
    }
}

pub fn parse_switch(v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("expected on/off, got `{v}`"))),
    }
}

/// The four encoder maps `E_1..E_4`, each half the extent of the previous.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub e: Vec<Var>,
    pub h: usize,
    pub w: usize,
}

/// Per-pixel class scores at input resolution.
#[derive(Clone, Debug)]
pub struct SegLogits<T> {
    pub logits: Tensor<T>,
}

impl<T: Scalar> SegLogits<T> {
    pub fn argmax(&self) -> Vec<usize> {
        let k = *self.logits.shape().last().unwrap();
        self.logits
            .data()
            .chunks(k)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

/// Which feature set each decoder stage consumed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageRecord {
    pub output: FeatureLabel,
    pub members: Vec<FeatureLabel>,
}

#[derive(Clone, Copy, Debug)]
struct LinearIds {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct PackIds {
    q: LinearIds,
    k: LinearIds,
    v: LinearIds,
}

#[derive(Clone, Copy, Debug)]
struct StageIds {
    xy: PackIds,
    yx: Option<PackIds>,
    agents: Option<usize>,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: LinearIds,
    enc: [(LinearIds, LinearIds); STAGES],
    lateral: [LinearIds; STAGES],
    stages: [StageIds; STAGES],
    fem_lateral: [LinearIds; STAGES],
    fem_out: LinearIds,
    head: LinearIds,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    seed: u64,
    std: f64,
}

impl<T: Scalar> Builder<'_, T> {
    fn weight(&mut self, name: String, shape: Vec<usize>) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(&name));
        let t = Tensor::randn(shape, self.std, &mut rng);
        self.store.insert(name, t)
    }

    fn linear(&mut self, name: &str, w_shape: Vec<usize>) -> LinearIds {
        let out = *w_shape.last().unwrap();
        let w = self.weight(format!("{name}.weight"), w_shape);
        let b = self.store.insert(format!("{name}.bias"), Tensor::zeros([out]));
        LinearIds { w, b }
    }

    fn pack(&mut self, name: &str, d: usize) -> PackIds {
        PackIds {
            q: self.linear(&format!("{name}.q"), vec![d, d]),
            k: self.linear(&format!("{name}.k"), vec![d, d]),
            v: self.linear(&format!("{name}.v"), vec![d, d]),
        }
    }
}

/// Parameters plus architecture for one configuration.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    layout: Layout,
}

/// Parameter leaves of a model bound onto one graph.
pub struct Bound {
    pub vars: Vec<Var>,
}

/// Result of a full forward pass on a graph.
pub struct Forward {
    /// `[H, W, K]`
    pub logits: Var,
    pub pyramid: FeaturePyramid,
    pub spatial: Var,
    pub frequency: Option<Var>,
    pub stage_log: Vec<StageRecord>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder {
            store: &mut params,
            seed: cfg.seed,
            std: cfg.init_std,
        };
        let ch = cfg.encoder_channels;
        let d = cfg.d;
        let stem = b.linear("encoder.stem", vec![3, 3, 3, ch[0]]);
        let enc = std::array::from_fn(|i| {
            let cin = if i == 0 { ch[0] } else { ch[i - 1] };
            (
                b.linear(&format!("encoder.stage{}.conv1", i + 1), vec![3, 3, cin, ch[i]]),
                b.linear(&format!("encoder.stage{}.conv2", i + 1), vec![3, 3, ch[i], ch[i]]),
            )
        });
        let lateral = std::array::from_fn(|i| b.linear(&format!("decoder.lateral{}", i + 1), vec![ch[i], d]));
        let stages = std::array::from_fn(|i| {
            let name = format!("decoder.stage{}", i + 1);
            let xy = b.pack(&format!("{name}.xy"), d);
            let needs_reverse = cfg.attention != AttentionKind::Ca;
            let yx = (needs_reverse && !cfg.shared_direction_proj).then(|| b.pack(&format!("{name}.yx"), d));
            let agents = (cfg.attention == AttentionKind::Maca)
                .then(|| b.weight(format!("{name}.agents"), vec![cfg.n_agent, d]));
            StageIds { xy, yx, agents }
        });
        let fem_lateral = std::array::from_fn(|i| b.linear(&format!("fem.lateral{}", i + 1), vec![ch[i], d]));
        let fem_out = b.linear("fem.out", vec![6 * d, 4 * d]);
        let head = b.linear("head", vec![4 * d, cfg.num_classes]);
        Ok(Model {
            cfg,
            params,
            layout: Layout {
                stem,
                enc,
                lateral,
                stages,
                fem_lateral,
                fem_out,
                head,
            },
        })
    }

    /// Number of scalars the forward pass of this configuration can reach.
    pub fn num_params(&self) -> usize {
        self.params
            .iter()
            .filter(|(name, _)| self.cfg.fem_enabled || !name.starts_with("fem."))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn is_fem_param(name: &str) -> bool {
        name.starts_with("fem.")
    }

    /// Register every parameter as a gradient leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Result<Bound> {
        let vars = self
            .params
            .iter()
            .map(|(_, t)| g.param(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { vars })
    }

    fn lin(&self, bound: &Bound, ids: LinearIds) -> Projection {
        Projection {
            w: bound.vars[ids.w],
            b: bound.vars[ids.b],
        }
    }

    fn pack(&self, bound: &Bound, ids: PackIds) -> ProjectionPack {
        ProjectionPack {
            q: self.lin(bound, ids.q),
            k: self.lin(bound, ids.k),
            v: self.lin(bound, ids.v),
            heads: self.cfg.heads,
        }
    }

    fn conv_relu(&self, g: &mut Graph<T>, x: Var, p: Projection, stride: usize) -> Result<Var> {
        let y = g.conv2d(x, p.w, stride, 1)?;
        let y = g.add_bias(y, p.b)?;
        g.relu(y)
    }

    /// Stem conv (stride 2) then four `[conv s2 → relu → conv s1 → relu]`
    /// stages, giving `E_i` at `H/2^(i+1)`.
    pub fn encoder_forward(&self, g: &mut Graph<T>, bound: &Bound, image: Var) -> Result<FeaturePyramid> {
        let (h, w) = match *g.shape(image) {
            [h, w, 3] => (h, w),
            ref s => return Err(Error::dim(format!("image must be [H, W, 3], got {s:?}"))),
        };
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::param(format!("image extents {h}x{w} must be divisible by 32")));
        }
        let mut x = self.conv_relu(g, image, self.lin(bound, self.layout.stem), 2)?;
        let mut e = Vec::with_capacity(STAGES);
        for (c1, c2) in self.layout.enc {
            x = self.conv_relu(g, x, self.lin(bound, c1), 2)?;
            x = self.conv_relu(g, x, self.lin(bound, c2), 1)?;
            e.push(x);
        }
        Ok(FeaturePyramid { e, h, w })
    }

    /// Spatial path `S`: stages run for `j = 1..4`, producing `S_4..S_1`,
    /// then every `S_i` is resampled to `E_1`'s grid and concatenated.
    pub fn decoder_forward(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        pyr: &FeaturePyramid,
    ) -> Result<(Var, Vec<StageRecord>)> {
        if pyr.e.len() != STAGES {
            return Err(Error::param(format!("pyramid has {} stages, need {STAGES}", pyr.e.len())));
        }
        let mut encoder = Vec::with_capacity(STAGES);
        for (i, &map) in pyr.e.iter().enumerate() {
            let p = project_map(g, map, &self.lin(bound, self.layout.lateral[i]))?;
            encoder.push(TokenSeq::from_map(g, p, FeatureLabel::Encoder(i + 1))?);
        }
        let mut decoded: Vec<Option<TokenSeq>> = vec![None; STAGES];
        let mut log = Vec::with_capacity(STAGES);
        for j in 1..=STAGES {
            let i = STAGES - j + 1;
            let x = encoder[i - 1];
            let set = if self.cfg.single_member_sets {
                FeatureSet { members: vec![x] }
            } else {
                select_feature_set(j, &encoder, &decoded)?
            };
            let ids = self.layout.stages[i - 1];
            let xy = self.pack(bound, ids.xy);
            let yx = ids.yx.map(|p| self.pack(bound, p)).unwrap_or(xy);
            let mut out = match self.cfg.attention {
                AttentionKind::Ca => cross_attention_set(g, &x, &set, &xy)?,
                AttentionKind::Mca => mutual_cross_attention_set(g, &x, &set, &xy, &yx)?,
                AttentionKind::Maca => {
                    let agents = AgentTokens::new(g, bound.vars[ids.agents.expect("agents bound for maca")])?;
                    mutual_agent_cross_attention(g, &x, &set, &agents, &xy, &yx)?
                }
            };
            out.label = FeatureLabel::Decoder(i);
            log.push(StageRecord {
                output: out.label,
                members: set.labels(),
            });
            decoded[i - 1] = Some(out);
        }
        let e1 = encoder[0];
        let mut maps = Vec::with_capacity(STAGES);
        for s in decoded.into_iter().map(|s| s.unwrap()) {
            let m = s.to_map(g)?;
            let m = if (s.grid_h, s.grid_w) == (e1.grid_h, e1.grid_w) {
                m
            } else {
                g.bilinear_resize(m, e1.grid_h, e1.grid_w)?
            };
            maps.push(m);
        }
        Ok((g.concat_channels(&maps)?, log))
    }

    pub fn fem_params(&self, bound: &Bound) -> FemParams {
        FemParams {
            lateral: self.layout.fem_lateral.map(|ids| self.lin(bound, ids)),
            out: self.lin(bound, self.layout.fem_out),
        }
    }

    /// 1×1 head on `features` followed by bilinear upsampling to `h × w`.
    pub fn head_forward(&self, g: &mut Graph<T>, bound: &Bound, features: Var, h: usize, w: usize) -> Result<Var> {
        let logits = project_map(g, features, &self.lin(bound, self.layout.head))?;
        g.bilinear_resize(logits, h, w)
    }

    pub fn forward_graph(&self, g: &mut Graph<T>, bound: &Bound, image: Var) -> Result<Forward> {
        let pyramid = self.encoder_forward(g, bound, image)?;
        let (spatial, stage_log) = self.decoder_forward(g, bound, &pyramid)?;
        let (fused, frequency) = if self.cfg.fem_enabled {
            let f = fem_aggregate(g, &pyramid.e, self.cfg.fem, &self.fem_params(bound))?;
            (g.add(spatial, f)?, Some(f))
        } else {
            (spatial, None)
        };
        let logits = self.head_forward(g, bound, fused, pyramid.h, pyramid.w)?;
        Ok(Forward {
            logits,
            pyramid,
            spatial,
            frequency,
            stage_log,
        })
    }

    pub fn forward(&self, image: &Tensor<T>) -> Result<SegLogits<T>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g)?;
        let x = g.constant(image.clone())?;
        let out = self.forward_graph(&mut g, &bound, x)?;
        Ok(SegLogits {
            logits: g.value(out.logits).clone(),
        })
    }

    /// Write each parameter as NTF plus `manifest.txt` (`name file shape`)
    /// and `model.cfg`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        for (i, (name, t)) in self.params.iter().enumerate() {
            let file = format!("p{i:03}.ntf");
            ntf::write(&dir.join(&file), t)?;
            let shape = t.shape().iter().map(|e| e.to_string()).collect::<Vec<_>>().join("x");
            manifest.push_str(&format!("{name} {file} {shape}\n"));
        }
        fs::write(dir.join("manifest.txt"), manifest)?;
        self.cfg.to_kv().write(&dir.join("model.cfg"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        cfg.apply_kv(&KeyValues::read(&dir.join("model.cfg"))?)?;
        let mut model = Model::new(cfg)?;
        let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
        let mut seen = 0;
        for (n, line) in manifest.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Config(format!("manifest line {}: {msg}", n + 1));
            let mut parts = line.split_whitespace();
            let (Some(name), Some(file), Some(shape)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(bad(format!("expected `name file shape`, got `{line}`")));
            };
            let id = model
                .params
                .id(name)
                .ok_or_else(|| bad(format!("unknown parameter `{name}`")))?;
            let t: Tensor<T> = ntf::read(&dir.join(file))?;
            let listed = shape.split('x').map(|e| e.parse::<usize>()).collect::<std::result::Result<Vec<_>, _>>();
            if listed.as_deref() != Ok(t.shape()) || t.shape() != model.params.get(id).shape() {
                return Err(bad(format!(
                    "`{name}` shape {:?} does not match manifest `{shape}` / model {:?}",
                    t.shape(),
                    model.params.get(id).shape()
                )));
            }
            *model.params.get_mut(id) = t;
            seen += 1;
        }
        if seen != model.params.len() {
            return Err(Error::Config(format!(
                "checkpoint lists {seen} of {} parameters",
                model.params.len()
            )));
        }
        Ok(model)
    }

    /// Copy of this model at another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut params = ParamStore::new();
        for (name, t) in self.params.iter() {
            params.insert(name, t.cast());
        }
        Model {
            cfg: self.cfg.clone(),
            params,
            layout: self.layout.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            d: 8,
            heads: 2,
            n_agent: 4,
            encoder_channels: [4, 8, 8, 8],
            ..Default::default()
        }
    }

    #[test]
    fn parameter_counts_follow_variant_order() {
        let count = |k| Model::<f32>::new(ModelConfig { attention: k, ..small() }).unwrap().num_params();
        let (ca, mca, maca) = (count(AttentionKind::Ca), count(AttentionKind::Mca), count(AttentionKind::Maca));
        assert!(ca < mca && mca < maca, "{ca} {mca} {maca}");
        assert_eq!(mca - ca, STAGES * 3 * (8 * 8 + 8));
        assert_eq!(maca - mca, STAGES * 4 * 8);
    }

    #[test]
    fn config_roundtrips_through_kv() {
        let cfg = ModelConfig {
            attention: AttentionKind::Mca,
            fem_enabled: false,
            fem: FemConfig {
                tau: 0.3,
                mode: BandMode::Magnitude,
            },
            ..small()
        };
        let mut back = ModelConfig::default();
        back.apply_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_configs_and_extents() {
        assert!(Model::<f32>::new(ModelConfig { heads: 3, ..small() }).is_err());
        assert!(Model::<f32>::new(ModelConfig { num_classes: 1, ..small() }).is_err());
        let m = Model::<f32>::new(small()).unwrap();
        assert!(matches!(m.forward(&Tensor::zeros([48, 64, 3])), Err(Error::Parameter(_))));
    }
}
