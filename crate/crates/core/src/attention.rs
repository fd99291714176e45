//! Cross attention, mutual cross attention and mutual agent cross attention
//! over flattened feature grids, plus the decoder's feature-set schedule.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// Which attention variant a decoder stage runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    /// One-directional dense cross attention.
    Ca,
    /// Dense attention in both directions, summed after alignment.
    Mca,
    /// Both directions routed through learnable agent tokens.
    #[default]
    Maca,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 3] = [AttentionKind::Ca, AttentionKind::Mca, AttentionKind::Maca];
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionKind::Ca => "ca",
            AttentionKind::Mca => "mca",
            AttentionKind::Maca => "maca",
        })
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ca" => Ok(AttentionKind::Ca),
            "mca" => Ok(AttentionKind::Mca),
            "maca" => Ok(AttentionKind::Maca),
            other => Err(Error::Config(format!("attention must be ca, mca or maca, got `{other}`"))),
        }
    }
}

/// Origin of a token sequence: encoder stage `E_i` or decoder output `S_i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FeatureLabel {
    Encoder(usize),
    Decoder(usize),
}

impl fmt::Display for FeatureLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureLabel::Encoder(i) => write!(f, "E{i}"),
            FeatureLabel::Decoder(i) => write!(f, "S{i}"),
        }
    }
}

/// `[N, d]` tokens flattened row-major from a `grid_h × grid_w` map.
#[derive(Clone, Copy, Debug)]
pub struct TokenSeq {
    pub tokens: Var,
    pub grid_h: usize,
    pub grid_w: usize,
    pub label: FeatureLabel,
}

impl TokenSeq {
    pub fn new<T: Scalar>(g: &Graph<T>, tokens: Var, grid_h: usize, grid_w: usize, label: FeatureLabel) -> Result<Self> {
        match *g.shape(tokens) {
            [n, _] if n == grid_h * grid_w => Ok(TokenSeq {
                tokens,
                grid_h,
                grid_w,
                label,
            }),
            ref s => Err(Error::dim(format!(
                "{label}: tokens {s:?} do not flatten a {grid_h}x{grid_w} grid"
            ))),
        }
    }

    /// Tokens of an `[h, w, d]` feature map.
    pub fn from_map<T: Scalar>(g: &mut Graph<T>, map: Var, label: FeatureLabel) -> Result<Self> {
        let (h, w, d) = match *g.shape(map) {
            [h, w, d] => (h, w, d),
            ref s => return Err(Error::dim(format!("feature map must be [h, w, d], got {s:?}"))),
        };
        let tokens = g.reshape(map, [h * w, d])?;
        TokenSeq::new(g, tokens, h, w, label)
    }

    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Back to `[grid_h, grid_w, d]`.
    pub fn to_map<T: Scalar>(&self, g: &mut Graph<T>) -> Result<Var> {
        let d = g.shape(self.tokens)[1];
        g.reshape(self.tokens, [self.grid_h, self.grid_w, d])
    }
}

/// Ordered key/value sources for one decoder stage.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    pub members: Vec<TokenSeq>,
}

impl FeatureSet {
    pub fn labels(&self) -> Vec<FeatureLabel> {
        self.members.iter().map(|m| m.label).collect()
    }
}

/// Affine token map `x·w + b`.
#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub w: Var,
    pub b: Var,
}

impl Projection {
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.linear(x, self.w, self.b)
    }
}

/// Query/key/value maps split into `heads` equal column groups.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionPack {
    pub q: Projection,
    pub k: Projection,
    pub v: Projection,
    pub heads: usize,
}

/// Learnable `[n_agent, d]` matrix; columns are split across heads.
#[derive(Clone, Copy, Debug)]
pub struct AgentTokens {
    pub a: Var,
    pub n_agent: usize,
}

impl AgentTokens {
    pub fn new<T: Scalar>(g: &Graph<T>, a: Var) -> Result<Self> {
        match *g.shape(a) {
            [0, _] => Err(Error::param("agent tokens need n_agent >= 1")),
            [n, _] => Ok(AgentTokens { a, n_agent: n }),
            ref s => Err(Error::dim(format!("agent tokens must be [n, d], got {s:?}"))),
        }
    }
}

struct Qkv {
    q: Var,
    k: Var,
    v: Var,
}

fn head_width<T: Scalar>(g: &Graph<T>, q: Var, k: Var, v: Var, heads: usize) -> Result<usize> {
    let d = g.shape(q)[1];
    if g.shape(k)[1] != d || g.shape(v)[1] != d {
        return Err(Error::dim(format!(
            "projected widths differ: q {d}, k {}, v {}",
            g.shape(k)[1],
            g.shape(v)[1]
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::param(format!("width {d} is not divisible by {heads} heads")));
    }
    Ok(d / heads)
}

fn project_qkv<T: Scalar>(g: &mut Graph<T>, q_src: Var, kv_src: Var, p: &ProjectionPack) -> Result<Qkv> {
    Ok(Qkv {
        q: p.q.apply(g, q_src)?,
        k: p.k.apply(g, kv_src)?,
        v: p.v.apply(g, kv_src)?,
    })
}

/// Per-head `softmax(q kᵀ / √d_head)`.
fn dense_weights<T: Scalar>(g: &mut Graph<T>, qkv: &Qkv, heads: usize) -> Result<Vec<Var>> {
    let dh = head_width(g, qkv.q, qkv.k, qkv.v, heads)?;
    let scale = 1.0 / (dh as f64).sqrt();
    (0..heads)
        .map(|h| {
            let q = g.slice_channels(qkv.q, h * dh, dh)?;
            let k = g.slice_channels(qkv.k, h * dh, dh)?;
            let s = g.matmul_nt(q, k)?;
            let s = g.scale(s, scale)?;
            g.softmax_rows(s)
        })
        .collect()
}

fn dense_heads<T: Scalar>(g: &mut Graph<T>, qkv: &Qkv, heads: usize) -> Result<Var> {
    let dh = head_width(g, qkv.q, qkv.k, qkv.v, heads)?;
    let weights = dense_weights(g, qkv, heads)?;
    let outs = weights
        .into_iter()
        .enumerate()
        .map(|(h, p)| {
            let v = g.slice_channels(qkv.v, h * dh, dh)?;
            g.matmul(p, v)
        })
        .collect::<Result<Vec<_>>>()?;
    g.concat_channels(&outs)
}

/// Per-head `(softmax(q Aᵀ/√d_head), softmax(A kᵀ/√d_head))`.
fn agent_factors<T: Scalar>(g: &mut Graph<T>, qkv: &Qkv, agents: &AgentTokens, heads: usize) -> Result<Vec<(Var, Var)>> {
    let dh = head_width(g, qkv.q, qkv.k, qkv.v, heads)?;
    if agents.n_agent == 0 {
        return Err(Error::param("agent tokens need n_agent >= 1"));
    }
    if g.shape(agents.a)[1] != dh * heads {
        return Err(Error::dim(format!(
            "agent width {} does not match projected width {}",
            g.shape(agents.a)[1],
            dh * heads
        )));
    }
    let scale = 1.0 / (dh as f64).sqrt();
    (0..heads)
        .map(|h| {
            let q = g.slice_channels(qkv.q, h * dh, dh)?;
            let k = g.slice_channels(qkv.k, h * dh, dh)?;
            let a = g.slice_channels(agents.a, h * dh, dh)?;
            let qa = g.matmul_nt(q, a)?;
            let qa = g.scale(qa, scale)?;
            let qa = g.softmax_rows(qa)?;
            let ak = g.matmul_nt(a, k)?;
            let ak = g.scale(ak, scale)?;
            let ak = g.softmax_rows(ak)?;
            Ok((qa, ak))
        })
        .collect()
}

fn agent_heads<T: Scalar>(g: &mut Graph<T>, qkv: &Qkv, agents: &AgentTokens, heads: usize) -> Result<Var> {
    let dh = g.shape(qkv.q)[1] / heads.max(1);
    let factors = agent_factors(g, qkv, agents, heads)?;
    let outs = factors
        .into_iter()
        .enumerate()
        .map(|(h, (qa, ak))| {
            let v = g.slice_channels(qkv.v, h * dh, dh)?;
            // Agents gather from the values first: n×M·M×dh, then N×n·n×dh.
            let va = g.matmul(ak, v)?;
            g.matmul(qa, va)
        })
        .collect::<Result<Vec<_>>>()?;
    g.concat_channels(&outs)
}

fn concat_tokens<T: Scalar>(g: &mut Graph<T>, set: &FeatureSet) -> Result<Var> {
    if set.members.is_empty() {
        return Err(Error::param("feature set is empty"));
    }
    if set.members.len() == 1 {
        return Ok(set.members[0].tokens);
    }
    let toks: Vec<Var> = set.members.iter().map(|m| m.tokens).collect();
    g.concat_rows(&toks)
}

fn with_grid<T: Scalar>(g: &Graph<T>, tokens: Var, like: &TokenSeq) -> Result<TokenSeq> {
    TokenSeq::new(g, tokens, like.grid_h, like.grid_w, like.label)
}

/// Resample per-member segments of `[Σ N_k, d]` tokens onto an
/// `out_h × out_w` grid and average them.
pub fn align_to_grid<T: Scalar>(
    g: &mut Graph<T>,
    tokens: Var,
    members: &[TokenSeq],
    out_h: usize,
    out_w: usize,
) -> Result<Var> {
    let (total, d) = match *g.shape(tokens) {
        [n, d] => (n, d),
        ref s => return Err(Error::dim(format!("tokens must be [N, d], got {s:?}"))),
    };
    let expect: usize = members.iter().map(TokenSeq::len).sum();
    if expect != total || members.is_empty() {
        return Err(Error::dim(format!(
            "{total} tokens cannot be split over member grids totalling {expect}"
        )));
    }
    let mut acc: Option<Var> = None;
    let mut offset = 0;
    for m in members {
        let seg = if members.len() == 1 {
            tokens
        } else {
            g.slice_rows(tokens, offset, m.len())?
        };
        offset += m.len();
        let map = g.reshape(seg, [m.grid_h, m.grid_w, d])?;
        let map = if (m.grid_h, m.grid_w) == (out_h, out_w) {
            map
        } else {
            g.bilinear_resize(map, out_h, out_w)?
        };
        let flat = g.reshape(map, [out_h * out_w, d])?;
        acc = Some(match acc {
            None => flat,
            Some(a) => g.add(a, flat)?,
        });
    }
    let sum = acc.unwrap();
    if members.len() == 1 {
        Ok(sum)
    } else {
        g.scale(sum, 1.0 / members.len() as f64)
    }
}

/// `softmax(Q_x K_yᵀ/√d_head) V_y`, heads re-merged; output on `x`'s grid.
pub fn cross_attention<T: Scalar>(g: &mut Graph<T>, x: &TokenSeq, y: &TokenSeq, pack: &ProjectionPack) -> Result<TokenSeq> {
    cross_attention_set(g, x, &FeatureSet { members: vec![*y] }, pack)
}

/// [`cross_attention`] with keys/values drawn from every member of `set`.
pub fn cross_attention_set<T: Scalar>(
    g: &mut Graph<T>,
    x: &TokenSeq,
    set: &FeatureSet,
    pack: &ProjectionPack,
) -> Result<TokenSeq> {
    let y = concat_tokens(g, set)?;
    let qkv = project_qkv(g, x.tokens, y, pack)?;
    let out = dense_heads(g, &qkv, pack.heads)?;
    with_grid(g, out, x)
}

pub fn mutual_cross_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: &TokenSeq,
    y: &TokenSeq,
    pack_xy: &ProjectionPack,
    pack_yx: &ProjectionPack,
) -> Result<TokenSeq> {
    mutual_cross_attention_set(g, x, &FeatureSet { members: vec![*y] }, pack_xy, pack_yx)
}

/// `O_{x→y} + align(O_{y→x})` with dense attention in both directions.
pub fn mutual_cross_attention_set<T: Scalar>(
    g: &mut Graph<T>,
    x: &TokenSeq,
    set: &FeatureSet,
    pack_xy: &ProjectionPack,
    pack_yx: &ProjectionPack,
) -> Result<TokenSeq> {
    let y = concat_tokens(g, set)?;
    let fwd = project_qkv(g, x.tokens, y, pack_xy)?;
    let o_xy = dense_heads(g, &fwd, pack_xy.heads)?;
    let rev = project_qkv(g, y, x.tokens, pack_yx)?;
    let o_yx = dense_heads(g, &rev, pack_yx.heads)?;
    let aligned = align_to_grid(g, o_yx, &set.members, x.grid_h, x.grid_w)?;
    let out = g.add(o_xy, aligned)?;
    with_grid(g, out, x)
}

/// `σ(Q Aᵀ/√d_head) σ(A Kᵀ/√d_head) V` with queries from `q_src` and
/// keys/values from `kv_src`.
pub fn agent_cross_attention_dir<T: Scalar>(
    g: &mut Graph<T>,
    q_src: &TokenSeq,
    kv_src: &TokenSeq,
    agents: &AgentTokens,
    pack: &ProjectionPack,
) -> Result<TokenSeq> {
    let qkv = project_qkv(g, q_src.tokens, kv_src.tokens, pack)?;
    let out = agent_heads(g, &qkv, agents, pack.heads)?;
    with_grid(g, out, q_src)
}

/// Agent-routed attention in both directions between `x` and the
/// concatenated members of `set`; the reverse output is split per member,
/// resampled to `x`'s grid and averaged before the sum.
pub fn mutual_agent_cross_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: &TokenSeq,
    set: &FeatureSet,
    agents: &AgentTokens,
    pack_xy: &ProjectionPack,
    pack_yx: &ProjectionPack,
) -> Result<TokenSeq> {
    let y = concat_tokens(g, set)?;
    let fwd = project_qkv(g, x.tokens, y, pack_xy)?;
    let o_xy = agent_heads(g, &fwd, agents, pack_xy.heads)?;
    let rev = project_qkv(g, y, x.tokens, pack_yx)?;
    let o_yx = agent_heads(g, &rev, agents, pack_yx.heads)?;
    let aligned = align_to_grid(g, o_yx, &set.members, x.grid_h, x.grid_w)?;
    let out = g.add(o_xy, aligned)?;
    with_grid(g, out, x)
}

/// The `x → set` term of [`mutual_agent_cross_attention`] alone.
pub fn agent_cross_attention_set<T: Scalar>(
    g: &mut Graph<T>,
    x: &TokenSeq,
    set: &FeatureSet,
    agents: &AgentTokens,
    pack: &ProjectionPack,
) -> Result<TokenSeq> {
    let y = concat_tokens(g, set)?;
    let qkv = project_qkv(g, x.tokens, y, pack)?;
    let out = agent_heads(g, &qkv, agents, pack.heads)?;
    with_grid(g, out, x)
}

/// Effective query→key mixing matrices of dense cross attention, one per head.
pub fn dense_mixing<T: Scalar>(g: &mut Graph<T>, x: &TokenSeq, y: &TokenSeq, pack: &ProjectionPack) -> Result<Vec<Tensor<T>>> {
    let qkv = project_qkv(g, x.tokens, y.tokens, pack)?;
    let w = dense_weights(g, &qkv, pack.heads)?;
    Ok(w.into_iter().map(|v| g.value(v).clone()).collect())
}

/// Composed `σ(QAᵀ)·σ(AKᵀ)` per head.
pub fn agent_mixing<T: Scalar>(
    g: &mut Graph<T>,
    q_src: &TokenSeq,
    kv_src: &TokenSeq,
    agents: &AgentTokens,
    pack: &ProjectionPack,
) -> Result<Vec<Tensor<T>>> {
    let qkv = project_qkv(g, q_src.tokens, kv_src.tokens, pack)?;
    let factors = agent_factors(g, &qkv, agents, pack.heads)?;
    factors
        .into_iter()
        .map(|(qa, ak)| {
            let m = g.matmul(qa, ak)?;
            Ok(g.value(m).clone())
        })
        .collect()
}

/// Key/value sources for decoder stage `j` (1-based) over `I` stages:
/// all encoder features for `j = 1`, otherwise `E_1..E_{I−j+1}` followed by
/// the already computed `S_{I−j+2}..S_I`. `decoded[i - 1]` holds `S_i`.
pub fn select_feature_set(j: usize, encoder: &[TokenSeq], decoded: &[Option<TokenSeq>]) -> Result<FeatureSet> {
    let stages = encoder.len();
    if j == 0 || j > stages {
        return Err(Error::param(format!("stage index {j} outside 1..={stages}")));
    }
    if decoded.len() != stages {
        return Err(Error::dim(format!(
            "{} decoder slots for {stages} encoder stages",
            decoded.len()
        )));
    }
    let keep = stages - j + 1;
    let mut members: Vec<TokenSeq> = encoder[..keep].to_vec();
    for i in keep + 1..=stages {
        match decoded[i - 1] {
            Some(s) => members.push(s),
            None => {
                return Err(Error::Sequencing(format!(
                    "stage {j} needs S{i}, which has not been computed"
                )))
            }
        }
    }
    Ok(FeatureSet { members })
}
