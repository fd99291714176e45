//! Training and evaluation loops, and the ablation runner.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionKind;
use crate::config::KeyValues;
use crate::data::{Dataset, Mask, SegSample};
use crate::error::{Error, Result};
use crate::metrics::{boundary_counts, BoundaryCounts, ConfusionMatrix};
use crate::model::{Model, ModelConfig};
use crate::numerics::{AdamW, AdamWConfig, Graph, Scalar, Tensor};

pub const BOUNDARY_RADIUS: usize = 2;
pub const CSV_HEADER: &str = "iter,loss,pix_acc,miou,boundary_f,seconds";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision `{other}` (f32, f64)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub iterations: usize,
    pub batch: usize,
    pub eval_every: usize,
    pub weight_decay: f64,
    pub hflip: bool,
    pub checkpoint_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    /// Batch order and flip draws; parameter init uses `model.seed`.
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            lr: 1e-3,
            iterations: 2000,
            batch: 8,
            eval_every: 500,
            weight_decay: 0.01,
            hflip: true,
            checkpoint_dir: None,
            log_path: None,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = self.model.to_kv();
        kv.set("lr", self.lr);
        kv.set("iters", self.iterations);
        kv.set("batch", self.batch);
        kv.set("eval_every", self.eval_every);
        kv.set("weight_decay", self.weight_decay);
        kv.set("hflip", if self.hflip { "on" } else { "off" });
        kv.set("train_seed", self.seed);
        kv.set("precision", self.precision);
        kv
    }

    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<()> {
        self.model.apply_kv(kv)?;
        self.lr = kv.parse_or("lr", self.lr)?;
        self.iterations = kv.parse_or("iters", self.iterations)?;
        self.batch = kv.parse_or("batch", self.batch)?;
        self.eval_every = kv.parse_or("eval_every", self.eval_every)?;
        self.weight_decay = kv.parse_or("weight_decay", self.weight_decay)?;
        if let Some(v) = kv.get("hflip") {
            self.hflip = crate::model::parse_switch(v)?;
        }
        self.seed = kv.parse_or("train_seed", self.seed)?;
        self.precision = kv.parse_or("precision", self.precision)?;
        Ok(())
    }
}

/// `lr₀ · (1 − t/T)`.
pub fn poly_lr(lr0: f64, t: usize, total: usize) -> f64 {
    lr0 * (1.0 - t as f64 / total as f64).max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    pub iter: usize,
    pub loss: f64,
    pub pix_acc: f64,
    pub miou: f64,
    pub boundary_f: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    records: Vec<MetricsRecord>,
}

impl MetricsLog {
    pub fn push(&mut self, r: MetricsRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if r.iter <= last.iter {
                return Err(Error::Sequencing(format!(
                    "log record for iteration {} after {}",
                    r.iter, last.iter
                )));
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    pub fn last(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.3}\n",
                r.iter, r.loss, r.pix_acc, r.miou, r.boundary_f, r.seconds
            ));
        }
        s
    }
}

/// Metrics over one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub boundary: BoundaryCounts,
    pub pix_acc: f64,
    pub miou: f64,
    pub boundary_f: f64,
}

pub fn report(confusion: ConfusionMatrix, boundary: BoundaryCounts) -> Result<EvalReport> {
    Ok(EvalReport {
        pix_acc: confusion.pixel_accuracy()?,
        miou: confusion.miou()?,
        boundary_f: boundary.f_score(),
        confusion,
        boundary,
    })
}

pub fn predict<T: Scalar>(model: &Model<T>, image: &Tensor<f32>) -> Result<Mask> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let logits = model.forward(&image.cast())?;
    Ok(Mask {
        h,
        w,
        labels: logits.argmax(),
    })
}

pub fn evaluate<T: Scalar>(model: &Model<T>, ds: &Dataset) -> Result<EvalReport> {
    if model.cfg.num_classes != ds.num_classes {
        return Err(Error::Config(format!(
            "model predicts {} classes, dataset has {}",
            model.cfg.num_classes, ds.num_classes
        )));
    }
    if ds.is_empty() {
        return Err(Error::Data("evaluation dataset is empty".into()));
    }
    let mut cm = ConfusionMatrix::new(ds.num_classes);
    let mut bc = BoundaryCounts::default();
    for s in &ds.samples {
        let pred = predict(model, &s.image)?;
        cm.add(&pred, &s.mask)?;
        bc.add(boundary_counts(&pred, &s.mask, BOUNDARY_RADIUS)?);
    }
    report(cm, bc)
}

/// Mean cross-entropy over pixels and its parameter gradients for one sample.
pub fn sample_loss_and_grads<T: Scalar>(model: &Model<T>, s: &SegSample) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g)?;
    let x = g.constant(s.image.cast())?;
    let out = model.forward_graph(&mut g, &bound, x)?;
    let k = model.cfg.num_classes;
    let flat = g.reshape(out.logits, [s.mask.h * s.mask.w, k])?;
    let loss = g.cross_entropy(flat, &s.mask.labels)?;
    let lv = g.value(loss).data()[0].f64();
    let grads = g.backward(loss)?;
    let gs = bound.vars.iter().map(|&v| grads.tensor(&g, v)).collect();
    Ok((lv, gs))
}

pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub log: MetricsLog,
    /// Batch loss at every iteration.
    pub losses: Vec<f64>,
    pub steps: usize,
}

pub fn train<T: Scalar>(cfg: &TrainConfig, train_set: &Dataset, eval_set: Option<&Dataset>) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    if cfg.model.num_classes != train_set.num_classes {
        return Err(Error::Config(format!(
            "model predicts {} classes, dataset has {}",
            cfg.model.num_classes, train_set.num_classes
        )));
    }
    let eval_set = eval_set.unwrap_or(train_set);
    let mut model = Model::<T>::new(cfg.model.clone())?;
    let mut opt = AdamW::new(
        &model.params,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = MetricsLog::default();
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut csv = match &cfg.log_path {
        Some(p) => {
            if let Some(dir) = p.parent() {
                fs::create_dir_all(dir)?;
            }
            let mut f = fs::File::create(p)?;
            writeln!(f, "{CSV_HEADER}")?;
            Some(f)
        }
        None => None,
    };
    let start = Instant::now();
    let scale = 1.0 / cfg.batch as f64;
    for t in 0..cfg.iterations {
        let mut acc = model.params.zeros_like();
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let idx = rng.random_range(0..train_set.len());
            let flip = cfg.hflip && rng.random_bool(0.5);
            let sample = &train_set.samples[idx];
            let (l, gs) = if flip {
                sample_loss_and_grads(&model, &sample.hflip())
            } else {
                sample_loss_and_grads(&model, sample)
            }
            .map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged(t + 1),
                other => other,
            })?;
            loss += l * scale;
            for (a, g) in acc.iter_mut().zip(&gs) {
                for (x, &y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x = *x + y * T::c(scale);
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::Diverged(t + 1));
        }
        losses.push(loss);
        opt.step(&mut model.params, &acc, poly_lr(cfg.lr, t, cfg.iterations))?;
        let iter = t + 1;
        if iter % cfg.eval_every == 0 || iter == cfg.iterations {
            let r = evaluate(&model, eval_set)?;
            let rec = MetricsRecord {
                iter,
                loss,
                pix_acc: r.pix_acc,
                miou: r.miou,
                boundary_f: r.boundary_f,
                seconds: start.elapsed().as_secs_f64(),
            };
            log.push(rec)?;
            if let Some(f) = csv.as_mut() {
                let line = MetricsLog { records: vec![rec] }.to_csv();
                f.write_all(line.lines().nth(1).unwrap_or_default().as_bytes())?;
                f.write_all(b"\n")?;
                f.flush()?;
            }
        }
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        model.save(dir)?;
        cfg.to_kv().write(&dir.join("train.cfg"))?;
    }
    Ok(TrainOutcome {
        model,
        log,
        losses,
        steps: opt.state.step as usize,
    })
}

/// Median of the `window` losses ending at 1-based iteration `iter`.
pub fn smoothed_loss(losses: &[f64], iter: usize, window: usize) -> Option<f64> {
    if iter == 0 || iter > losses.len() || window == 0 {
        return None;
    }
    let lo = iter.saturating_sub(window);
    Some(median(&losses[lo..iter]))
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One ablation cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub attention: AttentionKind,
    pub fem_enabled: bool,
    pub fem_tau: f64,
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}{}",
            self.attention,
            if self.fem_enabled {
                format!("+fem@{}", self.fem_tau)
            } else {
                String::new()
            }
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrid {
    pub attention: Vec<AttentionKind>,
    pub fem: Vec<bool>,
    pub tau: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl AblationGrid {
    /// CA/MCA/MACA × ±FEM at the default threshold.
    pub fn table() -> Self {
        AblationGrid {
            attention: AttentionKind::ALL.to_vec(),
            fem: vec![false, true],
            tau: vec![0.5],
            seeds: vec![0, 1, 2],
        }
    }

    /// MACA+FEM over the threshold sweep.
    pub fn tau_sweep() -> Self {
        AblationGrid {
            attention: vec![AttentionKind::Maca],
            fem: vec![true],
            tau: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            seeds: vec![0, 1, 2],
        }
    }

    /// Cells in row order; FEM-off cells ignore the threshold axis.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &attention in &self.attention {
            for &fem_enabled in &self.fem {
                let taus: &[f64] = if fem_enabled { &self.tau } else { &self.tau[..1.min(self.tau.len())] };
                for &fem_tau in taus {
                    out.push(Cell {
                        attention,
                        fem_enabled,
                        fem_tau,
                    });
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub cell: Cell,
    pub params: usize,
    /// Per-seed final records; `Err` text for failed seeds.
    pub runs: Vec<std::result::Result<MetricsRecord, String>>,
}

impl CellResult {
    fn med(&self, f: impl Fn(&MetricsRecord) -> f64) -> f64 {
        let ok: Vec<f64> = self.runs.iter().filter_map(|r| r.as_ref().ok()).map(f).collect();
        median(&ok)
    }

    pub fn median_miou(&self) -> f64 {
        self.med(|r| r.miou)
    }

    pub fn median_pix_acc(&self) -> f64 {
        self.med(|r| r.pix_acc)
    }

    pub fn median_boundary_f(&self) -> f64 {
        self.med(|r| r.boundary_f)
    }

    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| r.is_err()).count()
    }
}

pub const ABLATION_HEADER: &str = "attention,fem,fem_tau,params,seeds_ok,seeds_failed,pix_acc,miou,boundary_f";

pub fn ablation_csv(results: &[CellResult]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in results {
        s.push_str(&format!(
            "{},{},{},{},{},{},{:.6},{:.6},{:.6}\n",
            r.cell.attention,
            if r.cell.fem_enabled { "on" } else { "off" },
            r.cell.fem_tau,
            r.params,
            r.runs.len() - r.failures(),
            r.failures(),
            r.median_pix_acc(),
            r.median_miou(),
            r.median_boundary_f()
        ));
    }
    s
}

/// Train every cell for every seed; a failing run is recorded, not fatal.
/// Each seed sets both model init and batch order.
pub fn ablate<T: Scalar>(
    base: &TrainConfig,
    grid: &AblationGrid,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    out_dir: Option<&Path>,
) -> Result<Vec<CellResult>> {
    if grid.seeds.is_empty() || grid.attention.is_empty() || grid.fem.is_empty() || grid.tau.is_empty() {
        return Err(Error::Config("ablation grid has an empty axis".into()));
    }
    let mut results = Vec::new();
    for cell in grid.cells() {
        let mut cfg = base.clone();
        cfg.model.attention = cell.attention;
        cfg.model.fem_enabled = cell.fem_enabled;
        cfg.model.fem.tau = cell.fem_tau;
        let params = Model::<T>::new(cfg.model.clone()).map(|m| m.num_params()).unwrap_or(0);
        let mut runs = Vec::new();
        for &seed in &grid.seeds {
            let mut c = cfg.clone();
            c.model.seed = seed;
            c.seed = seed;
            c.checkpoint_dir = None;
            c.log_path = out_dir.map(|d| d.join(format!("{}_seed{seed}.csv", cell.to_string().replace(['+', '@'], "_"))));
            let run = train::<T>(&c, train_set, eval_set)
                .and_then(|o| o.log.last().copied().ok_or_else(|| Error::Data("run produced no record".into())));
            runs.push(run.map_err(|e| e.to_string()));
        }
        results.push(CellResult { cell, params, runs });
    }
    if let Some(d) = out_dir {
        fs::create_dir_all(d)?;
        fs::write(d.join("ablation.csv"), ablation_csv(&results))?;
    }
    Ok(results)
}
