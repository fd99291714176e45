//! Command-line entry point.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::KeyValues;
use crate::data::{read_dataset, read_manifest, write_dataset, Dataset, SceneConfig};
use crate::error::{Error, Result};
use crate::fem::fem_stage_inputs;
use crate::gradcheck::{grad_check, Component, DEFAULT_TOLERANCE};
use crate::model::Model;
use crate::numerics::{Graph, Scalar, Tensor};
use crate::spectral::{dfft2, export_log_magnitude, split_bands, ComplexTensor};
use crate::trainer::{ablate, ablation_csv, evaluate, train, AblationGrid, EvalReport, Precision, TrainConfig};
use crate::verify;

pub const EFFECTIVE_CONFIG: &str = "effective.cfg";

#[derive(Parser, Debug)]
#[command(name = "freqseg", version, about = "Toy segmentation with agent cross attention and frequency enhancement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

/// Flags shared by every subcommand; each maps onto a config key.
#[derive(Args, Debug, Default)]
pub struct Common {
    /// Output directory for all artifacts
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Dataset directory written by gen-data
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// key=value config file; flags override its entries
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_parser = ["ca", "mca", "maca"])]
    pub attention: Option<String>,
    #[arg(long, global = true, value_parser = ["on", "off"])]
    pub fem: Option<String>,
    #[arg(long = "fem-tau", global = true)]
    pub fem_tau: Option<f64>,
    #[arg(long = "fem-mode", global = true, value_parser = ["radial", "magnitude"])]
    pub fem_mode: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    pub agents: Option<usize>,
    #[arg(long, global = true, value_name = "D")]
    pub width: Option<usize>,
    #[arg(long, global = true, value_name = "H")]
    pub heads: Option<usize>,
    #[arg(long, global = true)]
    pub iters: Option<usize>,
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true, value_parser = ["f32", "f64"])]
    pub precision: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic shapes dataset
    GenData {
        #[arg(long)]
        count: Option<usize>,
        /// Also write this many held-out samples to <out>/eval
        #[arg(long = "eval-count")]
        eval_count: Option<usize>,
    },
    /// Train a model; writes checkpoint/, metrics.csv and effective.cfg
    Train,
    /// Evaluate a checkpoint on a dataset
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences at 64-bit
    Gradcheck {
        /// linear, maca, fem, head or full; repeat for several
        #[arg(long)]
        component: Vec<String>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Train every cell of an ablation grid over several seeds
    Ablate {
        #[arg(long, value_parser = ["table", "tau"])]
        grid: Option<String>,
        /// Comma-separated seed list
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Dump hi/lo log-magnitude spectra of every frequency stage as PGM
    ExportSpectra {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
        /// Channels exported per map
        #[arg(long)]
        channels: Option<usize>,
        /// Sample index within --data, or scene index when generating
        #[arg(long)]
        index: Option<usize>,
    },
    /// Run the invariant suites
    Verify {
        /// Restrict to the named suites
        #[arg(long)]
        suite: Vec<String>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train => "train",
            Command::Eval { .. } => "eval",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Ablate { .. } => "ablate",
            Command::ExportSpectra { .. } => "export-spectra",
            Command::Verify { .. } => "verify",
        }
    }
}

/// Keys recognised in config files besides the scene and training keys.
const EXTRA_KEYS: [&str; 14] = [
    "command",
    "data",
    "checkpoint",
    "count",
    "eval_count",
    "component",
    "trials",
    "eps",
    "grid",
    "seeds",
    "tau",
    "channels",
    "index",
    "suite",
];

/// Parse `argv` (program name first) and run; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

struct Invocation {
    kv: KeyValues,
    out: PathBuf,
}

impl Invocation {
    fn new(cli: &Cli) -> Result<Self> {
        let c = &cli.common;
        let mut kv = match &c.config {
            Some(p) => KeyValues::read(p)?,
            None => KeyValues::new(),
        };
        check_keys(&kv)?;
        kv.set("command", cli.command.name());
        if let Some(d) = &c.data {
            kv.set("data", d.display());
        }
        if let Some(s) = c.seed {
            match cli.command {
                Command::GenData { .. } => kv.set("seed", s),
                _ => {
                    kv.set("model_seed", s);
                    kv.set("train_seed", s);
                }
            }
        }
        let flags: [(&str, Option<String>); 11] = [
            ("attention", c.attention.clone()),
            ("fem", c.fem.clone()),
            ("fem_tau", c.fem_tau.map(|v| v.to_string())),
            ("fem_mode", c.fem_mode.clone()),
            ("agents", c.agents.map(|v| v.to_string())),
            ("width", c.width.map(|v| v.to_string())),
            ("heads", c.heads.map(|v| v.to_string())),
            ("iters", c.iters.map(|v| v.to_string())),
            ("batch", c.batch.map(|v| v.to_string())),
            ("lr", c.lr.map(|v| v.to_string())),
            ("precision", c.precision.clone()),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                kv.set(k, v);
            }
        }
        let out = c
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from("freqseg-out").join(cli.command.name()));
        Ok(Invocation { kv, out })
    }

    fn set_opt(&mut self, key: &str, v: Option<impl std::fmt::Display>) {
        if let Some(v) = v {
            self.kv.set(key, v);
        }
    }

    fn path(&self, key: &str) -> Result<PathBuf> {
        self.kv
            .get(key)
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config(format!("--{key} is required")))
    }

    fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        cfg.apply_kv(&self.kv)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Write the effective configuration to `<out>/effective.cfg`.
    fn echo(&self, resolved: &KeyValues) -> Result<()> {
        fs::create_dir_all(&self.out)?;
        let mut all = self.kv.clone();
        all.merge(resolved);
        all.write(&self.out.join(EFFECTIVE_CONFIG))
    }
}

fn check_keys(kv: &KeyValues) -> Result<()> {
    let mut known = SceneConfig::default().to_kv();
    known.merge(&TrainConfig::default().to_kv());
    for (k, _) in kv.iter() {
        if !known.contains(k) && !EXTRA_KEYS.contains(&k) {
            return Err(Error::Config(format!("unknown config key `{k}`")));
        }
    }
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    let mut inv = Invocation::new(cli)?;
    match &cli.command {
        Command::GenData { count, eval_count } => {
            inv.set_opt("count", *count);
            inv.set_opt("eval_count", *eval_count);
            gen_data(&inv)
        }
        Command::Train => run_train(&inv),
        Command::Eval { checkpoint } => {
            inv.set_opt("checkpoint", checkpoint.as_ref().map(|p| p.display()));
            run_eval(&inv)
        }
        Command::Gradcheck { component, trials, eps } => {
            if !component.is_empty() {
                inv.kv.set("component", component.join(","));
            }
            inv.set_opt("trials", *trials);
            inv.set_opt("eps", *eps);
            run_gradcheck(&inv)
        }
        Command::Ablate { grid, seeds } => {
            inv.set_opt("grid", grid.as_deref());
            inv.set_opt("seeds", seeds.as_deref());
            run_ablate(&inv)
        }
        Command::ExportSpectra {
            checkpoint,
            tau,
            channels,
            index,
        } => {
            inv.set_opt("checkpoint", checkpoint.as_ref().map(|p| p.display()));
            inv.set_opt("tau", *tau);
            inv.set_opt("channels", *channels);
            inv.set_opt("index", *index);
            export_spectra(&inv)
        }
        Command::Verify { suite } => {
            if !suite.is_empty() {
                inv.kv.set("suite", suite.join(","));
            }
            run_verify(&inv)
        }
    }
}

fn gen_data(inv: &Invocation) -> Result<()> {
    let mut scene = SceneConfig::default();
    scene.apply_kv(&inv.kv)?;
    scene.validate()?;
    let count = inv.kv.parse_or("count", 512usize)?;
    let eval_count = inv.kv.parse_or("eval_count", 0usize)?;
    if count == 0 {
        return Err(Error::Config("--count must be at least 1".into()));
    }
    write_dataset(&inv.out, &scene, count, 0)?;
    if eval_count > 0 {
        write_dataset(&inv.out.join("eval"), &scene, eval_count, count as u64)?;
    }
    let mut resolved = scene.to_kv();
    resolved.set("count", count);
    resolved.set("eval_count", eval_count);
    inv.echo(&resolved)?;
    println!("wrote {count} samples to {}", inv.out.display());
    if eval_count > 0 {
        println!("wrote {eval_count} held-out samples to {}", inv.out.join("eval").display());
    }
    Ok(())
}

/// Training set plus `<data>/eval` when present.
fn load_data(inv: &Invocation) -> Result<(Dataset, Option<Dataset>)> {
    let dir = inv.path("data")?;
    let train_set = read_dataset(&dir)?;
    let eval_dir = dir.join("eval");
    let eval_set = if eval_dir.join("manifest.txt").exists() {
        Some(read_dataset(&eval_dir)?)
    } else {
        None
    };
    Ok((train_set, eval_set))
}

/// Training config whose class count follows the dataset unless set explicitly.
fn config_for(inv: &Invocation, ds: &Dataset) -> Result<TrainConfig> {
    let mut cfg = inv.train_config()?;
    if !inv.kv.contains("classes") {
        cfg.model.num_classes = ds.num_classes;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_report(what: &str, r: &EvalReport) {
    println!(
        "{what}: pix_acc={:.4} miou={:.4} boundary_f={:.4}",
        r.pix_acc, r.miou, r.boundary_f
    );
}

fn run_train(inv: &Invocation) -> Result<()> {
    let (train_set, eval_set) = load_data(inv)?;
    let mut cfg = config_for(inv, &train_set)?;
    cfg.checkpoint_dir = Some(inv.out.join("checkpoint"));
    cfg.log_path = Some(inv.out.join("metrics.csv"));
    inv.echo(&cfg.to_kv())?;
    let (records, last) = match cfg.precision {
        Precision::F32 => {
            let o = train::<f32>(&cfg, &train_set, eval_set.as_ref())?;
            (o.log.records().len(), o.log.last().copied())
        }
        Precision::F64 => {
            let o = train::<f64>(&cfg, &train_set, eval_set.as_ref())?;
            (o.log.records().len(), o.log.last().copied())
        }
    };
    if let Some(r) = last {
        println!(
            "iter {}: loss={:.4} pix_acc={:.4} miou={:.4} boundary_f={:.4} ({:.1}s)",
            r.iter, r.loss, r.pix_acc, r.miou, r.boundary_f, r.seconds
        );
    }
    println!("{records} log records; checkpoint in {}", inv.out.join("checkpoint").display());
    Ok(())
}

fn eval_with<T: Scalar>(ckpt: &Path, ds: &Dataset) -> Result<EvalReport> {
    evaluate(&Model::<T>::load(ckpt)?, ds)
}

fn run_eval(inv: &Invocation) -> Result<()> {
    let ckpt = inv.path("checkpoint")?;
    let ds = read_dataset(&inv.path("data")?)?;
    let precision = inv.kv.parse_or("precision", Precision::F32)?;
    let r = match precision {
        Precision::F32 => eval_with::<f32>(&ckpt, &ds)?,
        Precision::F64 => eval_with::<f64>(&ckpt, &ds)?,
    };
    inv.echo(&KeyValues::new())?;
    let mut f = fs::File::create(inv.out.join("eval.csv"))?;
    writeln!(f, "pix_acc,miou,boundary_f")?;
    writeln!(f, "{},{},{}", r.pix_acc, r.miou, r.boundary_f)?;
    print_report(&format!("{} samples", ds.len()), &r);
    Ok(())
}

fn run_gradcheck(inv: &Invocation) -> Result<()> {
    let components: Vec<Component> = match inv.kv.get("component") {
        Some(list) => list.split(',').map(str::parse).collect::<Result<_>>()?,
        None => Component::ALL.to_vec(),
    };
    let trials = inv.kv.parse_or("trials", 20usize)?;
    let eps = inv.kv.parse_or("eps", crate::gradcheck::DEFAULT_EPS)?;
    let seed = inv.kv.parse_or("train_seed", 0u64)?;
    let mut lines = vec!["component,trials,coords,max_rel_err,worst".to_string()];
    let mut failed = Vec::new();
    for c in components {
        let rep = grad_check(c, trials, eps, seed)?;
        let limit = if c == Component::Linear { 1e-10 } else { DEFAULT_TOLERANCE };
        let ok = rep.max_rel_err < limit;
        println!("[{}] {rep}", if ok { "PASS" } else { "FAIL" });
        lines.push(format!("{},{},{},{:e},{}", c, rep.trials, rep.coords, rep.max_rel_err, rep.worst));
        if !ok {
            failed.push(format!("{c} at {} ({:.3e} >= {limit:e})", rep.worst, rep.max_rel_err));
        }
    }
    inv.echo(&KeyValues::new())?;
    fs::write(inv.out.join("gradcheck.csv"), lines.join("\n") + "\n")?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Tolerance(failed.join("; ")))
    }
}

fn run_ablate(inv: &Invocation) -> Result<()> {
    let (train_set, eval_set) = load_data(inv)?;
    let base = config_for(inv, &train_set)?;
    let mut grid = match inv.kv.get("grid").unwrap_or("table") {
        "table" => AblationGrid::table(),
        "tau" => AblationGrid::tau_sweep(),
        other => return Err(Error::Config(format!("grid must be table or tau, got `{other}`"))),
    };
    if let Some(s) = inv.kv.get("seeds") {
        grid.seeds = s
            .split(',')
            .map(|x| x.trim().parse::<u64>().map_err(|e| Error::Config(format!("seeds `{s}`: {e}"))))
            .collect::<Result<_>>()?;
    }
    inv.echo(&base.to_kv())?;
    let results = match base.precision {
        Precision::F32 => ablate::<f32>(&base, &grid, &train_set, eval_set.as_ref(), Some(&inv.out))?,
        Precision::F64 => ablate::<f64>(&base, &grid, &train_set, eval_set.as_ref(), Some(&inv.out))?,
    };
    print!("{}", ablation_csv(&results));
    let failures: usize = results.iter().map(|c| c.failures()).sum();
    if failures > 0 {
        for c in &results {
            for e in c.runs.iter().filter_map(|r| r.as_ref().err()) {
                eprintln!("{}: {e}", c.cell);
            }
        }
        return Err(Error::Data(format!("{failures} ablation runs failed")));
    }
    Ok(())
}

fn first_channels<T: Scalar>(z: &ComplexTensor<T>, n: usize) -> Result<ComplexTensor<T>> {
    let (h, w, c) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    let n = n.min(c);
    let pick = |t: &Tensor<T>| Tensor::from_fn([h, w, n], |i| t.data()[(i / n) * c + i % n]);
    ComplexTensor::new(pick(&z.re), pick(&z.im))
}

fn export_spectra(inv: &Invocation) -> Result<()> {
    let tau = match inv.kv.parse_opt::<f64>("tau")? {
        Some(t) => t,
        None => inv.kv.parse_or("fem_tau", 0.5)?,
    };
    crate::spectral::check_tau(tau)?;
    let channels = inv.kv.parse_or("channels", 4usize)?;
    let index = inv.kv.parse_or("index", 0usize)?;
    let image = match inv.kv.get("data") {
        Some(d) => {
            let ds = read_dataset(Path::new(d))?;
            ds.samples
                .get(index)
                .ok_or_else(|| Error::Data(format!("sample {index} outside dataset of {}", ds.len())))?
                .image
                .clone()
        }
        None => {
            let mut scene = SceneConfig::default();
            scene.apply_kv(&inv.kv)?;
            crate::data::generate_scene(&scene, index as u64)?.image
        }
    };
    let model = match inv.kv.get("checkpoint") {
        Some(p) => Model::<f64>::load(Path::new(p))?,
        None => {
            let mut cfg = inv.train_config()?;
            if let Some(d) = inv.kv.get("data") {
                cfg.model.num_classes = read_manifest(Path::new(d))?.parse_or("K", cfg.model.num_classes)?;
            }
            Model::<f64>::new(cfg.model)?
        }
    };
    let mut resolved = model.cfg.to_kv();
    resolved.set("tau", tau);
    inv.echo(&resolved)?;
    let mut g = Graph::<f64>::new();
    let bound = model.bind(&mut g)?;
    let x = g.constant(image.cast())?;
    let pyramid = model.encoder_forward(&mut g, &bound, x)?;
    let inputs = fem_stage_inputs(&mut g, &pyramid.e, &model.fem_params(&bound))?;
    let mut maps = vec![(1, inputs[0].e1)];
    maps.extend(inputs.iter().map(|i| (i.stage, i.ei)));
    let mut written = 0;
    for (stage, v) in maps {
        let bands = split_bands(&dfft2(g.value(v))?, tau, model.cfg.fem.mode)?;
        for (name, z) in [("hi", &bands.hi), ("lo", &bands.lo)] {
            let tag = format!("e{stage}_{name}");
            written += export_log_magnitude(&inv.out, &tag, &first_channels(z, channels)?)?.len();
        }
    }
    println!("wrote {written} PGM files to {}", inv.out.display());
    Ok(())
}

fn run_verify(inv: &Invocation) -> Result<()> {
    let names: Vec<String> = match inv.kv.get("suite") {
        Some(s) => s.split(',').map(str::to_string).collect(),
        None => verify::SUITES.iter().map(|s| s.to_string()).collect(),
    };
    let mut checks = Vec::new();
    for n in &names {
        let t = std::time::Instant::now();
        let suite = verify::run_suite(n).ok_or_else(|| {
            Error::Config(format!("unknown suite `{n}`; expected one of {}", verify::SUITES.join(", ")))
        })?;
        for c in &suite {
            println!("{c}");
        }
        println!("-- {n}: {:.1}s", t.elapsed().as_secs_f64());
        checks.extend(suite);
    }
    inv.echo(&KeyValues::new())?;
    let report: Vec<String> = checks.iter().map(ToString::to_string).collect();
    fs::write(inv.out.join("verify.txt"), report.join("\n") + "\n")?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", checks.len());
    if failed > 0 {
        Err(Error::Tolerance(format!("{failed} invariant checks failed")))
    } else {
        Ok(())
    }
}
