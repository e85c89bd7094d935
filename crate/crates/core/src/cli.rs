//! Command-line driver: dataset generation, regulated training, direction
//! discovery, certification, measurement protocols and reports.
//!
//! Exit codes: 0 success, 1 some certificate was falsified, 2 configuration
//! error, 3 runtime error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::certify::{self, CertificateReport, Verdict};
use crate::directions::{self, DirectionBasis, MutationSpec, RankPolicy, RegionMask};
use crate::error::Error;
use crate::metrics::{self, CostRecord};
use crate::network::{compose, Network};
use crate::regulate::{self, LatentPrior, TrainConfig, TrainingSet};
use crate::segprop::{propagate_segment, Segment};
use crate::synthetic::{self, LatentCodec, ParamRanges, PerFamily, ProtocolConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FALSIFIED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "latcert", version, about = "Latent-segment robustness certification toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON configuration file for the subcommand.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the configuration's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for batch work.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic square dataset.
    GenSynthetic(Common),
    /// Train a generator with the continuity regulation term.
    Train(Common),
    /// Discover mutation directions from generator Jacobians.
    Directions(Common),
    /// Certify a classifier over latent mutation segments.
    Certify(Common),
    /// Run the independence and continuity measurement protocols.
    Protocols(Common),
    /// Pixel bounds, average pixel difference and propagation cost reports.
    Report(Common),
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(e) => write!(f, "runtime error: {e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Config hash, seed and tool version attached to every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_sha256: String,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub subcommand: String,
}

impl Provenance {
    fn csv_header(&self) -> String {
        format!(
            "# subcommand={} config_sha256={} seed={} tool_version={}\n",
            self.subcommand,
            self.config_sha256,
            self.seed.map_or("none".to_string(), |s| s.to_string()),
            self.tool_version
        )
    }
}

#[derive(Serialize)]
struct WithProvenance<'a, T: Serialize> {
    provenance: &'a Provenance,
    #[serde(flatten)]
    body: &'a T,
}

struct Ctx {
    out: PathBuf,
    provenance: Provenance,
    base_dir: PathBuf,
}

impl Ctx {
    fn write_json<T: Serialize>(&self, name: &str, body: &T) -> CliResult<()> {
        let text = serde_json::to_string_pretty(&WithProvenance {
            provenance: &self.provenance,
            body,
        })
        .map_err(Error::from)?;
        std::fs::write(self.out.join(name), text + "\n").map_err(Error::from)?;
        Ok(())
    }

    fn write_csv(&self, name: &str, body: &str) -> CliResult<()> {
        std::fs::write(self.out.join(name), self.provenance.csv_header() + body).map_err(Error::from)?;
        Ok(())
    }

    /// Wall-clock measurements live apart from the reproducible outputs.
    fn write_timings(&self, body: &str) -> CliResult<()> {
        std::fs::write(self.out.join("timings.csv"), body).map_err(Error::from)?;
        Ok(())
    }

    fn resolve(&self, p: &Path) -> CliResult<PathBuf> {
        let full = if p.is_absolute() { p.to_path_buf() } else { self.base_dir.join(p) };
        if !full.exists() {
            return Err(CliError::Config(format!("referenced file {} does not exist", full.display())));
        }
        Ok(full)
    }

    fn load_network(&self, p: &Path) -> CliResult<Network> {
        let full = self.resolve(p)?;
        Network::load(&full).map_err(|e| CliError::Config(format!("cannot load network {}: {e}", full.display())))
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<(T, String, PathBuf)> {
    match path {
        None => Ok((T::default(), String::new(), PathBuf::from("."))),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
            let cfg = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("invalid config {}: {e}", p.display())))?;
            let dir = p.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
            let dir = if dir.as_os_str().is_empty() { PathBuf::from(".") } else { dir };
            Ok((cfg, text, dir))
        }
    }
}

fn setup<T: DeserializeOwned + Default>(
    name: &str,
    common: &Common,
    config_seed: impl Fn(&T) -> Option<u64>,
    needs_seed: bool,
) -> CliResult<(T, Ctx, Option<u64>)> {
    let (cfg, text, base_dir) = load_config::<T>(common.config.as_deref())?;
    let seed = common.seed.or_else(|| config_seed(&cfg));
    if needs_seed && seed.is_none() {
        return Err(CliError::Config(format!("{name} is stochastic and needs --seed or a config seed")));
    }
    if common.jobs == 0 {
        return Err(CliError::Config("--jobs must be at least 1".into()));
    }
    std::fs::create_dir_all(&common.out).map_err(Error::from)?;
    let provenance = Provenance {
        config_sha256: hex::encode(Sha256::digest(text.as_bytes())),
        seed,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        subcommand: name.to_string(),
    };
    let ctx = Ctx {
        out: common.out.clone(),
        provenance,
        base_dir,
    };
    ctx.write_json("provenance.json", &serde_json::json!({}))?;
    Ok((cfg, ctx, seed))
}

// ---------------------------------------------------------------------------
// gen-synthetic

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub ranges: ParamRanges,
    pub seed: Option<u64>,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            count: 10_000,
            height: synthetic::DEFAULT_SIZE,
            width: synthetic::DEFAULT_SIZE,
            ranges: ParamRanges::default(),
            seed: None,
        }
    }
}

fn cmd_gen_synthetic(common: &Common) -> CliResult<i32> {
    let (cfg, ctx, seed) = setup::<GenConfig>("gen-synthetic", common, |c| c.seed, true)?;
    cfg.ranges.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let ds = synthetic::gen_dataset(cfg.count, &cfg.ranges, seed.unwrap(), cfg.height, cfg.width)?;
    ds.save(ctx.out.join("dataset.json"))?;
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainCliConfig {
    /// Dataset manifest written by `gen-synthetic`.
    pub dataset: PathBuf,
    pub hidden: Vec<usize>,
    pub nuisance: usize,
    pub ranges: ParamRanges,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub triplets_per_batch: usize,
    pub loss_weight: f64,
    pub prior: LatentPrior,
    /// Pairs used to estimate the continuity constant after training.
    pub c_samples: usize,
    pub c_steps: usize,
    pub seed: Option<u64>,
}

impl Default for TrainCliConfig {
    fn default() -> Self {
        TrainCliConfig {
            dataset: PathBuf::from("dataset.json"),
            hidden: vec![64, 256],
            nuisance: 0,
            ranges: ParamRanges::default(),
            epochs: 40,
            lr: 0.5,
            momentum: 0.9,
            batch_size: 32,
            triplets_per_batch: 8,
            loss_weight: 0.002,
            prior: LatentPrior::default(),
            c_samples: 200,
            c_steps: 64,
            seed: None,
        }
    }
}

fn cmd_train(common: &Common) -> CliResult<i32> {
    let (cfg, ctx, seed) = setup::<TrainCliConfig>("train", common, |c| c.seed, true)?;
    let seed = seed.unwrap();
    let ds = synthetic::Dataset::load(ctx.resolve(&cfg.dataset)?)?;
    let codec = LatentCodec::new(cfg.ranges, cfg.nuisance).map_err(|e| CliError::Config(e.to_string()))?;
    let data = TrainingSet::new(ds.latents(&codec, seed), ds.images.clone())?;
    let g0 = synthetic::generator_network(codec.latent_dim(), &cfg.hidden, ds.height * ds.width, seed);
    let train = TrainConfig {
        epochs: cfg.epochs,
        lr: cfg.lr,
        seed,
        loss_weight: cfg.loss_weight,
        batch_size: cfg.batch_size,
        triplets_per_batch: cfg.triplets_per_batch,
        momentum: cfg.momentum,
        prior: cfg.prior,
        form: regulate::ContinuityForm::Convex,
    };
    let started = Instant::now();
    let outcome = regulate::regulate_train(&g0, &data, &train)?;
    let train_ms = started.elapsed().as_secs_f64() * 1e3;
    outcome.network.save(ctx.out.join("generator.json"))?;
    let mut hist = String::from("epoch,L1,L2\n");
    for r in &outcome.history {
        writeln!(hist, "{},{},{}", r.epoch, r.l1, r.l2).unwrap();
    }
    ctx.write_csv("history.csv", &hist)?;
    let estimate = regulate::estimate_c(&outcome.network, &cfg.prior, cfg.c_samples.max(2), seed, cfg.c_steps.max(1))?;
    ctx.write_json("continuity.json", &estimate)?;
    ctx.write_json("codec.json", &codec)?;
    ctx.write_timings(&format!("stage,ms\ntrain,{train_ms}\n"))?;
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// directions

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DirectionsConfig {
    pub generator: PathBuf,
    /// Latent points at which to factor the Jacobian.
    pub points: Vec<Vec<f64>>,
    pub relative_threshold: f64,
    pub max_rank: Option<usize>,
    pub delta_max: f64,
    /// Output coordinates of a local region; global directions if absent.
    pub mask: Option<Vec<usize>>,
}

impl Default for DirectionsConfig {
    fn default() -> Self {
        DirectionsConfig {
            generator: PathBuf::from("generator.json"),
            points: Vec::new(),
            relative_threshold: 1e-3,
            max_rank: None,
            delta_max: 0.5,
            mask: None,
        }
    }
}

#[derive(Serialize)]
struct DirectionsOutput {
    bases: Vec<DirectionBasis>,
    specs: Vec<Vec<MutationSpec>>,
}

fn cmd_directions(common: &Common) -> CliResult<i32> {
    let (cfg, ctx, _) = setup::<DirectionsConfig>("directions", common, |_| None, false)?;
    let g = ctx.load_network(&cfg.generator)?;
    let points: Vec<DVector<f64>> = if cfg.points.is_empty() {
        vec![DVector::zeros(g.input_dim)]
    } else {
        cfg.points.iter().map(|p| DVector::from_column_slice(p)).collect()
    };
    if let Some(p) = points.iter().find(|p| p.len() != g.input_dim) {
        return Err(CliError::Config(format!("latent point has {} entries, generator expects {}", p.len(), g.input_dim)));
    }
    let policy = RankPolicy {
        relative: cfg.relative_threshold,
        max_rank: cfg.max_rank,
    };
    let mut out = DirectionsOutput {
        bases: Vec::new(),
        specs: Vec::new(),
    };
    for z in &points {
        let basis = directions::mutation_directions(&g, z, policy)?;
        let specs = match &cfg.mask {
            None => directions::global_specs(&basis, cfg.delta_max)?,
            Some(mask) => {
                let mask = RegionMask::new(mask.iter().copied(), g.output_dim)?;
                directions::local_directions(&g, z, &mask, policy, cfg.delta_max)?
            }
        };
        out.bases.push(basis);
        out.specs.push(specs);
    }
    ctx.write_json("directions.json", &out)?;
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// certify

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CertifyMode {
    #[default]
    Complete,
    Incomplete,
    Quant,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifyItem {
    pub id: String,
    pub z: Vec<f64>,
    pub spec: MutationSpec,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertifyConfig {
    /// Classifier `f`; composed after `generator` when one is given.
    pub classifier: PathBuf,
    pub generator: Option<PathBuf>,
    pub mode: CertifyMode,
    pub threshold: Option<f64>,
    pub items: Vec<CertifyItem>,
}

#[derive(Serialize)]
struct CertifyRecord {
    id: String,
    label: String,
    report: CertificateReport,
}

fn cmd_certify(common: &Common) -> CliResult<i32> {
    let (cfg, ctx, _) = setup::<CertifyConfig>("certify", common, |_| None, false)?;
    if common.config.is_none() {
        return Err(CliError::Config("certify needs --config".into()));
    }
    let f = ctx.load_network(&cfg.classifier)?;
    let net = match &cfg.generator {
        Some(p) => compose(&ctx.load_network(p)?, &f).map_err(|e| CliError::Config(e.to_string()))?,
        None => f,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(common.jobs)
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let threshold = cfg.threshold.unwrap_or(0.5);
    let results: Vec<Result<CertificateReport, Error>> = pool.install(|| {
        use rayon::prelude::*;
        cfg.items
            .par_iter()
            .map(|item| {
                let z = DVector::from_column_slice(&item.z);
                match cfg.mode {
                    CertifyMode::Complete => certify::certify_complete(&net, &item.spec, &z),
                    CertifyMode::Incomplete => certify::certify_incomplete(&net, &item.spec, &z),
                    CertifyMode::Quant => certify::certify_quantitative(&net, &item.spec, &z, threshold),
                }
            })
            .collect()
    });
    let mut records = Vec::with_capacity(results.len());
    let mut csv = String::from("id,mutation,verdict,max_tolerance,lower,upper,pieces\n");
    let mut timings = String::from("id,ms\n");
    let mut falsified = false;
    for (item, res) in cfg.items.iter().zip(results) {
        let mut report = res?;
        falsified |= report.verdict == Verdict::Falsified;
        let (lo, hi) = report
            .quant
            .as_ref()
            .map_or((String::new(), String::new()), |q| (q.lower.to_string(), q.upper.to_string()));
        writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            item.id,
            item.spec.label,
            report.verdict.as_str(),
            report.max_tolerance,
            lo,
            hi,
            report.instrumentation.final_pieces
        )
        .unwrap();
        writeln!(timings, "{},{}", item.id, report.instrumentation.wall_ms).unwrap();
        report.instrumentation.wall_ms = 0.0;
        records.push(CertifyRecord {
            id: item.id.clone(),
            label: item.spec.label.clone(),
            report,
        });
    }
    ctx.write_json("reports.json", &serde_json::json!({ "reports": records }))?;
    ctx.write_csv("results.csv", &csv)?;
    ctx.write_timings(&timings)?;
    Ok(if falsified { EXIT_FALSIFIED } else { EXIT_OK })
}

// ---------------------------------------------------------------------------
// protocols

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolsConfig {
    pub generator: PathBuf,
    pub ranges: ParamRanges,
    pub nuisance: usize,
    pub height: usize,
    pub width: usize,
    /// Latent point where directions are discovered; the origin if absent.
    pub reference: Option<Vec<f64>>,
    pub relative_threshold: f64,
    pub max_rank: Option<usize>,
    pub protocol: ProtocolConfig,
    pub seed: Option<u64>,
}

impl Default for ProtocolsConfig {
    fn default() -> Self {
        ProtocolsConfig {
            generator: PathBuf::from("generator.json"),
            ranges: ParamRanges::default(),
            nuisance: 0,
            height: synthetic::DEFAULT_SIZE,
            width: synthetic::DEFAULT_SIZE,
            reference: None,
            relative_threshold: 1e-3,
            max_rank: None,
            protocol: ProtocolConfig::default(),
            seed: None,
        }
    }
}

fn cmd_protocols(common: &Common) -> CliResult<i32> {
    let (mut cfg, ctx, seed) = setup::<ProtocolsConfig>("protocols", common, |c| c.seed, true)?;
    cfg.protocol.seed = seed.unwrap();
    let g = ctx.load_network(&cfg.generator)?;
    let codec = LatentCodec::new(cfg.ranges, cfg.nuisance).map_err(|e| CliError::Config(e.to_string()))?;
    if codec.latent_dim() != g.input_dim {
        return Err(CliError::Config(format!(
            "codec has {} latent dimensions, generator expects {}",
            codec.latent_dim(),
            g.input_dim
        )));
    }
    let gen = synthetic::NetworkGenerator::new(&g, cfg.height, cfg.width).map_err(|e| CliError::Config(e.to_string()))?;
    let reference = cfg
        .reference
        .as_ref()
        .map(|r| DVector::from_column_slice(r))
        .unwrap_or_else(|| DVector::zeros(g.input_dim));
    let policy = RankPolicy {
        relative: cfg.relative_threshold,
        max_rank: cfg.max_rank,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(common.jobs)
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let (labels, table, rows) = pool.install(|| -> CliResult<_> {
        let basis = directions::mutation_directions(&g, &reference, policy)?;
        let labels = synthetic::label_directions(&gen, &basis, &reference, &cfg.protocol)?;
        let labeled: Vec<_> = labels.iter().filter(|d| d.label.is_some()).cloned().collect();
        let bases = synthetic::base_points(&codec, &cfg.protocol);
        let table = synthetic::check_independence(&gen, &labeled, &bases, &cfg.protocol)?;
        let mut rows = Vec::new();
        for deltas in [PerFamily::delta_1(), PerFamily::delta_2()] {
            rows.push(synthetic::continuity_row(&gen, &codec, &deltas, &cfg.protocol)?);
        }
        Ok((labels, table, rows))
    })?;
    ctx.write_json("labels.json", &serde_json::json!({ "directions": labels }))?;
    ctx.write_csv("independence.csv", &table.to_csv())?;
    let mut csv = String::from("delta,translation,rotation,scaling,shearing\n");
    for (name, row) in ["delta_1", "delta_2"].iter().zip(&rows) {
        csv.push_str(name);
        for r in row {
            write!(csv, ",{}", r.pass_ratio()).unwrap();
        }
        csv.push('\n');
    }
    ctx.write_csv("continuity.csv", &csv)?;
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// report

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsRequest {
    pub network: PathBuf,
    pub z: Vec<f64>,
    pub spec: MutationSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostRequest {
    pub widths: Vec<usize>,
    pub depth: usize,
    pub input_dim: usize,
    pub runs: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub bounds: Option<BoundsRequest>,
    /// Pairs of flattened images.
    pub apd: Vec<(Vec<f64>, Vec<f64>)>,
    pub cost: Option<CostRequest>,
    pub seed: Option<u64>,
}

fn cmd_report(common: &Common) -> CliResult<i32> {
    let (cfg, ctx, seed) = setup::<ReportConfig>("report", common, |c| c.seed, false)?;
    if cfg.cost.is_some() && seed.is_none() {
        return Err(CliError::Config("cost report samples random networks and needs a seed".into()));
    }
    let mut timings = String::from("stage,ms\n");
    if let Some(b) = &cfg.bounds {
        let net = ctx.load_network(&b.network)?;
        let z = DVector::from_column_slice(&b.z);
        let prop = propagate_segment(&net, &b.spec.segment(&z)?)?;
        writeln!(timings, "bounds,{}", prop.stats.wall_ms).unwrap();
        ctx.write_json("bounds.json", &metrics::pixel_bounds(&prop.chain))?;
    }
    if !cfg.apd.is_empty() {
        let values = cfg
            .apd
            .iter()
            .map(|(a, b)| metrics::apd(a, b))
            .collect::<Result<Vec<_>, _>>()?;
        ctx.write_json("apd.json", &serde_json::json!({ "apd": values }))?;
    }
    if let Some(c) = &cfg.cost {
        let mut records = Vec::new();
        for &w in &c.widths {
            for run in 0..c.runs {
                let mut widths = vec![c.input_dim];
                widths.extend(std::iter::repeat_n(w, c.depth));
                widths.push(1);
                let run_seed = seed.unwrap() ^ ((w as u64) << 32) ^ run as u64;
                let net = Network::random("cost", &widths, run_seed);
                let seg = Segment::new(DVector::from_element(c.input_dim, -1.0), DVector::from_element(c.input_dim, 1.0))?;
                let mut stats = propagate_segment(&net, &seg)?.stats;
                writeln!(timings, "cost_w{w}_r{run},{}", stats.wall_ms).unwrap();
                stats.wall_ms = 0.0;
                records.push(CostRecord {
                    width: w,
                    depth: c.depth,
                    stats,
                });
            }
        }
        let mut report = metrics::cost_report(&records)?;
        report.total_ms = 0.0;
        ctx.write_json("cost.json", &report)?;
    }
    ctx.write_timings(&timings)?;
    Ok(EXIT_OK)
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::GenSynthetic(c) => cmd_gen_synthetic(c),
        Command::Train(c) => cmd_train(c),
        Command::Directions(c) => cmd_directions(c),
        Command::Certify(c) => cmd_certify(c),
        Command::Protocols(c) => cmd_protocols(c),
        Command::Report(c) => cmd_report(c),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("latcert: {e}");
            match e {
                CliError::Config(_) => EXIT_CONFIG,
                CliError::Runtime(_) => EXIT_RUNTIME,
            }
        }
    }
}
