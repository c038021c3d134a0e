//! Command-line surface. [`run`] executes a parsed [`Cli`] and writes the
//! human-readable report to the given writer; artifacts go under `--out`.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use quadranet_core::blocks::BlockSpec;
use quadranet_core::costmodel::{block_report, network_report, Coefficients, CostReport};
use quadranet_core::data::gen_xor;
use quadranet_core::gradcheck;
use quadranet_core::nas::{self, CachedEvaluator, Candidate, SearchSpace, TrainEvaluator};
use quadranet_core::network::{Network, NetworkSpec};
use quadranet_core::quadneuron::{train_xor, NeuronKind, TrainedNeuron, XorConfig};
use quadranet_core::train::{evaluate, fit, metrics_csv, ClipMode};
use serde::Serialize;

use crate::config::{default_network, read_json, ConfigFile};
use crate::error::{AppError, Result, EXIT_CHECK_FAILED, EXIT_OK};
use crate::parallel::{thread_count, ParallelEvaluator};
use crate::snapshot;

/// Defaults of every config key. `config_help_matches_defaults` keeps this in sync.
pub const CONFIG_HELP: &str = r#"Config file (JSON). Every section and key is optional; unknown keys are rejected.
Defaults:
{
  "network": null,
  "train": {"kind": "adamw", "lr": 0.002, "betas": [0.9, 0.999], "eps": 1e-8,
            "weight_decay": 0.05, "grad_clip_value": 5.0, "clip_mode": "value",
            "epochs": 30, "batch_size": 32, "warmup_steps": 0, "seed": 0},
  "search": {"budget": null, "population": 16, "sample": 4, "generations": 30, "seed": 0,
             "steps": 100, "slots": [1, 1, 1, 1],
             "coefficients": {"alpha": 1.0, "beta": 2.0, "gamma": 10000.0}},
  "data": {"kind": "interaction", "n": 2500, "size": 32, "classes": 4, "seed": 0,
           "val_stride": 5, "noise": 0.05, "min_amplitude": 0.5, "max_amplitude": 1.0}
}
A null network means base width 8, one Quadra(k=7, R=4) block per stage, sized to the data.
"data" may instead be {"kind": "idx", "train_images": PATH, "train_labels": PATH,
"val_images": PATH, "val_labels": PATH, "num_classes": N?}; relative paths resolve
against the config file's directory. A null budget means unbounded."#;

#[derive(Debug, Parser)]
#[command(name = "quadranet", version, about = "Quadratic-neuron networks: training, cost model and architecture search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a quadratic and a linear neuron on generalized XOR; emit a decision-surface grid.
    Xor(XorArgs),
    /// Parameter, MAC, state and proxy-latency report for a network or the block comparison.
    Count(CountArgs),
    /// Train a network; writes metrics.csv and model.qnet.
    #[command(after_long_help = CONFIG_HELP)]
    Train(TrainArgs),
    /// Evaluate a weight snapshot on the validation split of a config's data.
    #[command(after_long_help = CONFIG_HELP)]
    Eval(EvalArgs),
    /// Latency-constrained evolutionary architecture search; writes search.json.
    #[command(after_long_help = CONFIG_HELP)]
    Search(SearchArgs),
    /// Finite-difference gradient checks of every op and the full block.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct XorArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Full-batch gradient steps.
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    /// Points per quadrant.
    #[arg(long, default_value_t = 25)]
    pub points: usize,
    /// Coordinates are drawn from (0, spread] in magnitude; the grid spans [-spread, spread]².
    #[arg(long, default_value_t = 1.0)]
    pub spread: f64,
    /// Grid points per axis.
    #[arg(long, default_value_t = 41)]
    pub resolution: usize,
    /// Also write xor_quadratic.csv and xor_linear.csv here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    /// Named preset (quadranet36-t, quadranet25-s, ...). Default when no --spec is given: quadranet36-t.
    #[arg(long, conflicts_with = "spec")]
    pub preset: Option<String>,
    /// NetworkSpec JSON file.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Input side length; overrides the spec. With --compare it is the map side (default 14).
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    /// Show states in bytes (f64) instead of elements.
    #[arg(long)]
    pub bytes: bool,
    /// Emit the Skip/Conv/Quadra/attention block comparison instead of a network report.
    #[arg(long)]
    pub compare: bool,
    /// Channels of the --compare map.
    #[arg(long, default_value_t = 64)]
    pub channels: usize,
    /// Kernel of the conv blocks and window of the attention block in --compare.
    #[arg(long, default_value_t = 7)]
    pub kernel: usize,
    /// Make every quadratic block's first pointwise conv quadratic.
    #[arg(long)]
    pub quadratic_pointwise: bool,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides train.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides train.epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides train.clip_mode.
    #[arg(long, value_enum)]
    pub clip_mode: Option<ClipArg>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub snapshot: PathBuf,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides search.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides search.budget.
    #[arg(long)]
    pub budget: Option<f64>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// First seed; seeds seed..seed+seeds are checked.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ClipArg {
    Value,
    Norm,
}

impl From<ClipArg> for ClipMode {
    fn from(c: ClipArg) -> Self {
        match c {
            ClipArg::Value => ClipMode::Value,
            ClipArg::Norm => ClipMode::Norm,
        }
    }
}

/// Runs a command; the returned code is 0 on success or 1 for a failed check.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<i32> {
    match cli.command {
        Command::Xor(a) => cmd_xor(&a, out),
        Command::Count(a) => cmd_count(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Search(a) => cmd_search(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| AppError::io("<stdout>", e))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| AppError::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))
}

/// `x,y,value` rows over `[-spread, spread]²`, x varying fastest.
pub fn decision_grid(neuron: &TrainedNeuron, spread: f64, resolution: usize, header: &[String]) -> Result<String> {
    let mut s = String::new();
    for h in header {
        let _ = writeln!(s, "# {h}");
    }
    s.push_str("x,y,value\n");
    let at = |i: usize| {
        if resolution == 1 {
            0.0
        } else {
            -spread + 2.0 * spread * i as f64 / (resolution - 1) as f64
        }
    };
    for j in 0..resolution {
        for i in 0..resolution {
            let (x, y) = (at(i), at(j));
            let _ = writeln!(s, "{x},{y},{}", neuron.forward(&[x, y])?);
        }
    }
    Ok(s)
}

pub fn cmd_xor(a: &XorArgs, out: &mut dyn Write) -> Result<i32> {
    if a.resolution == 0 {
        return Err(AppError::Usage(String::from("--resolution must be at least 1")));
    }
    let data = gen_xor(a.points, a.spread, a.seed)?;
    let cfg = XorConfig {
        steps: a.steps,
        lr: a.lr,
        seed: a.seed,
    };
    let (quad, quad_acc) = train_xor(NeuronKind::LowRank, &data, cfg)?;
    let (lin, lin_acc) = train_xor(NeuronKind::Linear, &data, cfg)?;
    let header = vec![
        format!("seed={}", a.seed),
        format!("steps={} lr={} points_per_quadrant={} spread={}", a.steps, a.lr, a.points, a.spread),
        format!("quadratic_acc={quad_acc}"),
        format!("linear_acc={lin_acc}"),
    ];
    let grid = decision_grid(&quad, a.spread, a.resolution, &header)?;
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_file(&dir.join("xor_quadratic.csv"), grid.as_bytes())?;
        let lin_grid = decision_grid(&lin, a.spread, a.resolution, &header)?;
        write_file(&dir.join("xor_linear.csv"), lin_grid.as_bytes())?;
    }
    emit(out, &grid)?;
    Ok(if quad_acc == 1.0 && lin_acc < 1.0 { EXIT_OK } else { EXIT_CHECK_FAILED })
}

/// One row of the block comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub block: String,
    pub report: CostReport,
}

/// Skip, Conv, Quadra and windowed attention blocks at one `(1, C, H, H)` map.
pub fn compare_blocks(size: usize, channels: usize, kernel: usize, coefficients: Coefficients) -> Result<Vec<CompareRow>> {
    let blocks = [
        ("skip", BlockSpec::Skip { expansion: 4 }),
        ("conv", BlockSpec::Conv { kernel, expansion: 4 }),
        ("quadra", BlockSpec::quadra(kernel, 4)),
        ("window_attention", BlockSpec::WindowAttention { window: kernel, expansion: 4 }),
    ];
    blocks
        .iter()
        .map(|(name, b)| {
            Ok(CompareRow {
                block: String::from(*name),
                report: block_report(b, [1, channels, size, size], coefficients)?,
            })
        })
        .collect()
}

fn compare_table(rows: &[CompareRow], size: usize, channels: usize, bytes: bool) -> String {
    let unit = if bytes { 8 } else { 1 };
    let st = if bytes { "bytes" } else { "elems" };
    let mut s = String::new();
    let _ = writeln!(s, "# map {size}x{size}x{channels}, batch 1");
    let _ = writeln!(
        s,
        "{:<18} {:>10} {:>14} {:>14} {:>14} {:>6} {:>16}",
        "block",
        "params",
        "macs",
        format!("fwd_{st}"),
        format!("bwd_{st}"),
        "depth",
        "proxy_latency"
    );
    for r in rows {
        let p = &r.report;
        let _ = writeln!(
            s,
            "{:<18} {:>10} {:>14} {:>14} {:>14} {:>6} {:>16}",
            r.block,
            p.params,
            p.macs,
            p.fwd_states * unit,
            p.bwd_retained_states * unit,
            p.serial_depth,
            p.proxy_latency
        );
    }
    s
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

pub fn cmd_count(a: &CountArgs, out: &mut dyn Write) -> Result<i32> {
    let coefficients = Coefficients::default();
    let text = if a.compare {
        let size = a.input_size.unwrap_or(14);
        let rows = compare_blocks(size, a.channels, a.kernel, coefficients)?;
        if a.json {
            to_json(&rows)
        } else {
            compare_table(&rows, size, a.channels, a.bytes)
        }
    } else {
        let mut spec = match &a.spec {
            Some(p) => read_json::<NetworkSpec>(p)?,
            None => NetworkSpec::preset(a.preset.as_deref().unwrap_or("quadranet36-t"))?,
        };
        if let Some(s) = a.input_size {
            spec.input_size = s;
        }
        if a.quadratic_pointwise {
            spec = spec.with_quadratic_pointwise();
        }
        let report = network_report(&spec, a.batch, coefficients)?;
        if a.json {
            to_json(&report)
        } else {
            format!("# input {0}x{0}x{1}, batch {2}\n{3}", spec.input_size, spec.in_channels, a.batch, report.to_table(a.bytes))
        }
    };
    emit(out, &text)?;
    Ok(EXIT_OK)
}

/// Reads the config (or defaults) and the directory relative paths resolve against.
fn load_config(path: Option<&Path>) -> Result<(ConfigFile, PathBuf)> {
    match path {
        Some(p) => {
            let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
            Ok((read_json(p)?, base))
        }
        None => Ok((ConfigFile::default(), PathBuf::new())),
    }
}

fn network_for(cfg: &ConfigFile, train: &quadranet_core::data::LabeledDataset) -> Result<NetworkSpec> {
    let s = train.inputs.shape();
    let (in_channels, size) = (s[1], s[2]);
    let spec = match &cfg.network {
        Some(n) => n.clone(),
        None => default_network(in_channels, train.num_classes, size),
    };
    if spec.in_channels != in_channels || spec.input_size != size || s[3] != size {
        return Err(AppError::Usage(format!(
            "network expects {}x{}x{} inputs but the data is {}x{}x{}",
            spec.in_channels, spec.input_size, spec.input_size, in_channels, s[2], s[3]
        )));
    }
    if spec.num_classes < train.num_classes {
        return Err(AppError::Usage(format!(
            "network has {} classes but the data has {}",
            spec.num_classes, train.num_classes
        )));
    }
    Ok(spec)
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let (mut cfg, base) = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(c) = a.clip_mode {
        cfg.train.clip_mode = c.into();
    }
    cfg.train.validate()?;
    let (train, val) = cfg.data.load(&base)?;
    let spec = network_for(&cfg, &train)?;
    let seed = cfg.train.seed;
    let mut net = Network::build(spec, seed)?;
    let history = fit(&mut net, &train, &val, &cfg.train)?;
    let effective = ConfigFile {
        network: Some(net.spec.clone()),
        ..cfg
    };
    let header = vec![
        format!("seed={seed}"),
        format!("config={}", serde_json::to_string(&effective).expect("serializable")),
    ];
    let csv = metrics_csv(&header, &history);
    create_dir(&a.out)?;
    write_file(&a.out.join("metrics.csv"), csv.as_bytes())?;
    snapshot::save(&a.out.join("model.qnet"), &net, seed)?;
    let mut s = String::new();
    let _ = writeln!(s, "seed={seed} params={}", net.param_count());
    for m in &history {
        let _ = writeln!(
            s,
            "epoch {:>3}  loss {:.6}  train_acc {:.4}  val_acc {:.4}",
            m.epoch, m.loss, m.train_acc, m.val_acc
        );
    }
    let _ = writeln!(s, "wrote {} and {}", a.out.join("metrics.csv").display(), a.out.join("model.qnet").display());
    emit(out, &s)?;
    Ok(EXIT_OK)
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let (cfg, base) = load_config(a.config.as_deref())?;
    let (net, seed) = snapshot::load(&a.snapshot)?;
    let (_, val) = cfg.data.load(&base)?;
    let acc = evaluate(&net, &val, cfg.train.batch_size)?;
    emit(out, &format!("seed={seed}\nval_acc={acc}\n"))?;
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchResult {
    pub seed: u64,
    pub budget: Option<f64>,
    pub skeleton_cost: f64,
    pub best: Candidate,
    pub spec: NetworkSpec,
    pub evaluations: usize,
}

pub fn cmd_search(a: &SearchArgs, out: &mut dyn Write) -> Result<i32> {
    let (mut cfg, base) = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.search.seed = s;
    }
    if a.budget.is_some() {
        cfg.search.budget = a.budget;
    }
    cfg.train.validate()?;
    let (train, val) = cfg.data.load(&base)?;
    let mut space = SearchSpace::new(network_for(&cfg, &train)?, cfg.search.slots, nas::default_candidates())?;
    space.coefficients = cfg.search.coefficients;
    let skeleton = space.skeleton_cost()?;
    let budget = cfg.search.budget.unwrap_or(f64::INFINITY);
    if budget < skeleton {
        return Err(quadranet_core::Error::Infeasible {
            budget,
            skeleton_cost: skeleton,
        }
        .into());
    }
    let inner = TrainEvaluator {
        train,
        val,
        config: cfg.train,
        steps: cfg.search.steps,
    };
    let mut eval = CachedEvaluator::new(ParallelEvaluator::new(inner, thread_count()));
    let best = nas::search(&space, budget, &cfg.search.search_config(), &mut eval)?;
    let result = SearchResult {
        seed: cfg.search.seed,
        budget: cfg.search.budget,
        skeleton_cost: skeleton,
        spec: space.spec_for(&best.genome)?,
        best,
        evaluations: eval.misses(),
    };
    create_dir(&a.out)?;
    let path = a.out.join("search.json");
    write_file(&path, to_json(&result).as_bytes())?;
    emit(
        out,
        &format!(
            "seed={}\nbest={}\nfitness={}\nproxy_latency={}\nevaluations={}\nwrote {}\n",
            result.seed,
            result.best.genome_string,
            result.best.fitness,
            result.best.cost.proxy_latency,
            result.evaluations,
            path.display()
        ),
    )?;
    Ok(EXIT_OK)
}

pub fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let seeds: Vec<u64> = (a.seed..a.seed + a.seeds.max(1)).collect();
    let results = gradcheck::run_suite(&seeds)?;
    let mut s = String::new();
    let _ = writeln!(s, "seeds={seeds:?} step={} tolerance={}", gradcheck::STEP, gradcheck::TOLERANCE);
    let mut worst = 0.0f64;
    let mut failed = 0;
    for r in &results {
        worst = worst.max(r.max_rel_error);
        if !r.passed() {
            failed += 1;
            let _ = writeln!(s, "FAIL {} seed {}: relative error {:e}", r.name, r.seed, r.max_rel_error);
        }
    }
    let mut retention = 0.0f64;
    for &seed in &seeds {
        retention = retention.max(gradcheck::optimized_vs_full_retention([2, 3, 6, 6], 3, seed)?);
    }
    let retention_ok = retention <= 1e-12;
    let _ = writeln!(s, "checks={} failed={failed}", results.len());
    let _ = writeln!(s, "max relative error: {worst:e}");
    let _ = writeln!(s, "optimized vs full-retention backward: max abs diff {retention:e}");
    emit(out, &s)?;
    Ok(if failed == 0 && retention_ok { EXIT_OK } else { EXIT_CHECK_FAILED })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_help_matches_defaults() {
        let start = CONFIG_HELP.find('{').unwrap();
        let end = CONFIG_HELP.find("\n}").unwrap() + 2;
        let documented: serde_json::Value = serde_json::from_str(&CONFIG_HELP[start..end]).unwrap();
        let actual = serde_json::to_value(ConfigFile::default()).unwrap();
        assert_eq!(documented, actual);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn compare_rows_are_ordered() {
        let rows = compare_blocks(14, 64, 7, Coefficients::default()).unwrap();
        let f: Vec<u64> = rows.iter().map(|r| r.report.fwd_states).collect();
        assert!(f.windows(2).all(|w| w[0] < w[1]), "{f:?}");
    }
}
