//! The `aqa` command line. Exit codes: 0 success, 1 usage error, 2 runtime
//! error. Every output file goes under `--out-dir`, which defaults to
//! `$FINECAUSAL_OUT_DIR`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::causal_graph::{default_graph, factorization_string, validate};
use crate::error::{Error, Result};
use crate::harness::{
    export_attention, grad_check_model, grad_check_setup, predict, run_variants, train,
    Checkpoint, RunConfig, Variant,
};
use crate::metrics::{evaluate_records, write_predictions};
use crate::synthdata::{generate, read_dataset, write_dataset, Dataset, GenConfig};

pub const OUT_DIR_ENV: &str = "FINECAUSAL_OUT_DIR";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LAST_GOOD_FILE: &str = "checkpoint.last_good.json";
pub const HISTORY_FILE: &str = "metrics.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const EVAL_FILE: &str = "eval.json";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_TABLE: &str = "ablation.txt";
pub const GRAD_CHECK_FILE: &str = "grad_check.json";
pub const GRAPH_FILE: &str = "causal_graph.json";
pub const FACTORIZATION_FILE: &str = "factorization.txt";
pub const ATTENTION_DIR: &str = "attention";

#[derive(Debug, Parser)]
#[command(name = "aqa", version, about = "Causal action quality assessment on synthetic paired videos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate train.jsonl and test.jsonl.
    GenData(GenDataArgs),
    /// Train one variant; writes checkpoint.json and metrics.jsonl.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset (decoded boundaries).
    Eval(EvalArgs),
    /// Train and evaluate all four variants; writes ablation.csv and ablation.txt.
    Ablate(AblateArgs),
    /// Export GAT and TCA attention matrices as CSV.
    ExportAttn(ExportArgs),
    /// Compare analytic and finite-difference gradients of the model loss.
    GradCheck(GradCheckArgs),
    /// Print the causal graph as JSON with its factorization and validation.
    GraphReport(GraphArgs),
}

#[derive(Debug, Args)]
struct OutDir {
    /// Output directory.
    #[arg(long, env = OUT_DIR_ENV)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct OptionalOutDir {
    /// Output directory; nothing is written when absent.
    #[arg(long, env = OUT_DIR_ENV)]
    out_dir: Option<PathBuf>,
}

/// Generator settings; each flag overrides the config file.
#[derive(Debug, Default, Args)]
struct GenFlags {
    /// Generator seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Training pairs.
    #[arg(long)]
    n_train: Option<usize>,
    /// Test pairs.
    #[arg(long)]
    n_test: Option<usize>,
    /// Snippets per video (T ≥ 3).
    #[arg(long)]
    snippets: Option<usize>,
    /// Feature dimension (even, ≥ 4).
    #[arg(long)]
    dim: Option<usize>,
    /// Lowest score.
    #[arg(long)]
    score_min: Option<f64>,
    /// Highest score.
    #[arg(long)]
    score_max: Option<f64>,
    /// Confounder-score correlation in the training split, in [0, 1].
    #[arg(long)]
    c_train: Option<f64>,
    /// Confounder-score correlation in the test split, in [0, 1].
    #[arg(long)]
    c_test: Option<f64>,
    /// Stage boundary jitter in snippets (0 or 1).
    #[arg(long)]
    jitter: Option<usize>,
}

impl GenFlags {
    fn apply(&self, c: &mut GenConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(seed, n_train, n_test, snippets, dim, score_min, score_max, c_train, c_test, jitter);
    }
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// GenConfig JSON file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    gen: GenFlags,
    #[command(flatten)]
    out: OutDir,
}

/// Training settings; each flag overrides the config file.
#[derive(Debug, Default, Args)]
struct RunFlags {
    /// RunConfig JSON file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model seed; also the data seed when data is generated.
    #[arg(long)]
    seed: Option<u64>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Learning rate of GAT, TCA, regressor and loss weights.
    #[arg(long)]
    lr_trunk: Option<f64>,
    /// Learning rate of the TAP and SAP heads.
    #[arg(long)]
    lr_heads: Option<f64>,
    /// Training-split confounder correlation when data is generated.
    #[arg(long)]
    c_train: Option<f64>,
    /// Test-split confounder correlation when data is generated.
    #[arg(long)]
    c_test: Option<f64>,
}

impl RunFlags {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg: RunConfig = match &self.config {
            Some(p) => read_json(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.data.seed = s;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr_trunk {
            cfg.lr_trunk = v;
        }
        if let Some(v) = self.lr_heads {
            cfg.lr_heads = v;
        }
        if let Some(v) = self.c_train {
            cfg.data.c_train = v;
        }
        if let Some(v) = self.c_test {
            cfg.data.c_test = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// baseline, gat_only, tca_only or full.
    #[arg(long)]
    variant: Option<Variant>,
    /// Dataset directory (train.jsonl, optional test.jsonl for validation)
    /// or a single training file; generated from the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    run: RunFlags,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory (uses test.jsonl) or file.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    out: OptionalOutDir,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunFlags,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Debug, Args)]
struct ExportArgs {
    /// Checkpoint of a variant with GAT or TCA.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory (uses test.jsonl) or file.
    #[arg(long)]
    data: PathBuf,
    /// Number of samples to export, taken from the start of the file.
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Debug, Args)]
struct GradCheckArgs {
    /// Variant to check.
    #[arg(long, default_value = "full")]
    variant: Variant,
    /// Maximum relative error per parameter.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Seed of the initialisation and the two-sample batch.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OptionalOutDir,
}

#[derive(Debug, Args)]
struct GraphArgs {
    #[command(flatten)]
    out: OptionalOutDir,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate(a),
        Command::ExportAttn(a) => export_cmd(a),
        Command::GradCheck(a) => grad_check_cmd(a),
        Command::GraphReport(a) => graph_report(a),
    }
}

fn require(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::invalid(format!("{}: no such file or directory", path.display())))
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    require(path)?;
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// A directory resolves to `dir/file`; anything else is used as is.
fn dataset_path(path: &Path, file: &str) -> Result<PathBuf> {
    let p = if path.is_dir() {
        path.join(file)
    } else {
        path.to_path_buf()
    };
    require(&p)?;
    Ok(p)
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg: GenConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => GenConfig::default(),
    };
    a.gen.apply(&mut cfg);
    let (train_set, test_set) = generate(&cfg)?;
    std::fs::create_dir_all(&a.out.out_dir)?;
    for (set, file) in [(&train_set, TRAIN_FILE), (&test_set, TEST_FILE)] {
        let path = a.out.out_dir.join(file);
        write_dataset(set, &path)?;
        println!("wrote {} ({} pairs)", path.display(), set.samples.len());
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = a.run.resolve()?;
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    let (train_set, validation): (Dataset, Option<Dataset>) = match &a.data {
        Some(p) => {
            let train_set = read_dataset(&dataset_path(p, TRAIN_FILE)?)?;
            let test_path = p.join(TEST_FILE);
            let validation = if p.is_dir() && test_path.exists() {
                Some(read_dataset(&test_path)?)
            } else {
                None
            };
            cfg.data = train_set.config.clone();
            (train_set, validation)
        }
        None => {
            let (tr, te) = generate(&cfg.data)?;
            (tr, Some(te))
        }
    };
    let out = &a.out.out_dir;
    std::fs::create_dir_all(out)?;
    let mut hook = |r: &crate::harness::EpochRecord| {
        let v = r
            .validation
            .as_ref()
            .map(|m| format!("  val rho {:.4}  R-l2 {:.4}", m.rho, m.r_l2_x100))
            .unwrap_or_default();
        println!(
            "epoch {:>3}  loss {:.5}  (sap {:.4}  tap {:.4}  reg {:.5}){v}",
            r.epoch, r.train.weighted_total, r.train.l_sap, r.train.l_tap, r.train.l_reg
        );
    };
    let result = train(
        &cfg,
        &train_set.samples,
        validation.as_ref().map(|d| d.samples.as_slice()),
        Some(&mut hook),
    );
    let ck = match result {
        Ok(ck) => ck,
        Err(Error::Diverged { epoch, last_good }) => {
            last_good.save(&out.join(LAST_GOOD_FILE))?;
            last_good.write_history(&out.join(HISTORY_FILE))?;
            return Err(Error::Diverged { epoch, last_good });
        }
        Err(e) => return Err(e),
    };
    ck.save(&out.join(CHECKPOINT_FILE))?;
    ck.write_history(&out.join(HISTORY_FILE))?;
    println!("wrote {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(require(&a.checkpoint)?)?;
    let set = read_dataset(&dataset_path(&a.data, TEST_FILE)?)?;
    let records = predict(&ck.params, &ck.config, &set.samples)?;
    let report = evaluate_records(&records)?;
    println!("{}", serde_json::to_string(&report.flat())?);
    if let Some(out) = &a.out.out_dir {
        std::fs::create_dir_all(out)?;
        write_predictions(&out.join(PREDICTIONS_FILE), &records)?;
        write_json(&out.join(EVAL_FILE), &report)?;
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = a.run.resolve()?;
    let (train_set, test_set) = generate(&cfg.data)?;
    let report = run_variants(&cfg, &Variant::ALL, &train_set.samples, &test_set.samples)?;
    let out = &a.out.out_dir;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(ABLATION_CSV), report.to_csv())?;
    let table = report.render_table();
    std::fs::write(out.join(ABLATION_TABLE), &table)?;
    print!("{table}");
    Ok(())
}

fn export_cmd(a: ExportArgs) -> Result<()> {
    let ck = Checkpoint::load(require(&a.checkpoint)?)?;
    let set = read_dataset(&dataset_path(&a.data, TEST_FILE)?)?;
    let n = a.n.min(set.samples.len());
    let dir = a.out.out_dir.join(ATTENTION_DIR);
    let summary = export_attention(&ck, &set.samples[..n], &dir)?;
    println!("wrote {} files under {}", summary.files.len(), dir.display());
    if let Some(f) = &summary.failure {
        for (stage, shift) in f.forward_influence_shift() {
            println!("forward -> {stage}: attention shift under corruption {shift:+.4}");
        }
    }
    Ok(())
}

fn grad_check_cmd(a: GradCheckArgs) -> Result<()> {
    let (cfg, batch) = grad_check_setup(a.variant, a.seed)?;
    let reports = grad_check_model(&cfg, &batch, a.tol)?;
    for r in &reports {
        println!(
            "{:<6} {:<28} max rel err {:.3e} ({} coords)",
            if r.passed { "ok" } else { "FAIL" },
            r.parameter,
            r.max_rel_error,
            r.coords_checked
        );
    }
    if let Some(out) = &a.out.out_dir {
        std::fs::create_dir_all(out)?;
        write_json(&out.join(GRAD_CHECK_FILE), &reports)?;
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Error::invalid(format!(
            "{failed} of {} parameters exceed tolerance {}",
            reports.len(),
            a.tol
        )));
    }
    println!("all {} parameters pass at tol {}", reports.len(), a.tol);
    Ok(())
}

fn graph_report(a: GraphArgs) -> Result<()> {
    let g = default_graph();
    let json = g.to_json()?;
    let fact = factorization_string(&g);
    let violations = validate(&g);
    println!("{json}");
    println!("factorization: {fact}");
    if violations.is_empty() {
        println!("validation: ok");
    } else {
        for v in &violations {
            println!("violation: {v}");
        }
    }
    if let Some(out) = &a.out.out_dir {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join(GRAPH_FILE), format!("{json}\n"))?;
        std::fs::write(out.join(FACTORIZATION_FILE), format!("{fact}\n"))?;
    }
    Ok(())
}
