use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

use dropkan::data::{load_csv, split};
use dropkan::drop::DropMode;
use dropkan::error::{KanError, Result};
use dropkan::experiments::{
    exp1_csv, exp1_summary_csv, exp2_results_csv, prepare, run_exp1, run_exp2, search, search_csv, train_run,
    DropSetting, ExperimentConfig,
};
use dropkan::loss::LossKind;
use dropkan::rng::derive_seed;
use dropkan::verify::run_verify;

#[derive(Parser)]
#[command(name = "dropkan", version, about = "KAN training with Dropout and DropKAN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split and preprocess a CSV dataset into dataset.json
    Preprocess(RunArgs),
    /// Train one network and write metrics.jsonl and model.json
    Train(RunArgs),
    /// Forward-pass expectation curves under each drop setting
    Exp1(RunArgs),
    /// Random search plus repeated training for the five settings
    Exp2(RunArgs),
    /// Random search over drop rates for a single setting
    Search(RunArgs),
    /// Run the brute-force oracle suite
    Verify(VerifyArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config; flags below override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    /// Run directory for every output file
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    label: Option<String>,
    /// Layer widths, e.g. 6,10,4
    #[arg(long, value_delimiter = ',')]
    arch: Option<Vec<usize>>,
    #[arg(long)]
    mode: Option<DropMode>,
    /// One rate for every maskable layer, or one per layer
    #[arg(long, value_delimiter = ',')]
    rate: Option<Vec<f64>>,
    #[arg(long)]
    scale: Option<bool>,
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    passes: Option<usize>,
    #[arg(long)]
    evaluations: Option<usize>,
    #[arg(long)]
    rate_lo: Option<f64>,
    #[arg(long)]
    rate_hi: Option<f64>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Run(KanError),
}

impl From<KanError> for Failure {
    fn from(e: KanError) -> Self {
        Failure::Run(e)
    }
}

fn require_file(path: &Path, what: &str) -> std::result::Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} `{}` not found", path.display())))
    }
}

fn resolve(args: &RunArgs, subcommand: &str) -> std::result::Result<ExperimentConfig, Failure> {
    let mut c = match &args.config {
        Some(path) => {
            require_file(path, "config file")?;
            ExperimentConfig::load(path)?
        }
        None => ExperimentConfig {
            output_dir: PathBuf::from("runs").join(subcommand),
            ..ExperimentConfig::default()
        },
    };
    c.seed = args.seed;
    if let Some(v) = &args.out {
        c.output_dir = v.clone();
    }
    if let Some(v) = &args.dataset {
        c.dataset = Some(v.clone());
    }
    if let Some(v) = &args.label {
        c.label_column = Some(v.clone());
    }
    if let Some(v) = &args.arch {
        c.architecture = Some(v.clone());
    }
    if let Some(v) = &args.loss {
        let loss: LossKind = serde_json::from_value(serde_json::Value::String(v.clone()))
            .map_err(|_| Failure::Usage(format!("unknown loss `{v}`")))?;
        c.loss = Some(loss);
    }
    macro_rules! take {
        ($($flag:ident => $($field:ident).+),*) => {
            $(if let Some(v) = args.$flag { c.$($field).+ = v; })*
        };
    }
    take!(steps => steps, batch_size => batch_size, lr => learning_rate, eval_every => eval_every,
          repeats => repeats, passes => passes, evaluations => search.evaluations,
          rate_lo => search.rate_lo, rate_hi => search.rate_hi);
    if args.mode.is_some() || args.rate.is_some() || args.scale.is_some() {
        let base = c.settings.first().cloned();
        let mode = args.mode.or(base.as_ref().map(|s| s.mode)).unwrap_or(DropMode::None);
        c.settings = vec![DropSetting::new(
            mode.as_str(),
            mode,
            args.scale.or(base.as_ref().map(|s| s.scale)).unwrap_or(true),
            args.rate.clone().or(base.map(|s| s.rates)).unwrap_or_default(),
        )];
    }
    match &c.dataset {
        Some(path) => require_file(path, "dataset")?,
        None => return Err(Failure::Usage("a dataset is required (--dataset or config)".into())),
    }
    c.validate()?;
    Ok(c)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    std::fs::write(dir.join(name), contents)?;
    Ok(())
}

fn start_run(c: &ExperimentConfig) -> Result<&Path> {
    std::fs::create_dir_all(&c.output_dir)?;
    write(&c.output_dir, "resolved_config.json", &(c.to_json()? + "\n"))?;
    Ok(&c.output_dir)
}

fn preprocess(c: &ExperimentConfig) -> Result<()> {
    let dir = start_run(c)?;
    let mut table = load_csv(c.dataset.as_deref().expect("resolved"))?;
    if let Some(label) = &c.label_column {
        table = table.with_label_column(label)?;
    }
    // same derivation as the experiment runners, so the splits match
    let data = split(&table, c.split, derive_seed(c.seed, &[1]))?;
    data.save(&dir.join("dataset.json"))?;
    println!(
        "{} rows -> train {} / valid {} / test {}, {} features, {} classes ({} rejected)",
        table.n_rows(),
        data.train.len(),
        data.valid.len(),
        data.test.len(),
        data.n_features(),
        data.n_classes,
        data.rejected_rows.len()
    );
    Ok(())
}

fn train_cmd(c: &ExperimentConfig) -> Result<()> {
    let dir = start_run(c)?;
    let prep = prepare(c)?;
    let setting = c
        .settings
        .first()
        .cloned()
        .unwrap_or_else(|| DropSetting::new("none", DropMode::None, false, vec![]));
    let rates = setting.resolve_rates(prep.architecture.len() - 1)?;
    let (net, log) = train_run(c, &prep, &setting, &rates, &[])?;
    log.write(&dir.join("metrics.jsonl"))?;
    net.save(&dir.join("model.json"))?;
    if let Some(r) = log.last("test") {
        println!("step {}: test accuracy {:.4}, loss {:.4}", r.step, r.accuracy, r.loss);
    }
    Ok(())
}

fn exp1_cmd(c: &ExperimentConfig) -> Result<()> {
    let dir = start_run(c)?;
    let rows = run_exp1(c, &prepare(c)?)?;
    write(dir, "exp1.csv", &exp1_csv(&rows))?;
    let summary = exp1_summary_csv(&rows);
    write(dir, "exp1_summary.csv", &summary)?;
    print!("{summary}");
    Ok(())
}

fn exp2_cmd(c: &ExperimentConfig) -> Result<()> {
    let dir = start_run(c)?;
    let results = run_exp2(c, &prepare(c)?)?;
    let table = exp2_results_csv(&results);
    write(dir, "exp2_results.csv", &table)?;
    let outcomes: Vec<_> = results.iter().map(|r| &r.search).collect();
    write(dir, "exp2_search.csv", &search_csv(&outcomes))?;
    print!("{table}");
    Ok(())
}

fn search_cmd(c: &ExperimentConfig) -> Result<()> {
    let setting = c
        .settings
        .first()
        .ok_or_else(|| KanError::InvalidConfig("search needs a setting (--mode or config settings)".into()))?;
    let dir = start_run(c)?;
    let outcome = search(c, &prepare(c)?, setting, 0)?;
    write(dir, "search.csv", &search_csv(&[&outcome]))?;
    write(dir, "search.json", &(serde_json::to_string_pretty(&outcome)? + "\n"))?;
    match outcome.best {
        Some(b) => println!(
            "best rates {:?} with validation accuracy {}",
            outcome.evaluations[b].rates,
            outcome.evaluations[b].valid_accuracy.unwrap_or(f64::NAN)
        ),
        None => println!("every evaluation failed"),
    }
    Ok(())
}

fn verify_cmd(args: &VerifyArgs) -> Result<bool> {
    let report = run_verify(args.seed)?;
    let text = report.render();
    print!("{text}");
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        write(dir, "resolved_config.json", &format!("{{\n  \"seed\": {}\n}}\n", args.seed))?;
        write(dir, "verify_report.txt", &text)?;
    }
    Ok(report.all_passed())
}

fn run(cli: Cli) -> std::result::Result<bool, Failure> {
    let (args, name) = match &cli.command {
        Command::Verify(v) => return Ok(verify_cmd(v)?),
        Command::Preprocess(a) => (a, "preprocess"),
        Command::Train(a) => (a, "train"),
        Command::Exp1(a) => (a, "exp1"),
        Command::Exp2(a) => (a, "exp2"),
        Command::Search(a) => (a, "search"),
    };
    let c = resolve(args, name)?;
    match &cli.command {
        Command::Preprocess(_) => preprocess(&c)?,
        Command::Train(_) => train_cmd(&c)?,
        Command::Exp1(_) => exp1_cmd(&c)?,
        Command::Exp2(_) => exp2_cmd(&c)?,
        Command::Search(_) => search_cmd(&c)?,
        Command::Verify(_) => unreachable!(),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{}", Cli::command().render_usage());
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
