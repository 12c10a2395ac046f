use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use recipecrit::corpus::{
    build_ingredient_vocab, load_jsonl, split_corpus, write_jsonl, GrammarConfig, IngredientVocab, Recipe,
    RecipeRecord, Splits, SyntheticGrammar,
};
use recipecrit::critique::{
    edit_recipe, filtered_decode_baseline, Critique, CritiqueConfig, EditedRecipe, StoppingCriterion,
};
use recipecrit::eval::{
    critique_eval_sets, emit_report, majority_baseline, run_reconstruction, run_rq1, run_rq2, EvalConfig,
    MetricsReport, ReportFormat,
};
use recipecrit::model::{load_checkpoint, save_checkpoint, RecipeModel};
use recipecrit::training::{build_token_vocab, train_stage1, train_stage2, TrainReport};

mod run_config;

use run_config::RunConfig;

const SPLIT: (f64, f64, f64) = (0.7, 0.15, 0.15);

/// Recipe auto-encoder training, latent critiquing and evaluation.
#[derive(Parser, Debug)]
#[command(name = "recipecrit", version)]
struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic recipe corpus.
    GenCorpus(GenCorpus),
    /// Restrict an ingredient catalog to the most frequent entries of a corpus.
    BuildVocab(BuildVocab),
    /// Train stage 1, stage 2 or both.
    Train(Train),
    /// Reconstruct masked test recipes.
    Reconstruct(Reconstruct),
    /// Edit one recipe.
    Critique(CritiqueCmd),
    /// Critiquing against the filtered-decode baseline.
    Rq1(Rq1),
    /// Stopping-criteria comparison.
    Rq2(Rq2),
    /// Serve critiquing sessions over HTTP.
    Serve(Serve),
}

#[derive(Args, Debug)]
struct GenCorpus {
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Grammar TOML; the built-in grammar when absent.
    #[arg(long)]
    grammar: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the grammar's ingredient vocabulary.
    #[arg(long)]
    vocab_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BuildVocab {
    #[arg(long)]
    corpus: PathBuf,
    /// Ingredient catalog TSV used to resolve ingredient lines.
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long, default_value_t = 1488)]
    max_size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Data {
    /// Recipe JSONL.
    #[arg(long)]
    corpus: PathBuf,
    /// Ingredient vocabulary TSV.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Args, Debug)]
struct Train {
    #[command(flatten)]
    data: Data,
    /// Training config TOML; desk defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "both")]
    stage: StageArg,
    /// Stage-1 checkpoint to continue from (required for `--stage 2`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Training reports, one JSON record per stage.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Reconstruct {
    #[command(flatten)]
    data: Data,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    mask_ratio: f64,
    /// Machine-readable report.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Table report.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CritiqueCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Recipe as a JSON object with title, ingredients and instructions.
    #[arg(long)]
    recipe: PathBuf,
    /// Ingredient to add; repeatable.
    #[arg(long)]
    add: Vec<String>,
    /// Ingredient to remove; repeatable.
    #[arg(long)]
    remove: Vec<String>,
    #[arg(long, default_value = "early_stopping")]
    criterion: StoppingCriterion,
    /// Run the filtered-decode baseline instead.
    #[arg(long)]
    baseline: bool,
    /// Edited recipe as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Editing {
    #[command(flatten)]
    data: Data,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of critiqued ingredients, half popular and half rare.
    #[arg(long, default_value_t = 10)]
    targets: usize,
    /// Recipes per side and target.
    #[arg(long, default_value_t = 20)]
    n_each: usize,
    /// Minimum training-set support of a rare target.
    #[arg(long, default_value_t = 50)]
    min_support: usize,
    /// Critiquing parameters TOML.
    #[arg(long)]
    critique_config: Option<PathBuf>,
    /// Machine-readable report.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Table report.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Rq1 {
    #[command(flatten)]
    editing: Editing,
    #[arg(long, default_value = "early_stopping")]
    criterion: StoppingCriterion,
}

#[derive(Args, Debug)]
struct Rq2 {
    #[command(flatten)]
    editing: Editing,
    /// `all` or a comma-separated list of criteria.
    #[arg(long, default_value = "all")]
    criteria: String,
}

#[derive(Args, Debug)]
struct Serve {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    persist_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for failures during numerical work, 1 for everything caused by input.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<recipecrit::Error>() {
            return match err {
                recipecrit::Error::Divergence(_) | recipecrit::Error::Numerical(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    let config_digest = hex::encode(Sha256::digest(format!("{:?}", cli.command).as_bytes()));
    log::info!("seed {} config digest {}", cli.seed, &config_digest[..16]);
    let seed = cli.seed;
    match &cli.command {
        Command::GenCorpus(a) => gen_corpus(a, seed),
        Command::BuildVocab(a) => build_vocab(a),
        Command::Train(a) => train(a, seed),
        Command::Reconstruct(a) => reconstruct(a, seed),
        Command::Critique(a) => critique(a),
        Command::Rq1(a) => {
            let mut cfg = critique_config(&a.editing)?;
            cfg.criterion = a.criterion;
            let (model, sets) = editing_setup(&a.editing, seed)?;
            let report = run_rq1(&model, &sets, &cfg, &eval_config(seed))?;
            write_report(&report, &a.editing)
        }
        Command::Rq2(a) => {
            let base = critique_config(&a.editing)?;
            let grid: Vec<CritiqueConfig> = parse_criteria(&a.criteria)?
                .into_iter()
                .map(|c| CritiqueConfig { criterion: c, ..base.clone() })
                .collect();
            let (model, sets) = editing_setup(&a.editing, seed)?;
            let report = run_rq2(&model, &sets, &grid, &eval_config(seed))?;
            write_report(&report, &a.editing)
        }
        Command::Serve(a) => {
            let addr = format!("{}:{}", a.host, a.port)
                .parse()
                .context("invalid listen address")?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(recipecrit_service::run(recipecrit_service::ServeOptions {
                addr,
                checkpoint: a.checkpoint.clone(),
                vocab: a.vocab.clone(),
                persist_dir: a.persist_dir.clone(),
            }))
        }
    }
}

fn gen_corpus(a: &GenCorpus, seed: u64) -> anyhow::Result<()> {
    let config = match &a.grammar {
        Some(p) => GrammarConfig::load(p)?,
        None => GrammarConfig::default_grammar(),
    };
    let grammar = SyntheticGrammar::new(config)?;
    let recipes = grammar.generate(a.n, seed);
    write_jsonl(&a.out, &recipes)?;
    if let Some(p) = &a.vocab_out {
        grammar.vocab().save(p)?;
    }
    println!(
        "wrote {} recipes over {} ingredients to {}",
        recipes.len(),
        grammar.vocab().len(),
        a.out.display()
    );
    Ok(())
}

fn build_vocab(a: &BuildVocab) -> anyhow::Result<()> {
    let catalog = IngredientVocab::load(&a.catalog)?;
    let (recipes, stats) = load_jsonl(&a.corpus, &catalog)?;
    let built = build_ingredient_vocab(&recipes, &catalog, a.max_size)?;
    built.vocab.save(&a.out)?;
    println!(
        "kept {} of {} recipes ({} dropped); vocabulary of {} covers {:.1}% of ingredient mentions",
        stats.kept,
        stats.lines,
        stats.dropped(),
        built.vocab.len(),
        100.0 * built.coverage
    );
    Ok(())
}

fn load_corpus(data: &Data, vocab: &IngredientVocab) -> anyhow::Result<Vec<Recipe>> {
    let (recipes, stats) = load_jsonl(&data.corpus, vocab)?;
    log::info!(
        "{}: kept {} of {} records ({} dropped, {} malformed)",
        data.corpus.display(),
        stats.kept,
        stats.lines,
        stats.dropped(),
        stats.malformed
    );
    if recipes.is_empty() {
        bail!("{} holds no usable recipes", data.corpus.display());
    }
    Ok(recipes)
}

fn load_model(path: &Path, vocab: Option<&Path>) -> anyhow::Result<RecipeModel> {
    if !path.exists() {
        bail!("checkpoint {} does not exist", path.display());
    }
    let vocab = vocab.map(IngredientVocab::load).transpose()?;
    let model = load_checkpoint(path, vocab.as_ref()).with_context(|| format!("loading {}", path.display()))?;
    log::info!("checkpoint {} digest {}", path.display(), model.digest());
    Ok(model)
}

fn train(a: &Train, seed: u64) -> anyhow::Result<()> {
    let run = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    };
    let resumed = match (a.stage, &a.checkpoint) {
        (StageArg::Two, None) => bail!("--stage 2 needs --checkpoint"),
        (_, Some(p)) => Some(load_model(p, a.data.vocab.as_deref())?),
        (_, None) => None,
    };
    let vocab = match (&resumed, &a.data.vocab) {
        (Some(m), _) => m.ingredients().clone(),
        (None, Some(p)) => IngredientVocab::load(p)?,
        (None, None) => bail!("training from scratch needs --vocab"),
    };
    let recipes = load_corpus(&a.data, &vocab)?;
    let splits = split_corpus(&recipes, SPLIT, seed)?;
    let mut model = match resumed {
        Some(m) => m,
        None => {
            let tokens = build_token_vocab(&splits.train, run.min_token_freq, run.max_token_vocab);
            let cfg = run.model_config(vocab.len(), tokens.len());
            RecipeModel::new(cfg, tokens, vocab, seed)?
        }
    };
    let mut reports: Vec<TrainReport> = Vec::new();
    if matches!(a.stage, StageArg::One | StageArg::Both) {
        let cfg = run.train_config(1, seed);
        reports.push(train_stage1(&splits, &mut model, &cfg, Some(&a.out))?);
    }
    if matches!(a.stage, StageArg::Two | StageArg::Both) {
        let cfg = run.train_config(2, seed);
        reports.push(train_stage2(&splits, &mut model, &cfg, Some(&a.out))?);
    }
    save_checkpoint(&model, &a.out)?;
    for r in &reports {
        println!(
            "stage {}: {} epochs, best epoch {} with validation loss {:.4}{}, {:.1}s",
            r.stage,
            r.epochs.len(),
            r.best_epoch,
            r.best_val_loss,
            if r.stopped_early { " (stopped early)" } else { "" },
            r.wall_clock_secs
        );
    }
    if let Some(p) = &a.report {
        let mut text = String::new();
        for r in &reports {
            text.push_str(&r.to_json()?);
            text.push('\n');
        }
        std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    log::info!("checkpoint {} digest {}", a.out.display(), model.digest());
    Ok(())
}

fn reconstruct(a: &Reconstruct, seed: u64) -> anyhow::Result<()> {
    let model = load_model(&a.checkpoint, a.data.vocab.as_deref())?;
    let recipes = load_corpus(&a.data, model.ingredients())?;
    let splits = split_corpus(&recipes, SPLIT, seed)?;
    let mut report = run_reconstruction(&model, &splits.test, a.mask_ratio, seed)?;
    let mut base = majority_baseline(&splits.train, &splits.test, model.ingredients().len());
    base.seed = seed;
    report.rows.push(base);
    emit(&report, a.out.as_deref(), a.table.as_deref())
}

fn critique(a: &CritiqueCmd) -> anyhow::Result<()> {
    let model = load_model(&a.checkpoint, None)?;
    let vocab = model.ingredients();
    let text = std::fs::read_to_string(&a.recipe).with_context(|| format!("reading {}", a.recipe.display()))?;
    let record: RecipeRecord =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", a.recipe.display()))?;
    let recipe = record
        .into_recipe(|| "recipe".to_string(), vocab)
        .map_err(|r| anyhow::anyhow!("{} is not a usable recipe: {r:?}", a.recipe.display()))?;
    let mut critiques = Vec::new();
    for (names, make) in [(&a.add, Critique::add as fn(usize) -> Critique), (&a.remove, Critique::remove)] {
        for name in names {
            let id = vocab
                .resolve_name(name)
                .ok_or_else(|| recipecrit::Error::arg(format!("unknown ingredient {name:?}")))?;
            critiques.push(make(id));
        }
    }
    if critiques.is_empty() {
        bail!("give at least one --add or --remove");
    }
    let config = CritiqueConfig::with_criterion(a.criterion);
    let edited = if a.baseline {
        filtered_decode_baseline(&recipe, &critiques, &model)?
    } else {
        edit_recipe(&recipe, &critiques, &model, &config)?
    };
    print_edit(&recipe, &edited, vocab);
    if let Some(p) = &a.out {
        std::fs::write(p, serde_json::to_string_pretty(&edited)?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn names(set: &BTreeSet<usize>, vocab: &IngredientVocab) -> String {
    let mut v: Vec<&str> = set.iter().map(|&i| vocab.name(i)).collect();
    v.sort_unstable();
    v.join(", ")
}

fn print_edit(recipe: &Recipe, edited: &EditedRecipe, vocab: &IngredientVocab) {
    println!("{}", recipe.title);
    println!("before: {}", names(&edited.ingredients_before, vocab));
    println!("after:  {}", names(&edited.ingredients_after, vocab));
    for (i, s) in edited.instructions.iter().enumerate() {
        println!("{:>3}. {s}", i + 1);
    }
    match &edited.trace {
        Some(t) => {
            let last = t.records.last();
            println!(
                "critiquing: {} iterations, stopped by {:?}, final loss {:.4}",
                t.iterations(),
                t.termination,
                last.map(|r| r.loss).unwrap_or(f64::NAN)
            );
        }
        None => println!("filtered decode baseline, no latent update"),
    }
}

fn critique_config(a: &Editing) -> anyhow::Result<CritiqueConfig> {
    let cfg: CritiqueConfig = match &a.critique_config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).map_err(|e| recipecrit::Error::config(format!("{}: {e}", p.display())))?
        }
        None => CritiqueConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn parse_criteria(s: &str) -> anyhow::Result<Vec<StoppingCriterion>> {
    if s == "all" {
        return Ok(StoppingCriterion::ALL.to_vec());
    }
    s.split(',')
        .map(|c| c.trim().parse::<StoppingCriterion>().map_err(anyhow::Error::from))
        .collect()
}

fn eval_config(seed: u64) -> EvalConfig {
    EvalConfig {
        seed,
        ..EvalConfig::default()
    }
}

/// Evaluation recipes come from the validation and test splits.
fn eval_pool(splits: &Splits) -> Vec<Recipe> {
    splits.val.iter().chain(&splits.test).cloned().collect()
}

fn editing_setup(a: &Editing, seed: u64) -> anyhow::Result<(RecipeModel, Vec<recipecrit::corpus::CritiqueEvalSet>)> {
    let model = load_model(&a.checkpoint, a.data.vocab.as_deref())?;
    let recipes = load_corpus(&a.data, model.ingredients())?;
    let splits = split_corpus(&recipes, SPLIT, seed)?;
    let sets = critique_eval_sets(
        &splits.train,
        &eval_pool(&splits),
        model.ingredients(),
        a.targets,
        a.n_each,
        a.min_support,
        seed,
    )?;
    let names: Vec<&str> = sets.iter().map(|s| model.ingredients().name(s.target)).collect();
    log::info!("critique targets: {}", names.join(", "));
    Ok((model, sets))
}

fn write_report(report: &MetricsReport, a: &Editing) -> anyhow::Result<()> {
    emit(report, a.out.as_deref(), a.table.as_deref())
}

fn emit(report: &MetricsReport, out: Option<&Path>, table: Option<&Path>) -> anyhow::Result<()> {
    print!("{}", report.to_table());
    if let Some(p) = out {
        emit_report(report, p, ReportFormat::Machine)?;
    }
    if let Some(p) = table {
        emit_report(report, p, ReportFormat::Table)?;
    }
    log::info!("report digest {}", report.digest()?);
    Ok(())
}
