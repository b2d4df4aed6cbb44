use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cutrank::artifact::{corpus_hash, write_atomic, write_json_atomic, Provenance};
use cutrank::config::{resolve_config, RankMethod, RunConfig};
use cutrank::corpus::{load_corpus, save_corpus, CutInstance, FeatureCorpus, SplitTag};
use cutrank::eval::{Method, MetricsReport};
use cutrank::linalg::{Precision, Scalar};
use cutrank::model::{checkpoint_hash, checkpoint_precision, load_checkpoint, save_checkpoint, Checkpoint};
use cutrank::rank::{export_heatmap, rank_random, rank_raw, rank_single_stage, rank_two_stage, RankedCutList};
use cutrank::synth::{generate, SynthConfig};
use cutrank::trainer::{train, training_cuts};

#[derive(Parser)]
#[command(name = "cutrank", version, about = "Rank video cuts from audio-visual snippet features")]
struct Cli {
    /// JSON config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, or file for `rank`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_parser = ["single", "double"])]
    precision: Option<String>,
    /// Config override, `key=value`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic train/val corpus pair with ground truth.
    Gen,
    /// Load and check a corpus, print a summary.
    Validate(CorpusArg),
    /// Train a model and write its checkpoint and loss history.
    Train(TrainArgs),
    /// Score and pool every candidate pair of a corpus.
    Rank(RankArgs),
    /// Recall table for one or more ranked lists.
    Eval(EvalArgs),
    /// Dump per-cut similarity grids.
    Heatmap(HeatmapArgs),
}

#[derive(Args)]
struct CorpusArg {
    /// Corpus directory or manifest file.
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long, value_parser = ["visual", "audio"])]
    zero_modality: Option<String>,
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint directory; required for `single` and `two`.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_parser = ["single", "two", "random", "raw"])]
    method: Option<String>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long, value_parser = ["visual", "audio", "audiovisual"])]
    modality: Option<String>,
    #[arg(long, value_parser = ["visual", "audio"])]
    zero_modality: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Ranked list, `name=path.csv` or just the path. Repeatable.
    #[arg(long = "list", required = true)]
    lists: Vec<String>,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Cut ids to export; all cuts when omitted.
    #[arg(long = "cut")]
    cuts: Vec<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CUTRANK_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn push_flag<T: ToString>(out: &mut Vec<String>, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        out.push(format!("{key}={}", v.to_string()));
    }
}

/// Flags are applied after `--set`, so they win.
fn overrides(cli: &Cli) -> Vec<String> {
    let mut o = cli.overrides.clone();
    push_flag(&mut o, "seed", &cli.seed);
    push_flag(&mut o, "threads", &cli.threads);
    push_flag(&mut o, "precision", &cli.precision);
    match &cli.command {
        Command::Train(a) => {
            push_flag(&mut o, "train.epochs", &a.epochs);
            push_flag(&mut o, "train.lambda2", &a.lambda2);
            push_flag(&mut o, "zero_modality", &a.zero_modality);
        }
        Command::Rank(a) => {
            push_flag(&mut o, "rank.method", &a.method);
            push_flag(&mut o, "rank.fraction", &a.fraction);
            push_flag(&mut o, "rank.modality", &a.modality);
            push_flag(&mut o, "zero_modality", &a.zero_modality);
        }
        _ => {}
    }
    o
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(cli.config.as_deref(), &overrides(&cli))?;
    log::info!("resolved config: {}", serde_json::to_string(&cfg.to_value())?);
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let out = || cli.out.clone().context("--out is required for this command");
    match &cli.command {
        Command::Gen => gen(&cfg, &out()?),
        Command::Validate(a) => validate(&a.corpus),
        Command::Train(a) => train_cmd(&cfg, a, &out()?),
        Command::Rank(a) => rank_cmd(&cfg, a, &out()?),
        Command::Eval(a) => eval_cmd(&cfg, a, &out()?),
        Command::Heatmap(a) => heatmap_cmd(&cfg, a, &out()?),
    }
}

fn provenance(command: &str, cfg: &RunConfig) -> Provenance {
    Provenance::new(command, cfg.seed, cfg.to_value())
}

fn load(path: &Path) -> Result<FeatureCorpus> {
    load_corpus(path).with_context(|| format!("loading corpus {}", path.display()))
}

/// Loads a corpus with the configured modality zeroed.
fn load_features(cfg: &RunConfig, path: &Path) -> Result<FeatureCorpus> {
    let corpus = load(path)?;
    Ok(match cfg.zero_modality {
        Some(m) => corpus.zero_modality(m),
        None => corpus,
    })
}

/// The cuts every ranking and metric runs over.
fn pool(cfg: &RunConfig, corpus: &FeatureCorpus) -> Vec<CutInstance> {
    training_cuts(corpus, cfg.train.min_shot_seconds)
}

fn gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    for (split, n_scenes) in [(SplitTag::Train, cfg.synth.n_scenes), (SplitTag::Val, cfg.gen.val_scenes)] {
        let synth = SynthConfig {
            split,
            n_scenes,
            ..cfg.synth.clone()
        };
        let data = generate(&synth)?;
        let dir = out.join(split.as_str());
        save_corpus(&data.corpus, &dir)?;
        let gt = dir.join("ground_truth.json");
        write_json_atomic(&gt, &data.ground_truth)?;
        let mut p = provenance("gen", cfg);
        p.corpus_hashes.push(corpus_hash(&data.corpus));
        p.write_beside(&dir.join("manifest.json"))?;
        p.write_beside(&gt)?;
        log::info!("{split}: {} scenes, {} cuts -> {}", n_scenes, data.ground_truth.len(), dir.display());
    }
    Ok(())
}

fn validate(path: &Path) -> Result<()> {
    let corpus = load(path)?;
    let cuts = cutrank::corpus::build_cut_instances(&corpus);
    println!("corpus   {}", path.display());
    println!("split    {}", corpus.split);
    println!("scenes   {}", corpus.scenes.len());
    println!("shots    {}", corpus.n_shots());
    println!("cuts     {}", cuts.len());
    println!("pairs    {}", cutrank::corpus::pool_size(&cuts));
    println!("dim      {} (visual {})", corpus.dim, corpus.modality_split);
    println!("sha256   {}", corpus_hash(&corpus));
    Ok(())
}

fn train_cmd(cfg: &RunConfig, a: &TrainArgs, out: &Path) -> Result<()> {
    let tr = load_features(cfg, &a.train)?;
    let va = load_features(cfg, &a.val)?;
    fn go<T: Scalar>(tr: &FeatureCorpus, va: &FeatureCorpus, cfg: &RunConfig, out: &Path) -> Result<(String, String)> {
        let o = train::<T>(tr, va, &cfg.train)?;
        let hash = save_checkpoint(
            &Checkpoint {
                model: o.model,
                weights: cfg.train.weights(),
                step: o.history.epochs.len() as u64,
            },
            out,
        )?;
        Ok((hash, o.history.to_csv()))
    }
    let (hash, history) = match cfg.precision {
        Precision::Single => go::<f32>(&tr, &va, cfg, out)?,
        Precision::Double => go::<f64>(&tr, &va, cfg, out)?,
    };
    let hist_path = out.join("history.csv");
    write_atomic(&hist_path, history.as_bytes())?;
    let mut p = provenance("train", cfg);
    p.corpus_hashes = vec![corpus_hash(&tr), corpus_hash(&va)];
    p.model_hash = Some(hash.clone());
    p.write_beside(&out.join("checkpoint.json"))?;
    p.write_beside(&hist_path)?;
    log::info!("model {hash} -> {}", out.display());
    Ok(())
}

fn model_ranking<T: Scalar>(model_dir: &Path, cuts: &[CutInstance], cfg: &RunConfig) -> Result<RankedCutList> {
    let ckpt = load_checkpoint::<T>(model_dir)?;
    Ok(match cfg.rank.method {
        RankMethod::Single => rank_single_stage(&ckpt.model, cuts)?,
        _ => rank_two_stage(&ckpt.model, cuts, cfg.rank.fraction)?,
    })
}

fn rank_cmd(cfg: &RunConfig, a: &RankArgs, out: &Path) -> Result<()> {
    let corpus = load_features(cfg, &a.corpus)?;
    let cuts = pool(cfg, &corpus);
    let mut p = provenance("rank", cfg);
    p.corpus_hashes.push(corpus_hash(&corpus));
    let list = match cfg.rank.method {
        RankMethod::Random => rank_random(&cuts, cfg.seed),
        RankMethod::Raw => rank_raw(&cuts, cfg.rank.modality, corpus.modality_split)?,
        RankMethod::Single | RankMethod::Two => {
            let Some(dir) = &a.model else {
                bail!("--model is required for method {}", cfg.rank.method.as_str());
            };
            p.model_hash = Some(checkpoint_hash(dir)?);
            match checkpoint_precision(dir)? {
                Precision::Single => model_ranking::<f32>(dir, &cuts, cfg)?,
                Precision::Double => model_ranking::<f64>(dir, &cuts, cfg)?,
            }
        }
    };
    list.write_csv(out)?;
    p.write_beside(out)?;
    log::info!("{} pairs over {} cuts -> {}", list.len(), list.k, out.display());
    Ok(())
}

fn read_provenance(list: &Path) -> Option<Provenance> {
    let text = std::fs::read_to_string(Provenance::sidecar_path(list)).ok()?;
    serde_json::from_str(&text).ok()
}

fn eval_cmd(cfg: &RunConfig, a: &EvalArgs, out: &Path) -> Result<()> {
    let corpus = load(&a.corpus)?;
    let cuts = pool(cfg, &corpus);
    let mut named = Vec::new();
    for spec in &a.lists {
        let (name, path) = match spec.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(spec);
                let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                (stem, p)
            }
        };
        let list = RankedCutList::read_csv(&path, cuts.len())?;
        let prov = read_provenance(&path);
        named.push((name, list, prov));
    }
    let methods: Vec<Method> = named
        .iter()
        .map(|(name, list, prov)| Method {
            name,
            seed: prov.as_ref().map(|p| p.seed),
            model_id: prov.as_ref().and_then(|p| p.model_hash.as_deref()),
            list,
        })
        .collect();
    let report = MetricsReport::evaluate(&methods, &cuts, cfg.eval)?;
    let csv = out.join("metrics.csv");
    write_atomic(&csv, report.to_csv().as_bytes())?;
    write_atomic(&out.join("metrics.txt"), report.to_text().as_bytes())?;
    write_json_atomic(&out.join("metrics.json"), &report)?;
    let mut p = provenance("eval", cfg);
    p.corpus_hashes.push(corpus_hash(&corpus));
    p.write_beside(&csv)?;
    print!("{}", report.to_text());
    Ok(())
}

fn heatmap_cmd(cfg: &RunConfig, a: &HeatmapArgs, out: &Path) -> Result<()> {
    let corpus = load_features(cfg, &a.corpus)?;
    let cuts = pool(cfg, &corpus);
    let selected: Vec<&CutInstance> = if a.cuts.is_empty() {
        cuts.iter().collect()
    } else {
        a.cuts
            .iter()
            .map(|id| cuts.iter().find(|c| c.cut_id == *id).with_context(|| format!("no cut with id {id}")))
            .collect::<Result<_>>()?
    };
    let ckpt = load_checkpoint::<f64>(&a.model)?;
    for cut in &selected {
        let grid = ckpt.model.grid(cut)?.scores;
        export_heatmap(cut, &grid, out)?;
    }
    let mut p = provenance("heatmap", cfg);
    p.corpus_hashes.push(corpus_hash(&corpus));
    p.model_hash = Some(checkpoint_hash(&a.model)?);
    write_json_atomic(&out.join("heatmaps.provenance.json"), &p)?;
    log::info!("{} heatmaps -> {}", selected.len(), out.display());
    Ok(())
}
