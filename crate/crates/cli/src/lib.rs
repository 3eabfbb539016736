//! Subcommands of the `depthprobe` binary.
//!
//! Every command writes its outputs plus a `manifest.json` into `--out`.
//! Failures surface as a [`CliError`] whose [`CliError::kind`] is a stable
//! machine-readable tag.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use depthprobe::intervention::{skiplayer_experiment, SkiplayerOptions};
use depthprobe::lens::{lens_profile, LensOptions};
use depthprobe::model::save_model;
use depthprobe::report::{self, Series};
use depthprobe::rng::{rng_for, stream};
use depthprobe::scoring::{layerwise_spearman, mean_spearman, parse_assay, ScoreOptions};
use depthprobe::synth::{build_generator, make_assay, sample_sequence, SeqGenerator};
use depthprobe::tokens::{parse_sequences, write_fasta, SequenceRecord};
use depthprobe::train::{train, AdamConfig, TrainConfig};
use depthprobe::{Exec, Model, ModelConfig, Objective, Prompt};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),
    #[error(transparent)]
    Core(#[from] depthprobe::Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::MissingFile(_) => "missing_file",
            CliError::Core(e) => e.kind(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    /// `error: kind=<kind> msg=<message on one line>`.
    pub fn one_line(&self) -> String {
        let text = self.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
        format!("error: kind={} msg={}", self.kind(), text)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "depthprobe", version, about = "Depth-usage probes for small transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sample a synthetic generator, prompts and a single-mutant assay.
    Synth(SynthArgs),
    /// Train a model on generator samples.
    Train(TrainArgs),
    /// Layer-skip propagated effects.
    Skiplayer(SkiplayerArgs),
    /// LogitLens KL and top-1 depth profiles.
    Lens(LensArgs),
    /// Layer-wise mutation-effect scoring against assays.
    Score(ScoreArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct Common {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; defaults to the machine's parallelism.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// Hidden states of the generator.
    #[arg(long, default_value_t = 6)]
    pub states: usize,
    /// Dirichlet concentration of transition and emission rows.
    #[arg(long, default_value_t = 0.1)]
    pub concentration: f64,
    #[arg(long, default_value_t = 40)]
    pub num_prompts: usize,
    /// Residues per prompt and in the assay wildtype.
    #[arg(long, default_value_t = 64)]
    pub length: usize,
    /// Standard deviation of measurement noise in the assay.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveArg {
    Masked,
    Autoregressive,
}

impl From<ObjectiveArg> for Objective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::Masked => Objective::Masked,
            ObjectiveArg::Autoregressive => Objective::Autoregressive,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Generator JSON written by `synth`; built from the seed when absent.
    #[arg(long)]
    pub generator: Option<PathBuf>,
    #[arg(long, default_value_t = 6)]
    pub states: usize,
    #[arg(long, default_value_t = 0.1)]
    pub concentration: f64,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Masked)]
    pub objective: ObjectiveArg,
    #[arg(long, default_value_t = 3000)]
    pub steps: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 64)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub adam_eps: f64,
    #[arg(long, default_value_t = 0.15)]
    pub mask_rate: f64,
    #[arg(long, default_value_t = 64)]
    pub heldout: usize,
    #[arg(long, default_value_t = 8)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 256)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 128)]
    pub max_seq_len: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct SkiplayerArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: PathBuf,
    /// FASTA or one-sequence-per-line prompt file.
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0.15)]
    pub mask_rate: f64,
}

#[derive(Args, Debug, Serialize)]
pub struct LensArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long, default_value_t = 0.15)]
    pub mask_rate: f64,
}

#[derive(Args, Debug, Serialize)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: PathBuf,
    /// Assay CSV; repeat for several assays.
    #[arg(long, required = true)]
    pub assay: Vec<PathBuf>,
    /// Wildtype FASTA; one per assay, or a single one shared by all.
    #[arg(long, required = true)]
    pub wildtype: Vec<PathBuf>,
    /// Autoregressive models: mean instead of summed log-likelihood.
    #[arg(long, default_value_t = false, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    pub length_normalize: bool,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return Err(CliError::Usage(first.trim_start_matches("error: ").to_string()));
        }
    };
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Skiplayer(a) => cmd_skiplayer(a),
        Command::Lens(a) => cmd_lens(a),
        Command::Score(a) => cmd_score(a),
    }
}

fn exec_for(common: &Common) -> Result<Exec> {
    match common.threads {
        Some(0) => Err(CliError::Usage("--threads must be at least 1".into())),
        Some(1) => Ok(Exec::Sequential),
        Some(n) => {
            set_threads(n)?;
            Ok(Exec::Parallel)
        }
        None => Ok(Exec::Parallel),
    }
}

#[cfg(feature = "parallel")]
fn set_threads(n: usize) -> Result<()> {
    // a second call in the same process keeps the first pool
    if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
        log::debug!("rayon pool already initialized");
    }
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn set_threads(n: usize) -> Result<()> {
    log::warn!("built without the parallel feature; ignoring --threads {n}");
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(CliError::MissingFile(path.to_path_buf()));
    }
    Ok(fs::read_to_string(path)?)
}

fn read_model(path: &Path) -> Result<(Model, String)> {
    if !path.exists() {
        return Err(CliError::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    let model = depthprobe::model::from_bytes(&bytes)?;
    Ok((model, fingerprint(&bytes)))
}

pub fn fingerprint(bytes: &[u8]) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(bytes)))
}

fn read_prompts(path: &Path, objective: Objective) -> Result<(Vec<Prompt>, usize)> {
    let set = parse_sequences(&read_text(path)?);
    if set.records.is_empty() {
        return Err(depthprobe::Error::InvalidArgument(format!("no sequences in {}", path.display())).into());
    }
    if set.unknown_letters > 0 {
        log::warn!(
            "{}: {} letters outside the residue alphabet mapped to UNK",
            path.display(),
            set.unknown_letters
        );
    }
    let prompts = set
        .records
        .iter()
        .map(|r| Prompt::from_residues(r.id.clone(), &r.sequence, objective).0)
        .collect();
    Ok((prompts, set.unknown_letters))
}

struct Manifest {
    command: &'static str,
    args: Value,
    seed: u64,
    started: String,
}

impl Manifest {
    fn start(command: &'static str, args: &impl Serialize, seed: u64) -> Self {
        Self {
            command,
            args: serde_json::to_value(args).unwrap_or(Value::Null),
            seed,
            started: now(),
        }
    }

    fn write(self, out: &Path, config: Option<&ModelConfig>, model_fingerprint: Option<&str>, outputs: &[&str], results: Value) -> Result<()> {
        let manifest = json!({
            "command": self.command,
            "args": self.args,
            "config": config,
            "seed": self.seed,
            "model_fingerprint": model_fingerprint,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "started_at": self.started,
            "finished_at": now(),
            "outputs": outputs,
            "results": results,
        });
        let text = serde_json::to_string_pretty(&manifest).map_err(depthprobe::Error::from)?;
        fs::write(out.join("manifest.json"), text + "\n")?;
        Ok(())
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::write(dir.join(name), contents)?;
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let manifest = Manifest::start("synth", a, a.common.seed);
    let seed = a.common.seed;
    // generation is sequential; validates --threads like the other commands
    exec_for(&a.common)?;
    fs::create_dir_all(&a.common.out)?;
    let gen = build_generator(a.states, a.concentration, &mut rng_for(seed, &[stream::GENERATOR]))?;
    if a.length == 0 {
        return Err(CliError::Usage("--length must be positive".into()));
    }
    let prompts: Vec<SequenceRecord> = (0..a.num_prompts)
        .map(|i| SequenceRecord {
            id: format!("synthetic_{i}"),
            sequence: sample_sequence(&gen, a.length, &mut rng_for(seed, &[stream::PROMPTS, i as u64])),
        })
        .collect();
    let mut assay_rng = rng_for(seed, &[stream::ASSAY]);
    let wildtype = sample_sequence(&gen, a.length, &mut assay_rng);
    let assay = make_assay(&gen, "synthetic", &wildtype, a.noise, &mut assay_rng)?;

    let out = &a.common.out;
    let gen_json = serde_json::to_string_pretty(&gen).map_err(depthprobe::Error::from)?;
    write_out(out, "generator.json", &(gen_json + "\n"))?;
    write_out(out, "prompts.fasta", &write_fasta(&prompts))?;
    let wt = [SequenceRecord {
        id: "synthetic_wildtype".into(),
        sequence: wildtype,
    }];
    write_out(out, "wildtype.fasta", &write_fasta(&wt))?;
    write_out(out, "assay.csv", &assay.to_csv()?)?;
    manifest.write(
        out,
        None,
        None,
        &["generator.json", "prompts.fasta", "wildtype.fasta", "assay.csv"],
        json!({ "variants": assay.variants.len() }),
    )
}

fn load_generator(path: &Path) -> Result<SeqGenerator> {
    let text = read_text(path)?;
    let raw: SeqGenerator = serde_json::from_str(&text).map_err(depthprobe::Error::from)?;
    // re-validate rows
    Ok(SeqGenerator::new(raw.initial, raw.transition, raw.emission)?)
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let manifest = Manifest::start("train", a, a.common.seed);
    let exec = exec_for(&a.common)?;
    let seed = a.common.seed;
    let gen = match &a.generator {
        Some(p) => load_generator(p)?,
        None => build_generator(a.states, a.concentration, &mut rng_for(seed, &[stream::GENERATOR]))?,
    };
    let cfg = TrainConfig {
        model: ModelConfig {
            num_layers: a.layers,
            d_model: a.d_model,
            num_heads: a.heads,
            d_ff: a.d_ff,
            max_seq_len: a.max_seq_len,
            objective: a.objective.into(),
            ..ModelConfig::default()
        },
        mask_rate: a.mask_rate,
        steps: a.steps,
        batch_size: a.batch_size,
        seq_len: a.seq_len,
        adam: AdamConfig {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.adam_eps,
        },
        heldout_size: a.heldout,
        seed,
    };
    let outcome = train(&cfg, &gen, exec)?;
    let out = &a.common.out;
    fs::create_dir_all(out)?;
    let model_path = out.join("model.dpw");
    save_model(&outcome.model, &model_path)?;
    let fp = fingerprint(&fs::read(&model_path)?);
    write_out(out, "train_curve.csv", &report::train_curve_csv(&outcome.curve))?;
    let ln_v = (cfg.model.vocab_size as f64).ln();
    log::info!(
        "held-out loss {:.4} -> {:.4} (ln V = {ln_v:.4})",
        outcome.initial_heldout_loss,
        outcome.final_heldout_loss
    );
    manifest.write(
        out,
        Some(&cfg.model),
        Some(&fp),
        &["model.dpw", "train_curve.csv"],
        json!({
            "train_config": cfg,
            "initial_heldout_loss": outcome.initial_heldout_loss,
            "final_heldout_loss": outcome.final_heldout_loss,
            "ln_vocab": ln_v,
        }),
    )
}

pub fn cmd_skiplayer(a: &SkiplayerArgs) -> Result<()> {
    let manifest = Manifest::start("skiplayer", a, a.common.seed);
    let exec = exec_for(&a.common)?;
    let (model, fp) = read_model(&a.model)?;
    let (prompts, unknown) = read_prompts(&a.prompts, model.config.objective)?;
    let opts = SkiplayerOptions {
        repeats: a.repeats,
        mask_rate: a.mask_rate,
        seed: a.common.seed,
    };
    let m = skiplayer_experiment(&model, &prompts, &opts, exec)?;
    let out = &a.common.out;
    fs::create_dir_all(out)?;
    write_out(out, "skiplayer_propagated.csv", &report::skiplayer_propagated_csv(&m))?;
    write_out(out, "skiplayer_output.csv", &report::skiplayer_output_csv(&m))?;
    let mut outputs = vec!["skiplayer_propagated.csv", "skiplayer_output.csv"];
    match (report::emit_heatmap(&m, false), report::emit_heatmap(&m, true)) {
        (Ok(abs), Ok(rel)) => {
            write_out(out, "skiplayer_heatmap.svg", &abs)?;
            write_out(out, "skiplayer_heatmap_rel.svg", &rel)?;
            outputs.extend(["skiplayer_heatmap.svg", "skiplayer_heatmap_rel.svg"]);
        }
        (Err(e), _) | (_, Err(e)) => log::warn!("no heatmap: {e}"),
    }
    manifest.write(
        out,
        Some(&model.config),
        Some(&fp),
        &outputs,
        json!({
            "prompts": m.prompts,
            "repeats": m.repeats,
            "aggregation": "max",
            "output_space_default": "probabilities",
            "unknown_letters": unknown,
        }),
    )
}

pub fn cmd_lens(a: &LensArgs) -> Result<()> {
    let manifest = Manifest::start("lens", a, a.common.seed);
    let exec = exec_for(&a.common)?;
    let (model, fp) = read_model(&a.model)?;
    let (prompts, unknown) = read_prompts(&a.prompts, model.config.objective)?;
    let opts = LensOptions {
        mask_rate: a.mask_rate,
        seed: a.common.seed,
    };
    let p = lens_profile(&model, &prompts, &opts, exec)?;
    let out = &a.common.out;
    fs::create_dir_all(out)?;
    write_out(out, "lens_profile.csv", &report::lens_profile_csv(&p))?;
    let layers = 1..=p.num_layers;
    let kl = Series {
        name: "mean KL(p_L || p_l)".into(),
        points: layers.clone().map(|l| (p.relative_depth(l), p.mean_kl(l))).collect(),
    };
    let top1 = Series {
        name: "top-1 overlap".into(),
        points: layers.map(|l| (p.relative_depth(l), p.top1_overlap(l))).collect(),
    };
    write_out(out, "lens_kl.svg", &report::emit_lines(&[kl], "LogitLens KL", "mean KL (nats)")?)?;
    write_out(out, "lens_top1.svg", &report::emit_lines(&[top1], "LogitLens top-1 overlap", "overlap")?)?;
    manifest.write(
        out,
        Some(&model.config),
        Some(&fp),
        &["lens_profile.csv", "lens_kl.svg", "lens_top1.svg"],
        json!({
            "aggregation": "mean over pooled positions",
            "kl_direction": "KL(p_L || p_l), natural log",
            "eval_policy": p.policy.name(),
            "positions": p.positions,
            "prompts": p.prompts,
            "clamped_terms": p.clamped,
            "unknown_letters": unknown,
        }),
    )
}

pub fn cmd_score(a: &ScoreArgs) -> Result<()> {
    let manifest = Manifest::start("score", a, a.common.seed);
    let exec = exec_for(&a.common)?;
    let (model, fp) = read_model(&a.model)?;
    if a.wildtype.len() != 1 && a.wildtype.len() != a.assay.len() {
        return Err(CliError::Usage(
            "give one --wildtype per --assay, or a single shared one".into(),
        ));
    }
    let mut tables = Vec::with_capacity(a.assay.len());
    for (i, path) in a.assay.iter().enumerate() {
        let wt_path = &a.wildtype[if a.wildtype.len() == 1 { 0 } else { i }];
        let wt_set = parse_sequences(&read_text(wt_path)?);
        let wildtype = wt_set
            .records
            .first()
            .ok_or_else(|| depthprobe::Error::InvalidArgument(format!("no sequence in {}", wt_path.display())))?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("assay{i}"));
        let assay = parse_assay(id, &read_text(path)?, &wildtype.sequence)?;
        let opts = ScoreOptions {
            length_normalize: a.length_normalize,
        };
        tables.push(layerwise_spearman(&model, &assay, opts, exec)?);
    }
    let out = &a.common.out;
    fs::create_dir_all(out)?;
    write_out(out, "scores.csv", &report::scores_csv(&tables))?;
    write_out(out, "variant_scores.csv", &report::variant_scores_csv(&tables))?;
    let mut outputs = vec!["scores.csv", "variant_scores.csv"];

    let mut series: Vec<Series> = tables
        .iter()
        .map(|t| Series {
            name: t.assay_id.clone(),
            points: t.layers.iter().filter_map(|l| l.spearman.map(|r| (l.relative_depth, r))).collect(),
        })
        .collect();
    let means = mean_spearman(&tables)?;
    if tables.len() > 1 {
        let l_max = model.num_layers() as f64;
        series.push(Series {
            name: "mean".into(),
            points: means
                .iter()
                .enumerate()
                .filter_map(|(l, r)| r.map(|r| ((l + 1) as f64 / l_max, r)))
                .collect(),
        });
    }
    series.retain(|s| !s.points.is_empty());
    if series.is_empty() {
        log::warn!("every spearman value is undefined; no figure written");
    } else {
        write_out(out, "scores.svg", &report::emit_lines(&series, "Layer-wise Spearman", "spearman")?)?;
        outputs.push("scores.svg");
    }
    let objective = model.config.objective;
    manifest.write(
        out,
        Some(&model.config),
        Some(&fp),
        &outputs,
        json!({
            "scorer": match objective {
                Objective::Masked => "masked-marginal",
                Objective::Autoregressive => "autoregressive-likelihood",
            },
            "length_normalize": a.length_normalize,
            "mean_spearman": means,
            "assays": tables.iter().map(|t| json!({"id": t.assay_id, "variants": t.codes.len()})).collect::<Vec<_>>(),
        }),
    )
}
