//! `augsel` subcommands. Every JSON output embeds the resolved [`RunConfig`].

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use augsel_core::analysis::{emit_report, med_report, ReportFormat, DEFAULT_K};
use augsel_core::augment::{apply_chain, sample_chain, AugDistribution};
use augsel_core::contrastive::{init_for_dataset, train_toy, Checkpoint, EncoderDims, ToyTrainConfig};
use augsel_core::corpus::{cut_random_segment, load_manifest, load_waveform, write_waveform, LoadedDataset};
use augsel_core::rng::{derive_seed, seeded_rng};
use augsel_core::selector::{random_search, score_distribution, ScoringConfig, SearchResult};
use augsel_core::synth::{write_corpus, SynthConfig};
use augsel_core::Error;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "augsel", version, about = "Select audio augmentation distributions by conditional dependence")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Random search over augmentation distributions; writes search.jsonl.
    Search(SearchArgs),
    /// Score a single distribution; writes score.json.
    Score(ScoreArgs),
    /// Mean Extremal Difference of a search result; writes med.txt, med.csv, med.jsonl.
    Med(MedArgs),
    /// Write augmented variants of one audio file with their sampled chains.
    Preview(PreviewArgs),
    /// Contrastive toy training; writes losses.jsonl and checkpoint.json.
    Toytrain(ToyTrainArgs),
    /// Write the bundled synthetic corpus (WAV files plus manifest.jsonl).
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ScoringArgs {
    /// JSONL manifest of {id, path, label} records.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Views generated per origin sample.
    #[arg(long = "views", default_value_t = 20)]
    pub n_views: usize,
    /// Ridge strength of the conditional estimator.
    #[arg(long, default_value_t = 1e-3)]
    pub epsilon: f64,
    /// Origins kept for scoring (seeded subsample beyond this).
    #[arg(long, default_value_t = 100)]
    pub max_origins: usize,
    /// Seed of the origin subsample.
    #[arg(long, default_value_t = 0)]
    pub subsample_seed: u64,
    /// View length in seconds.
    #[arg(long = "segment", default_value_t = 1.0)]
    pub segment_s: f64,
}

impl ScoringArgs {
    fn scoring(&self) -> ScoringConfig {
        ScoringConfig {
            n_views: self.n_views,
            epsilon: self.epsilon,
            max_origins: self.max_origins,
            subsample_seed: self.subsample_seed,
            segment_s: self.segment_s,
        }
    }
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub scoring: ScoringArgs,
    #[arg(long = "out")]
    pub output_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of sampled candidate distributions.
    #[arg(long = "candidates", default_value_t = 100)]
    pub n_candidates: usize,
    /// Worker threads for candidate scoring (all cores when unset).
    #[arg(long, env = "AUGSEL_WORKERS")]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub scoring: ScoringArgs,
    /// Distribution record (JSON with the 13 named fields).
    #[arg(long)]
    pub distribution: PathBuf,
    #[arg(long = "out")]
    pub output_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct MedArgs {
    /// search.jsonl written by `search`.
    #[arg(long)]
    pub result: PathBuf,
    #[arg(long = "out")]
    pub output_dir: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct PreviewArgs {
    #[arg(long)]
    pub audio: PathBuf,
    #[arg(long)]
    pub distribution: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub count: usize,
    #[arg(long = "out")]
    pub output_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "segment", default_value_t = 1.0)]
    pub segment_s: f64,
}

#[derive(Debug, Args)]
pub struct ToyTrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Distribution applied to both views of every pair.
    #[arg(long)]
    pub distribution: PathBuf,
    #[arg(long = "out")]
    pub output_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Total step count; a resumed run continues up to it.
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long = "batch", default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long = "lr", default_value_t = 0.05)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 64)]
    pub embed: usize,
    #[arg(long, default_value_t = 32)]
    pub proj: usize,
    #[arg(long, default_value_t = 0.01)]
    pub bilinear_init: f64,
    /// Checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long = "out")]
    pub output_dir: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub samples: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long = "duration", default_value_t = 2.0)]
    pub duration_s: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Omit the per-sample tones.
    #[arg(long)]
    pub band_only: bool,
}

/// Fully resolved settings of one invocation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub n_views: usize,
    pub n_candidates: usize,
    pub k: usize,
    pub epsilon: f64,
    pub max_origins: usize,
    pub subsample_seed: u64,
    pub segment_s: f64,
    pub toy: ToyTrainConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inputs: Option<serde_json::Value>,
}

impl RunConfig {
    fn base(command: &'static str, output_dir: &Path, seed: u64) -> Self {
        let s = ScoringConfig::default();
        RunConfig {
            command,
            manifest: None,
            output_dir: output_dir.to_path_buf(),
            seed,
            n_views: s.n_views,
            n_candidates: 100,
            k: DEFAULT_K,
            epsilon: s.epsilon,
            max_origins: s.max_origins,
            subsample_seed: s.subsample_seed,
            segment_s: s.segment_s,
            toy: ToyTrainConfig {
                seed,
                ..ToyTrainConfig::default()
            },
            inputs: None,
        }
    }

    fn with_scoring(mut self, a: &ScoringArgs) -> Self {
        self.manifest = Some(a.manifest.clone());
        self.n_views = a.n_views;
        self.epsilon = a.epsilon;
        self.max_origins = a.max_origins;
        self.subsample_seed = a.subsample_seed;
        self.segment_s = a.segment_s;
        self
    }

    pub fn validate(&self) -> Result<(), Error> {
        let counts = [
            ("views", self.n_views),
            ("candidates", self.n_candidates),
            ("k", self.k),
            ("max-origins", self.max_origins),
            ("steps", self.toy.steps),
            ("batch", self.toy.batch_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidParameter(format!("--{name} must be positive")));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidParameter("--epsilon must be positive".into()));
        }
        if !(self.segment_s > 0.0) {
            return Err(Error::InvalidParameter("--segment must be positive".into()));
        }
        if !(self.toy.learning_rate >= 0.0) || !self.toy.learning_rate.is_finite() {
            return Err(Error::InvalidParameter("--lr must be a non-negative number".into()));
        }
        Ok(())
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes")
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Candidate { source, .. } => exit_code(source),
        Error::Numerical(_) => EXIT_NUMERICAL,
        Error::InvalidParameter(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read_distribution(path: &Path) -> Result<AugDistribution, Error> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    AugDistribution::from_json(&text)
}

fn load_data(manifest: &Path) -> Result<LoadedDataset, Error> {
    LoadedDataset::load(load_manifest(manifest)?)
}

fn pretty(v: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializes");
    s.push('\n');
    s
}

pub fn cmd_search(a: &SearchArgs) -> Result<(), Error> {
    let mut run = RunConfig::base("search", &a.output_dir, a.seed).with_scoring(&a.scoring);
    run.n_candidates = a.n_candidates;
    run.validate()?;
    let data = load_data(&a.scoring.manifest)?;
    let result = random_search(&data, a.n_candidates, &a.scoring.scoring(), a.seed, a.workers)?;
    create_dir(&a.output_dir)?;
    let path = a.output_dir.join("search.jsonl");
    result.write(&path, Some(&run.to_value()))?;
    let best = result.best();
    println!(
        "selected candidate {} of {} with score {:.6e}",
        best.index,
        result.len(),
        best.score.value
    );
    println!("{}", best.distribution.to_json());
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct ScoreFile<'a> {
    run: serde_json::Value,
    distribution: &'a AugDistribution,
    score: augsel_core::kernelstats::DependenceScore,
}

pub fn cmd_score(a: &ScoreArgs) -> Result<(), Error> {
    let mut run = RunConfig::base("score", &a.output_dir, a.seed).with_scoring(&a.scoring);
    run.inputs = Some(serde_json::json!({ "distribution": a.distribution }));
    run.validate()?;
    let d = read_distribution(&a.distribution)?;
    let data = load_data(&a.scoring.manifest)?;
    let score = score_distribution(&data, &d, &a.scoring.scoring(), &mut seeded_rng(a.seed))?;
    create_dir(&a.output_dir)?;
    let path = a.output_dir.join("score.json");
    write_text(
        &path,
        &pretty(&ScoreFile {
            run: run.to_value(),
            distribution: &d,
            score,
        }),
    )?;
    println!("score {:.6e} (n = {}, epsilon = {})", score.value, score.n, score.epsilon);
    Ok(())
}

pub fn cmd_med(a: &MedArgs) -> Result<(), Error> {
    let mut run = RunConfig::base("med", &a.output_dir, 0);
    run.k = a.k;
    run.inputs = Some(serde_json::json!({ "result": a.result }));
    run.validate()?;
    let (result, _) = SearchResult::read(&a.result)?;
    run.n_candidates = result.len();
    let report = med_report(&result, a.k)?;
    create_dir(&a.output_dir)?;
    let value = run.to_value();
    for format in [
        ReportFormat::TableText,
        ReportFormat::DelimitedColumns,
        ReportFormat::StructuredRecords,
    ] {
        let path = a.output_dir.join(format!("med.{}", format.extension()));
        emit_report(&report, format, &path, Some(&value))?;
    }
    for e in &report.entries {
        println!("{:<16} {:>12.6}", e.parameter, e.med);
    }
    Ok(())
}

#[derive(Serialize)]
struct ChainFile<'a> {
    run: &'a serde_json::Value,
    variant: usize,
    seed: u64,
    audio: String,
    chain: &'a augsel_core::augment::AugChain,
}

pub fn cmd_preview(a: &PreviewArgs) -> Result<(), Error> {
    let mut run = RunConfig::base("preview", &a.output_dir, a.seed);
    run.segment_s = a.segment_s;
    run.inputs = Some(serde_json::json!({
        "audio": a.audio,
        "distribution": a.distribution,
        "count": a.count,
    }));
    run.validate()?;
    if a.count == 0 {
        return Err(Error::InvalidParameter("--count must be positive".into()));
    }
    let d = read_distribution(&a.distribution)?;
    let w = load_waveform(&a.audio)?;
    create_dir(&a.output_dir)?;
    let value = run.to_value();
    for i in 0..a.count {
        let seed = derive_seed(a.seed, i as u64);
        let mut rng = seeded_rng(seed);
        let segment = cut_random_segment(&w, a.segment_s, &mut rng)?;
        let chain = sample_chain(&d, &mut rng);
        let out = apply_chain(&chain, &segment)?;
        let name = format!("preview_{i:03}");
        write_waveform(a.output_dir.join(format!("{name}.wav")), &out)?;
        write_text(
            &a.output_dir.join(format!("{name}.chain.json")),
            &pretty(&ChainFile {
                run: &value,
                variant: i,
                seed,
                audio: format!("{name}.wav"),
                chain: &chain,
            }),
        )?;
    }
    println!("wrote {} variants to {}", a.count, a.output_dir.display());
    Ok(())
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum LossRecord<'a> {
    Header { run: &'a serde_json::Value, start_step: usize },
    Loss { step: usize, loss: f64 },
}

pub fn cmd_toytrain(a: &ToyTrainArgs) -> Result<(), Error> {
    let mut run = RunConfig::base("toytrain", &a.output_dir, a.seed);
    run.manifest = Some(a.manifest.clone());
    run.toy = ToyTrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        dims: EncoderDims {
            hidden: a.hidden,
            embed: a.embed,
            proj: a.proj,
        },
        bilinear_init: a.bilinear_init,
        seed: a.seed,
    };
    run.inputs = Some(serde_json::json!({
        "distribution": a.distribution,
        "resume": a.resume,
    }));
    run.validate()?;
    if a.hidden == 0 || a.embed == 0 || a.proj == 0 {
        return Err(Error::InvalidParameter("layer sizes must be positive".into()));
    }
    let d = read_distribution(&a.distribution)?;
    let data = load_data(&a.manifest)?;
    let (params, start) = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::read(path)?;
            if ck.params.dims() != run.toy.dims {
                return Err(Error::InvalidParameter(format!(
                    "checkpoint layer sizes {:?} differ from the requested {:?}",
                    ck.params.dims(),
                    run.toy.dims
                )));
            }
            (ck.params, ck.step)
        }
        None => (init_for_dataset(&data, &run.toy)?, 0),
    };
    let outcome = train_toy(&data, &d, &run.toy, params, start)?;
    create_dir(&a.output_dir)?;
    let value = run.to_value();
    let mut curve = serde_json::to_string(&LossRecord::Header {
        run: &value,
        start_step: start,
    })?;
    curve.push('\n');
    for (i, &loss) in outcome.losses.iter().enumerate() {
        curve.push_str(&serde_json::to_string(&LossRecord::Loss { step: start + i, loss })?);
        curve.push('\n');
    }
    write_text(&a.output_dir.join("losses.jsonl"), &curve)?;
    Checkpoint {
        params: outcome.params,
        step: outcome.next_step,
        run: Some(value),
    }
    .write(a.output_dir.join("checkpoint.json"))?;
    match (outcome.losses.first(), outcome.losses.last()) {
        (Some(first), Some(last)) => println!(
            "steps {}..{}: loss {first:.4} -> {last:.4} (chance ln B = {:.4})",
            start,
            outcome.next_step,
            (a.batch_size as f64).ln()
        ),
        _ => println!("checkpoint already at step {start}; nothing to run"),
    }
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs) -> Result<(), Error> {
    let base = if a.band_only {
        SynthConfig::band_only()
    } else {
        SynthConfig::default()
    };
    let cfg = SynthConfig {
        n_samples: a.samples,
        n_classes: a.classes,
        duration_s: a.duration_s,
        seed: a.seed,
        ..base
    };
    let manifest = write_corpus(&a.output_dir, &cfg)?;
    let mut run = RunConfig::base("synth", &a.output_dir, a.seed);
    run.manifest = Some(manifest.clone());
    run.inputs = Some(serde_json::to_value(cfg)?);
    write_text(&a.output_dir.join("synth.json"), &pretty(&run))?;
    println!("wrote {} samples; manifest {}", cfg.n_samples, manifest.display());
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Search(a) => cmd_search(a),
        Command::Score(a) => cmd_score(a),
        Command::Med(a) => cmd_med(a),
        Command::Preview(a) => cmd_preview(a),
        Command::Toytrain(a) => cmd_toytrain(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
