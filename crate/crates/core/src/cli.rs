//! Command-line front end. Settings resolve as built-in defaults, then the
//! `--config` file, then flags.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::augment::{parse_manifest, Corpus};
use crate::dsp::{read_wav, write_wav, WavFormat};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, ProbeConfig, ProbeTask};
use crate::gradsuite;
use crate::model::latent_file::LatentFile;
use crate::model::rf::{encoder_frames, encoder_seconds, probe_frames, probe_length};
use crate::model::{Model, ModelConfig, TIME_FACTOR};
use crate::synth::{synth_corpus, write_corpus};
use crate::teacher::{synth_teacher, TeacherStore};
use crate::tensor::ParamStore;
use crate::train::{self, TrainConfig, WeightSet};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "savae", version, about = "Semantic audio VAE: train, encode, decode and evaluate")]
pub struct Cli {
    /// JSON training configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_parser = ModelConfig::presets())]
    pub preset: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Use the EMA weights instead of the raw ones.
    #[arg(long)]
    pub ema: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; `--out` is the run directory.
    Train {
        #[arg(long, value_name = "PATH")]
        manifest: Option<PathBuf>,
        /// SALT teacher store.
        #[arg(long, value_name = "PATH")]
        teacher: Option<PathBuf>,
        #[arg(long, value_name = "N")]
        steps: Option<u64>,
        #[arg(long, value_name = "N")]
        checkpoint_every: Option<u64>,
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Encode a WAV to an SLZ1 latent file (μ only).
    Encode {
        input: PathBuf,
        #[command(flatten)]
        ckpt: CheckpointArgs,
    },
    /// Decode an SLZ1 latent file to WAV.
    Decode {
        input: PathBuf,
        #[command(flatten)]
        ckpt: CheckpointArgs,
        /// Output length in samples; defaults to 8·M·hop.
        #[arg(long, value_name = "SAMPLES")]
        length: Option<usize>,
    },
    /// Encode and decode a WAV and print reconstruction metrics.
    Roundtrip {
        input: PathBuf,
        #[command(flatten)]
        ckpt: CheckpointArgs,
    },
    /// Train a probe on pooled latents of a labelled manifest.
    Probe {
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
        #[command(flatten)]
        ckpt: CheckpointArgs,
        /// Labels are comma-separated class lists.
        #[arg(long)]
        multi_label: bool,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        test_fraction: Option<f64>,
    },
    /// Classify a labelled manifest against the `text:` records of a teacher store.
    Zeroshot {
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
        #[arg(long, value_name = "PATH")]
        teacher: PathBuf,
        #[command(flatten)]
        ckpt: CheckpointArgs,
        /// Write per-clip predictions as CSV.
        #[arg(long, value_name = "PATH")]
        predictions: Option<PathBuf>,
    },
    /// Write a synthetic teacher store for a labelled manifest.
    SynthTeacher {
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long, default_value_t = 1024)]
        dim: usize,
    },
    /// Write a labelled synthetic corpus (tonal, noise, chirp, percussive).
    SynthCorpus {
        #[arg(long, default_value_t = 8)]
        per_class: usize,
        #[arg(long, default_value_t = 16000, value_name = "SAMPLES")]
        length: usize,
    },
    /// Finite-difference check of every operator, block and loss.
    GradCheck,
    /// Analytic and probed encoder receptive field.
    RfReport {
        /// Use trained weights instead of a random initialisation.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        analytic_only: bool,
    },
    /// Write one SLZ1 file per manifest entry under `--out`.
    ExportLatents {
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
        #[command(flatten)]
        ckpt: CheckpointArgs,
    },
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidParam(_) => EXIT_USAGE,
        Error::NonFinite(_) | Error::Autodiff(_) => EXIT_NUMERIC,
        Error::Shape { .. } | Error::Io { .. } | Error::Format { .. } | Error::Data(_) | Error::Wav { .. } => EXIT_DATA,
    }
}

/// Parse `argv` (including the program name), run, and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn require_out<'a>(cli: &'a Cli, what: &str) -> Result<&'a Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| Error::Config(format!("--out is required ({what})")))
}

fn load(ckpt: &CheckpointArgs) -> Result<(Model, ParamStore<f32>)> {
    let which = if ckpt.ema { WeightSet::Ema } else { WeightSet::Raw };
    train::load_generator(&ckpt.checkpoint, which)
}

fn report_header(ckpt: &CheckpointArgs) -> Result<EvalReport> {
    Ok(EvalReport {
        checkpoint_id: eval::checkpoint_id(&ckpt.checkpoint)?,
        config_digest: train::checkpoint_config(&ckpt.checkpoint)?.digest(),
        metrics: Vec::new(),
    })
}

fn emit_report(cli: &Cli, report: &EvalReport) -> Result<()> {
    match &cli.out {
        Some(p) => report.save(p),
        None => {
            println!("{}", report.to_json());
            Ok(())
        }
    }
}

fn load_corpus(manifest: &Path, sample_rate: u32) -> Result<Corpus> {
    let rep = Corpus::load_manifest(manifest, sample_rate)?;
    for (k, why) in &rep.skipped {
        eprintln!("skipped {k}: {why}");
    }
    if rep.corpus.is_empty() {
        return Err(Error::Data(format!("{}: no readable entries", manifest.display())));
    }
    Ok(rep.corpus)
}

fn labelled(corpus: &Corpus, manifest: &Path) -> Result<Vec<String>> {
    corpus
        .entries
        .iter()
        .map(|e| {
            e.label
                .clone()
                .ok_or_else(|| Error::Data(format!("{}: entry {} has no label", manifest.display(), e.key)))
        })
        .collect()
}

/// Training configuration after applying the config file and flags.
pub fn train_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(p) = &cli.preset {
        cfg.model = ModelConfig::preset(p)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Command::Train {
        manifest,
        teacher,
        steps,
        checkpoint_every,
        ..
    } = &cli.command
    {
        if let Some(m) = manifest {
            cfg.train_manifest = Some(m.clone());
        }
        if let Some(t) = teacher {
            cfg.teacher_file = Some(t.clone());
        }
        if let Some(s) = steps {
            cfg.max_steps = *s;
        }
        if let Some(c) = checkpoint_every {
            cfg.checkpoint_every = *c;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<i32> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Train { resume, .. } => {
            let cfg = train_config(cli)?;
            let s = train::fit(cfg, resume.as_deref())?;
            for (k, why) in &s.skipped_files {
                eprintln!("skipped {k}: {why}");
            }
            println!(
                "{}",
                serde_json::json!({
                    "steps": s.steps,
                    "skipped_steps": s.skipped_steps,
                    "skipped_files": s.skipped_files.len(),
                    "checkpoint": s.checkpoints.last(),
                    "final": s.final_record,
                })
            );
        }
        Command::Encode { input, ckpt } => {
            let out = require_out(cli, "SLZ1 output file")?;
            let (model, params) = load(ckpt)?;
            let clip = read_wav(input)?;
            let code = model.encode_mean(&params, &clip)?;
            LatentFile {
                sample_rate: model.cfg.sample_rate,
                hop: model.cfg.hop() as u32,
                time_factor: TIME_FACTOR as u32,
                dim: code.dim,
                frames: code.frames,
                mu: code.mu,
            }
            .save(out)?;
        }
        Command::Decode { input, ckpt, length } => {
            let out = require_out(cli, "WAV output file")?;
            let (model, params) = load(ckpt)?;
            let lat = LatentFile::load(input)?;
            let cfg = &model.cfg;
            if lat.dim != cfg.latent_dim
                || lat.sample_rate != cfg.sample_rate
                || lat.hop as usize != cfg.hop()
                || lat.time_factor as usize != TIME_FACTOR
            {
                return Err(Error::Data(format!(
                    "{}: latent D={} at {} Hz hop {} ×{} does not match the checkpoint (D={} at {} Hz hop {} ×{TIME_FACTOR})",
                    input.display(),
                    lat.dim,
                    lat.sample_rate,
                    lat.hop,
                    lat.time_factor,
                    cfg.latent_dim,
                    cfg.sample_rate,
                    cfg.hop()
                )));
            }
            let clip = model.decode_latent(&params, &lat.mu, lat.frames, *length)?;
            write_wav(out, &clip, WavFormat::Float32)?;
        }
        Command::Roundtrip { input, ckpt } => {
            let (model, params) = load(ckpt)?;
            let clip = read_wav(input)?;
            let rec = model.reconstruct(&params, &clip)?;
            let m = eval::recon_metrics(&clip.samples, &rec.samples)?;
            if let Some(o) = &cli.out {
                write_wav(o, &rec, WavFormat::Float32)?;
            }
            println!("{}", serde_json::json!({ "si_sdr_db": m.si_sdr_db, "mrstft": m.mrstft }));
        }
        Command::Probe {
            manifest,
            ckpt,
            multi_label,
            hidden,
            epochs,
            lr,
            test_fraction,
        } => {
            let (model, params) = load(ckpt)?;
            let corpus = load_corpus(manifest, model.cfg.sample_rate)?;
            let raw = labelled(&corpus, manifest)?;
            let split = |l: &str| -> Vec<String> {
                if *multi_label {
                    l.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
                } else {
                    vec![l.to_string()]
                }
            };
            let classes: Vec<String> = raw.iter().flat_map(|l| split(l)).collect::<BTreeSet<_>>().into_iter().collect();
            let labels: Vec<Vec<usize>> = raw
                .iter()
                .map(|l| {
                    let mut v: Vec<usize> = split(l)
                        .iter()
                        .map(|c| classes.binary_search(c).expect("class collected above"))
                        .collect();
                    v.sort_unstable();
                    v.dedup();
                    v
                })
                .collect();
            let mut pc = ProbeConfig {
                seed,
                task: if *multi_label { ProbeTask::MultiLabel } else { ProbeTask::SingleLabel },
                ..ProbeConfig::default()
            };
            if let Some(h) = hidden {
                pc.hidden = *h;
            }
            if let Some(e) = epochs {
                pc.epochs = *e;
            }
            if let Some(l) = lr {
                pc.lr = *l;
            }
            if let Some(t) = test_fraction {
                pc.test_fraction = *t;
            }
            let latents = corpus
                .entries
                .iter()
                .map(|e| model.pooled_mu(&params, &e.clip))
                .collect::<Result<Vec<_>>>()?;
            let r = eval::probe(&latents, &labels, classes.len(), &pc)?;
            let mut report = report_header(ckpt)?;
            if let Some(a) = r.accuracy {
                report.push("probe", "accuracy", Some(a), r.n_test, seed);
            }
            report.push("probe", "mAP", Some(r.map), r.n_test, seed);
            emit_report(cli, &report)?;
        }
        Command::Zeroshot {
            manifest,
            teacher,
            ckpt,
            predictions,
        } => {
            let (model, params) = load(ckpt)?;
            let store = TeacherStore::load(teacher)?;
            let corpus = load_corpus(manifest, model.cfg.sample_rate)?;
            let raw = labelled(&corpus, manifest)?;
            let embeddings = corpus
                .entries
                .iter()
                .map(|e| model.embed(&params, &e.clip).map(|(_, pl)| pl))
                .collect::<Result<Vec<_>>>()?;
            let (names, zs) = eval::zero_shot_store(&embeddings, &store)?;
            let truth = raw
                .iter()
                .map(|l| {
                    names.iter().position(|n| n == l).ok_or_else(|| {
                        Error::Data(format!("{}: label {l:?} has no text:{l} record", teacher.display()))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mut report = report_header(ckpt)?;
            let n = truth.len();
            report.push("zeroshot", "accuracy", Some(zs.accuracy(&truth)?), n, seed);
            report.push("zeroshot", "mAP", Some(zs.map(&truth)?), n, seed);
            if let Some(p) = predictions {
                let rows: Vec<(String, String, f64)> = corpus
                    .entries
                    .iter()
                    .zip(&zs.predictions)
                    .map(|(e, &(k, s))| (e.key.clone(), names[k].clone(), s))
                    .collect();
                eval::write_predictions_csv(p, &rows)?;
            }
            emit_report(cli, &report)?;
        }
        Command::SynthTeacher { manifest, sigma, dim } => {
            let out = require_out(cli, "SALT output file")?;
            let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
            let entries = parse_manifest(&text);
            let mut classes: Vec<String> = entries.iter().filter_map(|(_, l)| l.clone()).collect();
            classes.sort();
            classes.dedup();
            let clips = entries
                .iter()
                .map(|(k, l)| match l {
                    Some(l) => Ok((k.clone(), classes.binary_search(l).expect("class collected above"))),
                    None => Err(Error::Data(format!("{}: entry {k} has no label", manifest.display()))),
                })
                .collect::<Result<Vec<_>>>()?;
            synth_teacher(&clips, &classes, *dim, seed, *sigma)?.save(out)?;
        }
        Command::SynthCorpus { per_class, length } => {
            let out = require_out(cli, "corpus directory")?;
            let m = write_corpus(&synth_corpus(*per_class, *length, 16000, seed)?, out)?;
            println!("{}", m.display());
        }
        Command::GradCheck => {
            let res = gradsuite::run(seed)?;
            let mut worst = 0.0f64;
            for (name, err) in &res {
                println!("{name} {err:.3e}");
                worst = if err.is_nan() { f64::NAN } else { worst.max(*err) };
            }
            println!("max_rel_err {worst:.3e}");
            if !(worst < gradsuite::TOLERANCE) {
                eprintln!("error: max relative error above {:e}", gradsuite::TOLERANCE);
                return Ok(EXIT_NUMERIC);
            }
        }
        Command::RfReport {
            checkpoint,
            analytic_only,
        } => {
            let (model, params) = match checkpoint {
                Some(p) => train::load_generator(p, WeightSet::Raw)?,
                None => Model::new::<f32>(ModelConfig::preset(cli.preset.as_deref().unwrap_or("tiny"))?, seed)?,
            };
            let cfg = &model.cfg;
            let frames = encoder_frames(cfg);
            println!("preset {}", cfg.name);
            println!("analytic_frames {frames}");
            println!("analytic_seconds {:.4}", encoder_seconds(cfg));
            if !analytic_only {
                let probed = probe_frames(&model, &params, probe_length(cfg), seed)?;
                println!("probed_frames {probed}");
                println!(
                    "probed_seconds {:.4}",
                    (probed * cfg.hop()) as f64 / cfg.sample_rate as f64
                );
                if probed > frames {
                    eprintln!("error: probed receptive field exceeds the analytic bound");
                    return Ok(EXIT_NUMERIC);
                }
            }
        }
        Command::ExportLatents { manifest, ckpt } => {
            let out = require_out(cli, "latent directory")?;
            let (model, params) = load(ckpt)?;
            let corpus = load_corpus(manifest, model.cfg.sample_rate)?;
            let mut index = String::new();
            for e in &corpus.entries {
                let code = model.encode_mean(&params, &e.clip)?;
                let rel = PathBuf::from(format!("{}.slz", e.key));
                let path = out.join(&rel);
                if let Some(p) = path.parent() {
                    std::fs::create_dir_all(p).map_err(|err| Error::io(p, err))?;
                }
                LatentFile {
                    sample_rate: model.cfg.sample_rate,
                    hop: model.cfg.hop() as u32,
                    time_factor: TIME_FACTOR as u32,
                    dim: code.dim,
                    frames: code.frames,
                    mu: code.mu,
                }
                .save(&path)?;
                index.push_str(&format!("{}\t{}\t{}\n", e.key, rel.display(), e.label.as_deref().unwrap_or("")));
            }
            let p = out.join("index.tsv");
            std::fs::write(&p, index).map_err(|err| Error::io(&p, err))?;
        }
    }
    Ok(EXIT_OK)
}

