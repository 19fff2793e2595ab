use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use clap::Parser;

use savae::augment::{Corpus, CorpusEntry};
use savae::cli::{train_config, Cli, EXIT_DATA, EXIT_OK, EXIT_USAGE};
use savae::dsp::{read_wav, write_wav, WavFormat};
use savae::model::latent_file::LatentFile;
use savae::model::ModelConfig;
use savae::synth::synth_clip;
use savae::train::{Stages, TrainConfig, Trainer};

fn savae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_savae")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Fresh tiny checkpoint plus a 1 s tonal WAV.
fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let clip = synth_clip(0, 16000, 16000, 4).unwrap();
    let wav = dir.join("tone.wav");
    write_wav(&wav, &clip, WavFormat::Float32).unwrap();
    let cfg = TrainConfig {
        model: ModelConfig::preset("tiny").unwrap(),
        stages: Stages::never(),
        ..TrainConfig::default()
    };
    let corpus = Arc::new(Corpus {
        entries: vec![CorpusEntry {
            key: "tone.wav".into(),
            label: None,
            clip,
        }],
    });
    let ckpt = dir.join("init.slwt");
    Trainer::new(cfg, corpus, None).unwrap().save_checkpoint(&ckpt).unwrap();
    (ckpt, wav)
}

#[test]
fn decode_of_encode_keeps_length_and_latent_shape() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, wav) = fixture(dir.path());
    let slz = dir.path().join("a.slz");
    let out = dir.path().join("a.wav");
    let o = savae(&["encode", s(&wav), "--checkpoint", s(&ckpt), "--out", s(&slz)]);
    assert_eq!(o.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&o.stderr));
    let o = savae(&["decode", s(&slz), "--checkpoint", s(&ckpt), "--length", "16000", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_wav(&out).unwrap().len(), 16000);

    // decoding without a length gives 8·M·hop samples; re-encoding that keeps M and D
    let full = dir.path().join("full.wav");
    let again = dir.path().join("b.slz");
    assert_eq!(savae(&["decode", s(&slz), "--checkpoint", s(&ckpt), "--out", s(&full)]).status.code(), Some(0));
    assert_eq!(savae(&["encode", s(&full), "--checkpoint", s(&ckpt), "--out", s(&again)]).status.code(), Some(0));
    let (a, b) = (LatentFile::load(&slz).unwrap(), LatentFile::load(&again).unwrap());
    assert_eq!((a.dim, a.frames), (b.dim, b.frames));
    assert_eq!(read_wav(&full).unwrap().len(), 8 * a.frames * 256);
}

#[test]
fn grad_check_passes_and_reports_its_error() {
    let o = savae(&["grad-check"]);
    assert_eq!(o.status.code(), Some(EXIT_OK));
    let text = String::from_utf8(o.stdout).unwrap();
    let last = text.lines().last().unwrap();
    let err: f64 = last.strip_prefix("max_rel_err ").unwrap().parse().unwrap();
    assert!(err < 1e-6, "{last}");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = savae(&["encode", "--bogus"]);
    assert_eq!(o.status.code(), Some(EXIT_USAGE));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(savae(&["no-such-command"]).status.code(), Some(EXIT_USAGE));
}

#[test]
fn missing_input_is_a_data_error_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = fixture(dir.path());
    let missing = dir.path().join("nothing.slz");
    let o = savae(&["decode", s(&missing), "--checkpoint", s(&ckpt), "--out", s(&dir.path().join("x.wav"))]);
    assert_eq!(o.status.code(), Some(EXIT_DATA));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nothing.slz"));
}

#[test]
fn seeded_outputs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let c = dir.path().join(name);
        assert_eq!(
            savae(&["synth-corpus", "--per-class", "1", "--length", "4000", "--seed", seed, "--out", s(&c)]).status.code(),
            Some(0)
        );
        let t = dir.path().join(format!("{name}.salt"));
        let m = c.join("manifest.tsv");
        assert_eq!(savae(&["synth-teacher", "--manifest", s(&m), "--seed", seed, "--out", s(&t)]).status.code(), Some(0));
        (
            std::fs::read(c.join("noise/noise_0000.wav")).unwrap(),
            std::fs::read(t).unwrap(),
        )
    };
    let a = run("a", "7");
    assert_eq!(a, run("b", "7"));
    let c = run("c", "8");
    assert_ne!(a.0, c.0);
    assert_ne!(a.1, c.1);
}

#[test]
fn flags_override_config_file_over_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, r#"{"seed": 11, "max_steps": 55, "workers": 3}"#).unwrap();
    let c = s(&path);
    let cfg = train_config(&Cli::parse_from(["savae", "--config", c, "train", "--manifest", "m.tsv"])).unwrap();
    assert_eq!((cfg.seed, cfg.max_steps, cfg.workers), (11, 55, 3));
    assert_eq!(cfg.checkpoint_every, TrainConfig::default().checkpoint_every);
    let cfg = train_config(&Cli::parse_from([
        "savae", "--config", c, "--seed", "2", "--preset", "tiny", "train", "--steps", "9",
    ]))
    .unwrap();
    assert_eq!((cfg.seed, cfg.max_steps, cfg.workers), (2, 9, 3));
    assert_eq!(cfg.model, ModelConfig::preset("tiny").unwrap());

    std::fs::write(&path, r#"{"no_such_field": 1}"#).unwrap();
    let o = savae(&["--config", c, "train"]);
    assert_eq!(o.status.code(), Some(EXIT_USAGE));
}

#[test]
fn rf_report_prints_the_analytic_field() {
    let o = savae(&["rf-report", "--analytic-only", "--preset", "small64"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("analytic_frames 349"), "{text}");
}
