use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;
use std::sync::Arc;

use savae::augment::{Corpus, CorpusEntry};
use savae::model::ModelConfig;
use savae::synth::synth_clip;
use savae::train::{Stages, TrainConfig, Trainer};
use savae_ffi::*;

fn checkpoint(dir: &Path) -> PathBuf {
    let cfg = TrainConfig {
        model: ModelConfig::preset("tiny").unwrap(),
        stages: Stages::never(),
        ..TrainConfig::default()
    };
    let corpus = Arc::new(Corpus {
        entries: vec![CorpusEntry {
            key: "a.wav".into(),
            label: None,
            clip: synth_clip(0, 4096, 16000, 1).unwrap(),
        }],
    });
    let path = dir.join("m.slwt");
    Trainer::new(cfg, corpus, None).unwrap().save_checkpoint(&path).unwrap();
    path
}

fn load(path: &Path) -> *mut SavaeModel {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { savae_model_load(c.as_ptr(), 1, &mut m) }, SavaeStatus::Ok);
    assert!(!m.is_null());
    m
}

fn last_error() -> String {
    let p = savae_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn encode_then_decode_through_the_c_abi() {
    let dir = tempfile::tempdir().unwrap();
    let m = load(&checkpoint(dir.path()));
    let clip = synth_clip(2, 16000, 16000, 5).unwrap().samples;
    let (mut d, mut frames, mut sr) = (0usize, 0usize, 0u32);
    unsafe {
        assert_eq!(savae_latent_dim(m, &mut d), SavaeStatus::Ok);
        assert_eq!(savae_sample_rate(m, &mut sr), SavaeStatus::Ok);
        assert_eq!(savae_latent_frames(m, clip.len(), &mut frames), SavaeStatus::Ok);
    }
    assert_eq!((sr, frames), (16000, 8));
    let mut mu = vec![0f32; d * frames];
    let mut got = 0usize;
    let st = unsafe { savae_encode(m, clip.as_ptr(), clip.len(), mu.as_mut_ptr(), mu.len(), &mut got) };
    assert_eq!(st, SavaeStatus::Ok);
    assert_eq!(got, frames);
    assert!(mu.iter().all(|v| v.is_finite()) && mu.iter().any(|&v| v != 0.0));

    let mut audio = vec![f32::NAN; clip.len()];
    let st = unsafe { savae_decode(m, mu.as_ptr(), frames, audio.as_mut_ptr(), audio.len()) };
    assert_eq!(st, SavaeStatus::Ok);
    assert!(audio.iter().all(|v| v.is_finite()));
    assert!(savae_last_error().is_null());
    unsafe { savae_model_free(m) };
}

#[test]
fn failures_map_to_status_codes_with_messages() {
    let dir = tempfile::tempdir().unwrap();
    let missing = CString::new(dir.path().join("none.slwt").to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { savae_model_load(missing.as_ptr(), 0, &mut m) }, SavaeStatus::Io);
    assert!(m.is_null());
    assert!(last_error().contains("none.slwt"));
    assert_eq!(unsafe { savae_model_load(ptr::null(), 0, &mut m) }, SavaeStatus::NullPointer);

    let junk = dir.path().join("junk.slwt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { savae_model_load(junk.as_ptr(), 0, &mut m) }, SavaeStatus::Format);

    let m = load(&checkpoint(dir.path()));
    let clip = vec![0.1f32; 4096];
    let mut small = [0f32; 3];
    let mut frames = 0usize;
    let st = unsafe { savae_encode(m, clip.as_ptr(), clip.len(), small.as_mut_ptr(), small.len(), &mut frames) };
    assert_eq!(st, SavaeStatus::BufferTooSmall);
    assert!(last_error().contains("need"));

    let nan = [f32::NAN; 4096];
    let st = unsafe { savae_encode(m, nan.as_ptr(), nan.len(), small.as_mut_ptr(), small.len(), &mut frames) };
    assert_eq!(st, SavaeStatus::NonFinite);

    let mut d = 0usize;
    unsafe { savae_latent_dim(m, &mut d) };
    let z = vec![0f32; d];
    let mut audio = vec![0f32; 10_000];
    // one frame decodes to at most 8·256 samples
    let st = unsafe { savae_decode(m, z.as_ptr(), 1, audio.as_mut_ptr(), audio.len()) };
    assert_eq!(st, SavaeStatus::InvalidParam);
    assert_eq!(unsafe { savae_latent_dim(ptr::null(), &mut d) }, SavaeStatus::NullPointer);
    unsafe {
        savae_model_free(m);
        savae_model_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_the_api_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/savae.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "savae_model_load",
        "savae_model_free",
        "savae_encode",
        "savae_decode",
        "savae_last_error",
        "typedef struct SavaeModel SavaeModel",
        "SAVAE_STATUS_BUFFER_TOO_SMALL = 10",
    ] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let v = unsafe { CStr::from_ptr(savae_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));

    // syntax check with the system C compiler when there is one
    let Ok(o) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .output()
    else {
        return;
    };
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}
