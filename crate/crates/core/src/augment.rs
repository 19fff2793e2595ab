//! Training-example construction: source cropping, per-source
//! augmentation, mix-down, microphone degradation, positive pairs and batch
//! assembly.
//!
//! Every random draw comes from a seed derived from
//! `(global seed, epoch, batch, slot)`, so batch contents do not depend on
//! which worker built them.

use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::effects;
use crate::dsp::{read_wav, AudioClip};
use crate::error::{Error, Result};

/// splitmix64 finaliser.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based seed from a tuple of integers.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5A1A_D5EE_D000_0001, |acc, &p| mix64(acc ^ mix64(p)))
}

fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

/// Closed interval `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub lo: f64,
    pub hi: f64,
}

impl Span {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.gen_range(self.lo..=self.hi)
        }
    }
}

fn check_effect(name: &str, p: f64, spans: &[Span]) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("{name}: probability {p} outside [0, 1]")));
    }
    for s in spans {
        if !(s.lo.is_finite() && s.hi.is_finite() && s.lo <= s.hi) {
            return Err(Error::Config(format!("{name}: bad range [{}, {}]", s.lo, s.hi)));
        }
        if p > 0.0 && s.lo == s.hi {
            return Err(Error::Config(format!("{name}: degenerate range with probability {p}")));
        }
    }
    Ok(())
}

/// Per-source effects, applied in field order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceAugSpec {
    pub p_pitch: f64,
    pub pitch_semitones: Span,
    pub p_eq: f64,
    pub eq_bands: usize,
    pub eq_db: Span,
    pub p_reverb: f64,
    pub rt60_s: Span,
    pub reverb_wet: Span,
    pub p_time_shift: f64,
    /// Circular shift as a fraction of the clip length.
    pub time_shift: Span,
    pub p_level_jump: f64,
    pub level_jump_db: Span,
    /// RMS normalisation to a random level (dBFS).
    pub p_loudness: f64,
    pub loudness_db: Span,
}

impl Default for SourceAugSpec {
    fn default() -> Self {
        Self {
            p_pitch: 0.3,
            pitch_semitones: Span::new(-3.0, 3.0),
            p_eq: 0.5,
            eq_bands: 6,
            eq_db: Span::new(-9.0, 9.0),
            p_reverb: 0.3,
            rt60_s: Span::new(0.1, 0.8),
            reverb_wet: Span::new(0.05, 0.4),
            p_time_shift: 0.5,
            time_shift: Span::new(-0.5, 0.5),
            p_level_jump: 0.2,
            level_jump_db: Span::new(-12.0, 6.0),
            p_loudness: 1.0,
            loudness_db: Span::new(-30.0, -10.0),
        }
    }
}

impl SourceAugSpec {
    /// Every probability zero.
    pub fn identity() -> Self {
        Self {
            p_pitch: 0.0,
            p_eq: 0.0,
            p_reverb: 0.0,
            p_time_shift: 0.0,
            p_level_jump: 0.0,
            p_loudness: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_effect("pitch", self.p_pitch, &[self.pitch_semitones])?;
        check_effect("eq", self.p_eq, &[self.eq_db])?;
        if self.p_eq > 0.0 && !(1..=32).contains(&self.eq_bands) {
            return Err(Error::Config(format!("eq: {} bands outside 1..=32", self.eq_bands)));
        }
        check_effect("reverb", self.p_reverb, &[self.rt60_s, self.reverb_wet])?;
        check_effect("time shift", self.p_time_shift, &[self.time_shift])?;
        check_effect("level jump", self.p_level_jump, &[self.level_jump_db])?;
        check_effect("loudness", self.p_loudness, &[self.loudness_db])
    }

    pub fn apply(&self, clip: &AudioClip, rng: &mut ChaCha8Rng) -> Result<AudioClip> {
        let mut x = clip.clone();
        if rng.gen_bool(self.p_pitch) {
            x = effects::pitch_shift(&x, self.pitch_semitones.draw(rng))?;
        }
        if rng.gen_bool(self.p_eq) {
            let gains: Vec<f64> = (0..self.eq_bands).map(|_| self.eq_db.draw(rng)).collect();
            x = effects::apply_eq(&x, &gains)?;
        }
        if rng.gen_bool(self.p_reverb) {
            let ir = effects::decay_ir(x.sample_rate, self.rt60_s.draw(rng), self.reverb_wet.draw(rng), rng.gen())?;
            x = effects::apply_reverb(&x, &ir)?;
        }
        if rng.gen_bool(self.p_time_shift) {
            let k = (self.time_shift.draw(rng) * x.len() as f64).round() as i64;
            x = effects::time_shift(&x, k, true)?;
        }
        if rng.gen_bool(self.p_level_jump) {
            let at = rng.gen_range(0..=x.len());
            x = effects::level_jump(&x, at, self.level_jump_db.draw(rng))?;
        }
        if rng.gen_bool(self.p_loudness) {
            x = effects::normalize_rms(&x, self.loudness_db.draw(rng))?;
        }
        Ok(x)
    }
}

/// Microphone-style degradations, applied in field order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MicDegradeSpec {
    pub p_mask: f64,
    /// Width of the masked band as a fraction of Nyquist.
    pub mask_width: Span,
    pub p_codec: f64,
    pub codec_bits: Span,
    pub codec_cutoff_hz: Span,
    pub p_bandpass: f64,
    pub bandpass_lo_hz: Span,
    pub bandpass_hi_hz: Span,
    pub p_distort: f64,
    pub drive: Span,
    pub p_level: f64,
    pub level_db: Span,
}

impl Default for MicDegradeSpec {
    fn default() -> Self {
        Self {
            p_mask: 0.2,
            mask_width: Span::new(0.02, 0.1),
            p_codec: 0.2,
            codec_bits: Span::new(8.0, 12.0),
            codec_cutoff_hz: Span::new(3500.0, 8000.0),
            p_bandpass: 0.3,
            bandpass_lo_hz: Span::new(50.0, 300.0),
            bandpass_hi_hz: Span::new(3000.0, 8000.0),
            p_distort: 0.2,
            drive: Span::new(1.0, 5.0),
            p_level: 0.3,
            level_db: Span::new(-6.0, 6.0),
        }
    }
}

impl MicDegradeSpec {
    pub fn identity() -> Self {
        Self {
            p_mask: 0.0,
            p_codec: 0.0,
            p_bandpass: 0.0,
            p_distort: 0.0,
            p_level: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_effect("spectral mask", self.p_mask, &[self.mask_width])?;
        check_effect("codec", self.p_codec, &[self.codec_bits, self.codec_cutoff_hz])?;
        check_effect("bandpass", self.p_bandpass, &[self.bandpass_lo_hz, self.bandpass_hi_hz])?;
        check_effect("distortion", self.p_distort, &[self.drive])?;
        check_effect("level", self.p_level, &[self.level_db])
    }

    pub fn apply(&self, clip: &AudioClip, rng: &mut ChaCha8Rng) -> Result<AudioClip> {
        let mut x = clip.clone();
        let ny = x.sample_rate as f64 / 2.0;
        if rng.gen_bool(self.p_mask) {
            let w = self.mask_width.draw(rng);
            let lo = rng.gen_range(0.0..(1.0 - w).max(1e-9));
            x = effects::spectral_mask_clip(&x, lo, (lo + w).min(1.0))?;
        }
        if rng.gen_bool(self.p_codec) {
            let bits = self.codec_bits.draw(rng).round() as u32;
            x = effects::codec_sim(&x, bits, self.codec_cutoff_hz.draw(rng).min(ny))?;
        }
        if rng.gen_bool(self.p_bandpass) {
            let lo = self.bandpass_lo_hz.draw(rng);
            let hi = self.bandpass_hi_hz.draw(rng).min(ny);
            x = effects::bandpass(&x, lo.min(hi * 0.5), hi)?;
        }
        if rng.gen_bool(self.p_distort) {
            x = effects::distort(&x, self.drive.draw(rng))?;
        }
        if rng.gen_bool(self.p_level) {
            x = effects::gain(&x, self.level_db.draw(rng))?;
        }
        Ok(x)
    }
}

/// `sign(x)·(1 + 0.5·tanh(2(|x| − 1)))` above unit magnitude: continuous
/// with slope 1 at ±1, bounded by 1.5.
pub fn soft_clip(x: f32) -> f32 {
    let a = x.abs();
    if a <= 1.0 {
        x
    } else {
        x.signum() * (1.0 + 0.5 * (2.0 * (a - 1.0)).tanh())
    }
}

/// Random crop of `len` samples; shorter clips are looped first.
pub fn crop(clip: &AudioClip, len: usize, rng: &mut ChaCha8Rng) -> Result<AudioClip> {
    if clip.is_empty() || len == 0 {
        return Err(Error::Data("cannot crop an empty clip or to zero length".into()));
    }
    let n = clip.len();
    let start = if n > len { rng.gen_range(0..=n - len) } else { 0 };
    let samples = (0..len).map(|i| clip.samples[(start + i) % n]).collect();
    Ok(clip.with_samples(samples))
}

/// `Σₙ 𝒜ₙ(sₙ)` with independent draws per source, then soft clipping.
/// Sources must already share one length.
pub fn mix_sources(sources: &[AudioClip], spec: &SourceAugSpec, seed: u64) -> Result<AudioClip> {
    let first = sources
        .first()
        .ok_or_else(|| Error::Data("mix_sources: empty source list".into()))?;
    if sources.iter().any(|s| s.len() != first.len() || s.sample_rate != first.sample_rate) {
        return Err(Error::Data("mix_sources: sources differ in length or rate".into()));
    }
    let mut acc = vec![0.0f32; first.len()];
    for (n, s) in sources.iter().enumerate() {
        let mut rng = rng_for(&[seed, n as u64]);
        let a = spec.apply(s, &mut rng)?;
        acc.iter_mut().zip(&a.samples).for_each(|(o, v)| *o += v);
    }
    if acc.iter().any(|v| v.abs() > 1.0) {
        acc.iter_mut().for_each(|v| *v = soft_clip(*v));
    }
    AudioClip::new(acc, first.sample_rate)
}

/// Pure function of `(clip, spec, seed)`.
pub fn degrade(clip: &AudioClip, spec: &MicDegradeSpec, seed: u64) -> Result<AudioClip> {
    spec.apply(clip, &mut rng_for(&[seed, 0xDE6]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    /// Clean target.
    pub x: AudioClip,
    /// Degraded input.
    pub y: AudioClip,
    /// Corpus indices of the mixed sources, in mixing order.
    pub sources: Vec<usize>,
    pub source_set_id: u64,
    pub pair_id: u64,
}

fn set_id(sources: &[usize]) -> u64 {
    derive_seed(&sources.iter().map(|&s| s as u64).collect::<Vec<_>>())
}

/// One example from already-cropped sources.
pub fn make_example(
    cropped: &[AudioClip],
    sources: Vec<usize>,
    aug: &SourceAugSpec,
    mic: &MicDegradeSpec,
    seed: u64,
    pair_id: u64,
) -> Result<TrainExample> {
    let x = mix_sources(cropped, aug, derive_seed(&[seed, 1]))?;
    let y = degrade(&x, mic, derive_seed(&[seed, 2]))?;
    Ok(TrainExample {
        x,
        y,
        source_set_id: set_id(&sources),
        sources,
        pair_id,
    })
}

/// Two views of the same cropped sources with independent augmentation and
/// degradation draws.
pub fn make_positive_pair(
    cropped: &[AudioClip],
    sources: Vec<usize>,
    aug: &SourceAugSpec,
    mic: &MicDegradeSpec,
    seed: u64,
) -> Result<(TrainExample, TrainExample)> {
    let pair_id = derive_seed(&[seed, 0x9A1]);
    let a = make_example(cropped, sources.clone(), aug, mic, derive_seed(&[seed, 10]), pair_id)?;
    let b = make_example(cropped, sources, aug, mic, derive_seed(&[seed, 11]), pair_id)?;
    Ok((a, b))
}

/// One corpus entry; `key` is the path as written in the manifest.
#[derive(Clone, Debug)]
pub struct CorpusEntry {
    pub key: String,
    pub label: Option<String>,
    pub clip: AudioClip,
}

#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub entries: Vec<CorpusEntry>,
}

/// `(path, label)` lines of a manifest; `#` starts a comment line.
pub fn parse_manifest(text: &str) -> Vec<(String, Option<String>)> {
    text.lines()
        .map(str::trim_end)
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|l| match l.split_once('\t') {
            Some((p, lab)) if !lab.trim().is_empty() => (p.trim().to_string(), Some(lab.trim().to_string())),
            Some((p, _)) => (p.trim().to_string(), None),
            None => (l.trim().to_string(), None),
        })
        .collect()
}

/// Entries of a corpus load: what was read and what had to be skipped.
#[derive(Debug)]
pub struct LoadReport {
    pub corpus: Corpus,
    pub skipped: Vec<(String, String)>,
}

impl Corpus {
    /// Read every WAV named in a manifest; relative paths resolve against
    /// the manifest's directory. Unreadable entries are skipped and listed.
    pub fn load_manifest(path: &Path, sample_rate: u32) -> Result<LoadReport> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut corpus = Corpus::default();
        let mut skipped = Vec::new();
        for (key, label) in parse_manifest(&text) {
            let p = PathBuf::from(&key);
            let full = if p.is_absolute() { p } else { base.join(p) };
            match read_wav(&full) {
                Ok(c) if c.sample_rate != sample_rate => {
                    skipped.push((key, format!("sample rate {} Hz, expected {sample_rate}", c.sample_rate)))
                }
                Ok(c) if c.is_empty() => skipped.push((key, "empty clip".into())),
                Ok(clip) => corpus.entries.push(CorpusEntry { key, label, clip }),
                Err(e) => skipped.push((key, e.to_string())),
            }
        }
        Ok(LoadReport { corpus, skipped })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sorted distinct labels.
    pub fn labels(&self) -> Vec<String> {
        let mut l: Vec<String> = self.entries.iter().filter_map(|e| e.label.clone()).collect();
        l.sort();
        l.dedup();
        l
    }
}

/// Batch layout shared by all workers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchSpec {
    pub batch_size: usize,
    pub pairing: bool,
    /// Sources per example are drawn uniformly from `1..=max_sources`.
    pub max_sources: usize,
    /// Training crop length in samples.
    pub clip_len: usize,
    pub aug: SourceAugSpec,
    pub mic: MicDegradeSpec,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self {
            batch_size: 8,
            pairing: true,
            max_sources: 2,
            clip_len: 16000,
            aug: SourceAugSpec::default(),
            mic: MicDegradeSpec::default(),
        }
    }
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || (self.pairing && !self.batch_size.is_multiple_of(2)) {
            return Err(Error::Config(format!(
                "batch size {} must be positive (and even with pairing)",
                self.batch_size
            )));
        }
        if self.max_sources == 0 || self.clip_len == 0 {
            return Err(Error::Config("max_sources and clip_len must be positive".into()));
        }
        if self.aug.p_pitch > 0.0 && self.clip_len <= effects::PITCH_WIN {
            return Err(Error::Config(format!(
                "pitch shifting needs clips longer than {} samples",
                effects::PITCH_WIN
            )));
        }
        self.aug.validate()?;
        self.mic.validate()
    }

    fn groups(&self) -> usize {
        if self.pairing {
            self.batch_size / 2
        } else {
            self.batch_size
        }
    }
}

/// Build batch `batch` of `epoch`. Source sets within a batch are disjoint.
pub fn batch_builder(corpus: &Corpus, spec: &BatchSpec, seed: u64, epoch: u64, batch: u64) -> Result<Vec<TrainExample>> {
    spec.validate()?;
    let groups = spec.groups();
    let mut rng = rng_for(&[seed, epoch, batch, u64::MAX]);
    let counts: Vec<usize> = (0..groups).map(|_| rng.gen_range(1..=spec.max_sources)).collect();
    let need: usize = counts.iter().sum();
    if corpus.len() < need {
        return Err(Error::Data(format!(
            "batch needs {need} distinct sources, corpus has {}",
            corpus.len()
        )));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    let mut out = Vec::with_capacity(spec.batch_size);
    let mut next = 0;
    for (slot, &n) in counts.iter().enumerate() {
        let sources = order[next..next + n].to_vec();
        next += n;
        let slot_seed = derive_seed(&[seed, epoch, batch, slot as u64]);
        let mut crop_rng = rng_for(&[slot_seed, 0xC0]);
        let cropped = sources
            .iter()
            .map(|&i| crop(&corpus.entries[i].clip, spec.clip_len, &mut crop_rng))
            .collect::<Result<Vec<_>>>()?;
        if spec.pairing {
            let (a, b) = make_positive_pair(&cropped, sources, &spec.aug, &spec.mic, slot_seed)?;
            out.push(a);
            out.push(b);
        } else {
            out.push(make_example(&cropped, sources, &spec.aug, &spec.mic, slot_seed, slot_seed)?);
        }
    }
    Ok(out)
}

/// Batches for consecutive indices, optionally built ahead by worker
/// threads. Worker `w` builds every batch with `(index − start) % workers == w` and
/// hands it over through its own bounded channel, so delivery order and
/// content match the single-threaded stream.
pub struct BatchStream {
    corpus: Arc<Corpus>,
    spec: BatchSpec,
    seed: u64,
    start: u64,
    next: u64,
    workers: Vec<(Receiver<Result<Vec<TrainExample>>>, JoinHandle<()>)>,
}

/// Batches per epoch for batch index bookkeeping.
fn epoch_of(index: u64) -> (u64, u64) {
    (index / 1_000_000, index % 1_000_000)
}

impl BatchStream {
    pub fn new(corpus: Arc<Corpus>, spec: BatchSpec, seed: u64, start: u64, workers: usize, depth: usize) -> Result<Self> {
        spec.validate()?;
        let mut handles = Vec::new();
        if workers > 1 {
            for w in 0..workers as u64 {
                let (tx, rx) = sync_channel(depth.max(1));
                let (c, s) = (corpus.clone(), spec.clone());
                let h = std::thread::spawn(move || {
                    let mut i = start + w;
                    loop {
                        let (e, b) = epoch_of(i);
                        if tx.send(batch_builder(&c, &s, seed, e, b)).is_err() {
                            break;
                        }
                        i += workers as u64;
                    }
                });
                handles.push((rx, h));
            }
        }
        Ok(Self {
            corpus,
            spec,
            seed,
            start,
            next: start,
            workers: handles,
        })
    }

    /// Index of the batch the next call returns.
    pub fn position(&self) -> u64 {
        self.next
    }

    pub fn next_batch(&mut self) -> Result<Vec<TrainExample>> {
        let i = self.next;
        self.next += 1;
        if self.workers.is_empty() {
            let (e, b) = epoch_of(i);
            return batch_builder(&self.corpus, &self.spec, self.seed, e, b);
        }
        let w = ((i - self.start) as usize) % self.workers.len();
        self.workers[w]
            .0
            .recv()
            .map_err(|_| Error::Data("batch worker stopped".into()))?
    }
}

impl Drop for BatchStream {
    fn drop(&mut self) {
        for (rx, h) in self.workers.drain(..) {
            drop(rx);
            let _ = h.join();
        }
    }
}
