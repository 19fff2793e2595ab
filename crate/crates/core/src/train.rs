//! Staged training: reconstruction + annealed KL from step 0, then the
//! adversarial, contrastive and teacher terms once their start steps are
//! reached.
//!
//! Each step runs the generator forward on the degraded inputs `y`, updates
//! the discriminators on `(x, detached x̂)`, computes the generator loss with
//! the updated discriminators held constant, applies the generator update
//! and finally the weight EMA. All randomness is derived from
//! `(seed, step)`, so a run restored from a checkpoint continues bit-exactly.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{derive_seed, BatchSpec, BatchStream, Corpus, TrainExample};
use crate::discriminator::{DiscBank, DiscConfig};
use crate::error::{Error, Result};
use crate::losses::{self, AnnealSchedule, GenTerms, LossWeights, MRSTFT_WINDOWS};
use crate::model::{Model, ModelConfig, TIME_FACTOR};
use crate::teacher::TeacherStore;
use crate::tensor::checkpoint;
use crate::tensor::{clip_grad_norm, AdamW, AdamWConfig, Ema, Graph, ParamStore, StepOutcome, Tensor, Var};

/// Step at which each optional loss switches on; `u64::MAX` keeps it off.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stages {
    pub gan: u64,
    pub contrastive: u64,
    pub teacher: u64,
}

impl Default for Stages {
    fn default() -> Self {
        Self {
            gan: 2000,
            contrastive: 2000,
            teacher: 2000,
        }
    }
}

impl Stages {
    pub fn never() -> Self {
        Self {
            gan: u64::MAX,
            contrastive: u64::MAX,
            teacher: u64::MAX,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub disc: DiscConfig,
    pub batch: BatchSpec,
    pub optim: AdamWConfig,
    pub ema_momentum: f64,
    pub weights: LossWeights,
    pub anneal: AnnealSchedule,
    pub stages: Stages,
    pub grad_clip: f64,
    pub seed: u64,
    pub max_steps: u64,
    /// Checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    pub train_manifest: Option<PathBuf>,
    pub teacher_file: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Batch-building threads; 0 or 1 builds inline.
    pub workers: usize,
    /// Abort when more than this fraction of manifest entries is unreadable.
    pub max_skip_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::preset("small64").expect("built-in preset"),
            disc: DiscConfig::default(),
            batch: BatchSpec::default(),
            optim: AdamWConfig::default(),
            ema_momentum: 0.9999,
            weights: LossWeights::default(),
            anneal: AnnealSchedule::default(),
            stages: Stages::default(),
            grad_clip: 10.0,
            seed: 0,
            max_steps: 10_000,
            checkpoint_every: 1000,
            train_manifest: None,
            teacher_file: None,
            out_dir: PathBuf::from("run"),
            workers: 1,
            max_skip_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.disc.validate()?;
        self.batch.validate()?;
        self.weights.validate()?;
        self.anneal.validate()?;
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config(format!("grad_clip {} must be > 0", self.grad_clip)));
        }
        let enabled: Vec<u64> = [self.stages.gan, self.stages.contrastive, self.stages.teacher]
            .into_iter()
            .filter(|&s| s != u64::MAX)
            .collect();
        if enabled.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config(format!(
                "enabled stage boundaries must be non-decreasing (gan ≤ contrastive ≤ teacher): {:?}",
                self.stages
            )));
        }
        if self.stages.contrastive != u64::MAX && !self.batch.pairing {
            return Err(Error::Config("the contrastive stage needs batch.pairing = true".into()));
        }
        if self.stages.contrastive != u64::MAX && self.batch.batch_size < 4 {
            return Err(Error::Config("the contrastive stage needs batches of at least 4".into()));
        }
        if self.stages.gan != u64::MAX && self.batch.clip_len <= self.disc.windows.iter().copied().max().unwrap_or(0) {
            return Err(Error::Config(format!(
                "clip_len {} is too short for the discriminator windows",
                self.batch.clip_len
            )));
        }
        if self.batch.clip_len <= self.model.win() {
            return Err(Error::Config(format!("clip_len {} is shorter than one STFT window", self.batch.clip_len)));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::Config(format!("ema_momentum {} outside [0, 1]", self.ema_momentum)));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Stable digest of the configuration, used to tag reports.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serialises");
        let h = Sha256::digest(json.as_bytes());
        h.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// One logged step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lambda_kl: f64,
    pub mrstft: f64,
    pub kl: f64,
    pub adv: Option<f64>,
    pub fm: Option<f64>,
    pub contrastive: Option<f64>,
    pub clap: Option<f64>,
    pub disc: Option<f64>,
    pub total: f64,
    pub grad_norm: f64,
    pub skipped: bool,
}

const NOISE_TAG: u64 = 0x4E01;
const RUNNING: f64 = 0.98;

/// Everything needed to continue a run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub gen: ParamStore<f32>,
    pub gen_opt: AdamW<f32>,
    pub ema: Ema<f32>,
    pub bank: DiscBank,
    pub disc: ParamStore<f32>,
    pub disc_opt: AdamW<f32>,
    pub step: u64,
    /// Smoothed total generator loss and mrSTFT term.
    pub running: [f64; 2],
    pub skipped_steps: u64,
    corpus: Arc<Corpus>,
    /// Teacher vector per corpus entry, when present.
    targets: Vec<Option<Vec<f32>>>,
    stream: Option<BatchStream>,
}

fn stack(clips: impl Iterator<Item = Vec<f32>>, n: usize, len: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(n * len);
    for c in clips {
        data.extend(c);
    }
    Tensor::new(vec![n, len], data)
}

fn grads_of(g: &mut Graph<f32>, vars: &[Var], store: &ParamStore<f32>) -> Vec<Vec<f32>> {
    vars.iter()
        .zip(store.iter())
        .map(|(&v, (_, t))| g.take_grad(v).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect()
}

impl Trainer {
    pub fn new(cfg: TrainConfig, corpus: Arc<Corpus>, teacher: Option<&TeacherStore>) -> Result<Self> {
        cfg.validate()?;
        if cfg.stages.teacher != u64::MAX {
            let t = teacher.ok_or_else(|| Error::Config("teacher stage enabled without a teacher store".into()))?;
            if t.dim != cfg.model.teacher_dim {
                return Err(Error::Config(format!(
                    "teacher dim {} does not match the model's {}",
                    t.dim, cfg.model.teacher_dim
                )));
            }
        }
        if corpus.is_empty() {
            return Err(Error::Data("training corpus is empty".into()));
        }
        let (model, gen) = Model::new::<f32>(cfg.model.clone(), derive_seed(&[cfg.seed, 1]))?;
        let (bank, disc) = DiscBank::new::<f32>(cfg.disc.clone(), derive_seed(&[cfg.seed, 2]))?;
        let targets = corpus
            .entries
            .iter()
            .map(|e| teacher.and_then(|t| t.get(&e.key)).map(<[f32]>::to_vec))
            .collect();
        Ok(Self {
            gen_opt: AdamW::new(cfg.optim, &gen),
            ema: Ema::new(&gen, cfg.ema_momentum)?,
            disc_opt: AdamW::new(cfg.optim, &disc),
            cfg,
            model,
            gen,
            bank,
            disc,
            step: 0,
            running: [f64::NAN; 2],
            skipped_steps: 0,
            corpus,
            targets,
            stream: None,
        })
    }

    fn active(&self, start: u64) -> bool {
        self.step >= start
    }

    /// Batch for the current step.
    pub fn next_batch(&mut self) -> Result<Vec<TrainExample>> {
        let stale = self.stream.as_ref().is_none_or(|s| s.position() != self.step);
        if stale {
            self.stream = Some(BatchStream::new(
                self.corpus.clone(),
                self.cfg.batch.clone(),
                self.cfg.seed,
                self.step,
                self.cfg.workers,
                2,
            )?);
        }
        self.stream.as_mut().expect("created above").next_batch()
    }

    /// One discriminator update followed by one generator update and the
    /// EMA update.
    pub fn train_step(&mut self, batch: &[TrainExample]) -> Result<StepRecord> {
        let n = batch.len();
        let len = batch.first().ok_or_else(|| Error::Data("empty batch".into()))?.x.len();
        if batch.iter().any(|e| e.x.len() != len || e.y.len() != len) {
            return Err(Error::Data("batch examples differ in length".into()));
        }
        let gan = self.active(self.cfg.stages.gan);
        let contrastive = self.active(self.cfg.stages.contrastive);
        let teacher = self.active(self.cfg.stages.teacher);
        let lambda_kl = self.cfg.anneal.lambda(self.step);

        let x_t = stack(batch.iter().map(|e| e.x.samples.clone()), n, len)?;
        let y_t = stack(batch.iter().map(|e| e.y.samples.clone()), n, len)?;

        let mut g = Graph::<f32>::new();
        let pv = g.params(&self.gen, true);
        let x = g.constant(x_t.clone());
        let y = g.constant(y_t);
        let feats = self.model.features(&mut g, y)?;
        let m = g.shape(feats)[3] / TIME_FACTOR;
        let mut nrng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.cfg.seed, self.step, NOISE_TAG]));
        let eps = g.constant(Tensor::randn(vec![n, self.cfg.model.latent_dim, 1, m], &mut nrng));
        let lat = self.model.encode(&mut g, &pv, feats, Some(eps))?;
        let spec = self.model.decode_spec(&mut g, &pv, lat.z)?;
        let xh = self.model.synthesize(&mut g, spec, len)?;

        // discriminator step on (x, detached x̂)
        let disc_backup = (self.disc.clone(), self.disc_opt.clone());
        let mut disc_loss = None;
        if gan {
            let xh_t = g.value(xh).clone();
            let mut dg = Graph::<f32>::new();
            let dv = dg.params(&self.disc, true);
            let xr = dg.constant(x_t);
            let xf = dg.constant(xh_t);
            let real = self.bank.forward(&mut dg, &dv, xr)?;
            let fake = self.bank.forward(&mut dg, &dv, xf)?;
            let rl: Vec<Var> = real.iter().map(|o| o.logits).collect();
            let fl: Vec<Var> = fake.iter().map(|o| o.logits).collect();
            let dl = losses::lsgan_disc(&mut dg, &rl, &fl)?;
            let v = dg.scalar(dl) as f64;
            if !v.is_finite() {
                return Ok(self.skip(lambda_kl, "discriminator loss is not finite"));
            }
            dg.backward(dl)?;
            let mut grads = grads_of(&mut dg, &dv, &self.disc);
            clip_grad_norm(&mut grads, self.cfg.grad_clip);
            if self.disc_opt.step(&mut self.disc, &grads)? == StepOutcome::SkippedNonFinite {
                return Ok(self.skip(lambda_kl, "discriminator gradient is not finite"));
            }
            disc_loss = Some(v);
        }

        // generator loss
        let mrstft = losses::mrstft_loss(&mut g, x, xh, &MRSTFT_WINDOWS)?;
        let kl = losses::kld_loss(&mut g, lat.mu, lat.logvar)?;
        let mut terms = GenTerms {
            mrstft,
            kl,
            adv: None,
            fm: None,
            contrastive: None,
            clap: None,
        };
        if gan {
            let dv = g.params(&self.disc, false);
            let real = self.bank.forward(&mut g, &dv, x)?;
            let fake = self.bank.forward(&mut g, &dv, xh)?;
            let fl: Vec<Var> = fake.iter().map(|o| o.logits).collect();
            terms.adv = Some(losses::lsgan_gen(&mut g, &fl)?);
            let rf: Vec<Vec<Var>> = real.into_iter().map(|o| o.features).collect();
            let ff: Vec<Vec<Var>> = fake.into_iter().map(|o| o.features).collect();
            terms.fm = Some(losses::feature_matching(&mut g, &rf, &ff)?);
        }
        if contrastive {
            let ids: Vec<u64> = batch.iter().map(|e| e.pair_id).collect();
            let p = self.model.project_contrastive(&mut g, &pv, lat.mu)?;
            terms.contrastive = Some(losses::contrastive_loss(&mut g, p, &ids, self.cfg.weights.temperature)?);
        }
        if teacher {
            let dim = self.cfg.model.teacher_dim;
            let rows: Vec<Option<&Vec<f32>>> = batch
                .iter()
                .map(|e| match e.sources.as_slice() {
                    [s] => self.targets[*s].as_ref(),
                    _ => None,
                })
                .collect();
            if rows.iter().any(Option::is_some) {
                let mut data = Vec::with_capacity(n * dim);
                for r in &rows {
                    match r {
                        Some(v) => data.extend_from_slice(v),
                        None => {
                            let mut e = vec![0.0; dim];
                            e[0] = 1.0;
                            data.extend(e);
                        }
                    }
                }
                let t = g.constant(Tensor::new(vec![n, dim], data)?);
                let p = self.model.project_teacher(&mut g, &pv, lat.mu)?;
                let used: Vec<bool> = rows.iter().map(Option::is_some).collect();
                terms.clap = Some(losses::teacher_loss(&mut g, p, t, &used)?);
            }
        }
        let values = terms.values(&g);
        if !values.all_finite() {
            self.restore_disc(disc_backup);
            return Ok(self.skip(lambda_kl, "generator loss is not finite"));
        }
        let total = losses::generator_total(&mut g, &terms, &self.cfg.weights, lambda_kl)?;
        g.backward(total)?;
        let mut grads = grads_of(&mut g, &pv, &self.gen);
        let grad_norm = clip_grad_norm(&mut grads, self.cfg.grad_clip);
        if self.gen_opt.step(&mut self.gen, &grads)? == StepOutcome::SkippedNonFinite {
            self.restore_disc(disc_backup);
            return Ok(self.skip(lambda_kl, "generator gradient is not finite"));
        }
        self.ema.update(&self.gen)?;

        let total_v = g.scalar(total) as f64;
        self.smooth(total_v, values.mrstft);
        let rec = StepRecord {
            step: self.step,
            lambda_kl,
            mrstft: values.mrstft,
            kl: values.kl,
            adv: values.adv,
            fm: values.fm,
            contrastive: values.contrastive,
            clap: values.clap,
            disc: disc_loss,
            total: total_v,
            grad_norm,
            skipped: false,
        };
        self.step += 1;
        Ok(rec)
    }

    fn restore_disc(&mut self, backup: (ParamStore<f32>, AdamW<f32>)) {
        self.disc = backup.0;
        self.disc_opt = backup.1;
    }

    fn skip(&mut self, lambda_kl: f64, why: &str) -> StepRecord {
        log::warn!("step {}: {why}; step skipped", self.step);
        self.skipped_steps += 1;
        let rec = StepRecord {
            step: self.step,
            lambda_kl,
            mrstft: f64::NAN,
            kl: f64::NAN,
            adv: None,
            fm: None,
            contrastive: None,
            clap: None,
            disc: None,
            total: f64::NAN,
            grad_norm: f64::NAN,
            skipped: true,
        };
        self.step += 1;
        rec
    }

    fn smooth(&mut self, total: f64, mrstft: f64) {
        for (r, v) in self.running.iter_mut().zip([total, mrstft]) {
            *r = if r.is_nan() { v } else { RUNNING * *r + (1.0 - RUNNING) * v };
        }
    }

    /// Checkpoint tensors: `gen.*`, `ema.*`, `disc.*`, optimiser moments
    /// under `opt.{gen,disc}.{m,v}.*` and counters under `meta.*`.
    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut named: Vec<(String, Tensor<f32>)> = Vec::new();
        let mut put_store = |prefix: &str, s: &ParamStore<f32>| {
            for (name, t) in s.iter() {
                named.push((format!("{prefix}{name}"), t.clone()));
            }
        };
        put_store("gen.", &self.gen);
        put_store("ema.", self.ema.shadow());
        put_store("disc.", &self.disc);
        for (tag, opt, store) in [("gen", &self.gen_opt, &self.gen), ("disc", &self.disc_opt, &self.disc)] {
            let (m, v) = opt.moments();
            for ((name, t), (mm, vv)) in store.iter().zip(m.iter().zip(v)) {
                named.push((format!("opt.{tag}.m.{name}"), Tensor::new(t.shape().to_vec(), mm.clone())?));
                named.push((format!("opt.{tag}.v.{name}"), Tensor::new(t.shape().to_vec(), vv.clone())?));
            }
        }
        let counters = [
            self.step,
            self.gen_opt.t(),
            self.gen_opt.skipped(),
            self.disc_opt.t(),
            self.disc_opt.skipped(),
            self.skipped_steps,
            self.running[0].to_bits(),
            self.running[1].to_bits(),
        ];
        named.push(("meta.counters".into(), bits_tensor(&counters)));
        let json = serde_json::to_vec(&self.cfg).map_err(|e| Error::Config(e.to_string()))?;
        named.push(("meta.config".into(), bytes_tensor(&json)));
        checkpoint::to_bytes(named.iter().map(|(n, t)| (n.as_str(), t)))
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.checkpoint_bytes()?).map_err(|e| Error::io(path, e))
    }

    /// Continue from a checkpoint written by [`Trainer::save_checkpoint`].
    pub fn resume(path: &Path, corpus: Arc<Corpus>, teacher: Option<&TeacherStore>) -> Result<Self> {
        let tensors = checkpoint::load(path)?;
        let cfg = config_from(&tensors, path)?;
        let mut t = Self::new(cfg, corpus, teacher)?;
        let fmt = |d: String| Error::format(path, d);
        t.gen.load_from(&checkpoint::extract_store(&tensors, "gen."))?;
        t.ema.shadow_mut().load_from(&checkpoint::extract_store(&tensors, "ema."))?;
        t.disc.load_from(&checkpoint::extract_store(&tensors, "disc."))?;
        let counters = tensors
            .iter()
            .find(|(n, _)| n == "meta.counters")
            .map(|(_, t)| tensor_bits(t))
            .ok_or_else(|| fmt("missing meta.counters".into()))?;
        if counters.len() != 8 {
            return Err(fmt(format!("meta.counters has {} entries", counters.len())));
        }
        for (tag, c) in [("gen", 1), ("disc", 3)] {
            let (opt, store) = if tag == "gen" {
                (&mut t.gen_opt, &t.gen)
            } else {
                (&mut t.disc_opt, &t.disc)
            };
            let get = |kind: &str| -> Result<Vec<Vec<f32>>> {
                let s = checkpoint::extract_store(&tensors, &format!("opt.{tag}.{kind}."));
                store
                    .names()
                    .iter()
                    .map(|n| {
                        s.find(n)
                            .map(|id| s.get(id).data().to_vec())
                            .ok_or_else(|| Error::format(path, format!("missing opt.{tag}.{kind}.{n}")))
                    })
                    .collect()
            };
            opt.restore(get("m")?, get("v")?, counters[c], counters[c + 1])?;
        }
        t.step = counters[0];
        t.skipped_steps = counters[5];
        t.running = [f64::from_bits(counters[6]), f64::from_bits(counters[7])];
        Ok(t)
    }
}

/// `u64` values as pairs of `f32` bit patterns (low word first).
fn bits_tensor(v: &[u64]) -> Tensor<f32> {
    let data: Vec<f32> = v
        .iter()
        .flat_map(|&x| [f32::from_bits(x as u32), f32::from_bits((x >> 32) as u32)])
        .collect();
    Tensor::new(vec![data.len()], data).expect("1-d")
}

fn tensor_bits(t: &Tensor<f32>) -> Vec<u64> {
    t.data()
        .chunks_exact(2)
        .map(|p| u64::from(p[0].to_bits()) | (u64::from(p[1].to_bits()) << 32))
        .collect()
}

/// Bytes as `f32` bit patterns, one byte per element.
fn bytes_tensor(b: &[u8]) -> Tensor<f32> {
    Tensor::new(vec![b.len()], b.iter().map(|&x| f32::from_bits(u32::from(x))).collect()).expect("1-d")
}

fn tensor_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().map(|v| v.to_bits() as u8).collect()
}

fn config_from(tensors: &[(String, Tensor<f32>)], path: &Path) -> Result<TrainConfig> {
    let raw = tensors
        .iter()
        .find(|(n, _)| n == "meta.config")
        .map(|(_, t)| tensor_bytes(t))
        .ok_or_else(|| Error::format(path, "missing meta.config"))?;
    serde_json::from_slice(&raw).map_err(|e| Error::format(path, format!("meta.config: {e}")))
}

/// Training configuration stored in a checkpoint.
pub fn checkpoint_config(path: &Path) -> Result<TrainConfig> {
    config_from(&checkpoint::load(path)?, path)
}

/// Which weights of a checkpoint to use for inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightSet {
    Raw,
    Ema,
}

/// Model layout and generator weights from a checkpoint.
pub fn load_generator(path: &Path, which: WeightSet) -> Result<(Model, ParamStore<f32>)> {
    let tensors = checkpoint::load(path)?;
    let cfg = config_from(&tensors, path)?;
    let (model, mut params) = Model::new::<f32>(cfg.model, 0)?;
    let prefix = match which {
        WeightSet::Raw => "gen.",
        WeightSet::Ema => "ema.",
    };
    params.load_from(&checkpoint::extract_store(&tensors, prefix))?;
    Ok((model, params))
}

/// [`fit`] gives up after this many non-finite steps in a row.
pub const MAX_CONSECUTIVE_SKIPS: u32 = 50;

/// Outcome of [`fit`].
#[derive(Debug)]
pub struct FitSummary {
    pub steps: u64,
    pub skipped_steps: u64,
    pub skipped_files: Vec<(String, String)>,
    pub checkpoints: Vec<PathBuf>,
    pub final_record: Option<StepRecord>,
}

/// Load the corpus and teacher named in `cfg`, enforcing the skip limit.
pub fn load_inputs(cfg: &TrainConfig) -> Result<(Arc<Corpus>, Option<TeacherStore>, Vec<(String, String)>)> {
    let manifest = cfg
        .train_manifest
        .as_ref()
        .ok_or_else(|| Error::Config("train_manifest is not set".into()))?;
    let report = Corpus::load_manifest(manifest, cfg.model.sample_rate)?;
    let total = report.corpus.len() + report.skipped.len();
    for (k, why) in &report.skipped {
        log::warn!("skipping {k}: {why}");
    }
    if total == 0 || report.skipped.len() as f64 > cfg.max_skip_fraction * total as f64 {
        return Err(Error::Data(format!(
            "{} of {total} entries in {} are unreadable",
            report.skipped.len(),
            manifest.display()
        )));
    }
    let teacher = match &cfg.teacher_file {
        Some(p) => Some(TeacherStore::load(p)?),
        None => None,
    };
    Ok((Arc::new(report.corpus), teacher, report.skipped))
}

/// Train to `cfg.max_steps`, writing `metrics.ndjson`, periodic
/// `ckpt_<step>.slwt` files and `last.slwt` under `cfg.out_dir`. With
/// `resume`, continue from that checkpoint's state.
pub fn fit(cfg: TrainConfig, resume: Option<&Path>) -> Result<FitSummary> {
    let (corpus, teacher, skipped_files) = load_inputs(&cfg)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let mut trainer = match resume {
        Some(p) => {
            let mut t = Trainer::resume(p, corpus, teacher.as_ref())?;
            t.cfg.max_steps = cfg.max_steps;
            t.cfg.out_dir = cfg.out_dir.clone();
            t.cfg.checkpoint_every = cfg.checkpoint_every;
            t.cfg.workers = cfg.workers;
            t
        }
        None => Trainer::new(cfg, corpus, teacher.as_ref())?,
    };
    let out = trainer.cfg.out_dir.clone();
    let log_path = out.join("metrics.ndjson");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut checkpoints = Vec::new();
    let mut last = None;
    let mut run_of_skips = 0;
    while trainer.step < trainer.cfg.max_steps {
        let batch = trainer.next_batch()?;
        let rec = trainer.train_step(&batch)?;
        run_of_skips = if rec.skipped { run_of_skips + 1 } else { 0 };
        if run_of_skips >= MAX_CONSECUTIVE_SKIPS {
            trainer.save_checkpoint(&out.join("aborted.slwt"))?;
            return Err(Error::NonFinite(format!(
                "{run_of_skips} consecutive non-finite steps ending at step {}",
                trainer.step
            )));
        }
        if !rec.skipped {
            let line = serde_json::to_string(&rec).map_err(|e| Error::Config(e.to_string()))?;
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        }
        last = Some(rec);
        let every = trainer.cfg.checkpoint_every;
        if every > 0 && trainer.step % every == 0 {
            let p = out.join(format!("ckpt_{:08}.slwt", trainer.step));
            trainer.save_checkpoint(&p)?;
            checkpoints.push(p);
        }
    }
    let p = out.join("last.slwt");
    trainer.save_checkpoint(&p)?;
    checkpoints.push(p);
    Ok(FitSummary {
        steps: trainer.step,
        skipped_steps: trainer.skipped_steps,
        skipped_files,
        checkpoints,
        final_record: last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{CorpusEntry, MicDegradeSpec, SourceAugSpec};
    use crate::synth::synth_clip;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            model: ModelConfig::preset("tiny").unwrap(),
            batch: BatchSpec {
                batch_size: 4,
                pairing: true,
                max_sources: 1,
                clip_len: 4096,
                aug: SourceAugSpec::identity(),
                mic: MicDegradeSpec::identity(),
            },
            stages: Stages::never(),
            ..TrainConfig::default()
        }
    }

    fn corpus(n: usize) -> Arc<Corpus> {
        Arc::new(Corpus {
            entries: (0..n)
                .map(|i| CorpusEntry {
                    key: format!("{i}.wav"),
                    label: None,
                    clip: synth_clip(i % 4, 4096, 16000, i as u64).unwrap(),
                })
                .collect(),
        })
    }

    #[test]
    fn counters_survive_bit_packing() {
        let v = [0, 1, u64::MAX, 0xDEAD_BEEF_0000_0001, f64::NAN.to_bits()];
        assert_eq!(tensor_bits(&bits_tensor(&v)), v);
        assert_eq!(tensor_bytes(&bytes_tensor(b"{\"a\":1}")), b"{\"a\":1}");
    }

    #[test]
    fn generator_loss_without_stages_is_recon_plus_kl() {
        let mut t = Trainer::new(tiny_cfg(), corpus(4), None).unwrap();
        let b = t.next_batch().unwrap();
        let r = t.train_step(&b).unwrap();
        assert!(!r.skipped);
        assert!(r.adv.is_none() && r.fm.is_none() && r.contrastive.is_none() && r.clap.is_none());
        assert!((r.total - (r.mrstft + r.lambda_kl * r.kl)).abs() < 1e-5 * r.total.abs().max(1.0));
        assert_eq!(t.step, 1);
    }

    #[test]
    fn checkpoint_round_trip_restores_state() {
        let mut t = Trainer::new(tiny_cfg(), corpus(4), None).unwrap();
        for _ in 0..2 {
            let b = t.next_batch().unwrap();
            t.train_step(&b).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.slwt");
        t.save_checkpoint(&p).unwrap();
        let r = Trainer::resume(&p, corpus(4), None).unwrap();
        assert_eq!(r.step, 2);
        assert_eq!(r.checkpoint_bytes().unwrap(), t.checkpoint_bytes().unwrap());
    }

    fn checkpoint_sans_counters(t: &Trainer) -> Vec<(String, Tensor<f32>)> {
        checkpoint::from_bytes(&t.checkpoint_bytes().unwrap(), Path::new("mem"))
            .unwrap()
            .into_iter()
            .filter(|(n, _)| !n.starts_with("meta."))
            .collect()
    }

    #[test]
    fn ten_steps_are_bit_identical() {
        let run = || {
            let mut t = Trainer::new(tiny_cfg(), corpus(4), None).unwrap();
            for _ in 0..10 {
                let b = t.next_batch().unwrap();
                t.train_step(&b).unwrap();
            }
            t.checkpoint_bytes().unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn logged_lambda_follows_the_schedule() {
        let mut cfg = tiny_cfg();
        cfg.anneal.cycle = 4;
        let mut t = Trainer::new(cfg.clone(), corpus(4), None).unwrap();
        for _ in 0..6 {
            let b = t.next_batch().unwrap();
            let r = t.train_step(&b).unwrap();
            assert_eq!(r.lambda_kl, cfg.anneal.lambda(r.step));
            assert!(r.total.is_finite() && r.mrstft.is_finite() && r.kl.is_finite());
        }
    }

    #[test]
    fn without_augmentation_input_equals_target() {
        let mut t = Trainer::new(tiny_cfg(), corpus(4), None).unwrap();
        for _ in 0..3 {
            for e in t.next_batch().unwrap() {
                assert_eq!(e.x, e.y);
            }
        }
    }

    #[test]
    fn small_step_lowers_reconstruction_loss() {
        let mut wins = 0;
        for seed in 0..10 {
            let mut cfg = tiny_cfg();
            cfg.seed = seed;
            cfg.optim.lr = 1e-4;
            let mut t = Trainer::new(cfg, corpus(4), None).unwrap();
            let b = t.next_batch().unwrap();
            let before = t.train_step(&b).unwrap().mrstft;
            t.step = 0;
            let after = t.train_step(&b).unwrap().mrstft;
            wins += usize::from(after < before);
        }
        assert!(wins >= 8, "{wins}/10");
    }

    #[test]
    fn non_finite_loss_skips_and_leaves_optimisers_alone() {
        let mut cfg = tiny_cfg();
        cfg.stages.gan = 0;
        let mut t = Trainer::new(cfg, corpus(4), None).unwrap();
        let mut b = t.next_batch().unwrap();
        let before = checkpoint_sans_counters(&t);
        b[0].x.samples[10] = f32::NAN;
        let r = t.train_step(&b).unwrap();
        assert!(r.skipped);
        assert_eq!(t.step, 1);
        assert_eq!(t.skipped_steps, 1);
        assert_eq!(t.gen_opt.t(), 0);
        assert_eq!(t.disc_opt.t(), 0);
        assert!(checkpoint_sans_counters(&t) == before);
    }

    #[test]
    fn gan_stage_updates_both_sides_and_keeps_grads_apart() {
        let mut cfg = tiny_cfg();
        cfg.stages.gan = 0;
        let mut t = Trainer::new(cfg, corpus(4), None).unwrap();
        let disc0 = t.disc.clone();
        let gen0 = t.gen.clone();
        let b = t.next_batch().unwrap();
        let r = t.train_step(&b).unwrap();
        assert!(r.adv.is_some() && r.fm.is_some() && r.disc.is_some());
        let moved = |a: &ParamStore<f32>, b: &ParamStore<f32>| a.iter().zip(b.iter()).any(|(x, y)| x.1 != y.1);
        assert!(moved(&disc0, &t.disc));
        assert!(moved(&gen0, &t.gen));

        // generator objective: discriminator parameters receive nothing
        let mut g = Graph::<f32>::new();
        let pv = g.params(&t.gen, true);
        let dv = g.params(&t.disc, false);
        let x = g.constant(Tensor::new(vec![1, 4096], b[0].x.samples.clone()).unwrap());
        let f = t.model.features(&mut g, x).unwrap();
        let lat = t.model.encode(&mut g, &pv, f, None).unwrap();
        let s = t.model.decode_spec(&mut g, &pv, lat.z).unwrap();
        let xh = t.model.synthesize(&mut g, s, 4096).unwrap();
        let outs = t.bank.forward(&mut g, &dv, xh).unwrap();
        let logits: Vec<Var> = outs.iter().map(|o| o.logits).collect();
        let l = losses::lsgan_gen(&mut g, &logits).unwrap();
        g.backward(l).unwrap();
        assert!(dv.iter().all(|&v| g.grad(v).is_none()));
        assert!(pv.iter().any(|&v| g.grad(v).is_some()));
    }

    #[test]
    fn stage_order_and_pairing_are_validated() {
        let mut c = tiny_cfg();
        c.stages = Stages { gan: 10, contrastive: 5, teacher: 20 };
        assert!(c.validate().is_err());
        c.stages = Stages { gan: u64::MAX, contrastive: 5, teacher: 5 };
        assert!(c.validate().is_ok());
        c.batch.pairing = false;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let c = tiny_cfg();
        let s = serde_json::to_string(&c).unwrap();
        let back: TrainConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
        let partial: TrainConfig = serde_json::from_str(r#"{"seed": 4, "max_steps": 7}"#).unwrap();
        assert_eq!(partial.seed, 4);
        assert_eq!(partial.optim, AdamWConfig::default());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
