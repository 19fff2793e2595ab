//! Evaluation without external models: MLP probes on pooled latents,
//! zero-shot classification against teacher label vectors, and
//! reconstruction metrics.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{mrstft_loss, MRSTFT_WINDOWS};
use crate::model::layers::{Builder, Linear};
use crate::teacher::{TeacherStore, NORM_TOL};
use crate::tensor::{AdamW, AdamWConfig, Graph, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeTask {
    SingleLabel,
    MultiLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden: usize,
    /// Full-batch optimiser steps.
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Fraction of each class held out for testing.
    pub test_fraction: f64,
    pub task: ProbeTask,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            epochs: 300,
            lr: 1e-2,
            seed: 0,
            test_fraction: 0.3,
            task: ProbeTask::SingleLabel,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.epochs == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("probe: hidden, epochs and lr must be positive".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "probe: test_fraction {} outside (0, 1)",
                self.test_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Single-label only.
    pub accuracy: Option<f64>,
    pub map: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Test-set class scores, one row per test item.
    pub test_scores: Vec<Vec<f64>>,
    pub test_index: Vec<usize>,
}

/// Train/test indices. Single-label splits are stratified per class; every
/// class must keep at least one training item.
pub fn split(labels: &[Vec<usize>], n_classes: usize, cfg: &ProbeConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    match cfg.task {
        ProbeTask::SingleLabel => {
            let mut by_class = vec![Vec::new(); n_classes];
            for (i, l) in labels.iter().enumerate() {
                match l.as_slice() {
                    [c] if *c < n_classes => by_class[*c].push(i),
                    _ => return Err(Error::Data(format!("item {i}: expected one label below {n_classes}, got {l:?}"))),
                }
            }
            for (c, mut idx) in by_class.into_iter().enumerate() {
                idx.shuffle(&mut rng);
                let k = (cfg.test_fraction * idx.len() as f64).round() as usize;
                let k = k.min(idx.len().saturating_sub(1));
                if idx.len() == k {
                    return Err(Error::Data(format!("class {c} is absent from the training split")));
                }
                test.extend_from_slice(&idx[..k]);
                train.extend_from_slice(&idx[k..]);
            }
        }
        ProbeTask::MultiLabel => {
            let mut idx: Vec<usize> = (0..labels.len()).collect();
            idx.shuffle(&mut rng);
            let k = (cfg.test_fraction * idx.len() as f64).round() as usize;
            test.extend_from_slice(&idx[..k]);
            train.extend_from_slice(&idx[k..]);
            for c in 0..n_classes {
                if !train.iter().any(|&i| labels[i].contains(&c)) {
                    return Err(Error::Data(format!("class {c} is absent from the training split")));
                }
            }
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Average precision of one class: mean precision at each positive when
/// items are ranked by descending score (ties keep index order).
/// `None` without positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut hits, mut acc) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            acc += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| acc / hits as f64)
}

/// Macro-averaged AP over classes that have at least one positive.
pub fn mean_average_precision(scores: &[Vec<f64>], labels: &[Vec<usize>], n_classes: usize) -> Result<f64> {
    let aps: Vec<f64> = (0..n_classes)
        .filter_map(|c| {
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let p: Vec<bool> = labels.iter().map(|l| l.contains(&c)).collect();
            average_precision(&s, &p)
        })
        .collect();
    if aps.is_empty() {
        return Err(Error::Data("mAP: no class has a positive item".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

fn argmax(row: &[f64]) -> usize {
    // first maximum wins
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// One-hidden-layer MLP on standardised features. Reports accuracy (single
/// label) and mAP on the held-out split.
pub fn probe(latents: &[Vec<f32>], labels: &[Vec<usize>], n_classes: usize, cfg: &ProbeConfig) -> Result<ProbeResult> {
    cfg.validate()?;
    if n_classes < 2 {
        return Err(Error::Data("probe needs at least 2 classes".into()));
    }
    if latents.len() != labels.len() || latents.is_empty() {
        return Err(Error::Data(format!("{} latents for {} labels", latents.len(), labels.len())));
    }
    let d = latents[0].len();
    if d == 0 || latents.iter().any(|l| l.len() != d) {
        return Err(Error::Data("latents must share one non-zero width".into()));
    }
    if labels.iter().flatten().any(|&c| c >= n_classes) {
        return Err(Error::Data(format!("label outside 0..{n_classes}")));
    }
    let (train, test) = split(labels, n_classes, cfg)?;

    // standardise with training statistics
    let mut mean = vec![0.0f64; d];
    let mut var = vec![0.0f64; d];
    for &i in &train {
        for (m, &v) in mean.iter_mut().zip(&latents[i]) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    for &i in &train {
        for ((s, m), &v) in var.iter_mut().zip(&mean).zip(&latents[i]) {
            *s += (v as f64 - m).powi(2);
        }
    }
    let std: Vec<f64> = var.iter().map(|s| (s / train.len() as f64).sqrt().max(1e-8)).collect();
    let rows = |idx: &[usize]| -> Result<Tensor<f64>> {
        let data = idx
            .iter()
            .flat_map(|&i| latents[i].iter().zip(&mean).zip(&std).map(|((&v, m), s)| (v as f64 - m) / s))
            .collect();
        Tensor::new(vec![idx.len(), d], data)
    };

    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9B0B);
    let mut b = Builder {
        store: &mut store,
        rng: &mut rng,
    };
    let l1 = Linear::new(&mut b, "fc1", d, cfg.hidden);
    let l2 = Linear::new(&mut b, "fc2", cfg.hidden, n_classes);
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        },
        &store,
    );
    let xtr = rows(&train)?;
    let n = train.len();
    let target: Vec<f64> = match cfg.task {
        ProbeTask::SingleLabel => train
            .iter()
            .flat_map(|&i| (0..n_classes).map(move |c| f64::from(u8::from(labels[i][0] == c))))
            .collect(),
        ProbeTask::MultiLabel => train
            .iter()
            .flat_map(|&i| {
                (0..n_classes).flat_map(move |c| {
                    let y = f64::from(u8::from(labels[i].contains(&c)));
                    [1.0 - y, y]
                })
            })
            .collect(),
    };
    let target = match cfg.task {
        ProbeTask::SingleLabel => Tensor::new(vec![n, n_classes], target)?,
        ProbeTask::MultiLabel => Tensor::new(vec![n, n_classes, 2], target)?,
    };
    let forward = |g: &mut Graph<f64>, pv: &[crate::tensor::Var], x| -> Result<crate::tensor::Var> {
        let h = l1.forward(g, pv, x)?;
        let h = g.relu(h);
        l2.forward(g, pv, h)
    };
    // log-probabilities: softmax for one label, per-class sigmoid otherwise
    let log_probs = |g: &mut Graph<f64>, logits: crate::tensor::Var| -> Result<crate::tensor::Var> {
        match cfg.task {
            ProbeTask::SingleLabel => g.log_softmax(logits),
            ProbeTask::MultiLabel => {
                let s = g.shape(logits).to_vec();
                let l = g.reshape(logits, &[s[0], s[1], 1])?;
                let z = g.constant(Tensor::zeros(vec![s[0], s[1], 1]));
                let pair = g.concat(&[z, l], 2)?;
                g.log_softmax(pair)
            }
        }
    };
    for _ in 0..cfg.epochs {
        let mut g = Graph::<f64>::new();
        let pv = g.params(&store, true);
        let x = g.constant(xtr.clone());
        let logits = forward(&mut g, &pv, x)?;
        let lp = log_probs(&mut g, logits)?;
        let t = g.constant(target.clone());
        let prod = g.mul(lp, t)?;
        let s = g.sum(prod)?;
        let loss = g.scale(s, -1.0 / n as f64);
        g.backward(loss)?;
        let grads: Vec<Vec<f64>> = pv
            .iter()
            .zip(store.iter())
            .map(|(&v, (_, t))| g.take_grad(v).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        opt.step(&mut store, &grads)?;
    }

    let mut g = Graph::<f64>::new();
    let pv = g.params(&store, false);
    let x = g.constant(rows(&test)?);
    let logits = forward(&mut g, &pv, x)?;
    let lp = log_probs(&mut g, logits)?;
    let lpv = g.value(lp).data().to_vec();
    let test_scores: Vec<Vec<f64>> = match cfg.task {
        ProbeTask::SingleLabel => lpv.chunks(n_classes).map(|r| r.iter().map(|v| v.exp()).collect()).collect(),
        ProbeTask::MultiLabel => lpv
            .chunks(2 * n_classes)
            .map(|r| r.chunks(2).map(|p| p[1].exp()).collect())
            .collect(),
    };
    let test_labels: Vec<Vec<usize>> = test.iter().map(|&i| labels[i].clone()).collect();
    let accuracy = (cfg.task == ProbeTask::SingleLabel && !test.is_empty()).then(|| {
        let right = test_scores
            .iter()
            .zip(&test_labels)
            .filter(|(s, l)| argmax(s) == l[0])
            .count();
        right as f64 / test.len() as f64
    });
    let map = if test.is_empty() {
        f64::NAN
    } else {
        mean_average_precision(&test_scores, &test_labels, n_classes)?
    };
    Ok(ProbeResult {
        accuracy,
        map,
        n_train: train.len(),
        n_test: test.len(),
        seed: cfg.seed,
        test_scores,
        test_index: test,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZeroShot {
    /// Per clip: predicted label index and its cosine.
    pub predictions: Vec<(usize, f64)>,
    /// Cosine of every clip against every label.
    pub scores: Vec<Vec<f64>>,
}

impl ZeroShot {
    pub fn accuracy(&self, truth: &[usize]) -> Result<f64> {
        if truth.len() != self.predictions.len() || truth.is_empty() {
            return Err(Error::Data(format!(
                "{} truths for {} predictions",
                truth.len(),
                self.predictions.len()
            )));
        }
        let right = self.predictions.iter().zip(truth).filter(|(p, t)| p.0 == **t).count();
        Ok(right as f64 / truth.len() as f64)
    }

    pub fn map(&self, truth: &[usize]) -> Result<f64> {
        let labels: Vec<Vec<usize>> = truth.iter().map(|&t| vec![t]).collect();
        let n = self.scores.first().map_or(0, Vec::len);
        mean_average_precision(&self.scores, &labels, n)
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Argmax-cosine classification against unit-norm label vectors; ties go
/// to the lowest label index.
pub fn zero_shot(embeddings: &[Vec<f32>], labels: &[&[f32]]) -> Result<ZeroShot> {
    if labels.len() < 2 {
        return Err(Error::Data(format!("zero-shot needs at least 2 labels, got {}", labels.len())));
    }
    let dim = labels[0].len();
    for (k, l) in labels.iter().enumerate() {
        let norm = l.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if l.len() != dim || (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::Data(format!("label vector {k}: length {} norm {norm:.4}", l.len())));
        }
    }
    if let Some(e) = embeddings.iter().find(|e| e.len() != dim) {
        return Err(Error::Data(format!("embedding width {} vs label width {dim}", e.len())));
    }
    let scores: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| labels.iter().map(|l| cosine(e, l)).collect())
        .collect();
    let predictions = scores
        .iter()
        .map(|s| {
            let k = argmax(s);
            (k, s[k])
        })
        .collect();
    Ok(ZeroShot { predictions, scores })
}

/// [`zero_shot`] against the `text:` records of a teacher store; returns the
/// label names in store order alongside.
pub fn zero_shot_store(embeddings: &[Vec<f32>], store: &TeacherStore) -> Result<(Vec<String>, ZeroShot)> {
    let labels = store.labels();
    if labels.is_empty() {
        return Err(Error::Data("teacher store has no text: records".into()));
    }
    let names = labels.iter().map(|(n, _)| n.to_string()).collect();
    let vecs: Vec<&[f32]> = labels.iter().map(|(_, v)| *v).collect();
    Ok((names, zero_shot(embeddings, &vecs)?))
}

pub const SI_SDR_CAP_DB: f64 = 100.0;

/// Scale-invariant SDR in dB, capped at [`SI_SDR_CAP_DB`]. `None` when the
/// reference is silent (undefined).
pub fn si_sdr(x: &[f32], xh: &[f32]) -> Result<Option<f64>> {
    if x.len() != xh.len() {
        return Err(Error::Data(format!("si-sdr: lengths {} and {}", x.len(), xh.len())));
    }
    let xx: f64 = x.iter().map(|&v| (v as f64).powi(2)).sum();
    if xx == 0.0 {
        return Ok(None);
    }
    let alpha = x.iter().zip(xh).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / xx;
    let (mut ts, mut es) = (0.0, 0.0);
    for (&a, &b) in x.iter().zip(xh) {
        let t = alpha * a as f64;
        ts += t * t;
        es += (b as f64 - t).powi(2);
    }
    if es == 0.0 {
        return Ok(Some(SI_SDR_CAP_DB));
    }
    Ok(Some((10.0 * (ts / es).log10()).min(SI_SDR_CAP_DB)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconMetrics {
    pub si_sdr_db: Option<f64>,
    pub mrstft: f64,
}

pub fn recon_metrics(x: &[f32], xh: &[f32]) -> Result<ReconMetrics> {
    let si = si_sdr(x, xh)?;
    let mut g = Graph::<f64>::new();
    let to = |v: &[f32]| Tensor::new(vec![1, v.len()], v.iter().map(|&s| s as f64).collect());
    let a = g.constant(to(x)?);
    let b = g.constant(to(xh)?);
    let l = mrstft_loss(&mut g, a, b, &MRSTFT_WINDOWS)?;
    Ok(ReconMetrics {
        si_sdr_db: si,
        mrstft: g.scalar(l),
    })
}

/// One reported number with the data it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub task: String,
    pub metric: String,
    /// `None` for undefined values (e.g. SI-SDR of a silent reference).
    pub value: Option<f64>,
    pub n: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint_id: String,
    pub config_digest: String,
    pub metrics: Vec<Metric>,
}

impl EvalReport {
    pub fn push(&mut self, task: &str, metric: &str, value: Option<f64>, n: usize, seed: u64) {
        self.metrics.push(Metric {
            task: task.into(),
            metric: metric.into(),
            value: value.filter(|v| v.is_finite()),
            n,
            seed,
        });
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// First 16 hex digits of the SHA-256 of a file.
pub fn checkpoint_id(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().take(8).map(|b| format!("{b:02x}")).collect())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// `key,label,similarity` rows with a header line.
pub fn write_predictions_csv(path: &Path, rows: &[(String, String, f64)]) -> Result<()> {
    let mut out = String::from("key,label,similarity\n");
    for (k, l, s) in rows {
        out.push_str(&format!("{},{},{s:.6}\n", csv_field(k), csv_field(l)));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn ap_hand_cases() {
        // reversed ranking: positives at ranks 4 and 5
        let s = [5.0, 4.0, 3.0, 2.0, 1.0];
        let p = [false, false, false, true, true];
        assert!((average_precision(&s, &p).unwrap() - 0.5 * (1.0 / 4.0 + 2.0 / 5.0)).abs() < 1e-15);
        let perfect = [true, true, false, false, false];
        assert_eq!(average_precision(&s, &perfect), Some(1.0));
        assert_eq!(average_precision(&s, &[false; 5]), None);
    }

    fn blobs(n: usize, sigma: f64, seed: u64) -> (Vec<Vec<f32>>, Vec<Vec<usize>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let centre = if c == 0 { -5.0 * sigma } else { 5.0 * sigma };
            x.push(
                (0..4)
                    .map(|_| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        (centre + sigma * e) as f32
                    })
                    .collect(),
            );
            y.push(vec![c]);
        }
        (x, y)
    }

    #[test]
    fn separable_blobs_are_probed_perfectly() {
        let (x, y) = blobs(60, 0.01, 1);
        let r = probe(&x, &y, 2, &ProbeConfig::default()).unwrap();
        assert_eq!(r.accuracy, Some(1.0));
        assert_eq!(r.map, 1.0);
        assert_eq!(r.n_train + r.n_test, 60);
        assert_eq!(r, probe(&x, &y, 2, &ProbeConfig::default()).unwrap());
    }

    #[test]
    fn shuffled_labels_sit_at_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 800;
        let x: Vec<Vec<f32>> = (0..n).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let y: Vec<Vec<usize>> = (0..n).map(|_| vec![rng.gen_range(0..4)]).collect();
        let cfg = ProbeConfig {
            epochs: 100,
            test_fraction: 0.5,
            ..ProbeConfig::default()
        };
        let r = probe(&x, &y, 4, &cfg).unwrap();
        let p = 0.25;
        let sd = (p * (1.0 - p) / r.n_test as f64).sqrt();
        assert!((r.accuracy.unwrap() - p).abs() <= 3.0 * sd, "{r:?}");
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let y: Vec<Vec<usize>> = (0..40).map(|i| vec![i % 4]).collect();
        let (tr, te) = split(&y, 4, &ProbeConfig::default()).unwrap();
        assert_eq!(tr.len() + te.len(), 40);
        assert!(tr.iter().all(|i| !te.contains(i)));
        for c in 0..4 {
            assert_eq!(te.iter().filter(|&&i| y[i][0] == c).count(), 3);
        }
        let missing: Vec<Vec<usize>> = (0..10).map(|i| vec![i % 2]).collect();
        assert!(split(&missing, 3, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn multi_label_probe_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<Vec<f32>> = (0..60).map(|_| (0..3).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        let y: Vec<Vec<usize>> = x
            .iter()
            .map(|v| (0..3).filter(|&c| v[c] > 0.5).collect())
            .collect();
        let cfg = ProbeConfig {
            task: ProbeTask::MultiLabel,
            ..ProbeConfig::default()
        };
        let r = probe(&x, &y, 3, &cfg).unwrap();
        assert!(r.accuracy.is_none());
        assert!(r.map > 0.8, "{}", r.map);
    }

    #[test]
    fn zero_shot_picks_matching_label_and_breaks_ties_low() {
        let e0 = [1.0f32, 0.0, 0.0];
        let e1 = [0.0f32, 1.0, 0.0];
        let e2 = [0.0f32, 0.0, 1.0];
        let labels: Vec<&[f32]> = vec![&e0, &e1, &e2];
        let z = zero_shot(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.7, 0.7], vec![0.0, 3.0, 0.1]], &labels).unwrap();
        assert_eq!(z.predictions[0].0, 1);
        assert_eq!(z.predictions[1].0, 1);
        assert_eq!(z.predictions[2].0, 1);
        assert_eq!(z.accuracy(&[1, 1, 1]).unwrap(), 1.0);
        assert!(zero_shot(&[vec![1.0, 0.0, 0.0]], &labels[..1]).is_err());
        let bad = [0.5f32, 0.0, 0.0];
        assert!(zero_shot(&[vec![1.0, 0.0, 0.0]], &[&e0, &bad]).is_err());
    }

    #[test]
    fn si_sdr_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f32> = (0..16000).map(|i| (0.05 * i as f32).sin()).collect();
        assert_eq!(si_sdr(&x, &x).unwrap(), Some(SI_SDR_CAP_DB));
        let half: Vec<f32> = x.iter().map(|v| 0.5 * v).collect();
        assert_eq!(si_sdr(&x, &half).unwrap(), Some(SI_SDR_CAP_DB));
        assert_eq!(si_sdr(&[0.0; 10], &[1.0; 10]).unwrap(), None);
        assert!(si_sdr(&x, &x[1..]).is_err());

        // noise projected off x and scaled to 20 dB
        let mut n: Vec<f64> = (0..x.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let xx: f64 = x.iter().map(|&v| (v as f64).powi(2)).sum();
        let proj = x.iter().zip(&n).map(|(&a, b)| a as f64 * b).sum::<f64>() / xx;
        n.iter_mut().zip(&x).for_each(|(v, &a)| *v -= proj * a as f64);
        let nn: f64 = n.iter().map(|v| v * v).sum();
        let k = (xx / nn / 100.0).sqrt();
        let y: Vec<f32> = x.iter().zip(&n).map(|(&a, b)| (a as f64 + k * b) as f32).collect();
        let s = si_sdr(&x, &y).unwrap().unwrap();
        assert!((s - 20.0).abs() < 0.1, "{s}");
    }

    #[test]
    fn recon_metrics_of_identity() {
        let x: Vec<f32> = (0..4000).map(|i| (0.01 * i as f32).sin()).collect();
        let m = recon_metrics(&x, &x).unwrap();
        assert_eq!(m.mrstft, 0.0);
        assert_eq!(m.si_sdr_db, Some(SI_SDR_CAP_DB));
    }

    #[test]
    fn report_json_and_csv() {
        let mut r = EvalReport::default();
        r.push("probe", "accuracy", Some(0.5), 10, 1);
        r.push("recon", "si_sdr", Some(f64::NAN), 3, 1);
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.metrics[1].value, None);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        write_predictions_csv(&p, &[("a,b.wav".into(), "tonal".into(), 0.5)]).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "key,label,similarity\n\"a,b.wav\",tonal,0.500000\n"
        );
    }
}
