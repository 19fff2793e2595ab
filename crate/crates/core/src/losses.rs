//! Training objectives on graph nodes, plus their weighted totals.

use serde::{Deserialize, Serialize};

use crate::dsp::stft::StftPlan;
use crate::error::{Error, Result};
use crate::model::{COMPRESS, POWER_EPS};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Hann windows of the reconstruction loss; hop is a quarter window.
pub const MRSTFT_WINDOWS: [usize; 7] = [2039, 1021, 503, 257, 127, 61, 31];

/// Guards the real-feature scale in feature matching.
pub const FM_EPS: f64 = 1e-8;

/// Mask added to self-similarities in the contrastive softmax.
const SELF_MASK: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub adv: f64,
    pub fm: f64,
    /// Peak of the annealed KL weight.
    pub kl_peak: f64,
    pub contrastive: f64,
    pub clap: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            adv: 1.0,
            fm: 10.0,
            kl_peak: 1e-2,
            contrastive: 0.1,
            clap: 1.0,
            temperature: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.adv, self.fm, self.kl_peak, self.contrastive, self.clap];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {} must be > 0", self.temperature)));
        }
        Ok(())
    }
}

/// Cyclical cosine ramp of the KL weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealSchedule {
    /// Cycle length in steps.
    pub cycle: u64,
    /// Fraction of the cycle spent ramping up.
    pub ramp: f64,
    pub peak: f64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            cycle: 10_000,
            ramp: 0.5,
            peak: 1e-2,
        }
    }
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.cycle == 0 || !(self.ramp > 0.0 && self.ramp <= 1.0) || !(self.peak >= 0.0 && self.peak.is_finite()) {
            return Err(Error::Config(format!("bad anneal schedule {self:?}")));
        }
        Ok(())
    }

    pub fn lambda(&self, step: u64) -> f64 {
        let t = (step % self.cycle) as f64;
        let rc = self.ramp * self.cycle as f64;
        if t < rc {
            self.peak * 0.5 * (1.0 - (std::f64::consts::PI * t / rc).cos())
        } else {
            self.peak
        }
    }
}

fn compressed<T: Real>(g: &mut Graph<T>, x: Var, plan: &std::sync::Arc<StftPlan<T>>) -> Result<Var> {
    let s = g.stft(x, plan.clone())?;
    g.power_law(s, COMPRESS, POWER_EPS)
}

/// Complex multi-resolution STFT distance between `N×L` batches: per window,
/// mean absolute difference of compressed real and imaginary parts; then the
/// mean over windows. Windows longer than the signal are skipped.
pub fn mrstft_loss<T: Real>(g: &mut Graph<T>, x: Var, xh: Var, windows: &[usize]) -> Result<Var> {
    if g.shape(x) != g.shape(xh) {
        return Err(Error::shape(
            "mrstft",
            format!("{:?} vs {:?}", g.shape(x), g.shape(xh)),
        ));
    }
    let len = g.shape(x).last().copied().unwrap_or(0);
    let mut terms = Vec::with_capacity(windows.len());
    for &w in windows {
        if len < w {
            log::warn!("mrstft: skipping window {w} for a {len}-sample signal");
            continue;
        }
        let plan = StftPlan::cached(w, w / 4)?;
        let a = compressed(g, x, &plan)?;
        let b = compressed(g, xh, &plan)?;
        let d = g.sub(a, b)?;
        let d = g.abs(d);
        terms.push(g.mean(d)?);
    }
    if terms.is_empty() {
        return Err(Error::Data(format!("mrstft: {len} samples is shorter than every window")));
    }
    let n = terms.len();
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / n as f64))
}

fn mean_of<T: Real>(g: &mut Graph<T>, parts: &[Var]) -> Result<Var> {
    let mut acc = *parts.first().ok_or_else(|| Error::InvalidParam("empty loss list".into()))?;
    for &p in &parts[1..] {
        acc = g.add(acc, p)?;
    }
    Ok(g.scale(acc, 1.0 / parts.len() as f64))
}

/// `mean((D(x̂) − 1)²)` averaged over networks.
pub fn lsgan_gen<T: Real>(g: &mut Graph<T>, fake: &[Var]) -> Result<Var> {
    let parts = fake
        .iter()
        .map(|&f| {
            let d = g.add_scalar(f, -1.0);
            let d = g.square(d);
            g.mean(d)
        })
        .collect::<Result<Vec<_>>>()?;
    mean_of(g, &parts)
}

/// `mean((D(x) − 1)²) + mean(D(x̂)²)` averaged over networks.
pub fn lsgan_disc<T: Real>(g: &mut Graph<T>, real: &[Var], fake: &[Var]) -> Result<Var> {
    if real.len() != fake.len() {
        return Err(Error::shape("lsgan", format!("{} real vs {} fake logit maps", real.len(), fake.len())));
    }
    let parts = real
        .iter()
        .zip(fake)
        .map(|(&r, &f)| {
            let d = g.add_scalar(r, -1.0);
            let d = g.square(d);
            let a = g.mean(d)?;
            let s = g.square(f);
            let b = g.mean(s)?;
            g.add(a, b)
        })
        .collect::<Result<Vec<_>>>()?;
    mean_of(g, &parts)
}

/// Generator and discriminator least-squares losses on one graph.
pub fn lsgan_losses<T: Real>(g: &mut Graph<T>, real: &[Var], fake: &[Var]) -> Result<(Var, Var)> {
    let d = lsgan_disc(g, real, fake)?;
    Ok((lsgan_gen(g, fake)?, d))
}

/// L1 feature matching, each layer divided by the mean magnitude of the
/// real features; real features are detached.
pub fn feature_matching<T: Real>(g: &mut Graph<T>, real: &[Vec<Var>], fake: &[Vec<Var>]) -> Result<Var> {
    if real.len() != fake.len() || real.iter().zip(fake).any(|(r, f)| r.len() != f.len()) {
        return Err(Error::shape("feature_matching", "real and fake feature banks differ in structure"));
    }
    let mut parts = Vec::new();
    for (rs, fs) in real.iter().zip(fake) {
        for (&r, &f) in rs.iter().zip(fs) {
            let r = g.detach(r);
            let scale = {
                let d = g.data(r);
                d.iter().map(|v| v.abs().as_f64()).sum::<f64>() / d.len().max(1) as f64
            };
            let diff = g.sub(f, r)?;
            let diff = g.abs(diff);
            let m = g.mean(diff)?;
            parts.push(g.scale(m, 1.0 / (scale + FM_EPS)));
        }
    }
    mean_of(g, &parts)
}

/// `mean(0.5·(μ² + e^{logσ²} − 1 − logσ²))`.
pub fn kld_loss<T: Real>(g: &mut Graph<T>, mu: Var, logvar: Var) -> Result<Var> {
    if g.shape(mu) != g.shape(logvar) {
        return Err(Error::shape("kld", format!("{:?} vs {:?}", g.shape(mu), g.shape(logvar))));
    }
    let m2 = g.square(mu);
    let ev = g.exp(logvar);
    let a = g.add(m2, ev)?;
    let a = g.sub(a, logvar)?;
    let a = g.add_scalar(a, -1.0);
    let a = g.scale(a, 0.5);
    g.mean(a)
}

/// Partner index of each row; every id must appear exactly twice.
pub fn pair_partners(pair_ids: &[u64]) -> Result<Vec<usize>> {
    if pair_ids.len() < 4 {
        return Err(Error::InvalidParam(format!(
            "contrastive loss needs at least 4 items, got {}",
            pair_ids.len()
        )));
    }
    pair_ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let others: Vec<usize> = (0..pair_ids.len()).filter(|&k| k != i && pair_ids[k] == *id).collect();
            match others.as_slice() {
                [j] => Ok(*j),
                _ => Err(Error::InvalidParam(format!(
                    "pair id {id} appears {} times; each id must appear exactly twice",
                    others.len() + 1
                ))),
            }
        })
        .collect()
}

/// NT-Xent over `B×K` projections: each row's partner is the positive,
/// every other row is a negative, and the positive stays in the
/// denominator.
pub fn contrastive_loss<T: Real>(g: &mut Graph<T>, proj: Var, pair_ids: &[u64], temperature: f64) -> Result<Var> {
    let s = g.shape(proj).to_vec();
    if s.len() != 2 || s[0] != pair_ids.len() {
        return Err(Error::shape("contrastive", format!("projections {s:?} for {} ids", pair_ids.len())));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidParam(format!("temperature {temperature} must be > 0")));
    }
    let partner = pair_partners(pair_ids)?;
    let b = s[0];
    let sim = g.cosine_matrix(proj, proj)?;
    let logits = g.scale(sim, 1.0 / temperature);
    let mut mask = vec![T::zero(); b * b];
    let mut pick = vec![T::zero(); b * b];
    for i in 0..b {
        mask[i * b + i] = T::lit(SELF_MASK);
        pick[i * b + partner[i]] = T::one();
    }
    let mask = g.constant(Tensor::new(vec![b, b], mask)?);
    let pick = g.constant(Tensor::new(vec![b, b], pick)?);
    let logits = g.add(logits, mask)?;
    let lsm = g.log_softmax(logits)?;
    let sel = g.mul(lsm, pick)?;
    let total = g.sum(sel)?;
    Ok(g.scale(total, -1.0 / b as f64))
}

/// `mean(2 − cos(pᵢ, tᵢ))` over rows with `use_row[i]`.
pub fn teacher_loss<T: Real>(g: &mut Graph<T>, proj: Var, teacher: Var, use_row: &[bool]) -> Result<Var> {
    let s = g.shape(proj).to_vec();
    if s.len() != 2 || g.shape(teacher) != s.as_slice() || use_row.len() != s[0] {
        return Err(Error::shape(
            "teacher_loss",
            format!("projection {s:?}, teacher {:?}, {} flags", g.shape(teacher), use_row.len()),
        ));
    }
    let n_used = use_row.iter().filter(|u| **u).count();
    if n_used == 0 {
        return Err(Error::InvalidParam("teacher loss with no target rows".into()));
    }
    for (name, v) in [("projection", proj), ("teacher", teacher)] {
        let d = g.data(v);
        for (i, row) in d.chunks(s[1]).enumerate() {
            if use_row[i] && row.iter().all(|x| *x == T::zero()) {
                return Err(Error::InvalidParam(format!("{name} row {i} has zero norm")));
            }
        }
    }
    let cos = g.cosine_similarity(proj, teacher)?;
    let w: Vec<T> = use_row
        .iter()
        .map(|&u| if u { T::lit(1.0 / n_used as f64) } else { T::zero() })
        .collect();
    let w = g.constant(Tensor::new(vec![s[0]], w)?);
    let wc = g.mul(cos, w)?;
    let mean_cos = g.sum(wc)?;
    let neg = g.neg(mean_cos);
    Ok(g.add_scalar(neg, 2.0))
}

/// Generator loss terms; disabled stages are `None`.
#[derive(Clone, Copy, Debug)]
pub struct GenTerms<V> {
    pub mrstft: V,
    pub kl: V,
    pub adv: Option<V>,
    pub fm: Option<V>,
    pub contrastive: Option<V>,
    pub clap: Option<V>,
}

impl<V: Copy> GenTerms<V> {
    /// `(weight, term)` pairs in summation order.
    fn weighted(&self, w: &LossWeights, lambda_kl: f64) -> Vec<(f64, V)> {
        let mut out = vec![(1.0, self.mrstft), (lambda_kl, self.kl)];
        for (lam, t) in [
            (w.adv, self.adv),
            (w.fm, self.fm),
            (w.contrastive, self.contrastive),
            (w.clap, self.clap),
        ] {
            if let Some(t) = t {
                out.push((lam, t));
            }
        }
        out
    }
}

impl GenTerms<f64> {
    pub fn total(&self, w: &LossWeights, lambda_kl: f64) -> f64 {
        self.weighted(w, lambda_kl).iter().map(|(l, t)| l * t).sum()
    }

    pub fn all_finite(&self) -> bool {
        [Some(self.mrstft), Some(self.kl), self.adv, self.fm, self.contrastive, self.clap]
            .iter()
            .flatten()
            .all(|v| v.is_finite())
    }
}

impl GenTerms<Var> {
    pub fn values<T: Real>(&self, g: &Graph<T>) -> GenTerms<f64> {
        let v = |x: Var| g.scalar(x).as_f64();
        GenTerms {
            mrstft: v(self.mrstft),
            kl: v(self.kl),
            adv: self.adv.map(v),
            fm: self.fm.map(v),
            contrastive: self.contrastive.map(v),
            clap: self.clap.map(v),
        }
    }
}

/// `L_mrSTFT + λ_adv·L_adv + λ_fm·L_fm + λ_KL(step)·L_KL + λ_c·L_c + λ_CLAP·L_CLAP`.
pub fn generator_total<T: Real>(g: &mut Graph<T>, terms: &GenTerms<Var>, w: &LossWeights, lambda_kl: f64) -> Result<Var> {
    let parts = terms.weighted(w, lambda_kl);
    let mut acc = parts[0].1;
    for &(lam, t) in &parts[1..] {
        let s = g.scale(t, lam);
        acc = g.add(acc, s)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(g: &mut Graph<f64>, shape: Vec<usize>, data: Vec<f64>) -> Var {
        g.constant(Tensor::new(shape, data).unwrap())
    }

    #[test]
    fn kld_values() {
        for (mu, lv, want) in [(0.0, 0.0, 0.0), (1.0, 0.0, 0.5), (0.0, 4f64.ln(), 0.5 * (3.0 - 4f64.ln()))] {
            let mut g = Graph::<f64>::new();
            let m = scalar(&mut g, vec![2], vec![mu, mu]);
            let l = scalar(&mut g, vec![2], vec![lv, lv]);
            let k = kld_loss(&mut g, m, l).unwrap();
            assert!((g.scalar(k) - want).abs() < 1e-15, "{mu} {lv}");
        }
    }

    #[test]
    fn anneal_points() {
        let s = AnnealSchedule {
            cycle: 100,
            ramp: 0.5,
            peak: 0.2,
        };
        assert_eq!(s.lambda(0), 0.0);
        assert!((s.lambda(25) - 0.1).abs() < 1e-15);
        assert_eq!(s.lambda(50), 0.2);
        assert_eq!(s.lambda(99), 0.2);
        assert_eq!(s.lambda(125), s.lambda(25));
    }

    #[test]
    fn contrastive_reference_cases() {
        let mut g = Graph::<f64>::new();
        let p = scalar(&mut g, vec![4, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        let l = contrastive_loss(&mut g, p, &[0, 0, 1, 1], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((g.scalar(l) - ((e + 2.0) / e).ln()).abs() < 1e-12);

        let p = scalar(&mut g, vec![6, 3], [0.3, -0.2, 0.9].repeat(6));
        let l = contrastive_loss(&mut g, p, &[4, 5, 6, 4, 5, 6], 0.5).unwrap();
        assert!((g.scalar(l) - 5f64.ln()).abs() < 1e-12);

        let p = scalar(&mut g, vec![4, 2], vec![1.0; 8]);
        assert!(contrastive_loss(&mut g, p, &[0, 0, 0, 1], 1.0).is_err());
        assert!(contrastive_loss(&mut g, p, &[0, 0, 1, 2], 1.0).is_err());
    }

    #[test]
    fn teacher_unit_cases() {
        let mut g = Graph::<f64>::new();
        let a = scalar(&mut g, vec![3, 2], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let b = scalar(&mut g, vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]);
        for (i, want) in [1.0, 2.0, 3.0].into_iter().enumerate() {
            let mut m = [false; 3];
            m[i] = true;
            let l = teacher_loss(&mut g, a, b, &m).unwrap();
            assert!((g.scalar(l) - want).abs() < 1e-12);
        }
        let z = scalar(&mut g, vec![3, 2], vec![0.0; 6]);
        assert!(teacher_loss(&mut g, a, z, &[true; 3]).is_err());
        // a missing row may hold anything
        assert!(teacher_loss(&mut g, a, b, &[true, false, true]).is_ok());
    }

    #[test]
    fn lsgan_trivial_values() {
        let mut g = Graph::<f64>::new();
        let ones = scalar(&mut g, vec![1, 1, 2, 3], vec![1.0; 6]);
        let zeros = scalar(&mut g, vec![1, 1, 2, 3], vec![0.0; 6]);
        let (gen1, disc) = lsgan_losses(&mut g, &[ones, ones], &[ones, zeros]).unwrap();
        assert_eq!(g.scalar(gen1), 0.5);
        assert_eq!(g.scalar(disc), 0.5);
        let (gen0, disc0) = lsgan_losses(&mut g, &[ones], &[zeros]).unwrap();
        assert_eq!(g.scalar(gen0), 1.0);
        assert_eq!(g.scalar(disc0), 0.0);
        assert!(lsgan_disc(&mut g, &[ones], &[ones, ones]).is_err());
    }

    #[test]
    fn feature_matching_by_hand() {
        let mut g = Graph::<f64>::new();
        let r0 = scalar(&mut g, vec![4], vec![1.0, -1.0, 2.0, -2.0]);
        let f0 = scalar(&mut g, vec![4], vec![1.0, 0.0, 2.0, 0.0]);
        let r1 = scalar(&mut g, vec![2], vec![4.0, 4.0]);
        let f1 = scalar(&mut g, vec![2], vec![0.0, 6.0]);
        let fm = feature_matching(&mut g, &[vec![r0, r1]], &[vec![f0, f1]]).unwrap();
        // layer 0: mean|d| = 0.75, scale 1.5; layer 1: mean|d| = 3, scale 4
        let want = (0.75 / (1.5 + FM_EPS) + 3.0 / (4.0 + FM_EPS)) / 2.0;
        assert!((g.scalar(fm) - want).abs() < 1e-15);
        let same = feature_matching(&mut g, &[vec![r0, r1]], &[vec![r0, r1]]).unwrap();
        assert_eq!(g.scalar(same), 0.0);
    }

    #[test]
    fn mrstft_zero_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::randn(vec![1, 4000], &mut rng));
        let y = g.constant(Tensor::randn(vec![1, 4000], &mut rng));
        let z = mrstft_loss(&mut g, x, x, &MRSTFT_WINDOWS).unwrap();
        assert_eq!(g.scalar(z), 0.0);
        let a = mrstft_loss(&mut g, x, y, &MRSTFT_WINDOWS).unwrap();
        let b = mrstft_loss(&mut g, y, x, &MRSTFT_WINDOWS).unwrap();
        assert_eq!(g.scalar(a), g.scalar(b));
        // short signal: only the windows that fit
        let s = g.constant(Tensor::randn(vec![1, 600], &mut rng));
        let t = g.constant(Tensor::randn(vec![1, 600], &mut rng));
        assert!(mrstft_loss(&mut g, s, t, &MRSTFT_WINDOWS).is_ok());
        let u = g.constant(Tensor::randn(vec![1, 20], &mut rng));
        assert!(mrstft_loss(&mut g, u, u, &MRSTFT_WINDOWS).is_err());
    }

    #[test]
    fn totals_by_hand() {
        let w = LossWeights {
            adv: 1.0,
            fm: 0.5,
            kl_peak: 0.1,
            contrastive: 0.2,
            clap: 0.3,
            temperature: 1.0,
        };
        let sched = AnnealSchedule {
            cycle: 10,
            ramp: 0.5,
            peak: w.kl_peak,
        };
        let lam = sched.lambda(7);
        assert_eq!(lam, 0.1);
        let vals = [2.0, 0.4, 0.3, 0.7, 1.1, 1.6];
        let mut g = Graph::<f64>::new();
        let v: Vec<Var> = vals.iter().map(|&x| g.constant_scalar(x)).collect();
        let terms = GenTerms {
            mrstft: v[0],
            kl: v[1],
            adv: Some(v[2]),
            fm: Some(v[3]),
            contrastive: Some(v[4]),
            clap: Some(v[5]),
        };
        let t = generator_total(&mut g, &terms, &w, lam).unwrap();
        let want = 2.0 + 0.1 * 0.4 + 1.0 * 0.3 + 0.5 * 0.7 + 0.2 * 1.1 + 0.3 * 1.6;
        assert!((g.scalar(t) - want).abs() < 1e-12);
        assert!((terms.values(&g).total(&w, lam) - want).abs() < 1e-12);

        let zero = LossWeights {
            adv: 0.0,
            fm: 0.0,
            kl_peak: 0.0,
            contrastive: 0.0,
            clap: 0.0,
            temperature: 1.0,
        };
        let t0 = generator_total(&mut g, &terms, &zero, 0.0).unwrap();
        assert_eq!(g.scalar(t0), 2.0);
    }

    #[test]
    fn mrstft_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = Tensor::<f64>::randn(vec![1, 300], &mut rng);
        let y = Tensor::<f64>::randn(vec![1, 300], &mut rng);
        let r = gradcheck::check(
            |g, v| {
                let xc = g.constant(x.clone());
                mrstft_loss(g, xc, v[0], &[127, 61])
            },
            &[y],
        )
        .unwrap();
        assert!(r.max_rel_err() < 1e-6, "{r:?}");
    }

    #[test]
    fn contrastive_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = Tensor::<f64>::randn(vec![6, 5], &mut rng);
        let r = gradcheck::check(|g, v| contrastive_loss(g, v[0], &[0, 1, 2, 0, 1, 2], 0.7), &[p]).unwrap();
        assert!(r.max_rel_err() < 1e-6, "{r:?}");
    }
}
