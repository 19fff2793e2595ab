use std::path::Path;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use savae::augment::{degrade, make_positive_pair, mix_sources, MicDegradeSpec, SourceAugSpec};
use savae::dsp::effects;
use savae::dsp::stft::{istft, powerlaw_compress, powerlaw_expand, stft, ComplexSpec};
use savae::dsp::AudioClip;
use savae::eval::{mean_average_precision, probe, zero_shot, ProbeConfig};
use savae::losses::{self, AnnealSchedule, MRSTFT_WINDOWS};
use savae::model::latent_file::LatentFile;
use savae::model::{Model, ModelConfig};
use savae::teacher::{anchors, synth_teacher, TeacherStore};
use savae::tensor::{AdamW, AdamWConfig, Conv2dCfg, Ema, Graph, ParamStore, Tensor};

fn noise(len: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::<f32>::uniform(vec![len], 0.5, &mut rng).into_data()
}

fn clip(len: usize, seed: u64) -> AudioClip {
    AudioClip::new(noise(len, seed), 16000).unwrap()
}

fn tiny() -> &'static (Model, ParamStore<f32>) {
    static M: std::sync::OnceLock<(Model, ParamStore<f32>)> = std::sync::OnceLock::new();
    M.get_or_init(|| Model::new::<f32>(ModelConfig::preset("tiny").unwrap(), 3).unwrap())
}

fn expected_out(len: usize, pad: usize, k: usize, d: usize, s: usize) -> Option<usize> {
    let total = len + pad;
    let span = d * (k - 1) + 1;
    (total >= span).then(|| (total - span) / s + 1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_output_length_follows_formula(
        h in 1usize..10, w in 1usize..10, kh in 1usize..4, kw in 1usize..4,
        dh in 1usize..3, dw in 1usize..3, sh in 1usize..3, sw in 1usize..3,
        pad in proptest::array::uniform4(0usize..3), seed in any::<u64>(),
    ) {
        let eh = expected_out(h, pad[0] + pad[1], kh, dh, sh);
        let ew = expected_out(w, pad[2] + pad[3], kw, dw, sw);
        prop_assume!(eh.is_some() && ew.is_some());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::randn(vec![1, 2, h, w], &mut rng));
        let k = g.constant(Tensor::randn(vec![3, 2, kh, kw], &mut rng));
        let cfg = Conv2dCfg::default().stride(sh, sw).dilation(dh, dw).pad(pad[0], pad[1], pad[2], pad[3]);
        let y = g.conv2d(x, k, None, cfg).unwrap();
        prop_assert_eq!(g.shape(y), &[1, 3, eh.unwrap(), ew.unwrap()][..]);
    }

    #[test]
    fn compress_then_expand_is_identity(
        vals in proptest::collection::vec((-8.0f64..1.0, 0.0f64..std::f64::consts::TAU), 1..64),
        p in 0.1f64..1.0,
    ) {
        let mut spec = ComplexSpec::zeros(vals.len(), 1, 512, 256);
        for (i, (m, ph)) in vals.iter().enumerate() {
            let m = 10f64.powf(*m);
            spec.re[i] = m * ph.cos();
            spec.im[i] = m * ph.sin();
        }
        let back = powerlaw_expand(&powerlaw_compress(&spec, p).unwrap()).unwrap();
        for (i, _) in vals.iter().enumerate() {
            let (a, b) = (spec.magnitude(i, 0), back.magnitude(i, 0));
            prop_assert!((a - b).abs() <= 1e-5 * a, "{} vs {}", a, b);
        }
    }

    #[test]
    fn stft_round_trip_on_noise(len in 600usize..4000, seed in any::<u64>()) {
        let x = noise(len, seed);
        let y = istft(&stft(&x, 512, 256).unwrap(), len).unwrap();
        let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        prop_assert!(err < 1e-6, "max error {}", err);
    }

    #[test]
    fn effects_are_deterministic(seed in any::<u64>(), db in -12.0f64..12.0, drive in 0.5f64..5.0) {
        let c = clip(3000, seed);
        let ir = effects::decay_ir(16000, 0.3, 0.4, seed).unwrap();
        let runs = |c: &AudioClip| -> Vec<AudioClip> {
            vec![
                effects::gain(c, db).unwrap(),
                effects::apply_eq(c, &[db, -db, 0.5 * db]).unwrap(),
                effects::apply_reverb(c, &ir).unwrap(),
                effects::level_jump(c, 1000, db).unwrap(),
                effects::time_shift(c, 37, true).unwrap(),
                effects::bandpass(c, 200.0, 4000.0).unwrap(),
                effects::spectral_mask_clip(c, 0.2, 0.4).unwrap(),
                effects::distort(c, drive).unwrap(),
                effects::codec_sim(c, 8, 3000.0).unwrap(),
                effects::pitch_shift(c, db / 4.0).unwrap(),
            ]
        };
        prop_assert_eq!(runs(&c), runs(&c));
    }

    #[test]
    fn latent_frames_follow_padding_formula(t in 513usize..400_000) {
        let cfg = ModelConfig::preset("small64").unwrap();
        prop_assert_eq!(cfg.latent_frames(t), t.div_ceil(256).div_ceil(8));
    }

    #[test]
    fn anneal_is_periodic_and_continuous(
        cycle in 4u64..500, ramp in 0.05f64..1.0, peak in 0.0f64..1.0, t in 0u64..10_000,
    ) {
        let s = AnnealSchedule { cycle, ramp, peak };
        prop_assert_eq!(s.lambda(t), s.lambda(t + cycle));
        let rc = ramp * cycle as f64;
        let lip = peak * std::f64::consts::PI / (2.0 * rc);
        if (t % cycle) + 1 < cycle {
            // a unit step can straddle the end of the ramp, where the bound still holds
            prop_assert!((s.lambda(t + 1) - s.lambda(t)).abs() <= lip + 1e-12);
        }
    }

    #[test]
    fn losses_stay_in_range(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::<f64>::new();
        let mu = g.constant(Tensor::randn(vec![2, 3, 1, 4], &mut rng));
        let lv = g.constant(Tensor::randn(vec![2, 3, 1, 4], &mut rng));
        let kld = losses::kld_loss(&mut g, mu, lv).unwrap();
        prop_assert!(g.scalar(kld) >= 0.0);
        let a = g.constant(Tensor::randn(vec![4, 5], &mut rng));
        let b = g.constant(Tensor::randn(vec![4, 5], &mut rng));
        let tl = losses::teacher_loss(&mut g, a, b, &[true; 4]).unwrap();
        prop_assert!((1.0 - 1e-12..=3.0 + 1e-12).contains(&g.scalar(tl)));
        let cl = losses::contrastive_loss(&mut g, a, &[1, 2, 1, 2], 0.5).unwrap();
        prop_assert!(g.scalar(cl) >= 0.0);
        let fake = g.constant(Tensor::randn(vec![2, 1, 3, 3], &mut rng));
        let real = g.constant(Tensor::randn(vec![2, 1, 3, 3], &mut rng));
        let (lg, ld) = losses::lsgan_losses(&mut g, &[real], &[fake]).unwrap();
        prop_assert!(g.scalar(lg) >= 0.0 && g.scalar(ld) >= 0.0);
        let fm = losses::feature_matching(&mut g, &[vec![real]], &[vec![fake]]).unwrap();
        prop_assert!(g.scalar(fm) >= 0.0 && g.scalar(fm).is_finite());
    }

    #[test]
    fn contrastive_falls_as_positive_cosine_rises(
        seed in any::<u64>(), th in 0.05f64..2.6, dth in 0.01f64..0.5,
    ) {
        // p0, p1 live in span(e0, e1); p2, p3 in span(e2..e5), so only the
        // positive similarity moves with θ
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rest = Tensor::<f64>::randn(vec![2, 4], &mut rng);
        let build = |theta: f64| {
            let mut d = vec![0.0; 24];
            d[0] = 1.0;
            d[6] = theta.cos();
            d[7] = theta.sin();
            for r in 0..2 {
                d[(r + 2) * 6 + 2..(r + 3) * 6].copy_from_slice(&rest.data()[r * 4..(r + 1) * 4]);
            }
            let mut g = Graph::<f64>::new();
            let p = g.constant(Tensor::new(vec![4, 6], d).unwrap());
            let l = losses::contrastive_loss(&mut g, p, &[0, 0, 1, 1], 0.5).unwrap();
            g.scalar(l)
        };
        prop_assert!(build(th) < build(th + dth));
    }

    #[test]
    fn mrstft_is_zero_on_itself_and_symmetric(len in 2100usize..5000, s1 in any::<u64>(), s2 in any::<u64>()) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(vec![1, len], &noise(len, s1).iter().map(|&v| v as f64).collect::<Vec<_>>()).unwrap());
        let y = g.constant(Tensor::from_f64(vec![1, len], &noise(len, s2).iter().map(|&v| v as f64).collect::<Vec<_>>()).unwrap());
        let xx = losses::mrstft_loss(&mut g, x, x, &MRSTFT_WINDOWS).unwrap();
        let xy = losses::mrstft_loss(&mut g, x, y, &MRSTFT_WINDOWS).unwrap();
        let yx = losses::mrstft_loss(&mut g, y, x, &MRSTFT_WINDOWS).unwrap();
        prop_assert_eq!(g.scalar(xx), 0.0);
        prop_assert!((g.scalar(xy) - g.scalar(yx)).abs() <= 1e-12 * g.scalar(xy));
    }

    #[test]
    fn teacher_store_round_trips(n in 1usize..8, dim in 2usize..40, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = TeacherStore::new(dim, savae::teacher::Provenance::Real);
        for i in 0..n {
            let v = Tensor::<f64>::randn(vec![dim], &mut rng);
            let norm = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            store.insert(format!("clip/{i}.wav"), v.data().iter().map(|x| (x / norm) as f32).collect()).unwrap();
        }
        let back = TeacherStore::from_bytes(&store.to_bytes().unwrap(), Path::new("mem")).unwrap();
        prop_assert_eq!(back, store);
    }

    #[test]
    fn anchors_are_orthonormal(n in 2usize..8, extra in 0usize..40, seed in any::<u64>()) {
        let a = anchors(n, n + extra, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for i in 0..n {
            for j in 0..n {
                let d: f64 = a[i].iter().zip(&a[j]).map(|(x, y)| x * y).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((d - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_shot_ignores_positive_scale(seed in any::<u64>(), scale in 1e-3f32..1e3) {
        let labels = ["a", "b", "c"].map(String::from).to_vec();
        let store = synth_teacher(&[], &labels, 8, seed, 0.0).unwrap();
        let vecs: Vec<&[f32]> = store.labels().into_iter().map(|(_, v)| v).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let e: Vec<Vec<f32>> = (0..5).map(|_| Tensor::<f32>::randn(vec![8], &mut rng).into_data()).collect();
        let scaled: Vec<Vec<f32>> = e.iter().map(|v| v.iter().map(|x| x * scale).collect()).collect();
        let a = zero_shot(&e, &vecs).unwrap();
        let b = zero_shot(&scaled, &vecs).unwrap();
        let ka: Vec<usize> = a.predictions.iter().map(|p| p.0).collect();
        let kb: Vec<usize> = b.predictions.iter().map(|p| p.0).collect();
        prop_assert_eq!(ka, kb);
    }

    #[test]
    fn perfect_ranking_has_unit_map(n in 3usize..20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<Vec<usize>> = (0..n).map(|i| vec![i % 2]).collect();
        let noise = Tensor::<f64>::uniform(vec![n], 0.4, &mut rng);
        let scores: Vec<Vec<f64>> = labels
            .iter()
            .zip(noise.data())
            .map(|(l, e)| if l[0] == 0 { vec![1.0 + e, -1.0 + e] } else { vec![-1.0 + e, 1.0 + e] })
            .collect();
        prop_assert_eq!(mean_average_precision(&scores, &labels, 2).unwrap(), 1.0);
    }

    #[test]
    fn latent_file_round_trips(dim in 1usize..20, frames in 1usize..30, seed in any::<u64>()) {
        let f = LatentFile {
            sample_rate: 16000,
            hop: 256,
            time_factor: 8,
            dim,
            frames,
            mu: noise(dim * frames, seed),
        };
        prop_assert_eq!(LatentFile::from_bytes(&f.to_bytes().unwrap(), Path::new("mem")).unwrap(), f);
    }

    #[test]
    fn identity_mixing_sums_sources(len in 100usize..2000, s1 in any::<u64>(), s2 in any::<u64>(), seed in any::<u64>()) {
        let a = clip(len, s1);
        let b = clip(len, s2);
        let m = mix_sources(&[a.clone(), b.clone()], &SourceAugSpec::identity(), seed).unwrap();
        let want: Vec<f32> = a.samples.iter().zip(&b.samples).map(|(x, y)| x + y).collect();
        prop_assert_eq!(m.samples, want);
        prop_assert_eq!(degrade(&a, &MicDegradeSpec::identity(), seed).unwrap(), a);
    }

    #[test]
    fn positive_views_share_their_sources(seed in any::<u64>()) {
        let srcs = [clip(4000, seed), clip(4000, seed ^ 7)];
        let (a, b) = make_positive_pair(&srcs, vec![3, 9], &SourceAugSpec::default(), &MicDegradeSpec::default(), seed).unwrap();
        prop_assert_eq!(a.pair_id, b.pair_id);
        prop_assert_eq!(a.source_set_id, b.source_set_id);
        prop_assert_eq!(&a.sources, &b.sources);
        let (ca, cb) = make_positive_pair(&srcs, vec![3, 9], &SourceAugSpec::identity(), &MicDegradeSpec::identity(), seed).unwrap();
        prop_assert_eq!(ca.x, cb.x);
    }

    #[test]
    fn ema_with_zero_momentum_copies_parameters(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::<f32>::new();
        p.add("w", Tensor::randn(vec![3, 4], &mut rng));
        let mut ema = Ema::new(&p, 0.0).unwrap();
        *p.get_mut(savae::tensor::ParamId(0)) = Tensor::randn(vec![3, 4], &mut rng);
        ema.update(&p).unwrap();
        prop_assert_eq!(ema.shadow().get(savae::tensor::ParamId(0)), p.get(savae::tensor::ParamId(0)));
    }

    #[test]
    fn adamw_descends_a_quadratic_monotonically(x0 in 2.0f64..10.0, sign in any::<bool>(), a in 0.1f64..5.0) {
        let x0 = if sign { x0 } else { -x0 };
        let mut p = ParamStore::<f64>::new();
        let id = p.add("x", Tensor::from_f64(vec![1], &[x0]).unwrap());
        let cfg = AdamWConfig { lr: 0.01, weight_decay: 0.0, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg, &p);
        let loss = |p: &ParamStore<f64>| a * p.get(id).data()[0].powi(2);
        let mut prev = loss(&p);
        for _ in 0..50 {
            let x = p.get(id).data()[0];
            opt.step(&mut p, &[vec![2.0 * a * x]]).unwrap();
            let l = loss(&p);
            prop_assert!(l < prev);
            prev = l;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn encoder_frame_count_matches_formula(t in 600usize..12_000, seed in any::<u64>()) {
        let (m, p) = tiny();
        let code = m.encode_clip::<ChaCha8Rng>(p, &clip(t, seed), None).unwrap();
        prop_assert_eq!(code.frames, t.div_ceil(256).div_ceil(8));
        prop_assert_eq!(code.mu.len(), code.dim * code.frames);
    }

    #[test]
    fn probe_is_deterministic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let latents: Vec<Vec<f32>> = (0..20).map(|_| Tensor::<f32>::randn(vec![4], &mut rng).into_data()).collect();
        let labels: Vec<Vec<usize>> = (0..20).map(|i| vec![i % 2]).collect();
        let cfg = ProbeConfig { epochs: 20, hidden: 8, seed, ..ProbeConfig::default() };
        prop_assert_eq!(probe(&latents, &labels, 2, &cfg).unwrap(), probe(&latents, &labels, 2, &cfg).unwrap());
    }
}
