//! Finite-difference checks of every operator plus the composite pieces
//! trained end to end: residual blocks, projection heads, a small
//! discriminator and each loss. Parameters enter as checked inputs.
//!
//! Composite cases contain abs, leaky-ReLU and power-law nodes. A central
//! difference taken across one of their kinks measures nothing, so inputs
//! are redrawn until every such node sits clear of its kink.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::derive_seed;
use crate::discriminator::{DiscBank, DiscConfig};
use crate::error::{Error, Result};
use crate::losses::{self, GenTerms, LossWeights};
use crate::model::layers::{BlockSpec, Builder, ResBlock, TimeMode};
use crate::model::{Model, ModelConfig};
use crate::tensor::gradcheck::{check_step, operator_suite, weighted_sum};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Tolerance on the maximum relative error of each case.
pub const TOLERANCE: f64 = 1e-6;
/// Finite-difference step for composite cases.
pub const STEP: f64 = 1e-6;
/// Smallest allowed distance of an abs / leaky-ReLU / clamp input to its kink.
pub const SWITCH_MARGIN: f64 = 1e-4;
/// Smallest allowed complex magnitude entering a power law.
pub const POWER_MARGIN: f64 = 3e-3;
/// Draws tried per case before giving up.
pub const MAX_DRAWS: u64 = 64;

type Draw<'a> = dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Vec<Tensor<f64>>) + 'a;
type Body<'a> = dyn Fn(&mut Graph<f64>, &[Var], &[Var]) -> Result<Var> + 'a;

/// Check `body` at the first draw clear of kinks. `draw` returns checked
/// inputs and constants.
fn smooth_case(name: &str, seed: u64, draw: &Draw, body: &Body) -> Result<(String, f64)> {
    for attempt in 0..MAX_DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, attempt]));
        let (inputs, consts) = draw(&mut rng);
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let c: Vec<Var> = consts.iter().map(|t| g.constant(t.clone())).collect();
            body(g, v, &c)
        };
        let mut g = Graph::new();
        let v: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        f(&mut g, &v)?;
        let (switch, power) = g.kink_margins();
        if switch < SWITCH_MARGIN || power < POWER_MARGIN {
            continue;
        }
        return Ok((name.into(), check_step(f, &inputs, STEP)?.max_rel_err()));
    }
    Err(Error::Autodiff(format!("{name}: no draw clear of kinks in {MAX_DRAWS} tries")))
}

fn values(store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    store.iter().map(|(_, t)| t.clone()).collect()
}

fn u(shape: Vec<usize>, r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, r)
}

fn block_case(name: &str, spec: BlockSpec, seed: u64) -> Result<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let block = ResBlock::new(
        &mut Builder {
            store: &mut store,
            rng: &mut rng,
        },
        "b",
        spec,
    );
    let params = values(&store);
    smooth_case(
        name,
        seed,
        &|r| {
            let mut inputs = vec![u(vec![2, spec.cin, 8, 8], r)];
            inputs.extend(params.iter().cloned());
            (inputs, vec![])
        },
        &|g, v, _| {
            let out = block.forward(g, &v[1..], v[0])?;
            weighted_sum(g, out, seed)
        },
    )
}

fn head_cases(seed: u64) -> Result<Vec<(String, f64)>> {
    let cfg = ModelConfig {
        latent_dim: 4,
        teacher_dim: 6,
        ..ModelConfig::preset("tiny")?
    };
    let (model, store) = Model::new::<f64>(cfg, seed)?;
    let all = values(&store);
    let mut out = Vec::new();
    for (name, prefix) in [("head_contrastive", "head_c."), ("head_teacher", "head_l.")] {
        let ids: Vec<usize> = store
            .names()
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with(prefix))
            .map(|(i, _)| i)
            .collect();
        out.push(smooth_case(
            name,
            seed,
            &|r| {
                let mut inputs = vec![Tensor::randn(vec![3, 4, 1, 2], r)];
                inputs.extend(ids.iter().map(|&i| all[i].clone()));
                (inputs, all.clone())
            },
            &|g, v, c| {
                let mut pv = c.to_vec();
                for (k, &i) in ids.iter().enumerate() {
                    pv[i] = v[k + 1];
                }
                let p = if prefix == "head_c." {
                    model.project_contrastive(g, &pv, v[0])?
                } else {
                    model.project_teacher(g, &pv, v[0])?
                };
                weighted_sum(g, p, seed)
            },
        )?);
    }
    Ok(out)
}

fn disc_case(seed: u64) -> Result<(String, f64)> {
    let cfg = DiscConfig {
        windows: vec![16],
        band_edges: vec![0.0, 0.5, 1.0],
        channels: 3,
        layers: 2,
        slope: 0.2,
    };
    let (bank, store) = DiscBank::new::<f64>(cfg, seed)?;
    let params = values(&store);
    smooth_case(
        "discriminator",
        seed,
        &|r| {
            let mut inputs = vec![u(vec![1, 40], r)];
            inputs.extend(params.iter().cloned());
            (inputs, vec![])
        },
        &|g, v, _| {
            let outs = bank.forward(g, &v[1..], v[0])?;
            let mut acc = None;
            for o in outs {
                let mut parts = vec![o.logits];
                parts.extend(o.features);
                for p in parts {
                    let s = weighted_sum(g, p, seed)?;
                    acc = Some(match acc {
                        None => s,
                        Some(a) => g.add(a, s)?,
                    });
                }
            }
            Ok(acc.expect("at least one network"))
        },
    )
}

fn unit_rows(mut t: Tensor<f64>, width: usize) -> Tensor<f64> {
    for row in t.data_mut().chunks_mut(width) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

fn us(shapes: &[&[usize]], r: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    shapes.iter().map(|s| u(s.to_vec(), r)).collect()
}

fn loss_cases(seed: u64) -> Result<Vec<(String, f64)>> {
    let w = LossWeights::default();
    let fm: &[&[usize]] = &[&[2, 3, 4, 2], &[2, 3, 2, 1]];
    Ok(vec![
        smooth_case(
            "loss_mrstft",
            seed,
            &|r| (vec![u(vec![2, 200], r)], vec![u(vec![2, 200], r)]),
            &|g, v, c| losses::mrstft_loss(g, c[0], v[0], &[127, 61, 31]),
        )?,
        smooth_case(
            "loss_lsgan_gen",
            seed,
            &|r| (us(&[&[2, 1, 3, 2], &[2, 1, 2, 2]], r), vec![]),
            &|g, v, _| losses::lsgan_gen(g, v),
        )?,
        smooth_case(
            "loss_lsgan_disc",
            seed,
            &|r| (us(&[&[2, 1, 3, 2], &[2, 1, 2, 2], &[2, 1, 3, 2], &[2, 1, 2, 2]], r), vec![]),
            &|g, v, _| losses::lsgan_disc(g, &v[..2], &v[2..]),
        )?,
        // real features are detached inside the loss, so only fake ones are checked
        smooth_case(
            "loss_feature_matching",
            seed,
            &|r| (us(fm, r), us(fm, r)),
            &|g, v, c| losses::feature_matching(g, &[c.to_vec()], &[v.to_vec()]),
        )?,
        smooth_case(
            "loss_kld",
            seed,
            &|r| (us(&[&[2, 3, 1, 4], &[2, 3, 1, 4]], r), vec![]),
            &|g, v, _| losses::kld_loss(g, v[0], v[1]),
        )?,
        smooth_case(
            "loss_contrastive",
            seed,
            &|r| (vec![u(vec![6, 5], r)], vec![]),
            &|g, v, _| losses::contrastive_loss(g, v[0], &[7, 3, 7, 3, 9, 9], 0.5),
        )?,
        smooth_case(
            "loss_teacher",
            seed,
            &|r| (vec![u(vec![4, 5], r)], vec![unit_rows(u(vec![4, 5], r), 5)]),
            &|g, v, c| losses::teacher_loss(g, v[0], c[0], &[true, false, true, true]),
        )?,
        smooth_case(
            "loss_generator_total",
            seed,
            &|r| ((0..6).map(|_| u(vec![], r)).collect(), vec![]),
            &|g, v, _| {
                let terms = GenTerms {
                    mrstft: v[0],
                    kl: v[1],
                    adv: Some(v[2]),
                    fm: Some(v[3]),
                    contrastive: Some(v[4]),
                    clap: Some(v[5]),
                };
                losses::generator_total(g, &terms, &w, 3e-3)
            },
        )?,
    ])
}

/// Every case with its maximum relative error.
pub fn run(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut out = operator_suite(seed)?;
    let base = BlockSpec {
        cin: 4,
        cout: 4,
        hidden: 8,
        kf: 3,
        kt: 5,
        dilation: 2,
        time: TimeMode::Centered { down: true },
        scale_freq: true,
    };
    out.push(block_case("resblock_encoder", base, seed)?);
    out.push(block_case(
        "resblock_encoder_skip_conv",
        BlockSpec {
            cout: 6,
            time: TimeMode::Centered { down: false },
            ..base
        },
        seed,
    )?);
    out.push(block_case(
        "resblock_decoder",
        BlockSpec {
            kt: 2,
            dilation: 1,
            time: TimeMode::Causal { up: true },
            ..base
        },
        seed,
    )?);
    out.extend(head_cases(seed)?);
    out.push(disc_case(seed)?);
    out.extend(loss_cases(seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes() {
        let res = run(0).unwrap();
        let bad: Vec<_> = res.iter().filter(|(_, e)| !(*e < TOLERANCE)).collect();
        assert!(bad.is_empty(), "{bad:?}");
        assert!(res.len() > 40);
    }

    #[test]
    fn margins_see_kinks() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(vec![3], &[0.5, -2e-4, 0.0]).unwrap());
        g.abs(x);
        assert_eq!(g.kink_margins(), (2e-4, f64::INFINITY));
    }
}
