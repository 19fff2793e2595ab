//! Central finite-difference gradient checks in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Conv2dCfg, Graph, NormAxes, Tensor, Var};
use crate::dsp::stft::StftPlan;
use crate::error::{Error, Result};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

/// Result of checking one scalar function.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// Per input: `max|analytic − numeric| / max(max|analytic|, max|numeric|)`.
    pub rel_err: Vec<f64>,
    pub max_abs_grad: Vec<f64>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.rel_err.iter().copied().fold(0.0, f64::max)
    }
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>], grad: bool) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), grad)).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::Autodiff(format!(
            "gradient check needs a scalar output, got {:?}",
            g.shape(out)
        )));
    }
    let v = g.scalar(out);
    if !grad {
        return Ok((v, Vec::new()));
    }
    g.backward(out)?;
    let grads = vars
        .iter()
        .map(|&x| g.grad(x).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();
    Ok((v, grads))
}

/// Compare the gradient of `f` with central differences at `inputs`.
pub fn check<F>(f: F, inputs: &[Tensor<f64>]) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_step(f, inputs, STEP)
}

/// [`check`] with an explicit step.
pub fn check_step<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (_, analytic) = eval(&f, inputs, true)?;
    let mut work = inputs.to_vec();
    let mut rel_err = Vec::with_capacity(inputs.len());
    let mut max_abs_grad = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut diff = 0.0f64;
        let mut scale = 0.0f64;
        for k in 0..inputs[i].len() {
            let x0 = inputs[i].data()[k];
            work[i].data_mut()[k] = x0 + step;
            let (fp, _) = eval(&f, &work, false)?;
            work[i].data_mut()[k] = x0 - step;
            let (fm, _) = eval(&f, &work, false)?;
            work[i].data_mut()[k] = x0;
            let num = (fp - fm) / (2.0 * step);
            let ana = analytic[i][k];
            diff = diff.max((ana - num).abs());
            scale = scale.max(ana.abs()).max(num.abs());
        }
        rel_err.push(if scale > 0.0 { diff / scale } else { 0.0 });
        max_abs_grad.push(scale);
    }
    Ok(GradReport {
        rel_err,
        max_abs_grad,
    })
}

/// Loss `Σ out ⊙ R` for a fixed random `R`, so every output element carries
/// a distinct weight.
pub fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = Tensor::uniform(g.shape(out).to_vec(), 1.0, &mut rng);
    let r = g.constant(r);
    let p = g.mul(out, r)?;
    g.sum(p)
}

/// Uniform values in `±[lo, hi]` with random sign (keeps clear of kinks at 0).
fn away_from_zero(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

fn positive(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

type Case = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>);

/// One finite-difference check per differentiable operator; returns the
/// maximum relative error of each.
pub fn operator_suite(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases: Vec<Case> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($t:expr),*], $f:expr) => {
            cases.push(($name, vec![$($t),*], Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let out = ($f)(g, v)?;
                weighted_sum(g, out, seed)
            })));
        };
    }
    let u = |s: Vec<usize>, r: &mut ChaCha8Rng| Tensor::<f64>::uniform(s, 1.0, r);
    case!("add", [u(vec![5], r), u(vec![5], r)], |g: &mut Graph<f64>, v: &[Var]| g.add(v[0], v[1]));
    case!("add_broadcast", [u(vec![2, 3, 5], r), u(vec![3, 1], r)], |g: &mut Graph<f64>, v: &[Var]| g.add(v[0], v[1]));
    case!("sub_broadcast", [u(vec![5], r), u(vec![2, 5], r)], |g: &mut Graph<f64>, v: &[Var]| g.sub(v[0], v[1]));
    case!("mul_broadcast", [u(vec![2, 5], r), u(vec![1, 5], r)], |g: &mut Graph<f64>, v: &[Var]| g.mul(v[0], v[1]));
    case!("div", [u(vec![5], r), positive(vec![5], 0.5, 2.0, r)], |g: &mut Graph<f64>, v: &[Var]| g.div(v[0], v[1]));
    case!("div_broadcast", [u(vec![3, 5], r), positive(vec![3, 1], 0.5, 2.0, r)], |g: &mut Graph<f64>, v: &[Var]| g.div(v[0], v[1]));
    case!("abs", [away_from_zero(vec![5], 0.1, 1.0, r)], |g: &mut Graph<f64>, v: &[Var]| Ok(g.abs(v[0])));
    case!("exp", [u(vec![5], r)], |g: &mut Graph<f64>, v: &[Var]| Ok(g.exp(v[0])));
    case!("log", [positive(vec![5], 0.2, 2.0, r)], |g: &mut Graph<f64>, v: &[Var]| Ok(g.log(v[0])));
    case!("sin", [u(vec![5], r)], |g: &mut Graph<f64>, v: &[Var]| Ok(g.sin(v[0])));
    case!("square", [u(vec![5], r)], |g: &mut Graph<f64>, v: &[Var]| Ok(g.square(v[0])));
    case!("sqrt", [positive(vec![5], 0.2, 2.0, r)], |g: &mut Graph<f64>, v: &[Var]| Ok(g.sqrt(v[0])));
    case!("tanh", [u(vec![5], r)], |g: &mut Graph<f64>, v: &[Var]| Ok(g.tanh(v[0])));
    case!("leaky_relu", [away_from_zero(vec![5], 0.1, 1.0, r)], |g: &mut Graph<f64>, v: &[Var]| Ok(g.leaky_relu(v[0], 0.2)));
    case!("clamp", [Tensor::from_f64(vec![5], &[-2.0, -0.3, 0.1, 0.6, 3.0])?], |g: &mut Graph<f64>, v: &[Var]| Ok(g.clamp(v[0], -1.0, 1.0)));
    case!("scale_add_scalar", [u(vec![5], r)], |g: &mut Graph<f64>, v: &[Var]| {
        let s = g.scale(v[0], -1.7);
        Ok(g.add_scalar(s, 0.3))
    });
    case!("matmul", [u(vec![3, 4], r), u(vec![4, 5], r)], |g: &mut Graph<f64>, v: &[Var]| g.matmul(v[0], v[1]));
    case!("conv2d", [u(vec![2, 3, 5, 6], r), u(vec![4, 3, 3, 3], r), u(vec![4], r)], |g: &mut Graph<f64>, v: &[Var]| {
        g.conv2d(v[0], v[1], Some(v[2]), Conv2dCfg::default().pad(1, 1, 1, 1))
    });
    case!("conv2d_strided_dilated", [u(vec![1, 2, 7, 9], r), u(vec![3, 2, 3, 2], r)], |g: &mut Graph<f64>, v: &[Var]| {
        g.conv2d(v[0], v[1], None, Conv2dCfg::default().stride(2, 2).dilation(1, 3).pad(1, 0, 2, 1))
    });
    case!("conv2d_depthwise", [u(vec![2, 3, 6, 8], r), u(vec![3, 1, 3, 5], r), u(vec![3], r)], |g: &mut Graph<f64>, v: &[Var]| {
        g.conv2d(v[0], v[1], Some(v[2]), Conv2dCfg::default().groups(3).stride(2, 1).dilation(1, 2).pad(1, 1, 8, 0))
    });
    case!("conv2d_pointwise", [u(vec![2, 4, 3, 5], r), u(vec![6, 4, 1, 1], r), u(vec![6], r)], |g: &mut Graph<f64>, v: &[Var]| {
        g.conv2d(v[0], v[1], Some(v[2]), Conv2dCfg::default())
    });
    case!("conv2d_grouped", [u(vec![1, 4, 5, 5], r), u(vec![6, 2, 2, 3], r)], |g: &mut Graph<f64>, v: &[Var]| {
        g.conv2d(v[0], v[1], None, Conv2dCfg::default().groups(2).pad(0, 1, 1, 1))
    });
    case!("upsample_nearest", [u(vec![1, 2, 3, 4], r)], |g: &mut Graph<f64>, v: &[Var]| g.upsample_nearest(v[0], 2, 2));
    case!("sum_axes", [u(vec![2, 3, 4], r)], |g: &mut Graph<f64>, v: &[Var]| g.sum_axes(v[0], &[0, 2]));
    case!("mean_axes", [u(vec![2, 3, 4], r)], |g: &mut Graph<f64>, v: &[Var]| g.mean_axes(v[0], &[1]));
    case!("mean", [u(vec![5], r)], |g: &mut Graph<f64>, v: &[Var]| g.mean(v[0]));
    case!("reshape", [u(vec![2, 6], r)], |g: &mut Graph<f64>, v: &[Var]| g.reshape(v[0], &[3, 4]));
    case!("transpose", [u(vec![2, 3, 4], r)], |g: &mut Graph<f64>, v: &[Var]| g.transpose(v[0], 0, 2));
    case!("permute", [u(vec![2, 3, 4], r)], |g: &mut Graph<f64>, v: &[Var]| g.permute(v[0], &[1, 2, 0]));
    case!("concat", [u(vec![2, 2, 3], r), u(vec![2, 1, 3], r)], |g: &mut Graph<f64>, v: &[Var]| g.concat(&[v[0], v[1], v[0]], 1));
    case!("slice", [u(vec![2, 5, 3], r)], |g: &mut Graph<f64>, v: &[Var]| g.slice(v[0], 1, 1, 4));
    case!("normalize_rows", [u(vec![3, 5], r)], |g: &mut Graph<f64>, v: &[Var]| g.normalize_rows(v[0], 1e-12));
    case!("cosine_similarity", [u(vec![3, 5], r), u(vec![3, 5], r)], |g: &mut Graph<f64>, v: &[Var]| g.cosine_similarity(v[0], v[1]));
    case!("cosine_matrix", [u(vec![3, 5], r), u(vec![4, 5], r)], |g: &mut Graph<f64>, v: &[Var]| g.cosine_matrix(v[0], v[1]));
    case!("log_softmax", [u(vec![3, 5], r)], |g: &mut Graph<f64>, v: &[Var]| g.log_softmax(v[0]));
    case!("instance_norm_spatial", [u(vec![2, 3, 4, 5], r), u(vec![3], r), u(vec![3], r)], |g: &mut Graph<f64>, v: &[Var]| {
        g.instance_norm(v[0], v[1], v[2], NormAxes::Spatial, 1e-5)
    });
    case!("instance_norm_channel_height", [u(vec![2, 3, 4, 5], r), u(vec![3], r), u(vec![3], r)], |g: &mut Graph<f64>, v: &[Var]| {
        g.instance_norm(v[0], v[1], v[2], NormAxes::ChannelHeight, 1e-5)
    });
    case!("snake_beta", [Tensor::uniform(vec![2, 3, 5], 2.0, r), u(vec![3], r), u(vec![3], r)], |g: &mut Graph<f64>, v: &[Var]| {
        g.snake_beta(v[0], v[1], v[2])
    });
    case!("stft", [u(vec![2, 40], r)], |g: &mut Graph<f64>, v: &[Var]| g.stft(v[0], StftPlan::cached(16, 4)?));
    case!("stft_odd_window", [u(vec![1, 37], r)], |g: &mut Graph<f64>, v: &[Var]| g.stft(v[0], StftPlan::cached(13, 3)?));
    case!("istft", [u(vec![2, 2, 9, 10], r)], |g: &mut Graph<f64>, v: &[Var]| g.istft(v[0], StftPlan::cached_cola(16, 4)?, 37));
    case!("power_law", [away_from_zero(vec![2, 2, 5], 0.1, 1.0, r)], |g: &mut Graph<f64>, v: &[Var]| g.power_law(v[0], 0.3, 1e-12));
    let mut out = Vec::with_capacity(cases.len());
    for (name, inputs, f) in cases {
        let rep = check(|g, v| f(g, v), &inputs)?;
        out.push((name.to_string(), rep.max_rel_err()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap();
        let mut g = Graph::new();
        let v = g.leaf(x.clone(), true);
        let sq = g.square(v);
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[2.0, 4.0]);

        let r = check(
            |g, v| {
                let sq = g.square(v[0]);
                g.sum(sq)
            },
            &[x],
        )
        .unwrap();
        assert!(r.max_rel_err() < 1e-8);
    }

    #[test]
    fn every_operator_matches_finite_differences() {
        for seed in 0..3 {
            for (name, err) in operator_suite(seed).unwrap() {
                assert!(err < 1e-6, "{name} (seed {seed}): {err:e}");
            }
        }
    }
}
