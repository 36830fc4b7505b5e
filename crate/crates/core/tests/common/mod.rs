//! Independent oracles shared by the integration tests and the acceptance
//! suite. Nothing here calls the library's kernels to compute an expected
//! value.

#![allow(dead_code)]

use ilnorm::autograd::sigmoid;
use ilnorm::norm::{mix, NormLayer};
use ilnorm::unet::{grad_check_unet, UNetSteps};
use ilnorm::{
    grad_check, Combiner, GradCheckReport, Graph, Grouping, NormConfig, NormKind, ParamStore, Result, Shape, Tensor,
    UNetConfig, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const LAYER_STEP: f64 = 1e-5;
pub const SEEDS: u64 = 5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng, shape: Shape, scale: f64, offset: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| offset + scale * rng.sample::<f64, _>(StandardNormal))
}

/// Tensor whose channels have their own random scale and offset.
pub fn heterogeneous(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    let scales: Vec<f64> = (0..shape.c()).map(|_| rng.random_range(0.3..3.0)).collect();
    let offsets: Vec<f64> = (0..shape.c()).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::from_fn(shape, |_, _, _, c| offsets[c] + scales[c] * rng.sample::<f64, _>(StandardNormal))
}

/// Which elements share statistics.
#[derive(Debug, Clone, Copy)]
pub enum StatGroups {
    /// Per sample and channel group of `size` consecutive channels.
    PerSample { size: usize },
    /// Per channel over the whole batch.
    PerChannel,
}

/// `(mean, population variance)` of every statistics group, by plain loops.
pub fn group_moments(t: &Tensor<f64>, groups: StatGroups) -> Vec<(f64, f64)> {
    let s = t.shape();
    let mut buckets: Vec<Vec<f64>> = Vec::new();
    match groups {
        StatGroups::PerSample { size } => {
            for n in 0..s.n() {
                for g in 0..s.c() / size {
                    let mut v = Vec::new();
                    for h in 0..s.h() {
                        for w in 0..s.w() {
                            for c in g * size..(g + 1) * size {
                                v.push(t.get(n, h, w, c));
                            }
                        }
                    }
                    buckets.push(v);
                }
            }
        }
        StatGroups::PerChannel => {
            for c in 0..s.c() {
                let mut v = Vec::new();
                for n in 0..s.n() {
                    for h in 0..s.h() {
                        for w in 0..s.w() {
                            v.push(t.get(n, h, w, c));
                        }
                    }
                }
                buckets.push(v);
            }
        }
    }
    buckets
        .iter()
        .map(|v| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
            (m, var)
        })
        .collect()
}

/// Same-padded cross-correlation by direct summation; weights are
/// `(k, k, C_in, C_out)`.
pub fn naive_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape();
    let k = w.shape().n();
    let p = (k / 2) as isize;
    let cout = w.shape().c();
    Tensor::from_fn(Shape::new(s.n(), s.h(), s.w(), cout), |n, i, j, co| {
        let mut acc = b.get(0, 0, 0, co);
        for dy in 0..k {
            for dx in 0..k {
                let (y, xx) = (i as isize + dy as isize - p, j as isize + dx as isize - p);
                if y < 0 || xx < 0 || y >= s.h() as isize || xx >= s.w() as isize {
                    continue;
                }
                for ci in 0..s.c() {
                    acc += x.get(n, y as usize, xx as usize, ci) * w.get(dy, dx, ci, co);
                }
            }
        }
        acc
    })
}

/// Mean over pixels of `-log softmax(logits)[label]`, one pixel at a time.
pub fn naive_cross_entropy(logits: &Tensor<f64>, labels: &[usize]) -> f64 {
    let s = logits.shape();
    let mut total = 0.0;
    let mut k = 0;
    for n in 0..s.n() {
        for h in 0..s.h() {
            for w in 0..s.w() {
                let z: Vec<f64> = (0..s.c()).map(|c| logits.get(n, h, w, c)).collect();
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                total += lse - z[labels[k]];
                k += 1;
            }
        }
    }
    total / k as f64
}

fn params(entries: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// `sum(r * y)` with a fixed random `r`, so every output element matters.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed ^ 0xabcd);
    let weights = normal(&mut r, g.shape(y), 1.0, 0.0);
    let wv = g.constant(weights);
    let prod = g.mul(y, wv)?;
    Ok(g.sum(prod))
}

/// Gradient checks of every differentiable layer on one seed.
pub fn layer_checks(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let mut run = |name: &str,
                   p: ParamStore<f64>,
                   f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>|
     -> Result<()> {
        let report = grad_check(|g, v| f(g, v), &p, LAYER_STEP, GRAD_TOL)?;
        out.push((name.to_string(), report));
        Ok(())
    };

    let conv = params(vec![
        ("x", normal(&mut r, Shape::new(2, 5, 6, 3), 1.0, 0.0)),
        ("w", normal(&mut r, Shape::new(3, 3, 3, 4), 0.5, 0.0)),
        ("b", normal(&mut r, Shape::channels(4), 0.5, 0.0)),
    ]);
    run("conv2d", conv, &|g, v| {
        let y = g.conv2d(v[0], v[1], v[2])?;
        weighted_sum(g, y, seed)
    })?;

    let up = params(vec![
        ("x", normal(&mut r, Shape::new(1, 3, 4, 4), 1.0, 0.0)),
        ("w", normal(&mut r, Shape::new(2, 2, 4, 3), 0.5, 0.0)),
        ("b", normal(&mut r, Shape::channels(3), 0.5, 0.0)),
    ]);
    run("conv_transpose2", up, &|g, v| {
        let y = g.conv_transpose2(v[0], v[1], v[2])?;
        weighted_sum(g, y, seed)
    })?;

    run("max_pool2", params(vec![("x", normal(&mut r, Shape::new(2, 4, 6, 3), 1.0, 0.0))]), &|g, v| {
        let y = g.max_pool2(v[0])?;
        weighted_sum(g, y, seed)
    })?;

    run("relu", params(vec![("x", normal(&mut r, Shape::new(2, 3, 3, 4), 1.0, 0.0))]), &|g, v| {
        let y = g.relu(v[0]);
        weighted_sum(g, y, seed)
    })?;

    for (name, grouping) in [
        ("instance_norm", Grouping::Instance),
        ("layer_norm", Grouping::Layer),
        ("group_norm4", Grouping::Group(4)),
        ("batch_norm", Grouping::Batch),
    ] {
        let p = params(vec![("x", heterogeneous(&mut r, Shape::new(2, 4, 4, 8)))]);
        run(name, p, &move |g, v| {
            let y = g.normalize(v[0], grouping, EPS)?;
            weighted_sum(g, y, seed)
        })?;
    }

    for (kind, rho) in [
        (Combiner::Sigmoid, Tensor::scalar(r.random_range(-2.0..2.0))),
        (Combiner::Clip, Tensor::scalar(r.random_range(0.1..0.9))),
        (
            Combiner::Softmax,
            Tensor::new(Shape::new(1, 1, 1, 2), vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)])?,
        ),
    ] {
        let p = params(vec![
            ("f_in", normal(&mut r, Shape::new(1, 3, 3, 4), 1.0, 0.0)),
            ("f_ln", normal(&mut r, Shape::new(1, 3, 3, 4), 1.0, 0.0)),
            ("rho", rho),
        ]);
        run(&format!("combine_{}", kind.name()), p, &move |g, v| {
            let y = mix(g, v[0], v[1], v[2], kind)?;
            weighted_sum(g, y, seed)
        })?;
    }

    let aff = params(vec![
        ("x", normal(&mut r, Shape::new(2, 3, 3, 4), 1.0, 0.0)),
        ("gamma", normal(&mut r, Shape::channels(4), 0.3, 1.0)),
        ("beta", normal(&mut r, Shape::channels(4), 0.5, 0.0)),
    ]);
    run("affine", aff, &|g, v| {
        let y = ilnorm::norm::affine(g, v[0], v[1], v[2])?;
        weighted_sum(g, y, seed)
    })?;

    let cat = params(vec![
        ("a", normal(&mut r, Shape::new(1, 3, 3, 2), 1.0, 0.0)),
        ("b", normal(&mut r, Shape::new(1, 3, 3, 3), 1.0, 0.0)),
    ]);
    run("concat_channels", cat, &|g, v| {
        let y = g.concat_channels(&[v[0], v[1]])?;
        weighted_sum(g, y, seed)
    })?;

    let labels: Vec<usize> = (0..2 * 3 * 3).map(|_| r.random_range(0..3)).collect();
    run("cross_entropy", params(vec![("logits", normal(&mut r, Shape::new(2, 3, 3, 3), 2.0, 0.0))]), &move |g, v| {
        g.cross_entropy(v[0], &labels)
    })?;
    Ok(out)
}

/// The full ILN site (IN and LN mixed by `sigmoid(rho)`, then GN16, then
/// the affine map) checked with respect to `x`, `rho`, `gamma` and `beta`.
pub fn iln_composite_check(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let layer = NormLayer::new("site", NormConfig::new(NormKind::Iln), 32);
    let mut p = ParamStore::new();
    p.insert("x".to_string(), heterogeneous(&mut r, Shape::new(2, 4, 4, 32)));
    p.insert(layer.rho_name(), Tensor::scalar(r.random_range(-2.0..2.0)));
    p.insert(layer.gamma_name(), normal(&mut r, Shape::channels(32), 0.3, 1.0));
    p.insert(layer.beta_name(), normal(&mut r, Shape::channels(32), 0.5, 0.0));
    let store = p.clone();
    grad_check(
        |g, v| {
            let y = layer.forward(g, &store, v[0])?;
            weighted_sum(g, y, seed)
        },
        &p,
        LAYER_STEP,
        GRAD_TOL,
    )
}

pub fn tiny_unet(kind: NormKind) -> UNetConfig {
    UNetConfig {
        depth: 1,
        base_channels: 4,
        in_channels: 1,
        num_classes: 2,
        norm: NormConfig::new(kind),
    }
}

/// End-to-end check of the one-level, 4-channel U-Net on an 8x8 input.
pub fn unet_check(kind: NormKind, seed: u64) -> Result<GradCheckReport> {
    grad_check_unet(tiny_unet(kind), 8, seed, UNetSteps::default(), GRAD_TOL)
}

/// d/d(rho) of `sum(r * mix(f_in, f_ln, rho))` by reverse mode.
pub fn mix_rho_grad(kind: Combiner, rho: f64, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let shape = Shape::new(1, 4, 4, 3);
    let mut g = Graph::new();
    let f_in = g.constant(normal(&mut r, shape, 1.0, 0.0));
    let f_ln = g.constant(normal(&mut r, shape, 1.0, 0.5));
    let rv = g.param("rho", Tensor::scalar(rho));
    let y = mix(&mut g, f_in, f_ln, rv, kind)?;
    let loss = weighted_sum(&mut g, y, seed)?;
    Ok(g.backward(loss)?["rho"].item())
}

/// Central-difference check of the clip combiner's `rho` gradient.
pub fn clip_rho_check(rho: f64, seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let shape = Shape::new(1, 4, 4, 3);
    let a = normal(&mut r, shape, 1.0, 0.0);
    let b = normal(&mut r, shape, 1.0, 0.5);
    let p = params(vec![("rho", Tensor::scalar(rho))]);
    grad_check(
        |g, v| {
            let f_in = g.constant(a.clone());
            let f_ln = g.constant(b.clone());
            let y = mix(g, f_in, f_ln, v[0], Combiner::Clip)?;
            weighted_sum(g, y, seed)
        },
        &p,
        LAYER_STEP,
        GRAD_TOL,
    )
}

/// Outcome of the search for an input whose IN/LN mixture is not itself
/// normalized.
#[derive(Debug, Clone)]
pub struct Witness {
    pub seed: u64,
    /// Per-(n, c) variance of the mixture that falls furthest outside
    /// `[0.9, 1.1]`.
    pub worst_variance: f64,
    /// Largest |mean| and |variance - 1| over GN16 groups after the cascade.
    pub post_mean: f64,
    pub post_var_dev: f64,
}

/// Tries seeds until the mixture `sigmoid(0.5) IN + (1 - sigmoid(0.5)) LN`
/// has some per-(n, c) variance outside `[0.9, 1.1]`, then measures the
/// GN16 output.
pub fn mixture_witness(max_tries: u64) -> Option<Witness> {
    let s = sigmoid(ilnorm::norm::RHO_INIT);
    for seed in 0..max_tries {
        let mut r = rng(seed);
        let x = heterogeneous(&mut r, Shape::new(2, 6, 6, 32));
        let f_in = ilnorm::norm::instance_norm(&x, EPS).ok()?;
        let f_ln = ilnorm::norm::layer_norm(&x, EPS).ok()?;
        let mixed = Tensor::from_fn(x.shape(), |n, h, w, c| {
            s * f_in.get(n, h, w, c) + (1.0 - s) * f_ln.get(n, h, w, c)
        });
        let worst = group_moments(&mixed, StatGroups::PerSample { size: 1 })
            .into_iter()
            .map(|(_, v)| v)
            .max_by(|a, b| (a - 1.0).abs().total_cmp(&(b - 1.0).abs()))?;
        if (0.9..=1.1).contains(&worst) {
            continue;
        }
        let post = ilnorm::norm::group_norm(&mixed, 16, EPS).ok()?;
        let stats = group_moments(&post, StatGroups::PerSample { size: 2 });
        return Some(Witness {
            seed,
            worst_variance: worst,
            post_mean: stats.iter().map(|(m, _)| m.abs()).fold(0.0, f64::max),
            post_var_dev: stats.iter().map(|(_, v)| (v - 1.0).abs()).fold(0.0, f64::max),
        });
    }
    None
}

/// Worst `(|mean|, variance)` deviation over all statistics groups of one
/// normalizer on one tensor: returns (max |mean|, min var, max var).
pub fn stats_extremes(t: &Tensor<f64>, groups: StatGroups) -> (f64, f64, f64) {
    let m = group_moments(t, groups);
    (
        m.iter().map(|(a, _)| a.abs()).fold(0.0, f64::max),
        m.iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min),
        m.iter().map(|(_, v)| *v).fold(0.0, f64::max),
    )
}

/// `x` perturbed so every GN/IN/LN group has variance far above epsilon.
pub fn stats_tensor(seed: u64, channels: usize) -> Tensor<f64> {
    let mut r = rng(seed);
    let n = r.random_range(1..=3);
    let h = r.random_range(3..=8);
    let w = r.random_range(3..=8);
    heterogeneous(&mut r, Shape::new(n, h, w, channels))
}

pub fn kinds_for_unet_suite() -> Vec<NormKind> {
    vec![
        NormKind::Iln,
        NormKind::Instance,
        NormKind::Batch,
        NormKind::Group(4),
        NormKind::None,
        NormKind::Mix(Combiner::Clip),
        NormKind::Mix(Combiner::Sigmoid),
        NormKind::Mix(Combiner::Softmax),
    ]
}
