//! U-Net with a normalization site between every convolution and its ReLU.
//!
//! With the default depth of four poolings and 16 start channels the
//! encoder runs 16 -> 32 -> 64 -> 128 -> 256 channels and the decoder
//! mirrors it back. Each encoder level has two 3x3 convolutions, each
//! decoder level a 2x2 up-convolution followed by skip concatenation and two
//! 3x3 convolutions; all of these are normalization sites, giving
//! `2 * (depth + 1) + 3 * depth` sites (22 at depth 4). A final 1x1
//! convolution produces the class logits and has no norm or ReLU.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{grad_check, GradCheckReport, Gradients, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::norm::{NormConfig, NormKind, NormLayer};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

const CHECKPOINT_MAGIC: &[u8; 4] = b"NKCK";
pub const BIAS_INIT: f64 = 0.1;

/// Standard deviation of a truncated normal at `±2` sigma relative to the
/// untruncated sigma.
const TRUNCATED_STD_FACTOR: f64 = 0.879_625_661_034_239_8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UNetConfig {
    /// Number of 2x2 poolings.
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub norm: NormConfig,
}

impl UNetConfig {
    /// Four poolings, 16 start channels, one input channel, two classes.
    pub fn standard(norm: NormConfig) -> Self {
        UNetConfig {
            depth: 4,
            base_channels: 16,
            in_channels: 1,
            num_classes: 2,
            norm,
        }
    }

    pub fn num_sites(&self) -> usize {
        2 * (self.depth + 1) + 3 * self.depth
    }

    /// Spatial extents must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiteKind {
    Conv3,
    UpConv,
}

/// A convolution plus its normalization site.
#[derive(Debug, Clone)]
pub struct Site {
    pub name: String,
    pub kind: SiteKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub norm: NormLayer,
}

impl Site {
    fn new(name: String, kind: SiteKind, cin: usize, cout: usize, norm: NormConfig) -> Self {
        let layer = NormLayer::new(format!("{name}.norm"), norm, cout);
        Site {
            name,
            kind,
            in_channels: cin,
            out_channels: cout,
            norm: layer,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    fn kernel(&self) -> usize {
        match self.kind {
            SiteKind::Conv3 => 3,
            SiteKind::UpConv => 2,
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = fetch(g, store, self.weight_name())?;
        let b = fetch(g, store, self.bias_name())?;
        let y = match self.kind {
            SiteKind::Conv3 => g.conv2d(x, w, b)?,
            SiteKind::UpConv => g.conv_transpose2(x, w, b)?,
        };
        let y = self.norm.forward(g, store, y)?;
        Ok(g.relu(y))
    }
}

fn fetch<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, name: String) -> Result<Var> {
    let t = store
        .get(&name)
        .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
    Ok(g.param(name, t.clone()))
}

/// Conv-weight standard deviation `2 / (3^2 * C)` for `C` input channels.
pub fn init_stddev(fan_in: usize) -> f64 {
    2.0 / (9.0 * fan_in as f64)
}

/// Draws from a normal truncated at two (underlying) standard deviations,
/// scaled so the truncated distribution itself has standard deviation
/// `stddev`.
pub fn truncated_normal(rng: &mut impl Rng, stddev: f64) -> f64 {
    let sigma = stddev / TRUNCATED_STD_FACTOR;
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * sigma;
        }
    }
}

#[derive(Debug, Clone)]
pub struct UNetModel<T> {
    pub config: UNetConfig,
    pub params: ParamStore<T>,
    sites: Vec<Site>,
}

fn build_sites(config: &UNetConfig) -> Vec<Site> {
    let base = config.base_channels;
    let mut sites = Vec::with_capacity(config.num_sites());
    let mut cin = config.in_channels;
    for level in 0..=config.depth {
        let c = base << level;
        sites.push(Site::new(format!("enc{level}.conv1"), SiteKind::Conv3, cin, c, config.norm));
        sites.push(Site::new(format!("enc{level}.conv2"), SiteKind::Conv3, c, c, config.norm));
        cin = c;
    }
    for level in (0..config.depth).rev() {
        let c = base << level;
        sites.push(Site::new(format!("up{level}"), SiteKind::UpConv, 2 * c, c, config.norm));
        sites.push(Site::new(format!("dec{level}.conv1"), SiteKind::Conv3, 2 * c, c, config.norm));
        sites.push(Site::new(format!("dec{level}.conv2"), SiteKind::Conv3, c, c, config.norm));
    }
    sites
}

impl<T: Scalar> UNetModel<T> {
    /// Fresh model: truncated-normal conv weights with standard deviation
    /// `2 / (9 * C_in)`, biases 0.1, `rho` 0.5, `gamma` 1, `beta` 0.
    pub fn init(config: UNetConfig, seed: u64) -> Result<Self> {
        config.norm.validate()?;
        if config.base_channels == 0 || config.in_channels == 0 || config.num_classes == 0 {
            return Err(Error::Config("channel counts and class count must be positive".into()));
        }
        let sites = build_sites(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut conv = |params: &mut ParamStore<T>, name: &str, k: usize, cin: usize, cout: usize| {
            let std = init_stddev(cin);
            let shape = Shape::new(k, k, cin, cout);
            let w = Tensor::from_fn(shape, |_, _, _, _| T::of(truncated_normal(&mut rng, std)));
            params.insert(format!("{name}.weight"), w);
            params.insert(format!("{name}.bias"), Tensor::full(Shape::channels(cout), T::of(BIAS_INIT)));
        };
        for site in &sites {
            conv(&mut params, &site.name, site.kernel(), site.in_channels, site.out_channels);
            site.norm.init_params(&mut params);
        }
        conv(&mut params, "head", 1, config.base_channels, config.num_classes);
        Ok(UNetModel { config, params, sites })
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(|t| t.shape().numel()).sum()
    }

    /// Scalars held by `rho` parameters.
    pub fn rho_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.ends_with(".rho"))
            .map(|(_, t)| t.shape().numel())
            .sum()
    }

    /// `(site name, rho)` for every site that has one; see
    /// [`NormLayer::rho_value`].
    pub fn rho_values(&self) -> Vec<(String, f64)> {
        self.sites
            .iter()
            .filter_map(|s| s.norm.rho_value(&self.params).map(|r| (s.name.clone(), r)))
            .collect()
    }

    pub fn check_input(&self, shape: Shape) -> Result<()> {
        let m = self.config.size_multiple();
        if shape.h() % m != 0 || shape.w() % m != 0 {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("H and W must be multiples of {m}"),
            });
        }
        if shape.c() != self.config.in_channels {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expected {} input channels", self.config.in_channels),
            });
        }
        Ok(())
    }

    /// Records the network on `x` and returns the `(N, H, W, classes)`
    /// logits.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        self.check_input(g.shape(x))?;
        let depth = self.config.depth;
        let mut sites = self.sites.iter();
        let mut next = || sites.next().expect("site list matches the layout");
        let mut skips = Vec::with_capacity(depth);
        let mut h = x;
        for level in 0..=depth {
            h = next().forward(g, &self.params, h)?;
            h = next().forward(g, &self.params, h)?;
            if level < depth {
                skips.push(h);
                h = g.max_pool2(h)?;
            }
        }
        for _ in 0..depth {
            let up = next().forward(g, &self.params, h)?;
            let skip = skips.pop().expect("one skip per level");
            h = g.concat_channels(&[skip, up])?;
            h = next().forward(g, &self.params, h)?;
            h = next().forward(g, &self.params, h)?;
        }
        let w = fetch(g, &self.params, "head.weight".to_string())?;
        let b = fetch(g, &self.params, "head.bias".to_string())?;
        g.conv2d(h, w, b)
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, xv)?;
        Ok(g.value(out).clone())
    }

    /// Per-pixel argmax class as an `(N, H, W, 1)` tensor; ties go to the
    /// lower class index.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let logits = self.logits(x)?;
        let s = logits.shape();
        let classes = logits
            .data()
            .chunks_exact(s.c())
            .map(|row| {
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                T::of(best as f64)
            })
            .collect();
        Ok(Tensor::from_parts(Shape::new(s.n(), s.h(), s.w(), 1), classes))
    }

    /// Cross-entropy of the forward pass on `(image, labels)` and the
    /// gradient of every parameter.
    pub fn loss_and_grads(&self, image: &Tensor<T>, labels: &Tensor<T>) -> Result<(f64, Gradients<T>)> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let logits = self.forward(&mut g, x)?;
        let loss = cross_entropy(&mut g, logits, labels)?;
        let value = g.value(loss).item().as_f64();
        Ok((value, g.backward(loss)?))
    }

    /// Writes the `NKCK` checkpoint: magic, `u32` count, then per parameter
    /// a `u32` name length, the UTF-8 name and the tensor in `NKT1` form.
    pub fn save(&self, mut out: impl Write) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in &self.params {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            t.write_to(&mut out)?;
        }
        Ok(())
    }

    /// Replaces the parameters with a checkpoint's, which must list exactly
    /// this model's names in order with matching shapes.
    pub fn load(&mut self, mut input: impl Read) -> Result<()> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let count = read_u32(&mut input)? as usize;
        if count != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {count} parameters, model has {}",
                self.params.len()
            )));
        }
        let mut loaded = ParamStore::new();
        for (want_name, want) in &self.params {
            let len = read_u32(&mut input)? as usize;
            let mut name = vec![0u8; len];
            input.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            if &name != want_name {
                return Err(Error::Format(format!("expected parameter `{want_name}`, found `{name}`")));
            }
            let t = Tensor::<T>::read_from(&mut input)?;
            if t.shape() != want.shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {}, model expects {}",
                    t.shape(),
                    want.shape()
                )));
            }
            loaded.insert(name, t);
        }
        self.params = loaded;
        Ok(())
    }
}

fn read_u32(input: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Converts an `(N, H, W, 1)` class-map tensor into label indices.
pub fn labels_from_tensor<T: Scalar>(labels: &Tensor<T>, classes: usize) -> Result<Vec<usize>> {
    if labels.shape().c() != 1 {
        return Err(Error::InvalidShape {
            shape: labels.shape(),
            reason: "labels must have one channel".into(),
        });
    }
    labels
        .data()
        .iter()
        .map(|&v| {
            let f = v.as_f64();
            if f < 0.0 || f.fract() != 0.0 || f as usize >= classes {
                Err(Error::LabelOutOfRange {
                    label: f.max(0.0) as usize,
                    classes,
                })
            } else {
                Ok(f as usize)
            }
        })
        .collect()
}

/// Mean pixelwise cross-entropy of `logits` against an `(N, H, W, 1)` label
/// map with values in `0..classes`.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &Tensor<T>) -> Result<Var> {
    let ls = g.shape(logits);
    let want = Shape::new(ls.n(), ls.h(), ls.w(), 1);
    if labels.shape() != want {
        return Err(Error::ShapeMismatch {
            lhs: want,
            rhs: labels.shape(),
            context: "labels must be (N,H,W,1) matching the logits",
        });
    }
    let idx = labels_from_tensor(labels, ls.c())?;
    g.cross_entropy(logits, &idx)
}

/// Same-padded 3x3 (or any odd size) convolution on plain tensors.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    crate::kernels::conv2d_forward(x, weights, bias)
}

/// Learned 2x up-convolution (2x2 kernel, stride 2).
pub fn upsample2<T: Scalar>(x: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    crate::kernels::conv_transpose2_forward(x, weights, bias)
}

pub fn max_pool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.max_pool2()
}

/// Model with everything but the normalization identical, for parameter
/// count comparisons.
pub fn with_norm(config: UNetConfig, kind: NormKind) -> UNetConfig {
    UNetConfig {
        norm: NormConfig { kind, ..config.norm },
        ..config
    }
}

/// Finite-difference check of every parameter of a `config` network on a
/// random `size`×`size` image with random labels. Parameters are drawn at
/// unit scale (weights with standard deviation `1/sqrt(fan_in)`, other
/// parameters spread around their initial values) so that gradients stand
/// clear of rounding noise.
pub fn grad_check_unet(
    config: UNetConfig,
    size: usize,
    seed: u64,
    steps: UNetSteps,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut model = UNetModel::<f64>::init(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for (name, p) in model.params.iter_mut() {
        let s = p.shape();
        let (center, spread) = if name.ends_with(".weight") {
            (0.0, 1.0 / ((s.n() * s.h() * s.w()) as f64).sqrt())
        } else if name.ends_with(".gamma") {
            (1.0, 0.3)
        } else {
            (0.0, 0.5)
        };
        for v in p.data_mut() {
            *v = center + spread * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let shape = Shape::new(1, size, size, config.in_channels);
    let image = Tensor::from_fn(shape, |_, _, _, _| rng.sample::<f64, _>(StandardNormal));
    let labels = Tensor::from_fn(Shape::new(1, size, size, 1), |_, _, _, _| {
        rng.random_range(0..config.num_classes) as f64
    });
    let f = |g: &mut Graph<f64>, _: &[Var]| {
        let x = g.constant(image.clone());
        let logits = model.forward(g, x)?;
        cross_entropy(g, logits, &labels)
    };
    // leaves not handed to grad_check are picked up from the store by name
    let (weights, vectors): (ParamStore<f64>, ParamStore<f64>) = model
        .params
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .partition(|(k, _)| k.ends_with(".weight"));
    let mut report = grad_check(f, &weights, steps.weights, tolerance)?;
    let rest = grad_check(f, &vectors, steps.vectors, tolerance)?;
    report.entries.extend(rest.entries);
    let order: Vec<&String> = model.params.keys().collect();
    report.entries.sort_by_key(|e| order.iter().position(|k| **k == e.name));
    Ok(report)
}

/// Finite-difference steps for [`grad_check_unet`]: one for convolution
/// weights and one for per-channel vectors (biases, `rho`, `gamma`,
/// `beta`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UNetSteps {
    pub weights: f64,
    pub vectors: f64,
}

impl Default for UNetSteps {
    fn default() -> Self {
        UNetSteps {
            weights: 5e-5,
            vectors: 7e-4,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norm::Combiner;
    use rand::SeedableRng;

    fn tiny(kind: NormKind) -> UNetConfig {
        UNetConfig {
            depth: 1,
            base_channels: 4,
            in_channels: 1,
            num_classes: 2,
            norm: NormConfig::new(kind),
        }
    }

    fn random(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn standard_layout() {
        let m = UNetModel::<f32>::init(UNetConfig::standard(NormConfig::new(NormKind::Iln)), 1).unwrap();
        assert_eq!(m.sites().len(), 22);
        let enc: Vec<usize> = m.sites().iter().step_by(2).take(5).map(|s| s.out_channels).collect();
        assert_eq!(enc, [16, 32, 64, 128, 256]);
        let ups: Vec<(usize, usize)> = m
            .sites()
            .iter()
            .filter(|s| s.kind == SiteKind::UpConv)
            .map(|s| (s.in_channels, s.out_channels))
            .collect();
        assert_eq!(ups, [(256, 128), (128, 64), (64, 32), (32, 16)]);
        assert_eq!(m.rho_count(), 22);
        assert_eq!(m.rho_values().len(), 22);
    }

    #[test]
    fn output_shape_matches_input() {
        let cfg = UNetConfig {
            depth: 2,
            base_channels: 4,
            ..tiny(NormKind::Instance)
        };
        let m = UNetModel::<f64>::init(cfg, 3).unwrap();
        for (h, w) in [(4, 4), (8, 12), (16, 4)] {
            let x = random(Shape::new(2, h, w, 1), 1);
            assert_eq!(m.logits(&x).unwrap().shape(), Shape::new(2, h, w, 2));
        }
        assert!(m.logits(&random(Shape::new(1, 6, 4, 1), 1)).is_err());
    }

    #[test]
    fn parameter_count_deltas() {
        let base = UNetConfig::standard(NormConfig::new(NormKind::None));
        let none = UNetModel::<f32>::init(base, 0).unwrap();
        let iln = UNetModel::<f32>::init(with_norm(base, NormKind::Iln), 0).unwrap();
        let inst = UNetModel::<f32>::init(with_norm(base, NormKind::Instance), 0).unwrap();
        let site_channels: usize = iln.sites().iter().map(|s| s.out_channels).sum();
        assert_eq!(iln.num_parameters() - none.num_parameters(), 22 + 2 * site_channels);
        assert_eq!(iln.num_parameters() - inst.num_parameters(), 22);
        assert_eq!(iln.rho_count() - inst.rho_count(), 22);
        let soft = UNetModel::<f32>::init(with_norm(base, NormKind::Mix(Combiner::Softmax)), 0).unwrap();
        assert_eq!(soft.rho_count(), 44);
    }

    #[test]
    fn init_values() {
        let m = UNetModel::<f64>::init(UNetConfig::standard(NormConfig::new(NormKind::Iln)), 9).unwrap();
        for (name, t) in &m.params {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&b| b == 0.1), "{name}");
            }
            if name.ends_with(".rho") {
                assert_eq!(t.item(), 0.5);
            }
            if name.ends_with(".weight") {
                let cin = t.shape().w();
                let bound = 2.0 * init_stddev(cin) / TRUNCATED_STD_FACTOR;
                assert!(t.data().iter().all(|v| v.abs() <= bound + 1e-15), "{name}");
            }
        }
        assert!((init_stddev(16) - 0.013888888888888888).abs() < 1e-15);
    }

    #[test]
    fn same_seed_same_model() {
        let cfg = UNetConfig::standard(NormConfig::new(NormKind::Iln));
        let a = UNetModel::<f32>::init(cfg, 5).unwrap();
        let b = UNetModel::<f32>::init(cfg, 5).unwrap();
        let c = UNetModel::<f32>::init(cfg, 6).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn checkpoint_roundtrip_and_validation() {
        let cfg = tiny(NormKind::Iln);
        let a = UNetModel::<f64>::init(cfg, 1).unwrap();
        let mut buf = Vec::new();
        a.save(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"NKCK");
        let mut b = UNetModel::<f64>::init(cfg, 2).unwrap();
        b.load(&buf[..]).unwrap();
        assert_eq!(a.params, b.params);

        let mut other = UNetModel::<f64>::init(tiny(NormKind::Instance), 2).unwrap();
        assert!(other.load(&buf[..]).is_err());
        let mut wider = UNetModel::<f64>::init(UNetConfig { base_channels: 8, ..cfg }, 2).unwrap();
        let err = wider.load(&buf[..]).unwrap_err().to_string();
        assert!(err.contains("shape"), "{err}");
    }

    #[test]
    fn uniform_logits_loss_is_ln2() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(Shape::new(1, 2, 2, 2)));
        let labels = Tensor::new(Shape::new(1, 2, 2, 1), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let loss = cross_entropy(&mut g, logits, &labels).unwrap();
        assert!((g.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn confident_logits_loss_vanishes() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::new(Shape::new(1, 1, 2, 2), vec![20.0, 0.0, 0.0, 20.0]).unwrap());
        let labels = Tensor::new(Shape::new(1, 1, 2, 1), vec![0.0, 1.0]).unwrap();
        let loss = cross_entropy(&mut g, logits, &labels).unwrap();
        assert!(g.value(loss).item() < 1e-8);
        assert!(g.value(loss).item() > 0.0);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        let labels = Tensor::new(Shape::new(1, 1, 2, 1), vec![0.0, 2.0]).unwrap();
        assert!(matches!(
            cross_entropy(&mut g, logits, &labels),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn delta_kernel_and_zero_kernel() {
        let x = random(Shape::new(1, 5, 5, 1), 4);
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let w = Tensor::new(Shape::new(3, 3, 1, 1), w).unwrap();
        let b = Tensor::scalar(0.25);
        assert!(conv2d(&x, &w, &b).unwrap().max_abs_diff(&x.add(0.25).unwrap()) == 0.0);
        let z = conv2d(&x, &Tensor::zeros(Shape::new(3, 3, 1, 1)), &b).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.25));
        let bad = Tensor::zeros(Shape::new(3, 3, 2, 1));
        assert!(conv2d(&x, &bad, &b).is_err());
    }

    #[test]
    fn upsample_shape() {
        let x = random(Shape::new(2, 3, 5, 4), 4);
        let w = random(Shape::new(2, 2, 4, 6), 5);
        let b = Tensor::zeros(Shape::channels(6));
        assert_eq!(upsample2(&x, &w, &b).unwrap().shape(), Shape::new(2, 6, 10, 6));
    }
}
