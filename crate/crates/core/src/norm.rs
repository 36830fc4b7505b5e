//! Feature-map normalizers and the instance-layer normalization (ILN) layer.
//!
//! Every normalizer standardizes a tensor with population statistics,
//! `(x - mean) / sqrt(var + eps)`, and differs only in which elements share
//! a mean and variance:
//!
//! | normalizer | statistics over       |
//! |------------|-----------------------|
//! | IN         | (H, W) per n, c       |
//! | LN         | (H, W, C) per n       |
//! | GN(g)      | (H, W, C/g) per n, g  |
//! | BN (train) | (N, H, W) per c       |
//!
//! ILN blends the IN and LN outputs with a learned weight `w = sigmoid(rho)`,
//!
//! ```text
//! mix = w * IN(x) + (1 - w) * LN(x)
//! ```
//!
//! re-standardizes the blend with 16-group GN (the blend alone no longer has
//! zero mean and unit variance), and finishes with a per-channel affine
//! `gamma_c * f + beta_c`. The clip and two-parameter softmax weightings are
//! provided for ablations.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::kernels::Grouping;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
/// Group count of the GN stage inside ILN.
pub const ILN_GROUPS: usize = 16;
pub const RHO_INIT: f64 = 0.5;

/// How the IN and LN maps are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Combiner {
    /// `w = clamp(rho, 0, 1)`.
    Clip,
    /// `w = 1 / (e^{-rho} + 1)`.
    Sigmoid,
    /// `w = e^{rho1} / (e^{rho1} + e^{rho2})`, two parameters per layer.
    Softmax,
}

impl Combiner {
    pub fn name(self) -> &'static str {
        match self {
            Combiner::Clip => "clip",
            Combiner::Sigmoid => "sigmoid",
            Combiner::Softmax => "softmax",
        }
    }

    /// Number of `rho` scalars the combiner owns.
    pub fn rho_len(self) -> usize {
        match self {
            Combiner::Softmax => 2,
            _ => 1,
        }
    }
}

impl FromStr for Combiner {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "clip" => Ok(Combiner::Clip),
            "sigmoid" => Ok(Combiner::Sigmoid),
            "softmax" => Ok(Combiner::Softmax),
            other => Err(Error::Config(format!("unknown combiner `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormKind {
    None,
    Instance,
    Layer,
    Group(usize),
    /// Training-mode batch statistics only.
    Batch,
    /// Sigmoid blend of IN and LN, then GN16, then affine.
    Iln,
    /// IN/LN blend with the given combiner and no GN stage.
    Mix(Combiner),
}

impl NormKind {
    pub fn has_rho(self) -> bool {
        matches!(self, NormKind::Iln | NormKind::Mix(_))
    }

    pub fn has_affine(self) -> bool {
        self != NormKind::None
    }

    pub fn combiner(self) -> Option<Combiner> {
        match self {
            NormKind::Iln => Some(Combiner::Sigmoid),
            NormKind::Mix(c) => Some(c),
            _ => None,
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormKind::None => write!(f, "none"),
            NormKind::Instance => write!(f, "in"),
            NormKind::Layer => write!(f, "ln"),
            NormKind::Group(g) => write!(f, "gn{g}"),
            NormKind::Batch => write!(f, "bn"),
            NormKind::Iln => write!(f, "iln"),
            NormKind::Mix(c) => write!(f, "mix-{}", c.name()),
        }
    }
}

impl FromStr for NormKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Ok(match s.as_str() {
            "none" => NormKind::None,
            "in" | "instance" => NormKind::Instance,
            "ln" | "layer" => NormKind::Layer,
            "bn" | "batch" => NormKind::Batch,
            "iln" => NormKind::Iln,
            _ => {
                if let Some(g) = s.strip_prefix("gn") {
                    let g: usize = g
                        .trim_start_matches(':')
                        .parse()
                        .map_err(|_| Error::Config(format!("bad group count in `{s}`")))?;
                    if g == 0 {
                        return Err(Error::Config("group count must be positive".into()));
                    }
                    NormKind::Group(g)
                } else if let Some(c) = s.strip_prefix("mix-") {
                    NormKind::Mix(c.parse()?)
                } else {
                    return Err(Error::Config(format!("unknown norm kind `{s}`")));
                }
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormConfig {
    pub kind: NormKind,
    pub eps: f64,
    /// Reject channel counts not divisible by the GN group count instead of
    /// falling back to `gcd(groups, C)`.
    pub strict_groups: bool,
}

impl NormConfig {
    pub fn new(kind: NormKind) -> Self {
        NormConfig {
            kind,
            eps: DEFAULT_EPS,
            strict_groups: false,
        }
    }

    pub fn strict(mut self, strict: bool) -> Self {
        self.strict_groups = strict;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Group count actually used by the GN stage of ILN for `channels` channels.
pub fn cascade_groups(channels: usize, strict: bool) -> Result<usize> {
    if channels % ILN_GROUPS == 0 {
        return Ok(ILN_GROUPS);
    }
    if strict {
        return Err(Error::GroupMismatch {
            groups: ILN_GROUPS,
            channels,
        });
    }
    let g = gcd(ILN_GROUPS, channels);
    static WARNED: Mutex<BTreeSet<usize>> = Mutex::new(BTreeSet::new());
    if WARNED.lock().map(|mut w| w.insert(channels)).unwrap_or(true) {
        log::warn!("{channels} channels are not divisible by {ILN_GROUPS}; ILN uses {g} groups");
    }
    Ok(g)
}

/// Blend weight values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rho<T> {
    Single(T),
    Pair(T, T),
}

impl<T: Scalar> Rho<T> {
    fn tensor(&self) -> Tensor<T> {
        match *self {
            Rho::Single(r) => Tensor::scalar(r),
            Rho::Pair(a, b) => Tensor::from_parts(Shape::channels(2), vec![a, b]),
        }
    }
}

/// Weight given to the IN map.
pub fn combiner_weight<T: Scalar>(rho: &Rho<T>, kind: Combiner) -> Result<f64> {
    match (kind, *rho) {
        (Combiner::Clip, Rho::Single(r)) => Ok(r.as_f64().clamp(0.0, 1.0)),
        (Combiner::Sigmoid, Rho::Single(r)) => Ok(crate::autograd::sigmoid(r.as_f64())),
        (Combiner::Softmax, Rho::Pair(a, b)) => Ok(crate::autograd::softmax_first(a.as_f64(), b.as_f64())),
        (k, _) => Err(Error::Config(format!(
            "{} combiner takes {} rho value(s)",
            k.name(),
            k.rho_len()
        ))),
    }
}

/// Per-layer trainable values of a normalizer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<T> {
    pub rho: Option<Rho<T>>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Scalar> NormParams<T> {
    /// `gamma = 1`, `beta = 0`, and `rho = 0.5` when the kind has one.
    pub fn init(kind: NormKind, channels: usize) -> Self {
        let half = T::of(RHO_INIT);
        let rho = kind.combiner().map(|c| match c {
            Combiner::Softmax => Rho::Pair(half, half),
            _ => Rho::Single(half),
        });
        NormParams {
            rho,
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
        }
    }
}

pub fn instance_norm<T: Scalar>(x: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    standalone(x, Grouping::Instance, eps)
}

pub fn layer_norm<T: Scalar>(x: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    standalone(x, Grouping::Layer, eps)
}

/// Standardizes blocks of `C / groups` consecutive channels; `groups` must
/// divide `C`.
pub fn group_norm<T: Scalar>(x: &Tensor<T>, groups: usize, eps: f64) -> Result<Tensor<T>> {
    standalone(x, Grouping::Group(groups), eps)
}

/// Batch statistics per channel; needs `N*H*W >= 2`.
pub fn batch_norm_train<T: Scalar>(x: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    standalone(x, Grouping::Batch, eps)
}

fn standalone<T: Scalar>(x: &Tensor<T>, grouping: Grouping, eps: f64) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = g.normalize(xv, grouping, eps)?;
    Ok(g.value(y).clone())
}

/// `w * f_in + (1 - w) * f_ln` with `w` from [`combiner_weight`].
pub fn combine<T: Scalar>(f_in: &Tensor<T>, f_ln: &Tensor<T>, rho: &Rho<T>, kind: Combiner) -> Result<Tensor<T>> {
    combiner_weight(rho, kind)?;
    let mut g = Graph::new();
    let a = g.constant(f_in.clone());
    let b = g.constant(f_ln.clone());
    let r = g.constant(rho.tensor());
    let out = mix(&mut g, a, b, r, kind)?;
    Ok(g.value(out).clone())
}

/// The full ILN layer on plain tensors: sigmoid blend, GN16 (or the gcd
/// fallback), then affine.
pub fn iln_forward<T: Scalar>(x: &Tensor<T>, params: &NormParams<T>, eps: f64) -> Result<Tensor<T>> {
    let mut config = NormConfig::new(NormKind::Iln);
    config.eps = eps;
    norm_forward(x, &config, params)
}

/// Applies any configured normalizer (with its affine) to a plain tensor.
pub fn norm_forward<T: Scalar>(x: &Tensor<T>, config: &NormConfig, params: &NormParams<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let vars = SiteVars {
        rho: params.rho.map(|r| g.constant(r.tensor())),
        gamma: Some(g.constant(Tensor::new(Shape::channels(params.gamma.len()), params.gamma.clone())?)),
        beta: Some(g.constant(Tensor::new(Shape::channels(params.beta.len()), params.beta.clone())?)),
    };
    let y = apply(&mut g, config, xv, &vars)?;
    Ok(g.value(y).clone())
}

/// Graph handles for one normalization site's parameters.
#[derive(Debug, Clone, Copy, Default)]
pub struct SiteVars {
    pub rho: Option<Var>,
    pub gamma: Option<Var>,
    pub beta: Option<Var>,
}

/// Differentiable blend of two maps by a scalar (or pair) `rho` node.
pub fn mix<T: Scalar>(g: &mut Graph<T>, f_in: Var, f_ln: Var, rho: Var, kind: Combiner) -> Result<Var> {
    let w = match kind {
        Combiner::Clip => g.clip01(rho),
        Combiner::Sigmoid => g.sigmoid(rho),
        Combiner::Softmax => g.softmax_first(rho)?,
    };
    if !g.shape(w).is_scalar() {
        return Err(Error::Config(format!("{} combiner expects a scalar rho", kind.name())));
    }
    let rest = g.rsub_scalar(T::one(), w);
    let a = g.mul(f_in, w)?;
    let b = g.mul(f_ln, rest)?;
    g.add(a, b)
}

pub fn affine<T: Scalar>(g: &mut Graph<T>, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let scaled = g.mul(x, gamma)?;
    g.add(scaled, beta)
}

/// Builds the configured normalizer on `x` inside `g`.
pub fn apply<T: Scalar>(g: &mut Graph<T>, config: &NormConfig, x: Var, vars: &SiteVars) -> Result<Var> {
    config.validate()?;
    let eps = config.eps;
    let normalized = match config.kind {
        NormKind::None => return Ok(x),
        NormKind::Instance => g.normalize(x, Grouping::Instance, eps)?,
        NormKind::Layer => g.normalize(x, Grouping::Layer, eps)?,
        NormKind::Group(groups) => g.normalize(x, Grouping::Group(groups), eps)?,
        NormKind::Batch => g.normalize(x, Grouping::Batch, eps)?,
        NormKind::Iln | NormKind::Mix(_) => {
            let combiner = config.kind.combiner().expect("blending kinds have a combiner");
            let rho = vars
                .rho
                .ok_or_else(|| Error::Config(format!("{} needs a rho parameter", config.kind)))?;
            let f_in = g.normalize(x, Grouping::Instance, eps)?;
            let f_ln = g.normalize(x, Grouping::Layer, eps)?;
            let blended = mix(g, f_in, f_ln, rho, combiner)?;
            if config.kind == NormKind::Iln {
                let groups = cascade_groups(g.shape(x).c(), config.strict_groups)?;
                g.normalize(blended, Grouping::Group(groups), eps)?
            } else {
                blended
            }
        }
    };
    match (vars.gamma, vars.beta) {
        (Some(gamma), Some(beta)) => affine(g, normalized, gamma, beta),
        _ => Err(Error::Config(format!("{} needs gamma and beta", config.kind))),
    }
}

/// A normalization site: the parameters it owns live under `prefix`.
#[derive(Debug, Clone)]
pub struct NormLayer {
    pub prefix: String,
    pub config: NormConfig,
    pub channels: usize,
}

impl NormLayer {
    pub fn new(prefix: impl Into<String>, config: NormConfig, channels: usize) -> Self {
        NormLayer {
            prefix: prefix.into(),
            config,
            channels,
        }
    }

    pub fn rho_name(&self) -> String {
        format!("{}.rho", self.prefix)
    }

    pub fn gamma_name(&self) -> String {
        format!("{}.gamma", self.prefix)
    }

    pub fn beta_name(&self) -> String {
        format!("{}.beta", self.prefix)
    }

    /// Inserts this site's freshly initialized parameters.
    pub fn init_params<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let init = NormParams::<T>::init(self.config.kind, self.channels);
        if let Some(rho) = init.rho {
            store.insert(self.rho_name(), rho.tensor());
        }
        if self.config.kind.has_affine() {
            store.insert(self.gamma_name(), Tensor::from_parts(Shape::channels(self.channels), init.gamma));
            store.insert(self.beta_name(), Tensor::from_parts(Shape::channels(self.channels), init.beta));
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut fetch = |name: String| -> Result<Var> {
            let t = store
                .get(&name)
                .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
            Ok(g.param(name, t.clone()))
        };
        let vars = SiteVars {
            rho: if self.config.kind.has_rho() {
                Some(fetch(self.rho_name())?)
            } else {
                None
            },
            gamma: if self.config.kind.has_affine() {
                Some(fetch(self.gamma_name())?)
            } else {
                None
            },
            beta: if self.config.kind.has_affine() {
                Some(fetch(self.beta_name())?)
            } else {
                None
            },
        };
        apply(g, &self.config, x, &vars)
    }

    /// Current `rho` as a single number for logging: `rho` itself, or
    /// `rho1 - rho2` for the softmax pair (whose sigmoid is the IN weight).
    pub fn rho_value<T: Scalar>(&self, store: &ParamStore<T>) -> Option<f64> {
        let t = store.get(&self.rho_name())?;
        Some(match t.data() {
            [r] => r.as_f64(),
            [a, b] => a.as_f64() - b.as_f64(),
            _ => return None,
        })
    }
}
