use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffengine::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetConfig {
    pub c1: usize,
    pub c2: usize,
    pub groups: usize,
    pub slope: f64,
    pub k_iters: usize,
    /// Multiplier on the initial final-head kernels; 0 makes every residual zero.
    pub head_scale: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            c1: 16,
            c2: 32,
            groups: 4,
            slope: 0.2,
            k_iters: 3,
            head_scale: 0.1,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c1 == 0 || self.c2 == 0 || self.k_iters == 0 {
            return Err(Error::Config(format!(
                "channels and unrolled iterations must be positive, got c1={} c2={} K={}",
                self.c1, self.c2, self.k_iters
            )));
        }
        if self.groups == 0 || self.c1 % self.groups != 0 || self.c2 % self.groups != 0 {
            return Err(Error::Config(format!(
                "{} groups must divide both channel counts ({}, {})",
                self.groups, self.c1, self.c2
            )));
        }
        if !(self.slope >= 0.0) {
            return Err(Error::Config(format!(
                "leaky slope must be nonnegative, got {}",
                self.slope
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Variational mean of an encoder weight or bias.
    Mean,
    /// Unconstrained scale of the preceding mean tensor, `σ = softplus(ρ)`.
    Rho,
    /// Point estimate.
    Point,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

/// Index of each tensor of a Bayesian convolution inside [`NetworkParams::tensors`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BayesConvIdx {
    pub w_mean: usize,
    pub w_rho: usize,
    pub b_mean: usize,
    pub b_rho: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvIdx {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormIdx {
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadIdx {
    pub conv: ConvIdx,
    pub norm: NormIdx,
    pub out: ConvIdx,
}

/// Positions of every layer's tensors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub encoder: [BayesConvIdx; 4],
    pub encoder_norms: [NormIdx; 4],
    pub up: ConvIdx,
    pub decoder: [ConvIdx; 2],
    pub decoder_norms: [NormIdx; 2],
    pub mu_head: HeadIdx,
    pub sigma_head: HeadIdx,
}

pub const RHO_INIT_SIGMA: f64 = 1e-3;

/// `softplus⁻¹(s) = ln(eˢ − 1)`.
pub fn softplus_inv(s: f64) -> f64 {
    s.exp_m1().ln()
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Builds the parameter list for `cfg`, returning the specs and the layer index table.
pub fn param_layout(cfg: &NetConfig) -> (Vec<ParamSpec>, Layout) {
    let mut specs = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, kind: ParamKind| {
        specs.push(ParamSpec { name, shape, kind });
        specs.len() - 1
    };
    let (c1, c2) = (cfg.c1, cfg.c2);
    let bayes =
        |add: &mut dyn FnMut(String, Vec<usize>, ParamKind) -> usize, name: &str, ci: usize, co: usize| BayesConvIdx {
            w_mean: add(format!("{name}.w_mean"), vec![co, ci, 3, 3], ParamKind::Mean),
            w_rho: add(format!("{name}.w_rho"), vec![co, ci, 3, 3], ParamKind::Rho),
            b_mean: add(format!("{name}.b_mean"), vec![co], ParamKind::Mean),
            b_rho: add(format!("{name}.b_rho"), vec![co], ParamKind::Rho),
        };
    let norm = |add: &mut dyn FnMut(String, Vec<usize>, ParamKind) -> usize, name: &str, c: usize| NormIdx {
        gamma: add(format!("{name}.gamma"), vec![c], ParamKind::Point),
        beta: add(format!("{name}.beta"), vec![c], ParamKind::Point),
    };
    let conv =
        |add: &mut dyn FnMut(String, Vec<usize>, ParamKind) -> usize, name: &str, ci: usize, co: usize| ConvIdx {
            w: add(format!("{name}.w"), vec![co, ci, 3, 3], ParamKind::Point),
            b: add(format!("{name}.b"), vec![co], ParamKind::Point),
        };
    let e1a = bayes(&mut add, "enc1a", 3, c1);
    let n1a = norm(&mut add, "enc1a.gn", c1);
    let e1b = bayes(&mut add, "enc1b", c1, c1);
    let n1b = norm(&mut add, "enc1b.gn", c1);
    let e2a = bayes(&mut add, "enc2a", c1, c2);
    let n2a = norm(&mut add, "enc2a.gn", c2);
    let e2b = bayes(&mut add, "enc2b", c2, c2);
    let n2b = norm(&mut add, "enc2b.gn", c2);
    let up = ConvIdx {
        w: add("up.w".into(), vec![c2, c1, 2, 2], ParamKind::Point),
        b: add("up.b".into(), vec![c1], ParamKind::Point),
    };
    let d1 = conv(&mut add, "dec1", 2 * c1, c1);
    let dn1 = norm(&mut add, "dec1.gn", c1);
    let d2 = conv(&mut add, "dec2", c1, c1);
    let dn2 = norm(&mut add, "dec2.gn", c1);
    let mut head = |name: &str| HeadIdx {
        conv: conv(&mut add, &format!("{name}.conv"), c1, c1),
        norm: norm(&mut add, &format!("{name}.gn"), c1),
        out: conv(&mut add, &format!("{name}.out"), c1, 1),
    };
    let mu_head = head("head_mu");
    let sigma_head = head("head_sigma");
    (
        specs,
        Layout {
            encoder: [e1a, e1b, e2a, e2b],
            encoder_norms: [n1a, n1b, n2a, n2b],
            up,
            decoder: [d1, d2],
            decoder_norms: [dn1, dn2],
            mu_head,
            sigma_head,
        },
    )
}

/// All network tensors in layout order, shared across the K unrolled steps.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T> {
    pub config: NetConfig,
    pub specs: Vec<ParamSpec>,
    pub layout: Layout,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> NetworkParams<T> {
    /// Builds parameters from stored tensors, checking every shape against the layout.
    pub fn from_tensors(config: NetConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = param_layout(&config);
        if specs.len() != tensors.len() {
            return Err(Error::Data(format!(
                "network expects {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if s.shape != t.shape() {
                return Err(Error::shape("network parameter", &s.shape, t.shape()));
            }
        }
        Ok(Self {
            config,
            specs,
            layout,
            tensors,
        })
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// `(mean index, rho index)` for every variational tensor.
    pub fn variational_pairs(&self) -> Vec<(usize, usize)> {
        self.layout
            .encoder
            .iter()
            .flat_map(|l| [(l.w_mean, l.w_rho), (l.b_mean, l.b_rho)])
            .collect()
    }

    /// Number of variational (encoder) scalars.
    pub fn n_variational(&self) -> usize {
        self.variational_pairs()
            .iter()
            .map(|&(m, _)| self.tensors[m].len())
            .sum()
    }

    /// Sets every ρ to `value` (e.g. `-inf`-like values collapse all scales to zero).
    pub fn set_all_rho(&mut self, value: f64) {
        for (_, r) in self.variational_pairs() {
            self.tensors[r].data_mut().iter_mut().for_each(|v| *v = T::lit(value));
        }
    }

    pub fn cast<U: Real>(&self) -> NetworkParams<U> {
        NetworkParams {
            config: self.config,
            specs: self.specs.clone(),
            layout: self.layout.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::from_f64(t.shape(), &t.to_f64()).expect("same shape"))
                .collect(),
        }
    }
}

/// Random initialisation: conv means `N(0, 2/fan_in)`, biases 0, `ρ = softplus⁻¹(1e-3)`,
/// group-norm gain 1 and shift 0, final head kernels scaled by `head_scale`.
pub fn init_network<T: Real, R: Rng + ?Sized>(config: &NetConfig, rng: &mut R) -> Result<NetworkParams<T>> {
    config.validate()?;
    let (specs, layout) = param_layout(config);
    let rho0 = softplus_inv(RHO_INIT_SIGMA);
    let out_w = [layout.mu_head.out.w, layout.sigma_head.out.w];
    let mut tensors = Vec::with_capacity(specs.len());
    for (i, s) in specs.iter().enumerate() {
        let n: usize = s.shape.iter().product();
        let data: Vec<f64> = match s.kind {
            ParamKind::Rho => vec![rho0; n],
            _ if s.name.ends_with(".gamma") => vec![1.0; n],
            _ if s.shape.len() == 4 => {
                let fan_in = if i == layout.up.w {
                    s.shape[0]
                } else {
                    s.shape[1] * s.shape[2] * s.shape[3]
                };
                let std = (2.0 / fan_in as f64).sqrt();
                let scale = if out_w.contains(&i) { config.head_scale } else { 1.0 };
                (0..n)
                    .map(|_| scale * std * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            }
            _ => vec![0.0; n],
        };
        tensors.push(Tensor::from_f64(&s.shape, &data)?);
    }
    Ok(NetworkParams {
        config: *config,
        specs,
        layout,
        tensors,
    })
}

/// Frozen copy of the variational means and scales, used as the prior of adaptation.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorSnapshot {
    /// One entry per variational tensor, in [`NetworkParams::variational_pairs`] order.
    pub means: Vec<Vec<f64>>,
    pub sigmas: Vec<Vec<f64>>,
}

impl PriorSnapshot {
    pub fn len(&self) -> usize {
        self.means.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn snapshot_posterior<T: Real>(params: &NetworkParams<T>) -> PriorSnapshot {
    let mut means = Vec::new();
    let mut sigmas = Vec::new();
    for (m, r) in params.variational_pairs() {
        means.push(params.tensors[m].to_f64());
        sigmas.push(params.tensors[r].to_f64().into_iter().map(softplus).collect());
    }
    PriorSnapshot { means, sigmas }
}

/// Per-pixel variance from the σ-head: `softplus(s) + 1e-6`.
pub fn variance_from_head<T: Real>(sigma_raw: &[T]) -> Vec<T> {
    sigma_raw
        .iter()
        .map(|v| T::lit(softplus(v.to_f64_lossy()) + VARIANCE_FLOOR))
        .collect()
}

pub const VARIANCE_FLOOR: f64 = 1e-6;
