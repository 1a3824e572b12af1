use std::collections::BTreeMap;
use std::path::Path;

use crate::baselines::TvConfig;
use crate::bayesnet::NetConfig;
use crate::diffengine::TvVariant;
use crate::error::{Error, Result};
use crate::losses::{HyperParams, TraceMode};
use crate::operators::{Fnv1a, Geometry, ImageGrid, ProjectionOperator};
use crate::phantoms::{DatasetKind, NoiseModel};
use crate::training::{AdaptMode, TrainConfig};

#[derive(Clone, Copy, Debug)]
enum Kind {
    /// Integer `>= min`.
    Count(u64),
    /// Finite real in `[min, max]`; `open` excludes `min`.
    Real {
        min: f64,
        max: f64,
        open: bool,
    },
    /// As `Real`, or the literal `auto`.
    RealOrAuto {
        min: f64,
        open: bool,
    },
    Choice(&'static [&'static str]),
    Flag,
}

pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
    kind: Kind,
}

const POS: Kind = Kind::Real {
    min: 0.0,
    max: f64::INFINITY,
    open: true,
};
const NONNEG: Kind = Kind::Real {
    min: 0.0,
    max: f64::INFINITY,
    open: false,
};

const fn key(key: &'static str, default: &'static str, kind: Kind, doc: &'static str) -> KeySpec {
    KeySpec {
        key,
        default,
        doc,
        kind,
    }
}

/// Every recognised key with its default, in file order.
pub const KEYS: &[KeySpec] = &[
    key("grid.nx", "64", Kind::Count(1), "image width in pixels"),
    key("grid.ny", "64", Kind::Count(1), "image height in pixels"),
    key("grid.pixel_size", "1.0", POS, "pixel pitch in mm"),
    key("geometry.beam", "fan", Kind::Choice(&["fan", "parallel"]), "beam type"),
    key("geometry.angles", "120", Kind::Count(1), "number of projection angles"),
    key("geometry.detectors", "128", Kind::Count(1), "detector bins per angle"),
    key("geometry.detector_spacing", "1.5", POS, "detector pitch in mm"),
    key(
        "geometry.source_distance",
        "500",
        POS,
        "source to rotation axis in mm (fan)",
    ),
    key(
        "geometry.detector_distance",
        "500",
        POS,
        "rotation axis to detector in mm (fan)",
    ),
    key("noise.photons", "8000", POS, "incident photons per detector bin"),
    key(
        "noise.attenuation",
        "0.02",
        POS,
        "attenuation per unit image intensity and mm",
    ),
    key(
        "noise.count_floor",
        "1",
        Kind::Real {
            min: 1.0,
            max: f64::INFINITY,
            open: false,
        },
        "counts are clamped below at this value before the log",
    ),
    key(
        "data.kind",
        "supervised-ellipses",
        Kind::Choice(&["supervised-ellipses", "unsupervised-ood", "supervised-ood"]),
        "phantom family written by gen-data",
    ),
    key("data.count", "2000", Kind::Count(1), "records written by gen-data"),
    key("net.c1", "16", Kind::Count(1), "channels at full resolution"),
    key("net.c2", "32", Kind::Count(1), "channels at half resolution"),
    key(
        "net.groups",
        "4",
        Kind::Count(1),
        "group-norm groups (must divide c1 and c2)",
    ),
    key("net.slope", "0.2", NONNEG, "leaky ReLU slope"),
    key("net.k_iters", "3", Kind::Count(1), "unrolled iterations"),
    key("net.head_scale", "0.1", NONNEG, "initial scale of the output kernels"),
    key(
        "hyper.beta",
        "auto",
        Kind::RealOrAuto { min: 0.0, open: false },
        "KL weight; auto = 1e-3 * pixels / variational parameters",
    ),
    key("hyper.gamma", "0.01", NONNEG, "TV weight of the adaptation objective"),
    key(
        "hyper.hutchinson_samples",
        "10",
        Kind::Count(1),
        "Rademacher probes for the trace term",
    ),
    key(
        "hyper.mc_samples",
        "1",
        Kind::Count(1),
        "weight draws per example during training",
    ),
    key(
        "hyper.tv_variant",
        "isotropic",
        Kind::Choice(&["isotropic", "anisotropic"]),
        "TV flavour in the adaptation objective",
    ),
    key(
        "hyper.tv_eps",
        "1e-6",
        NONNEG,
        "smoothing inside the isotropic TV square root",
    ),
    key(
        "hyper.trace",
        "hutchinson",
        Kind::Choice(&["hutchinson", "exact"]),
        "trace estimator",
    ),
    key("train.epochs", "10", Kind::Count(1), "supervised epochs"),
    key("train.batch_size", "4", Kind::Count(1), "examples per step"),
    key("train.lr_max", "1e-3", POS, "initial learning rate (cosine schedule)"),
    key("train.lr_min", "1e-5", POS, "final learning rate"),
    key("train.grad_clip", "10", POS, "global gradient-norm clip"),
    key("adapt.steps", "200", Kind::Count(1), "adaptation steps per measurement"),
    key("adapt.lr", "1e-4", POS, "adaptation learning rate"),
    key(
        "adapt.cosine",
        "false",
        Kind::Flag,
        "anneal the adaptation rate to train.lr_min",
    ),
    key(
        "adapt.mode",
        "per-measurement",
        Kind::Choice(&["per-measurement", "batch"]),
        "one adapted network per measurement, or one for all",
    ),
    key(
        "infer.samples",
        "10",
        Kind::Count(1),
        "Monte-Carlo passes per reconstruction",
    ),
    key(
        "tv.alpha",
        "auto",
        Kind::RealOrAuto { min: 0.0, open: true },
        "TV baseline weight; auto = grid search on the tuning set",
    ),
    key("tv.iters", "500", Kind::Count(1), "primal-dual iterations"),
    key(
        "tv.theta",
        "1",
        Kind::Real {
            min: 0.0,
            max: 1.0,
            open: false,
        },
        "over-relaxation",
    ),
    key(
        "tv.norm_margin",
        "1.05",
        POS,
        "safety factor on the operator-norm estimate",
    ),
    key(
        "tv.tune_count",
        "5",
        Kind::Count(1),
        "tuning images for the weight search",
    ),
    key(
        "fbp.cutoff",
        "0.6",
        Kind::Real {
            min: 0.0,
            max: 1.0,
            open: true,
        },
        "Hann cut-off of the FBP baseline (fraction of Nyquist)",
    ),
    key("run.seed", "0", Kind::Count(0), "master seed (overridden by --seed)"),
];

fn spec_of(k: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|s| s.key == k)
}

fn check_value(spec: &KeySpec, v: &str) -> Result<()> {
    let bad = |what: String| Err(Error::Config(format!("{} = {v}: {what}", spec.key)));
    let in_range =
        |x: f64, min: f64, max: f64, open: bool| x.is_finite() && x <= max && (x > min || (!open && x == min));
    match spec.kind {
        Kind::Count(min) => match v.parse::<u64>() {
            Ok(n) if n >= min => Ok(()),
            _ => bad(format!("expected an integer >= {min}")),
        },
        Kind::Real { min, max, open } => match v.parse::<f64>() {
            Ok(x) if in_range(x, min, max, open) => Ok(()),
            _ => bad(format!(
                "expected a number in {}{min}, {max}]",
                if open { "(" } else { "[" }
            )),
        },
        Kind::RealOrAuto { min, open } => match v {
            "auto" => Ok(()),
            _ => match v.parse::<f64>() {
                Ok(x) if in_range(x, min, f64::INFINITY, open) => Ok(()),
                _ => bad(format!(
                    "expected auto or a number {} {min}",
                    if open { ">" } else { ">=" }
                )),
            },
        },
        Kind::Choice(opts) => {
            if opts.contains(&v) {
                Ok(())
            } else {
                bad(format!("expected one of {}", opts.join(", ")))
            }
        }
        Kind::Flag => match v {
            "true" | "false" => Ok(()),
            _ => bad("expected true or false".into()),
        },
    }
}

/// Flat `key = value` configuration; every key has a default.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<&'static str, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|s| (s.key, s.default.to_string())).collect(),
        }
    }
}

impl Config {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
            let k = k.trim();
            if seen.contains(&k) {
                return Err(Error::Config(format!("line {}: duplicate key {k}", i + 1)));
            }
            seen.push(k);
            cfg.set(k, v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip(&e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), strip(&e))))
    }

    /// Sets one key after checking its value; cross-key rules are checked by [`Config::validate`].
    pub fn set(&mut self, k: &str, v: &str) -> Result<()> {
        let spec = spec_of(k).ok_or_else(|| Error::Config(format!("unknown key {k}")))?;
        check_value(spec, v)?;
        self.values.insert(spec.key, v.to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {pair:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, k: &str) -> &str {
        self.values
            .get(k)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("no config key {k}"))
    }

    fn count(&self, k: &str) -> usize {
        self.get(k).parse().expect("validated")
    }

    fn real(&self, k: &str) -> f64 {
        self.get(k).parse().expect("validated")
    }

    fn real_or_auto(&self, k: &str) -> Option<f64> {
        match self.get(k) {
            "auto" => None,
            v => Some(v.parse().expect("validated")),
        }
    }

    /// Checks the rules that span several keys.
    pub fn validate(&self) -> Result<()> {
        for s in KEYS {
            check_value(s, self.get(s.key))?;
        }
        self.grid()?;
        self.geometry()?;
        self.noise()?;
        self.net()?;
        self.train()?.validate()?;
        self.tv_base().validate()?;
        if self.count("grid.nx") % 2 != 0 || self.count("grid.ny") % 2 != 0 {
            return Err(Error::Config(
                "grid.nx and grid.ny must be even (the network pools by 2)".into(),
            ));
        }
        Ok(())
    }

    /// Every key in table order, one `key = value` per line.
    pub fn serialize(&self) -> String {
        KEYS.iter()
            .map(|s| format!("{} = {}\n", s.key, self.get(s.key)))
            .collect()
    }

    /// FNV-1a of [`Config::serialize`].
    pub fn hash(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.write(self.serialize().as_bytes());
        h.finish()
    }

    pub fn seed(&self) -> u64 {
        self.get("run.seed").parse().expect("validated")
    }

    pub fn grid(&self) -> Result<ImageGrid> {
        ImageGrid::new(
            self.count("grid.nx"),
            self.count("grid.ny"),
            self.real("grid.pixel_size"),
        )
    }

    pub fn geometry(&self) -> Result<Geometry> {
        let (n, d, s) = (
            self.count("geometry.angles"),
            self.count("geometry.detectors"),
            self.real("geometry.detector_spacing"),
        );
        match self.get("geometry.beam") {
            "parallel" => Geometry::parallel(n, d, s),
            _ => Geometry::fan(
                n,
                d,
                s,
                self.real("geometry.source_distance"),
                self.real("geometry.detector_distance"),
            ),
        }
    }

    pub fn operator(&self) -> Result<ProjectionOperator> {
        ProjectionOperator::new(self.grid()?, self.geometry()?)
    }

    pub fn noise(&self) -> Result<NoiseModel> {
        NoiseModel::new(
            self.real("noise.photons"),
            self.real("noise.attenuation"),
            self.real("noise.count_floor"),
        )
        .map_err(|e| Error::Config(strip(&e)))
    }

    pub fn dataset_kind(&self) -> DatasetKind {
        DatasetKind::parse(self.get("data.kind")).expect("validated")
    }

    pub fn data_count(&self) -> usize {
        self.count("data.count")
    }

    pub fn net(&self) -> Result<NetConfig> {
        let c = NetConfig {
            c1: self.count("net.c1"),
            c2: self.count("net.c2"),
            groups: self.count("net.groups"),
            slope: self.real("net.slope"),
            k_iters: self.count("net.k_iters"),
            head_scale: self.real("net.head_scale"),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn hyper(&self) -> HyperParams {
        HyperParams {
            beta: self.real_or_auto("hyper.beta"),
            gamma: self.real("hyper.gamma"),
            hutchinson_samples: self.count("hyper.hutchinson_samples"),
            train_mc_samples: self.count("hyper.mc_samples"),
            tv_variant: TvVariant::parse(self.get("hyper.tv_variant")).expect("validated"),
            tv_smooth_eps: self.real("hyper.tv_eps"),
            trace_mode: TraceMode::parse(self.get("hyper.trace")).expect("validated"),
        }
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let c = TrainConfig {
            epochs: self.count("train.epochs"),
            batch_size: self.count("train.batch_size"),
            lr_max: self.real("train.lr_max"),
            lr_min: self.real("train.lr_min"),
            seed: self.seed(),
            hyper: self.hyper(),
            grad_clip: self.real("train.grad_clip"),
            ukt_steps: self.count("adapt.steps"),
            ukt_lr: self.real("adapt.lr"),
            ukt_cosine: self.get("adapt.cosine") == "true",
        };
        c.validate()?;
        Ok(c)
    }

    pub fn adapt_mode(&self) -> AdaptMode {
        match self.get("adapt.mode") {
            "batch" => AdaptMode::Batch,
            _ => AdaptMode::PerMeasurement,
        }
    }

    pub fn infer_samples(&self) -> usize {
        self.count("infer.samples")
    }

    /// TV settings with `alpha = 1`; the weight comes from [`Config::tv_alpha`].
    pub fn tv_base(&self) -> TvConfig {
        TvConfig {
            iters: self.count("tv.iters"),
            theta: self.real("tv.theta"),
            norm_margin: self.real("tv.norm_margin"),
            ..Default::default()
        }
    }

    pub fn tv_alpha(&self) -> Option<f64> {
        self.real_or_auto("tv.alpha")
    }

    pub fn tv_tune_count(&self) -> usize {
        self.count("tv.tune_count")
    }

    pub fn fbp_cutoff(&self) -> f64 {
        self.real("fbp.cutoff")
    }

    /// Key table for `--help`.
    pub fn help_table() -> String {
        let w = KEYS
            .iter()
            .map(|s| s.key.len() + s.default.len() + 3)
            .max()
            .unwrap_or(0);
        let mut out = String::from("Configuration keys (key = default):\n");
        for s in KEYS {
            let head = format!("{} = {}", s.key, s.default);
            out.push_str(&format!("  {head:<w$}  {}\n", s.doc));
        }
        out
    }
}

/// Error text without the variant prefix, for re-wrapping.
fn strip(e: &Error) -> String {
    match e {
        Error::Config(s) | Error::InvalidArgument(s) => s.clone(),
        other => other.to_string(),
    }
}
