//! INI run configuration: `[section]` headers, `key = value` lines, `#` or
//! `;` comments. Unknown sections and keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::ensemble::EnsembleMethod;
use crate::explain::Method;
use crate::nn::LayerSpec;
use crate::preprocess::{Coefficient, PreprocessConfig, Stage};
use crate::selection::{AlphaPreference, MIN_LAYER_DIM};
use crate::tensor::Shape3;
use crate::training::{Capture, TrainConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(String),
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("line {line}: unknown section [{name}]")]
    UnknownSection { line: usize, name: String },
    #[error("line {line}: unknown key `{key}` in [{section}]")]
    UnknownKey { line: usize, section: String, key: String },
    #[error("[{section}] {key}: {reason}")]
    Invalid { section: String, key: String, reason: String },
}

const SECTIONS: [&str; 7] = ["data", "preprocess", "model", "train", "select", "ensemble", "explain"];

#[derive(Clone, Debug, PartialEq)]
pub struct ExplainConfig {
    pub method: Method,
    /// Conv layer for the CAM family; the last conv layer when absent.
    pub layer: Option<usize>,
    /// Heatmap blend factor.
    pub beta: f64,
    /// Explain at most this many test images.
    pub max_images: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Resolved against the config file's directory.
    pub manifest: PathBuf,
    /// Test share for manifests without a `split` column.
    pub test_fraction: f64,
    pub split_seed: u64,
    pub preprocess: PreprocessConfig,
    /// Derive standardization statistics from the training images.
    pub auto_stats: bool,
    pub layers: Vec<LayerSpec>,
    pub init_seed: u64,
    pub train: TrainConfig,
    pub top_k: usize,
    pub min_dim: usize,
    pub alpha_preference: AlphaPreference,
    pub ensemble: EnsembleMethod,
    pub explain: ExplainConfig,
}

impl RunConfig {
    /// Input shape seen by the network: three replicated channels at the resize side.
    pub fn input_shape(&self) -> Shape3 {
        Shape3::new(3, self.preprocess.side, self.preprocess.side)
    }

    /// Replaces every seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.split_seed = seed;
        self.init_seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut ini = Ini::parse(text)?;

        let manifest = base_dir.join(ini.take::<String>("data", "manifest")?.ok_or_else(|| invalid("data", "manifest", "required"))?);
        let test_fraction = ini.take("data", "test_fraction")?.unwrap_or(0.2);
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(invalid("data", "test_fraction", "must lie in (0, 1)"));
        }
        let split_seed = ini.take("data", "seed")?.unwrap_or(0);

        let mut pre = PreprocessConfig::default();
        if let Some(list) = ini.take::<String>("preprocess", "stages")? {
            pre.stages = list
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| Stage::parse(s).ok_or_else(|| invalid("preprocess", "stages", &format!("unknown stage `{s}`"))))
                .collect::<Result<_, _>>()?;
        }
        if let Some(v) = ini.take("preprocess", "side")? {
            pre.side = v;
        }
        if let Some(v) = ini.take("preprocess", "max_rotation_deg")? {
            pre.max_rotation_deg = v;
        }
        if let Some(v) = ini.take("preprocess", "diffusion_threshold")? {
            pre.diffusion.threshold = v;
        }
        if let Some(v) = ini.take("preprocess", "diffusion_iterations")? {
            pre.diffusion.iterations = v;
        }
        if let Some(v) = ini.take("preprocess", "diffusion_step")? {
            pre.diffusion.step = v;
        }
        if let Some(v) = ini.take::<String>("preprocess", "diffusion_coefficient")? {
            pre.diffusion.coefficient = match v.as_str() {
                "c1" => Coefficient::C1,
                "c2" => Coefficient::C2,
                "c3" => Coefficient::C3,
                _ => return Err(invalid("preprocess", "diffusion_coefficient", "expected c1, c2 or c3")),
            };
        }
        if let Some(v) = ini.take("preprocess", "artifact_quantile")? {
            pre.artifact.quantile = v;
        }
        if let Some(v) = ini.take("preprocess", "artifact_max_fraction")? {
            pre.artifact.max_component_fraction = v;
        }
        let mean = ini.take::<f64>("preprocess", "mean")?;
        let std = ini.take::<f64>("preprocess", "std")?;
        let auto_stats = match (mean, std) {
            (Some(m), Some(s)) => {
                pre.mean = m;
                pre.std = s;
                false
            }
            (None, None) => true,
            _ => return Err(invalid("preprocess", "mean", "set both mean and std, or neither")),
        };
        if !pre.stages.contains(&Stage::Resize) {
            return Err(invalid("preprocess", "stages", "the chain must resize images to a common side"));
        }
        let mut check = pre.clone();
        if auto_stats {
            check.std = 1.0;
        }
        check.validate().map_err(|e| invalid("preprocess", "stages", &e.to_string()))?;

        let layer_text = ini.take::<String>("model", "layers")?.ok_or_else(|| invalid("model", "layers", "required"))?;
        let input = Shape3::new(3, pre.side, pre.side);
        let layers = parse_layers(&layer_text, input).map_err(|r| invalid("model", "layers", &r))?;
        let init_seed = ini.take("model", "seed")?.unwrap_or(0);

        let mut train = TrainConfig::default();
        if let Some(v) = ini.take("train", "alpha0")? {
            train.schedule.alpha0 = v;
        }
        if let Some(v) = ini.take("train", "epochs")? {
            train.schedule.total_epochs = v;
        }
        if let Some(v) = ini.take("train", "cycles")? {
            train.schedule.cycles = v;
        }
        if let Some(v) = ini.take("train", "batch_size")? {
            train.batch_size = v;
        }
        if let Some(v) = ini.take("train", "l2")? {
            train.l2 = v;
        }
        train.dropout = ini.take("train", "dropout")?;
        if let Some(v) = ini.take::<String>("train", "class_weights")? {
            train.class_weights = match v.as_str() {
                "auto" => None,
                list => Some(
                    list.split(',')
                        .map(|s| s.trim().parse::<f32>())
                        .collect::<Result<_, _>>()
                        .map_err(|e| invalid("train", "class_weights", &e.to_string()))?,
                ),
            };
        }
        if let Some(v) = ini.take("train", "seed")? {
            train.seed = v;
        }
        if let Some(v) = ini.take::<String>("train", "capture")? {
            train.capture = match v.as_str() {
                "best_in_final_quarter" => Capture::BestInFinalQuarter,
                "last_epoch" => Capture::LastEpoch,
                _ => return Err(invalid("train", "capture", "expected best_in_final_quarter or last_epoch")),
            };
        }
        if let Some(v) = ini.take("train", "validation_fraction")? {
            train.validation_fraction = v;
        }
        if let Some(v) = ini.take("train", "augment_max_deg")? {
            train.augment_max_deg = v;
        }
        train.validate().map_err(|e| invalid("train", "*", &e.to_string()))?;

        let top_k = ini.take("select", "top_k")?.unwrap_or(2);
        if top_k == 0 {
            return Err(invalid("select", "top_k", "must be at least 1"));
        }
        let min_dim = ini.take("select", "min_dim")?.unwrap_or(MIN_LAYER_DIM);
        let alpha_preference = match ini.take::<String>("select", "alpha_preference")?.as_deref() {
            None | Some("highest") => AlphaPreference::Highest,
            Some("lowest") => AlphaPreference::Lowest,
            Some(_) => return Err(invalid("select", "alpha_preference", "expected highest or lowest")),
        };

        let ensemble = match ini.take::<String>("ensemble", "method")? {
            None => EnsembleMethod::Scpa,
            Some(m) => EnsembleMethod::parse(&m).ok_or_else(|| invalid("ensemble", "method", "expected scpa, scpa_mean or pm"))?,
        };

        let method = match ini.take::<String>("explain", "method")? {
            None => Method::GradCamPp,
            Some(m) => Method::parse(&m).ok_or_else(|| invalid("explain", "method", "expected cam, gradcam, gradcam++ or lrp"))?,
        };
        let layer = match ini.take::<String>("explain", "layer")?.as_deref() {
            None | Some("last") => None,
            Some(v) => Some(v.parse().map_err(|_| invalid("explain", "layer", "expected a layer index or `last`"))?),
        };
        if let Some(l) = layer {
            if !matches!(layers.get(l), Some(LayerSpec::Conv2d { .. })) {
                return Err(invalid("explain", "layer", &format!("layer {l} is not a conv layer")));
            }
        }
        let beta = ini.take("explain", "beta")?.unwrap_or(0.5);
        if !(0.0..=1.0).contains(&beta) {
            return Err(invalid("explain", "beta", "must lie in [0, 1]"));
        }
        let max_images = ini.take("explain", "max_images")?;

        ini.finish()?;
        Ok(RunConfig {
            manifest,
            test_fraction,
            split_seed,
            preprocess: pre,
            auto_stats,
            layers,
            init_seed,
            train,
            top_k,
            min_dim,
            alpha_preference,
            ensemble,
            explain: ExplainConfig { method, layer, beta, max_images },
        })
    }
}

fn invalid(section: &str, key: &str, reason: &str) -> ConfigError {
    ConfigError::Invalid { section: section.into(), key: key.into(), reason: reason.into() }
}

/// Parsed `section → key → (value, line)`; values are removed as they are read.
struct Ini {
    entries: BTreeMap<(String, String), (String, usize)>,
}

impl Ini {
    fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') || s.starts_with(';') {
                continue;
            }
            if let Some(rest) = s.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError::Syntax { line, reason: "unterminated section header".into() })?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(ConfigError::UnknownSection { line, name: name.into() });
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) =
                s.split_once('=').ok_or_else(|| ConfigError::Syntax { line, reason: "expected `key = value`".into() })?;
            let sec = section.clone().ok_or_else(|| ConfigError::Syntax { line, reason: "key outside any section".into() })?;
            let key = key.trim().to_string();
            if entries.insert((sec.clone(), key.clone()), (value.trim().to_string(), line)).is_some() {
                return Err(ConfigError::Syntax { line, reason: format!("duplicate key `{key}` in [{sec}]") });
            }
        }
        Ok(Self { entries })
    }

    fn take<T: FromStr>(&mut self, section: &str, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(&(section.to_string(), key.to_string())) {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|e| ConfigError::Invalid {
                section: section.into(),
                key: key.into(),
                reason: format!("line {line}: cannot parse `{v}`: {e}"),
            }),
        }
    }

    fn finish(self) -> Result<(), ConfigError> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some(((section, key), (_, line))) => Err(ConfigError::UnknownKey { line, section, key }),
        }
    }
}

/// Parses a compact layer list such as
/// `conv(8,3,1,1) relu maxpool(2,2) gap dense(3) softmax`.
///
/// Input channels and features are inferred from `input`:
/// `conv(out,kernel[,stride[,padding]])`, `maxpool(size[,stride])`,
/// `dense(out)`, `dropout(rate)`, `relu`, `gap`, `softmax`.
pub fn parse_layers(text: &str, input: Shape3) -> Result<Vec<LayerSpec>, String> {
    let mut tokens = Vec::new();
    let mut depth = 0;
    let mut cur = String::new();
    for ch in text.chars() {
        match ch {
            '(' => {
                depth += 1;
                cur.push(ch);
            }
            ')' => {
                if depth == 0 {
                    return Err("unbalanced `)`".into());
                }
                depth -= 1;
                cur.push(ch);
            }
            c if depth == 0 && (c.is_whitespace() || c == ',') => {
                if !cur.is_empty() {
                    tokens.push(std::mem::take(&mut cur));
                }
            }
            c if c.is_whitespace() => {}
            c => cur.push(c),
        }
    }
    if depth != 0 {
        return Err("unbalanced `(`".into());
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    if tokens.is_empty() {
        return Err("no layers".into());
    }

    let mut shape = input;
    let mut layers = Vec::with_capacity(tokens.len());
    for tok in &tokens {
        let (name, args) = match tok.split_once('(') {
            Some((n, rest)) => {
                let inner = rest.strip_suffix(')').ok_or_else(|| format!("malformed layer `{tok}`"))?;
                (n, inner.split(',').map(str::to_string).collect::<Vec<_>>())
            }
            None => (tok.as_str(), Vec::new()),
        };
        let ints = || -> Result<Vec<usize>, String> {
            args.iter().map(|a| a.parse::<usize>().map_err(|_| format!("bad argument `{a}` in `{tok}`"))).collect()
        };
        let arity = |lo: usize, hi: usize, n: usize| -> Result<(), String> {
            if n < lo || n > hi {
                Err(format!("`{tok}` takes {lo} to {hi} arguments"))
            } else {
                Ok(())
            }
        };
        let spec = match name {
            "conv" => {
                let a = ints()?;
                arity(2, 4, a.len())?;
                LayerSpec::conv(shape.c, a[0], a[1], a.get(2).copied().unwrap_or(1), a.get(3).copied().unwrap_or(0))
            }
            "maxpool" => {
                let a = ints()?;
                arity(1, 2, a.len())?;
                LayerSpec::max_pool(a[0], a.get(1).copied().unwrap_or(a[0]))
            }
            "dense" => {
                let a = ints()?;
                arity(1, 1, a.len())?;
                LayerSpec::dense(shape.len(), a[0])
            }
            "dropout" => {
                arity(1, 1, args.len())?;
                LayerSpec::Dropout { rate: args[0].parse().map_err(|_| format!("bad rate in `{tok}`"))? }
            }
            "relu" | "gap" | "softmax" => {
                arity(0, 0, args.len())?;
                match name {
                    "relu" => LayerSpec::Relu,
                    "gap" => LayerSpec::GlobalAvgPool,
                    _ => LayerSpec::Softmax,
                }
            }
            other => return Err(format!("unknown layer `{other}`")),
        };
        shape = spec.output_shape(shape).map_err(|e| format!("`{tok}`: {e}"))?;
        layers.push(spec);
    }
    Ok(layers)
}
