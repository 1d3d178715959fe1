//! Localizer and classifier networks, the joint forward pass, and checkpoints.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::masking::{compose, mask_size, Mask};
use crate::objectives::{objective_terms, ObjectiveConfig, ObjectiveTerms, Probabilities};
use crate::trainer::TrainConfig;

/// Every encoder stage halves the resolution; inputs must divide by this.
pub const SPATIAL_MULTIPLE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Encoder widths of the localizer; the decoder mirrors them.
    pub localizer_widths: [usize; 3],
    pub classifier_widths: [usize; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 2,
            localizer_widths: [8, 16, 32],
            classifier_widths: [8, 16, 32],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.localizer_widths.contains(&0) || self.classifier_widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// A named parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Ordered parameters of one network.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub params: Vec<Param>,
}

impl ParamSet {
    fn push(&mut self, name: &str, value: Tensor) {
        self.params.push(Param {
            name: name.to_string(),
            value,
        });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p.value.clone())).collect()
    }

    fn check_layout(&self, expected: &ParamSet, which: &str) -> Result<()> {
        let ok = self.params.len() == expected.params.len()
            && self
                .params
                .iter()
                .zip(&expected.params)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{which} parameters do not match the model configuration"
            )))
        }
    }
}

fn he_normal<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("shape matches")
}

fn conv_params<R: Rng>(set: &mut ParamSet, rng: &mut R, name: &str, cin: usize, cout: usize, k: usize) {
    set.push(&format!("{name}.weight"), he_normal(rng, &[cout, cin, k, k], cin * k * k));
    set.push(&format!("{name}.bias"), Tensor::zeros(&[cout]));
}

fn check_image(g: &Graph, x: Var, in_channels: usize, op: &'static str) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 3 || s[0] != in_channels {
        return Err(Error::InvalidShape {
            op,
            msg: format!("expected image [{in_channels}, h, w], got {s:?}"),
        });
    }
    if s[1] % SPATIAL_MULTIPLE != 0 || s[2] % SPATIAL_MULTIPLE != 0 {
        return Err(Error::InvalidShape {
            op,
            msg: format!(
                "spatial size {}x{} must be divisible by {SPATIAL_MULTIPLE}; pad the image",
                s[1], s[2]
            ),
        });
    }
    Ok(())
}

/// Encoder-decoder producing a one-channel sigmoid mask at input resolution.
///
/// Three 4x4 stride-2 convolutions down, then three nearest-upsample + 3x3
/// convolutions up with additive skips from the matching encoder stage, then a
/// 1x1 head.
#[derive(Clone, Debug, PartialEq)]
pub struct Localizer {
    config: ModelConfig,
    params: ParamSet,
}

const LOC_ENC1: usize = 0;
const LOC_ENC2: usize = 2;
const LOC_ENC3: usize = 4;
const LOC_DEC3: usize = 6;
const LOC_DEC2: usize = 8;
const LOC_DEC1: usize = 10;
const LOC_HEAD: usize = 12;

/// Name of the mask head bias, which sets the initial foreground level.
pub const HEAD_BIAS: &str = "head.bias";

impl Localizer {
    pub fn new<R: Rng>(config: &ModelConfig, rng: &mut R) -> Self {
        let [w1, w2, w3] = config.localizer_widths;
        let mut p = ParamSet::default();
        conv_params(&mut p, rng, "enc1", config.in_channels, w1, 4);
        conv_params(&mut p, rng, "enc2", w1, w2, 4);
        conv_params(&mut p, rng, "enc3", w2, w3, 4);
        conv_params(&mut p, rng, "dec3", w3, w2, 3);
        conv_params(&mut p, rng, "dec2", w2, w1, 3);
        conv_params(&mut p, rng, "dec1", w1, w1, 3);
        conv_params(&mut p, rng, "head", w1, 1, 1);
        Self {
            config: *config,
            params: p,
        }
    }

    pub fn from_params(config: &ModelConfig, params: ParamSet) -> Result<Self> {
        let template = Self::new(config, &mut ChaCha8Rng::seed_from_u64(0));
        params.check_layout(&template.params, "localizer")?;
        Ok(Self {
            config: *config,
            params,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph) -> BoundLocalizer {
        BoundLocalizer {
            config: self.config,
            vars: self.params.bind(g),
        }
    }
}

/// Localizer parameters placed in a specific graph.
#[derive(Clone, Debug)]
pub struct BoundLocalizer {
    config: ModelConfig,
    vars: Vec<Var>,
}

impl BoundLocalizer {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn conv(&self, g: &mut Graph, x: Var, at: usize, stride: usize, pad: usize) -> Result<Var> {
        g.conv2d(x, self.vars[at], self.vars[at + 1], stride, pad)
    }

    fn down(&self, g: &mut Graph, x: Var, at: usize) -> Result<Var> {
        let y = self.conv(g, x, at, 2, 1)?;
        Ok(g.relu(y))
    }

    fn up(&self, g: &mut Graph, x: Var, at: usize, skip: Option<Var>) -> Result<Var> {
        let u = g.upsample2x(x)?;
        let y = self.conv(g, u, at, 1, 1)?;
        let y = g.relu(y);
        match skip {
            Some(s) => g.add(y, s),
            None => Ok(y),
        }
    }

    /// Soft foreground mask for one `[c, h, w]` image.
    pub fn localize(&self, g: &mut Graph, x: Var) -> Result<Mask> {
        check_image(g, x, self.config.in_channels, "localize")?;
        let (h, w) = (g.shape(x)[1], g.shape(x)[2]);
        let batch = g.reshape(x, &[1, self.config.in_channels, h, w])?;
        let e1 = self.down(g, batch, LOC_ENC1)?;
        let e2 = self.down(g, e1, LOC_ENC2)?;
        let e3 = self.down(g, e2, LOC_ENC3)?;
        let d3 = self.up(g, e3, LOC_DEC3, Some(e2))?;
        let d2 = self.up(g, d3, LOC_DEC2, Some(e1))?;
        let d1 = self.up(g, d2, LOC_DEC1, None)?;
        let logits = self.conv(g, d1, LOC_HEAD, 1, 0)?;
        let logits = g.reshape(logits, &[h, w])?;
        Mask::from_logits(g, logits)
    }
}

/// Three stride-2 convolutions, global average pooling and a dense layer.
///
/// The same parameters score the foreground and background composites.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    config: ModelConfig,
    params: ParamSet,
}

/// Dense layer weight, shape `[num_classes, features]`; row `c` scores class `c`.
pub const FC_WEIGHT: &str = "fc.weight";
pub const FC_BIAS: &str = "fc.bias";

impl Classifier {
    pub fn new<R: Rng>(config: &ModelConfig, rng: &mut R) -> Self {
        let [w1, w2, w3] = config.classifier_widths;
        let mut p = ParamSet::default();
        conv_params(&mut p, rng, "conv1", config.in_channels, w1, 4);
        conv_params(&mut p, rng, "conv2", w1, w2, 4);
        conv_params(&mut p, rng, "conv3", w2, w3, 4);
        let normal = Normal::new(0.0, (1.0 / w3 as f64).sqrt()).expect("positive std");
        let fc = (0..config.num_classes * w3).map(|_| normal.sample(rng)).collect();
        p.push(
            FC_WEIGHT,
            Tensor::new(vec![config.num_classes, w3], fc).expect("shape matches"),
        );
        p.push(FC_BIAS, Tensor::zeros(&[config.num_classes]));
        Self {
            config: *config,
            params: p,
        }
    }

    pub fn from_params(config: &ModelConfig, params: ParamSet) -> Result<Self> {
        let template = Self::new(config, &mut ChaCha8Rng::seed_from_u64(0));
        params.check_layout(&template.params, "classifier")?;
        Ok(Self {
            config: *config,
            params,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph) -> BoundClassifier {
        BoundClassifier {
            config: self.config,
            vars: self.params.bind(g),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundClassifier {
    config: ModelConfig,
    vars: Vec<Var>,
}

impl BoundClassifier {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Class logits `[num_classes]` for one `[c, h, w]` image.
    pub fn logits(&self, g: &mut Graph, x: Var) -> Result<Var> {
        check_image(g, x, self.config.in_channels, "classify")?;
        let (h, w) = (g.shape(x)[1], g.shape(x)[2]);
        let mut y = g.reshape(x, &[1, self.config.in_channels, h, w])?;
        for layer in 0..3 {
            y = g.conv2d(y, self.vars[2 * layer], self.vars[2 * layer + 1], 2, 1)?;
            y = g.relu(y);
        }
        let pooled = g.global_avg_pool(y)?;
        let logits = g.linear(pooled, self.vars[6], self.vars[7])?;
        g.reshape(logits, &[self.config.num_classes])
    }

    pub fn classify(&self, g: &mut Graph, x: Var) -> Result<Probabilities> {
        let logits = self.logits(g, x)?;
        Probabilities::from_logits(g, logits)
    }
}

/// Everything the objective needs from one image, built in a single graph.
#[derive(Clone, Copy, Debug)]
pub struct ForwardResult {
    pub mask: Mask,
    pub p_hat_fg: Probabilities,
    pub p_hat_bg: Probabilities,
    pub s_plus: Var,
    pub s_minus: Var,
    /// Present when a label was supplied.
    pub terms: Option<ObjectiveTerms>,
}

impl ForwardResult {
    pub fn loss(&self) -> Option<Var> {
        self.terms.map(|t| t.total)
    }
}

/// Localize, classify both composites with shared weights, measure both
/// regions and, given a label, assemble the objective.
pub fn forward_pipeline(
    g: &mut Graph,
    x: Var,
    label: Option<usize>,
    loc: &BoundLocalizer,
    cls: &BoundClassifier,
    cfg: &ObjectiveConfig,
) -> Result<ForwardResult> {
    let mask = loc.localize(g, x)?;
    let m_minus = mask.minus(g)?;
    let fg = compose(g, x, mask.plus())?;
    let bg = compose(g, x, m_minus)?;
    let p_hat_fg = cls.classify(g, fg)?;
    let p_hat_bg = cls.classify(g, bg)?;
    let s_plus = mask_size(g, mask.plus())?;
    let s_minus = mask_size(g, m_minus)?;
    let terms = match label {
        Some(class) => {
            let p = Probabilities::one_hot(g, class, cls.config.num_classes)?;
            Some(objective_terms(g, p, p_hat_fg, p_hat_bg, s_plus, s_minus, cfg)?)
        }
        None => None,
    };
    Ok(ForwardResult {
        mask,
        p_hat_fg,
        p_hat_bg,
        s_plus,
        s_minus,
        terms,
    })
}

/// Both networks together.
#[derive(Clone, Debug, PartialEq)]
pub struct Networks {
    pub config: ModelConfig,
    pub localizer: Localizer,
    pub classifier: Classifier,
}

impl Networks {
    /// Fresh weights. The mask head bias starts at zero so initial masks sit
    /// near 0.5.
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let localizer = Localizer::new(config, rng);
        let classifier = Classifier::new(config, rng);
        Ok(Self {
            config: *config,
            localizer,
            classifier,
        })
    }

    pub fn num_values(&self) -> usize {
        self.localizer.params.num_values() + self.classifier.params.num_values()
    }

    /// Runs the pipeline on `image [c, h, w]` in a fresh graph.
    pub fn forward(
        &self,
        image: &Tensor,
        label: Option<usize>,
        cfg: &ObjectiveConfig,
    ) -> Result<(Graph, Bound, ForwardResult)> {
        let mut g = Graph::new();
        let bound = Bound {
            localizer: self.localizer.bind(&mut g),
            classifier: self.classifier.bind(&mut g),
        };
        let x = g.constant(image.clone());
        let result = forward_pipeline(&mut g, x, label, &bound.localizer, &bound.classifier, cfg)?;
        Ok((g, bound, result))
    }
}

/// Both networks bound into one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    pub localizer: BoundLocalizer,
    pub classifier: BoundClassifier,
}

pub const CHECKPOINT_FORMAT: &str = "minmax-wsl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Shuffle order is a pure function of `(seed, epoch)`, so these two numbers
/// are the complete RNG state of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

/// JSON container for both parameter sets and the settings that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub epoch: usize,
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub train_config: Option<TrainConfig>,
    pub rng: RngState,
    pub localizer: ParamSet,
    pub classifier: ParamSet,
}

impl Checkpoint {
    pub fn new(
        nets: &Networks,
        objective: ObjectiveConfig,
        train_config: Option<TrainConfig>,
        epoch: usize,
        rng: RngState,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            epoch,
            model: nets.config,
            objective,
            train_config,
            rng,
            localizer: nets.localizer.params.clone(),
            classifier: nets.classifier.params.clone(),
        }
    }

    pub fn networks(&self) -> Result<Networks> {
        Ok(Networks {
            config: self.model,
            localizer: Localizer::from_params(&self.model, self.localizer.clone())?,
            classifier: Classifier::from_params(&self.model, self.classifier.clone())?,
        })
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("checkpoint serializes")
    }

    pub fn from_json(bytes: &[u8], path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_slice(bytes).map_err(|e| Error::json(path, e))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::format(path, format!("unknown format {:?}", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported checkpoint version {}", ckpt.version),
            ));
        }
        ckpt.networks()
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes, path)
    }
}
