//! The nine 2D classifiers with `K = 4` heads, scratch or pretrained
//! initialisation, and the two fine-tuning extents.
//!
//! Tensor names follow the torchvision state-dict layout, so published
//! weights exported to safetensors load without renaming.

mod alexnet;
mod densenet;
mod inception;
mod resnet;
mod squeezenet;
mod vgg;
mod vit;

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ggograde_nn::{no_grad, ParamStore, Role, Tensor, VarBuilder};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::severity::NUM_CLASSES;

pub const WEIGHTS_DIR_ENV: &str = "GGOGRADE_WEIGHTS_DIR";

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model argument: {0}")]
    Argument(String),
    #[error("input shape {got:?} does not match model input {expected:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },
    #[error(
        "pretrained weights for {arch} not found at {path}; set {WEIGHTS_DIR_ENV} to a directory holding \
         <arch>.safetensors or use scratch initialisation (--init scratch)"
    )]
    PretrainedUnavailable { arch: Arch, path: PathBuf },
    #[error("weights file {path}: {reason}")]
    Weights { path: PathBuf, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arch {
    AlexNet,
    #[serde(rename = "VGG")]
    Vgg,
    ResNet152,
    WideResNet101,
    DenseNet,
    DenseNet201,
    InceptionNet,
    SqueezeNet,
    #[serde(rename = "VTB32")]
    Vtb32,
}

impl Arch {
    pub const ALL: [Arch; 9] = [
        Arch::AlexNet,
        Arch::Vgg,
        Arch::ResNet152,
        Arch::WideResNet101,
        Arch::DenseNet,
        Arch::DenseNet201,
        Arch::InceptionNet,
        Arch::SqueezeNet,
        Arch::Vtb32,
    ];

    /// Row label used in report tables.
    pub fn name(self) -> &'static str {
        match self {
            Arch::AlexNet => "AlexNet",
            Arch::Vgg => "VGG",
            Arch::ResNet152 => "ResNet152",
            Arch::WideResNet101 => "WideResNet101",
            Arch::DenseNet => "DenseNet",
            Arch::DenseNet201 => "DenseNet201",
            Arch::InceptionNet => "InceptionNet",
            Arch::SqueezeNet => "SqueezeNet",
            Arch::Vtb32 => "VTB32",
        }
    }

    /// Concrete network behind the family name.
    pub fn variant(self) -> &'static str {
        match self {
            Arch::AlexNet => "alexnet",
            Arch::Vgg => "vgg16",
            Arch::ResNet152 => "resnet152",
            Arch::WideResNet101 => "wide_resnet101_2",
            Arch::DenseNet => "densenet121",
            Arch::DenseNet201 => "densenet201",
            Arch::InceptionNet => "inception_v3",
            Arch::SqueezeNet => "squeezenet1_1",
            Arch::Vtb32 => "vit_b_32",
        }
    }

    pub fn canonical_input_size(self) -> usize {
        match self {
            Arch::InceptionNet => 299,
            _ => 224,
        }
    }

    fn min_input_size(self) -> usize {
        match self {
            Arch::AlexNet => 63,
            Arch::Vgg => 32,
            Arch::ResNet152 | Arch::WideResNet101 => 32,
            Arch::DenseNet | Arch::DenseNet201 => 29,
            Arch::InceptionNet => 75,
            Arch::SqueezeNet => 17,
            Arch::Vtb32 => 32,
        }
    }

    pub fn default_normalization(self) -> ([f32; 3], [f32; 3]) {
        match self {
            Arch::InceptionNet => ([0.5; 3], [0.5; 3]),
            _ => (IMAGENET_MEAN, IMAGENET_STD),
        }
    }

    /// Prefixes of the tensors that form the final classifier.
    pub fn head_prefixes(self) -> &'static [&'static str] {
        match self {
            Arch::AlexNet | Arch::Vgg => &["classifier.6."],
            Arch::ResNet152 | Arch::WideResNet101 | Arch::InceptionNet => &["fc."],
            Arch::DenseNet | Arch::DenseNet201 => &["classifier."],
            Arch::SqueezeNet => &["classifier.1."],
            Arch::Vtb32 => &["heads.head."],
        }
    }

    /// Tensors replaced by fresh `K`-way layers when loading published
    /// weights.
    fn replaced_prefixes(self) -> &'static [&'static str] {
        match self {
            Arch::InceptionNet => &["fc.", "AuxLogits.fc."],
            other => other.head_prefixes(),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        let arch = match key.as_str() {
            "alexnet" => Arch::AlexNet,
            "vgg" | "vgg16" => Arch::Vgg,
            "resnet152" => Arch::ResNet152,
            "wideresnet101" | "wideresnet1012" => Arch::WideResNet101,
            "densenet" | "densenet121" => Arch::DenseNet,
            "densenet201" => Arch::DenseNet201,
            "inceptionnet" | "inception" | "inceptionv3" => Arch::InceptionNet,
            "squeezenet" | "squeezenet11" => Arch::SqueezeNet,
            "vtb32" | "vitb32" | "vit" => Arch::Vtb32,
            _ => return Err(ModelError::Argument(format!("unknown architecture {s:?}"))),
        };
        Ok(arch)
    }
}

pub fn canonical_input_size(arch: Arch) -> usize {
    arch.canonical_input_size()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Pretrained,
    Scratch,
}

impl FromStr for InitMode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pretrained" => Ok(InitMode::Pretrained),
            "scratch" => Ok(InitMode::Scratch),
            other => Err(ModelError::Argument(format!("unknown init mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineTuneExtent {
    LastLayerOnly,
    AllLayers,
}

impl FineTuneExtent {
    pub fn as_str(self) -> &'static str {
        match self {
            FineTuneExtent::LastLayerOnly => "last_layer_only",
            FineTuneExtent::AllLayers => "all_layers",
        }
    }
}

impl fmt::Display for FineTuneExtent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FineTuneExtent {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "last_layer_only" | "last" | "last_layer" | "last-layer" => Ok(FineTuneExtent::LastLayerOnly),
            "all_layers" | "all" | "all-layers" => Ok(FineTuneExtent::AllLayers),
            other => Err(ModelError::Argument(format!("unknown fine-tuning extent {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub v: usize,
    pub norm_mean: [f32; 3],
    pub norm_std: [f32; 3],
    pub num_classes: usize,
    pub init: InitMode,
}

impl ModelSpec {
    /// Canonical input side and normalisation for `arch`.
    pub fn new(arch: Arch, init: InitMode) -> Self {
        let (norm_mean, norm_std) = arch.default_normalization();
        ModelSpec { arch, v: arch.canonical_input_size(), norm_mean, norm_std, num_classes: NUM_CLASSES, init }
    }

    pub fn with_v(mut self, v: usize) -> Self {
        self.v = v;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_classes != NUM_CLASSES {
            return Err(ModelError::Argument(format!("num_classes must be {NUM_CLASSES}, got {}", self.num_classes)));
        }
        if self.v < self.arch.min_input_size() {
            let min = self.arch.min_input_size();
            return Err(ModelError::Argument(format!("{} needs inputs of at least {min}x{min}, got v={}", self.arch, self.v)));
        }
        if self.arch == Arch::Vtb32 && self.v % 32 != 0 {
            return Err(ModelError::Argument(format!("VTB32 needs v divisible by 32, got {}", self.v)));
        }
        if self.norm_std.iter().any(|s| !(*s > 0.0)) {
            return Err(ModelError::Argument("normalisation std must be positive".into()));
        }
        Ok(())
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        [batch, 3, self.v, self.v]
    }
}

/// Execution mode threaded through a forward pass.
pub struct Ctx<'a> {
    pub train: bool,
    pub rng: &'a mut dyn RngCore,
}

impl Ctx<'_> {
    pub(crate) fn dropout(&mut self, x: &Tensor, p: f64) -> Tensor {
        if self.train && p > 0.0 {
            x.dropout(p, self.rng)
        } else {
            x.clone()
        }
    }
}

/// Backbone output: the input of the head stage, plus auxiliary logits for
/// networks that produce them in training mode.
pub struct Features {
    pub main: Tensor,
    pub aux_logits: Option<Tensor>,
}

pub struct ModelOutput {
    pub logits: Tensor,
    pub aux_logits: Option<Tensor>,
}

/// Weight of auxiliary logits in the training loss.
pub const AUX_LOSS_WEIGHT: f32 = 0.4;

pub(crate) trait Network {
    fn backbone(&self, x: &Tensor, ctx: &mut Ctx) -> Features;
    fn head(&self, features: &Tensor, ctx: &mut Ctx) -> Tensor;
}

pub struct Model {
    pub spec: ModelSpec,
    store: ParamStore,
    net: Box<dyn Network>,
    extent: FineTuneExtent,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("spec", &self.spec)
            .field("tensors", &self.store.len())
            .field("extent", &self.extent)
            .finish()
    }
}

fn construct(arch: Arch, v: usize, k: usize, vb: &mut VarBuilder) -> Box<dyn Network> {
    match arch {
        Arch::AlexNet => Box::new(alexnet::AlexNet::new(vb, k)),
        Arch::Vgg => Box::new(vgg::Vgg::vgg16(vb, k)),
        Arch::ResNet152 => Box::new(resnet::ResNet::new(vb, [3, 8, 36, 3], 64, k)),
        Arch::WideResNet101 => Box::new(resnet::ResNet::new(vb, [3, 4, 23, 3], 128, k)),
        Arch::DenseNet => Box::new(densenet::DenseNet::new(vb, 32, [6, 12, 24, 16], 64, k)),
        Arch::DenseNet201 => Box::new(densenet::DenseNet::new(vb, 32, [6, 12, 48, 32], 64, k)),
        Arch::InceptionNet => Box::new(inception::InceptionV3::new(vb, k)),
        Arch::SqueezeNet => Box::new(squeezenet::SqueezeNet::v1_1(vb, k)),
        Arch::Vtb32 => Box::new(vit::VisionTransformer::b32(vb, v, k)),
    }
}

fn build_with_classes(spec: &ModelSpec, k: usize, seed: u64) -> Model {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = {
        let mut vb = VarBuilder::new(&mut store, &mut rng);
        construct(spec.arch, spec.v, k, &mut vb)
    };
    Model { spec: spec.clone(), store, net, extent: FineTuneExtent::AllLayers }
}

/// Builds the network for `spec`. Scratch weights are drawn from `seed`;
/// pretrained weights come from `$GGOGRADE_WEIGHTS_DIR/<variant>.safetensors`
/// with a freshly initialised `K`-way head.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model, ModelError> {
    spec.validate()?;
    let mut model = build_with_classes(spec, spec.num_classes, seed);
    if spec.init == InitMode::Pretrained {
        let path = pretrained_path(spec.arch);
        if !path.is_file() {
            return Err(ModelError::PretrainedUnavailable { arch: spec.arch, path });
        }
        model.load_backbone_file(&path)?;
    }
    Ok(model)
}

pub fn pretrained_path(arch: Arch) -> PathBuf {
    let dir = std::env::var_os(WEIGHTS_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("weights"));
    dir.join(format!("{}.safetensors", arch.variant()))
}

/// Marks parameters trainable according to `extent` and records it on the
/// model.
pub fn apply_freeze_policy(mut model: Model, extent: FineTuneExtent) -> Model {
    model.set_extent(extent);
    model
}

/// Which tensors a checksum covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    All,
    Backbone,
    Head,
}

impl Model {
    pub fn arch(&self) -> Arch {
        self.spec.arch
    }

    pub fn extent(&self) -> FineTuneExtent {
        self.extent
    }

    pub fn set_extent(&mut self, extent: FineTuneExtent) {
        self.extent = extent;
        for e in self.store.params() {
            let trainable = extent == FineTuneExtent::AllLayers || self.is_head(&e.name);
            e.tensor.set_requires_grad(trainable);
        }
    }

    pub fn is_head(&self, name: &str) -> bool {
        self.spec.arch.head_prefixes().iter().any(|p| name.starts_with(p))
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    pub fn trainable_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn head_param_count(&self) -> usize {
        self.store.params().filter(|e| self.is_head(&e.name)).map(|e| e.tensor.numel()).sum()
    }

    pub fn trainable_params(&self) -> Vec<Tensor> {
        self.store.trainable()
    }

    pub fn head_params(&self) -> Vec<Tensor> {
        self.store.params().filter(|e| self.is_head(&e.name)).map(|e| e.tensor.clone()).collect()
    }

    pub fn check_input(&self, x: &Tensor) -> Result<(), ModelError> {
        let shape = x.shape();
        let ok = shape.len() == 4 && shape[0] >= 1 && shape[1..] == [3, self.spec.v, self.spec.v];
        if ok {
            Ok(())
        } else {
            let expected = vec![shape.first().copied().unwrap_or(1), 3, self.spec.v, self.spec.v];
            Err(ModelError::Shape { expected, got: shape.to_vec() })
        }
    }

    pub fn features(&self, x: &Tensor, ctx: &mut Ctx) -> Result<Features, ModelError> {
        self.check_input(x)?;
        Ok(self.net.backbone(x, ctx))
    }

    pub fn head(&self, features: &Tensor, ctx: &mut Ctx) -> Tensor {
        self.net.head(features, ctx)
    }

    /// Full forward pass. Under `LastLayerOnly` the frozen backbone always
    /// runs in inference mode; only the head follows `ctx.train`.
    pub fn forward(&self, x: &Tensor, ctx: &mut Ctx) -> Result<ModelOutput, ModelError> {
        let features = if self.extent == FineTuneExtent::LastLayerOnly {
            let train = ctx.train;
            ctx.train = false;
            let f = self.features(x, ctx);
            ctx.train = train;
            f?
        } else {
            self.features(x, ctx)?
        };
        let logits = self.head(&features.main, ctx);
        Ok(ModelOutput { logits, aux_logits: features.aux_logits })
    }

    /// Inference-mode logits, row-major `[batch, K]`.
    pub fn predict_logits(&self, x: &Tensor) -> Result<Vec<f32>, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = Ctx { train: false, rng: &mut rng };
        no_grad(|| self.forward(x, &mut ctx).map(|o| o.logits.to_vec()))
    }

    /// SHA-256 over names, shapes and bytes of the selected tensors
    /// (parameters and buffers).
    pub fn checksum(&self, part: Part) -> String {
        let mut h = Sha256::new();
        for e in self.store.iter() {
            let head = self.is_head(&e.name);
            let take = match part {
                Part::All => true,
                Part::Backbone => !head,
                Part::Head => head,
            };
            if !take {
                continue;
            }
            h.update(e.name.as_bytes());
            for d in e.tensor.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in e.tensor.data().iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Every tensor as little-endian `f32` bytes, keyed by name.
    pub fn state_bytes(&self) -> Vec<(String, Vec<usize>, Vec<u8>)> {
        self.store
            .iter()
            .map(|e| {
                let bytes = e.tensor.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                (e.name.clone(), e.tensor.shape().to_vec(), bytes)
            })
            .collect()
    }

    /// Writes all tensors and `metadata` to a safetensors file.
    pub fn save(&self, path: &Path, metadata: HashMap<String, String>) -> Result<(), ModelError> {
        let state = self.state_bytes();
        let views = state
            .iter()
            .map(|(name, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.clone(), bytes).map(|v| (name.clone(), v))
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| ModelError::Weights { path: path.to_path_buf(), reason: e.to_string() })?;
        safetensors::serialize_to_file(views, Some(metadata), path)
            .map_err(|e| ModelError::Weights { path: path.to_path_buf(), reason: e.to_string() })
    }

    /// Overwrites tensors from a parsed safetensors buffer. With `skip_head`
    /// the classifier tensors keep their current values and extra entries
    /// (such as the original 1000-way head) are ignored.
    fn load_tensors(&mut self, st: &SafeTensors, path: &Path, skip: &[&str]) -> Result<(), ModelError> {
        let err = |reason: String| ModelError::Weights { path: path.to_path_buf(), reason };
        for e in self.store.iter() {
            if skip.iter().any(|p| e.name.starts_with(p)) {
                continue;
            }
            let view = st.tensor(&e.name).map_err(|_| err(format!("missing tensor {}", e.name)))?;
            if view.shape() != e.tensor.shape() {
                return Err(err(format!(
                    "tensor {} has shape {:?}, model expects {:?}",
                    e.name,
                    view.shape(),
                    e.tensor.shape()
                )));
            }
            let values: Vec<f32> = match view.dtype() {
                Dtype::F32 => view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
                Dtype::F64 => view
                    .data()
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as f32)
                    .collect(),
                other => return Err(err(format!("tensor {} has unsupported dtype {other:?}", e.name))),
            };
            e.tensor.data_mut().copy_from_slice(&values);
        }
        Ok(())
    }

    fn load_backbone_file(&mut self, path: &Path) -> Result<(), ModelError> {
        let bytes = std::fs::read(path).map_err(|e| ModelError::Weights { path: path.to_path_buf(), reason: e.to_string() })?;
        let st = SafeTensors::deserialize(&bytes)
            .map_err(|e| ModelError::Weights { path: path.to_path_buf(), reason: e.to_string() })?;
        let skip = self.spec.arch.replaced_prefixes();
        self.load_tensors(&st, path, skip)
    }

    /// Restores every tensor from a buffer written by [`Model::save`].
    pub fn load_state(&mut self, st: &SafeTensors, path: &Path) -> Result<(), ModelError> {
        self.load_tensors(st, path, &[])
    }

    /// Rebuilds a model from a checkpoint buffer: the architecture comes from
    /// `spec`, every tensor from the file.
    pub fn from_checkpoint(spec: &ModelSpec, st: &SafeTensors, path: &Path) -> Result<Model, ModelError> {
        spec.validate()?;
        let mut scratch = spec.clone();
        scratch.init = InitMode::Scratch;
        let mut model = build_with_classes(&scratch, spec.num_classes, 0);
        model.spec = spec.clone();
        model.load_state(st, path)?;
        Ok(model)
    }

    pub fn buffers(&self) -> impl Iterator<Item = &ggograde_nn::NamedTensor> {
        self.store.iter().filter(|e| e.role == Role::Buffer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Parameter totals of the torchvision reference models with their
    /// original 1000-way heads.
    #[test]
    fn parameter_counts_match_reference_models() {
        let expected = [
            (Arch::AlexNet, 61_100_840usize),
            (Arch::Vgg, 138_357_544),
            (Arch::ResNet152, 60_192_808),
            (Arch::WideResNet101, 126_886_696),
            (Arch::DenseNet, 7_978_856),
            (Arch::DenseNet201, 20_013_928),
            (Arch::InceptionNet, 27_161_264),
            (Arch::SqueezeNet, 1_235_496),
            (Arch::Vtb32, 88_224_232),
        ];
        for (arch, count) in expected {
            let spec = ModelSpec::new(arch, InitMode::Scratch);
            let model = build_with_classes(&spec, 1000, 0);
            assert_eq!(model.param_count(), count, "{arch}");
        }
    }

    #[test]
    fn arch_names_parse() {
        for a in Arch::ALL {
            assert_eq!(a.name().parse::<Arch>().unwrap(), a);
            assert_eq!(a.variant().parse::<Arch>().unwrap(), a);
        }
        assert!("LeNet".parse::<Arch>().is_err());
    }

    #[test]
    fn canonical_sizes() {
        assert_eq!(canonical_input_size(Arch::AlexNet), 224);
        assert_eq!(canonical_input_size(Arch::InceptionNet), 299);
        assert_eq!(canonical_input_size(Arch::Vtb32), 224);
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::new(Arch::Vtb32, InitMode::Scratch).with_v(100).validate().is_err());
        assert!(ModelSpec::new(Arch::InceptionNet, InitMode::Scratch).with_v(64).validate().is_err());
        let mut s = ModelSpec::new(Arch::AlexNet, InitMode::Scratch);
        s.num_classes = 3;
        assert!(s.validate().is_err());
    }

    #[test]
    fn pretrained_without_weights_points_to_scratch() {
        std::env::set_var(WEIGHTS_DIR_ENV, "/nonexistent/weights");
        let err = build_model(&ModelSpec::new(Arch::SqueezeNet, InitMode::Pretrained), 0).unwrap_err();
        assert!(matches!(err, ModelError::PretrainedUnavailable { .. }));
        assert!(err.to_string().contains("scratch"));
    }
}
