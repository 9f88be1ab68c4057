//! The four compared architectures, built from one shared discriminator design.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::spectrogram::BANDS;
use crate::error::{Error, Result};
use crate::labels::NUM_CLASSES;
use crate::nn::{BatchNorm, Conv2d, ConvTranspose2d, Dense, LEAKY_SLOPE};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub const CONV_LAYERS: usize = 4;
/// Spatial reduction of the conv stack (four stride-2 layers).
pub const DOWNSAMPLE: usize = 16;

pub const CROP_WIDTHS: [usize; 2] = [64, 128];
pub const BATCH_SIZES: [usize; 3] = [64, 128, 256];
pub const LEARNING_RATES: [f64; 3] = [1e-3, 1e-4, 1e-5];
pub const MIN_FILTERS: usize = 32;
pub const MAX_FILTERS: usize = 90;
pub const FILTER_STEP: usize = 4;
pub const MIN_FILTER_SIZE: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "BasicCNN")]
    BasicCnn,
    #[serde(rename = "MultitaskCNN")]
    MultitaskCnn,
    #[serde(rename = "BasicDCGAN")]
    BasicDcgan,
    #[serde(rename = "MultitaskDCGAN")]
    MultitaskDcgan,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::BasicCnn,
        ModelKind::MultitaskCnn,
        ModelKind::BasicDcgan,
        ModelKind::MultitaskDcgan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::BasicCnn => "BasicCNN",
            ModelKind::MultitaskCnn => "MultitaskCNN",
            ModelKind::BasicDcgan => "BasicDCGAN",
            ModelKind::MultitaskDcgan => "MultitaskDCGAN",
        }
    }

    pub fn is_adversarial(self) -> bool {
        matches!(self, ModelKind::BasicDcgan | ModelKind::MultitaskDcgan)
    }

    pub fn is_multitask(self) -> bool {
        matches!(self, ModelKind::MultitaskCnn | ModelKind::MultitaskDcgan)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown model kind {s:?}; expected one of BasicCNN, MultitaskCNN, BasicDCGAN, MultitaskDCGAN"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub crop_width: usize,
    pub filter_size: usize,
    pub num_filters: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "default_shared_dense_dim")]
    pub shared_dense_dim: usize,
}

fn default_latent_dim() -> usize {
    100
}

fn default_shared_dense_dim() -> usize {
    128
}

impl ModelConfig {
    /// Tuned hyper-parameters for each kind.
    pub fn tuned(kind: ModelKind) -> Self {
        let (crop_width, learning_rate, batch_size, filter_size, num_filters) = match kind {
            ModelKind::BasicCnn => (128, 1e-4, 64, 15, 84),
            ModelKind::MultitaskCnn => (64, 1e-3, 128, 8, 32),
            ModelKind::BasicDcgan => (128, 1e-4, 64, 9, 72),
            ModelKind::MultitaskDcgan => (64, 1e-4, 128, 6, 88),
        };
        Self {
            kind,
            crop_width,
            filter_size,
            num_filters,
            batch_size,
            learning_rate,
            latent_dim: default_latent_dim(),
            shared_dense_dim: default_shared_dense_dim(),
        }
    }

    /// Smallest in-range configuration; sized for single-core runs on the
    /// synthetic corpus.
    pub fn desk(kind: ModelKind) -> Self {
        Self {
            kind,
            crop_width: 64,
            filter_size: 4,
            num_filters: 32,
            batch_size: 64,
            learning_rate: 1e-3,
            latent_dim: default_latent_dim(),
            shared_dense_dim: default_shared_dense_dim(),
        }
    }

    pub fn max_filter_size(&self) -> usize {
        self.crop_width / 8
    }

    /// Every violated bound, or `Ok` when the config is inside the search space.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !CROP_WIDTHS.contains(&self.crop_width) {
            bad.push(format!("crop_width {} not in {CROP_WIDTHS:?}", self.crop_width));
        }
        let hi = self.crop_width / 8;
        if self.filter_size < MIN_FILTER_SIZE || self.filter_size > hi.max(MIN_FILTER_SIZE) {
            bad.push(format!("filter_size {} not in [{MIN_FILTER_SIZE}, {hi}]", self.filter_size));
        }
        if !(MIN_FILTERS..=MAX_FILTERS).contains(&self.num_filters) || !(self.num_filters - MIN_FILTERS).is_multiple_of(FILTER_STEP) {
            bad.push(format!(
                "num_filters {} not in [{MIN_FILTERS}, {MAX_FILTERS}] with step {FILTER_STEP}",
                self.num_filters
            ));
        }
        if !BATCH_SIZES.contains(&self.batch_size) {
            bad.push(format!("batch_size {} not in {BATCH_SIZES:?}", self.batch_size));
        }
        if !LEARNING_RATES.iter().any(|&lr| (lr - self.learning_rate).abs() <= lr * 1e-9) {
            bad.push(format!("learning_rate {} not in {LEARNING_RATES:?}", self.learning_rate));
        }
        if self.latent_dim == 0 {
            bad.push("latent_dim must be positive".into());
        }
        if self.shared_dense_dim == 0 {
            bad.push("shared_dense_dim must be positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    /// `[F, 8, w/16]` after the conv stack.
    pub fn feature_shape(&self) -> [usize; 3] {
        [self.num_filters, BANDS / DOWNSAMPLE, self.crop_width / DOWNSAMPLE]
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_shape().iter().product()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [1, BANDS, self.crop_width]
    }
}

/// Conv stack plus the real/fake, shared, valence and activation heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub convs: Vec<Conv2d>,
    /// Present for adversarial kinds; reads the flattened conv features.
    pub real_head: Option<Dense>,
    pub shared: Dense,
    pub val_head: Dense,
    /// Present for multitask kinds.
    pub act_head: Option<Dense>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub project: Dense,
    pub project_bn: BatchNorm,
    pub ups: Vec<(ConvTranspose2d, BatchNorm)>,
    pub out: ConvTranspose2d,
    pub seed_shape: [usize; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub disc: Discriminator,
    pub gen: Option<Generator>,
}

/// Per-item outputs of an inference pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub real: Option<Vec<f64>>,
    pub valence: Vec<[f64; NUM_CLASSES]>,
    pub activation: Option<Vec<[f64; NUM_CLASSES]>>,
}

impl Model {
    /// Validates the config, then allocates parameters into a fresh store.
    pub fn build<T: Scalar, R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        Ok(Self::build_unchecked(config, rng))
    }

    /// Builds without range checks, for reduced configurations in tests and
    /// gradient checks. Crop width must still be a multiple of 16.
    pub fn build_unchecked<T: Scalar, R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> (Self, ParamStore<T>) {
        assert!(config.crop_width.is_multiple_of(DOWNSAMPLE), "crop width must be a multiple of 16");
        let mut store = ParamStore::new();
        let (f, k) = (config.num_filters, config.filter_size);
        let kind = config.kind;

        let gen = kind.is_adversarial().then(|| {
            let seed_shape = config.feature_shape();
            let project = Dense::new(&mut store, "gen.project", config.latent_dim, config.feature_dim(), rng);
            let project_bn = BatchNorm::new(&mut store, "gen.project_bn", f);
            let ups = (1..CONV_LAYERS)
                .map(|i| {
                    (
                        ConvTranspose2d::new(&mut store, &format!("gen.up{i}"), f, f, k, rng),
                        BatchNorm::new(&mut store, &format!("gen.bn{i}"), f),
                    )
                })
                .collect();
            let out = ConvTranspose2d::new(&mut store, "gen.out", f, 1, k, rng);
            Generator {
                project,
                project_bn,
                ups,
                out,
                seed_shape,
            }
        });

        let convs = (0..CONV_LAYERS)
            .map(|i| Conv2d::new(&mut store, &format!("disc.conv{i}"), if i == 0 { 1 } else { f }, f, k, rng))
            .collect();
        let feat = config.feature_dim();
        let real_head = kind
            .is_adversarial()
            .then(|| Dense::new(&mut store, "disc.real", feat, 1, rng));
        let shared = Dense::new(&mut store, "shared.dense", feat, config.shared_dense_dim, rng);
        let val_head = Dense::new(&mut store, "val_head.dense", config.shared_dense_dim, NUM_CLASSES, rng);
        let act_head = kind
            .is_multitask()
            .then(|| Dense::new(&mut store, "act_head.dense", config.shared_dense_dim, NUM_CLASSES, rng));

        let model = Self {
            config: config.clone(),
            disc: Discriminator {
                convs,
                real_head,
                shared,
                val_head,
                act_head,
            },
            gen,
        };
        (model, store)
    }

    pub fn conv_params(&self) -> Vec<ParamId> {
        self.disc.convs.iter().flat_map(|c| c.params()).collect()
    }

    /// Conv stack and real/fake head: the parameters trained by the discriminator loss.
    pub fn disc_params(&self) -> Vec<ParamId> {
        let mut p = self.conv_params();
        if let Some(h) = &self.disc.real_head {
            p.extend(h.params());
        }
        p
    }

    pub fn gen_params(&self) -> Vec<ParamId> {
        let Some(gen) = &self.gen else { return Vec::new() };
        let mut p = gen.project.params();
        p.extend(gen.project_bn.params());
        for (t, bn) in &gen.ups {
            p.extend(t.params());
            p.extend(bn.params());
        }
        p.extend(gen.out.params());
        p
    }

    /// Conv stack, shared dense and valence head.
    pub fn valence_params(&self) -> Vec<ParamId> {
        let mut p = self.conv_params();
        p.extend(self.disc.shared.params());
        p.extend(self.disc.val_head.params());
        p
    }

    /// Conv stack, shared dense and activation head; empty for single-task kinds.
    pub fn activation_params(&self) -> Vec<ParamId> {
        let Some(h) = &self.disc.act_head else { return Vec::new() };
        let mut p = self.conv_params();
        p.extend(self.disc.shared.params());
        p.extend(h.params());
        p
    }

    pub fn check_input<T: Scalar>(&self, g: &Graph<'_, T>, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 4 || s[1..] != self.config.input_shape() {
            return Err(Error::contract(format!(
                "discriminator expects [B, 1, {BANDS}, {}] crops, got {s:?}",
                self.config.crop_width
            )));
        }
        Ok(())
    }

    /// `[B, F, 8, w/16]` activations after four conv + leaky ReLU layers.
    pub fn conv_stack<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        let slope = T::from_f64_lossy(LEAKY_SLOPE);
        let mut h = x;
        for c in &self.disc.convs {
            h = c.forward(g, h)?;
            h = g.leaky_relu(h, slope)?;
        }
        Ok(h)
    }

    /// Flattened `[B, F·8·w/16]` features.
    pub fn features<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv_stack(g, x)?;
        g.flatten(h)
    }

    /// Sigmoid real/fake score `[B, 1]`.
    pub fn real_score<T: Scalar>(&self, g: &mut Graph<'_, T>, features: Var) -> Result<Var> {
        let head = self
            .disc
            .real_head
            .as_ref()
            .ok_or_else(|| Error::contract(format!("{} has no real/fake head", self.config.kind)))?;
        let logit = head.forward(g, features)?;
        g.sigmoid(logit)
    }

    fn shared<T: Scalar>(&self, g: &mut Graph<'_, T>, features: Var) -> Result<Var> {
        let h = self.disc.shared.forward(g, features)?;
        g.leaky_relu(h, T::from_f64_lossy(LEAKY_SLOPE))
    }

    /// Valence class probabilities `[B, 5]`.
    pub fn valence<T: Scalar>(&self, g: &mut Graph<'_, T>, features: Var) -> Result<Var> {
        let h = self.shared(g, features)?;
        let logits = self.disc.val_head.forward(g, h)?;
        g.softmax(logits)
    }

    /// Activation class probabilities `[B, 5]`.
    pub fn activation<T: Scalar>(&self, g: &mut Graph<'_, T>, features: Var) -> Result<Var> {
        let head = self
            .disc
            .act_head
            .as_ref()
            .ok_or_else(|| Error::contract(format!("{} has no activation head", self.config.kind)))?;
        let h = self.shared(g, features)?;
        let logits = head.forward(g, h)?;
        g.softmax(logits)
    }

    /// Inference over a batch of crops, in chunks of `chunk` items.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, crops: &Tensor<T>, chunk: usize) -> Result<Predictions> {
        let n = crops.shape()[0];
        let mut out = Predictions {
            real: self.disc.real_head.as_ref().map(|_| Vec::with_capacity(n)),
            valence: Vec::with_capacity(n),
            activation: self.disc.act_head.as_ref().map(|_| Vec::with_capacity(n)),
        };
        let rows = |t: &Tensor<T>| -> Vec<[f64; NUM_CLASSES]> {
            t.to_f64_vec()
                .chunks_exact(NUM_CLASSES)
                .map(|r| std::array::from_fn(|i| r[i]))
                .collect()
        };
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let mut g = Graph::with_params(store);
            let x = g.constant(crops.slice_batch(start, end)?);
            let feats = self.features(&mut g, x)?;
            if let Some(real) = &mut out.real {
                let s = self.real_score(&mut g, feats)?;
                real.extend(g.value(s).to_f64_vec());
            }
            let v = self.valence(&mut g, feats)?;
            out.valence.extend(rows(g.value(v)));
            if let Some(act) = &mut out.activation {
                let a = self.activation(&mut g, feats)?;
                act.extend(rows(g.value(a)));
            }
            start = end;
        }
        Ok(out)
    }
}

impl Generator {
    /// Maps `z: [B, latent]` to `[B, 1, 128, w]` in `(-1, 1)`. Batch norm uses
    /// batch statistics (and updates running averages) when `train` is set.
    pub fn forward<T: Scalar>(&mut self, g: &mut Graph<'_, T>, z: Var, train: bool) -> Result<Var> {
        let b = g.shape(z)[0];
        let [f, h, w] = self.seed_shape;
        let x = self.project.forward(g, z)?;
        let x = g.reshape(x, &[b, f, h, w])?;
        let x = self.project_bn.forward(g, x, train)?;
        let mut x = g.relu(x)?;
        for (t, bn) in &mut self.ups {
            x = t.forward(g, x)?;
            x = bn.forward(g, x, train)?;
            x = g.relu(x)?;
        }
        let x = self.out.forward(g, x)?;
        g.tanh(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn tiny(kind: ModelKind) -> ModelConfig {
        ModelConfig {
            num_filters: 4,
            latent_dim: 6,
            shared_dense_dim: 8,
            ..ModelConfig::desk(kind)
        }
    }

    fn random_crops(n: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([n, 1, BANDS, w], |_| r.random_range(-1.0..1.0))
    }

    #[test]
    fn tuned_configs_are_valid() {
        for kind in ModelKind::ALL {
            ModelConfig::tuned(kind).validate().unwrap();
            ModelConfig::desk(kind).validate().unwrap();
        }
    }

    #[test]
    fn violated_bounds_are_all_listed() {
        let c = ModelConfig {
            crop_width: 64,
            filter_size: 9,
            num_filters: 34,
            batch_size: 32,
            learning_rate: 1e-2,
            ..ModelConfig::desk(ModelKind::BasicCnn)
        };
        let msg = c.validate().unwrap_err().to_string();
        for needle in ["filter_size 9", "num_filters 34", "batch_size 32", "learning_rate"] {
            assert!(msg.contains(needle), "{msg}");
        }
    }

    #[test]
    fn kind_names_round_trip() {
        for kind in ModelKind::ALL {
            assert_eq!(kind.name().parse::<ModelKind>().unwrap(), kind);
            assert_eq!(serde_json::to_string(&kind).unwrap(), format!("\"{}\"", kind.name()));
        }
        assert!("LSTM".parse::<ModelKind>().is_err());
    }

    #[test]
    fn feature_shapes_for_tuned_configs() {
        assert_eq!(ModelConfig::tuned(ModelKind::BasicDcgan).feature_shape(), [72, 8, 8]);
        assert_eq!(ModelConfig::tuned(ModelKind::MultitaskDcgan).feature_shape(), [88, 8, 4]);
    }

    #[test]
    fn heads_present_per_kind() {
        for kind in ModelKind::ALL {
            let (m, _) = Model::build::<f32, _>(&ModelConfig::desk(kind), &mut rng()).unwrap();
            assert_eq!(m.gen.is_some(), kind.is_adversarial());
            assert_eq!(m.disc.real_head.is_some(), kind.is_adversarial());
            assert_eq!(m.disc.act_head.is_some(), kind.is_multitask());
        }
    }

    #[test]
    fn conv_stacks_match_across_kinds() {
        let shapes = |kind| {
            let (m, store) = Model::build::<f32, _>(&ModelConfig::desk(kind), &mut rng()).unwrap();
            m.conv_params().into_iter().map(|id| store.get(id).shape().to_vec()).collect::<Vec<_>>()
        };
        let base = shapes(ModelKind::BasicCnn);
        for kind in ModelKind::ALL {
            assert_eq!(shapes(kind), base);
        }
    }

    #[test]
    fn basic_cnn_is_multitask_cnn_minus_activation_head() {
        let count = |kind| {
            let (m, store) = Model::build::<f32, _>(&ModelConfig::desk(kind), &mut rng()).unwrap();
            let act = m.disc.act_head.as_ref().map(|h| store.count(&h.params())).unwrap_or(0);
            (store.len(), store.count(&store.ids().collect::<Vec<_>>()), act)
        };
        let (_, basic, _) = count(ModelKind::BasicCnn);
        let (_, multi, act) = count(ModelKind::MultitaskCnn);
        assert_eq!(act, 128 * 5 + 5);
        assert_eq!(basic, multi - act);
    }

    #[test]
    fn valence_rows_are_distributions_and_batch_independent() {
        let (m, store) = Model::build_unchecked::<f32, _>(&tiny(ModelKind::MultitaskDcgan), &mut rng());
        let one = random_crops(1, 64, 3);
        let two = Tensor::concat_batch(&[&one, &one]).unwrap();
        let p = m.predict(&store, &two, 8).unwrap();
        for row in &p.valence {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert_eq!(p.valence[0], p.valence[1]);
        assert_eq!(p.activation.as_ref().unwrap()[0], p.activation.as_ref().unwrap()[1]);
        let r = p.real.unwrap();
        assert!(r.iter().all(|&s| s > 0.0 && s < 1.0));
        assert_eq!(m.predict(&store, &two, 1).unwrap().valence, p.valence);
    }

    #[test]
    fn wrong_input_shape_is_contract_error() {
        let (m, store) = Model::build_unchecked::<f32, _>(&tiny(ModelKind::BasicCnn), &mut rng());
        let bad = random_crops(2, 128, 0);
        assert!(matches!(m.predict(&store, &bad, 4), Err(Error::Contract(_))));
    }

    #[test]
    fn generator_output_matches_discriminator_input() {
        for w in CROP_WIDTHS {
            let cfg = ModelConfig {
                crop_width: w,
                ..tiny(ModelKind::BasicDcgan)
            };
            let (mut m, store) = Model::build_unchecked::<f32, _>(&cfg, &mut rng());
            let gen = m.gen.as_mut().unwrap();
            let mut g = Graph::with_params(&store);
            let z = g.constant(Tensor::zeros([2, cfg.latent_dim]));
            let out = gen.forward(&mut g, z, false).unwrap();
            assert_eq!(g.shape(out), &[2, 1, BANDS, w]);
            assert!(g.value(out).data().iter().all(|v| v.abs() < 1.0));
            let first = g.value(out).clone();
            let z2 = g.constant(Tensor::zeros([2, cfg.latent_dim]));
            let again = gen.forward(&mut g, z2, false).unwrap();
            assert_eq!(g.value(again), &first);
        }
    }
}
