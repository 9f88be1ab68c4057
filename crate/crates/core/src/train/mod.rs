//! Alternating semi-supervised training: discriminator, generator, valence,
//! then activation, one update each per step.

pub mod losses;
pub mod sampler;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{crop_batch, label_batch, Example};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::tensor::{Gradients, Graph, ParamStore, Tensor};

pub use losses::{classifier_loss, cross_entropy, discriminator_loss, gan_losses, generator_loss, GanLosses, PROB_CLAMP};
pub use sampler::{epoch_batches, steps_per_epoch, RoundRobin};

/// Losses recorded for one completed step. Adversarial entries are `None`
/// for CNN kinds and `l_act` is `None` for single-task kinds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StepLosses {
    pub step: u64,
    pub l_d: Option<f64>,
    pub l_g: Option<f64>,
    pub l_r: Option<f64>,
    pub l_f: Option<f64>,
    /// Mean discriminator score of the generated batch in the discriminator update.
    pub fake_score: Option<f64>,
    pub l_val: f64,
    pub l_act: Option<f64>,
}

/// Independent random streams so that data order, crops and latent samples
/// do not perturb one another.
#[derive(Clone, Debug)]
pub struct TrainRngs {
    pub crop: ChaCha8Rng,
    pub z: ChaCha8Rng,
    pub shuffle: ChaCha8Rng,
}

impl TrainRngs {
    pub const INIT_STREAM: u64 = 0;

    pub fn new(seed: u64) -> Self {
        let stream = |s| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        Self {
            crop: stream(1),
            z: stream(2),
            shuffle: stream(3),
        }
    }
}

/// One optimizer per updated component.
#[derive(Clone, Debug)]
pub struct Optimizers<T> {
    pub disc: Option<Adam<T>>,
    pub gen: Option<Adam<T>>,
    pub valence: Adam<T>,
    pub activation: Option<Adam<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscriminatorLosses {
    pub l_r: f64,
    pub l_f: f64,
    pub l_d: f64,
    pub fake_score: f64,
}

/// Inputs of one step.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// `[n, 1, 128, w]` labeled crops.
    pub labeled: Tensor<T>,
    /// `[n, 5]` fuzzy valence targets.
    pub valence: Tensor<T>,
    pub activation: Option<Tensor<T>>,
    /// Crops from the unlabeled pool, adversarial kinds only.
    pub unlabeled: Option<Tensor<T>>,
}

/// Examples available to one training run.
#[derive(Clone, Debug, Default)]
pub struct TrainData<'a> {
    pub labeled: Vec<&'a Example>,
    pub unlabeled: Vec<&'a Example>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub faults: usize,
    pub l_d: Option<f64>,
    pub l_g: Option<f64>,
    pub l_val: f64,
    pub l_act: Option<f64>,
    pub fake_score: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainState<T: Scalar> {
    pub model: Model,
    pub store: ParamStore<T>,
    pub opts: Optimizers<T>,
    pub rngs: TrainRngs,
    pub step: u64,
    pub epoch: usize,
    pub history: Vec<StepLosses>,
    pub faults: u64,
    unlabeled: Option<RoundRobin>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self::new_unchecked(config, seed))
    }

    /// Skips range validation; see [`Model::build_unchecked`].
    pub fn new_unchecked(config: &ModelConfig, seed: u64) -> Self {
        let mut init = ChaCha8Rng::seed_from_u64(seed);
        init.set_stream(TrainRngs::INIT_STREAM);
        let (model, store) = Model::build_unchecked::<T, _>(config, &mut init);
        let adam = AdamConfig::with_learning_rate(config.learning_rate);
        let opt = |ids: Vec<_>| (!ids.is_empty()).then(|| Adam::new(adam, &ids, &store));
        let opts = Optimizers {
            disc: opt(if config.kind.is_adversarial() { model.disc_params() } else { Vec::new() }),
            gen: opt(model.gen_params()),
            valence: Adam::new(adam, &model.valence_params(), &store),
            activation: opt(model.activation_params()),
        };
        Self {
            model,
            store,
            opts,
            rngs: TrainRngs::new(seed),
            step: 0,
            epoch: 0,
            history: Vec::new(),
            faults: 0,
            unlabeled: None,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    fn sample_z(&mut self, n: usize) -> Tensor<T> {
        let latent = self.model.config.latent_dim;
        let z = &mut self.rngs.z;
        Tensor::from_fn([n, latent], |_| {
            let v: f64 = StandardNormal.sample(z);
            T::from_f64_lossy(v)
        })
    }

    /// Runs one step. A numeric fault restores the pre-step state, is
    /// counted and logged, and yields `Ok(None)`.
    pub fn train_step(&mut self, batch: &Batch<T>) -> Result<Option<StepLosses>> {
        let saved = (self.model.clone(), self.store.clone(), self.opts.clone());
        match self.try_step(batch) {
            Ok(mut losses) => {
                losses.step = self.step;
                self.step += 1;
                self.history.push(losses);
                Ok(Some(losses))
            }
            Err(e) => {
                (self.model, self.store, self.opts) = saved;
                match e {
                    Error::NumericFault { op } => {
                        self.faults += 1;
                        log::warn!("numeric fault in {op} at step {}; step rolled back", self.step);
                        Ok(None)
                    }
                    other => Err(other),
                }
            }
        }
    }

    fn try_step(&mut self, batch: &Batch<T>) -> Result<StepLosses> {
        let mut out = StepLosses::default();
        if self.model.config.kind.is_adversarial() {
            self.adversarial_updates(batch, &mut out)?;
        }

        let valence_ids = self.model.valence_params();
        let (l_val, grads) = {
            let mut g = Graph::with_params(&self.store);
            g.freeze(self.store.ids().filter(|id| !valence_ids.contains(id)));
            let x = g.constant(batch.labeled.clone());
            let feats = self.model.features(&mut g, x)?;
            let p = self.model.valence(&mut g, feats)?;
            let l = classifier_loss(&mut g, p, &batch.valence)?;
            (g.value(l).data()[0].to_f64_lossy(), g.backward(l)?)
        };
        self.opts.valence.step(&mut self.store, &grads)?;
        out.l_val = l_val;

        if let Some(opt) = &mut self.opts.activation {
            let target = batch
                .activation
                .as_ref()
                .ok_or_else(|| Error::contract("multitask step without activation targets"))?;
            let ids = opt.params().to_vec();
            let (l_act, grads) = {
                let mut g = Graph::with_params(&self.store);
                g.freeze(self.store.ids().filter(|id| !ids.contains(id)));
                let x = g.constant(batch.labeled.clone());
                let feats = self.model.features(&mut g, x)?;
                let p = self.model.activation(&mut g, feats)?;
                let l = classifier_loss(&mut g, p, target)?;
                (g.value(l).data()[0].to_f64_lossy(), g.backward(l)?)
            };
            opt.step(&mut self.store, &grads)?;
            out.l_act = Some(l_act);
        }
        Ok(out)
    }

    fn adversarial_updates(&mut self, batch: &Batch<T>, out: &mut StepLosses) -> Result<()> {
        let unlabeled = batch
            .unlabeled
            .as_ref()
            .ok_or_else(|| Error::contract("adversarial step without unlabeled crops"))?;
        let real = Tensor::concat_batch(&[unlabeled, &batch.labeled])?;
        let n_fake = self.model.config.batch_size;

        let z = self.sample_z(n_fake);
        let fake = self.generate(z)?;
        let (d, grads) = self.discriminator_gradients(real, fake)?;
        self.opts.disc.as_mut().expect("discriminator optimizer").step(&mut self.store, &grads)?;

        let z = self.sample_z(n_fake);
        let (l_g, grads) = self.generator_gradients(z)?;
        self.opts.gen.as_mut().expect("generator optimizer").step(&mut self.store, &grads)?;

        out.l_r = Some(d.l_r);
        out.l_f = Some(d.l_f);
        out.l_d = Some(d.l_d);
        out.l_g = Some(l_g);
        out.fake_score = Some(d.fake_score);
        Ok(())
    }

    /// Generator output for `z` as a plain tensor, batch norm in training mode.
    pub fn generate(&mut self, z: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::with_params(&self.store);
        g.freeze(self.store.ids());
        let zv = g.constant(z);
        let gen = self
            .model
            .gen
            .as_mut()
            .ok_or_else(|| Error::contract("model has no generator"))?;
        let y = gen.forward(&mut g, zv, true)?;
        Ok(g.value(y).clone())
    }

    /// Discriminator loss on `real` and detached `fake` crops with gradients
    /// for the conv stack and real/fake head only.
    pub fn discriminator_gradients(
        &self,
        real: Tensor<T>,
        fake: Tensor<T>,
    ) -> Result<(DiscriminatorLosses, Gradients<T>)> {
        let disc_ids = self.model.disc_params();
        let mut g = Graph::with_params(&self.store);
        g.freeze(self.store.ids().filter(|id| !disc_ids.contains(id)));
        let xr = g.constant(real);
        let fr = self.model.features(&mut g, xr)?;
        let yr = self.model.real_score(&mut g, fr)?;
        let xf = g.constant(fake);
        let ff = self.model.features(&mut g, xf)?;
        let yg = self.model.real_score(&mut g, ff)?;
        let (l_r, l_f, l_d) = discriminator_loss(&mut g, yr, yg)?;
        let scores = g.value(yg).to_f64_vec();
        let l_r = g.value(l_r).data()[0].to_f64_lossy();
        let l_f = g.value(l_f).data()[0].to_f64_lossy();
        let losses = DiscriminatorLosses {
            l_r,
            l_f,
            l_d: l_r + l_f,
            fake_score: scores.iter().sum::<f64>() / scores.len() as f64,
        };
        Ok((losses, g.backward(l_d)?))
    }

    /// Generator loss through the frozen discriminator, with gradients for
    /// generator parameters only.
    pub fn generator_gradients(&mut self, z: Tensor<T>) -> Result<(f64, Gradients<T>)> {
        let gen_ids = self.model.gen_params();
        let mut g = Graph::with_params(&self.store);
        g.freeze(self.store.ids().filter(|id| !gen_ids.contains(id)));
        let zv = g.constant(z);
        let gen = self
            .model
            .gen
            .as_mut()
            .ok_or_else(|| Error::contract("model has no generator"))?;
        let x = gen.forward(&mut g, zv, true)?;
        let f = self.model.features(&mut g, x)?;
        let yg = self.model.real_score(&mut g, f)?;
        let l = generator_loss(&mut g, yg)?;
        Ok((g.value(l).data()[0].to_f64_lossy(), g.backward(l)?))
    }

    /// Assembles crops and targets for the given labeled items, drawing an
    /// equal number of unlabeled crops for adversarial kinds.
    pub fn make_batch(&mut self, data: &TrainData<'_>, items: &[usize]) -> Result<Batch<T>> {
        let cfg = &self.model.config;
        let (w, kind) = (cfg.crop_width, cfg.kind);
        let ex: Vec<&Example> = items.iter().map(|&i| data.labeled[i]).collect();
        let labeled = crop_batch(&ex, w, &mut self.rngs.crop)?;
        let valence = label_batch(ex.iter().map(|e| e.valence.expect("labeled example")))?;
        let activation = if kind.is_multitask() {
            Some(label_batch(ex.iter().map(|e| e.activation.expect("labeled example")))?)
        } else {
            None
        };
        let unlabeled = if kind.is_adversarial() {
            if data.unlabeled.is_empty() {
                return Err(Error::Config(format!("{kind} needs a non-empty unlabeled pool")));
            }
            let pool = data.unlabeled.len();
            let rr = self.unlabeled.get_or_insert_with(|| RoundRobin::new(pool, &mut self.rngs.shuffle));
            let picks: Vec<&Example> = rr
                .take(items.len(), &mut self.rngs.shuffle)
                .into_iter()
                .map(|i| data.unlabeled[i])
                .collect();
            Some(crop_batch(&picks, w, &mut self.rngs.crop)?)
        } else {
            None
        };
        Ok(Batch {
            labeled,
            valence,
            activation,
            unlabeled,
        })
    }

    /// One pass over the class-balanced labeled set.
    pub fn run_epoch(&mut self, data: &TrainData<'_>) -> Result<EpochSummary> {
        let kind = self.model.config.kind;
        if kind.is_adversarial() && data.unlabeled.is_empty() {
            return Err(Error::Config(format!("{kind} needs a non-empty unlabeled pool")));
        }
        if data.labeled.is_empty() {
            return Err(Error::Config("no labeled training examples".into()));
        }
        let classes: Vec<usize> = data.labeled.iter().map(|e| e.valence_class()).collect();
        let batches = epoch_batches(&classes, self.model.config.batch_size, &mut self.rngs.shuffle);
        let first = self.history.len();
        let faults_before = self.faults;
        for items in &batches {
            let batch = self.make_batch(data, items)?;
            self.train_step(&batch)?;
        }
        self.epoch += 1;
        let done = &self.history[first..];
        let mean = |f: &dyn Fn(&StepLosses) -> Option<f64>| {
            let v: Vec<f64> = done.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Ok(EpochSummary {
            epoch: self.epoch,
            steps: done.len(),
            faults: (self.faults - faults_before) as usize,
            l_d: mean(&|s| s.l_d),
            l_g: mean(&|s| s.l_g),
            l_val: mean(&|s| Some(s.l_val)).unwrap_or(f64::NAN),
            l_act: mean(&|s| s.l_act),
            fake_score: mean(&|s| s.fake_score),
        })
    }
}

/// Writes `step,l_d,l_g,l_val,l_act`; absent losses are empty fields.
pub fn write_loss_csv(path: &Path, history: &[StepLosses]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "l_d", "l_g", "l_val", "l_act"])?;
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for s in history {
        w.write_record([s.step.to_string(), cell(s.l_d), cell(s.l_g), s.l_val.to_string(), cell(s.l_act)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
