//! Joint training of the reconstruction and classification sub-networks.
//!
//! Each step corrupts the realistic image twice (one copy per sub-network),
//! reconstructs the mask from the first copy, feeds the second copy
//! concatenated with the reconstruction to the classifier, and
//! backpropagates the weighted total loss through both networks at once.

pub mod checkpoint;
pub mod metrics;
pub mod optim;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::CameraMode;
use crate::error::{Error, Result};
use crate::generative::{loss_enc_tape, loss_gen_tape, sample_latent, GenerativeConfig, GenerativeModel, LatentVars};
use crate::losses::{build_triplet_sets, multi_triplet_tape, softmax_tape, LossWeights, Stage, TripletLabel};
use crate::nn::Parameterized;
use crate::noise::{corrupt_with, noise_field, NoiseState, DEFAULT_ALPHA, DEFAULT_BETA};
use crate::render::{read_dataset, seed_mix, Modes, SamplePair, Split};
use crate::tensor::{Tape, Tensor, Var};
use crate::zigzag::{ClassifierConfig, ClassifierOutput, ZigzagClassifier};

use checkpoint::{decode_tensors_into, encode_tensors, Reader, Sections};
pub use metrics::{windowed_mean, MetricsWriter, StepMetrics, METRICS_HEADER};
pub use optim::{Optimizer, OptimizerKind};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

const INIT_STREAM: u64 = 0x1417;
const TRAIN_STREAM: u64 = 0x7a11;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub weights: LossWeights,
    pub alpha: f64,
    pub beta: f64,
    /// `false` runs the fixed-noise baseline.
    pub adaptive_noise: bool,
    /// Extra checkpoint cadence in steps; 0 saves only at stage ends.
    pub checkpoint_every: u64,
    /// Rescales the joint gradient to at most this L2 norm.
    pub grad_clip: Option<f64>,
    /// Camera modes used by the fine-tuning stage.
    pub finetune_modes: Modes,
    pub generative: GenerativeConfig,
    pub classifier: ClassifierConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 32,
            learning_rate: 0.01,
            optimizer: OptimizerKind::SgdMomentum,
            momentum: 0.9,
            pretrain_epochs: 30,
            finetune_epochs: 10,
            weights: LossWeights::default(),
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            adaptive_noise: true,
            checkpoint_every: 0,
            grad_clip: Some(5.0),
            finetune_modes: Modes::Both,
            generative: GenerativeConfig::default(),
            classifier: ClassifierConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 5 {
            return Err(Error::invalid(format!(
                "batch size {} cannot hold a five-sample triplet set",
                self.batch_size
            )));
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::invalid(format!("gradient clip {c} must be positive")));
            }
        }
        if self.classifier.classes < 2 {
            return Err(Error::invalid("training needs at least 2 classes"));
        }
        self.weights.validate()?;
        self.generative.validate()?;
        NoiseState::new(self.alpha, self.beta)?;
        Optimizer::new(self.optimizer, self.learning_rate, self.momentum, &[])?;
        Ok(())
    }

    pub fn resolution(&self) -> usize {
        self.generative.resolution
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Both sub-networks.
#[derive(Clone, Debug, PartialEq)]
pub struct ConjugateModel {
    pub generative: GenerativeModel,
    pub classifier: ZigzagClassifier,
}

/// Tape handles for one joint forward pass.
pub struct JointForward {
    pub latent: LatentVars,
    pub mask: Var,
    pub output: ClassifierOutput,
    pub generator_params: Vec<Var>,
    pub classifier_params: Vec<Var>,
}

/// Test-time outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub mask: Tensor,
    pub descriptor: Vec<f64>,
    pub logits: Vec<f64>,
}

impl ConjugateModel {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_mix(config.seed, INIT_STREAM));
        Ok(Self {
            generative: GenerativeModel::new(config.generative.clone(), &mut rng)?,
            classifier: ZigzagClassifier::new(config.classifier.clone(), &mut rng)?,
        })
    }

    pub fn resolution(&self) -> usize {
        self.generative.config.resolution
    }

    pub fn classes(&self) -> usize {
        self.classifier.config.classes
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.generative.params_mut();
        v.extend(self.classifier.params_mut());
        v
    }

    fn param_sizes(&self) -> Vec<usize> {
        self.generative
            .params()
            .into_iter()
            .chain(self.classifier.params())
            .map(Tensor::numel)
            .collect()
    }

    /// Records `cls(concat(x_cls, gen(z)))` with `z = mu(x_rec) + sd * eps`.
    pub fn forward(&self, tape: &mut Tape, x_rec: Var, x_cls: Var, eps: &Tensor) -> Result<JointForward> {
        let generator_params = self.generative.bind_params(tape);
        let gv = self.generative.bind_with(&generator_params)?;
        let classifier_params = self.classifier.bind_params(tape);
        let cv = self.classifier.bind_with(&classifier_params)?;
        let latent = self.generative.encode(tape, &gv, x_rec)?;
        let z = sample_latent(tape, latent, eps)?;
        let mask = self.generative.generate(tape, &gv, z)?;
        let x6 = tape.concat_channels(x_cls, mask)?;
        let output = self.classifier.forward(tape, &cv, x6)?;
        Ok(JointForward {
            latent,
            mask,
            output,
            generator_params,
            classifier_params,
        })
    }

    /// Uncorrupted forward with the latent at the posterior mean.
    pub fn infer(&self, images: &[&Tensor]) -> Result<Vec<Inference>> {
        let s = self.resolution();
        if let Some(bad) = images.iter().find(|t| t.shape() != [3, s, s]) {
            return Err(Error::ShapeMismatch {
                op: "infer",
                left: bad.shape().to_vec(),
                right: vec![3, s, s],
            });
        }
        let n = images.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        let data: Vec<f64> = images.iter().flat_map(|t| t.data().iter().copied()).collect();
        let mut tape = Tape::new();
        let x = tape.constant_raw(vec![n, 3, s, s], data)?;
        let eps = Tensor::zeros(&[n, self.generative.config.latent]);
        let f = self.forward(&mut tape, x, x, &eps)?;
        let d = self.classifier.config.descriptor_len();
        let k = self.classes();
        let masks = tape.value(f.mask);
        let desc = tape.value(f.output.descriptor);
        let logits = tape.value(f.output.logits);
        Ok((0..n)
            .map(|i| Inference {
                mask: Tensor::new(vec![3, s, s], masks[i * 3 * s * s..(i + 1) * 3 * s * s].to_vec())
                    .expect("mask shape"),
                descriptor: desc[i * d..(i + 1) * d].to_vec(),
                logits: logits[i * k..(i + 1) * k].to_vec(),
            })
            .collect())
    }

    /// [`ConjugateModel::infer`] in fixed-size chunks.
    pub fn infer_all(&self, images: &[&Tensor], chunk: usize) -> Result<Vec<Inference>> {
        let mut out = Vec::with_capacity(images.len());
        for c in images.chunks(chunk.max(1)) {
            out.extend(self.infer(c)?);
        }
        Ok(out)
    }
}

/// Training pools drawn from the train split.
pub struct TrainData<'a> {
    pub pretrain: Vec<&'a SamplePair>,
    pub finetune: Vec<&'a SamplePair>,
}

impl<'a> TrainData<'a> {
    pub fn new(pairs: &'a [SamplePair], config: &TrainConfig) -> Result<Self> {
        let s = config.resolution();
        let k = config.classifier.classes;
        let train: Vec<&SamplePair> = pairs.iter().filter(|p| p.split == Split::Train).collect();
        for p in &train {
            if p.resolution() != s {
                return Err(Error::invalid(format!(
                    "dataset resolution {} does not match model resolution {s}",
                    p.resolution()
                )));
            }
            if p.category >= k {
                return Err(Error::invalid(format!(
                    "dataset category {} does not fit a {k}-class model",
                    p.category
                )));
            }
        }
        let pretrain: Vec<_> = train
            .iter()
            .copied()
            .filter(|p| p.mode == CameraMode::Centered)
            .collect();
        let modes = config.finetune_modes.list();
        let finetune: Vec<_> = train.iter().copied().filter(|p| modes.contains(&p.mode)).collect();
        if config.pretrain_epochs > 0 && pretrain.is_empty() {
            return Err(Error::invalid("dataset has no centered training samples for stage 1"));
        }
        if config.finetune_epochs > 0 {
            for m in modes {
                if !finetune.iter().any(|p| p.mode == m) {
                    return Err(Error::invalid(format!(
                        "dataset has no {} training samples for stage 2",
                        m.as_str()
                    )));
                }
            }
        }
        Ok(Self { pretrain, finetune })
    }

    fn pool(&self, stage: Stage) -> &[&'a SamplePair] {
        match stage {
            Stage::Pretrain => &self.pretrain,
            Stage::Finetune => &self.finetune,
        }
    }
}

/// Step counts per stage for a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub batch_size: usize,
    pub pretrain_batches: usize,
    pub finetune_batches: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
}

impl Schedule {
    pub fn new(config: &TrainConfig, data: &TrainData<'_>) -> Self {
        let per_epoch = |n: usize| if n == 0 { 0 } else { (n / config.batch_size).max(1) };
        Self {
            batch_size: config.batch_size,
            pretrain_batches: per_epoch(data.pretrain.len()),
            finetune_batches: per_epoch(data.finetune.len()),
            pretrain_epochs: config.pretrain_epochs,
            finetune_epochs: config.finetune_epochs,
        }
    }

    pub fn pretrain_steps(&self) -> u64 {
        (self.pretrain_batches * self.pretrain_epochs) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.pretrain_steps() + (self.finetune_batches * self.finetune_epochs) as u64
    }

    /// `(stage, epoch, batch)` for the 0-based step index.
    pub fn locate(&self, step: u64) -> Option<(Stage, usize, usize)> {
        if step >= self.total_steps() {
            return None;
        }
        let (stage, local, per) = if step < self.pretrain_steps() {
            (Stage::Pretrain, step, self.pretrain_batches)
        } else {
            (Stage::Finetune, step - self.pretrain_steps(), self.finetune_batches)
        };
        let local = local as usize;
        Some((stage, local / per, local % per))
    }
}

fn epoch_order(seed: u64, stage: Stage, epoch: usize, n: usize) -> Vec<usize> {
    let tag = (u64::from(stage.number()) << 40) | epoch as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed_mix(seed, tag));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: ConjugateModel,
    pub optimizer: Optimizer,
    pub noise: NoiseState,
    rng: ChaCha8Rng,
    step: u64,
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub metrics_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
    /// Stop after this many further steps.
    pub max_steps: Option<u64>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = ConjugateModel::new(&config)?;
        let optimizer = Optimizer::new(
            config.optimizer,
            config.learning_rate,
            config.momentum,
            &model.param_sizes(),
        )?;
        let noise = if config.adaptive_noise {
            NoiseState::new(config.alpha, config.beta)?
        } else {
            fixed_noise(&config)?
        };
        let rng = ChaCha8Rng::seed_from_u64(seed_mix(config.seed, TRAIN_STREAM));
        Ok(Self {
            config,
            model,
            optimizer,
            noise,
            rng,
            step: 0,
        })
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// One joint update on `batch`.
    pub fn train_step(&mut self, batch: &[&SamplePair], stage: Stage) -> Result<StepMetrics> {
        let n = batch.len();
        let s = self.config.resolution();
        if n == 0 {
            return Err(Error::invalid("empty training batch"));
        }
        if let Some(p) = batch.iter().find(|p| p.resolution() != s) {
            return Err(Error::ShapeMismatch {
                op: "train_step",
                left: p.o.shape().to_vec(),
                right: vec![3, s, s],
            });
        }
        let noise = self.noise;
        let plane = 3 * s * s;
        let mut o_rec = Vec::with_capacity(n * plane);
        let mut o_cls = Vec::with_capacity(n * plane);
        let mut m_true = Vec::with_capacity(n * plane);
        for p in batch {
            let f_rec = noise_field(&p.o, &mut self.rng);
            let f_cls = noise_field(&p.o, &mut self.rng);
            o_rec.extend_from_slice(corrupt_with(&p.o, noise.r_rec, &f_rec)?.data());
            o_cls.extend_from_slice(corrupt_with(&p.o, noise.r_cls, &f_cls)?.data());
            m_true.extend_from_slice(p.m.data());
        }
        let k = self.config.generative.latent;
        let eps: Vec<f64> = (0..n * k).map(|_| StandardNormal.sample(&mut self.rng)).collect();
        let eps = Tensor::new(vec![n, k], eps)?;

        let labels: Vec<TripletLabel> = batch
            .iter()
            .map(|p| TripletLabel {
                category: p.category,
                pose: p.pose,
                light: p.light,
            })
            .collect();
        let sets = match (build_triplet_sets(&labels, &mut self.rng), stage) {
            (Ok(sets), _) => sets,
            (Err(e), Stage::Pretrain) => return Err(e),
            (Err(_), Stage::Finetune) => Vec::new(),
        };

        let w = self.config.weights;
        let sigma = self.config.generative.sigma;
        let mut tape = Tape::new();
        let x_rec = tape.constant_raw(vec![n, 3, s, s], o_rec)?;
        let x_cls = tape.constant_raw(vec![n, 3, s, s], o_cls)?;
        let target = tape.constant_raw(vec![n, 3, s, s], m_true)?;
        let f = self.model.forward(&mut tape, x_rec, x_cls, &eps)?;

        // Reconstruction terms are reported per output value.
        let values = (n * plane) as f64;
        let kl = loss_enc_tape(&mut tape, f.latent)?;
        let kl = tape.scale(kl, 1.0 / values)?;
        let gen = loss_gen_tape(&mut tape, f.mask, target, sigma)?;
        let gen = tape.scale(gen, 1.0 / values)?;
        let enc_gen = tape.add(kl, gen)?;
        let mut total = tape.scale(enc_gen, w.w_encgen)?;
        let (mut pair_v, mut tri_v) = (0.0, 0.0);
        if !sets.is_empty() {
            let (pair, tri) = multi_triplet_tape(&mut tape, f.output.descriptor, &sets, w.m_tri, sets.len() as f64)?;
            pair_v = tape.scalar_value(pair);
            tri_v = tape.scalar_value(tri);
            let wp = tape.scale(pair, w.w_pair)?;
            let wt = tape.scale(tri, w.w_tri)?;
            total = tape.add(total, wp)?;
            total = tape.add(total, wt)?;
        }
        let mut softmax_v = None;
        if stage == Stage::Finetune {
            let cats: Vec<usize> = batch.iter().map(|p| p.category).collect();
            let sm = softmax_tape(&mut tape, f.output.logits, &cats)?;
            softmax_v = Some(tape.scalar_value(sm));
            let ws = tape.scale(sm, w.w_softmax)?;
            total = tape.add(total, ws)?;
        }

        let loss_total = tape.scalar_value(total);
        let loss_enc = tape.scalar_value(kl);
        let loss_gen = tape.scalar_value(gen);
        let step_no = self.step + 1;
        if !loss_total.is_finite() {
            return Err(Error::NonFinite(format!(
                "step {step_no} stage {}: total {loss_total}, enc {loss_enc}, gen {loss_gen}, \
                 pair {pair_v}, tri {tri_v}, softmax {softmax_v:?}, r_rec {}, r_cls {}",
                stage.number(),
                noise.r_rec,
                noise.r_cls
            )));
        }
        let generated = tape.to_tensor(f.mask);
        let target_t = tape.to_tensor(target);
        let mask_mse = loss_gen * 2.0 * sigma * sigma;

        let mut grads = tape.backward(total)?;
        let mut all: Vec<Vec<f64>> = Vec::new();
        let mut norms = [0.0f64; 2];
        for (slot, vars) in [&f.generator_params, &f.classifier_params].into_iter().enumerate() {
            for v in vars {
                let g = grads.take(*v).unwrap_or_else(|| vec![0.0; 0]);
                norms[slot] += g.iter().map(|x| x * x).sum::<f64>();
                all.push(g);
            }
        }
        let sizes = self.model.param_sizes();
        for (g, size) in all.iter_mut().zip(&sizes) {
            if g.is_empty() {
                *g = vec![0.0; *size];
            }
        }
        let joint = (norms[0] + norms[1]).sqrt();
        if let Some(clip) = self.config.grad_clip {
            if joint > clip {
                let c = clip / joint;
                all.iter_mut().flatten().for_each(|x| *x *= c);
            }
        }
        self.optimizer.step(self.model.params_mut(), &all)?;

        if self.config.adaptive_noise {
            self.noise = self.noise.update_ratios(&[&generated], &[&target_t])?;
        }
        self.step = step_no;
        Ok(StepMetrics {
            step: step_no,
            stage,
            loss_total,
            loss_enc,
            loss_gen,
            loss_pair: pair_v,
            loss_tri: tri_v,
            loss_softmax: softmax_v,
            var_ratio: noise.var_ratio,
            r_rec: noise.r_rec,
            r_cls: noise.r_cls,
            mask_mse,
            generator_grad_norm: norms[0].sqrt(),
            classifier_grad_norm: norms[1].sqrt(),
            triplet_sets: sets.len(),
        })
    }

    /// Runs the remaining schedule from the current step.
    pub fn run(&mut self, data: &TrainData<'_>, opts: &RunOptions) -> Result<Vec<StepMetrics>> {
        let schedule = Schedule::new(&self.config, data);
        let mut writer = match &opts.metrics_path {
            Some(p) if self.step == 0 => Some(MetricsWriter::create(p)?),
            Some(p) => Some(MetricsWriter::resume(p, self.step)?),
            None => None,
        };
        let stop = opts.max_steps.map(|m| self.step + m);
        let mut out = Vec::new();
        let mut order: Option<((Stage, usize), Vec<usize>)> = None;
        while let Some((stage, epoch, b)) = schedule.locate(self.step) {
            if stop.is_some_and(|s| self.step >= s) {
                break;
            }
            let pool = data.pool(stage);
            if order.as_ref().map(|(key, _)| *key) != Some((stage, epoch)) {
                order = Some(((stage, epoch), epoch_order(self.config.seed, stage, epoch, pool.len())));
            }
            let idx = &order.as_ref().expect("order set").1;
            let size = self.config.batch_size.min(pool.len());
            let batch: Vec<&SamplePair> = idx[b * size..(b + 1) * size].iter().map(|i| pool[*i]).collect();
            let m = self.train_step(&batch, stage)?;
            if let Some(w) = writer.as_mut() {
                w.write(&m)?;
            }
            out.push(m);
            let boundary = self.step == schedule.pretrain_steps() || self.step == schedule.total_steps();
            let periodic = self.config.checkpoint_every > 0 && self.step.is_multiple_of(self.config.checkpoint_every);
            if let Some(path) = &opts.checkpoint_path {
                if boundary || periodic {
                    if let Some(w) = writer.as_mut() {
                        w.flush()?;
                    }
                    self.save(path)?;
                }
            }
        }
        if let Some(w) = writer.as_mut() {
            w.flush()?;
        }
        Ok(out)
    }

    pub fn to_sections(&self) -> Sections {
        let mut s = Sections::new();
        let g = &self.model.generative;
        let c = &self.model.classifier;
        s.insert("generative", encode_tensors(&g.param_names(), &g.params()));
        s.insert("classifier", encode_tensors(&c.param_names(), &c.params()));
        s.insert("optimizer", self.optimizer.to_bytes());
        let n = self.noise;
        let mut noise = Vec::new();
        for v in [n.alpha, n.beta, n.m_noise, n.var_ratio, n.r_rec, n.r_cls] {
            noise.extend_from_slice(&v.to_le_bytes());
        }
        s.insert("noise", noise);
        let mut rng = Vec::new();
        rng.extend_from_slice(&self.rng.get_seed());
        rng.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        rng.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        s.insert("rng", rng);
        s.insert("config_hash", self.config.hash().into_bytes());
        s.insert("config", serde_json::to_vec(&self.config).expect("config serializes"));
        s.insert("state", self.step.to_le_bytes().to_vec());
        s
    }

    pub fn from_sections(s: &Sections) -> Result<Self> {
        let config: TrainConfig = serde_json::from_slice(s.get("config")?)?;
        let stored_hash = String::from_utf8_lossy(s.get("config_hash")?).into_owned();
        if stored_hash != config.hash() {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: stored {stored_hash}, computed {}",
                config.hash()
            )));
        }
        let mut t = Self::new(config)?;
        let g = &mut t.model.generative;
        let names = g.param_names();
        decode_tensors_into("generative", s.get("generative")?, &names, g.params_mut())?;
        let c = &mut t.model.classifier;
        let names = c.param_names();
        decode_tensors_into("classifier", s.get("classifier")?, &names, c.params_mut())?;
        t.optimizer.restore(s.get("optimizer")?)?;
        let mut r = Reader::new(s.get("noise")?);
        t.noise = NoiseState {
            alpha: r.f64()?,
            beta: r.f64()?,
            m_noise: r.f64()?,
            var_ratio: r.f64()?,
            r_rec: r.f64()?,
            r_cls: r.f64()?,
        };
        r.finish()?;
        let mut r = Reader::new(s.get("rng")?);
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(r.u64()?);
        rng.set_word_pos(r.u128()?);
        r.finish()?;
        t.rng = rng;
        let mut r = Reader::new(s.get("state")?);
        t.step = r.u64()?;
        r.finish()?;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_sections().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_sections(&Sections::load(path)?)
    }

    /// Overrides the stage lengths of a loaded run (the config hash is
    /// recomputed on the next save).
    pub fn set_epochs(&mut self, pretrain: Option<usize>, finetune: Option<usize>) {
        if let Some(p) = pretrain {
            self.config.pretrain_epochs = p;
        }
        if let Some(f) = finetune {
            self.config.finetune_epochs = f;
        }
    }
}

/// Constant ratios for the fixed-noise baseline: the adaptive law evaluated
/// at a variance ratio of one.
pub fn fixed_noise(config: &TrainConfig) -> Result<NoiseState> {
    NoiseState::from_ratio(config.alpha, config.beta, 1.0)
}

/// Summary of a finished [`run_training`] call.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub steps: u64,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub metrics: Vec<StepMetrics>,
}

/// Trains from a dataset directory into `out_dir`, writing `metrics.csv` and
/// `checkpoint.bin`.
pub fn run_training(config: TrainConfig, dataset_dir: &Path, out_dir: &Path) -> Result<RunSummary> {
    let trainer = Trainer::new(config)?;
    continue_training(trainer, dataset_dir, out_dir)
}

/// Continues a (possibly resumed) trainer; metrics rows past the trainer's
/// step are discarded before appending.
pub fn continue_training(mut trainer: Trainer, dataset_dir: &Path, out_dir: &Path) -> Result<RunSummary> {
    let pairs = read_dataset(dataset_dir)?;
    if pairs.is_empty() {
        return Err(Error::invalid(format!("dataset {} is empty", dataset_dir.display())));
    }
    let data = TrainData::new(&pairs, &trainer.config)?;
    std::fs::create_dir_all(out_dir)?;
    let opts = RunOptions {
        metrics_path: Some(out_dir.join(METRICS_FILE)),
        checkpoint_path: Some(out_dir.join(CHECKPOINT_FILE)),
        max_steps: None,
    };
    let metrics = trainer.run(&data, &opts)?;
    let checkpoint_path = out_dir.join(CHECKPOINT_FILE);
    if !checkpoint_path.exists() {
        trainer.save(&checkpoint_path)?;
    }
    Ok(RunSummary {
        steps: trainer.step(),
        metrics_path: out_dir.join(METRICS_FILE),
        checkpoint_path,
        metrics,
    })
}

/// First step whose trailing-window mean of `series` is at or below `threshold`.
pub fn steps_to_threshold(series: &[f64], threshold: f64, window: usize) -> Option<usize> {
    windowed_mean(series, window)
        .iter()
        .position(|v| *v <= threshold)
        .map(|i| i + 1)
}
