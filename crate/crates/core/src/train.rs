//! Alternating discriminator/generator training, AdamW, checkpoints and
//! ablation presets.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::adversarial::{
    critic_features, discriminator_loss, feature_matching_loss, generator_adv_loss, gradient_penalty,
    gradient_penalty_with_grad, patch_mask, perceptual_loss, reconstruction_loss, total_generator_loss, Critic,
    Discriminator, DiscriminatorConfig, FeatureExtractor, GeneratorTerms, LossWeights, PerceptualMode,
};
use crate::checkpoint;
use crate::data::{list_split, ScenePair, Split};
use crate::error::{ensure, Error, Result};
use crate::fourier::MixerVariant;
use crate::generator::{masked_input, Generator, GeneratorConfig};
use crate::graph::Graph;
use crate::masks::{sample_training_mask, MaskKind, TrainMaskConfig};
use crate::metrics::{evaluate, EvalGrid, EvalOptions, MetricsReport};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DATA_ROOT_ENV: &str = "WFM_DATA_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm bound; off when absent.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr_g: 1e-3,
            lr_d: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptualConfig {
    pub mode: PerceptualMode,
    /// Weight file for `hrf`.
    pub weights: Option<PathBuf>,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self {
            mode: PerceptualMode::Hrf,
            weights: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Falls back to `$WFM_DATA_ROOT`.
    pub root: Option<PathBuf>,
    /// Validation corpus; defaults to the val split of `root`.
    pub val_root: Option<PathBuf>,
    pub lighting: String,
    pub val_scenes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            val_root: None,
            lighting: "raw".into(),
            val_scenes: 16,
        }
    }
}

impl DataConfig {
    pub fn resolve_root(&self) -> Result<PathBuf> {
        if let Some(r) = &self.root {
            return Ok(r.clone());
        }
        std::env::var_os(DATA_ROOT_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config(format!("data.root is not set and ${DATA_ROOT_ENV} is empty")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateOrder {
    DThenG,
    GThenD,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub height: usize,
    pub width: usize,
    pub epochs: usize,
    pub batch: usize,
    /// Stop early after this many steps.
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub order: UpdateOrder,
    pub log_every: u64,
    pub output_dir: PathBuf,
    pub optimizer: OptimizerConfig,
    pub loss: LossWeights,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub perceptual: PerceptualConfig,
    pub masks: TrainMaskConfig,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            height: 256,
            width: 512,
            epochs: 40,
            batch: 6,
            max_steps: None,
            seed: 0,
            order: UpdateOrder::DThenG,
            log_every: 50,
            output_dir: PathBuf::from("runs/wfm"),
            optimizer: OptimizerConfig::default(),
            loss: LossWeights::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            perceptual: PerceptualConfig::default(),
            masks: TrainMaskConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    /// CPU-sized run on toy rooms.
    pub fn desk() -> Self {
        Self {
            height: 64,
            width: 128,
            epochs: 2,
            batch: 2,
            log_every: 10,
            output_dir: PathBuf::from("runs/desk"),
            generator: GeneratorConfig::toy(16, 1),
            discriminator: DiscriminatorConfig { channels: 16, layers: 3 },
            perceptual: PerceptualConfig {
                mode: PerceptualMode::Desk,
                weights: None,
            },
            data: DataConfig {
                val_scenes: 8,
                ..DataConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&s)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        for (name, v) in [("lr_g", o.lr_g), ("lr_d", o.lr_d)] {
            ensure!(v.is_finite() && v >= 0.0, Config, "optimizer.{name} must be finite and >= 0, got {v}");
        }
        ensure!(
            (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2),
            Config,
            "optimizer betas must lie in [0, 1)"
        );
        ensure!(o.eps > 0.0 && o.weight_decay >= 0.0, Config, "optimizer eps/weight_decay out of range");
        if let Some(c) = o.grad_clip {
            ensure!(c > 0.0, Config, "optimizer.grad_clip must be positive");
        }
        ensure!(self.batch >= 1 && self.epochs >= 1, Config, "batch and epochs must be >= 1");
        self.loss.validate()?;
        self.masks.validate()?;
        self.generator.validate()?;
        self.generator.check_dims(self.height, self.width)?;
        ensure!(
            self.discriminator.layers >= 1 && self.discriminator.channels >= 1,
            Config,
            "discriminator needs at least one layer and channel"
        );
        let min = 1usize << self.discriminator.layers;
        ensure!(
            self.height >= min && self.width >= min,
            Config,
            "{}x{} images are too small for a {}-layer discriminator",
            self.height,
            self.width,
            self.discriminator.layers
        );
        Ok(())
    }
}

/// The six ablation rows.
pub const PRESETS: [&str; 6] = ["wfm", "fm_no_window", "ffc", "gated_conv", "wfm_2d", "wfm_lrfpl"];

/// Sets the single axis named by `name` on top of `cfg`.
pub fn apply_preset(cfg: &mut TrainConfig, name: &str) -> Result<()> {
    let mixer = match name {
        "wfm" | "wfm_lrfpl" => MixerVariant::Wfm,
        "fm_no_window" => MixerVariant::FmNoWindow,
        "ffc" => MixerVariant::Ffc,
        "gated_conv" => MixerVariant::GatedOnly,
        "wfm_2d" => MixerVariant::Wfm2d,
        _ => {
            return Err(Error::Config(format!(
                "unknown preset `{name}` (expected one of {})",
                PRESETS.join(", ")
            )))
        }
    };
    cfg.generator.mixer = mixer;
    if name == "wfm_lrfpl" {
        cfg.perceptual.mode = PerceptualMode::Lrf;
    }
    Ok(())
}

pub fn ablation_preset(name: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    apply_preset(&mut cfg, name)?;
    Ok(cfg)
}

/// AdamW with decoupled decay on `Weight` parameters only.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamW {
    pub fn new(ps: &ParamStore<f32>, lr: f64, cfg: &OptimizerConfig) -> Self {
        let zeros = || ps.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Self {
            lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, ps: &mut ParamStore<f32>, grads: &[Option<Tensor<f32>>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let id = crate::params::ParamId(i);
            let decay = if ps.entry(id).kind.decays() { self.weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = ps.value_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j] as f64;
                let mj = self.beta1 * m[j] as f64 + (1.0 - self.beta1) * gj;
                let vj = self.beta2 * v[j] as f64 + (1.0 - self.beta2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = (mj / bc1) / ((vj / bc2).sqrt() + self.eps) + decay * p[j] as f64;
                p[j] = (p[j] as f64 - self.lr * update) as f32;
            }
        }
    }
}

fn clip_gradients(grads: &mut [Option<Tensor<f32>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

/// The seven logged loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepScalars {
    pub g_rec: f64,
    pub g_perc: f64,
    pub g_adv: f64,
    pub g_fm: f64,
    pub g_total: f64,
    pub d_adv: f64,
    pub d_gp: f64,
}

impl StepScalars {
    pub const NAMES: [&'static str; 7] = ["g_rec", "g_perc", "g_adv", "g_fm", "g_total", "d_adv", "d_gp"];

    pub fn values(&self) -> [f64; 7] {
        [
            self.g_rec,
            self.g_perc,
            self.g_adv,
            self.g_fm,
            self.g_total,
            self.d_adv,
            self.d_gp,
        ]
    }
}

/// Stacked images with their hole masks.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor<f32>,
    pub m: Tensor<f32>,
    pub ids: Vec<String>,
    pub kinds: Vec<MaskKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    #[serde(flatten)]
    pub scalars: StepScalars,
}

pub struct TrainState {
    pub config: TrainConfig,
    pub generator: Generator,
    pub gen_params: ParamStore<f32>,
    pub discriminator: Discriminator,
    pub disc_params: ParamStore<f32>,
    pub opt_g: AdamW,
    pub opt_d: AdamW,
    pub extractor: FeatureExtractor<f32>,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub epoch: usize,
    /// Scene order of the current epoch and the position within it.
    pub order: Vec<usize>,
    pub cursor: usize,
}

fn sub_seed(seed: u64, k: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(k);
    r.next_u64()
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (generator, gen_params) = Generator::new::<f32>(&config.generator, sub_seed(config.seed, 1))?;
        let (discriminator, disc_params) = Discriminator::new::<f32>(&config.discriminator, sub_seed(config.seed, 2))?;
        let extractor = FeatureExtractor::from_config(config.perceptual.mode, config.perceptual.weights.as_deref())?;
        let opt_g = AdamW::new(&gen_params, config.optimizer.lr_g, &config.optimizer);
        let opt_d = AdamW::new(&disc_params, config.optimizer.lr_d, &config.optimizer);
        let rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, 3));
        Ok(Self {
            config,
            generator,
            gen_params,
            discriminator,
            disc_params,
            opt_g,
            opt_d,
            extractor,
            rng,
            step: 0,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        })
    }

    /// Draws one training mask per pair from the state's rng.
    pub fn make_batch(&mut self, pairs: &[ScenePair]) -> Result<Batch> {
        ensure!(!pairs.is_empty(), Data, "empty batch");
        let (h, w) = (self.config.height, self.config.width);
        let mut xs = Vec::with_capacity(pairs.len());
        let mut ms = Vec::with_capacity(pairs.len());
        let mut kinds = Vec::with_capacity(pairs.len());
        for p in pairs {
            ensure!(
                p.empty.height() == h && p.empty.width() == w,
                Shape,
                "scene {} is {}x{}, training expects {h}x{w}",
                p.id,
                p.empty.height(),
                p.empty.width()
            );
            let (kind, m) = sample_training_mask(&self.config.masks, h, w, Some(&p.semantics), &mut self.rng)?;
            xs.push(p.empty.clone());
            ms.push(m);
            kinds.push(kind);
        }
        Ok(Batch {
            x: Tensor::stack(&xs)?,
            m: Tensor::stack(&ms)?,
            ids: pairs.iter().map(|p| p.id.clone()).collect(),
            kinds,
        })
    }

    pub fn train_step(&mut self, pairs: &[ScenePair]) -> Result<StepScalars> {
        let batch = self.make_batch(pairs)?;
        self.train_step_on(&batch)
    }

    /// One discriminator and one generator update on a fixed batch. Numerical
    /// failures carry the batch ids, mask kinds, step and rng state.
    pub fn train_step_on(&mut self, batch: &Batch) -> Result<StepScalars> {
        self.step_inner(batch).map_err(|e| match e {
            Error::Numerical(msg) => {
                let diag = json!({
                    "step": self.step,
                    "epoch": self.epoch,
                    "seed": self.config.seed,
                    "scenes": batch.ids,
                    "mask_kinds": batch.kinds,
                    "rng": rng_state(&self.rng),
                    "input_finite": batch.x.all_finite(),
                });
                Error::Numerical(format!("{msg}; batch {diag}"))
            }
            e => e,
        })
    }

    fn step_inner(&mut self, batch: &Batch) -> Result<StepScalars> {
        let mut s = StepScalars::default();
        let mut g = Graph::new();
        g.freeze(&self.disc_params);
        let xp = g.constant(masked_input(&batch.x, &batch.m)?);
        let fake = self.generator.forward(&mut g, &self.gen_params, xp)?;

        let d_grads = match self.config.order {
            UpdateOrder::DThenG => {
                let fake_t = g.value(fake).clone();
                Some(self.discriminator_grads(batch, &fake_t, &mut s)?)
            }
            UpdateOrder::GThenD => None,
        };
        if let Some(grads) = d_grads {
            check_finite(&s, "discriminator")?;
            self.apply_d(grads);
        }

        let rec = reconstruction_loss(&mut g, fake, &batch.x, &batch.m)?;
        let pf = self.extractor.features(&mut g, fake)?;
        let pr = self.extractor.features_of(&batch.x)?;
        let perc = perceptual_loss(&mut g, &pf, &pr)?;
        let (z, ff) = self.discriminator.critique(&mut g, &self.disc_params, fake)?;
        let adv = generator_adv_loss(&mut g, z)?;
        let rf = critic_features(&self.discriminator, &self.disc_params, &batch.x)?;
        let fm = feature_matching_loss(&mut g, &ff, &rf)?;
        let terms = GeneratorTerms { rec, perc, adv, fm };
        let total = total_generator_loss(&mut g, &terms, &self.config.loss)?;
        let scalar = |v| g.value(v).data()[0] as f64;
        (s.g_rec, s.g_perc, s.g_adv, s.g_fm, s.g_total) = (scalar(rec), scalar(perc), scalar(adv), scalar(fm), scalar(total));
        check_finite(&s, "generator")?;
        let mut grads = g.backward(total)?.params(&self.gen_params);
        if let Some(c) = self.config.optimizer.grad_clip {
            clip_gradients(&mut grads, c);
        }
        self.opt_g.step(&mut self.gen_params, &grads);

        if self.config.order == UpdateOrder::GThenD {
            let fake_t = self.generator.generate(&self.gen_params, &batch.x, &batch.m)?;
            let grads = self.discriminator_grads(batch, &fake_t, &mut s)?;
            check_finite(&s, "discriminator")?;
            self.apply_d(grads);
        }
        self.step += 1;
        Ok(s)
    }

    fn discriminator_grads(
        &self,
        batch: &Batch,
        fake: &Tensor<f32>,
        s: &mut StepScalars,
    ) -> Result<Vec<Option<Tensor<f32>>>> {
        let d = &self.discriminator;
        let ps = &self.disc_params;
        let mut g = Graph::new();
        let real = g.constant(batch.x.clone());
        let fk = g.constant(fake.clone());
        let (zr, _) = d.critique(&mut g, ps, real)?;
        let (zf, _) = d.critique(&mut g, ps, fk)?;
        let [_, _, hp, wp] = g.value(zr).shape();
        let mp = patch_mask(&batch.m, hp, wp);
        let l = discriminator_loss(&mut g, zr, zf, &mp)?;
        s.d_adv = g.value(l).data()[0] as f64;
        let mut grads = g.backward(l)?.params(ps);
        let w = self.config.loss.gp;
        if w > 0.0 {
            let (gp, gp_grads) = gradient_penalty_with_grad(d, ps, &batch.x)?;
            s.d_gp = gp;
            for (a, b) in grads.iter_mut().zip(gp_grads) {
                let Some(b) = b else { continue };
                let b = b.map(|v| v * w as f32);
                match a {
                    Some(a) => a.add_assign(&b),
                    None => *a = Some(b),
                }
            }
        } else {
            s.d_gp = gradient_penalty(d, ps, &batch.x)?;
        }
        Ok(grads)
    }

    fn apply_d(&mut self, mut grads: Vec<Option<Tensor<f32>>>) {
        if let Some(c) = self.config.optimizer.grad_clip {
            clip_gradients(&mut grads, c);
        }
        self.opt_d.step(&mut self.disc_params, &grads);
    }

    /// Inference with the current weights.
    pub fn inpaint(&self, x: &Tensor<f32>, m: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.generator.generate(&self.gen_params, x, m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (meta, tensors) = self.to_parts()?;
        let refs: Vec<(&str, &Tensor<f32>)> = tensors.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        checkpoint::write_container(path, &meta, &refs)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (meta, tensors) = self.to_parts()?;
        let refs: Vec<(&str, &Tensor<f32>)> = tensors.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        checkpoint::encode(&meta, &refs)
    }

    fn to_parts(&self) -> Result<(serde_json::Value, Vec<(String, &Tensor<f32>)>)> {
        let meta = json!({
            "format": "wfm-train",
            "config": serde_json::to_value(&self.config)?,
            "step": self.step,
            "epoch": self.epoch,
            "order": self.order,
            "cursor": self.cursor,
            "rng": rng_state(&self.rng),
            "opt_g_t": self.opt_g.t,
            "opt_d_t": self.opt_d.t,
        });
        let mut tensors = Vec::new();
        for (prefix, ps, opt) in [
            ("gen", &self.gen_params, &self.opt_g),
            ("disc", &self.disc_params, &self.opt_d),
        ] {
            for (i, e) in ps.entries().iter().enumerate() {
                tensors.push((format!("{prefix}/{}", e.name), &*e.value));
                tensors.push((format!("{prefix}.adam_m/{}", e.name), &opt.m[i]));
                tensors.push((format!("{prefix}.adam_v/{}", e.name), &opt.v[i]));
            }
        }
        Ok((meta, tensors))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = checkpoint::read_container(path)?;
        Self::from_parts(meta, tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, tensors) = checkpoint::decode(bytes)?;
        Self::from_parts(meta, tensors)
    }

    fn from_parts(meta: serde_json::Value, tensors: Vec<(String, Tensor<f32>)>) -> Result<Self> {
        ensure!(
            meta["format"] == "wfm-train",
            Checkpoint,
            "not a training checkpoint (format {})",
            meta["format"]
        );
        let config: TrainConfig = serde_json::from_value(meta["config"].clone())?;
        let mut st = Self::new(config)?;
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::Checkpoint(format!("missing `{k}`")));
        st.step = serde_json::from_value(field("step")?)?;
        st.epoch = serde_json::from_value(field("epoch")?)?;
        st.order = serde_json::from_value(field("order")?)?;
        st.cursor = serde_json::from_value(field("cursor")?)?;
        st.rng = restore_rng(&serde_json::from_value(field("rng")?)?)?;
        st.opt_g.t = serde_json::from_value(field("opt_g_t")?)?;
        st.opt_d.t = serde_json::from_value(field("opt_d_t")?)?;
        let mut seen = 0;
        for (name, t) in tensors {
            let (group, pname) = name
                .split_once('/')
                .ok_or_else(|| Error::Checkpoint(format!("bad tensor name `{name}`")))?;
            let (ps, opt) = match group.split('.').next() {
                Some("gen") => (&mut st.gen_params, &mut st.opt_g),
                Some("disc") => (&mut st.disc_params, &mut st.opt_d),
                _ => return Err(Error::Checkpoint(format!("unknown tensor group `{group}`"))),
            };
            let id = ps
                .find(pname)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint tensor `{name}` has no parameter")))?;
            ensure!(
                ps.value(id).shape() == t.shape(),
                Checkpoint,
                "`{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                ps.value(id).shape()
            );
            match group {
                "gen" | "disc" => *ps.value_mut(id) = t,
                g if g.ends_with(".adam_m") => opt.m[id.0] = t,
                g if g.ends_with(".adam_v") => opt.v[id.0] = t,
                _ => return Err(Error::Checkpoint(format!("unknown tensor group `{group}`"))),
            }
            seen += 1;
        }
        let expected = 3 * (st.gen_params.len() + st.disc_params.len());
        ensure!(seen == expected, Checkpoint, "checkpoint holds {seen} tensors, expected {expected}");
        Ok(st)
    }
}

fn check_finite(s: &StepScalars, phase: &str) -> Result<()> {
    if s.values().iter().all(|v| v.is_finite()) {
        return Ok(());
    }
    Err(Error::Numerical(format!(
        "non-finite {phase} loss: {}",
        serde_json::to_string(s).unwrap_or_default()
    )))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal `u128`.
    pub word_pos: String,
}

pub fn rng_state(r: &ChaCha8Rng) -> RngState {
    RngState {
        seed: r.get_seed(),
        stream: r.get_stream(),
        word_pos: r.get_word_pos().to_string(),
    }
}

pub fn restore_rng(s: &RngState) -> Result<ChaCha8Rng> {
    let mut r = ChaCha8Rng::from_seed(s.seed);
    r.set_stream(s.stream);
    let pos: u128 = s
        .word_pos
        .parse()
        .map_err(|_| Error::Checkpoint(format!("bad rng word position `{}`", s.word_pos)))?;
    r.set_word_pos(pos);
    Ok(r)
}

/// Generator config and weights from a training checkpoint.
pub fn load_generator(path: &Path) -> Result<(Generator, ParamStore<f32>, TrainConfig)> {
    let (meta, tensors) = checkpoint::read_container(path)?;
    ensure!(
        meta["format"] == "wfm-train",
        Checkpoint,
        "{} is not a training checkpoint",
        path.display()
    );
    let config: TrainConfig = serde_json::from_value(meta["config"].clone())?;
    let (generator, mut ps) = Generator::new::<f32>(&config.generator, 0)?;
    let mut seen = 0;
    for (name, t) in tensors {
        if let Some(p) = name.strip_prefix("gen/") {
            let id = ps
                .find(p)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint tensor `{name}` has no parameter")))?;
            ensure!(ps.value(id).shape() == t.shape(), Checkpoint, "`{name}` has the wrong shape");
            *ps.value_mut(id) = t;
            seen += 1;
        }
    }
    ensure!(seen == ps.len(), Checkpoint, "checkpoint holds {seen} generator tensors, expected {}", ps.len());
    Ok((generator, ps, config))
}

pub struct FitOutcome {
    pub state: TrainState,
    pub history: Vec<StepRecord>,
    pub validations: Vec<(usize, MetricsReport)>,
}

/// Runs (or resumes) training. Checkpoints go to `output_dir/epoch_NNN.wfm`
/// and `output_dir/last.wfm`; per-step scalars are appended to `log.jsonl`.
pub fn fit(config: TrainConfig, resume: Option<&Path>) -> Result<FitOutcome> {
    let mut state = match resume {
        Some(p) => {
            let mut s = TrainState::load(p)?;
            // run-control fields may change on resume; the model may not
            ensure!(
                s.config.generator == config.generator && s.config.discriminator == config.discriminator,
                Config,
                "resume config describes a different model than {}",
                p.display()
            );
            s.config.epochs = config.epochs;
            s.config.max_steps = config.max_steps;
            s.config.output_dir = config.output_dir.clone();
            s.config.data = config.data.clone();
            s.config.log_every = config.log_every;
            s
        }
        None => TrainState::new(config)?,
    };
    let cfg = state.config.clone();
    let root = cfg.data.resolve_root()?;
    let train = list_split(&root, Split::Train, &cfg.data.lighting)?;
    ensure!(!train.is_empty(), Data, "no training scenes under {}", root.display());
    let val_root = cfg.data.val_root.clone().unwrap_or_else(|| root.clone());
    let mut val = list_split(&val_root, Split::Val, &cfg.data.lighting)?;
    val.truncate(cfg.data.val_scenes);
    fs::create_dir_all(&cfg.output_dir)?;
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(cfg.output_dir.join("log.jsonl"))?;
    let (h, w) = (cfg.height, cfg.width);
    let mut history = Vec::new();
    let mut validations = Vec::new();
    log::info!(
        "training on {} scenes ({} val), generator {} params",
        train.len(),
        val.len(),
        state.gen_params.num_elements()
    );
    while state.epoch < cfg.epochs {
        if state.order.is_empty() {
            state.order = (0..train.len()).collect();
            state.order.shuffle(&mut state.rng);
            state.cursor = 0;
        }
        while state.cursor < state.order.len() {
            if cfg.max_steps.is_some_and(|m| state.step >= m) {
                state.save(&cfg.output_dir.join("last.wfm"))?;
                return Ok(FitOutcome {
                    state,
                    history,
                    validations,
                });
            }
            let end = (state.cursor + cfg.batch).min(state.order.len());
            let pairs = state.order[state.cursor..end]
                .iter()
                .map(|&i| train[i].load(h, w))
                .collect::<Result<Vec<_>>>()?;
            let scalars = match state.train_step(&pairs) {
                Ok(s) => s,
                Err(e @ Error::Numerical(_)) => {
                    let dump = cfg.output_dir.join(format!("nonfinite_step{}.txt", state.step));
                    fs::write(&dump, e.to_string())?;
                    log::error!("{e}; diagnostics written to {}", dump.display());
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            state.cursor = end;
            let rec = StepRecord {
                step: state.step,
                epoch: state.epoch,
                scalars,
            };
            writeln!(log, "{}", serde_json::to_string(&rec)?)?;
            if state.step % cfg.log_every.max(1) == 0 {
                log::info!(
                    "epoch {} step {}: {}",
                    state.epoch,
                    state.step,
                    StepScalars::NAMES
                        .iter()
                        .zip(scalars.values())
                        .map(|(n, v)| format!("{n}={v:.4}"))
                        .collect::<Vec<_>>()
                        .join(" ")
                );
            }
            history.push(rec);
        }
        if !val.is_empty() {
            let model = |x: &Tensor<f32>, m: &Tensor<f32>| state.inpaint(x, m);
            let report = evaluate(
                &model,
                val.iter().map(|e| e.load(h, w)),
                &EvalGrid::mini(),
                EvalOptions::default(),
            )?;
            for c in &report.cells {
                log::info!(
                    "val epoch {} {} {}: mae {:.4} psnr {:.2} ssim {:.4}",
                    state.epoch,
                    c.kind,
                    c.interval.label(),
                    c.mae,
                    c.psnr,
                    c.ssim
                );
            }
            validations.push((state.epoch, report));
        } else {
            log::warn!("no validation scenes; skipping validation");
        }
        state.epoch += 1;
        state.order.clear();
        state.cursor = 0;
        state.save(&cfg.output_dir.join(format!("epoch_{:03}.wfm", state.epoch)))?;
        state.save(&cfg.output_dir.join("last.wfm"))?;
    }
    Ok(FitOutcome {
        state,
        history,
        validations,
    })
}

/// FNV-1a over every parameter's bytes.
pub fn fingerprint(ps: &ParamStore<f32>) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for e in ps.entries() {
        for v in e.value.data() {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_cover_the_six_rows() {
        for p in PRESETS {
            ablation_preset(p).unwrap();
        }
        assert!(matches!(ablation_preset("nope"), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(TrainConfig::from_toml("epochs = 1\nbogus = 2\n").is_err());
        assert!(TrainConfig::from_toml("[optimizer]\nlr = 1.0\n").is_err());
        let cfg = TrainConfig::from_toml("epochs = 3\n[generator]\nchannels = 32\n").unwrap();
        assert_eq!((cfg.epochs, cfg.generator.channels), (3, 32));
    }

    #[test]
    fn toml_round_trip() {
        let cfg = TrainConfig::desk();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn rng_state_round_trip() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..7 {
            r.next_u32();
        }
        let mut s = restore_rng(&rng_state(&r)).unwrap();
        assert_eq!(r.next_u64(), s.next_u64());
    }
}
