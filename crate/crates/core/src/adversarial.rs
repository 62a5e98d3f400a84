//! Patch discriminator, frozen perceptual feature extractors and all loss terms.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::core_ops::ensure_finite;
use crate::error::{ensure, Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{self, ConvGeom};
use crate::layers::Conv;
use crate::params::{Init, ParamKind, ParamSink, ParamStore, StoreBuilder};
use crate::scalar::{Dual, Scalar};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Anything producing patch logits (and intermediate features) from an image.
pub trait Critic {
    fn critique<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<(Var, Vec<Var>)>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub channels: usize,
    pub layers: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            layers: 4,
        }
    }
}

/// Strided k4 convs with leaky activations, instance norm from the second
/// layer on, and a pointwise logit head.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub convs: Vec<Conv>,
    pub logit: Conv,
}

impl Discriminator {
    pub fn build(sink: &mut dyn ParamSink, config: &DiscriminatorConfig) -> Result<Self> {
        ensure!(
            config.layers >= 1 && config.channels >= 1,
            Config,
            "discriminator needs at least one layer and channel"
        );
        let mut convs = Vec::new();
        let mut cin = 3;
        for i in 0..config.layers {
            let cout = config.channels << i.min(3);
            convs.push(Conv::build(
                sink,
                &format!("disc.{i}"),
                cin,
                cout,
                ConvGeom::strided(4, 2),
                i == 0,
            ));
            cin = cout;
        }
        let logit = Conv::build(sink, "disc.logit", cin, 1, ConvGeom::same(1, 1), true);
        Ok(Self {
            config: config.clone(),
            convs,
            logit,
        })
    }

    pub fn new<T: Scalar>(config: &DiscriminatorConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Self::build(
            &mut StoreBuilder {
                store: &mut store,
                rng: &mut rng,
            },
            config,
        )?;
        Ok((d, store))
    }

    /// Logit grid size for an `h x w` image.
    pub fn logit_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let min = 1usize << self.convs.len();
        ensure!(
            h >= min && w >= min,
            Config,
            "image {h}x{w} too small for a {}-layer discriminator (needs at least {min})",
            self.convs.len()
        );
        let (mut h, mut w) = (h, w);
        for c in &self.convs {
            (h, w) = c.geom.output_dims(h, w)?;
        }
        Ok((h, w))
    }
}

impl Critic for Discriminator {
    fn critique<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<(Var, Vec<Var>)> {
        let [_, c, h, w] = g.value(x).shape();
        ensure!(c == 3, Config, "discriminator expects 3 channels, got {c}");
        self.logit_dims(h, w)?;
        let mut t = x;
        let mut feats = Vec::with_capacity(self.convs.len());
        for (i, conv) in self.convs.iter().enumerate() {
            t = conv.forward(g, ps, t)?;
            if i > 0 {
                t = g.instance_norm(t);
            }
            t = g.leaky_relu(t, LEAKY_SLOPE);
            feats.push(t);
        }
        let z = self.logit.forward(g, ps, t)?;
        Ok((z, feats))
    }
}

/// Patch logits of `img` on an inference tape.
pub fn discriminate<T: Scalar>(d: &Discriminator, ps: &ParamStore<T>, img: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_finite(img, "discriminator input")?;
    let mut g = Graph::inference();
    let x = g.constant(img.clone());
    let (z, _) = d.critique(&mut g, ps, x)?;
    Ok(g.value(z).clone())
}

/// Hole mask reduced to the logit grid: area average, then `>= 0.5`.
pub fn patch_mask<T: Scalar>(m: &Tensor<T>, hp: usize, wp: usize) -> Tensor<T> {
    kernels::area_resize(m, hp, wp).map(|v| if v.value() >= 0.5 { T::one() } else { T::zero() })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub rec: f64,
    pub perc: f64,
    pub adv: f64,
    pub gp: f64,
    pub fm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rec: 10.0,
            perc: 100.0,
            adv: 10.0,
            gp: 0.001,
            fm: 30.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rec", self.rec),
            ("perc", self.perc),
            ("adv", self.adv),
            ("gp", self.gp),
            ("fm", self.fm),
        ] {
            ensure!(
                v.is_finite() && v >= 0.0,
                Config,
                "loss weight {name} must be finite and nonnegative, got {v}"
            );
        }
        Ok(())
    }
}

/// Mean `|x - x_hat|` over the kept (`m = 0`) pixels of every channel.
pub fn reconstruction_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>, m: &Tensor<T>) -> Result<Var> {
    let [n, c, h, w] = target.shape();
    ensure!(m.shape() == [n, 1, h, w], Shape, "mask {:?} for image {:?}", m.shape(), target.shape());
    let keep = Tensor::from_fn([n, c, h, w], |b, _, y, x| T::one() - m.at(b, 0, y, x));
    g.masked_l1_mean(pred, target, &keep)
}

/// Mean over layers of the per-layer mean squared feature distance.
pub fn perceptual_loss<T: Scalar>(g: &mut Graph<T>, fake: &[Var], real: &[Tensor<T>]) -> Result<Var> {
    ensure!(!fake.is_empty(), Config, "perceptual loss needs at least one layer");
    let terms = layer_distances(g, fake, real)?;
    let k = 1.0 / terms.len() as f64;
    let weighted: Vec<(Var, f64)> = terms.into_iter().map(|t| (t, k)).collect();
    g.linear_combination(&weighted)
}

/// Sum over layers of the per-layer mean squared feature distance.
pub fn feature_matching_loss<T: Scalar>(g: &mut Graph<T>, fake: &[Var], real: &[Tensor<T>]) -> Result<Var> {
    ensure!(!fake.is_empty(), Config, "feature matching needs at least one layer");
    let terms = layer_distances(g, fake, real)?;
    let weighted: Vec<(Var, f64)> = terms.into_iter().map(|t| (t, 1.0)).collect();
    g.linear_combination(&weighted)
}

fn layer_distances<T: Scalar>(g: &mut Graph<T>, fake: &[Var], real: &[Tensor<T>]) -> Result<Vec<Var>> {
    ensure!(
        fake.len() == real.len(),
        Shape,
        "{} fake layers vs {} real layers",
        fake.len(),
        real.len()
    );
    fake.iter()
        .zip(real)
        .map(|(&f, r)| {
            let rv = g.constant(r.clone());
            g.mean_sq_diff(f, rv)
        })
        .collect()
}

/// Real patches are real; generated patches are fake only where `m_p = 1`.
/// Each expectation is normalized over its own support.
pub fn discriminator_loss<T: Scalar>(g: &mut Graph<T>, z_real: Var, z_fake: Var, m_p: &Tensor<T>) -> Result<Var> {
    let (sr, sf) = (g.value(z_real).shape(), g.value(z_fake).shape());
    ensure!(
        sr == sf && sf == m_p.shape(),
        Shape,
        "logit grids {sr:?} / {sf:?} vs patch mask {:?}",
        m_p.shape()
    );
    let ones = Tensor::full(sr, T::one());
    let keep = m_p.map(|v| T::one() - v);
    let real = g.softplus_weighted_mean(z_real, -1.0, &ones)?;
    let fake_kept = g.softplus_weighted_mean(z_fake, -1.0, &keep)?;
    let fake_hole = g.softplus_weighted_mean(z_fake, 1.0, m_p)?;
    g.linear_combination(&[(real, 1.0), (fake_kept, 1.0), (fake_hole, 1.0)])
}

/// Non-saturating `-mean(log sigmoid(z))` over all patches.
pub fn generator_adv_loss<T: Scalar>(g: &mut Graph<T>, z_fake: Var) -> Result<Var> {
    let ones = Tensor::full(g.value(z_fake).shape(), T::one());
    g.softplus_weighted_mean(z_fake, -1.0, &ones)
}

#[derive(Clone, Copy, Debug)]
pub struct GeneratorTerms {
    pub rec: Var,
    pub perc: Var,
    pub adv: Var,
    pub fm: Var,
}

pub fn total_generator_loss<T: Scalar>(g: &mut Graph<T>, t: &GeneratorTerms, w: &LossWeights) -> Result<Var> {
    g.linear_combination(&[(t.rec, w.rec), (t.perc, w.perc), (t.adv, w.adv), (t.fm, w.fm)])
}

/// `d sum(out) / d x`; needs a recording tape where `x` requires a gradient.
/// An output that does not depend on `x` yields zeros.
pub fn input_gradient<T: Scalar>(g: &mut Graph<T>, x: Var, out: Var) -> Result<Tensor<T>> {
    let s = g.sum_all(out);
    let grads = g.backward(s)?;
    ensure!(
        g.requires_grad(x),
        NoGradient,
        "input does not require a gradient"
    );
    Ok(grads
        .wrt(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(g.value(x).shape())))
}

/// R1 penalty: batch mean of `||d sum D(x) / dx||^2` on real images.
pub fn gradient_penalty<T: Scalar, C: Critic>(critic: &C, ps: &ParamStore<T>, x_real: &Tensor<T>) -> Result<f64> {
    Ok(penalty_and_input_grad(critic, ps, x_real)?.0)
}

fn penalty_and_input_grad<T: Scalar, C: Critic>(
    critic: &C,
    ps: &ParamStore<T>,
    x_real: &Tensor<T>,
) -> Result<(f64, Tensor<T>)> {
    let mut g = Graph::new();
    g.freeze(ps);
    let x = g.input(x_real.clone(), true);
    let (z, _) = critic.critique(&mut g, ps, x)?;
    let gx = input_gradient(&mut g, x, z)?;
    let n = x_real.batch();
    let sq: f64 = gx.data().iter().map(|v| v.value() * v.value()).sum();
    Ok((sq / n as f64, gx))
}

/// Penalty value and its exact gradient for every critic parameter.
///
/// The gradient is `2/B * H g` where `g` is the input gradient and `H` the
/// mixed parameter/input Hessian of `sum D`; `H g` is the tangent of the
/// parameter gradient when the input is pushed along `g` with dual numbers.
pub fn gradient_penalty_with_grad<T: Scalar, C: Critic>(
    critic: &C,
    ps: &ParamStore<T>,
    x_real: &Tensor<T>,
) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
    let (value, gx) = penalty_and_input_grad(critic, ps, x_real)?;
    let dual_ps: ParamStore<Dual<T>> = ps.map(Dual::constant);
    let mut g = Graph::<Dual<T>>::new();
    let xd = x_real.zip_map_into(&gx, Dual::new)?;
    let x = g.constant(xd);
    let (z, _) = critic.critique(&mut g, &dual_ps, x)?;
    let s = g.sum_all(z);
    let mut grads = g.backward(s)?;
    let k = T::from_f64(2.0 / x_real.batch() as f64);
    let out = grads
        .params(&dual_ps)
        .into_iter()
        .map(|t| {
            t.map(|t| {
                let data = t.data().iter().map(|v| v.d * k).collect();
                Tensor::new(t.shape(), data).expect("same shape")
            })
        })
        .collect();
    Ok((value, out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceptualMode {
    /// High receptive field: dilated stack with weights loaded from disk.
    Hrf,
    /// Low receptive field: shallow, non-dilated.
    Lrf,
    /// Fixed-seed frozen stand-in for the dilated stack.
    Desk,
}

pub const DESK_SEED: u64 = 0x5eed_f00d;

/// A frozen image → feature-list map.
#[derive(Debug)]
pub struct FeatureExtractor<T> {
    pub mode: PerceptualMode,
    pub convs: Vec<Conv>,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Clone for FeatureExtractor<T> {
    fn clone(&self) -> Self {
        Self {
            mode: self.mode,
            convs: self.convs.clone(),
            store: self.store.clone(),
        }
    }
}

struct Layer {
    cin: usize,
    cout: usize,
    geom: ConvGeom,
}

fn architecture(mode: PerceptualMode) -> Vec<Layer> {
    let l = |cin, cout, geom| Layer { cin, cout, geom };
    match mode {
        PerceptualMode::Hrf | PerceptualMode::Desk => vec![
            l(3, 16, ConvGeom::strided(3, 2)),
            l(16, 32, ConvGeom::same(3, 2)),
            l(32, 32, ConvGeom::same(3, 4)),
            l(32, 32, ConvGeom::same(3, 8)),
        ],
        PerceptualMode::Lrf => vec![l(3, 16, ConvGeom::strided(3, 2)), l(16, 32, ConvGeom::same(3, 1))],
    }
}

impl<T: Scalar> FeatureExtractor<T> {
    /// Randomly initialized (He-normal) extractor for `mode`.
    pub fn seeded(mode: PerceptualMode, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sink = StoreBuilder {
            store: &mut store,
            rng: &mut rng,
        };
        let convs = build_convs(&mut sink, mode);
        Self { mode, convs, store }
    }

    pub fn desk() -> Self {
        Self::seeded(PerceptualMode::Desk, DESK_SEED)
    }

    /// Resolves a configured mode. `Hrf` reads `weights`; without a file it
    /// logs a warning and falls back to the desk stand-in.
    pub fn from_config(mode: PerceptualMode, weights: Option<&Path>) -> Result<Self> {
        match (mode, weights) {
            (PerceptualMode::Hrf, Some(path)) => Self::load_hrf(path),
            (PerceptualMode::Hrf, None) => {
                log::warn!("perceptual.weights not set; using the desk stand-in extractor");
                Ok(Self::desk())
            }
            (PerceptualMode::Lrf, _) => Ok(Self::seeded(PerceptualMode::Lrf, DESK_SEED)),
            (PerceptualMode::Desk, _) => Ok(Self::desk()),
        }
    }

    fn load_hrf(path: &Path) -> Result<Self> {
        if !path.exists() {
            log::warn!(
                "perceptual weights {} not found; using the desk stand-in extractor",
                path.display()
            );
            return Ok(Self::desk());
        }
        let mut ex = Self::seeded(PerceptualMode::Hrf, DESK_SEED);
        let tensors = crate::checkpoint::read_tensor_file(path)?;
        for (name, t) in tensors {
            let id = ex
                .store
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected perceptual tensor `{name}`")))?;
            ensure!(
                ex.store.value(id).shape() == t.shape(),
                Checkpoint,
                "perceptual tensor `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                ex.store.value(id).shape()
            );
            *ex.store.value_mut(id) = t.cast();
        }
        Ok(ex)
    }

    /// Feature maps after every layer; the extractor's weights never receive gradients.
    pub fn features(&self, g: &mut Graph<T>, x: Var) -> Result<Vec<Var>> {
        g.freeze(&self.store);
        let mut t = g.scale(x, 2.0);
        let offset = g.constant(Tensor::full(g.value(x).shape(), T::one()));
        t = g.sub(t, offset)?;
        let mut out = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            t = conv.forward(g, &self.store, t)?;
            t = g.leaky_relu(t, LEAKY_SLOPE);
            out.push(t);
        }
        Ok(out)
    }

    /// Features of a fixed image as plain tensors.
    pub fn features_of(&self, img: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::inference();
        let x = g.constant(img.clone());
        let f = self.features(&mut g, x)?;
        Ok(f.into_iter().map(|v| g.value(v).clone()).collect())
    }
}

fn build_convs(sink: &mut dyn ParamSink, mode: PerceptualMode) -> Vec<Conv> {
    architecture(mode)
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            let k = l.geom.kernel;
            let fan_in = l.cin * k * k;
            let weight = sink.declare(
                format!("perceptual.{i}.weight"),
                [l.cout, l.cin, k, k],
                ParamKind::Weight,
                Init::Normal((2.0 / fan_in as f64).sqrt()),
            );
            Conv {
                weight,
                bias: None,
                cin: l.cin,
                cout: l.cout,
                geom: l.geom,
            }
        })
        .collect()
}

/// Discriminator features of a fixed image as plain tensors.
pub fn critic_features<T: Scalar, C: Critic>(critic: &C, ps: &ParamStore<T>, img: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let mut g = Graph::inference();
    let x = g.constant(img.clone());
    let (_, f) = critic.critique(&mut g, ps, x)?;
    Ok(f.into_iter().map(|v| g.value(v).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(g: &Graph<f64>, v: Var) -> f64 {
        g.value(v).data()[0]
    }

    #[test]
    fn reconstruction_hand_case() {
        let mut g = Graph::<f64>::new();
        let target = Tensor::zeros([1, 1, 2, 2]);
        let pred = g.input(Tensor::new([1, 1, 2, 2], vec![0.1, 0.2, 0.3, 0.9]).unwrap(), true);
        let m = Tensor::new([1, 1, 2, 2], vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        let l = reconstruction_loss(&mut g, pred, &target, &m).unwrap();
        assert!((scalar(&g, l) - 0.2).abs() < 1e-12);
        let all = Tensor::full([1, 1, 2, 2], 1.0);
        let l = reconstruction_loss(&mut g, pred, &target, &all).unwrap();
        assert_eq!(scalar(&g, l), 0.0);
    }

    #[test]
    fn discriminator_loss_closed_forms() {
        let mut g = Graph::<f64>::new();
        let zeros = g.constant(Tensor::zeros([1, 1, 2, 2]));
        let mp = Tensor::new([1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let l = discriminator_loss(&mut g, zeros, zeros, &mp).unwrap();
        assert!((scalar(&g, l) - 3.0 * 2f64.ln()).abs() < 1e-12);

        let real = g.constant(Tensor::full([1, 1, 2, 2], 20.0));
        let fake = g.constant(Tensor::new([1, 1, 2, 2], vec![-20.0, 20.0, 20.0, -20.0]).unwrap());
        let l = discriminator_loss(&mut g, real, fake, &mp).unwrap();
        assert!(scalar(&g, l) < 1e-8);
    }

    #[test]
    fn patch_mask_thresholds_at_half() {
        let m = Tensor::from_fn([1, 1, 4, 4], |_, _, y, x| if x < 2 && y < 3 { 1.0 } else { 0.0 });
        let p = patch_mask(&m, 2, 2);
        assert_eq!(p.data(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn logit_grid_for_full_size() {
        let (d, _) = Discriminator::new::<f32>(&DiscriminatorConfig::default(), 0).unwrap();
        assert_eq!(d.logit_dims(256, 512).unwrap(), (16, 32));
        assert!(matches!(d.logit_dims(8, 64), Err(Error::Config(_))));
    }

    #[test]
    fn default_weights_total_150() {
        let mut g = Graph::<f64>::new();
        let one = g.constant(Tensor::scalar(1.0));
        let t = GeneratorTerms {
            rec: one,
            perc: one,
            adv: one,
            fm: one,
        };
        let l = total_generator_loss(&mut g, &t, &LossWeights::default()).unwrap();
        assert_eq!(scalar(&g, l), 150.0);
    }
}
