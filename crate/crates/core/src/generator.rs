//! FourierFormer blocks and the four-stage U-shaped generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::core_ops::ensure_finite;
use crate::error::{ensure, Error, Result};
use crate::fourier::{MixerVariant, TokenMixer};
use crate::graph::{Graph, Var};
use crate::kernels::ConvGeom;
use crate::layers::{Conv, LayerNorm, StarRelu};
use crate::params::{Init, ParamCounter, ParamId, ParamKind, ParamSink, ParamStore, StoreBuilder};
use crate::scalar::{FftScalar, Scalar};
use crate::tensor::{FeatureMap, Tensor};

pub const STAGES: usize = 4;
pub const HEIGHT_DIVISOR: usize = 32;
pub const WIDTH_DIVISOR: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub channels: usize,
    pub blocks: [usize; STAGES],
    pub mixer: MixerVariant,
    pub mlp_ratio: usize,
    pub gate_kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            blocks: [2; STAGES],
            mixer: MixerVariant::Wfm,
            mlp_ratio: 4,
            gate_kernel: 3,
            in_channels: 4,
            out_channels: 3,
        }
    }
}

impl GeneratorConfig {
    pub fn toy(channels: usize, blocks: usize) -> Self {
        Self {
            channels,
            blocks: [blocks; STAGES],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.channels >= 2, Config, "base channels must be at least 2");
        ensure!(
            self.channels % 2 == 0,
            Config,
            "base channels must be even, got {}",
            self.channels
        );
        if self.mixer == MixerVariant::Ffc {
            ensure!(
                self.channels % 4 == 0,
                Config,
                "FFC mixer needs base channels divisible by 4, got {}",
                self.channels
            );
        }
        ensure!(
            self.blocks.iter().all(|&l| l >= 1),
            Config,
            "every stage needs at least one block, got {:?}",
            self.blocks
        );
        ensure!(self.mlp_ratio >= 1, Config, "mlp ratio must be positive");
        ensure!(
            self.gate_kernel % 2 == 1,
            Config,
            "gate kernel must be odd, got {}",
            self.gate_kernel
        );
        ensure!(
            self.in_channels >= 1 && self.out_channels >= 1,
            Config,
            "channel counts must be positive"
        );
        Ok(())
    }

    /// Stage widths `2^(i-1) C`.
    pub fn stage_channels(&self) -> [usize; STAGES] {
        std::array::from_fn(|i| self.channels << i)
    }

    pub fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        ensure!(
            h > 0 && w > 0 && h % HEIGHT_DIVISOR == 0 && w % WIDTH_DIVISOR == 0,
            Config,
            "input {h}x{w} (HxW) unsupported: height must be a positive multiple of {HEIGHT_DIVISOR} and width a positive multiple of {WIDTH_DIVISOR}"
        );
        Ok(())
    }

    /// `[channels, height, width]` of every encoder stage.
    pub fn stage_dims(&self, h: usize, w: usize) -> Result<[[usize; 3]; STAGES]> {
        self.check_dims(h, w)?;
        let ch = self.stage_channels();
        Ok(std::array::from_fn(|i| [ch[i], h >> (i + 2), w >> (i + 2)]))
    }
}

/// `X' = X + mixer(LN(X))`, `out = X' + mlp(LN(X'))`.
#[derive(Clone, Debug)]
pub struct FourierFormerBlock {
    pub norm1: LayerNorm,
    pub mixer: TokenMixer,
    pub norm2: LayerNorm,
    pub fc1: Conv,
    pub act: StarRelu,
    pub fc2: Conv,
    pub channels: usize,
}

impl FourierFormerBlock {
    pub fn build(sink: &mut dyn ParamSink, name: &str, channels: usize, cfg: &GeneratorConfig) -> Result<Self> {
        let hidden = channels * cfg.mlp_ratio;
        Ok(Self {
            norm1: LayerNorm::build(sink, &format!("{name}.norm1"), channels),
            mixer: TokenMixer::build(sink, &format!("{name}.mixer"), channels, cfg.mixer, cfg.gate_kernel)?,
            norm2: LayerNorm::build(sink, &format!("{name}.norm2"), channels),
            fc1: Conv::pointwise(sink, &format!("{name}.fc1"), channels, hidden),
            act: StarRelu::build(sink, &format!("{name}.act")),
            fc2: Conv::pointwise(sink, &format!("{name}.fc2"), hidden, channels),
            channels,
        })
    }

    pub fn forward<T: FftScalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let c = g.value(x).channels();
        ensure!(
            c == self.channels,
            Config,
            "block expects {} channels, got {c}",
            self.channels
        );
        let t = self.norm1.forward(g, ps, x)?;
        let t = self.mixer.forward(g, ps, t)?;
        let x = g.add(x, t)?;
        let t = self.norm2.forward(g, ps, x)?;
        let t = self.fc1.forward(g, ps, t)?;
        let t = self.act.forward(g, ps, t);
        let t = self.fc2.forward(g, ps, t)?;
        g.add(x, t)
    }

    /// Parameters whose zeroing turns the block into the identity.
    pub fn residual_output_params(&self) -> Vec<ParamId> {
        let mut ids = self.mixer.output_params();
        ids.push(self.fc2.weight);
        ids
    }
}

pub fn fourier_former_block<T: FftScalar>(
    x: &FeatureMap<T>,
    block: &FourierFormerBlock,
    ps: &ParamStore<T>,
) -> Result<FeatureMap<T>> {
    ensure_finite(x, "fourier_former_block input")?;
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let y = block.forward(&mut g, ps, xv)?;
    Ok(g.value(y).clone())
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub stem: Conv,
    pub stem_norm: LayerNorm,
    /// Stages 2..4: norm then stride-2 conv.
    pub downs: Vec<(LayerNorm, Conv)>,
    pub encoder: Vec<Vec<FourierFormerBlock>>,
    /// Indexed by stage; stage 4 has no skip merge.
    pub merges: Vec<Option<Conv>>,
    pub decoder: Vec<Vec<FourierFormerBlock>>,
    /// Stages 4..2: nearest x2 then k3 conv to the next narrower width.
    pub ups: Vec<Conv>,
    pub final_up: Conv,
    pub final_act: StarRelu,
    pub head: Conv,
}

impl Generator {
    pub fn build(sink: &mut dyn ParamSink, config: &GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let ch = config.stage_channels();
        let stem = Conv::build(sink, "enc.stem", config.in_channels, ch[0], ConvGeom::strided(7, 4), false);
        let stem_norm = LayerNorm::build(sink, "enc.stem_norm", ch[0]);
        let mut downs = Vec::new();
        for i in 1..STAGES {
            downs.push((
                LayerNorm::build(sink, &format!("enc.{i}.down_norm"), ch[i - 1]),
                Conv::build(sink, &format!("enc.{i}.down"), ch[i - 1], ch[i], ConvGeom::strided(3, 2), false),
            ));
        }
        let mut encoder = Vec::new();
        for (i, &c) in ch.iter().enumerate() {
            let blocks = (0..config.blocks[i])
                .map(|b| FourierFormerBlock::build(sink, &format!("enc.{i}.block.{b}"), c, config))
                .collect::<Result<Vec<_>>>()?;
            encoder.push(blocks);
        }
        let mut merges = Vec::new();
        let mut decoder = Vec::new();
        for (i, &c) in ch.iter().enumerate() {
            merges.push((i + 1 < STAGES).then(|| Conv::pointwise(sink, &format!("dec.{i}.merge"), 2 * c, c)));
            let blocks = (0..config.blocks[i])
                .map(|b| FourierFormerBlock::build(sink, &format!("dec.{i}.block.{b}"), c, config))
                .collect::<Result<Vec<_>>>()?;
            decoder.push(blocks);
        }
        let ups = (1..STAGES)
            .rev()
            .map(|i| Conv::build(sink, &format!("dec.{i}.up"), ch[i], ch[i - 1], ConvGeom::same(3, 1), false))
            .collect();
        let half = (ch[0] / 2).max(1);
        let final_up = Conv::build(sink, "dec.0.up", ch[0], half, ConvGeom::same(7, 1), false);
        let final_act = StarRelu::build(sink, "dec.0.up_act");
        let head = Conv::build(sink, "head", half, config.out_channels, ConvGeom::same(1, 1), true);
        Ok(Self {
            config: config.clone(),
            stem,
            stem_norm,
            downs,
            encoder,
            merges,
            decoder,
            ups,
            final_up,
            final_act,
            head,
        })
    }

    pub fn new<T: Scalar>(config: &GeneratorConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Self::build(
            &mut StoreBuilder {
                store: &mut store,
                rng: &mut rng,
            },
            config,
        )?;
        Ok((net, store))
    }

    /// Returns the bottleneck and the per-stage outputs (the last equals the bottleneck).
    pub fn encode<T: FftScalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<(Var, Vec<Var>)> {
        let [_, c, h, w] = g.value(x).shape();
        self.config.check_dims(h, w)?;
        ensure!(
            c == self.config.in_channels,
            Config,
            "generator expects {} input channels, got {c}",
            self.config.in_channels
        );
        let mut t = self.stem.forward(g, ps, x)?;
        t = self.stem_norm.forward(g, ps, t)?;
        let mut skips = Vec::with_capacity(STAGES);
        for stage in 0..STAGES {
            if stage > 0 {
                let (norm, conv) = &self.downs[stage - 1];
                t = norm.forward(g, ps, t)?;
                t = conv.forward(g, ps, t)?;
            }
            for block in &self.encoder[stage] {
                t = block.forward(g, ps, t)?;
            }
            skips.push(t);
        }
        Ok((t, skips))
    }

    pub fn decode<T: FftScalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        bottleneck: Var,
        skips: &[Var],
    ) -> Result<Var> {
        ensure!(
            skips.len() == STAGES,
            Shape,
            "decoder needs {STAGES} skips, got {}",
            skips.len()
        );
        let mut t = bottleneck;
        for stage in (0..STAGES).rev() {
            if let Some(merge) = &self.merges[stage] {
                let (a, b) = (g.value(t).shape(), g.value(skips[stage]).shape());
                ensure!(a == b, Shape, "skip {stage}: decoder {a:?} vs encoder {b:?}");
                let cat = g.concat_channels(&[t, skips[stage]])?;
                t = merge.forward(g, ps, cat)?;
            }
            for block in &self.decoder[stage] {
                t = block.forward(g, ps, t)?;
            }
            if stage > 0 {
                t = g.upsample_nearest(t, 2);
                t = self.ups[STAGES - 1 - stage].forward(g, ps, t)?;
            }
        }
        t = g.upsample_nearest(t, 4);
        t = self.final_up.forward(g, ps, t)?;
        t = self.final_act.forward(g, ps, t);
        t = self.head.forward(g, ps, t)?;
        Ok(g.sigmoid(t))
    }

    /// Full network on an already assembled `x'`.
    pub fn forward<T: FftScalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, xprime: Var) -> Result<Var> {
        let (bottleneck, skips) = self.encode(g, ps, xprime)?;
        self.decode(g, ps, bottleneck, &skips)
    }

    pub fn generate<T: FftScalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>, m: &Tensor<T>) -> Result<Tensor<T>> {
        let xp = masked_input(x, m)?;
        let mut g = Graph::inference();
        let v = g.constant(xp);
        let y = self.forward(&mut g, ps, v)?;
        Ok(g.value(y).clone())
    }

    /// All blocks, encoder first.
    pub fn blocks(&self) -> impl Iterator<Item = &FourierFormerBlock> {
        self.encoder.iter().chain(&self.decoder).flatten()
    }
}

pub fn check_binary_mask<T: Scalar>(m: &Tensor<T>) -> Result<()> {
    ensure!(m.channels() == 1, Mask, "mask must have one channel, got {}", m.channels());
    if let Some(v) = m.data().iter().find(|v| v.value() != 0.0 && v.value() != 1.0) {
        return Err(Error::Mask(format!("mask value {:?} is not binary", v.value())));
    }
    Ok(())
}

/// `x' = concat(x * (1 - m), m)` with `m = 1` marking holes.
pub fn masked_input<T: Scalar>(x: &Tensor<T>, m: &Tensor<T>) -> Result<Tensor<T>> {
    check_binary_mask(m)?;
    let [n, c, h, w] = x.shape();
    ensure!(
        m.shape() == [n, 1, h, w],
        Shape,
        "mask {:?} does not match image {:?}",
        m.shape(),
        x.shape()
    );
    ensure_finite(x, "generator input")?;
    let keep = Tensor::from_fn([n, c, h, w], |b, ch, y, xx| {
        x.at(b, ch, y, xx) * (T::one() - m.at(b, 0, y, xx))
    });
    Tensor::concat_channels(&[&keep, m])
}

/// `x * (1 - m) + x_hat * m`.
pub fn composite<T: Scalar>(x: &Tensor<T>, x_hat: &Tensor<T>, m: &Tensor<T>) -> Result<Tensor<T>> {
    ensure!(
        x.shape() == x_hat.shape(),
        Shape,
        "composite of {:?} and {:?}",
        x.shape(),
        x_hat.shape()
    );
    let [n, c, h, w] = x.shape();
    ensure!(m.shape() == [n, 1, h, w], Shape, "mask {:?} for image {:?}", m.shape(), x.shape());
    Ok(Tensor::from_fn([n, c, h, w], |b, ch, y, xx| {
        let k = m.at(b, 0, y, xx);
        x.at(b, ch, y, xx) * (T::one() - k) + x_hat.at(b, ch, y, xx) * k
    }))
}

/// Exact trainable-parameter count, computed without allocating weights.
pub fn count_parameters(config: &GeneratorConfig) -> Result<usize> {
    let mut counter = ParamCounter::default();
    Generator::build(&mut counter, config)?;
    Ok(counter.total)
}

/// Parameter name → shape, the key mapping used by checkpoints.
pub fn parameter_manifest(config: &GeneratorConfig) -> Result<Vec<(String, [usize; 4], ParamKind)>> {
    struct Manifest(Vec<(String, [usize; 4], ParamKind)>);
    impl ParamSink for Manifest {
        fn declare(&mut self, name: String, shape: [usize; 4], kind: ParamKind, _: Init) -> ParamId {
            self.0.push((name, shape, kind));
            ParamId(self.0.len() - 1)
        }
    }
    let mut m = Manifest(Vec::new());
    Generator::build(&mut m, config)?;
    Ok(m.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_dims_follow_the_formula() {
        let cfg = GeneratorConfig::toy(16, 1);
        assert_eq!(
            cfg.stage_dims(64, 128).unwrap(),
            [[16, 16, 32], [32, 8, 16], [64, 4, 8], [128, 2, 4]]
        );
        assert!(matches!(cfg.stage_dims(100, 128), Err(Error::Config(_))));
        assert!(cfg.stage_dims(64, 96).is_err());
    }

    #[test]
    fn degenerate_configs_rejected() {
        let mut cfg = GeneratorConfig::toy(16, 1);
        cfg.blocks = [1, 0, 1, 1];
        assert!(count_parameters(&cfg).is_err());
        assert!(count_parameters(&GeneratorConfig::toy(7, 1)).is_err());
        let mut ffc = GeneratorConfig::toy(6, 1);
        ffc.mixer = MixerVariant::Ffc;
        assert!(count_parameters(&ffc).is_err());
    }

    #[test]
    fn masked_input_zeroes_holes() {
        let x = Tensor::<f32>::full([1, 3, 2, 2], 0.5);
        let m = Tensor::from_fn([1, 1, 2, 2], |_, _, y, x| if y == x { 1.0 } else { 0.0 });
        let xp = masked_input(&x, &m).unwrap();
        assert_eq!(xp.shape(), [1, 4, 2, 2]);
        assert_eq!(xp.at(0, 2, 0, 0), 0.0);
        assert_eq!(xp.at(0, 2, 0, 1), 0.5);
        assert_eq!(xp.at(0, 3, 1, 1), 1.0);
        let bad = Tensor::full([1, 1, 2, 2], 0.5f32);
        assert!(matches!(masked_input(&x, &bad), Err(Error::Mask(_))));
    }

    #[test]
    fn composite_boundaries() {
        let x = Tensor::<f64>::full([1, 3, 2, 2], 0.2);
        let y = Tensor::<f64>::full([1, 3, 2, 2], 0.9);
        assert_eq!(composite(&x, &y, &Tensor::zeros([1, 1, 2, 2])).unwrap(), x);
        assert_eq!(composite(&x, &y, &Tensor::full([1, 1, 2, 2], 1.0)).unwrap(), y);
    }

    #[test]
    fn manifest_names_are_unique() {
        let names = parameter_manifest(&GeneratorConfig::toy(8, 1)).unwrap();
        let set: std::collections::HashSet<_> = names.iter().map(|n| &n.0).collect();
        assert_eq!(set.len(), names.len());
    }
}
