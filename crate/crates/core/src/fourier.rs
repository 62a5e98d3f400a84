//! Fourier Units and the windowed Fourier token mixer.
//!
//! A Fourier Unit takes a real FFT along one axis (or both), stacks the real
//! and imaginary parts as channels, mixes channels with one pointwise map
//! shared by every frequency bin, and transforms back. Because the per-bin
//! map acts on (re, im) pairs it has a complex-linear part and a
//! conjugate-linear part; the latter responds to the axis-reversed signal,
//! which is where the mirror symmetry of the outputs comes from.

use serde::{Deserialize, Serialize};

use crate::core_ops::{ensure_finite, split_var, GatedConv};
use crate::error::{ensure, Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{Axis, ConvGeom};
use crate::layers::{Conv, LayerNorm, StarRelu};
use crate::params::{Init, ParamId, ParamKind, ParamSink, ParamStore};
use crate::scalar::{FftScalar, Scalar};
use crate::tensor::FeatureMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FourierAxes {
    Height,
    Width,
    /// Both spatial axes at once, as in Fast Fourier Convolutions.
    Both,
}

#[derive(Clone, Debug)]
pub struct FourierUnit {
    pub axes: FourierAxes,
    /// `[2*cout, 2*cin, 1, 1]`, no bias.
    pub mix: ParamId,
    pub norm: LayerNorm,
    pub act: StarRelu,
    pub cin: usize,
    pub cout: usize,
    pub normalize: bool,
    pub activate: bool,
}

impl FourierUnit {
    pub fn build(sink: &mut dyn ParamSink, name: &str, axes: FourierAxes, cin: usize, cout: usize) -> Self {
        let mix = sink.declare(
            format!("{name}.mix"),
            [2 * cout, 2 * cin, 1, 1],
            ParamKind::Weight,
            Init::FanIn(2 * cin),
        );
        Self {
            axes,
            mix,
            norm: LayerNorm::build(sink, &format!("{name}.norm"), 2 * cout),
            act: StarRelu::build(sink, &format!("{name}.act")),
            cin,
            cout,
            normalize: true,
            activate: true,
        }
    }

    /// Same unit with normalization and activation switched off.
    pub fn linear(mut self) -> Self {
        self.normalize = false;
        self.activate = false;
        self
    }

    pub fn forward<T: FftScalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let [_, c, h, w] = g.value(x).shape();
        ensure!(
            c == self.cin,
            Config,
            "Fourier unit expects {} channels, got {c}",
            self.cin
        );
        let spec = match self.axes {
            FourierAxes::Width => g.rfft(x, Axis::Width),
            FourierAxes::Height => g.rfft(x, Axis::Height),
            FourierAxes::Both => {
                let s = g.rfft(x, Axis::Width);
                g.cfft(s, Axis::Height, false)
            }
        };
        let wmix = g.param(ps, self.mix);
        let mut y = g.conv2d(spec, wmix, None, ConvGeom::same(1, 1))?;
        if self.normalize {
            y = self.norm.forward(g, ps, y)?;
        }
        if self.activate {
            y = self.act.forward(g, ps, y);
        }
        match self.axes {
            FourierAxes::Width => g.irfft(y, Axis::Width, w),
            FourierAxes::Height => g.irfft(y, Axis::Height, h),
            FourierAxes::Both => {
                let s = g.cfft(y, Axis::Height, true);
                g.irfft(s, Axis::Width, w)
            }
        }
    }
}

/// Evaluate a Fourier Unit outside of a training tape.
pub fn fourier_unit<T: FftScalar>(x: &FeatureMap<T>, unit: &FourierUnit, ps: &ParamStore<T>) -> Result<FeatureMap<T>> {
    ensure_finite(x, "fourier_unit input")?;
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let y = unit.forward(&mut g, ps, xv)?;
    let out = g.value(y).clone();
    ensure_finite(&out, "fourier_unit output")?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerVariant {
    /// Per-axis units with half-window branches.
    Wfm,
    /// Per-axis units, windows disabled.
    FmNoWindow,
    /// One 2-D unit with half-window branches.
    Wfm2d,
    /// Local + global branch Fast Fourier Convolution.
    Ffc,
    /// Gated convolutions only.
    GatedOnly,
}

impl MixerVariant {
    pub const ALL: [MixerVariant; 5] = [
        MixerVariant::Wfm,
        MixerVariant::FmNoWindow,
        MixerVariant::Wfm2d,
        MixerVariant::Ffc,
        MixerVariant::GatedOnly,
    ];

    pub fn windowed(self) -> bool {
        matches!(self, MixerVariant::Wfm | MixerVariant::Wfm2d)
    }

    pub fn name(self) -> &'static str {
        match self {
            MixerVariant::Wfm => "wfm",
            MixerVariant::FmNoWindow => "fm_no_window",
            MixerVariant::Wfm2d => "wfm_2d",
            MixerVariant::Ffc => "ffc",
            MixerVariant::GatedOnly => "gated_only",
        }
    }
}

impl std::str::FromStr for MixerVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MixerVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mixer variant `{s}`")))
    }
}

/// Gated halving, four Fourier branches on the halved map, gated fusion.
#[derive(Clone, Debug)]
pub struct WFourierMixer {
    pub reduce: GatedConv,
    /// `[width, height]` for per-axis variants, `[both]` for the 2-D variant.
    pub units: Vec<FourierUnit>,
    pub fuse: GatedConv,
    pub windowed: bool,
}

impl WFourierMixer {
    pub fn build(sink: &mut dyn ParamSink, name: &str, channels: usize, variant: MixerVariant, kernel: usize) -> Result<Self> {
        ensure!(
            channels % 2 == 0 && channels >= 2,
            Config,
            "windowed Fourier mixer needs an even channel count, got {channels}"
        );
        let half = channels / 2;
        let reduce = GatedConv::build(sink, &format!("{name}.reduce"), channels, half, kernel);
        let units = match variant {
            MixerVariant::Wfm | MixerVariant::FmNoWindow => vec![
                FourierUnit::build(sink, &format!("{name}.fu_w"), FourierAxes::Width, half, half),
                FourierUnit::build(sink, &format!("{name}.fu_h"), FourierAxes::Height, half, half),
            ],
            MixerVariant::Wfm2d => vec![FourierUnit::build(
                sink,
                &format!("{name}.fu_2d"),
                FourierAxes::Both,
                half,
                half,
            )],
            other => {
                return Err(Error::Config(format!(
                    "{} is not a windowed Fourier variant",
                    other.name()
                )))
            }
        };
        let fuse = GatedConv::build(sink, &format!("{name}.fuse"), 4 * half, channels, kernel);
        Ok(Self {
            reduce,
            units,
            fuse,
            windowed: variant.windowed(),
        })
    }

    pub fn forward<T: FftScalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.reduce.forward(g, ps, x)?;
        let branches = if let [fu_w, fu_h] = self.units.as_slice() {
            let full_w = fu_w.forward(g, ps, y)?;
            let full_h = fu_h.forward(g, ps, y)?;
            let win_w = self.window_branch(g, ps, fu_w, y, &[Axis::Width], full_w)?;
            let win_h = self.window_branch(g, ps, fu_h, y, &[Axis::Height], full_h)?;
            [full_w, full_h, win_w, win_h]
        } else {
            let fu = &self.units[0];
            let full = fu.forward(g, ps, y)?;
            let win_w = self.window_branch(g, ps, fu, y, &[Axis::Width], full)?;
            let win_h = self.window_branch(g, ps, fu, y, &[Axis::Height], full)?;
            let win_q = self.window_branch(g, ps, fu, y, &[Axis::Width, Axis::Height], full)?;
            [full, win_w, win_h, win_q]
        };
        let cat = g.concat_channels(&branches)?;
        self.fuse.forward(g, ps, cat)
    }

    /// Applies `unit` independently to the halves of `y` along each axis in
    /// `axes`. Falls back to the full-map output when windows are disabled
    /// or an axis has odd length (a 1-row bottleneck, for instance).
    fn window_branch<T: FftScalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        unit: &FourierUnit,
        y: Var,
        axes: &[Axis],
        full: Var,
    ) -> Result<Var> {
        let shape = g.value(y).shape();
        if !self.windowed || axes.iter().any(|a| a.len_of(shape) % 2 == 1) {
            return Ok(full);
        }
        apply_windowed(g, ps, unit, y, axes)
    }
}

fn apply_windowed<T: FftScalar>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    unit: &FourierUnit,
    y: Var,
    axes: &[Axis],
) -> Result<Var> {
    match axes.split_first() {
        None => unit.forward(g, ps, y),
        Some((&axis, rest)) => {
            let (a, b) = split_var(g, y, axis)?;
            let a = apply_windowed(g, ps, unit, a, rest)?;
            let b = apply_windowed(g, ps, unit, b, rest)?;
            g.concat_axis(a, b, axis)
        }
    }
}

/// Fast Fourier Convolution token mixer: a local conv branch and a global
/// spectral branch with cross connections.
#[derive(Clone, Debug)]
pub struct FfcMixer {
    pub local: usize,
    pub global: usize,
    pub l2l: Conv,
    pub g2l: Conv,
    pub l2g: Conv,
    pub spec_in: Conv,
    pub spec_norm: LayerNorm,
    pub spec_act: StarRelu,
    pub fu: FourierUnit,
    pub spec_out: Conv,
    pub act_local: StarRelu,
    pub act_global: StarRelu,
}

impl FfcMixer {
    pub fn build(sink: &mut dyn ParamSink, name: &str, channels: usize, kernel: usize) -> Result<Self> {
        ensure!(
            channels % 4 == 0,
            Config,
            "FFC mixer splits channels 1:3, needs a multiple of 4, got {channels}"
        );
        let local = channels / 4;
        let global = channels - local;
        let mid = global / 2;
        let geom = ConvGeom::same(kernel, 1);
        Ok(Self {
            local,
            global,
            l2l: Conv::build(sink, &format!("{name}.l2l"), local, local, geom, false),
            g2l: Conv::build(sink, &format!("{name}.g2l"), global, local, geom, false),
            l2g: Conv::build(sink, &format!("{name}.l2g"), local, global, geom, false),
            spec_in: Conv::pointwise(sink, &format!("{name}.spec_in"), global, mid),
            spec_norm: LayerNorm::build(sink, &format!("{name}.spec_norm"), mid),
            spec_act: StarRelu::build(sink, &format!("{name}.spec_act")),
            fu: FourierUnit::build(sink, &format!("{name}.fu"), FourierAxes::Both, mid, mid),
            spec_out: Conv::pointwise(sink, &format!("{name}.spec_out"), mid, global),
            act_local: StarRelu::build(sink, &format!("{name}.act_l")),
            act_global: StarRelu::build(sink, &format!("{name}.act_g")),
        })
    }

    pub fn forward<T: FftScalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let xl = g.slice_channels(x, 0, self.local)?;
        let xg = g.slice_channels(x, self.local, self.global)?;
        let a = self.l2l.forward(g, ps, xl)?;
        let b = self.g2l.forward(g, ps, xg)?;
        let out_l = g.add(a, b)?;
        let t = self.spec_in.forward(g, ps, xg)?;
        let t = self.spec_norm.forward(g, ps, t)?;
        let t = self.spec_act.forward(g, ps, t);
        let f = self.fu.forward(g, ps, t)?;
        let s = g.add(t, f)?;
        let spectral = self.spec_out.forward(g, ps, s)?;
        let c = self.l2g.forward(g, ps, xl)?;
        let out_g = g.add(c, spectral)?;
        let out_l = self.act_local.forward(g, ps, out_l);
        let out_g = self.act_global.forward(g, ps, out_g);
        g.concat_channels(&[out_l, out_g])
    }
}

/// Gated halving followed by gated restoration, no spectral path.
#[derive(Clone, Debug)]
pub struct GatedMixer {
    pub reduce: GatedConv,
    pub fuse: GatedConv,
}

impl GatedMixer {
    pub fn build(sink: &mut dyn ParamSink, name: &str, channels: usize, kernel: usize) -> Result<Self> {
        ensure!(
            channels % 2 == 0,
            Config,
            "gated mixer needs an even channel count, got {channels}"
        );
        Ok(Self {
            reduce: GatedConv::build(sink, &format!("{name}.reduce"), channels, channels / 2, kernel),
            fuse: GatedConv::build(sink, &format!("{name}.fuse"), channels / 2, channels, kernel),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.reduce.forward(g, ps, x)?;
        self.fuse.forward(g, ps, y)
    }
}

#[derive(Clone, Debug)]
pub enum TokenMixer {
    Windowed(WFourierMixer),
    Ffc(FfcMixer),
    Gated(GatedMixer),
}

impl TokenMixer {
    pub fn build(sink: &mut dyn ParamSink, name: &str, channels: usize, variant: MixerVariant, kernel: usize) -> Result<Self> {
        Ok(match variant {
            MixerVariant::Wfm | MixerVariant::FmNoWindow | MixerVariant::Wfm2d => {
                TokenMixer::Windowed(WFourierMixer::build(sink, name, channels, variant, kernel)?)
            }
            MixerVariant::Ffc => TokenMixer::Ffc(FfcMixer::build(sink, name, channels, kernel)?),
            MixerVariant::GatedOnly => TokenMixer::Gated(GatedMixer::build(sink, name, channels, kernel)?),
        })
    }

    pub fn forward<T: FftScalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        match self {
            TokenMixer::Windowed(m) => m.forward(g, ps, x),
            TokenMixer::Ffc(m) => m.forward(g, ps, x),
            TokenMixer::Gated(m) => m.forward(g, ps, x),
        }
    }

    /// Parameters whose zeroing makes the mixer output exactly zero.
    pub fn output_params(&self) -> Vec<ParamId> {
        match self {
            TokenMixer::Windowed(m) => vec![m.fuse.feature.weight, m.fuse.act.scale, m.fuse.act.bias],
            TokenMixer::Gated(m) => vec![m.fuse.feature.weight, m.fuse.act.scale, m.fuse.act.bias],
            TokenMixer::Ffc(m) => vec![
                m.act_local.scale,
                m.act_local.bias,
                m.act_global.scale,
                m.act_global.bias,
            ],
        }
    }
}

/// A standalone mixer with its own parameter store.
pub struct StandaloneMixer<T> {
    pub mixer: TokenMixer,
    pub store: ParamStore<T>,
}

impl<T: FftScalar> StandaloneMixer<T> {
    pub fn new(channels: usize, variant: MixerVariant, kernel: usize, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut b = crate::params::StoreBuilder {
            store: &mut store,
            rng: &mut rng,
        };
        let mixer = TokenMixer::build(&mut b, "mixer", channels, variant, kernel)?;
        Ok(Self { mixer, store })
    }

    pub fn apply(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        mixer_variant(x, &self.mixer, &self.store)
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_elements()
    }
}

/// Evaluate any token mixer variant; output shape equals input shape.
pub fn mixer_variant<T: FftScalar>(x: &FeatureMap<T>, mixer: &TokenMixer, ps: &ParamStore<T>) -> Result<FeatureMap<T>> {
    ensure_finite(x, "token mixer input")?;
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let y = mixer.forward(&mut g, ps, xv)?;
    Ok(g.value(y).clone())
}

/// Evaluate the windowed Fourier mixer.
pub fn w_fourier_mixer<T: FftScalar>(x: &FeatureMap<T>, mixer: &WFourierMixer, ps: &ParamStore<T>) -> Result<FeatureMap<T>> {
    ensure_finite(x, "w_fourier_mixer input")?;
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let y = mixer.forward(&mut g, ps, xv)?;
    Ok(g.value(y).clone())
}

/// Builds a single Fourier Unit into a fresh store.
pub fn new_fourier_unit<T: Scalar>(axes: FourierAxes, cin: usize, cout: usize, seed: u64) -> (FourierUnit, ParamStore<T>) {
    use rand::SeedableRng;
    let mut store = ParamStore::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut b = crate::params::StoreBuilder {
        store: &mut store,
        rng: &mut rng,
    };
    let unit = FourierUnit::build(&mut b, "fu", axes, cin, cout);
    (unit, store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn identity_mix(unit: &FourierUnit, ps: &mut ParamStore<f64>) {
        let w = ps.value_mut(unit.mix);
        let c2 = w.shape()[0];
        for (i, v) in w.data_mut().iter_mut().enumerate() {
            *v = if i / c2 == i % c2 { 1.0 } else { 0.0 };
        }
    }

    #[test]
    fn identity_mix_roundtrips_every_axis() {
        for axes in [FourierAxes::Width, FourierAxes::Height, FourierAxes::Both] {
            let (unit, mut ps) = new_fourier_unit::<f64>(axes, 3, 3, 1);
            let unit = unit.linear();
            identity_mix(&unit, &mut ps);
            let x = Tensor::from_fn([2, 3, 6, 10], |n, c, y, x| ((n + 3 * c + 5 * y + 7 * x) % 11) as f64 - 5.0);
            let y = fourier_unit(&x, &unit, &ps).unwrap();
            assert!(y.max_abs_diff(&x) < 1e-10, "{axes:?}");
        }
    }

    #[test]
    fn constant_along_axis_stays_constant() {
        let (unit, ps) = new_fourier_unit::<f64>(FourierAxes::Width, 2, 2, 5);
        let unit = unit.linear();
        let x = Tensor::from_fn([1, 2, 4, 8], |_, c, y, _| (c * 4 + y) as f64 * 0.3 - 1.0);
        let y = fourier_unit(&x, &unit, &ps).unwrap();
        for c in 0..2 {
            for r in 0..4 {
                let first = y.at(0, c, r, 0);
                for col in 1..8 {
                    assert!((y.at(0, c, r, col) - first).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let (unit, ps) = new_fourier_unit::<f64>(FourierAxes::Width, 2, 2, 5);
        let x = Tensor::<f64>::zeros([1, 3, 4, 4]);
        assert!(matches!(fourier_unit(&x, &unit, &ps), Err(Error::Config(_))));
    }

    #[test]
    fn parse_variants() {
        for v in MixerVariant::ALL {
            assert_eq!(v.name().parse::<MixerVariant>().unwrap(), v);
        }
        assert!("attention".parse::<MixerVariant>().is_err());
    }

    #[test]
    fn odd_channels_rejected() {
        assert!(StandaloneMixer::<f32>::new(7, MixerVariant::Wfm, 3, 0).is_err());
        assert!(StandaloneMixer::<f32>::new(6, MixerVariant::Ffc, 3, 0).is_err());
    }
}
