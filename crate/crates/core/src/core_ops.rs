//! Spherical padding, gated convolution and half-window split/merge.
//!
//! Equirectangular maps wrap around horizontally, so every convolution pads
//! columns circularly and rows by reflection about the edge row.

use crate::error::{ensure, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{self, Axis, ConvGeom};
use crate::layers::{Conv, StarRelu};
use crate::params::{ParamId, ParamSink, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::FeatureMap;

/// Rows (each side) and columns (each side) to append.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PadSpec {
    pub pad_h: usize,
    pub pad_w: usize,
}

impl PadSpec {
    pub fn new(pad_h: usize, pad_w: usize) -> Self {
        Self { pad_h, pad_w }
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        kernels::check_pad(h, w, self.pad_h, self.pad_w)
    }
}

pub fn spherical_pad<T: Scalar>(x: &FeatureMap<T>, spec: PadSpec) -> Result<FeatureMap<T>> {
    ensure_finite(x, "spherical_pad input")?;
    kernels::spherical_pad(x, spec.pad_h, spec.pad_w)
}

/// Inverse of [`spherical_pad`]: drops the padded border.
pub fn center_crop<T: Scalar>(x: &FeatureMap<T>, spec: PadSpec) -> Result<FeatureMap<T>> {
    let [n, c, hp, wp] = x.shape();
    ensure!(
        hp > 2 * spec.pad_h && wp > 2 * spec.pad_w,
        Shape,
        "crop {spec:?} of {hp}x{wp}"
    );
    let (h, w) = (hp - 2 * spec.pad_h, wp - 2 * spec.pad_w);
    Ok(FeatureMap::from_fn([n, c, h, w], |b, ch, y, xx| {
        x.at(b, ch, y + spec.pad_h, xx + spec.pad_w)
    }))
}

pub(crate) fn ensure_finite<T: Scalar>(x: &FeatureMap<T>, what: &str) -> Result<()> {
    if let Some(i) = x.data().iter().position(|v| !v.is_finite()) {
        return Err(crate::Error::Numerical(format!(
            "{what}: non-finite value {:?} at flat index {i} of {:?}",
            x.data()[i],
            x.shape()
        )));
    }
    Ok(())
}

/// `y = act(conv_f(x)) * sigmoid(conv_g(x))`. The feature branch has no bias,
/// the gate branch keeps one.
#[derive(Clone, Debug)]
pub struct GatedConv {
    pub feature: Conv,
    pub gate: Conv,
    pub act: StarRelu,
}

impl GatedConv {
    pub fn build(sink: &mut dyn ParamSink, name: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        let geom = ConvGeom::same(kernel, 1);
        Self {
            feature: Conv::build(sink, &format!("{name}.feature"), cin, cout, geom, false),
            gate: Conv::build(sink, &format!("{name}.gate"), cin, cout, geom, true),
            act: StarRelu::build(sink, &format!("{name}.act")),
        }
    }

    pub fn cin(&self) -> usize {
        self.feature.cin
    }

    pub fn cout(&self) -> usize {
        self.feature.cout
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let c = g.value(x).channels();
        ensure!(
            c == self.cin(),
            Config,
            "gated conv expects {} input channels, got {c}",
            self.cin()
        );
        let f = self.feature.forward(g, ps, x)?;
        let f = self.act.forward(g, ps, f);
        let gate = self.gate.forward(g, ps, x)?;
        let gate = g.sigmoid(gate);
        g.mul(f, gate)
    }

    pub fn gate_bias(&self) -> ParamId {
        self.gate.bias.expect("gate branch has a bias")
    }
}

/// Evaluate a gated convolution outside of any training tape.
pub fn gated_conv<T: Scalar>(x: &FeatureMap<T>, layer: &GatedConv, ps: &ParamStore<T>) -> Result<FeatureMap<T>> {
    ensure_finite(x, "gated_conv input")?;
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let y = layer.forward(&mut g, ps, xv)?;
    Ok(g.value(y).clone())
}

pub fn window_split<T: Scalar>(x: &FeatureMap<T>, axis: Axis) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
    let len = axis.len_of(x.shape());
    ensure!(
        len % 2 == 0,
        Precondition,
        "window split needs an even {axis:?} length, got {len}; use input dims divisible by 32 (height) and 64 (width)"
    );
    let half = len / 2;
    Ok((
        crate::graph::slice_axis(x, axis, 0, half),
        crate::graph::slice_axis(x, axis, half, half),
    ))
}

pub fn window_merge<T: Scalar>(a: &FeatureMap<T>, b: &FeatureMap<T>, axis: Axis) -> Result<FeatureMap<T>> {
    ensure!(
        a.shape() == b.shape(),
        Shape,
        "window merge of {:?} and {:?}",
        a.shape(),
        b.shape()
    );
    let mut g = Graph::inference();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let m = g.concat_axis(av, bv, axis)?;
    Ok(g.value(m).clone())
}

/// Tape version of [`window_split`].
pub fn split_var<T: Scalar>(g: &mut Graph<T>, x: Var, axis: Axis) -> Result<(Var, Var)> {
    let len = axis.len_of(g.value(x).shape());
    ensure!(
        len % 2 == 0,
        Precondition,
        "window split needs an even {axis:?} length, got {len}"
    );
    let half = len / 2;
    Ok((g.slice_axis(x, axis, 0, half)?, g.slice_axis(x, axis, half, half)?))
}

/// Declares a standalone gated conv into a fresh store (handy for tests and demos).
pub fn new_gated_conv<T: Scalar>(
    cin: usize,
    cout: usize,
    kernel: usize,
    seed: u64,
) -> (GatedConv, ParamStore<T>) {
    use rand::SeedableRng;
    let mut store = ParamStore::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut b = crate::params::StoreBuilder {
        store: &mut store,
        rng: &mut rng,
    };
    let layer = GatedConv::build(&mut b, "gated", cin, cout, kernel);
    (layer, store)
}
