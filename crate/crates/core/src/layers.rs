//! Small parameterized building blocks used across the networks.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::kernels::ConvGeom;
use crate::params::{Init, ParamId, ParamKind, ParamSink, ParamStore};
use crate::scalar::Scalar;

/// Spherically padded 2-D convolution.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub geom: ConvGeom,
}

impl Conv {
    pub fn build(
        sink: &mut dyn ParamSink,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        bias: bool,
    ) -> Self {
        let k = geom.kernel;
        let fan_in = cin * k * k;
        let weight = sink.declare(
            format!("{name}.weight"),
            [cout, cin, k, k],
            ParamKind::Weight,
            Init::FanIn(fan_in),
        );
        let bias = bias.then(|| {
            sink.declare(
                format!("{name}.bias"),
                [1, cout, 1, 1],
                ParamKind::Bias,
                Init::Const(0.0),
            )
        });
        Self {
            weight,
            bias,
            cin,
            cout,
            geom,
        }
    }

    pub fn pointwise(sink: &mut dyn ParamSink, name: &str, cin: usize, cout: usize) -> Self {
        Self::build(sink, name, cin, cout, ConvGeom::same(1, 1), false)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let b = self.bias.map(|b| g.param(ps, b));
        g.conv2d(x, w, b, self.geom)
    }
}

/// `s * relu(x)^2 + b` with learnable scalars.
#[derive(Clone, Debug)]
pub struct StarRelu {
    pub scale: ParamId,
    pub bias: ParamId,
}

pub const STAR_RELU_SCALE: f64 = 0.8944;
pub const STAR_RELU_BIAS: f64 = -0.4472;

impl StarRelu {
    pub fn build(sink: &mut dyn ParamSink, name: &str) -> Self {
        Self {
            scale: sink.declare(
                format!("{name}.scale"),
                [1, 1, 1, 1],
                ParamKind::Scalar,
                Init::Const(STAR_RELU_SCALE),
            ),
            bias: sink.declare(
                format!("{name}.bias"),
                [1, 1, 1, 1],
                ParamKind::Scalar,
                Init::Const(STAR_RELU_BIAS),
            ),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let s = g.param(ps, self.scale);
        let b = g.param(ps, self.bias);
        g.star_relu(x, s, b)
    }
}

/// Channel-wise normalization at every spatial site, gain only.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub channels: usize,
}

impl LayerNorm {
    pub fn build(sink: &mut dyn ParamSink, name: &str, channels: usize) -> Self {
        Self {
            gain: sink.declare(
                format!("{name}.gain"),
                [1, channels, 1, 1],
                ParamKind::Gain,
                Init::Const(1.0),
            ),
            channels,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let gain = g.param(ps, self.gain);
        g.layer_norm(x, gain)
    }
}
