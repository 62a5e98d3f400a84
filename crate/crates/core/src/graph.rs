//! A reverse-mode autodiff tape over [`Tensor`]s.
//!
//! Every op computes its value eagerly and, when any input needs a gradient,
//! records a closure that maps the output gradient to input gradients.
//! Parameters enter the tape through [`Graph::param`], which caches one leaf
//! per (store, id) so shared weights accumulate a single gradient.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use crate::error::{ensure, Result};
use crate::kernels::{self, Axis, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{FftScalar, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

type BackFn<T> = Box<dyn Fn(&Tensor<T>, &mut GradSink<'_, T>)>;

pub struct GradSink<'a, T> {
    grads: &'a mut [Option<Tensor<T>>],
    requires: &'a [bool],
}

impl<T: Scalar> GradSink<'_, T> {
    #[inline]
    pub fn wants(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn add(&mut self, v: Var, g: Tensor<T>) {
        if !self.requires[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

pub struct Graph<T: Scalar> {
    values: Vec<Arc<Tensor<T>>>,
    requires: Vec<bool>,
    backward: Vec<Option<BackFn<T>>>,
    record: bool,
    params: HashMap<(u64, ParamId), Var>,
    frozen: HashSet<u64>,
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<(u64, ParamId), Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }

    /// Gradients for every entry of `store` (None when unused or frozen).
    pub fn params(&mut self, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        (0..store.len())
            .map(|id| {
                self.params
                    .get(&(store.uid(), ParamId(id)))
                    .and_then(|v| self.grads[v.0].take())
            })
            .collect()
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A recording tape.
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            requires: Vec::new(),
            backward: Vec::new(),
            record: true,
            params: HashMap::new(),
            frozen: HashSet::new(),
        }
    }

    /// A tape that evaluates values only.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    /// Parameters of `store` enter this tape without gradients.
    pub fn freeze(&mut self, store: &ParamStore<T>) {
        self.frozen.insert(store.uid());
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor<T>> {
        self.values[v.0].clone()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn leaf(&mut self, value: Arc<Tensor<T>>, requires: bool) -> Var {
        self.values.push(value);
        self.requires.push(requires && self.record);
        self.backward.push(None);
        Var(self.values.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(Arc::new(t), false)
    }

    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.leaf(Arc::new(t), requires_grad)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = (store.uid(), id);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let trainable = !self.frozen.contains(&store.uid());
        let v = self.leaf(store.value_arc(id), trainable);
        self.params.insert(key, v);
        v
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], back: impl Fn(&Tensor<T>, &mut GradSink<'_, T>) + 'static) -> Var {
        let requires = self.record && inputs.iter().any(|v| self.requires[v.0]);
        self.values.push(Arc::new(value));
        self.requires.push(requires);
        self.backward
            .push(if requires { Some(Box::new(back)) } else { None });
        Var(self.values.len() - 1)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        ensure!(
            self.record,
            NoGradient,
            "backward requested on an inference tape"
        );
        ensure!(
            self.values[loss.0].len() == 1,
            Shape,
            "backward needs a scalar, got {:?}",
            self.values[loss.0].shape()
        );
        let n = self.values.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        if self.requires[loss.0] {
            grads[loss.0] = Some(Tensor::full(self.values[loss.0].shape(), <T as Scalar>::one()));
        }
        for i in (0..=loss.0).rev() {
            let Some(back) = self.backward[i].as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let mut sink = GradSink {
                grads: &mut grads,
                requires: &self.requires,
            };
            back(&g, &mut sink);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        ensure!(
            self.value(a).shape() == self.value(b).shape(),
            Shape,
            "{op}: {:?} vs {:?}",
            self.value(a).shape(),
            self.value(b).shape()
        );
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, &[a, b], move |g, s| {
            s.add(a, g.clone());
            s.add(b, g.clone());
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(v, &[a, b], move |g, s| {
            s.add(a, g.clone());
            s.add(b, g.map(|v| -v));
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (av, bv) = (self.value_arc(a), self.value_arc(b));
        let v = av.zip_map(&bv, |x, y| x * y)?;
        Ok(self.push(v, &[a, b], move |g, s| {
            if s.wants(a) {
                s.add(a, g.zip_map(&bv, |g, y| g * y).unwrap());
            }
            if s.wants(b) {
                s.add(b, g.zip_map(&av, |g, x| g * x).unwrap());
            }
        }))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let kt = <T as Scalar>::from_f64(k);
        let v = self.value(a).map(|x| x * kt);
        self.push(v, &[a], move |g, s| s.add(a, g.map(|v| v * kt)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.sigmoid());
        let out = Arc::new(v.clone());
        self.push(v, &[a], move |g, s| {
            s.add(a, g.zip_map(&out, |g, y| g * y * (<T as Scalar>::one() - y)).unwrap())
        })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let k = <T as Scalar>::from_f64(slope);
        let av = self.value_arc(a);
        let v = av.map(|x| if x.value() > 0.0 { x } else { x * k });
        self.push(v, &[a], move |g, s| {
            s.add(
                a,
                g.zip_map(&av, |g, x| if x.value() > 0.0 { g } else { g * k })
                    .unwrap(),
            )
        })
    }

    /// `scale * relu(x)^2 + bias` with learnable scalar scale and bias.
    pub fn star_relu(&mut self, x: Var, scale: Var, bias: Var) -> Var {
        let xv = self.value_arc(x);
        let sv = self.value(scale).data()[0];
        let bv = self.value(bias).data()[0];
        let v = xv.map(|t| {
            let r = if t.value() > 0.0 { t } else { <T as Scalar>::zero() };
            sv * r * r + bv
        });
        self.push(v, &[x, scale, bias], move |g, s| {
            if s.wants(x) {
                let two_s = <T as Scalar>::from_f64(2.0) * sv;
                s.add(
                    x,
                    g.zip_map(&xv, |g, t| {
                        if t.value() > 0.0 {
                            g * two_s * t
                        } else {
                            <T as Scalar>::zero()
                        }
                    })
                    .unwrap(),
                );
            }
            if s.wants(scale) {
                let acc = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .fold(<T as Scalar>::zero(), |acc, (&g, &t)| {
                        if t.value() > 0.0 {
                            acc + g * t * t
                        } else {
                            acc
                        }
                    });
                s.add(scale, Tensor::scalar(acc));
            }
            if s.wants(bias) {
                s.add(bias, Tensor::scalar(g.sum()));
            }
        })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (xv, wv) = (self.value_arc(x), self.value_arc(w));
        let bv = bias.map(|b| self.value_arc(b));
        let v = kernels::conv2d(&xv, &wv, bv.as_deref(), geom)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(v, &inputs, move |g, s| {
            let need_b = bias.is_some_and(|b| s.wants(b));
            let (gx, gw, gb) =
                kernels::conv2d_backward(&xv, &wv, g, geom, s.wants(x), s.wants(w), need_b);
            if let Some(gx) = gx {
                s.add(x, gx);
            }
            if let Some(gw) = gw {
                s.add(w, gw);
            }
            if let (Some(b), Some(gb)) = (bias, gb) {
                s.add(b, gb);
            }
        }))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let gv = self.value_arc(gain);
        ensure!(
            gv.len() == self.value(x).channels(),
            Config,
            "layer norm gain has {} entries for {} channels",
            gv.len(),
            self.value(x).channels()
        );
        let (out, xhat, rstds) = kernels::layer_norm_channels(self.value(x), &gv);
        Ok(self.push(out, &[x, gain], move |g, s| {
            let (gx, gg) = kernels::layer_norm_channels_backward(&xhat, &rstds, &gv, g);
            s.add(x, gx);
            s.add(gain, gg);
        }))
    }

    pub fn instance_norm(&mut self, x: Var) -> Var {
        let (out, rstds) = kernels::instance_norm(self.value(x));
        let xhat = Arc::new(out.clone());
        self.push(out, &[x], move |g, s| {
            s.add(x, kernels::instance_norm_backward(&xhat, &rstds, g))
        })
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_channels(&vals)?;
        let chans: Vec<usize> = vals.iter().map(|t| t.channels()).collect();
        let parts = parts.to_vec();
        let inputs = parts.clone();
        Ok(self.push(v, &inputs, move |g, s| {
            let mut start = 0;
            for (&p, &c) in parts.iter().zip(&chans) {
                if s.wants(p) {
                    s.add(p, slice_channels(g, start, c));
                }
                start += c;
            }
        }))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.value(x).shape();
        ensure!(
            start + len <= xs[1],
            Shape,
            "channel slice {start}..{} of {}",
            start + len,
            xs[1]
        );
        let v = slice_channels(self.value(x), start, len);
        Ok(self.push(v, &[x], move |g, s| {
            let mut full = Tensor::zeros(xs);
            let p = xs[2] * xs[3];
            for b in 0..xs[0] {
                let dst = &mut full.data_mut()[(b * xs[1] + start) * p..(b * xs[1] + start + len) * p];
                dst.copy_from_slice(g.sample_data(b));
            }
            s.add(x, full);
        }))
    }

    /// Contiguous slice `[start, start+len)` along a spatial axis.
    pub fn slice_axis(&mut self, x: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let xs = self.value(x).shape();
        ensure!(
            start + len <= axis.len_of(xs),
            Shape,
            "{axis:?} slice {start}..{} of {}",
            start + len,
            axis.len_of(xs)
        );
        let v = slice_axis(self.value(x), axis, start, len);
        Ok(self.push(v, &[x], move |g, s| {
            let mut full = Tensor::zeros(xs);
            write_axis(&mut full, g, axis, start);
            s.add(x, full);
        }))
    }

    pub fn concat_axis(&mut self, a: Var, b: Var, axis: Axis) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let other_dims_match = match axis {
            Axis::Height => sa[0] == sb[0] && sa[1] == sb[1] && sa[3] == sb[3],
            Axis::Width => sa[0] == sb[0] && sa[1] == sb[1] && sa[2] == sb[2],
        };
        ensure!(other_dims_match, Shape, "concat along {axis:?}: {sa:?} vs {sb:?}");
        let la = axis.len_of(sa);
        let lb = axis.len_of(sb);
        let mut shape = sa;
        match axis {
            Axis::Height => shape[2] = la + lb,
            Axis::Width => shape[3] = la + lb,
        }
        let mut v = Tensor::zeros(shape);
        write_axis(&mut v, self.value(a), axis, 0);
        write_axis(&mut v, self.value(b), axis, la);
        Ok(self.push(v, &[a, b], move |g, s| {
            if s.wants(a) {
                s.add(a, slice_axis(g, axis, 0, la));
            }
            if s.wants(b) {
                s.add(b, slice_axis(g, axis, la, lb));
            }
        }))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let v = kernels::upsample_nearest(self.value(x), factor);
        self.push(v, &[x], move |g, s| {
            s.add(x, kernels::upsample_nearest_backward(g, factor))
        })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let shape = self.value(x).shape();
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, &[x], move |g, s| s.add(x, Tensor::full(shape, g.data()[0])))
    }

    /// `sum_i keep_i |pred_i - target_i| / sum_i keep_i` (0 for an empty support).
    pub fn masked_l1_mean(&mut self, pred: Var, target: &Tensor<T>, keep: &Tensor<T>) -> Result<Var> {
        let pv = self.value_arc(pred);
        ensure!(
            pv.shape() == target.shape() && pv.shape() == keep.shape(),
            Shape,
            "masked L1: {:?} / {:?} / {:?}",
            pv.shape(),
            target.shape(),
            keep.shape()
        );
        let denom = keep.sum();
        let empty = denom.value() == 0.0;
        let mut acc = <T as Scalar>::zero();
        for ((&p, &t), &k) in pv.data().iter().zip(target.data()).zip(keep.data()) {
            acc += k * (p - t).abs();
        }
        let v = Tensor::scalar(if empty { <T as Scalar>::zero() } else { acc / denom });
        let target = target.clone();
        let keep = keep.clone();
        Ok(self.push(v, &[pred], move |g, s| {
            if empty {
                return;
            }
            let scale = g.data()[0] / denom;
            let mut out = Tensor::zeros(pv.shape());
            for (((o, &p), &t), &k) in out
                .data_mut()
                .iter_mut()
                .zip(pv.data())
                .zip(target.data())
                .zip(keep.data())
            {
                let d = (p - t).value();
                let sign = if d > 0.0 {
                    <T as Scalar>::one()
                } else if d < 0.0 {
                    -<T as Scalar>::one()
                } else {
                    <T as Scalar>::zero()
                };
                *o = scale * k * sign;
            }
            s.add(pred, out);
        }))
    }

    /// `mean((a - b)^2)`.
    pub fn mean_sq_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mean_sq_diff")?;
        let diff = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let inv_n = <T as Scalar>::from_f64(1.0 / diff.len() as f64);
        let v = Tensor::scalar(diff.data().iter().fold(<T as Scalar>::zero(), |acc, &d| acc + d * d) * inv_n);
        Ok(self.push(v, &[a, b], move |g, s| {
            let k = <T as Scalar>::from_f64(2.0) * inv_n * g.data()[0];
            if s.wants(a) {
                s.add(a, diff.map(|d| d * k));
            }
            if s.wants(b) {
                s.add(b, diff.map(|d| -d * k));
            }
        }))
    }

    /// `sum_i w_i softplus(sign * z_i) / sum_i w_i`; 0 when the weights vanish.
    pub fn softplus_weighted_mean(&mut self, z: Var, sign: f64, weights: &Tensor<T>) -> Result<Var> {
        let zv = self.value_arc(z);
        ensure!(
            zv.shape() == weights.shape(),
            Shape,
            "logits {:?} vs weights {:?}",
            zv.shape(),
            weights.shape()
        );
        let sg = <T as Scalar>::from_f64(sign);
        let denom = weights.sum();
        let empty = denom.value() == 0.0;
        let acc = zv
            .data()
            .iter()
            .zip(weights.data())
            .fold(<T as Scalar>::zero(), |acc, (&z, &w)| acc + w * (sg * z).softplus());
        let v = Tensor::scalar(if empty { <T as Scalar>::zero() } else { acc / denom });
        let weights = weights.clone();
        Ok(self.push(v, &[z], move |g, s| {
            if empty {
                return;
            }
            let k = g.data()[0] / denom;
            let out = zv
                .zip_map(&weights, |z, w| k * w * sg * (sg * z).sigmoid())
                .unwrap();
            s.add(z, out);
        }))
    }

    /// `sum_i k_i * x_i` over scalar vars.
    pub fn linear_combination(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc = <T as Scalar>::zero();
        for &(v, k) in terms {
            ensure!(self.value(v).len() == 1, Shape, "linear_combination expects scalars");
            acc += <T as Scalar>::from_f64(k) * self.value(v).data()[0];
        }
        let terms = terms.to_vec();
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(Tensor::scalar(acc), &inputs, move |g, s| {
            for &(v, k) in &terms {
                s.add(v, Tensor::scalar(g.data()[0] * <T as Scalar>::from_f64(k)));
            }
        }))
    }
}

impl<T: FftScalar> Graph<T> {
    pub fn rfft(&mut self, x: Var, axis: Axis) -> Var {
        let len = axis.len_of(self.value(x).shape());
        let v = kernels::rfft_axis(self.value(x), axis);
        self.push(v, &[x], move |g, s| {
            s.add(x, kernels::rfft_axis_backward(g, axis, len))
        })
    }

    pub fn irfft(&mut self, y: Var, axis: Axis, len: usize) -> Result<Var> {
        ensure!(
            axis.len_of(self.value(y).shape()) == len / 2 + 1 && self.value(y).channels() % 2 == 0,
            Shape,
            "irfft to length {len} from {:?}",
            self.value(y).shape()
        );
        let v = kernels::irfft_axis(self.value(y), axis, len);
        Ok(self.push(v, &[y], move |g, s| {
            s.add(y, kernels::irfft_axis_backward(g, axis))
        }))
    }

    pub fn cfft(&mut self, y: Var, axis: Axis, inverse: bool) -> Var {
        let v = kernels::cfft_axis(self.value(y), axis, inverse);
        self.push(v, &[y], move |g, s| {
            s.add(y, kernels::cfft_axis(g, axis, !inverse))
        })
    }
}

pub(crate) fn slice_channels<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Tensor<T> {
    let [n, _, h, w] = x.shape();
    let p = h * w;
    let mut data = Vec::with_capacity(n * len * p);
    for b in 0..n {
        let s = x.sample_data(b);
        data.extend_from_slice(&s[start * p..(start + len) * p]);
    }
    Tensor::new([n, len, h, w], data).expect("slice shape")
}

pub(crate) fn slice_axis<T: Scalar>(x: &Tensor<T>, axis: Axis, start: usize, len: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    match axis {
        Axis::Height => Tensor::from_fn([n, c, len, w], |b, ch, y, xx| x.at(b, ch, start + y, xx)),
        Axis::Width => Tensor::from_fn([n, c, h, len], |b, ch, y, xx| x.at(b, ch, y, start + xx)),
    }
}

fn write_axis<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>, axis: Axis, start: usize) {
    let [n, c, h, w] = src.shape();
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let (yy, xx) = match axis {
                        Axis::Height => (y + start, x),
                        Axis::Width => (y, x + start),
                    };
                    dst.set(b, ch, yy, xx, src.at(b, ch, y, x));
                }
            }
        }
    }
}
