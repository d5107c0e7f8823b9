use rand::Rng;

use crate::{Error, Result};

use super::tensor::{ParamTensor, Tensor};
use super::Real;

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// Fully connected layer; input must be a flat vector.
    Dense { out: usize },
    /// 2-d convolution over `[C, H, W]` items.
    Conv2d { out_ch: usize, kernel: usize, stride: usize, pad: usize },
    /// Collapses the item to a flat vector.
    Flatten,
    /// Reinterprets the item under a new shape with the same element count.
    Reshape { shape: Vec<usize> },
    /// Nearest-neighbour 2x upsampling of `[C, H, W]` items.
    Upsample2x,
}

/// One pipeline stage: kind, then optional layer norm, then activation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub norm: bool,
    pub activation: Activation,
}

impl LayerSpec {
    fn plain(kind: LayerKind) -> Self {
        LayerSpec { kind, norm: false, activation: Activation::Identity }
    }

    pub fn dense(out: usize) -> Self {
        Self::plain(LayerKind::Dense { out })
    }

    pub fn conv(out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self::plain(LayerKind::Conv2d { out_ch, kernel, stride, pad })
    }

    pub fn flatten() -> Self {
        Self::plain(LayerKind::Flatten)
    }

    pub fn reshape(shape: &[usize]) -> Self {
        Self::plain(LayerKind::Reshape { shape: shape.to_vec() })
    }

    pub fn upsample2x() -> Self {
        Self::plain(LayerKind::Upsample2x)
    }

    pub fn norm(mut self) -> Self {
        self.norm = true;
        self
    }

    pub fn relu(mut self) -> Self {
        self.activation = Activation::Relu;
        self
    }

    pub fn tanh(mut self) -> Self {
        self.activation = Activation::Tanh;
        self
    }
}

/// Architecture description: item input shape plus the layer pipeline.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(input_shape: &[usize]) -> Self {
        NetworkSpec { input_shape: input_shape.to_vec(), layers: Vec::new() }
    }

    pub fn layer(mut self, layer: LayerSpec) -> Self {
        self.layers.push(layer);
        self
    }

    /// Item shape produced by each layer, validating the whole pipeline.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer_output_shape(&layer.kind, &cur)
                .map_err(|e| Error::Usage(format!("layer {i}: {e}")))?;
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.layer_shapes()?.last().cloned().unwrap_or_else(|| self.input_shape.clone()))
    }
}

fn layer_output_shape(kind: &LayerKind, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
    match kind {
        LayerKind::Dense { out } => {
            if input.len() != 1 {
                return Err(format!("dense layer needs a flat input, got shape {input:?}"));
            }
            Ok(vec![*out])
        }
        LayerKind::Conv2d { out_ch, kernel, stride, pad } => {
            if input.len() != 3 {
                return Err(format!("conv layer needs a [C, H, W] input, got shape {input:?}"));
            }
            if *kernel == 0 || *stride == 0 {
                return Err("conv kernel and stride must be positive".to_string());
            }
            let (h, w) = (input[1], input[2]);
            if h + 2 * pad < *kernel || w + 2 * pad < *kernel {
                return Err(format!(
                    "conv kernel {kernel} does not fit input {h}x{w} with pad {pad}"
                ));
            }
            let oh = (h + 2 * pad - kernel) / stride + 1;
            let ow = (w + 2 * pad - kernel) / stride + 1;
            Ok(vec![*out_ch, oh, ow])
        }
        LayerKind::Flatten => Ok(vec![input.iter().product()]),
        LayerKind::Reshape { shape } => {
            let have: usize = input.iter().product();
            let want: usize = shape.iter().product();
            if have != want {
                return Err(format!("cannot reshape {input:?} ({have} elements) to {shape:?}"));
            }
            Ok(shape.clone())
        }
        LayerKind::Upsample2x => {
            if input.len() != 3 {
                return Err(format!("upsample layer needs a [C, H, W] input, got shape {input:?}"));
            }
            Ok(vec![input[0], input[1] * 2, input[2] * 2])
        }
    }
}

/// Indices into `Network::params` for one layer's tensors.
#[derive(Clone, Debug, Default)]
struct LayerParams {
    weight: Option<usize>,
    bias: Option<usize>,
    norm_gain: Option<usize>,
    norm_bias: Option<usize>,
}

/// A feed-forward network with flat parameter storage.
#[derive(Clone, Debug)]
pub struct Network<T> {
    spec: NetworkSpec,
    shapes: Vec<Vec<usize>>,
    params: Vec<ParamTensor<T>>,
    layer_params: Vec<LayerParams>,
}

/// Per-parameter gradient buffers that mirror a network's parameter list.
/// Separate from the network so batch chunks can accumulate independently
/// and be merged in a fixed order.
#[derive(Clone, Debug)]
pub struct GradStore<T> {
    bufs: Vec<Vec<T>>,
}

impl<T: Real> GradStore<T> {
    pub fn zeros_of(net: &Network<T>) -> Self {
        GradStore { bufs: net.params.iter().map(|p| vec![T::zero(); p.len()]).collect() }
    }

    pub fn add(&mut self, other: &GradStore<T>) {
        assert_eq!(self.bufs.len(), other.bufs.len(), "gradient stores differ in layout");
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            for (x, y) in a.iter_mut().zip(b) {
                *x = *x + *y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for buf in &mut self.bufs {
            for x in buf.iter_mut() {
                *x = *x * s;
            }
        }
    }

    pub fn buf(&self, i: usize) -> &[T] {
        &self.bufs[i]
    }
}

/// Intermediate values recorded by [`Network::forward_tape`].
pub struct Tape<T> {
    batch: usize,
    /// Input to each layer's kind stage (entry 0 is the network input).
    inputs: Vec<Tensor<T>>,
    /// Normalised pre-affine values, for layers with norm.
    xhat: Vec<Option<Tensor<T>>>,
    /// Per-item reciprocal standard deviation, for layers with norm.
    inv_std: Vec<Option<Vec<T>>>,
    /// Post-activation output per layer.
    outputs: Vec<Tensor<T>>,
}

impl<T> Tape<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

impl<T: Real> Network<T> {
    /// Builds the network and initialises parameters: weights and biases from
    /// a uniform distribution scaled by the reciprocal square root of the
    /// fan-in, norm gains at one, norm biases at zero.
    pub fn new<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        let shapes = spec.layer_shapes()?;
        let mut params = Vec::new();
        let mut layer_params = Vec::new();
        let mut cur_shape = spec.input_shape.clone();

        for (i, layer) in spec.layers.iter().enumerate() {
            let mut lp = LayerParams::default();
            match &layer.kind {
                LayerKind::Dense { out } => {
                    let fan_in = cur_shape[0];
                    let bound = T::from_f64(1.0 / (fan_in as f64).sqrt());
                    let mut w = ParamTensor::zeros(format!("layers.{i}.weight"), &[*out, fan_in]);
                    for v in w.values.iter_mut() {
                        *v = T::uniform_sym(rng, bound);
                    }
                    let mut b = ParamTensor::zeros(format!("layers.{i}.bias"), &[*out]);
                    for v in b.values.iter_mut() {
                        *v = T::uniform_sym(rng, bound);
                    }
                    lp.weight = Some(params.len());
                    params.push(w);
                    lp.bias = Some(params.len());
                    params.push(b);
                }
                LayerKind::Conv2d { out_ch, kernel, .. } => {
                    let in_ch = cur_shape[0];
                    let fan_in = in_ch * kernel * kernel;
                    let bound = T::from_f64(1.0 / (fan_in as f64).sqrt());
                    let mut w = ParamTensor::zeros(
                        format!("layers.{i}.weight"),
                        &[*out_ch, in_ch, *kernel, *kernel],
                    );
                    for v in w.values.iter_mut() {
                        *v = T::uniform_sym(rng, bound);
                    }
                    let mut b = ParamTensor::zeros(format!("layers.{i}.bias"), &[*out_ch]);
                    for v in b.values.iter_mut() {
                        *v = T::uniform_sym(rng, bound);
                    }
                    lp.weight = Some(params.len());
                    params.push(w);
                    lp.bias = Some(params.len());
                    params.push(b);
                }
                LayerKind::Flatten | LayerKind::Reshape { .. } | LayerKind::Upsample2x => {}
            }
            let out_shape = &shapes[i];
            if layer.norm {
                let mut g = ParamTensor::zeros(format!("layers.{i}.norm_gain"), out_shape);
                g.values.fill(T::one());
                let nb = ParamTensor::zeros(format!("layers.{i}.norm_bias"), out_shape);
                lp.norm_gain = Some(params.len());
                params.push(g);
                lp.norm_bias = Some(params.len());
                params.push(nb);
            }
            layer_params.push(lp);
            cur_shape = out_shape.clone();
        }

        Ok(Network { spec, shapes, params, layer_params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().map(Vec::as_slice).unwrap_or(&self.spec.input_shape)
    }

    pub fn params(&self) -> &[ParamTensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ParamTensor<T>] {
        &mut self.params
    }

    /// Parameters labelled `prefix.layers.<i>.<kind>`, for checkpointing.
    pub fn named_params<'a>(&'a self, prefix: &str) -> Vec<(String, &'a ParamTensor<T>)> {
        self.params.iter().map(|p| (format!("{prefix}.{}", p.name), p)).collect()
    }

    pub fn named_params_mut<'a>(
        &'a mut self,
        prefix: &str,
    ) -> Vec<(String, &'a mut ParamTensor<T>)> {
        self.params.iter_mut().map(|p| (format!("{prefix}.{}", p.name), p)).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(ParamTensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    /// Adds a gradient store into the parameters' `grad` fields.
    pub fn apply_grads(&mut self, grads: &GradStore<T>) {
        assert_eq!(grads.bufs.len(), self.params.len(), "gradient store does not match network");
        for (p, buf) in self.params.iter_mut().zip(&grads.bufs) {
            for (g, v) in p.grad.iter_mut().zip(buf) {
                *g = *g + *v;
            }
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        let shape = x.shape();
        if shape.is_empty() || shape[1..] != self.spec.input_shape[..] {
            return Err(Error::Usage(format!(
                "input shape {:?} does not match network input {:?} (plus batch dim)",
                shape, self.spec.input_shape
            )));
        }
        Ok(shape[0])
    }

    /// Forward pass without recording.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = self.check_input(x)?;
        let mut cur = x.clone();
        for (i, layer) in self.spec.layers.iter().enumerate() {
            cur = self.run_layer(i, layer, &cur, batch)?.0;
        }
        Ok(cur)
    }

    /// Forward pass that records the tape needed by [`Network::backward`].
    pub fn forward_tape(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tape<T>)> {
        let batch = self.check_input(x)?;
        let n = self.spec.layers.len();
        let mut tape = Tape {
            batch,
            inputs: Vec::with_capacity(n),
            xhat: Vec::with_capacity(n),
            inv_std: Vec::with_capacity(n),
            outputs: Vec::with_capacity(n),
        };
        let mut cur = x.clone();
        for (i, layer) in self.spec.layers.iter().enumerate() {
            tape.inputs.push(cur.clone());
            let (out, norm_rec) = self.run_layer(i, layer, &cur, batch)?;
            let (xhat, inv_std) = norm_rec.map(|(a, b)| (Some(a), Some(b))).unwrap_or((None, None));
            tape.xhat.push(xhat);
            tape.inv_std.push(inv_std);
            tape.outputs.push(out.clone());
            cur = out;
        }
        Ok((cur, tape))
    }

    #[allow(clippy::type_complexity)]
    fn run_layer(
        &self,
        i: usize,
        layer: &LayerSpec,
        x: &Tensor<T>,
        batch: usize,
    ) -> Result<(Tensor<T>, Option<(Tensor<T>, Vec<T>)>)> {
        let out_item = &self.shapes[i];
        let lp = &self.layer_params[i];

        let mut shape = Vec::with_capacity(out_item.len() + 1);
        shape.push(batch);
        shape.extend_from_slice(out_item);
        let mut y = Tensor::zeros(&shape);

        match &layer.kind {
            LayerKind::Dense { out } => {
                let w = &self.params[lp.weight.unwrap()];
                let b = &self.params[lp.bias.unwrap()];
                let fan_in = x.item_len();
                dense_fwd(x.data(), &w.values, &b.values, batch, fan_in, *out, y.data_mut());
            }
            LayerKind::Conv2d { out_ch, kernel, stride, pad } => {
                let w = &self.params[lp.weight.unwrap()];
                let b = &self.params[lp.bias.unwrap()];
                let in_shape = if i == 0 { &self.spec.input_shape } else { &self.shapes[i - 1] };
                let dims = ConvDims {
                    in_ch: in_shape[0],
                    ih: in_shape[1],
                    iw: in_shape[2],
                    out_ch: *out_ch,
                    oh: out_item[1],
                    ow: out_item[2],
                    kernel: *kernel,
                    stride: *stride,
                    pad: *pad,
                };
                conv_fwd(x.data(), &w.values, &b.values, batch, &dims, y.data_mut());
            }
            LayerKind::Flatten | LayerKind::Reshape { .. } => {
                y.data_mut().copy_from_slice(x.data());
            }
            LayerKind::Upsample2x => {
                let in_shape = if i == 0 { &self.spec.input_shape } else { &self.shapes[i - 1] };
                upsample_fwd(x.data(), batch, in_shape[0], in_shape[1], in_shape[2], y.data_mut());
            }
        }

        let mut norm_rec = None;
        if layer.norm {
            let gain = &self.params[lp.norm_gain.unwrap()];
            let bias = &self.params[lp.norm_bias.unwrap()];
            let n = out_item.iter().product();
            let mut xhat = Tensor::zeros(&shape);
            let mut inv_std = vec![T::zero(); batch];
            layernorm_fwd(
                y.data_mut(),
                &gain.values,
                &bias.values,
                batch,
                n,
                xhat.data_mut(),
                &mut inv_std,
            );
            norm_rec = Some((xhat, inv_std));
        }

        match layer.activation {
            Activation::Identity => {}
            Activation::Relu => {
                for v in y.data_mut() {
                    if *v < T::zero() {
                        *v = T::zero();
                    }
                }
            }
            Activation::Tanh => {
                for v in y.data_mut() {
                    *v = v.tanh();
                }
            }
        }

        Ok((y, norm_rec))
    }

    /// Reverse pass. `dy` is the loss gradient with respect to the network
    /// output; parameter gradients are accumulated into `grads` and the
    /// gradient with respect to the input is returned.
    pub fn backward(&self, tape: &Tape<T>, dy: &Tensor<T>, grads: &mut GradStore<T>) -> Result<Tensor<T>> {
        if grads.bufs.len() != self.params.len() {
            return Err(Error::Usage("gradient store does not match network".to_string()));
        }
        let batch = tape.batch;
        let out_shape = self.output_shape();
        if dy.batch() != batch || dy.shape()[1..] != out_shape[..] {
            return Err(Error::Usage(format!(
                "output gradient shape {:?} does not match network output {:?} with batch {}",
                dy.shape(),
                out_shape,
                batch
            )));
        }

        let mut g = dy.clone();
        for i in (0..self.spec.layers.len()).rev() {
            let layer = &self.spec.layers[i];
            let lp = &self.layer_params[i];
            let out = &tape.outputs[i];

            match layer.activation {
                Activation::Identity => {}
                Activation::Relu => {
                    for (gv, yv) in g.data_mut().iter_mut().zip(out.data()) {
                        if *yv <= T::zero() {
                            *gv = T::zero();
                        }
                    }
                }
                Activation::Tanh => {
                    for (gv, yv) in g.data_mut().iter_mut().zip(out.data()) {
                        *gv = *gv * (T::one() - *yv * *yv);
                    }
                }
            }

            if layer.norm {
                let gain = &self.params[lp.norm_gain.unwrap()];
                let xhat = tape.xhat[i].as_ref().expect("norm layer missing tape record");
                let inv_std = tape.inv_std[i].as_ref().expect("norm layer missing tape record");
                let n = xhat.item_len();
                let mut dx = Tensor::zeros(g.shape());
                {
                    let (gain_idx, bias_idx) = (lp.norm_gain.unwrap(), lp.norm_bias.unwrap());
                    // Split borrow: gain grad and bias grad buffers are distinct.
                    let (dgain, dbias) = two_bufs(&mut grads.bufs, gain_idx, bias_idx);
                    layernorm_bwd(
                        g.data(),
                        xhat.data(),
                        inv_std,
                        &gain.values,
                        batch,
                        n,
                        dx.data_mut(),
                        dgain,
                        dbias,
                    );
                }
                g = dx;
            }

            let input = &tape.inputs[i];
            match &layer.kind {
                LayerKind::Dense { out } => {
                    let w = &self.params[lp.weight.unwrap()];
                    let fan_in = input.item_len();
                    let mut dx = Tensor::zeros(input.shape());
                    let (w_idx, b_idx) = (lp.weight.unwrap(), lp.bias.unwrap());
                    let (dw, db) = two_bufs(&mut grads.bufs, w_idx, b_idx);
                    dense_bwd(
                        g.data(),
                        input.data(),
                        &w.values,
                        batch,
                        fan_in,
                        *out,
                        dx.data_mut(),
                        dw,
                        db,
                    );
                    g = dx;
                }
                LayerKind::Conv2d { out_ch, kernel, stride, pad } => {
                    let w = &self.params[lp.weight.unwrap()];
                    let in_shape = &input.shape()[1..];
                    let out_item = &self.shapes[i];
                    let dims = ConvDims {
                        in_ch: in_shape[0],
                        ih: in_shape[1],
                        iw: in_shape[2],
                        out_ch: *out_ch,
                        oh: out_item[1],
                        ow: out_item[2],
                        kernel: *kernel,
                        stride: *stride,
                        pad: *pad,
                    };
                    let mut dx = Tensor::zeros(input.shape());
                    let (w_idx, b_idx) = (lp.weight.unwrap(), lp.bias.unwrap());
                    let (dw, db) = two_bufs(&mut grads.bufs, w_idx, b_idx);
                    conv_bwd(
                        g.data(),
                        input.data(),
                        &w.values,
                        batch,
                        &dims,
                        dx.data_mut(),
                        dw,
                        db,
                    );
                    g = dx;
                }
                LayerKind::Flatten | LayerKind::Reshape { .. } => {
                    g = g.reshaped(input.shape())?;
                }
                LayerKind::Upsample2x => {
                    let in_shape = &input.shape()[1..];
                    let mut dx = Tensor::zeros(input.shape());
                    upsample_bwd(g.data(), batch, in_shape[0], in_shape[1], in_shape[2], dx.data_mut());
                    g = dx;
                }
            }
        }
        Ok(g)
    }
}

/// Disjoint mutable borrows of two gradient buffers.
fn two_bufs<T>(bufs: &mut [Vec<T>], a: usize, b: usize) -> (&mut [T], &mut [T]) {
    assert_ne!(a, b);
    if a < b {
        let (lo, hi) = bufs.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = bufs.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

fn dense_fwd<T: Real>(x: &[T], w: &[T], b: &[T], batch: usize, fin: usize, fout: usize, y: &mut [T]) {
    for item in 0..batch {
        let xr = &x[item * fin..(item + 1) * fin];
        let yr = &mut y[item * fout..(item + 1) * fout];
        for (o, yv) in yr.iter_mut().enumerate() {
            let wr = &w[o * fin..(o + 1) * fin];
            let mut acc = b[o];
            for (wv, xv) in wr.iter().zip(xr) {
                acc = acc + *wv * *xv;
            }
            *yv = acc;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn dense_bwd<T: Real>(
    dy: &[T],
    x: &[T],
    w: &[T],
    batch: usize,
    fin: usize,
    fout: usize,
    dx: &mut [T],
    dw: &mut [T],
    db: &mut [T],
) {
    for item in 0..batch {
        let dyr = &dy[item * fout..(item + 1) * fout];
        let xr = &x[item * fin..(item + 1) * fin];
        let dxr = &mut dx[item * fin..(item + 1) * fin];
        for (o, g) in dyr.iter().enumerate() {
            let g = *g;
            let wr = &w[o * fin..(o + 1) * fin];
            let dwr = &mut dw[o * fin..(o + 1) * fin];
            db[o] = db[o] + g;
            for i in 0..fin {
                dxr[i] = dxr[i] + wr[i] * g;
                dwr[i] = dwr[i] + xr[i] * g;
            }
        }
    }
}

struct ConvDims {
    in_ch: usize,
    ih: usize,
    iw: usize,
    out_ch: usize,
    oh: usize,
    ow: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl ConvDims {
    /// Output column range for which `ox * stride + kx - pad` lands inside
    /// `[0, iw)`, as an inclusive-exclusive pair.
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(self.stride) };
        if self.iw + self.pad <= kx {
            return (0, 0);
        }
        let hi = ((self.iw + self.pad - kx - 1) / self.stride + 1).min(self.ow);
        (lo.min(hi), hi)
    }

    fn iy(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = oy * self.stride + ky;
        if iy < self.pad || iy - self.pad >= self.ih {
            None
        } else {
            Some(iy - self.pad)
        }
    }
}

fn conv_fwd<T: Real>(x: &[T], w: &[T], b: &[T], batch: usize, d: &ConvDims, y: &mut [T]) {
    let in_plane = d.ih * d.iw;
    let out_plane = d.oh * d.ow;
    let in_item = d.in_ch * in_plane;
    let out_item = d.out_ch * out_plane;
    for item in 0..batch {
        let xb = &x[item * in_item..(item + 1) * in_item];
        let yb = &mut y[item * out_item..(item + 1) * out_item];
        for oc in 0..d.out_ch {
            let yc = &mut yb[oc * out_plane..(oc + 1) * out_plane];
            yc.fill(b[oc]);
            for ic in 0..d.in_ch {
                let xc = &xb[ic * in_plane..(ic + 1) * in_plane];
                let wc = &w[(oc * d.in_ch + ic) * d.kernel * d.kernel..];
                for ky in 0..d.kernel {
                    for kx in 0..d.kernel {
                        let wv = wc[ky * d.kernel + kx];
                        let (lo, hi) = d.ox_range(kx);
                        for oy in 0..d.oh {
                            let Some(iy) = d.iy(oy, ky) else { continue };
                            let yrow = &mut yc[oy * d.ow..(oy + 1) * d.ow];
                            let xrow = &xc[iy * d.iw..(iy + 1) * d.iw];
                            for ox in lo..hi {
                                let ix = ox * d.stride + kx - d.pad;
                                yrow[ox] = yrow[ox] + wv * xrow[ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_bwd<T: Real>(
    dy: &[T],
    x: &[T],
    w: &[T],
    batch: usize,
    d: &ConvDims,
    dx: &mut [T],
    dw: &mut [T],
    db: &mut [T],
) {
    let in_plane = d.ih * d.iw;
    let out_plane = d.oh * d.ow;
    let in_item = d.in_ch * in_plane;
    let out_item = d.out_ch * out_plane;
    for item in 0..batch {
        let xb = &x[item * in_item..(item + 1) * in_item];
        let dxb = &mut dx[item * in_item..(item + 1) * in_item];
        let dyb = &dy[item * out_item..(item + 1) * out_item];
        for oc in 0..d.out_ch {
            let dyc = &dyb[oc * out_plane..(oc + 1) * out_plane];
            let mut bacc = T::zero();
            for g in dyc {
                bacc = bacc + *g;
            }
            db[oc] = db[oc] + bacc;
            for ic in 0..d.in_ch {
                let xc = &xb[ic * in_plane..(ic + 1) * in_plane];
                let dxc = &mut dxb[ic * in_plane..(ic + 1) * in_plane];
                let wbase = (oc * d.in_ch + ic) * d.kernel * d.kernel;
                for ky in 0..d.kernel {
                    for kx in 0..d.kernel {
                        let wv = w[wbase + ky * d.kernel + kx];
                        let mut wacc = T::zero();
                        let (lo, hi) = d.ox_range(kx);
                        for oy in 0..d.oh {
                            let Some(iy) = d.iy(oy, ky) else { continue };
                            let dyrow = &dyc[oy * d.ow..(oy + 1) * d.ow];
                            let xrow = &xc[iy * d.iw..(iy + 1) * d.iw];
                            let dxrow = &mut dxc[iy * d.iw..(iy + 1) * d.iw];
                            for ox in lo..hi {
                                let ix = ox * d.stride + kx - d.pad;
                                let g = dyrow[ox];
                                dxrow[ix] = dxrow[ix] + wv * g;
                                wacc = wacc + xrow[ix] * g;
                            }
                        }
                        dw[wbase + ky * d.kernel + kx] = dw[wbase + ky * d.kernel + kx] + wacc;
                    }
                }
            }
        }
    }
}

/// Normalises each item of `y` in place over all its elements, then applies
/// the learned affine. Writes the pre-affine normalised values to `xhat` and
/// the per-item reciprocal standard deviation to `inv_std`.
#[allow(clippy::too_many_arguments)]
fn layernorm_fwd<T: Real>(
    y: &mut [T],
    gain: &[T],
    bias: &[T],
    batch: usize,
    n: usize,
    xhat: &mut [T],
    inv_std: &mut [T],
) {
    debug_assert_eq!(y.len(), batch * n);
    let nf = T::from_f64(n as f64);
    let eps = T::from_f64(NORM_EPS);
    for item in 0..batch {
        let yr = &mut y[item * n..(item + 1) * n];
        let xr = &mut xhat[item * n..(item + 1) * n];
        let mut mean = T::zero();
        for v in yr.iter() {
            mean = mean + *v;
        }
        mean = mean / nf;
        let mut var = T::zero();
        for v in yr.iter() {
            let d = *v - mean;
            var = var + d * d;
        }
        var = var / nf;
        let istd = T::one() / (var + eps).sqrt();
        inv_std[item] = istd;
        for i in 0..n {
            let xh = (yr[i] - mean) * istd;
            xr[i] = xh;
            yr[i] = gain[i] * xh + bias[i];
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn layernorm_bwd<T: Real>(
    g: &[T],
    xhat: &[T],
    inv_std: &[T],
    gain: &[T],
    batch: usize,
    n: usize,
    dx: &mut [T],
    dgain: &mut [T],
    dbias: &mut [T],
) {
    let nf = T::from_f64(n as f64);
    for item in 0..batch {
        let gr = &g[item * n..(item + 1) * n];
        let xr = &xhat[item * n..(item + 1) * n];
        let dxr = &mut dx[item * n..(item + 1) * n];
        let istd = inv_std[item];
        let mut mt = T::zero();
        let mut mtx = T::zero();
        for i in 0..n {
            let t = gr[i] * gain[i];
            dgain[i] = dgain[i] + gr[i] * xr[i];
            dbias[i] = dbias[i] + gr[i];
            mt = mt + t;
            mtx = mtx + t * xr[i];
        }
        mt = mt / nf;
        mtx = mtx / nf;
        for i in 0..n {
            let t = gr[i] * gain[i];
            dxr[i] = istd * (t - mt - xr[i] * mtx);
        }
    }
}

fn upsample_fwd<T: Real>(x: &[T], batch: usize, c: usize, h: usize, w: usize, y: &mut [T]) {
    let (oh, ow) = (h * 2, w * 2);
    for plane in 0..batch * c {
        let xp = &x[plane * h * w..(plane + 1) * h * w];
        let yp = &mut y[plane * oh * ow..(plane + 1) * oh * ow];
        for iy in 0..h {
            for ix in 0..w {
                let v = xp[iy * w + ix];
                let base = (iy * 2) * ow + ix * 2;
                yp[base] = v;
                yp[base + 1] = v;
                yp[base + ow] = v;
                yp[base + ow + 1] = v;
            }
        }
    }
}

fn upsample_bwd<T: Real>(dy: &[T], batch: usize, c: usize, h: usize, w: usize, dx: &mut [T]) {
    let (oh, ow) = (h * 2, w * 2);
    for plane in 0..batch * c {
        let dyp = &dy[plane * oh * ow..(plane + 1) * oh * ow];
        let dxp = &mut dx[plane * h * w..(plane + 1) * h * w];
        for iy in 0..h {
            for ix in 0..w {
                let base = (iy * 2) * ow + ix * 2;
                dxp[iy * w + ix] = dxp[iy * w + ix]
                    + dyp[base]
                    + dyp[base + 1]
                    + dyp[base + ow]
                    + dyp[base + ow + 1];
            }
        }
    }
}
