//! Minimal reverse-mode automatic differentiation on dynamic-rank f64 tensors.
//!
//! A `Tape` records every operation eagerly; `backward` walks the record in
//! reverse and accumulates gradients per node. All operations are
//! deterministic, so repeated evaluation of the same graph on the same
//! inputs is bit-identical. Feature maps use HWC layout throughout.

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, IxDyn};

pub type Tensor = ArrayD<f64>;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

type BackwardFn = Box<dyn Fn(&[Node], &Tensor, &mut [Option<Tensor>])>;

struct Node {
    value: Tensor,
    backward: Option<BackwardFn>,
}

/// Gradients produced by `Tape::backward`, indexed by `Var`.
pub struct Grads {
    slots: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.slots.get(v.id).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.slots.get_mut(v.id).and_then(|s| s.take())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.id].value.shape()
    }

    /// Scalar value of a 0-d or single-element node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1, "scalar_value on non-scalar node");
        *t.iter().next().expect("non-empty tensor")
    }

    fn push(&mut self, value: Tensor, backward: Option<BackwardFn>) -> Var {
        self.nodes.push(Node { value, backward });
        Var { id: self.nodes.len() - 1 }
    }

    /// Input node; receives a gradient slot like any other.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, None)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(ndarray::arr0(v).into_dyn())
    }

    pub fn leaf2(&mut self, value: Array2<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn leaf1(&mut self, value: Array1<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    // ---- elementwise binary ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = &self.nodes[a.id].value + &self.nodes[b.id].value;
        self.push(
            value,
            Some(Box::new(move |_n, g, grads| {
                accumulate(&mut grads[a.id], g.clone());
                accumulate(&mut grads[b.id], g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = &self.nodes[a.id].value - &self.nodes[b.id].value;
        self.push(
            value,
            Some(Box::new(move |_n, g, grads| {
                accumulate(&mut grads[a.id], g.clone());
                accumulate(&mut grads[b.id], g.mapv(|x| -x));
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = &self.nodes[a.id].value * &self.nodes[b.id].value;
        self.push(
            value,
            Some(Box::new(move |n, g, grads| {
                accumulate(&mut grads[a.id], g * &n[b.id].value);
                accumulate(&mut grads[b.id], g * &n[a.id].value);
            })),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "div: shape mismatch");
        let value = &self.nodes[a.id].value / &self.nodes[b.id].value;
        self.push(
            value,
            Some(Box::new(move |n, g, grads| {
                let bv = &n[b.id].value;
                accumulate(&mut grads[a.id], g / bv);
                let av = &n[a.id].value;
                accumulate(&mut grads[b.id], -(g * av) / (bv * bv));
            })),
        )
    }

    // ---- elementwise unary ----

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.id].value.mapv(|x| x * c);
        self.push(
            value,
            Some(Box::new(move |_n, g, grads| {
                accumulate(&mut grads[a.id], g.mapv(|x| x * c));
            })),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.id].value.mapv(|x| x + c);
        self.push(
            value,
            Some(Box::new(move |_n, g, grads| {
                accumulate(&mut grads[a.id], g.clone());
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.id].value.mapv(sigmoid_scalar);
        let y = value.clone();
        self.push(
            value,
            Some(Box::new(move |_n, g, grads| {
                accumulate(&mut grads[a.id], g * &(y.mapv(|s| s * (1.0 - s))));
            })),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.id].value.mapv(f64::tanh);
        let y = value.clone();
        self.push(
            value,
            Some(Box::new(move |_n, g, grads| {
                accumulate(&mut grads[a.id], g * &(y.mapv(|t| 1.0 - t * t)));
            })),
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.nodes[a.id].value.mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(
            value,
            Some(Box::new(move |n, g, grads| {
                let mask = n[a.id].value.mapv(|x| if x > 0.0 { 1.0 } else { slope });
                accumulate(&mut grads[a.id], g * &mask);
            })),
        )
    }

    /// Numerically stable ln(1 + exp(x)).
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.nodes[a.id].value.mapv(softplus_scalar);
        self.push(
            value,
            Some(Box::new(move |n, g, grads| {
                let s = n[a.id].value.mapv(sigmoid_scalar);
                accumulate(&mut grads[a.id], g * &s);
            })),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.nodes[a.id].value.mapv(f64::exp);
        let y = value.clone();
        self.push(
            value,
            Some(Box::new(move |_n, g, grads| {
                accumulate(&mut grads[a.id], g * &y);
            })),
        )
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.nodes[a.id].value.mapv(f64::ln);
        self.push(
            value,
            Some(Box::new(move |n, g, grads| {
                accumulate(&mut grads[a.id], g / &n[a.id].value);
            })),
        )
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.nodes[a.id].value.mapv(f64::sqrt);
        let y = value.clone();
        self.push(
            value,
            Some(Box::new(move |_n, g, grads| {
                accumulate(&mut grads[a.id], g / &(y.mapv(|s| 2.0 * s)));
            })),
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.nodes[a.id].value.mapv(f64::abs);
        self.push(
            value,
            Some(Box::new(move |n, g, grads| {
                let sign = n[a.id].value.mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                accumulate(&mut grads[a.id], g * &sign);
            })),
        )
    }

    /// Clamp with pass-through gradient strictly inside (lo, hi), zero outside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.nodes[a.id].value.mapv(|x| x.clamp(lo, hi));
        self.push(
            value,
            Some(Box::new(move |n, g, grads| {
                let mask = n[a.id].value.mapv(|x| if x > lo && x < hi { 1.0 } else { 0.0 });
                accumulate(&mut grads[a.id], g * &mask);
            })),
        )
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let src_shape: Vec<usize> = self.shape(a).to_vec();
        let value = reshaped(&self.nodes[a.id].value, shape);
        self.push(
            value,
            Some(Box::new(move |_n, g, grads| {
                accumulate(&mut grads[a.id], reshaped(g, &src_shape));
            })),
        )
    }

    /// Broadcast along axes where the source dimension is 1 (ranks must match).
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Var {
        let src_shape: Vec<usize> = self.shape(a).to_vec();
        assert_eq!(src_shape.len(), shape.len(), "broadcast_to: rank mismatch");
        for (s, t) in src_shape.iter().zip(shape.iter()) {
            assert!(s == t || *s == 1, "broadcast_to: incompatible dims {src_shape:?} -> {shape:?}");
        }
        let value = self.nodes[a.id]
            .value
            .broadcast(IxDyn(shape))
            .expect("broadcast_to")
            .to_owned();
        self.push(
            value,
            Some(Box::new(move |_n, g, grads| {
                let mut gr = g.clone();
                for (axis, (s, t)) in src_shape.iter().zip(gr.shape().to_vec().iter()).enumerate() {
                    if *s == 1 && *t > 1 {
                        gr = gr.sum_axis(Axis(axis)).insert_axis(Axis(axis));
                    }
                }
                accumulate(&mut grads[a.id], gr);
            })),
        )
    }

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|v| self.nodes[v.id].value.view()).collect();
        // concatenate can yield non-standard layouts; later reshapes need
        // contiguous row-major data
        let value = ndarray::concatenate(Axis(axis), &views)
            .expect("concat: shape mismatch")
            .as_standard_layout()
            .to_owned();
        let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
        let sizes: Vec<usize> = parts.iter().map(|v| self.shape(*v)[axis]).collect();
        self.push(
            value,
            Some(Box::new(move |_n, g, grads| {
                let mut start = 0;
                for (id, len) in ids.iter().zip(sizes.iter()) {
                    let part = g
                        .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
                        .to_owned();
                    accumulate(&mut grads[*id], part);
                    start += len;
                }
            })),
        )
    }

    /// Contiguous slice `[start, start+len)` along an axis.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let src_shape: Vec<usize> = self.shape(a).to_vec();
        let value = self.nodes[a.id]
            .value
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        self.push(
            value,
            Some(Box::new(move |_n, g, grads| {
                let mut full = Tensor::zeros(IxDyn(&src_shape));
                full.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len))
                    .assign(g);
                accumulate(&mut grads[a.id], full);
            })),
        )
    }

    pub fn transpose2(&mut self, a: Var) -> Var {
        let m = as2(&self.nodes[a.id].value);
        let value = m.t().to_owned().into_dyn();
        self.push(
            value,
            Some(Box::new(move |_n, g, grads| {
                accumulate(&mut grads[a.id], as2(g).t().to_owned().into_dyn());
            })),
        )
    }

    // ---- reduction ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let shape: Vec<usize> = self.shape(a).to_vec();
        let value = ndarray::arr0(self.nodes[a.id].value.sum()).into_dyn();
        self.push(
            value,
            Some(Box::new(move |_n, g, grads| {
                let gv = *g.iter().next().expect("scalar grad");
                accumulate(&mut grads[a.id], Tensor::from_elem(IxDyn(&shape), gv));
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.id].value.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean over the given axes, keeping reduced axes with size 1.
    pub fn reduce_mean(&mut self, a: Var, axes: &[usize]) -> Var {
        let src_shape: Vec<usize> = self.shape(a).to_vec();
        let mut value = self.nodes[a.id].value.clone();
        let mut count = 1.0;
        for &ax in axes {
            count *= src_shape[ax] as f64;
            value = value.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
        value.mapv_inplace(|x| x / count);
        self.push(
            value,
            Some(Box::new(move |_n, g, grads| {
                let gb = g
                    .broadcast(IxDyn(&src_shape))
                    .expect("reduce_mean backward")
                    .to_owned();
                accumulate(&mut grads[a.id], gb.mapv(|x| x / count));
            })),
        )
    }

    /// Max over the given axes keeping reduced axes; ties route the gradient
    /// to the first maximal element in iteration order.
    pub fn reduce_max(&mut self, a: Var, axes: &[usize]) -> Var {
        let src_shape: Vec<usize> = self.shape(a).to_vec();
        let axes_v: Vec<usize> = axes.to_vec();
        let mut out_shape = src_shape.clone();
        for &ax in &axes_v {
            out_shape[ax] = 1;
        }
        let src = &self.nodes[a.id].value;
        let (value, arg) = max_over_axes(src, &axes_v, &out_shape);
        self.push(
            value,
            Some(Box::new(move |_n, g, grads| {
                let mut dx = Tensor::zeros(IxDyn(&src_shape));
                {
                    let flat = dx.as_slice_mut().expect("contiguous");
                    for (pos, &lin) in arg.iter().enumerate() {
                        flat[lin] += g.as_slice().expect("contiguous")[pos];
                    }
                }
                accumulate(&mut grads[a.id], dx);
            })),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(&self.nodes[a.id].value);
        let bv = as2(&self.nodes[b.id].value);
        assert_eq!(av.ncols(), bv.nrows(), "matmul: inner dims differ");
        let value = av.dot(&bv).into_dyn();
        self.push(
            value,
            Some(Box::new(move |n, g, grads| {
                let g2 = as2(g);
                let av = as2(&n[a.id].value);
                let bv = as2(&n[b.id].value);
                accumulate(&mut grads[a.id], g2.dot(&bv.t()).into_dyn());
                accumulate(&mut grads[b.id], av.t().dot(&g2).into_dyn());
            })),
        )
    }

    /// Row-wise softmax of a 2-D input.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let m = as2(&self.nodes[a.id].value);
        let mut out = m.to_owned();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        let y = out.clone();
        self.push(
            out.into_dyn(),
            Some(Box::new(move |_n, g, grads| {
                let g2 = as2(g);
                let mut dz = y.clone();
                for (mut drow, (grow, yrow)) in
                    dz.rows_mut().into_iter().zip(g2.rows().into_iter().zip(y.rows()))
                {
                    let dot: f64 = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                    for ((d, &gv), &yv) in drow.iter_mut().zip(grow.iter()).zip(yrow.iter()) {
                        *d = yv * (gv - dot);
                    }
                }
                accumulate(&mut grads[a.id], dz.into_dyn());
            })),
        )
    }

    // ---- convolution and friends (HWC layout) ----

    /// 2-D convolution: x is [H, W, Cin], w is [KH, KW, Cin, Cout], bias [Cout].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs: Vec<usize> = self.shape(x).to_vec();
        let ws: Vec<usize> = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3, "conv2d: input must be rank 3");
        assert_eq!(ws.len(), 4, "conv2d: weight must be rank 4");
        assert_eq!(xs[2], ws[2], "conv2d: channel mismatch");
        let (h, wdt, cin) = (xs[0], xs[1], xs[2]);
        let (kh, kw, _, cout) = (ws[0], ws[1], ws[2], ws[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wdt + 2 * pad - kw) / stride + 1;

        let cols = im2col(&self.nodes[x.id].value, kh, kw, stride, pad, oh, ow);
        let wmat = as2_shaped(&self.nodes[w.id].value, kh * kw * cin, cout);
        let mut y2 = cols.dot(&wmat);
        if let Some(bv) = b {
            let bias = self.nodes[bv.id].value.view().into_dimensionality::<Ix1>().unwrap();
            for mut row in y2.rows_mut() {
                row += &bias;
            }
        }
        let value = y2.into_shape_with_order(IxDyn(&[oh, ow, cout])).unwrap();

        self.push(
            value,
            Some(Box::new(move |n, g, grads| {
                let g2 = as2_shaped(g, oh * ow, cout);
                // weight gradient
                let cols = im2col(&n[x.id].value, kh, kw, stride, pad, oh, ow);
                let dw = cols.t().dot(&g2);
                accumulate(
                    &mut grads[w.id],
                    dw.into_shape_with_order(IxDyn(&[kh, kw, cin, cout])).unwrap(),
                );
                if let Some(bv) = b {
                    accumulate(&mut grads[bv.id], g2.sum_axis(Axis(0)).into_dyn());
                }
                // input gradient
                let wmat = as2_shaped(&n[w.id].value, kh * kw * cin, cout);
                let dcols = g2.dot(&wmat.t());
                let dx = col2im(&dcols, h, wdt, cin, kh, kw, stride, pad, oh, ow);
                accumulate(&mut grads[x.id], dx);
            })),
        )
    }

    /// Nearest-neighbour 2x upsampling of an [H, W, C] map.
    pub fn upsample2x(&mut self, a: Var) -> Var {
        let xs: Vec<usize> = self.shape(a).to_vec();
        let (h, w, c) = (xs[0], xs[1], xs[2]);
        let src = self.nodes[a.id].value.as_slice().expect("contiguous");
        let mut out = Tensor::zeros(IxDyn(&[2 * h, 2 * w, c]));
        {
            let os = out.as_slice_mut().expect("contiguous");
            for i in 0..2 * h {
                for j in 0..2 * w {
                    let dst = (i * 2 * w + j) * c;
                    let sp = ((i / 2) * w + j / 2) * c;
                    os[dst..dst + c].copy_from_slice(&src[sp..sp + c]);
                }
            }
        }
        self.push(
            out,
            Some(Box::new(move |_n, g, grads| {
                let gs = g.as_slice().expect("contiguous");
                let mut dx = Tensor::zeros(IxDyn(&[h, w, c]));
                {
                    let ds = dx.as_slice_mut().expect("contiguous");
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            let srcp = (i * 2 * w + j) * c;
                            let dst = ((i / 2) * w + j / 2) * c;
                            for k in 0..c {
                                ds[dst + k] += gs[srcp + k];
                            }
                        }
                    }
                }
                accumulate(&mut grads[a.id], dx);
            })),
        )
    }

    /// Per-channel normalization over spatial positions of an [H, W, C] map.
    pub fn instance_norm(&mut self, a: Var, eps: f64) -> Var {
        let xs: Vec<usize> = self.shape(a).to_vec();
        let (h, w, c) = (xs[0], xs[1], xs[2]);
        let n = (h * w) as f64;
        let src = self.nodes[a.id].value.as_slice().expect("contiguous");
        let (mean, var) = channel_stats(src, h * w, c);
        let mut out = self.nodes[a.id].value.clone();
        {
            let os = out.as_slice_mut().expect("contiguous");
            let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            for p in 0..h * w {
                for k in 0..c {
                    os[p * c + k] = (os[p * c + k] - mean[k]) * inv[k];
                }
            }
        }
        self.push(
            out,
            Some(Box::new(move |nn, g, grads| {
                let src = nn[a.id].value.as_slice().expect("contiguous");
                let gs = g.as_slice().expect("contiguous");
                let (mean, var) = channel_stats(src, h * w, c);
                let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                // dx = inv * (g - mean(g) - xhat * mean(g * xhat)) per channel
                let mut g_mean = vec![0.0; c];
                let mut gx_mean = vec![0.0; c];
                for p in 0..h * w {
                    for k in 0..c {
                        let xhat = (src[p * c + k] - mean[k]) * inv[k];
                        g_mean[k] += gs[p * c + k];
                        gx_mean[k] += gs[p * c + k] * xhat;
                    }
                }
                for k in 0..c {
                    g_mean[k] /= n;
                    gx_mean[k] /= n;
                }
                let mut dx = Tensor::zeros(IxDyn(&[h, w, c]));
                {
                    let ds = dx.as_slice_mut().expect("contiguous");
                    for p in 0..h * w {
                        for k in 0..c {
                            let xhat = (src[p * c + k] - mean[k]) * inv[k];
                            ds[p * c + k] =
                                inv[k] * (gs[p * c + k] - g_mean[k] - xhat * gx_mean[k]);
                        }
                    }
                }
                accumulate(&mut grads[a.id], dx);
            })),
        )
    }

    /// Multiplies each channel of an [H, W, C] map by a length-C vector.
    pub fn mul_channels(&mut self, x: Var, s: Var) -> Var {
        let xs: Vec<usize> = self.shape(x).to_vec();
        let c = xs[2];
        assert_eq!(self.shape(s), &[c], "mul_channels: scale must be [C]");
        let positions = xs[0] * xs[1];
        let xv = self.nodes[x.id].value.as_slice().expect("contiguous");
        let sv = self.nodes[s.id].value.as_slice().expect("contiguous");
        let mut out = self.nodes[x.id].value.clone();
        {
            let os = out.as_slice_mut().expect("contiguous");
            for p in 0..positions {
                for k in 0..c {
                    os[p * c + k] = xv[p * c + k] * sv[k];
                }
            }
        }
        self.push(
            out,
            Some(Box::new(move |n, g, grads| {
                let gs = g.as_slice().expect("contiguous");
                let xv = n[x.id].value.as_slice().expect("contiguous");
                let sv = n[s.id].value.as_slice().expect("contiguous");
                let mut dx = Tensor::zeros(IxDyn(&[positions, c]));
                let mut ds = vec![0.0; c];
                {
                    let dxs = dx.as_slice_mut().expect("contiguous");
                    for p in 0..positions {
                        for k in 0..c {
                            dxs[p * c + k] = gs[p * c + k] * sv[k];
                            ds[k] += gs[p * c + k] * xv[p * c + k];
                        }
                    }
                }
                let shape: Vec<usize> = n[x.id].value.shape().to_vec();
                accumulate(&mut grads[x.id], reshaped(&dx, &shape));
                accumulate(
                    &mut grads[s.id],
                    Tensor::from_shape_vec(IxDyn(&[c]), ds).expect("ds shape"),
                );
            })),
        )
    }

    /// Adds a length-C vector to each channel of an [H, W, C] map.
    pub fn add_channels(&mut self, x: Var, s: Var) -> Var {
        let xs: Vec<usize> = self.shape(x).to_vec();
        let c = xs[2];
        assert_eq!(self.shape(s), &[c], "add_channels: shift must be [C]");
        let positions = xs[0] * xs[1];
        let sv = self.nodes[s.id].value.as_slice().expect("contiguous");
        let mut out = self.nodes[x.id].value.clone();
        {
            let os = out.as_slice_mut().expect("contiguous");
            for p in 0..positions {
                for k in 0..c {
                    os[p * c + k] += sv[k];
                }
            }
        }
        self.push(
            out,
            Some(Box::new(move |_n, g, grads| {
                let gs = g.as_slice().expect("contiguous");
                let mut ds = vec![0.0; c];
                for p in 0..positions {
                    for k in 0..c {
                        ds[k] += gs[p * c + k];
                    }
                }
                accumulate(&mut grads[x.id], g.clone());
                accumulate(
                    &mut grads[s.id],
                    Tensor::from_shape_vec(IxDyn(&[c]), ds).expect("ds shape"),
                );
            })),
        )
    }

    // ---- composite helpers ----

    /// Sum of squared entries as a 0-d scalar node.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let sq = self.mul(a, a);
        self.sum_all(sq)
    }

    /// Euclidean norm with a tiny epsilon inside the square root.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let ss = self.sum_squares(a);
        let eps = self.add_scalar(ss, 1e-24);
        self.sqrt(eps)
    }

    /// Mean absolute difference between two same-shape nodes.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let ad = self.abs(d);
        self.mean_all(ad)
    }

    /// Cosine similarity of two vectors (flattened), guarded by epsilon norms.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Var {
        let prod = self.mul(a, b);
        let dot = self.sum_all(prod);
        let na = self.l2_norm(a);
        let nb = self.l2_norm(b);
        let denom = self.mul(na, nb);
        self.div(dot, denom)
    }

    // ---- backward ----

    /// Reverse pass seeded with ones at `root` (normally a scalar).
    pub fn backward(&self, root: Var) -> Grads {
        let mut slots: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed = Tensor::from_elem(IxDyn(self.shape(root)), 1.0);
        slots[root.id] = Some(seed);
        for i in (0..=root.id).rev() {
            let g = match slots[i].take() {
                Some(g) => g,
                None => continue,
            };
            if let Some(bw) = &self.nodes[i].backward {
                bw(&self.nodes, &g, &mut slots);
            }
            slots[i] = Some(g);
        }
        Grads { slots }
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_scalar(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn as2(t: &Tensor) -> ndarray::ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("expected rank-2 tensor")
}

/// Reshape with a contiguity fallback for non-standard layouts.
fn reshaped(t: &Tensor, shape: &[usize]) -> Tensor {
    match t.clone().into_shape_with_order(IxDyn(shape)) {
        Ok(v) => v,
        Err(_) => t
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: incompatible element count"),
    }
}

fn as2_shaped(t: &Tensor, rows: usize, cols: usize) -> Array2<f64> {
    reshaped(t, &[rows, cols]).into_dimensionality::<Ix2>().expect("rank-2")
}

fn channel_stats(x: &[f64], positions: usize, c: usize) -> (Vec<f64>, Vec<f64>) {
    let n = positions as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for p in 0..positions {
        for k in 0..c {
            mean[k] += x[p * c + k];
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    for p in 0..positions {
        for k in 0..c {
            let d = x[p * c + k] - mean[k];
            var[k] += d * d;
        }
    }
    for v in var.iter_mut() {
        *v /= n;
    }
    (mean, var)
}

/// Lowers an [H, W, C] map to [(OH*OW), (KH*KW*C)] patch rows.
fn im2col(
    x: &Tensor,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut cols = Array2::<f64>::zeros((oh * ow, kh * kw * c));
    let xs = x.as_slice().expect("contiguous input");
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * c;
                    let dst_col = (ky * kw + kx) * c;
                    let mut view = cols.row_mut(row);
                    for ci in 0..c {
                        view[dst_col + ci] = xs[src + ci];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of `im2col`: scatter patch-row gradients back onto the input.
#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &Array2<f64>,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Tensor {
    let mut dx = Tensor::zeros(IxDyn(&[h, w, c]));
    {
        let dxs = dx.as_slice_mut().expect("contiguous");
        for oy in 0..oh {
            for ox in 0..ow {
                let row = dcols.row(oy * ow + ox);
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = (iy as usize * w + ix as usize) * c;
                        let src_col = (ky * kw + kx) * c;
                        for ci in 0..c {
                            dxs[dst + ci] += row[src_col + ci];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn max_over_axes(src: &Tensor, axes: &[usize], out_shape: &[usize]) -> (Tensor, Vec<usize>) {
    // Iterate source linearly, mapping each position to its reduced slot.
    let src_shape = src.shape();
    let rank = src_shape.len();
    let mut out = Tensor::from_elem(IxDyn(out_shape), f64::NEG_INFINITY);
    let out_len = out.len();
    let mut arg = vec![0usize; out_len];
    // Row-major strides of the output.
    let mut out_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
    }
    let reduced: Vec<bool> = (0..rank).map(|i| axes.contains(&i)).collect();
    let flat = src.as_slice().expect("contiguous");
    let out_flat = out.as_slice_mut().expect("contiguous");
    let mut idx = vec![0usize; rank];
    for (lin, &v) in flat.iter().enumerate() {
        let mut out_lin = 0usize;
        for i in 0..rank {
            if !reduced[i] {
                out_lin += idx[i] * out_strides[i];
            }
        }
        if v > out_flat[out_lin] {
            out_flat[out_lin] = v;
            arg[out_lin] = lin;
        }
        // advance multi-index
        for i in (0..rank).rev() {
            idx[i] += 1;
            if idx[i] < src_shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    (out, arg)
}

// ---- finite-difference utilities (shared by tests) ----

/// Central-difference gradient of a scalar function with respect to `inputs[idx]`.
pub fn finite_difference_gradient<F>(f: F, inputs: &[Tensor], idx: usize, h: f64) -> Tensor
where
    F: Fn(&[Tensor]) -> f64,
{
    let mut grad = Tensor::zeros(inputs[idx].raw_dim());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for lin in 0..inputs[idx].len() {
        let orig = inputs[idx].as_slice().unwrap()[lin];
        work[idx].as_slice_mut().unwrap()[lin] = orig + h;
        let fp = f(&work);
        work[idx].as_slice_mut().unwrap()[lin] = orig - h;
        let fm = f(&work);
        work[idx].as_slice_mut().unwrap()[lin] = orig;
        grad.as_slice_mut().unwrap()[lin] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Max relative error between two tensors with an absolute floor in the denominator.
pub fn max_relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        Tensor::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    /// Builds the graph twice: once on a tape for analytic gradients, once as
    /// a plain function for central differences, and compares.
    fn check_gradients<F>(build: F, inputs: &[Tensor], tol: f64)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        assert_eq!(tape.value(out).len(), 1, "gradient check needs a scalar output");
        let grads = tape.backward(out);

        let eval = |xs: &[Tensor]| -> f64 {
            let mut t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
            let o = build(&mut t, &vs);
            t.scalar_value(o)
        };
        for (i, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].raw_dim()));
            let numeric = finite_difference_gradient(eval, inputs, i, 1e-5);
            let err = max_relative_error(&analytic, &numeric, 1e-6);
            assert!(err < tol, "input {i}: relative error {err} exceeds {tol}");
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = randn(&[3, 4], &mut rng);
        let b = randn(&[3, 4], &mut rng).mapv(|x| x + 3.0); // keep away from zero for div
        check_gradients(
            |t, vs| {
                let s = t.add(vs[0], vs[1]);
                let m = t.mul(s, vs[0]);
                let d = t.div(m, vs[1]);
                t.sum_all(d)
            },
            &[a.clone(), b.clone()],
            1e-6,
        );
        check_gradients(
            |t, vs| {
                let x = t.sigmoid(vs[0]);
                let y = t.tanh(x);
                let z = t.softplus(y);
                let w = t.exp(z);
                t.mean_all(w)
            },
            &[a.clone()],
            1e-6,
        );
        check_gradients(
            |t, vs| {
                let x = t.leaky_relu(vs[0], 0.2);
                let y = t.abs(x);
                t.sum_all(y)
            },
            &[a],
            1e-5,
        );
    }

    #[test]
    fn matmul_softmax_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = randn(&[3, 5], &mut rng);
        let b = randn(&[5, 2], &mut rng);
        let r = randn(&[3, 2], &mut rng);
        check_gradients(
            |t, vs| {
                let y = t.matmul(vs[0], vs[1]);
                let p = t.softmax_rows(y);
                let weighted = t.mul(p, vs[2]);
                t.sum_all(weighted)
            },
            &[a, b, r],
            1e-6,
        );
    }

    #[test]
    fn conv_and_norm_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = randn(&[5, 5, 2], &mut rng);
        let w = randn(&[3, 3, 2, 3], &mut rng);
        let b = randn(&[3], &mut rng);
        check_gradients(
            |t, vs| {
                let y = t.conv2d(vs[0], vs[1], Some(vs[2]), 1, 1);
                let z = t.leaky_relu(y, 0.2);
                t.sum_squares(z)
            },
            &[x.clone(), w.clone(), b.clone()],
            1e-5,
        );
        // strided
        check_gradients(
            |t, vs| {
                let y = t.conv2d(vs[0], vs[1], Some(vs[2]), 2, 1);
                t.sum_squares(y)
            },
            &[x.clone(), w, b],
            1e-5,
        );
        check_gradients(
            |t, vs| {
                let y = t.instance_norm(vs[0], 1e-5);
                let z = t.sigmoid(y);
                t.sum_all(z)
            },
            &[x.clone()],
            1e-5,
        );
        check_gradients(
            |t, vs| {
                let y = t.upsample2x(vs[0]);
                let z = t.mul(y, y);
                t.sum_all(z)
            },
            &[x],
            1e-6,
        );
    }

    #[test]
    fn channel_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let x = randn(&[4, 4, 3], &mut rng);
        let s = randn(&[3], &mut rng);
        let b = randn(&[3], &mut rng);
        check_gradients(
            |t, vs| {
                let y = t.mul_channels(vs[0], vs[1]);
                let z = t.add_channels(y, vs[2]);
                let q = t.tanh(z);
                t.sum_squares(q)
            },
            &[x.clone(), s.clone(), b],
            1e-5,
        );
        // equivalence with explicit broadcasting
        let mut t1 = Tape::new();
        let xv = t1.leaf(x.clone());
        let sv = t1.leaf(s.clone());
        let y1 = t1.mul_channels(xv, sv);
        let mut t2 = Tape::new();
        let xv2 = t2.leaf(x);
        let sv2 = t2.leaf(s);
        let s3 = t2.reshape(sv2, &[1, 1, 3]);
        let sb = t2.broadcast_to(s3, &[4, 4, 3]);
        let y2 = t2.mul(xv2, sb);
        assert_eq!(t1.value(y1), t2.value(y2));
    }

    #[test]
    fn reductions_and_shapes_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = randn(&[4, 4, 3], &mut rng);
        check_gradients(
            |t, vs| {
                let m = t.reduce_mean(vs[0], &[2]);
                let b = t.broadcast_to(m, &[4, 4, 3]);
                let p = t.mul(b, vs[0]);
                t.sum_all(p)
            },
            &[x.clone()],
            1e-6,
        );
        check_gradients(
            |t, vs| {
                let m = t.reduce_max(vs[0], &[0, 1]);
                t.sum_squares(m)
            },
            &[x.clone()],
            1e-5,
        );
        check_gradients(
            |t, vs| {
                let r = t.reshape(vs[0], &[48]);
                let n = t.narrow(r, 0, 5, 13);
                t.sum_squares(n)
            },
            &[x.clone()],
            1e-6,
        );
        check_gradients(
            |t, vs| {
                let a = t.narrow(vs[0], 0, 0, 2);
                let b = t.narrow(vs[0], 0, 2, 2);
                let c = t.concat(0, &[b, a]);
                let s = t.mul(c, c);
                t.mean_all(s)
            },
            &[x],
            1e-6,
        );
    }

    #[test]
    fn conv2d_matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = randn(&[6, 6, 3], &mut rng);
        let w = randn(&[3, 3, 3, 4], &mut rng);
        let b = randn(&[4], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w.clone());
        let bv = tape.leaf(b.clone());
        let y = tape.conv2d(xv, wv, Some(bv), 2, 1);
        let got = tape.value(y).clone();

        // independent naive loop implementation
        let (oh, ow, cout) = (3, 3, 4);
        let mut expect = Array3::<f64>::zeros((oh, ow, cout));
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = b[[co]];
                    for ky in 0..3usize {
                        for kx in 0..3usize {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= 6 || ix >= 6 {
                                continue;
                            }
                            for ci in 0..3usize {
                                acc += x[[iy as usize, ix as usize, ci]] * w[[ky, kx, ci, co]];
                            }
                        }
                    }
                    expect[[oy, ox, co]] = acc;
                }
            }
        }
        let err = max_relative_error(&got, &expect.into_dyn(), 1e-9);
        assert!(err < 1e-12, "conv mismatch vs naive loops: {err}");
    }

    #[test]
    fn softmax_rows_are_stochastic() {
        let x = arr2(&[[1.0, 2.0, 3.0], [-5.0, 0.0, 5.0]]).into_dyn();
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let s = tape.softmax_rows(v);
        for row in as2(tape.value(s)).rows() {
            let sum: f64 = row.sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn clamp_gradient_masks_saturated_entries() {
        let x = arr2(&[[-2.0, 0.5], [0.9, 3.0]]).into_dyn();
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let c = tape.clamp(v, -1.0, 1.0);
        let s = tape.sum_all(c);
        let grads = tape.backward(s);
        let g = grads.get(v).unwrap();
        assert_eq!(g[[0, 0]], 0.0);
        assert_eq!(g[[0, 1]], 1.0);
        assert_eq!(g[[1, 0]], 1.0);
        assert_eq!(g[[1, 1]], 0.0);
    }

    #[test]
    fn repeated_evaluation_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = randn(&[8, 8, 3], &mut rng);
        let w = randn(&[3, 3, 3, 8], &mut rng);
        let run = || {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let wv = t.leaf(w.clone());
            let y = t.conv2d(xv, wv, None, 1, 1);
            let z = t.instance_norm(y, 1e-5);
            let s = t.sum_squares(z);
            t.scalar_value(s)
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
