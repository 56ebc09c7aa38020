//! Reverse-mode automatic differentiation on dynamically shaped arrays.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s; `backward`
//! walks the records in reverse and accumulates gradients for every node
//! that (transitively) depends on a gradient-requiring leaf. The op set is
//! exactly what the generator / discriminator / segmenter graphs and the
//! loss terms need, nothing more.
//!
//! All ops are single-threaded and evaluate in recording order, so a fixed
//! seed reproduces forward values and gradients bitwise on one device.

pub mod check;
mod conv;

pub use conv::{col2im, conv_out_dim, conv_transpose_out_dim, im2col};

use std::cell::RefCell;
use std::iter::Sum;

use ndarray::{Array2, Array4, ArrayD, Axis, Ix3, Ix4, IxDyn, NdFloat};

/// Element type the engine is generic over. Training runs `f32`; the
/// finite-difference gradient checks run `f64`.
pub trait Scalar: NdFloat + Sum<Self> + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

struct Node<F: Scalar> {
    value: ArrayD<F>,
    parents: Vec<usize>,
    op: Op<F>,
    needs_grad: bool,
}

enum Op<F: Scalar> {
    Leaf,
    Add,
    Sub,
    Mul,
    Neg,
    Abs,
    Square,
    ScalarMul(F),
    AddScalar(F),
    Tanh,
    Sigmoid,
    Relu,
    LeakyRelu(F),
    /// ln(max(x, eps)); gradient is zero where the clamp is active.
    LnClamped(F),
    Mean,
    Sum,
    /// parents: [input, weight, bias]; weight is [out_c, in_c, k, k].
    Conv2d {
        stride: usize,
        pad: usize,
    },
    /// parents: [input, weight, bias]; weight is [in_c, out_c, k, k].
    ConvTranspose2d {
        stride: usize,
        pad: usize,
        out_pad: usize,
    },
    /// parents: [input, gamma, beta]; saved normalized activations and the
    /// per-(sample, channel) reciprocal std.
    InstanceNorm {
        xhat: ArrayD<F>,
        inv_std: Array2<F>,
    },
    /// 2x2 stride-2 max pooling; `indices` holds, per output element, the
    /// flat h*w offset of the winning input pixel.
    MaxPool2 {
        indices: ArrayD<usize>,
    },
    /// Inverse of `MaxPool2` driven by stored indices.
    MaxUnpool2 {
        indices: ArrayD<usize>,
    },
    /// Class-weighted, optionally pixel-masked softmax cross-entropy over
    /// axis 1 of [n, classes, h, w] logits. Saved: softmax probabilities and
    /// the weight normalizer.
    SoftmaxCrossEntropy {
        probs: ArrayD<F>,
        labels: ArrayD<usize>,
        class_weights: Vec<F>,
        pixel_mask: Option<ArrayD<F>>,
        normalizer: F,
    },
}

/// Gradient tape. Create one per forward/backward pass.
pub struct Tape<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<F>, parents: Vec<usize>, op: Op<F>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = match op {
            Op::Leaf => false,
            _ => parents.iter().any(|&p| nodes[p].needs_grad),
        };
        nodes.push(Node {
            value,
            parents,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Registers a leaf. `requires_grad` marks it as a gradient sink
    /// (a trainable parameter); inputs and frozen parameters pass `false`.
    pub fn leaf(&self, value: ArrayD<F>, requires_grad: bool) -> Var {
        let v = self.push(value, Vec::new(), Op::Leaf);
        if requires_grad {
            self.nodes.borrow_mut()[v.0].needs_grad = true;
        }
        v
    }

    pub fn value(&self, v: Var) -> ArrayD<F> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn scalar_value(&self, v: Var) -> F {
        let nodes = self.nodes.borrow();
        let val = &nodes[v.0].value;
        assert_eq!(val.len(), 1, "scalar_value on non-scalar node");
        *val.iter().next().unwrap()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn binary_same_shape(&self, a: Var, b: Var, op: Op<F>) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(va.shape(), vb.shape(), "shape mismatch in elementwise op");
            match op {
                Op::Add => va + vb,
                Op::Sub => va - vb,
                Op::Mul => va * vb,
                _ => unreachable!(),
            }
        };
        self.push(value, vec![a.0, b.0], op)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, Op::Mul)
    }

    pub fn neg(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(|v| -v);
        self.push(value, vec![a.0], Op::Neg)
    }

    pub fn abs(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(|v| v.abs());
        self.push(value, vec![a.0], Op::Abs)
    }

    pub fn square(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(|v| v * v);
        self.push(value, vec![a.0], Op::Square)
    }

    pub fn scalar_mul(&self, a: Var, k: F) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(|v| v * k);
        self.push(value, vec![a.0], Op::ScalarMul(k))
    }

    pub fn add_scalar(&self, a: Var, k: F) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(|v| v + k);
        self.push(value, vec![a.0], Op::AddScalar(k))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(|v| v.tanh());
        self.push(value, vec![a.0], Op::Tanh)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let one = F::one();
        let value = self.nodes.borrow()[a.0]
            .value
            .mapv(|v| one / (one + (-v).exp()));
        self.push(value, vec![a.0], Op::Sigmoid)
    }

    pub fn relu(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(|v| v.max(F::zero()));
        self.push(value, vec![a.0], Op::Relu)
    }

    pub fn leaky_relu(&self, a: Var, slope: F) -> Var {
        let value = self.nodes.borrow()[a.0]
            .value
            .mapv(|v| if v >= F::zero() { v } else { v * slope });
        self.push(value, vec![a.0], Op::LeakyRelu(slope))
    }

    /// ln(max(x, eps)) — the epsilon clamp that keeps adversarial log terms
    /// finite when a discriminator saturates.
    pub fn ln_clamped(&self, a: Var, eps: F) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(|v| v.max(eps).ln());
        self.push(value, vec![a.0], Op::LnClamped(eps))
    }

    pub fn mean(&self, a: Var) -> Var {
        let nodes = self.nodes.borrow();
        let n = F::from_f64(nodes[a.0].value.len() as f64);
        let s: F = nodes[a.0].value.iter().copied().sum();
        drop(nodes);
        let value = ArrayD::from_elem(IxDyn(&[]), s / n);
        self.push(value, vec![a.0], Op::Mean)
    }

    pub fn sum(&self, a: Var) -> Var {
        let s: F = self.nodes.borrow()[a.0].value.iter().copied().sum();
        let value = ArrayD::from_elem(IxDyn(&[]), s);
        self.push(value, vec![a.0], Op::Sum)
    }

    /// Detaches `a` from the graph: same value, no gradient history.
    pub fn detach(&self, a: Var) -> Var {
        let value = self.value(a);
        self.leaf(value, false)
    }

    pub fn conv2d(&self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let x = nodes[input.0]
                .value
                .view()
                .into_dimensionality::<Ix4>()
                .expect("conv2d input must be [n,c,h,w]");
            let w = nodes[weight.0]
                .value
                .view()
                .into_dimensionality::<Ix4>()
                .expect("conv2d weight must be [o,c,k,k]");
            let b = &nodes[bias.0].value;
            conv::conv2d_forward(&x, &w, b.as_slice().unwrap(), stride, pad)
        };
        self.push(
            value.into_dyn(),
            vec![input.0, weight.0, bias.0],
            Op::Conv2d { stride, pad },
        )
    }

    pub fn conv_transpose2d(
        &self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let x = nodes[input.0]
                .value
                .view()
                .into_dimensionality::<Ix4>()
                .expect("conv_transpose2d input must be [n,c,h,w]");
            let w = nodes[weight.0]
                .value
                .view()
                .into_dimensionality::<Ix4>()
                .expect("conv_transpose2d weight must be [i,o,k,k]");
            let b = &nodes[bias.0].value;
            conv::conv_transpose2d_forward(&x, &w, b.as_slice().unwrap(), stride, pad, out_pad)
        };
        self.push(
            value.into_dyn(),
            vec![input.0, weight.0, bias.0],
            Op::ConvTranspose2d {
                stride,
                pad,
                out_pad,
            },
        )
    }

    /// Per-sample, per-channel normalization over the spatial axes followed
    /// by a learned affine map. `gamma`/`beta` are 1-D of length `channels`.
    pub fn instance_norm(&self, input: Var, gamma: Var, beta: Var, eps: F) -> Var {
        let (value, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let x = nodes[input.0]
                .value
                .view()
                .into_dimensionality::<Ix4>()
                .expect("instance_norm input must be [n,c,h,w]");
            let g = nodes[gamma.0].value.as_slice().unwrap().to_vec();
            let bt = nodes[beta.0].value.as_slice().unwrap().to_vec();
            let (n, c, h, w) = x.dim();
            let hw = F::from_f64((h * w) as f64);
            let mut out = Array4::<F>::zeros((n, c, h, w));
            let mut xhat = Array4::<F>::zeros((n, c, h, w));
            let mut inv_std = Array2::<F>::zeros((n, c));
            for ni in 0..n {
                for ci in 0..c {
                    let plane = x.index_axis(Axis(0), ni);
                    let plane = plane.index_axis(Axis(0), ci);
                    let mu: F = plane.iter().copied().sum::<F>() / hw;
                    let var: F = plane
                        .iter()
                        .map(|&v| (v - mu) * (v - mu))
                        .sum::<F>()
                        / hw;
                    let istd = F::one() / (var + eps).sqrt();
                    inv_std[[ni, ci]] = istd;
                    for hi in 0..h {
                        for wi in 0..w {
                            let xh = (plane[[hi, wi]] - mu) * istd;
                            xhat[[ni, ci, hi, wi]] = xh;
                            out[[ni, ci, hi, wi]] = g[ci] * xh + bt[ci];
                        }
                    }
                }
            }
            (out.into_dyn(), xhat.into_dyn(), inv_std)
        };
        self.push(
            value,
            vec![input.0, gamma.0, beta.0],
            Op::InstanceNorm { xhat, inv_std },
        )
    }

    /// 2x2 stride-2 max pooling. Returns the pooled var; the argmax indices
    /// live on the tape and are retrieved with [`Tape::pool_indices`].
    pub fn max_pool2(&self, input: Var) -> Var {
        let (value, indices) = {
            let nodes = self.nodes.borrow();
            let x = nodes[input.0]
                .value
                .view()
                .into_dimensionality::<Ix4>()
                .expect("max_pool2 input must be [n,c,h,w]");
            let (n, c, h, w) = x.dim();
            assert!(
                h % 2 == 0 && w % 2 == 0,
                "max_pool2 requires even spatial dims, got {h}x{w}"
            );
            let (ho, wo) = (h / 2, w / 2);
            let mut out = Array4::<F>::zeros((n, c, ho, wo));
            let mut idx = Array4::<usize>::zeros((n, c, ho, wo));
            for ni in 0..n {
                for ci in 0..c {
                    for oi in 0..ho {
                        for oj in 0..wo {
                            let mut best = x[[ni, ci, 2 * oi, 2 * oj]];
                            let mut best_at = (2 * oi) * w + 2 * oj;
                            for di in 0..2 {
                                for dj in 0..2 {
                                    let (hi, wi) = (2 * oi + di, 2 * oj + dj);
                                    let v = x[[ni, ci, hi, wi]];
                                    if v > best {
                                        best = v;
                                        best_at = hi * w + wi;
                                    }
                                }
                            }
                            out[[ni, ci, oi, oj]] = best;
                            idx[[ni, ci, oi, oj]] = best_at;
                        }
                    }
                }
            }
            (out.into_dyn(), idx.into_dyn())
        };
        self.push(value, vec![input.0], Op::MaxPool2 { indices })
    }

    /// Flat h*w argmax offsets recorded by a `max_pool2` node.
    pub fn pool_indices(&self, pooled: Var) -> ArrayD<usize> {
        let nodes = self.nodes.borrow();
        match &nodes[pooled.0].op {
            Op::MaxPool2 { indices } => indices.clone(),
            _ => panic!("pool_indices called on a non-pooling node"),
        }
    }

    /// Scatters `input` back to double spatial resolution at the positions
    /// recorded by the paired pooling op.
    pub fn max_unpool2(&self, input: Var, indices: &ArrayD<usize>) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let x = nodes[input.0]
                .value
                .view()
                .into_dimensionality::<Ix4>()
                .expect("max_unpool2 input must be [n,c,h,w]");
            let idx = indices
                .view()
                .into_dimensionality::<Ix4>()
                .expect("indices must be [n,c,h,w]");
            assert_eq!(x.shape(), idx.shape(), "unpool indices shape mismatch");
            let (n, c, h, w) = x.dim();
            let (ho, wo) = (2 * h, 2 * w);
            let mut out = Array4::<F>::zeros((n, c, ho, wo));
            for ni in 0..n {
                for ci in 0..c {
                    for hi in 0..h {
                        for wi in 0..w {
                            let flat = idx[[ni, ci, hi, wi]];
                            out[[ni, ci, flat / wo, flat % wo]] = x[[ni, ci, hi, wi]];
                        }
                    }
                }
            }
            out.into_dyn()
        };
        self.push(
            value,
            vec![input.0],
            Op::MaxUnpool2 {
                indices: indices.clone(),
            },
        )
    }

    /// Mean class-weighted cross-entropy of `logits` [n, classes, h, w]
    /// against integer `labels` [n, h, w]. `pixel_mask` (0/1) drops pixels
    /// from both numerator and normalizer; the normalizer is the sum of the
    /// active pixels' class weights, so uniform weights give a plain mean.
    pub fn softmax_cross_entropy(
        &self,
        logits: Var,
        labels: &ArrayD<usize>,
        class_weights: &[F],
        pixel_mask: Option<&ArrayD<F>>,
    ) -> Var {
        let (value, probs, normalizer) = {
            let nodes = self.nodes.borrow();
            let z = nodes[logits.0]
                .value
                .view()
                .into_dimensionality::<Ix4>()
                .expect("logits must be [n,c,h,w]");
            let lab = labels
                .view()
                .into_dimensionality::<Ix3>()
                .expect("labels must be [n,h,w]");
            let (n, c, h, w) = z.dim();
            assert_eq!(lab.dim(), (n, h, w), "label shape mismatch");
            assert_eq!(class_weights.len(), c, "one weight per class required");
            let mut probs = Array4::<F>::zeros((n, c, h, w));
            let mut loss_sum = F::zero();
            let mut norm = F::zero();
            for ni in 0..n {
                for hi in 0..h {
                    for wi in 0..w {
                        let m = match pixel_mask {
                            Some(pm) => pm[[ni, hi, wi]],
                            None => F::one(),
                        };
                        let mut zmax = z[[ni, 0, hi, wi]];
                        for ci in 1..c {
                            zmax = zmax.max(z[[ni, ci, hi, wi]]);
                        }
                        let mut denom = F::zero();
                        for ci in 0..c {
                            denom = denom + (z[[ni, ci, hi, wi]] - zmax).exp();
                        }
                        for ci in 0..c {
                            probs[[ni, ci, hi, wi]] =
                                (z[[ni, ci, hi, wi]] - zmax).exp() / denom;
                        }
                        let l = lab[[ni, hi, wi]];
                        assert!(l < c, "label {l} out of range for {c} classes");
                        let wgt = class_weights[l] * m;
                        let logp = (z[[ni, l, hi, wi]] - zmax) - denom.ln();
                        loss_sum = loss_sum - wgt * logp;
                        norm = norm + wgt;
                    }
                }
            }
            let norm = if norm > F::zero() { norm } else { F::one() };
            (
                ArrayD::from_elem(IxDyn(&[]), loss_sum / norm),
                probs.into_dyn(),
                norm,
            )
        };
        self.push(
            value,
            vec![logits.0],
            Op::SoftmaxCrossEntropy {
                probs,
                labels: labels.clone(),
                class_weights: class_weights.to_vec(),
                pixel_mask: pixel_mask.cloned(),
                normalizer,
            },
        )
    }

    /// Runs backpropagation from scalar `loss`. Returns one gradient slot
    /// per tape node; nodes that do not require gradients hold `None`.
    pub fn backward(&self, loss: Var) -> Vec<Option<ArrayD<F>>> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.0].value.len(),
            1,
            "backward requires a scalar loss"
        );
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(nodes[loss.0].value.raw_dim(), F::one()));

        for id in (0..=loss.0).rev() {
            let grad = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[id];
            if !node.needs_grad && !matches!(node.op, Op::Leaf) {
                // Keep traversing only where a grad-requiring leaf is reachable.
                grads[id] = Some(grad);
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(grad);
                    continue;
                }
                Op::Add => {
                    accumulate(&mut grads, node.parents[0], grad.clone());
                    accumulate(&mut grads, node.parents[1], grad);
                }
                Op::Sub => {
                    accumulate(&mut grads, node.parents[0], grad.clone());
                    accumulate(&mut grads, node.parents[1], grad.mapv(|v| -v));
                }
                Op::Mul => {
                    let a = &nodes[node.parents[0]].value;
                    let b = &nodes[node.parents[1]].value;
                    accumulate(&mut grads, node.parents[0], &grad * b);
                    accumulate(&mut grads, node.parents[1], &grad * a);
                }
                Op::Neg => accumulate(&mut grads, node.parents[0], grad.mapv(|v| -v)),
                Op::Abs => {
                    let x = &nodes[node.parents[0]].value;
                    let g = ndarray::Zip::from(&grad)
                        .and(x)
                        .map_collect(|&g, &v| {
                            if v > F::zero() {
                                g
                            } else if v < F::zero() {
                                -g
                            } else {
                                F::zero()
                            }
                        });
                    accumulate(&mut grads, node.parents[0], g);
                }
                Op::Square => {
                    let x = &nodes[node.parents[0]].value;
                    let two = F::from_f64(2.0);
                    accumulate(&mut grads, node.parents[0], &grad * &x.mapv(|v| two * v));
                }
                Op::ScalarMul(k) => {
                    accumulate(&mut grads, node.parents[0], grad.mapv(|v| v * *k))
                }
                Op::AddScalar(_) => accumulate(&mut grads, node.parents[0], grad),
                Op::Tanh => {
                    let y = &node.value;
                    accumulate(
                        &mut grads,
                        node.parents[0],
                        &grad * &y.mapv(|v| F::one() - v * v),
                    );
                }
                Op::Sigmoid => {
                    let y = &node.value;
                    accumulate(
                        &mut grads,
                        node.parents[0],
                        &grad * &y.mapv(|v| v * (F::one() - v)),
                    );
                }
                Op::Relu => {
                    let x = &nodes[node.parents[0]].value;
                    let g = ndarray::Zip::from(&grad)
                        .and(x)
                        .map_collect(|&g, &v| if v > F::zero() { g } else { F::zero() });
                    accumulate(&mut grads, node.parents[0], g);
                }
                Op::LeakyRelu(slope) => {
                    let x = &nodes[node.parents[0]].value;
                    let s = *slope;
                    let g = ndarray::Zip::from(&grad)
                        .and(x)
                        .map_collect(|&g, &v| if v >= F::zero() { g } else { g * s });
                    accumulate(&mut grads, node.parents[0], g);
                }
                Op::LnClamped(eps) => {
                    let x = &nodes[node.parents[0]].value;
                    let e = *eps;
                    let g = ndarray::Zip::from(&grad)
                        .and(x)
                        .map_collect(|&g, &v| if v > e { g / v } else { F::zero() });
                    accumulate(&mut grads, node.parents[0], g);
                }
                Op::Mean => {
                    let x = &nodes[node.parents[0]].value;
                    let k = *grad.iter().next().unwrap() / F::from_f64(x.len() as f64);
                    accumulate(&mut grads, node.parents[0], ArrayD::from_elem(x.raw_dim(), k));
                }
                Op::Sum => {
                    let x = &nodes[node.parents[0]].value;
                    let k = *grad.iter().next().unwrap();
                    accumulate(&mut grads, node.parents[0], ArrayD::from_elem(x.raw_dim(), k));
                }
                Op::Conv2d { stride, pad } => {
                    let x = nodes[node.parents[0]]
                        .value
                        .view()
                        .into_dimensionality::<Ix4>()
                        .unwrap();
                    let w = nodes[node.parents[1]]
                        .value
                        .view()
                        .into_dimensionality::<Ix4>()
                        .unwrap();
                    let gout = grad.view().into_dimensionality::<Ix4>().unwrap();
                    let (dx, dw, db) =
                        conv::conv2d_backward(&x, &w, &gout, *stride, *pad);
                    accumulate(&mut grads, node.parents[0], dx.into_dyn());
                    accumulate(&mut grads, node.parents[1], dw.into_dyn());
                    accumulate(&mut grads, node.parents[2], db.into_dyn());
                }
                Op::ConvTranspose2d {
                    stride,
                    pad,
                    out_pad,
                } => {
                    debug_assert!(out_pad < stride);
                    let x = nodes[node.parents[0]]
                        .value
                        .view()
                        .into_dimensionality::<Ix4>()
                        .unwrap();
                    let w = nodes[node.parents[1]]
                        .value
                        .view()
                        .into_dimensionality::<Ix4>()
                        .unwrap();
                    let gout = grad.view().into_dimensionality::<Ix4>().unwrap();
                    let (dx, dw, db) =
                        conv::conv_transpose2d_backward(&x, &w, &gout, *stride, *pad);
                    accumulate(&mut grads, node.parents[0], dx.into_dyn());
                    accumulate(&mut grads, node.parents[1], dw.into_dyn());
                    accumulate(&mut grads, node.parents[2], db.into_dyn());
                }
                Op::InstanceNorm { xhat, inv_std } => {
                    let g4 = grad.view().into_dimensionality::<Ix4>().unwrap();
                    let xh = xhat.view().into_dimensionality::<Ix4>().unwrap();
                    let gamma = nodes[node.parents[1]].value.as_slice().unwrap();
                    let (n, c, h, w) = g4.dim();
                    let hw = F::from_f64((h * w) as f64);
                    let mut dx = Array4::<F>::zeros((n, c, h, w));
                    let mut dgamma = ndarray::Array1::<F>::zeros(c);
                    let mut dbeta = ndarray::Array1::<F>::zeros(c);
                    for ni in 0..n {
                        for ci in 0..c {
                            let mut sum_g = F::zero();
                            let mut sum_gx = F::zero();
                            for hi in 0..h {
                                for wi in 0..w {
                                    let g = g4[[ni, ci, hi, wi]];
                                    let xv = xh[[ni, ci, hi, wi]];
                                    sum_g = sum_g + g;
                                    sum_gx = sum_gx + g * xv;
                                    dgamma[ci] = dgamma[ci] + g * xv;
                                    dbeta[ci] = dbeta[ci] + g;
                                }
                            }
                            let istd = inv_std[[ni, ci]];
                            let k = gamma[ci] * istd;
                            for hi in 0..h {
                                for wi in 0..w {
                                    let g = g4[[ni, ci, hi, wi]];
                                    let xv = xh[[ni, ci, hi, wi]];
                                    dx[[ni, ci, hi, wi]] =
                                        k * (g - sum_g / hw - xv * (sum_gx / hw));
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, node.parents[0], dx.into_dyn());
                    accumulate(&mut grads, node.parents[1], dgamma.into_dyn());
                    accumulate(&mut grads, node.parents[2], dbeta.into_dyn());
                }
                Op::MaxPool2 { indices } => {
                    let g4 = grad.view().into_dimensionality::<Ix4>().unwrap();
                    let idx = indices.view().into_dimensionality::<Ix4>().unwrap();
                    let xshape = nodes[node.parents[0]].value.shape().to_vec();
                    let (n, c, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3]);
                    let mut dx = Array4::<F>::zeros((n, c, h, w));
                    let (ho, wo) = (h / 2, w / 2);
                    for ni in 0..n {
                        for ci in 0..c {
                            for oi in 0..ho {
                                for oj in 0..wo {
                                    let flat = idx[[ni, ci, oi, oj]];
                                    dx[[ni, ci, flat / w, flat % w]] =
                                        dx[[ni, ci, flat / w, flat % w]]
                                            + g4[[ni, ci, oi, oj]];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, node.parents[0], dx.into_dyn());
                }
                Op::MaxUnpool2 { indices } => {
                    let g4 = grad.view().into_dimensionality::<Ix4>().unwrap();
                    let idx = indices.view().into_dimensionality::<Ix4>().unwrap();
                    let (n, c, h, w) = idx.dim();
                    let wo = 2 * w;
                    let mut dx = Array4::<F>::zeros((n, c, h, w));
                    for ni in 0..n {
                        for ci in 0..c {
                            for hi in 0..h {
                                for wi in 0..w {
                                    let flat = idx[[ni, ci, hi, wi]];
                                    dx[[ni, ci, hi, wi]] = g4[[ni, ci, flat / wo, flat % wo]];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, node.parents[0], dx.into_dyn());
                }
                Op::SoftmaxCrossEntropy {
                    probs,
                    labels,
                    class_weights,
                    pixel_mask,
                    normalizer,
                } => {
                    let gscalar = *grad.iter().next().unwrap();
                    let p = probs.view().into_dimensionality::<Ix4>().unwrap();
                    let lab = labels.view().into_dimensionality::<Ix3>().unwrap();
                    let (n, c, h, w) = p.dim();
                    let mut dz = Array4::<F>::zeros((n, c, h, w));
                    for ni in 0..n {
                        for hi in 0..h {
                            for wi in 0..w {
                                let m = match pixel_mask {
                                    Some(pm) => pm[[ni, hi, wi]],
                                    None => F::one(),
                                };
                                let l = lab[[ni, hi, wi]];
                                let wgt = class_weights[l] * m / *normalizer;
                                for ci in 0..c {
                                    let onehot =
                                        if ci == l { F::one() } else { F::zero() };
                                    dz[[ni, ci, hi, wi]] =
                                        gscalar * wgt * (p[[ni, ci, hi, wi]] - onehot);
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, node.parents[0], dz.into_dyn());
                }
            }
        }
        grads
    }
}

fn accumulate<F: Scalar>(grads: &mut [Option<ArrayD<F>>], id: usize, g: ArrayD<F>) {
    match &mut grads[id] {
        Some(existing) => *existing += &g,
        slot => *slot = Some(g),
    }
}
