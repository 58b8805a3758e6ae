//! Minimal reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records a topologically-ordered list of nodes. Each builder
//! method runs the forward kernel eagerly, stores the result, and remembers
//! the parent indices plus whatever small auxiliary state the backward pass
//! needs (normalisation statistics, pooling argmax codes). [`Tape::backward`]
//! then walks the list in reverse and accumulates gradients for every node
//! that transitively depends on a trainable leaf.
//!
//! The element type is generic: `f32` for training and inference, `f64`
//! when gradients are being cross-checked against finite differences.

pub mod kernels;
pub mod scalar;

use ndarray::{s, Array1, Array4, ArrayD, Axis, IxDyn};

pub use scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        stride: usize,
        pad: usize,
        groups: usize,
    },
    DwConv3x3 {
        x: usize,
        w: usize,
    },
    ConvT2x2 {
        x: usize,
        w: usize,
    },
    Bmm {
        a: usize,
        b: usize,
    },
    TransposeLast2 {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    SoftmaxLast {
        x: usize,
    },
    DivByScalar {
        x: usize,
        alpha: usize,
    },
    LayerNormCh {
        x: usize,
        gamma: usize,
        beta: usize,
    },
    BatchNormTrain {
        x: usize,
        gamma: usize,
        beta: usize,
    },
    BatchNormEval {
        x: usize,
        gamma: usize,
        beta: usize,
    },
    Relu {
        x: usize,
    },
    LeakyRelu {
        x: usize,
        slope: f64,
    },
    Gelu {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    MaxPool2x2 {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    MulBcastC {
        x: usize,
        scale: usize,
    },
    OneMinus {
        x: usize,
    },
    GlobalAvgPool {
        x: usize,
    },
    SliceC {
        x: usize,
        start: usize,
        len: usize,
    },
    RepeatC {
        x: usize,
        times: usize,
    },
    Clamp01 {
        x: usize,
    },
    ClampMin {
        x: usize,
        floor: f64,
    },
    Log10 {
        x: usize,
    },
    MulAddConst {
        x: usize,
        a: f64,
    },
    MeanAll {
        x: usize,
    },
    Abs {
        x: usize,
    },
    AffineCh {
        x: usize,
    },
}

/// Per-node auxiliary state kept for the backward pass.
enum Aux<T: Scalar> {
    None,
    /// Normalisation statistics: broadcastable mean and inverse std-dev.
    Norm(ArrayD<T>, ArrayD<T>),
    /// Argmax codes for max pooling.
    Pool(Vec<u8>),
    /// Fixed per-channel affine scale coefficients.
    Affine(Array1<T>),
}

struct Node<T: Scalar> {
    value: ArrayD<T>,
    op: Op,
    aux: Aux<T>,
    requires_grad: bool,
}

/// Gradients returned by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T: Scalar> {
    by_var: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of the scalar root with respect to `v`, if `v` influences
    /// the root and requires a gradient.
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.by_var[v.0].as_ref()
    }

    /// Removes and returns the gradient for `v`.
    pub fn take(&mut self, v: Var) -> Option<ArrayD<T>> {
        self.by_var[v.0].take()
    }
}

/// Recorded computation graph with eager forward evaluation.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    eps_ln: T,
    eps_bn: T,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            eps_ln: T::from_f64(1e-6),
            eps_bn: T::from_f64(1e-5),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value stored at `v`.
    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    /// Reads a single-element node as a scalar.
    pub fn scalar(&self, v: Var) -> T {
        let val = &self.nodes[v.0].value;
        debug_assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        *val.iter().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<T>, op: Op, aux: Aux<T>, requires_grad: bool) -> Var {
        debug_assert!(value.is_standard_layout());
        self.nodes.push(Node {
            value,
            op,
            aux,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    // ------------------------------------------------------------------
    // Leaves
    // ------------------------------------------------------------------

    /// Insert an input or parameter tensor. `trainable` controls whether a
    /// gradient is accumulated for it.
    pub fn leaf(&mut self, value: ArrayD<T>, trainable: bool) -> Var {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.push(value, Op::Leaf, Aux::None, trainable)
    }

    /// Convenience: scalar constant leaf of shape `[1]`.
    pub fn constant_scalar(&mut self, v: T) -> Var {
        self.leaf(ArrayD::from_elem(IxDyn(&[1]), v), false)
    }

    // ------------------------------------------------------------------
    // Convolutions and resampling
    // ------------------------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Var {
        let y = {
            let xv = as4(self.value(x));
            let wv = as4(self.value(w));
            let bv = bias.map(|b| self.value(b).view().into_dimensionality().unwrap());
            kernels::conv2d_fwd(&xv.view(), &wv.view(), bv.as_ref(), stride, pad, groups)
        };
        let mut parents = vec![x.0, w.0];
        if let Some(b) = bias {
            parents.push(b.0);
        }
        let rg = self.rg(&parents);
        self.push(
            y.into_dyn(),
            Op::Conv2d {
                x: x.0,
                w: w.0,
                bias: bias.map(|b| b.0),
                stride,
                pad,
                groups,
            },
            Aux::None,
            rg,
        )
    }

    pub fn dwconv3x3(&mut self, x: Var, w: Var) -> Var {
        let y = {
            let xv = as4(self.value(x));
            let wv = as4(self.value(w));
            kernels::dwconv3x3_fwd(&xv.view(), &wv.view())
        };
        let rg = self.rg(&[x.0, w.0]);
        self.push(y.into_dyn(), Op::DwConv3x3 { x: x.0, w: w.0 }, Aux::None, rg)
    }

    pub fn conv_transpose2x2(&mut self, x: Var, w: Var) -> Var {
        let y = {
            let xv = as4(self.value(x));
            let wv = as4(self.value(w));
            kernels::convt2x2_fwd(&xv.view(), &wv.view())
        };
        let rg = self.rg(&[x.0, w.0]);
        self.push(y.into_dyn(), Op::ConvT2x2 { x: x.0, w: w.0 }, Aux::None, rg)
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Var {
        let (y, arg) = {
            let xv = as4(self.value(x));
            kernels::maxpool2x2_fwd(&xv.view())
        };
        let rg = self.rg(&[x.0]);
        self.push(y.into_dyn(), Op::MaxPool2x2 { x: x.0 }, Aux::Pool(arg), rg)
    }

    // ------------------------------------------------------------------
    // Attention plumbing
    // ------------------------------------------------------------------

    /// Batched matrix multiply of rank-3 tensors `(B, M, K) x (B, K, N)`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (ba, m, k) = dims3(av);
        let (bb, k2, n) = dims3(bv);
        assert_eq!(ba, bb, "bmm batch mismatch");
        assert_eq!(k, k2, "bmm inner dim mismatch");
        let a3 = av.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let b3 = bv.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let mut y = ndarray::Array3::<T>::zeros((ba, m, n));
        for i in 0..ba {
            let mut yi = y.slice_mut(s![i, .., ..]);
            ndarray::linalg::general_mat_mul(
                T::one(),
                &a3.slice(s![i, .., ..]),
                &b3.slice(s![i, .., ..]),
                T::zero(),
                &mut yi,
            );
        }
        let rg = self.rg(&[a.0, b.0]);
        self.push(y.into_dyn(), Op::Bmm { a: a.0, b: b.0 }, Aux::None, rg)
    }

    /// Swap the last two axes of a rank-3 tensor (materialised copy).
    pub fn transpose_last2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let y = xv
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
            .permuted_axes([0, 2, 1])
            .as_standard_layout()
            .into_owned();
        let rg = self.rg(&[x.0]);
        self.push(y.into_dyn(), Op::TransposeLast2 { x: x.0 }, Aux::None, rg)
    }

    /// Reshape preserving element order.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let xv = self.value(x);
        assert_eq!(
            xv.len(),
            shape.iter().product::<usize>(),
            "reshape element count"
        );
        let y = xv
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("standard layout reshape");
        let rg = self.rg(&[x.0]);
        self.push(y, Op::Reshape { x: x.0 }, Aux::None, rg)
    }

    /// Softmax over the last axis of a rank-3 tensor.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let x3 = self
            .value(x)
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
            .to_owned();
        let y = kernels::softmax_last(&x3);
        let rg = self.rg(&[x.0]);
        self.push(y.into_dyn(), Op::SoftmaxLast { x: x.0 }, Aux::None, rg)
    }

    /// Divide a tensor by a learnable scalar of shape `[1]`.
    pub fn div_by_scalar(&mut self, x: Var, alpha: Var) -> Var {
        let a = self.scalar(alpha);
        let y = self.value(x).mapv(|v| v / a);
        let rg = self.rg(&[x.0, alpha.0]);
        self.push(
            y,
            Op::DivByScalar {
                x: x.0,
                alpha: alpha.0,
            },
            Aux::None,
            rg,
        )
    }

    // ------------------------------------------------------------------
    // Normalisation
    // ------------------------------------------------------------------

    /// Layer normalisation across the channel axis of an NCHW tensor,
    /// independently at every spatial position, with per-channel affine.
    pub fn layer_norm_ch(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (mean, inv_std, y) = {
            let xv = as4(self.value(x));
            let (b, c, h, w) = xv.dim();
            let g = self.value(gamma);
            let bt = self.value(beta);
            assert_eq!(g.len(), c);
            assert_eq!(bt.len(), c);
            let cn = T::from_f64(c as f64);
            let mut mean = Array4::<T>::zeros((b, 1, h, w));
            let mut inv_std = Array4::<T>::zeros((b, 1, h, w));
            let mut y = Array4::<T>::zeros((b, c, h, w));
            for bi in 0..b {
                for i in 0..h {
                    for j in 0..w {
                        let mut mu = T::zero();
                        for ci in 0..c {
                            mu = mu + xv[(bi, ci, i, j)];
                        }
                        mu = mu / cn;
                        let mut var = T::zero();
                        for ci in 0..c {
                            let d = xv[(bi, ci, i, j)] - mu;
                            var = var + d * d;
                        }
                        var = var / cn;
                        let r = T::one() / (var + self.eps_ln).sqrt();
                        mean[(bi, 0, i, j)] = mu;
                        inv_std[(bi, 0, i, j)] = r;
                        for ci in 0..c {
                            let xh = (xv[(bi, ci, i, j)] - mu) * r;
                            y[(bi, ci, i, j)] =
                                g[ndarray::IxDyn(&[ci])] * xh + bt[ndarray::IxDyn(&[ci])];
                        }
                    }
                }
            }
            (mean, inv_std, y)
        };
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        self.push(
            y.into_dyn(),
            Op::LayerNormCh {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
            },
            Aux::Norm(mean.into_dyn(), inv_std.into_dyn()),
            rg,
        )
    }

    /// Batch normalisation (training mode): per-channel statistics over
    /// batch and spatial axes. Returns the output plus the biased batch
    /// mean/variance so the caller can maintain running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> (Var, Array1<T>, Array1<T>) {
        let (mean, var, inv_std, y) = {
            let xv = as4(self.value(x));
            let (b, c, h, w) = xv.dim();
            let n = T::from_f64((b * h * w) as f64);
            let g = self.value(gamma);
            let bt = self.value(beta);
            let mut mean = Array1::<T>::zeros(c);
            let mut var = Array1::<T>::zeros(c);
            for ci in 0..c {
                let mut acc = T::zero();
                for bi in 0..b {
                    for i in 0..h {
                        for j in 0..w {
                            acc = acc + xv[(bi, ci, i, j)];
                        }
                    }
                }
                mean[ci] = acc / n;
                let mut vacc = T::zero();
                for bi in 0..b {
                    for i in 0..h {
                        for j in 0..w {
                            let d = xv[(bi, ci, i, j)] - mean[ci];
                            vacc = vacc + d * d;
                        }
                    }
                }
                var[ci] = vacc / n;
            }
            let inv_std = var.mapv(|v| T::one() / (v + self.eps_bn).sqrt());
            let mut y = Array4::<T>::zeros((b, c, h, w));
            for bi in 0..b {
                for ci in 0..c {
                    let (mu, r) = (mean[ci], inv_std[ci]);
                    let (gc, bc) = (g[ndarray::IxDyn(&[ci])], bt[ndarray::IxDyn(&[ci])]);
                    for i in 0..h {
                        for j in 0..w {
                            y[(bi, ci, i, j)] = gc * ((xv[(bi, ci, i, j)] - mu) * r) + bc;
                        }
                    }
                }
            }
            (mean, var, inv_std, y)
        };
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        let v = self.push(
            y.into_dyn(),
            Op::BatchNormTrain {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
            },
            Aux::Norm(mean.clone().into_dyn(), inv_std.into_dyn()),
            rg,
        );
        (v, mean, var)
    }

    /// Batch normalisation (inference mode) using frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Array1<T>,
        running_var: &Array1<T>,
    ) -> Var {
        let (mean, inv_std, y) = {
            let xv = as4(self.value(x));
            let (b, c, h, w) = xv.dim();
            let g = self.value(gamma);
            let bt = self.value(beta);
            let inv_std = running_var.mapv(|v| T::one() / (v + self.eps_bn).sqrt());
            let mut y = Array4::<T>::zeros((b, c, h, w));
            for bi in 0..b {
                for ci in 0..c {
                    let (mu, r) = (running_mean[ci], inv_std[ci]);
                    let (gc, bc) = (g[ndarray::IxDyn(&[ci])], bt[ndarray::IxDyn(&[ci])]);
                    for i in 0..h {
                        for j in 0..w {
                            y[(bi, ci, i, j)] = gc * ((xv[(bi, ci, i, j)] - mu) * r) + bc;
                        }
                    }
                }
            }
            (running_mean.clone(), inv_std, y)
        };
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        self.push(
            y.into_dyn(),
            Op::BatchNormEval {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
            },
            Aux::Norm(mean.into_dyn(), inv_std.into_dyn()),
            rg,
        )
    }

    // ------------------------------------------------------------------
    // Activations and elementwise maps
    // ------------------------------------------------------------------

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[x.0]);
        self.push(y, Op::Relu { x: x.0 }, Aux::None, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let a = T::from_f64(slope);
        let y = self.value(x).mapv(|v| if v > T::zero() { v } else { a * v });
        let rg = self.rg(&[x.0]);
        self.push(y, Op::LeakyRelu { x: x.0, slope }, Aux::None, rg)
    }

    /// GELU with the tanh approximation (the backward pass differentiates
    /// the same approximation, so finite differences agree).
    pub fn gelu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(gelu_tanh);
        let rg = self.rg(&[x.0]);
        self.push(y, Op::Gelu { x: x.0 }, Aux::None, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.rg(&[x.0]);
        self.push(y, Op::Sigmoid { x: x.0 }, Aux::None, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) + self.value(b);
        let rg = self.rg(&[a.0, b.0]);
        self.push(y, Op::Add { a: a.0, b: b.0 }, Aux::None, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) - self.value(b);
        let rg = self.rg(&[a.0, b.0]);
        self.push(y, Op::Sub { a: a.0, b: b.0 }, Aux::None, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) * self.value(b);
        let rg = self.rg(&[a.0, b.0]);
        self.push(y, Op::Mul { a: a.0, b: b.0 }, Aux::None, rg)
    }

    /// Multiply an NCHW tensor by per-(batch, channel) scalars `(B, C, 1, 1)`.
    pub fn mul_bcast_c(&mut self, x: Var, scale: Var) -> Var {
        let y = {
            let xv = as4(self.value(x));
            let sv = as4(self.value(scale));
            let (b, c, h, w) = xv.dim();
            assert_eq!(sv.dim(), (b, c, 1, 1), "broadcast scale shape");
            let mut y = xv.to_owned();
            for bi in 0..b {
                for ci in 0..c {
                    let f = sv[(bi, ci, 0, 0)];
                    y.slice_mut(s![bi, ci, .., ..]).mapv_inplace(|v| v * f);
                }
            }
            let _ = (h, w);
            y
        };
        let rg = self.rg(&[x.0, scale.0]);
        self.push(
            y.into_dyn(),
            Op::MulBcastC {
                x: x.0,
                scale: scale.0,
            },
            Aux::None,
            rg,
        )
    }

    /// `1 - x`, used for complementary attention weights.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| T::one() - v);
        let rg = self.rg(&[x.0]);
        self.push(y, Op::OneMinus { x: x.0 }, Aux::None, rg)
    }

    /// Spatial global average pool: `(B, C, H, W) -> (B, C, 1, 1)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let y = {
            let xv = as4(self.value(x));
            let (b, c, h, w) = xv.dim();
            let n = T::from_f64((h * w) as f64);
            let mut y = Array4::<T>::zeros((b, c, 1, 1));
            for bi in 0..b {
                for ci in 0..c {
                    let mut acc = T::zero();
                    for i in 0..h {
                        for j in 0..w {
                            acc = acc + xv[(bi, ci, i, j)];
                        }
                    }
                    y[(bi, ci, 0, 0)] = acc / n;
                }
            }
            y
        };
        let rg = self.rg(&[x.0]);
        self.push(y.into_dyn(), Op::GlobalAvgPool { x: x.0 }, Aux::None, rg)
    }

    /// Channel slice `[start, start + len)` of an NCHW tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let y = {
            let xv = as4(self.value(x));
            xv.slice(s![.., start..start + len, .., ..]).to_owned()
        };
        let rg = self.rg(&[x.0]);
        self.push(
            y.into_dyn(),
            Op::SliceC {
                x: x.0,
                start,
                len,
            },
            Aux::None,
            rg,
        )
    }

    /// Tile the channel axis `times` times (e.g. grey -> RGB).
    pub fn repeat_channels(&mut self, x: Var, times: usize) -> Var {
        let y = {
            let xv = as4(self.value(x));
            let (b, c, h, w) = xv.dim();
            let mut y = Array4::<T>::zeros((b, c * times, h, w));
            for t in 0..times {
                y.slice_mut(s![.., t * c..(t + 1) * c, .., ..]).assign(&xv);
            }
            y
        };
        let rg = self.rg(&[x.0]);
        self.push(
            y.into_dyn(),
            Op::RepeatC { x: x.0, times },
            Aux::None,
            rg,
        )
    }

    /// Clamp to `[0, 1]`; the gradient passes only inside the open interval.
    pub fn clamp01(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| {
            if v < T::zero() {
                T::zero()
            } else if v > T::one() {
                T::one()
            } else {
                v
            }
        });
        let rg = self.rg(&[x.0]);
        self.push(y, Op::Clamp01 { x: x.0 }, Aux::None, rg)
    }

    /// Elementwise lower clamp; used to floor the MSE before the log.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        let f = T::from_f64(floor);
        let y = self.value(x).mapv(|v| if v < f { f } else { v });
        let rg = self.rg(&[x.0]);
        self.push(y, Op::ClampMin { x: x.0, floor }, Aux::None, rg)
    }

    /// Elementwise base-10 logarithm (inputs must be positive).
    pub fn log10(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| v.log10());
        let rg = self.rg(&[x.0]);
        self.push(y, Op::Log10 { x: x.0 }, Aux::None, rg)
    }

    /// `a * x + b` with compile-time constants (no gradient for `a`, `b`).
    pub fn mul_add_const(&mut self, x: Var, a: f64, b: f64) -> Var {
        let (ac, bc) = (T::from_f64(a), T::from_f64(b));
        let y = self.value(x).mapv(|v| ac * v + bc);
        let rg = self.rg(&[x.0]);
        self.push(y, Op::MulAddConst { x: x.0, a }, Aux::None, rg)
    }

    /// Mean over all elements, returned as shape `[1]`.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = T::from_f64(xv.len() as f64);
        let mut acc = T::zero();
        for &v in xv.iter() {
            acc = acc + v;
        }
        let y = ArrayD::from_elem(IxDyn(&[1]), acc / n);
        let rg = self.rg(&[x.0]);
        self.push(y, Op::MeanAll { x: x.0 }, Aux::None, rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| v.abs());
        let rg = self.rg(&[x.0]);
        self.push(y, Op::Abs { x: x.0 }, Aux::None, rg)
    }

    /// Fixed per-channel affine `(x - shift) * scale` for input whitening.
    pub fn affine_channels(&mut self, x: Var, scale: Array1<T>, shift: Array1<T>) -> Var {
        let y = {
            let xv = as4(self.value(x));
            let (b, c, h, w) = xv.dim();
            assert_eq!(scale.len(), c);
            assert_eq!(shift.len(), c);
            let mut y = xv.to_owned();
            for bi in 0..b {
                for ci in 0..c {
                    let (sc, sh) = (scale[ci], shift[ci]);
                    y.slice_mut(s![bi, ci, .., ..])
                        .mapv_inplace(|v| (v - sh) * sc);
                }
            }
            let _ = (h, w);
            y
        };
        let rg = self.rg(&[x.0]);
        self.push(
            y.into_dyn(),
            Op::AffineCh { x: x.0 },
            Aux::Affine(scale),
            rg,
        )
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Reverse-mode sweep from a scalar root. Returns per-node gradients;
    /// nodes that do not influence the root (or require no gradient) stay
    /// `None`.
    pub fn backward(&self, root: Var) -> Grads<T> {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<ArrayD<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(IxDyn(&[1]), T::one()));

        for idx in (0..=root.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let grad = grads[idx].take().unwrap();
            self.backward_node(idx, &grad, &mut grads);
        }
        Grads { by_var: grads }
    }

    fn accum(&self, grads: &mut [Option<ArrayD<T>>], target: usize, delta: ArrayD<T>) {
        if !self.nodes[target].requires_grad {
            return;
        }
        match &mut grads[target] {
            Some(existing) => {
                existing.zip_mut_with(&delta, |e, &d| *e = *e + d);
            }
            slot @ None => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backward_node(&self, idx: usize, grad: &ArrayD<T>, grads: &mut [Option<ArrayD<T>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
                groups,
            } => {
                let xv = as4(&self.nodes[*x].value);
                let wv = as4(&self.nodes[*w].value);
                let dyv = as4(grad);
                let need_dx = self.nodes[*x].requires_grad;
                let need_dw = self.nodes[*w].requires_grad;
                let (dx, dw) = kernels::conv2d_bwd(
                    &xv.view(),
                    &wv.view(),
                    &dyv.view(),
                    *stride,
                    *pad,
                    *groups,
                    need_dx,
                    need_dw,
                );
                if let Some(dx) = dx {
                    self.accum(grads, *x, dx.into_dyn());
                }
                if let Some(dw) = dw {
                    self.accum(grads, *w, dw.into_dyn());
                }
                if let Some(b) = bias {
                    if self.nodes[*b].requires_grad {
                        let db = kernels::sum_keep_channel(&dyv.view());
                        self.accum(grads, *b, db.into_dyn());
                    }
                }
            }
            Op::DwConv3x3 { x, w } => {
                let xv = as4(&self.nodes[*x].value);
                let wv = as4(&self.nodes[*w].value);
                let dyv = as4(grad);
                let (dx, dw) = kernels::dwconv3x3_bwd(&xv.view(), &wv.view(), &dyv.view());
                self.accum(grads, *x, dx.into_dyn());
                self.accum(grads, *w, dw.into_dyn());
            }
            Op::ConvT2x2 { x, w } => {
                let xv = as4(&self.nodes[*x].value);
                let wv = as4(&self.nodes[*w].value);
                let dyv = as4(grad);
                let (dx, dw) = kernels::convt2x2_bwd(&xv.view(), &wv.view(), &dyv.view());
                self.accum(grads, *x, dx.into_dyn());
                self.accum(grads, *w, dw.into_dyn());
            }
            Op::Bmm { a, b } => {
                let av = self.nodes[*a]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap();
                let bv = self.nodes[*b]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap();
                let dy = grad
                    .view()
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap();
                let (bs, m, _k) = av.dim();
                let n = bv.dim().2;
                if self.nodes[*a].requires_grad {
                    let mut da = ndarray::Array3::<T>::zeros(av.dim());
                    for i in 0..bs {
                        let mut dai = da.slice_mut(s![i, .., ..]);
                        ndarray::linalg::general_mat_mul(
                            T::one(),
                            &dy.slice(s![i, .., ..]),
                            &bv.slice(s![i, .., ..]).t(),
                            T::zero(),
                            &mut dai,
                        );
                    }
                    self.accum(grads, *a, da.into_dyn());
                }
                if self.nodes[*b].requires_grad {
                    let mut db = ndarray::Array3::<T>::zeros(bv.dim());
                    for i in 0..bs {
                        let mut dbi = db.slice_mut(s![i, .., ..]);
                        ndarray::linalg::general_mat_mul(
                            T::one(),
                            &av.slice(s![i, .., ..]).t(),
                            &dy.slice(s![i, .., ..]),
                            T::zero(),
                            &mut dbi,
                        );
                    }
                    self.accum(grads, *b, db.into_dyn());
                }
                let _ = (m, n);
            }
            Op::TransposeLast2 { x } => {
                let dy = grad
                    .view()
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap()
                    .permuted_axes([0, 2, 1])
                    .as_standard_layout()
                    .into_owned();
                self.accum(grads, *x, dy.into_dyn());
            }
            Op::Reshape { x } => {
                let parent_shape = self.nodes[*x].value.shape().to_vec();
                let dy = grad
                    .to_owned()
                    .into_shape_with_order(IxDyn(&parent_shape))
                    .unwrap();
                self.accum(grads, *x, dy);
            }
            Op::SoftmaxLast { x } => {
                let y = self.nodes[idx]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap();
                let dy = grad
                    .view()
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap();
                let mut dx = dy.to_owned();
                for (mut dx_lane, y_lane) in
                    dx.lanes_mut(Axis(2)).into_iter().zip(y.lanes(Axis(2)))
                {
                    let mut dot = T::zero();
                    for (&g, &yv) in dx_lane.iter().zip(y_lane.iter()) {
                        dot = dot + g * yv;
                    }
                    for (g, &yv) in dx_lane.iter_mut().zip(y_lane.iter()) {
                        *g = (*g - dot) * yv;
                    }
                }
                self.accum(grads, *x, dx.into_dyn());
            }
            Op::DivByScalar { x, alpha } => {
                let a = {
                    let v = &self.nodes[*alpha].value;
                    *v.iter().next().unwrap()
                };
                if self.nodes[*x].requires_grad {
                    let dx = grad.mapv(|g| g / a);
                    self.accum(grads, *x, dx);
                }
                if self.nodes[*alpha].requires_grad {
                    // y = x / a  =>  dL/da = -sum(dy * y) / a
                    let y = &self.nodes[idx].value;
                    let mut acc = T::zero();
                    for (&g, &yv) in grad.iter().zip(y.iter()) {
                        acc = acc + g * yv;
                    }
                    let da = ArrayD::from_elem(IxDyn(&[1]), -acc / a);
                    self.accum(grads, *alpha, da);
                }
            }
            Op::LayerNormCh { x, gamma, beta } => {
                let (mean, inv_std) = match &self.nodes[idx].aux {
                    Aux::Norm(m, r) => (as4(m), as4(r)),
                    _ => unreachable!("layer norm aux"),
                };
                let xv = as4(&self.nodes[*x].value);
                let g = &self.nodes[*gamma].value;
                let dy = as4(grad);
                let (b, c, h, w) = xv.dim();
                let cn = T::from_f64(c as f64);
                let mut dx = Array4::<T>::zeros((b, c, h, w));
                let mut dgamma = Array1::<T>::zeros(c);
                let mut dbeta = Array1::<T>::zeros(c);
                for bi in 0..b {
                    for i in 0..h {
                        for j in 0..w {
                            let mu = mean[(bi, 0, i, j)];
                            let r = inv_std[(bi, 0, i, j)];
                            let mut s1 = T::zero(); // sum dy*gamma
                            let mut s2 = T::zero(); // sum dy*gamma*xhat
                            for ci in 0..c {
                                let xh = (xv[(bi, ci, i, j)] - mu) * r;
                                let dg = dy[(bi, ci, i, j)] * g[ndarray::IxDyn(&[ci])];
                                s1 = s1 + dg;
                                s2 = s2 + dg * xh;
                                dgamma[ci] = dgamma[ci] + dy[(bi, ci, i, j)] * xh;
                                dbeta[ci] = dbeta[ci] + dy[(bi, ci, i, j)];
                            }
                            s1 = s1 / cn;
                            s2 = s2 / cn;
                            for ci in 0..c {
                                let xh = (xv[(bi, ci, i, j)] - mu) * r;
                                let dg = dy[(bi, ci, i, j)] * g[ndarray::IxDyn(&[ci])];
                                dx[(bi, ci, i, j)] = r * (dg - s1 - xh * s2);
                            }
                        }
                    }
                }
                self.accum(grads, *x, dx.into_dyn());
                self.accum(grads, *gamma, dgamma.into_dyn());
                self.accum(grads, *beta, dbeta.into_dyn());
            }
            Op::BatchNormTrain { x, gamma, beta } => {
                let (mean, inv_std) = match &self.nodes[idx].aux {
                    Aux::Norm(m, r) => (
                        m.view().into_dimensionality::<ndarray::Ix1>().unwrap(),
                        r.view().into_dimensionality::<ndarray::Ix1>().unwrap(),
                    ),
                    _ => unreachable!("batch norm aux"),
                };
                let xv = as4(&self.nodes[*x].value);
                let g = &self.nodes[*gamma].value;
                let dy = as4(grad);
                let (b, c, h, w) = xv.dim();
                let n = T::from_f64((b * h * w) as f64);
                let mut dx = Array4::<T>::zeros((b, c, h, w));
                let mut dgamma = Array1::<T>::zeros(c);
                let mut dbeta = Array1::<T>::zeros(c);
                for ci in 0..c {
                    let mu = mean[ci];
                    let r = inv_std[ci];
                    let gc = g[ndarray::IxDyn(&[ci])];
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for bi in 0..b {
                        for i in 0..h {
                            for j in 0..w {
                                let xh = (xv[(bi, ci, i, j)] - mu) * r;
                                let d = dy[(bi, ci, i, j)];
                                s1 = s1 + d;
                                s2 = s2 + d * xh;
                                dgamma[ci] = dgamma[ci] + d * xh;
                            }
                        }
                    }
                    dbeta[ci] = s1;
                    let s1n = s1 / n;
                    let s2n = s2 / n;
                    for bi in 0..b {
                        for i in 0..h {
                            for j in 0..w {
                                let xh = (xv[(bi, ci, i, j)] - mu) * r;
                                dx[(bi, ci, i, j)] =
                                    gc * r * (dy[(bi, ci, i, j)] - s1n - xh * s2n);
                            }
                        }
                    }
                }
                self.accum(grads, *x, dx.into_dyn());
                self.accum(grads, *gamma, dgamma.into_dyn());
                self.accum(grads, *beta, dbeta.into_dyn());
            }
            Op::BatchNormEval { x, gamma, beta } => {
                let (mean, inv_std) = match &self.nodes[idx].aux {
                    Aux::Norm(m, r) => (
                        m.view().into_dimensionality::<ndarray::Ix1>().unwrap(),
                        r.view().into_dimensionality::<ndarray::Ix1>().unwrap(),
                    ),
                    _ => unreachable!("batch norm aux"),
                };
                let xv = as4(&self.nodes[*x].value);
                let g = &self.nodes[*gamma].value;
                let dy = as4(grad);
                let (b, c, h, w) = xv.dim();
                let mut dx = Array4::<T>::zeros((b, c, h, w));
                let mut dgamma = Array1::<T>::zeros(c);
                let mut dbeta = Array1::<T>::zeros(c);
                for ci in 0..c {
                    let (mu, r) = (mean[ci], inv_std[ci]);
                    let gc = g[ndarray::IxDyn(&[ci])];
                    for bi in 0..b {
                        for i in 0..h {
                            for j in 0..w {
                                let d = dy[(bi, ci, i, j)];
                                let xh = (xv[(bi, ci, i, j)] - mu) * r;
                                dx[(bi, ci, i, j)] = d * gc * r;
                                dgamma[ci] = dgamma[ci] + d * xh;
                                dbeta[ci] = dbeta[ci] + d;
                            }
                        }
                    }
                }
                self.accum(grads, *x, dx.into_dyn());
                self.accum(grads, *gamma, dgamma.into_dyn());
                self.accum(grads, *beta, dbeta.into_dyn());
            }
            Op::Relu { x } => {
                let xv = &self.nodes[*x].value;
                let mut dx = grad.clone();
                dx.zip_mut_with(xv, |g, &v| {
                    if v <= T::zero() {
                        *g = T::zero()
                    }
                });
                self.accum(grads, *x, dx);
            }
            Op::LeakyRelu { x, slope } => {
                let a = T::from_f64(*slope);
                let xv = &self.nodes[*x].value;
                let mut dx = grad.clone();
                dx.zip_mut_with(xv, |g, &v| {
                    if v <= T::zero() {
                        *g = *g * a
                    }
                });
                self.accum(grads, *x, dx);
            }
            Op::Gelu { x } => {
                let xv = &self.nodes[*x].value;
                let mut dx = grad.clone();
                dx.zip_mut_with(xv, |g, &v| *g = *g * gelu_tanh_grad(v));
                self.accum(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                let y = &self.nodes[idx].value;
                let mut dx = grad.clone();
                dx.zip_mut_with(y, |g, &yv| *g = *g * yv * (T::one() - yv));
                self.accum(grads, *x, dx);
            }
            Op::Add { a, b } => {
                self.accum(grads, *a, grad.clone());
                self.accum(grads, *b, grad.clone());
            }
            Op::Sub { a, b } => {
                self.accum(grads, *a, grad.clone());
                self.accum(grads, *b, grad.mapv(|g| -g));
            }
            Op::Mul { a, b } => {
                if self.nodes[*a].requires_grad {
                    let mut da = grad.clone();
                    da.zip_mut_with(&self.nodes[*b].value, |g, &v| *g = *g * v);
                    self.accum(grads, *a, da);
                }
                if self.nodes[*b].requires_grad {
                    let mut db = grad.clone();
                    db.zip_mut_with(&self.nodes[*a].value, |g, &v| *g = *g * v);
                    self.accum(grads, *b, db);
                }
            }
            Op::MulBcastC { x, scale } => {
                let xv = as4(&self.nodes[*x].value);
                let sv = as4(&self.nodes[*scale].value);
                let dy = as4(grad);
                let (b, c, h, w) = xv.dim();
                if self.nodes[*x].requires_grad {
                    let mut dx = dy.to_owned();
                    for bi in 0..b {
                        for ci in 0..c {
                            let f = sv[(bi, ci, 0, 0)];
                            dx.slice_mut(s![bi, ci, .., ..]).mapv_inplace(|v| v * f);
                        }
                    }
                    self.accum(grads, *x, dx.into_dyn());
                }
                if self.nodes[*scale].requires_grad {
                    let mut ds = Array4::<T>::zeros((b, c, 1, 1));
                    for bi in 0..b {
                        for ci in 0..c {
                            let mut acc = T::zero();
                            for i in 0..h {
                                for j in 0..w {
                                    acc = acc + dy[(bi, ci, i, j)] * xv[(bi, ci, i, j)];
                                }
                            }
                            ds[(bi, ci, 0, 0)] = acc;
                        }
                    }
                    self.accum(grads, *scale, ds.into_dyn());
                }
            }
            Op::OneMinus { x } => {
                self.accum(grads, *x, grad.mapv(|g| -g));
            }
            Op::GlobalAvgPool { x } => {
                let x_dim = as4(&self.nodes[*x].value).dim();
                let (b, c, h, w) = x_dim;
                let dy = as4(grad);
                let n = T::from_f64((h * w) as f64);
                let mut dx = Array4::<T>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        let g = dy[(bi, ci, 0, 0)] / n;
                        dx.slice_mut(s![bi, ci, .., ..]).fill(g);
                    }
                }
                self.accum(grads, *x, dx.into_dyn());
            }
            Op::SliceC { x, start, len } => {
                let x_dim = as4(&self.nodes[*x].value).dim();
                let dy = as4(grad);
                let mut dx = Array4::<T>::zeros(x_dim);
                dx.slice_mut(s![.., *start..*start + *len, .., ..])
                    .assign(&dy);
                self.accum(grads, *x, dx.into_dyn());
            }
            Op::RepeatC { x, times } => {
                let x_dim = as4(&self.nodes[*x].value).dim();
                let (_, c, _, _) = x_dim;
                let dy = as4(grad);
                let mut dx = Array4::<T>::zeros(x_dim);
                for t in 0..*times {
                    let src = dy.slice(s![.., t * c..(t + 1) * c, .., ..]);
                    dx.zip_mut_with(&src, |d, &v| *d = *d + v);
                }
                self.accum(grads, *x, dx.into_dyn());
            }
            Op::Clamp01 { x } => {
                let xv = &self.nodes[*x].value;
                let mut dx = grad.clone();
                dx.zip_mut_with(xv, |g, &v| {
                    if v <= T::zero() || v >= T::one() {
                        *g = T::zero()
                    }
                });
                self.accum(grads, *x, dx);
            }
            Op::ClampMin { x, floor } => {
                let f = T::from_f64(*floor);
                let xv = &self.nodes[*x].value;
                let mut dx = grad.clone();
                dx.zip_mut_with(xv, |g, &v| {
                    if v <= f {
                        *g = T::zero()
                    }
                });
                self.accum(grads, *x, dx);
            }
            Op::Log10 { x } => {
                let xv = &self.nodes[*x].value;
                let ln10 = T::from_f64(std::f64::consts::LN_10);
                let mut dx = grad.clone();
                dx.zip_mut_with(xv, |g, &v| *g = *g / (v * ln10));
                self.accum(grads, *x, dx);
            }
            Op::MulAddConst { x, a } => {
                let ac = T::from_f64(*a);
                self.accum(grads, *x, grad.mapv(|g| g * ac));
            }
            Op::MeanAll { x } => {
                let xv = &self.nodes[*x].value;
                let n = T::from_f64(xv.len() as f64);
                let g = *grad.iter().next().unwrap() / n;
                let dx = ArrayD::from_elem(xv.raw_dim(), g);
                self.accum(grads, *x, dx);
            }
            Op::Abs { x } => {
                let xv = &self.nodes[*x].value;
                let mut dx = grad.clone();
                dx.zip_mut_with(xv, |g, &v| {
                    if v < T::zero() {
                        *g = -*g;
                    } else if v == T::zero() {
                        *g = T::zero();
                    }
                });
                self.accum(grads, *x, dx);
            }
            Op::AffineCh { x } => {
                let scale = match &self.nodes[idx].aux {
                    Aux::Affine(s) => s.clone(),
                    _ => unreachable!("affine aux"),
                };
                let dy = as4(grad);
                let (b, c, h, w) = dy.dim();
                let mut dx = dy.to_owned();
                for bi in 0..b {
                    for ci in 0..c {
                        let f = scale[ci];
                        dx.slice_mut(s![bi, ci, .., ..]).mapv_inplace(|v| v * f);
                    }
                }
                let _ = (h, w);
                self.accum(grads, *x, dx.into_dyn());
            }
            Op::MaxPool2x2 { x } => {
                let arg = match &self.nodes[idx].aux {
                    Aux::Pool(a) => a,
                    _ => unreachable!("pool aux"),
                };
                let x_dim = as4(&self.nodes[*x].value).dim();
                let dy = as4(grad);
                let dx = kernels::maxpool2x2_bwd(x_dim, arg, &dy.view());
                self.accum(grads, *x, dx.into_dyn());
            }
        }
    }
}

/// View a dynamic tensor as rank 4; panics on rank mismatch (engine bug).
fn as4<T: Scalar>(a: &ArrayD<T>) -> ndarray::ArrayView4<'_, T> {
    a.view()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("rank-4 tensor expected")
}

fn dims3<T: Scalar>(a: &ArrayD<T>) -> (usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 3, "rank-3 tensor expected");
    (s[0], s[1], s[2])
}

/// Tanh-approximated GELU.
#[inline]
pub fn gelu_tanh<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = T::from_f64(0.044_715);
    let half = T::from_f64(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (T::one() + u.tanh())
}

/// Exact derivative of [`gelu_tanh`].
#[inline]
pub fn gelu_tanh_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let k = T::from_f64(0.044_715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * k * x * x)
}
