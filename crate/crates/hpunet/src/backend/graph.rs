//! Wengert-tape computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] owns an arena of nodes; constructing an op evaluates it
//! eagerly and records what the reverse pass needs. [`Var`] is a plain index
//! into the arena, so user code passes copies around freely. The tape is
//! topologically ordered by construction: every input of a node precedes it.
//!
//! Reductions accumulate in `f64` regardless of the graph's scalar type,
//! which keeps float32 losses accurate enough for finite-difference checks.

use super::kernels::{self, ConvDims};
use super::rng::RngState;
use super::tensor::{Real, Tensor};
use super::BackendError;

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
}

enum Op<F> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        dims: ConvDims,
    },
    AvgPool2x2 {
        input: Var,
        planes: usize,
        h: usize,
        w: usize,
    },
    UpsampleNn2x2 {
        input: Var,
        planes: usize,
        h: usize,
        w: usize,
    },
    ConcatChannels {
        a: Var,
        b: Var,
        n: usize,
        a_ch: usize,
        b_ch: usize,
        hw: usize,
    },
    SliceChannels {
        input: Var,
        n: usize,
        ch: usize,
        from: usize,
        to: usize,
        hw: usize,
    },
    Relu {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        c: F,
    },
    AddConst {
        input: Var,
    },
    Exp {
        input: Var,
    },
    Clamp {
        input: Var,
        lo: F,
        hi: F,
    },
    Reparam {
        mu: Var,
        sigma: Var,
        eps: Vec<F>,
    },
    SoftmaxCeMap {
        logits: Var,
        target: Vec<i32>,
        ignore: Option<Vec<bool>>,
        probs: Vec<F>,
        classes: usize,
    },
    SumAll {
        input: Var,
    },
    MulMask {
        input: Var,
        mask: Vec<F>,
    },
}

/// Reverse-mode computation graph over scalar type `F`.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    grads: Option<Vec<Vec<F>>>,
    scratch_a: Vec<F>,
    scratch_b: Vec<F>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: None,
            scratch_a: Vec::new(),
            scratch_b: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<(), BackendError> {
        if v.0 >= self.nodes.len() {
            Err(BackendError::NotOnTape)
        } else {
            Ok(())
        }
    }

    // ---- leaves -----------------------------------------------------------

    /// Introduces external data (parameters, images, constants) as a leaf.
    pub fn leaf(&mut self, tensor: &Tensor<F>) -> Var {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf)
    }

    pub fn leaf_vec(&mut self, shape: &[usize], data: Vec<F>) -> Result<Var, BackendError> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(BackendError::LengthMismatch {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf))
    }

    pub fn scalar(&mut self, v: F) -> Var {
        self.push(Vec::new(), vec![v], Op::Leaf)
    }

    // ---- accessors --------------------------------------------------------

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> F {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<F> {
        Tensor::from_vec(&self.nodes[v.0].shape, self.nodes[v.0].value.clone())
            .expect("node invariant: value length matches shape")
    }

    /// Gradient of the last [`Graph::backward`] loss w.r.t. `v`.
    /// Panics if backward has not been run on this graph.
    pub fn grad(&self, v: Var) -> &[F] {
        &self.grads.as_ref().expect("backward() has not been run")[v.0]
    }

    /// Adds the gradient of `v` into the tensor's gradient buffer, enabling
    /// it first if necessary.
    pub fn accumulate_grad_into(&self, v: Var, tensor: &mut Tensor<F>) {
        tensor.enable_grad();
        let g = self.grad(v);
        for (dst, src) in tensor.grad_mut().unwrap().iter_mut().zip(g) {
            *dst = *dst + *src;
        }
    }

    // ---- structured ops ---------------------------------------------------

    /// Same-padded square convolution; `kernel` is `[Cout, Cin, k, k]`,
    /// `bias` is `[Cout]`, `input` is `[N, Cin, H, W]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var, BackendError> {
        self.check(input)?;
        self.check(kernel)?;
        self.check(bias)?;
        let ishape = self.shape(input).to_vec();
        let kshape = self.shape(kernel).to_vec();
        let bshape = self.shape(bias).to_vec();
        if ishape.len() != 4 {
            return Err(BackendError::BadRank {
                op: "conv2d",
                expected: 4,
                shape: ishape,
            });
        }
        if kshape.len() != 4 {
            return Err(BackendError::BadRank {
                op: "conv2d",
                expected: 4,
                shape: kshape,
            });
        }
        if kshape[2] != kshape[3] || kshape[2] % 2 == 0 {
            return Err(BackendError::Invalid {
                op: "conv2d",
                message: format!("kernel spatial extents must be odd and square, got {kshape:?}"),
            });
        }
        if ishape[1] != kshape[1] {
            return Err(BackendError::ChannelMismatch {
                input: ishape[1],
                kernel: kshape[1],
            });
        }
        if bshape != [kshape[0]] {
            return Err(BackendError::ShapeMismatch {
                context: "conv2d bias",
                left: bshape,
                right: vec![kshape[0]],
            });
        }
        let dims = ConvDims {
            n: ishape[0],
            cin: ishape[1],
            h: ishape[2],
            w: ishape[3],
            cout: kshape[0],
            k: kshape[2],
        };
        let mut out = vec![F::zero(); dims.n * dims.cout * dims.hw()];
        self.scratch_a.resize(dims.col_len(), F::zero());
        kernels::conv2d_forward(
            &self.nodes[input.0].value,
            &dims,
            &self.nodes[kernel.0].value,
            &self.nodes[bias.0].value,
            &mut out,
            &mut self.scratch_a,
        );
        Ok(self.push(
            vec![dims.n, dims.cout, dims.h, dims.w],
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                dims,
            },
        ))
    }

    pub fn avg_pool2x2(&mut self, input: Var) -> Result<Var, BackendError> {
        self.check(input)?;
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(BackendError::BadRank {
                op: "avg_pool2x2",
                expected: 4,
                shape: s,
            });
        }
        let (h, w) = (s[2], s[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(BackendError::OddSpatialExtent { h, w });
        }
        let planes = s[0] * s[1];
        let mut out = vec![F::zero(); planes * (h / 2) * (w / 2)];
        kernels::avg_pool2x2_forward(&self.nodes[input.0].value, planes, h, w, &mut out);
        Ok(self.push(
            vec![s[0], s[1], h / 2, w / 2],
            out,
            Op::AvgPool2x2 {
                input,
                planes,
                h,
                w,
            },
        ))
    }

    pub fn upsample_nn2x2(&mut self, input: Var) -> Result<Var, BackendError> {
        self.check(input)?;
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(BackendError::BadRank {
                op: "upsample_nn2x2",
                expected: 4,
                shape: s,
            });
        }
        let (h, w) = (s[2], s[3]);
        let planes = s[0] * s[1];
        let mut out = vec![F::zero(); planes * 4 * h * w];
        kernels::upsample_nn2x2_forward(&self.nodes[input.0].value, planes, h, w, &mut out);
        Ok(self.push(
            vec![s[0], s[1], 2 * h, 2 * w],
            out,
            Op::UpsampleNn2x2 {
                input,
                planes,
                h,
                w,
            },
        ))
    }

    /// Concatenates along the channel axis; `a`'s channels precede `b`'s.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, BackendError> {
        self.check(a)?;
        self.check(b)?;
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 4 || sb.len() != 4 {
            return Err(BackendError::BadRank {
                op: "concat_channels",
                expected: 4,
                shape: if sa.len() != 4 { sa } else { sb },
            });
        }
        if sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
            return Err(BackendError::ShapeMismatch {
                context: "concat_channels",
                left: sa,
                right: sb,
            });
        }
        let (n, a_ch, b_ch, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let mut out = vec![F::zero(); n * (a_ch + b_ch) * hw];
        for i in 0..n {
            let dst = &mut out[i * (a_ch + b_ch) * hw..][..(a_ch + b_ch) * hw];
            dst[..a_ch * hw]
                .copy_from_slice(&self.nodes[a.0].value[i * a_ch * hw..][..a_ch * hw]);
            dst[a_ch * hw..]
                .copy_from_slice(&self.nodes[b.0].value[i * b_ch * hw..][..b_ch * hw]);
        }
        Ok(self.push(
            vec![n, a_ch + b_ch, sa[2], sa[3]],
            out,
            Op::ConcatChannels {
                a,
                b,
                n,
                a_ch,
                b_ch,
                hw,
            },
        ))
    }

    /// Extracts the channel range `from..to` of a rank-4 map.
    pub fn slice_channels(&mut self, input: Var, from: usize, to: usize) -> Result<Var, BackendError> {
        self.check(input)?;
        let s = self.nodes[input.0].shape.clone();
        if s.len() != 4 {
            return Err(BackendError::BadRank {
                op: "slice_channels",
                expected: 4,
                shape: s,
            });
        }
        if from >= to || to > s[1] {
            return Err(BackendError::Invalid {
                op: "slice_channels",
                message: format!("channel range {from}..{to} invalid for {} channels", s[1]),
            });
        }
        let (n, ch, hw) = (s[0], s[1], s[2] * s[3]);
        let width = to - from;
        let mut out = vec![F::zero(); n * width * hw];
        for i in 0..n {
            out[i * width * hw..][..width * hw]
                .copy_from_slice(&self.nodes[input.0].value[(i * ch + from) * hw..][..width * hw]);
        }
        Ok(self.push(
            vec![n, width, s[2], s[3]],
            out,
            Op::SliceChannels {
                input,
                n,
                ch,
                from,
                to,
                hw,
            },
        ))
    }

    // ---- elementwise ops --------------------------------------------------

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.nodes[input.0]
            .value
            .iter()
            .map(|&v| if v > F::zero() { v } else { F::zero() })
            .collect();
        let shape = self.nodes[input.0].shape.clone();
        self.push(shape, value, Op::Relu { input })
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        context: &'static str,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Var, BackendError> {
        self.check(a)?;
        self.check(b)?;
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(BackendError::ShapeMismatch {
                context,
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, BackendError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, BackendError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, BackendError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, input: Var, c: F) -> Var {
        let value = self.nodes[input.0].value.iter().map(|&v| v * c).collect();
        let shape = self.nodes[input.0].shape.clone();
        self.push(shape, value, Op::Scale { input, c })
    }

    pub fn add_const(&mut self, input: Var, c: F) -> Var {
        let value = self.nodes[input.0].value.iter().map(|&v| v + c).collect();
        let shape = self.nodes[input.0].shape.clone();
        self.push(shape, value, Op::AddConst { input })
    }

    pub fn exp(&mut self, input: Var) -> Var {
        let value = self.nodes[input.0].value.iter().map(|&v| v.exp()).collect();
        let shape = self.nodes[input.0].shape.clone();
        self.push(shape, value, Op::Exp { input })
    }

    /// Clamps into `[lo, hi]`; gradient is passed only strictly inside the
    /// interval (zero subgradient at the boundary).
    pub fn clamp(&mut self, input: Var, lo: F, hi: F) -> Var {
        let value = self.nodes[input.0]
            .value
            .iter()
            .map(|&v| {
                if v < lo {
                    lo
                } else if v > hi {
                    hi
                } else {
                    v
                }
            })
            .collect();
        let shape = self.nodes[input.0].shape.clone();
        self.push(shape, value, Op::Clamp { input, lo, hi })
    }

    // ---- stochastic/structured ops ----------------------------------------

    /// `mu + sigma * eps`, `eps ~ N(0, I)`; differentiable w.r.t. `mu` and
    /// `sigma`, with `eps` held constant.
    pub fn reparam_sample(
        &mut self,
        mu: Var,
        sigma: Var,
        rng: &mut RngState,
    ) -> Result<Var, BackendError> {
        self.check(mu)?;
        self.check(sigma)?;
        if self.nodes[sigma.0].value.iter().any(|&s| s <= F::zero()) {
            return Err(BackendError::NonPositiveSigma);
        }
        let mut eps = vec![F::zero(); self.nodes[mu.0].value.len()];
        rng.fill_normal(&mut eps);
        self.reparam_with_eps(mu, sigma, eps)
    }

    /// Test hook: [`Graph::reparam_sample`] with caller-pinned noise and no
    /// positivity requirement on sigma.
    pub fn reparam_with_eps(
        &mut self,
        mu: Var,
        sigma: Var,
        eps: Vec<F>,
    ) -> Result<Var, BackendError> {
        self.check(mu)?;
        self.check(sigma)?;
        if self.nodes[mu.0].shape != self.nodes[sigma.0].shape {
            return Err(BackendError::ShapeMismatch {
                context: "reparam_sample",
                left: self.nodes[mu.0].shape.clone(),
                right: self.nodes[sigma.0].shape.clone(),
            });
        }
        if eps.len() != self.nodes[mu.0].value.len() {
            return Err(BackendError::LengthMismatch {
                len: eps.len(),
                shape: self.nodes[mu.0].shape.clone(),
            });
        }
        let value = self.nodes[mu.0]
            .value
            .iter()
            .zip(&self.nodes[sigma.0].value)
            .zip(&eps)
            .map(|((&m, &s), &e)| m + s * e)
            .collect();
        let shape = self.nodes[mu.0].shape.clone();
        Ok(self.push(shape, value, Op::Reparam { mu, sigma, eps }))
    }

    /// Per-pixel categorical cross-entropy `-log softmax(logits)[target]`.
    /// `logits` is `[N, C, H, W]`, `target` is `[N, H, W]`; pixels where
    /// `ignore` is nonzero produce zero loss and zero gradient.
    pub fn softmax_ce_map(
        &mut self,
        logits: Var,
        target: &Tensor<i32>,
        ignore: Option<&Tensor<u8>>,
    ) -> Result<Var, BackendError> {
        self.check(logits)?;
        let s = self.shape(logits).to_vec();
        if s.len() != 4 {
            return Err(BackendError::BadRank {
                op: "softmax_ce_map",
                expected: 4,
                shape: s,
            });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if target.shape() != [n, h, w] {
            return Err(BackendError::ShapeMismatch {
                context: "softmax_ce_map target",
                left: target.shape().to_vec(),
                right: vec![n, h, w],
            });
        }
        let ignore_flags: Option<Vec<bool>> = match ignore {
            Some(m) => {
                if m.shape() != [n, h, w] {
                    return Err(BackendError::ShapeMismatch {
                        context: "softmax_ce_map ignore mask",
                        left: m.shape().to_vec(),
                        right: vec![n, h, w],
                    });
                }
                Some(m.data().iter().map(|&v| v != 0).collect())
            }
            None => None,
        };
        let hw = h * w;
        let lvals = &self.nodes[logits.0].value;
        let mut ce = vec![F::zero(); n * hw];
        let mut probs = vec![F::zero(); n * c * hw];
        for i in 0..n {
            for p in 0..hw {
                let pix = i * hw + p;
                let ignored = ignore_flags.as_ref().is_some_and(|f| f[pix]);
                let t = target.data()[pix];
                if !ignored && (t < 0 || t as usize >= c) {
                    return Err(BackendError::TargetOutOfRange {
                        value: t,
                        classes: c,
                        index: pix,
                    });
                }
                // Stable log-sum-exp in f64; class counts are tiny.
                let mut m = f64::NEG_INFINITY;
                for ch in 0..c {
                    m = m.max(lvals[(i * c + ch) * hw + p].as_f64());
                }
                let mut z = 0.0;
                for ch in 0..c {
                    z += (lvals[(i * c + ch) * hw + p].as_f64() - m).exp();
                }
                let lse = m + z.ln();
                for ch in 0..c {
                    probs[(i * c + ch) * hw + p] =
                        F::of((lvals[(i * c + ch) * hw + p].as_f64() - lse).exp());
                }
                if !ignored {
                    ce[pix] = F::of(lse - lvals[(i * c + t as usize) * hw + p].as_f64());
                }
            }
        }
        Ok(self.push(
            vec![n, h, w],
            ce,
            Op::SoftmaxCeMap {
                logits,
                target: target.data().to_vec(),
                ignore: ignore_flags,
                probs,
                classes: c,
            },
        ))
    }

    /// Sum of all elements as a scalar; accumulates in f64.
    pub fn sum_all(&mut self, input: Var) -> Var {
        let mut acc = 0.0f64;
        for v in &self.nodes[input.0].value {
            acc += v.as_f64();
        }
        self.push(Vec::new(), vec![F::of(acc)], Op::SumAll { input })
    }

    /// Elementwise product with a constant mask; gradients flow to `input`
    /// only, scaled by the mask (used for the top-k selection).
    pub fn mul_mask(&mut self, input: Var, mask: Vec<F>) -> Result<Var, BackendError> {
        self.check(input)?;
        if mask.len() != self.nodes[input.0].value.len() {
            return Err(BackendError::LengthMismatch {
                len: mask.len(),
                shape: self.nodes[input.0].shape.clone(),
            });
        }
        let value = self.nodes[input.0]
            .value
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let shape = self.nodes[input.0].shape.clone();
        Ok(self.push(shape, value, Op::MulMask { input, mask }))
    }

    // ---- reverse pass -----------------------------------------------------

    /// Runs the reverse pass from a scalar `loss`, populating gradients for
    /// every node that influences it. Gradients of non-participating nodes
    /// are exactly zero.
    pub fn backward(&mut self, loss: Var) -> Result<(), BackendError> {
        self.check(loss)?;
        if self.nodes[loss.0].value.len() != 1 {
            return Err(BackendError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        let mut grads: Vec<Vec<F>> = self
            .nodes
            .iter()
            .map(|n| vec![F::zero(); n.value.len()])
            .collect();
        grads[loss.0][0] = F::one();
        let mut live = vec![false; self.nodes.len()];
        live[loss.0] = true;

        for i in (0..=loss.0).rev() {
            if !live[i] {
                continue;
            }
            let (glo, ghi) = grads.split_at_mut(i);
            let g: &[F] = &ghi[0];
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    dims,
                } => {
                    live[input.0] = true;
                    live[kernel.0] = true;
                    live[bias.0] = true;
                    let x = &self.nodes[input.0].value;
                    let w = &self.nodes[kernel.0].value;
                    self.scratch_a.resize(dims.col_len(), F::zero());
                    self.scratch_b.resize(dims.col_len(), F::zero());
                    let (dx, dw, db) = mut3(glo, input.0, kernel.0, bias.0);
                    kernels::conv2d_backward(
                        x,
                        dims,
                        w,
                        g,
                        dx,
                        dw,
                        db,
                        &mut self.scratch_a,
                        &mut self.scratch_b,
                    );
                }
                Op::AvgPool2x2 {
                    input,
                    planes,
                    h,
                    w,
                } => {
                    live[input.0] = true;
                    kernels::avg_pool2x2_backward(g, *planes, *h, *w, &mut glo[input.0]);
                }
                Op::UpsampleNn2x2 {
                    input,
                    planes,
                    h,
                    w,
                } => {
                    live[input.0] = true;
                    kernels::upsample_nn2x2_backward(g, *planes, *h, *w, &mut glo[input.0]);
                }
                Op::ConcatChannels {
                    a,
                    b,
                    n,
                    a_ch,
                    b_ch,
                    hw,
                } => {
                    live[a.0] = true;
                    live[b.0] = true;
                    let stride = (*a_ch + *b_ch) * *hw;
                    for item in 0..*n {
                        let gsrc = &g[item * stride..][..stride];
                        let da = &mut glo[a.0][item * *a_ch * *hw..][..*a_ch * *hw];
                        for (d, s) in da.iter_mut().zip(&gsrc[..*a_ch * *hw]) {
                            *d = *d + *s;
                        }
                        let db = &mut glo[b.0][item * *b_ch * *hw..][..*b_ch * *hw];
                        for (d, s) in db.iter_mut().zip(&gsrc[*a_ch * *hw..]) {
                            *d = *d + *s;
                        }
                    }
                }
                Op::SliceChannels {
                    input,
                    n,
                    ch,
                    from,
                    to,
                    hw,
                } => {
                    live[input.0] = true;
                    let width = *to - *from;
                    for item in 0..*n {
                        let gsrc = &g[item * width * *hw..][..width * *hw];
                        let dst = &mut glo[input.0][(item * *ch + *from) * *hw..][..width * *hw];
                        for (d, s) in dst.iter_mut().zip(gsrc) {
                            *d = *d + *s;
                        }
                    }
                }
                Op::Relu { input } => {
                    live[input.0] = true;
                    let x = &self.nodes[input.0].value;
                    let dst = &mut glo[input.0];
                    for idx in 0..g.len() {
                        if x[idx] > F::zero() {
                            dst[idx] = dst[idx] + g[idx];
                        }
                    }
                }
                Op::Add { a, b } => {
                    live[a.0] = true;
                    live[b.0] = true;
                    accumulate(&mut glo[a.0], g);
                    accumulate(&mut glo[b.0], g);
                }
                Op::Sub { a, b } => {
                    live[a.0] = true;
                    live[b.0] = true;
                    accumulate(&mut glo[a.0], g);
                    for (d, s) in glo[b.0].iter_mut().zip(g) {
                        *d = *d - *s;
                    }
                }
                Op::Mul { a, b } => {
                    live[a.0] = true;
                    live[b.0] = true;
                    // Sequential accumulation keeps a == b (squaring) correct.
                    for idx in 0..g.len() {
                        let vb = self.nodes[b.0].value[idx];
                        glo[a.0][idx] = glo[a.0][idx] + g[idx] * vb;
                    }
                    for idx in 0..g.len() {
                        let va = self.nodes[a.0].value[idx];
                        glo[b.0][idx] = glo[b.0][idx] + g[idx] * va;
                    }
                }
                Op::Scale { input, c } => {
                    live[input.0] = true;
                    let dst = &mut glo[input.0];
                    for idx in 0..g.len() {
                        dst[idx] = dst[idx] + g[idx] * *c;
                    }
                }
                Op::AddConst { input, .. } => {
                    live[input.0] = true;
                    accumulate(&mut glo[input.0], g);
                }
                Op::Exp { input } => {
                    live[input.0] = true;
                    let out = &self.nodes[i].value;
                    let dst = &mut glo[input.0];
                    for idx in 0..g.len() {
                        dst[idx] = dst[idx] + g[idx] * out[idx];
                    }
                }
                Op::Clamp { input, lo, hi } => {
                    live[input.0] = true;
                    let x = &self.nodes[input.0].value;
                    let dst = &mut glo[input.0];
                    for idx in 0..g.len() {
                        if x[idx] > *lo && x[idx] < *hi {
                            dst[idx] = dst[idx] + g[idx];
                        }
                    }
                }
                Op::Reparam { mu, sigma, eps } => {
                    live[mu.0] = true;
                    live[sigma.0] = true;
                    accumulate(&mut glo[mu.0], g);
                    let dst = &mut glo[sigma.0];
                    for idx in 0..g.len() {
                        dst[idx] = dst[idx] + g[idx] * eps[idx];
                    }
                }
                Op::SoftmaxCeMap {
                    logits,
                    target,
                    ignore,
                    probs,
                    classes,
                } => {
                    live[logits.0] = true;
                    let c = *classes;
                    let pixels = g.len();
                    let hw = pixels / self.nodes[i].shape[0];
                    let dst = &mut glo[logits.0];
                    for pix in 0..pixels {
                        if ignore.as_ref().is_some_and(|f| f[pix]) {
                            continue;
                        }
                        let gpix = g[pix];
                        if gpix == F::zero() {
                            continue;
                        }
                        let (item, p) = (pix / hw, pix % hw);
                        let t = target[pix] as usize;
                        for ch in 0..c {
                            let at = (item * c + ch) * hw + p;
                            let indicator = if ch == t { F::one() } else { F::zero() };
                            dst[at] = dst[at] + gpix * (probs[at] - indicator);
                        }
                    }
                }
                Op::SumAll { input } => {
                    live[input.0] = true;
                    let gv = g[0];
                    for d in glo[input.0].iter_mut() {
                        *d = *d + gv;
                    }
                }
                Op::MulMask { input, mask } => {
                    live[input.0] = true;
                    let dst = &mut glo[input.0];
                    for idx in 0..g.len() {
                        dst[idx] = dst[idx] + g[idx] * mask[idx];
                    }
                }
            }
        }
        self.grads = Some(grads);
        Ok(())
    }
}

#[inline]
fn accumulate<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

/// Three disjoint mutable element borrows from one slice.
fn mut3<T>(v: &mut [T], a: usize, b: usize, c: usize) -> (&mut T, &mut T, &mut T) {
    assert!(a != b && b != c && a != c, "indices must be distinct");
    let mut order = [(a, 0usize), (b, 1), (c, 2)];
    order.sort_unstable();
    let (lo, rest) = v.split_at_mut(order[1].0);
    let (mid, hi) = rest.split_at_mut(order[2].0 - order[1].0);
    let got = [&mut lo[order[0].0], &mut mid[0], &mut hi[0]];
    let mut out: [Option<&mut T>; 3] = [None, None, None];
    for (slot, r) in order.iter().zip(got) {
        out[slot.1] = Some(r);
    }
    let [x, y, z] = out;
    (x.unwrap(), y.unwrap(), z.unwrap())
}
