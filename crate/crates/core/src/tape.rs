//! Reverse-mode automatic differentiation over the fixed op set used by the
//! models: 3D convolution, batch normalization, ReLU, dropout, global average
//! pooling, linear layers, log-softmax, losses, and the channel-selection op
//! used by middle fusion.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes. `backward`
//! walks the list in reverse and accumulates gradients. Parameter leaves carry
//! a [`ParamId`] so the caller can fold gradients back into a
//! [`crate::nn::ParamStore`].

use crate::error::{Error, Result};
use crate::tensor::{conv_out_dim, Scalar, Tensor};
use ndarray::{Array2, ArrayView2};
use rand::Rng;

/// Handle to a parameter slot in a `ParamStore`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T: Scalar> {
    Leaf {
        param: Option<ParamId>,
    },
    Conv3d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        invstd: Vec<T>,
        batch_stats: bool,
    },
    Relu {
        input: Var,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Gap {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    LogSoftmax {
        input: Var,
    },
    NllMean {
        logp: Var,
        labels: Vec<usize>,
    },
    GatherClassSum {
        logp: Var,
        labels: Vec<usize>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: T,
    },
    Sum {
        a: Var,
    },
    AbsSumMany {
        inputs: Vec<Var>,
    },
    SelectChannels {
        primary: Var,
        other: Var,
        take_other: Vec<bool>,
    },
    ConcatCols {
        a: Var,
        b: Var,
    },
}

struct Node<T: Scalar> {
    data: Tensor<T>,
    op: Op<T>,
}

/// Gradients of one scalar output with respect to every tape node.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; zeros if `v` did not influence the loss.
    pub fn wrt(&self, v: Var, tape: &Tape<T>) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.nodes[v.0].data.shape()),
        }
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, data: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { data, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].data.shape()
    }

    /// Constant / input leaf.
    pub fn leaf(&mut self, data: Tensor<T>) -> Var {
        self.push(data, Op::Leaf { param: None })
    }

    /// Parameter leaf; its gradient is folded back under `id` by `backward`.
    pub fn param_leaf(&mut self, id: ParamId, data: Tensor<T>) -> Var {
        self.push(data, Op::Leaf { param: Some(id) })
    }

    /// Cross-correlation with 3^3 kernels, padding 1, stride 1 or 2.
    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weight).to_vec();
        if ishape.len() != 5 {
            return Err(Error::shape(format!("conv3d input must be 5-D, got {:?}", ishape)));
        }
        if wshape.len() != 5 || wshape[2..] != [3, 3, 3] {
            return Err(Error::shape(format!("conv3d weight must be [Cout,Cin,3,3,3], got {:?}", wshape)));
        }
        if ishape[1] != wshape[1] {
            return Err(Error::shape(format!(
                "conv3d channel mismatch: input has {}, weight expects {}",
                ishape[1], wshape[1]
            )));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::config(format!("conv3d stride must be 1 or 2, got {}", stride)));
        }
        let (cout, cin) = (wshape[0], wshape[1]);
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv3d bias length must equal Cout".to_string()));
            }
        }
        let (n, d, h, w) = (ishape[0], ishape[2], ishape[3], ishape[4]);
        let (od, oh, ow) = (conv_out_dim(d, stride), conv_out_dim(h, stride), conv_out_dim(w, stride));
        let outvox = od * oh * ow;
        let k = cin * 27;

        let mut out = vec![T::zero(); n * cout * outvox];
        let wview = ArrayView2::from_shape((cout, k), self.value(weight).data()).unwrap();
        let mut cols = vec![T::zero(); k * outvox];
        for s in 0..n {
            let sample = &self.value(input).data()[s * cin * d * h * w..(s + 1) * cin * d * h * w];
            im2col(sample, cin, [d, h, w], stride, [od, oh, ow], &mut cols);
            let cview = ArrayView2::from_shape((k, outvox), cols.as_slice()).unwrap();
            let res = wview.dot(&cview).as_standard_layout().into_owned(); // [cout, outvox]
            let dst = &mut out[s * cout * outvox..(s + 1) * cout * outvox];
            dst.copy_from_slice(res.as_slice().unwrap());
        }
        if let Some(b) = bias {
            let bdata = self.value(b).data().to_vec();
            for s in 0..n {
                for c in 0..cout {
                    let bc = bdata[c];
                    for v in &mut out[(s * cout + c) * outvox..(s * cout + c + 1) * outvox] {
                        *v = *v + bc;
                    }
                }
            }
        }
        let data = Tensor::from_vec(&[n, cout, od, oh, ow], out)?;
        Ok(self.push(data, Op::Conv3d { input, weight, bias, stride }))
    }

    /// Batch normalization using batch statistics; updates nothing itself but
    /// returns the (biased) batch mean/var so the caller can maintain running
    /// statistics.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let shape = self.shape(input).to_vec();
        let (n, c, spatial) = split_ncs(&shape)?;
        let m = n * spatial;
        if m < 2 {
            return Err(Error::shape("batch_norm training mode needs >= 2 values per channel".to_string()));
        }
        if eps <= T::zero() {
            return Err(Error::Numeric("batch_norm requires eps > 0".to_string()));
        }
        self.check_bn_vectors(gamma, beta, c)?;
        let x = self.value(input).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let mf = T::from_f64(m as f64);
        for ch in 0..c {
            let mut acc = T::zero();
            for s in 0..n {
                let base = (s * c + ch) * spatial;
                for i in 0..spatial {
                    acc = acc + x[base + i];
                }
            }
            mean[ch] = acc / mf;
            let mut vacc = T::zero();
            for s in 0..n {
                let base = (s * c + ch) * spatial;
                for i in 0..spatial {
                    let d = x[base + i] - mean[ch];
                    vacc = vacc + d * d;
                }
            }
            var[ch] = vacc / mf;
        }
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let out = self.bn_apply(input, gamma, beta, &mean, &invstd, true);
        Ok((out, mean, var))
    }

    /// Batch normalization using fixed (running) statistics.
    pub fn batch_norm_infer(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let (_, c, _) = split_ncs(&shape)?;
        if eps <= T::zero() {
            return Err(Error::Numeric("batch_norm requires eps > 0".to_string()));
        }
        self.check_bn_vectors(gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("running statistics length must equal channel count".to_string()));
        }
        let invstd: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mean = running_mean.to_vec();
        Ok(self.bn_apply(input, gamma, beta, &mean, &invstd, false))
    }

    fn check_bn_vectors(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!("batch_norm gamma/beta must have length {}", c)));
        }
        Ok(())
    }

    fn bn_apply(&mut self, input: Var, gamma: Var, beta: Var, mean: &[T], invstd: &[T], batch_stats: bool) -> Var {
        let shape = self.shape(input).to_vec();
        let (n, c, spatial) = split_ncs(&shape).unwrap();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let x = self.value(input).data();
        let mut out = vec![T::zero(); x.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * spatial;
                let (m, is, gc, bc) = (mean[ch], invstd[ch], g[ch], b[ch]);
                for i in 0..spatial {
                    out[base + i] = gc * (x[base + i] - m) * is + bc;
                }
            }
        }
        let data = Tensor::from_vec(&shape, out).unwrap();
        self.push(
            data,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean: mean.to_vec(),
                invstd: invstd.to_vec(),
                batch_stats,
            },
        )
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let data = self.value(input).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(data, Op::Relu { input })
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by 1/(1-p).
    pub fn dropout<R: Rng>(&mut self, input: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout rate must be in [0,1), got {}", p)));
        }
        let n = self.value(input).numel();
        let keep_scale = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep_scale })
            .collect();
        Ok(self.dropout_with_mask(input, mask))
    }

    /// Dropout with an explicit mask (entries 0 or 1/(1-p)); used by tests.
    pub fn dropout_with_mask(&mut self, input: Var, mask: Vec<T>) -> Var {
        let x = self.value(input).data();
        debug_assert_eq!(mask.len(), x.len());
        let out: Vec<T> = x.iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let data = Tensor::from_vec(self.shape(input), out).unwrap();
        self.push(data, Op::Dropout { input, mask })
    }

    /// Global average pooling: [N,C,D,H,W] -> [N,C].
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let (n, c, spatial) = split_ncs(&shape)?;
        if spatial == 0 {
            return Err(Error::shape("global_avg_pool needs at least one spatial voxel".to_string()));
        }
        let x = self.value(input).data();
        let sf = T::from_f64(spatial as f64);
        let mut out = vec![T::zero(); n * c];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * spatial;
                let mut acc = T::zero();
                for i in 0..spatial {
                    acc = acc + x[base + i];
                }
                out[s * c + ch] = acc / sf;
            }
        }
        let data = Tensor::from_vec(&[n, c], out)?;
        Ok(self.push(data, Op::Gap { input }))
    }

    /// y = x W^T + b with x: [N,F], W: [O,F], b: [O].
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weight).to_vec();
        if ishape.len() != 2 || wshape.len() != 2 || ishape[1] != wshape[1] {
            return Err(Error::shape(format!(
                "linear shapes incompatible: input {:?}, weight {:?}",
                ishape, wshape
            )));
        }
        let (n, f, o) = (ishape[0], ishape[1], wshape[0]);
        if self.shape(bias) != [o] {
            return Err(Error::shape("linear bias length must equal output width".to_string()));
        }
        let x = ArrayView2::from_shape((n, f), self.value(input).data()).unwrap();
        let w = ArrayView2::from_shape((o, f), self.value(weight).data()).unwrap();
        let mut y = x.dot(&w.t()); // [N, O]
        let b = self.value(bias).data().to_vec();
        for mut row in y.rows_mut() {
            for (v, &bb) in row.iter_mut().zip(&b) {
                *v = *v + bb;
            }
        }
        // `dot` may return a non-standard-layout array for degenerate shapes
        let y = y.as_standard_layout().into_owned();
        let data = Tensor::from_vec(&[n, o], y.into_raw_vec_and_offset().0)?;
        Ok(self.push(data, Op::Linear { input, weight, bias }))
    }

    /// Row-wise log-softmax over [N,C], stabilized by max subtraction.
    pub fn log_softmax(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("log_softmax expects [N,C]".to_string()));
        }
        let (n, c) = (shape[0], shape[1]);
        let x = self.value(input).data();
        let mut out = vec![T::zero(); n * c];
        for i in 0..n {
            let row = &x[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut lse = T::zero();
            for &v in row {
                lse = lse + (v - mx).exp();
            }
            let lse = lse.ln() + mx;
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let data = Tensor::from_vec(&shape, out)?;
        Ok(self.push(data, Op::LogSoftmax { input }))
    }

    /// Mean negative log-likelihood of log-probabilities at the given labels.
    pub fn nll_mean(&mut self, logp: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logp).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape("nll_mean expects [N,C] log-probs and N labels".to_string()));
        }
        let c = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::data(format!("label {} out of range for {} classes", bad, c)));
        }
        let lp = self.value(logp).data();
        let mut acc = T::zero();
        for (i, &l) in labels.iter().enumerate() {
            acc = acc - lp[i * c + l];
        }
        let loss = acc / T::from_f64(labels.len() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::NllMean { logp, labels: labels.to_vec() },
        ))
    }

    /// Numerically stable softmax cross-entropy from raw logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lp = self.log_softmax(logits)?;
        self.nll_mean(lp, labels)
    }

    /// Sum of log-probabilities gathered at one class per row (used as the
    /// attribution target).
    pub fn gather_class_sum(&mut self, logp: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logp).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape("gather_class_sum expects [N,C] and N labels".to_string()));
        }
        let c = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::data(format!("label {} out of range for {} classes", bad, c)));
        }
        let lp = self.value(logp).data();
        let mut acc = T::zero();
        for (i, &l) in labels.iter().enumerate() {
            acc = acc + lp[i * c + l];
        }
        Ok(self.push(
            Tensor::scalar(acc),
            Op::GatherClassSum { logp, labels: labels.to_vec() },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let data = Tensor::from_vec(self.shape(a), out)?;
        Ok(self.push(data, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul shape mismatch".to_string()));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let data = Tensor::from_vec(self.shape(a), out)?;
        Ok(self.push(data, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let data = self.value(a).map(|x| x * c);
        self.push(data, Op::Scale { a, c })
    }

    /// Sum of all elements -> scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &x| acc + x);
        self.push(Tensor::scalar(s), Op::Sum { a })
    }

    /// Σ |x| over every element of every listed var -> scalar.
    pub fn abs_sum_many(&mut self, inputs: &[Var]) -> Var {
        let mut acc = T::zero();
        for &v in inputs {
            for &x in self.value(v).data() {
                acc = acc + x.abs();
            }
        }
        self.push(Tensor::scalar(acc), Op::AbsSumMany { inputs: inputs.to_vec() })
    }

    /// Per-channel selection: output channel c comes from `other` where
    /// `take_other[c]` is set, else from `primary`. Both inputs share a shape.
    pub fn select_channels(&mut self, primary: Var, other: Var, take_other: &[bool]) -> Result<Var> {
        let shape = self.shape(primary).to_vec();
        if self.shape(other) != shape.as_slice() {
            return Err(Error::shape("select_channels inputs must share a shape".to_string()));
        }
        let (n, c, spatial) = split_ncs(&shape)?;
        if take_other.len() != c {
            return Err(Error::shape(format!(
                "select_channels mask length {} != channel count {}",
                take_other.len(),
                c
            )));
        }
        let p = self.value(primary).data();
        let o = self.value(other).data();
        let mut out = vec![T::zero(); p.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * spatial;
                let src = if take_other[ch] { o } else { p };
                out[base..base + spatial].copy_from_slice(&src[base..base + spatial]);
            }
        }
        let data = Tensor::from_vec(&shape, out)?;
        Ok(self.push(
            data,
            Op::SelectChannels { primary, other, take_other: take_other.to_vec() },
        ))
    }

    /// Concatenate [N,A] and [N,B] along columns -> [N,A+B].
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::shape(format!(
                "concat_cols expects matching batch: {:?} vs {:?}",
                sa, sb
            )));
        }
        let (n, ca, cb) = (sa[0], sa[1], sb[1]);
        let xa = self.value(a).data();
        let xb = self.value(b).data();
        let mut out = vec![T::zero(); n * (ca + cb)];
        for i in 0..n {
            out[i * (ca + cb)..i * (ca + cb) + ca].copy_from_slice(&xa[i * ca..(i + 1) * ca]);
            out[i * (ca + cb) + ca..(i + 1) * (ca + cb)].copy_from_slice(&xb[i * cb..(i + 1) * cb]);
        }
        let data = Tensor::from_vec(&[n, ca + cb], out)?;
        Ok(self.push(data, Op::ConcatCols { a, b }))
    }

    /// Reverse pass from a scalar `loss`. Returns per-node gradients plus the
    /// list of (ParamId, gradient) pairs for parameter leaves that were
    /// reached.
    pub fn backward(&self, loss: Var) -> Result<(Gradients<T>, Vec<(ParamId, Tensor<T>)>)> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward target must be a scalar".to_string()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut param_grads = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                if let Some(g) = &grads[idx] {
                    param_grads.push((id, g.clone()));
                }
            }
        }
        Ok((Gradients { grads }, param_grads))
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: &[T]) {
        let slot = &mut grads[v.0];
        match slot {
            Some(g) => {
                for (a, &b) in g.data_mut().iter_mut().zip(delta) {
                    *a = *a + b;
                }
            }
            None => {
                let t = Tensor::from_vec(self.nodes[v.0].data.shape(), delta.to_vec()).unwrap();
                *slot = Some(t);
            }
        }
    }

    fn backward_node(&self, idx: usize, g: &Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>) {
        match &self.nodes[idx].op {
            Op::Leaf { .. } => {}
            Op::Conv3d { input, weight, bias, stride } => {
                self.backward_conv3d(*input, *weight, *bias, *stride, idx, g, grads);
            }
            Op::BatchNorm { input, gamma, beta, mean, invstd, batch_stats } => {
                self.backward_batch_norm(*input, *gamma, *beta, mean, invstd, *batch_stats, g, grads);
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let d: Vec<T> = x
                    .iter()
                    .zip(g.data())
                    .map(|(&xi, &gi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                self.accumulate(grads, *input, &d);
            }
            Op::Dropout { input, mask } => {
                let d: Vec<T> = mask.iter().zip(g.data()).map(|(&m, &gi)| m * gi).collect();
                self.accumulate(grads, *input, &d);
            }
            Op::Gap { input } => {
                let shape = self.shape(*input);
                let (n, c, spatial) = split_ncs(shape).unwrap();
                let sf = T::from_f64(spatial as f64);
                let mut d = vec![T::zero(); n * c * spatial];
                for s in 0..n {
                    for ch in 0..c {
                        let gi = g.data()[s * c + ch] / sf;
                        let base = (s * c + ch) * spatial;
                        for i in 0..spatial {
                            d[base + i] = gi;
                        }
                    }
                }
                self.accumulate(grads, *input, &d);
            }
            Op::Linear { input, weight, bias } => {
                let ish = self.shape(*input);
                let wsh = self.shape(*weight);
                let (n, f, o) = (ish[0], ish[1], wsh[0]);
                let gy = ArrayView2::from_shape((n, o), g.data()).unwrap();
                let x = ArrayView2::from_shape((n, f), self.value(*input).data()).unwrap();
                let w = ArrayView2::from_shape((o, f), self.value(*weight).data()).unwrap();
                let dx = gy.dot(&w).as_standard_layout().into_owned();
                self.accumulate(grads, *input, dx.as_slice().unwrap());
                let dw = gy.t().dot(&x);
                let dwv = dw.as_standard_layout().into_owned();
                self.accumulate(grads, *weight, dwv.as_slice().unwrap());
                let mut db = vec![T::zero(); o];
                for i in 0..n {
                    for j in 0..o {
                        db[j] = db[j] + g.data()[i * o + j];
                    }
                }
                self.accumulate(grads, *bias, &db);
            }
            Op::LogSoftmax { input } => {
                // dx = dy - softmax(x) * rowsum(dy)
                let shape = self.shape(*input);
                let (n, c) = (shape[0], shape[1]);
                let y = self.nodes[idx].data.data();
                let mut d = vec![T::zero(); n * c];
                for i in 0..n {
                    let mut rs = T::zero();
                    for j in 0..c {
                        rs = rs + g.data()[i * c + j];
                    }
                    for j in 0..c {
                        d[i * c + j] = g.data()[i * c + j] - y[i * c + j].exp() * rs;
                    }
                }
                self.accumulate(grads, *input, &d);
            }
            Op::NllMean { logp, labels } => {
                let c = self.shape(*logp)[1];
                let gscalar = g.item();
                let nf = T::from_f64(labels.len() as f64);
                let mut d = vec![T::zero(); labels.len() * c];
                for (i, &l) in labels.iter().enumerate() {
                    d[i * c + l] = -gscalar / nf;
                }
                self.accumulate(grads, *logp, &d);
            }
            Op::GatherClassSum { logp, labels } => {
                let c = self.shape(*logp)[1];
                let gscalar = g.item();
                let mut d = vec![T::zero(); labels.len() * c];
                for (i, &l) in labels.iter().enumerate() {
                    d[i * c + l] = gscalar;
                }
                self.accumulate(grads, *logp, &d);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.data());
                self.accumulate(grads, *b, g.data());
            }
            Op::Mul { a, b } => {
                let xa = self.value(*a).data();
                let xb = self.value(*b).data();
                let da: Vec<T> = xb.iter().zip(g.data()).map(|(&x, &gi)| x * gi).collect();
                let db: Vec<T> = xa.iter().zip(g.data()).map(|(&x, &gi)| x * gi).collect();
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *b, &db);
            }
            Op::Scale { a, c } => {
                let d: Vec<T> = g.data().iter().map(|&gi| gi * *c).collect();
                self.accumulate(grads, *a, &d);
            }
            Op::Sum { a } => {
                let gscalar = g.item();
                let d = vec![gscalar; self.value(*a).numel()];
                self.accumulate(grads, *a, &d);
            }
            Op::AbsSumMany { inputs } => {
                let gscalar = g.item();
                for &v in inputs {
                    let d: Vec<T> = self
                        .value(v)
                        .data()
                        .iter()
                        .map(|&x| {
                            if x > T::zero() {
                                gscalar
                            } else if x < T::zero() {
                                -gscalar
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    self.accumulate(grads, v, &d);
                }
            }
            Op::SelectChannels { primary, other, take_other } => {
                let shape = self.shape(*primary);
                let (n, c, spatial) = split_ncs(shape).unwrap();
                let mut dp = vec![T::zero(); n * c * spatial];
                let mut dob = vec![T::zero(); n * c * spatial];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * spatial;
                        let dst = if take_other[ch] { &mut dob } else { &mut dp };
                        dst[base..base + spatial].copy_from_slice(&g.data()[base..base + spatial]);
                    }
                }
                self.accumulate(grads, *primary, &dp);
                self.accumulate(grads, *other, &dob);
            }
            Op::ConcatCols { a, b } => {
                let (n, ca) = (self.shape(*a)[0], self.shape(*a)[1]);
                let cb = self.shape(*b)[1];
                let mut da = vec![T::zero(); n * ca];
                let mut db = vec![T::zero(); n * cb];
                for i in 0..n {
                    da[i * ca..(i + 1) * ca].copy_from_slice(&g.data()[i * (ca + cb)..i * (ca + cb) + ca]);
                    db[i * cb..(i + 1) * cb]
                        .copy_from_slice(&g.data()[i * (ca + cb) + ca..(i + 1) * (ca + cb)]);
                }
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *b, &db);
            }
        }
    }

    fn backward_conv3d(
        &self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        out_idx: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let ishape = self.shape(input).to_vec();
        let (n, cin, d, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3], ishape[4]);
        let oshape = self.nodes[out_idx].data.shape().to_vec();
        let (cout, od, oh, ow) = (oshape[1], oshape[2], oshape[3], oshape[4]);
        let outvox = od * oh * ow;
        let k = cin * 27;

        let wview = ArrayView2::from_shape((cout, k), self.value(weight).data()).unwrap();
        let mut dinput = vec![T::zero(); n * cin * d * h * w];
        let mut dweight = Array2::<T>::zeros((cout, k));
        let mut cols = vec![T::zero(); k * outvox];
        for s in 0..n {
            let gout = ArrayView2::from_shape(
                (cout, outvox),
                &g.data()[s * cout * outvox..(s + 1) * cout * outvox],
            )
            .unwrap();
            // weight grad needs the im2col matrix again; recompute instead of
            // keeping it alive for the whole forward pass
            let sample = &self.value(input).data()[s * cin * d * h * w..(s + 1) * cin * d * h * w];
            im2col(sample, cin, [d, h, w], stride, [od, oh, ow], &mut cols);
            let cview = ArrayView2::from_shape((k, outvox), cols.as_slice()).unwrap();
            dweight = dweight + gout.dot(&cview.t());
            let dcols = wview.t().dot(&gout).as_standard_layout().into_owned(); // [k, outvox]
            col2im_add(
                dcols.as_slice().unwrap(),
                cin,
                [d, h, w],
                stride,
                [od, oh, ow],
                &mut dinput[s * cin * d * h * w..(s + 1) * cin * d * h * w],
            );
        }
        self.accumulate(grads, input, &dinput);
        let dwv = dweight.as_standard_layout().into_owned();
        self.accumulate(grads, weight, dwv.as_slice().unwrap());
        if let Some(b) = bias {
            let mut db = vec![T::zero(); cout];
            for s in 0..n {
                for c in 0..cout {
                    let base = (s * cout + c) * outvox;
                    for i in 0..outvox {
                        db[c] = db[c] + g.data()[base + i];
                    }
                }
            }
            self.accumulate(grads, b, &db);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_batch_norm(
        &self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        invstd: &[T],
        batch_stats: bool,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let shape = self.shape(input);
        let (n, c, spatial) = split_ncs(shape).unwrap();
        let m = n * spatial;
        let mf = T::from_f64(m as f64);
        let x = self.value(input).data();
        let gm = self.value(gamma).data();
        let gy = g.data();

        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut sum_gy = vec![T::zero(); c];
        let mut sum_gy_xhat = vec![T::zero(); c];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * spatial;
                for i in 0..spatial {
                    let xhat = (x[base + i] - mean[ch]) * invstd[ch];
                    let gi = gy[base + i];
                    dbeta[ch] = dbeta[ch] + gi;
                    dgamma[ch] = dgamma[ch] + gi * xhat;
                    sum_gy[ch] = sum_gy[ch] + gi;
                    sum_gy_xhat[ch] = sum_gy_xhat[ch] + gi * xhat;
                }
            }
        }

        let mut dx = vec![T::zero(); x.len()];
        if batch_stats {
            // dx = (γ·invstd) (gy − mean(gy) − xhat·mean(gy·xhat))
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * spatial;
                    let coef = gm[ch] * invstd[ch];
                    let mg = sum_gy[ch] / mf;
                    let mgx = sum_gy_xhat[ch] / mf;
                    for i in 0..spatial {
                        let xhat = (x[base + i] - mean[ch]) * invstd[ch];
                        dx[base + i] = coef * (gy[base + i] - mg - xhat * mgx);
                    }
                }
            }
        } else {
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * spatial;
                    let coef = gm[ch] * invstd[ch];
                    for i in 0..spatial {
                        dx[base + i] = coef * gy[base + i];
                    }
                }
            }
        }
        self.accumulate(grads, input, &dx);
        self.accumulate(grads, gamma, &dgamma);
        self.accumulate(grads, beta, &dbeta);
    }
}

/// Split [N,C,spatial...] into (N, C, product of spatial dims). Plain [N,C]
/// is treated as spatial size 1.
fn split_ncs(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(format!("expected at least [N,C], got {:?}", shape)));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Expand one sample [Cin,D,H,W] into the [Cin*27, outvox] patch matrix for a
/// padded 3^3 kernel.
fn im2col<T: Scalar>(
    sample: &[T],
    cin: usize,
    dims: [usize; 3],
    stride: usize,
    odims: [usize; 3],
    cols: &mut [T],
) {
    let [d, h, w] = dims;
    let [od, oh, ow] = odims;
    let outvox = od * oh * ow;
    for ci in 0..cin {
        let chan = &sample[ci * d * h * w..(ci + 1) * d * h * w];
        for kd in 0..3usize {
            for kh in 0..3usize {
                for kw in 0..3usize {
                    let r = ((ci * 3 + kd) * 3 + kh) * 3 + kw;
                    let row = &mut cols[r * outvox..(r + 1) * outvox];
                    let mut out_i = 0usize;
                    for odi in 0..od {
                        let id = (odi * stride + kd) as isize - 1;
                        if id < 0 || id >= d as isize {
                            for _ in 0..oh * ow {
                                row[out_i] = T::zero();
                                out_i += 1;
                            }
                            continue;
                        }
                        for ohi in 0..oh {
                            let ih = (ohi * stride + kh) as isize - 1;
                            if ih < 0 || ih >= h as isize {
                                for _ in 0..ow {
                                    row[out_i] = T::zero();
                                    out_i += 1;
                                }
                                continue;
                            }
                            let base = (id as usize * h + ih as usize) * w;
                            for owi in 0..ow {
                                let iw = (owi * stride + kw) as isize - 1;
                                row[out_i] = if iw < 0 || iw >= w as isize {
                                    T::zero()
                                } else {
                                    chan[base + iw as usize]
                                };
                                out_i += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the patch-matrix gradient back onto the input sample.
fn col2im_add<T: Scalar>(
    dcols: &[T],
    cin: usize,
    dims: [usize; 3],
    stride: usize,
    odims: [usize; 3],
    dinput: &mut [T],
) {
    let [d, h, w] = dims;
    let [od, oh, ow] = odims;
    let outvox = od * oh * ow;
    for ci in 0..cin {
        let chan = &mut dinput[ci * d * h * w..(ci + 1) * d * h * w];
        for kd in 0..3usize {
            for kh in 0..3usize {
                for kw in 0..3usize {
                    let r = ((ci * 3 + kd) * 3 + kh) * 3 + kw;
                    let row = &dcols[r * outvox..(r + 1) * outvox];
                    let mut out_i = 0usize;
                    for odi in 0..od {
                        let id = (odi * stride + kd) as isize - 1;
                        if id < 0 || id >= d as isize {
                            out_i += oh * ow;
                            continue;
                        }
                        for ohi in 0..oh {
                            let ih = (ohi * stride + kh) as isize - 1;
                            if ih < 0 || ih >= h as isize {
                                out_i += ow;
                                continue;
                            }
                            let base = (id as usize * h + ih as usize) * w;
                            for owi in 0..ow {
                                let iw = (owi * stride + kw) as isize - 1;
                                if iw >= 0 && iw < w as isize {
                                    let dst = base + iw as usize;
                                    chan[dst] = chan[dst] + row[out_i];
                                }
                                out_i += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}
