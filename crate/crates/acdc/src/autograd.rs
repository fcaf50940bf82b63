//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Values live on a [`Tape`] as nodes in creation order, which is already a
//! topological order, so backward is a single reverse sweep. Trainable
//! parameters live in a [`ParamStore`]; a parameter used at several tape
//! sites contributes the sum of all per-site gradients.

use crate::error::{Error, Result};
use crate::linalg::{col2im, conv_out_dim, im2col, matmul, matmul_nt, matmul_tn};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rayon::prelude::*;

/// Handle to a trainable tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Owning container for all trainable tensors of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<Tensor<T>>,
    names: Vec<String>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            names: Vec::new(),
        }
    }

    /// Registers a tensor as a trainable parameter under a unique path name.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.entries.push(tensor.with_grad());
        self.names.push(name);
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total scalar count across all parameters.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|t| t.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.entries {
            t.zero_grad();
        }
    }
}

/// Handle to a value node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Per-channel statistics saved by batch normalization for its backward pass.
#[derive(Debug, Clone)]
pub struct BnSaved<T: Scalar> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    training: bool,
}

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    Param(ParamId),
    Reshape {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        alpha: T,
    },
    MulMask {
        x: Var,
        mask: Vec<T>,
    },
    Relu {
        x: Var,
    },
    SumAll {
        x: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: Var,
        k: Var,
        stride: usize,
        padding: usize,
    },
    ChannelCombine {
        a: Var,
        z: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    AddChannelBias {
        x: Var,
        bias: Var,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: Var,
    },
    ChannelShuffle {
        x: Var,
        groups: usize,
    },
    ConcatChannels {
        xs: Vec<Var>,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
    SliceLead {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of one forward computation, consumed by [`Tape::backward`].
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    param_vars: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Interprets a shape as an optional-batch image: ([b], c, h, w).
fn as_bchw(shape: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w, false)),
        [b, c, h, w] => Ok((b, c, h, w, true)),
        _ => Err(Error::config(format!(
            "expected a (c,h,w) or (b,c,h,w) tensor, got shape {shape:?}"
        ))),
    }
}

fn image_shape(batched: bool, b: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    if batched {
        vec![b, c, h, w]
    } else {
        vec![c, h, w]
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_vars: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Value produced at a node.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Records a constant (non-trainable) input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a parameter use. Repeated uses of the same parameter return
    /// the same node so gradient contributions accumulate there.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.param_vars.iter().find(|(pid, _)| *pid == id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), true);
        self.param_vars.push((id, v));
        v
    }

    // ---- shape ops ----

    /// Reinterprets the value under a new shape with identical element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape { x }, needs))
    }

    /// Copies the leading sub-block `out[i..] = x[i..]` for `dims[d] <= shape[d]`.
    pub fn slice_lead(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let src_shape = self.value(x).shape().to_vec();
        if dims.len() != src_shape.len() || dims.iter().zip(&src_shape).any(|(d, s)| d > s) {
            return Err(Error::config(format!(
                "leading slice {dims:?} does not fit inside {src_shape:?}"
            )));
        }
        let data = copy_lead_block(self.value(x).data(), &src_shape, dims);
        let value = Tensor::from_vec(dims, data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::SliceLead { x }, needs))
    }

    // ---- elementwise ops ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::config(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    pub fn scale(&mut self, x: Var, alpha: T) -> Var {
        let data = self.value(x).data().iter().map(|v| *v * alpha).collect();
        let value = Tensor::from_vec(self.value(x).shape(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(value, Op::Scale { x, alpha }, needs)
    }

    /// Elementwise product with a fixed (non-differentiated) mask.
    pub fn mul_mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::config(format!(
                "mask length {} does not match tensor with {} elements",
                mask.len(),
                self.value(x).numel()
            )));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| *v * *m)
            .collect();
        let value = Tensor::from_vec(self.value(x).shape(), data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::MulMask { x, mask }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|v| v.max(T::ZERO))
            .collect();
        let value = Tensor::from_vec(self.value(x).shape(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(value, Op::Relu { x }, needs)
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, needs)
    }

    // ---- linear algebra ops ----

    /// C = A·B for 2-d operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (&[m, ka], &[kb, n]) = (&sa[..], &sb[..]) else {
            return Err(Error::config(format!(
                "matmul expects 2-d operands, got {sa:?} and {sb:?}"
            )));
        };
        if ka != kb {
            return Err(Error::config(format!(
                "matmul inner dimensions disagree: {sa:?} vs {sb:?}"
            )));
        }
        let data = matmul(self.value(a).data(), self.value(b).data(), m, ka, n);
        let value = Tensor::from_vec(&[m, n], data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul { a, b, m, k: ka, n }, needs))
    }

    /// 2-d cross-correlation of an optionally-batched image with a kernel
    /// [cout, cin, kh, kw]; output spatial extents follow
    /// floor((h + 2·padding − l)/stride) + 1.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        let (b, cin, h, w, batched) = as_bchw(self.value(x).shape())?;
        let ks = self.value(k).shape();
        let (&[cout, kin, kh, kw],) = (&ks[..],) else {
            return Err(Error::config(format!(
                "conv2d kernel must be 4-d (cout, cin, kh, kw), got {ks:?}"
            )));
        };
        if kin != cin {
            return Err(Error::config(format!(
                "conv2d channel mismatch: input has {cin} channels, kernel expects {kin}"
            )));
        }
        let (Some(oh), Some(ow)) = (
            conv_out_dim(h, padding, kh, stride),
            conv_out_dim(w, padding, kw, stride),
        ) else {
            return Err(Error::config(format!(
                "kernel {kh}x{kw} with stride {stride} does not fit padded input {h}x{w} (pad {padding})"
            )));
        };
        let data = conv2d_forward(
            self.value(x).data(),
            self.value(k).data(),
            b,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        );
        let value = Tensor::from_vec(&image_shape(batched, b, cout, oh, ow), data)?;
        let needs = self.needs(x) || self.needs(k);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                k,
                stride,
                padding,
            },
            needs,
        ))
    }

    /// Pointwise channel combination Y[b,c,h,w] = A[c,f] · Z[b,f,h,w].
    pub fn channel_combine(&mut self, a: Var, z: Var) -> Result<Var> {
        let sa = self.value(a).shape();
        let (&[c, f],) = (&sa[..],) else {
            return Err(Error::config(format!(
                "channel_combine coefficients must be 2-d, got {sa:?}"
            )));
        };
        let (b, zf, h, w, batched) = as_bchw(self.value(z).shape())?;
        if zf != f {
            return Err(Error::config(format!(
                "channel_combine inner dimension mismatch: coeffs {f} vs features {zf}"
            )));
        }
        let hw = h * w;
        let av = self.value(a).data();
        let zv = self.value(z).data();
        let mut data = vec![T::ZERO; b * c * hw];
        data.par_chunks_mut(c * hw)
            .enumerate()
            .for_each(|(bi, out)| {
                let zb = &zv[bi * f * hw..(bi + 1) * f * hw];
                out.copy_from_slice(&matmul(av, zb, c, f, hw));
            });
        let value = Tensor::from_vec(&image_shape(batched, b, c, h, w), data)?;
        let needs = self.needs(a) || self.needs(z);
        Ok(self.push(value, Op::ChannelCombine { a, z }, needs))
    }

    /// Fully-connected layer y = x·Wᵀ + bias for x[b,fin], W[fout,fin].
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (sx, sw, sb) = (
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(bias).shape(),
        );
        let (&[b, fin], &[fout, wfin], &[bf]) = (&sx[..], &sw[..], &sb[..]) else {
            return Err(Error::config(format!(
                "linear expects x[b,fin], w[fout,fin], bias[fout]; got {sx:?}, {sw:?}, {sb:?}"
            )));
        };
        if fin != wfin || bf != fout {
            return Err(Error::config(format!(
                "linear shape mismatch: x {sx:?}, w {sw:?}, bias {sb:?}"
            )));
        }
        let mut data = matmul_nt(self.value(x).data(), self.value(w).data(), b, fin, fout);
        let bv = self.value(bias).data().to_vec();
        for row in data.chunks_mut(fout) {
            for (o, bias_v) in row.iter_mut().zip(&bv) {
                *o += *bias_v;
            }
        }
        let value = Tensor::from_vec(&[b, fout], data)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(bias);
        Ok(self.push(value, Op::Linear { x, w, b: bias }, needs))
    }

    /// Adds a per-channel bias to an optionally-batched image tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (b, c, h, w, batched) = as_bchw(self.value(x).shape())?;
        if self.value(bias).numel() != c {
            return Err(Error::config(format!(
                "bias has {} entries for {c} channels",
                self.value(bias).numel()
            )));
        }
        let hw = h * w;
        let bv = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * hw;
                data[off..off + hw].iter_mut().for_each(|v| *v += bv[ci]);
            }
        }
        let value = Tensor::from_vec(&image_shape(batched, b, c, h, w), data)?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(value, Op::AddChannelBias { x, bias }, needs))
    }

    // ---- pooling and activation-map ops ----

    /// Square max pooling with window `size` and stride `size`.
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let (b, c, h, w, batched) = as_bchw(self.value(x).shape())?;
        let (Some(oh), Some(ow)) = (conv_out_dim(h, 0, size, size), conv_out_dim(w, 0, size, size))
        else {
            return Err(Error::config(format!(
                "pool window {size} does not fit input {h}x{w}"
            )));
        };
        let xs = self.value(x).data();
        let mut data = vec![T::ZERO; b * c * oh * ow];
        let mut argmax = vec![0usize; b * c * oh * ow];
        for bc in 0..b * c {
            let plane = &xs[bc * h * w..(bc + 1) * h * w];
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = T::from_f64(f64::NEG_INFINITY);
                    let mut best_at = 0usize;
                    for di in 0..size {
                        for dj in 0..size {
                            let at = (oi * size + di) * w + (oj * size + dj);
                            if plane[at] > best {
                                best = plane[at];
                                best_at = at;
                            }
                        }
                    }
                    let o = bc * oh * ow + oi * ow + oj;
                    data[o] = best;
                    argmax[o] = bc * h * w + best_at;
                }
            }
        }
        let value = Tensor::from_vec(&image_shape(batched, b, c, oh, ow), data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::MaxPool2d { x, argmax }, needs))
    }

    /// Global average pooling [b,c,h,w] -> [b,c].
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w, _) = as_bchw(self.value(x).shape())?;
        let hw = h * w;
        let scale = T::from_f64(1.0 / hw as f64);
        let xs = self.value(x).data();
        let data = (0..b * c)
            .map(|bc| {
                let s: T = xs[bc * hw..(bc + 1) * hw].iter().copied().sum();
                s * scale
            })
            .collect();
        let value = Tensor::from_vec(&[b, c], data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::GlobalAvgPool { x }, needs))
    }

    // ---- channel plumbing ops ----

    /// Shuffle with `groups` groups: channel j·n+i moves to i·g+j where
    /// n = channels/groups.
    pub fn channel_shuffle(&mut self, x: Var, groups: usize) -> Result<Var> {
        let (b, c, h, w, batched) = as_bchw(self.value(x).shape())?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::config(format!(
                "channel count {c} not divisible by {groups} groups"
            )));
        }
        let perm = crate::sharing::shuffle_permutation(c, groups);
        let data = permute_channels(self.value(x).data(), b, c, h * w, &perm);
        let value = Tensor::from_vec(&image_shape(batched, b, c, h, w), data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::ChannelShuffle { x, groups }, needs))
    }

    /// Concatenates along the channel dimension.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::config("concat of zero tensors"));
        }
        let (b0, _, h0, w0, batched) = as_bchw(self.value(xs[0]).shape())?;
        let mut total_c = 0usize;
        for &v in xs {
            let (b, c, h, w, _) = as_bchw(self.value(v).shape())?;
            if b != b0 || h != h0 || w != w0 {
                return Err(Error::config(
                    "concat_channels operands disagree on batch or spatial extents",
                ));
            }
            total_c += c;
        }
        let hw = h0 * w0;
        let mut data = vec![T::ZERO; b0 * total_c * hw];
        for bi in 0..b0 {
            let mut at = bi * total_c * hw;
            for &v in xs {
                let c = as_bchw(self.value(v).shape())?.1;
                let src = &self.value(v).data()[bi * c * hw..(bi + 1) * c * hw];
                data[at..at + c * hw].copy_from_slice(src);
                at += c * hw;
            }
        }
        let value = Tensor::from_vec(&image_shape(batched, b0, total_c, h0, w0), data)?;
        let needs = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(value, Op::ConcatChannels { xs: xs.to_vec() }, needs))
    }

    /// Extracts channels [start, start+len).
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (b, c, h, w, batched) = as_bchw(self.value(x).shape())?;
        if start + len > c {
            return Err(Error::config(format!(
                "channel slice {start}..{} exceeds {c} channels",
                start + len
            )));
        }
        let hw = h * w;
        let xs = self.value(x).data();
        let mut data = vec![T::ZERO; b * len * hw];
        for bi in 0..b {
            let src = &xs[(bi * c + start) * hw..(bi * c + start + len) * hw];
            data[bi * len * hw..(bi + 1) * len * hw].copy_from_slice(src);
        }
        let value = Tensor::from_vec(&image_shape(batched, b, len, h, w), data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::SliceChannels { x, start }, needs))
    }

    // ---- normalization and loss ----

    /// Batch normalization over (b, h, w) per channel. In training mode the
    /// batch statistics are used and returned as (mean, var) so the caller
    /// can maintain running estimates; in eval mode the provided running
    /// statistics are used instead.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
        training: bool,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (b, c, h, w, batched) = as_bchw(self.value(x).shape())?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::config(format!(
                "batch_norm affine parameters must have {c} channels"
            )));
        }
        if !training && (running_mean.len() != c || running_var.len() != c) {
            return Err(Error::config(
                "batch_norm eval mode requires running statistics per channel",
            ));
        }
        let hw = h * w;
        let count = b * hw;
        let xs = self.value(x).data();
        let (mut mean, mut var) = (vec![T::ZERO; c], vec![T::ZERO; c]);
        if training {
            if count < 2 {
                return Err(Error::config(
                    "batch_norm training mode needs at least 2 samples per channel",
                ));
            }
            for ci in 0..c {
                let mut s = T::ZERO;
                for bi in 0..b {
                    let plane = &xs[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    s += plane.iter().copied().sum();
                }
                mean[ci] = s * T::from_f64(1.0 / count as f64);
                let mut v = T::ZERO;
                for bi in 0..b {
                    let plane = &xs[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    for p in plane {
                        let d = *p - mean[ci];
                        v += d * d;
                    }
                }
                var[ci] = v * T::from_f64(1.0 / count as f64);
            }
        } else {
            mean.copy_from_slice(running_mean);
            var.copy_from_slice(running_var);
        }
        let inv_std: Vec<T> = var
            .iter()
            .map(|v| T::ONE / (*v + T::from_f64(eps)).sqrt())
            .collect();
        let mut xhat = vec![T::ZERO; xs.len()];
        let mut data = vec![T::ZERO; xs.len()];
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * hw;
                for i in 0..hw {
                    let xh = (xs[off + i] - mean[ci]) * inv_std[ci];
                    xhat[off + i] = xh;
                    data[off + i] = g[ci] * xh + bt[ci];
                }
            }
        }
        let value = Tensor::from_vec(&image_shape(batched, b, c, h, w), data)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let saved = BnSaved {
            xhat,
            inv_std,
            training,
        };
        let out = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
            },
            needs,
        );
        Ok((out, mean, var))
    }

    /// Mean softmax cross-entropy over a batch of logits [b, k].
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.value(logits).shape();
        let (&[b, k],) = (&ls[..],) else {
            return Err(Error::config(format!(
                "softmax_cross_entropy expects logits [b, classes], got {ls:?}"
            )));
        };
        if labels.len() != b {
            return Err(Error::config(format!(
                "{} labels for batch of {b}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::config(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let xs = self.value(logits).data();
        let mut probs = vec![T::ZERO; b * k];
        let mut loss = 0.0f64;
        for bi in 0..b {
            let row = &xs[bi * k..(bi + 1) * k];
            let mx = row.iter().copied().fold(row[0], |a, v| a.max(v));
            let mut denom = T::ZERO;
            for (j, v) in row.iter().enumerate() {
                let e = (*v - mx).exp();
                probs[bi * k + j] = e;
                denom += e;
            }
            for j in 0..k {
                probs[bi * k + j] /= denom;
            }
            loss -= probs[bi * k + labels[bi]].to_f64().ln();
        }
        let value = Tensor::scalar(T::from_f64(loss / b as f64));
        let needs = self.needs(logits);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        ))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Gradients of every parameter use
    /// reachable from `loss` are accumulated additively into `store`.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::config(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            // Contributions to parents, gathered first to keep borrows simple.
            let mut contrib: Vec<(Var, Vec<T>)> = Vec::new();
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Param(pid) => {
                    store.get_mut(*pid).accumulate_grad(&gy);
                }
                Op::Reshape { x } => contrib.push((*x, gy)),
                Op::Add { a, b } => {
                    contrib.push((*a, gy.clone()));
                    contrib.push((*b, gy));
                }
                Op::Scale { x, alpha } => {
                    contrib.push((*x, gy.iter().map(|g| *g * *alpha).collect()));
                }
                Op::MulMask { x, mask } => {
                    contrib.push((*x, gy.iter().zip(mask).map(|(g, m)| *g * *m).collect()));
                }
                Op::Relu { x } => {
                    let xv = self.nodes[x.0].value.data();
                    contrib.push((
                        *x,
                        gy.iter()
                            .zip(xv)
                            .map(|(g, v)| if *v > T::ZERO { *g } else { T::ZERO })
                            .collect(),
                    ));
                }
                Op::SumAll { x } => {
                    let g = gy[0];
                    contrib.push((*x, vec![g; self.nodes[x.0].value.numel()]));
                }
                Op::MatMul { a, b, m, k, n } => {
                    let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    if self.nodes[a.0].needs_grad {
                        contrib.push((*a, matmul_nt(&gy, bv, *m, *n, *k)));
                    }
                    if self.nodes[b.0].needs_grad {
                        contrib.push((*b, matmul_tn(av, &gy, *k, *m, *n)));
                    }
                }
                Op::Conv2d {
                    x,
                    k,
                    stride,
                    padding,
                } => {
                    let (b, cin, h, w, _) = as_bchw(self.nodes[x.0].value.shape())?;
                    let ks = self.nodes[k.0].value.shape();
                    let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
                    let (oh, ow) = (
                        conv_out_dim(h, *padding, kh, *stride).unwrap(),
                        conv_out_dim(w, *padding, kw, *stride).unwrap(),
                    );
                    let xv = self.nodes[x.0].value.data();
                    let kv = self.nodes[k.0].value.data();
                    if self.nodes[x.0].needs_grad {
                        contrib.push((
                            *x,
                            conv2d_backward_input(
                                &gy, kv, b, cin, h, w, cout, kh, kw, *stride, *padding, oh, ow,
                            ),
                        ));
                    }
                    if self.nodes[k.0].needs_grad {
                        contrib.push((
                            *k,
                            conv2d_backward_kernel(
                                &gy, xv, b, cin, h, w, cout, kh, kw, *stride, *padding, oh, ow,
                            ),
                        ));
                    }
                }
                Op::ChannelCombine { a, z } => {
                    let sa = self.nodes[a.0].value.shape();
                    let (c, f) = (sa[0], sa[1]);
                    let (b, _, h, w, _) = as_bchw(self.nodes[z.0].value.shape())?;
                    let hw = h * w;
                    let av = self.nodes[a.0].value.data();
                    let zv = self.nodes[z.0].value.data();
                    if self.nodes[a.0].needs_grad {
                        let mut da = vec![T::ZERO; c * f];
                        for bi in 0..b {
                            let gyb = &gy[bi * c * hw..(bi + 1) * c * hw];
                            let zb = &zv[bi * f * hw..(bi + 1) * f * hw];
                            let part = matmul_nt(gyb, zb, c, hw, f);
                            for (acc, p) in da.iter_mut().zip(&part) {
                                *acc += *p;
                            }
                        }
                        contrib.push((*a, da));
                    }
                    if self.nodes[z.0].needs_grad {
                        let mut dz = vec![T::ZERO; b * f * hw];
                        dz.par_chunks_mut(f * hw).enumerate().for_each(|(bi, out)| {
                            let gyb = &gy[bi * c * hw..(bi + 1) * c * hw];
                            out.copy_from_slice(&matmul_tn(av, gyb, f, c, hw));
                        });
                        contrib.push((*z, dz));
                    }
                }
                Op::Linear { x, w, b } => {
                    let (bsz, fin) = {
                        let s = self.nodes[x.0].value.shape();
                        (s[0], s[1])
                    };
                    let fout = self.nodes[w.0].value.shape()[0];
                    let xv = self.nodes[x.0].value.data();
                    let wv = self.nodes[w.0].value.data();
                    if self.nodes[x.0].needs_grad {
                        contrib.push((*x, matmul(&gy, wv, bsz, fout, fin)));
                    }
                    if self.nodes[w.0].needs_grad {
                        contrib.push((*w, matmul_tn(&gy, xv, fout, bsz, fin)));
                    }
                    if self.nodes[b.0].needs_grad {
                        let mut db = vec![T::ZERO; fout];
                        for row in gy.chunks(fout) {
                            for (acc, g) in db.iter_mut().zip(row) {
                                *acc += *g;
                            }
                        }
                        contrib.push((*b, db));
                    }
                }
                Op::AddChannelBias { x, bias } => {
                    let (b, c, h, w, _) = as_bchw(self.nodes[x.0].value.shape())?;
                    let hw = h * w;
                    if self.nodes[x.0].needs_grad {
                        contrib.push((*x, gy.clone()));
                    }
                    if self.nodes[bias.0].needs_grad {
                        let mut db = vec![T::ZERO; c];
                        for bi in 0..b {
                            for (ci, acc) in db.iter_mut().enumerate() {
                                let off = (bi * c + ci) * hw;
                                *acc += gy[off..off + hw].iter().copied().sum();
                            }
                        }
                        contrib.push((*bias, db));
                    }
                }
                Op::MaxPool2d { x, argmax } => {
                    let mut dx = vec![T::ZERO; self.nodes[x.0].value.numel()];
                    for (g, &at) in gy.iter().zip(argmax) {
                        dx[at] += *g;
                    }
                    contrib.push((*x, dx));
                }
                Op::GlobalAvgPool { x } => {
                    let (b, c, h, w, _) = as_bchw(self.nodes[x.0].value.shape())?;
                    let hw = h * w;
                    let scale = T::from_f64(1.0 / hw as f64);
                    let mut dx = vec![T::ZERO; b * c * hw];
                    for bc in 0..b * c {
                        let g = gy[bc] * scale;
                        dx[bc * hw..(bc + 1) * hw].iter_mut().for_each(|v| *v = g);
                    }
                    contrib.push((*x, dx));
                }
                Op::ChannelShuffle { x, groups } => {
                    let (b, c, h, w, _) = as_bchw(self.nodes[x.0].value.shape())?;
                    // The inverse of shuffling with g groups is shuffling with
                    // n = c/g groups.
                    let inv = crate::sharing::shuffle_permutation(c, c / groups);
                    contrib.push((*x, permute_channels(&gy, b, c, h * w, &inv)));
                }
                Op::ConcatChannels { xs } => {
                    let (b0, total_c, h, w, _) = as_bchw(self.nodes[idx].value.shape())?;
                    let hw = h * w;
                    let mut start = 0usize;
                    for &v in xs {
                        let c = as_bchw(self.nodes[v.0].value.shape())?.1;
                        if self.nodes[v.0].needs_grad {
                            let mut dv = vec![T::ZERO; b0 * c * hw];
                            for bi in 0..b0 {
                                let src =
                                    &gy[(bi * total_c + start) * hw..(bi * total_c + start + c) * hw];
                                dv[bi * c * hw..(bi + 1) * c * hw].copy_from_slice(src);
                            }
                            contrib.push((v, dv));
                        }
                        start += c;
                    }
                }
                Op::SliceChannels { x, start } => {
                    let (b, c, h, w, _) = as_bchw(self.nodes[x.0].value.shape())?;
                    let len = as_bchw(self.nodes[idx].value.shape())?.1;
                    let hw = h * w;
                    let mut dx = vec![T::ZERO; b * c * hw];
                    for bi in 0..b {
                        let dst =
                            &mut dx[(bi * c + start) * hw..(bi * c + start + len) * hw];
                        dst.copy_from_slice(&gy[bi * len * hw..(bi + 1) * len * hw]);
                    }
                    contrib.push((*x, dx));
                }
                Op::SliceLead { x } => {
                    let src_shape = self.nodes[x.0].value.shape().to_vec();
                    let dims = self.nodes[idx].value.shape().to_vec();
                    contrib.push((*x, scatter_lead_block(&gy, &src_shape, &dims)));
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    saved,
                } => {
                    let (b, c, h, w, _) = as_bchw(self.nodes[x.0].value.shape())?;
                    let hw = h * w;
                    let count = b * hw;
                    let gv = self.nodes[gamma.0].value.data();
                    let mut dgamma = vec![T::ZERO; c];
                    let mut dbeta = vec![T::ZERO; c];
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * hw;
                            for i in 0..hw {
                                dgamma[ci] += gy[off + i] * saved.xhat[off + i];
                                dbeta[ci] += gy[off + i];
                            }
                        }
                    }
                    if self.nodes[x.0].needs_grad {
                        let mut dx = vec![T::ZERO; gy.len()];
                        if saved.training {
                            let inv_n = T::from_f64(1.0 / count as f64);
                            for ci in 0..c {
                                let mean_dy = dbeta[ci] * inv_n;
                                let mean_dyxh = dgamma[ci] * inv_n;
                                let scale = gv[ci] * saved.inv_std[ci];
                                for bi in 0..b {
                                    let off = (bi * c + ci) * hw;
                                    for i in 0..hw {
                                        dx[off + i] = scale
                                            * (gy[off + i]
                                                - mean_dy
                                                - saved.xhat[off + i] * mean_dyxh);
                                    }
                                }
                            }
                        } else {
                            for ci in 0..c {
                                let scale = gv[ci] * saved.inv_std[ci];
                                for bi in 0..b {
                                    let off = (bi * c + ci) * hw;
                                    for i in 0..hw {
                                        dx[off + i] = scale * gy[off + i];
                                    }
                                }
                            }
                        }
                        contrib.push((*x, dx));
                    }
                    if self.nodes[gamma.0].needs_grad {
                        contrib.push((*gamma, dgamma));
                    }
                    if self.nodes[beta.0].needs_grad {
                        contrib.push((*beta, dbeta));
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let b = labels.len();
                    let k = probs.len() / b;
                    let g = gy[0] * T::from_f64(1.0 / b as f64);
                    let mut dl = vec![T::ZERO; probs.len()];
                    for bi in 0..b {
                        for j in 0..k {
                            let ind = if labels[bi] == j { T::ONE } else { T::ZERO };
                            dl[bi * k + j] = (probs[bi * k + j] - ind) * g;
                        }
                    }
                    contrib.push((*logits, dl));
                }
            }
            for (parent, delta) in contrib {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(&delta) {
                            *a += *d;
                        }
                    }
                    slot => *slot = Some(delta),
                }
            }
        }
        Ok(())
    }
}

/// Copies the leading block of `src` shaped `src_shape` into a tensor
/// shaped `dims`.
fn copy_lead_block<T: Scalar>(src: &[T], src_shape: &[usize], dims: &[usize]) -> Vec<T> {
    let numel: usize = dims.iter().product();
    let mut out = vec![T::ZERO; numel];
    let src_strides = strides(src_shape);
    let mut index = vec![0usize; dims.len()];
    for slot in out.iter_mut() {
        let off: usize = index
            .iter()
            .zip(&src_strides)
            .map(|(i, s)| i * s)
            .sum();
        *slot = src[off];
        increment(&mut index, dims);
    }
    out
}

/// Adjoint of `copy_lead_block`: scatters `gy` (shaped `dims`) into a zero
/// tensor shaped `src_shape`.
fn scatter_lead_block<T: Scalar>(gy: &[T], src_shape: &[usize], dims: &[usize]) -> Vec<T> {
    let numel: usize = src_shape.iter().product();
    let mut out = vec![T::ZERO; numel];
    let src_strides = strides(src_shape);
    let mut index = vec![0usize; dims.len()];
    for g in gy {
        let off: usize = index
            .iter()
            .zip(&src_strides)
            .map(|(i, s)| i * s)
            .sum();
        out[off] += *g;
        increment(&mut index, dims);
    }
    out
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn increment(index: &mut [usize], dims: &[usize]) {
    for d in (0..dims.len()).rev() {
        index[d] += 1;
        if index[d] < dims[d] {
            return;
        }
        index[d] = 0;
    }
}

fn permute_channels<T: Scalar>(x: &[T], b: usize, c: usize, hw: usize, perm: &[usize]) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    for bi in 0..b {
        for (dst, &src) in perm.iter().enumerate() {
            let s = (bi * c + src) * hw;
            let d = (bi * c + dst) * hw;
            out[d..d + hw].copy_from_slice(&x[s..s + hw]);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward<T: Scalar>(
    x: &[T],
    k: &[T],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut y = vec![T::ZERO; b * cout * oh * ow];
    let patch = cin * kh * kw;
    let run = |bi: usize, out: &mut [T]| {
        let xb = &x[bi * cin * h * w..(bi + 1) * cin * h * w];
        let cols = im2col(xb, cin, h, w, kh, kw, stride, pad, oh, ow);
        out.copy_from_slice(&matmul(k, &cols, cout, patch, oh * ow));
    };
    if b >= 4 {
        y.par_chunks_mut(cout * oh * ow)
            .enumerate()
            .for_each(|(bi, out)| run(bi, out));
    } else {
        for (bi, out) in y.chunks_mut(cout * oh * ow).enumerate() {
            run(bi, out);
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_input<T: Scalar>(
    gy: &[T],
    k: &[T],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut dx = vec![T::ZERO; b * cin * h * w];
    let patch = cin * kh * kw;
    let run = |bi: usize, out: &mut [T]| {
        let gyb = &gy[bi * cout * oh * ow..(bi + 1) * cout * oh * ow];
        let dcols = matmul_tn(k, gyb, patch, cout, oh * ow);
        out.copy_from_slice(&col2im(&dcols, cin, h, w, kh, kw, stride, pad, oh, ow));
    };
    if b >= 4 {
        dx.par_chunks_mut(cin * h * w)
            .enumerate()
            .for_each(|(bi, out)| run(bi, out));
    } else {
        for (bi, out) in dx.chunks_mut(cin * h * w).enumerate() {
            run(bi, out);
        }
    }
    dx
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_kernel<T: Scalar>(
    gy: &[T],
    x: &[T],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let patch = cin * kh * kw;
    // Per-batch contributions are computed in parallel but reduced in batch
    // order so the result does not depend on thread count.
    let parts: Vec<Vec<T>> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let xb = &x[bi * cin * h * w..(bi + 1) * cin * h * w];
            let gyb = &gy[bi * cout * oh * ow..(bi + 1) * cout * oh * ow];
            let cols = im2col(xb, cin, h, w, kh, kw, stride, pad, oh, ow);
            matmul_nt(gyb, &cols, cout, oh * ow, patch)
        })
        .collect();
    let mut dk = vec![T::ZERO; cout * patch];
    for part in parts {
        for (acc, p) in dk.iter_mut().zip(&part) {
            *acc += *p;
        }
    }
    dk
}

/// SGD with classical momentum and optional weight decay.
///
/// v ← μ·v + g + λ·p, then p ← p − lr·v.
#[derive(Debug, Clone)]
pub struct Sgd<T: Scalar> {
    velocity: Vec<Vec<T>>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            velocity: store
                .ids()
                .map(|id| vec![T::ZERO; store.get(id).numel()])
                .collect(),
            lr,
            momentum,
            weight_decay,
        }
    }

    /// Applies one update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        let mu = T::from_f64(self.momentum);
        let lr = T::from_f64(self.lr);
        let wd = T::from_f64(self.weight_decay);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let t = store.get_mut(id);
            let g = match t.grad() {
                Some(g) => g.to_vec(),
                None => continue,
            };
            let v = &mut self.velocity[i];
            let data = t.data_mut();
            for j in 0..data.len() {
                v[j] = mu * v[j] + g[j] + wd * data[j];
                data[j] -= lr * v[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_all_ones_center_is_kernel_sum() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 3, 3], 1.0));
        let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, k, 1, 1).unwrap();
        // Center position overlaps the whole kernel.
        assert_eq!(tape.value(y).data()[4], 9.0);
        assert_eq!(tape.value(y).shape(), &[1, 3, 3]);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[3, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[2, 2, 3, 3]));
        assert!(tape.conv2d(x, k, 1, 1).is_err());
    }

    #[test]
    fn channel_combine_identity() {
        let mut tape = Tape::<f64>::new();
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let a = tape.constant(eye);
        let z = tape.constant(t(&[3, 1, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.channel_combine(a, z).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn shared_param_grad_is_sum_of_uses() {
        // loss = sum(W·x) + sum(W·x) accumulates twice the single-site grad.
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));

        let grad_of = |uses: usize, store: &mut ParamStore<f64>| {
            store.zero_grads();
            let mut tape = Tape::new();
            let wv = tape.param(store, w);
            let x = tape.constant(t(&[2, 1], &[1.0, 1.0]));
            let mut total = None;
            for _ in 0..uses {
                let y = tape.matmul(wv, x).unwrap();
                let s = tape.sum_all(y);
                total = Some(match total {
                    None => s,
                    Some(acc) => tape.add(acc, s).unwrap(),
                });
            }
            tape.backward(total.unwrap(), store).unwrap();
            store.get(w).grad().unwrap().to_vec()
        };

        let g1 = grad_of(1, &mut store);
        let g2 = grad_of(2, &mut store);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", t(&[2], &[1.0, 2.0]));
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        assert!(tape.backward(wv, &mut store).is_err());
    }

    #[test]
    fn constant_tensors_receive_no_grad() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", t(&[2], &[1.0, 2.0]));
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let c = tape.constant(t(&[2], &[5.0, 5.0]));
        let s1 = tape.sum_all(wv);
        let s2 = tape.sum_all(c);
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(w).grad().unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn max_pool_forward_and_argmax_routing() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add(
            "x",
            t(&[1, 1, 2, 2], &[1.0, 5.0, 3.0, 2.0]),
        );
        let mut tape = Tape::new();
        let xv = tape.param(&store, x);
        let y = tape.max_pool2d(xv, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);
        let loss = tape.sum_all(y);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(x).grad().unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_ce_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[2, 4]));
        let loss = tape.softmax_cross_entropy(logits, &[0, 3]).unwrap();
        let expect = (4.0f64).ln();
        assert!((tape.value(loss).data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn sgd_momentum_two_steps() {
        // p0=1, g=1 fixed: v1=1, p1=1-0.1=0.9; v2=0.9*1+1=1.9, p2=0.9-0.19=0.71.
        let mut store = ParamStore::<f64>::new();
        let p = store.add("p", t(&[1], &[1.0]));
        let mut opt = Sgd::new(&store, 0.1, 0.9, 0.0);
        for _ in 0..2 {
            store.zero_grads();
            store.get_mut(p).accumulate_grad(&[1.0]);
            opt.step(&mut store);
        }
        assert!((store.get(p).data()[0] - 0.71).abs() < 1e-12);
    }
}
