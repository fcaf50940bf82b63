//! Model configuration schema, validation, and the executable network built
//! from it.
//!
//! A model is an ordered layer list plus an optional residual-connection
//! map. Channel counts chain automatically from the input; a residual whose
//! endpoints disagree in shape gets a 1x1 projection convolution inserted.

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sharing::{
    allocate_scheme, decomposed_layer_forward, normal_tensor, Allocation, ConvDesc, SharingScheme,
};
use crate::tensor::Tensor;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// One entry of the ordered layer list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerSpec {
    /// 2-d convolution. `padding` defaults to (kernel-1)/2 ("same" for odd
    /// kernels at stride 1); `decomposable` defaults to kernel == atom_kernel.
    Conv {
        out: usize,
        #[serde(default = "default_kernel")]
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        padding: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none", rename = "in")]
        in_channels: Option<usize>,
        #[serde(default)]
        bias: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        decomposable: Option<bool>,
    },
    /// Max pooling with square window `size` and stride `size`.
    Pool { size: usize },
    /// Global average pooling; flattens to [batch, channels].
    Gap,
    /// Fully-connected head; must be the final layer.
    Linear { out: usize },
    /// Per-channel batch normalization.
    Norm,
    Relu,
}

fn default_kernel() -> usize {
    3
}
fn default_stride() -> usize {
    1
}
fn default_res_norm() -> bool {
    true
}

/// Residual connection: the input of layer `from` is added to the input of
/// layer `to`. When shapes differ a 1x1 projection convolution (optionally
/// followed by normalization) is inserted on the skip path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualSpec {
    pub from: usize,
    pub to: usize,
    #[serde(default = "default_res_norm")]
    pub norm: bool,
}

/// Complete declarative model description, serializable as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub schema_version: u32,
    pub name: String,
    /// Input shape (channels, height, width).
    pub input: [usize; 3],
    pub classes: usize,
    /// Kernel extent eligible for decomposition.
    #[serde(default = "default_kernel")]
    pub atom_kernel: usize,
    #[serde(rename = "layer")]
    pub layers: Vec<LayerSpec>,
    #[serde(rename = "residual", default, skip_serializing_if = "Vec::is_empty")]
    pub residuals: Vec<ResidualSpec>,
}

impl ModelConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text)
            .map_err(|e| Error::config(format!("model config parse error: {e}")))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "unsupported schema_version {} (this build reads {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }
}

/// Input/output shape of one layer at the configured input resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IoShape {
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c_out: usize,
    pub h_out: usize,
    pub w_out: usize,
    /// False once the tensor has been flattened by gap/linear.
    pub spatial: bool,
}

/// Projection inserted on a residual skip whose endpoint shapes differ.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProjectionInfo {
    pub residual: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub norm: bool,
}

/// Validation output: shapes per layer, convolution descriptors, residual
/// projections, and head bookkeeping.
#[derive(Debug, Clone)]
pub struct ResolvedModel {
    pub ios: Vec<IoShape>,
    pub descs: Vec<ConvDesc>,
    /// Layer index -> descriptor index (convolution layers only).
    pub desc_of_layer: Vec<Option<usize>>,
    /// Residual index -> descriptor index of its projection, if any.
    pub proj_desc: Vec<Option<usize>>,
    pub projections: Vec<Option<ProjectionInfo>>,
    pub feat_dim: usize,
}

impl ModelConfig {
    /// Validates the layer chain and computes every intermediate shape.
    pub fn resolve(&self) -> Result<ResolvedModel> {
        if self.layers.is_empty() {
            return Err(Error::config("model has no layers"));
        }
        if self.classes < 2 {
            return Err(Error::config("model needs at least 2 classes"));
        }
        let [c0, h0, w0] = self.input;
        if c0 == 0 || h0 == 0 || w0 == 0 {
            return Err(Error::config("input extents must be positive"));
        }
        let mut ios = Vec::with_capacity(self.layers.len());
        let mut descs = Vec::new();
        let mut desc_of_layer = vec![None; self.layers.len()];
        let (mut c, mut h, mut w) = (c0, h0, w0);
        let mut spatial = true;
        for (i, layer) in self.layers.iter().enumerate() {
            let (c_in, h_in, w_in) = (c, h, w);
            match layer {
                LayerSpec::Conv {
                    out,
                    kernel,
                    stride,
                    padding,
                    in_channels,
                    bias,
                    decomposable,
                } => {
                    if !spatial {
                        return Err(Error::config(format!(
                            "layer {i}: convolution after the tensor was flattened"
                        )));
                    }
                    if let Some(expect) = in_channels {
                        if *expect != c {
                            return Err(Error::config(format!(
                                "layer {i}: declares {expect} input channels but receives {c}"
                            )));
                        }
                    }
                    if *out == 0 || *kernel == 0 || *stride == 0 {
                        return Err(Error::config(format!(
                            "layer {i}: conv extents must be positive"
                        )));
                    }
                    let pad = padding.unwrap_or((*kernel - 1) / 2);
                    let (Some(oh), Some(ow)) = (
                        crate::linalg::conv_out_dim(h, pad, *kernel, *stride),
                        crate::linalg::conv_out_dim(w, pad, *kernel, *stride),
                    ) else {
                        return Err(Error::config(format!(
                            "layer {i}: kernel {kernel} does not fit {h}x{w} input (pad {pad})"
                        )));
                    };
                    let decomp = decomposable.unwrap_or(*kernel == self.atom_kernel);
                    if decomp && *kernel != self.atom_kernel {
                        return Err(Error::config(format!(
                            "layer {i}: decomposable convolution must use the {}x{} atom kernel",
                            self.atom_kernel, self.atom_kernel
                        )));
                    }
                    desc_of_layer[i] = Some(descs.len());
                    descs.push(ConvDesc {
                        layer: i,
                        c_in: c,
                        c_out: *out,
                        kernel: *kernel,
                        stride: *stride,
                        padding: pad,
                        bias: *bias,
                        decomposable: decomp,
                        out_feat: (oh, ow),
                        label: format!("layer{i}"),
                    });
                    c = *out;
                    h = oh;
                    w = ow;
                }
                LayerSpec::Pool { size } => {
                    if !spatial {
                        return Err(Error::config(format!(
                            "layer {i}: pooling after the tensor was flattened"
                        )));
                    }
                    if *size == 0 || h < *size || w < *size {
                        return Err(Error::config(format!(
                            "layer {i}: pool window {size} does not fit {h}x{w}"
                        )));
                    }
                    h /= size;
                    w /= size;
                }
                LayerSpec::Gap => {
                    if !spatial {
                        return Err(Error::config(format!("layer {i}: repeated flatten")));
                    }
                    spatial = false;
                    h = 1;
                    w = 1;
                }
                LayerSpec::Linear { out } => {
                    if spatial {
                        return Err(Error::config(format!(
                            "layer {i}: linear head requires global average pooling first"
                        )));
                    }
                    if i + 1 != self.layers.len() {
                        return Err(Error::config(format!(
                            "layer {i}: linear must be the final layer"
                        )));
                    }
                    if *out != self.classes {
                        return Err(Error::config(format!(
                            "layer {i}: linear emits {out} values but the model declares {} classes",
                            self.classes
                        )));
                    }
                    c = *out;
                }
                LayerSpec::Norm | LayerSpec::Relu => {
                    if !spatial && matches!(layer, LayerSpec::Norm) {
                        return Err(Error::config(format!(
                            "layer {i}: normalization after the tensor was flattened"
                        )));
                    }
                }
            }
            ios.push(IoShape {
                c_in,
                h_in,
                w_in,
                c_out: c,
                h_out: h,
                w_out: w,
                spatial,
            });
        }
        match self.layers.last() {
            Some(LayerSpec::Linear { .. }) => {}
            _ => {
                return Err(Error::config(
                    "model must end with a linear classification head",
                ))
            }
        }

        // Residual endpoints and projection insertion.
        let mut projections = vec![None; self.residuals.len()];
        let mut proj_desc = vec![None; self.residuals.len()];
        for (r, res) in self.residuals.iter().enumerate() {
            if res.from >= res.to || res.to >= self.layers.len() {
                return Err(Error::config(format!(
                    "residual {r}: endpoints {}..{} out of order or range",
                    res.from, res.to
                )));
            }
            let src = ios[res.from]; // shape entering layer `from`
            let (sc, sh, sw) = (src.c_in, src.h_in, src.w_in);
            let dst = ios[res.to];
            let (dc, dh, dw) = (dst.c_in, dst.h_in, dst.w_in);
            if !dst.spatial || !src.spatial {
                return Err(Error::config(format!(
                    "residual {r}: endpoints must be spatial tensors"
                )));
            }
            if (sc, sh, sw) != (dc, dh, dw) {
                if sh % dh != 0 || sw % dw != 0 || sh / dh != sw / dw {
                    return Err(Error::config(format!(
                        "residual {r}: cannot project {sh}x{sw} onto {dh}x{dw}"
                    )));
                }
                let stride = sh / dh;
                proj_desc[r] = Some(descs.len());
                descs.push(ConvDesc {
                    layer: res.to,
                    c_in: sc,
                    c_out: dc,
                    kernel: 1,
                    stride,
                    padding: 0,
                    bias: false,
                    decomposable: false,
                    out_feat: (dh, dw),
                    label: format!("res{r}/proj"),
                });
                projections[r] = Some(ProjectionInfo {
                    residual: r,
                    c_in: sc,
                    c_out: dc,
                    stride,
                    norm: res.norm,
                });
            }
        }

        let feat_dim = match self.layers.last() {
            Some(LayerSpec::Linear { .. }) => ios[self.layers.len() - 1].c_in,
            _ => unreachable!(),
        };
        Ok(ResolvedModel {
            ios,
            descs,
            desc_of_layer,
            proj_desc,
            projections,
            feat_dim,
        })
    }
}

// ---- executable network ----

/// Which forward path decomposed layers take.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecMode {
    /// Atom convolution then channel combination (Z = D*X, Y = A·Z).
    SubLayer,
    /// Explicit kernel reconstruction K = D·A then one convolution.
    FusedReconstruct,
}

/// Batch-normalization parameters plus running statistics.
#[derive(Debug, Clone)]
pub struct NormParams<T: Scalar> {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

/// Projection parameters on a residual skip path.
#[derive(Debug, Clone)]
pub struct ProjParams<T: Scalar> {
    pub w: ParamId,
    pub norm: Option<NormParams<T>>,
}

/// A built network: parameters allocated, sharing scheme bound, ready to run
/// forward passes on a tape.
#[derive(Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub resolved: ResolvedModel,
    pub scheme: SharingScheme,
    pub alloc: Allocation,
    pub store: ParamStore<T>,
    pub exec: ExecMode,
    /// Atom-drop rate applied during training forward passes.
    pub drop_rate: f64,
    conv_w: Vec<Option<ParamId>>,
    conv_b: Vec<Option<ParamId>>,
    norms: Vec<Option<NormParams<T>>>,
    projs: Vec<Option<ProjParams<T>>>,
    head: (ParamId, ParamId),
}

/// Activations recorded for one decomposed convolution during a forward
/// pass: the layer output Y and, on the sub-layer path, the atom sub-layer
/// outputs Z (one per group).
pub struct LayerTap {
    pub layer: usize,
    pub desc: usize,
    pub y: Var,
    pub z_groups: Vec<Var>,
}

/// Result of a forward pass.
pub struct ForwardOutput {
    pub logits: Var,
    pub taps: Vec<LayerTap>,
}

/// Builds a network from a config and sharing scheme with seeded
/// initialization.
pub fn build_model<T: Scalar>(
    config: &ModelConfig,
    scheme: SharingScheme,
    seed: u64,
) -> Result<Model<T>> {
    let resolved = config.resolve()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let alloc = allocate_scheme(&resolved.descs, scheme, &mut store, &mut rng)?;

    let n_layers = config.layers.len();
    let mut conv_w = vec![None; n_layers];
    let mut conv_b = vec![None; n_layers];
    let mut norms: Vec<Option<NormParams<T>>> = vec![None; n_layers];
    let mut projs: Vec<Option<ProjParams<T>>> = vec![None; config.residuals.len()];

    for (di, d) in resolved.descs.iter().enumerate() {
        let bound = alloc.bindings[di].is_some();
        let is_proj = d.label.starts_with("res");
        if !bound {
            let fan_in = d.c_in * d.kernel * d.kernel;
            let w = store.add(
                format!("{}/w", d.label),
                normal_tensor(
                    &[d.c_out, d.c_in, d.kernel, d.kernel],
                    2.0 / fan_in as f64,
                    &mut rng,
                ),
            );
            if is_proj {
                continue; // wired below via the residual table
            }
            conv_w[d.layer] = Some(w);
        }
        if d.bias && !is_proj {
            conv_b[d.layer] = Some(store.add(
                format!("{}/bias", d.label),
                Tensor::zeros(&[d.c_out]),
            ));
        }
    }

    for (i, layer) in config.layers.iter().enumerate() {
        if matches!(layer, LayerSpec::Norm) {
            let ch = resolved.ios[i].c_in;
            let gamma = store.add(format!("layer{i}/norm/gamma"), Tensor::full(&[ch], T::ONE));
            let beta = store.add(format!("layer{i}/norm/beta"), Tensor::zeros(&[ch]));
            norms[i] = Some(NormParams {
                gamma,
                beta,
                running_mean: vec![T::ZERO; ch],
                running_var: vec![T::ONE; ch],
            });
        }
    }

    for (r, info) in resolved.projections.iter().enumerate() {
        let Some(info) = info else { continue };
        let w = store
            .find(&format!("res{r}/proj/w"))
            .expect("projection weight registered above");
        let norm = if info.norm {
            let gamma = store.add(
                format!("res{r}/proj/norm/gamma"),
                Tensor::full(&[info.c_out], T::ONE),
            );
            let beta = store.add(
                format!("res{r}/proj/norm/beta"),
                Tensor::zeros(&[info.c_out]),
            );
            Some(NormParams {
                gamma,
                beta,
                running_mean: vec![T::ZERO; info.c_out],
                running_var: vec![T::ONE; info.c_out],
            })
        } else {
            None
        };
        projs[r] = Some(ProjParams { w, norm });
    }

    let feat = resolved.feat_dim;
    let head_w = store.add(
        "head/w",
        normal_tensor(&[config.classes, feat], 2.0 / feat as f64, &mut rng),
    );
    let head_b = store.add("head/b", Tensor::zeros(&[config.classes]));

    Ok(Model {
        config: config.clone(),
        resolved,
        scheme,
        alloc,
        store,
        // Fused reconstruction computes the same values and gradients as the
        // two-sub-layer path but costs far less per image, so it is the
        // default; analyses that need atom responses switch to SubLayer.
        exec: ExecMode::FusedReconstruct,
        drop_rate: 0.0,
        conv_w,
        conv_b,
        norms,
        projs,
        head: (head_w, head_b),
    })
}

impl<T: Scalar> Model<T> {
    pub fn head_params(&self) -> (ParamId, ParamId) {
        self.head
    }

    /// Named non-trainable state (batch-norm running statistics).
    pub fn buffers(&self) -> Vec<(String, Vec<T>)> {
        let mut out = Vec::new();
        for (i, n) in self.norms.iter().enumerate() {
            if let Some(n) = n {
                out.push((format!("layer{i}/norm/running_mean"), n.running_mean.clone()));
                out.push((format!("layer{i}/norm/running_var"), n.running_var.clone()));
            }
        }
        for (r, p) in self.projs.iter().enumerate() {
            if let Some(ProjParams { norm: Some(n), .. }) = p {
                out.push((format!("res{r}/proj/norm/running_mean"), n.running_mean.clone()));
                out.push((format!("res{r}/proj/norm/running_var"), n.running_var.clone()));
            }
        }
        out
    }

    /// Restores one buffer by path; unknown paths are a config error.
    pub fn set_buffer(&mut self, path: &str, data: Vec<T>) -> Result<()> {
        let fail = || Error::config(format!("unknown buffer path `{path}`"));
        let (prefix, which) = path.rsplit_once('/').ok_or_else(fail)?;
        let slot: &mut NormParams<T> = if let Some(rest) = prefix.strip_prefix("layer") {
            let (i, _) = rest.split_once('/').ok_or_else(fail)?;
            let i: usize = i.parse().map_err(|_| fail())?;
            self.norms.get_mut(i).and_then(|n| n.as_mut()).ok_or_else(fail)?
        } else if let Some(rest) = prefix.strip_prefix("res") {
            let (r, _) = rest.split_once('/').ok_or_else(fail)?;
            let r: usize = r.parse().map_err(|_| fail())?;
            self.projs
                .get_mut(r)
                .and_then(|p| p.as_mut())
                .and_then(|p| p.norm.as_mut())
                .ok_or_else(fail)?
        } else {
            return Err(fail());
        };
        let target = match which {
            "running_mean" => &mut slot.running_mean,
            "running_var" => &mut slot.running_var,
            _ => return Err(fail()),
        };
        if target.len() != data.len() {
            return Err(Error::config(format!(
                "buffer `{path}` expects {} values, got {}",
                target.len(),
                data.len()
            )));
        }
        *target = data;
        Ok(())
    }

    /// Runs the network on a batch already placed on the tape.
    /// `rng` drives atom-drop and is required when training with a nonzero
    /// drop rate.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        training: bool,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<ForwardOutput> {
        let use_drop = training && self.drop_rate > 0.0;
        if use_drop && rng.is_none() {
            return Err(Error::config(
                "training forward with atom-drop requires an rng",
            ));
        }
        let layers = self.config.layers.clone();
        let residuals = self.config.residuals.clone();
        let mut saved: Vec<Option<Var>> = vec![None; layers.len()];
        let mut taps = Vec::new();
        let mut cur = x;
        for (i, layer) in layers.iter().enumerate() {
            // Incoming skip connections land before this layer runs.
            for (r, res) in residuals.iter().enumerate() {
                if res.to != i {
                    continue;
                }
                let src = saved[res.from].ok_or_else(|| {
                    Error::config(format!("residual {r} source {} not recorded", res.from))
                })?;
                let skip = match &self.projs[r] {
                    None => src,
                    Some(p) => {
                        let info = self.resolved.projections[r]
                            .as_ref()
                            .expect("projection info exists");
                        let w = tape.param(&self.store, p.w);
                        let mut v = tape.conv2d(src, w, info.stride, 0)?;
                        if p.norm.is_some() {
                            v = self.run_norm_proj(tape, v, r, training)?;
                        }
                        v
                    }
                };
                cur = tape.add(cur, skip)?;
            }
            if residuals.iter().any(|res| res.from == i) {
                saved[i] = Some(cur);
            }

            cur = match layer {
                LayerSpec::Conv { .. } => {
                    let di = self.resolved.desc_of_layer[i].expect("conv has a descriptor");
                    let desc = &self.resolved.descs[di];
                    match &self.alloc.bindings[di] {
                        Some(binding) => {
                            let scope = &self.alloc.scopes[binding.scope];
                            let drop_arg: Option<(f64, &mut dyn RngCore)> = if use_drop {
                                Some((self.drop_rate, *rng.as_mut().unwrap()))
                            } else {
                                None
                            };
                            let out = decomposed_layer_forward(
                                tape,
                                &self.store,
                                cur,
                                desc,
                                binding,
                                scope,
                                self.exec == ExecMode::SubLayer,
                                drop_arg,
                            )?;
                            taps.push(LayerTap {
                                layer: i,
                                desc: di,
                                y: out.y,
                                z_groups: out.z_groups,
                            });
                            out.y
                        }
                        None => {
                            let w = tape.param(
                                &self.store,
                                self.conv_w[i].expect("plain conv has a weight"),
                            );
                            let mut y = tape.conv2d(cur, w, desc.stride, desc.padding)?;
                            if let Some(b) = self.conv_b[i] {
                                let bv = tape.param(&self.store, b);
                                y = tape.add_channel_bias(y, bv)?;
                            }
                            y
                        }
                    }
                }
                LayerSpec::Pool { size } => tape.max_pool2d(cur, *size)?,
                LayerSpec::Gap => tape.global_avg_pool(cur)?,
                LayerSpec::Relu => tape.relu(cur),
                LayerSpec::Norm => self.run_norm_layer(tape, cur, i, training)?,
                LayerSpec::Linear { .. } => {
                    let (w, b) = self.head;
                    let wv = tape.param(&self.store, w);
                    let bv = tape.param(&self.store, b);
                    tape.linear(cur, wv, bv)?
                }
            };
        }
        Ok(ForwardOutput { logits: cur, taps })
    }

    fn run_norm_layer(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        i: usize,
        training: bool,
    ) -> Result<Var> {
        let n = self.norms[i].as_ref().expect("norm layer has params");
        let gamma = tape.param(&self.store, n.gamma);
        let beta = tape.param(&self.store, n.beta);
        let (out, mean, var) = tape.batch_norm(
            x,
            gamma,
            beta,
            &n.running_mean,
            &n.running_var,
            BN_EPS,
            training,
        )?;
        if training {
            let count = {
                let s = tape.value(x).shape();
                let (b, hw) = if s.len() == 4 {
                    (s[0], s[2] * s[3])
                } else {
                    (1, s[1] * s[2])
                };
                b * hw
            };
            let n = self.norms[i].as_mut().unwrap();
            update_running(&mut n.running_mean, &mut n.running_var, &mean, &var, count);
        }
        Ok(out)
    }

    fn run_norm_proj(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        r: usize,
        training: bool,
    ) -> Result<Var> {
        let n = self.projs[r]
            .as_ref()
            .and_then(|p| p.norm.as_ref())
            .expect("projection norm exists");
        let gamma = tape.param(&self.store, n.gamma);
        let beta = tape.param(&self.store, n.beta);
        let (out, mean, var) = tape.batch_norm(
            x,
            gamma,
            beta,
            &n.running_mean,
            &n.running_var,
            BN_EPS,
            training,
        )?;
        if training {
            let count = {
                let s = tape.value(x).shape();
                let (b, hw) = if s.len() == 4 {
                    (s[0], s[2] * s[3])
                } else {
                    (1, s[1] * s[2])
                };
                b * hw
            };
            let n = self.projs[r].as_mut().unwrap().norm.as_mut().unwrap();
            update_running(&mut n.running_mean, &mut n.running_var, &mean, &var, count);
        }
        Ok(out)
    }
}

/// Exponential moving average update of batch-norm running statistics; the
/// running variance uses the unbiased batch estimate.
fn update_running<T: Scalar>(
    running_mean: &mut [T],
    running_var: &mut [T],
    mean: &[T],
    var: &[T],
    count: usize,
) {
    let mom = T::from_f64(BN_MOMENTUM);
    let keep = T::ONE - mom;
    let unbias = T::from_f64(count as f64 / (count.saturating_sub(1)) as f64);
    for c in 0..mean.len() {
        running_mean[c] = keep * running_mean[c] + mom * mean[c];
        running_var[c] = keep * running_var[c] + mom * var[c] * unbias;
    }
}
