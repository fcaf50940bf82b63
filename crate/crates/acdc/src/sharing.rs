//! Sharing schemes: which substructures share which coefficient tensor,
//! coefficient storage allocation with leading-corner slicing, grouping with
//! channel shuffle, and the grouped forward path.

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::decomp;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};

// ---- channel shuffle ----

/// Permutation sending channel j·n+i to position i·g+j (n = c/g):
/// `perm[dst] = src`.
pub fn shuffle_permutation(c: usize, g: usize) -> Vec<usize> {
    debug_assert!(g > 0 && c % g == 0);
    let n = c / g;
    (0..c).map(|o| (o % g) * n + o / g).collect()
}

/// Channel shuffle on a plain tensor [c,h,w] or [b,c,h,w]; a pure
/// permutation, no arithmetic.
pub fn channel_shuffle_tensor<T: Scalar>(x: &Tensor<T>, g: usize) -> Result<Tensor<T>> {
    let s = x.shape().to_vec();
    let (b, c, hw, batched) = match s[..] {
        [c, h, w] => (1, c, h * w, false),
        [b, c, h, w] => (b, c, h * w, true),
        _ => {
            return Err(Error::config(format!(
                "channel shuffle expects an image tensor, got {s:?}"
            )))
        }
    };
    if g == 0 || c % g != 0 {
        return Err(Error::config(format!(
            "channel count {c} not divisible by {g} groups"
        )));
    }
    let perm = shuffle_permutation(c, g);
    let mut out = vec![T::ZERO; x.numel()];
    for bi in 0..b {
        for (dst, &src) in perm.iter().enumerate() {
            let d = (bi * c + dst) * hw;
            let sidx = (bi * c + src) * hw;
            out[d..d + hw].copy_from_slice(&x.data()[sidx..sidx + hw]);
        }
    }
    let _ = batched;
    Tensor::from_vec(&s, out)
}

// ---- scheme description ----

/// Sharing variant. `PerLayer` is the undecomposed baseline with one fused
/// kernel per layer; the others decompose every eligible convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    PerLayer,
    Net,
    Block,
    GroupedNet,
    GroupedBlock,
    GroupedLayer,
}

impl SchemeKind {
    pub fn is_grouped(self) -> bool {
        matches!(
            self,
            SchemeKind::GroupedNet | SchemeKind::GroupedBlock | SchemeKind::GroupedLayer
        )
    }

    pub fn is_decomposed(self) -> bool {
        self != SchemeKind::PerLayer
    }

    /// Name used by the CLI `--scheme` flag.
    pub fn cli_name(self) -> &'static str {
        match self {
            SchemeKind::PerLayer => "baseline",
            SchemeKind::Net => "net",
            SchemeKind::Block => "block",
            SchemeKind::GroupedNet => "g-net",
            SchemeKind::GroupedBlock => "g-block",
            SchemeKind::GroupedLayer => "g-layer",
        }
    }

    pub fn from_cli_name(name: &str) -> Result<Self> {
        Ok(match name {
            "baseline" => SchemeKind::PerLayer,
            "net" => SchemeKind::Net,
            "block" => SchemeKind::Block,
            "g-net" => SchemeKind::GroupedNet,
            "g-block" => SchemeKind::GroupedBlock,
            "g-layer" => SchemeKind::GroupedLayer,
            other => {
                return Err(Error::config(format!(
                    "unknown scheme `{other}`; expected one of baseline, net, block, g-net, g-block, g-layer"
                )))
            }
        })
    }
}

/// Declarative sharing description: variant, atoms per substructure, and the
/// group size (channels per group) for grouped variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SharingScheme {
    pub kind: SchemeKind,
    pub m: usize,
    pub s: Option<usize>,
}

impl SharingScheme {
    pub fn new(kind: SchemeKind, m: usize, s: Option<usize>) -> Result<Self> {
        if kind.is_decomposed() && m == 0 {
            return Err(Error::config("atom count m must be at least 1"));
        }
        if let Some(s) = s {
            if !kind.is_grouped() {
                return Err(Error::config(format!(
                    "group size s applies only to grouped schemes, not {}",
                    kind.cli_name()
                )));
            }
            if s == 0 {
                return Err(Error::config("group size s must be at least 1"));
            }
        }
        Ok(SharingScheme { kind, m, s })
    }

    pub fn baseline() -> Self {
        SharingScheme {
            kind: SchemeKind::PerLayer,
            m: 0,
            s: None,
        }
    }
}

// ---- convolution descriptors ----

/// Flattened description of one convolution layer, the unit the allocator
/// and the analyzers work over.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvDesc {
    /// Index of this convolution in the model's layer list.
    pub layer: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
    pub decomposable: bool,
    /// Output spatial extents given the model's input resolution.
    pub out_feat: (usize, usize),
    /// Checkpoint path prefix, e.g. "layer3" or "res1/proj".
    pub label: String,
}

/// Groups consecutive decomposable convolutions that agree on output
/// channels and output feature size. Returns one block id per descriptor
/// (None for non-decomposable entries).
pub fn assign_blocks(descs: &[ConvDesc]) -> Vec<Option<usize>> {
    let mut out = vec![None; descs.len()];
    let mut prev: Option<(usize, (usize, usize))> = None;
    let mut block = 0usize;
    let mut started = false;
    for (i, d) in descs.iter().enumerate() {
        if !d.decomposable {
            continue;
        }
        let key = (d.c_out, d.out_feat);
        if started && prev != Some(key) {
            block += 1;
        }
        out[i] = Some(block);
        prev = Some(key);
        started = true;
    }
    out
}

/// Derived grouping for one layer: group count g = c_in/s, with layers whose
/// channels s does not evenly divide exempted (kept ungrouped, flagged).
pub fn group_count(c_in: usize, c_out: usize, s: Option<usize>) -> (usize, bool) {
    match s {
        None => (1, false),
        Some(s) => {
            if c_in % s == 0 {
                let g = c_in / s;
                if c_out % g == 0 {
                    (g, false)
                } else {
                    (1, true)
                }
            } else {
                (1, true)
            }
        }
    }
}

// ---- planning ----

/// Planned dimensions of one shared coefficient storage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScopePlan {
    pub c_max: usize,
    pub cp_max: usize,
    pub m: usize,
    /// Descriptor indices of member layers.
    pub members: Vec<usize>,
}

/// Planned binding of one decomposable layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BindingPlan {
    pub desc: usize,
    pub scope: usize,
    /// Group count (1 when ungrouped).
    pub g: usize,
    /// True when a requested grouping did not divide this layer's channels.
    pub exempt: bool,
}

/// Storage layout for a scheme over a set of convolutions, computed without
/// touching any parameters; the allocator and the cost analyzers both run on
/// top of this.
#[derive(Debug, Clone)]
pub struct SchemePlan {
    pub scheme: SharingScheme,
    pub scopes: Vec<ScopePlan>,
    /// Parallel to the descriptor list; None for non-decomposable layers or
    /// under the PerLayer baseline.
    pub bindings: Vec<Option<BindingPlan>>,
    pub blocks: Vec<Option<usize>>,
}

impl SchemePlan {
    /// Indices of exempted (ungrouped despite a grouped scheme) layers.
    pub fn exempt_layers(&self) -> Vec<usize> {
        self.bindings
            .iter()
            .flatten()
            .filter(|b| b.exempt)
            .map(|b| b.desc)
            .collect()
    }
}

/// Computes scope membership, storage dimensions, and per-layer grouping for
/// `scheme` over the given convolutions.
pub fn plan_scheme(descs: &[ConvDesc], scheme: SharingScheme) -> Result<SchemePlan> {
    let blocks = assign_blocks(descs);
    let mut bindings: Vec<Option<BindingPlan>> = vec![None; descs.len()];
    if scheme.kind == SchemeKind::PerLayer {
        return Ok(SchemePlan {
            scheme,
            scopes: Vec::new(),
            bindings,
            blocks,
        });
    }
    if !descs.iter().any(|d| d.decomposable) {
        return Err(Error::config(
            "scheme requires at least one decomposable convolution",
        ));
    }

    // Scope key per decomposable layer.
    let mut scope_of: Vec<Option<usize>> = vec![None; descs.len()];
    let mut next_scope = 0usize;
    let mut block_scope: Vec<Option<usize>> = Vec::new();
    for (i, d) in descs.iter().enumerate() {
        if !d.decomposable {
            continue;
        }
        let sid = match scheme.kind {
            SchemeKind::Net | SchemeKind::GroupedNet => {
                next_scope = 1;
                0
            }
            SchemeKind::Block | SchemeKind::GroupedBlock => {
                let b = blocks[i].expect("decomposable layers are always blocked");
                if b >= block_scope.len() {
                    block_scope.resize(b + 1, None);
                }
                *block_scope[b].get_or_insert_with(|| {
                    let s = next_scope;
                    next_scope += 1;
                    s
                })
            }
            SchemeKind::GroupedLayer => {
                let s = next_scope;
                next_scope += 1;
                s
            }
            SchemeKind::PerLayer => unreachable!(),
        };
        scope_of[i] = Some(sid);
    }

    let s_grouping = if scheme.kind.is_grouped() {
        scheme.s
    } else {
        None
    };
    let mut scopes = vec![
        ScopePlan {
            c_max: 0,
            cp_max: 0,
            m: scheme.m,
            members: Vec::new(),
        };
        next_scope
    ];
    for (i, d) in descs.iter().enumerate() {
        let Some(sid) = scope_of[i] else { continue };
        let (g, exempt) = group_count(d.c_in, d.c_out, s_grouping);
        scopes[sid].c_max = scopes[sid].c_max.max(d.c_out / g);
        scopes[sid].cp_max = scopes[sid].cp_max.max(d.c_in / g);
        scopes[sid].members.push(i);
        bindings[i] = Some(BindingPlan {
            desc: i,
            scope: sid,
            g,
            exempt,
        });
    }
    if scopes.iter().any(|s| s.members.is_empty()) {
        return Err(Error::config("sharing scope has no layers"));
    }
    Ok(SchemePlan {
        scheme,
        scopes,
        bindings,
        blocks,
    })
}

// ---- allocation ----

/// One shared coefficient storage and the layers that slice it.
#[derive(Debug, Clone)]
pub struct ScopeInfo {
    pub coeff: ParamId,
    pub c_max: usize,
    pub cp_max: usize,
    pub m: usize,
    /// Descriptor indices of member layers.
    pub members: Vec<usize>,
}

/// Binding of one decomposable layer to its scope storage and atom sets.
#[derive(Debug, Clone)]
pub struct LayerBinding {
    pub desc: usize,
    pub scope: usize,
    /// Group count (1 when ungrouped).
    pub g: usize,
    /// True when a requested grouping did not divide this layer's channels.
    pub exempt: bool,
    /// One atom set per group, each [m, l, l].
    pub atoms: Vec<ParamId>,
}

impl LayerBinding {
    /// Coefficient sub-block dimensions this layer reads: (c_out/g, c_in/g).
    pub fn slice_dims(&self, d: &ConvDesc) -> (usize, usize) {
        (d.c_out / self.g, d.c_in / self.g)
    }
}

/// Result of [`allocate_scheme`]: every sharing scope sized to the maxima of
/// its members, every decomposable layer bound to exactly one scope.
#[derive(Debug, Clone)]
pub struct Allocation {
    pub scheme: SharingScheme,
    pub scopes: Vec<ScopeInfo>,
    /// Parallel to the descriptor list; None for non-decomposable layers or
    /// under the PerLayer baseline.
    pub bindings: Vec<Option<LayerBinding>>,
    pub blocks: Vec<Option<usize>>,
}

impl Allocation {
    pub fn binding_for_desc(&self, desc_index: usize) -> Option<&LayerBinding> {
        self.bindings.get(desc_index).and_then(|b| b.as_ref())
    }

    /// Indices of exempted (ungrouped despite a grouped scheme) layers.
    pub fn exempt_layers(&self) -> Vec<usize> {
        self.bindings
            .iter()
            .flatten()
            .filter(|b| b.exempt)
            .map(|b| b.desc)
            .collect()
    }
}

/// Draws a zero-mean normal tensor with the given per-element variance.
pub fn normal_tensor<T: Scalar>(
    shape: &[usize],
    variance: f64,
    rng: &mut impl Rng,
) -> Tensor<T> {
    let dist = Normal::new(0.0, variance.sqrt()).expect("finite std");
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| T::from_f64(dist.sample(rng)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape/data agree")
}

/// Atom initialization: variance 1/l², so each atom has unit norm in
/// expectation. Combined with the coefficient variance 2/(c'·m), the
/// reconstructed kernel elements come out at the He variance 2/(c'·l²).
pub fn init_atoms<T: Scalar>(m: usize, l: usize, rng: &mut impl Rng) -> Tensor<T> {
    normal_tensor(&[m, l, l], 1.0 / (l * l) as f64, rng)
}

/// Coefficient initialization: variance 2/(c'·m) with c' the storage width.
pub fn init_coeffs<T: Scalar>(
    c_max: usize,
    cp_max: usize,
    m: usize,
    rng: &mut impl Rng,
) -> Tensor<T> {
    normal_tensor(&[c_max, cp_max, m], 2.0 / (cp_max * m) as f64, rng)
}

/// Builds the parameter layout for `scheme` over the given convolutions:
/// one coefficient tensor per scope sized c_max × c'_max × m over its
/// members, one atom set per layer (per group when grouped).
pub fn allocate_scheme<T: Scalar>(
    descs: &[ConvDesc],
    scheme: SharingScheme,
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
) -> Result<Allocation> {
    let plan = plan_scheme(descs, scheme)?;
    let scopes: Vec<ScopeInfo> = plan
        .scopes
        .iter()
        .enumerate()
        .map(|(sid, sp)| ScopeInfo {
            coeff: store.add(
                format!("scope{sid}/coeffs"),
                init_coeffs(sp.c_max, sp.cp_max, sp.m, rng),
            ),
            c_max: sp.c_max,
            cp_max: sp.cp_max,
            m: sp.m,
            members: sp.members.clone(),
        })
        .collect();
    let bindings = plan
        .bindings
        .iter()
        .map(|b| {
            b.map(|bp| {
                let d = &descs[bp.desc];
                let atoms = (0..bp.g)
                    .map(|j| {
                        store.add(
                            format!("{}/atoms{j}", d.label),
                            init_atoms(scheme.m, d.kernel, rng),
                        )
                    })
                    .collect();
                LayerBinding {
                    desc: bp.desc,
                    scope: bp.scope,
                    g: bp.g,
                    exempt: bp.exempt,
                    atoms,
                }
            })
        })
        .collect();
    Ok(Allocation {
        scheme,
        scopes,
        bindings,
        blocks: plan.blocks,
    })
}

// ---- grouped forward ----

/// Runs one decomposed convolution on the tape: slices the scope storage to
/// this layer's sub-block, splits the input into g groups, convolves each
/// group with its own atoms and the shared coefficients, concatenates, and
/// channel-shuffles (g > 1). Returns the per-group atom sub-layer outputs
/// and the layer output.
#[allow(clippy::too_many_arguments)]
pub fn decomposed_layer_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    desc: &ConvDesc,
    binding: &LayerBinding,
    scope: &ScopeInfo,
    sublayer: bool,
    drop: Option<(f64, &mut dyn rand::RngCore)>,
) -> Result<LayerForward> {
    let g = binding.g;
    let (slice_c, slice_cp) = binding.slice_dims(desc);
    if slice_c > scope.c_max || slice_cp > scope.cp_max {
        return Err(Error::config(format!(
            "{} needs a {slice_c}x{slice_cp} coefficient block but scope stores {}x{}",
            desc.label, scope.c_max, scope.cp_max
        )));
    }
    let coeff_full = tape.param(store, scope.coeff);
    let coeff_slice = tape.slice_lead(coeff_full, &[slice_c, slice_cp, scope.m])?;

    // One drop mask per atom set, drawn in group order.
    let mut atom_vars = Vec::with_capacity(g);
    match drop {
        Some((p, rng)) if p > 0.0 => {
            for &aid in &binding.atoms {
                let a = tape.param(store, aid);
                atom_vars.push(decomp::atom_drop(tape, a, p, true, rng)?);
            }
        }
        _ => {
            for &aid in &binding.atoms {
                atom_vars.push(tape.param(store, aid));
            }
        }
    }

    let mut group_outputs = Vec::with_capacity(g);
    let mut group_z = Vec::with_capacity(g);
    for (j, &atoms) in atom_vars.iter().enumerate() {
        let xg = if g == 1 {
            x
        } else {
            tape.slice_channels(x, j * slice_cp, slice_cp)?
        };
        if sublayer {
            let (z, y) = decomp::forward_decomposed_tapped(
                tape,
                xg,
                atoms,
                coeff_slice,
                desc.stride,
                desc.padding,
            )?;
            group_z.push(z);
            group_outputs.push(y);
        } else {
            group_outputs.push(decomp::forward_fused(
                tape,
                xg,
                atoms,
                coeff_slice,
                desc.stride,
                desc.padding,
            )?);
        }
    }
    let mut y = if g == 1 {
        group_outputs[0]
    } else {
        let cat = tape.concat_channels(&group_outputs)?;
        tape.channel_shuffle(cat, g)?
    };
    if desc.bias {
        // Bias lives outside the decomposition; looked up by path name.
        if let Some(bid) = store.find(&format!("{}/bias", desc.label)) {
            let b = tape.param(store, bid);
            y = tape.add_channel_bias(y, b)?;
        }
    }
    Ok(LayerForward {
        y,
        z_groups: group_z,
    })
}

/// Output of one decomposed layer: the result and (sub-layer path only) the
/// per-group atom sub-layer activations.
pub struct LayerForward {
    pub y: Var,
    pub z_groups: Vec<Var>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shuffle_g2_four_channels() {
        // [a,b,c,d] with g=2 -> [a,c,b,d]
        assert_eq!(shuffle_permutation(4, 2), vec![0, 2, 1, 3]);
    }

    #[test]
    fn shuffle_g1_identity() {
        assert_eq!(shuffle_permutation(6, 1), vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn shuffle_then_inverse_is_identity() {
        for (c, g) in [(12, 3), (8, 4), (30, 5)] {
            let fwd = shuffle_permutation(c, g);
            let inv = shuffle_permutation(c, c / g);
            let composed: Vec<usize> = (0..c).map(|i| fwd[inv[i]]).collect();
            assert_eq!(composed, (0..c).collect::<Vec<_>>(), "c={c} g={g}");
        }
    }

    #[test]
    fn shuffle_tensor_moves_whole_planes() {
        let x = Tensor::<f64>::from_vec(
            &[4, 1, 2],
            vec![0.0, 0.1, 1.0, 1.1, 2.0, 2.1, 3.0, 3.1],
        )
        .unwrap();
        let y = channel_shuffle_tensor(&x, 2).unwrap();
        assert_eq!(y.data(), &[0.0, 0.1, 2.0, 2.1, 1.0, 1.1, 3.0, 3.1]);
        assert!(channel_shuffle_tensor(&x, 3).is_err());
    }

    #[test]
    fn group_count_exemptions() {
        assert_eq!(group_count(64, 64, Some(32)), (2, false));
        assert_eq!(group_count(3, 64, Some(32)), (1, true));
        assert_eq!(group_count(64, 64, None), (1, false));
        // c_out not divisible by g
        assert_eq!(group_count(64, 30, Some(16)), (1, true));
    }

    #[test]
    fn scheme_validation() {
        assert!(SharingScheme::new(SchemeKind::Net, 0, None).is_err());
        assert!(SharingScheme::new(SchemeKind::Net, 8, Some(32)).is_err());
        assert!(SharingScheme::new(SchemeKind::GroupedNet, 8, Some(32)).is_ok());
        assert!(SharingScheme::new(SchemeKind::GroupedNet, 8, Some(0)).is_err());
    }
}
