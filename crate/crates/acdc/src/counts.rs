//! Parameter and FLOP accounting.
//!
//! Parameters are counted from the allocation plan: coefficients once per
//! sharing scope (including any dead tail no layer slices), atoms per layer
//! and group, everything else (dense convolutions, normalization, the head)
//! exactly. FLOPs count convolution and head multiply-accumulates only;
//! pooling, normalization, and activations are excluded.

use crate::error::{Error, Result};
use crate::model::{LayerSpec, ModelConfig};
use crate::sharing::{plan_scheme, ConvDesc, SchemePlan, SharingScheme};
use serde::{Deserialize, Serialize};

/// How a decomposed layer's forward cost is modeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostModel {
    /// Kernels are rebuilt from atoms and coefficients once per batch, then
    /// each layer runs as one (grouped) convolution.
    FusedReconstruct,
    /// Atom sub-layer plus 1x1 coefficient sub-layer, per image.
    TwoSublayer,
}

/// FLOP accounting convention. `flops_per_mac` = 1 counts multiply-
/// accumulates directly; 2 counts multiply and add separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopConvention {
    pub flops_per_mac: u64,
    pub cost_model: CostModel,
}

impl Default for FlopConvention {
    fn default() -> Self {
        FlopConvention {
            flops_per_mac: 1,
            cost_model: CostModel::FusedReconstruct,
        }
    }
}

/// One convolution (or the linear head) in the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerCost {
    pub label: String,
    /// "decomposed", "dense", or "linear".
    pub kind: String,
    pub g: usize,
    pub exempt: bool,
    /// Parameters owned by this layer alone (atoms, dense weights, bias).
    pub params: u64,
    pub flops: u64,
}

/// One shared coefficient storage in the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScopeCost {
    pub name: String,
    pub params: u64,
    /// Allocated elements outside every member's slice; they receive no
    /// gradient but are still stored and counted.
    pub dead: u64,
}

/// Full cost breakdown for one (model, scheme) pair at a given input shape
/// and batch size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub model: String,
    pub scheme: String,
    pub m: usize,
    pub s: Option<usize>,
    pub input: [usize; 3],
    pub batch: usize,
    pub convention: FlopConvention,
    pub layers: Vec<LayerCost>,
    pub scopes: Vec<ScopeCost>,
    pub atom_params: u64,
    pub coeff_params: u64,
    pub dense_params: u64,
    pub norm_params: u64,
    pub head_params: u64,
    pub dead_params: u64,
    pub total_params: u64,
    /// Once-per-batch kernel reconstruction cost (fused model only).
    pub reconstruction_flops: u64,
    pub total_flops: u64,
}

/// Computes both parameter and FLOP accounting. `input` overrides the model
/// config's native input shape when given.
pub fn analyze(
    config: &ModelConfig,
    scheme: SharingScheme,
    input: Option<[usize; 3]>,
    batch: usize,
    convention: FlopConvention,
) -> Result<CostReport> {
    if batch == 0 {
        return Err(Error::config("batch must be at least 1"));
    }
    let mut cfg = config.clone();
    if let Some(shape) = input {
        cfg.input = shape;
    }
    let resolved = cfg.resolve()?;
    let plan = plan_scheme(&resolved.descs, scheme)?;
    let mac = convention.flops_per_mac;
    let batch_u = batch as u64;

    let mut layers = Vec::new();
    let mut atom_params = 0u64;
    let mut dense_params = 0u64;
    let mut reconstruction_flops = 0u64;
    for (di, d) in resolved.descs.iter().enumerate() {
        let bias = if d.bias { d.c_out as u64 } else { 0 };
        let row = match &plan.bindings[di] {
            Some(b) => {
                let params = (b.g * scheme.m * d.kernel * d.kernel) as u64 + bias;
                atom_params += params - bias;
                dense_params += bias;
                let flops = match convention.cost_model {
                    CostModel::FusedReconstruct => {
                        reconstruction_flops +=
                            conv_weight_count(d) / b.g as u64 * scheme.m as u64 * mac;
                        conv_macs(d) / b.g as u64 * mac * batch_u
                    }
                    CostModel::TwoSublayer => {
                        let hw = (d.out_feat.0 * d.out_feat.1) as u64;
                        let atom = (d.c_in * scheme.m * d.kernel * d.kernel) as u64 * hw;
                        let combine = (d.c_out * d.c_in * scheme.m) as u64 * hw / b.g as u64;
                        (atom + combine) * mac * batch_u
                    }
                };
                LayerCost {
                    label: d.label.clone(),
                    kind: "decomposed".into(),
                    g: b.g,
                    exempt: b.exempt,
                    params,
                    flops,
                }
            }
            None => {
                let params = conv_weight_count(d) + bias;
                dense_params += params;
                LayerCost {
                    label: d.label.clone(),
                    kind: "dense".into(),
                    g: 1,
                    exempt: false,
                    params,
                    flops: conv_macs(d) * mac * batch_u,
                }
            }
        };
        layers.push(row);
    }

    let feat = resolved.feat_dim as u64;
    let classes = cfg.classes as u64;
    let head_params = feat * classes + classes;
    layers.push(LayerCost {
        label: "head".into(),
        kind: "linear".into(),
        g: 1,
        exempt: false,
        params: head_params,
        flops: feat * classes * mac * batch_u,
    });

    let mut scopes = Vec::new();
    let mut coeff_params = 0u64;
    let mut dead_params = 0u64;
    for (sid, sp) in plan.scopes.iter().enumerate() {
        let params = (sp.c_max * sp.cp_max * sp.m) as u64;
        let dead = params - used_coeff_cells(sp, &resolved.descs, &plan);
        coeff_params += params;
        dead_params += dead;
        scopes.push(ScopeCost {
            name: format!("scope{sid}/coeffs"),
            params,
            dead,
        });
    }

    let mut norm_params = 0u64;
    for (i, layer) in cfg.layers.iter().enumerate() {
        if matches!(layer, LayerSpec::Norm) {
            norm_params += 2 * resolved.ios[i].c_in as u64;
        }
    }
    for info in resolved.projections.iter().flatten() {
        if info.norm {
            norm_params += 2 * info.c_out as u64;
        }
    }

    let total_params = atom_params + coeff_params + dense_params + norm_params + head_params;
    let total_flops =
        layers.iter().map(|l| l.flops).sum::<u64>() + reconstruction_flops;
    Ok(CostReport {
        model: cfg.name.clone(),
        scheme: scheme.kind.cli_name().into(),
        m: scheme.m,
        s: scheme.s,
        input: cfg.input,
        batch,
        convention,
        layers,
        scopes,
        atom_params,
        coeff_params,
        dense_params,
        norm_params,
        head_params,
        dead_params,
        total_params,
        reconstruction_flops,
        total_flops,
    })
}

/// Parameter accounting at the model's native input shape.
pub fn count_params(config: &ModelConfig, scheme: SharingScheme) -> Result<CostReport> {
    analyze(config, scheme, None, 1, FlopConvention::default())
}

/// FLOP accounting for `batch` images of the given shape.
pub fn count_flops(
    config: &ModelConfig,
    scheme: SharingScheme,
    input: [usize; 3],
    batch: usize,
    convention: FlopConvention,
) -> Result<CostReport> {
    analyze(config, scheme, Some(input), batch, convention)
}

fn conv_weight_count(d: &ConvDesc) -> u64 {
    (d.c_out * d.c_in * d.kernel * d.kernel) as u64
}

fn conv_macs(d: &ConvDesc) -> u64 {
    conv_weight_count(d) * (d.out_feat.0 * d.out_feat.1) as u64
}

/// Elements of a scope's storage covered by at least one member's leading
/// c x c' slice (per atom index): the union of origin-anchored rectangles.
fn used_coeff_cells(sp: &crate::sharing::ScopePlan, descs: &[ConvDesc], plan: &SchemePlan) -> u64 {
    let slices: Vec<(usize, usize)> = sp
        .members
        .iter()
        .map(|&di| {
            let b = plan.bindings[di].expect("member is bound");
            let d = &descs[di];
            (d.c_out / b.g, d.c_in / b.g)
        })
        .collect();
    let mut used = 0u64;
    for row in 0..sp.c_max {
        let width = slices
            .iter()
            .filter(|(c, _)| *c > row)
            .map(|(_, cp)| *cp)
            .max()
            .unwrap_or(0);
        used += width as u64;
    }
    used * sp.m as u64
}

impl CostReport {
    /// Machine-readable emission. Columns, in order:
    /// section,label,kind,g,exempt,params,dead_params,flops
    pub fn to_csv(&self) -> String {
        let mut out = String::from("section,label,kind,g,exempt,params,dead_params,flops\n");
        for l in &self.layers {
            out.push_str(&format!(
                "layer,{},{},{},{},{},0,{}\n",
                l.label, l.kind, l.g, l.exempt, l.params, l.flops
            ));
        }
        for s in &self.scopes {
            out.push_str(&format!(
                "scope,{},coeff,1,false,{},{},0\n",
                s.name, s.params, s.dead
            ));
        }
        out.push_str(&format!("summary,norm,norm,1,false,{},0,0\n", self.norm_params));
        out.push_str(&format!(
            "summary,reconstruction,flops,1,false,0,0,{}\n",
            self.reconstruction_flops
        ));
        out.push_str(&format!(
            "total,,,,,{},{},{}\n",
            self.total_params, self.dead_params, self.total_flops
        ));
        out
    }

    /// Human-readable table for the CLI.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "model {}  scheme {}  m {}  s {}  input {}x{}x{}  batch {}\n",
            self.model,
            self.scheme,
            self.m,
            self.s.map_or("-".into(), |s| s.to_string()),
            self.input[0],
            self.input[1],
            self.input[2],
            self.batch
        ));
        out.push_str(&format!(
            "{:<16} {:<10} {:>3} {:>7} {:>14} {:>16}\n",
            "layer", "kind", "g", "exempt", "params", "flops"
        ));
        for l in &self.layers {
            out.push_str(&format!(
                "{:<16} {:<10} {:>3} {:>7} {:>14} {:>16}\n",
                l.label, l.kind, l.g, l.exempt, l.params, l.flops
            ));
        }
        for s in &self.scopes {
            out.push_str(&format!(
                "{:<16} {:<10} {:>3} {:>7} {:>14} {:>16}\n",
                s.name,
                format!("coeff[{}d]", s.dead),
                1,
                false,
                s.params,
                0
            ));
        }
        out.push_str(&format!(
            "norm params {}  head params {}  dead coeff params {}\n",
            self.norm_params, self.head_params, self.dead_params
        ));
        if self.reconstruction_flops > 0 {
            out.push_str(&format!(
                "reconstruction flops per batch {}\n",
                self.reconstruction_flops
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::preset;
    use crate::sharing::SchemeKind;

    fn params_of(model: &str, scheme: SharingScheme) -> u64 {
        count_params(&preset(model).unwrap(), scheme).unwrap().total_params
    }

    fn flops_of(model: &str, scheme: SharingScheme) -> u64 {
        count_flops(
            &preset(model).unwrap(),
            scheme,
            [3, 64, 64],
            100,
            FlopConvention::default(),
        )
        .unwrap()
        .total_flops
    }

    fn net(m: usize) -> SharingScheme {
        SharingScheme::new(SchemeKind::Net, m, None).unwrap()
    }

    fn g_net(m: usize, s: usize) -> SharingScheme {
        SharingScheme::new(SchemeKind::GroupedNet, m, Some(s)).unwrap()
    }

    #[test]
    fn baseline_param_totals() {
        let base = SharingScheme::baseline();
        assert_eq!(params_of("vgg16", base), 14_724_042);
        assert_eq!(params_of("resnet18", base), 11_173_962);
        assert_eq!(params_of("wrn-40-4", base), 8_949_210);
    }

    #[test]
    fn net_scheme_param_totals() {
        assert_eq!(params_of("vgg16", net(8)), 2_111_666);
        assert_eq!(params_of("resnet18", net(8)), 2_285_138);
        assert_eq!(params_of("wrn-40-4", net(16)), 1_109_242);
    }

    #[test]
    fn toy_uniform_decomposed_params() {
        // 4 uniform 16-channel layers, Net, m=8: coeffs 16*16*8, atoms 4*8*9.
        let report = count_params(&preset("toy-4layer").unwrap(), net(8)).unwrap();
        assert_eq!(report.coeff_params, 2048);
        assert_eq!(report.atom_params, 288);
        assert_eq!(report.coeff_params + report.atom_params, 2336);
        assert_eq!(report.dead_params, 0);
    }

    #[test]
    fn totals_equal_sum_of_parts() {
        for scheme in [SharingScheme::baseline(), net(8), g_net(8, 32)] {
            let r = count_params(&preset("resnet18").unwrap(), scheme).unwrap();
            assert_eq!(
                r.total_params,
                r.atom_params + r.coeff_params + r.dense_params + r.norm_params + r.head_params
            );
            let layer_sum: u64 = r.layers.iter().map(|l| l.params).sum();
            let scope_sum: u64 = r.scopes.iter().map(|s| s.params).sum();
            assert_eq!(
                r.total_params,
                layer_sum + scope_sum + r.norm_params
            );
        }
    }

    #[test]
    fn param_count_matches_allocated_storage() {
        for scheme in [SharingScheme::baseline(), net(8), g_net(12, 32)] {
            let cfg = preset("resnet18").unwrap();
            let report = count_params(&cfg, scheme).unwrap();
            let model = crate::model::build_model::<f64>(&cfg, scheme, 1).unwrap();
            assert_eq!(report.total_params, model.store.total_len() as u64);
        }
    }

    #[test]
    fn baseline_flop_totals() {
        assert_eq!(flops_of("vgg16", SharingScheme::baseline()), 125_279_129_600);
        assert_eq!(
            flops_of("resnet18", SharingScheme::baseline()),
            222_167_552_000
        );
    }

    #[test]
    fn grouped_flop_totals() {
        assert_eq!(flops_of("resnet18", g_net(12, 32)), 59_861_278_976);
        assert_eq!(flops_of("resnet18", g_net(12, 64)), 116_497_654_016);
        assert_eq!(flops_of("vgg16", g_net(24, 64)), 49_367_347_712);
    }

    #[test]
    fn halving_group_size_roughly_halves_flops() {
        let s32 = flops_of("resnet18", g_net(12, 32)) as f64;
        let s64 = flops_of("resnet18", g_net(12, 64)) as f64;
        let ratio = s32 / s64;
        assert!(ratio > 0.50 && ratio < 0.54, "ratio {ratio}");
    }

    #[test]
    fn single_layer_hand_flop_count() {
        // One 1->1 channel 3x3 conv on 1x8x8, stride 1, same padding:
        // 9 MACs per output pixel, 64 pixels, 2 FLOPs per MAC = 1152.
        let cfg = ModelConfig {
            schema_version: 1,
            name: "one".into(),
            input: [1, 8, 8],
            classes: 2,
            atom_kernel: 3,
            layers: vec![
                LayerSpec::Conv {
                    out: 1,
                    kernel: 3,
                    stride: 1,
                    padding: None,
                    in_channels: None,
                    bias: false,
                    decomposable: None,
                },
                LayerSpec::Gap,
                LayerSpec::Linear { out: 2 },
            ],
            residuals: vec![],
        };
        let convention = FlopConvention {
            flops_per_mac: 2,
            cost_model: CostModel::FusedReconstruct,
        };
        let r = count_flops(&cfg, SharingScheme::baseline(), [1, 8, 8], 1, convention).unwrap();
        assert_eq!(r.layers[0].flops, 1152);
    }

    #[test]
    fn grouped_scaling_identities() {
        // Coefficients shrink by g^2, atoms grow by g, exactly.
        let single = |c_in: usize, c_out: usize| ModelConfig {
            schema_version: 1,
            name: "single".into(),
            input: [c_in, 8, 8],
            classes: 2,
            atom_kernel: 3,
            layers: vec![
                LayerSpec::Conv {
                    out: c_out,
                    kernel: 3,
                    stride: 1,
                    padding: None,
                    in_channels: None,
                    bias: false,
                    decomposable: None,
                },
                LayerSpec::Gap,
                LayerSpec::Linear { out: 2 },
            ],
            residuals: vec![],
        };
        for (c_in, c_out, s) in [(32, 32, 8), (64, 32, 16), (32, 64, 16)] {
            let cfg = single(c_in, c_out);
            let g = c_in / s;
            let m = 6;
            let base = count_params(
                &cfg,
                SharingScheme::new(SchemeKind::GroupedLayer, m, None).unwrap(),
            )
            .unwrap();
            let grouped = count_params(
                &cfg,
                SharingScheme::new(SchemeKind::GroupedLayer, m, Some(s)).unwrap(),
            )
            .unwrap();
            assert_eq!(grouped.coeff_params, base.coeff_params / (g * g) as u64);
            assert_eq!(grouped.atom_params, base.atom_params * g as u64);
        }
    }

    #[test]
    fn dead_parameters_reported() {
        // Two layers whose slices do not cover the joint maxima: storage is
        // 64x64, union of 64x32 and 32x64 covers 3072 of 4096 cells.
        let cfg = ModelConfig {
            schema_version: 1,
            name: "dead".into(),
            input: [32, 8, 8],
            classes: 2,
            atom_kernel: 3,
            layers: vec![
                LayerSpec::Conv {
                    out: 64,
                    kernel: 3,
                    stride: 1,
                    padding: None,
                    in_channels: None,
                    bias: false,
                    decomposable: None,
                },
                LayerSpec::Conv {
                    out: 32,
                    kernel: 3,
                    stride: 1,
                    padding: None,
                    in_channels: None,
                    bias: false,
                    decomposable: None,
                },
                LayerSpec::Gap,
                LayerSpec::Linear { out: 2 },
            ],
            residuals: vec![],
        };
        let r = count_params(&cfg, net(4)).unwrap();
        assert_eq!(r.coeff_params, 64 * 64 * 4);
        assert_eq!(r.dead_params, (4096 - 3072) * 4);
    }

    #[test]
    fn batch_zero_rejected() {
        let cfg = preset("toy-4layer").unwrap();
        assert!(count_flops(
            &cfg,
            SharingScheme::baseline(),
            [1, 28, 28],
            0,
            FlopConvention::default()
        )
        .is_err());
    }

    #[test]
    fn csv_has_documented_header() {
        let r = count_params(&preset("toy-4layer").unwrap(), net(8)).unwrap();
        let csv = r.to_csv();
        assert!(csv.starts_with("section,label,kind,g,exempt,params,dead_params,flops\n"));
        assert!(csv.lines().last().unwrap().starts_with("total,"));
    }
}
