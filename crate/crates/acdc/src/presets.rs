//! Built-in model configurations.
//!
//! Construction helpers build the layer lists programmatically so the
//! residual indices stay consistent; `preset` resolves a name from the CLI.

use crate::error::{Error, Result};
use crate::model::{LayerSpec, ModelConfig, ResidualSpec, SCHEMA_VERSION};

pub const PRESET_NAMES: &[&str] = &["toy-4layer", "vgg16", "resnet18", "wrn-40-4", "wrn-28-10"];

/// Looks up a built-in configuration by name.
pub fn preset(name: &str) -> Result<ModelConfig> {
    match name {
        "toy-4layer" => Ok(toy_4layer()),
        "vgg16" => Ok(vgg16()),
        "resnet18" => Ok(resnet18()),
        "wrn-40-4" => Ok(wide_resnet(40, 4)),
        "wrn-28-10" => Ok(wide_resnet(28, 10)),
        other => Err(Error::config(format!(
            "unknown model `{other}` (built-ins: {})",
            PRESET_NAMES.join(", ")
        ))),
    }
}

fn conv(out: usize, stride: usize, decomposable: Option<bool>) -> LayerSpec {
    LayerSpec::Conv {
        out,
        kernel: 3,
        stride,
        padding: None,
        in_channels: None,
        bias: false,
        decomposable,
    }
}

/// Four decomposed 16-channel convolutions behind a fixed stem; small enough
/// to train on a laptop yet wide enough for cross-layer alignment studies.
pub fn toy_4layer() -> ModelConfig {
    let layers = vec![
        conv(16, 1, Some(false)), // stem stays dense
        LayerSpec::Relu,
        conv(16, 1, None),
        LayerSpec::Relu,
        LayerSpec::Pool { size: 2 },
        conv(16, 1, None),
        LayerSpec::Relu,
        LayerSpec::Pool { size: 2 },
        conv(16, 1, None),
        LayerSpec::Relu,
        conv(16, 1, None),
        LayerSpec::Relu,
        LayerSpec::Gap,
        LayerSpec::Linear { out: 10 },
    ];
    ModelConfig {
        schema_version: SCHEMA_VERSION,
        name: "toy-4layer".into(),
        input: [1, 28, 28],
        classes: 10,
        atom_kernel: 3,
        layers,
        residuals: vec![],
    }
}

/// VGG-16 for 32x32 inputs: five conv stages with batch norm, global average
/// pooling instead of the original dense stack.
pub fn vgg16() -> ModelConfig {
    let stages: &[(usize, usize)] = &[(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];
    let mut layers = Vec::new();
    for &(width, reps) in stages {
        for _ in 0..reps {
            layers.push(conv(width, 1, None));
            layers.push(LayerSpec::Norm);
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Pool { size: 2 });
    }
    layers.push(LayerSpec::Gap);
    layers.push(LayerSpec::Linear { out: 10 });
    ModelConfig {
        schema_version: SCHEMA_VERSION,
        name: "vgg16".into(),
        input: [3, 32, 32],
        classes: 10,
        atom_kernel: 3,
        layers,
        residuals: vec![],
    }
}

/// ResNet-18 for 32x32 inputs: post-activation basic blocks, projection
/// shortcuts with normalization on the downsampling blocks.
pub fn resnet18() -> ModelConfig {
    let mut layers = vec![conv(64, 1, None), LayerSpec::Norm, LayerSpec::Relu];
    let mut residuals = Vec::new();
    let groups: &[(usize, usize, usize)] = &[(64, 2, 1), (128, 2, 2), (256, 2, 2), (512, 2, 2)];
    for &(width, blocks, first_stride) in groups {
        for b in 0..blocks {
            let stride = if b == 0 { first_stride } else { 1 };
            let from = layers.len();
            layers.push(conv(width, stride, None));
            layers.push(LayerSpec::Norm);
            layers.push(LayerSpec::Relu);
            layers.push(conv(width, 1, None));
            layers.push(LayerSpec::Norm);
            residuals.push(ResidualSpec {
                from,
                to: layers.len(),
                norm: true,
            });
            layers.push(LayerSpec::Relu);
        }
    }
    layers.push(LayerSpec::Gap);
    layers.push(LayerSpec::Linear { out: 10 });
    ModelConfig {
        schema_version: SCHEMA_VERSION,
        name: "resnet18".into(),
        input: [3, 32, 32],
        classes: 10,
        atom_kernel: 3,
        layers,
        residuals,
    }
}

/// Wide residual network WRN-depth-k for 32x32 inputs: pre-activation
/// blocks, bare projection shortcuts, a final norm before pooling.
pub fn wide_resnet(depth: usize, widen: usize) -> ModelConfig {
    assert!(depth >= 10 && (depth - 4) % 6 == 0, "depth must be 6n+4");
    let n = (depth - 4) / 6;
    let widths = [16 * widen, 32 * widen, 64 * widen];
    let mut layers = vec![conv(16, 1, None)];
    let mut residuals = Vec::new();
    for (g, &width) in widths.iter().enumerate() {
        for b in 0..n {
            let stride = if b == 0 && g > 0 { 2 } else { 1 };
            let from = layers.len();
            layers.push(LayerSpec::Norm);
            layers.push(LayerSpec::Relu);
            layers.push(conv(width, stride, None));
            layers.push(LayerSpec::Norm);
            layers.push(LayerSpec::Relu);
            layers.push(conv(width, 1, None));
            residuals.push(ResidualSpec {
                from,
                to: layers.len(),
                norm: false,
            });
        }
    }
    layers.push(LayerSpec::Norm);
    layers.push(LayerSpec::Relu);
    layers.push(LayerSpec::Gap);
    layers.push(LayerSpec::Linear { out: 10 });
    ModelConfig {
        schema_version: SCHEMA_VERSION,
        name: format!("wrn-{depth}-{widen}"),
        input: [3, 32, 32],
        classes: 10,
        atom_kernel: 3,
        layers,
        residuals,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_presets_resolve() {
        for name in PRESET_NAMES {
            let cfg = preset(name).unwrap();
            cfg.resolve()
                .unwrap_or_else(|e| panic!("{name} failed to resolve: {e}"));
        }
    }

    #[test]
    fn toy_has_four_decomposed_layers() {
        let r = toy_4layer().resolve().unwrap();
        let decomposed = r.descs.iter().filter(|d| d.decomposable).count();
        assert_eq!(decomposed, 4);
        assert_eq!(r.descs.len(), 5);
    }

    #[test]
    fn resnet_block_count() {
        let cfg = resnet18();
        assert_eq!(cfg.residuals.len(), 8);
        let r = cfg.resolve().unwrap();
        // 1 stem + 16 block convs + 3 downsampling projections.
        assert_eq!(r.descs.len(), 20);
        assert_eq!(r.projections.iter().flatten().count(), 3);
    }

    #[test]
    fn wrn_40_4_shape() {
        let cfg = wide_resnet(40, 4);
        assert_eq!(cfg.residuals.len(), 18);
        let r = cfg.resolve().unwrap();
        // 1 stem + 36 block convs + 3 projections.
        assert_eq!(r.descs.len(), 40);
    }

    #[test]
    fn unknown_preset_is_config_error() {
        assert!(preset("vgg99").is_err());
    }
}
