//! Class activation maps from every decomposed layer at once.
//!
//! Under the net scheme every decomposed layer's outputs live in the same
//! shared coefficient basis, so the classifier weight vector of a class can
//! be applied not just to the last feature map (classic CAM) but to each
//! earlier map as well, after truncating the weight vector to the channels
//! that layer actually produces.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::sharing::SchemeKind;
use crate::tensor::Tensor;
use std::path::Path;

/// One layer's class activation map at native and input resolution.
#[derive(Debug, Clone)]
pub struct LayerCam {
    pub layer: usize,
    pub label: String,
    /// True when the class weight vector was truncated to this layer's
    /// leading channels.
    pub truncated: bool,
    pub h: usize,
    pub w: usize,
    /// Weighted channel sum before clipping and normalization.
    pub raw: Vec<f64>,
    /// Clipped (when enabled) and min-max normalized to [0, 1].
    pub norm: Vec<f64>,
    /// Normalized map resampled to input resolution, nearest neighbor.
    pub upsampled: Vec<f64>,
}

/// Maps for one (image, class) query, ordered by layer index.
#[derive(Debug, Clone)]
pub struct CamStack {
    pub class_id: usize,
    pub input_h: usize,
    pub input_w: usize,
    pub layers: Vec<LayerCam>,
}

fn normalize(raw: &[f64], clip_negative: bool) -> Vec<f64> {
    let vals: Vec<f64> = if clip_negative {
        raw.iter().map(|v| v.max(0.0)).collect()
    } else {
        raw.to_vec()
    };
    let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max - min <= 0.0 {
        return vec![0.0; vals.len()];
    }
    vals.iter().map(|v| (v - min) / (max - min)).collect()
}

fn upsample_nearest(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dh * dw);
    for r in 0..dh {
        let sr = r * sh / dh;
        for c in 0..dw {
            let sc = c * sw / dw;
            out.push(src[sr * sw + sc]);
        }
    }
    out
}

/// Computes the class activation map of `class_id` at every decomposed
/// layer of a net-scheme model for a single [c, h, w] image.
pub fn cam_all_layers<T: Scalar>(
    model: &mut Model<T>,
    image: &Tensor<T>,
    class_id: usize,
    clip_negative: bool,
) -> Result<CamStack> {
    if model.scheme.kind != SchemeKind::Net {
        return Err(Error::config(
            "all-layer maps need the net scheme (one shared ungrouped coefficient scope)",
        ));
    }
    if class_id >= model.config.classes {
        return Err(Error::config(format!(
            "class {class_id} out of range for {} classes",
            model.config.classes
        )));
    }
    let expect = model.config.input;
    if image.shape() != expect {
        return Err(Error::config(format!(
            "image shape {:?} does not match model input {:?}",
            image.shape(),
            expect
        )));
    }

    let head_id = model
        .store
        .find("head/w")
        .ok_or_else(|| Error::config("model has no classifier head"))?;
    let head = model.store.get(head_id).clone();
    let feat = head.shape()[1];
    let class_row: Vec<f64> = head.data()[class_id * feat..(class_id + 1) * feat]
        .iter()
        .map(|v| v.to_f64())
        .collect();

    let batched = Tensor::from_vec(
        &[1, expect[0], expect[1], expect[2]],
        image.data().to_vec(),
    )?;
    let mut tape = crate::autograd::Tape::new();
    let x = tape.constant(batched);
    let out = model.forward(&mut tape, x, false, None)?;

    let mut layers = Vec::new();
    for tap in &out.taps {
        let y = tape.value(tap.y);
        let (&[_, c, oh, ow],) = (&y.shape()[..],) else {
            return Err(Error::numeric("unexpected feature map shape"));
        };
        let used = c.min(feat);
        let yd = y.data();
        let mut raw = vec![0.0f64; oh * ow];
        for ch in 0..used {
            let w = class_row[ch];
            let plane = &yd[ch * oh * ow..(ch + 1) * oh * ow];
            for (acc, v) in raw.iter_mut().zip(plane) {
                *acc += w * v.to_f64();
            }
        }
        let norm = normalize(&raw, clip_negative);
        let upsampled = upsample_nearest(&norm, oh, ow, expect[1], expect[2]);
        layers.push(LayerCam {
            layer: tap.layer,
            label: model.resolved.descs[tap.desc].label.clone(),
            truncated: c != feat,
            h: oh,
            w: ow,
            raw,
            norm,
            upsampled,
        });
    }

    Ok(CamStack {
        class_id,
        input_h: expect[1],
        input_w: expect[2],
        layers,
    })
}

/// Fraction of (clipped) map mass in the left half of the image.
pub fn left_mass_fraction(map: &[f64], h: usize, w: usize) -> f64 {
    let mut left = 0.0;
    let mut total = 0.0;
    for r in 0..h {
        for c in 0..w {
            let v = map[r * w + c].max(0.0);
            total += v;
            if c < w / 2 {
                left += v;
            }
        }
    }
    if total == 0.0 {
        0.5
    } else {
        left / total
    }
}

/// Writes an 8-bit binary PGM (P5); values are clamped to [0, 1] and scaled
/// to 0..=255.
pub fn write_pgm(path: &Path, w: usize, h: usize, data: &[f64]) -> Result<()> {
    if data.len() != w * h {
        return Err(Error::config(format!(
            "PGM payload has {} values for {w}x{h}",
            data.len()
        )));
    }
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(
        data.iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Input image followed by every per-layer map at input resolution, side by
/// side with a 2-pixel separator. Returns (width, height, pixels).
pub fn montage(stack: &CamStack, input: &[f64]) -> (usize, usize, Vec<f64>) {
    const SEP: usize = 2;
    let (h, w) = (stack.input_h, stack.input_w);
    let panels: Vec<&[f64]> = std::iter::once(input)
        .chain(stack.layers.iter().map(|l| l.upsampled.as_slice()))
        .collect();
    let total_w = panels.len() * w + (panels.len() - 1) * SEP;
    let mut out = vec![1.0f64; h * total_w];
    for (p, panel) in panels.iter().enumerate() {
        let x0 = p * (w + SEP);
        for r in 0..h {
            out[r * total_w + x0..r * total_w + x0 + w].copy_from_slice(&panel[r * w..(r + 1) * w]);
        }
    }
    (total_w, h, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;
    use crate::presets::preset;
    use crate::sharing::{SchemeKind, SharingScheme};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn net_toy(seed: u64) -> Model<f64> {
        let config = preset("toy-4layer").unwrap();
        build_model(
            &config,
            SharingScheme {
                kind: SchemeKind::Net,
                m: 4,
                s: None,
            },
            seed,
        )
        .unwrap()
    }

    fn random_image(seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let data = (0..28 * 28).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(&[1, 28, 28], data).unwrap()
    }

    #[test]
    fn last_layer_matches_classic_cam() {
        let mut model = net_toy(3);
        let image = random_image(5);
        let stack = cam_all_layers(&mut model, &image, 2, true).unwrap();
        assert_eq!(stack.layers.len(), 4);

        // Classic CAM recomputed by hand from the last feature map.
        let batched = Tensor::from_vec(&[1, 1, 28, 28], image.data().to_vec()).unwrap();
        let mut tape = crate::autograd::Tape::new();
        let x = tape.constant(batched);
        let out = model.forward(&mut tape, x, false, None).unwrap();
        let tap = out.taps.last().unwrap();
        let y = tape.value(tap.y);
        let (c, oh, ow) = (y.shape()[1], y.shape()[2], y.shape()[3]);
        let head_id = model.store.find("head/w").unwrap();
        let head = model.store.get(head_id);
        let feat = head.shape()[1];
        let last = stack.layers.last().unwrap();
        assert!(!last.truncated);
        for p in 0..oh * ow {
            let mut expect = 0.0;
            for ch in 0..c {
                expect += head.data()[2 * feat + ch] * y.data()[ch * oh * ow + p];
            }
            assert!((expect - last.raw[p]).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_input_gives_zero_raw_maps() {
        let mut model = net_toy(4);
        let image = Tensor::from_vec(&[1, 28, 28], vec![0.0; 28 * 28]).unwrap();
        let stack = cam_all_layers(&mut model, &image, 0, true).unwrap();
        for layer in &stack.layers {
            assert!(layer.raw.iter().all(|&v| v.abs() < 1e-12));
            assert!(layer.norm.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn wrong_scheme_and_class_rejected() {
        let config = preset("toy-4layer").unwrap();
        let mut grouped = build_model::<f64>(
            &config,
            SharingScheme {
                kind: SchemeKind::GroupedNet,
                m: 4,
                s: Some(8),
            },
            1,
        )
        .unwrap();
        let image = random_image(1);
        assert!(cam_all_layers(&mut grouped, &image, 0, true).is_err());

        let mut net = net_toy(1);
        let err = cam_all_layers(&mut net, &image, 10, true).unwrap_err();
        assert!(err.to_string().contains("class 10"), "{err}");
    }

    #[test]
    fn maps_are_normalized_and_upsampled() {
        let mut model = net_toy(9);
        let image = random_image(2);
        let stack = cam_all_layers(&mut model, &image, 1, true).unwrap();
        for layer in &stack.layers {
            assert_eq!(layer.upsampled.len(), 28 * 28);
            let max = layer.norm.iter().cloned().fold(f64::MIN, f64::max);
            let min = layer.norm.iter().cloned().fold(f64::MAX, f64::min);
            assert!(min >= 0.0 && max <= 1.0 + 1e-12);
        }
        // Layers 2 deep run at 14x14; nearest upsampling repeats 2x2 blocks.
        let l = stack.layers.iter().find(|l| l.h == 14).unwrap();
        assert_eq!(l.upsampled[0], l.norm[0]);
        assert_eq!(l.upsampled[1], l.norm[0]);
        assert_eq!(l.upsampled[28], l.norm[0]);
    }

    #[test]
    fn pgm_golden_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        write_pgm(&path, 2, 2, &[0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let mut expect = b"P5\n2 2\n255\n".to_vec();
        expect.extend([0u8, 85, 170, 255]);
        assert_eq!(bytes, expect);
    }

    #[test]
    fn montage_width_counts_panels_and_separators() {
        let mut model = net_toy(6);
        let image = random_image(3);
        let stack = cam_all_layers(&mut model, &image, 0, true).unwrap();
        let input: Vec<f64> = image.data().to_vec();
        let (w, h, pixels) = montage(&stack, &input);
        assert_eq!(h, 28);
        assert_eq!(w, 5 * 28 + 4 * 2);
        assert_eq!(pixels.len(), w * h);
        assert_eq!(pixels[0], input[0]);
    }
}
