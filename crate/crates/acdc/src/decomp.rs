//! Atom-coefficient decomposition: kernel reconstruction, the two-sub-layer
//! forward path, and atom-drop regularization.
//!
//! A decomposed layer keeps m spatial atoms D[m, lh, lw] and combines them
//! with coefficients A[c, c', m] into a full kernel K[c, c', lh, lw], either
//! explicitly (fused path) or implicitly by convolving with the atoms first
//! and mixing channels second (sub-layer path). Both paths compute the same
//! function and the same parameter gradients up to rounding.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rand::Rng;

/// Atom-drop hyperparameters. `p` is the probability of zeroing each atom
/// during training; survivors are rescaled by 1/(1-p).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AtomDropConfig {
    pub p: f64,
    pub seed: u64,
}

impl AtomDropConfig {
    pub fn new(p: f64, seed: u64) -> Result<Self> {
        validate_drop_rate(p)?;
        Ok(AtomDropConfig { p, seed })
    }
}

/// Rejects drop rates for which the survivor scale 1/(1-p) is not finite.
pub fn validate_drop_rate(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!(
            "atom drop rate must lie in [0, 1), got {p}"
        )));
    }
    Ok(())
}

/// Draws one keep/drop decision per atom. Kept atoms get weight 1/(1-p),
/// dropped atoms 0. With p = 0 the mask is all ones.
pub fn atom_drop_mask<T: Scalar>(
    m: usize,
    p: f64,
    rng: &mut (impl Rng + ?Sized),
) -> Result<Vec<T>> {
    validate_drop_rate(p)?;
    if p == 0.0 {
        return Ok(vec![T::ONE; m]);
    }
    let keep = T::from_f64(1.0 / (1.0 - p));
    Ok((0..m)
        .map(|_| {
            if rng.gen::<f64>() < p {
                T::ZERO
            } else {
                keep
            }
        })
        .collect())
}

/// Applies atom-drop to an atoms value [m, lh, lw] on the tape. In eval mode
/// (or with p = 0) the input node is returned unchanged.
pub fn atom_drop<T: Scalar>(
    tape: &mut Tape<T>,
    atoms: Var,
    p: f64,
    training: bool,
    rng: &mut (impl Rng + ?Sized),
) -> Result<Var> {
    validate_drop_rate(p)?;
    let shape = tape.value(atoms).shape().to_vec();
    let (&[m, lh, lw],) = (&shape[..],) else {
        return Err(Error::config(format!(
            "atoms must be [m, lh, lw], got {shape:?}"
        )));
    };
    if !training || p == 0.0 {
        return Ok(atoms);
    }
    let per_atom = atom_drop_mask::<T>(m, p, rng)?;
    let mut mask = Vec::with_capacity(m * lh * lw);
    for v in per_atom {
        mask.extend(std::iter::repeat(v).take(lh * lw));
    }
    tape.mul_mask(atoms, mask)
}

/// Checks that an atoms node is [m, lh, lw] and a coefficients node is
/// [c, c', m] with matching m; returns (c, c', m, lh, lw).
fn check_factors<T: Scalar>(
    tape: &Tape<T>,
    atoms: Var,
    coeffs: Var,
) -> Result<(usize, usize, usize, usize, usize)> {
    let da = tape.value(atoms).shape().to_vec();
    let dc = tape.value(coeffs).shape().to_vec();
    let (&[m, lh, lw], &[c, cp, cm]) = (&da[..], &dc[..]) else {
        return Err(Error::config(format!(
            "expected atoms [m, lh, lw] and coefficients [c, c', m], got {da:?} and {dc:?}"
        )));
    };
    if m != cm {
        return Err(Error::config(format!(
            "atom count mismatch: atoms hold {m}, coefficients expect {cm}"
        )));
    }
    Ok((c, cp, m, lh, lw))
}

/// Reconstructs the fused kernel K[c, c', lh, lw] with
/// K[i,j,:,:] = sum_k coeffs[i,j,k] * atoms[k,:,:].
pub fn reconstruct_kernel<T: Scalar>(
    tape: &mut Tape<T>,
    atoms: Var,
    coeffs: Var,
) -> Result<Var> {
    let (c, cp, m, lh, lw) = check_factors(tape, atoms, coeffs)?;
    let a2 = tape.reshape(coeffs, &[c * cp, m])?;
    let d2 = tape.reshape(atoms, &[m, lh * lw])?;
    let k2 = tape.matmul(a2, d2)?;
    tape.reshape(k2, &[c, cp, lh, lw])
}

/// Atom sub-layer Z = D * X: convolves every input channel with every atom,
/// producing c'·m channels ordered input-channel-major, atom-minor.
pub fn atom_conv<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    atoms: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let xs = tape.value(x).shape().to_vec();
    let (b, cp, h, w, batched) = match xs[..] {
        [c, h, w] => (1, c, h, w, false),
        [b, c, h, w] => (b, c, h, w, true),
        _ => {
            return Err(Error::config(format!(
                "atom_conv expects an image tensor, got shape {xs:?}"
            )))
        }
    };
    let da = tape.value(atoms).shape().to_vec();
    let (&[m, lh, lw],) = (&da[..],) else {
        return Err(Error::config(format!(
            "atoms must be [m, lh, lw], got {da:?}"
        )));
    };
    // Each channel becomes its own batch element so one single-input-channel
    // convolution with the m atoms covers all of them.
    let flat = tape.reshape(x, &[b * cp, 1, h, w])?;
    let atoms4 = tape.reshape(atoms, &[m, 1, lh, lw])?;
    let z = tape.conv2d(flat, atoms4, stride, padding)?;
    let zs = tape.value(z).shape().to_vec();
    let (oh, ow) = (zs[2], zs[3]);
    if batched {
        tape.reshape(z, &[b, cp * m, oh, ow])
    } else {
        tape.reshape(z, &[cp * m, oh, ow])
    }
}

/// Decomposed convolution via the two sub-layers: Z = D * X, then Y = A·Z.
/// Equals conv2d with the reconstructed kernel up to rounding.
pub fn forward_decomposed<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    atoms: Var,
    coeffs: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let (z, y) = forward_decomposed_tapped(tape, x, atoms, coeffs, stride, padding)?;
    let _ = z;
    Ok(y)
}

/// As [`forward_decomposed`] but also returns the atom sub-layer output Z,
/// which the cross-layer analysis taps.
pub fn forward_decomposed_tapped<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    atoms: Var,
    coeffs: Var,
    stride: usize,
    padding: usize,
) -> Result<(Var, Var)> {
    let (c, cp, m, _, _) = check_factors(tape, atoms, coeffs)?;
    let z = atom_conv(tape, x, atoms, stride, padding)?;
    let a2 = tape.reshape(coeffs, &[c, cp * m])?;
    let y = tape.channel_combine(a2, z)?;
    Ok((z, y))
}

/// Decomposed convolution via explicit kernel reconstruction.
pub fn forward_fused<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    atoms: Var,
    coeffs: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let k = reconstruct_kernel(tape, atoms, coeffs)?;
    tape.conv2d(x, k, stride, padding)
}
