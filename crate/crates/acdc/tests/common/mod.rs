//! Helpers shared by the integration suites: a direct convolution oracle
//! written with plain loops (independent of the im2col path) and central
//! finite-difference gradient checking over a parameter store.

#![allow(dead_code)]

use acdc::autograd::{ParamId, ParamStore};
use acdc::tensor::Tensor;

/// Reference convolution: x [b, cin, h, w] * k [cout, cin, kh, kw] with
/// zero padding, computed element by element.
pub fn naive_conv2d(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (b, cin, h, w) = {
        let s = x.shape();
        (s[0], s[1], s[2], s[3])
    };
    let (cout, kcin, kh, kw) = {
        let s = k.shape();
        (s[0], s[1], s[2], s[3])
    };
    assert_eq!(cin, kcin, "channel mismatch in oracle");
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![0.0; b * cout * oh * ow];
    for bi in 0..b {
        for oc in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((bi * cin + ic) * h + iy as usize) * w + ix as usize;
                                let ki = ((oc * cin + ic) * kh + ky) * kw + kx;
                                acc += xd[xi] * kd[ki];
                            }
                        }
                    }
                    out[((bi * cout + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[b, cout, oh, ow], out).expect("oracle shape is consistent")
}

/// Central finite difference of `f` w.r.t. one element of one parameter.
pub fn finite_diff(
    store: &mut ParamStore<f64>,
    id: ParamId,
    idx: usize,
    eps: f64,
    f: &mut dyn FnMut(&ParamStore<f64>) -> f64,
) -> f64 {
    let orig = store.get(id).data()[idx];
    store.get_mut(id).data_mut()[idx] = orig + eps;
    let fp = f(store);
    store.get_mut(id).data_mut()[idx] = orig - eps;
    let fm = f(store);
    store.get_mut(id).data_mut()[idx] = orig;
    (fp - fm) / (2.0 * eps)
}

/// Relative error robust near zero: absolute difference when both values
/// are tiny, otherwise the difference over the larger magnitude.
pub fn grad_rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-8 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Largest elementwise difference between two equal-shape value slices.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
