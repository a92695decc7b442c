//! Helpers shared by the integration tests: finite differences, scalar
//! reference implementations and small fixtures.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vismem::params::ParamSet;
use vismem::Tensor;

pub const FD_EPS: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// Gradient comparison: `|a - n| / max(|a|, |n|)`, with differences below
/// 1e-9 in magnitude treated as exact (both sides are numerically zero).
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff < 1e-9 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs())
}

/// Central-difference gradient of `loss` with respect to entry `index` of
/// the `slot`-th named tensor.
pub fn numeric_grad<P: ParamSet<f64> + Clone>(
    params: &P,
    slot: usize,
    index: usize,
    loss: &impl Fn(&P) -> f64,
) -> f64 {
    let mut plus = params.clone();
    plus.named_mut()[slot].1.data_mut()[index] += FD_EPS;
    let mut minus = params.clone();
    minus.named_mut()[slot].1.data_mut()[index] -= FD_EPS;
    (loss(&plus) - loss(&minus)) / (2.0 * FD_EPS)
}

/// Worst relative error per named tensor over every entry.
pub fn check_all<P: ParamSet<f64> + Clone>(
    params: &P,
    analytic: &P,
    loss: impl Fn(&P) -> f64,
) -> Vec<(String, f64)> {
    let grads = analytic.named();
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    names
        .iter()
        .enumerate()
        .map(|(slot, name)| {
            let (gname, g) = &grads[slot];
            assert_eq!(gname, name, "gradient set out of order");
            let worst = (0..g.len())
                .map(|i| rel_err(g.data()[i], numeric_grad(params, slot, i, &loss)))
                .fold(0.0, f64::max);
            (name.clone(), worst)
        })
        .collect()
}

/// Gradient of `loss` with respect to every entry of a plain tensor.
pub fn numeric_input_grad(x: &Tensor<f64>, loss: impl Fn(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut out = x.zeros_like();
    for i in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[i] += FD_EPS;
        let mut m = x.clone();
        m.data_mut()[i] -= FD_EPS;
        out.data_mut()[i] = (loss(&p) - loss(&m)) / (2.0 * FD_EPS);
    }
    out
}

pub fn max_rel(a: &Tensor<f64>, n: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), n.shape());
    a.data()
        .iter()
        .zip(n.data())
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}

/// `sum(w * t)`: a linear probe whose gradient is `w`.
pub fn probe(t: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    t.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

/// Plain nested-loop cross-correlation with zero padding.
pub fn conv_oracle(
    x: &[f64],
    (cin, h, w): (usize, usize, usize),
    k: &[f64],
    (cout, ks): (usize, usize),
    bias: Option<&[f64]>,
    pad: usize,
    stride: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - ks) / stride + 1;
    let wo = (w + 2 * pad - ks) / stride + 1;
    let mut out = vec![0.0; cout * ho * wo];
    for o in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = bias.map_or(0.0, |b| b[o]);
                for c in 0..cin {
                    for ky in 0..ks {
                        for kx in 0..ks {
                            let y = (oy * stride + ky) as i64 - pad as i64;
                            let xx = (ox * stride + kx) as i64 - pad as i64;
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                s += x[(c * h + y as usize) * w + xx as usize]
                                    * k[((o * cin + c) * ks + ky) * ks + kx];
                            }
                        }
                    }
                }
                out[(o * ho + oy) * wo + ox] = s;
            }
        }
    }
    (out, ho, wo)
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Foreground pixels with a background 4-neighbour, by direct search.
pub fn brute_boundary(mask: &[bool], h: usize, w: usize) -> Vec<(i64, i64)> {
    let get = |y: i64, x: i64| y >= 0 && x >= 0 && y < h as i64 && x < w as i64 && mask[y as usize * w + x as usize];
    let mut out = Vec::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            // out-of-image neighbours count as background
            if get(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| !get(y + dy, x + dx)) {
                out.push((y, x));
            }
        }
    }
    out
}

/// Contour F-measure by exhaustive pairwise matching.
pub fn brute_boundary_f(p: &[bool], g: &[bool], h: usize, w: usize, radius: usize) -> f64 {
    let (bp, bg) = (brute_boundary(p, h, w), brute_boundary(g, h, w));
    if bp.is_empty() && bg.is_empty() {
        return 1.0;
    }
    if bp.is_empty() || bg.is_empty() {
        return 0.0;
    }
    let r2 = (radius * radius) as i64;
    let frac = |a: &[(i64, i64)], b: &[(i64, i64)]| {
        let hit = a
            .iter()
            .filter(|(y, x)| b.iter().any(|(v, u)| (y - v) * (y - v) + (x - u) * (x - u) <= r2))
            .count();
        hit as f64 / a.len() as f64
    };
    let (prec, rec) = (frac(&bp, &bg), frac(&bg, &bp));
    if prec + rec == 0.0 {
        0.0
    } else {
        2.0 * prec * rec / (prec + rec)
    }
}
