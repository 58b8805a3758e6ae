//! Naive `f64` reference implementations used as oracles by the
//! integration tests. Everything here is written as direct loops,
//! independent of the production kernels, so agreement is meaningful.

#![allow(dead_code)]

use ndarray::{Array1, Array3, Array4, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use obiformer_core::ParameterStore;

pub fn rand4(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize), lo: f64, hi: f64) -> Array4<f64> {
    let (b, c, h, w) = dim;
    let data: Vec<f64> = (0..b * c * h * w).map(|_| rng.gen_range(lo..hi)).collect();
    Array4::from_shape_vec(dim, data).unwrap()
}

pub fn rand_param(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> ArrayD<f32> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n)
        .map(|_| rng.gen_range(-scale..scale) as f32)
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub fn to_f64(a: &ArrayD<f32>) -> ArrayD<f64> {
    a.mapv(|v| v as f64)
}

pub fn f32_batch(a: &Array4<f64>) -> obiformer_core::ImageBatch {
    obiformer_core::ImageBatch::new(a.mapv(|v| v as f32))
}

/// Max absolute difference between an f32 production result and the f64
/// oracle.
pub fn max_abs_diff(got: &Array4<f32>, want: &Array4<f64>) -> f64 {
    got.iter()
        .zip(want.iter())
        .map(|(&g, &w)| (g as f64 - w).abs())
        .fold(0.0, f64::max)
}

// ----------------------------------------------------------------------
// Reference kernels (direct loops, f64)
// ----------------------------------------------------------------------

/// Direct-loop grouped convolution.
pub fn ref_conv2d(
    x: &Array4<f64>,
    w: &Array4<f64>,
    bias: Option<&Array1<f64>>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Array4<f64> {
    let (b, c_in, h, wd) = x.dim();
    let (c_out, c_in_g, k, _) = w.dim();
    let c_out_g = c_out / groups;
    assert_eq!(c_in_g * groups, c_in);
    let h_out = (h + 2 * pad - k) / stride + 1;
    let w_out = (wd + 2 * pad - k) / stride + 1;
    let mut y = Array4::<f64>::zeros((b, c_out, h_out, w_out));
    for bi in 0..b {
        for co in 0..c_out {
            let g = co / c_out_g;
            for oi in 0..h_out {
                for oj in 0..w_out {
                    let mut acc = bias.map_or(0.0, |bv| bv[co]);
                    for cg in 0..c_in_g {
                        let ci = g * c_in_g + cg;
                        for ki in 0..k {
                            for kj in 0..k {
                                let ii = (oi * stride + ki) as isize - pad as isize;
                                let jj = (oj * stride + kj) as isize - pad as isize;
                                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < wd {
                                    acc += x[(bi, ci, ii as usize, jj as usize)]
                                        * w[(co, cg, ki, kj)];
                                }
                            }
                        }
                    }
                    y[(bi, co, oi, oj)] = acc;
                }
            }
        }
    }
    y
}

/// Depthwise 3x3, stride 1, pad 1, weights `(c, 1, 3, 3)`.
pub fn ref_dwconv3x3(x: &Array4<f64>, w: &Array4<f64>) -> Array4<f64> {
    let (b, c, h, wd) = x.dim();
    let mut y = Array4::<f64>::zeros((b, c, h, wd));
    for bi in 0..b {
        for ci in 0..c {
            for oi in 0..h {
                for oj in 0..wd {
                    let mut acc = 0.0;
                    for ki in 0..3 {
                        for kj in 0..3 {
                            let ii = oi as isize + ki as isize - 1;
                            let jj = oj as isize + kj as isize - 1;
                            if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < wd {
                                acc += x[(bi, ci, ii as usize, jj as usize)] * w[(ci, 0, ki, kj)];
                            }
                        }
                    }
                    y[(bi, ci, oi, oj)] = acc;
                }
            }
        }
    }
    y
}

/// Transposed 2x2 stride-2 convolution, weights `(c_in, c_out, 2, 2)`.
pub fn ref_convt2x2(x: &Array4<f64>, w: &Array4<f64>) -> Array4<f64> {
    let (b, c_in, h, wd) = x.dim();
    let c_out = w.dim().1;
    let mut y = Array4::<f64>::zeros((b, c_out, 2 * h, 2 * wd));
    for bi in 0..b {
        for ci in 0..c_in {
            for i in 0..h {
                for j in 0..wd {
                    let v = x[(bi, ci, i, j)];
                    for co in 0..c_out {
                        for di in 0..2 {
                            for dj in 0..2 {
                                y[(bi, co, 2 * i + di, 2 * j + dj)] += v * w[(ci, co, di, dj)];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Channel layer-norm with per-channel affine, eps 1e-6.
pub fn ref_layer_norm(x: &Array4<f64>, gamma: &Array1<f64>, beta: &Array1<f64>) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    let mut y = Array4::<f64>::zeros((b, c, h, w));
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let mut mu = 0.0;
                for ci in 0..c {
                    mu += x[(bi, ci, i, j)];
                }
                mu /= c as f64;
                let mut var = 0.0;
                for ci in 0..c {
                    let d = x[(bi, ci, i, j)] - mu;
                    var += d * d;
                }
                var /= c as f64;
                let r = 1.0 / (var + 1e-6).sqrt();
                for ci in 0..c {
                    y[(bi, ci, i, j)] = gamma[ci] * ((x[(bi, ci, i, j)] - mu) * r) + beta[ci];
                }
            }
        }
    }
    y
}

/// Batch-norm with explicit statistics (eps 1e-5).
pub fn ref_batch_norm_with_stats(
    x: &Array4<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
    mean: &Array1<f64>,
    var: &Array1<f64>,
) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    let mut y = Array4::<f64>::zeros((b, c, h, w));
    for ci in 0..c {
        let r = 1.0 / (var[ci] + 1e-5).sqrt();
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    y[(bi, ci, i, j)] = gamma[ci] * ((x[(bi, ci, i, j)] - mean[ci]) * r) + beta[ci];
                }
            }
        }
    }
    y
}

/// Per-channel biased batch statistics over (batch, height, width).
pub fn ref_batch_stats(x: &Array4<f64>) -> (Array1<f64>, Array1<f64>) {
    let (b, c, h, w) = x.dim();
    let n = (b * h * w) as f64;
    let mut mean = Array1::<f64>::zeros(c);
    let mut var = Array1::<f64>::zeros(c);
    for ci in 0..c {
        let mut acc = 0.0;
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    acc += x[(bi, ci, i, j)];
                }
            }
        }
        mean[ci] = acc / n;
        let mut vacc = 0.0;
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let d = x[(bi, ci, i, j)] - mean[ci];
                    vacc += d * d;
                }
            }
        }
        var[ci] = vacc / n;
    }
    (mean, var)
}

pub fn ref_gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

/// The attention oracle: explicit double loop over channel pairs.
/// Given already-projected q, k, v feature maps `(b, c, h, w)` and the
/// temperature, computes `A[i][j] = softmax_j(k_i . q_j / alpha)` and
/// `out_i = sum_j A[i][j] * v_j`.
pub fn ref_channel_attention(
    q: &Array4<f64>,
    k: &Array4<f64>,
    v: &Array4<f64>,
    alpha: f64,
) -> (Array4<f64>, Array3<f64>) {
    let (b, c, h, w) = q.dim();
    let hw = h * w;
    let flat = |m: &Array4<f64>, bi: usize, ci: usize, p: usize| m[(bi, ci, p / w, p % w)];
    let mut out = Array4::<f64>::zeros((b, c, h, w));
    let mut maps = Array3::<f64>::zeros((b, c, c));
    for bi in 0..b {
        for i in 0..c {
            // Row i of the attention map: similarity of key channel i with
            // every query channel j.
            let mut logits = vec![0.0f64; c];
            for (j, l) in logits.iter_mut().enumerate() {
                let mut dot = 0.0;
                for p in 0..hw {
                    dot += flat(k, bi, i, p) * flat(q, bi, j, p);
                }
                *l = dot / alpha;
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..c {
                maps[(bi, i, j)] = exps[j] / sum;
            }
            for p in 0..hw {
                let mut acc = 0.0;
                for j in 0..c {
                    acc += maps[(bi, i, j)] * flat(v, bi, j, p);
                }
                out[(bi, i, p / w, p % w)] = acc;
            }
        }
    }
    (out, maps)
}

// ----------------------------------------------------------------------
// Store builders for isolated blocks
// ----------------------------------------------------------------------

/// Random parameters for one attention block under `prefix`.
pub fn random_csa_store(
    prefix: &str,
    c: usize,
    temperature: f32,
    seed: u64,
) -> ParameterStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    for head in ["q", "k", "v"] {
        store
            .insert_param(
                &format!("{prefix}.{head}_pw.weight"),
                rand_param(&mut rng, &[c, c, 1, 1], 0.5),
            )
            .unwrap();
        store
            .insert_param(
                &format!("{prefix}.{head}_dw.weight"),
                rand_param(&mut rng, &[c, 1, 3, 3], 0.5),
            )
            .unwrap();
    }
    store
        .insert_param(
            &format!("{prefix}.temperature"),
            ArrayD::from_elem(IxDyn(&[1]), temperature),
        )
        .unwrap();
    store
}

/// Fetch a parameter as f64 for the oracle side.
pub fn p64(store: &ParameterStore, name: &str) -> ArrayD<f64> {
    to_f64(store.param(name).unwrap())
}

pub fn p64_4(store: &ParameterStore, name: &str) -> Array4<f64> {
    p64(store, name).into_dimensionality().unwrap()
}

pub fn p64_1(store: &ParameterStore, name: &str) -> Array1<f64> {
    p64(store, name).into_dimensionality().unwrap()
}

/// Fetch a buffer (running statistic) as f64 for the oracle side.
pub fn p64_1_buffer(store: &ParameterStore, name: &str) -> Array1<f64> {
    to_f64(store.buffer(name).unwrap())
        .into_dimensionality()
        .unwrap()
}
