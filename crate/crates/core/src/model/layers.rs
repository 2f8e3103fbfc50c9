//! Numeric building blocks of the decoder: layer normalization, tanh-GELU,
//! causal multi-head self-attention, and the feed-forward block — each as a
//! forward function returning a cache plus a backward function consuming it.
//!
//! Shapes follow one convention: activations are `T × d` (rows are token
//! positions), weights are `in × out`, and `X·W` maps forward.

use ndarray::{Array1, Array2, Axis};

/// Inside-the-sqrt stabilizer. Small enough that normalized rows meet the
/// mean-0 / variance-1 check at 1e-5 for any realistically-scaled input.
pub const LN_EPS: f64 = 1e-8;

// ---------------------------------------------------------------------------
// Layer normalization
// ---------------------------------------------------------------------------

pub struct LnCache {
    /// Normalized rows before the affine map (γ, β).
    pub x_hat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

/// Row-wise layer norm: `y = γ ⊙ (x − μ)/√(σ² + ε) + β`.
pub fn layer_norm(x: &Array2<f64>, gamma: &Array1<f64>, beta: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut x_hat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (i, mut row) in x_hat.rows_mut().into_iter().enumerate() {
        let mu = row.sum() / d;
        row.mapv_inplace(|v| v - mu);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        let is = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * is);
        inv_std[i] = is;
    }
    let y = &x_hat * &gamma.view().insert_axis(Axis(0)) + &beta.view().insert_axis(Axis(0));
    (y, LnCache { x_hat, inv_std })
}

pub struct LnGrads {
    pub d_x: Array2<f64>,
    pub d_gamma: Array1<f64>,
    pub d_beta: Array1<f64>,
}

pub fn layer_norm_backward(d_y: &Array2<f64>, gamma: &Array1<f64>, cache: &LnCache) -> LnGrads {
    let d = d_y.ncols() as f64;
    let d_gamma = (d_y * &cache.x_hat).sum_axis(Axis(0));
    let d_beta = d_y.sum_axis(Axis(0));
    let d_xhat = d_y * &gamma.view().insert_axis(Axis(0));
    let mut d_x = Array2::zeros(d_y.raw_dim());
    for i in 0..d_y.nrows() {
        let dxh = d_xhat.row(i);
        let xh = cache.x_hat.row(i);
        let mean_dxh = dxh.sum() / d;
        let mean_dxh_xh = dxh.dot(&xh) / d;
        let is = cache.inv_std[i];
        for j in 0..d_y.ncols() {
            d_x[[i, j]] = is * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
    LnGrads { d_x, d_gamma, d_beta }
}

// ---------------------------------------------------------------------------
// GELU (tanh form — smooth everywhere, so finite differences behave)
// ---------------------------------------------------------------------------

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_A: f64 = 0.044715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

// ---------------------------------------------------------------------------
// Causal multi-head self-attention
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MhaParams {
    /// d_model × 3·d_model, columns ordered [Q | K | V].
    pub w_qkv: Array2<f64>,
    /// d_model × d_model output projection.
    pub w_o: Array2<f64>,
}

pub struct MhaCache {
    pub x: Array2<f64>,
    pub qkv: Array2<f64>,
    /// Per-head post-softmax attention maps (T × T, strictly causal rows).
    pub attn: Vec<Array2<f64>>,
    /// Concatenated head outputs before the output projection.
    pub z: Array2<f64>,
}

/// Standard causal self-attention: position i attends to positions ≤ i.
pub fn mha_forward(x: &Array2<f64>, p: &MhaParams, n_heads: usize) -> (Array2<f64>, MhaCache) {
    let (t, d) = x.dim();
    debug_assert_eq!(d % n_heads, 0);
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qkv = x.dot(&p.w_qkv); // T × 3d
    let mut z = Array2::zeros((t, d));
    let mut attn = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let lo = h * dh;
        let q = qkv.slice(ndarray::s![.., lo..lo + dh]);
        let k = qkv.slice(ndarray::s![.., d + lo..d + lo + dh]);
        let v = qkv.slice(ndarray::s![.., 2 * d + lo..2 * d + lo + dh]);
        let mut a = Array2::zeros((t, t));
        for i in 0..t {
            // Softmax over positions 0..=i with max subtraction.
            let mut max = f64::NEG_INFINITY;
            for j in 0..=i {
                let s = q.row(i).dot(&k.row(j)) * scale;
                a[[i, j]] = s;
                max = max.max(s);
            }
            let mut zsum = 0.0;
            for j in 0..=i {
                let e = (a[[i, j]] - max).exp();
                a[[i, j]] = e;
                zsum += e;
            }
            for j in 0..=i {
                a[[i, j]] /= zsum;
            }
        }
        let zh = a.dot(&v); // T × dh
        z.slice_mut(ndarray::s![.., lo..lo + dh]).assign(&zh);
        attn.push(a);
    }
    let out = z.dot(&p.w_o);
    (
        out,
        MhaCache {
            x: x.clone(),
            qkv,
            attn,
            z,
        },
    )
}

pub struct MhaGrads {
    pub d_x: Array2<f64>,
    pub d_w_qkv: Array2<f64>,
    pub d_w_o: Array2<f64>,
}

pub fn mha_backward(d_out: &Array2<f64>, p: &MhaParams, cache: &MhaCache, n_heads: usize) -> MhaGrads {
    let (t, d) = cache.x.dim();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let d_w_o = cache.z.t().dot(d_out);
    let d_z = d_out.dot(&p.w_o.t());
    let mut d_qkv = Array2::zeros((t, 3 * d));
    for h in 0..n_heads {
        let lo = h * dh;
        let q = cache.qkv.slice(ndarray::s![.., lo..lo + dh]);
        let k = cache.qkv.slice(ndarray::s![.., d + lo..d + lo + dh]);
        let v = cache.qkv.slice(ndarray::s![.., 2 * d + lo..2 * d + lo + dh]);
        let a = &cache.attn[h];
        let d_zh = d_z.slice(ndarray::s![.., lo..lo + dh]);

        let d_a = d_zh.dot(&v.t()); // T × T (upper triangle irrelevant)
        let d_vh = a.t().dot(&d_zh); // T × dh
        // Row-wise softmax backward, restricted to the causal prefix.
        let mut d_s = Array2::zeros((t, t));
        for i in 0..t {
            let mut mix = 0.0;
            for j in 0..=i {
                mix += a[[i, j]] * d_a[[i, j]];
            }
            for j in 0..=i {
                d_s[[i, j]] = a[[i, j]] * (d_a[[i, j]] - mix);
            }
        }
        let d_qh = d_s.dot(&k) * scale;
        let d_kh = d_s.t().dot(&q) * scale;
        d_qkv.slice_mut(ndarray::s![.., lo..lo + dh]).assign(&d_qh);
        d_qkv
            .slice_mut(ndarray::s![.., d + lo..d + lo + dh])
            .assign(&d_kh);
        d_qkv
            .slice_mut(ndarray::s![.., 2 * d + lo..2 * d + lo + dh])
            .assign(&d_vh);
    }
    let d_w_qkv = cache.x.t().dot(&d_qkv);
    let d_x = d_qkv.dot(&p.w_qkv.t());
    MhaGrads {
        d_x,
        d_w_qkv,
        d_w_o,
    }
}

// ---------------------------------------------------------------------------
// Feed-forward block
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FfnParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

pub struct FfnCache {
    pub x: Array2<f64>,
    pub pre_act: Array2<f64>,
    pub post_act: Array2<f64>,
}

pub fn ffn_forward(x: &Array2<f64>, p: &FfnParams) -> (Array2<f64>, FfnCache) {
    let pre = x.dot(&p.w1) + &p.b1.view().insert_axis(Axis(0));
    let post = pre.mapv(gelu);
    let y = post.dot(&p.w2) + &p.b2.view().insert_axis(Axis(0));
    (
        y,
        FfnCache {
            x: x.clone(),
            pre_act: pre,
            post_act: post,
        },
    )
}

pub struct FfnGrads {
    pub d_x: Array2<f64>,
    pub d_w1: Array2<f64>,
    pub d_b1: Array1<f64>,
    pub d_w2: Array2<f64>,
    pub d_b2: Array1<f64>,
}

pub fn ffn_backward(d_y: &Array2<f64>, p: &FfnParams, cache: &FfnCache) -> FfnGrads {
    let d_post = d_y.dot(&p.w2.t());
    let d_w2 = cache.post_act.t().dot(d_y);
    let d_b2 = d_y.sum_axis(Axis(0));
    let d_pre = &d_post * &cache.pre_act.mapv(gelu_prime);
    let d_w1 = cache.x.t().dot(&d_pre);
    let d_b1 = d_pre.sum_axis(Axis(0));
    let d_x = d_pre.dot(&p.w1.t());
    FfnGrads {
        d_x,
        d_w1,
        d_b1,
        d_w2,
        d_b2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn2(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-scale..scale))
    }

    fn randn1(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Array1<f64> {
        Array1::from_shape_fn(n, |_| rng.random_range(-scale..scale))
    }

    /// max |a−n| / max(|a|,|n|,1) over all coordinates of two gradients.
    fn rel_err(analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
    }

    #[test]
    fn layer_norm_rows_have_zero_mean_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn2(&mut rng, 5, 16, 3.0);
        let (_, cache) = layer_norm(&x, &Array1::ones(16), &Array1::zeros(16));
        for row in cache.x_hat.rows() {
            let mu = row.sum() / 16.0;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 16.0;
            assert!(mu.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn2(&mut rng, 3, 8, 1.0);
        let gamma = randn1(&mut rng, 8, 1.0);
        let beta = randn1(&mut rng, 8, 1.0);
        let w = randn2(&mut rng, 3, 8, 1.0); // loss = Σ w ⊙ y
        let loss = |x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>| {
            let (y, _) = layer_norm(x, g, b);
            (&y * &w).sum()
        };
        let (_, cache) = layer_norm(&x, &gamma, &beta);
        let grads = layer_norm_backward(&w, &gamma, &cache);
        let eps = 1e-6;
        for (i, j) in [(0, 0), (1, 3), (2, 7)] {
            let mut xp = x.clone();
            xp[[i, j]] += eps;
            let mut xm = x.clone();
            xm[[i, j]] -= eps;
            let n = (loss(&xp, &gamma, &beta) - loss(&xm, &gamma, &beta)) / (2.0 * eps);
            assert!(rel_err(grads.d_x[[i, j]], n) < 1e-7);
        }
        for j in [0, 4, 7] {
            let mut gp = gamma.clone();
            gp[j] += eps;
            let mut gm = gamma.clone();
            gm[j] -= eps;
            let n = (loss(&x, &gp, &beta) - loss(&x, &gm, &beta)) / (2.0 * eps);
            assert!(rel_err(grads.d_gamma[j], n) < 1e-7);
            let mut bp = beta.clone();
            bp[j] += eps;
            let mut bm = beta.clone();
            bm[j] -= eps;
            let n = (loss(&x, &gamma, &bp) - loss(&x, &gamma, &bm)) / (2.0 * eps);
            assert!(rel_err(grads.d_beta[j], n) < 1e-7);
        }
    }

    #[test]
    fn gelu_values_and_derivative() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(3.0) - 2.9959).abs() < 1e-3); // ≈ x for large x
        assert!(gelu(-3.0).abs() < 0.004);
        let eps = 1e-6;
        for x in [-2.5, -0.7, 0.0, 0.3, 1.9] {
            let n = (gelu(x + eps) - gelu(x - eps)) / (2.0 * eps);
            assert!(rel_err(gelu_prime(x), n) < 1e-8, "x={x}");
        }
    }

    #[test]
    fn attention_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 8;
        let p = MhaParams {
            w_qkv: randn2(&mut rng, d, 3 * d, 0.3),
            w_o: randn2(&mut rng, d, d, 0.3),
        };
        let x = randn2(&mut rng, 5, d, 1.0);
        let (y, _) = mha_forward(&x, &p, 2);
        let mut x2 = x.clone();
        x2[[4, 0]] += 10.0; // perturb the last position only
        let (y2, _) = mha_forward(&x2, &p, 2);
        for i in 0..4 {
            for j in 0..d {
                assert_eq!(y[[i, j]], y2[[i, j]], "position {i} saw the future");
            }
        }
        assert!(y.row(4) != y2.row(4));
    }

    #[test]
    fn mha_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (t, d) = (4, 6);
        let p = MhaParams {
            w_qkv: randn2(&mut rng, d, 3 * d, 0.4),
            w_o: randn2(&mut rng, d, d, 0.4),
        };
        let x = randn2(&mut rng, t, d, 1.0);
        let w = randn2(&mut rng, t, d, 1.0);
        let loss = |x: &Array2<f64>, p: &MhaParams| {
            let (y, _) = mha_forward(x, p, 3);
            (&y * &w).sum()
        };
        let (_, cache) = mha_forward(&x, &p, 3);
        let grads = mha_backward(&w, &p, &cache, 3);
        let eps = 1e-6;
        for (i, j) in [(0, 0), (2, 3), (3, 5)] {
            let mut xp = x.clone();
            xp[[i, j]] += eps;
            let mut xm = x.clone();
            xm[[i, j]] -= eps;
            let n = (loss(&xp, &p) - loss(&xm, &p)) / (2.0 * eps);
            assert!(rel_err(grads.d_x[[i, j]], n) < 1e-7, "d_x[{i},{j}]");
        }
        for (i, j) in [(0, 0), (3, 8), (5, 17)] {
            let mut pp = MhaParams {
                w_qkv: p.w_qkv.clone(),
                w_o: p.w_o.clone(),
            };
            pp.w_qkv[[i, j]] += eps;
            let plus = loss(&x, &pp);
            pp.w_qkv[[i, j]] -= 2.0 * eps;
            let minus = loss(&x, &pp);
            let n = (plus - minus) / (2.0 * eps);
            assert!(rel_err(grads.d_w_qkv[[i, j]], n) < 1e-7, "d_w_qkv[{i},{j}]");
        }
        for (i, j) in [(0, 0), (2, 4), (5, 5)] {
            let mut pp = MhaParams {
                w_qkv: p.w_qkv.clone(),
                w_o: p.w_o.clone(),
            };
            pp.w_o[[i, j]] += eps;
            let plus = loss(&x, &pp);
            pp.w_o[[i, j]] -= 2.0 * eps;
            let minus = loss(&x, &pp);
            let n = (plus - minus) / (2.0 * eps);
            assert!(rel_err(grads.d_w_o[[i, j]], n) < 1e-7, "d_w_o[{i},{j}]");
        }
    }

    #[test]
    fn ffn_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = FfnParams {
            w1: randn2(&mut rng, 6, 12, 0.5),
            b1: randn1(&mut rng, 12, 0.5),
            w2: randn2(&mut rng, 12, 6, 0.5),
            b2: randn1(&mut rng, 6, 0.5),
        };
        let x = randn2(&mut rng, 3, 6, 1.0);
        let w = randn2(&mut rng, 3, 6, 1.0);
        let loss = |x: &Array2<f64>, p: &FfnParams| {
            let (y, _) = ffn_forward(x, p);
            (&y * &w).sum()
        };
        let (_, cache) = ffn_forward(&x, &p);
        let grads = ffn_backward(&w, &p, &cache);
        let eps = 1e-6;
        let mut pp = FfnParams {
            w1: p.w1.clone(),
            b1: p.b1.clone(),
            w2: p.w2.clone(),
            b2: p.b2.clone(),
        };
        for (i, j) in [(0, 0), (3, 7), (5, 11)] {
            pp.w1[[i, j] ] += eps;
            let plus = loss(&x, &pp);
            pp.w1[[i, j]] -= 2.0 * eps;
            let minus = loss(&x, &pp);
            pp.w1[[i, j]] += eps;
            let n = (plus - minus) / (2.0 * eps);
            assert!(rel_err(grads.d_w1[[i, j]], n) < 1e-7);
        }
        for j in [0, 5, 11] {
            pp.b1[j] += eps;
            let plus = loss(&x, &pp);
            pp.b1[j] -= 2.0 * eps;
            let minus = loss(&x, &pp);
            pp.b1[j] += eps;
            let n = (plus - minus) / (2.0 * eps);
            assert!(rel_err(grads.d_b1[j], n) < 1e-7);
        }
        for (i, j) in [(0, 0), (11, 5)] {
            pp.w2[[i, j]] += eps;
            let plus = loss(&x, &pp);
            pp.w2[[i, j]] -= 2.0 * eps;
            let minus = loss(&x, &pp);
            pp.w2[[i, j]] += eps;
            let n = (plus - minus) / (2.0 * eps);
            assert!(rel_err(grads.d_w2[[i, j]], n) < 1e-7);
        }
        for (i, j) in [(0, 0), (2, 5)] {
            let mut xp = x.clone();
            xp[[i, j]] += eps;
            let mut xm = x.clone();
            xm[[i, j]] -= eps;
            let n = (loss(&xp, &p) - loss(&xm, &p)) / (2.0 * eps);
            assert!(rel_err(grads.d_x[[i, j]], n) < 1e-7);
        }
    }
}
