//! Forward and reverse-mode passes of one transformer block.
//!
//! A block only materializes outputs for a chosen set of rows. Keys and values
//! cover the whole sequence; queries, the FFN and both layer norms run on the
//! selected rows only. The last block selects the view rows.

use ndarray::{s, Array1, Array2, Axis, Zip};

use super::params::LayerParams;

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Row-wise layer norm; returns (output, normalized input, 1/std per row).
fn layer_norm(
    x: &Array2<f64>,
    g: &Array1<f64>,
    b: &Array1<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv = Array1::zeros(x.nrows());
    for (mut row, inv_std) in xhat.rows_mut().into_iter().zip(inv.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *inv_std = 1.0 / (var + LN_EPS).sqrt();
        row *= *inv_std;
    }
    let out = &xhat * g + b;
    (out, xhat, inv)
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    xhat: &Array2<f64>,
    inv: &Array1<f64>,
    g: &Array1<f64>,
    dg: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    *dg += &(dy * xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let dxhat = dy * g;
    let mut dx = Array2::zeros(dy.raw_dim());
    Zip::from(dx.rows_mut())
        .and(dxhat.rows())
        .and(xhat.rows())
        .and(inv)
        .for_each(|mut out, gh, xh, &inv_std| {
            let mean_g = gh.sum() / d;
            let mean_gx = gh.dot(&xh) / d;
            Zip::from(&mut out)
                .and(&gh)
                .and(&xh)
                .for_each(|o, &a, &x| *o = inv_std * (a - mean_g - x * mean_gx));
        });
    dx
}

fn add_bias(mut m: Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    m += b;
    m
}

/// Saved activations for the reverse pass of one block.
#[derive(Debug, Clone)]
pub(crate) struct BlockCache {
    rows: Vec<usize>,
    x: Array2<f64>,
    xr: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    h1: Array2<f64>,
    ln1_xhat: Array2<f64>,
    ln1_inv: Array1<f64>,
    u: Array2<f64>,
    act: Array2<f64>,
    ln2_xhat: Array2<f64>,
    ln2_inv: Array1<f64>,
}

/// Runs a block over `x` (L×d), producing outputs for `rows` (R×d).
/// `key_mask[j]` is false for positions that may not be attended to.
pub(crate) fn block_forward(
    p: &LayerParams,
    n_heads: usize,
    x: &Array2<f64>,
    rows: &[usize],
    key_mask: &[bool],
) -> (Array2<f64>, BlockCache) {
    let d = x.ncols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let xr = x.select(Axis(0), rows);

    let q = add_bias(xr.dot(&p.wq), &p.bq);
    let k = add_bias(x.dot(&p.wk), &p.bk);
    let v = add_bias(x.dot(&p.wv), &p.bv);

    let mut ctx = Array2::zeros((rows.len(), d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut sc = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        for mut row in sc.rows_mut() {
            softmax_masked(&mut row, key_mask);
        }
        ctx.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
        probs.push(sc);
    }
    let attn_out = add_bias(ctx.dot(&p.wo), &p.bo);
    let r1 = &xr + &attn_out;
    let (h1, ln1_xhat, ln1_inv) = layer_norm(&r1, &p.ln1_g, &p.ln1_b);

    let u = add_bias(h1.dot(&p.w1), &p.b1);
    let act = u.mapv(gelu);
    let ffn = add_bias(act.dot(&p.w2), &p.b2);
    let r2 = &h1 + &ffn;
    let (out, ln2_xhat, ln2_inv) = layer_norm(&r2, &p.ln2_g, &p.ln2_b);

    let cache = BlockCache {
        rows: rows.to_vec(),
        x: x.clone(),
        xr,
        q,
        k,
        v,
        probs,
        ctx,
        h1,
        ln1_xhat,
        ln1_inv,
        u,
        act,
        ln2_xhat,
        ln2_inv,
    };
    (out, cache)
}

fn softmax_masked(row: &mut ndarray::ArrayViewMut1<f64>, key_mask: &[bool]) {
    let mut max = f64::NEG_INFINITY;
    for (x, &keep) in row.iter().zip(key_mask) {
        if keep && *x > max {
            max = *x;
        }
    }
    let mut sum = 0.0;
    for (x, &keep) in row.iter_mut().zip(key_mask) {
        *x = if keep { (*x - max).exp() } else { 0.0 };
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Reverse pass: accumulates parameter gradients into `grad` and returns dL/dx (L×d).
pub(crate) fn block_backward(
    p: &LayerParams,
    n_heads: usize,
    cache: &BlockCache,
    d_out: &Array2<f64>,
    grad: &mut LayerParams,
) -> Array2<f64> {
    let d = cache.x.ncols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let d_r2 = layer_norm_backward(
        d_out,
        &cache.ln2_xhat,
        &cache.ln2_inv,
        &p.ln2_g,
        &mut grad.ln2_g,
        &mut grad.ln2_b,
    );
    // FFN
    grad.w2 += &cache.act.t().dot(&d_r2);
    grad.b2 += &d_r2.sum_axis(Axis(0));
    let mut d_u = d_r2.dot(&p.w2.t());
    Zip::from(&mut d_u)
        .and(&cache.u)
        .for_each(|g, &u| *g *= gelu_grad(u));
    grad.w1 += &cache.h1.t().dot(&d_u);
    grad.b1 += &d_u.sum_axis(Axis(0));
    let d_h1 = d_r2 + d_u.dot(&p.w1.t());

    let d_r1 = layer_norm_backward(
        &d_h1,
        &cache.ln1_xhat,
        &cache.ln1_inv,
        &p.ln1_g,
        &mut grad.ln1_g,
        &mut grad.ln1_b,
    );
    // attention output projection
    grad.wo += &cache.ctx.t().dot(&d_r1);
    grad.bo += &d_r1.sum_axis(Axis(0));
    let d_ctx = d_r1.dot(&p.wo.t());

    let mut d_q = Array2::zeros(cache.q.raw_dim());
    let mut d_k = Array2::zeros(cache.k.raw_dim());
    let mut d_v = Array2::zeros(cache.v.raw_dim());
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let probs = &cache.probs[h];
        let d_ctx_h = d_ctx.slice(cols);
        d_v.slice_mut(cols).assign(&probs.t().dot(&d_ctx_h));
        let d_p = d_ctx_h.dot(&cache.v.slice(cols).t());
        let mut d_s = Array2::zeros(probs.raw_dim());
        Zip::from(d_s.rows_mut())
            .and(probs.rows())
            .and(d_p.rows())
            .for_each(|mut ds, pr, dp| {
                let inner = pr.dot(&dp);
                Zip::from(&mut ds)
                    .and(&pr)
                    .and(&dp)
                    .for_each(|o, &pv, &g| *o = pv * (g - inner) * scale);
            });
        d_q.slice_mut(cols).assign(&d_s.dot(&cache.k.slice(cols)));
        d_k.slice_mut(cols).assign(&d_s.t().dot(&cache.q.slice(cols)));
    }

    grad.wq += &cache.xr.t().dot(&d_q);
    grad.bq += &d_q.sum_axis(Axis(0));
    grad.wk += &cache.x.t().dot(&d_k);
    grad.bk += &d_k.sum_axis(Axis(0));
    grad.wv += &cache.x.t().dot(&d_v);
    grad.bv += &d_v.sum_axis(Axis(0));

    let d_xr = d_r1 + d_q.dot(&p.wq.t());
    let mut d_x = d_k.dot(&p.wk.t()) + d_v.dot(&p.wv.t());
    for (i, &r) in cache.rows.iter().enumerate() {
        let mut dst = d_x.row_mut(r);
        dst += &d_xr.row(i);
    }
    d_x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0, -1.2, -0.1, 0.0, 0.4, 1.7, 4.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn masked_softmax_ignores_masked_keys() {
        let mut row = ndarray::arr1(&[1.0, 50.0, 1.0]);
        softmax_masked(&mut row.view_mut(), &[true, false, true]);
        assert_eq!(row[1], 0.0);
        assert!((row[0] - 0.5).abs() < 1e-15);
    }
}
