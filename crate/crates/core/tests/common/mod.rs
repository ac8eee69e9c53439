//! Independent reference implementations used as test oracles. Everything
//! here works on plain `f64` vectors with loops, sharing no code with the
//! tensor implementation under test.
#![allow(dead_code)]

use cachemt::nn::ParamStore;
use candle_core::DType;

/// Simplex projection by enumerating every support set: for a support `S`,
/// `tau = (sum_S z - 1) / |S|` is valid when `z_i > tau` on `S` and
/// `z_j <= tau` off `S`.
pub fn sparsemax_oracle(z: &[f64]) -> Vec<f64> {
    let n = z.len();
    assert!((1..=16).contains(&n));
    let mut best: Option<(usize, f64)> = None;
    for set in 1u32..(1 << n) {
        let members: Vec<usize> = (0..n).filter(|i| set & (1 << i) != 0).collect();
        let tau = (members.iter().map(|&i| z[i]).sum::<f64>() - 1.0) / members.len() as f64;
        let inside = members.iter().all(|&i| z[i] - tau > -1e-12);
        let outside = (0..n).filter(|i| set & (1 << i) == 0).all(|j| z[j] - tau <= 1e-12);
        if inside && outside && best.is_none_or(|(size, _)| members.len() > size) {
            best = Some((members.len(), tau));
        }
    }
    let (_, tau) = best.expect("a valid support always exists");
    z.iter().map(|v| (v - tau).max(0.0)).collect()
}

/// `C^T H` with explicit loops: `c` is `M x K`, `h` is `M x d`.
pub fn naive_ct_h(c: &[Vec<f64>], h: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (k, d) = (c[0].len(), h[0].len());
    let mut out = vec![vec![0.0; d]; k];
    for (i, row) in c.iter().enumerate() {
        for g in 0..k {
            for j in 0..d {
                out[g][j] += row[g] * h[i][j];
            }
        }
    }
    out
}

pub fn mean_rows(h: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; h[0].len()];
    for row in h {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out.iter().map(|v| v / h.len() as f64).collect()
}

/// A parameter as a row-major matrix (vectors become one row).
pub fn param(store: &ParamStore, name: &str) -> Vec<Vec<f64>> {
    let t = store
        .get(name)
        .unwrap_or_else(|| panic!("missing parameter {name}"))
        .as_tensor()
        .to_dtype(DType::F64)
        .unwrap();
    match t.rank() {
        1 => vec![t.to_vec1::<f64>().unwrap()],
        2 => t.to_vec2::<f64>().unwrap(),
        r => panic!("unexpected rank {r}"),
    }
}

/// `x W + b` with `W` stored as `input x output`.
pub fn linear(store: &ParamStore, name: &str, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let w = param(store, &format!("{name}.weight"));
    let b = param(store, &format!("{name}.bias"))[0].clone();
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|o| b[o] + row.iter().enumerate().map(|(i, v)| v * w[i][o]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn layer_norm(store: &ParamStore, name: &str, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let g = param(store, &format!("{name}.gamma"))[0].clone();
    let b = param(store, &format!("{name}.beta"))[0].clone();
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g[i] + b[i])
                .collect()
        })
        .collect()
}

pub fn add(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn scale(a: &[Vec<f64>], s: f64) -> Vec<Vec<f64>> {
    a.iter().map(|r| r.iter().map(|v| v * s).collect()).collect()
}

/// Multi-head attention of `query` rows over `memory` rows. `allowed(i, j)`
/// says whether query `i` may attend to key `j`.
pub fn attention(
    store: &ParamStore,
    name: &str,
    heads: usize,
    query: &[Vec<f64>],
    memory: &[Vec<f64>],
    allowed: &dyn Fn(usize, usize) -> bool,
) -> Vec<Vec<f64>> {
    let q = linear(store, &format!("{name}.q"), query);
    let k = linear(store, &format!("{name}.k"), memory);
    let v = linear(store, &format!("{name}.v"), memory);
    let d = q[0].len();
    let hd = d / heads;
    let mut ctx = vec![vec![0.0; d]; query.len()];
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..query.len() {
            let keys: Vec<usize> = (0..memory.len()).filter(|&j| allowed(i, j)).collect();
            let scores: Vec<f64> = keys
                .iter()
                .map(|&j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let p = softmax(&scores);
            for (w, &j) in p.iter().zip(&keys) {
                for c in cols.clone() {
                    ctx[i][c] += w * v[j][c];
                }
            }
        }
    }
    linear(store, &format!("{name}.o"), &ctx)
}

pub fn feed_forward(store: &ParamStore, name: &str, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let up = linear(store, &format!("{name}.up"), x);
    let up: Vec<Vec<f64>> = up.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect();
    linear(store, &format!("{name}.down"), &up)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub mod blocking;
pub mod fixtures;
