//! Naive scalar re-implementations of every objective, plus random-input helpers.
//!
//! The oracles loop over indices exactly as the formulas are written and share
//! no code with the library.

#![allow(dead_code)]

use rand::Rng;

pub const EPS: f64 = 1e-12;
pub const PR_CAP: f64 = 1.0 - 1e-6;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn clog(x: f64) -> f64 {
    if x > EPS {
        x.ln()
    } else {
        EPS.ln()
    }
}

/// Pair weight: 1 for the two views of one sample, agreement for same category, else 0.
pub fn weight(p: &[Vec<f64>], cats: &[usize], i: usize, k: usize) -> f64 {
    let n = p.len() / 2;
    if k == (i + n) % (2 * n) {
        1.0
    } else if cats[i] == cats[k] {
        dot(&p[i], &p[k])
    } else {
        0.0
    }
}

/// Triple loop over (anchor i, positive k, negative j).
pub fn pwc(p: &[Vec<f64>], cats: &[usize], tau: f64) -> f64 {
    let m = p.len();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..m {
        for k in 0..m {
            if k == i {
                continue;
            }
            let w = weight(p, cats, i, k);
            if w <= 0.0 {
                continue;
            }
            let mut denom = 0.0;
            for j in 0..m {
                if j != i {
                    denom += (dot(&p[i], &p[j]) / tau).exp();
                }
            }
            total -= w * ((dot(&p[i], &p[k]) / tau).exp() / denom).ln();
            pairs += 1;
        }
    }
    total / pairs.max(1) as f64
}

pub fn mixup_ce(p: &[Vec<f64>], yi: &[usize], yj: &[usize], lam: &[f64]) -> f64 {
    let mut total = 0.0;
    for k in 0..p.len() {
        total += -(lam[k] * clog(p[k][yi[k]]) + (1.0 - lam[k]) * clog(p[k][yj[k]]));
    }
    total / p.len() as f64
}

/// Two weighted contrastive sums anchored at each mixed row, toward component i and toward j.
pub fn mixup_con(pm: &[Vec<f64>], pc: &[Vec<f64>], pairs: &[(usize, usize)], lam: &[f64], cats: &[usize], tau: f64) -> f64 {
    let mut total = 0.0;
    let mut terms = 0usize;
    for k in 0..pm.len() {
        let (ci, cj) = pairs[k];
        let mut denom = 0.0;
        for r in 0..pc.len() {
            denom += (dot(&pm[k], &pc[r]) / tau).exp();
        }
        for r in 0..pc.len() {
            let log_ratio = ((dot(&pm[k], &pc[r]) / tau).exp() / denom).ln();
            let wi = if r == ci {
                1.0
            } else if cats[r] == cats[ci] {
                dot(&pm[k], &pc[r])
            } else {
                0.0
            };
            let wj = if r == cj {
                1.0
            } else if cats[r] == cats[cj] {
                dot(&pm[k], &pc[r])
            } else {
                0.0
            };
            for eff in [lam[k] * wi, (1.0 - lam[k]) * wj] {
                if eff > 0.0 {
                    total -= eff * log_ratio;
                    terms += 1;
                }
            }
        }
    }
    total / terms.max(1) as f64
}

pub fn pr(p: &[Vec<f64>], ema: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for i in 0..p.len() {
        total += (1.0 - dot(&ema[i], &p[i]).min(PR_CAP)).ln();
    }
    total / p.len() as f64
}

fn entropy(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for v in p {
        h -= v * clog(*v);
    }
    h
}

pub fn base(pl: &[Vec<f64>], yl: &[usize], pu: &[Vec<f64>], yu: &[usize]) -> f64 {
    let mut ce_l = 0.0;
    for i in 0..pl.len() {
        ce_l -= clog(pl[i][yl[i]]);
    }
    if !pl.is_empty() {
        ce_l /= pl.len() as f64;
    }
    let mut ce_u = 0.0;
    let mut im = 0.0;
    if !pu.is_empty() {
        let n = pu.len() as f64;
        let c = pu[0].len();
        let mut mean = vec![0.0; c];
        for i in 0..pu.len() {
            ce_u -= clog(pu[i][yu[i]]);
            im += entropy(&pu[i]);
            for col in 0..c {
                mean[col] += pu[i][col] / n;
            }
        }
        ce_u /= n;
        im = im / n - entropy(&mean);
    }
    ce_l + ce_u + im
}

/// Uniform draw on the open simplex, every entry at least `floor`.
pub fn simplex_row<R: Rng + ?Sized>(rng: &mut R, c: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..c).map(|_| -rng.random_range(1e-9f64..1.0).ln()).collect();
    let s: f64 = raw.iter().sum();
    let scale = 1.0 - floor * c as f64;
    raw.iter().map(|v| floor + scale * v / s).collect()
}

pub fn simplex_rows<R: Rng + ?Sized>(rng: &mut R, b: usize, c: usize, floor: f64) -> Vec<Vec<f64>> {
    (0..b).map(|_| simplex_row(rng, c, floor)).collect()
}

/// Rows built from proptest weights in `(0, 1]`.
pub fn normalise(raw: &[f64], c: usize) -> Vec<Vec<f64>> {
    raw.chunks(c)
        .map(|r| {
            let s: f64 = r.iter().sum();
            r.iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn flat(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

/// Central differences of `f` at `x`, step `h`.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut buf = x.to_vec();
    (0..x.len())
        .map(|i| {
            buf[i] = x[i] + h;
            let up = f(&buf);
            buf[i] = x[i] - h;
            let down = f(&buf);
            buf[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a - n| / max(|a|, |n|, floor)` over coordinates.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_FLOOR: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-4;

pub mod fixtures;
