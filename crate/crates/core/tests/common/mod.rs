//! Straight-loop reference implementations and random instances shared by
//! the integration tests. Nothing here calls into the library's numerics.

#![allow(dead_code)]

use msvar::{Image, LabelMap, ScalarField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS_DEN: f64 = 1e-8;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, ch: usize) -> Image {
    Image::from_fn(h, w, ch, |_, _, _| rng.random_range(0.0..1.0))
}

pub fn random_logits(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, scale: f64) -> Vec<ScalarField> {
    (0..n).map(|_| ScalarField::from_fn(h, w, |_, _| rng.random_range(-scale..scale))).collect()
}

pub fn random_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, k: u8) -> LabelMap {
    LabelMap::from_fn(h, w, |_, _| rng.random_range(0..k))
}

/// Per-pixel softmax, written out with plain exponentials.
pub fn softmax(z: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = z.len();
    let len = z[0].len();
    let mut y = vec![vec![0.0; len]; n];
    for p in 0..len {
        let m = (0..n).map(|k| z[k][p]).fold(f64::MIN, f64::max);
        let s: f64 = (0..n).map(|k| (z[k][p] - m).exp()).sum();
        for k in 0..n {
            y[k][p] = (z[k][p] - m).exp() / s;
        }
    }
    y
}

pub fn fields(v: &[ScalarField]) -> Vec<Vec<f64>> {
    v.iter().map(|f| f.as_slice().to_vec()).collect()
}

/// Bias-weighted class means `sum b x y / (sum b^2 y + eps)`; `b = None`
/// means a unit bias.
pub fn centroids(x: &Image, y: &[Vec<f64>], b: Option<&[f64]>) -> Vec<Vec<f64>> {
    let (h, w) = x.shape();
    let ch = x.channels();
    y.iter()
        .map(|yn| {
            let mut num = vec![0.0; ch];
            let mut den = 0.0;
            for i in 0..h {
                for j in 0..w {
                    let p = i * w + j;
                    let bp = b.map_or(1.0, |b| b[p]);
                    for (c, v) in num.iter_mut().enumerate() {
                        *v += bp * x.get(i, j, c) * yn[p];
                    }
                    den += bp * bp * yn[p];
                }
            }
            num.iter().map(|v| v / (den + EPS_DEN)).collect()
        })
        .collect()
}

/// Smoothed isotropic TV with forward differences, zero flux at the far edges.
pub fn tv(f: &[f64], h: usize, w: usize, eps: f64) -> f64 {
    let at = |i: usize, j: usize| f[i * w + j];
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..w {
            let gx = if j + 1 < w { at(i, j + 1) - at(i, j) } else { 0.0 };
            let gy = if i + 1 < h { at(i + 1, j) - at(i, j) } else { 0.0 };
            total += (gx * gx + gy * gy + eps * eps).sqrt() - eps;
        }
    }
    total
}

/// `sum_n sum_r |x - b c_n|^2 y_n + lambda sum_n TV(y_n) + gamma TV(b)` with
/// the centroids given explicitly.
pub fn loss_with_centroids(
    x: &Image,
    y: &[Vec<f64>],
    c: &[Vec<f64>],
    b: Option<&[f64]>,
    lambda: f64,
    gamma: f64,
    eps: f64,
) -> f64 {
    let (h, w) = x.shape();
    let mut data = 0.0;
    for (n, yn) in y.iter().enumerate() {
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let bp = b.map_or(1.0, |b| b[p]);
                let r: f64 = (0..x.channels()).map(|ch| (x.get(i, j, ch) - bp * c[n][ch]).powi(2)).sum();
                data += r * yn[p];
            }
        }
    }
    let tv_y: f64 = y.iter().map(|yn| tv(yn, h, w, eps)).sum();
    let tv_b = b.map_or(0.0, |b| tv(b, h, w, eps));
    data + lambda * tv_y + gamma * tv_b
}

/// Loss of the logits with centroids recomputed from them.
pub fn ms_loss(x: &Image, z: &[Vec<f64>], b: Option<&[f64]>, lambda: f64, gamma: f64, eps: f64) -> f64 {
    let y = softmax(z);
    let c = centroids(x, &y, b);
    loss_with_centroids(x, &y, &c, b, lambda, gamma, eps)
}

/// Central differences of `f` at `x0`, one coordinate at a time.
pub fn central_diff(x0: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x0.to_vec();
    (0..x0.len())
        .map(|k| {
            x[k] = x0[k] + step;
            let up = f(&x);
            x[k] = x0[k] - step;
            let down = f(&x);
            x[k] = x0[k];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|u| u * u).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|u| u * u).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn flatten(v: &[Vec<f64>]) -> Vec<f64> {
    v.iter().flatten().copied().collect()
}

pub fn split(flat: &[f64], n: usize) -> Vec<Vec<f64>> {
    flat.chunks(flat.len() / n).map(<[f64]>::to_vec).collect()
}

pub fn heaviside(phi: f64, eps: f64) -> f64 {
    0.5 + (phi / eps).atan() / std::f64::consts::PI
}

pub fn dirac(phi: f64, eps: f64) -> f64 {
    eps / std::f64::consts::PI / (eps * eps + phi * phi)
}

/// `div(grad phi / |grad phi|)` from central differences on a replicated
/// border, guard `1e-8` under the 3/2 power.
pub fn curvature(phi: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |i: isize, j: isize| {
        let i = i.max(0).min(h as isize - 1) as usize;
        let j = j.max(0).min(w as isize - 1) as usize;
        phi[i * w + j]
    };
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h as isize {
        for j in 0..w as isize {
            let phx = (at(i, j + 1) - at(i, j - 1)) / 2.0;
            let phy = (at(i + 1, j) - at(i - 1, j)) / 2.0;
            let phxx = at(i, j + 1) + at(i, j - 1) - 2.0 * at(i, j);
            let phyy = at(i + 1, j) + at(i - 1, j) - 2.0 * at(i, j);
            let phxy = (at(i + 1, j + 1) + at(i - 1, j - 1) - at(i + 1, j - 1) - at(i - 1, j + 1)) / 4.0;
            let num = phxx * phy * phy - 2.0 * phx * phy * phxy + phyy * phx * phx;
            out.push(num / (phx * phx + phy * phy + 1e-8).powf(1.5));
        }
    }
    out
}

/// Four-class level-set velocities written the way the two coupled
/// Chan-Vese equations read, with the four means named by sign pattern.
pub fn levelset_velocity_p2(x: &Image, phi1: &[f64], phi2: &[f64], eps: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = x.shape();
    let len = h * w;
    let h1: Vec<f64> = phi1.iter().map(|&v| heaviside(v, eps)).collect();
    let h2: Vec<f64> = phi2.iter().map(|&v| heaviside(v, eps)).collect();
    let mean = |wt: &dyn Fn(usize) -> f64| {
        let (mut s, mut q) = (0.0, 0.0);
        for p in 0..len {
            s += x.as_slice()[p] * wt(p);
            q += wt(p);
        }
        s / (q + EPS_DEN)
    };
    let c11 = mean(&|p| h1[p] * h2[p]);
    let c10 = mean(&|p| h1[p] * (1.0 - h2[p]));
    let c01 = mean(&|p| (1.0 - h1[p]) * h2[p]);
    let c00 = mean(&|p| (1.0 - h1[p]) * (1.0 - h2[p]));
    let k1 = curvature(phi1, h, w);
    let k2 = curvature(phi2, h, w);
    let mut v1 = vec![0.0; len];
    let mut v2 = vec![0.0; len];
    for p in 0..len {
        let u = x.as_slice()[p];
        let sq = |c: f64| (u - c) * (u - c);
        v1[p] = dirac(phi1[p], eps)
            * (lambda * k1[p]
                - ((sq(c11) - sq(c01)) * h2[p] + (sq(c10) - sq(c00)) * (1.0 - h2[p])));
        v2[p] = dirac(phi2[p], eps)
            * (lambda * k2[p]
                - ((sq(c11) - sq(c10)) * h1[p] + (sq(c01) - sq(c00)) * (1.0 - h1[p])));
    }
    (v1, v2)
}

/// Pixel-count overlap statistics of one class.
pub fn overlap(pred: &LabelMap, gt: &LabelMap, class: u8) -> (f64, f64, f64, f64) {
    let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
    for (&a, &b) in pred.as_slice().iter().zip(gt.as_slice()) {
        if a == 255 || b == 255 {
            continue;
        }
        match (a == class, b == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    if tp + fp + fneg == 0 {
        return (1.0, 1.0, 1.0, 1.0);
    }
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    (
        ratio(tp, tp + fp + fneg),
        ratio(2 * tp, 2 * tp + fp + fneg),
        ratio(tp, tp + fp),
        ratio(tp, tp + fneg),
    )
}

/// Rand index by visiting every unordered pixel pair.
pub fn rand_index(pred: &LabelMap, gt: &LabelMap) -> f64 {
    let a = pred.as_slice();
    let b = gt.as_slice();
    let (mut agree, mut total) = (0u64, 0u64);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            total += 1;
            if (a[i] == a[j]) == (b[i] == b[j]) {
                agree += 1;
            }
        }
    }
    agree as f64 / total as f64
}

/// `H(P) + H(G) - 2 I(P; G)` from pixel frequencies, natural log.
pub fn variation_of_information(pred: &LabelMap, gt: &LabelMap) -> f64 {
    let a = pred.as_slice();
    let b = gt.as_slice();
    let n = a.len() as f64;
    let mut joint = std::collections::HashMap::new();
    let mut pa = std::collections::HashMap::new();
    let mut pb = std::collections::HashMap::new();
    for (&u, &v) in a.iter().zip(b) {
        *joint.entry((u, v)).or_insert(0.0) += 1.0 / n;
        *pa.entry(u).or_insert(0.0) += 1.0 / n;
        *pb.entry(v).or_insert(0.0) += 1.0 / n;
    }
    let entropy = |m: &std::collections::HashMap<u8, f64>| -> f64 { m.values().map(|p| -p * p.ln()).sum() };
    let mut mi = 0.0;
    for (&(u, v), &p) in &joint {
        mi += p * (p / (pa[&u] * pb[&v])).ln();
    }
    entropy(&pa) + entropy(&pb) - 2.0 * mi
}

/// Region covering: each ground-truth region takes its best Jaccard overlap
/// with a predicted region, weighted by its size.
pub fn region_covering(pred: &LabelMap, gt: &LabelMap) -> f64 {
    let a = pred.as_slice();
    let b = gt.as_slice();
    let mut total = 0.0;
    for g in 0..=254u8 {
        let size = b.iter().filter(|&&v| v == g).count();
        if size == 0 {
            continue;
        }
        let mut best = 0.0f64;
        for s in 0..=254u8 {
            let inter = a.iter().zip(b).filter(|(&u, &v)| u == s && v == g).count();
            let union = a.iter().zip(b).filter(|(&u, &v)| u == s || v == g).count();
            if a.contains(&s) {
                best = best.max(inter as f64 / union as f64);
            }
        }
        total += size as f64 * best;
    }
    total / b.len() as f64
}

/// Best mean per-class IoU over every assignment of predicted to true
/// classes, along with the worst class IoU under that assignment.
pub fn matched_iou(pred: &LabelMap, gt: &LabelMap, k: u8) -> (f64, f64) {
    let mut perm: Vec<u8> = (0..k).collect();
    let mut best = (0.0, 0.0);
    permutations(&mut perm, 0, &mut |p| {
        let mapped = pred.relabel(|l| p[l as usize]);
        let ious: Vec<f64> = (0..k).map(|c| overlap(&mapped, gt, c).0).collect();
        let mean = ious.iter().sum::<f64>() / k as f64;
        if mean > best.0 {
            best = (mean, ious.iter().copied().fold(1.0, f64::min));
        }
    });
    best
}

fn permutations(v: &mut Vec<u8>, at: usize, visit: &mut dyn FnMut(&[u8])) {
    if at == v.len() {
        visit(v);
        return;
    }
    for i in at..v.len() {
        v.swap(at, i);
        permutations(v, at + 1, visit);
        v.swap(at, i);
    }
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// True when every entry is at most the previous one plus `slack`.
pub fn non_increasing(trace: &[f64], slack: f64) -> bool {
    trace.windows(2).all(|w| w[1] <= w[0] + slack)
}

/// Derivative of [`tv`] at every pixel: each pixel appears in its own
/// forward differences and in those of its left and upper neighbours.
pub fn tv_grad(f: &[f64], h: usize, w: usize, eps: f64) -> Vec<f64> {
    let at = |i: usize, j: usize| f[i * w + j];
    let diffs = |i: usize, j: usize| {
        let gx = if j + 1 < w { at(i, j + 1) - at(i, j) } else { 0.0 };
        let gy = if i + 1 < h { at(i + 1, j) - at(i, j) } else { 0.0 };
        let m = (gx * gx + gy * gy + eps * eps).sqrt();
        (gx, gy, m)
    };
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let (gx, gy, m) = diffs(i, j);
            let mut d = -(gx + gy) / m;
            if j > 0 {
                let (lx, _, lm) = diffs(i, j - 1);
                d += lx / lm;
            }
            if i > 0 {
                let (_, uy, um) = diffs(i - 1, j);
                d += uy / um;
            }
            out[i * w + j] = d;
        }
    }
    out
}
