//! Library quantities against straight-loop transcriptions of their
//! definitions on small random instances.

// the oracles index on purpose
#![allow(clippy::needless_range_loop)]

mod common;

use common::*;
use msvar::bias::{bias_centroids, bias_ms_loss, BiasField};
use msvar::levelset::{levelset_energy, region_means, velocities, LevelSetState};
use msvar::metrics::{clustering_metrics, overlap_metrics};
use msvar::softseg::{fixed_point_step, hard_mask, ms_loss, soft_centroids};
use msvar::supervision::{cross_entropy, IGNORE};
use msvar::{LabelMap, MsConfig, ScalarField, SoftSegmentation};
use rand::Rng;

const TOL: f64 = 1e-9;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL * (1.0 + b.abs())
}

#[test]
fn centroids_and_loss_match_loops() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let (h, w) = (r.random_range(2..=8), r.random_range(2..=8));
        let n = r.random_range(2..=4);
        let x = random_image(&mut r, h, w, 1 + (seed % 3) as usize);
        let z = random_logits(&mut r, n, h, w, 3.0);
        let y = softmax(&fields(&z));
        let seg = SoftSegmentation::from_logits(z.clone()).unwrap();
        for (a, b) in flatten(&fields(seg.memberships())).iter().zip(flatten(&y)) {
            assert!((a - b).abs() < 1e-15);
        }

        let c = soft_centroids(&x, seg.memberships()).unwrap();
        for (a, b) in c.rows().iter().flatten().zip(flatten(&centroids(&x, &y, None))) {
            assert!(close(*a, b));
        }

        let cfg = MsConfig { lambda: 0.03, num_classes: n, ..MsConfig::default() };
        let l = ms_loss(&x, &seg, &cfg).unwrap();
        assert!(close(l.loss, common::ms_loss(&x, &fields(&z), None, 0.03, 0.0, cfg.tv_eps)));
        assert!(close(l.tv_term, 0.03 * y.iter().map(|v| tv(v, h, w, cfg.tv_eps)).sum::<f64>()));
    }
}

#[test]
fn bias_quantities_match_loops() {
    for seed in 0..10 {
        let mut r = rng(50 + seed);
        let (h, w) = (r.random_range(2..=8), r.random_range(2..=8));
        let x = random_image(&mut r, h, w, 1 + (seed % 2) as usize);
        let z = random_logits(&mut r, 3, h, w, 3.0);
        let b = ScalarField::from_fn(h, w, |_, _| r.random_range(0.3..2.0));
        let y = softmax(&fields(&z));
        let seg = SoftSegmentation::from_logits(z.clone()).unwrap();
        let bf = BiasField::new(b.clone(), 0.4).unwrap();

        let c = bias_centroids(&x, seg.memberships(), &bf).unwrap();
        for (u, v) in c.rows().iter().flatten().zip(flatten(&centroids(&x, &y, Some(b.as_slice())))) {
            assert!(close(*u, v));
        }
        let cfg = MsConfig { lambda: 0.02, num_classes: 3, ..MsConfig::default() };
        let l = bias_ms_loss(&x, &seg, &bf, &cfg).unwrap();
        let want = common::ms_loss(&x, &fields(&z), Some(b.as_slice()), 0.02, 0.4, cfg.tv_eps);
        assert!(close(l.loss, want), "{} vs {want}", l.loss);
    }
}

#[test]
fn fixed_point_velocity_matches_loops() {
    for seed in 0..10 {
        let mut r = rng(80 + seed);
        let (h, w) = (r.random_range(2..=8), r.random_range(2..=8));
        let n = r.random_range(2..=4);
        let x = random_image(&mut r, h, w, 1);
        let z = random_logits(&mut r, n, h, w, 2.0);
        let y = softmax(&fields(&z));
        let c = centroids(&x, &y, None);
        let cfg = MsConfig { lambda: 0.1, num_classes: n, step_size: 0.01, ..MsConfig::default() };
        let step = fixed_point_step(&x, &SoftSegmentation::from_logits(z).unwrap(), &cfg).unwrap();
        for k in 0..n {
            let curv = tv_grad(&y[k], h, w, cfg.tv_eps);
            for p in 0..h * w {
                let u = x.as_slice()[p];
                let mut comp = 0.0;
                for (i, ci) in c.iter().enumerate() {
                    let s = (u - ci[0]).powi(2);
                    comp += if i == k { -s } else { s };
                }
                let want = -cfg.lambda * curv[p] + comp;
                assert!(close(step.velocity[k].as_slice()[p], want));
                assert!(close(step.memberships[k].as_slice()[p], y[k][p] + 0.01 * want));
            }
        }
    }
}

#[test]
fn argmax_matches_loop() {
    let mut r = rng(7);
    let z = random_logits(&mut r, 4, 5, 7, 2.0);
    let y = softmax(&fields(&z));
    let mask = hard_mask(&SoftSegmentation::from_logits(z).unwrap());
    for p in 0..35 {
        let mut best = 0;
        for k in 1..4 {
            if y[k][p] > y[best][p] {
                best = k;
            }
        }
        assert_eq!(mask.as_slice()[p] as usize, best);
    }
}

#[test]
fn cross_entropy_matches_loop() {
    for seed in 0..5 {
        let mut r = rng(120 + seed);
        let z = random_logits(&mut r, 3, 6, 5, 4.0);
        let g = LabelMap::from_fn(6, 5, |_, _| if r.random_bool(0.2) { IGNORE } else { r.random_range(0..3) });
        let y = softmax(&fields(&z));
        let (mut s, mut count) = (0.0, 0);
        for p in 0..30 {
            let l = g.as_slice()[p];
            if l != IGNORE {
                s -= y[l as usize][p].max(1e-12).ln();
                count += 1;
            }
        }
        let ce = cross_entropy(&SoftSegmentation::from_logits(z).unwrap(), &g).unwrap();
        assert!(close(ce, s / count as f64));
    }
}

fn random_state(r: &mut rand_chacha::ChaCha8Rng, p: usize, h: usize, w: usize) -> LevelSetState {
    LevelSetState {
        phi: (0..p).map(|_| ScalarField::from_fn(h, w, |_, _| r.random_range(-3.0..3.0))).collect(),
        eps_h: r.random_range(0.5..2.0),
        dt: 0.5,
        lambda: r.random_range(0.0..0.4),
    }
}

#[test]
fn four_class_velocity_matches_loops() {
    for seed in 0..10 {
        let mut r = rng(150 + seed);
        let (h, w) = (r.random_range(3..=8), r.random_range(3..=8));
        let x = random_image(&mut r, h, w, 1);
        let s = random_state(&mut r, 2, h, w);
        let v = velocities(&x, &s).unwrap();
        let (v1, v2) = levelset_velocity_p2(&x, s.phi[0].as_slice(), s.phi[1].as_slice(), s.eps_h, s.lambda);
        for p in 0..h * w {
            assert!(close(v[0].as_slice()[p], v1[p]), "phi1 at {p}");
            assert!(close(v[1].as_slice()[p], v2[p]), "phi2 at {p}");
        }
    }
}

#[test]
fn two_class_velocity_and_means_match_loops() {
    for seed in 0..10 {
        let mut r = rng(180 + seed);
        let (h, w) = (r.random_range(3..=8), r.random_range(3..=8));
        let x = random_image(&mut r, h, w, 1);
        let s = random_state(&mut r, 1, h, w);
        let phi = s.phi[0].as_slice();
        let inside: Vec<f64> = phi.iter().map(|&v| heaviside(v, s.eps_h)).collect();
        let outside: Vec<f64> = inside.iter().map(|v| 1.0 - v).collect();
        let c = centroids(&x, &[outside, inside], None);
        let got = region_means(&x, &s).unwrap();
        assert!(close(got.get(0)[0], c[0][0]) && close(got.get(1)[0], c[1][0]));

        let k = curvature(phi, h, w);
        let v = velocities(&x, &s).unwrap();
        for p in 0..h * w {
            let u = x.as_slice()[p];
            let want = dirac(phi[p], s.eps_h) * (s.lambda * k[p] - (u - c[1][0]).powi(2) + (u - c[0][0]).powi(2));
            assert!(close(v[0].as_slice()[p], want));
        }
    }
}

#[test]
fn four_class_means_and_energy_match_loops() {
    let mut r = rng(210);
    let x = random_image(&mut r, 7, 6, 1);
    let s = random_state(&mut r, 2, 7, 6);
    let h1: Vec<f64> = s.phi[0].as_slice().iter().map(|&v| heaviside(v, s.eps_h)).collect();
    let h2: Vec<f64> = s.phi[1].as_slice().iter().map(|&v| heaviside(v, s.eps_h)).collect();
    let chi: Vec<Vec<f64>> = [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)]
        .iter()
        .map(|&(a, b)| {
            (0..42)
                .map(|p| {
                    let f1 = if a == 1.0 { h1[p] } else { 1.0 - h1[p] };
                    let f2 = if b == 1.0 { h2[p] } else { 1.0 - h2[p] };
                    f1 * f2
                })
                .collect()
        })
        .collect();
    let c = centroids(&x, &chi, None);
    let got = region_means(&x, &s).unwrap();
    for k in 0..4 {
        assert!(close(got.get(k)[0], c[k][0]));
    }
    let e = levelset_energy(&x, &s, 1e-8).unwrap();
    assert!(close(e.energy, loss_with_centroids(&x, &chi, &c, None, s.lambda, 0.0, 1e-8)));
}

#[test]
fn overlap_metrics_match_pixel_counts() {
    for seed in 0..20 {
        let mut r = rng(240 + seed);
        let pred = random_labels(&mut r, 8, 8, 3);
        let gt = LabelMap::from_fn(8, 8, |_, _| if r.random_bool(0.1) { IGNORE } else { r.random_range(0..3) });
        for class in 0..4 {
            let m = overlap_metrics(&pred, &gt, class).unwrap();
            let (iou, dice, precision, recall) = overlap(&pred, &gt, class);
            assert_eq!((m.iou, m.dice, m.precision, m.recall), (iou, dice, precision, recall), "seed {seed} class {class}");
        }
    }
}

#[test]
fn clustering_metrics_match_pairwise_counts() {
    for seed in 0..20 {
        let mut r = rng(270 + seed);
        let k1 = r.random_range(1..=4);
        let k2 = r.random_range(1..=4);
        let pred = random_labels(&mut r, 6, 6, k1);
        let gt = random_labels(&mut r, 6, 6, k2);
        let m = clustering_metrics(&pred, &gt).unwrap();
        assert!((m.pri - rand_index(&pred, &gt)).abs() < 1e-12, "seed {seed}");
        assert!(close(m.vi, variation_of_information(&pred, &gt)), "seed {seed}");
        assert!(close(m.rc, region_covering(&pred, &gt)), "seed {seed}");
    }
}
