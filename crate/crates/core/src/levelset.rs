//! Multiphase Chan-Vese level sets.
//!
//! `p` level functions encode `2^p` classes through the signs of the
//! functions. Class index is `sum_k [phi_k > 0] * 2^(p-1-k)`, so with two
//! functions the indices 0..4 correspond to the sign patterns 00, 01, 10, 11
//! with the first digit belonging to `phi_1`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, SolveError, Traced};
use crate::grid::{self, Image, ScalarField};
use crate::softseg::{centroid_stats, data_term, Centroids, Termination};
use crate::supervision::LabelMap;

/// Guard inside `(phi_x^2 + phi_y^2 + guard)^(3/2)` of the curvature.
pub const CURVATURE_GUARD: f64 = 1e-8;

/// Largest admissible `dt * lambda`.
pub const MAX_DT_LAMBDA: f64 = 0.25;

/// Time-step halvings tried before a step is declared non-descending.
pub const MAX_DT_HALVINGS: usize = 10;

/// Default number of consecutive accepted steps with unchanged labels
/// required to stop. The smoothed energy keeps creeping down after the
/// partition has settled, as the level functions grow away from zero, so it
/// makes a poor stop signal.
pub const STALL_STEPS: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct LevelSetState {
    pub phi: Vec<ScalarField>,
    /// Heaviside smoothing width.
    pub eps_h: f64,
    pub dt: f64,
    pub lambda: f64,
}

impl LevelSetState {
    pub fn validate(&self) -> Result<()> {
        let p = self.phi.len();
        if !(1..=2).contains(&p) {
            return Err(Error::param(format!("need 1 or 2 level functions, got {p}")));
        }
        if self.phi.iter().any(|f| f.shape() != self.phi[0].shape()) {
            return Err(Error::input("level functions differ in shape"));
        }
        check_params(self.eps_h, self.dt, self.lambda)
    }

    pub fn num_phases(&self) -> usize {
        self.phi.len()
    }

    pub fn num_classes(&self) -> usize {
        1 << self.phi.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.phi[0].shape()
    }

    /// Hard labels from the signs of the level functions.
    pub fn labels(&self) -> LabelMap {
        let (h, w) = self.shape();
        let p = self.phi.len();
        let labels = (0..h * w)
            .map(|r| {
                self.phi
                    .iter()
                    .enumerate()
                    .map(|(k, f)| u8::from(f.as_slice()[r] > 0.0) << (p - 1 - k))
                    .sum()
            })
            .collect();
        LabelMap::new(h, w, labels).expect("shape is consistent")
    }
}

fn check_params(eps_h: f64, dt: f64, lambda: f64) -> Result<()> {
    if !(eps_h > 0.0 && eps_h.is_finite()) {
        return Err(Error::param(format!("Heaviside eps must be > 0, got {eps_h}")));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::param(format!("dt must be > 0, got {dt}")));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::param(format!("lambda must be >= 0, got {lambda}")));
    }
    if dt * lambda > MAX_DT_LAMBDA {
        return Err(Error::param(format!(
            "dt * lambda = {} exceeds the stability bound {MAX_DT_LAMBDA}",
            dt * lambda
        )));
    }
    Ok(())
}

#[inline]
pub fn heaviside(phi: f64, eps: f64) -> f64 {
    0.5 * (1.0 + (2.0 / PI) * (phi / eps).atan())
}

/// Derivative of [`heaviside`].
#[inline]
pub fn dirac(phi: f64, eps: f64) -> f64 {
    eps / (PI * (eps * eps + phi * phi))
}

pub fn heaviside_eps(phi: &ScalarField, eps_h: f64) -> Result<ScalarField> {
    check_params(eps_h, 1.0, 0.0)?;
    Ok(phi.map(|v| heaviside(v, eps_h)))
}

pub fn delta_eps(phi: &ScalarField, eps_h: f64) -> Result<ScalarField> {
    check_params(eps_h, 1.0, 0.0)?;
    Ok(phi.map(|v| dirac(v, eps_h)))
}

/// Smoothed characteristic functions of all `2^p` classes.
pub fn memberships(state: &LevelSetState) -> Vec<ScalarField> {
    let (h, w) = state.shape();
    let p = state.phi.len();
    let hv: Vec<Vec<f64>> = state
        .phi
        .iter()
        .map(|f| f.as_slice().iter().map(|&v| heaviside(v, state.eps_h)).collect())
        .collect();
    (0..1usize << p)
        .map(|class| {
            let data = (0..h * w)
                .map(|r| {
                    (0..p)
                        .map(|k| {
                            let bit = (class >> (p - 1 - k)) & 1;
                            if bit == 1 {
                                hv[k][r]
                            } else {
                                1.0 - hv[k][r]
                            }
                        })
                        .product()
                })
                .collect();
            ScalarField::from_raw(h, w, data)
        })
        .collect()
}

fn check_image(x: &Image, state: &LevelSetState) -> Result<()> {
    state.validate()?;
    if x.shape() != state.shape() {
        return Err(Error::input(format!("image is {:?}, level functions are {:?}", x.shape(), state.shape())));
    }
    Ok(())
}

/// Class means over the smoothed Heaviside regions.
pub fn region_means(x: &Image, state: &LevelSetState) -> Result<Centroids> {
    check_image(x, state)?;
    Ok(centroid_stats(x, &memberships(state), None).centroids)
}

/// `div(grad phi / |grad phi|)` from central differences, replicate boundary.
pub fn curvature(phi: &ScalarField) -> ScalarField {
    let (h, w) = phi.shape();
    let at = |i: isize, j: isize| {
        let i = i.clamp(0, h as isize - 1) as usize;
        let j = j.clamp(0, w as isize - 1) as usize;
        phi.get(i, j)
    };
    ScalarField::from_fn(h, w, |i, j| {
        let (i, j) = (i as isize, j as isize);
        let c = at(i, j);
        let fx = 0.5 * (at(i, j + 1) - at(i, j - 1));
        let fy = 0.5 * (at(i + 1, j) - at(i - 1, j));
        let fxx = at(i, j + 1) - 2.0 * c + at(i, j - 1);
        let fyy = at(i + 1, j) - 2.0 * c + at(i - 1, j);
        let fxy = 0.25 * (at(i + 1, j + 1) - at(i + 1, j - 1) - at(i - 1, j + 1) + at(i - 1, j - 1));
        let g2 = fx * fx + fy * fy;
        (fxx * fy * fy - 2.0 * fx * fy * fxy + fyy * fx * fx) / (g2 + CURVATURE_GUARD).powf(1.5)
    })
}

/// Right-hand sides `d phi_k / dt` of the evolution equations.
pub fn velocities(x: &Image, state: &LevelSetState) -> Result<Vec<ScalarField>> {
    check_image(x, state)?;
    let (h, w) = x.shape();
    let eps = state.eps_h;
    let c = centroid_stats(x, &memberships(state), None).centroids;
    let table: Vec<Vec<f64>> = (0..c.num_classes())
        .map(|class| {
            let cn = c.get(class);
            (0..h * w).map(|r| x.pixel(r).iter().zip(cn).map(|(a, b)| (a - b) * (a - b)).sum()).collect()
        })
        .collect();
    let res = |r: usize, class: usize| table[class][r];
    let kappa: Vec<ScalarField> = state.phi.iter().map(curvature).collect();

    let out = match state.phi.len() {
        1 => {
            let phi = state.phi[0].as_slice();
            let data = (0..h * w)
                .map(|r| {
                    dirac(phi[r], eps) * (state.lambda * kappa[0].as_slice()[r] - res(r, 1) + res(r, 0))
                })
                .collect();
            vec![ScalarField::from_raw(h, w, data)]
        }
        _ => {
            let (p1, p2) = (state.phi[0].as_slice(), state.phi[1].as_slice());
            let v1 = (0..h * w)
                .map(|r| {
                    let h2 = heaviside(p2[r], eps);
                    let comp = (res(r, 3) - res(r, 1)) * h2 + (res(r, 2) - res(r, 0)) * (1.0 - h2);
                    dirac(p1[r], eps) * (state.lambda * kappa[0].as_slice()[r] - comp)
                })
                .collect();
            let v2 = (0..h * w)
                .map(|r| {
                    let h1 = heaviside(p1[r], eps);
                    let comp = (res(r, 3) - res(r, 2)) * h1 + (res(r, 1) - res(r, 0)) * (1.0 - h1);
                    dirac(p2[r], eps) * (state.lambda * kappa[1].as_slice()[r] - comp)
                })
                .collect();
            vec![ScalarField::from_raw(h, w, v1), ScalarField::from_raw(h, w, v2)]
        }
    };
    Ok(out)
}

/// One explicit Euler step `phi <- phi + dt * velocity`; means are
/// recomputed from the incoming state.
pub fn evolve_step(x: &Image, state: &LevelSetState) -> Result<LevelSetState> {
    let v = velocities(x, state)?;
    Ok(advance(state, &v, state.dt))
}

fn advance(state: &LevelSetState, v: &[ScalarField], dt: f64) -> LevelSetState {
    let phi = state
        .phi
        .iter()
        .zip(v)
        .map(|(f, vf)| {
            let data = f.as_slice().iter().zip(vf.as_slice()).map(|(a, b)| a + dt * b).collect();
            ScalarField::from_raw(f.height(), f.width(), data)
        })
        .collect();
    LevelSetState { phi, ..state.clone() }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSetEnergy {
    pub energy: f64,
    pub data_term: f64,
    /// `lambda * sum_n TV(chi_n)` over all classes.
    pub tv_term: f64,
}

/// Piecewise-constant Mumford-Shah energy of the smoothed class indicators.
pub fn levelset_energy(x: &Image, state: &LevelSetState, tv_eps: f64) -> Result<LevelSetEnergy> {
    check_image(x, state)?;
    let chi = memberships(state);
    let c = centroid_stats(x, &chi, None).centroids;
    let data = data_term(x, &chi, &c, None);
    let mut tv = 0.0;
    for f in &chi {
        tv += grid::tv_smooth(f, tv_eps)?;
    }
    let tv = state.lambda * tv;
    Ok(LevelSetEnergy { energy: data + tv, data_term: data, tv_term: tv })
}

/// Sinusoidal checkerboards with seeded phases; `phi_k` has period `10 + 4k`
/// pixels so the two functions of a four-class run cut the image differently.
pub fn checkerboard_init(height: usize, width: usize, phases: usize, seed: u64) -> Vec<ScalarField> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..phases)
        .map(|k| {
            let half_period = 5.0 + 2.0 * k as f64;
            let a: f64 = rng.random_range(0.0..2.0 * PI);
            let b: f64 = rng.random_range(0.0..2.0 * PI);
            ScalarField::from_fn(height, width, |i, j| {
                (PI * i as f64 / half_period + a).sin() * (PI * j as f64 / half_period + b).sin()
            })
        })
        .collect()
}

/// Centered circle of the given radius as a signed distance scaled by the
/// larger image side (positive inside).
pub fn circle_init(height: usize, width: usize, radius: f64) -> ScalarField {
    let (ci, cj) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
    let scale = height.max(width) as f64;
    ScalarField::from_fn(height, width, |i, j| {
        let d = ((i as f64 - ci).powi(2) + (j as f64 - cj).powi(2)).sqrt();
        (radius - d) / scale
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSetParams {
    pub lambda: f64,
    pub dt: f64,
    pub eps_h: f64,
    pub max_iters: usize,
    /// Accepted steps with unchanged labels after which the run stops.
    pub patience: usize,
    pub tv_eps: f64,
    pub seed: u64,
}

impl Default for LevelSetParams {
    fn default() -> Self {
        Self {
            lambda: 1e-2,
            dt: 0.5,
            eps_h: 1.0,
            max_iters: 6000,
            patience: STALL_STEPS,
            tv_eps: 1e-8,
            seed: 0,
        }
    }
}

impl LevelSetParams {
    pub fn validate(&self) -> Result<()> {
        check_params(self.eps_h, self.dt, self.lambda)?;
        if self.patience == 0 {
            return Err(Error::param("patience must be at least 1"));
        }
        if !(self.tv_eps > 0.0 && self.tv_eps.is_finite()) {
            return Err(Error::param(format!("tv_eps must be > 0, got {}", self.tv_eps)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LevelSetRun {
    pub labels: LabelMap,
    pub state: LevelSetState,
    pub centroids: Centroids,
    /// Energy of the initial state followed by one entry per accepted step.
    pub trace: Vec<LevelSetEnergy>,
    pub iterations: usize,
    pub termination: Termination,
}

impl Traced for LevelSetRun {
    fn objective_trace(&self) -> Vec<f64> {
        self.trace.iter().map(|t| t.energy).collect()
    }
}

/// Checkerboard initialization followed by explicit evolution.
pub fn segment_levelset(
    x: &Image,
    phases: usize,
    params: &LevelSetParams,
) -> Result<LevelSetRun, SolveError<LevelSetRun>> {
    params.validate()?;
    if !(1..=2).contains(&phases) {
        return Err(Error::param(format!("phases must be 1 or 2, got {phases}")).into());
    }
    let (h, w) = x.shape();
    let state = LevelSetState {
        phi: checkerboard_init(h, w, phases, params.seed),
        eps_h: params.eps_h,
        dt: params.dt,
        lambda: params.lambda,
    };
    evolve_levelset(x, state, params)
}

/// Evolves `state` until the energy settles. A step whose energy would rise
/// is retried with a halved time step; the trace therefore never increases.
pub fn evolve_levelset(
    x: &Image,
    mut state: LevelSetState,
    params: &LevelSetParams,
) -> Result<LevelSetRun, SolveError<LevelSetRun>> {
    params.validate()?;
    check_image(x, &state)?;
    let mut current = levelset_energy(x, &state, params.tv_eps)?;
    let mut trace = vec![current];
    let mut termination = Termination::MaxIters;
    let mut iterations = 0;
    let mut stalled = 0;
    let mut last_labels = state.labels();

    'outer: while iterations < params.max_iters {
        let v = velocities(x, &state)?;
        let mut dt = state.dt;
        let mut accepted = None;
        for _ in 0..=MAX_DT_HALVINGS {
            let next = advance(&state, &v, dt);
            let e = levelset_energy(x, &next, params.tv_eps)?;
            if e.energy <= current.energy {
                accepted = Some((next, e));
                break;
            }
            dt *= 0.5;
        }
        let Some((next, e)) = accepted else {
            termination = Termination::Stationary;
            break 'outer;
        };
        iterations += 1;
        let labels = next.labels();
        if labels == last_labels {
            stalled += 1;
        } else {
            stalled = 0;
        }
        last_labels = labels;
        state = next;
        current = e;
        trace.push(e);
        if stalled >= params.patience {
            termination = Termination::Tolerance;
            break;
        }
    }

    let centroids = centroid_stats(x, &memberships(&state), None).centroids;
    let run = LevelSetRun {
        labels: state.labels(),
        state,
        centroids,
        trace,
        iterations,
        termination,
    };
    if termination == Termination::MaxIters {
        return Err(SolveError::NotConverged {
            reason: format!("labels still changing after {} iterations", params.max_iters),
            partial: Box::new(run),
        });
    }
    Ok(run)
}
