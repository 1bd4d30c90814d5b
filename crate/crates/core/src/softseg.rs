//! Softmax-relaxed Mumford-Shah segmentation.
//!
//! Class memberships are the softmax of per-pixel logits, so they form a
//! partition of unity at every pixel by construction. The piecewise-constant
//! Mumford-Shah energy
//!
//! ```text
//! L(z) = sum_n sum_r |x(r) - c_n|^2 y_n(r) + lambda * sum_n TV(y_n)
//! ```
//!
//! with membership-weighted centroids `c_n` is minimized over the logits.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, SolveError, Traced};
use crate::grid::{self, Image, ScalarField};
use crate::kmeans::{kmeans, DEFAULT_KMEANS_ITERS};
use crate::supervision::LabelMap;

/// Guard added to centroid denominators so empty classes stay finite.
pub const EPS_DEN: f64 = 1e-8;

/// Backtracking halves the step at most this many times per iteration.
pub const MAX_HALVINGS: usize = 30;

/// Half-width of the uniform random logit initialization.
pub const RANDOM_INIT_SCALE: f64 = 0.1;

/// Logit given to the k-means cluster of a pixel (others get 0).
pub const KMEANS_LOGIT: f64 = 10.0;

/// Lower bound used when turning memberships back into logits.
pub const MEMBERSHIP_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsConfig {
    /// TV weight.
    pub lambda: f64,
    pub num_classes: usize,
    pub step_size: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub tv_eps: f64,
    pub seed: u64,
    pub line_search: bool,
}

impl Default for MsConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            num_classes: 2,
            step_size: 0.5,
            max_iters: 500,
            rel_tol: 1e-6,
            tv_eps: 1e-8,
            seed: 0,
            line_search: true,
        }
    }
}

impl MsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::param(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(2..=254).contains(&self.num_classes) {
            return Err(Error::param(format!(
                "number of classes must be in 2..=254, got {}",
                self.num_classes
            )));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::param(format!("step size must be > 0, got {}", self.step_size)));
        }
        if !(self.rel_tol > 0.0 && self.rel_tol.is_finite()) {
            return Err(Error::param(format!("rel_tol must be > 0, got {}", self.rel_tol)));
        }
        if !(self.tv_eps > 0.0 && self.tv_eps.is_finite()) {
            return Err(Error::param(format!("tv_eps must be > 0, got {}", self.tv_eps)));
        }
        Ok(())
    }
}

/// Logits and their softmax memberships. The memberships are never set
/// independently of the logits.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftSegmentation {
    logits: Vec<ScalarField>,
    memberships: Vec<ScalarField>,
}

impl SoftSegmentation {
    pub fn from_logits(logits: Vec<ScalarField>) -> Result<Self> {
        let memberships = softmax(&logits)?;
        Ok(Self { logits, memberships })
    }

    /// Logits `ln(max(y, floor))`; the result is re-normalized by softmax.
    pub fn from_memberships(y: &[ScalarField]) -> Result<Self> {
        let logits = y.iter().map(|f| f.map(|v| v.max(MEMBERSHIP_FLOOR).ln())).collect();
        Self::from_logits(logits)
    }

    pub fn logits(&self) -> &[ScalarField] {
        &self.logits
    }

    pub fn memberships(&self) -> &[ScalarField] {
        &self.memberships
    }

    pub fn num_classes(&self) -> usize {
        self.logits.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.logits[0].shape()
    }

    pub fn num_pixels(&self) -> usize {
        self.logits[0].len()
    }

    /// Logits moved by `-step * direction`.
    pub(crate) fn stepped(&self, direction: &[ScalarField], step: f64) -> Result<Self> {
        let logits = self
            .logits
            .iter()
            .zip(direction)
            .map(|(z, d)| {
                let data = z.as_slice().iter().zip(d.as_slice()).map(|(a, b)| a - step * b).collect();
                ScalarField::new(z.height(), z.width(), data)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_logits(logits)
    }
}

/// Per-pixel softmax across classes with max subtraction.
pub fn softmax(z: &[ScalarField]) -> Result<Vec<ScalarField>> {
    if z.len() < 2 {
        return Err(Error::input(format!("softmax needs at least 2 classes, got {}", z.len())));
    }
    let shape = z[0].shape();
    if z.iter().any(|f| f.shape() != shape) {
        return Err(Error::input("logit fields differ in shape"));
    }
    if z.iter().any(|f| f.as_slice().iter().any(|v| !v.is_finite())) {
        return Err(Error::input("logits contain non-finite values"));
    }
    let n = z.len();
    let len = z[0].len();
    let mut out = vec![vec![0.0; len]; n];
    let mut e = vec![0.0; n];
    for p in 0..len {
        let m = z.iter().map(|f| f.as_slice()[p]).fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (k, f) in z.iter().enumerate() {
            e[k] = (f.as_slice()[p] - m).exp();
            s += e[k];
        }
        for (o, &ek) in out.iter_mut().zip(&e) {
            o[p] = ek / s;
        }
    }
    Ok(out.into_iter().map(|d| ScalarField::from_raw(shape.0, shape.1, d)).collect())
}

/// Per-class centroid vectors, one row of `channels` values per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Centroids {
    channels: usize,
    values: Vec<f64>,
}

impl Centroids {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let channels = rows.first().map_or(0, Vec::len);
        if channels == 0 || rows.iter().any(|r| r.len() != channels) {
            return Err(Error::input("centroid rows must be non-empty and equally long"));
        }
        let values: Vec<f64> = rows.into_iter().flatten().collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("centroids must be finite"));
        }
        Ok(Self { channels, values })
    }

    pub fn num_classes(&self) -> usize {
        self.values.len() / self.channels
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn get(&self, class: usize) -> &[f64] {
        &self.values[class * self.channels..(class + 1) * self.channels]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.channels).map(<[f64]>::to_vec).collect()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            channels: self.channels,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }
}

pub(crate) fn check_shapes(x: &Image, y: &[ScalarField]) -> Result<()> {
    if y.is_empty() {
        return Err(Error::input("no membership fields"));
    }
    if y.iter().any(|f| f.shape() != x.shape()) {
        return Err(Error::input(format!(
            "image is {:?} but memberships are {:?}",
            x.shape(),
            y[0].shape()
        )));
    }
    Ok(())
}

/// Centroid numerators `sum b x y`, denominators `sum b^2 y`, and the
/// guarded ratio. Without a bias both weights are one.
pub(crate) struct CentroidStats {
    pub numer: Vec<Vec<f64>>,
    pub denom: Vec<f64>,
    pub centroids: Centroids,
}

pub(crate) fn centroid_stats(x: &Image, y: &[ScalarField], bias: Option<&ScalarField>) -> CentroidStats {
    let ch = x.channels();
    let per_class: Vec<(Vec<f64>, f64)> = y
        .par_iter()
        .map(|yn| {
            let mut s = vec![0.0; ch];
            let mut q = 0.0;
            for (p, &w) in yn.as_slice().iter().enumerate() {
                let b = bias.map_or(1.0, |b| b.as_slice()[p]);
                for (sc, xc) in s.iter_mut().zip(x.pixel(p)) {
                    *sc += b * xc * w;
                }
                q += b * b * w;
            }
            (s, q)
        })
        .collect();
    let mut values = Vec::with_capacity(y.len() * ch);
    for (s, q) in &per_class {
        values.extend(s.iter().map(|sc| sc / (q + EPS_DEN)));
    }
    let (numer, denom) = per_class.into_iter().unzip();
    CentroidStats { numer, denom, centroids: Centroids { channels: ch, values } }
}

/// `|x(r) - b(r) c_n|^2` for every pixel.
pub(crate) fn residuals(x: &Image, c: &[f64], bias: Option<&ScalarField>) -> Vec<f64> {
    (0..x.num_pixels())
        .map(|p| {
            let b = bias.map_or(1.0, |b| b.as_slice()[p]);
            x.pixel(p).iter().zip(c).map(|(xc, cc)| (xc - b * cc).powi(2)).sum()
        })
        .collect()
}

pub(crate) fn data_term(x: &Image, y: &[ScalarField], c: &Centroids, bias: Option<&ScalarField>) -> f64 {
    let per_class: Vec<f64> = y
        .par_iter()
        .enumerate()
        .map(|(n, yn)| {
            residuals(x, c.get(n), bias)
                .iter()
                .zip(yn.as_slice())
                .map(|(r, w)| r * w)
                .sum()
        })
        .collect();
    per_class.iter().sum()
}

pub(crate) fn tv_sum(y: &[ScalarField], eps: f64) -> f64 {
    let per_class: Vec<f64> = y
        .par_iter()
        .map(|f| grid::tv_value(f.as_slice(), f.height(), f.width(), eps))
        .collect();
    per_class.iter().sum()
}

/// Membership-weighted class means (per channel), guarded by [`EPS_DEN`].
pub fn soft_centroids(x: &Image, y: &[ScalarField]) -> Result<Centroids> {
    check_shapes(x, y)?;
    Ok(centroid_stats(x, y, None).centroids)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsLoss {
    pub loss: f64,
    pub data_term: f64,
    /// Already multiplied by lambda.
    pub tv_term: f64,
}

/// Relaxed Mumford-Shah loss with centroids recomputed from `seg`.
pub fn ms_loss(x: &Image, seg: &SoftSegmentation, cfg: &MsConfig) -> Result<MsLoss> {
    check_shapes(x, seg.memberships())?;
    let y = seg.memberships();
    let c = centroid_stats(x, y, None).centroids;
    let data = data_term(x, y, &c, None);
    let tv = cfg.lambda * tv_sum(y, cfg.tv_eps);
    Ok(MsLoss { loss: data + tv, data_term: data, tv_term: tv })
}

/// How centroids enter the logit gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradMode {
    /// Centroids are held constant while differentiating.
    FrozenCentroids,
    /// Differentiates through the centroid formula as well.
    Full,
}

/// Derivative of the loss with respect to each membership field.
pub(crate) fn membership_grad(
    x: &Image,
    y: &[ScalarField],
    stats: &CentroidStats,
    bias: Option<&ScalarField>,
    lambda: f64,
    tv_eps: f64,
    mode: GradMode,
) -> Vec<Vec<f64>> {
    let (h, w) = x.shape();
    let c = &stats.centroids;
    y.par_iter()
        .enumerate()
        .map(|(n, yn)| {
            let cn = c.get(n);
            let mut g = residuals(x, cn, bias);
            if lambda > 0.0 {
                let mut tvg = vec![0.0; h * w];
                grid::tv_grad_into(yn.as_slice(), h, w, tv_eps, &mut tvg);
                for (gv, t) in g.iter_mut().zip(&tvg) {
                    *gv += lambda * t;
                }
            }
            if mode == GradMode::Full {
                // dL/dc_n = -2 (S_n - c_n Q_n); dc_n/dy_n(r) = b (x - b c_n) / (Q_n + eps)
                let q = stats.denom[n] + EPS_DEN;
                let dl_dc: Vec<f64> = stats.numer[n]
                    .iter()
                    .zip(cn)
                    .map(|(s, cc)| -2.0 * (s - cc * stats.denom[n]))
                    .collect();
                for (p, gv) in g.iter_mut().enumerate() {
                    let b = bias.map_or(1.0, |b| b.as_slice()[p]);
                    let chain: f64 = x
                        .pixel(p)
                        .iter()
                        .zip(cn)
                        .zip(&dl_dc)
                        .map(|((xc, cc), d)| b * (xc - b * cc) / q * d)
                        .sum();
                    *gv += chain;
                }
            }
            g
        })
        .collect()
}

/// Chains a membership gradient through the softmax Jacobian:
/// `dL/dz_n = y_n (g_n - sum_i y_i g_i)`.
pub(crate) fn softmax_backward(y: &[ScalarField], g: &[Vec<f64>]) -> Vec<ScalarField> {
    let (h, w) = y[0].shape();
    let len = h * w;
    let mut mean = vec![0.0; len];
    for (yn, gn) in y.iter().zip(g) {
        for (m, (yv, gv)) in mean.iter_mut().zip(yn.as_slice().iter().zip(gn)) {
            *m += yv * gv;
        }
    }
    y.iter()
        .zip(g)
        .map(|(yn, gn)| {
            let d = yn
                .as_slice()
                .iter()
                .zip(gn)
                .zip(&mean)
                .map(|((yv, gv), m)| yv * (gv - m))
                .collect();
            ScalarField::from_raw(h, w, d)
        })
        .collect()
}

/// Analytic gradient of [`ms_loss`] with respect to the logits.
pub fn ms_loss_grad(
    x: &Image,
    seg: &SoftSegmentation,
    cfg: &MsConfig,
    mode: GradMode,
) -> Result<Vec<ScalarField>> {
    check_shapes(x, seg.memberships())?;
    let y = seg.memberships();
    let stats = centroid_stats(x, y, None);
    let g = membership_grad(x, y, &stats, None, cfg.lambda, cfg.tv_eps, mode);
    Ok(softmax_backward(y, &g))
}

/// Argmax readout; ties go to the lowest class index.
pub fn hard_mask(seg: &SoftSegmentation) -> LabelMap {
    let (h, w) = seg.shape();
    let y = seg.memberships();
    let labels = (0..h * w)
        .map(|p| {
            let mut best = 0;
            for n in 1..y.len() {
                if y[n].as_slice()[p] > y[best].as_slice()[p] {
                    best = n;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(h, w, labels).expect("shape is consistent")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    Random,
    Kmeans,
}

impl fmt::Display for Init {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Init::Random => "random",
            Init::Kmeans => "kmeans",
        })
    }
}

impl FromStr for Init {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Init::Random),
            "kmeans" => Ok(Init::Kmeans),
            other => Err(Error::param(format!("unknown init '{other}'"))),
        }
    }
}

/// Initial logits: i.i.d. uniform in `[-0.1, 0.1]`, or one-hot k-means
/// assignments scaled by [`KMEANS_LOGIT`].
pub fn initial_logits(x: &Image, num_classes: usize, init: Init, seed: u64) -> Vec<ScalarField> {
    let (h, w) = x.shape();
    match init {
        Init::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..num_classes)
                .map(|_| {
                    ScalarField::from_fn(h, w, |_, _| rng.random_range(-RANDOM_INIT_SCALE..=RANDOM_INIT_SCALE))
                })
                .collect()
        }
        Init::Kmeans => {
            let cl = kmeans(x, num_classes, DEFAULT_KMEANS_ITERS, seed);
            (0..num_classes)
                .map(|n| {
                    let data = cl
                        .assignment
                        .iter()
                        .map(|&a| if a == n { KMEANS_LOGIT } else { 0.0 })
                        .collect();
                    ScalarField::from_raw(h, w, data)
                })
                .collect()
        }
    }
}

/// Why an optimizer stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    /// Relative objective change fell below tolerance.
    Tolerance,
    /// Gradient vanished exactly.
    Stationary,
    /// Iteration budget exhausted.
    MaxIters,
    /// No step decreased the objective after every allowed halving.
    BacktrackingExhausted,
}

impl Termination {
    pub fn converged(&self) -> bool {
        matches!(self, Termination::Tolerance | Termination::Stationary)
    }
}

#[derive(Clone, Debug)]
pub struct MsRun {
    pub seg: SoftSegmentation,
    pub centroids: Centroids,
    /// Loss at the initial state followed by one entry per accepted step.
    pub trace: Vec<MsLoss>,
    pub iterations: usize,
    pub termination: Termination,
}

impl Traced for MsRun {
    fn objective_trace(&self) -> Vec<f64> {
        self.trace.iter().map(|t| t.loss).collect()
    }
}

pub(crate) fn small_change(prev: f64, next: f64, rel_tol: f64) -> bool {
    (prev - next).abs() <= rel_tol * prev.abs()
}

/// Backtracking step along `-direction`. Returns the accepted state and its
/// objective, or `None` when every halving failed to decrease `current`.
pub(crate) fn backtrack<S>(
    current: f64,
    step: f64,
    line_search: bool,
    mut trial: impl FnMut(f64) -> Result<(S, f64)>,
) -> Result<Option<(S, f64)>> {
    let mut eta = step;
    for _ in 0..=MAX_HALVINGS {
        let (state, value) = trial(eta)?;
        if !line_search || value <= current {
            return Ok(Some((state, value)));
        }
        eta *= 0.5;
    }
    Ok(None)
}

fn grad_is_zero(g: &[ScalarField]) -> bool {
    g.iter().all(|f| f.as_slice().iter().all(|&v| v == 0.0))
}

/// Alternating minimization: centroids from the current memberships, then a
/// (backtracked) gradient step on the logits with centroids frozen.
pub fn minimize_ms(x: &Image, cfg: &MsConfig, init: Init) -> Result<MsRun, SolveError<MsRun>> {
    cfg.validate()?;
    let seg = SoftSegmentation::from_logits(initial_logits(x, cfg.num_classes, init, cfg.seed))?;
    minimize_ms_from(x, cfg, seg)
}

/// [`minimize_ms`] starting from given logits.
pub fn minimize_ms_from(
    x: &Image,
    cfg: &MsConfig,
    mut seg: SoftSegmentation,
) -> Result<MsRun, SolveError<MsRun>> {
    cfg.validate()?;
    if seg.num_classes() != cfg.num_classes {
        return Err(Error::input("initial logits do not match num_classes").into());
    }
    check_shapes(x, seg.memberships())?;

    let mut current = ms_loss(x, &seg, cfg)?;
    let mut trace = vec![current];
    let mut termination = Termination::MaxIters;
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        let grad = ms_loss_grad(x, &seg, cfg, GradMode::FrozenCentroids)?;
        if grad_is_zero(&grad) {
            termination = Termination::Stationary;
            break;
        }
        let accepted = backtrack(current.loss, cfg.step_size, cfg.line_search, |eta| {
            let next = seg.stepped(&grad, eta)?;
            let loss = ms_loss(x, &next, cfg)?;
            Ok(((next, loss), loss.loss))
        })?;
        let Some(((next, loss), _)) = accepted else {
            termination = Termination::BacktrackingExhausted;
            break;
        };
        iterations += 1;
        let done = small_change(current.loss, loss.loss, cfg.rel_tol);
        seg = next;
        current = loss;
        trace.push(loss);
        if done {
            termination = Termination::Tolerance;
            break;
        }
    }

    let centroids = soft_centroids(x, seg.memberships())?;
    let run = MsRun { seg, centroids, trace, iterations, termination };
    if termination == Termination::BacktrackingExhausted {
        return Err(SolveError::NotConverged {
            reason: format!("backtracking exhausted after {} halvings", MAX_HALVINGS),
            partial: Box::new(run),
        });
    }
    Ok(run)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedPointDiagnostics {
    /// Largest magnitude of the curvature term over classes and pixels.
    pub max_curvature: f64,
    /// Largest magnitude of the class-competition term.
    pub max_data: f64,
    /// Largest `|sum_n y_n - 1|` after the step.
    pub max_simplex_violation: f64,
    pub min_membership: f64,
}

#[derive(Clone, Debug)]
pub struct FixedPointStep {
    /// Updated memberships; not projected back onto the simplex.
    pub memberships: Vec<ScalarField>,
    pub velocity: Vec<ScalarField>,
    pub centroids: Centroids,
    pub diagnostics: FixedPointDiagnostics,
}

impl FixedPointStep {
    /// Clamps at [`MEMBERSHIP_FLOOR`] and renormalizes each pixel.
    pub fn renormalized(&self) -> Result<SoftSegmentation> {
        SoftSegmentation::from_memberships(&self.memberships)
    }
}

/// One explicit update
/// `y_n <- y_n + eta (lambda div(grad y_n / |grad y_n|) + sum_i (-1)^[i = n] |x - c_i|^2)`.
pub fn fixed_point_step(x: &Image, seg: &SoftSegmentation, cfg: &MsConfig) -> Result<FixedPointStep> {
    cfg.validate()?;
    let y = seg.memberships();
    check_shapes(x, y)?;
    let (h, w) = x.shape();
    let c = centroid_stats(x, y, None).centroids;
    let res: Vec<Vec<f64>> = (0..y.len()).map(|n| residuals(x, c.get(n), None)).collect();
    let total: Vec<f64> = (0..h * w).map(|p| res.iter().map(|r| r[p]).sum()).collect();

    let mut max_curvature = 0.0f64;
    let mut max_data = 0.0f64;
    let mut velocity = Vec::with_capacity(y.len());
    for (n, yn) in y.iter().enumerate() {
        let mut curv = vec![0.0; h * w];
        grid::tv_grad_into(yn.as_slice(), h, w, cfg.tv_eps, &mut curv);
        let v: Vec<f64> = (0..h * w)
            .map(|p| {
                let k = -cfg.lambda * curv[p];
                // +|x - c_i|^2 for i != n, -|x - c_n|^2 for i = n
                let d = total[p] - 2.0 * res[n][p];
                max_curvature = max_curvature.max(k.abs());
                max_data = max_data.max(d.abs());
                k + d
            })
            .collect();
        velocity.push(ScalarField::from_raw(h, w, v));
    }

    let memberships: Vec<ScalarField> = y
        .iter()
        .zip(&velocity)
        .map(|(yn, vn)| {
            let d = yn
                .as_slice()
                .iter()
                .zip(vn.as_slice())
                .map(|(a, b)| a + cfg.step_size * b)
                .collect();
            ScalarField::from_raw(h, w, d)
        })
        .collect();
    let max_simplex_violation = (0..h * w)
        .map(|p| (memberships.iter().map(|m| m.as_slice()[p]).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let min_membership = memberships
        .iter()
        .flat_map(|m| m.as_slice().iter().copied())
        .fold(f64::INFINITY, f64::min);

    Ok(FixedPointStep {
        memberships,
        velocity,
        centroids: c,
        diagnostics: FixedPointDiagnostics { max_curvature, max_data, max_simplex_violation, min_membership },
    })
}
