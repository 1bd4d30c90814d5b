//! Joint estimation of a multiplicative bias field and a soft segmentation.
//!
//! The image is modelled as `x(r) ~ b(r) * sum_n c_n y_n(r)` with a
//! per-pixel (delta-kernel) fit and a TV penalty on `b`:
//!
//! ```text
//! L(z, b) = sum_n sum_r |x - b c_n|^2 y_n + lambda sum_n TV(y_n) + gamma TV(b)
//! ```
//!
//! The bias is shared by all channels of a multichannel image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, SolveError, Traced};
use crate::grid::{self, Image, ScalarField};
use crate::softseg::{
    backtrack, centroid_stats, check_shapes, data_term, initial_logits, membership_grad, small_change,
    softmax_backward, tv_sum, Centroids, GradMode, Init, MsConfig, SoftSegmentation, Termination, EPS_DEN,
    MAX_HALVINGS,
};

/// Admissible bias range; every update is clamped into it.
pub const BIAS_MIN: f64 = 0.05;
pub const BIAS_MAX: f64 = 20.0;

#[derive(Clone, Debug, PartialEq)]
pub struct BiasField {
    pub field: ScalarField,
    /// TV weight of the bias.
    pub gamma: f64,
}

impl BiasField {
    pub fn new(field: ScalarField, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        Ok(Self { field, gamma })
    }

    pub fn ones(height: usize, width: usize, gamma: f64) -> Result<Self> {
        Self::new(ScalarField::filled(height, width, 1.0), gamma)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.field.shape()
    }

    fn clamped(field: ScalarField, gamma: f64) -> Self {
        Self { field: field.map(|v| v.clamp(BIAS_MIN, BIAS_MAX)), gamma }
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::param(format!("gamma must be >= 0, got {gamma}")));
    }
    Ok(())
}

fn check_bias(x: &Image, b: &BiasField) -> Result<()> {
    if b.shape() != x.shape() {
        return Err(Error::input(format!("image is {:?}, bias is {:?}", x.shape(), b.shape())));
    }
    Ok(())
}

/// Bias-weighted centroids `sum b x y / (sum b^2 y + eps)`.
pub fn bias_centroids(x: &Image, y: &[ScalarField], b: &BiasField) -> Result<Centroids> {
    check_shapes(x, y)?;
    check_bias(x, b)?;
    Ok(centroid_stats(x, y, Some(&b.field)).centroids)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasMsLoss {
    pub loss: f64,
    pub data_term: f64,
    /// `lambda * sum_n TV(y_n)`.
    pub tv_y_term: f64,
    /// `gamma * TV(b)`.
    pub tv_b_term: f64,
}

pub fn bias_ms_loss(x: &Image, seg: &SoftSegmentation, b: &BiasField, cfg: &MsConfig) -> Result<BiasMsLoss> {
    let y = seg.memberships();
    check_shapes(x, y)?;
    check_bias(x, b)?;
    let c = centroid_stats(x, y, Some(&b.field)).centroids;
    let data = data_term(x, y, &c, Some(&b.field));
    let tv_y = cfg.lambda * tv_sum(y, cfg.tv_eps);
    let tv_b = if b.gamma > 0.0 { b.gamma * grid::tv_smooth(&b.field, cfg.tv_eps)? } else { 0.0 };
    Ok(BiasMsLoss { loss: data + tv_y + tv_b, data_term: data, tv_y_term: tv_y, tv_b_term: tv_b })
}

/// Gradient of [`bias_ms_loss`] with respect to the logits.
pub fn bias_loss_grad_logits(
    x: &Image,
    seg: &SoftSegmentation,
    b: &BiasField,
    cfg: &MsConfig,
    mode: GradMode,
) -> Result<Vec<ScalarField>> {
    let y = seg.memberships();
    check_shapes(x, y)?;
    check_bias(x, b)?;
    let stats = centroid_stats(x, y, Some(&b.field));
    let g = membership_grad(x, y, &stats, Some(&b.field), cfg.lambda, cfg.tv_eps, mode);
    Ok(softmax_backward(y, &g))
}

/// Gradient of [`bias_ms_loss`] with respect to the bias at every pixel.
pub fn bias_loss_grad_b(
    x: &Image,
    seg: &SoftSegmentation,
    b: &BiasField,
    cfg: &MsConfig,
    mode: GradMode,
) -> Result<ScalarField> {
    let y = seg.memberships();
    check_shapes(x, y)?;
    check_bias(x, b)?;
    let (h, w) = x.shape();
    let stats = centroid_stats(x, y, Some(&b.field));
    let c = &stats.centroids;
    let bf = b.field.as_slice();

    let mut grad = vec![0.0; h * w];
    for (n, yn) in y.iter().enumerate() {
        let cn = c.get(n);
        // dL/dc_n = -2 (S_n - c_n Q_n)
        let dl_dc: Vec<f64> = stats.numer[n]
            .iter()
            .zip(cn)
            .map(|(s, cc)| -2.0 * (s - cc * stats.denom[n]))
            .collect();
        let q = stats.denom[n] + EPS_DEN;
        for (p, g) in grad.iter_mut().enumerate() {
            let (bp, yp) = (bf[p], yn.as_slice()[p]);
            let px = x.pixel(p);
            let direct: f64 = px.iter().zip(cn).map(|(xc, cc)| -2.0 * cc * (xc - bp * cc)).sum();
            *g += yp * direct;
            if mode == GradMode::Full {
                // dc_n/db(r) = y_n (x - 2 b c_n) / (Q_n + eps)
                let chain: f64 = px
                    .iter()
                    .zip(cn)
                    .zip(&dl_dc)
                    .map(|((xc, cc), d)| yp * (xc - 2.0 * bp * cc) / q * d)
                    .sum();
                *g += chain;
            }
        }
    }
    if b.gamma > 0.0 {
        let mut tvg = vec![0.0; h * w];
        grid::tv_grad_into(bf, h, w, cfg.tv_eps, &mut tvg);
        for (g, t) in grad.iter_mut().zip(&tvg) {
            *g += b.gamma * t;
        }
    }
    Ok(ScalarField::from_raw(h, w, grad))
}

/// Primal-dual iterations per bias update. The dual state is carried across
/// outer iterations, so a few suffice.
const ROF_ITERS: usize = 25;

/// Dual variable of the bias subproblem, kept between outer iterations.
struct RofDual {
    px: Vec<f64>,
    py: Vec<f64>,
}

impl RofDual {
    fn new(n: usize) -> Self {
        Self { px: vec![0.0; n], py: vec![0.0; n] }
    }
}

/// Approximately minimizes the bias block for fixed memberships and centroids,
/// on the gauge slice `mean(b) = 1`.
///
/// With `y` and `c` fixed the data term is `sum_r a(r) (b(r) - f(r))^2 + const`
/// where `a = sum_n y_n |c_n|^2` and `a f = sum_n y_n c_n . x`, so the block is
/// a weighted ROF problem. Runs Chambolle-Pock from `b0`, projecting onto the
/// admissible range inside the primal prox.
fn bias_block(x: &Image, y: &[ScalarField], c: &Centroids, b0: &[f64], gamma: f64, dual: &mut RofDual) -> Vec<f64> {
    let (h, w) = x.shape();
    let n = h * w;
    let mut a = vec![0.0; n];
    let mut af = vec![0.0; n];
    for (k, yn) in y.iter().enumerate() {
        let cn = c.get(k);
        let c2: f64 = cn.iter().map(|v| v * v).sum();
        for (p, &yp) in yn.as_slice().iter().enumerate() {
            a[p] += yp * c2;
            af[p] += yp * x.pixel(p).iter().zip(cn).map(|(xv, cv)| xv * cv).sum::<f64>();
        }
    }
    // ||D||^2 <= 8 for forward differences
    let (tau, sigma) = (0.35, 0.35);
    let mut b = b0.to_vec();
    let mut bar = b.clone();
    let (mut gx, mut gy) = (vec![0.0; n], vec![0.0; n]);
    let mut dt = vec![0.0; n];
    for _ in 0..ROF_ITERS {
        grid::forward_diff(&bar, h, w, &mut gx, &mut gy);
        for p in 0..n {
            let (qx, qy) = (dual.px[p] + sigma * gx[p], dual.py[p] + sigma * gy[p]);
            let scale = ((qx * qx + qy * qy).sqrt() / gamma).max(1.0);
            dual.px[p] = qx / scale;
            dual.py[p] = qy / scale;
        }
        dt.iter_mut().for_each(|v| *v = 0.0);
        grid::adjoint_forward_diff(&dual.px, &dual.py, h, w, &mut dt);
        // prox of the data term restricted to mean(b) = 1; the multiplier
        // `mu` has a closed form, the range clamp is applied afterwards
        let (mut su, mut sd) = (0.0, 0.0);
        for p in 0..n {
            let d = 1.0 + 2.0 * tau * a[p];
            su += (b[p] - tau * dt[p] + 2.0 * tau * af[p]) / d;
            sd += 1.0 / d;
        }
        let mu = (su - n as f64) / (tau * sd);
        for p in 0..n {
            let u = b[p] - tau * dt[p] + 2.0 * tau * af[p] - tau * mu;
            let next = (u / (1.0 + 2.0 * tau * a[p])).clamp(BIAS_MIN, BIAS_MAX);
            bar[p] = 2.0 * next - b[p];
            b[p] = next;
        }
    }
    b
}

#[derive(Clone, Debug)]
pub struct BiasRun {
    pub seg: SoftSegmentation,
    /// Gauge-fixed to unit mean.
    pub bias: BiasField,
    /// Centroids matching the gauge-fixed bias.
    pub centroids: Centroids,
    pub trace: Vec<BiasMsLoss>,
    pub iterations: usize,
    pub termination: Termination,
}

impl Traced for BiasRun {
    fn objective_trace(&self) -> Vec<f64> {
        self.trace.iter().map(|t| t.loss).collect()
    }
}

/// Block-coordinate descent over logits and bias, starting from `b = 1`.
///
/// Each iteration takes a gradient step on the logits with the bias-weighted
/// centroids frozen, then updates `b` with the centroids refreshed and frozen.
/// The bias update solves its convex subproblem approximately by primal-dual
/// iterations on the slice `mean(b) = 1`, which removes the `(a b, c / a)`
/// scale freedom that TV would otherwise exploit by shrinking `b`. When that
/// fails to decrease the objective a zero-mean gradient step is tried
/// instead. Steps backtrack on the full objective when `cfg.line_search` is
/// set. On exit `b` is rescaled to exactly unit mean and the centroids by the
/// inverse factor.
pub fn minimize_ms_bias(
    x: &Image,
    cfg: &MsConfig,
    gamma: f64,
    init: Init,
) -> Result<BiasRun, SolveError<BiasRun>> {
    cfg.validate()?;
    check_gamma(gamma)?;
    let (h, w) = x.shape();
    let mut seg = SoftSegmentation::from_logits(initial_logits(x, cfg.num_classes, init, cfg.seed))?;
    let mut bias = BiasField::ones(h, w, gamma)?;
    let mut dual = RofDual::new(h * w);

    let mut current = bias_ms_loss(x, &seg, &bias, cfg)?;
    let mut trace = vec![current];
    let mut termination = Termination::MaxIters;
    let mut iterations = 0;

    'outer: while iterations < cfg.max_iters {
        let start = current.loss;

        let gz = bias_loss_grad_logits(x, &seg, &bias, cfg, GradMode::FrozenCentroids)?;
        let gb = bias_loss_grad_b(x, &seg, &bias, cfg, GradMode::FrozenCentroids)?;
        let zero = |f: &ScalarField| f.as_slice().iter().all(|&v| v == 0.0);
        if gz.iter().all(zero) && zero(&gb) {
            termination = Termination::Stationary;
            break;
        }

        let mut moved = false;
        let step_z = backtrack(current.loss, cfg.step_size, cfg.line_search, |eta| {
            let next = seg.stepped(&gz, eta)?;
            let loss = bias_ms_loss(x, &next, &bias, cfg)?;
            Ok(((next, loss), loss.loss))
        })?;
        if let Some(((next, loss), _)) = step_z {
            seg = next;
            current = loss;
            moved = true;
        }

        // Bias block: primal-dual solve of the subproblem, falling back to a
        // backtracked gradient step if that does not decrease the objective.
        let mut b_moved = false;
        if gamma > 0.0 {
            let c = centroid_stats(x, seg.memberships(), Some(&bias.field)).centroids;
            let target = bias_block(x, seg.memberships(), &c, bias.field.as_slice(), gamma, &mut dual);
            let from = bias.field.as_slice();
            let step = backtrack(current.loss, 1.0, cfg.line_search, |t| {
                let data = from.iter().zip(&target).map(|(b0, b1)| b0 + t * (b1 - b0)).collect();
                let next = BiasField { field: ScalarField::new(h, w, data)?, gamma };
                let loss = bias_ms_loss(x, &seg, &next, cfg)?;
                Ok(((next, loss), loss.loss))
            })?;
            if let Some(((next, loss), _)) = step {
                bias = next;
                current = loss;
                b_moved = true;
            }
        }
        if !b_moved {
            let gb = bias_loss_grad_b(x, &seg, &bias, cfg, GradMode::FrozenCentroids)?;
            // zero-mean direction keeps the gauge
            let gb = gb.map(|v| v - gb.mean());
            let step_b = backtrack(current.loss, cfg.step_size, cfg.line_search, |eta| {
                let data = bias
                    .field
                    .as_slice()
                    .iter()
                    .zip(gb.as_slice())
                    .map(|(bv, gv)| bv - eta * gv)
                    .collect();
                let next = BiasField::clamped(ScalarField::new(h, w, data)?, gamma);
                let loss = bias_ms_loss(x, &seg, &next, cfg)?;
                Ok(((next, loss), loss.loss))
            })?;
            if let Some(((next, loss), _)) = step_b {
                bias = next;
                current = loss;
                b_moved = true;
            }
        }
        moved |= b_moved;

        if !moved {
            termination = Termination::BacktrackingExhausted;
            break 'outer;
        }
        iterations += 1;
        trace.push(current);
        if small_change(start, current.loss, cfg.rel_tol) {
            termination = Termination::Tolerance;
            break;
        }
    }

    let c = centroid_stats(x, seg.memberships(), Some(&bias.field)).centroids;
    let mean = bias.field.mean();
    let bias = BiasField { field: bias.field.map(|v| v / mean), gamma };
    let run = BiasRun {
        seg,
        bias,
        centroids: c.scaled(mean),
        trace,
        iterations,
        termination,
    };
    if termination == Termination::BacktrackingExhausted {
        return Err(SolveError::NotConverged {
            reason: format!("backtracking exhausted after {} halvings", MAX_HALVINGS),
            partial: Box::new(run),
        });
    }
    Ok(run)
}
