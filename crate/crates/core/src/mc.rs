//! Continuum-side Monte Carlo: the killed diffusion, its Girsanov weights,
//! exit-probability estimation and the probabilistic representation of the
//! dual density.
//!
//! The simulated process carries the corrected drift
//! `f_tilde = f_hat - sum_i beta_bar_i beta_i` and the split diffusion
//! `sum_i beta_i dw_i + beta_tilde dw_aux` with
//! `beta_tilde = sqrt(2b - sum_i beta_i^2)`. Interior killing at rate
//! `lambda` enters multiplicatively through the weight `exp(-int lambda)`
//! (soft killing); boundary exit stops the path, with a Brownian-bridge
//! crossing test per step so the exit law is exact for constant diffusion
//! and first-order accurate otherwise.
//!
//! The tree and this module deliberately discretize the same model in
//! different ways (Rademacher branches vs Gaussian increments), so their
//! agreement is evidence rather than tautology.

use crate::coeffs::Profile;
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

/// Paths per seeding block; results are reduced in block order so thread
/// count never changes the output.
const BLOCK: usize = 4096;

/// Deterministic continuum-side coefficients in non-divergence presentation.
#[derive(Debug, Clone)]
pub struct McModel {
    pub x_min: f64,
    pub x_max: f64,
    pub horizon: f64,
    pub b: Profile,
    /// f_hat
    pub drift: Profile,
    /// lambda (killing rate), assumed >= 0
    pub lambda: Profile,
    pub beta: Vec<Profile>,
    pub beta_bar: Vec<Profile>,
}

impl McModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        x_min: f64,
        x_max: f64,
        horizon: f64,
        b: Profile,
        drift: Profile,
        lambda: Profile,
        beta: Vec<Profile>,
        beta_bar: Vec<Profile>,
    ) -> Result<Self> {
        if !(x_max > x_min) || !(horizon > 0.0) {
            return Err(Error::Domain("need x_max > x_min and horizon > 0".into()));
        }
        if beta.len() != beta_bar.len() {
            return Err(Error::ShapeMismatch {
                what: "beta / beta_bar profiles",
                expected: beta.len(),
                got: beta_bar.len(),
            });
        }
        let model = Self {
            x_min,
            x_max,
            horizon,
            b,
            drift,
            lambda,
            beta,
            beta_bar,
        };
        for p in model.all_profiles() {
            if p.is_random() {
                return Err(Error::Domain(
                    "the Monte Carlo cross-check uses deterministic coefficients only".into(),
                ));
            }
        }
        model.validate_split()?;
        Ok(model)
    }

    fn all_profiles(&self) -> Vec<&Profile> {
        let mut v = vec![&self.b, &self.drift, &self.lambda];
        v.extend(self.beta.iter());
        v.extend(self.beta_bar.iter());
        v
    }

    fn eval(&self, p: &Profile, x: f64, t: f64) -> f64 {
        p.eval_deterministic(x, t, self.x_min, self.x_max, self.horizon)
            .expect("profiles validated deterministic at construction")
    }

    /// Verify `2b - sum beta_i^2 > 0` on a sample grid over the closed domain.
    pub fn validate_split(&self) -> Result<()> {
        let n = 64;
        for it in 0..=n {
            let t = self.horizon * it as f64 / n as f64;
            for ix in 0..=n {
                let x = self.x_min + (self.x_max - self.x_min) * ix as f64 / n as f64;
                let arg = self.diffusion_var(x, t);
                if arg <= 0.0 {
                    return Err(Error::Coefficient(format!(
                        "2b - sum beta_i^2 = {arg:.6e} at (x = {x:.4}, t = {t:.4}); \
                         the diffusion split requires strict positivity"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Auxiliary variance rate `2b - sum beta_i^2` (the beta_tilde square).
    fn diffusion_var(&self, x: f64, t: f64) -> f64 {
        let mut var = 2.0 * self.eval(&self.b, x, t);
        for beta in &self.beta {
            let v = self.eval(beta, x, t);
            var -= v * v;
        }
        var
    }
}

/// Initial law of the diffusion start point.
#[derive(Debug, Clone, Copy)]
pub enum InitialLaw {
    /// Deterministic start.
    Point(f64),
    /// Density proportional to `sin(pi (x - x_min)/W)` (first Dirichlet mode).
    SineDensity,
    /// Uniform over the domain.
    Uniform,
}

impl InitialLaw {
    fn sample(&self, rng: &mut ChaCha8Rng, x_min: f64, x_max: f64) -> f64 {
        let w = x_max - x_min;
        match *self {
            InitialLaw::Point(x) => x,
            InitialLaw::SineDensity => {
                let u: f64 = rng.gen();
                x_min + w * (1.0 - 2.0 * u).acos() / std::f64::consts::PI
            }
            InitialLaw::Uniform => {
                let u: f64 = rng.gen();
                x_min + w * u
            }
        }
    }
}

/// Monte Carlo run parameters.
#[derive(Debug, Clone)]
pub struct McOptions {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    /// Keep the full trajectories (memory scales with n_paths * n_steps).
    pub record_trajectories: bool,
}

impl McOptions {
    pub fn new(n_paths: usize, dt: f64, seed: u64) -> Self {
        Self {
            n_paths,
            dt,
            seed,
            record_trajectories: false,
        }
    }
}

/// Per-path summary: terminal state, exit time and weight accumulators
/// (all stopped at min(tau, T)).
#[derive(Debug, Clone, Copy)]
pub struct PathSummary {
    pub final_y: f64,
    /// First time the path left the domain; `None` if it survived to T.
    pub exit_time: Option<f64>,
    pub int_lambda: f64,
    pub int_bbar_dw: f64,
    pub int_bbar_sq: f64,
}

impl PathSummary {
    pub fn survived(&self) -> bool {
        self.exit_time.is_none()
    }
}

/// A simulated ensemble.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub summaries: Vec<PathSummary>,
    pub n_steps: usize,
    pub dt: f64,
    pub seed: u64,
    /// Present only when trajectory recording was requested; positions are
    /// frozen at the exit state after killing.
    pub trajectories: Option<Vec<Vec<f64>>>,
}

/// Point estimate with its sampling uncertainty (95% Wilson interval for
/// proportions, normal interval otherwise).
#[derive(Debug, Clone, Copy)]
pub struct WeightedEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
}

/// Compensated (Kahan) accumulator for order-fixed reductions.
#[derive(Debug, Clone, Copy, Default)]
struct Kahan {
    sum: f64,
    carry: f64,
}

impl Kahan {
    fn add(&mut self, v: f64) {
        let y = v - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum
    }
}

fn block_seed(seed: u64, block: usize) -> u64 {
    let mut z = seed ^ (block as u64).wrapping_mul(0xd6e8_feb8_6659_fd93);
    z = (z ^ (z >> 32)).wrapping_mul(0xd6e8_feb8_6659_fd93);
    z ^ (z >> 32)
}

type BlockResult = (Vec<PathSummary>, Option<Vec<Vec<f64>>>);

fn simulate_block(
    model: &McModel,
    law: InitialLaw,
    n_steps: usize,
    dt: f64,
    n_paths: usize,
    seed: u64,
    record: bool,
) -> BlockResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nb = model.beta.len();
    let sqrt_dt = dt.sqrt();
    let mut summaries = Vec::with_capacity(n_paths);
    let mut trajs = if record {
        Some(Vec::with_capacity(n_paths))
    } else {
        None
    };

    for _ in 0..n_paths {
        let mut y = law.sample(&mut rng, model.x_min, model.x_max);
        let mut traj = trajs.as_ref().map(|_| {
            let mut v = Vec::with_capacity(n_steps + 1);
            v.push(y);
            v
        });
        let mut int_lambda = 0.0;
        let mut int_bbar_dw = 0.0;
        let mut int_bbar_sq = 0.0;
        let mut exit_time = None;

        if y <= model.x_min || y >= model.x_max {
            exit_time = Some(0.0);
        } else {
            for k in 0..n_steps {
                let t = k as f64 * dt;
                let b_here = model.eval(&model.b, y, t);
                let lam = model.eval(&model.lambda, y, t);
                let mut drift = model.eval(&model.drift, y, t);
                let mut beta_sq = 0.0;
                let mut diff = 0.0;
                for i in 0..nb {
                    let beta = model.eval(&model.beta[i], y, t);
                    let bbar = model.eval(&model.beta_bar[i], y, t);
                    let dw: f64 = sqrt_dt * rng.sample::<f64, _>(StandardNormal);
                    drift -= bbar * beta;
                    beta_sq += beta * beta;
                    diff += beta * dw;
                    int_bbar_dw += bbar * dw;
                    int_bbar_sq += bbar * bbar * dt;
                }
                let var = 2.0 * b_here - beta_sq;
                // construction validated var > 0 on a sample grid; the path
                // may still wander somewhere worse
                let beta_tilde = if var > 0.0 { var.sqrt() } else { 0.0 };
                let dw_aux: f64 = sqrt_dt * rng.sample::<f64, _>(StandardNormal);
                let y_next = y + drift * dt + diff + beta_tilde * dw_aux;
                int_lambda += lam * dt;

                if y_next <= model.x_min || y_next >= model.x_max {
                    exit_time = Some((k + 1) as f64 * dt);
                    y = y_next;
                } else {
                    // Brownian-bridge crossing test against both walls;
                    // exponents below -40 are beyond f64 resolution
                    let sigma_sq = 2.0 * b_here;
                    let e_lo = -2.0 * (y - model.x_min) * (y_next - model.x_min) / (sigma_sq * dt);
                    let e_hi = -2.0 * (model.x_max - y) * (model.x_max - y_next) / (sigma_sq * dt);
                    let mut p_exit = 0.0;
                    if e_lo > -40.0 {
                        p_exit += e_lo.exp();
                    }
                    if e_hi > -40.0 {
                        p_exit += e_hi.exp();
                    }
                    if p_exit > 0.0 && rng.gen::<f64>() < p_exit {
                        exit_time = Some((k + 1) as f64 * dt);
                    }
                    y = y_next;
                }
                if let Some(tr) = traj.as_mut() {
                    tr.push(y);
                }
                if exit_time.is_some() {
                    break;
                }
            }
        }
        summaries.push(PathSummary {
            final_y: y,
            exit_time,
            int_lambda,
            int_bbar_dw,
            int_bbar_sq,
        });
        if let (Some(trs), Some(mut tr)) = (trajs.as_mut(), traj) {
            tr.resize(n_steps + 1, *tr.last().unwrap_or(&y));
            trs.push(tr);
        }
    }
    (summaries, trajs)
}

/// Simulate an ensemble of killed diffusion paths. Identical inputs and seed
/// give bitwise-identical output for any thread count.
pub fn simulate_paths(model: &McModel, law: InitialLaw, opts: &McOptions) -> Result<PathEnsemble> {
    if opts.n_paths == 0 {
        return Err(Error::Domain("need at least one path".into()));
    }
    if !(opts.dt > 0.0) {
        return Err(Error::Domain("dt must be positive".into()));
    }
    let n_steps = (model.horizon / opts.dt).round().max(1.0) as usize;
    let dt = model.horizon / n_steps as f64;
    let n_blocks = opts.n_paths.div_ceil(BLOCK);

    let blocks: Vec<BlockResult> = (0..n_blocks)
        .into_par_iter()
        .map(|blk| {
            let count = BLOCK.min(opts.n_paths - blk * BLOCK);
            simulate_block(
                model,
                law,
                n_steps,
                dt,
                count,
                block_seed(opts.seed, blk),
                opts.record_trajectories,
            )
        })
        .collect();

    let mut summaries = Vec::with_capacity(opts.n_paths);
    let mut trajectories = opts.record_trajectories.then(Vec::new);
    for (s, t) in blocks {
        summaries.extend(s);
        if let (Some(all), Some(blk)) = (trajectories.as_mut(), t) {
            all.extend(blk);
        }
    }
    Ok(PathEnsemble {
        summaries,
        n_steps,
        dt,
        seed: opts.seed,
        trajectories,
    })
}

/// Girsanov weights of one path: the exponential martingale `gamma_M` and the
/// killing-discounted `gamma = exp(-int lambda) * gamma_M`.
pub fn girsanov_weight(path: &PathSummary) -> (f64, f64) {
    let gamma_m = (path.int_bbar_dw - 0.5 * path.int_bbar_sq).exp();
    let gamma = (-path.int_lambda).exp() * gamma_m;
    (gamma_m, gamma)
}

/// Estimate the survival probability `P(tau > T)` with a Wilson 95% interval.
pub fn estimate_exit_bound(
    model: &McModel,
    law: InitialLaw,
    opts: &McOptions,
) -> Result<(WeightedEstimate, PathEnsemble)> {
    let ensemble = simulate_paths(model, law, opts)?;
    let n = ensemble.summaries.len();
    let survivors = ensemble.summaries.iter().filter(|s| s.survived()).count();
    let p = survivors as f64 / n as f64;
    let se = (p * (1.0 - p) / n as f64).sqrt();
    let z = 1.959_963_984_540_054; // 97.5% normal quantile
    let nf = n as f64;
    let denom = 1.0 + z * z / nf;
    let center = (p + z * z / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z * z / (4.0 * nf * nf)).sqrt() / denom;
    Ok((
        WeightedEstimate {
            estimate: p,
            std_error: se,
            ci_low: center - half,
            ci_high: center + half,
            n,
        },
        ensemble,
    ))
}

/// Monte Carlo value of `E[1_{tau > T} gamma(T) Phi(y(T))]` with its standard
/// error, reduced with compensated sums in path order.
pub fn weighted_terminal_functional<F>(ensemble: &PathEnsemble, phi: F) -> WeightedEstimate
where
    F: Fn(f64) -> f64,
{
    let mut sum = Kahan::default();
    let mut sum_sq = Kahan::default();
    let n = ensemble.summaries.len();
    for s in &ensemble.summaries {
        let v = if s.survived() {
            let (_, gamma) = girsanov_weight(s);
            gamma * phi(s.final_y)
        } else {
            0.0
        };
        sum.add(v);
        sum_sq.add(v * v);
    }
    let mean = sum.value() / n as f64;
    let var = (sum_sq.value() / n as f64 - mean * mean).max(0.0);
    let se = (var / n as f64).sqrt();
    WeightedEstimate {
        estimate: mean,
        std_error: se,
        ci_low: mean - 1.96 * se,
        ci_high: mean + 1.96 * se,
        n,
    }
}

/// Result of the probabilistic-representation cross-check: the Monte Carlo
/// functional against the tree-side pairing `<p(., T), Phi>`.
#[derive(Debug, Clone, Copy)]
pub struct FeynmanKacReport {
    pub mc_value: f64,
    pub mc_std_error: f64,
    pub tree_value: f64,
    pub gap: f64,
}

/// Compare `E[1_{tau >= T} gamma(T) Phi(y(T))]` against a tree-computed value
/// of the same functional.
pub fn feynman_kac_check<F>(
    model: &McModel,
    law: InitialLaw,
    phi: F,
    tree_value: f64,
    opts: &McOptions,
) -> Result<FeynmanKacReport>
where
    F: Fn(f64) -> f64,
{
    let ensemble = simulate_paths(model, law, opts)?;
    let est = weighted_terminal_functional(&ensemble, phi);
    Ok(FeynmanKacReport {
        mc_value: est.estimate,
        mc_std_error: est.std_error,
        tree_value,
        gap: (est.estimate - tree_value).abs(),
    })
}

/// Closed-form Dirichlet survival for `dy = sigma dw` on (x_min, x_max):
/// the eigen-series reference the Monte Carlo estimates are checked against.
pub fn survival_series(x_min: f64, x_max: f64, sigma: f64, t: f64, law: InitialLaw) -> f64 {
    let w = x_max - x_min;
    let mut acc = 0.0;
    for k in 1..=10_000usize {
        let kf = k as f64;
        let decay =
            (-kf * kf * std::f64::consts::PI.powi(2) * sigma * sigma * t / (2.0 * w * w)).exp();
        if decay < 1e-300 {
            break;
        }
        let overlap_one = if k % 2 == 1 {
            2.0 * w / (kf * std::f64::consts::PI)
        } else {
            0.0
        };
        let rho_overlap = match law {
            InitialLaw::Point(x0) => (kf * std::f64::consts::PI * (x0 - x_min) / w).sin(),
            InitialLaw::SineDensity => {
                if k == 1 {
                    std::f64::consts::PI / 4.0
                } else {
                    0.0
                }
            }
            InitialLaw::Uniform => {
                if k % 2 == 1 {
                    2.0 / (kf * std::f64::consts::PI)
                } else {
                    0.0
                }
            }
        };
        acc += (2.0 / w) * rho_overlap * overlap_one * decay;
    }
    acc
}

/// The exponent of the small-noise solvability condition and the resulting
/// contraction constant nu_2.
#[derive(Debug, Clone, Copy)]
pub struct Nu2Report {
    /// nu_2 at the requested q.
    pub nu2: f64,
    /// `(1/2) sum_i int_0^T sup beta_bar_i^2 dt + log nu`.
    pub smallb_lhs: f64,
    /// Whether the condition is satisfiable (lhs < 0).
    pub satisfiable: bool,
    /// Minimizing q over the search grid.
    pub q_best: f64,
    /// Smallest nu_2 found.
    pub nu2_min: f64,
}

/// Evaluate `nu_2(q) = nu^{1/p} exp((1/p)[log nu + (q/2) S])` with
/// `1/p + 1/q = 1` and `S = sum_i int_0^T sup_x beta_bar_i^2 dt`, and search
/// q > 1 for the minimum.
pub fn evaluate_nu2(q: f64, nu: f64, beta_bar_sq_integral: f64) -> Result<Nu2Report> {
    if q <= 1.0 {
        return Err(Error::Domain(format!("nu_2 requires q > 1, got {q}")));
    }
    if !(0.0 < nu && nu < 1.0) {
        return Err(Error::Domain(format!(
            "nu_2 requires nu in (0, 1), got {nu}"
        )));
    }
    if beta_bar_sq_integral < 0.0 {
        return Err(Error::Domain(
            "the beta_bar integral cannot be negative".into(),
        ));
    }
    let s = beta_bar_sq_integral;
    let nu2_at = |q: f64| -> f64 {
        let inv_p = (q - 1.0) / q;
        (inv_p * nu.ln() + inv_p * (nu.ln() + 0.5 * q * s)).exp()
    };
    let nu2 = nu2_at(q);
    let smallb_lhs = 0.5 * s + nu.ln();

    // grid search for the minimizer, seeded with the stationary point
    // q* = sqrt(-4 log(nu) / S) when it exists
    let mut q_best = q;
    let mut nu2_min = nu2;
    let mut candidates: Vec<f64> = (0..200)
        .map(|i| 1.0 + 1e-3 * (100.0f64 / 1e-3).powf(i as f64 / 199.0))
        .collect();
    if s > 0.0 {
        let q_star = (-4.0 * nu.ln() / s).sqrt();
        if q_star > 1.0 {
            candidates.push(q_star);
        }
    }
    for cand in candidates {
        let v = nu2_at(cand);
        if v < nu2_min {
            nu2_min = v;
            q_best = cand;
        }
    }
    Ok(Nu2Report {
        nu2,
        smallb_lhs,
        satisfiable: smallb_lhs < 0.0,
        q_best,
        nu2_min,
    })
}

/// nu_2 minimized over q, for callers that only need the best constant.
pub fn evaluate_nu2_best(nu: f64, beta_bar_sq_integral: f64) -> Result<Nu2Report> {
    evaluate_nu2(2.0, nu, beta_bar_sq_integral)
}

/// Numerical `sum_i int_0^T sup_x beta_bar_i(x, t)^2 dt` for a model, by
/// dense sampling in x and a left rule in t.
pub fn beta_bar_sq_integral(model: &McModel, n_t: usize, n_x: usize) -> f64 {
    let dt = model.horizon / n_t as f64;
    let mut acc = 0.0;
    for bbar in &model.beta_bar {
        for it in 0..n_t {
            let t = it as f64 * dt;
            let mut sup = 0.0f64;
            for ix in 0..=n_x {
                let x = model.x_min + (model.x_max - model.x_min) * ix as f64 / n_x as f64;
                sup = sup.max(model.eval(bbar, x, t).powi(2));
            }
            acc += sup * dt;
        }
    }
    acc
}
