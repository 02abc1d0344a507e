//! Conjugate gradients on a [`QuadraticModel`] and the two-batch debiased variant.
//!
//! CG is run in its normalized form: with `d_p = s_p/‖s_p‖` the step is
//! `θ_{p+1} = θ_p + τ_p d_p` with `τ_p = α_p‖s_p‖ = −d_pᵀr_p / d_pᵀH d_p`
//! and the residual is updated as `r_{p+1} = r_p + τ_p H d_p`, which is
//! `r_p + α_p H s_p`. The debiased process applies exactly the same update
//! rule to the directions of the first process but measures slope and
//! curvature on a second quadratic, so both processes coincide bitwise when
//! the two quadratics do.

use serde::Serialize;

use crate::linalg::{axpy, dot, norm};
use crate::quadratic::{Direction, QuadraticModel};
use crate::{Error, Result};

/// Debiased curvatures below this magnitude count as non-positive.
pub const CURVATURE_GUARD: f64 = 1e-14;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CgConfig {
    /// Stop once `‖r_p‖ ≤ tol`.
    pub tol: f64,
    pub max_iter: usize,
}

impl CgConfig {
    pub fn new(tol: f64, max_iter: usize) -> Result<Self> {
        let cfg = Self { tol, max_iter };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::validation(format!("CG tolerance {} must be positive", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::validation("CG needs at least one iteration"));
        }
        Ok(())
    }
}

impl Default for CgConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    MaxIter,
    Tolerance,
    /// A search direction with non-positive curvature was met; the last
    /// iterate before it is returned.
    NegativeCurvature,
}

impl Termination {
    pub fn name(self) -> &'static str {
        match self {
            Termination::MaxIter => "max_iter",
            Termination::Tolerance => "tolerance",
            Termination::NegativeCurvature => "negative_curvature",
        }
    }
}

/// Iterates, directions and step sizes of one CG-type run.
///
/// `iterates` has one more entry than `directions` and `magnitudes`;
/// `gradients[p] = ∇q(iterates[p])` of the quadratic that measured the steps.
#[derive(Clone, Debug)]
pub struct CgTrace {
    pub iterates: Vec<Vec<f64>>,
    pub directions: Vec<Direction>,
    pub magnitudes: Vec<f64>,
    pub gradients: Vec<Vec<f64>>,
    pub residual_norms: Vec<f64>,
    /// `α_p` of the unnormalized recursion; empty for debiased traces.
    pub alphas: Vec<f64>,
    /// `β_{p+1}`; empty for debiased traces.
    pub cg_betas: Vec<f64>,
    pub termination: Termination,
    /// Curvature products spent on this trace.
    pub matvecs: usize,
}

impl CgTrace {
    fn start(theta0: &[f64], gradient: Vec<f64>) -> Self {
        Self {
            iterates: vec![theta0.to_vec()],
            residual_norms: vec![norm(&gradient)],
            gradients: vec![gradient],
            directions: Vec::new(),
            magnitudes: Vec::new(),
            alphas: Vec::new(),
            cg_betas: Vec::new(),
            termination: Termination::MaxIter,
            matvecs: 0,
        }
    }

    pub fn iterations(&self) -> usize {
        self.magnitudes.len()
    }

    pub fn last(&self) -> &[f64] {
        self.iterates.last().expect("trace holds the start point")
    }

    /// `θ_K − θ₀`
    pub fn displacement(&self) -> Vec<f64> {
        self.last().iter().zip(&self.iterates[0]).map(|(a, b)| a - b).collect()
    }

    /// Appends `θ_{p+1} = θ_p + τ d` and the gradient update `g += τ·hd`.
    fn step(&mut self, d: Direction, tau: f64, hd: &[f64]) {
        let mut next = self.last().to_vec();
        axpy(tau, d.as_slice(), &mut next);
        let mut g = self.gradients.last().expect("start gradient").clone();
        axpy(tau, hd, &mut g);
        self.iterates.push(next);
        self.residual_norms.push(norm(&g));
        self.gradients.push(g);
        self.directions.push(d);
        self.magnitudes.push(tau);
    }
}

/// Incremental CG on one quadratic, one curvature product per step.
struct CgState<'a> {
    q: &'a QuadraticModel,
    tol: f64,
    search: Vec<f64>,
    rr: f64,
    trace: CgTrace,
    done: bool,
}

impl<'a> CgState<'a> {
    fn new(q: &'a QuadraticModel, tol: f64) -> Self {
        let r = q.gradient().to_vec();
        let rr = dot(&r, &r);
        let search = r.iter().map(|v| -v).collect();
        let mut trace = CgTrace::start(q.anchor(), r);
        let done = rr.sqrt() <= tol;
        if done {
            trace.termination = Termination::Tolerance;
        }
        Self {
            q,
            tol,
            search,
            rr,
            trace,
            done,
        }
    }

    /// Takes one step; returns the direction and magnitude used, or `None`
    /// once the run has terminated.
    fn advance(&mut self) -> Result<Option<Direction>> {
        if self.done {
            return Ok(None);
        }
        let s_norm = norm(&self.search);
        let d = match Direction::normalize(&self.search) {
            Ok(d) => d,
            Err(_) => {
                self.trace.termination = Termination::Tolerance;
                self.done = true;
                return Ok(None);
            }
        };
        let hd = self.q.curvature().matvec(d.as_slice())?;
        self.trace.matvecs += 1;
        let curvature = dot(d.as_slice(), &hd);
        if curvature <= 0.0 || !curvature.is_finite() {
            self.trace.termination = Termination::NegativeCurvature;
            self.done = true;
            return Ok(None);
        }
        let r = self.trace.gradients.last().expect("gradient");
        let tau = -dot(d.as_slice(), r) / curvature;
        self.trace.alphas.push(tau / s_norm);
        self.trace.step(d.clone(), tau, &hd);

        let r = self.trace.gradients.last().expect("gradient");
        let rr_next = dot(r, r);
        if rr_next.sqrt() <= self.tol {
            self.trace.termination = Termination::Tolerance;
            self.done = true;
        } else {
            let beta = rr_next / self.rr;
            self.trace.cg_betas.push(beta);
            for (s, ri) in self.search.iter_mut().zip(r) {
                *s = -ri + beta * *s;
            }
            self.rr = rr_next;
        }
        Ok(Some(d))
    }
}

/// Minimizes `q` by CG starting from its anchor (`x₀ = 0`).
pub fn cg_minimize(q: &QuadraticModel, config: &CgConfig) -> Result<CgTrace> {
    config.validate()?;
    let mut state = CgState::new(q, config.tol);
    for _ in 0..config.max_iter {
        if state.advance()?.is_none() {
            break;
        }
    }
    Ok(state.trace)
}

/// `θ* − θ₀` for the CG approximation `θ*` of `argmin q`, with the trace.
pub fn newton_step(q: &QuadraticModel, config: &CgConfig) -> Result<(Vec<f64>, CgTrace)> {
    let trace = cg_minimize(q, config)?;
    Ok((trace.displacement(), trace))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DebiasMode {
    /// Alternate one direction step and one debiased step; only the cached
    /// gradient of the second quadratic is carried along.
    #[default]
    Interleaved,
    /// Run the direction process to completion, then replay its directions.
    Sequential,
}

/// Output of [`debiased_cg`].
#[derive(Clone, Debug)]
pub struct DebiasedRun {
    /// Plain CG on the direction quadratic.
    pub directions: CgTrace,
    /// The same directions with magnitudes measured on the second quadratic.
    pub debiased: CgTrace,
}

impl DebiasedRun {
    pub fn total_matvecs(&self) -> usize {
        self.directions.matvecs + self.debiased.matvecs
    }
}

/// One debiased step along `d` from the last iterate of `trace`, measured on `q`.
fn debiased_step(q: &QuadraticModel, trace: &mut CgTrace, d: &Direction) -> Result<bool> {
    let hd = q.curvature().matvec(d.as_slice())?;
    trace.matvecs += 1;
    let curvature = dot(d.as_slice(), &hd);
    if curvature <= 0.0 || curvature.abs() < CURVATURE_GUARD || !curvature.is_finite() {
        trace.termination = Termination::NegativeCurvature;
        return Ok(false);
    }
    let slope = dot(d.as_slice(), trace.gradients.last().expect("gradient"));
    trace.step(d.clone(), -slope / curvature, &hd);
    Ok(true)
}

/// CG directions from `q_dir`, step sizes from `q_mag`.
///
/// Runs at most `min(k, config.max_iter)` iterations. Each iteration costs
/// one product with each curvature. If the debiasing curvature along a
/// direction is not positive both processes stop.
pub fn debiased_cg(
    q_dir: &QuadraticModel,
    q_mag: &QuadraticModel,
    k: usize,
    config: &CgConfig,
    mode: DebiasMode,
) -> Result<DebiasedRun> {
    config.validate()?;
    if q_dir.dim() != q_mag.dim() {
        return Err(Error::validation(format!(
            "quadratics of dimension {} and {}",
            q_dir.dim(),
            q_mag.dim()
        )));
    }
    if q_dir.anchor() != q_mag.anchor() {
        return Err(Error::validation(
            "debiased CG needs both quadratics anchored at the same point",
        ));
    }
    let iterations = k.min(config.max_iter);
    let mut state = CgState::new(q_dir, config.tol);
    let mut debiased = CgTrace::start(q_mag.anchor(), q_mag.gradient().to_vec());
    match mode {
        DebiasMode::Interleaved => {
            for _ in 0..iterations {
                let Some(d) = state.advance()? else { break };
                if !debiased_step(q_mag, &mut debiased, &d)? {
                    state.trace.termination = Termination::NegativeCurvature;
                    break;
                }
            }
        }
        DebiasMode::Sequential => {
            for _ in 0..iterations {
                if state.advance()?.is_none() {
                    break;
                }
            }
            for d in &state.trace.directions {
                if !debiased_step(q_mag, &mut debiased, d)? {
                    break;
                }
            }
        }
    }
    if debiased.termination != Termination::NegativeCurvature {
        debiased.termination = state.trace.termination;
    }
    Ok(DebiasedRun {
        directions: state.trace,
        debiased,
    })
}
