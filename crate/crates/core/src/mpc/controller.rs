use std::collections::{BTreeSet, HashMap};

use log::{debug, warn};
use nalgebra::DVector;

use super::ocp::{discretize, propagate_tubes, solve_ocp, Iterate, OcpProblem, Target};
use super::{OcpSolution, OcpStatus};
use crate::error::{Error, Result};
use crate::tighten::{compute_terminal_set, solve_steady_state, SteadyState, TerminalSet};

/// Receding-horizon memory: the carried-over off-manifold bound, the previous
/// solution for warm starts and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub s0: f64,
    pub previous: Option<OcpSolution>,
    pub k: usize,
    /// Steady pair currently tracked (the governed reference for the robust scheme).
    pub steady: SteadyState,
    pub terminal: Option<TerminalSet>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepStatus {
    Optimal,
    /// A soft scheme returned its last iterate without full convergence.
    Suboptimal,
    /// The shifted previous candidate was applied.
    Fallback,
}

impl StepStatus {
    pub fn name(self) -> &'static str {
        match self {
            StepStatus::Optimal => "optimal",
            StepStatus::Suboptimal => "suboptimal",
            StepStatus::Fallback => "fallback",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub u: DVector<f64>,
    pub status: StepStatus,
    pub solution: OcpSolution,
    /// Fraction of the way from the previous governed reference to the target.
    pub theta: f64,
    pub scp_iters: usize,
    pub attempts: usize,
}

pub struct Controller<'a> {
    problem: OcpProblem<'a>,
    state: ControllerState,
    steady_cache: HashMap<Vec<u64>, SteadyState>,
    faults: BTreeSet<usize>,
}

impl<'a> Controller<'a> {
    /// Controller at rest, with the origin as the initial steady pair and `s0` as
    /// the initial off-manifold bound.
    pub fn new(problem: OcpProblem<'a>, s0: f64) -> Result<Self> {
        problem.cfg.validate(problem.rom.n(), problem.rom.m())?;
        problem.params.validate()?;
        let steady = SteadyState::origin(problem.rom);
        let terminal = if problem.cfg.scheme.is_robust() {
            Some(compute_terminal_set(problem.rom, problem.params, problem.cons, &steady, problem.cfg.input_norm)?)
        } else {
            None
        };
        Ok(Self {
            problem,
            state: ControllerState { s0, previous: None, k: 0, steady, terminal },
            steady_cache: HashMap::new(),
            faults: BTreeSet::new(),
        })
    }

    pub fn state(&self) -> &ControllerState {
        &self.state
    }

    pub fn problem(&self) -> &OcpProblem<'a> {
        &self.problem
    }

    /// Forces the solver path to fail at step `k` so the fallback is exercised.
    pub fn inject_fault(&mut self, k: usize) {
        self.faults.insert(k);
    }

    fn steady_for(&mut self, y: &DVector<f64>) -> Result<SteadyState> {
        let key: Vec<u64> = y.iter().map(|v| v.to_bits()).collect();
        if let Some(s) = self.steady_cache.get(&key) {
            return Ok(s.clone());
        }
        let st = solve_steady_state(self.problem.rom, y, &self.problem.cfg.input_box, Some(&self.state.steady))?;
        self.steady_cache.insert(key, st.clone());
        Ok(st)
    }

    /// Shifted previous solution appended with the steady input, or a rollout of
    /// the steady input from the measurement.
    fn candidate(&self, x_r: &DVector<f64>, u_tail: &DVector<f64>) -> Iterate {
        let disc = discretize(self.problem.rom, self.problem.params, self.problem.cfg);
        match &self.state.previous {
            Some(prev) => {
                let mut u: Vec<DVector<f64>> = prev.u_traj[1..].to_vec();
                u.push(u_tail.clone());
                let z0 = if self.problem.cfg.scheme.is_robust() && self.problem.cfg.free_initial_state {
                    prev.z_traj[1].clone()
                } else {
                    x_r.clone()
                };
                Iterate::rollout(&disc, z0, u)
            }
            None => Iterate::rollout(&disc, x_r.clone(), vec![u_tail.clone(); self.problem.cfg.horizon]),
        }
    }

    /// One receding-horizon step: solve, apply the first input, carry `s` over.
    pub fn step(&mut self, x_r: &DVector<f64>, y_target: &DVector<f64>) -> Result<StepOutcome> {
        let k = self.state.k;
        let outcome = if self.faults.contains(&k) {
            warn!("step {k}: injected solver failure");
            self.fallback(x_r)?
        } else if self.problem.cfg.scheme.is_robust() {
            self.robust_step(x_r, y_target)?
        } else {
            self.soft_step(x_r, y_target)?
        };
        self.state.s0 = outcome.solution.s_traj[1];
        self.state.previous = Some(outcome.solution.clone());
        self.state.k += 1;
        Ok(outcome)
    }

    fn soft_step(&mut self, x_r: &DVector<f64>, y_target: &DVector<f64>) -> Result<StepOutcome> {
        match self.steady_for(y_target) {
            Ok(st) => self.state.steady = st,
            Err(e) => debug!("keeping previous steady pair: {e}"),
        }
        let steady = self.state.steady.clone();
        let guess = self.candidate(x_r, &steady.u);
        let sol = solve_ocp(&self.problem, x_r, 0.0, &guess, &Target { steady: &steady, terminal: None })?;
        let status = match sol.status {
            OcpStatus::Optimal => StepStatus::Optimal,
            OcpStatus::MaxIters => StepStatus::Suboptimal,
            OcpStatus::Infeasible => return self.fallback(x_r),
        };
        Ok(StepOutcome { u: sol.u_traj[0].clone(), status, scp_iters: sol.scp_iters, solution: sol, theta: 1.0, attempts: 1 })
    }

    /// Solves with the reference moved by `theta` from the governed one. Returns the
    /// solution with its steady pair and terminal set when optimal.
    fn attempt(
        &mut self,
        x_r: &DVector<f64>,
        y_target: &DVector<f64>,
        theta: f64,
        guess: &Iterate,
        iters: &mut usize,
    ) -> Result<Option<(OcpSolution, SteadyState, TerminalSet)>> {
        let (steady, terminal) = if theta == 0.0 {
            (self.state.steady.clone(), self.state.terminal.clone().expect("robust controller has a terminal set"))
        } else {
            let y_prev = self.problem.rom.output(&self.state.steady.z);
            let y = &y_prev + (y_target - &y_prev) * theta;
            let steady = if theta == 1.0 {
                self.steady_for(&y)
            } else {
                solve_steady_state(self.problem.rom, &y, &self.problem.cfg.input_box, Some(&self.state.steady))
            };
            let Ok(steady) = steady else { return Ok(None) };
            match compute_terminal_set(self.problem.rom, self.problem.params, self.problem.cons, &steady, self.problem.cfg.input_norm) {
                Ok(ts) => (steady, ts),
                Err(Error::TerminalInfeasible(_)) => return Ok(None),
                Err(e) => return Err(e),
            }
        };
        let sol = solve_ocp(&self.problem, x_r, self.state.s0, guess, &Target { steady: &steady, terminal: Some(&terminal) })?;
        *iters += sol.scp_iters;
        Ok((sol.status == OcpStatus::Optimal).then_some((sol, steady, terminal)))
    }

    fn robust_step(&mut self, x_r: &DVector<f64>, y_target: &DVector<f64>) -> Result<StepOutcome> {
        let u_tail = self.state.steady.u.clone();
        let guess = self.candidate(x_r, &u_tail);
        let mut iters = 0;
        let mut attempts = 0;
        let y_prev = self.problem.rom.output(&self.state.steady.z);
        let at_target = (y_target - &y_prev).amax() <= 1e-12;
        let mut found = None;
        if !at_target {
            attempts += 1;
            if let Some(r) = self.attempt(x_r, y_target, 1.0, &guess, &mut iters)? {
                found = Some((r, 1.0));
            } else {
                // Bisection between the governed reference (feasible) and the target.
                let (mut lo, mut hi) = (0.0, 1.0);
                for _ in 0..self.problem.cfg.governor_steps {
                    let mid = 0.5 * (lo + hi);
                    attempts += 1;
                    match self.attempt(x_r, y_target, mid, &guess, &mut iters)? {
                        Some(r) => {
                            lo = mid;
                            found = Some((r, mid));
                        }
                        None => hi = mid,
                    }
                }
            }
        }
        if found.is_none() {
            attempts += 1;
            if let Some(r) = self.attempt(x_r, y_target, 0.0, &guess, &mut iters)? {
                found = Some((r, if at_target { 1.0 } else { 0.0 }));
            }
        }
        match found {
            Some(((sol, steady, terminal), theta)) => {
                self.state.steady = steady;
                self.state.terminal = Some(terminal);
                Ok(StepOutcome { u: sol.u_traj[0].clone(), status: StepStatus::Optimal, solution: sol, theta, scp_iters: iters, attempts })
            }
            None => {
                warn!("step {}: no feasible solution, applying the shifted candidate", self.state.k);
                self.fallback(x_r)
            }
        }
    }

    /// The shifted previous solution, appended with the steady input.
    fn fallback(&mut self, x_r: &DVector<f64>) -> Result<StepOutcome> {
        if self.state.previous.is_none() {
            return Err(Error::InitialInfeasible);
        }
        let u_tail = self.state.steady.u.clone();
        let it = self.candidate(x_r, &u_tail);
        let disc = discretize(self.problem.rom, self.problem.params, self.problem.cfg);
        let defect = it.u.iter().enumerate().map(|(k, u)| (disc.step(&it.z[k], u) - &it.z[k + 1]).amax()).fold(0.0, f64::max);
        let (s_traj, delta_traj) = if self.problem.cfg.scheme.is_robust() {
            propagate_tubes(&self.problem, &it, x_r, self.state.s0)
        } else {
            (vec![0.0; it.z.len()], vec![0.0; it.z.len()])
        };
        let sol = OcpSolution {
            u_traj: it.u,
            z_traj: it.z,
            s_traj,
            delta_traj,
            cost: f64::NAN,
            status: OcpStatus::Infeasible,
            scp_iters: 0,
            defect,
            max_constraint: f64::NAN,
        };
        Ok(StepOutcome { u: sol.u_traj[0].clone(), status: StepStatus::Fallback, solution: sol, theta: 0.0, scp_iters: 0, attempts: 0 })
    }
}
