//! Explicit Runge–Kutta integration on the autodiff tape.
//!
//! Every stage is recorded in the [`Graph`], so gradients reach the initial
//! state and the right-hand side's parameters by ordinary backpropagation
//! through the solver steps. Rejected adaptive attempts stay on the tape as
//! unreachable nodes and cost nothing in the reverse pass.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    /// Adaptive Dormand–Prince 5(4) with dense output.
    Dopri5,
    /// Classic fourth-order Runge–Kutta with a fixed maximum step.
    Rk4,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub method: SolverMethod,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    /// Step bound for [`SolverMethod::Rk4`].
    pub fixed_step: f64,
    /// Any state component above this magnitude aborts integration.
    pub overflow: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: SolverMethod::Dopri5,
            rtol: 1e-5,
            atol: 1e-5,
            max_steps: 10_000,
            fixed_step: 0.01,
            overflow: 1e8,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.rtol) || !positive(self.atol) {
            return Err(Error::Config("solver tolerances must be positive".into()));
        }
        if !positive(self.fixed_step) || !positive(self.overflow) || self.max_steps == 0 {
            return Err(Error::Config(
                "solver fixed_step, overflow and max_steps must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One accepted step: the state moves from `t` to `t_next` using step `h`.
/// `t_next` is stored rather than recomputed so a replay lands on the same
/// floating-point knots.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub h: f64,
    pub t_next: f64,
}

pub struct Solution {
    /// One `1×d` state per requested output time.
    pub states: Vec<Var>,
    pub steps: Vec<StepRecord>,
    pub rejected: usize,
    pub evaluations: usize,
}

const A2: [f64; 1] = [1.0 / 5.0];
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0];
const A6: [f64; 5] = [
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
];
/// Fifth-order weights; also the seventh stage's row (FSAL).
const B: [f64; 6] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
];
/// Fifth minus fourth order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
/// Dense output coefficients.
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

/// `y + h·Σ aᵢ·kᵢ`.
fn stage_input(g: &mut Graph, y: Var, h: f64, a: &[f64], k: &[Var]) -> Var {
    let mut terms = vec![(y, 1.0)];
    terms.extend(k.iter().zip(a).map(|(&ki, &ai)| (ki, h * ai)));
    g.lin_comb(&terms)
}

struct DopriStep {
    y_next: Var,
    k: [Var; 7],
}

fn dopri_step<F>(g: &mut Graph, rhs: &mut F, y: Var, k1: Var, h: f64) -> DopriStep
where
    F: FnMut(&mut Graph, Var) -> Var,
{
    let mut k = vec![k1];
    for a in [&A2[..], &A3[..], &A4[..], &A5[..], &A6[..]] {
        let input = stage_input(g, y, h, a, &k);
        k.push(rhs(g, input));
    }
    let y_next = stage_input(g, y, h, &B, &k);
    k.push(rhs(g, y_next));
    DopriStep {
        y_next,
        k: [k[0], k[1], k[2], k[3], k[4], k[5], k[6]],
    }
}

/// Hermite-style quartic interpolant at `theta ∈ [0, 1]` of the step.
fn dense_output(g: &mut Graph, y0: Var, step: &DopriStep, h: f64, theta: f64) -> Var {
    if theta == 1.0 {
        return step.y_next;
    }
    if theta == 0.0 {
        return y0;
    }
    let t1 = 1.0 - theta;
    let tt = theta * theta * t1;
    let quartic = tt * t1;
    let mut terms = vec![
        (y0, 1.0 - theta + theta * t1 - 2.0 * tt),
        (step.y_next, theta - theta * t1 + 2.0 * tt),
        (step.k[0], h * (theta * t1 - tt + quartic * D[0])),
    ];
    for (k, d) in step.k[2..6].iter().zip(&D[2..6]) {
        terms.push((*k, h * quartic * d));
    }
    terms.push((step.k[6], h * (-tt + quartic * D[6])));
    g.lin_comb(&terms)
}

fn check_state(g: &Graph, y: Var, t: f64, overflow: f64) -> Result<()> {
    let v = g.value(y);
    if !v.is_finite() {
        return Err(Error::Integration {
            t,
            reason: "non-finite state".into(),
        });
    }
    if v.data().iter().any(|x| x.abs() > overflow) {
        return Err(Error::Integration {
            t,
            reason: format!("state magnitude exceeded {overflow:e}"),
        });
    }
    Ok(())
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(Error::InvalidInput("integration needs at least one time".into()));
    }
    if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput(
            "integration times must be finite and strictly ascending".into(),
        ));
    }
    Ok(())
}

/// RMS of `err / (atol + rtol·max(|y0|, |y1|))`.
fn error_norm(err: &[f64], y0: &[f64], y1: &[f64], rtol: f64, atol: f64) -> f64 {
    let sum: f64 = err
        .iter()
        .zip(y0)
        .zip(y1)
        .map(|((e, a), b)| {
            let sk = atol + rtol * a.abs().max(b.abs());
            (e / sk).powi(2)
        })
        .sum();
    (sum / err.len().max(1) as f64).sqrt()
}

/// Hairer's starting step heuristic.
fn initial_step<F>(g: &mut Graph, rhs: &mut F, y0: Var, f0: Var, span: f64, cfg: &SolverConfig) -> f64
where
    F: FnMut(&mut Graph, Var) -> Var,
{
    let y = g.value(y0).data().to_vec();
    let f = g.value(f0).data().to_vec();
    let scaled = |v: &[f64]| -> f64 {
        let s: f64 = v
            .iter()
            .zip(&y)
            .map(|(x, y)| (x / (cfg.atol + cfg.rtol * y.abs())).powi(2))
            .sum();
        (s / v.len().max(1) as f64).sqrt()
    };
    let d0 = scaled(&y);
    let d1 = scaled(&f);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(span);
    let y1 = g.lin_comb(&[(y0, 1.0), (f0, h0)]);
    let f1 = rhs(g, y1);
    let diff: Vec<f64> = g.value(f1).data().iter().zip(&f).map(|(a, b)| a - b).collect();
    let d2 = scaled(&diff) / h0;
    let dmax = d1.max(d2);
    let h1 = if dmax <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / dmax).powf(1.0 / 5.0)
    };
    (100.0 * h0).min(h1).min(span)
}

/// Integrates `dy/dt = rhs(y)` from `y0` at `times[0]` and returns the state
/// at every entry of `times`.
pub fn odeint<F>(g: &mut Graph, y0: Var, times: &[f64], mut rhs: F, cfg: &SolverConfig) -> Result<Solution>
where
    F: FnMut(&mut Graph, Var) -> Var,
{
    check_times(times)?;
    match cfg.method {
        SolverMethod::Dopri5 => dopri5_adaptive(g, y0, times, &mut rhs, cfg),
        SolverMethod::Rk4 => rk4_fixed(g, y0, times, &mut rhs, cfg),
    }
}

fn dopri5_adaptive<F>(g: &mut Graph, y0: Var, times: &[f64], rhs: &mut F, cfg: &SolverConfig) -> Result<Solution>
where
    F: FnMut(&mut Graph, Var) -> Var,
{
    let t_end = *times.last().expect("checked non-empty");
    let mut t = times[0];
    let mut y = y0;
    let mut states = vec![y0];
    let mut next_out = 1;
    let mut steps = Vec::new();
    let mut rejected = 0;
    let mut evaluations = 0;
    if times.len() == 1 {
        return Ok(Solution {
            states,
            steps,
            rejected,
            evaluations,
        });
    }
    check_state(g, y, t, cfg.overflow)?;

    let mut k1 = rhs(g, y);
    evaluations += 1;
    let mut h = initial_step(g, rhs, y, k1, t_end - t, cfg);
    evaluations += 1;

    while next_out < times.len() {
        if steps.len() + rejected >= cfg.max_steps {
            return Err(Error::Integration {
                t,
                reason: format!("exceeded {} solver steps", cfg.max_steps),
            });
        }
        if !(h.is_finite() && h > 1e-14 * t_end.abs().max(1.0)) {
            return Err(Error::Integration {
                t,
                reason: format!("step size collapsed to {h:e}"),
            });
        }
        let last = t + h >= t_end || (t_end - (t + h)) < 1e-12 * t_end.abs().max(1.0);
        if last {
            h = t_end - t;
        }
        let step = dopri_step(g, rhs, y, k1, h);
        evaluations += 6;

        let y_now = g.value(y).data().to_vec();
        let y_new = g.value(step.y_next).data();
        let mut err = vec![0.0; y_now.len()];
        for (i, e) in err.iter_mut().enumerate() {
            *e = h * (0..7).map(|j| E[j] * g.value(step.k[j]).data()[i]).sum::<f64>();
        }
        let err_norm = error_norm(&err, &y_now, y_new, cfg.rtol, cfg.atol);
        let finite = err_norm.is_finite() && g.value(step.y_next).is_finite();

        if finite && err_norm <= 1.0 {
            let t_next = if last { t_end } else { t + h };
            check_state(g, step.y_next, t_next, cfg.overflow)?;
            while next_out < times.len() && times[next_out] <= t_next {
                let theta = if times[next_out] == t_next {
                    1.0
                } else {
                    (times[next_out] - t) / h
                };
                states.push(dense_output(g, y, &step, h, theta));
                next_out += 1;
            }
            steps.push(StepRecord { t, h, t_next });
            t = t_next;
            y = step.y_next;
            k1 = step.k[6];
            let factor = if err_norm == 0.0 {
                10.0
            } else {
                (0.9 * err_norm.powf(-0.2)).clamp(0.2, 10.0)
            };
            h *= factor;
        } else {
            rejected += 1;
            let factor = if finite {
                (0.9 * err_norm.powf(-0.2)).clamp(0.2, 1.0)
            } else {
                0.2
            };
            h *= factor;
        }
    }
    Ok(Solution {
        states,
        steps,
        rejected,
        evaluations,
    })
}

/// Re-runs a recorded step schedule without error control. With the same
/// right-hand side and initial state this reproduces [`odeint`]'s adaptive
/// result exactly; with perturbed parameters it evaluates a fixed
/// discretization, which is what finite-difference gradient checks need.
pub fn odeint_replay<F>(g: &mut Graph, y0: Var, times: &[f64], steps: &[StepRecord], mut rhs: F) -> Result<Solution>
where
    F: FnMut(&mut Graph, Var) -> Var,
{
    check_times(times)?;
    let mut states = vec![y0];
    let mut next_out = 1;
    let mut y = y0;
    let mut evaluations = 0;
    if times.len() == 1 {
        return Ok(Solution {
            states,
            steps: steps.to_vec(),
            rejected: 0,
            evaluations,
        });
    }
    let mut k1 = rhs(g, y);
    evaluations += 1;
    for s in steps {
        let step = dopri_step(g, &mut rhs, y, k1, s.h);
        evaluations += 6;
        while next_out < times.len() && times[next_out] <= s.t_next {
            let theta = if times[next_out] == s.t_next {
                1.0
            } else {
                (times[next_out] - s.t) / s.h
            };
            states.push(dense_output(g, y, &step, s.h, theta));
            next_out += 1;
        }
        y = step.y_next;
        k1 = step.k[6];
    }
    if next_out != times.len() {
        return Err(Error::InvalidInput(
            "replayed schedule ends before the last output time".into(),
        ));
    }
    Ok(Solution {
        states,
        steps: steps.to_vec(),
        rejected: 0,
        evaluations,
    })
}

fn rk4_fixed<F>(g: &mut Graph, y0: Var, times: &[f64], rhs: &mut F, cfg: &SolverConfig) -> Result<Solution>
where
    F: FnMut(&mut Graph, Var) -> Var,
{
    let mut states = vec![y0];
    let mut steps = Vec::new();
    let mut evaluations = 0;
    let mut y = y0;
    for w in times.windows(2) {
        let n = ((w[1] - w[0]) / cfg.fixed_step).ceil().max(1.0) as usize;
        if steps.len() + n > cfg.max_steps {
            return Err(Error::Integration {
                t: w[0],
                reason: format!("exceeded {} solver steps", cfg.max_steps),
            });
        }
        let h = (w[1] - w[0]) / n as f64;
        for i in 0..n {
            let t = w[0] + i as f64 * h;
            let k1 = rhs(g, y);
            let y2 = g.lin_comb(&[(y, 1.0), (k1, 0.5 * h)]);
            let k2 = rhs(g, y2);
            let y3 = g.lin_comb(&[(y, 1.0), (k2, 0.5 * h)]);
            let k3 = rhs(g, y3);
            let y4 = g.lin_comb(&[(y, 1.0), (k3, h)]);
            let k4 = rhs(g, y4);
            y = g.lin_comb(&[(y, 1.0), (k1, h / 6.0), (k2, h / 3.0), (k3, h / 3.0), (k4, h / 6.0)]);
            evaluations += 4;
            let t_next = if i + 1 == n { w[1] } else { t + h };
            check_state(g, y, t_next, cfg.overflow)?;
            steps.push(StepRecord { t, h, t_next });
        }
        states.push(y);
    }
    Ok(Solution {
        states,
        steps,
        rejected: 0,
        evaluations,
    })
}

/// `∫ f` by the trapezoid rule on the (possibly uneven) grid `times`.
pub fn trapezoid(times: &[f64], values: &[f64]) -> f64 {
    trapezoid_weights(times).iter().zip(values).map(|(w, v)| w * v).sum()
}

/// Per-node weights `wᵢ` with `∫ f ≈ Σ wᵢ f(tᵢ)`.
pub fn trapezoid_weights(times: &[f64]) -> Vec<f64> {
    let mut w = vec![0.0; times.len()];
    for (i, pair) in times.windows(2).enumerate() {
        let half = 0.5 * (pair[1] - pair[0]);
        w[i] += half;
        w[i + 1] += half;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    fn linear_rhs(rate: f64) -> impl FnMut(&mut Graph, Var) -> Var {
        move |g: &mut Graph, y: Var| g.scale(y, rate)
    }

    fn terminal(cfg: &SolverConfig, rate: f64, times: &[f64]) -> f64 {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let y0 = g.constant(Tensor::scalar(1.0));
        let sol = odeint(&mut g, y0, times, linear_rhs(rate), cfg).unwrap();
        g.item(*sol.states.last().unwrap())
    }

    #[test]
    fn exponential_growth_and_decay() {
        for method in [SolverMethod::Dopri5, SolverMethod::Rk4] {
            let cfg = SolverConfig {
                method,
                ..Default::default()
            };
            assert!((terminal(&cfg, 1.0, &[0.0, 1.0]) - std::f64::consts::E).abs() < 1e-4);
            assert!((terminal(&cfg, -1.0, &[0.0, 1.0]) - (-1f64).exp()).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_field_is_constant() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let y0 = g.constant(Tensor::row(&[0.3, -1.2]));
        let times = [0.0, 0.2, 0.7, 1.0];
        let sol = odeint(
            &mut g,
            y0,
            &times,
            |g: &mut Graph, y: Var| g.scale(y, 0.0),
            &SolverConfig::default(),
        )
        .unwrap();
        assert_eq!(sol.states.len(), 4);
        for s in sol.states {
            let v = g.value(s).data();
            assert!((v[0] - 0.3).abs() < 1e-15 && (v[1] + 1.2).abs() < 1e-15);
        }
    }

    #[test]
    fn dense_output_matches_analytic_solution() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let y0 = g.constant(Tensor::scalar(1.0));
        let times: Vec<f64> = (0..=40).map(|i| i as f64 * 0.025).collect();
        let sol = odeint(&mut g, y0, &times, linear_rhs(-2.0), &SolverConfig::default()).unwrap();
        assert!(sol.steps.len() < times.len(), "dense output should allow long steps");
        for (t, s) in times.iter().zip(&sol.states) {
            assert!((g.item(*s) - (-2.0 * t).exp()).abs() < 1e-5, "t = {t}");
        }
    }

    #[test]
    fn tighter_tolerance_moves_terminal_state_little() {
        let loose = SolverConfig::default();
        let tight = SolverConfig {
            rtol: 0.5e-5,
            atol: 0.5e-5,
            ..Default::default()
        };
        let a = terminal(&loose, 1.0, &[0.0, 1.0]);
        let b = terminal(&tight, 1.0, &[0.0, 1.0]);
        assert!((a - b).abs() < 10.0 * loose.rtol);
    }

    #[test]
    fn replay_is_bit_identical() {
        let store = ParamStore::new();
        let times = [0.0, 0.13, 0.5, 0.51, 1.0];
        let rhs = |g: &mut Graph, y: Var| {
            let s = g.tanh(y);
            g.scale(s, 3.0)
        };
        let mut g = Graph::new(&store);
        let y0 = g.constant(Tensor::row(&[0.2, -0.4, 1.0]));
        let sol = odeint(&mut g, y0, &times, rhs, &SolverConfig::default()).unwrap();
        let mut g2 = Graph::new(&store);
        let y0b = g2.constant(Tensor::row(&[0.2, -0.4, 1.0]));
        let re = odeint_replay(&mut g2, y0b, &times, &sol.steps, rhs).unwrap();
        for (a, b) in sol.states.iter().zip(&re.states) {
            assert_eq!(g.value(*a).data(), g2.value(*b).data());
        }
    }

    #[test]
    fn blow_up_is_reported() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let y0 = g.constant(Tensor::scalar(1.0));
        // dy/dt = y² explodes at t = 1.
        let err = odeint(
            &mut g,
            y0,
            &[0.0, 2.0],
            |g: &mut Graph, y: Var| g.square(y),
            &SolverConfig::default(),
        );
        assert!(matches!(err, Err(Error::Integration { .. })));
        let cfg = SolverConfig {
            max_steps: 3,
            ..Default::default()
        };
        let mut g = Graph::new(&store);
        let y0 = g.constant(Tensor::scalar(1.0));
        let err = odeint(&mut g, y0, &[0.0, 1.0], linear_rhs(-50.0), &cfg);
        assert!(matches!(err, Err(Error::Integration { .. })));
    }

    #[test]
    fn bad_times_rejected() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let y0 = g.constant(Tensor::scalar(1.0));
        assert!(odeint(&mut g, y0, &[0.0, 0.0], linear_rhs(1.0), &SolverConfig::default()).is_err());
        assert!(odeint(&mut g, y0, &[], linear_rhs(1.0), &SolverConfig::default()).is_err());
    }

    #[test]
    fn gradient_through_solver_matches_analytic() {
        // y(1) = y0·e^{a}; d y(1)/d y0 = e^{a}.
        let mut store = ParamStore::new();
        let p = store.add("y0", Tensor::scalar(1.5));
        let mut g = Graph::new(&store);
        let y0 = g.param(p);
        let sol = odeint(&mut g, y0, &[0.0, 1.0], linear_rhs(0.7), &SolverConfig::default()).unwrap();
        let out = *sol.states.last().unwrap();
        let grads = g.backward(out);
        assert!((grads.get(p).unwrap().item() - 0.7f64.exp()).abs() < 1e-4);
    }

    #[test]
    fn trapezoid_is_exact_for_linear_integrands() {
        let times = [0.0, 0.1, 0.35, 0.36, 1.0];
        assert!((trapezoid(&times, &[1.0; 5]) - 1.0).abs() < 1e-10);
        let lin: Vec<f64> = times.iter().map(|t| 2.0 * t + 1.0).collect();
        assert!((trapezoid(&times, &lin) - 2.0).abs() < 1e-10);
        assert_eq!(trapezoid(&[0.5], &[3.0]), 0.0);
    }
}
