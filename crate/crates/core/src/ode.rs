//! Adaptive Dormand-Prince 5(4) integration with domain-exit handling.
//!
//! Systems report their distance to the chart boundary. Steps are capped at
//! half the time needed to reach it at the current chart speed, so a
//! trajectory heading out of the domain approaches the boundary
//! geometrically and is stopped once the clearance falls below
//! `exit_clearance`.

use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    HorizonReached,
    DomainExit,
    StepUnderflow,
}

#[derive(Clone, Debug)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub h_init: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub max_steps: usize,
    pub exit_clearance: f64,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions {
            rtol: 1e-10,
            atol: 1e-12,
            h_init: 1e-2,
            h_min: 1e-14,
            h_max: f64::INFINITY,
            max_steps: 1_000_000,
            exit_clearance: 1e-10,
        }
    }
}

impl OdeOptions {
    pub fn with_tol(tol: f64) -> Self {
        OdeOptions { rtol: tol, atol: tol * 1e-2, ..Default::default() }
    }
}

pub trait OdeSystem {
    fn dim(&self) -> usize;

    /// `dy = f(t, y)`; `Err` when the state cannot be evaluated (outside the domain).
    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<(), ()>;

    /// Chart distance to the boundary and chart speed at `y`.
    fn clearance(&self, _y: &[f64]) -> (f64, f64) {
        (f64::INFINITY, 0.0)
    }
}

#[derive(Clone, Debug)]
pub struct OdeSolution {
    pub ts: Vec<f64>,
    pub ys: Vec<Vec<f64>>,
    pub termination: Termination,
    pub rejected: usize,
}

impl OdeSolution {
    pub fn last(&self) -> &[f64] {
        self.ys.last().expect("solution has at least the initial state")
    }

    pub fn t_end(&self) -> f64 {
        *self.ts.last().expect("solution has at least the initial time")
    }
}

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Integrates from `t0` to `t1` (> `t0`), recording every accepted step.
pub fn integrate<S: OdeSystem + ?Sized>(sys: &S, t0: f64, y0: &[f64], t1: f64, opts: &OdeOptions) -> OdeSolution {
    let n = sys.dim();
    let mut ts = vec![t0];
    let mut ys = vec![y0.to_vec()];
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut k = vec![vec![0.0; n]; 7];
    let mut tmp = vec![0.0; n];
    let mut rejected = 0;
    if sys.rhs(t, &y, &mut k[0]).is_err() {
        return OdeSolution { ts, ys, termination: Termination::DomainExit, rejected };
    }
    let mut h = opts.h_init.min(t1 - t0);
    let mut fsal_valid = true;
    for _ in 0..opts.max_steps {
        if t >= t1 {
            return OdeSolution { ts, ys, termination: Termination::HorizonReached, rejected };
        }
        let (clear, speed) = sys.clearance(&y);
        if clear <= opts.exit_clearance {
            return OdeSolution { ts, ys, termination: Termination::DomainExit, rejected };
        }
        if !fsal_valid {
            if sys.rhs(t, &y, &mut k[0]).is_err() {
                return OdeSolution { ts, ys, termination: Termination::DomainExit, rejected };
            }
            fsal_valid = true;
        }
        let mut cap = opts.h_max;
        if speed > 0.0 && clear.is_finite() {
            cap = cap.min(0.5 * clear / speed);
        }
        h = h.min(cap).min(t1 - t);
        if h < opts.h_min {
            return OdeSolution { ts, ys, termination: Termination::StepUnderflow, rejected };
        }
        // stages
        let mut ok = true;
        for s in 1..7 {
            for i in 0..n {
                let mut acc = y[i];
                for j in 0..s {
                    acc += h * A[s][j] * k[j][i];
                }
                tmp[i] = acc;
            }
            let (head, tail) = k.split_at_mut(s);
            let _ = head;
            if sys.rhs(t + C[s] * h, &tmp, &mut tail[0]).is_err() {
                ok = false;
                break;
            }
        }
        if !ok {
            rejected += 1;
            h *= 0.25;
            continue;
        }
        // tmp holds the 5th-order solution (stage 7 is evaluated there).
        let mut err = 0.0;
        for i in 0..n {
            let mut e = 0.0;
            for s in 0..7 {
                e += h * (B5[s] - B4[s]) * k[s][i];
            }
            let sc = opts.atol + opts.rtol * y[i].abs().max(tmp[i].abs());
            err += (e / sc).powi(2);
        }
        let err = (err / n as f64).sqrt();
        if err <= 1.0 || h <= opts.h_min * 2.0 {
            // Reject steps that end outside the domain by clearance.
            let (c_new, _) = sys.clearance(&tmp);
            if c_new < 0.0 {
                rejected += 1;
                h *= 0.25;
                continue;
            }
            t = if t1 - (t + h) < 1e-15 * t1.abs().max(1.0) { t1 } else { t + h };
            y.copy_from_slice(&tmp);
            let last = k[6].clone();
            k[0] = last;
            ts.push(t);
            ys.push(y.clone());
            let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h *= fac;
        } else {
            rejected += 1;
            h *= (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
            fsal_valid = true;
        }
    }
    OdeSolution { ts, ys, termination: Termination::StepUnderflow, rejected }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Harmonic;

    impl OdeSystem for Harmonic {
        fn dim(&self) -> usize {
            2
        }
        fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) -> Result<(), ()> {
            dy[0] = y[1];
            dy[1] = -y[0];
            Ok(())
        }
    }

    #[test]
    fn harmonic_oscillator_full_period() {
        let s = integrate(&Harmonic, 0.0, &[1.0, 0.0], std::f64::consts::TAU, &OdeOptions::default());
        assert_eq!(s.termination, Termination::HorizonReached);
        assert_eq!(s.t_end(), std::f64::consts::TAU);
        assert!((s.last()[0] - 1.0).abs() < 1e-9 && s.last()[1].abs() < 1e-9);
    }

    /// Moves left at unit speed; the domain is `x > 0`.
    struct Drift;

    impl OdeSystem for Drift {
        fn dim(&self) -> usize {
            1
        }
        fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) -> Result<(), ()> {
            if y[0] <= 0.0 {
                return Err(());
            }
            dy[0] = -1.0;
            Ok(())
        }
        fn clearance(&self, y: &[f64]) -> (f64, f64) {
            (y[0], 1.0)
        }
    }

    #[test]
    fn exit_is_detected_at_the_boundary() {
        let s = integrate(&Drift, 0.0, &[1.0], 10.0, &OdeOptions::default());
        assert_eq!(s.termination, Termination::DomainExit);
        assert!((s.t_end() - 1.0).abs() < 1e-9);
        assert!(s.ts.len() < 100);
    }
}
