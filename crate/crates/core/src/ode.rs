//! Adaptive Dormand-Prince 5(4) integrator with the free 4th-order dense
//! output, for small nonstiff systems.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SromError};

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];

const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];

/// 5th-order weights (identical to the last row of `A`; FSAL).
const B: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];

/// Difference between the 5th- and embedded 4th-order weights.
const E: [f64; 7] = [
    -71.0 / 57600.0,
    0.0,
    71.0 / 16695.0,
    -71.0 / 1920.0,
    17253.0 / 339200.0,
    -22.0 / 525.0,
    1.0 / 40.0,
];

/// Dense-output polynomial coefficients (powers 1..4 of the step fraction).
const P: [[f64; 4]; 7] = [
    [
        1.0,
        -8048581381.0 / 2820520608.0,
        8663915743.0 / 2820520608.0,
        -12715105075.0 / 11282082432.0,
    ],
    [0.0, 0.0, 0.0, 0.0],
    [
        0.0,
        131558114200.0 / 32700410799.0,
        -68118460800.0 / 10900136933.0,
        87487479700.0 / 32700410799.0,
    ],
    [
        0.0,
        -1754552775.0 / 470086768.0,
        14199869525.0 / 1410260304.0,
        -10690763975.0 / 1880347072.0,
    ],
    [
        0.0,
        127303824393.0 / 49829197408.0,
        -318862633887.0 / 49829197408.0,
        701980252875.0 / 199316789632.0,
    ],
    [
        0.0,
        -282668133.0 / 205662961.0,
        2019193451.0 / 616988883.0,
        -1453857185.0 / 822651844.0,
    ],
    [
        0.0,
        40617522.0 / 29380423.0,
        -110615467.0 / 29380423.0,
        69997945.0 / 29380423.0,
    ],
];

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;
const ERROR_EXPONENT: f64 = -1.0 / 5.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Abort when `||y|| > blowup_factor * (1 + ||y0||)`.
    pub blowup_factor: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-6,
            atol: 1e-9,
            blowup_factor: 1e6,
            max_steps: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OdeStats {
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
}

fn rms_norm(v: &DVector<f64>, scale: &DVector<f64>) -> f64 {
    let n = v.len().max(1) as f64;
    (v.iter()
        .zip(scale.iter())
        .map(|(x, s)| (x / s).powi(2))
        .sum::<f64>()
        / n)
        .sqrt()
}

fn initial_step<F>(f: &mut F, t0: f64, y0: &DVector<f64>, f0: &DVector<f64>, opts: &OdeOptions) -> f64
where
    F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
{
    let scale = y0.map(|y| opts.atol + y.abs() * opts.rtol);
    let d0 = rms_norm(y0, &scale);
    let d1 = rms_norm(f0, &scale);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let y1 = y0 + f0 * h0;
    let f1 = f(t0 + h0, &y1);
    let d2 = rms_norm(&(f1 - f0), &scale) / h0;
    let h1 = if d1 <= 1e-15 && d2 <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 5.0)
    };
    (100.0 * h0).min(h1)
}

/// Integrate `dy/dt = f(t, y)` from `t_eval[0]` and return the solution at
/// every entry of `t_eval` (ascending) as columns.
pub fn integrate<F>(
    mut f: F,
    y0: &DVector<f64>,
    t_eval: &[f64],
    opts: &OdeOptions,
) -> Result<(DMatrix<f64>, OdeStats)>
where
    F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
{
    let n = y0.len();
    let mut out = DMatrix::zeros(n, t_eval.len());
    let mut stats = OdeStats::default();
    if t_eval.is_empty() {
        return Ok((out, stats));
    }
    if t_eval.windows(2).any(|w| w[1] < w[0]) {
        return Err(SromError::InvalidArgument("t_eval must be ascending".into()));
    }
    if y0.iter().any(|v| !v.is_finite()) {
        return Err(SromError::NonFinite);
    }
    let t0 = t_eval[0];
    let t_end = *t_eval.last().unwrap();
    let limit = opts.blowup_factor * (1.0 + y0.norm());

    out.set_column(0, y0);
    let mut next_out = 1;
    while next_out < t_eval.len() && t_eval[next_out] == t0 {
        out.set_column(next_out, y0);
        next_out += 1;
    }

    let mut t = t0;
    let mut y = y0.clone();
    let mut fy = f(t, &y);
    stats.rhs_evals += 1;
    if t_end == t0 {
        return Ok((out, stats));
    }
    let mut h = initial_step(&mut f, t, &y, &fy, opts);
    stats.rhs_evals += 1;
    let mut k: Vec<DVector<f64>> = vec![DVector::zeros(n); 7];

    while t < t_end {
        if stats.accepted + stats.rejected >= opts.max_steps {
            return Err(SromError::StepSizeUnderflow { time: t });
        }
        let min_step = 10.0 * f64::EPSILON * t.abs().max(1.0);
        if h < min_step {
            return Err(SromError::StepSizeUnderflow { time: t });
        }
        h = h.min(t_end - t);

        k[0] = fy.clone();
        for s in 1..7 {
            let mut ys = y.clone();
            for (j, kj) in k.iter().enumerate().take(s) {
                let a = A[s][j];
                if a != 0.0 {
                    ys.axpy(h * a, kj, 1.0);
                }
            }
            k[s] = f(t + C[s] * h, &ys);
        }
        stats.rhs_evals += 6;
        let mut y_new = y.clone();
        for (s, ks) in k.iter().enumerate().take(6) {
            if B[s] != 0.0 {
                y_new.axpy(h * B[s], ks, 1.0);
            }
        }
        // k[6] was evaluated at the 5th-order solution (FSAL).
        let mut err = DVector::zeros(n);
        for (s, ks) in k.iter().enumerate() {
            if E[s] != 0.0 {
                err.axpy(h * E[s], ks, 1.0);
            }
        }
        let scale = DVector::from_fn(n, |i, _| opts.atol + y[i].abs().max(y_new[i].abs()) * opts.rtol);
        let err_norm = rms_norm(&err, &scale);
        if !err_norm.is_finite() || y_new.iter().any(|v| !v.is_finite()) {
            stats.rejected += 1;
            h *= MIN_FACTOR;
            continue;
        }
        if err_norm > 1.0 {
            stats.rejected += 1;
            h *= (SAFETY * err_norm.powf(ERROR_EXPONENT)).max(MIN_FACTOR);
            continue;
        }
        stats.accepted += 1;
        let t_new = if t_end - (t + h) <= 4.0 * f64::EPSILON * t_end.abs().max(1.0) {
            t_end
        } else {
            t + h
        };

        // Dense output for every requested time in (t, t_new].
        while next_out < t_eval.len() && t_eval[next_out] <= t_new {
            let theta = (t_eval[next_out] - t) / h;
            let powers = [theta, theta * theta, theta.powi(3), theta.powi(4)];
            let mut yi = y.clone();
            for (s, ks) in k.iter().enumerate() {
                let w: f64 = P[s].iter().zip(powers.iter()).map(|(p, x)| p * x).sum();
                if w != 0.0 {
                    yi.axpy(h * w, ks, 1.0);
                }
            }
            if t_eval[next_out] == t_new {
                yi.copy_from(&y_new);
            }
            out.set_column(next_out, &yi);
            next_out += 1;
        }

        let norm = y_new.norm();
        if norm > limit {
            return Err(SromError::BlowUp { time: t_new, norm });
        }
        t = t_new;
        y = y_new;
        fy = k[6].clone();
        let factor = if err_norm == 0.0 {
            MAX_FACTOR
        } else {
            (SAFETY * err_norm.powf(ERROR_EXPONENT)).clamp(MIN_FACTOR, MAX_FACTOR)
        };
        h *= factor;
    }
    Ok((out, stats))
}
