use nalgebra::{DMatrix, DVector};

use super::FitError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmConfig {
    pub max_iters: usize,
    /// Initial damping, relative to the diagonal of `JᵀJ`.
    pub initial_damping: f64,
    /// Scaled gradient tolerance: the largest cosine between the residual and
    /// any Jacobian column.
    pub tol_grad: f64,
    /// Relative step tolerance.
    pub tol_step: f64,
    /// Relative cost tolerance: stop when an accepted step and its model
    /// prediction both reduce the cost by less than this fraction.
    pub tol_cost: f64,
    pub multistart_count: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            max_iters: 400,
            initial_damping: 1e-3,
            tol_grad: 1e-10,
            tol_step: 1e-10,
            tol_cost: 1e-12,
            multistart_count: 8,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        let ok = self.max_iters > 0
            && self.initial_damping > 0.0
            && self.tol_grad > 0.0
            && self.tol_step > 0.0
            && self.tol_cost > 0.0
            && self.multistart_count > 0;
        if ok {
            Ok(())
        } else {
            Err(FitError::InvalidInput(format!(
                "non-positive solver setting in {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Residual is orthogonal to the Jacobian columns (or exactly zero).
    Gradient,
    /// Step shrank below the relative tolerance.
    Step,
    /// Relative cost reduction fell below the tolerance.
    Cost,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::Gradient => "gradient",
            Termination::Step => "step",
            Termination::Cost => "cost",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmReport {
    pub x: DVector<f64>,
    /// Half the squared residual norm at `x`.
    pub cost: f64,
    /// Number of damped steps attempted.
    pub iterations: usize,
    pub termination: Termination,
    /// Cost after the start and after every accepted step.
    pub cost_history: Vec<f64>,
}

fn scaled_gradient(jac: &DMatrix<f64>, r: &DVector<f64>, g: &DVector<f64>) -> f64 {
    let rn = r.norm();
    if rn == 0.0 {
        return 0.0;
    }
    jac.column_iter()
        .zip(g.iter())
        .map(|(col, gj)| {
            let cn = col.norm();
            if cn == 0.0 {
                0.0
            } else {
                gj.abs() / (cn * rn)
            }
        })
        .fold(0.0, f64::max)
}

/// `J` reduced to its triangular factor: `‖Jδ + r‖² = ‖Rδ + Qᵀr‖² + const`.
struct Reduced {
    r: DMatrix<f64>,
    qtr: DVector<f64>,
}

impl Reduced {
    fn new(jac: &DMatrix<f64>, r: &DVector<f64>) -> Self {
        let n = jac.ncols();
        let qr = jac.clone().qr();
        let mut qtr = r.clone();
        qr.q_tr_mul(&mut qtr);
        Reduced {
            r: qr.r(),
            qtr: qtr.rows(0, n).into_owned(),
        }
    }

    /// Least-squares step for `[R; sqrt(mu)·D] δ = [-Qᵀr; 0]` by Householder
    /// QR, equivalent to the full augmented system `[J; sqrt(mu)·D]`.
    fn damped_step(&self, scale: &DVector<f64>, mu: f64) -> Option<DVector<f64>> {
        let n = self.r.ncols();
        let mut a = DMatrix::zeros(2 * n, n);
        a.view_mut((0, 0), (n, n)).copy_from(&self.r);
        for j in 0..n {
            a[(n + j, j)] = (mu * scale[j]).sqrt();
        }
        let mut rhs = DVector::zeros(2 * n);
        rhs.rows_mut(0, n).copy_from(&(-&self.qtr));
        let qr = a.qr();
        qr.q_tr_mul(&mut rhs);
        qr.r().solve_upper_triangular(&rhs.rows(0, n).into_owned())
    }
}

/// Minimizes `½‖r(x)‖²` with Levenberg-Marquardt.
///
/// Damping follows Nielsen's gain-ratio update and uses Marquardt's diagonal
/// scaling, so the iteration is invariant to rescaling individual parameters.
/// A step is accepted only if it lowers the cost, so the recorded cost
/// history is non-increasing.
pub fn lm_solve<R, J>(
    residuals: R,
    jacobian: J,
    x0: &DVector<f64>,
    cfg: &LmConfig,
) -> Result<LmReport, FitError>
where
    R: Fn(&DVector<f64>) -> DVector<f64>,
    J: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    cfg.validate()?;
    let n = x0.len();
    let mut x = x0.clone();
    let mut r = residuals(&x);
    let m = r.len();
    if n == 0 || m < n {
        return Err(FitError::InvalidInput(format!(
            "{m} residuals for {n} parameters"
        )));
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(FitError::InvalidInput(
            "non-finite residual at start".into(),
        ));
    }
    let mut jac = jacobian(&x);
    if jac.shape() != (m, n) {
        return Err(FitError::InvalidInput(format!(
            "jacobian is {:?}, expected ({m}, {n})",
            jac.shape()
        )));
    }
    let mut cost = 0.5 * r.norm_squared();
    let mut g = jac.transpose() * &r;
    let mut history = vec![cost];
    let done = |x: DVector<f64>, cost, iterations, termination, history| {
        Ok(LmReport {
            x,
            cost,
            iterations,
            termination,
            cost_history: history,
        })
    };
    if scaled_gradient(&jac, &r, &g) <= cfg.tol_grad {
        return done(x, cost, 0, Termination::Gradient, history);
    }

    let diag_jtj = |jac: &DMatrix<f64>| -> DVector<f64> {
        DVector::from_iterator(n, jac.column_iter().map(|c| c.norm_squared()))
    };
    let mut scale = diag_jtj(&jac);
    let max_diag = scale.max();
    let floor = if max_diag > 0.0 {
        max_diag * 1e-15
    } else {
        1.0
    };
    scale.apply(|d| *d = d.max(floor));
    let mut mu = cfg.initial_damping;
    let mut nu = 2.0;
    let mut reduced = Reduced::new(&jac, &r);

    for iter in 1..=cfg.max_iters {
        let Some(delta) = reduced.damped_step(&scale, mu) else {
            mu *= nu;
            nu *= 2.0;
            continue;
        };
        if delta.norm() <= cfg.tol_step * (x.norm() + cfg.tol_step) {
            return done(x, cost, iter, Termination::Step, history);
        }
        let x_new = &x + &delta;
        let r_new = residuals(&x_new);
        let cost_new = 0.5 * r_new.norm_squared();
        // Model reduction ½δᵀ(μDδ − g), positive for any nonzero step.
        let scaled: DVector<f64> = delta.component_mul(&scale) * mu;
        let predicted = 0.5 * delta.dot(&(scaled - &g));
        if cost_new.is_finite() && cost_new < cost && predicted > 0.0 {
            let rho = (cost - cost_new) / predicted;
            let small =
                (cost - cost_new) <= cfg.tol_cost * cost && predicted <= cfg.tol_cost * cost;
            x = x_new;
            r = r_new;
            cost = cost_new;
            history.push(cost);
            jac = jacobian(&x);
            g = jac.transpose() * &r;
            reduced = Reduced::new(&jac, &r);
            let fresh = diag_jtj(&jac);
            for (s, f) in scale.iter_mut().zip(fresh.iter()) {
                *s = s.max(*f);
            }
            mu *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
            nu = 2.0;
            if cost == 0.0 || scaled_gradient(&jac, &r, &g) <= cfg.tol_grad {
                return done(x, cost, iter, Termination::Gradient, history);
            }
            if small {
                return done(x, cost, iter, Termination::Cost, history);
            }
        } else {
            mu *= nu;
            nu *= 2.0;
            if !mu.is_finite() {
                break;
            }
        }
    }
    Err(FitError::FitDiverged {
        iterations: cfg.max_iters,
        cost,
    })
}
