//! Limited-memory BFGS with a backtracking Armijo line search.

#[derive(Debug, Clone, Copy)]
pub struct LbfgsOptions {
    pub max_iterations: usize,
    /// Stop once the largest gradient component falls below this.
    pub gradient_tolerance: f64,
    pub memory: usize,
    /// Stop once an accepted step lowers the value by less than this
    /// fraction of its magnitude.
    pub relative_decrease: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            gradient_tolerance: 1e-6,
            memory: 10,
            relative_decrease: 1e-15,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimizes `objective`, which writes the gradient into its second argument
/// and returns the function value.
pub fn minimize<F>(mut objective: F, x0: Vec<f64>, opts: LbfgsOptions) -> LbfgsResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0;
    let mut grad = vec![0.0; n];
    let mut value = objective(&x, &mut grad);
    let mut history: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::with_capacity(opts.memory);
    let mut trial = vec![0.0; n];
    let mut trial_grad = vec![0.0; n];

    for iter in 0..opts.max_iterations {
        if max_abs(&grad) <= opts.gradient_tolerance {
            return LbfgsResult {
                x,
                value,
                iterations: iter,
                converged: true,
            };
        }

        // Two-loop recursion for the search direction.
        let mut q = grad.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = history
            .last()
            .map(|(s, y, _)| dot(s, y) / dot(y, y))
            .unwrap_or_else(|| 1.0 / max_abs(&grad).max(1.0));
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += si * (a - b));
        }
        let mut direction: Vec<f64> = q.into_iter().map(|v| -v).collect();
        let mut slope = dot(&grad, &direction);
        if slope >= 0.0 || !slope.is_finite() {
            // Not a descent direction: restart from steepest descent.
            history.clear();
            let scale = 1.0 / max_abs(&grad).max(1.0);
            direction = grad.iter().map(|g| -g * scale).collect();
            slope = dot(&grad, &direction);
        }

        let mut step = 1.0;
        let mut accepted = false;
        let mut stalled = false;
        for _ in 0..60 {
            trial
                .iter_mut()
                .zip(x.iter().zip(&direction))
                .for_each(|(t, (xi, di))| *t = xi + step * di);
            let trial_value = objective(&trial, &mut trial_grad);
            if trial_value.is_finite() && trial_value <= value + 1e-4 * step * slope {
                let s: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = trial_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
                    if history.len() == opts.memory {
                        history.remove(0);
                    }
                    history.push((s, y, 1.0 / sy));
                }
                std::mem::swap(&mut x, &mut trial);
                std::mem::swap(&mut grad, &mut trial_grad);
                let decrease = value - trial_value;
                stalled = decrease <= opts.relative_decrease * value.abs().max(trial_value.abs()).max(1.0);
                value = trial_value;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted || stalled {
            // No decrease representable along the direction.
            return LbfgsResult {
                x,
                value,
                iterations: iter + 1,
                converged: max_abs(&grad) <= opts.gradient_tolerance,
            };
        }
    }
    let converged = max_abs(&grad) <= opts.gradient_tolerance;
    LbfgsResult {
        x,
        value,
        iterations: opts.max_iterations,
        converged,
    }
}
