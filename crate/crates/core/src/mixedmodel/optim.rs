//! Box-constrained limited-memory BFGS.

use std::collections::VecDeque;

/// Objective value and gradient at a point; `None` if the point is infeasible.
pub trait Objective {
    fn value(&mut self, x: &[f64]) -> Option<f64>;
    fn value_and_gradient(&mut self, x: &[f64]) -> Option<(f64, Vec<f64>)>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimOptions {
    pub memory: usize,
    pub max_iter: usize,
    /// Projected-gradient tolerance relative to `max(1, |f|)`.
    pub grad_tol: f64,
    pub lower: f64,
    pub upper: f64,
    /// Largest change of any coordinate in one step.
    pub max_step: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iter: 500,
            grad_tol: 1e-7,
            lower: -27.631021115928547,
            upper: 27.631021115928547,
            max_step: 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Termination {
    /// Projected gradient below tolerance.
    Gradient,
    /// No further decrease representable in floating point.
    Stalled,
    IterationCap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub projected_grad_norm: f64,
    pub iterations: usize,
    /// Objective after each accepted step, starting with the initial point.
    pub trace: Vec<f64>,
    pub termination: Termination,
}

fn projected(x: &[f64], g: &[f64], o: &OptimOptions) -> Vec<f64> {
    x.iter()
        .zip(g)
        .map(|(&xi, &gi)| {
            if (xi <= o.lower && gi > 0.0) || (xi >= o.upper && gi < 0.0) {
                0.0
            } else {
                gi
            }
        })
        .collect()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `f` over the box `[lower, upper]^k` from `x0`.
pub fn minimize<F: Objective>(f: &mut F, x0: &[f64], o: &OptimOptions) -> Option<OptimResult> {
    let k = x0.len();
    let mut x: Vec<f64> = x0.iter().map(|v| v.clamp(o.lower, o.upper)).collect();
    let (mut fx, mut g) = f.value_and_gradient(&x)?;
    let mut trace = vec![fx];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(o.memory);
    let mut iterations = 0;
    let mut termination = Termination::IterationCap;
    while iterations < o.max_iter {
        let pg = projected(&x, &g, o);
        if inf_norm(&pg) <= o.grad_tol * fx.abs().max(1.0) {
            termination = Termination::Gradient;
            break;
        }
        let free: Vec<bool> = pg.iter().zip(&g).map(|(p, gi)| *p != 0.0 || *gi == 0.0).collect();

        // two-loop recursion on the free coordinates
        let mut d: Vec<f64> = pg.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * (0..k).filter(|&i| free[i]).map(|i| s[i] * d[i]).sum::<f64>();
            for i in (0..k).filter(|&i| free[i]) {
                d[i] -= a * y[i];
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            if gamma.is_finite() && gamma > 0.0 {
                d.iter_mut().for_each(|v| *v *= gamma);
            }
        }
        for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * (0..k).filter(|&i| free[i]).map(|i| y[i] * d[i]).sum::<f64>();
            for i in (0..k).filter(|&i| free[i]) {
                d[i] += (a - b) * s[i];
            }
        }
        for i in 0..k {
            if !free[i] {
                d[i] = 0.0;
            }
        }
        if dot(&d, &pg) >= 0.0 {
            d = pg.iter().map(|v| -v).collect();
            pairs.clear();
        }
        let big = inf_norm(&d);
        if big > o.max_step {
            d.iter_mut().for_each(|v| *v *= o.max_step / big);
        }

        // backtracking line search on the projected path
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let xt: Vec<f64> = (0..k).map(|i| (x[i] + step * d[i]).clamp(o.lower, o.upper)).collect();
            let moved: Vec<f64> = (0..k).map(|i| xt[i] - x[i]).collect();
            if inf_norm(&moved) == 0.0 {
                break;
            }
            let decrease = dot(&g, &moved);
            if let Some(ft) = f.value(&xt) {
                if ft <= fx + 1e-4 * decrease || (ft <= fx && decrease.abs() <= 1e-12 * fx.abs().max(1.0)) {
                    accepted = Some((xt, ft));
                    break;
                }
            }
            step *= 0.5;
        }
        // expand while the decrease stays close to linear (flat or concave region)
        if let Some((xa, fa)) = accepted.take() {
            let mut best = (xa, fa);
            if step == 1.0 {
                loop {
                    let moved: Vec<f64> = (0..k).map(|i| best.0[i] - x[i]).collect();
                    let predicted = dot(&g, &moved);
                    if !(fx - best.1 >= -0.9 * predicted) || predicted >= 0.0 {
                        break;
                    }
                    let next = step * 2.0;
                    if inf_norm(&d) * next > o.max_step {
                        break;
                    }
                    let xt: Vec<f64> = (0..k).map(|i| (x[i] + next * d[i]).clamp(o.lower, o.upper)).collect();
                    match f.value(&xt) {
                        Some(ft) if ft < best.1 => {
                            best = (xt, ft);
                            step = next;
                        }
                        _ => break,
                    }
                }
            }
            accepted = Some(best);
        }
        let Some((xt, _)) = accepted else {
            termination = Termination::Stalled;
            break;
        };
        let Some((ft, gt)) = f.value_and_gradient(&xt) else {
            termination = Termination::Stalled;
            break;
        };
        let s: Vec<f64> = (0..k).map(|i| xt[i] - x[i]).collect();
        let y: Vec<f64> = (0..k).map(|i| gt[i] - g[i]).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if pairs.len() == o.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        let stalled = ft >= fx;
        x = xt;
        fx = ft.min(fx);
        g = gt;
        trace.push(fx);
        iterations += 1;
        if stalled && inf_norm(&projected(&x, &g, o)) > o.grad_tol * fx.abs().max(1.0) {
            // zero decrease at rounding level: give L-BFGS one more chance, then stop
            if trace.len() >= 3 && trace[trace.len() - 3] == fx {
                termination = Termination::Stalled;
                break;
            }
        }
    }
    let pg = projected(&x, &g, o);
    Some(OptimResult {
        projected_grad_norm: inf_norm(&pg),
        x,
        f: fx,
        grad: g,
        iterations,
        trace,
        termination,
    })
}
