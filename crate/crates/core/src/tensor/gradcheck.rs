//! Autodiff-vs-central-difference gradient checking in 64-bit precision.
//!
//! Relative error per element is `|a − n| / max(|a|, |n|, floor)` where `a` is
//! the autodiff gradient, `n` the central difference, and `floor` is 10⁻³ of
//! the largest numeric gradient magnitude in the check (at least 10⁻¹²), so
//! near-zero entries are judged on the scale of the whole gradient.
//!
//! Elements where the forward and backward one-sided slopes disagree by more
//! than the autodiff/central mismatch sit on a kink (ReLU at 0, |x| at 0).
//! Those are listed in [`GradCheckReport::flagged`] and excluded from the
//! maximum instead of failing the check.

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct ElementCheck {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub elements: Vec<ElementCheck>,
    /// Positions (input, element) judged non-differentiable.
    pub flagged: Vec<(usize, usize)>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Checks `f` (scalar-valued) with respect to every element of `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), None, step, tolerance)
}

/// Checks `f` with respect to several inputs. `probes` restricts the check
/// to the listed `(input, element)` positions; `None` probes everything.
pub fn grad_check_many<F>(
    f: F,
    inputs: &[Tensor<f64>],
    probes: Option<&[(usize, usize)]>,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.param(t.clone())).collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    let f0 = tape.value(loss).item()?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).map_or(vec![0.0; t.numel()], |g| g.data().to_vec()))
        .collect();
    drop(tape);

    let eval = |which: usize, index: usize, delta: f64| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut t = t.clone();
                if i == which {
                    t.data_mut()[index] += delta;
                }
                tape.constant(t)
            })
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&mut tape, &vars)?;
        tape.value(loss).item()
    };

    let all: Vec<(usize, usize)>;
    let probes = match probes {
        Some(p) => p,
        None => {
            all = inputs.iter().enumerate().flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j))).collect();
            &all
        }
    };

    let mut raw = Vec::with_capacity(probes.len());
    for &(i, j) in probes {
        let plus = eval(i, j, step)?;
        let minus = eval(i, j, -step)?;
        raw.push((i, j, plus, minus));
    }
    let scale = raw.iter().map(|&(_, _, p, m)| ((p - m) / (2.0 * step)).abs()).fold(0.0, f64::max);
    let floor = (1e-3 * scale).max(1e-12);

    let mut elements = Vec::with_capacity(raw.len());
    let mut flagged = Vec::new();
    let mut max_rel_error = 0.0f64;
    for (i, j, plus, minus) in raw {
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[i][j];
        let diff = (a - numeric).abs();
        let rel_error = diff / a.abs().max(numeric.abs()).max(floor);
        let forward = (plus - f0) / step;
        let backward = (f0 - minus) / step;
        if rel_error >= tolerance && (forward - backward).abs() > diff {
            flagged.push((i, j));
        } else {
            max_rel_error = max_rel_error.max(rel_error);
        }
        elements.push(ElementCheck { input: i, index: j, analytic: a, numeric, rel_error });
    }
    Ok(GradCheckReport { elements, flagged, max_rel_error, tolerance })
}
