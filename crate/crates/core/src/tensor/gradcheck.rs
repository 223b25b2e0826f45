//! Central finite-difference checks of tape gradients.

use alloc::string::String;
use alloc::vec::Vec;

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Largest relative error between the tape gradient of the scalar
/// `f(x)` and the central difference `(f(x+h) − f(x−h)) / 2h`, taken over
/// every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'static>, Var) -> Result<Var>,
{
    grad_check_signed(f, x, h, 1.0)
}

/// [`grad_check`] with the analytic gradient multiplied by `sign`; a sign
/// of −1 is a negative control that must fail on any non-zero gradient.
pub fn grad_check_signed<F>(f: F, x: &Tensor, h: f64, sign: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'static>, Var) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let y = f(&mut tape, xv)?;
        let grads = tape.backward(y)?;
        grads
            .wrt(xv)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| alloc::vec![0.0; x.numel()])
    };
    let eval = |point: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(point);
        let y = f(&mut tape, xv)?;
        Ok(tape.value(y).item())
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(sign * analytic[i], numeric));
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates_checked: usize,
}

/// Finite-difference check of the gradient of `loss` with respect to stored
/// parameters.
///
/// At most `per_param` evenly spaced coordinates of each parameter are
/// perturbed; the store is restored afterwards.
pub fn grad_check_params<F>(store: &mut ParamStore, loss: F, h: f64, per_param: usize) -> Result<ParamCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let analytic: Vec<Option<Vec<f64>>> = {
        let mut tape = Tape::with_params(store);
        let y = loss(&mut tape)?;
        let grads = tape.backward(y)?;
        store.ids().map(|id| grads.param(id).map(|g| g.to_vec())).collect()
    };
    let mut report = ParamCheckReport {
        max_relative_error: 0.0,
        worst: None,
        coordinates_checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).numel();
        let count = per_param.min(n);
        for j in 0..count {
            let coord = if count == n { j } else { j * n / count };
            let original = store.get(id).data()[coord];
            store.get_mut(id).data_mut()[coord] = original + h;
            let up = {
                let mut tape = Tape::with_params(store);
                let y = loss(&mut tape)?;
                tape.value(y).item()
            };
            store.get_mut(id).data_mut()[coord] = original - h;
            let down = {
                let mut tape = Tape::with_params(store);
                let y = loss(&mut tape)?;
                tape.value(y).item()
            };
            store.get_mut(id).data_mut()[coord] = original;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[id.index()].as_ref().map_or(0.0, |g| g[coord]);
            let err = relative_error(a, numeric);
            report.coordinates_checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                if err >= report.max_relative_error {
                    report.worst = Some((store.entry(id).name.clone(), coord));
                }
            }
        }
    }
    Ok(report)
}

/// Directional finite-difference check over all parameters jointly: for
/// each of `directions` random unit directions `u` (Gaussian draws per
/// parameter tensor, concatenated and normalized), compares `sign · ∇L · u` with
/// `(L(θ + h·u) − L(θ − h·u)) / 2h` and returns the largest relative error.
///
/// Individual coordinates of a network gradient can sit below the rounding
/// floor of a central difference (about `ulp(L) / 2h`); a directional
/// derivative aggregates the whole gradient and stays resolvable. The
/// direction has unit length so the step in parameter space is `h`.
pub fn grad_check_directions<F>(
    store: &ParamStore,
    loss: F,
    h: f64,
    directions: usize,
    rng: &mut crate::rng::Rng,
    sign: f64,
) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::with_params(s);
        let y = loss(&mut tape)?;
        Ok(tape.value(y).item())
    };
    let grads = {
        let mut tape = Tape::with_params(store);
        let y = loss(&mut tape)?;
        tape.backward(y)?
    };
    let mut worst: f64 = 0.0;
    for _ in 0..directions {
        let dirs: Vec<_> = store
            .ids()
            .map(|id| (id, Tensor::randn(store.get(id).shape(), 1.0, rng)))
            .collect();
        let norm = libm::sqrt(dirs.iter().flat_map(|(_, u)| u.data()).map(|d| d * d).sum::<f64>());
        let mut up = store.clone();
        let mut down = store.clone();
        let mut analytic = 0.0;
        for (id, u) in &dirs {
            if let Some(g) = grads.param(*id) {
                analytic += g.iter().zip(u.data()).map(|(g, d)| g * d).sum::<f64>() / norm;
            }
            let step = h / norm;
            up.get_mut(*id)
                .data_mut()
                .iter_mut()
                .zip(u.data())
                .for_each(|(x, d)| *x += step * d);
            down.get_mut(*id)
                .data_mut()
                .iter_mut()
                .zip(u.data())
                .for_each(|(x, d)| *x -= step * d);
        }
        let numeric = (eval(&up)? - eval(&down)?) / (2.0 * h);
        worst = worst.max(relative_error(sign * analytic, numeric));
    }
    Ok(worst)
}
