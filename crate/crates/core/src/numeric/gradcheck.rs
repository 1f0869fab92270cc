use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Max relative error between the tape gradient of scalar `f` at `x` and
/// central finite differences with step `h`.
///
/// The error per coordinate is `|analytic - fd| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.variable(x.clone());
    let y = f(&mut g, xv)?;
    g.ensure_finite()?;
    let analytic = g.backward(y).get_or_zeros(xv);
    let eval = |data: &[f64]| -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.variable(Tensor::new(x.shape(), data.to_vec()));
        let y = f(&mut g, xv)?;
        Ok(g.value(y).item())
    };
    check_gradient(analytic.data(), x.data(), eval, h)
}

/// Finite-difference comparison over every coordinate of `x0`.
pub fn check_gradient<E>(analytic: &[f64], x0: &[f64], mut eval: E, h: f64) -> Result<f64>
where
    E: FnMut(&[f64]) -> Result<f64>,
{
    assert_eq!(analytic.len(), x0.len());
    let mut x = x0.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = eval(&x)?;
        x[i] = orig - h;
        let fm = eval(&x)?;
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("finite difference at coordinate {i}")));
        }
        let fd = (fp - fm) / (2.0 * h);
        worst = worst.max((analytic[i] - fd).abs() / analytic[i].abs().max(1.0));
    }
    Ok(worst)
}
