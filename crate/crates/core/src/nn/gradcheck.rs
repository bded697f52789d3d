//! Central finite-difference checks for hand-written gradients.

use ndarray::Array2;

use super::{Mode, Network};
use crate::error::Result;

/// Default step for 64-bit central differences.
pub const STEP: f64 = 1e-5;

/// Smallest denominator, as a fraction of the largest entry compared.
/// Entries far below the largest one are dominated by the `eps·f/h`
/// round-off of the difference quotient, so they are judged against this
/// scale instead of their own magnitude.
pub const FLOOR_FRACTION: f64 = 1e-3;

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error_with_floor(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    relative_error_with_floor(a, b, 1e-8)
}

/// Largest relative error over paired entries, with the floor set to
/// [`FLOOR_FRACTION`] of the largest magnitude present.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (FLOOR_FRACTION * scale).max(1e-8);
    a.iter()
        .zip(b)
        .map(|(&x, &y)| relative_error_with_floor(x, y, floor))
        .fold(0.0, f64::max)
}

/// Central differences of `f` at `x0` along the coordinates in `which`.
pub fn central_differences(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    which: &[usize],
    h: f64,
) -> Vec<f64> {
    let mut x = x0.to_vec();
    which
        .iter()
        .map(|&k| {
            x[k] = x0[k] + h;
            let fp = f(&x);
            x[k] = x0[k] - h;
            let fm = f(&x);
            x[k] = x0[k];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// At most `n` evenly spaced coordinates of `0..len`.
pub fn spread(len: usize, n: usize) -> Vec<usize> {
    if n >= len {
        return (0..len).collect();
    }
    (0..n).map(|i| i * len / n + (i * 7919) % (len / n).max(1)).collect()
}

/// Checks the parameter gradient of `loss(net(x))`. `loss` returns the
/// value and its gradient with respect to the network output.
pub fn check_param_gradient(
    net: &mut Network<f64>,
    x: &Array2<f64>,
    mode: Mode,
    loss: impl Fn(&Array2<f64>) -> (f64, Array2<f64>),
) -> Result<f64> {
    let count = net.param_count();
    check_param_gradient_at(net, x, mode, loss, &spread(count, count))
}

/// [`check_param_gradient`] restricted to the coordinates in `which`.
pub fn check_param_gradient_at(
    net: &mut Network<f64>,
    x: &Array2<f64>,
    mode: Mode,
    loss: impl Fn(&Array2<f64>) -> (f64, Array2<f64>),
    which: &[usize],
) -> Result<f64> {
    let y = net.forward(x, mode)?;
    let (_, gy) = loss(&y);
    let (grads, _) = net.backward(&gy)?;
    let base = net.params_flat();
    let fd = central_differences(
        |p| {
            net.set_params_flat(p).expect("same length");
            let y = net.forward(x, mode).expect("checked shape");
            loss(&y).0
        },
        &base,
        which,
        STEP,
    );
    net.set_params_flat(&base)?;
    let analytic: Vec<f64> = which.iter().map(|&k| grads[k]).collect();
    Ok(max_relative_error(&fd, &analytic))
}

/// Checks the input gradient of `loss(net(x))`.
pub fn check_input_gradient(
    net: &mut Network<f64>,
    x: &Array2<f64>,
    mode: Mode,
    loss: impl Fn(&Array2<f64>) -> (f64, Array2<f64>),
) -> Result<f64> {
    let y = net.forward(x, mode)?;
    let (_, gy) = loss(&y);
    let (_, dx) = net.backward(&gy)?;
    let shape = x.dim();
    let flat: Vec<f64> = x.iter().copied().collect();
    let all: Vec<usize> = (0..flat.len()).collect();
    let fd = central_differences(
        |v| {
            let xv = Array2::from_shape_vec(shape, v.to_vec()).expect("same shape");
            let y = net.forward(&xv, mode).expect("checked shape");
            loss(&y).0
        },
        &flat,
        &all,
        STEP,
    );
    let analytic: Vec<f64> = dx.iter().copied().collect();
    Ok(max_relative_error(&fd, &analytic))
}
