//! Central finite differences, used as an independent oracle in tests.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::{Scalar, Tensor};

/// Estimates `df/dx` elementwise with step `h`.
pub fn finite_diff_grad<T: Scalar>(mut f: impl FnMut(&Tensor<T>) -> T, x: &Tensor<T>, h: T) -> Tensor<T> {
    let mut probe = x.clone();
    let two_h = h + h;
    let grad = (0..x.numel())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let fp = f(&probe);
            probe.data_mut()[i] = orig - h;
            let fm = f(&probe);
            probe.data_mut()[i] = orig;
            (fp - fm) / two_h
        })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), grad)
}

/// `max|a-b| / max(max|a|, max|b|, floor)`.
pub fn relative_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, floor: T) -> T {
    let scale = a
        .data()
        .iter()
        .chain(b.data())
        .fold(floor, |m, &v| m.max(v.abs()));
    a.max_abs_diff(b) / scale
}

/// Largest relative error, over the inputs listed in `check`, between tape
/// gradients and finite differences of `sum(w * f(inputs))` with fixed
/// weights `w_i = sin(1.3 i + 0.4)`.
pub fn max_grad_error<T: Scalar>(
    inputs: &[Tensor<T>],
    check: &[usize],
    f: &dyn Fn(&Tape<T>, &[Var]) -> Result<Var>,
    h: T,
    floor: T,
) -> Result<T> {
    fn weigh<T: Scalar>(tape: &Tape<T>, out: Var) -> Result<Var> {
        let shape = tape.shape(out);
        let w = (0..shape.iter().product::<usize>()).map(|i| T::lit((1.3 * i as f64 + 0.4).sin())).collect();
        let w = tape.constant(Tensor::from_parts(shape, w));
        let p = tape.mul(out, w)?;
        Ok(tape.sum(p))
    }
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = weigh(&tape, f(&tape, &vars)?)?;
    let grads = tape.backward(loss)?;
    let mut worst = T::zero();
    for &j in check {
        let analytic = grads
            .get(vars[j])
            .ok_or_else(|| Error::Contract(format!("input {j} received no gradient")))?;
        let mut failure = None;
        let numeric = finite_diff_grad(
            |x| {
                let t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, v)| t.constant(if i == j { x.clone() } else { v.clone() }))
                    .collect();
                match f(&t, &vs).and_then(|o| weigh(&t, o)) {
                    Ok(l) => t.get(l).data()[0],
                    Err(e) => {
                        failure = Some(e);
                        T::zero()
                    }
                }
            },
            &inputs[j],
            h,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        worst = worst.max(relative_error(analytic, &numeric, floor));
    }
    Ok(worst)
}
