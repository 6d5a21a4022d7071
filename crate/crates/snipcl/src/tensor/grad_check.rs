use super::{Tape, Tensor, TensorError, Var};

/// Central-difference check of the tape gradient for a scalar-valued function
/// of one tensor. Returns the maximum elementwise relative error
/// `|a - n| / max(1, |a|, |n|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    grad_check_multi(|tape, vars| f(tape, vars[0]), &[x.clone()], h)
}

/// Central-difference check over several input tensors at once.
pub fn grad_check_multi<F>(f: F, xs: &[Tensor], h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    // analytic gradients
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(xs)
        .map(|(&v, x)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64, TensorError> {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let out = f(&mut t, &vs)?;
        Ok(t.value(out).item())
    };

    let mut max_err: f64 = 0.0;
    let mut work: Vec<Tensor> = xs.to_vec();
    for (ti, x) in xs.iter().enumerate() {
        for i in 0..x.numel() {
            let orig = x.data()[i];
            work[ti].data_mut()[i] = orig + h;
            let fp = eval(&work)?;
            work[ti].data_mut()[i] = orig - h;
            let fm = eval(&work)?;
            work[ti].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti].data()[i];
            let err = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}
