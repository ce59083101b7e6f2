//! Central finite-difference gradient checking.

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

const STEP: f64 = 1e-6;

/// Compares tape gradients of a scalar function against central differences for
/// every element of every input, returning `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
pub fn check_gradient<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars).expect("gradcheck forward");
        let grads = tape.backward(&out).expect("gradcheck backward");
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| {
                grads
                    .of(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    };
    let eval = |probe: &[Tensor]| -> f64 {
        let tape = Tape::inference();
        let vars: Vec<Var<'_>> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).expect("gradcheck forward").value().data()[0]
    };
    let mut diff_sq = 0.0;
    let mut a_sq = 0.0;
    let mut n_sq = 0.0;
    let mut probe = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + STEP;
            let plus = eval(&probe);
            probe[k].data_mut()[i] = orig - STEP;
            let minus = eval(&probe);
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = grad.data()[i];
            diff_sq += (a - numeric).powi(2);
            a_sq += a * a;
            n_sq += numeric * numeric;
        }
    }
    let scale = a_sq.sqrt().max(n_sq.sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff_sq.sqrt() / scale
    }
}
