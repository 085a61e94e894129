//! Central finite-difference gradient checking.
//!
//! The checker only evaluates the forward function; it never looks at the
//! tape's backward pass, so it can serve as an oracle for it.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over all checked components.
    pub max_rel_error: f64,
    pub checked: usize,
    /// (input, component, analytic, numeric) of the worst component.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Relative error with a floor on the denominator so near-zero gradients are
/// compared absolutely.
pub fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares `backward` against central differences for every component of
/// every input. `f` must build a scalar loss from the given input vars.
pub fn check<T, F>(inputs: &[Tensor<T>], eps: f64, floor: f64, f: F) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item()?.to_f64().unwrap())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(&tape, v);
        for c in 0..inputs[i].numel() {
            let orig = work[i].data()[c];
            let h = T::from_f64c(eps);
            work[i].data_mut()[c] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[c] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[c] = orig;
            // Use the step actually representable in T.
            let step = ((orig + h).to_f64().unwrap() - (orig - h).to_f64().unwrap()).max(f64::MIN_POSITIVE);
            let numeric = (plus - minus) / step;
            let a = analytic.data()[c].to_f64().unwrap();
            let err = rel_error(a, numeric, floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((i, c, a, numeric));
            }
        }
    }
    Ok(report)
}

/// A named gradient-check case: inputs plus a scalar-valued function of them.
pub type OpCase<T> = (&'static str, Vec<Tensor<T>>, Box<dyn Fn(&mut Tape<T>, &[Var]) -> Result<Var>>);

/// Source of case inputs: `fill(shape, lo, hi)` returns a tensor of values in `[lo, hi)`.
pub trait Fill<T: Real> {
    fn fill(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<T>;
}

impl<T: Real, F: FnMut(&[usize], f64, f64) -> Tensor<T>> Fill<T> for F {
    fn fill(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        self(shape, lo, hi)
    }
}

/// Reduces `y` to a scalar with the fixed weights `w` so every output
/// component contributes a distinct gradient.
fn weighted<T: Real>(tape: &mut Tape<T>, y: Var, w: &Tensor<T>) -> Result<Var> {
    let w = tape.constant(w.clone());
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// One case per differentiable op on the tape. Inputs and reduction weights
/// are drawn from `fill`.
pub fn op_cases<T: Real + 'static>(mut fill: impl Fill<T>) -> Vec<OpCase<T>> {
    let mut out: Vec<OpCase<T>> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($inp:expr),*], $out:expr, |$t:ident, $v:ident| $body:expr) => {{
            let inputs = vec![$($inp),*];
            let w = fill.fill(&$out, -1.0, 1.0);
            out.push(($name, inputs, Box::new(move |$t: &mut Tape<T>, $v: &[Var]| {
                let y = $body?;
                weighted($t, y, &w)
            })));
        }};
    }
    macro_rules! r {
        ($($d:expr),*) => { fill.fill(&[$($d),*], -1.0, 1.0) };
    }
    case!("matmul", [r!(3, 4), r!(4, 2)], [3, 2], |t, v| t.matmul(v[0], v[1]));
    case!("batch_matmul", [r!(2, 3, 4), r!(2, 4, 2)], [2, 3, 2], |t, v| t.batch_matmul(v[0], v[1]));
    case!("linear", [r!(2, 3, 4), r!(4, 5), r!(5)], [2, 3, 5], |t, v| t.linear(v[0], v[1], Some(v[2])));
    case!("conv2d", [r!(1, 2, 4, 4), r!(2, 2, 3, 3), r!(2)], [1, 2, 4, 4], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1));
    case!("conv2d_stride2", [r!(1, 2, 6, 6), r!(2, 2, 3, 3)], [1, 2, 3, 3], |t, v| t.conv2d(v[0], v[1], None, 2, 1));
    case!("softmax", [r!(3, 5)], [3, 5], |t, v| t.softmax(v[0]));
    case!("log_softmax", [r!(3, 5)], [3, 5], |t, v| t.log_softmax(v[0]));
    case!("layer_norm", [r!(3, 6), r!(6), r!(6)], [3, 6], |t, v| t.layer_norm(v[0], v[1], v[2], T::from_f64c(1e-5)));
    case!("gelu", [r!(10)], [10], |t, v| t.gelu(v[0]));
    case!("relu", [r!(10)], [10], |t, v| t.relu(v[0]));
    case!("sigmoid", [r!(10)], [10], |t, v| t.sigmoid(v[0]));
    case!("tanh", [r!(10)], [10], |t, v| t.tanh(v[0]));
    case!("add_broadcast", [r!(3, 4), r!(4)], [3, 4], |t, v| t.add(v[0], v[1]));
    case!("sub_broadcast", [r!(3, 1), r!(3, 4)], [3, 4], |t, v| t.sub(v[0], v[1]));
    case!("mul_broadcast", [r!(2, 3, 4), r!(3, 1)], [2, 3, 4], |t, v| t.mul(v[0], v[1]));
    case!("concat", [r!(2, 3), r!(2, 2)], [2, 5], |t, v| t.concat(&[v[0], v[1]], 1));
    case!("embed_lookup", [r!(5, 3)], [4, 3], |t, v| t.embed_lookup(v[0], &[4, 0, 4, 2]));
    case!("pick", [r!(3, 4)], [3], |t, v| t.pick(v[0], &[1, 3, 0]));
    case!("upsample_nearest2x", [r!(1, 2, 3, 3)], [1, 2, 6, 6], |t, v| t.upsample_nearest2x(v[0]));
    case!("downsample_nearest2x", [r!(1, 2, 4, 4)], [1, 2, 2, 2], |t, v| t.downsample_nearest2x(v[0]));
    case!("reshape", [r!(2, 6)], [3, 4], |t, v| t.reshape(v[0], &[3, 4]));
    case!("permute", [r!(2, 3, 4)], [3, 4, 2], |t, v| t.permute(v[0], &[1, 2, 0]));
    case!("mean", [r!(3, 4)], [], |t, v| t.square(v[0]).and_then(|y| t.mean(y)));
    case!("sum", [r!(3, 4)], [], |t, v| t.square(v[0]).and_then(|y| t.sum(y)));
    case!("neg", [r!(5)], [5], |t, v| t.neg(v[0]));
    case!("scale", [r!(5)], [5], |t, v| t.scale(v[0], T::from_f64c(-2.5)));
    case!("square", [r!(5)], [5], |t, v| t.square(v[0]));
    case!("exp", [r!(5)], [5], |t, v| t.exp(v[0]));
    case!("select", [r!(6), r!(6)], [6], |t, v| t.select(&[true, false, true, true, false, false], v[0], v[1]));
    // Positive-domain ops.
    case!("log", [fill.fill(&[6], 0.5, 2.0)], [6], |t, v| t.log(v[0]));
    case!("sqrt", [fill.fill(&[6], 0.5, 2.0)], [6], |t, v| t.sqrt(v[0]));
    // Away from the kink at zero.
    case!("abs", [Tensor::from_fn([6], |i| T::from_f64c([-0.9, 0.4, -0.3, 0.7, 0.2, -0.6][i]))], [6], |t, v| t.abs(v[0]));
    out
}
