use super::{DType, Result, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    /// (input index, flat coordinate) of the worst disagreement.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new(DType::F64).with_verification(true);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t)).collect();
    let out = f(&mut tape, &vars)?;
    tape.scalar(out)
}

/// Below this magnitude a gradient coordinate is compared absolutely:
/// finite differences cannot resolve a true zero much better than 1e-12,
/// so a pure ratio would be meaningless there.
pub const GRADCHECK_FLOOR: f64 = 1e-4;

/// Compare reverse-mode gradients of a scalar function against the
/// five-point central difference
/// `(f(x−2h) − 8f(x−h) + 8f(x+h) − f(x+2h)) / 12h` with `h = eps`,
/// coordinate by coordinate.
///
/// Runs in float64. The relative error of each coordinate uses the
/// denominator `max(|analytic|, |numeric|, GRADCHECK_FLOOR)`.
pub fn finite_diff_gradcheck<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let inputs: Vec<Tensor> = inputs.iter().map(|t| t.cast(DType::F64)).collect();

    let mut tape = Tape::new(DType::F64).with_verification(true);
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().requires_grad(true)))
        .collect();
    let out = f(&mut tape, &vars)?;
    let f0 = tape.scalar(out)?;
    if eval(&f, &inputs)?.to_bits() != f0.to_bits() {
        return Err(TensorError::NonDeterministic);
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| {
            Ok(tape
                .grad(v)?
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()]))
        })
        .collect::<Result<_>>()?;

    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut probe = inputs.clone();
    for (ti, t) in inputs.iter().enumerate() {
        for (k, &x) in t.data().iter().enumerate() {
            let mut at = |h: f64| {
                probe[ti].data_mut()[k] = x + h;
                eval(&f, &probe)
            };
            let (p1, m1, p2, m2) = (at(eps)?, at(-eps)?, at(2.0 * eps)?, at(-2.0 * eps)?);
            probe[ti].data_mut()[k] = x;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
            let a = analytic[ti][k];
            let denom = a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
            let rel = (a - numeric).abs() / denom;
            report.coordinates += 1;
            if rel > report.max_rel_err || report.coordinates == 1 {
                report.max_rel_err = rel;
                report.worst = (ti, k);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
