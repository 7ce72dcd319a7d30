use super::{Result, Tape, Tensor, Var};
use crate::par::Execution;

/// Outcome of a central-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    /// Largest `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    /// Largest `|analytic - numeric|`.
    pub max_abs_error: f64,
    pub checked: usize,
}

/// One checked element: `(input index, element index, analytic, numeric)`.
pub type GradPair = (usize, usize, f64, f64);

/// Analytic gradient of scalar `f(inputs)` from the tape next to the
/// central difference `(f(x+h) - f(x-h)) / 2h`, for every element of every
/// input.
///
/// `f` receives a fresh tape and one `Var` per input. Numeric evaluations
/// are independent and fan out over the default [`Execution`].
pub fn grad_pairs<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<Vec<GradPair>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Sync + Send,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .zip(&vars)
        .map(|(t, &v)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |e| (i, e)))
        .collect();
    let numeric = Execution::default().map(coords.len(), |c| -> Result<f64> {
        let (i, e) = coords[c];
        let mut plus = inputs.to_vec();
        plus[i].data_mut()[e] += h;
        let mut minus = inputs.to_vec();
        minus[i].data_mut()[e] -= h;
        Ok((eval(&plus)? - eval(&minus)?) / (2.0 * h))
    });
    coords
        .into_iter()
        .zip(numeric)
        .map(|((i, e), n)| Ok((i, e, analytic[i][e], n?)))
        .collect()
}

/// Runs [`grad_pairs`] and summarizes the worst disagreement.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Sync + Send,
{
    let pairs = grad_pairs(f, inputs, h)?;
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: None,
        max_abs_error: 0.0,
        checked: pairs.len(),
    };
    for (i, e, a, n) in pairs {
        let rel = (a - n).abs() / (a.abs() + n.abs()).max(1e-8);
        report.max_abs_error = report.max_abs_error.max((a - n).abs());
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((i, e));
        }
    }
    Ok(report)
}
