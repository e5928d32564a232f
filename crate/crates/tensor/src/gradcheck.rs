use crate::error::Result;
use crate::{Tape, Tensor, Var};

/// Denominator floor for relative errors of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares the analytic gradient returned by `f` with central differences
/// of its value at step `h`.
pub fn grad_check(mut f: impl FnMut(&[f64]) -> (f64, Vec<f64>), x: &[f64], h: f64) -> GradCheckReport {
    let (_, analytic) = f(x);
    assert_eq!(analytic.len(), x.len(), "gradient length must match input");
    let mut probe = x.to_vec();
    let numeric: Vec<f64> = (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe).0;
            probe[i] = x[i] - h;
            let down = f(&probe).0;
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect();
    summarize(analytic, numeric)
}

fn summarize(analytic: Vec<f64>, numeric: Vec<f64>) -> GradCheckReport {
    let mut worst = (0.0, 0);
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = rel_error(a, n);
        if e > worst.0 || e.is_nan() {
            worst = (e, i);
        }
    }
    GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        analytic,
        numeric,
    }
}

/// [`grad_check`] over every element of several tape inputs at once.
///
/// `build` records a scalar loss from the given leaves. Training mode stays
/// on (batch statistics are used) but dropout must be disabled by the caller.
pub fn grad_check_tape(
    inputs: &[Tensor<f64>],
    h: f64,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let sizes: Vec<usize> = inputs.iter().map(|t| t.numel()).collect();
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let unflatten = |x: &[f64]| -> Vec<Tensor<f64>> {
        let mut off = 0;
        inputs
            .iter()
            .zip(&sizes)
            .map(|(t, &n)| {
                let out = Tensor::new(t.shape(), x[off..off + n].to_vec()).expect("same size");
                off += n;
                out
            })
            .collect()
    };
    let eval = |x: &[f64], grad: bool| -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new(true, 0);
        let vars: Vec<Var> = unflatten(x).into_iter().map(|t| tape.leaf(t, grad)).collect();
        let loss = build(&mut tape, &vars)?;
        let value = tape.value(loss).item();
        if !grad {
            return Ok((value, Vec::new()));
        }
        let g = tape.backward(loss)?;
        let flat = vars
            .iter()
            .flat_map(|&v| g.get(v).expect("leaf gradient").data().to_vec())
            .collect();
        Ok((value, flat))
    };
    let (_, analytic) = eval(&flat, true)?;
    let mut probe = flat.clone();
    let mut numeric = Vec::with_capacity(flat.len());
    for i in 0..flat.len() {
        probe[i] = flat[i] + h;
        let up = eval(&probe, false)?.0;
        probe[i] = flat[i] - h;
        let down = eval(&probe, false)?.0;
        probe[i] = flat[i];
        numeric.push((up - down) / (2.0 * h));
    }
    Ok(summarize(analytic, numeric))
}
