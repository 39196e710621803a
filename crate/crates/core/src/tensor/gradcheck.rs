use super::{Tape, Tensor, TensorError, Var};

/// Gradients smaller than this are compared in absolute terms; central
/// differences carry roughly `eps_mach / h` of rounding noise.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_error: f64,
    /// Flat position of the worst entry.
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
    /// Set when `f` produced a non-finite value anywhere during the check.
    pub non_finite: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        !self.non_finite && self.max_rel_error() <= self.tolerance
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_ERROR_FLOOR)
}

fn evaluate<F>(f: &F, params: &[Tensor<f64>], with_grad: bool) -> Result<(f64, Tape<f64>, Vec<Var>), TensorError>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let tape = Tape::verifying();
    let vars = params
        .iter()
        .map(|p| tape.leaf(p.clone(), with_grad))
        .collect::<Result<Vec<_>, _>>()?;
    let out = f(&tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(TensorError::NonScalarRoot(tape.shape(out)));
    }
    let v = tape.item(out);
    if with_grad && tape.requires_grad(out) {
        tape.backward(out)?;
    }
    Ok((v, tape, vars))
}

/// Compares the tape's gradient of scalar `f` against central differences
/// `(f(p+h) − f(p−h)) / 2h`, entry by entry, for every parameter tensor.
///
/// `f` builds its graph on the tape it is handed, from the parameter vars
/// in the order given.
pub fn finite_difference_check<F>(
    f: F,
    params: &[Tensor<f64>],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(TensorError::InvalidArgument {
            op: "finite_difference_check",
            msg: format!("step {h} outside [1e-7, 1e-3]"),
        });
    }
    let mut non_finite = false;
    let (f0, tape, vars) = match evaluate(&f, params, true) {
        Ok(x) => x,
        Err(TensorError::NonFinite { .. }) => {
            return Ok(GradCheckReport {
                params: Vec::new(),
                tolerance: tol,
                non_finite: true,
            })
        }
        Err(e) => return Err(e),
    };
    non_finite |= !f0.is_finite();

    let mut report = Vec::with_capacity(params.len());
    let mut probe: Vec<Tensor<f64>> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*var)
            .map(|g| g.into_data())
            .unwrap_or_else(|| vec![0.0; params[pi].len()]);
        let mut check = ParamCheck {
            index: pi,
            max_rel_error: 0.0,
            worst_entry: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for e in 0..params[pi].len() {
            let orig = params[pi].data()[e];
            let mut side = |delta: f64| -> f64 {
                probe[pi].data_mut()[e] = orig + delta;
                let v = evaluate(&f, &probe, false).map(|x| x.0).unwrap_or(f64::NAN);
                probe[pi].data_mut()[e] = orig;
                v
            };
            let (fp, fm) = (side(h), side(-h));
            if !fp.is_finite() || !fm.is_finite() {
                non_finite = true;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let err = rel_error(analytic[e], numeric);
            if err > check.max_rel_error || e == 0 {
                check = ParamCheck {
                    index: pi,
                    max_rel_error: err,
                    worst_entry: e,
                    analytic: analytic[e],
                    numeric,
                };
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport {
        params: report,
        tolerance: tol,
        non_finite,
    })
}
