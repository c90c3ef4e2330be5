//! Central finite-difference verification of tape gradients.

use super::{ParamGrads, ParamId, Params};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub n_checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_component: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compare `analytic` against a central finite difference of `f` for every
/// component of every parameter. The relative error denominator is floored
/// at 1e-5 so agreeing near-zero gradients compare as equal rather than
/// dividing noise by noise.
pub fn check_params<F>(
    params: &mut Params<f64>,
    analytic: &ParamGrads<f64>,
    step: f64,
    mut f: F,
) -> GradCheckReport
where
    F: FnMut(&Params<f64>) -> f64,
{
    let mut report = GradCheckReport {
        n_checked: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_component: 0,
    };
    for pi in 0..params.len() {
        let id = ParamId(pi);
        let n = params.get(id).numel();
        for j in 0..n {
            let orig = params.get(id).values()[j];
            params.get_mut(id).values_mut()[j] = orig + step;
            let hi = f(params);
            params.get_mut(id).values_mut()[j] = orig - step;
            let lo = f(params);
            params.get_mut(id).values_mut()[j] = orig;
            let fd = (hi - lo) / (2.0 * step);
            let a = analytic.get(id)[j];
            let denom = a.abs().max(fd.abs()).max(1e-5);
            let rel = (a - fd).abs() / denom;
            report.n_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = params.name(id).to_string();
                report.worst_component = j;
            }
        }
    }
    report
}
