//! Central finite-difference oracle for tape gradients.

use super::{Bound, NumericsError, ParameterStore, Tape, Var};

/// Worst relative error observed within one named parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockError {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares tape gradients of `loss_fn` against `(f(p+h) − f(p−h)) / 2h`
/// for every coordinate of every trainable parameter in `store`.
///
/// `store` is restored to its original values before returning.
pub fn finite_diff_check<F>(store: &mut ParameterStore, h: f64, loss_fn: F) -> Result<GradCheckReport, NumericsError>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>, NumericsError>,
{
    if h <= 0.0 {
        return Err(NumericsError::InvalidArgument(format!("step h must be > 0, got {h}")));
    }
    let analytic = {
        let tape = Tape::new();
        let bound = store.bind(&tape)?;
        let loss = loss_fn(&tape, &bound)?;
        let grads = tape.backward(&loss)?;
        bound.vars().iter().map(|v| grads.get(v)).collect::<Vec<_>>()
    };
    let eval = |store: &ParameterStore| -> Result<f64, NumericsError> {
        let tape = Tape::new();
        let bound = store.bind(&tape)?;
        Ok(loss_fn(&tape, &bound)?.item())
    };

    let mut report = GradCheckReport::default();
    for p in 0..store.len() {
        if !store.iter().nth(p).is_some_and(|q| q.trainable) {
            continue;
        }
        let mut worst: f64 = 0.0;
        let n = analytic[p].len();
        for k in 0..n {
            let id = super::ParamId(p);
            let orig = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + h;
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[k] = orig - h;
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            worst = worst.max(relative_error(analytic[p].data()[k], numeric));
        }
        report.blocks.push(BlockError { name: store.get(super::ParamId(p)).name.clone(), max_rel_error: worst, coordinates: n });
    }
    Ok(report)
}
