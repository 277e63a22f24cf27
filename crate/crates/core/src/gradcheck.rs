//! Central finite-difference check of the analytic gradient of the batch
//! loss with respect to every parameter scalar of a model.

use rand_chacha::ChaCha8Rng;

use crate::error::ModelError;
use crate::numerics::Graph;
use crate::pipeline::SemDi;
use crate::training::{batch_loss, Batch};

/// Floor on the relative-error denominator. A loss near 1 carries a few
/// ulps of rounding noise, which central differences at `eps = 1e-5` turn
/// into about 1e-11 of gradient noise; below 1e-6 that noise alone would
/// exceed a 1e-4 relative tolerance.
pub const DENOM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_error: f64,
    /// Parameter name and flat index of the worst scalar.
    pub worst: (String, usize),
    pub checked: usize,
}

fn loss(model: &SemDi, batch: &Batch) -> Result<f64, ModelError> {
    let mut g = Graph::new(&model.params);
    let l = batch_loss::<ChaCha8Rng>(model, &mut g, batch, None)?;
    Ok(g.value(l).data()[0])
}

/// `|a - n| / max(|a|, |n|, DENOM_FLOOR)`.
pub fn gradient_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Dropout is off throughout. The model is perturbed and restored in place.
pub fn check_gradients(model: &mut SemDi, batch: &Batch, eps: f64) -> Result<GradCheck, ModelError> {
    let grads = {
        let mut g = Graph::new(&model.params);
        let l = batch_loss::<ChaCha8Rng>(model, &mut g, batch, None)?;
        g.backward(l)?
    };
    let mut report = GradCheck {
        max_error: 0.0,
        worst: (String::new(), 0),
        checked: 0,
    };
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let analytic = grads.param(id);
        let n = model.params.value(id).len();
        for i in 0..n {
            let original = model.params.value(id).data()[i];
            model.params.get_mut(id).value.data_mut()[i] = original + eps;
            let up = loss(model, batch)?;
            model.params.get_mut(id).value.data_mut()[i] = original - eps;
            let down = loss(model, batch)?;
            model.params.get_mut(id).value.data_mut()[i] = original;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.as_ref().map_or(0.0, |t| t.data()[i]);
            let err = gradient_error(a, numeric);
            if err > report.max_error {
                report.max_error = err;
                report.worst = (model.params.get(id).name.clone(), i);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
