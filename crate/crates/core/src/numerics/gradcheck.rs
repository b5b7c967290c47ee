use crate::error::{Error, Result};

/// Compares an analytic gradient against central finite differences.
///
/// `eval` maps a flat parameter vector to `(loss, analytic gradient)`. Returns
/// the maximum over parameters of `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(params: &[f64], step: f64, mut eval: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(step > 0.0) {
        return Err(Error::Config(format!(
            "finite-difference step must be > 0, got {step}"
        )));
    }
    if let Some(i) = params.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            location: format!("parameter {i} before grad check"),
        });
    }
    let (loss, analytic) = eval(params)?;
    if !loss.is_finite() {
        return Err(Error::Numeric {
            location: "loss at unperturbed parameters".into(),
        });
    }
    if analytic.len() != params.len() {
        return Err(Error::shape("grad_check", params.len(), analytic.len()));
    }
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let (plus, _) = eval(&probe)?;
        probe[i] = orig - step;
        let (minus, _) = eval(&probe)?;
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        if !numeric.is_finite() || !analytic[i].is_finite() {
            return Err(Error::Numeric {
                location: format!("parameter {i}"),
            });
        }
        let rel = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}
