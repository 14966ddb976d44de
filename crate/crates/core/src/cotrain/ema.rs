use crate::error::{Error, Result};
use crate::model::MultiHeadModel;

/// `shadow ← α·shadow + (1 − α)·params`, elementwise.
pub fn ema_update(shadow: &mut [f64], params: &[f64], decay: f64) {
    for (s, p) in shadow.iter_mut().zip(params) {
        *s = decay * *s + (1.0 - decay) * p;
    }
}

/// Applies [`ema_update`] to every parameter and normalization buffer.
pub fn ema_update_model(ema: &mut MultiHeadModel, model: &MultiHeadModel, decay: f64) -> Result<()> {
    let mut shadow = ema.flat_state();
    let current = model.flat_state();
    if shadow.len() != current.len() {
        return Err(Error::contract("moving-average model does not mirror the trained model"));
    }
    ema_update(&mut shadow, &current, decay);
    ema.load_flat_state(&shadow)
}
