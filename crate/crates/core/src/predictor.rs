//! Recursive inference: each generated frame is fed back as the newest
//! context frame. Generated frames stay real-valued (no re-quantization).

use crate::alpha::AlphaMatrix;
use crate::error::{Error, Result};
use crate::model::DualNet;
use crate::scalar::Scalar;
use crate::tensor::{Batch, Frame};
use crate::trainer::rollout;
use crate::video_io::Clip;

/// Predicts `horizon` frames following `conditioning` (eval mode).
pub fn predict<T: Scalar>(model: &DualNet<T>, conditioning: &[Frame<T>], horizon: usize) -> Result<Clip<T>> {
    Ok(predict_with_alpha_trace(model, conditioning, horizon)?.0)
}

/// As [`predict`], also returning the modulation weights of every step.
pub fn predict_with_alpha_trace<T: Scalar>(
    model: &DualNet<T>,
    conditioning: &[Frame<T>],
    horizon: usize,
) -> Result<(Clip<T>, Vec<AlphaMatrix<T>>)> {
    if conditioning.len() != model.context() {
        return Err(Error::arg(format!(
            "model needs {} conditioning frames, got {}",
            model.context(),
            conditioning.len()
        )));
    }
    let mut trace = Vec::with_capacity(horizon);
    let frames = rollout(&[conditioning.to_vec()], horizon, |_, ctx| {
        let x = Batch::stack_channels(ctx)?;
        let (out, mut alphas) = model.step_eval(&x)?;
        trace.push(alphas.remove(0));
        Ok(vec![out.frame(0)])
    })?;
    let clip = Clip::new(frames.into_iter().next().unwrap_or_default())?;
    Ok((clip, trace))
}
