//! The three loss families and their per-network gradient scopes.
//!
//! Each loss trains exactly one set of networks:
//!   - cyclic reconstruction    -> encoder + decoder
//!   - deviation                -> translator
//!   - adversarial (generator)  -> translator
//!   - adversarial (critic)     -> discriminator
//!
//! The scope is enforced by the training loop requesting gradients only
//! for the networks named here, regardless of which other networks appear
//! upstream or downstream on the tape.

use crate::tensor::{EngineError, EngineResult, Tape, Tensor};

/// Distance used by the reconstruction-style losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distance {
    L1,
    L2,
}

/// Adversarial objective flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvMode {
    LeastSquares,
    CrossEntropy,
}

/// Loss weighting and toggles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_cyc: f64,
    pub lambda_dev_a: f64,
    pub lambda_dev_b: f64,
    pub use_dev_term_b: bool,
    pub adv_mode: AdvMode,
    pub distance: Distance,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cyc: 10.0,
            lambda_dev_a: 10.0,
            lambda_dev_b: 10.0,
            use_dev_term_b: true,
            adv_mode: AdvMode::LeastSquares,
            distance: Distance::L1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> EngineResult<()> {
        for (name, v) in [
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_dev_a", self.lambda_dev_a),
            ("lambda_dev_b", self.lambda_dev_b),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(EngineError::InvalidArg {
                    op: "loss_weights",
                    detail: format!("{name} must be finite and >= 0, got {v}"),
                });
            }
        }
        Ok(())
    }

    fn dist(&self, tape: &mut Tape, a: &Tensor, b: &Tensor) -> EngineResult<Tensor> {
        match self.distance {
            Distance::L1 => tape.l1_loss(a, b),
            Distance::L2 => tape.mse_loss(a, b),
        }
    }
}

/// Networks a loss trains, by name. Used by the training loop to request
/// gradient scopes and by the scope audit to verify them.
pub const CYCLIC_SCOPE: [&str; 2] = ["encoder", "decoder"];
pub const DEVIATION_SCOPE: [&str; 1] = ["translator"];
pub const ADV_GENERATOR_SCOPE: [&str; 1] = ["translator"];
pub const ADV_DISCRIMINATOR_SCOPE: [&str; 1] = ["discriminator"];

/// Reconstruction distance between an input image and its cyclic image
/// (encode-then-decode of the same input). Trains encoder + decoder.
pub fn cyclic_loss(
    tape: &mut Tape,
    input_image: &Tensor,
    cyclic_image: &Tensor,
    w: &LossWeights,
) -> EngineResult<Tensor> {
    w.dist(tape, input_image, cyclic_image)
}

/// The deviation loss value plus its two (already weighted) terms.
#[derive(Debug, Clone)]
pub struct DeviationLoss {
    pub total: Tensor,
    /// lambda_dev_a * distance(enc_b, translated_enc_b)
    pub term_a: f64,
    /// lambda_dev_b * distance(input_b, translated_cyclic_b); exactly 0
    /// when the toggle is off.
    pub term_b: f64,
}

/// Penalty on the translator for altering domain-B content: term (a)
/// compares B encodings before/after translation; term (b), when enabled,
/// compares the B image with its full encode-translate-decode output.
/// Trains the translator only.
pub fn deviation_loss(
    tape: &mut Tape,
    enc_b: &Tensor,
    translated_enc_b: &Tensor,
    input_b: &Tensor,
    translated_cyclic_b: &Tensor,
    w: &LossWeights,
) -> EngineResult<DeviationLoss> {
    w.validate()?;
    if enc_b.shape() != translated_enc_b.shape() {
        return Err(EngineError::ShapeMismatch {
            op: "deviation_loss",
            detail: format!(
                "enc_b {:?} vs translated_enc_b {:?}",
                enc_b.shape(),
                translated_enc_b.shape()
            ),
        });
    }
    let raw_a = w.dist(tape, enc_b, translated_enc_b)?;
    let term_a = tape.scale(&raw_a, w.lambda_dev_a)?;
    if !w.use_dev_term_b {
        return Ok(DeviationLoss {
            total: term_a.clone(),
            term_a: term_a.item(),
            term_b: 0.0,
        });
    }
    if input_b.shape() != translated_cyclic_b.shape() {
        return Err(EngineError::ShapeMismatch {
            op: "deviation_loss",
            detail: format!(
                "input_b {:?} vs translated_cyclic_b {:?}",
                input_b.shape(),
                translated_cyclic_b.shape()
            ),
        });
    }
    let raw_b = w.dist(tape, input_b, translated_cyclic_b)?;
    let term_b = tape.scale(&raw_b, w.lambda_dev_b)?;
    let total = tape.add(&term_a, &term_b)?;
    Ok(DeviationLoss {
        total,
        term_a: term_a.item(),
        term_b: term_b.item(),
    })
}

/// Penalty on the translator when the discriminator spots its fakes:
/// pushes fake scores toward the "real" target. Trains the translator only.
pub fn adversarial_generator_loss(
    tape: &mut Tape,
    fake_scores: &Tensor,
    w: &LossWeights,
) -> EngineResult<Tensor> {
    match w.adv_mode {
        AdvMode::LeastSquares => {
            let ones = Tensor::full_like(fake_scores, 1.0);
            tape.mse_loss(fake_scores, &ones)
        }
        AdvMode::CrossEntropy => tape.bce_with_logits(fake_scores, 1.0),
    }
}

/// Penalty on the discriminator for misclassifying real or fake encodings,
/// halved to match the usual training recipe. The fake scores must come
/// from a detached forward so no gradient leaks toward the generator side.
pub fn adversarial_discriminator_loss(
    tape: &mut Tape,
    real_scores: &Tensor,
    fake_scores: &Tensor,
    w: &LossWeights,
) -> EngineResult<Tensor> {
    let (real_term, fake_term) = match w.adv_mode {
        AdvMode::LeastSquares => {
            let ones = Tensor::full_like(real_scores, 1.0);
            let zeros = Tensor::full_like(fake_scores, 0.0);
            (
                tape.mse_loss(real_scores, &ones)?,
                tape.mse_loss(fake_scores, &zeros)?,
            )
        }
        AdvMode::CrossEntropy => (
            tape.bce_with_logits(real_scores, 1.0)?,
            tape.bce_with_logits(fake_scores, 0.0)?,
        ),
    };
    let sum = tape.add(&real_term, &fake_term)?;
    tape.scale(&sum, 0.5)
}
