//! Least-squares adversarial losses, the ℓ₁ cycle-consistency loss and the
//! combined objective. All reductions are means over batch and elements.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Var};

/// Target labels of the least-squares adversarial game.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LsganLabels {
    /// Real scores → 1, fake scores → 0; generators push fake scores → 1.
    #[default]
    Standard,
    /// `E[D(y)²] + E[(1 − D(G(x)))²]` taken literally: the discriminator
    /// minimizes it (real → 0, fake → 1) and the generator value includes the
    /// real-score term, which carries no generator gradient.
    PaperLiteral,
}

fn squared_distance<T: Element>(tape: &mut Tape<T>, scores: Var, target: f64) -> Result<Var> {
    let shifted = tape.add_scalar(scores, T::from_f64(-target).unwrap())?;
    let sq = tape.square(shifted)?;
    tape.mean(sq)
}

/// Generator adversarial term `mean((D(G(x)) − 1)²)`.
pub fn gan_loss_g<T: Element>(tape: &mut Tape<T>, fake_scores: Var) -> Result<Var> {
    squared_distance(tape, fake_scores, 1.0)
}

/// Discriminator loss `mean((D(real) − 1)²) + mean(D(fake)²)`.
pub fn gan_loss_d<T: Element>(tape: &mut Tape<T>, real_scores: Var, fake_scores: Var) -> Result<Var> {
    let real = squared_distance(tape, real_scores, 1.0)?;
    let fake = squared_distance(tape, fake_scores, 0.0)?;
    tape.add(real, fake)
}

impl LsganLabels {
    /// Generator adversarial term. `real_scores` is only read by
    /// [`LsganLabels::PaperLiteral`] and should not require gradients.
    pub fn generator<T: Element>(self, tape: &mut Tape<T>, real_scores: Var, fake_scores: Var) -> Result<Var> {
        match self {
            LsganLabels::Standard => gan_loss_g(tape, fake_scores),
            LsganLabels::PaperLiteral => {
                let real = squared_distance(tape, real_scores, 0.0)?;
                let fake = squared_distance(tape, fake_scores, 1.0)?;
                tape.add(real, fake)
            }
        }
    }

    pub fn discriminator<T: Element>(self, tape: &mut Tape<T>, real_scores: Var, fake_scores: Var) -> Result<Var> {
        match self {
            LsganLabels::Standard => gan_loss_d(tape, real_scores, fake_scores),
            LsganLabels::PaperLiteral => {
                let real = squared_distance(tape, real_scores, 0.0)?;
                let fake = squared_distance(tape, fake_scores, 1.0)?;
                tape.add(real, fake)
            }
        }
    }
}

/// `mean|F(G(x)) − x| + mean|G(F(y)) − y|` from precomputed reconstructions.
pub fn cycle_consistency<T: Element>(tape: &mut Tape<T>, x: Var, x_rec: Var, y: Var, y_rec: Var) -> Result<Var> {
    for (a, b) in [(x, x_rec), (y, y_rec)] {
        if tape.shape(a) != tape.shape(b) {
            return Err(Error::shape(
                "cycle_loss",
                format!("reconstruction {:?} vs input {:?}", tape.shape(b), tape.shape(a)),
            ));
        }
    }
    let mut term = |a: Var, b: Var| -> Result<Var> {
        let d = tape.sub(b, a)?;
        let d = tape.abs(d)?;
        tape.mean(d)
    };
    let fx = term(x, x_rec)?;
    let fy = term(y, y_rec)?;
    tape.add(fx, fy)
}

/// Cycle-consistency loss for translators `g: X → Y` and `f: Y → X`.
pub fn cycle_loss<T, G, F>(tape: &mut Tape<T>, mut g: G, mut f: F, x: Var, y: Var) -> Result<Var>
where
    T: Element,
    G: FnMut(&mut Tape<T>, Var) -> Result<Var>,
    F: FnMut(&mut Tape<T>, Var) -> Result<Var>,
{
    if tape.shape(x) != tape.shape(y) {
        return Err(Error::shape("cycle_loss", format!("x {:?} vs y {:?}", tape.shape(x), tape.shape(y))));
    }
    let gx = g(tape, x)?;
    let x_rec = f(tape, gx)?;
    let fy = f(tape, y)?;
    let y_rec = g(tape, fy)?;
    cycle_consistency(tape, x, x_rec, y, y_rec)
}

/// Component values of the combined objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    /// Adversarial term of `G: X → Y` against `D_Y`.
    pub gan_g: f64,
    /// Adversarial term of `F: Y → X` against `D_X`.
    pub gan_f: f64,
    /// Unweighted cycle-consistency loss.
    pub cycle: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn weighted_cycle(&self) -> f64 {
        self.lambda * self.cycle
    }

    pub fn total(&self) -> f64 {
        self.gan_g + self.gan_f + self.weighted_cycle()
    }
}

/// `L = L_GAN(G, D_Y) + L_GAN(F, D_X) + λ·L_cycle` on the tape, with the
/// component values.
pub fn combine<T: Element>(tape: &mut Tape<T>, gan_g: Var, gan_f: Var, cycle: Var, lambda: f64) -> Result<(Var, LossBreakdown)> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("cycle weight must be finite and non-negative, got {lambda}")));
    }
    let gan = tape.add(gan_g, gan_f)?;
    let weighted = tape.scale(cycle, T::from_f64(lambda).unwrap())?;
    let total = tape.add(gan, weighted)?;
    let breakdown = LossBreakdown {
        gan_g: scalar(tape, gan_g)?,
        gan_f: scalar(tape, gan_f)?,
        cycle: scalar(tape, cycle)?,
        lambda,
    };
    Ok((total, breakdown))
}

pub(crate) fn scalar<T: Element>(tape: &Tape<T>, v: Var) -> Result<f64> {
    Ok(tape.value(v).item()?.to_f64().unwrap())
}
