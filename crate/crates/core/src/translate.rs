//! Slice-wise translation of whole volumes between contrast phases.

use crate::data::{Phase, Volume};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::tensor::Tensor;
use crate::training::CyTranState;

pub trait SliceTranslator {
    /// `(source, target)` phases, or `None` for a translator that accepts
    /// any phase and leaves the tag unchanged.
    fn phases(&self) -> Option<(Phase, Phase)>;

    /// Maps a `[1, S, S]` slice.
    fn translate_slice(&self, slice: &Tensor<f32>) -> Result<Tensor<f32>>;

    fn translate_volume(&self, volume: &Volume) -> Result<Volume> {
        let mut out = volume.clone();
        if let Some((from, to)) = self.phases() {
            if volume.phase != from {
                return Err(Error::InvalidArgument(format!(
                    "translator expects {} input, volume is {}",
                    from.name(),
                    volume.phase.name()
                )));
            }
            out.phase = to;
        }
        let slices = (0..volume.depth).map(|i| self.translate_slice(&volume.slice(i))).collect::<Result<Vec<_>>>()?;
        out.with_slices(&slices)
    }
}

/// Returns slices unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityTranslator;

impl SliceTranslator for IdentityTranslator {
    fn phases(&self) -> Option<(Phase, Phase)> {
        None
    }

    fn translate_slice(&self, slice: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(slice.clone())
    }
}

/// A trained generator run in evaluation mode.
#[derive(Clone, Debug)]
pub struct GeneratorTranslator {
    pub generator: Generator<f32>,
    pub from: Phase,
    pub to: Phase,
}

/// Which generator of a trained pair to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// `G`: X domain to Y domain.
    XToY,
    /// `F`: Y domain to X domain.
    YToX,
}

impl GeneratorTranslator {
    pub fn from_state(state: &CyTranState<f32>, direction: Direction) -> Self {
        let (x, y) = state.config.domains;
        match direction {
            Direction::XToY => Self { generator: state.g.clone(), from: x, to: y },
            Direction::YToX => Self { generator: state.f.clone(), from: y, to: x },
        }
    }
}

impl SliceTranslator for GeneratorTranslator {
    fn phases(&self) -> Option<(Phase, Phase)> {
        Some((self.from, self.to))
    }

    fn translate_slice(&self, slice: &Tensor<f32>) -> Result<Tensor<f32>> {
        let [c, h, w] = slice.shape() else {
            return Err(Error::shape("translate", format!("expected [1, S, S], got {:?}", slice.shape())));
        };
        let batch = slice.clone().reshape(&[1, *c, *h, *w])?;
        self.generator.generate_eval(&batch)?.reshape(&[*c, *h, *w])
    }
}
