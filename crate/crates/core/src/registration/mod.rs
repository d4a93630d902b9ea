//! Deformable registration: displacement fields, trilinear warping, field
//! composition, the recursive cascade and the translate-then-register
//! pipeline.

mod regnet;

pub use regnet::{load_regnet, registration_loss, save_regnet, train_registration, RegNet, RegNetConfig, RegTrainConfig};

use crate::container::{self, Entries, Entry};
use crate::data::Volume;
use crate::error::{Error, Result};
use crate::tensor::kernels::{trilinear, warp_forward};
use crate::tensor::Tensor;
use crate::translate::SliceTranslator;
use std::path::Path;

/// Per-voxel displacement `(dz, dy, dx)` in voxel units, stored as three
/// planes `[3][D][H][W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    pub grid: [usize; 3],
    pub data: Vec<f32>,
}

impl DisplacementField {
    pub fn zeros(grid: [usize; 3]) -> Self {
        Self { grid, data: vec![0.0; 3 * grid.iter().product::<usize>()] }
    }

    pub fn constant(grid: [usize; 3], d: [f32; 3]) -> Self {
        let vox = grid.iter().product::<usize>();
        Self { grid, data: d.iter().flat_map(|&c| std::iter::repeat_n(c, vox)).collect() }
    }

    /// Field with `f(z, y, x)` at every voxel.
    pub fn from_fn(grid: [usize; 3], f: impl Fn(usize, usize, usize) -> [f32; 3]) -> Self {
        let vox = grid.iter().product::<usize>();
        let mut data = vec![0.0; 3 * vox];
        for z in 0..grid[0] {
            for y in 0..grid[1] {
                for x in 0..grid[2] {
                    let v = (z * grid[1] + y) * grid[2] + x;
                    let d = f(z, y, x);
                    for k in 0..3 {
                        data[k * vox + v] = d[k];
                    }
                }
            }
        }
        Self { grid, data }
    }

    pub fn for_volume(v: &Volume) -> Self {
        Self::zeros(volume_grid(v))
    }

    pub fn voxels(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn component(&self, axis: usize) -> &[f32] {
        &self.data[axis * self.voxels()..(axis + 1) * self.voxels()]
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.contains(&0) || self.data.len() != 3 * self.voxels() {
            return Err(Error::shape("field", format!("{} values for grid {:?}", self.data.len(), self.grid)));
        }
        if !self.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "field" });
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        let [d, h, w] = self.grid;
        Tensor::new(vec![3, d, h, w], self.data.clone()).expect("valid field")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        match *t.shape() {
            [3, d, h, w] | [1, 3, d, h, w] => {
                let f = Self { grid: [d, h, w], data: t.data().to_vec() };
                f.validate()?;
                Ok(f)
            }
            _ => Err(Error::shape("field", format!("expected [3, D, H, W], got {:?}", t.shape()))),
        }
    }
}

fn volume_grid(v: &Volume) -> [usize; 3] {
    [v.depth, v.height, v.width]
}

fn check_grid(op: &'static str, a: [usize; 3], b: [usize; 3]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("grid {a:?} vs {b:?}")));
    }
    Ok(())
}

/// `out(v) = input(v + field(v))`, trilinear with edge clamping.
pub fn warp(volume: &Volume, field: &DisplacementField) -> Result<Volume> {
    check_grid("warp", volume_grid(volume), field.grid)?;
    volume.with_voxels(warp_forward(&volume.voxels, &field.data, 1, field.grid))
}

/// `(a ∘ b)(v) = b(v) + a(v + b(v))`: warping by the result approximates
/// warping by `b`, then by `a`.
pub fn compose(a: &DisplacementField, b: &DisplacementField) -> Result<DisplacementField> {
    check_grid("compose", a.grid, b.grid)?;
    let g = a.grid;
    let vox = a.voxels();
    let mut data = vec![0.0f32; 3 * vox];
    for z in 0..g[0] {
        for y in 0..g[1] {
            for x in 0..g[2] {
                let v = (z * g[1] + y) * g[2] + x;
                let (bz, by, bx) = (b.data[v], b.data[vox + v], b.data[2 * vox + v]);
                let (pz, py, px) = (z as f32 + bz, y as f32 + by, x as f32 + bx);
                for (k, bk) in [bz, by, bx].into_iter().enumerate() {
                    data[k * vox + v] = bk + trilinear(a.component(k), g, pz, py, px);
                }
            }
        }
    }
    Ok(DisplacementField { grid: g, data })
}

pub fn save_field(field: &DisplacementField, path: impl AsRef<Path>) -> Result<()> {
    container::save(path, &[Entry::tensor("field", &field.to_tensor())])
}

pub fn load_field(path: impl AsRef<Path>) -> Result<DisplacementField> {
    let mut e = Entries::new(container::load(path)?);
    let field = DisplacementField::from_tensor(&e.tensor("field")?)?;
    e.finish()?;
    Ok(field)
}

/// Deterministic map from a (moving, fixed) pair to a field on the moving grid.
pub trait RegistrationModel {
    fn register(&self, moving: &Volume, fixed: &Volume) -> Result<DisplacementField>;
}

/// Always predicts the identity.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroFieldModel;

impl RegistrationModel for ZeroFieldModel {
    fn register(&self, moving: &Volume, fixed: &Volume) -> Result<DisplacementField> {
        check_grid("register", volume_grid(moving), volume_grid(fixed))?;
        Ok(DisplacementField::for_volume(moving))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CascadeMode {
    /// Each step's field is composed into the net field and the original
    /// moving volume is re-warped by it, so `warped == warp(moving, net)`.
    #[default]
    Compose,
    /// Each step warps the previous output; the net field is still composed
    /// and approximates the image recursion.
    Recursive,
}

#[derive(Clone, Debug)]
pub struct CascadeResult {
    pub warped: Volume,
    pub net_field: DisplacementField,
    /// Output volume after each step.
    pub steps: Vec<Volume>,
}

/// `n`-step recursive cascade with field composition.
pub fn cascade_register(model: &dyn RegistrationModel, moving: &Volume, fixed: &Volume, n: usize) -> Result<CascadeResult> {
    cascade_register_with(model, moving, fixed, n, CascadeMode::Compose)
}

pub fn cascade_register_with(
    model: &dyn RegistrationModel,
    moving: &Volume,
    fixed: &Volume,
    n: usize,
    mode: CascadeMode,
) -> Result<CascadeResult> {
    if n == 0 {
        return Err(Error::InvalidArgument("cascade needs at least one step".into()));
    }
    check_grid("register", volume_grid(moving), volume_grid(fixed))?;
    let mut net = DisplacementField::for_volume(moving);
    let mut current = moving.clone();
    let mut steps = Vec::with_capacity(n);
    for _ in 0..n {
        let step = model.register(&current, fixed)?;
        check_grid("register", volume_grid(moving), step.grid)?;
        step.validate()?;
        net = compose(&step, &net)?;
        current = match mode {
            CascadeMode::Compose => warp(moving, &net)?,
            CascadeMode::Recursive => warp(&current, &step)?,
        };
        steps.push(current.clone());
    }
    Ok(CascadeResult { warped: current, net_field: net, steps })
}

#[derive(Clone, Debug)]
pub struct PipelineResult {
    /// The contrast scan warped by the field estimated on its translation.
    pub aligned: Volume,
    pub translated: Volume,
    pub field: DisplacementField,
}

/// Translates `contrast` to the phase of `native`, registers the translation
/// to `native` with an `n`-step cascade, and applies the resulting field to
/// the untranslated `contrast` volume.
pub fn translate_then_register(
    translator: &dyn SliceTranslator,
    model: &dyn RegistrationModel,
    contrast: &Volume,
    native: &Volume,
    n: usize,
) -> Result<PipelineResult> {
    if let Some((from, to)) = translator.phases() {
        if from != contrast.phase || to != native.phase {
            return Err(Error::InvalidArgument(format!(
                "translator maps {} → {}, but the pipeline needs {} → {}",
                from.name(),
                to.name(),
                contrast.phase.name(),
                native.phase.name()
            )));
        }
    }
    let translated = translator.translate_volume(contrast)?;
    let cascade = cascade_register(model, &translated, native, n)?;
    let aligned = warp(contrast, &cascade.net_field)?;
    Ok(PipelineResult { aligned, translated, field: cascade.net_field })
}
