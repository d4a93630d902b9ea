use super::{Phase, Volume};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::TAU;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StructureKind {
    Body,
    Lung,
    Organ,
    /// Takes up contrast agent.
    Vessel,
    /// Takes up contrast agent.
    Lesion,
}

impl StructureKind {
    pub fn enhances(self) -> bool {
        matches!(self, StructureKind::Vessel | StructureKind::Lesion)
    }
}

/// Ellipsoid in normalized coordinates: each axis spans `[-1, 1]` across the
/// volume, ordered `(z, y, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Structure {
    pub kind: StructureKind,
    pub center: [f64; 3],
    pub axes: [f64; 3],
    /// Native-phase intensity on the normalized scale.
    pub base: f64,
    pub delta_venous: f64,
    pub delta_arterial: f64,
}

impl Structure {
    fn delta(&self, phase: Phase) -> f64 {
        match phase {
            Phase::Native => 0.0,
            Phase::Venous => self.delta_venous,
            Phase::Arterial => self.delta_arterial,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub depth: usize,
    pub background: f64,
    /// Painted in order; later structures cover earlier ones.
    pub structures: Vec<Structure>,
    pub noise_sigma: f64,
    /// Peak in-plane displacement, in voxels, of the smooth deformation
    /// applied to the contrast phases; 0 keeps all phases aligned.
    pub misalignment: f64,
    /// Width of the soft structure boundary, in pixels.
    pub edge_px: f64,
    pub slice_thickness_mm: f32,
    pub intercept: f32,
}

/// Three index-aligned phases of one synthetic patient.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomTriple {
    pub native: Volume,
    pub venous: Volume,
    pub arterial: Volume,
}

impl PhantomTriple {
    pub fn phase(&self, phase: Phase) -> &Volume {
        match phase {
            Phase::Native => &self.native,
            Phase::Venous => &self.venous,
            Phase::Arterial => &self.arterial,
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

impl PhantomSpec {
    /// A thorax-like layout with anatomy jittered by `seed`: body, lungs,
    /// spine, the four cardiac chambers, aorta, pulmonary trunk, pulmonary
    /// vessels and one or two lesions. Blood pools and lesions enhance;
    /// noise and misalignment are off, so set them on the returned spec.
    pub fn sample(image_size: usize, depth: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let mut s = Vec::new();
        let fixed = |kind, center, axes, base| Structure { kind, center, axes, base, delta_venous: 0.0, delta_arterial: 0.0 };
        let body = [2.0, uniform(r, 0.66, 0.76), uniform(r, 0.82, 0.92)];
        s.push(fixed(StructureKind::Body, [0.0, 0.0, 0.0], body, uniform(r, 0.0, 0.05)));
        for side in [-1.0, 1.0] {
            let center = [0.0, uniform(r, -0.1, 0.0), side * uniform(r, 0.4, 0.46)];
            let axes = [2.0, uniform(r, 0.42, 0.5), uniform(r, 0.26, 0.32)];
            s.push(fixed(StructureKind::Lung, center, axes, uniform(r, -0.85, -0.75)));
        }
        let spine = [0.0, uniform(r, 0.5, 0.56), uniform(r, -0.03, 0.03)];
        s.push(fixed(StructureKind::Organ, spine, [2.0, uniform(r, 0.1, 0.13), uniform(r, 0.1, 0.13)], uniform(r, 0.35, 0.5)));

        let blood = |r: &mut ChaCha8Rng, center, axes, venous: (f64, f64), arterial: (f64, f64)| Structure {
            kind: StructureKind::Vessel,
            center,
            axes,
            base: 0.04,
            delta_venous: uniform(r, venous.0, venous.1),
            delta_arterial: uniform(r, arterial.0, arterial.1),
        };
        // Myocardium, then the chambers inside it: right side (venous
        // return) enhances early, left side and aorta peak in the
        // arterial phase.
        let heart = [0.0, uniform(r, 0.08, 0.16), uniform(r, -0.06, 0.06)];
        let heart_axes = [2.0, uniform(r, 0.27, 0.32), uniform(r, 0.3, 0.36)];
        s.push(fixed(StructureKind::Organ, heart, heart_axes, 0.05));
        for (dy, dx, right) in [(-0.1, -0.12, true), (0.1, -0.12, true), (-0.1, 0.12, false), (0.1, 0.12, false)] {
            let center = [0.0, heart[1] + dy * heart_axes[1] / 0.3, heart[2] + dx * heart_axes[2] / 0.33];
            let axes = [2.0, uniform(r, 0.1, 0.13), uniform(r, 0.1, 0.13)];
            let (venous, arterial) = if right { ((0.22, 0.3), (0.18, 0.26)) } else { ((0.18, 0.24), (0.3, 0.4)) };
            s.push(blood(r, center, axes, venous, arterial));
        }
        let aorta = [0.0, uniform(r, -0.3, -0.22), uniform(r, 0.04, 0.12)];
        let radius = uniform(r, 0.08, 0.1);
        s.push(blood(r, aorta, [2.0, radius, radius], (0.15, 0.2), (0.3, 0.4)));
        let descending = [0.0, uniform(r, 0.36, 0.42), uniform(r, 0.1, 0.16)];
        let radius = uniform(r, 0.06, 0.08);
        s.push(blood(r, descending, [2.0, radius, radius], (0.15, 0.2), (0.3, 0.4)));
        let trunk = [0.0, uniform(r, -0.22, -0.14), uniform(r, -0.14, -0.06)];
        let radius = uniform(r, 0.06, 0.08);
        s.push(blood(r, trunk, [2.0, radius, radius], (0.2, 0.28), (0.2, 0.28)));
        for _ in 0..8 {
            let side = if r.random_bool(0.5) { -1.0 } else { 1.0 };
            let radius = uniform(r, 0.03, 0.06);
            let center = [uniform(r, -0.5, 0.5), uniform(r, -0.35, 0.3), side * uniform(r, 0.3, 0.52)];
            let axes = [uniform(r, 0.8, 2.0), radius, radius];
            s.push(blood(r, center, axes, (0.15, 0.22), (0.2, 0.3)));
        }
        let lesions = r.random_range(1..=2);
        for _ in 0..lesions {
            let side = if r.random_bool(0.5) { -1.0 } else { 1.0 };
            s.push(Structure {
                kind: StructureKind::Lesion,
                center: [uniform(r, -0.4, 0.4), uniform(r, -0.3, 0.2), side * uniform(r, 0.35, 0.5)],
                axes: [uniform(r, 0.5, 1.0), uniform(r, 0.06, 0.1), uniform(r, 0.06, 0.1)],
                base: uniform(r, 0.02, 0.06),
                delta_venous: uniform(r, 0.08, 0.14),
                delta_arterial: uniform(r, 0.12, 0.2),
            });
        }
        Self {
            image_size,
            depth,
            background: -1.0,
            structures: s,
            noise_sigma: 0.0,
            misalignment: 0.0,
            edge_px: 1.5,
            slice_thickness_mm: 1.5,
            intercept: -1024.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.depth == 0 {
            return Err(Error::InvalidArgument("phantom extents must be positive".into()));
        }
        let finite = [self.background, self.noise_sigma, self.misalignment, self.edge_px];
        if finite.iter().any(|v| !v.is_finite()) || self.noise_sigma < 0.0 || self.misalignment < 0.0 || self.edge_px <= 0.0 {
            return Err(Error::InvalidArgument("noise, misalignment and edge width must be finite and non-negative".into()));
        }
        for (i, s) in self.structures.iter().enumerate() {
            if s.axes.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
                return Err(Error::InvalidArgument(format!("structure {i}: axes must be positive")));
            }
            let in_plane = (1..3).all(|k| s.center[k].abs() + s.axes[k] <= 1.0 + 1e-12);
            if s.center[0].abs() > 1.0 || !in_plane {
                return Err(Error::InvalidArgument(format!("structure {i} extends outside the field of view")));
            }
            if !s.kind.enhances() && (s.delta_venous != 0.0 || s.delta_arterial != 0.0) {
                return Err(Error::InvalidArgument(format!("structure {i} ({:?}) cannot carry a contrast delta", s.kind)));
            }
        }
        Ok(())
    }

    /// Noise-free intensity of `phase` at continuous voxel coordinates.
    fn intensity(&self, phase: Phase, z: f64, y: f64, x: f64) -> f64 {
        let n = self.image_size as f64;
        let d = self.depth as f64;
        let p = [(2.0 * z + 1.0) / d - 1.0, (2.0 * y + 1.0) / n - 1.0, (2.0 * x + 1.0) / n - 1.0];
        let edge = 2.0 * self.edge_px / n;
        let mut value = self.background;
        for s in &self.structures {
            let r = (0..3).map(|k| ((p[k] - s.center[k]) / s.axes[k]).powi(2)).sum::<f64>().sqrt();
            // Signed distance to the surface, approximated along the in-plane minor axis.
            let minor = s.axes[1].min(s.axes[2]);
            let alpha = ((1.0 - r) * minor / edge + 0.5).clamp(0.0, 1.0);
            let target = s.base + s.delta(phase);
            if alpha >= 1.0 {
                value = target;
            } else if alpha > 0.0 {
                value += alpha * (target - value);
            }
        }
        value
    }

    /// Smooth in-plane displacement `(dy, dx)` at voxel `(z, y, x)`.
    fn displacement(&self, waves: &[[f64; 4]; 2], z: f64, y: f64, x: f64) -> (f64, f64) {
        let n = self.image_size as f64;
        let d = self.depth.max(1) as f64;
        let wave = |w: &[f64; 4]| {
            self.misalignment * (TAU * (w[0] * y / n + w[2])).sin() * (TAU * (w[1] * x / n + w[3])).cos() * (1.0 + 0.2 * (TAU * z / d).cos()) / 1.2
        };
        (wave(&waves[0]), wave(&waves[1]))
    }

    fn render<R: Rng + ?Sized>(&self, phase: Phase, rng: &mut R) -> Result<Volume> {
        let waves: [[f64; 4]; 2] = if self.misalignment > 0.0 && phase != Phase::Native {
            std::array::from_fn(|_| [uniform(rng, 0.5, 1.5), uniform(rng, 0.5, 1.5), rng.random(), rng.random()])
        } else {
            [[0.0; 4]; 2]
        };
        let (n, d) = (self.image_size, self.depth);
        let mut voxels = Vec::with_capacity(d * n * n);
        for z in 0..d {
            for y in 0..n {
                for x in 0..n {
                    let (zf, yf, xf) = (z as f64, y as f64, x as f64);
                    let (dy, dx) = if self.misalignment > 0.0 && phase != Phase::Native {
                        self.displacement(&waves, zf, yf, xf)
                    } else {
                        (0.0, 0.0)
                    };
                    voxels.push(self.intensity(phase, zf, yf + dy, xf + dx));
                }
            }
        }
        if self.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, self.noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            for v in &mut voxels {
                *v += normal.sample(rng);
            }
        }
        let mut vol = Volume::new(d, n, voxels.into_iter().map(|v| v as f32).collect(), phase)?;
        vol.intercept = self.intercept;
        vol.slice_thickness_mm = self.slice_thickness_mm;
        Ok(vol)
    }
}

/// Renders the native, venous and arterial phases of `spec`. The native
/// phase is the geometric reference; contrast phases differ from it only
/// inside enhancing structures, plus optional smooth misalignment and
/// independent noise. Deterministic per `seed`.
pub fn generate_phantom_triple(spec: &PhantomSpec, seed: u64) -> Result<PhantomTriple> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(PhantomTriple {
        native: spec.render(Phase::Native, &mut rng)?,
        venous: spec.render(Phase::Venous, &mut rng)?,
        arterial: spec.render(Phase::Arterial, &mut rng)?,
    })
}

/// Settings shared by every phantom in a generated cohort.
#[derive(Clone, Debug, PartialEq)]
pub struct CohortOptions {
    pub image_size: usize,
    pub depth: usize,
    pub noise_sigma: f64,
    pub misalignment: f64,
    /// `false` zeroes every contrast delta, leaving the phases to differ
    /// only by misalignment and noise.
    pub contrast: bool,
}

/// `count` phantom triples with anatomy and rendering seeds drawn from
/// `seed`. Patient `i` does not depend on `count`, so cohorts generated with
/// the same seed share a prefix.
pub fn generate_cohort(options: &CohortOptions, count: usize, seed: u64) -> Result<Vec<PhantomTriple>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let (anatomy, render) = (rng.random::<u64>(), rng.random::<u64>());
            let mut spec = PhantomSpec::sample(options.image_size, options.depth, anatomy);
            spec.noise_sigma = options.noise_sigma;
            spec.misalignment = options.misalignment;
            if !options.contrast {
                for structure in &mut spec.structures {
                    structure.delta_venous = 0.0;
                    structure.delta_arterial = 0.0;
                }
            }
            generate_phantom_triple(&spec, render)
        })
        .collect()
}
