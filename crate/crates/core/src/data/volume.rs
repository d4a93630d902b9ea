use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"CYTV";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 12 + 1 + 4 + 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Native = 0,
    Venous = 1,
    Arterial = 2,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Native, Phase::Venous, Phase::Arterial];

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Native => "native",
            Phase::Venous => "venous",
            Phase::Arterial => "arterial",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown phase {s:?}")))
    }
}

/// A CT volume of square slices, stored slice-major then row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub voxels: Vec<f32>,
    pub intercept: f32,
    pub slice_thickness_mm: f32,
    pub phase: Phase,
}

impl Volume {
    pub fn new(depth: usize, size: usize, voxels: Vec<f32>, phase: Phase) -> Result<Self> {
        let v = Self { depth, height: size, width: size, voxels, intercept: 0.0, slice_thickness_mm: 1.0, phase };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.height == 0 || self.height != self.width {
            return Err(Error::shape(
                "volume",
                format!("need depth ≥ 1 and square slices, got {}×{}×{}", self.depth, self.height, self.width),
            ));
        }
        if self.voxels.len() != self.depth * self.height * self.width {
            return Err(Error::shape("volume", format!("{} voxels for {}×{}×{}", self.voxels.len(), self.depth, self.height, self.width)));
        }
        if !self.voxels.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "volume" });
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.height
    }

    pub fn slice_len(&self) -> usize {
        self.height * self.width
    }

    pub fn slice_data(&self, i: usize) -> &[f32] {
        &self.voxels[i * self.slice_len()..(i + 1) * self.slice_len()]
    }

    /// Slice `i` as a `[1, H, W]` tensor.
    pub fn slice(&self, i: usize) -> Tensor<f32> {
        Tensor::new(vec![1, self.height, self.width], self.slice_data(i).to_vec()).expect("valid slice")
    }

    pub fn slices(&self) -> Vec<Tensor<f32>> {
        (0..self.depth).map(|i| self.slice(i)).collect()
    }

    /// Same metadata, voxels replaced by `[1, H, W]` slices.
    pub fn with_slices(&self, slices: &[Tensor<f32>]) -> Result<Self> {
        let expected = [1, self.height, self.width];
        if slices.len() != self.depth || slices.iter().any(|s| s.shape() != expected) {
            return Err(Error::shape("volume", format!("expected {} slices of {expected:?}", self.depth)));
        }
        let voxels = slices.iter().flat_map(|s| s.data().iter().copied()).collect();
        let v = Self { voxels, ..self.clone() };
        v.validate()?;
        Ok(v)
    }

    pub fn with_voxels(&self, voxels: Vec<f32>) -> Result<Self> {
        let v = Self { voxels, ..self.clone() };
        v.validate()?;
        Ok(v)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.voxels.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for d in [self.depth, self.height, self.width] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(self.phase as u8);
        out.extend_from_slice(&self.intercept.to_le_bytes());
        out.extend_from_slice(&self.slice_thickness_mm.to_le_bytes());
        for v in &self.voxels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::format(0, "truncated magic"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::format(0, "bad magic, expected CYTV"));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::format(bytes.len() as u64, format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len())));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(Error::Version { found: version, expected: VERSION });
        }
        let (depth, height, width) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
        if depth == 0 || height == 0 {
            return Err(Error::format(8, "zero extent"));
        }
        if height != width {
            return Err(Error::format(12, format!("slices must be square, got {height}×{width}")));
        }
        let phase = Phase::from_tag(bytes[20]).ok_or_else(|| Error::format(20, format!("unknown phase tag {}", bytes[20])))?;
        let intercept = f32_at(21);
        let slice_thickness_mm = f32_at(25);
        let count = depth
            .checked_mul(height)
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| Error::format(8, "voxel count overflows"))?;
        let payload = &bytes[HEADER_LEN..];
        let needed = count.checked_mul(4).ok_or_else(|| Error::format(8, "voxel count overflows"))?;
        if payload.len() < needed {
            return Err(Error::format(
                bytes.len() as u64,
                format!("truncated payload: header declares {count} voxels ({needed} bytes), {} bytes present", payload.len()),
            ));
        }
        if payload.len() > needed {
            return Err(Error::format((HEADER_LEN + needed) as u64, format!("{} trailing bytes", payload.len() - needed)));
        }
        let mut voxels = Vec::with_capacity(count);
        for (i, c) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(c.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::format((HEADER_LEN + 4 * i) as u64, "non-finite voxel"));
            }
            voxels.push(v);
        }
        Ok(Self { depth, height, width, voxels, intercept, slice_thickness_mm, phase })
    }
}

pub fn save_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    volume.validate()?;
    std::fs::write(path, volume.to_bytes())?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    Volume::from_bytes(&std::fs::read(path)?)
}

/// `(raw − intercept) / 1000`.
pub fn preprocess_value(raw: f64, intercept: f64) -> f64 {
    (raw - intercept) / 1000.0
}

/// Inverse of [`preprocess_value`] for integer-valued raw data: the scaled
/// value is rounded to the nearest integer before the intercept is added
/// back, which removes the division's rounding error.
pub fn restore_value(value: f64, intercept: f64) -> f64 {
    (value * 1000.0).round() + intercept
}

/// Converts raw scanner values to the normalized scale. The stored intercept
/// records the offset that was removed.
pub fn preprocess(raw: &[f64], depth: usize, size: usize, intercept: f64, phase: Phase) -> Result<Volume> {
    let voxels = raw.iter().map(|&r| preprocess_value(r, intercept) as f32).collect();
    let mut v = Volume::new(depth, size, voxels, phase)?;
    v.intercept = intercept as f32;
    Ok(v)
}
