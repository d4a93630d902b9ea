//! CT volumes: the CYTV container, intensity preprocessing, the synthetic
//! triphasic phantom and patient-level splitting.

mod phantom;
mod split;
mod volume;

pub use phantom::{generate_cohort, generate_phantom_triple, CohortOptions, PhantomSpec, PhantomTriple, Structure, StructureKind};
pub use split::{split, Split};
pub use volume::{load_volume, preprocess, preprocess_value, restore_value, save_volume, Phase, Volume};

use crate::error::{Error, Result};
use std::path::{Path, PathBuf};

/// File name of one phase of one patient inside a dataset directory.
pub fn volume_file_name(patient: usize, phase: Phase) -> String {
    format!("patient_{patient:04}_{}.cytv", phase.name())
}

/// Paths of every complete patient triple in `dir`, ordered by patient id.
pub fn dataset_patients(dir: impl AsRef<Path>) -> Result<Vec<[PathBuf; 3]>> {
    let dir = dir.as_ref();
    let mut ids: Vec<usize> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let rest = name.strip_prefix("patient_")?.strip_suffix(&format!("_{}.cytv", Phase::Native.name()))?;
            rest.parse().ok()
        })
        .collect();
    ids.sort_unstable();
    if ids.is_empty() {
        return Err(Error::Empty(format!("no patient volumes in {}", dir.display())));
    }
    ids.into_iter()
        .map(|id| {
            let paths = Phase::ALL.map(|p| dir.join(volume_file_name(id, p)));
            match paths.iter().find(|p| !p.exists()) {
                Some(missing) => Err(Error::InvalidArgument(format!("incomplete triple: {} is missing", missing.display()))),
                None => Ok(paths),
            }
        })
        .collect()
}
