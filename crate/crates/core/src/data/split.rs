use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Patient indices of each partition, ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Deterministic patient-level split of `patients` indices by `ratios`
/// (train, val, test). Train and validation sizes are rounded to the nearest
/// integer and the test partition takes the remainder.
pub fn split(patients: usize, ratios: [f64; 3], seed: u64) -> Result<Split> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split ratios {ratios:?} must be in [0, 1] and sum to 1")));
    }
    let n_train = (patients as f64 * ratios[0]).round() as usize;
    let n_val = ((patients as f64 * ratios[1]).round() as usize).min(patients - n_train.min(patients));
    let n_train = n_train.min(patients);
    let n_test = patients - n_train - n_val;
    for (name, size, ratio) in [("train", n_train, ratios[0]), ("validation", n_val, ratios[1]), ("test", n_test, ratios[2])] {
        if size == 0 && ratio > 0.0 {
            return Err(Error::Empty(format!("{name} partition is empty for {patients} patients at ratio {ratio}")));
        }
    }
    let mut order: Vec<usize> = (0..patients).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut take = |k: usize| {
        let mut part: Vec<usize> = order.drain(..k).collect();
        part.sort_unstable();
        part
    };
    Ok(Split { train: take(n_train), val: take(n_val), test: take(n_test) })
}
