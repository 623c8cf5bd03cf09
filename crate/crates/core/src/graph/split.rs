use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, GraphError};

/// How the items left after k-shot selection are divided 1:9 into val/test.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum SplitMode {
    /// One pooled shuffle of all remaining items.
    #[default]
    Global,
    /// The 1:9 division is applied within each class.
    Stratified,
}

/// Disjoint train/val/test item ids (nodes or graphs), each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub shots: usize,
    pub seed: u64,
}

pub fn kshot_split(dataset: &Dataset, shots: usize, seed: u64) -> Result<FewShotSplit, GraphError> {
    kshot_split_with(dataset, shots, seed, SplitMode::Global)
}

/// Picks `min(shots, class size)` training items per class, then gives
/// `floor(remaining / 10)` items to validation and the rest to test. One
/// seeded stream drives every shuffle.
pub fn kshot_split_with(
    dataset: &Dataset,
    shots: usize,
    seed: u64,
    mode: SplitMode,
) -> Result<FewShotSplit, GraphError> {
    if shots == 0 {
        return Err(GraphError::Config("shot count must be at least 1".into()));
    }
    let mut by_class = vec![Vec::new(); dataset.classes()];
    for (id, label) in dataset.item_labels().into_iter().enumerate() {
        if let Some(c) = label {
            by_class[c].push(id);
        }
    }
    if let Some(empty) = by_class.iter().position(Vec::is_empty) {
        return Err(GraphError::EmptyClass(empty));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut rest_by_class = Vec::with_capacity(by_class.len());
    for mut members in by_class {
        members.shuffle(&mut rng);
        let take = shots.min(members.len());
        train.extend_from_slice(&members[..take]);
        rest_by_class.push(members.split_off(take));
    }

    let (mut val, mut test) = (Vec::new(), Vec::new());
    match mode {
        SplitMode::Global => {
            let mut rest: Vec<usize> = rest_by_class.into_iter().flatten().collect();
            rest.sort_unstable();
            rest.shuffle(&mut rng);
            let n_val = rest.len() / 10;
            val.extend_from_slice(&rest[..n_val]);
            test.extend_from_slice(&rest[n_val..]);
        }
        SplitMode::Stratified => {
            for rest in rest_by_class {
                let n_val = rest.len() / 10;
                val.extend_from_slice(&rest[..n_val]);
                test.extend_from_slice(&rest[n_val..]);
            }
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(FewShotSplit {
        train,
        val,
        test,
        shots,
        seed,
    })
}
