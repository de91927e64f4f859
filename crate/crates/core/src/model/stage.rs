use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::LayerKind;

/// Encoder layers grouped into contiguous optimization units, each ending at
/// a global-attention layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: Vec<RangeInclusive<usize>>,
}

/// Splits after every global layer. The last layer must be global.
pub fn stage_partition(kinds: &[LayerKind]) -> Result<StagePlan> {
    match kinds.last() {
        None => return Err(Error::Config("no encoder layers to partition".into())),
        Some(LayerKind::Window) => {
            return Err(Error::Config("last encoder layer is not global".into()));
        }
        Some(LayerKind::Global) => {}
    }
    let mut stages = Vec::new();
    let mut start = 0;
    for (i, k) in kinds.iter().enumerate() {
        if *k == LayerKind::Global {
            stages.push(start..=i);
            start = i + 1;
        }
    }
    Ok(StagePlan { stages })
}

impl StagePlan {
    /// One unit per layer.
    pub fn per_layer(layers: usize) -> Self {
        Self {
            stages: (0..layers).map(|i| i..=i).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// Index of the last layer of each unit.
    pub fn ends(&self) -> Vec<usize> {
        self.stages.iter().map(|r| *r.end()).collect()
    }

    pub fn stage_of(&self, layer: usize) -> Option<usize> {
        self.stages.iter().position(|r| r.contains(&layer))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kinds(n: usize, globals: &[usize]) -> Vec<LayerKind> {
        (0..n)
            .map(|i| if globals.contains(&i) { LayerKind::Global } else { LayerKind::Window })
            .collect()
    }

    #[test]
    fn eight_layers() {
        let p = stage_partition(&kinds(8, &[3, 7])).unwrap();
        assert_eq!(p.stages, vec![0..=3, 4..=7]);
    }

    #[test]
    fn all_global_gives_singletons() {
        let p = stage_partition(&kinds(5, &[0, 1, 2, 3, 4])).unwrap();
        assert_eq!(p, StagePlan::per_layer(5));
    }

    #[test]
    fn trailing_window_layer_rejected() {
        assert!(stage_partition(&kinds(4, &[1])).is_err());
        assert!(stage_partition(&[]).is_err());
    }

    proptest! {
        #[test]
        fn stages_cover_layers_disjointly(mut bits in proptest::collection::vec(any::<bool>(), 0..24)) {
            bits.push(true);
            let ks: Vec<LayerKind> = bits.iter().map(|&g| if g { LayerKind::Global } else { LayerKind::Window }).collect();
            let plan = stage_partition(&ks).unwrap();
            let mut next = 0;
            for r in &plan.stages {
                prop_assert_eq!(*r.start(), next);
                prop_assert!(r.end() >= r.start());
                prop_assert_eq!(ks[*r.end()], LayerKind::Global);
                prop_assert!(ks[*r.start()..*r.end()].iter().all(|k| *k == LayerKind::Window));
                next = r.end() + 1;
            }
            prop_assert_eq!(next, ks.len());
        }
    }
}
