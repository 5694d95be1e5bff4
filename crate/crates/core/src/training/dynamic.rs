//! Component bookkeeping for dynamic training: which components a batch
//! exercises, and snapshot/restore of the ones it does not.

use std::collections::{BTreeMap, BTreeSet};

use crate::casedata::{CaseRecord, Side};
use crate::featurenet::{GLOBAL, LOCAL};
use crate::milpool::{Operator, PoolingSpec, IMAGE_ATTENTION, SIDE_ATTENTION, VIEW_ATTENTION};
use crate::model::HEADS;
use crate::tensor::{ParamId, ParamStore, Tensor};

use super::optim::{OptimizerState, Slot};
use super::TrainError;

/// Component name to the parameters it owns.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ComponentRegistry {
    members: BTreeMap<String, Vec<ParamId>>,
}

impl ComponentRegistry {
    pub fn from_store(store: &ParamStore) -> Self {
        let members = store
            .components()
            .iter()
            .map(|c| (c.clone(), store.component_ids(c)))
            .collect();
        ComponentRegistry { members }
    }

    pub fn components(&self) -> impl Iterator<Item = &str> {
        self.members.keys().map(String::as_str)
    }

    pub fn params(&self, component: &str) -> &[ParamId] {
        self.members.get(component).map_or(&[], Vec::as_slice)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Snapshot {
    values: Vec<(ParamId, Tensor, Slot)>,
    /// Optimizer step at which the component last participated.
    stamp: u64,
}

/// Last-participating copies of each component's weights and optimizer
/// memory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SnapshotStore {
    snaps: BTreeMap<String, Snapshot>,
}

impl SnapshotStore {
    /// Snapshots every component at step 0.
    pub fn new(registry: &ComponentRegistry, store: &ParamStore, opt: &OptimizerState) -> Self {
        let mut s = SnapshotStore::default();
        for c in registry.components() {
            s.refresh(registry, c, store, opt, 0);
        }
        s
    }

    pub fn refresh(
        &mut self,
        registry: &ComponentRegistry,
        component: &str,
        store: &ParamStore,
        opt: &OptimizerState,
        stamp: u64,
    ) {
        let values = registry
            .params(component)
            .iter()
            .map(|&id| (id, store.get(id).value.clone(), opt.slot(id).clone()))
            .collect();
        self.snaps.insert(component.to_string(), Snapshot { values, stamp });
    }

    /// Bit-exact restore of weights, moments and step counts.
    pub fn restore(&self, component: &str, store: &mut ParamStore, opt: &mut OptimizerState) {
        if let Some(snap) = self.snaps.get(component) {
            for (id, value, slot) in &snap.values {
                store.get_mut(*id).value = value.clone();
                *opt.slot_mut(*id) = slot.clone();
            }
        }
    }

    pub fn stamp(&self, component: &str) -> Option<u64> {
        self.snaps.get(component).map(|s| s.stamp)
    }
}

/// Components exercised by a view-combination-homogeneous batch.
pub fn participating_components(batch: &[&CaseRecord], spec: PoolingSpec) -> Result<BTreeSet<String>, TrainError> {
    let Some(first) = batch.first() else {
        return Ok(BTreeSet::new());
    };
    let key = first.view_key();
    if batch.iter().any(|c| c.view_key() != key) {
        return Err(TrainError::HeterogeneousBatch);
    }
    let mut set: BTreeSet<String> = [GLOBAL, LOCAL, HEADS].iter().map(|s| s.to_string()).collect();
    match spec.operator {
        Operator::Att | Operator::GatedAtt => {
            if key.len() > 1 {
                set.insert(IMAGE_ATTENTION.into());
            }
        }
        Operator::SideAtt => {
            let left = key.iter().filter(|(s, _)| *s == Side::L).count();
            let right = key.len() - left;
            if left > 1 || right > 1 {
                set.insert(VIEW_ATTENTION.into());
            }
            if left > 0 && right > 0 {
                set.insert(SIDE_ATTENTION.into());
            }
        }
        Operator::Mean | Operator::Max => {}
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::casedata::{Grid, ImageRecord, Label, View};

    fn case(images: &[(Side, View)]) -> CaseRecord {
        let images = images
            .iter()
            .map(|&(side, view)| ImageRecord {
                side,
                view,
                pixels: Grid::zeros(1, 1),
                image_label: None,
                roi_boxes: vec![],
                source_path: String::new(),
            })
            .collect();
        CaseRecord::new("c", images, Label::Benign).unwrap()
    }

    fn parts(batch: &[(Side, View)], spec: &str) -> BTreeSet<String> {
        let c = case(batch);
        participating_components(&[&c, &c], spec.parse().unwrap()).unwrap()
    }

    use Side::{L, R};
    use View::{CC, MLO};

    #[test]
    fn table_rows() {
        let base: BTreeSet<String> = [GLOBAL, LOCAL, HEADS].iter().map(|s| s.to_string()).collect();
        assert_eq!(parts(&[(L, CC)], "es-att-side"), base);
        let p = parts(&[(L, CC), (L, MLO)], "es-att-side");
        assert!(p.contains(VIEW_ATTENTION) && !p.contains(SIDE_ATTENTION));
        let p = parts(&[(L, CC), (R, CC)], "es-att-side");
        assert!(!p.contains(VIEW_ATTENTION) && p.contains(SIDE_ATTENTION));
        let p = parts(&[(L, CC), (L, MLO), (R, CC), (R, MLO)], "is-att-side");
        assert!(p.contains(VIEW_ATTENTION) && p.contains(SIDE_ATTENTION));
        assert!(!parts(&[(L, CC)], "es-gatt").contains(IMAGE_ATTENTION));
        assert!(parts(&[(L, CC), (R, MLO)], "es-gatt").contains(IMAGE_ATTENTION));
    }

    #[test]
    fn mixed_batch_rejected() {
        let a = case(&[(L, CC)]);
        let b = case(&[(R, CC)]);
        assert!(matches!(
            participating_components(&[&a, &b], "es-att".parse().unwrap()),
            Err(TrainError::HeterogeneousBatch)
        ));
    }
}
