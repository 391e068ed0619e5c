//! Conversion types, display scenarios, per-batch domain masks and the
//! in-batch dynamic loss weights.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// A (conversion type, display scenario) pair, by registry index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DomainId {
    pub type_idx: usize,
    pub scenario_idx: usize,
}

impl DomainId {
    pub fn new(type_idx: usize, scenario_idx: usize) -> Self {
        Self {
            type_idx,
            scenario_idx,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainRegistry {
    types: Vec<String>,
    scenarios: Vec<String>,
    type_index: HashMap<String, usize>,
    scenario_index: HashMap<String, usize>,
}

fn index_codes(kind: &str, codes: &[String]) -> Result<HashMap<String, usize>> {
    if codes.is_empty() {
        return Err(Error::Config(format!("at least one {kind} is required")));
    }
    let mut index = HashMap::with_capacity(codes.len());
    for (i, code) in codes.iter().enumerate() {
        if code.is_empty() || code.contains(['\t', '\n', ',']) {
            return Err(Error::Config(format!("invalid {kind} code {code:?}")));
        }
        if index.insert(code.clone(), i).is_some() {
            return Err(Error::Config(format!("duplicate {kind} code {code:?}")));
        }
    }
    Ok(index)
}

impl DomainRegistry {
    pub fn new<S: Into<String>>(
        types: impl IntoIterator<Item = S>,
        scenarios: impl IntoIterator<Item = S>,
    ) -> Result<Self> {
        let types: Vec<String> = types.into_iter().map(Into::into).collect();
        let scenarios: Vec<String> = scenarios.into_iter().map(Into::into).collect();
        let type_index = index_codes("conversion type", &types)?;
        let scenario_index = index_codes("display scenario", &scenarios)?;
        Ok(Self {
            types,
            scenarios,
            type_index,
            scenario_index,
        })
    }

    /// Registry with generated codes `t0..`, `s0..`.
    pub fn with_counts(num_types: usize, num_scenarios: usize) -> Result<Self> {
        Self::new(
            (0..num_types).map(|i| format!("t{i}")),
            (0..num_scenarios).map(|j| format!("s{j}")),
        )
    }

    pub fn num_types(&self) -> usize {
        self.types.len()
    }

    pub fn num_scenarios(&self) -> usize {
        self.scenarios.len()
    }

    pub fn num_domains(&self) -> usize {
        self.types.len() * self.scenarios.len()
    }

    pub fn types(&self) -> &[String] {
        &self.types
    }

    pub fn scenarios(&self) -> &[String] {
        &self.scenarios
    }

    pub fn type_code(&self, idx: usize) -> &str {
        &self.types[idx]
    }

    pub fn scenario_code(&self, idx: usize) -> &str {
        &self.scenarios[idx]
    }

    pub fn type_index(&self, code: &str) -> Result<usize> {
        self.type_index
            .get(code)
            .copied()
            .ok_or_else(|| Error::UnknownDomain {
                kind: "conversion type",
                code: code.to_string(),
            })
    }

    pub fn scenario_index(&self, code: &str) -> Result<usize> {
        self.scenario_index
            .get(code)
            .copied()
            .ok_or_else(|| Error::UnknownDomain {
                kind: "display scenario",
                code: code.to_string(),
            })
    }

    pub fn domain_of(&self, type_code: &str, scenario_code: &str) -> Result<DomainId> {
        Ok(DomainId::new(
            self.type_index(type_code)?,
            self.scenario_index(scenario_code)?,
        ))
    }

    pub fn contains(&self, d: DomainId) -> bool {
        d.type_idx < self.types.len() && d.scenario_idx < self.scenarios.len()
    }

    /// Flattened index `type × N_s + scenario`.
    pub fn flat_index(&self, d: DomainId) -> usize {
        d.type_idx * self.scenarios.len() + d.scenario_idx
    }

    pub fn from_flat(&self, flat: usize) -> DomainId {
        DomainId::new(flat / self.scenarios.len(), flat % self.scenarios.len())
    }

    pub fn domain_label(&self, d: DomainId) -> String {
        format!("{}/{}", self.types[d.type_idx], self.scenarios[d.scenario_idx])
    }
}

/// Instances of one non-empty domain within a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainGroup {
    pub domain: DomainId,
    /// Batch positions, ascending.
    pub rows: Vec<usize>,
    /// Indicator vector over the whole batch.
    pub mask: Vec<f64>,
}

impl DomainGroup {
    pub fn count(&self) -> usize {
        self.rows.len()
    }
}

/// Indicator masks of the non-empty domains of one batch, ordered by
/// flattened domain index. Empty domains are not materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMasks {
    batch_size: usize,
    groups: Vec<DomainGroup>,
}

impl BatchMasks {
    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn groups(&self) -> &[DomainGroup] {
        &self.groups
    }

    pub fn nonempty_domains(&self) -> impl Iterator<Item = DomainId> + '_ {
        self.groups.iter().map(|g| g.domain)
    }

    pub fn count(&self, d: DomainId) -> usize {
        self.group(d).map_or(0, DomainGroup::count)
    }

    pub fn group(&self, d: DomainId) -> Option<&DomainGroup> {
        self.groups
            .binary_search_by(|g| g.domain.cmp(&d))
            .ok()
            .map(|i| &self.groups[i])
    }

    /// Mask of `d`; all zeros when the domain is absent from the batch.
    pub fn mask(&self, d: DomainId) -> Vec<f64> {
        self.group(d)
            .map_or_else(|| vec![0.0; self.batch_size], |g| g.mask.clone())
    }

    /// True when some instance has conversion type `t`.
    pub fn has_type(&self, t: usize) -> bool {
        self.groups.iter().any(|g| g.domain.type_idx == t)
    }

    pub fn has_scenario(&self, s: usize) -> bool {
        self.groups.iter().any(|g| g.domain.scenario_idx == s)
    }
}

/// Builds `m_{t_i s_j}[n] = I(type_n == t_i and scenario_n == s_j)` for every
/// domain present in `ids`.
pub fn compute_masks(ids: &[DomainId], registry: &DomainRegistry) -> Result<BatchMasks> {
    let n = ids.len();
    let mut by_flat: Vec<Option<Vec<usize>>> = vec![None; registry.num_domains()];
    for (row, &d) in ids.iter().enumerate() {
        if !registry.contains(d) {
            return Err(Error::DomainIndex(format!(
                "({}, {}) outside {}x{} registry",
                d.type_idx,
                d.scenario_idx,
                registry.num_types(),
                registry.num_scenarios()
            )));
        }
        by_flat[registry.flat_index(d)]
            .get_or_insert_with(Vec::new)
            .push(row);
    }
    let groups = by_flat
        .into_iter()
        .enumerate()
        .filter_map(|(flat, rows)| {
            let rows = rows?;
            let mut mask = vec![0.0; n];
            for &r in &rows {
                mask[r] = 1.0;
            }
            Some(DomainGroup {
                domain: registry.from_flat(flat),
                rows,
                mask,
            })
        })
        .collect();
    Ok(BatchMasks {
        batch_size: n,
        groups,
    })
}

/// Per-instance weight `N / N_c`, recomputed for every batch.
pub fn dynamic_weights(masks: &BatchMasks) -> Vec<f64> {
    let n = masks.batch_size as f64;
    let mut weights = vec![0.0; masks.batch_size];
    for g in &masks.groups {
        let w = n / g.count() as f64;
        for &r in &g.rows {
            weights[r] = w;
        }
    }
    weights
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reg22() -> DomainRegistry {
        DomainRegistry::new(["t1", "t2"], ["s1", "s2"]).unwrap()
    }

    fn ids(reg: &DomainRegistry, pairs: &[(&str, &str)]) -> Vec<DomainId> {
        pairs.iter().map(|(t, s)| reg.domain_of(t, s).unwrap()).collect()
    }

    #[test]
    fn worked_example_masks() {
        let reg = reg22();
        let batch = ids(&reg, &[("t1", "s1"), ("t2", "s1"), ("t1", "s1"), ("t2", "s2")]);
        let masks = compute_masks(&batch, &reg).unwrap();
        let d = |t, s| reg.domain_of(t, s).unwrap();
        assert_eq!(masks.mask(d("t1", "s1")), vec![1.0, 0.0, 1.0, 0.0]);
        assert_eq!(masks.mask(d("t1", "s2")), vec![0.0; 4]);
        assert_eq!(masks.mask(d("t2", "s1")), vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(masks.mask(d("t2", "s2")), vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(masks.groups().len(), 3);
        assert_eq!(dynamic_weights(&masks), vec![2.0, 4.0, 2.0, 4.0]);
    }

    #[test]
    fn homogeneous_and_singleton_batches() {
        let reg = reg22();
        let batch = ids(&reg, &[("t1", "s1"); 5]);
        let masks = compute_masks(&batch, &reg).unwrap();
        assert_eq!(masks.groups().len(), 1);
        assert_eq!(masks.groups()[0].mask, vec![1.0; 5]);
        assert_eq!(dynamic_weights(&masks), vec![1.0; 5]);

        let one = compute_masks(&ids(&reg, &[("t2", "s2")]), &reg).unwrap();
        assert_eq!(one.groups().len(), 1);
        assert_eq!(one.groups()[0].mask, vec![1.0]);
    }

    #[test]
    fn weights_for_counts_three_two_one() {
        let reg = DomainRegistry::with_counts(3, 1).unwrap();
        let batch: Vec<DomainId> = [0, 1, 0, 2, 1, 0].iter().map(|&t| DomainId::new(t, 0)).collect();
        let w = dynamic_weights(&compute_masks(&batch, &reg).unwrap());
        assert_eq!(w, vec![2.0, 3.0, 2.0, 6.0, 3.0, 2.0]);
    }

    #[test]
    fn unknown_codes_and_indices() {
        let reg = reg22();
        assert!(matches!(reg.domain_of("t3", "s1"), Err(Error::UnknownDomain { .. })));
        assert!(compute_masks(&[DomainId::new(2, 0)], &reg).is_err());
        assert!(DomainRegistry::new(["a", "a"], ["s"]).is_err());
        assert!(DomainRegistry::new(Vec::<String>::new(), vec!["s".to_string()]).is_err());
    }

    #[test]
    fn registry_round_trip() {
        let reg = DomainRegistry::with_counts(5, 3).unwrap();
        for code in reg.types() {
            assert_eq!(reg.type_code(reg.type_index(code).unwrap()), code);
        }
        for flat in 0..reg.num_domains() {
            assert_eq!(reg.flat_index(reg.from_flat(flat)), flat);
        }
        assert_eq!(reg.flat_index(DomainId::new(2, 1)), 7);
    }

    proptest! {
        #[test]
        fn masks_partition_and_weights_normalize(
            raw in proptest::collection::vec((0usize..4, 0usize..3), 1..300)
        ) {
            let reg = DomainRegistry::with_counts(4, 3).unwrap();
            let batch: Vec<DomainId> = raw.iter().map(|&(t, s)| DomainId::new(t, s)).collect();
            let masks = compute_masks(&batch, &reg).unwrap();
            let mut cover = vec![0.0; batch.len()];
            for flat in 0..reg.num_domains() {
                for (c, m) in cover.iter_mut().zip(masks.mask(reg.from_flat(flat))) {
                    *c += m;
                }
            }
            prop_assert!(cover.iter().all(|&c| c == 1.0));
            let total: usize = masks.groups().iter().map(DomainGroup::count).sum();
            prop_assert_eq!(total, batch.len());

            let w = dynamic_weights(&masks);
            let n = batch.len() as f64;
            for g in masks.groups() {
                let s: f64 = g.rows.iter().map(|&r| w[r]).sum();
                prop_assert!((s - n).abs() <= 1e-12 * n);
            }
        }
    }
}
