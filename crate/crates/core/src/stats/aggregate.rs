use std::collections::BTreeMap;

use serde::Serialize;

use super::{MeanStd, StatsError};

/// Row types that expose named string keys for grouping.
pub trait Keyed {
    fn key(&self, name: &str) -> Option<String>;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSummary {
    pub keys: Vec<(String, String)>,
    pub mean: f64,
    /// 0 for single-row groups; check `count`.
    pub std: f64,
    pub count: usize,
}

impl GroupSummary {
    pub fn key(&self, name: &str) -> Option<&str> {
        self.keys
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
    }
}

/// Group rows on `group_by` and reduce `value` to mean, std and count.
/// Output is ordered by the group key tuple.
pub fn aggregate<R, F>(
    rows: &[R],
    group_by: &[&str],
    value: F,
) -> Result<Vec<GroupSummary>, StatsError>
where
    R: Keyed,
    F: Fn(&R) -> f64,
{
    let mut groups: BTreeMap<Vec<String>, Vec<f64>> = BTreeMap::new();
    for row in rows {
        let key = group_by
            .iter()
            .map(|k| {
                row.key(k)
                    .ok_or_else(|| StatsError::UnknownKey((*k).to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        groups.entry(key).or_default().push(value(row));
    }
    Ok(groups
        .into_iter()
        .map(|(key, vals)| {
            let ms = MeanStd::of(&vals).expect("non-empty group");
            GroupSummary {
                keys: group_by.iter().map(|k| k.to_string()).zip(key).collect(),
                mean: ms.mean,
                std: ms.std,
                count: ms.count,
            }
        })
        .collect())
}
