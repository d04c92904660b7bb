//! Per-class grouping of support items.

use fsar_tensor::{Graph, Scalar, Var};

use crate::error::{Error, Result};

/// Support items ordered by label, with `shot` items per class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassGroups {
    pub way: usize,
    pub shot: usize,
    /// Item indices sorted by label (stable within a class).
    pub order: Vec<usize>,
}

pub fn class_groups(labels: &[usize], way: usize) -> Result<ClassGroups> {
    if way == 0 || labels.is_empty() {
        return Err(Error::Contract("class grouping needs at least one class and one item".into()));
    }
    let mut counts = vec![0usize; way];
    for (i, &l) in labels.iter().enumerate() {
        if l >= way {
            return Err(Error::Contract(format!("item {i} has label {l} outside 0..{way}")));
        }
        counts[l] += 1;
    }
    let shot = counts[0];
    if let Some(c) = counts.iter().position(|&n| n != shot || n == 0) {
        return Err(Error::Contract(format!(
            "ragged classes: class 0 has {shot} items but class {c} has {}",
            counts[c]
        )));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by_key(|&i| labels[i]);
    Ok(ClassGroups { way, shot, order })
}

/// Per-class mean over the shots of `x [NK, ..]`, giving `[N, ..]`.
pub fn class_means<S: Scalar>(g: &mut Graph<S>, x: Var, groups: &ClassGroups) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.first() != Some(&groups.order.len()) {
        return Err(Error::Contract(format!(
            "expected {} grouped items, got shape {shape:?}",
            groups.order.len()
        )));
    }
    let sorted = g.index_select(x, 0, &groups.order)?;
    let mut grouped = vec![groups.way, groups.shot];
    grouped.extend_from_slice(&shape[1..]);
    let r = g.reshape(sorted, &grouped)?;
    Ok(g.mean(r, 1, false)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ragged_and_out_of_range_labels() {
        assert!(matches!(class_groups(&[0, 0, 1], 2), Err(Error::Contract(_))));
        assert!(matches!(class_groups(&[0, 2], 2), Err(Error::Contract(_))));
        assert!(matches!(class_groups(&[0, 0], 2), Err(Error::Contract(_))));
        let g = class_groups(&[1, 0, 1, 0], 2).unwrap();
        assert_eq!((g.shot, g.order.clone()), (2, vec![1, 3, 0, 2]));
    }
}
