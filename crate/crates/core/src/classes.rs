use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Classes seen so far in order of first appearance. Position `i` is the
/// classifier-head row of class `order[i]`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<usize>", into = "Vec<usize>")]
pub struct ClassIndex {
    order: Vec<usize>,
    rows: BTreeMap<usize, usize>,
}

impl From<Vec<usize>> for ClassIndex {
    fn from(order: Vec<usize>) -> Self {
        order.into_iter().collect()
    }
}

impl From<ClassIndex> for Vec<usize> {
    fn from(idx: ClassIndex) -> Self {
        idx.order
    }
}

impl ClassIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers unseen classes (in the given order) and returns how many
    /// were new.
    pub fn extend(&mut self, classes: impl IntoIterator<Item = usize>) -> usize {
        let before = self.order.len();
        for c in classes {
            if !self.rows.contains_key(&c) {
                self.rows.insert(c, self.order.len());
                self.order.push(c);
            }
        }
        self.order.len() - before
    }

    pub fn row(&self, class: usize) -> Option<usize> {
        self.rows.get(&class).copied()
    }

    pub fn class_at(&self, row: usize) -> usize {
        self.order[row]
    }

    pub fn contains(&self, class: usize) -> bool {
        self.rows.contains_key(&class)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn classes(&self) -> &[usize] {
        &self.order
    }

    pub fn sorted(&self) -> Vec<usize> {
        self.rows.keys().copied().collect()
    }

    /// Head rows of `labels`; panics on an unregistered class.
    pub fn rows_of(&self, labels: &[usize]) -> Vec<usize> {
        labels
            .iter()
            .map(|c| self.rows[c])
            .collect()
    }
}

impl FromIterator<usize> for ClassIndex {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        let mut idx = ClassIndex::new();
        idx.extend(iter);
        idx
    }
}
