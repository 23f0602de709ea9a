//! Datasets of items (text tokens + image patches) and user interaction
//! sequences, plus everything that turns them into training batches.

mod batch;
mod cold;
mod io;
mod split;
mod stats;
mod synthetic;

use std::collections::HashMap;

pub use batch::make_batches;
pub use cold::{cold_item_subsequences, train_occurrences, ColdCase};
pub use io::{load_dataset, write_dataset, PatchShape};
pub use split::{filter, filter_and_split, SplitDataset, SplitUser};
pub use stats::DatasetStats;
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticData};

use crate::encoders::{PatchSequence, TokenSequence};
use crate::error::{Error, Result};

/// An item is known only by its content; the catalog index is bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemRecord {
    pub catalog_index: usize,
    pub tokens: TokenSequence,
    pub patches: PatchSequence,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSequence {
    pub user_id: String,
    /// Catalog indices, oldest first.
    pub items: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub items: Vec<ItemRecord>,
    pub users: Vec<UserSequence>,
}

impl Dataset {
    /// Unique catalog indices, known interactions, consistent patch grids.
    pub fn validate(&self) -> Result<()> {
        let catalog = Catalog::new(self.items.clone())?;
        for u in &self.users {
            for i in &u.items {
                if catalog.position(*i).is_none() {
                    return Err(Error::UnknownItem(*i));
                }
            }
        }
        Ok(())
    }

    pub fn num_actions(&self) -> usize {
        self.users.iter().map(|u| u.items.len()).sum()
    }
}

/// Items addressable by catalog index, kept in a fixed order that defines
/// the column order of every full-catalog score vector.
#[derive(Clone, Debug)]
pub struct Catalog {
    items: Vec<ItemRecord>,
    index: HashMap<usize, usize>,
}

impl Catalog {
    pub fn new(items: Vec<ItemRecord>) -> Result<Self> {
        let mut index = HashMap::with_capacity(items.len());
        let mut shape = None;
        for (pos, it) in items.iter().enumerate() {
            if index.insert(it.catalog_index, pos).is_some() {
                return Err(Error::invalid(format!(
                    "duplicate catalog index {}",
                    it.catalog_index
                )));
            }
            let s = (it.patches.q, it.patches.patch_dim);
            if *shape.get_or_insert(s) != s {
                return Err(Error::invalid(format!(
                    "item {} has a {}x{} patch grid, others {}x{}",
                    it.catalog_index,
                    s.0,
                    s.1,
                    shape.unwrap().0,
                    shape.unwrap().1
                )));
            }
        }
        Ok(Self { items, index })
    }

    pub fn items(&self) -> &[ItemRecord] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn position(&self, catalog_index: usize) -> Option<usize> {
        self.index.get(&catalog_index).copied()
    }

    pub fn get(&self, catalog_index: usize) -> Result<&ItemRecord> {
        self.position(catalog_index)
            .map(|p| &self.items[p])
            .ok_or(Error::UnknownItem(catalog_index))
    }
}
