use std::fmt;

use serde::{Deserialize, Serialize};

use super::Dataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub actions: usize,
    pub avg_len: f64,
    /// 1 − actions / (users · items)
    pub sparsity: f64,
}

impl DatasetStats {
    pub fn of(ds: &Dataset) -> Self {
        let users = ds.users.len();
        let items = ds.items.len();
        let actions = ds.num_actions();
        let cells = (users * items) as f64;
        Self {
            users,
            items,
            actions,
            avg_len: if users == 0 { 0.0 } else { actions as f64 / users as f64 },
            sparsity: if cells == 0.0 { 1.0 } else { 1.0 - actions as f64 / cells },
        }
    }
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>10}", "users", self.users)?;
        writeln!(f, "{:<10} {:>10}", "items", self.items)?;
        writeln!(f, "{:<10} {:>10}", "actions", self.actions)?;
        writeln!(f, "{:<10} {:>10.2}", "avg_len", self.avg_len)?;
        writeln!(f, "{:<10} {:>9.4}%", "sparsity", 100.0 * self.sparsity)
    }
}
