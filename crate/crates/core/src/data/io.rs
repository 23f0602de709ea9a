//! Plain-text dataset files.
//!
//! items:        `catalog_index <TAB> token ids <TAB> patch values`
//! interactions: `user_id <TAB> catalog indices`
//!
//! Lists are space-separated; `#` starts a comment line.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, ItemRecord, UserSequence};
use crate::encoders::{PatchSequence, TokenSequence};
use crate::error::{Error, Result};

/// Patch grid of every item in a file: `q` patches of `patch_dim` values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchShape {
    pub q: usize,
    pub patch_dim: usize,
}

fn parse_list<V: std::str::FromStr>(field: &str, path: &Path, line: usize, what: &str) -> Result<Vec<V>> {
    field
        .split_whitespace()
        .map(|t| {
            t.parse::<V>().map_err(|_| Error::Parse {
                path: path.display().to_string(),
                line,
                detail: format!("bad {} {:?}", what, t),
            })
        })
        .collect()
}

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

fn parse_items(text: &str, path: &Path, shape: PatchShape) -> Result<Vec<ItemRecord>> {
    let mut items = Vec::new();
    for (n, line) in lines(text) {
        let fields: Vec<&str> = line.split('\t').collect();
        let err = |detail: String| Error::Parse {
            path: path.display().to_string(),
            line: n,
            detail,
        };
        if fields.len() != 3 {
            return Err(err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let catalog_index = fields[0]
            .trim()
            .parse::<usize>()
            .map_err(|_| err(format!("bad catalog index {:?}", fields[0])))?;
        let tokens = parse_list::<usize>(fields[1], path, n, "token id")?;
        let values = parse_list::<f64>(fields[2], path, n, "patch value")?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(err("non-finite patch value".into()));
        }
        let patches = PatchSequence::new(values, shape.q, shape.patch_dim).map_err(|e| err(e.to_string()))?;
        items.push(ItemRecord {
            catalog_index,
            tokens: TokenSequence::new(tokens),
            patches,
        });
    }
    Ok(items)
}

fn parse_users(text: &str, path: &Path) -> Result<Vec<UserSequence>> {
    let mut users = Vec::new();
    for (n, line) in lines(text) {
        let (id, rest) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            line: n,
            detail: "expected user id and item list separated by a tab".into(),
        })?;
        users.push(UserSequence {
            user_id: id.trim().to_string(),
            items: parse_list::<usize>(rest, path, n, "catalog index")?,
        });
    }
    Ok(users)
}

pub fn load_dataset(items_path: &Path, interactions_path: &Path, shape: PatchShape) -> Result<Dataset> {
    let items_text = fs::read_to_string(items_path).map_err(|e| Error::io(items_path, e))?;
    let users_text = fs::read_to_string(interactions_path).map_err(|e| Error::io(interactions_path, e))?;
    let ds = Dataset {
        items: parse_items(&items_text, items_path, shape)?,
        users: parse_users(&users_text, interactions_path)?,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn write_dataset(ds: &Dataset, items_path: &Path, interactions_path: &Path) -> Result<()> {
    let mut items = String::new();
    for it in &ds.items {
        let toks: Vec<String> = it.tokens.real_tokens().map(|t| t.to_string()).collect();
        // `{:?}` on f64 prints the shortest string that parses back exactly
        let vals: Vec<String> = it.patches.values.iter().map(|v| format!("{:?}", v)).collect();
        let _ = writeln!(items, "{}\t{}\t{}", it.catalog_index, toks.join(" "), vals.join(" "));
    }
    let mut users = String::new();
    for u in &ds.users {
        let seq: Vec<String> = u.items.iter().map(|i| i.to_string()).collect();
        let _ = writeln!(users, "{}\t{}", u.user_id, seq.join(" "));
    }
    fs::write(items_path, items).map_err(|e| Error::io(items_path, e))?;
    fs::write(interactions_path, users).map_err(|e| Error::io(interactions_path, e))?;
    Ok(())
}
