//! Base/novel class partitions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The 20 DIOR categories.
pub const DIOR_CLASSES: [&str; 20] = [
    "airplane",
    "airport",
    "baseball field",
    "basketball court",
    "bridge",
    "chimney",
    "dam",
    "service area",
    "highway toll station",
    "golf course",
    "track field",
    "port",
    "viaduct",
    "ship",
    "stadium",
    "storage tank",
    "tennis court",
    "train station",
    "vehicle",
    "windmill",
];

const DIOR_NOVEL: [[&str; 5]; 4] = [
    ["baseball field", "basketball court", "bridge", "chimney", "ship"],
    ["airplane", "airport", "highway toll station", "port", "track field"],
    ["dam", "golf course", "storage tank", "tennis court", "vehicle"],
    ["service area", "viaduct", "stadium", "train station", "windmill"],
];

const NWPU_NOVEL: [&str; 3] = ["airplane", "baseball diamond", "tennis court"];

pub const SPLIT_IDS: [&str; 6] = ["dior-1", "dior-2", "dior-3", "dior-4", "nwpu", "synthetic"];

/// Number of trailing catalogue classes that are novel in the synthetic split.
pub const SYNTHETIC_NOVEL: usize = 2;

/// Class ids index into the catalogue passed to [`make_split`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub id: String,
    pub base: Vec<usize>,
    pub novel: Vec<usize>,
}

impl SplitSpec {
    pub fn novel_names<'a>(&self, catalogue: &'a [String]) -> Vec<&'a str> {
        self.novel.iter().map(|&c| catalogue[c].as_str()).collect()
    }

    pub fn base_names<'a>(&self, catalogue: &'a [String]) -> Vec<&'a str> {
        self.base.iter().map(|&c| catalogue[c].as_str()).collect()
    }

    pub fn is_novel(&self, class: usize) -> bool {
        self.novel.contains(&class)
    }
}

fn named(id: &str, catalogue: &[String], novel_names: &[&str]) -> Result<SplitSpec> {
    let mut novel = Vec::with_capacity(novel_names.len());
    for name in novel_names {
        let idx = catalogue.iter().position(|c| c == name).ok_or_else(|| {
            Error::Config(format!("split '{id}' needs class '{name}', which the catalogue lacks"))
        })?;
        novel.push(idx);
    }
    novel.sort_unstable();
    let base = (0..catalogue.len()).filter(|c| !novel.contains(c)).collect();
    Ok(SplitSpec {
        id: id.to_string(),
        base,
        novel,
    })
}

/// `dior-1..dior-4` and `nwpu` look their novel classes up by name;
/// `synthetic` makes the last two catalogue entries novel and
/// `synthetic-M` the last `M`.
pub fn make_split(catalogue: &[String], split_id: &str) -> Result<SplitSpec> {
    let unknown = || Error::UnknownSplit {
        id: split_id.to_string(),
        options: format!("{}, synthetic-M", SPLIT_IDS.join(", ")),
    };
    let split = match split_id {
        "dior-1" | "dior-2" | "dior-3" | "dior-4" => {
            let i: usize = split_id[5..].parse().map_err(|_| unknown())?;
            named(split_id, catalogue, &DIOR_NOVEL[i - 1])?
        }
        "nwpu" => named(split_id, catalogue, &NWPU_NOVEL)?,
        _ => {
            let m = if split_id == "synthetic" {
                SYNTHETIC_NOVEL
            } else if let Some(m) = split_id.strip_prefix("synthetic-") {
                m.parse().map_err(|_| unknown())?
            } else {
                return Err(unknown());
            };
            let n = catalogue.len();
            if m == 0 || m >= n {
                return Err(Error::Config(format!(
                    "split '{split_id}' needs 1..{n} novel classes for a catalogue of {n}"
                )));
            }
            SplitSpec {
                id: split_id.to_string(),
                base: (0..n - m).collect(),
                novel: (n - m..n).collect(),
            }
        }
    };
    Ok(split)
}
