use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: u32,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub id: String,
    pub class_id: u32,
    pub split: Split,
}

/// Index of classes, videos and splits. Serialized as JSON with keys
/// `classes`, `videos`, `T`, `C`, `R`, `splits`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub classes: Vec<ClassEntry>,
    pub videos: Vec<VideoEntry>,
    #[serde(rename = "T")]
    pub frames: usize,
    #[serde(rename = "C")]
    pub channels: usize,
    #[serde(rename = "R")]
    pub templates: usize,
    /// Class ids per split.
    pub splits: BTreeMap<Split, Vec<u32>>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::Integrity(format!("T = {} but at least 2 frames are needed", self.frames)));
        }
        if self.channels == 0 || self.templates == 0 {
            return Err(Error::Integrity(format!("C = {} and R = {} must be positive", self.channels, self.templates)));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.id as usize != i {
                return Err(Error::Integrity(format!(
                    "class ids must be dense 0..{}; position {i} holds id {}",
                    self.classes.len(),
                    c.id
                )));
            }
        }
        let mut owner: HashMap<u32, Split> = HashMap::new();
        for (&split, ids) in &self.splits {
            for &id in ids {
                if id as usize >= self.classes.len() {
                    return Err(Error::Integrity(format!("split {split} lists unknown class {id}")));
                }
                if let Some(prev) = owner.insert(id, split) {
                    return Err(Error::Integrity(format!("class {id} appears in both {prev} and {split} splits")));
                }
            }
        }
        let mut seen = HashSet::new();
        for v in &self.videos {
            if !seen.insert(v.id.as_str()) {
                return Err(Error::Integrity(format!("duplicate video id {}", v.id)));
            }
            if v.class_id as usize >= self.classes.len() {
                return Err(Error::Integrity(format!("video {} has unknown class {}", v.id, v.class_id)));
            }
            match owner.get(&v.class_id) {
                Some(&s) if s == v.split => {}
                Some(&s) => {
                    return Err(Error::Integrity(format!(
                        "video {} is in split {} but its class {} belongs to {s}",
                        v.id, v.split, v.class_id
                    )))
                }
                None => {
                    return Err(Error::Integrity(format!(
                        "class {} of video {} is not assigned to any split",
                        v.class_id, v.id
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn classes_in(&self, split: Split) -> &[u32] {
        self.splits.get(&split).map_or(&[], Vec::as_slice)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("manifest: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Manifest {
        Manifest {
            classes: vec![ClassEntry { id: 0, name: "a".into() }, ClassEntry { id: 1, name: "b".into() }],
            videos: vec![
                VideoEntry { id: "v0".into(), class_id: 0, split: Split::Train },
                VideoEntry { id: "v1".into(), class_id: 1, split: Split::Test },
            ],
            frames: 8,
            channels: 4,
            templates: 2,
            splits: BTreeMap::from([(Split::Train, vec![0]), (Split::Test, vec![1])]),
        }
    }

    #[test]
    fn valid_manifest_passes() {
        tiny().validate().unwrap();
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let mut m = tiny();
        m.splits.insert(Split::Test, vec![0, 1]);
        assert!(matches!(m.validate(), Err(Error::Integrity(_))));
    }

    #[test]
    fn single_frame_is_rejected() {
        let mut m = tiny();
        m.frames = 1;
        assert!(m.validate().is_err());
    }

    #[test]
    fn json_keys() {
        let text = tiny().to_json();
        for key in ["\"classes\"", "\"videos\"", "\"T\"", "\"C\"", "\"R\"", "\"splits\""] {
            assert!(text.contains(key), "{key} missing");
        }
        assert_eq!(Manifest::from_json(&text).unwrap(), tiny());
    }
}
