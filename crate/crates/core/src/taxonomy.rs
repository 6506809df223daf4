//! Category universe: fine labels, their coarse grouping, the coarse color
//! palette, and harmonization of per-scene raw annotations into global ids.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fnv::Fnv1a;

/// Coarse index of the reserved `wall` label.
pub const WALL: usize = 0;
/// Coarse index of the reserved `floor` label.
pub const FLOOR: usize = 1;
/// Coarse index of the reserved `ceiling` label.
pub const CEILING: usize = 2;

const RESERVED: [&str; 3] = ["wall", "floor", "ceiling"];
const MISC: &str = "misc";

const DESK_DEFAULT: &str = include_str!("../data/taxonomy.json");

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("taxonomy i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("taxonomy parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("duplicate {kind} name `{name}`")]
    DuplicateName { kind: &'static str, name: String },
    #[error("coarse labels `{first}` and `{second}` share palette color {color:?}")]
    PaletteCollision {
        first: String,
        second: String,
        color: [u8; 3],
    },
    #[error("reserved label `{name}` missing (expected coarse index {index})")]
    MissingReserved { name: &'static str, index: usize },
    #[error("fine label `{0}` required by the coarse label of the same name is missing")]
    MissingReservedFine(&'static str),
    #[error("`misc` label missing from {0} names")]
    MissingMisc(&'static str),
    #[error("map has {got} entries, expected one per fine label ({expected})")]
    MapLength { got: usize, expected: usize },
    #[error("fine label `{fine}` maps to coarse index {coarse}, out of range")]
    MapOutOfRange { fine: String, coarse: usize },
    #[error("reserved fine label `{0}` must map to the coarse label of the same name")]
    ReservedMapping(String),
    #[error("palette has {got} colors, expected one per coarse label ({expected})")]
    PaletteLength { got: usize, expected: usize },
    #[error("goal list is empty")]
    NoGoals,
    #[error("goal index {0} is not a legal goal category")]
    BadGoal(usize),
    #[error("fine id {id} out of range (taxonomy has {len} fine labels)")]
    FineOutOfRange { id: usize, len: usize },
    #[error("duplicate annotation for scene `{scene_id}` instance {raw_instance_id}")]
    DuplicateAnnotation {
        scene_id: String,
        raw_instance_id: u32,
    },
    #[error("no annotations to harmonize")]
    NoAnnotations,
}

/// Label space used for semantic observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Fine,
    #[default]
    Coarse,
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Granularity::Fine => f.write_str("fine"),
            Granularity::Coarse => f.write_str("coarse"),
        }
    }
}

impl std::str::FromStr for Granularity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fine" => Ok(Granularity::Fine),
            "coarse" => Ok(Granularity::Coarse),
            other => Err(format!("unknown granularity `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TaxonomyFile {
    fine: Vec<String>,
    coarse: Vec<String>,
    map: Vec<usize>,
    palette: Vec<[u8; 3]>,
    goals: Vec<usize>,
}

/// Validated category universe. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    fine_names: Vec<String>,
    coarse_names: Vec<String>,
    fine_to_coarse: Vec<usize>,
    palette: Vec<[u8; 3]>,
    goal_categories: Vec<usize>,
    fine_reserved: [usize; 3],
    fine_misc: usize,
    coarse_misc: usize,
    fine_lookup: HashMap<String, usize>,
}

pub fn normalize_name(name: &str) -> String {
    name.trim().to_lowercase()
}

impl Taxonomy {
    /// The shipped 60 fine / 12 coarse taxonomy.
    pub fn desk_default() -> Taxonomy {
        Taxonomy::from_json(DESK_DEFAULT).expect("shipped taxonomy is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Taxonomy, TaxonomyError> {
        let text = std::fs::read_to_string(path)?;
        Taxonomy::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Taxonomy, TaxonomyError> {
        let file: TaxonomyFile = serde_json::from_str(text)?;
        Taxonomy::from_parts(file.fine, file.coarse, file.map, file.palette, file.goals)
    }

    pub fn from_parts(
        fine_names: Vec<String>,
        coarse_names: Vec<String>,
        fine_to_coarse: Vec<usize>,
        palette: Vec<[u8; 3]>,
        goal_categories: Vec<usize>,
    ) -> Result<Taxonomy, TaxonomyError> {
        let mut fine_lookup = HashMap::new();
        for (i, name) in fine_names.iter().enumerate() {
            if fine_lookup.insert(normalize_name(name), i).is_some() {
                return Err(TaxonomyError::DuplicateName {
                    kind: "fine",
                    name: name.clone(),
                });
            }
        }
        let mut coarse_lookup = HashMap::new();
        for (i, name) in coarse_names.iter().enumerate() {
            if coarse_lookup.insert(normalize_name(name), i).is_some() {
                return Err(TaxonomyError::DuplicateName {
                    kind: "coarse",
                    name: name.clone(),
                });
            }
        }
        for (index, name) in RESERVED.iter().enumerate() {
            if coarse_names.get(index).map(|n| normalize_name(n)) != Some(name.to_string()) {
                return Err(TaxonomyError::MissingReserved { name, index });
            }
        }
        let coarse_misc = *coarse_lookup
            .get(MISC)
            .ok_or(TaxonomyError::MissingMisc("coarse"))?;
        let fine_misc = *fine_lookup
            .get(MISC)
            .ok_or(TaxonomyError::MissingMisc("fine"))?;
        if fine_to_coarse.len() != fine_names.len() {
            return Err(TaxonomyError::MapLength {
                got: fine_to_coarse.len(),
                expected: fine_names.len(),
            });
        }
        for (fine, &coarse) in fine_to_coarse.iter().enumerate() {
            if coarse >= coarse_names.len() {
                return Err(TaxonomyError::MapOutOfRange {
                    fine: fine_names[fine].clone(),
                    coarse,
                });
            }
        }
        let mut fine_reserved = [0usize; 3];
        for (index, name) in RESERVED.iter().enumerate() {
            let fine = *fine_lookup
                .get(*name)
                .ok_or(TaxonomyError::MissingReservedFine(name))?;
            if fine_to_coarse[fine] != index {
                return Err(TaxonomyError::ReservedMapping(name.to_string()));
            }
            fine_reserved[index] = fine;
        }
        if fine_to_coarse[fine_misc] != coarse_misc {
            return Err(TaxonomyError::ReservedMapping(MISC.to_string()));
        }
        if palette.len() != coarse_names.len() {
            return Err(TaxonomyError::PaletteLength {
                got: palette.len(),
                expected: coarse_names.len(),
            });
        }
        for a in 0..palette.len() {
            for b in (a + 1)..palette.len() {
                if palette[a] == palette[b] {
                    return Err(TaxonomyError::PaletteCollision {
                        first: coarse_names[a].clone(),
                        second: coarse_names[b].clone(),
                        color: palette[a],
                    });
                }
            }
        }
        if goal_categories.is_empty() {
            return Err(TaxonomyError::NoGoals);
        }
        for &g in &goal_categories {
            if g >= coarse_names.len() || g <= CEILING {
                return Err(TaxonomyError::BadGoal(g));
            }
        }
        Ok(Taxonomy {
            fine_names,
            coarse_names,
            fine_to_coarse,
            palette,
            goal_categories,
            fine_reserved,
            fine_misc,
            coarse_misc,
            fine_lookup,
        })
    }

    pub fn to_json(&self) -> String {
        let file = TaxonomyFile {
            fine: self.fine_names.clone(),
            coarse: self.coarse_names.clone(),
            map: self.fine_to_coarse.clone(),
            palette: self.palette.clone(),
            goals: self.goal_categories.clone(),
        };
        serde_json::to_string(&file).expect("taxonomy serializes")
    }

    /// FNV-1a hash of the canonical JSON form.
    pub fn content_hash(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.write(self.to_json().as_bytes());
        h.finish()
    }

    pub fn fine_names(&self) -> &[String] {
        &self.fine_names
    }

    pub fn coarse_names(&self) -> &[String] {
        &self.coarse_names
    }

    pub fn palette(&self) -> &[[u8; 3]] {
        &self.palette
    }

    pub fn goal_categories(&self) -> &[usize] {
        &self.goal_categories
    }

    pub fn num_fine(&self) -> usize {
        self.fine_names.len()
    }

    pub fn num_coarse(&self) -> usize {
        self.coarse_names.len()
    }

    /// Number of label ids in the given observation label space.
    pub fn num_labels(&self, granularity: Granularity) -> usize {
        match granularity {
            Granularity::Fine => self.num_fine(),
            Granularity::Coarse => self.num_coarse(),
        }
    }

    pub fn is_goal(&self, coarse: usize) -> bool {
        self.goal_categories.contains(&coarse)
    }

    pub fn fine_to_coarse(&self, fine_id: usize) -> Result<usize, TaxonomyError> {
        self.fine_to_coarse
            .get(fine_id)
            .copied()
            .ok_or(TaxonomyError::FineOutOfRange {
                id: fine_id,
                len: self.fine_names.len(),
            })
    }

    pub fn fine_id(&self, name: &str) -> Option<usize> {
        self.fine_lookup.get(&normalize_name(name)).copied()
    }

    pub fn coarse_id(&self, name: &str) -> Option<usize> {
        let name = normalize_name(name);
        self.coarse_names
            .iter()
            .position(|n| normalize_name(n) == name)
    }

    pub fn fine_misc(&self) -> usize {
        self.fine_misc
    }

    pub fn coarse_misc(&self) -> usize {
        self.coarse_misc
    }

    /// Label id used for the wall/floor/ceiling surfaces in `granularity`.
    /// `surface` is one of [`WALL`], [`FLOOR`], [`CEILING`].
    pub fn surface_label(&self, surface: usize, granularity: Granularity) -> usize {
        match granularity {
            Granularity::Coarse => surface,
            Granularity::Fine => self.fine_reserved[surface],
        }
    }

    /// Label id of a fine category in `granularity`.
    pub fn label_of_fine(&self, fine_id: usize, granularity: Granularity) -> usize {
        match granularity {
            Granularity::Fine => fine_id,
            Granularity::Coarse => self.fine_to_coarse[fine_id],
        }
    }

    /// Coarse category of a label id in `granularity`.
    pub fn coarse_of_label(&self, label: usize, granularity: Granularity) -> usize {
        match granularity {
            Granularity::Fine => self.fine_to_coarse[label],
            Granularity::Coarse => label,
        }
    }

    /// Palette color of a label id (fine labels use their coarse color).
    pub fn label_color(&self, label: usize, granularity: Granularity) -> [u8; 3] {
        self.palette[self.coarse_of_label(label, granularity)]
    }

    /// Fine ids that are placeable objects (everything except the surfaces).
    pub fn object_fine_ids(&self) -> Vec<usize> {
        (0..self.num_fine())
            .filter(|&f| self.fine_to_coarse[f] > CEILING)
            .collect()
    }

    pub fn fine_ids_of_coarse(&self, coarse: usize) -> Vec<usize> {
        (0..self.num_fine())
            .filter(|&f| self.fine_to_coarse[f] == coarse)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawAnnotation {
    pub scene_id: String,
    pub raw_instance_id: u32,
    pub fine_name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalLabel {
    pub fine: usize,
    pub coarse: usize,
}

/// Result of harmonization: globally consistent labels per (scene, instance).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GlobalLabelMap {
    pub labels: BTreeMap<(String, u32), GlobalLabel>,
    pub warnings: Vec<String>,
}

impl GlobalLabelMap {
    pub fn get(&self, scene_id: &str, raw_instance_id: u32) -> Option<GlobalLabel> {
        self.labels
            .get(&(scene_id.to_string(), raw_instance_id))
            .copied()
    }

    /// Re-express the map as annotations named by their global fine label.
    pub fn to_annotations(&self, tax: &Taxonomy) -> Vec<RawAnnotation> {
        self.labels
            .iter()
            .map(|((scene_id, id), label)| RawAnnotation {
                scene_id: scene_id.clone(),
                raw_instance_id: *id,
                fine_name: tax.fine_names[label.fine].clone(),
            })
            .collect()
    }
}

/// Assign global fine/coarse ids to raw per-scene annotations. Names are
/// matched after lowercasing and trimming; unknown names fall back to `misc`
/// with a warning.
pub fn harmonize_labels(
    annotations: &[RawAnnotation],
    tax: &Taxonomy,
) -> Result<GlobalLabelMap, TaxonomyError> {
    if annotations.is_empty() {
        return Err(TaxonomyError::NoAnnotations);
    }
    let mut out = GlobalLabelMap::default();
    for ann in annotations {
        let key = (ann.scene_id.clone(), ann.raw_instance_id);
        if out.labels.contains_key(&key) {
            return Err(TaxonomyError::DuplicateAnnotation {
                scene_id: ann.scene_id.clone(),
                raw_instance_id: ann.raw_instance_id,
            });
        }
        let fine = match tax.fine_id(&ann.fine_name) {
            Some(f) => f,
            None => {
                out.warnings.push(format!(
                    "scene `{}` instance {}: unknown label `{}` mapped to misc",
                    ann.scene_id, ann.raw_instance_id, ann.fine_name
                ));
                tax.fine_misc
            }
        };
        let coarse = tax.fine_to_coarse[fine];
        out.labels.insert(key, GlobalLabel { fine, coarse });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_parts() -> (Vec<String>, Vec<String>, Vec<usize>, Vec<[u8; 3]>, Vec<usize>) {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        (
            s(&["wall", "floor", "ceiling", "chair", "misc"]),
            s(&["wall", "floor", "ceiling", "chair", "misc"]),
            vec![0, 1, 2, 3, 4],
            vec![[1, 1, 1], [2, 2, 2], [3, 3, 3], [4, 4, 4], [5, 5, 5]],
            vec![3],
        )
    }

    #[test]
    fn shipped_taxonomy_cardinalities() {
        let tax = Taxonomy::desk_default();
        assert_eq!(tax.num_fine(), 60);
        assert_eq!(tax.num_coarse(), 12);
        assert_eq!(tax.goal_categories().len(), 6);
        for name in ["chair", "bed", "toilet", "tv_monitor", "sofa", "plant"] {
            assert!(tax.is_goal(tax.coarse_id(name).unwrap()), "{name}");
        }
        for reserved in [WALL, FLOOR, CEILING] {
            assert!(!tax.is_goal(reserved));
        }
    }

    #[test]
    fn load_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tax.json");
        std::fs::write(&path, DESK_DEFAULT).unwrap();
        let tax = Taxonomy::load(&path).unwrap();
        assert_eq!(tax, Taxonomy::desk_default());
        assert!(matches!(
            Taxonomy::load(dir.path().join("missing.json")),
            Err(TaxonomyError::Io(_))
        ));
    }

    #[test]
    fn tables_share_a_coarse_label() {
        let tax = Taxonomy::desk_default();
        let table = tax.coarse_id("table").unwrap();
        for fine in ["kitchen table", "dining table"] {
            let id = tax.fine_id(fine).unwrap();
            assert_eq!(tax.fine_to_coarse(id).unwrap(), table);
        }
    }

    #[test]
    fn fine_to_coarse_is_total_and_bounded() {
        let tax = Taxonomy::desk_default();
        for f in 0..tax.num_fine() {
            assert!(tax.fine_to_coarse(f).unwrap() < tax.num_coarse());
        }
        assert!(matches!(
            tax.fine_to_coarse(tax.num_fine()),
            Err(TaxonomyError::FineOutOfRange { id: 60, len: 60 })
        ));
    }

    #[test]
    fn palette_collision_rejected() {
        let (fine, coarse, map, mut palette, goals) = small_parts();
        palette[3] = [10, 10, 10];
        palette[4] = [10, 10, 10];
        let err = Taxonomy::from_parts(fine, coarse, map, palette, goals).unwrap_err();
        match err {
            TaxonomyError::PaletteCollision {
                first,
                second,
                color,
            } => {
                assert_eq!((first.as_str(), second.as_str()), ("chair", "misc"));
                assert_eq!(color, [10, 10, 10]);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_wall_rejected() {
        let json = r#"{"fine":["floor","ceiling","misc"],"coarse":["floor","ceiling","misc"],
            "map":[0,1,2],"palette":[[1,1,1],[2,2,2],[3,3,3]],"goals":[2]}"#;
        assert!(matches!(
            Taxonomy::from_json(json),
            Err(TaxonomyError::MissingReserved { name: "wall", .. })
        ));
    }

    #[test]
    fn duplicate_names_rejected() {
        let (mut fine, coarse, mut map, palette, goals) = small_parts();
        fine.push(" Chair ".into());
        map.push(3);
        assert!(matches!(
            Taxonomy::from_parts(fine, coarse, map, palette, goals),
            Err(TaxonomyError::DuplicateName { kind: "fine", .. })
        ));
    }

    #[test]
    fn bad_goal_and_parse_errors() {
        let (fine, coarse, map, palette, _) = small_parts();
        assert!(matches!(
            Taxonomy::from_parts(fine, coarse, map, palette, vec![0]),
            Err(TaxonomyError::BadGoal(0))
        ));
        assert!(matches!(
            Taxonomy::from_json("{not json"),
            Err(TaxonomyError::Parse(_))
        ));
    }

    #[test]
    fn harmonize_across_scenes() {
        let tax = Taxonomy::desk_default();
        let anns = vec![
            RawAnnotation {
                scene_id: "A".into(),
                raw_instance_id: 7,
                fine_name: "chair".into(),
            },
            RawAnnotation {
                scene_id: "B".into(),
                raw_instance_id: 3,
                fine_name: "  CHAIR".into(),
            },
            RawAnnotation {
                scene_id: "B".into(),
                raw_instance_id: 4,
                fine_name: "zzz-unknown".into(),
            },
        ];
        let map = harmonize_labels(&anns, &tax).unwrap();
        let a = map.get("A", 7).unwrap();
        let b = map.get("B", 3).unwrap();
        assert_eq!(a, b);
        let unknown = map.get("B", 4).unwrap();
        assert_eq!(unknown.fine, tax.fine_misc());
        assert_eq!(unknown.coarse, tax.coarse_misc());
        assert_eq!(map.warnings.len(), 1);

        let again = harmonize_labels(&map.to_annotations(&tax), &tax).unwrap();
        assert_eq!(again.labels, map.labels);
        assert!(again.warnings.is_empty());
    }

    #[test]
    fn harmonize_rejects_duplicates_and_empty() {
        let tax = Taxonomy::desk_default();
        let ann = RawAnnotation {
            scene_id: "A".into(),
            raw_instance_id: 1,
            fine_name: "bed".into(),
        };
        assert!(matches!(
            harmonize_labels(&[ann.clone(), ann], &tax),
            Err(TaxonomyError::DuplicateAnnotation { .. })
        ));
        assert!(matches!(
            harmonize_labels(&[], &tax),
            Err(TaxonomyError::NoAnnotations)
        ));
    }
}
