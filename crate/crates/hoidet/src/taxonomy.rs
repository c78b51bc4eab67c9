//! Category space: object classes, verb classes, and the set of valid
//! (verb, object) interaction pairs.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A (verb, object) pair identifying one interaction category.
pub type HoiPair = (usize, usize);

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Taxonomy {
    pub objects: Vec<String>,
    pub verbs: Vec<String>,
    /// Valid (verb index, object index) pairs; index into this list is the
    /// interaction category id.
    pub hoi_pairs: Vec<HoiPair>,
    /// Verbs that describe an interaction without a target object (used by
    /// the scenario evaluation protocols). Empty by default.
    #[serde(default)]
    pub objectless_verbs: Vec<usize>,
}

impl Taxonomy {
    pub fn new(
        objects: Vec<String>,
        verbs: Vec<String>,
        hoi_pairs: Vec<HoiPair>,
    ) -> Result<Taxonomy> {
        let tax = Taxonomy {
            objects,
            verbs,
            hoi_pairs,
            objectless_verbs: Vec::new(),
        };
        tax.validate()?;
        Ok(tax)
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() || self.verbs.is_empty() || self.hoi_pairs.is_empty() {
            return Err(Error::Taxonomy("objects, verbs and pairs must be non-empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for &(v, o) in &self.hoi_pairs {
            if v >= self.verbs.len() || o >= self.objects.len() {
                return Err(Error::Taxonomy(format!(
                    "pair ({}, {}) indexes outside {} verbs / {} objects",
                    v,
                    o,
                    self.verbs.len(),
                    self.objects.len()
                )));
            }
            if !seen.insert((v, o)) {
                return Err(Error::Taxonomy(format!("duplicate pair ({}, {})", v, o)));
            }
        }
        for &v in &self.objectless_verbs {
            if v >= self.verbs.len() {
                return Err(Error::Taxonomy(format!("objectless verb {} out of range", v)));
            }
        }
        Ok(())
    }

    pub fn n_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn n_verbs(&self) -> usize {
        self.verbs.len()
    }

    pub fn n_categories(&self) -> usize {
        self.hoi_pairs.len()
    }

    /// Category id for a (verb, object) pair, if the pair is valid.
    pub fn category_of(&self, verb: usize, object: usize) -> Option<usize> {
        self.hoi_pairs.iter().position(|&p| p == (verb, object))
    }

    pub fn verb_is_objectless(&self, verb: usize) -> bool {
        self.objectless_verbs.contains(&verb)
    }

    /// Default desk-scale taxonomy: 12 objects, 15 verbs, 60 valid pairs
    /// (5 verbs per object, with heavily shared verbs like "hold" and
    /// "wash" so sibling structure is plentiful).
    pub fn default_desk() -> Taxonomy {
        let objects = [
            "bench", "bicycle", "bird", "bus", "cup", "dog", "horse", "kite", "pizza",
            "suitcase", "surfboard", "train",
        ];
        let verbs = [
            "sit on", "ride", "hold", "watch", "feed", "carry", "eat", "wash", "fly", "walk",
            "jump", "drive", "throw", "catch", "open",
        ];
        let pairs: &[(&str, &[&str])] = &[
            ("bench", &["sit on", "jump", "carry", "wash", "watch"]),
            ("bicycle", &["ride", "hold", "carry", "wash", "jump"]),
            ("bird", &["watch", "feed", "hold", "catch", "wash"]),
            ("bus", &["ride", "drive", "wash", "catch", "watch"]),
            ("cup", &["hold", "carry", "wash", "throw", "catch"]),
            ("dog", &["walk", "feed", "hold", "wash", "watch"]),
            ("horse", &["ride", "feed", "walk", "wash", "jump"]),
            ("kite", &["fly", "hold", "carry", "throw", "catch"]),
            ("pizza", &["eat", "hold", "carry", "throw", "watch"]),
            ("suitcase", &["open", "carry", "hold", "throw", "wash"]),
            ("surfboard", &["ride", "carry", "hold", "wash", "jump"]),
            ("train", &["ride", "drive", "wash", "watch", "catch"]),
        ];
        let objects: Vec<String> = objects.iter().map(|s| s.to_string()).collect();
        let verbs: Vec<String> = verbs.iter().map(|s| s.to_string()).collect();
        let mut hoi_pairs = Vec::new();
        for (obj, vnames) in pairs {
            let o = objects.iter().position(|x| x == obj).unwrap();
            for vn in vnames.iter() {
                let v = verbs.iter().position(|x| x == vn).unwrap();
                hoi_pairs.push((v, o));
            }
        }
        Taxonomy::new(objects, verbs, hoi_pairs).expect("default taxonomy is valid")
    }
}

/// One ground-truth interaction: a human box acting on an object box.
/// Boxes are (cx, cy, w, h), normalized to the unit square.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoiTriplet {
    pub human_box: [f64; 4],
    pub object_box: [f64; 4],
    pub object_class: usize,
    pub verb_class: usize,
}

impl HoiTriplet {
    /// Check box geometry and pair validity against a taxonomy.
    pub fn validate(&self, tax: &Taxonomy) -> Result<()> {
        for b in [self.human_box, self.object_box] {
            let (cx, cy, w, h) = (b[0], b[1], b[2], b[3]);
            if w <= 0.0 || h <= 0.0 {
                return Err(Error::Scene(format!("degenerate box {:?}", b)));
            }
            if cx - w / 2.0 < -1e-9
                || cy - h / 2.0 < -1e-9
                || cx + w / 2.0 > 1.0 + 1e-9
                || cy + h / 2.0 > 1.0 + 1e-9
            {
                return Err(Error::Scene(format!("box outside unit square {:?}", b)));
            }
        }
        if tax.category_of(self.verb_class, self.object_class).is_none() {
            return Err(Error::Scene(format!(
                "({}, {}) is not a valid interaction pair",
                self.verb_class, self.object_class
            )));
        }
        Ok(())
    }

    /// Axis-aligned bounding box of both boxes, as corners (x1, y1, x2, y2).
    pub fn union_corners(&self) -> [f64; 4] {
        union_corners(&self.human_box, &self.object_box)
    }
}

/// Corners (x1, y1, x2, y2) of a (cx, cy, w, h) box.
pub fn corners(b: &[f64; 4]) -> [f64; 4] {
    [
        b[0] - b[2] / 2.0,
        b[1] - b[3] / 2.0,
        b[0] + b[2] / 2.0,
        b[1] + b[3] / 2.0,
    ]
}

/// Axis-aligned bounding box that encapsulates both boxes.
pub fn union_corners(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    let ca = corners(a);
    let cb = corners(b);
    [
        ca[0].min(cb[0]),
        ca[1].min(cb[1]),
        ca[2].max(cb[2]),
        ca[3].max(cb[3]),
    ]
}
