//! Synthetic scene generation with a controllable sibling-bias knob.
//!
//! A scene is a handful of ground-truth interaction triplets plus an H×W×C
//! feature grid standing in for encoder output. Each triplet stamps its
//! category embedding over the cells its union box covers, a person marker
//! over the human box and the object embedding over the object box, on top
//! of seeded Gaussian noise. Sibling triplets (sharing exactly one of verb
//! and object) are placed with heavily overlapping unions, so the
//! interference the bias diagnostics measure is physically present in the
//! inputs.
//!
//! Grids are never serialized: they are regenerated bit-identically from
//! (triplets, scene_id, seed).

use std::path::Path;

use rand::prelude::*;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embed::{pseudo_prompt_vector, EmbedConfig, EmbeddingTable};
use crate::rng;
use crate::taxonomy::{union_corners, HoiTriplet, Taxonomy};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Union-overlap floor for sibling placement and ceiling for non-siblings.
const SIBLING_MIN_IOU: f64 = 0.30;
const NONSIB_MAX_IOU: f64 = 0.05;
const PLACE_TRIES: usize = 40;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SceneGenConfig {
    pub n_triplets: usize,
    pub sibling_rate: f64,
    pub zipf_exponent: f64,
    pub noise_sigma: f64,
    pub grid_h: usize,
    pub grid_w: usize,
    pub seed: u64,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        SceneGenConfig {
            n_triplets: 3,
            sibling_rate: 0.6,
            zipf_exponent: 1.0,
            noise_sigma: 0.05,
            grid_h: 8,
            grid_w: 8,
            seed: 0,
        }
    }
}

impl SceneGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_triplets == 0 {
            return Err(Error::Scene("n_triplets must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.sibling_rate) {
            return Err(Error::Scene("sibling_rate must lie in [0, 1]".into()));
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err(Error::Scene("grid dims must be positive".into()));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::Scene("noise_sigma must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Counters for requests the generator could not honor exactly.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct SceneMeta {
    #[serde(default)]
    pub sibling_shortfalls: u32,
    #[serde(default)]
    pub nonsibling_shortfalls: u32,
    #[serde(default)]
    pub placement_fallbacks: u32,
}

#[derive(Clone, Debug)]
pub struct SceneAnnotation {
    pub scene_id: u64,
    pub triplets: Vec<HoiTriplet>,
    pub meta: SceneMeta,
    /// H×W×C grid; rebuilt from the triplets, never persisted.
    pub feature_grid: Tensor,
}

/// All unordered triplet index pairs sharing exactly one of
/// {object class, verb class}. Pairs equal in both are duplicates of the
/// same category, not siblings.
pub fn find_input_siblings(scene: &SceneAnnotation) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..scene.triplets.len() {
        for j in i + 1..scene.triplets.len() {
            let (a, b) = (&scene.triplets[i], &scene.triplets[j]);
            let same_o = a.object_class == b.object_class;
            let same_v = a.verb_class == b.verb_class;
            if same_o ^ same_v {
                out.push((i, j));
            }
        }
    }
    out
}

/// Does triplet `idx` have at least one sibling in the scene?
pub fn has_input_sibling(scene: &SceneAnnotation, idx: usize) -> bool {
    find_input_siblings(scene)
        .iter()
        .any(|&(i, j)| i == idx || j == idx)
}

/// Intersection-over-union of two corner-form rectangles.
pub fn rect_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let area_a = (a[2] - a[0]).max(0.0) * (a[3] - a[1]).max(0.0);
    let area_b = (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn zipf_pick(rng: &mut impl Rng, exponent: f64, candidates: &[usize]) -> usize {
    let weights: Vec<f64> = candidates
        .iter()
        .map(|&c| 1.0 / ((c + 1) as f64).powf(exponent))
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (w, &c) in weights.iter().zip(candidates) {
        u -= w;
        if u <= 0.0 {
            return c;
        }
    }
    *candidates.last().expect("candidates non-empty")
}

fn clamp_box(b: &mut [f64; 4]) {
    b[2] = b[2].clamp(0.12, 0.5);
    b[3] = b[3].clamp(0.12, 0.5);
    b[0] = b[0].clamp(b[2] / 2.0, 1.0 - b[2] / 2.0);
    b[1] = b[1].clamp(b[3] / 2.0, 1.0 - b[3] / 2.0);
}

/// Human box anywhere, object box near it, both clamped into the unit
/// square. Centered near `anchor` when given.
fn sample_boxes(rng: &mut impl Rng, anchor: Option<&[f64; 4]>) -> ([f64; 4], [f64; 4]) {
    let (acx, acy, spread) = match anchor {
        Some(a) => ((a[0] + a[2]) / 2.0, (a[1] + a[3]) / 2.0, 0.08),
        None => (rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), 0.15),
    };
    let mut h = [
        acx + rng.gen_range(-spread..spread),
        acy + rng.gen_range(-spread..spread),
        rng.gen_range(0.15..0.35),
        rng.gen_range(0.15..0.35),
    ];
    clamp_box(&mut h);
    let mut o = [
        h[0] + rng.gen_range(-0.2..0.2),
        h[1] + rng.gen_range(-0.2..0.2),
        rng.gen_range(0.12..0.3),
        rng.gen_range(0.12..0.3),
    ];
    clamp_box(&mut o);
    (h, o)
}

fn triplet_union(t: &HoiTriplet) -> [f64; 4] {
    union_corners(&t.human_box, &t.object_box)
}

/// Sample boxes for a sibling of `anchor` until their unions overlap at
/// least [`SIBLING_MIN_IOU`]; reuse the anchor geometry if sampling fails.
fn place_sibling(
    rng: &mut impl Rng,
    anchor: &HoiTriplet,
    meta: &mut SceneMeta,
) -> ([f64; 4], [f64; 4]) {
    let anchor_union = triplet_union(anchor);
    for _ in 0..PLACE_TRIES {
        let (h, o) = sample_boxes(rng, Some(&anchor_union));
        if rect_iou(&union_corners(&h, &o), &anchor_union) >= SIBLING_MIN_IOU {
            return (h, o);
        }
    }
    meta.placement_fallbacks += 1;
    (anchor.human_box, anchor.object_box)
}

/// Sample boxes whose union overlaps every existing union below
/// [`NONSIB_MAX_IOU`]; keep the least-overlapping attempt if none qualifies.
fn place_apart(
    rng: &mut impl Rng,
    existing: &[HoiTriplet],
    meta: &mut SceneMeta,
) -> ([f64; 4], [f64; 4]) {
    let unions: Vec<[f64; 4]> = existing.iter().map(triplet_union).collect();
    let mut best = None;
    let mut best_overlap = f64::INFINITY;
    for _ in 0..PLACE_TRIES {
        let (h, o) = sample_boxes(rng, None);
        let u = union_corners(&h, &o);
        let worst = unions
            .iter()
            .map(|e| rect_iou(&u, e))
            .fold(0.0_f64, f64::max);
        if worst < NONSIB_MAX_IOU {
            return (h, o);
        }
        if worst < best_overlap {
            best_overlap = worst;
            best = Some((h, o));
        }
    }
    meta.placement_fallbacks += 1;
    best.expect("at least one attempt")
}

/// Generate one scene. Category draws follow a Zipf profile over category
/// index; each triplet after the first is a sibling of an existing one with
/// probability `sibling_rate`, otherwise it shares nothing with any of them.
pub fn generate_scene(
    tax: &Taxonomy,
    table: &EmbeddingTable,
    cfg: &SceneGenConfig,
    scene_id: u64,
) -> Result<SceneAnnotation> {
    cfg.validate()?;
    tax.validate()?;
    let mut r = rng::substream_n(cfg.seed, rng::STREAM_DATA, &[scene_id, 0]);
    let mut meta = SceneMeta::default();
    let all: Vec<usize> = (0..tax.n_categories()).collect();
    let mut triplets: Vec<HoiTriplet> = Vec::with_capacity(cfg.n_triplets);

    let first_cat = zipf_pick(&mut r, cfg.zipf_exponent, &all);
    let (h, o) = sample_boxes(&mut r, None);
    triplets.push(make_triplet(tax, first_cat, h, o));

    for _ in 1..cfg.n_triplets {
        let want_sibling = r.gen::<f64>() < cfg.sibling_rate;
        let mut placed = false;
        if want_sibling {
            let anchor_idx = r.gen_range(0..triplets.len());
            let anchor = triplets[anchor_idx];
            let share_object_first = r.gen::<bool>();
            for share_object in [share_object_first, !share_object_first] {
                let cands: Vec<usize> = tax
                    .hoi_pairs
                    .iter()
                    .enumerate()
                    .filter(|(_, &(v, ob))| {
                        if share_object {
                            ob == anchor.object_class && v != anchor.verb_class
                        } else {
                            v == anchor.verb_class && ob != anchor.object_class
                        }
                    })
                    .map(|(c, _)| c)
                    .collect();
                if cands.is_empty() {
                    continue;
                }
                let cat = zipf_pick(&mut r, cfg.zipf_exponent, &cands);
                let (h, o) = place_sibling(&mut r, &anchor, &mut meta);
                triplets.push(make_triplet(tax, cat, h, o));
                placed = true;
                break;
            }
            if !placed {
                meta.sibling_shortfalls += 1;
            }
        }
        if !placed {
            // Share neither verb nor object with anything already present.
            let cands: Vec<usize> = tax
                .hoi_pairs
                .iter()
                .enumerate()
                .filter(|(_, &(v, ob))| {
                    triplets
                        .iter()
                        .all(|t| t.verb_class != v && t.object_class != ob)
                })
                .map(|(c, _)| c)
                .collect();
            let cat = if cands.is_empty() {
                meta.nonsibling_shortfalls += 1;
                zipf_pick(&mut r, cfg.zipf_exponent, &all)
            } else {
                zipf_pick(&mut r, cfg.zipf_exponent, &cands)
            };
            let (h, o) = place_apart(&mut r, &triplets, &mut meta);
            triplets.push(make_triplet(tax, cat, h, o));
        }
    }

    for t in &triplets {
        t.validate(tax)?;
    }
    let feature_grid = build_feature_grid(tax, table, cfg, scene_id, &triplets)?;
    Ok(SceneAnnotation {
        scene_id,
        triplets,
        meta,
        feature_grid,
    })
}

fn make_triplet(tax: &Taxonomy, category: usize, h: [f64; 4], o: [f64; 4]) -> HoiTriplet {
    let (verb, object) = tax.hoi_pairs[category];
    HoiTriplet {
        human_box: h,
        object_box: o,
        object_class: object,
        verb_class: verb,
    }
}

fn cell_in(corners: &[f64; 4], cx: f64, cy: f64) -> bool {
    cx >= corners[0] && cx <= corners[2] && cy >= corners[1] && cy <= corners[3]
}

/// Rebuild a scene's H×W×C grid. Depends only on
/// (triplets, scene_id, cfg, table), so loads reproduce generation exactly.
pub fn build_feature_grid(
    tax: &Taxonomy,
    table: &EmbeddingTable,
    cfg: &SceneGenConfig,
    scene_id: u64,
    triplets: &[HoiTriplet],
) -> Result<Tensor> {
    let (hgrid, wgrid, c) = (cfg.grid_h, cfg.grid_w, table.dim);
    let mut noise = rng::substream_n(cfg.seed, rng::STREAM_DATA, &[scene_id, 1]);
    let mut data = vec![0.0; hgrid * wgrid * c];
    for v in data.iter_mut() {
        *v = cfg.noise_sigma * noise.sample::<f64, _>(StandardNormal);
    }
    let person = pseudo_prompt_vector("A photo of a person.", c, cfg.seed);
    for t in triplets {
        let cat = tax
            .category_of(t.verb_class, t.object_class)
            .ok_or_else(|| Error::Scene("triplet category outside taxonomy".into()))?;
        let union = t.union_corners();
        let hbox = crate::taxonomy::corners(&t.human_box);
        let obox = crate::taxonomy::corners(&t.object_box);
        for row in 0..hgrid {
            let cy = (row as f64 + 0.5) / hgrid as f64;
            for col in 0..wgrid {
                let cx = (col as f64 + 0.5) / wgrid as f64;
                let base = (row * wgrid + col) * c;
                if cell_in(&union, cx, cy) {
                    for (d, v) in table.hoi_row(cat).iter().enumerate() {
                        data[base + d] += v;
                    }
                }
                if cell_in(&hbox, cx, cy) {
                    for (d, v) in person.iter().enumerate() {
                        data[base + d] += v;
                    }
                }
                if cell_in(&obox, cx, cy) {
                    for (d, v) in table.object_row(t.object_class).iter().enumerate() {
                        data[base + d] += v;
                    }
                }
            }
        }
    }
    Tensor::new(&[hgrid, wgrid, c], data)
}

/// A generated dataset plus everything needed to rebuild its grids.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub taxonomy: Taxonomy,
    pub gen: SceneGenConfig,
    pub embed: EmbedConfig,
    pub embed_file: Option<String>,
    pub scenes: Vec<SceneAnnotation>,
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    scene_id: u64,
    triplets: Vec<HoiTriplet>,
    #[serde(default)]
    meta: SceneMeta,
}

#[derive(Serialize, Deserialize)]
struct DatasetDoc {
    taxonomy: Taxonomy,
    gen: SceneGenConfig,
    embed: EmbedConfig,
    #[serde(default)]
    embed_file: Option<String>,
    scenes: Vec<SceneRecord>,
}

impl Dataset {
    /// Generate `n_scenes` scenes with ids `id_offset..id_offset+n_scenes`.
    pub fn generate(
        tax: &Taxonomy,
        table: &EmbeddingTable,
        gen: &SceneGenConfig,
        embed: &EmbedConfig,
        n_scenes: usize,
        id_offset: u64,
    ) -> Result<Dataset> {
        let scenes = (0..n_scenes)
            .map(|i| generate_scene(tax, table, gen, id_offset + i as u64))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            taxonomy: tax.clone(),
            gen: gen.clone(),
            embed: embed.clone(),
            embed_file: None,
            scenes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = DatasetDoc {
            taxonomy: self.taxonomy.clone(),
            gen: self.gen.clone(),
            embed: self.embed.clone(),
            embed_file: self.embed_file.clone(),
            scenes: self
                .scenes
                .iter()
                .map(|s| SceneRecord {
                    scene_id: s.scene_id,
                    triplets: s.triplets.clone(),
                    meta: s.meta,
                })
                .collect(),
        };
        let json = serde_json::to_string_pretty(&doc)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Load annotations and regenerate every feature grid.
    pub fn load(path: &Path) -> Result<Dataset> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let doc: DatasetDoc = serde_json::from_str(&text)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        doc.taxonomy.validate()?;
        let table = match &doc.embed_file {
            Some(f) => EmbeddingTable::from_file(&doc.taxonomy, Path::new(f))?,
            None => EmbeddingTable::pseudo(&doc.taxonomy, &doc.embed)?,
        };
        let scenes = doc
            .scenes
            .into_iter()
            .map(|rec| {
                for t in &rec.triplets {
                    t.validate(&doc.taxonomy)?;
                }
                let grid =
                    build_feature_grid(&doc.taxonomy, &table, &doc.gen, rec.scene_id, &rec.triplets)?;
                Ok(SceneAnnotation {
                    scene_id: rec.scene_id,
                    triplets: rec.triplets,
                    meta: rec.meta,
                    feature_grid: grid,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            taxonomy: doc.taxonomy,
            gen: doc.gen,
            embed: doc.embed,
            embed_file: doc.embed_file,
            scenes,
        })
    }

    pub fn rebuild_table(&self) -> Result<EmbeddingTable> {
        match &self.embed_file {
            Some(f) => EmbeddingTable::from_file(&self.taxonomy, Path::new(f)),
            None => EmbeddingTable::pseudo(&self.taxonomy, &self.embed),
        }
    }

    /// Per-category triplet counts across all scenes.
    pub fn category_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.taxonomy.n_categories()];
        for s in &self.scenes {
            for t in &s.triplets {
                if let Some(c) = self.taxonomy.category_of(t.verb_class, t.object_class) {
                    counts[c] += 1;
                }
            }
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Taxonomy, EmbeddingTable, SceneGenConfig) {
        let tax = Taxonomy::default_desk();
        let table = EmbeddingTable::pseudo(&tax, &EmbedConfig::default()).unwrap();
        (tax, table, SceneGenConfig::default())
    }

    #[test]
    fn single_triplet_scene_has_no_siblings() {
        let (tax, table, mut cfg) = setup();
        cfg.n_triplets = 1;
        cfg.sibling_rate = 0.0;
        let scene = generate_scene(&tax, &table, &cfg, 3).unwrap();
        assert_eq!(scene.triplets.len(), 1);
        assert!(find_input_siblings(&scene).is_empty());
    }

    #[test]
    fn forced_sibling_shares_exactly_one_component() {
        let (tax, table, mut cfg) = setup();
        cfg.n_triplets = 2;
        cfg.sibling_rate = 1.0;
        for id in 0..50 {
            let scene = generate_scene(&tax, &table, &cfg, id).unwrap();
            let (a, b) = (&scene.triplets[0], &scene.triplets[1]);
            let same_o = a.object_class == b.object_class;
            let same_v = a.verb_class == b.verb_class;
            assert!(same_o ^ same_v, "scene {}: {:?} vs {:?}", id, a, b);
            assert_eq!(find_input_siblings(&scene), vec![(0, 1)]);
        }
    }

    #[test]
    fn sibling_rate_half_lands_near_half() {
        let (tax, table, mut cfg) = setup();
        cfg.n_triplets = 2;
        cfg.sibling_rate = 0.5;
        let mut siblings = 0usize;
        let n = 10_000;
        for id in 0..n {
            let scene = generate_scene(&tax, &table, &cfg, id).unwrap();
            if !find_input_siblings(&scene).is_empty() {
                siblings += 1;
            }
        }
        let freq = siblings as f64 / n as f64;
        assert!((0.47..=0.53).contains(&freq), "frequency {}", freq);
    }

    #[test]
    fn sibling_detection_matches_pairwise_oracle() {
        let (tax, table, mut cfg) = setup();
        cfg.n_triplets = 6;
        for id in 0..20 {
            let scene = generate_scene(&tax, &table, &cfg, 100 + id).unwrap();
            let mut oracle = Vec::new();
            for i in 0..6 {
                for j in i + 1..6 {
                    let (a, b) = (&scene.triplets[i], &scene.triplets[j]);
                    let shared = (a.object_class == b.object_class) as u8
                        + (a.verb_class == b.verb_class) as u8;
                    if shared == 1 {
                        oracle.push((i, j));
                    }
                }
            }
            assert_eq!(find_input_siblings(&scene), oracle);
        }
    }

    #[test]
    fn generation_is_deterministic_including_grid() {
        let (tax, table, cfg) = setup();
        let a = generate_scene(&tax, &table, &cfg, 7).unwrap();
        let b = generate_scene(&tax, &table, &cfg, 7).unwrap();
        assert_eq!(a.triplets, b.triplets);
        assert_eq!(a.feature_grid.data(), b.feature_grid.data());
        let c = generate_scene(&tax, &table, &cfg, 8).unwrap();
        assert_ne!(a.feature_grid.data(), c.feature_grid.data());
    }

    #[test]
    fn triplets_stay_valid_across_random_configs() {
        let tax = Taxonomy::default_desk();
        let table = EmbeddingTable::pseudo(&tax, &EmbedConfig::default()).unwrap();
        let mut r = crate::rng::substream(99, "scene-prop");
        for trial in 0..1000 {
            let cfg = SceneGenConfig {
                n_triplets: r.gen_range(1..=6),
                sibling_rate: r.gen::<f64>(),
                zipf_exponent: r.gen_range(0.0..2.0),
                noise_sigma: r.gen_range(0.0..0.2),
                grid_h: 4,
                grid_w: 4,
                seed: trial,
            };
            let scene = generate_scene(&tax, &table, &cfg, trial).unwrap();
            assert_eq!(scene.triplets.len(), cfg.n_triplets);
            for t in &scene.triplets {
                t.validate(&tax).unwrap();
            }
        }
    }

    #[test]
    fn sibling_unions_overlap_nonsiblings_stay_apart() {
        let (tax, table, mut cfg) = setup();
        cfg.n_triplets = 2;
        let mut checked_sib = 0;
        let mut checked_non = 0;
        for id in 0..200 {
            let scene = generate_scene(&tax, &table, &cfg, 200 + id).unwrap();
            if scene.meta.placement_fallbacks > 0 {
                continue;
            }
            let u0 = scene.triplets[0].union_corners();
            let u1 = scene.triplets[1].union_corners();
            let iou = rect_iou(&u0, &u1);
            if find_input_siblings(&scene).is_empty() {
                assert!(iou < NONSIB_MAX_IOU, "scene {}: iou {}", id, iou);
                checked_non += 1;
            } else {
                assert!(iou >= SIBLING_MIN_IOU, "scene {}: iou {}", id, iou);
                checked_sib += 1;
            }
        }
        assert!(checked_sib > 20 && checked_non > 20);
    }

    #[test]
    fn grid_reflects_category_embedding_in_union_cells() {
        let (tax, table, mut cfg) = setup();
        cfg.n_triplets = 1;
        cfg.noise_sigma = 0.0;
        let scene = generate_scene(&tax, &table, &cfg, 11).unwrap();
        let t = &scene.triplets[0];
        let cat = tax.category_of(t.verb_class, t.object_class).unwrap();
        let union = t.union_corners();
        let c = table.dim;
        let mut inside = 0;
        for row in 0..cfg.grid_h {
            let cy = (row as f64 + 0.5) / cfg.grid_h as f64;
            for col in 0..cfg.grid_w {
                let cx = (col as f64 + 0.5) / cfg.grid_w as f64;
                let base = (row * cfg.grid_w + col) * c;
                let cell = &scene.feature_grid.data()[base..base + c];
                if cell_in(&union, cx, cy) {
                    // Cell holds cat embedding plus optional person/object
                    // terms; its projection onto the cat embedding is large.
                    let dot: f64 = cell.iter().zip(table.hoi_row(cat)).map(|(a, b)| a * b).sum();
                    assert!(dot > 0.5, "weak category signal {}", dot);
                    inside += 1;
                } else {
                    assert!(cell.iter().all(|&v| v == 0.0));
                }
            }
        }
        assert!(inside > 0);
    }

    #[test]
    fn dataset_roundtrip_regenerates_identical_grids() {
        let (tax, table, cfg) = setup();
        let embed = EmbedConfig::default();
        let ds = Dataset::generate(&tax, &table, &cfg, &embed, 5, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scenes.json");
        ds.save(&path).unwrap();
        let loaded = Dataset::load(&path).unwrap();
        assert_eq!(loaded.scenes.len(), 5);
        for (a, b) in ds.scenes.iter().zip(&loaded.scenes) {
            assert_eq!(a.scene_id, b.scene_id);
            assert_eq!(a.triplets, b.triplets);
            assert_eq!(a.feature_grid.data(), b.feature_grid.data());
        }
        // Grids must not be in the file.
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.contains("feature_grid"));
    }

    #[test]
    fn category_counts_follow_long_tail() {
        let (tax, table, cfg) = setup();
        let ds = Dataset::generate(&tax, &table, &cfg, &EmbedConfig::default(), 300, 0).unwrap();
        let counts = ds.category_counts();
        let head: usize = counts[..10].iter().sum();
        let tail: usize = counts[50..].iter().sum();
        assert!(head > 3 * tail, "head {} tail {}", head, tail);
    }
}
