//! Input-level debiasing: sibling-aware contrastive learning followed by
//! query calibration.
//!
//! Triplets that share exactly one of (object class, verb class) are the
//! confusable "negatives" of each other; identical label pairs are
//! "positives". The contrastive objective pushes each matched query's
//! triplet feature — interaction feature concatenated with learned spatial
//! features of both boxes — toward its positive text features and away from
//! sibling negatives. The calibration pass then fabricates corrupted
//! queries (a sampled negative's text semantics grafted onto the correct
//! spatial features) and trains the interaction decoder to restore them,
//! measured by mean L1 distance.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{AdditionalQueries, Bound, DetectorOutput, Model};
use crate::embed::EmbeddingTable;
use crate::matching::MatchResult;
use crate::scene::SceneAnnotation;
use crate::taxonomy::Taxonomy;
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct C2cCfg {
    pub tau: f64,
    /// Reproduce the printed sign of the calibration objective (making it
    /// non-positive) instead of the non-negative distance form.
    pub strict_paper_sign: bool,
}

impl Default for C2cCfg {
    fn default() -> Self {
        C2cCfg {
            tau: 0.07,
            strict_paper_sign: false,
        }
    }
}

/// Per-triplet positive and negative index sets over one scene's GT.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SiblingSets {
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
}

/// Positives share both labels (self included); negatives share exactly
/// one.
pub fn build_sibling_sets(scene: &SceneAnnotation) -> SiblingSets {
    let n = scene.triplets.len();
    let mut positives = vec![Vec::new(); n];
    let mut negatives = vec![Vec::new(); n];
    for i in 0..n {
        let ti = &scene.triplets[i];
        for (t, tt) in scene.triplets.iter().enumerate() {
            let same_o = tt.object_class == ti.object_class;
            let same_v = tt.verb_class == ti.verb_class;
            if same_o && same_v {
                positives[i].push(t);
            } else if same_o || same_v {
                negatives[i].push(t);
            }
        }
    }
    SiblingSets {
        positives,
        negatives,
    }
}

/// A triplet feature: semantic slot plus one spatial slot per box, and
/// their concatenation.
pub struct TripletFeature {
    pub semantic: Tensor,
    pub spatial_h: Tensor,
    pub spatial_o: Tensor,
    pub concat: Tensor,
}

pub fn triplet_feature(
    tape: &mut Tape,
    semantic: Tensor,
    spatial_h: Tensor,
    spatial_o: Tensor,
) -> Result<TripletFeature> {
    let concat = tape.concat(&[&semantic, &spatial_h, &spatial_o], 0)?;
    Ok(TripletFeature {
        semantic,
        spatial_h,
        spatial_o,
        concat,
    })
}

/// Triplet features of the matched queries, one row per matched pair in
/// order: interaction feature next to spatial features of the predicted
/// boxes.
pub fn predicted_triplet_feats(
    tape: &mut Tape,
    bound: &Bound,
    model: &Model,
    pred: &DetectorOutput,
    matched: &MatchResult,
) -> Result<Tensor> {
    let q_rows: Vec<usize> = matched.pairs.iter().map(|&(q, _)| q).collect();
    let sem = tape.gather_rows(&pred.updated_interaction_feats, &q_rows)?;
    let hb = tape.gather_rows(&pred.human_boxes, &q_rows)?;
    let ob = tape.gather_rows(&pred.object_boxes, &q_rows)?;
    let sh = model.spatial_feats(tape, bound, &hb, true)?;
    let so = model.spatial_feats(tape, bound, &ob, false)?;
    tape.concat(&[&sem, &sh, &so], 1)
}

/// Target triplet features for every GT triplet of the scene: text features
/// of the (verb, object) category next to spatial features of the GT boxes.
pub fn gt_triplet_feats(
    tape: &mut Tape,
    bound: &Bound,
    model: &Model,
    table: &EmbeddingTable,
    tax: &Taxonomy,
    scene: &SceneAnnotation,
) -> Result<Tensor> {
    let n = scene.triplets.len();
    let mut sem_data = Vec::with_capacity(n * table.dim);
    let mut hb_data = Vec::with_capacity(n * 4);
    let mut ob_data = Vec::with_capacity(n * 4);
    for t in &scene.triplets {
        let cat = tax
            .category_of(t.verb_class, t.object_class)
            .ok_or_else(|| Error::Loss("GT triplet outside taxonomy".into()))?;
        sem_data.extend_from_slice(table.hoi_row(cat));
        hb_data.extend_from_slice(&t.human_box);
        ob_data.extend_from_slice(&t.object_box);
    }
    let sem = tape.constant(&Tensor::matrix(n, table.dim, sem_data)?);
    let hb = tape.constant(&Tensor::matrix(n, 4, hb_data)?);
    let ob = tape.constant(&Tensor::matrix(n, 4, ob_data)?);
    let sh = model.spatial_feats(tape, bound, &hb, true)?;
    let so = model.spatial_feats(tape, bound, &ob, false)?;
    tape.concat(&[&sem, &sh, &so], 1)
}

/// InfoNCE over sibling sets. `query_feats` has one row per matched query,
/// `gt_feats` one row per scene triplet; `gt_of_query[r]` names the triplet
/// behind row r. Rows are L2-normalized before the dot products. A query
/// whose negatives are empty contributes an exact 0 while still counting
/// toward the mean.
pub fn contrastive_loss(
    tape: &mut Tape,
    query_feats: &Tensor,
    gt_feats: &Tensor,
    gt_of_query: &[usize],
    sets: &SiblingSets,
    tau: f64,
) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(Error::Config(format!(
            "contrastive temperature must be positive, got {}",
            tau
        )));
    }
    let n = query_feats.shape()[0];
    if gt_of_query.len() != n {
        return Err(Error::Loss("query/GT index count mismatch".into()));
    }
    if n == 0 {
        return Ok(tape.constant(&Tensor::scalar(0.0)));
    }
    let t_count = gt_feats.shape()[0];
    let qn = tape.normalize(query_feats, 1e-12)?;
    let gn = tape.normalize(gt_feats, 1e-12)?;
    let gt_t = tape.transpose(&gn)?;
    let sims_raw = tape.matmul(&qn, &gt_t)?;
    let sims = tape.scale(&sims_raw, 1.0 / tau)?;
    let mut total: Option<Tensor> = None;
    for (r, &i) in gt_of_query.iter().enumerate() {
        let pos = &sets.positives[i];
        let neg = &sets.negatives[i];
        let mut all: Vec<usize> = pos.iter().chain(neg.iter()).map(|&t| r * t_count + t).collect();
        all.sort_unstable();
        let pos_idx: Vec<usize> = pos.iter().map(|&t| r * t_count + t).collect();
        let p = tape.gather(&sims, &pos_idx)?;
        let e = tape.gather(&sims, &all)?;
        let lse_p = tape.logsumexp(&p)?;
        let lse_e = tape.logsumexp(&e)?;
        let term = tape.sub(&lse_e, &lse_p)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(&acc, &term)?,
        });
    }
    tape.scale(&total.unwrap(), 1.0 / n as f64)
}

/// Uniformly sample one negative of triplet `i`, or None when it has none.
pub fn sample_negative(sets: &SiblingSets, i: usize, rng: &mut impl Rng) -> Option<usize> {
    let neg = &sets.negatives[i];
    if neg.is_empty() {
        None
    } else {
        Some(neg[rng.gen_range(0..neg.len())])
    }
}

/// One corrupted query: the sampled negative's text semantics grafted onto
/// triplet `i`'s own GT spatial features.
pub fn build_replaced_query(
    tape: &mut Tape,
    bound: &Bound,
    model: &Model,
    table: &EmbeddingTable,
    tax: &Taxonomy,
    scene: &SceneAnnotation,
    sets: &SiblingSets,
    i: usize,
    rng: &mut impl Rng,
) -> Result<Option<TripletFeature>> {
    let neg = match sample_negative(sets, i, rng) {
        Some(t) => t,
        None => return Ok(None),
    };
    let nt = &scene.triplets[neg];
    let cat = tax
        .category_of(nt.verb_class, nt.object_class)
        .ok_or_else(|| Error::Loss("negative triplet outside taxonomy".into()))?;
    let sem = tape.constant(&Tensor::vector(table.hoi_row(cat).to_vec()));
    let ti = &scene.triplets[i];
    let hb = tape.constant(&Tensor::matrix(1, 4, ti.human_box.to_vec())?);
    let ob = tape.constant(&Tensor::matrix(1, 4, ti.object_box.to_vec())?);
    let sh_m = model.spatial_feats(tape, bound, &hb, true)?;
    let so_m = model.spatial_feats(tape, bound, &ob, false)?;
    let ds = sh_m.shape()[1];
    let sh = tape.reshape(&sh_m, &[ds])?;
    let so = tape.reshape(&so_m, &[ds])?;
    Ok(Some(triplet_feature(tape, sem, sh, so)?))
}

/// Corrupted queries for a whole scene plus their restoration targets.
pub struct CalibrationBatch {
    /// Extra decoder inputs: corrupted features and the GT box pair each
    /// one attends over.
    pub queries: AdditionalQueries,
    /// Triplet index behind each query row.
    pub gt_indices: Vec<usize>,
    /// Uncorrupted target features, one row per query row.
    pub targets: Tensor,
}

/// Build one corrupted query per GT triplet that has at least one negative.
/// Returns None when no triplet qualifies.
pub fn build_calibration_batch(
    tape: &mut Tape,
    bound: &Bound,
    model: &Model,
    table: &EmbeddingTable,
    tax: &Taxonomy,
    scene: &SceneAnnotation,
    sets: &SiblingSets,
    rng: &mut impl Rng,
) -> Result<Option<CalibrationBatch>> {
    let gt_feats = gt_triplet_feats(tape, bound, model, table, tax, scene)?;
    let mut rows: Vec<Tensor> = Vec::new();
    let mut gt_indices = Vec::new();
    let mut boxes = Vec::new();
    for i in 0..scene.triplets.len() {
        if let Some(f) = build_replaced_query(tape, bound, model, table, tax, scene, sets, i, rng)?
        {
            let w = f.concat.shape()[0];
            rows.push(tape.reshape(&f.concat, &[1, w])?);
            gt_indices.push(i);
            boxes.push((scene.triplets[i].human_box, scene.triplets[i].object_box));
        }
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let refs: Vec<&Tensor> = rows.iter().collect();
    let feats = tape.concat(&refs, 0)?;
    let targets = tape.gather_rows(&gt_feats, &gt_indices)?;
    Ok(Some(CalibrationBatch {
        queries: AdditionalQueries { feats, boxes },
        gt_indices,
        targets,
    }))
}

/// Mean L1 distance between restored and target features. The strict sign
/// flag negates the result.
pub fn calibration_loss(
    tape: &mut Tape,
    corrected: &Tensor,
    targets: &Tensor,
    cfg: &C2cCfg,
) -> Result<Tensor> {
    if corrected.shape() != targets.shape() {
        return Err(Error::ShapeMismatch {
            op: "calibration_loss",
            lhs: corrected.shape().to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    let n = corrected.shape()[0];
    if n == 0 {
        return Ok(tape.constant(&Tensor::scalar(0.0)));
    }
    let d = tape.sub(corrected, targets)?;
    let l1 = tape.l1_norm(&d)?;
    let sign = if cfg.strict_paper_sign { -1.0 } else { 1.0 };
    tape.scale(&l1, sign / n as f64)
}
