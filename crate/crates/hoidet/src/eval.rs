//! Detection-quality evaluation (interpolated mAP under two settings, plus
//! verb-level scenario protocols) and the two bias diagnostics: error rates
//! split by input-sibling presence, and initial-head similarity against
//! final per-category AP.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::DetectorOutput;
use crate::scene::{has_input_sibling, SceneAnnotation};
use crate::taxonomy::{corners, Taxonomy};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Sentinel object box for interactions that take no object.
pub const EMPTY_BOX: [f64; 4] = [0.0, 0.0, 0.0, 0.0];

/// Number of evenly spaced recall points in the interpolated AP.
const AP_POINTS: usize = 101;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PredictionRecord {
    pub scene_id: u64,
    pub human_box: [f64; 4],
    pub object_box: [f64; 4],
    pub object_class: usize,
    pub verb_class: usize,
    pub score: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EvalSettings {
    pub iou_thresh: f64,
    /// Categories with fewer training occurrences than this are "rare".
    pub rare_threshold: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            iou_thresh: 0.5,
            rare_threshold: 10,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub map_full: f64,
    pub map_rare: f64,
    pub map_nonrare: f64,
    pub map_known_object: f64,
    /// Default-setting AP per category; None when the category has no GT.
    pub per_category_ap: Vec<Option<f64>>,
    pub per_category_ap_known_object: Vec<Option<f64>>,
    pub settings: EvalSettings,
    pub n_scenes: usize,
    pub n_predictions: usize,
}

/// Axis-aligned IoU of two (cx, cy, w, h) boxes.
pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let ca = corners(a);
    let cb = corners(b);
    let iw = (ca[2].min(cb[2]) - ca[0].max(cb[0])).max(0.0);
    let ih = (ca[3].min(cb[3]) - ca[1].max(cb[1])).max(0.0);
    let inter = iw * ih;
    let union = a[2].max(0.0) * a[3].max(0.0) + b[2].max(0.0) * b[3].max(0.0) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// 101-point interpolated AP from an ordered TP/FP sequence.
fn interpolated_ap(tp_flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(tp_flags.len());
    let mut rec = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (k, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        prec.push(tp as f64 / (k + 1) as f64);
        rec.push(tp as f64 / n_gt as f64);
    }
    let mut ap = 0.0;
    for i in 0..AP_POINTS {
        let r = i as f64 / (AP_POINTS - 1) as f64;
        let best = prec
            .iter()
            .zip(&rec)
            .filter(|&(_, &rk)| rk >= r)
            .map(|(&p, _)| p)
            .fold(0.0, f64::max);
        ap += best;
    }
    ap / AP_POINTS as f64
}

/// Deterministic evaluation order: descending score, then lower scene id,
/// then lower record index.
fn eval_order(cands: &mut Vec<(usize, &PredictionRecord)>) {
    cands.sort_by(|a, b| {
        b.1.score
            .partial_cmp(&a.1.score)
            .unwrap()
            .then(a.1.scene_id.cmp(&b.1.scene_id))
            .then(a.0.cmp(&b.0))
    });
}

struct CategoryEval {
    ap: Vec<Option<f64>>,
    /// Per scene, per triplet: was it covered by a true positive?
    covered: Vec<Vec<bool>>,
}

/// Greedy matching and AP per category. With `known_object`, each
/// category's evaluation is restricted to scenes containing its object
/// class.
fn eval_categories(
    preds: &[PredictionRecord],
    scenes: &[SceneAnnotation],
    tax: &Taxonomy,
    iou_thresh: f64,
    known_object: bool,
) -> Result<CategoryEval> {
    let mut scene_idx = std::collections::HashMap::new();
    for (i, s) in scenes.iter().enumerate() {
        scene_idx.insert(s.scene_id, i);
    }
    for p in preds {
        if !scene_idx.contains_key(&p.scene_id) {
            return Err(Error::Eval(format!(
                "prediction references unknown scene {}",
                p.scene_id
            )));
        }
        if !p.score.is_finite() {
            return Err(Error::Eval("non-finite prediction score".into()));
        }
    }
    let n_cat = tax.n_categories();
    let mut ap = vec![None; n_cat];
    let mut covered: Vec<Vec<bool>> = scenes.iter().map(|s| vec![false; s.triplets.len()]).collect();
    for cat in 0..n_cat {
        let (verb, object) = tax.hoi_pairs[cat];
        let scene_allowed = |si: usize| -> bool {
            !known_object || scenes[si].triplets.iter().any(|t| t.object_class == object)
        };
        let mut n_gt = 0usize;
        let mut consumed: Vec<Vec<bool>> = Vec::with_capacity(scenes.len());
        for (si, s) in scenes.iter().enumerate() {
            let mut flags = vec![true; s.triplets.len()];
            if scene_allowed(si) {
                for (ti, t) in s.triplets.iter().enumerate() {
                    if t.verb_class == verb && t.object_class == object {
                        flags[ti] = false;
                        n_gt += 1;
                    }
                }
            }
            consumed.push(flags);
        }
        if n_gt == 0 {
            continue;
        }
        let mut cands: Vec<(usize, &PredictionRecord)> = preds
            .iter()
            .enumerate()
            .filter(|(_, p)| {
                p.verb_class == verb
                    && p.object_class == object
                    && scene_allowed(scene_idx[&p.scene_id])
            })
            .collect();
        eval_order(&mut cands);
        let mut tp_flags = Vec::with_capacity(cands.len());
        for (_, p) in &cands {
            let si = scene_idx[&p.scene_id];
            let mut best: Option<(usize, f64)> = None;
            for (ti, t) in scenes[si].triplets.iter().enumerate() {
                if consumed[si][ti] {
                    continue;
                }
                let ih = iou(&p.human_box, &t.human_box);
                let io = iou(&p.object_box, &t.object_box);
                if ih > iou_thresh && io > iou_thresh {
                    let q = ih.min(io);
                    // Highest overlap wins; earlier triplet on exact ties.
                    if best.map_or(true, |(_, bq)| q > bq) {
                        best = Some((ti, q));
                    }
                }
            }
            match best {
                Some((ti, _)) => {
                    consumed[si][ti] = true;
                    covered[si][ti] = true;
                    tp_flags.push(true);
                }
                None => tp_flags.push(false),
            }
        }
        ap[cat] = Some(interpolated_ap(&tp_flags, n_gt));
    }
    Ok(CategoryEval { ap, covered })
}

fn mean_over(aps: &[Option<f64>], keep: impl Fn(usize) -> bool) -> f64 {
    let vals: Vec<f64> = aps
        .iter()
        .enumerate()
        .filter_map(|(c, a)| if keep(c) { *a } else { None })
        .collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Full evaluation: Default and Known-Object settings plus the
/// rare/non-rare partition by training frequency.
pub fn evaluate(
    preds: &[PredictionRecord],
    scenes: &[SceneAnnotation],
    tax: &Taxonomy,
    train_counts: &[usize],
    settings: &EvalSettings,
) -> Result<EvalReport> {
    if train_counts.len() != tax.n_categories() {
        return Err(Error::Eval("train_counts length mismatch".into()));
    }
    let default = eval_categories(preds, scenes, tax, settings.iou_thresh, false)?;
    let known = eval_categories(preds, scenes, tax, settings.iou_thresh, true)?;
    let rare = |c: usize| train_counts[c] < settings.rare_threshold;
    Ok(EvalReport {
        map_full: mean_over(&default.ap, |_| true),
        map_rare: mean_over(&default.ap, rare),
        map_nonrare: mean_over(&default.ap, |c| !rare(c)),
        map_known_object: mean_over(&known.ap, |_| true),
        per_category_ap: default.ap,
        per_category_ap_known_object: known.ap,
        settings: settings.clone(),
        n_scenes: scenes.len(),
        n_predictions: preds.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    S1,
    S2,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: Scenario,
    /// AP per verb; None when the verb has no GT.
    pub per_verb_ap: Vec<Option<f64>>,
    pub mean_ap: f64,
}

/// Verb-level role AP. Objectless interactions demand the empty-box
/// sentinel under S1; S2 ignores their object box entirely.
pub fn scenario_eval(
    preds: &[PredictionRecord],
    scenes: &[SceneAnnotation],
    tax: &Taxonomy,
    scenario: Scenario,
    iou_thresh: f64,
) -> Result<ScenarioReport> {
    let mut scene_idx = std::collections::HashMap::new();
    for (i, s) in scenes.iter().enumerate() {
        scene_idx.insert(s.scene_id, i);
    }
    for p in preds {
        if !scene_idx.contains_key(&p.scene_id) {
            return Err(Error::Eval(format!(
                "prediction references unknown scene {}",
                p.scene_id
            )));
        }
    }
    let n_verbs = tax.n_verbs();
    let mut per_verb_ap = vec![None; n_verbs];
    for verb in 0..n_verbs {
        let objectless = tax.verb_is_objectless(verb);
        let mut n_gt = 0usize;
        let mut consumed: Vec<Vec<bool>> = Vec::with_capacity(scenes.len());
        for s in scenes {
            let mut flags = vec![true; s.triplets.len()];
            for (ti, t) in s.triplets.iter().enumerate() {
                if t.verb_class == verb {
                    flags[ti] = false;
                    n_gt += 1;
                }
            }
            consumed.push(flags);
        }
        if n_gt == 0 {
            continue;
        }
        let mut cands: Vec<(usize, &PredictionRecord)> = preds
            .iter()
            .enumerate()
            .filter(|(_, p)| p.verb_class == verb)
            .collect();
        eval_order(&mut cands);
        let mut tp_flags = Vec::with_capacity(cands.len());
        for (_, p) in &cands {
            let si = scene_idx[&p.scene_id];
            // Under S1 an objectless prediction qualifies only with the
            // sentinel box; ranking then rests on the human box alone.
            let object_ok = |t_box: &[f64; 4]| -> Option<f64> {
                if objectless {
                    match scenario {
                        Scenario::S1 => (p.object_box == EMPTY_BOX).then_some(f64::INFINITY),
                        Scenario::S2 => Some(f64::INFINITY),
                    }
                } else {
                    let io = iou(&p.object_box, t_box);
                    (io > iou_thresh).then_some(io)
                }
            };
            let mut best: Option<(usize, f64)> = None;
            for (ti, t) in scenes[si].triplets.iter().enumerate() {
                if consumed[si][ti] {
                    continue;
                }
                let ih = iou(&p.human_box, &t.human_box);
                if ih <= iou_thresh {
                    continue;
                }
                if let Some(io) = object_ok(&t.object_box) {
                    let q = ih.min(io);
                    if best.map_or(true, |(_, bq)| q > bq) {
                        best = Some((ti, q));
                    }
                }
            }
            match best {
                Some((ti, _)) => {
                    consumed[si][ti] = true;
                    tp_flags.push(true);
                }
                None => tp_flags.push(false),
            }
        }
        per_verb_ap[verb] = Some(interpolated_ap(&tp_flags, n_gt));
    }
    let mean_ap = mean_over(&per_verb_ap, |_| true);
    Ok(ScenarioReport {
        scenario,
        per_verb_ap,
        mean_ap,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InputBiasReport {
    /// Fraction of sibling-afflicted GT instances that no true positive
    /// covered; None when the partition is empty.
    pub with_siblings: Option<f64>,
    pub without_siblings: Option<f64>,
    /// with - without; present only when both rates are.
    pub delta: Option<f64>,
    pub n_with: usize,
    pub n_without: usize,
}

/// Error rates of GT instances partitioned by input-sibling presence.
pub fn diagnose_input_bias(
    preds: &[PredictionRecord],
    scenes: &[SceneAnnotation],
    tax: &Taxonomy,
    iou_thresh: f64,
) -> Result<InputBiasReport> {
    let ev = eval_categories(preds, scenes, tax, iou_thresh, false)?;
    let mut err_with = 0usize;
    let mut n_with = 0usize;
    let mut err_without = 0usize;
    let mut n_without = 0usize;
    for (si, s) in scenes.iter().enumerate() {
        for ti in 0..s.triplets.len() {
            let missed = !ev.covered[si][ti];
            if has_input_sibling(s, ti) {
                n_with += 1;
                err_with += missed as usize;
            } else {
                n_without += 1;
                err_without += missed as usize;
            }
        }
    }
    let rate = |e: usize, n: usize| (n > 0).then(|| e as f64 / n as f64);
    let with_siblings = rate(err_with, n_with);
    let without_siblings = rate(err_without, n_without);
    let delta = match (with_siblings, without_siblings) {
        (Some(a), Some(b)) => Some(a - b),
        _ => None,
    };
    Ok(InputBiasReport {
        with_siblings,
        without_siblings,
        delta,
        n_with,
        n_without,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OutputBiasPoint {
    pub category: usize,
    /// Mean cosine similarity of this category's initial classifier row to
    /// every other category's row.
    pub similarity: f64,
    pub ap: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OutputBiasReport {
    pub points: Vec<OutputBiasPoint>,
    /// Least-squares slope of AP on similarity; None below 3 points.
    pub slope: Option<f64>,
    pub head_categories: Vec<usize>,
}

/// Both bias diagnostics plus the optional training curve they annotate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BiasReport {
    pub input: InputBiasReport,
    pub output: OutputBiasReport,
    /// Per-epoch validation mAP-Full, when recorded.
    pub map_curve: Option<Vec<f64>>,
}

/// Similarity-versus-AP table over non-head categories. `initial_rows`
/// holds the classifier rows captured before training; head categories are
/// the top `head_fraction` by training count.
pub fn diagnose_output_bias(
    initial_rows: &Tensor,
    per_category_ap: &[Option<f64>],
    train_counts: &[usize],
    head_fraction: f64,
) -> Result<OutputBiasReport> {
    let n = initial_rows.shape()[0];
    if per_category_ap.len() != n || train_counts.len() != n {
        return Err(Error::Eval("output bias input length mismatch".into()));
    }
    let n_head = ((n as f64 * head_fraction).ceil() as usize).min(n);
    let mut by_count: Vec<usize> = (0..n).collect();
    by_count.sort_by(|&a, &b| train_counts[b].cmp(&train_counts[a]).then(a.cmp(&b)));
    let head_categories: Vec<usize> = by_count[..n_head].to_vec();
    let unit = |row: &[f64]| -> Vec<f64> {
        let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter().map(|v| v / nrm).collect()
    };
    let rows: Vec<Vec<f64>> = (0..n).map(|c| unit(initial_rows.row_slice(c))).collect();
    let mut points = Vec::new();
    for c in 0..n {
        if head_categories.contains(&c) {
            continue;
        }
        let ap = match per_category_ap[c] {
            Some(a) => a,
            None => continue,
        };
        let mut sim = 0.0;
        for (o, row) in rows.iter().enumerate() {
            if o != c {
                sim += rows[c].iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        sim /= (n - 1) as f64;
        points.push(OutputBiasPoint {
            category: c,
            similarity: sim,
            ap,
        });
    }
    let slope = if points.len() >= 3 {
        let k = points.len() as f64;
        let mx = points.iter().map(|p| p.similarity).sum::<f64>() / k;
        let my = points.iter().map(|p| p.ap).sum::<f64>() / k;
        let num: f64 = points
            .iter()
            .map(|p| (p.similarity - mx) * (p.ap - my))
            .sum();
        let den: f64 = points
            .iter()
            .map(|p| (p.similarity - mx) * (p.similarity - mx))
            .sum();
        (den > 0.0).then(|| num / den)
    } else {
        None
    };
    Ok(OutputBiasReport {
        points,
        slope,
        head_categories,
    })
}

/// Turn one scene's raw outputs into scored triplet predictions: each
/// (query, category) candidate scores the interaction probability times the
/// probability of the category's object class; the top `top_k` survive.
pub fn predictions_from_output(
    scene_id: u64,
    out: &DetectorOutput,
    tax: &Taxonomy,
    top_k: usize,
) -> Vec<PredictionRecord> {
    let nq = out.hoi_logits.shape()[0];
    let n_cat = tax.n_categories();
    let mut cands = Vec::with_capacity(nq * n_cat);
    for q in 0..nq {
        let obj_row = out.object_logits.row_slice(q);
        let m = obj_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = obj_row.iter().map(|&v| (v - m).exp()).sum();
        let hoi_row = out.hoi_logits.row_slice(q);
        let hb: [f64; 4] = out.human_boxes.row_slice(q).try_into().unwrap();
        let ob: [f64; 4] = out.object_boxes.row_slice(q).try_into().unwrap();
        for cat in 0..n_cat {
            let (verb, object) = tax.hoi_pairs[cat];
            let p_obj = (obj_row[object] - m).exp() / z;
            let p_hoi = 1.0 / (1.0 + (-hoi_row[cat]).exp());
            cands.push(PredictionRecord {
                scene_id,
                human_box: hb,
                object_box: ob,
                object_class: object,
                verb_class: verb,
                score: p_hoi * p_obj,
            });
        }
    }
    cands.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.verb_class.cmp(&b.verb_class))
            .then(a.object_class.cmp(&b.object_class))
    });
    cands.truncate(top_k);
    cands
}

/// One prediction per line, JSON-encoded.
pub fn write_predictions_jsonl(path: &Path, preds: &[PredictionRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    for p in preds {
        let line =
            serde_json::to_string(p).map_err(|e| Error::json(path.display().to_string(), e))?;
        writeln!(f, "{}", line).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

pub fn read_predictions_jsonl(path: &Path) -> Result<Vec<PredictionRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::json(path.display().to_string(), e))?,
        );
    }
    Ok(out)
}

/// Similarity/AP scatter as CSV for external plotting.
pub fn write_scatter_csv(path: &Path, report: &OutputBiasReport) -> Result<()> {
    let mut text = String::from("category,similarity,ap\n");
    for p in &report.points {
        text.push_str(&format!("{},{},{}\n", p.category, p.similarity, p.ap));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}
