//! Set matching between predictions and ground truth, and the detector loss.
//!
//! The assignment minimizes a DETR-style cost (class probability, box L1,
//! GIoU) with an O(n³) Hungarian solver. Among cost-equal optima the
//! lexicographically smallest assignment wins, fixed by re-solving under
//! forced pairs, so matched pairs are reproducible across runs and
//! platforms. The loss terms are built on the tape: L1 and GIoU over
//! matched boxes, softmax cross-entropy with a down-weighted no-object
//! class over all object logits, and focal binary cross-entropy over the
//! verb and interaction-category heads.

use serde::{Deserialize, Serialize};

use crate::detector::DetectorOutput;
use crate::scene::SceneAnnotation;
use crate::taxonomy::{corners, Taxonomy};
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

/// Cost stand-in for forbidden cells; dwarfs any real total.
const BIG: f64 = 1e15;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchResult {
    /// (query, gt) pairs sorted by query index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_queries: Vec<usize>,
}

impl MatchResult {
    /// GT index matched to `query`, if any.
    pub fn gt_of(&self, query: usize) -> Option<usize> {
        self.pairs
            .iter()
            .find(|&&(q, _)| q == query)
            .map(|&(_, g)| g)
    }

    /// Query index matched to `gt`, if any.
    pub fn query_of(&self, gt: usize) -> Option<usize> {
        self.pairs
            .iter()
            .find(|&&(_, g)| g == gt)
            .map(|&(q, _)| q)
    }
}

/// Classic shortest-augmenting-path assignment on a square matrix,
/// 1-indexed potentials. Returns col -> row.
fn solve_square(a: &[Vec<f64>]) -> Vec<usize> {
    let n = a.len();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = a[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    p[1..].iter().map(|&r| r - 1).collect()
}

/// Real-pair total of the optimal assignment under forced pairs and
/// forbidden rows, on the zero-padded square problem.
fn constrained_total(
    cost: &[Vec<f64>],
    rows: usize,
    cols: usize,
    fixed: &[(usize, usize)],
    skipped: &[usize],
) -> f64 {
    let k = rows.max(cols);
    let mut a = vec![vec![0.0; k]; k];
    for (i, row) in a.iter_mut().enumerate().take(rows) {
        for (j, cell) in row.iter_mut().enumerate().take(cols) {
            *cell = cost[i][j];
        }
    }
    for &(q, g) in fixed {
        for j in 0..k {
            if j != g {
                a[q][j] = BIG;
            }
        }
        for (i, row) in a.iter_mut().enumerate() {
            if i != q {
                row[g] = BIG;
            }
        }
    }
    for &q in skipped {
        for j in 0..cols {
            a[q][j] = BIG;
        }
    }
    let col_to_row = solve_square(&a);
    let mut total = 0.0;
    for (j, &i) in col_to_row.iter().enumerate() {
        if i < rows && j < cols {
            total += a[i][j];
        }
    }
    total
}

/// Minimum-cost bipartite assignment of queries (rows) to ground truth
/// (columns). Exactly min(rows, cols) pairs; among cost-equal optima the
/// lexicographically smallest pair list (sorted by query) is returned.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<MatchResult> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, |r| r.len());
    for r in cost {
        if r.len() != cols {
            return Err(Error::Loss("ragged cost matrix".into()));
        }
        if let Some(bad) = r.iter().find(|v| !v.is_finite()) {
            return Err(Error::Loss(format!("non-finite matching cost {}", bad)));
        }
    }
    let want = rows.min(cols);
    if want == 0 {
        return Ok(MatchResult {
            pairs: vec![],
            unmatched_queries: (0..rows).collect(),
        });
    }
    let base = constrained_total(cost, rows, cols, &[], &[]);
    // Ties between float totals of genuinely equal assignments differ only
    // by summation rounding; anything larger is a worse assignment.
    let tol = 1e-9 * (1.0 + base.abs());
    let mut fixed: Vec<(usize, usize)> = Vec::with_capacity(want);
    let mut skipped: Vec<usize> = Vec::new();
    for q in 0..rows {
        if fixed.len() == want {
            break;
        }
        let mut hit = false;
        for g in 0..cols {
            if fixed.iter().any(|&(_, fg)| fg == g) {
                continue;
            }
            fixed.push((q, g));
            if constrained_total(cost, rows, cols, &fixed, &skipped) <= base + tol {
                hit = true;
                break;
            }
            fixed.pop();
        }
        if !hit {
            skipped.push(q);
        }
    }
    debug_assert_eq!(fixed.len(), want);
    let unmatched = (0..rows)
        .filter(|q| !fixed.iter().any(|&(fq, _)| fq == *q))
        .collect();
    Ok(MatchResult {
        pairs: fixed,
        unmatched_queries: unmatched,
    })
}

/// Generalized IoU of two (cx, cy, w, h) boxes: IoU minus the enclosing-hull
/// slack. Zero-area boxes behave as points with IoU 0.
pub fn giou(box_a: &[f64; 4], box_b: &[f64; 4]) -> f64 {
    let a = corners(box_a);
    let b = corners(box_b);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area_a = box_a[2].max(0.0) * box_a[3].max(0.0);
    let area_b = box_b[2].max(0.0) * box_b[3].max(0.0);
    let union = area_a + area_b - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    if hull > 0.0 {
        iou - (hull - union) / hull
    } else {
        iou
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MatchWeights {
    pub lambda_cls: f64,
    pub lambda_box: f64,
    pub lambda_iou: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        MatchWeights {
            lambda_cls: 1.0,
            lambda_box: 2.5,
            lambda_iou: 1.0,
        }
    }
}

/// Matching cost matrix: rows are queries, columns GT triplets. Class terms
/// reward probability mass on the GT object and interaction category; box
/// terms charge L1 distance and GIoU slack for both boxes.
pub fn match_cost(
    pred: &DetectorOutput,
    scene: &SceneAnnotation,
    tax: &Taxonomy,
    w: &MatchWeights,
) -> Result<Vec<Vec<f64>>> {
    let nq = pred.human_boxes.shape()[0];
    let n_obj_cols = pred.object_logits.shape()[1];
    let mut cost = vec![vec![0.0; scene.triplets.len()]; nq];
    for i in 0..nq {
        let obj_row = pred.object_logits.row_slice(i);
        let m = obj_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = obj_row.iter().map(|&v| (v - m).exp()).sum();
        let ph: [f64; 4] = pred.human_boxes.row_slice(i).try_into().unwrap();
        let po: [f64; 4] = pred.object_boxes.row_slice(i).try_into().unwrap();
        for (j, t) in scene.triplets.iter().enumerate() {
            let cat = tax
                .category_of(t.verb_class, t.object_class)
                .ok_or_else(|| Error::Loss("GT triplet outside taxonomy".into()))?;
            debug_assert!(t.object_class < n_obj_cols);
            let p_obj = (obj_row[t.object_class] - m).exp() / z;
            let hoi_logit = pred.hoi_logits.row_slice(i)[cat];
            let p_hoi = 1.0 / (1.0 + (-hoi_logit).exp());
            let l1: f64 = ph
                .iter()
                .zip(&t.human_box)
                .chain(po.iter().zip(&t.object_box))
                .map(|(a, b)| (a - b).abs())
                .sum();
            let g = (1.0 - giou(&ph, &t.human_box)) + (1.0 - giou(&po, &t.object_box));
            cost[i][j] = -w.lambda_cls * (p_obj + p_hoi) + w.lambda_box * l1 + w.lambda_iou * g;
        }
    }
    Ok(cost)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DetectorLossCfg {
    pub lambda_box: f64,
    pub lambda_iou: f64,
    pub lambda_cls: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Cross-entropy weight of the no-object class for unmatched queries.
    pub background_weight: f64,
    /// Train verb/HOI heads with softmax cross-entropy instead of focal
    /// binary cross-entropy.
    pub softmax_action: bool,
}

impl Default for DetectorLossCfg {
    fn default() -> Self {
        DetectorLossCfg {
            lambda_box: 2.5,
            lambda_iou: 1.0,
            lambda_cls: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            background_weight: 0.1,
            softmax_action: false,
        }
    }
}

/// Per-scene loss values and totals, extended by the other objectives.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct LossReport {
    pub l_box: f64,
    pub l_iou: f64,
    pub l_cls_object: f64,
    pub l_cls_action: f64,
    pub l_detector: f64,
    pub l_con: f64,
    pub l_cal: f64,
    pub l_merge: f64,
    pub l_split: f64,
    pub l_all: f64,
}

impl LossReport {
    pub fn add(&mut self, other: &LossReport) {
        self.l_box += other.l_box;
        self.l_iou += other.l_iou;
        self.l_cls_object += other.l_cls_object;
        self.l_cls_action += other.l_cls_action;
        self.l_detector += other.l_detector;
        self.l_con += other.l_con;
        self.l_cal += other.l_cal;
        self.l_merge += other.l_merge;
        self.l_split += other.l_split;
        self.l_all += other.l_all;
    }

    pub fn scale(&mut self, s: f64) {
        self.l_box *= s;
        self.l_iou *= s;
        self.l_cls_object *= s;
        self.l_cls_action *= s;
        self.l_detector *= s;
        self.l_con *= s;
        self.l_cal *= s;
        self.l_merge *= s;
        self.l_split *= s;
        self.l_all *= s;
    }

    pub fn is_finite(&self) -> bool {
        [
            self.l_box,
            self.l_iou,
            self.l_cls_object,
            self.l_cls_action,
            self.l_detector,
            self.l_con,
            self.l_cal,
            self.l_merge,
            self.l_split,
            self.l_all,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Tape-tracked detector loss terms.
pub struct DetectorLoss {
    pub l_box: Tensor,
    pub l_iou: Tensor,
    pub l_cls_object: Tensor,
    pub l_cls_action: Tensor,
    pub l_detector: Tensor,
}

/// Column `c` of the matched box rows as a vector.
fn box_col(tape: &mut Tape, boxes: &Tensor, rows: &[usize], c: usize) -> Result<Tensor> {
    let cols = boxes.shape()[1];
    let idx: Vec<usize> = rows.iter().map(|&r| r * cols + c).collect();
    tape.gather(boxes, &idx)
}

/// Differentiable per-row GIoU between predicted box rows and fixed GT
/// boxes: returns a length-m vector on the tape.
fn giou_on_tape(
    tape: &mut Tape,
    pred_boxes: &Tensor,
    rows: &[usize],
    gt: &[[f64; 4]],
) -> Result<Tensor> {
    let m = rows.len();
    let half = |tape: &mut Tape, t: &Tensor| tape.scale(t, 0.5);
    let pxc = box_col(tape, pred_boxes, rows, 0)?;
    let pyc = box_col(tape, pred_boxes, rows, 1)?;
    let pw = box_col(tape, pred_boxes, rows, 2)?;
    let ph = box_col(tape, pred_boxes, rows, 3)?;
    let pw2 = half(tape, &pw)?;
    let ph2 = half(tape, &ph)?;
    let px1 = tape.sub(&pxc, &pw2)?;
    let px2 = tape.add(&pxc, &pw2)?;
    let py1 = tape.sub(&pyc, &ph2)?;
    let py2 = tape.add(&pyc, &ph2)?;
    let col = |k: usize| -> Tensor {
        Tensor::vector(gt.iter().map(|b| corners(b)[k]).collect::<Vec<_>>())
    };
    let gx1 = tape.constant(&col(0));
    let gy1 = tape.constant(&col(1));
    let gx2 = tape.constant(&col(2));
    let gy2 = tape.constant(&col(3));
    let g_area = tape.constant(&Tensor::vector(
        gt.iter().map(|b| b[2] * b[3]).collect::<Vec<_>>(),
    ));

    let ix1 = tape.maximum(&px1, &gx1)?;
    let ix2 = tape.minimum(&px2, &gx2)?;
    let iy1 = tape.maximum(&py1, &gy1)?;
    let iy2 = tape.minimum(&py2, &gy2)?;
    let iw_raw = tape.sub(&ix2, &ix1)?;
    let iw = tape.relu(&iw_raw)?;
    let ih_raw = tape.sub(&iy2, &iy1)?;
    let ih = tape.relu(&ih_raw)?;
    let inter = tape.mul(&iw, &ih)?;

    let p_area = tape.mul(&pw, &ph)?;
    let areas = tape.add(&p_area, &g_area)?;
    let union_raw = tape.sub(&areas, &inter)?;
    let union = tape.add_const(&union_raw, 1e-12)?;
    let iou = tape.div(&inter, &union)?;

    let hx1 = tape.minimum(&px1, &gx1)?;
    let hx2 = tape.maximum(&px2, &gx2)?;
    let hy1 = tape.minimum(&py1, &gy1)?;
    let hy2 = tape.maximum(&py2, &gy2)?;
    let hw = tape.sub(&hx2, &hx1)?;
    let hh = tape.sub(&hy2, &hy1)?;
    let hull_raw = tape.mul(&hw, &hh)?;
    let hull = tape.add_const(&hull_raw, 1e-12)?;
    let slack_num = tape.sub(&hull, &union)?;
    let slack = tape.div(&slack_num, &hull)?;
    let out = tape.sub(&iou, &slack)?;
    debug_assert_eq!(out.shape(), [m]);
    Ok(out)
}

/// Build the full detector loss for one scene on the tape.
pub fn detector_loss(
    tape: &mut Tape,
    pred: &DetectorOutput,
    scene: &SceneAnnotation,
    tax: &Taxonomy,
    matched: &MatchResult,
    cfg: &DetectorLossCfg,
) -> Result<DetectorLoss> {
    let nq = pred.human_boxes.shape()[0];
    let m = matched.pairs.len();
    let (q_rows, g_rows): (Vec<usize>, Vec<usize>) = matched.pairs.iter().cloned().unzip();

    let (l_box, l_iou) = if m == 0 {
        (
            tape.constant(&Tensor::scalar(0.0)),
            tape.constant(&Tensor::scalar(0.0)),
        )
    } else {
        let gt_h: Vec<[f64; 4]> = g_rows.iter().map(|&g| scene.triplets[g].human_box).collect();
        let gt_o: Vec<[f64; 4]> = g_rows
            .iter()
            .map(|&g| scene.triplets[g].object_box)
            .collect();
        let ph = tape.gather_rows(&pred.human_boxes, &q_rows)?;
        let po = tape.gather_rows(&pred.object_boxes, &q_rows)?;
        let gh = tape.constant(&Tensor::matrix(m, 4, gt_h.iter().flatten().cloned().collect())?);
        let go = tape.constant(&Tensor::matrix(m, 4, gt_o.iter().flatten().cloned().collect())?);
        let dh = tape.sub(&ph, &gh)?;
        let doo = tape.sub(&po, &go)?;
        let l1h = tape.l1_norm(&dh)?;
        let l1o = tape.l1_norm(&doo)?;
        let l1 = tape.add(&l1h, &l1o)?;
        let l_box = tape.scale(&l1, 1.0 / (2 * m) as f64)?;

        let gih = giou_on_tape(tape, &pred.human_boxes, &q_rows, &gt_h)?;
        let gio = giou_on_tape(tape, &pred.object_boxes, &q_rows, &gt_o)?;
        let ones = tape.constant(&Tensor::full(&[m], 1.0));
        let sh = tape.sub(&ones, &gih)?;
        let so = tape.sub(&ones, &gio)?;
        let sum_h = tape.sum(&sh)?;
        let sum_o = tape.sum(&so)?;
        let tot = tape.add(&sum_h, &sum_o)?;
        let l_iou = tape.scale(&tot, 1.0 / (2 * m) as f64)?;
        (l_box, l_iou)
    };

    // Object classification over every query; unmatched rows target the
    // no-object class at reduced weight.
    let n_obj = tax.n_objects();
    let mut target = vec![n_obj; nq];
    let mut weight = vec![cfg.background_weight; nq];
    for &(q, g) in &matched.pairs {
        target[q] = scene.triplets[g].object_class;
        weight[q] = 1.0;
    }
    let ls = tape.log_softmax(&pred.object_logits)?;
    let idx: Vec<usize> = (0..nq).map(|q| q * (n_obj + 1) + target[q]).collect();
    let picked = tape.gather(&ls, &idx)?;
    let wsum: f64 = weight.iter().sum();
    let w = tape.constant(&Tensor::vector(weight));
    let weighted = tape.mul(&picked, &w)?;
    let total = tape.sum(&weighted)?;
    let l_cls_object = tape.scale(&total, -1.0 / wsum)?;

    // Verb and interaction-category heads: focal BCE against multi-hot
    // targets (or matched-row softmax CE behind the config switch).
    let l_cls_action = if cfg.softmax_action {
        if m == 0 {
            tape.constant(&Tensor::scalar(0.0))
        } else {
            let hoi_labels: Vec<usize> = g_rows
                .iter()
                .map(|&g| {
                    tax.category_of(scene.triplets[g].verb_class, scene.triplets[g].object_class)
                        .expect("validated triplet")
                })
                .collect();
            let verb_labels: Vec<usize> =
                g_rows.iter().map(|&g| scene.triplets[g].verb_class).collect();
            let mut terms = Vec::new();
            for (logits, label) in [(&pred.hoi_logits, hoi_labels), (&pred.verb_logits, verb_labels)]
            {
                let cols = logits.shape()[1];
                let rows = tape.gather_rows(logits, &q_rows)?;
                let ls = tape.log_softmax(&rows)?;
                let idx: Vec<usize> = label.iter().enumerate().map(|(r, &c)| r * cols + c).collect();
                let picked = tape.gather(&ls, &idx)?;
                let s = tape.sum(&picked)?;
                terms.push(tape.scale(&s, -1.0 / m as f64)?);
            }
            tape.add(&terms[0], &terms[1])?
        }
    } else {
        let mut hoi_t = vec![0.0; nq * tax.n_categories()];
        let mut verb_t = vec![0.0; nq * tax.n_verbs()];
        for &(q, g) in &matched.pairs {
            let t = &scene.triplets[g];
            let cat = tax
                .category_of(t.verb_class, t.object_class)
                .expect("validated triplet");
            hoi_t[q * tax.n_categories() + cat] = 1.0;
            verb_t[q * tax.n_verbs() + t.verb_class] = 1.0;
        }
        let norm = (m as f64).max(1.0);
        let f_hoi = tape.focal_bce(&pred.hoi_logits, &hoi_t, cfg.focal_alpha, cfg.focal_gamma, norm)?;
        let f_verb =
            tape.focal_bce(&pred.verb_logits, &verb_t, cfg.focal_alpha, cfg.focal_gamma, norm)?;
        tape.add(&f_hoi, &f_verb)?
    };

    let b = tape.scale(&l_box, cfg.lambda_box)?;
    let u = tape.scale(&l_iou, cfg.lambda_iou)?;
    let cls = tape.add(&l_cls_object, &l_cls_action)?;
    let c = tape.scale(&cls, cfg.lambda_cls)?;
    let bu = tape.add(&b, &u)?;
    let l_detector = tape.add(&bu, &c)?;
    Ok(DetectorLoss {
        l_box,
        l_iou,
        l_cls_object,
        l_cls_action,
        l_detector,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::gradcheck;
    use rand::Rng;

    /// Exhaustive minimum over injective assignments, smallest pair list
    /// among ties. The recursion tries queries in order, each taking any
    /// free gt or staying unmatched, so it enumerates every assignment.
    fn brute_force(cost: &[Vec<f64>]) -> MatchResult {
        let rows = cost.len();
        let cols = cost[0].len();
        let want = rows.min(cols);
        let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
        let mut stack: Vec<(usize, usize)> = Vec::new();
        fn rec(
            q: usize,
            rows: usize,
            cols: usize,
            want: usize,
            cost: &[Vec<f64>],
            stack: &mut Vec<(usize, usize)>,
            best: &mut Option<(f64, Vec<(usize, usize)>)>,
        ) {
            if stack.len() == want {
                let total: f64 = stack.iter().map(|&(i, j)| cost[i][j]).sum();
                let better = match best {
                    None => true,
                    Some((bt, bp)) => {
                        total < *bt - 1e-12 || (total <= *bt + 1e-12 && stack.as_slice() < bp.as_slice())
                    }
                };
                if better {
                    *best = Some((total, stack.clone()));
                }
                return;
            }
            if q == rows || rows - q < want - stack.len() {
                return;
            }
            for g in 0..cols {
                if stack.iter().any(|&(_, sg)| sg == g) {
                    continue;
                }
                stack.push((q, g));
                rec(q + 1, rows, cols, want, cost, stack, best);
                stack.pop();
            }
            rec(q + 1, rows, cols, want, cost, stack, best);
        }
        rec(0, rows, cols, want, cost, &mut stack, &mut best);
        let pairs = best.unwrap().1;
        let unmatched = (0..rows)
            .filter(|q| !pairs.iter().any(|&(fq, _)| fq == *q))
            .collect();
        MatchResult {
            pairs,
            unmatched_queries: unmatched,
        }
    }

    #[test]
    fn diagonal_optima() {
        let m = hungarian(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        let m = hungarian(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn ties_pick_the_smallest_pair_list() {
        let m = hungarian(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        // One query, two gts: gt 1 loses.
        let m = hungarian(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(m.pairs, vec![(0, 0)]);
        // Two queries, one gt: query 0 wins, query 1 unmatched.
        let m = hungarian(&[vec![0.0], vec![0.0]]).unwrap();
        assert_eq!(m.pairs, vec![(0, 0)]);
        assert_eq!(m.unmatched_queries, vec![1]);
    }

    #[test]
    fn nan_cost_is_rejected() {
        assert!(hungarian(&[vec![f64::NAN]]).is_err());
        assert!(hungarian(&[vec![f64::INFINITY]]).is_err());
    }

    #[test]
    fn matches_brute_force_on_random_matrices() {
        let mut r = rng::substream(77, "hungarian-test");
        for trial in 0..60 {
            let rows = r.gen_range(1..=6);
            let cols = r.gen_range(1..=6);
            let cost: Vec<Vec<f64>> = (0..rows)
                .map(|_| (0..cols).map(|_| r.gen_range(-3.0..3.0)).collect())
                .collect();
            let fast = hungarian(&cost).unwrap();
            let slow = brute_force(&cost);
            assert_eq!(fast, slow, "trial {} cost {:?}", trial, cost);
        }
    }

    #[test]
    fn matches_brute_force_on_tied_integer_matrices() {
        let mut r = rng::substream(78, "hungarian-tie-test");
        for trial in 0..60 {
            let rows = r.gen_range(1..=5);
            let cols = r.gen_range(1..=5);
            let cost: Vec<Vec<f64>> = (0..rows)
                .map(|_| (0..cols).map(|_| r.gen_range(0..3) as f64).collect())
                .collect();
            let fast = hungarian(&cost).unwrap();
            let slow = brute_force(&cost);
            assert_eq!(fast, slow, "trial {} cost {:?}", trial, cost);
        }
    }

    #[test]
    fn giou_hand_cases() {
        let a = [0.5, 0.5, 0.2, 0.4];
        assert!((giou(&a, &a) - 1.0).abs() <= 1e-12);
        // Corner boxes (0,0,2,2) and (1,1,3,3): IoU 1/7, hull 9, union 7.
        let b1 = [1.0, 1.0, 2.0, 2.0];
        let b2 = [2.0, 2.0, 2.0, 2.0];
        let expect = 1.0 / 7.0 - 2.0 / 9.0;
        assert!((giou(&b1, &b2) - expect).abs() <= 1e-12);
        // Far separation pushes toward -1.
        let far = giou(&[0.05, 0.05, 0.1, 0.1], &[0.95, 0.95, 0.1, 0.1]);
        assert!(far < -0.8 && far > -1.0);
        // Zero-area box: a point. Inside the other box the hull equals the
        // union, so IoU 0 and slack 0 leave GIoU at 0.
        let p = giou(&[0.5, 0.5, 0.0, 0.0], &[0.5, 0.5, 0.2, 0.2]);
        assert!(p.abs() <= 1e-12);
        // Outside, hull slack pulls it negative.
        let q = giou(&[0.9, 0.9, 0.0, 0.0], &[0.2, 0.2, 0.2, 0.2]);
        assert!(q < 0.0);
    }

    #[test]
    fn giou_on_tape_agrees_with_scalar_form() {
        let mut r = rng::substream(79, "giou-test");
        let mut mk = || {
            let w: f64 = r.gen_range(0.05..0.5);
            let h: f64 = r.gen_range(0.05..0.5);
            [
                r.gen_range(w / 2.0..1.0 - w / 2.0),
                r.gen_range(h / 2.0..1.0 - h / 2.0),
                w,
                h,
            ]
        };
        let preds: Vec<[f64; 4]> = (0..6).map(|_| mk()).collect();
        let gts: Vec<[f64; 4]> = (0..6).map(|_| mk()).collect();
        let mut tape = Tape::new();
        let p = tape.constant(&Tensor::matrix(6, 4, preds.iter().flatten().cloned().collect()).unwrap());
        let rows: Vec<usize> = (0..6).collect();
        let g = giou_on_tape(&mut tape, &p, &rows, &gts).unwrap();
        for i in 0..6 {
            assert!((g.data()[i] - giou(&preds[i], &gts[i])).abs() <= 1e-9);
        }
    }

    #[test]
    fn giou_loss_gradient_matches_finite_differences() {
        let gts = vec![[0.4, 0.4, 0.3, 0.3], [0.6, 0.5, 0.2, 0.4]];
        let raw = Tensor::matrix(2, 4, vec![0.1, -0.2, 0.3, 0.4, -0.1, 0.2, -0.3, 0.1]).unwrap();
        let err = gradcheck::check(&[raw], 1e-5, 1e-3, |tape, leaves| {
            let boxes = tape.sigmoid(&leaves[0])?;
            let g = giou_on_tape(tape, &boxes, &[0, 1], &gts)?;
            let s = tape.sum(&g)?;
            tape.scale(&s, -1.0)
        })
        .unwrap();
        assert!(err <= 1e-4, "rel err {}", err);
    }

    fn tiny_output(tape: &mut Tape, tax: &Taxonomy, raw: &Tensor) -> DetectorOutput {
        // Two queries; raw packs [boxes_h(8) boxes_o(8) obj(2*(n2+1))
        // hoi(2*n_cat) verb(2*n1)] as one flat leaf so gradients reach all.
        let n2 = tax.n_objects();
        let nc = tax.n_categories();
        let n1 = tax.n_verbs();
        let mut off = 0;
        let mut slice = |tape: &mut Tape, n: usize, shape: &[usize]| {
            let idx: Vec<usize> = (off..off + n).collect();
            off += n;
            let flat = tape.gather(raw, &idx).unwrap();
            tape.reshape(&flat, shape).unwrap()
        };
        let hb_raw = slice(tape, 8, &[2, 4]);
        let ob_raw = slice(tape, 8, &[2, 4]);
        let human_boxes = tape.sigmoid(&hb_raw).unwrap();
        let object_boxes = tape.sigmoid(&ob_raw).unwrap();
        let object_logits = slice(tape, 2 * (n2 + 1), &[2, n2 + 1]);
        let hoi_logits = slice(tape, 2 * nc, &[2, nc]);
        let verb_logits = slice(tape, 2 * n1, &[2, n1]);
        let dummy = tape.constant(&Tensor::zeros(&[2, 4]));
        DetectorOutput {
            human_boxes,
            object_boxes,
            object_logits,
            hoi_logits,
            verb_logits,
            superclass_logits: dummy.clone(),
            interaction_queries: dummy.clone(),
            updated_interaction_feats: dummy,
            corrected_additional_feats: None,
        }
    }

    fn tiny_scene(tax: &Taxonomy) -> SceneAnnotation {
        let table =
            crate::embed::EmbeddingTable::pseudo(tax, &crate::embed::EmbedConfig::default())
                .unwrap();
        let gen = crate::scene::SceneGenConfig {
            n_triplets: 2,
            grid_h: 4,
            grid_w: 4,
            ..crate::scene::SceneGenConfig::default()
        };
        crate::scene::generate_scene(tax, &table, &gen, 42).unwrap()
    }

    fn raw_len(tax: &Taxonomy) -> usize {
        16 + 2 * (tax.n_objects() + 1) + 2 * tax.n_categories() + 2 * tax.n_verbs()
    }

    #[test]
    fn empty_scene_zeroes_box_terms() {
        let tax = Taxonomy::default_desk();
        let mut scene = tiny_scene(&tax);
        scene.triplets.clear();
        let mut tape = Tape::new();
        let raw = tape.constant(&Tensor::vector(vec![0.1; raw_len(&tax)]));
        let out = tiny_output(&mut tape, &tax, &raw);
        let matched = MatchResult {
            pairs: vec![],
            unmatched_queries: vec![0, 1],
        };
        let loss =
            detector_loss(&mut tape, &out, &scene, &tax, &matched, &DetectorLossCfg::default())
                .unwrap();
        assert_eq!(loss.l_box.item(), 0.0);
        assert_eq!(loss.l_iou.item(), 0.0);
        assert!(loss.l_cls_object.item() > 0.0);
    }

    #[test]
    fn perfect_prediction_drives_terms_to_zero() {
        let tax = Taxonomy::default_desk();
        let scene = tiny_scene(&tax);
        let n2 = tax.n_objects();
        let nc = tax.n_categories();
        let n1 = tax.n_verbs();
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let mut raw = Vec::with_capacity(raw_len(&tax));
        for t in &scene.triplets {
            for v in t.human_box {
                raw.push(logit(v.clamp(1e-9, 1.0 - 1e-9)));
            }
        }
        for t in &scene.triplets {
            for v in t.object_box {
                raw.push(logit(v.clamp(1e-9, 1.0 - 1e-9)));
            }
        }
        for t in &scene.triplets {
            for k in 0..=n2 {
                raw.push(if k == t.object_class { 40.0 } else { -40.0 });
            }
        }
        for t in &scene.triplets {
            let cat = tax.category_of(t.verb_class, t.object_class).unwrap();
            for k in 0..nc {
                raw.push(if k == cat { 40.0 } else { -40.0 });
            }
        }
        for t in &scene.triplets {
            for k in 0..n1 {
                raw.push(if k == t.verb_class { 40.0 } else { -40.0 });
            }
        }
        let mut tape = Tape::new();
        let raw = tape.constant(&Tensor::vector(raw));
        let out = tiny_output(&mut tape, &tax, &raw);
        let cost = match_cost(&out, &scene, &tax, &MatchWeights::default()).unwrap();
        let matched = hungarian(&cost).unwrap();
        assert_eq!(matched.pairs, vec![(0, 0), (1, 1)]);
        let loss =
            detector_loss(&mut tape, &out, &scene, &tax, &matched, &DetectorLossCfg::default())
                .unwrap();
        assert!(loss.l_box.item() <= 1e-8, "l_box {}", loss.l_box.item());
        assert!(loss.l_iou.item() <= 1e-7, "l_iou {}", loss.l_iou.item());
        assert!(loss.l_cls_object.item() <= 1e-9);
        assert!(loss.l_cls_action.item() <= 1e-9);
    }

    #[test]
    fn perfect_prediction_has_lowest_row_cost() {
        let tax = Taxonomy::default_desk();
        let scene = tiny_scene(&tax);
        // Query 0 reproduces GT 0 exactly; query 1 is noise.
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let t0 = &scene.triplets[0];
        let mut raw = vec![0.0; raw_len(&tax)];
        for (k, v) in t0.human_box.iter().enumerate() {
            raw[k] = logit(v.clamp(1e-9, 1.0 - 1e-9));
        }
        for (k, v) in t0.object_box.iter().enumerate() {
            raw[8 + k] = logit(v.clamp(1e-9, 1.0 - 1e-9));
        }
        let n2 = tax.n_objects();
        raw[16 + t0.object_class] = 40.0;
        let cat = tax.category_of(t0.verb_class, t0.object_class).unwrap();
        raw[16 + 2 * (n2 + 1) + cat] = 40.0;
        let mut tape = Tape::new();
        let raw = tape.constant(&Tensor::vector(raw));
        let out = tiny_output(&mut tape, &tax, &raw);
        let cost = match_cost(&out, &scene, &tax, &MatchWeights::default()).unwrap();
        assert!(cost[0][0] < cost[0][1]);
        assert!(cost[0][0] < cost[1][0]);
    }

    #[test]
    fn match_cost_recomputation_oracle() {
        let tax = Taxonomy::default_desk();
        let scene = tiny_scene(&tax);
        let mut r = rng::substream(80, "cost-test");
        let raw_data: Vec<f64> = (0..raw_len(&tax)).map(|_| r.gen_range(-2.0..2.0)).collect();
        let mut tape = Tape::new();
        let raw = tape.constant(&Tensor::vector(raw_data));
        let out = tiny_output(&mut tape, &tax, &raw);
        let w = MatchWeights::default();
        let cost = match_cost(&out, &scene, &tax, &w).unwrap();
        // Independent recomputation straight from the output tensors.
        for i in 0..2 {
            let obj = out.object_logits.row_slice(i);
            let mx = obj.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = obj.iter().map(|v| (v - mx).exp()).sum();
            for (j, t) in scene.triplets.iter().enumerate() {
                let cat = tax.category_of(t.verb_class, t.object_class).unwrap();
                let p_obj = (obj[t.object_class] - mx).exp() / z;
                let p_hoi = 1.0 / (1.0 + (-out.hoi_logits.row_slice(i)[cat]).exp());
                let ph: [f64; 4] = out.human_boxes.row_slice(i).try_into().unwrap();
                let po: [f64; 4] = out.object_boxes.row_slice(i).try_into().unwrap();
                let l1: f64 = ph
                    .iter()
                    .zip(&t.human_box)
                    .chain(po.iter().zip(&t.object_box))
                    .map(|(a, b)| (a - b).abs())
                    .sum();
                let g = (1.0 - giou(&ph, &t.human_box)) + (1.0 - giou(&po, &t.object_box));
                let manual = -w.lambda_cls * (p_obj + p_hoi) + w.lambda_box * l1 + w.lambda_iou * g;
                assert!((cost[i][j] - manual).abs() <= 1e-12);
            }
        }
        // Matching on the recomputed matrix agrees with matching on the
        // original.
        assert_eq!(
            hungarian(&cost).unwrap(),
            hungarian(&match_cost(&out, &scene, &tax, &w).unwrap()).unwrap()
        );
    }

    #[test]
    fn detector_total_is_the_weighted_sum() {
        let tax = Taxonomy::default_desk();
        let scene = tiny_scene(&tax);
        let mut r = rng::substream(81, "sum-test");
        let raw_data: Vec<f64> = (0..raw_len(&tax)).map(|_| r.gen_range(-2.0..2.0)).collect();
        let mut tape = Tape::new();
        let raw = tape.constant(&Tensor::vector(raw_data));
        let out = tiny_output(&mut tape, &tax, &raw);
        let cost = match_cost(&out, &scene, &tax, &MatchWeights::default()).unwrap();
        let matched = hungarian(&cost).unwrap();
        let cfg = DetectorLossCfg::default();
        let loss = detector_loss(&mut tape, &out, &scene, &tax, &matched, &cfg).unwrap();
        let manual = cfg.lambda_box * loss.l_box.item()
            + cfg.lambda_iou * loss.l_iou.item()
            + cfg.lambda_cls * (loss.l_cls_object.item() + loss.l_cls_action.item());
        assert!((loss.l_detector.item() - manual).abs() <= 1e-12);
    }

    #[test]
    fn detector_loss_gradients_match_finite_differences() {
        let tax = Taxonomy::default_desk();
        let scene = tiny_scene(&tax);
        let mut r = rng::substream(82, "fd-test");
        let raw_data: Vec<f64> = (0..raw_len(&tax)).map(|_| r.gen_range(-1.5..1.5)).collect();
        // Matching is computed once at the base point and then frozen, so
        // the differentiated function is smooth.
        let mut pre_tape = Tape::new();
        let pre_raw = pre_tape.constant(&Tensor::vector(raw_data.clone()));
        let pre_out = tiny_output(&mut pre_tape, &tax, &pre_raw);
        let cost = match_cost(&pre_out, &scene, &tax, &MatchWeights::default()).unwrap();
        let matched = hungarian(&cost).unwrap();
        let err = gradcheck::check(
            &[Tensor::vector(raw_data)],
            1e-5,
            1e-3,
            |tape, leaves| {
                let out = tiny_output(tape, &tax, &leaves[0]);
                let loss = detector_loss(tape, &out, &scene, &tax, &matched, &DetectorLossCfg::default())?;
                Ok(loss.l_detector)
            },
        )
        .unwrap();
        assert!(err <= 1e-4, "rel err {}", err);
    }
}
