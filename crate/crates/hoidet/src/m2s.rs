//! Output-level debiasing: merge fine-grained interaction categories into
//! clustered superclasses, then split them back apart with a contrastive
//! objective over the most confusable category features.
//!
//! Verb and object text features are clustered independently (k-means with
//! k-means++ seeding); the cross product of cluster ids labels each
//! interaction category with one of M₁·M₂ superclasses. The merge loss is
//! plain cross-entropy on those coarse labels. The split stage picks, per
//! batch, the categories the current queries find most similar, keeps the
//! k₂ most frequent, and pushes each eligible query toward its own
//! category's text feature against the other selected ones.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingTable;
use crate::matching::MatchResult;
use crate::rng::substream_n;
use crate::scene::SceneAnnotation;
use crate::taxonomy::Taxonomy;
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

const KMEANS_MAX_ITERS: usize = 100;
const KMEANS_MOVEMENT_EPS: f64 = 1e-9;

pub struct KmeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares after each assignment phase.
    pub wcss_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    (best, best_d)
}

/// Lloyd's algorithm with k-means++ seeding. Runs until centroids move
/// less than 1e-9 or 100 iterations; a cluster that empties is re-seeded
/// from the point farthest from its nearest centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Result<KmeansResult> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::Config(format!(
            "kmeans: k={} outside 1..={}",
            k, n
        )));
    }
    // k-means++: first centroid uniform, the rest proportional to the
    // squared distance from the nearest chosen one.
    let mut centroids: Vec<Vec<f64>> = vec![points[rng.gen_range(0..n)].clone()];
    while centroids.len() < k {
        let d2: Vec<f64> = points.iter().map(|p| nearest(p, &centroids).1).collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            rng.gen_range(0..n)
        };
        centroids.push(points[pick].clone());
    }

    let dim = points[0].len();
    let mut assignments = vec![0usize; n];
    let mut wcss_history = Vec::new();
    for _ in 0..KMEANS_MAX_ITERS {
        for (i, p) in points.iter().enumerate() {
            assignments[i] = nearest(p, &centroids).0;
        }
        // Repair empty clusters one at a time; each repair can only lower
        // the objective because the replaced centroid owned no points.
        loop {
            let mut counts = vec![0usize; k];
            for &a in &assignments {
                counts[a] += 1;
            }
            let empty = match counts.iter().position(|&c| c == 0) {
                Some(e) => e,
                None => break,
            };
            let far = (0..n)
                .max_by(|&a, &b| {
                    let da = sq_dist(&points[a], &centroids[assignments[a]]);
                    let db = sq_dist(&points[b], &centroids[assignments[b]]);
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            centroids[empty] = points[far].clone();
            for (i, p) in points.iter().enumerate() {
                assignments[i] = nearest(p, &centroids).0;
            }
        }
        let wcss: f64 = points
            .iter()
            .zip(&assignments)
            .map(|(p, &a)| sq_dist(p, &centroids[a]))
            .sum();
        wcss_history.push(wcss);

        let mut next = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (acc, &v) in next[a].iter_mut().zip(p) {
                *acc += v;
            }
        }
        for (c, &cnt) in next.iter_mut().zip(&counts) {
            for v in c.iter_mut() {
                *v /= cnt as f64;
            }
        }
        let movement = centroids
            .iter()
            .zip(&next)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if movement < KMEANS_MOVEMENT_EPS {
            break;
        }
    }
    for (i, p) in points.iter().enumerate() {
        assignments[i] = nearest(p, &centroids).0;
    }
    Ok(KmeansResult {
        assignments,
        centroids,
        wcss_history,
    })
}

/// Coarse labeling of the category space: independent verb and object
/// clusterings composed verb-major.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SuperclassMap {
    pub m1: usize,
    pub m2: usize,
    pub verb_cluster: Vec<usize>,
    pub object_cluster: Vec<usize>,
    /// Category id -> superclass id in [0, m1*m2).
    pub hoi_super: Vec<usize>,
    pub verb_centroids: Vec<Vec<f64>>,
    pub object_centroids: Vec<Vec<f64>>,
}

impl SuperclassMap {
    pub fn n_superclasses(&self) -> usize {
        self.m1 * self.m2
    }

    /// Human-readable JSON export of the cluster structure.
    pub fn export_json(&self, tax: &Taxonomy, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct CatRow<'a> {
            category: usize,
            verb: &'a str,
            object: &'a str,
            superclass: usize,
        }
        #[derive(Serialize)]
        struct Doc<'a> {
            m1: usize,
            m2: usize,
            verb_clusters: Vec<(&'a str, usize)>,
            object_clusters: Vec<(&'a str, usize)>,
            categories: Vec<CatRow<'a>>,
        }
        let doc = Doc {
            m1: self.m1,
            m2: self.m2,
            verb_clusters: tax
                .verbs
                .iter()
                .map(|v| v.as_str())
                .zip(self.verb_cluster.iter().cloned())
                .collect(),
            object_clusters: tax
                .objects
                .iter()
                .map(|o| o.as_str())
                .zip(self.object_cluster.iter().cloned())
                .collect(),
            categories: tax
                .hoi_pairs
                .iter()
                .enumerate()
                .map(|(c, &(v, o))| CatRow {
                    category: c,
                    verb: &tax.verbs[v],
                    object: &tax.objects[o],
                    superclass: self.hoi_super[c],
                })
                .collect(),
        };
        let text = serde_json::to_string_pretty(&doc)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Cluster verb and object text features separately and compose the
/// superclass labels.
pub fn build_superclasses(
    table: &EmbeddingTable,
    tax: &Taxonomy,
    m1: usize,
    m2: usize,
    seed: u64,
) -> Result<SuperclassMap> {
    if m1 == 0 || m1 > tax.n_verbs() {
        return Err(Error::Config(format!(
            "m1={} outside 1..={}",
            m1,
            tax.n_verbs()
        )));
    }
    if m2 == 0 || m2 > tax.n_objects() {
        return Err(Error::Config(format!(
            "m2={} outside 1..={}",
            m2,
            tax.n_objects()
        )));
    }
    let rows = |t: &Tensor| -> Vec<Vec<f64>> {
        let cols = t.shape()[1];
        (0..t.shape()[0])
            .map(|r| t.data()[r * cols..(r + 1) * cols].to_vec())
            .collect()
    };
    let mut vrng = substream_n(seed, "kmeans", &[1]);
    let mut orng = substream_n(seed, "kmeans", &[2]);
    let vres = kmeans(&rows(table.verb_feats()), m1, &mut vrng)?;
    let ores = kmeans(&rows(table.object_feats()), m2, &mut orng)?;
    let hoi_super = tax
        .hoi_pairs
        .iter()
        .map(|&(v, o)| vres.assignments[v] * m2 + ores.assignments[o])
        .collect();
    Ok(SuperclassMap {
        m1,
        m2,
        verb_cluster: vres.assignments,
        object_cluster: ores.assignments,
        hoi_super,
        verb_centroids: vres.centroids,
        object_centroids: ores.centroids,
    })
}

/// Mean softmax cross-entropy of the superclass head over matched queries.
pub fn merge_loss(
    tape: &mut Tape,
    superclass_logits: &Tensor,
    rows: &[usize],
    labels: &[usize],
) -> Result<Tensor> {
    if rows.len() != labels.len() {
        return Err(Error::Loss("merge_loss: row/label count mismatch".into()));
    }
    let m = superclass_logits.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
        return Err(Error::Loss(format!(
            "merge_loss: label {} outside 0..{}",
            bad, m
        )));
    }
    if rows.is_empty() {
        return Ok(tape.constant(&Tensor::scalar(0.0)));
    }
    let picked_rows = tape.gather_rows(superclass_logits, rows)?;
    let ls = tape.log_softmax(&picked_rows)?;
    let idx: Vec<usize> = labels.iter().enumerate().map(|(r, &l)| r * m + l).collect();
    let chosen = tape.gather(&ls, &idx)?;
    let s = tape.sum(&chosen)?;
    tape.scale(&s, -1.0 / rows.len() as f64)
}

/// Superclass label of a GT triplet.
pub fn gt_superclass(map: &SuperclassMap, tax: &Taxonomy, verb: usize, object: usize) -> Result<usize> {
    let cat = tax
        .category_of(verb, object)
        .ok_or_else(|| Error::Loss("GT triplet outside taxonomy".into()))?;
    Ok(map.hoi_super[cat])
}

/// The per-batch split state: which categories were selected and which
/// matched queries train against them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitContext {
    /// Selected category ids, most frequent first (ties to lower index).
    pub selected_categories: Vec<usize>,
    /// Matched-query rows whose GT category is selected.
    pub eligible_queries: Vec<usize>,
    /// Position of each eligible query's GT category inside
    /// `selected_categories`.
    pub eligible_targets: Vec<usize>,
}

impl SplitContext {
    pub fn n_split(&self) -> usize {
        self.eligible_queries.len()
    }

    /// Text features of the selected categories as a constant matrix.
    pub fn selected_feats(&self, tape: &mut Tape, hoi_feats: &Tensor) -> Result<Tensor> {
        let cols = hoi_feats.shape()[1];
        let mut data = Vec::with_capacity(self.selected_categories.len() * cols);
        for &c in &self.selected_categories {
            data.extend_from_slice(&hoi_feats.data()[c * cols..(c + 1) * cols]);
        }
        let t = Tensor::matrix(self.selected_categories.len(), cols, data)?;
        Ok(tape.constant(&t))
    }
}

/// Per query, rank categories by cosine similarity of the raw interaction
/// query to the text features; histogram the top-k₁ picks and keep the k₂
/// most frequent categories.
pub fn select_topk_categories(
    interaction_queries: &Tensor,
    hoi_feats: &Tensor,
    k1: usize,
    k2: usize,
) -> Result<SplitContext> {
    if k1 == 0 || k2 == 0 {
        return Err(Error::Config("k1 and k2 must be at least 1".into()));
    }
    let n_cat = hoi_feats.shape()[0];
    let dim = hoi_feats.shape()[1];
    if interaction_queries.shape().len() != 2 || interaction_queries.shape()[1] != dim {
        return Err(Error::ShapeMismatch {
            op: "select_topk_categories",
            lhs: interaction_queries.shape().to_vec(),
            rhs: hoi_feats.shape().to_vec(),
        });
    }
    let unit = |row: &[f64]| -> Vec<f64> {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter().map(|v| v / n).collect()
    };
    let cats: Vec<Vec<f64>> = (0..n_cat).map(|c| unit(hoi_feats.row_slice(c))).collect();
    let mut freq = vec![0usize; n_cat];
    let nq = interaction_queries.shape()[0];
    for q in 0..nq {
        let qr = unit(interaction_queries.row_slice(q));
        let mut sims: Vec<(usize, f64)> = cats
            .iter()
            .enumerate()
            .map(|(c, t)| (c, qr.iter().zip(t).map(|(a, b)| a * b).sum::<f64>()))
            .collect();
        // Descending similarity, lower index on ties.
        sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for &(c, _) in sims.iter().take(k1.min(n_cat)) {
            freq[c] += 1;
        }
    }
    let mut order: Vec<usize> = (0..n_cat).filter(|&c| freq[c] > 0).collect();
    order.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then(a.cmp(&b)));
    order.truncate(k2);
    Ok(SplitContext {
        selected_categories: order,
        eligible_queries: Vec::new(),
        eligible_targets: Vec::new(),
    })
}

/// Fill in which matched queries are eligible: those whose GT category is
/// among the selected ones.
pub fn assign_eligibility(
    ctx: &mut SplitContext,
    matched: &MatchResult,
    scene: &SceneAnnotation,
    tax: &Taxonomy,
) -> Result<()> {
    ctx.eligible_queries.clear();
    ctx.eligible_targets.clear();
    for &(q, g) in &matched.pairs {
        let t = &scene.triplets[g];
        let cat = tax
            .category_of(t.verb_class, t.object_class)
            .ok_or_else(|| Error::Loss("GT triplet outside taxonomy".into()))?;
        if let Some(pos) = ctx.selected_categories.iter().position(|&c| c == cat) {
            ctx.eligible_queries.push(q);
            ctx.eligible_targets.push(pos);
        }
    }
    Ok(())
}

/// InfoNCE of eligible post-decoder query features against the selected
/// category text features; each query's own category is the positive.
pub fn split_loss(
    tape: &mut Tape,
    updated_feats: &Tensor,
    hoi_feats: &Tensor,
    ctx: &SplitContext,
    tau: f64,
) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(Error::Config(format!(
            "split temperature must be positive, got {}",
            tau
        )));
    }
    let n = ctx.n_split();
    if n == 0 {
        return Ok(tape.constant(&Tensor::scalar(0.0)));
    }
    let k = ctx.selected_categories.len();
    let q_rows = tape.gather_rows(updated_feats, &ctx.eligible_queries)?;
    let sel = ctx.selected_feats(tape, hoi_feats)?;
    let qn = tape.normalize(&q_rows, 1e-12)?;
    let tn = tape.normalize(&sel, 1e-12)?;
    let tt = tape.transpose(&tn)?;
    let sims_raw = tape.matmul(&qn, &tt)?;
    let sims = tape.scale(&sims_raw, 1.0 / tau)?;
    let ls = tape.log_softmax(&sims)?;
    let idx: Vec<usize> = ctx
        .eligible_targets
        .iter()
        .enumerate()
        .map(|(r, &j)| r * k + j)
        .collect();
    let own = tape.gather(&ls, &idx)?;
    let s = tape.sum(&own)?;
    tape.scale(&s, -1.0 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::EmbedConfig;
    use crate::rng;
    use crate::scene::SceneMeta;
    use crate::taxonomy::HoiTriplet;
    use crate::tensor::gradcheck;
    use rand::Rng as _;

    fn random_points(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng::substream(seed, "kmeans-test");
        (0..n)
            .map(|_| (0..d).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn kmeans_objective_never_increases() {
        let pts = random_points(40, 6, 1);
        let mut r = rng::substream(2, "kmeans-run");
        let res = kmeans(&pts, 5, &mut r).unwrap();
        assert!(!res.wcss_history.is_empty());
        for w in res.wcss_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "wcss rose: {:?}", w);
        }
        assert_eq!(res.assignments.len(), 40);
        assert!(res.assignments.iter().all(|&a| a < 5));
        // Every cluster ends non-empty thanks to the repair rule.
        for k in 0..5 {
            assert!(res.assignments.contains(&k));
        }
    }

    #[test]
    fn kmeans_with_k_equals_n_is_exact() {
        let pts = random_points(7, 4, 3);
        let mut r = rng::substream(4, "kmeans-run");
        let res = kmeans(&pts, 7, &mut r).unwrap();
        let mut seen = res.assignments.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 7);
        assert!(res.wcss_history.last().unwrap() <= &1e-18);
    }

    #[test]
    fn kmeans_rejects_bad_k() {
        let pts = random_points(3, 2, 5);
        let mut r = rng::substream(6, "kmeans-run");
        assert!(kmeans(&pts, 0, &mut r).is_err());
        assert!(kmeans(&pts, 4, &mut r).is_err());
    }

    fn desk_table() -> (Taxonomy, EmbeddingTable) {
        let tax = Taxonomy::default_desk();
        let table = EmbeddingTable::pseudo(&tax, &EmbedConfig::default()).unwrap();
        (tax, table)
    }

    #[test]
    fn default_superclasses_partition_all_categories() {
        let (tax, table) = desk_table();
        let map = build_superclasses(&table, &tax, 5, 5, 0).unwrap();
        assert_eq!(map.n_superclasses(), 25);
        assert_eq!(map.hoi_super.len(), tax.n_categories());
        assert!(map.hoi_super.iter().all(|&s| s < 25));
        for (c, &(v, o)) in tax.hoi_pairs.iter().enumerate() {
            assert_eq!(map.hoi_super[c], map.verb_cluster[v] * 5 + map.object_cluster[o]);
        }
        // Stable across reruns with the same seed.
        let again = build_superclasses(&table, &tax, 5, 5, 0).unwrap();
        assert_eq!(map, again);
        // A different seed is allowed to differ, but must still partition.
        let other = build_superclasses(&table, &tax, 5, 5, 99).unwrap();
        assert!(other.hoi_super.iter().all(|&s| s < 25));
    }

    #[test]
    fn degenerate_cluster_counts() {
        let (tax, table) = desk_table();
        let map = build_superclasses(&table, &tax, tax.n_verbs(), tax.n_objects(), 0).unwrap();
        // Every category its own superclass: injective on the pair list.
        let mut seen = map.hoi_super.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), tax.n_categories());
        let single = build_superclasses(&table, &tax, 1, 1, 0).unwrap();
        assert!(single.hoi_super.iter().all(|&s| s == 0));
    }

    #[test]
    fn merge_loss_closed_forms() {
        let mut tape = Tape::new();
        let uniform = tape.constant(&Tensor::matrix(1, 25, vec![0.7; 25]).unwrap());
        let l = merge_loss(&mut tape, &uniform, &[0], &[13]).unwrap();
        assert!((l.item() - (25.0f64).ln()).abs() <= 1e-9);
        // Saturated correct logit drives the loss toward zero.
        let mut data = vec![-40.0; 25];
        data[7] = 40.0;
        let hot = tape.constant(&Tensor::matrix(1, 25, data).unwrap());
        let l0 = merge_loss(&mut tape, &hot, &[0], &[7]).unwrap();
        assert!(l0.item() <= 1e-9);
        // Empty matched set contributes nothing.
        let none = merge_loss(&mut tape, &uniform, &[], &[]).unwrap();
        assert_eq!(none.item(), 0.0);
        // Labels outside the head width are rejected.
        assert!(merge_loss(&mut tape, &uniform, &[0], &[25]).is_err());
    }

    #[test]
    fn merge_loss_matches_direct_evaluation_and_finite_differences() {
        let mut r = rng::substream(7, "merge-oracle");
        let data: Vec<f64> = (0..4 * 6).map(|_| r.gen_range(-2.0..2.0)).collect();
        let rows = [0usize, 2, 3];
        let labels = [1usize, 4, 0];
        let mut direct = 0.0;
        for (&q, &l) in rows.iter().zip(&labels) {
            let row = &data[q * 6..(q + 1) * 6];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            direct += -(row[l] - m - z.ln());
        }
        direct /= 3.0;
        let mut tape = Tape::new();
        let t = tape.constant(&Tensor::matrix(4, 6, data.clone()).unwrap());
        let l = merge_loss(&mut tape, &t, &rows, &labels).unwrap();
        assert!((l.item() - direct).abs() <= 1e-12);
        let err = gradcheck::check(
            &[Tensor::matrix(4, 6, data).unwrap()],
            1e-5,
            1e-3,
            |tape, leaves| merge_loss(tape, &leaves[0], &rows, &labels),
        )
        .unwrap();
        assert!(err <= 1e-4, "rel err {}", err);
    }

    #[test]
    fn topk_selection_hand_case() {
        // Orthogonal unit text features make the cosine ranking equal the
        // coefficient ranking: (0.9, 0.1, 0.8) -> {0, 2}.
        let feats = Tensor::matrix(
            3,
            3,
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let q = Tensor::matrix(1, 3, vec![0.9, 0.1, 0.8]).unwrap();
        let ctx = select_topk_categories(&q, &feats, 2, 10).unwrap();
        assert_eq!(ctx.selected_categories, vec![0, 2]);
    }

    #[test]
    fn topk_selection_matches_brute_force() {
        let (_, table) = desk_table();
        let feats = table.hoi_feats();
        let n_cat = feats.shape()[0];
        let dim = feats.shape()[1];
        let mut r = rng::substream(8, "topk-oracle");
        let q_data: Vec<f64> = (0..16 * dim).map(|_| r.gen_range(-1.0..1.0)).collect();
        let q = Tensor::matrix(16, dim, q_data.clone()).unwrap();
        let (k1, k2) = (2, 10);
        let ctx = select_topk_categories(&q, feats, k1, k2).unwrap();
        // Independent histogram-and-sort.
        let unit = |row: &[f64]| -> Vec<f64> {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter().map(|v| v / n).collect()
        };
        let mut freq = vec![0usize; n_cat];
        for qi in 0..16 {
            let qr = unit(&q_data[qi * dim..(qi + 1) * dim]);
            let mut sims: Vec<(usize, f64)> = (0..n_cat)
                .map(|c| {
                    let t = unit(feats.row_slice(c));
                    (c, qr.iter().zip(&t).map(|(a, b)| a * b).sum())
                })
                .collect();
            sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            for &(c, _) in sims.iter().take(k1) {
                freq[c] += 1;
            }
        }
        let mut order: Vec<usize> = (0..n_cat).filter(|&c| freq[c] > 0).collect();
        order.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then(a.cmp(&b)));
        order.truncate(k2);
        assert_eq!(ctx.selected_categories, order);
    }

    #[test]
    fn single_query_keeps_only_its_own_topk() {
        let feats = Tensor::matrix(
            4,
            4,
            vec![
                1.0, 0.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, 0.0, //
                0.0, 0.0, 1.0, 0.0, //
                0.0, 0.0, 0.0, 1.0,
            ],
        )
        .unwrap();
        let q = Tensor::matrix(1, 4, vec![0.2, 0.9, 0.0, 0.5]).unwrap();
        let ctx = select_topk_categories(&q, &feats, 2, 10).unwrap();
        assert_eq!(ctx.selected_categories, vec![1, 3]);
    }

    fn eligibility_scene(tax: &Taxonomy) -> SceneAnnotation {
        let (v0, o0) = tax.hoi_pairs[0];
        let (v1, o1) = tax.hoi_pairs[1];
        SceneAnnotation {
            scene_id: 0,
            triplets: vec![
                HoiTriplet {
                    human_box: [0.3, 0.3, 0.2, 0.2],
                    object_box: [0.5, 0.5, 0.2, 0.2],
                    object_class: o0,
                    verb_class: v0,
                },
                HoiTriplet {
                    human_box: [0.6, 0.6, 0.2, 0.2],
                    object_box: [0.7, 0.7, 0.2, 0.2],
                    object_class: o1,
                    verb_class: v1,
                },
            ],
            meta: SceneMeta::default(),
            feature_grid: Tensor::zeros(&[2, 2, 4]),
        }
    }

    #[test]
    fn eligibility_follows_selection() {
        let (tax, _) = desk_table();
        let scene = eligibility_scene(&tax);
        let matched = MatchResult {
            pairs: vec![(1, 0), (3, 1)],
            unmatched_queries: vec![0, 2],
        };
        let mut ctx = SplitContext {
            selected_categories: vec![0, 5, 9],
            eligible_queries: vec![],
            eligible_targets: vec![],
        };
        assign_eligibility(&mut ctx, &matched, &scene, &tax).unwrap();
        // GT 0 is category 0 (selected, position 0); GT 1 is category 1
        // (not selected).
        assert_eq!(ctx.eligible_queries, vec![1]);
        assert_eq!(ctx.eligible_targets, vec![0]);
        for (&_q, &j) in ctx.eligible_queries.iter().zip(&ctx.eligible_targets) {
            assert!(j < ctx.selected_categories.len());
        }
    }

    #[test]
    fn split_loss_closed_forms() {
        // Ten orthogonal text features and a query orthogonal to all of
        // them: uniform logits, loss ln 10.
        let d = 12;
        let mut feats = vec![0.0; 10 * d];
        for k in 0..10 {
            feats[k * d + k] = 1.0;
        }
        let hoi = Tensor::matrix(10, d, feats).unwrap();
        let mut qd = vec![0.0; d];
        qd[11] = 1.0;
        let mut tape = Tape::new();
        let q = tape.constant(&Tensor::matrix(1, d, qd).unwrap());
        let ctx = SplitContext {
            selected_categories: (0..10).collect(),
            eligible_queries: vec![0],
            eligible_targets: vec![3],
        };
        let l = split_loss(&mut tape, &q, &hoi, &ctx, 0.07).unwrap();
        assert!((l.item() - (10.0f64).ln()).abs() <= 1e-9);
        // No eligible queries: exact zero.
        let empty = SplitContext {
            selected_categories: (0..10).collect(),
            eligible_queries: vec![],
            eligible_targets: vec![],
        };
        let z = split_loss(&mut tape, &q, &hoi, &empty, 0.07).unwrap();
        assert_eq!(z.item(), 0.0);
        assert!(split_loss(&mut tape, &q, &hoi, &ctx, 0.0).is_err());
    }

    #[test]
    fn split_loss_matches_direct_evaluation_and_finite_differences() {
        let (_, table) = desk_table();
        let feats = table.hoi_feats();
        let dim = feats.shape()[1];
        let mut r = rng::substream(9, "split-oracle");
        let q_data: Vec<f64> = (0..4 * dim).map(|_| r.gen_range(-1.0..1.0)).collect();
        let ctx = SplitContext {
            selected_categories: vec![3, 11, 25, 40],
            eligible_queries: vec![0, 2, 3],
            eligible_targets: vec![1, 0, 3],
        };
        let tau = 0.3;
        let mut tape = Tape::new();
        let q = tape.constant(&Tensor::matrix(4, dim, q_data.clone()).unwrap());
        let l = split_loss(&mut tape, &q, feats, &ctx, tau).unwrap();
        let unit = |row: &[f64]| -> Vec<f64> {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter().map(|v| v / n).collect()
        };
        let mut direct = 0.0;
        for (&qi, &tj) in ctx.eligible_queries.iter().zip(&ctx.eligible_targets) {
            let qr = unit(&q_data[qi * dim..(qi + 1) * dim]);
            let sims: Vec<f64> = ctx
                .selected_categories
                .iter()
                .map(|&c| {
                    let t = unit(feats.row_slice(c));
                    qr.iter().zip(&t).map(|(a, b)| a * b).sum::<f64>() / tau
                })
                .collect();
            let mx = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = sims.iter().map(|s| (s - mx).exp()).sum();
            direct += -(sims[tj] - mx - z.ln());
        }
        direct /= 3.0;
        assert!((l.item() - direct).abs() <= 1e-12);
        let err = gradcheck::check(
            &[Tensor::matrix(4, dim, q_data).unwrap()],
            1e-5,
            1e-3,
            |tape, leaves| split_loss(tape, &leaves[0], feats, &ctx, tau),
        )
        .unwrap();
        assert!(err <= 1e-4, "rel err {}", err);
    }

    #[test]
    fn export_writes_inspectable_json() {
        let (tax, table) = desk_table();
        let map = build_superclasses(&table, &tax, 5, 5, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("superclasses.json");
        map.export_json(&tax, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(doc["m1"], 5);
        assert_eq!(doc["categories"].as_array().unwrap().len(), tax.n_categories());
        let first = &doc["categories"][0];
        assert!(first["superclass"].as_u64().unwrap() < 25);
    }
}
