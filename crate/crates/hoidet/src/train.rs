//! Training loop for the combined objective: SGD with momentum and
//! decoupled weight decay, per-epoch evaluation, bias diagnostics, run
//! records on disk, and the incremental ablation grid.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::c2c::{build_calibration_batch, build_sibling_sets, contrastive_loss, calibration_loss,
    gt_triplet_feats, predicted_triplet_feats};
use crate::config::RunConfig;
use crate::detector::{Bound, DetectorOutput, ForwardOpts, Model, ParamStore};
use crate::embed::EmbeddingTable;
use crate::eval::{diagnose_input_bias, diagnose_output_bias, evaluate, predictions_from_output,
    write_predictions_jsonl, BiasReport, EvalReport, PredictionRecord};
use crate::m2s::{assign_eligibility, build_superclasses, gt_superclass, merge_loss,
    select_topk_categories, split_loss, SuperclassMap};
use crate::matching::{detector_loss, hungarian, match_cost, LossReport, MatchWeights};
use crate::rng;
use crate::scene::{Dataset, SceneAnnotation};
use crate::taxonomy::Taxonomy;
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

/// Gradient descent with momentum; weight decay is applied to the
/// parameter directly (decoupled), never folded into the velocity.
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64, params: &ParamStore) -> Sgd {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        }
    }

    /// One update from gradients aligned with the parameter order.
    /// v ← μv + g;  θ ← θ − lr·v − lr·wd·θ
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) {
        assert_eq!(grads.len(), self.velocity.len(), "gradient/parameter mismatch");
        let (lr, mu, wd) = (self.lr, self.momentum, self.weight_decay);
        for (i, (_, t)) in params.iter_mut().enumerate() {
            let v = &mut self.velocity[i];
            let data = t.data_mut();
            for j in 0..data.len() {
                v[j] = mu * v[j] + grads[i][j];
                data[j] -= lr * v[j] + lr * wd * data[j];
            }
        }
    }
}

/// The five per-objective contributions λᵢ·ℓᵢ, in objective order
/// (detector, contrastive, calibration, merge, split).
pub fn contributions(components: &[f64; 5], lambdas: &[f64; 5]) -> [f64; 5] {
    let mut out = [0.0; 5];
    for i in 0..5 {
        out[i] = lambdas[i] * components[i];
    }
    out
}

/// Combined objective value: the sum of [`contributions`].
pub fn weighted_total(components: &[f64; 5], lambdas: &[f64; 5]) -> f64 {
    contributions(components, lambdas).iter().sum()
}

struct SceneTerms {
    loss: Tensor,
    report: LossReport,
}

fn selected_rows(hoi_feats: &Tensor, cats: &[usize]) -> Result<Tensor> {
    let c = hoi_feats.shape()[1];
    let mut data = Vec::with_capacity(cats.len() * c);
    for &cat in cats {
        data.extend_from_slice(&hoi_feats.data()[cat * c..(cat + 1) * c]);
    }
    Tensor::matrix(cats.len(), c, data)
}

/// Every enabled loss for one scene on one tape. Disabled objectives add
/// no term at all, so their contribution is exactly zero.
#[allow(clippy::too_many_arguments)]
fn scene_objective(
    tape: &mut Tape,
    bound: &Bound,
    model: &Model,
    table: &EmbeddingTable,
    tax: &Taxonomy,
    map: &SuperclassMap,
    cfg: &RunConfig,
    scene: &SceneAnnotation,
    rng: &mut ChaCha8Rng,
) -> Result<SceneTerms> {
    let grid = tape.constant(&scene.feature_grid);
    let inst = model.instance_pass(tape, bound, &grid)?;

    // Split selection reads the pre-decoder queries; the chosen category
    // features also join the interaction decoder's memory.
    let mut split_ctx = if cfg.split {
        Some(select_topk_categories(
            &inst.interaction_queries,
            table.hoi_feats(),
            cfg.k1,
            cfg.k2,
        )?)
    } else {
        None
    };
    let cat_feats = match &split_ctx {
        Some(ctx) => Some(selected_rows(table.hoi_feats(), &ctx.selected_categories)?),
        None => None,
    };

    let sets = build_sibling_sets(scene);
    let (additional, cal_targets) = if cfg.calibration {
        match build_calibration_batch(tape, bound, model, table, tax, scene, &sets, rng)? {
            Some(batch) => (Some(batch.queries), Some(batch.targets)),
            None => (None, None),
        }
    } else {
        (None, None)
    };

    let opts = ForwardOpts {
        hor_mask_on: cfg.hor_mask,
        category_feats: cat_feats.as_ref(),
        additional,
        hor_masks_override: None,
    };
    let out = model.interaction_pass(tape, bound, &inst, &opts)?;

    let weights = MatchWeights {
        lambda_cls: cfg.lambda_cls,
        lambda_box: cfg.lambda_box,
        lambda_iou: cfg.lambda_iou,
    };
    let cost = match_cost(&out, scene, tax, &weights)?;
    let matched = hungarian(&cost)?;
    let det = detector_loss(tape, &out, scene, tax, &matched, &cfg.detector_loss_cfg())?;

    let mut report = LossReport {
        l_box: det.l_box.item(),
        l_iou: det.l_iou.item(),
        l_cls_object: det.l_cls_object.item(),
        l_cls_action: det.l_cls_action.item(),
        l_detector: det.l_detector.item(),
        ..Default::default()
    };
    let mut total = tape.scale(&det.l_detector, cfg.lambda1)?;

    if cfg.contrastive {
        let query_feats = predicted_triplet_feats(tape, bound, model, &out, &matched)?;
        let gt_feats = gt_triplet_feats(tape, bound, model, table, tax, scene)?;
        let gt_of_query: Vec<usize> = matched.pairs.iter().map(|&(_, g)| g).collect();
        let l_con = contrastive_loss(tape, &query_feats, &gt_feats, &gt_of_query, &sets, cfg.tau_con)?;
        report.l_con = l_con.item();
        let term = tape.scale(&l_con, cfg.lambda2)?;
        total = tape.add(&total, &term)?;
    }
    if let (Some(targets), Some(corrected)) = (&cal_targets, &out.corrected_additional_feats) {
        let l_cal = calibration_loss(tape, corrected, targets, &cfg.c2c_cfg())?;
        report.l_cal = l_cal.item();
        let term = tape.scale(&l_cal, cfg.lambda3)?;
        total = tape.add(&total, &term)?;
    }
    if cfg.merge {
        let rows: Vec<usize> = matched.pairs.iter().map(|&(q, _)| q).collect();
        let labels = matched
            .pairs
            .iter()
            .map(|&(_, g)| {
                let t = &scene.triplets[g];
                gt_superclass(map, tax, t.verb_class, t.object_class)
            })
            .collect::<Result<Vec<usize>>>()?;
        let l_merge = merge_loss(tape, &out.superclass_logits, &rows, &labels)?;
        report.l_merge = l_merge.item();
        let term = tape.scale(&l_merge, cfg.lambda4)?;
        total = tape.add(&total, &term)?;
    }
    if let Some(ctx) = split_ctx.as_mut() {
        assign_eligibility(ctx, &matched, scene, tax)?;
        let l_split = split_loss(
            tape,
            &out.updated_interaction_feats,
            table.hoi_feats(),
            ctx,
            cfg.tau_split,
        )?;
        report.l_split = l_split.item();
        let term = tape.scale(&l_split, cfg.lambda5)?;
        total = tape.add(&total, &term)?;
    }
    report.l_all = total.item();
    Ok(SceneTerms { loss: total, report })
}

/// One optimizer step over a batch of scenes: per-scene tapes, gradients
/// averaged across the batch. Steps only when the batch loss is finite;
/// the caller inspects the returned report.
#[allow(clippy::too_many_arguments)]
fn train_batch(
    model: &mut Model,
    opt: &mut Sgd,
    batch: &[&SceneAnnotation],
    table: &EmbeddingTable,
    tax: &Taxonomy,
    map: &SuperclassMap,
    cfg: &RunConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossReport> {
    let mut accum: Vec<Vec<f64>> = model
        .params
        .iter()
        .map(|(_, t)| vec![0.0; t.numel()])
        .collect();
    let mut report = LossReport::default();
    let inv = 1.0 / batch.len() as f64;
    for scene in batch {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let terms = scene_objective(&mut tape, &bound, model, table, tax, map, cfg, scene, rng)?;
        let grads = tape.backward(&terms.loss)?;
        for (i, (name, _)) in model.params.iter().enumerate() {
            if let Some(g) = grads.wrt(bound.get(name)) {
                for (a, v) in accum[i].iter_mut().zip(g.data()) {
                    *a += inv * v;
                }
            }
        }
        report.add(&terms.report);
    }
    report.scale(inv);
    if report.is_finite() {
        opt.step(&mut model.params, &accum);
    }
    Ok(report)
}

/// Frozen forward for one scene, honoring the run's toggles.
pub fn run_inference(
    model: &Model,
    table: &EmbeddingTable,
    cfg: &RunConfig,
    scene: &SceneAnnotation,
) -> Result<DetectorOutput> {
    let mut tape = Tape::new();
    let bound = model.bind_frozen(&mut tape);
    let grid = tape.constant(&scene.feature_grid);
    let inst = model.instance_pass(&mut tape, &bound, &grid)?;
    let cat_feats = if cfg.split {
        let ctx = select_topk_categories(
            &inst.interaction_queries,
            table.hoi_feats(),
            cfg.k1,
            cfg.k2,
        )?;
        Some(selected_rows(table.hoi_feats(), &ctx.selected_categories)?)
    } else {
        None
    };
    let opts = ForwardOpts {
        hor_mask_on: cfg.hor_mask,
        category_feats: cat_feats.as_ref(),
        ..Default::default()
    };
    model.interaction_pass(&mut tape, &bound, &inst, &opts)
}

/// Predictions plus the evaluation report over a scene split.
pub fn evaluate_model(
    model: &Model,
    table: &EmbeddingTable,
    tax: &Taxonomy,
    cfg: &RunConfig,
    scenes: &[SceneAnnotation],
    train_counts: &[usize],
) -> Result<(Vec<PredictionRecord>, EvalReport)> {
    let mut preds = Vec::new();
    for scene in scenes {
        let out = run_inference(model, table, cfg, scene)?;
        preds.extend(predictions_from_output(
            scene.scene_id,
            &out,
            tax,
            cfg.eval_top_k,
        ));
    }
    let report = evaluate(&preds, scenes, tax, train_counts, &cfg.eval_settings())?;
    Ok((preds, report))
}

/// Everything a finished run leaves behind, JSON-serializable.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: u64,
    /// One averaged report per epoch.
    pub loss_series: Vec<LossReport>,
    /// One validation evaluation per epoch.
    pub eval_series: Vec<EvalReport>,
    pub final_eval: EvalReport,
    pub bias: BiasReport,
    /// File name of the checkpoint, relative to the run directory, so the
    /// record's bytes do not depend on where the run happened to live.
    pub checkpoint_path: String,
}

impl RunRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<RunRecord> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }
}

#[derive(Serialize)]
struct NanDump<'a> {
    epoch: usize,
    batch_index: usize,
    scene_ids: Vec<u64>,
    report: &'a LossReport,
}

fn write_curves_csv(path: &Path, record: &RunRecord) -> Result<()> {
    let mut text = String::from(
        "epoch,l_box,l_iou,l_cls_object,l_cls_action,l_detector,l_con,l_cal,l_merge,l_split,l_all,map_full,map_rare,map_nonrare,map_known_object\n",
    );
    for (e, (l, v)) in record.loss_series.iter().zip(&record.eval_series).enumerate() {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            e,
            l.l_box,
            l.l_iou,
            l.l_cls_object,
            l.l_cls_action,
            l.l_detector,
            l.l_con,
            l.l_cal,
            l.l_merge,
            l.l_split,
            l.l_all,
            v.map_full,
            v.map_rare,
            v.map_nonrare,
            v.map_known_object
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Full training run: datasets and model from the config's seed, epoch
/// loop with step decay, per-epoch evaluation, diagnostics, artifacts
/// under `out_dir` (checkpoint, run record, curves, predictions).
pub fn train(cfg: &RunConfig, out_dir: &Path) -> Result<RunRecord> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let tax = Taxonomy::default_desk();
    let table = EmbeddingTable::pseudo(&tax, &cfg.embed_config())?;
    let train_set = Dataset::generate(
        &tax,
        &table,
        &cfg.gen_config(),
        &cfg.embed_config(),
        cfg.n_train_scenes,
        0,
    )?;
    let test_set = Dataset::generate(
        &tax,
        &table,
        &cfg.gen_config(),
        &cfg.embed_config(),
        cfg.n_test_scenes,
        cfg.n_train_scenes as u64,
    )?;
    let train_counts = train_set.category_counts();
    let map = build_superclasses(&table, &tax, cfg.m1, cfg.m2, cfg.seed)?;
    let mut model = Model::new(&cfg.model_config(), &tax, &table, map.n_superclasses(), cfg.seed)?;
    let initial_rows = model.params.get("head.hoi.rows").clone();
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay, &model.params);
    let mut rng = rng::substream(cfg.seed, rng::STREAM_SAMPLING);

    let mut loss_series = Vec::with_capacity(cfg.epochs);
    let mut eval_series = Vec::with_capacity(cfg.epochs);
    let mut last_eval: Option<(Vec<PredictionRecord>, EvalReport)> = None;
    let mut order: Vec<usize> = (0..train_set.scenes.len()).collect();
    for epoch in 0..cfg.epochs {
        if epoch == cfg.decay_epoch {
            opt.lr *= cfg.decay_factor;
        }
        order.shuffle(&mut rng);
        let mut epoch_report = LossReport::default();
        let mut n_batches = 0usize;
        for (bi, ids) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&SceneAnnotation> =
                ids.iter().map(|&i| &train_set.scenes[i]).collect();
            let report =
                train_batch(&mut model, &mut opt, &batch, &table, &tax, &map, cfg, &mut rng)?;
            if !report.is_finite() {
                let dump = NanDump {
                    epoch,
                    batch_index: bi,
                    scene_ids: batch.iter().map(|s| s.scene_id).collect(),
                    report: &report,
                };
                let dump_path = out_dir.join("nan_dump.json");
                let text = serde_json::to_string_pretty(&dump)
                    .map_err(|e| Error::json(dump_path.display().to_string(), e))?;
                std::fs::write(&dump_path, text)
                    .map_err(|e| Error::io(dump_path.display().to_string(), e))?;
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {} batch {}; offending batch dumped to {}",
                    epoch,
                    bi,
                    dump_path.display()
                )));
            }
            epoch_report.add(&report);
            n_batches += 1;
        }
        epoch_report.scale(1.0 / n_batches.max(1) as f64);
        loss_series.push(epoch_report);
        let pe = evaluate_model(&model, &table, &tax, cfg, &test_set.scenes, &train_counts)?;
        eval_series.push(pe.1.clone());
        last_eval = Some(pe);
    }

    let (final_preds, final_eval) = match last_eval {
        Some(x) => x,
        None => evaluate_model(&model, &table, &tax, cfg, &test_set.scenes, &train_counts)?,
    };
    let input = diagnose_input_bias(&final_preds, &test_set.scenes, &tax, cfg.iou_thresh)?;
    let output = diagnose_output_bias(
        &initial_rows,
        &final_eval.per_category_ap,
        &train_counts,
        0.1,
    )?;
    let bias = BiasReport {
        input,
        output,
        map_curve: Some(eval_series.iter().map(|e| e.map_full).collect()),
    };

    let ckpt = out_dir.join("checkpoint.bin");
    model.params.save(&ckpt, cfg.hash())?;
    write_predictions_jsonl(&out_dir.join("predictions.jsonl"), &final_preds)?;
    let record = RunRecord {
        config_hash: cfg.hash(),
        loss_series,
        eval_series,
        final_eval,
        bias,
        checkpoint_path: ckpt.display().to_string(),
    };
    record.save(&out_dir.join("run.json"))?;
    write_curves_csv(&out_dir.join("curves.csv"), &record)?;
    Ok(record)
}

/// Rebuild a model from a checkpoint produced by [`train`] under the same
/// config. The stored hash must match.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<Model> {
    let tax = Taxonomy::default_desk();
    let table = EmbeddingTable::pseudo(&tax, &cfg.embed_config())?;
    let (store, hash) = ParamStore::load(path)?;
    if hash != cfg.hash() {
        return Err(Error::Checkpoint(format!(
            "{}: checkpoint hash {:#x} does not match config hash {:#x}",
            path.display(),
            hash,
            cfg.hash()
        )));
    }
    let mut model = Model::new(&cfg.model_config(), &tax, &table, cfg.m1 * cfg.m2, cfg.seed)?;
    for (name, t) in model.params.iter_mut() {
        let loaded = store.get(name);
        if loaded.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "{}: parameter {} has shape {:?}, expected {:?}",
                path.display(),
                name,
                loaded.shape(),
                t.shape()
            )));
        }
        *t = loaded.clone();
    }
    Ok(model)
}

/// The incremental toggle grid, in objective order
/// (hor_mask, contrastive, calibration, merge, split).
pub const ABLATION_GRID: [(&str, [bool; 5]); 6] = [
    ("baseline", [false, false, false, false, false]),
    ("+hor", [true, false, false, false, false]),
    ("+contrastive", [true, true, false, false, false]),
    ("+calibration", [true, true, true, false, false]),
    ("+merge", [true, true, true, true, false]),
    ("+split", [true, true, true, true, true]),
];

/// A copy of `base` with the toggle vector applied.
pub fn apply_toggles(base: &RunConfig, toggles: &[bool; 5]) -> RunConfig {
    let mut cfg = base.clone();
    cfg.hor_mask = toggles[0];
    cfg.contrastive = toggles[1];
    cfg.calibration = toggles[2];
    cfg.merge = toggles[3];
    cfg.split = toggles[4];
    cfg
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationCell {
    pub seed: u64,
    pub map_full: f64,
    pub map_rare: f64,
    pub run_dir: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub toggles: [bool; 5],
    pub mean_map_full: f64,
    pub mean_map_rare: f64,
    pub cells: Vec<AblationCell>,
}

/// Run the six-row grid for every seed (rows × seeds run in parallel),
/// leaving one run directory per cell plus `ablation.csv` and
/// `ablation.json` at the top.
pub fn ablate(base: &RunConfig, seeds: &[u64], out_dir: &Path) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablate needs at least one seed".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut jobs = Vec::new();
    for (ri, (label, toggles)) in ABLATION_GRID.iter().enumerate() {
        for &seed in seeds {
            let mut cfg = apply_toggles(base, toggles);
            cfg.seed = seed;
            let dir = out_dir.join(format!("row{}_seed{}", ri, seed));
            jobs.push((ri, label.to_string(), *toggles, seed, cfg, dir));
        }
    }
    let results: Vec<Result<(usize, String, [bool; 5], u64, String, RunRecord)>> =
        std::thread::scope(|scope| {
            let handles: Vec<_> = jobs
                .into_iter()
                .map(|(ri, label, toggles, seed, cfg, dir)| {
                    scope.spawn(move || {
                        let record = train(&cfg, &dir)?;
                        Ok((ri, label, toggles, seed, dir.display().to_string(), record))
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("ablation worker panicked"))
                .collect()
        });
    let mut rows: Vec<AblationRow> = ABLATION_GRID
        .iter()
        .map(|(label, toggles)| AblationRow {
            label: label.to_string(),
            toggles: *toggles,
            mean_map_full: 0.0,
            mean_map_rare: 0.0,
            cells: Vec::new(),
        })
        .collect();
    for r in results {
        let (ri, _, _, seed, dir, record) = r?;
        rows[ri].cells.push(AblationCell {
            seed,
            map_full: record.final_eval.map_full,
            map_rare: record.final_eval.map_rare,
            run_dir: dir,
        });
    }
    for row in &mut rows {
        row.cells.sort_by_key(|c| c.seed);
        let n = row.cells.len() as f64;
        row.mean_map_full = row.cells.iter().map(|c| c.map_full).sum::<f64>() / n;
        row.mean_map_rare = row.cells.iter().map(|c| c.map_rare).sum::<f64>() / n;
    }
    write_ablation_csv(&out_dir.join("ablation.csv"), &rows)?;
    let json = serde_json::to_string_pretty(&rows)
        .map_err(|e| Error::json(out_dir.display().to_string(), e))?;
    std::fs::write(out_dir.join("ablation.json"), json)
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    Ok(rows)
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut text =
        String::from("label,hor_mask,contrastive,calibration,merge,split,seed,map_full,map_rare\n");
    for row in rows {
        let t = row.toggles;
        for c in &row.cells {
            text.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                row.label, t[0], t[1], t[2], t[3], t[4], c.seed, c.map_full, c.map_rare
            ));
        }
        text.push_str(&format!(
            "{},{},{},{},{},{},mean,{},{}\n",
            row.label, t[0], t[1], t[2], t[3], t[4], row.mean_map_full, row.mean_map_rare
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}
