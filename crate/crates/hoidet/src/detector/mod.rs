//! Two-branch set-prediction detector.
//!
//! An instance decoder updates paired human/object queries against the
//! scene grid and regresses boxes and object classes; interaction queries
//! are pooled from the updated pair and run through an interaction decoder
//! whose cross-attention is restricted per query to the union region of its
//! predicted boxes. Verb and interaction-category heads are cosine
//! classifiers whose rows start from the label embedding table, so label
//! semantics seed the decision boundaries. Optional calibration queries ride
//! along behind a one-directional self-attention mask: they may read the
//! original queries, the originals can never see them, and their presence
//! leaves every original output bit-identical.

pub mod hor;

use std::collections::HashMap;
use std::io::{Read, Write as _};
use std::path::Path;

use rand::prelude::*;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingTable;
use crate::rng;
use crate::taxonomy::Taxonomy;
use crate::tensor::{Tape, Tensor, NEG_INF};
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;
const CKPT_MAGIC: &[u8; 8] = b"HOICKPT1";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    /// Query pairs per scene (N̂).
    pub n_queries: usize,
    /// Feature width; must equal the embedding dim.
    pub c: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    /// Width of each learned box-coordinate feature.
    pub d_spatial: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_queries: 8,
            c: 64,
            layers: 2,
            heads: 2,
            ffn_hidden: 128,
            d_spatial: 16,
            grid_h: 8,
            grid_w: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_queries == 0 || self.layers == 0 || self.ffn_hidden == 0 || self.d_spatial == 0 {
            return Err(Error::Model("all model dims must be positive".into()));
        }
        if self.heads == 0 || self.c % self.heads != 0 {
            return Err(Error::Model(format!(
                "width {} not divisible into {} heads",
                self.c, self.heads
            )));
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err(Error::Model("grid dims must be positive".into()));
        }
        Ok(())
    }

    /// Width of a concatenated triplet feature: semantic + two box features.
    pub fn triplet_width(&self) -> usize {
        self.c + 2 * self.d_spatial
    }
}

/// Named parameter tensors in a stable insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn insert(&mut self, name: &str, t: Tensor) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {}",
            name
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), t));
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = self.index[name];
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.index[name];
        &mut self.entries[i].1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Versioned binary checkpoint: every tensor bit-exact plus the config
    /// hash it was trained under.
    pub fn save(&self, path: &Path, config_hash: u64) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&config_hash.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f =
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&out)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<(ParamStore, u64)> {
        let mut f =
            std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Checkpoint(format!(
                    "{}: truncated checkpoint",
                    path.display()
                )));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 8)? != CKPT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: not a checkpoint file",
                path.display()
            )));
        }
        let hash = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut store = ParamStore::default();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint(format!("{}: bad name", path.display())))?;
            let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = take(&mut pos, numel * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.insert(&name, Tensor::new(&shape, data)?);
        }
        Ok((store, hash))
    }
}

/// Handles for one tape binding of the parameter set.
pub struct Bound {
    handles: HashMap<String, Tensor>,
}

impl Bound {
    pub fn get(&self, name: &str) -> &Tensor {
        self.handles
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {}", name))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.handles.iter().map(|(n, t)| (n.as_str(), t))
    }
}

/// Calibration queries to append to the interaction decoder, plus the GT
/// boxes their cross-attention masks come from.
pub struct AdditionalQueries {
    /// Nadd × (C + 2·Dspatial), already on the tape.
    pub feats: Tensor,
    pub boxes: Vec<([f64; 4], [f64; 4])>,
}

pub struct ForwardOpts<'a> {
    pub hor_mask_on: bool,
    /// k₂ × C selected category features, appended as extra cross-attention
    /// keys/values in every interaction-decoder layer.
    pub category_feats: Option<&'a Tensor>,
    pub additional: Option<AdditionalQueries>,
    /// Test hook: replace the computed per-query grid masks outright.
    pub hor_masks_override: Option<Vec<Vec<f64>>>,
}

impl Default for ForwardOpts<'_> {
    fn default() -> Self {
        ForwardOpts {
            hor_mask_on: true,
            category_feats: None,
            additional: None,
            hor_masks_override: None,
        }
    }
}

#[derive(Debug)]
pub struct DetectorOutput {
    pub human_boxes: Tensor,
    pub object_boxes: Tensor,
    /// N̂ × (N₂+1); the last column is the no-object class.
    pub object_logits: Tensor,
    pub verb_logits: Tensor,
    pub hoi_logits: Tensor,
    pub superclass_logits: Tensor,
    /// Pooled pre-decoder interaction queries Qᵃ.
    pub interaction_queries: Tensor,
    /// Post-decoder interaction features Q̃ᵃ.
    pub updated_interaction_feats: Tensor,
    pub corrected_additional_feats: Option<Tensor>,
}

/// Instance-branch results, held between the two forward stages.
#[derive(Debug)]
pub struct InstancePass {
    /// Projected grid memory with positional encoding, [H·W, C].
    pub mem: Tensor,
    pub human_boxes: Tensor,
    pub object_boxes: Tensor,
    pub object_logits: Tensor,
    /// Pooled pre-decoder interaction queries Qᵃ.
    pub interaction_queries: Tensor,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub n_objects: usize,
    pub n_verbs: usize,
    pub n_categories: usize,
    pub n_superclasses: usize,
    pub params: ParamStore,
}

impl Model {
    pub fn new(
        cfg: &ModelConfig,
        tax: &Taxonomy,
        table: &EmbeddingTable,
        n_superclasses: usize,
        seed: u64,
    ) -> Result<Model> {
        cfg.validate()?;
        if table.dim != cfg.c {
            return Err(Error::Model(format!(
                "embedding dim {} must equal model width {}",
                table.dim, cfg.c
            )));
        }
        if n_superclasses == 0 {
            return Err(Error::Model("need at least one superclass".into()));
        }
        let mut m = Model {
            cfg: cfg.clone(),
            n_objects: tax.n_objects(),
            n_verbs: tax.n_verbs(),
            n_categories: tax.n_categories(),
            n_superclasses,
            params: ParamStore::default(),
        };
        let (c, f, ds) = (cfg.c, cfg.ffn_hidden, cfg.d_spatial);
        m.gauss(seed, "query.human", &[cfg.n_queries, c], 1.0);
        m.gauss(seed, "query.object", &[cfg.n_queries, c], 1.0);
        m.xavier(seed, "feat.proj.w", c, c);
        m.zeros("feat.proj.b", &[c]);
        for branch in ["inst", "act"] {
            for l in 0..cfg.layers {
                let p = format!("{}.l{}", branch, l);
                for block in ["self", "cross"] {
                    for w in ["wq", "wk", "wv", "wo"] {
                        m.xavier(seed, &format!("{}.{}.{}", p, block, w), c, c);
                    }
                    m.ones(&format!("{}.{}.norm.g", p, block), &[c]);
                    m.zeros(&format!("{}.{}.norm.b", p, block), &[c]);
                }
                m.xavier(seed, &format!("{}.ffn.w1", p), c, f);
                m.zeros(&format!("{}.ffn.b1", p), &[f]);
                m.xavier(seed, &format!("{}.ffn.w2", p), f, c);
                m.zeros(&format!("{}.ffn.b2", p), &[c]);
                m.ones(&format!("{}.ffn.norm.g", p), &[c]);
                m.zeros(&format!("{}.ffn.norm.b", p), &[c]);
            }
        }
        for head in ["head.hbox", "head.obox"] {
            m.xavier(seed, &format!("{}.w1", head), c, c);
            m.zeros(&format!("{}.b1", head), &[c]);
            m.xavier(seed, &format!("{}.w2", head), c, 4);
            m.zeros(&format!("{}.b2", head), &[4]);
        }
        m.xavier(seed, "head.obj.w", c, m.n_objects + 1);
        m.zeros("head.obj.b", &[m.n_objects + 1]);
        m.params
            .insert("head.verb.rows", table.verb_feats().clone());
        m.params
            .insert("head.verb.scale", Tensor::scalar(10f64.ln()));
        m.params.insert("head.hoi.rows", table.hoi_feats().clone());
        m.params
            .insert("head.hoi.scale", Tensor::scalar(10f64.ln()));
        m.xavier(seed, "head.super.w", c, n_superclasses);
        m.zeros("head.super.b", &[n_superclasses]);
        m.xavier(seed, "spatial.h.w", 4, ds);
        m.zeros("spatial.h.b", &[ds]);
        m.xavier(seed, "spatial.o.w", 4, ds);
        m.zeros("spatial.o.b", &[ds]);
        m.xavier(seed, "cal.win.w", cfg.triplet_width(), c);
        m.zeros("cal.win.b", &[c]);
        m.xavier(seed, "cal.wout.w", c, cfg.triplet_width());
        m.zeros("cal.wout.b", &[cfg.triplet_width()]);
        Ok(m)
    }

    fn gauss(&mut self, seed: u64, name: &str, shape: &[usize], sigma: f64) {
        let mut r = rng::substream(seed, &format!("{}.{}", rng::STREAM_INIT, name));
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| sigma * r.sample::<f64, _>(StandardNormal))
            .collect();
        self.params
            .insert(name, Tensor::new(shape, data).expect("sized here"));
    }

    fn xavier(&mut self, seed: u64, name: &str, fan_in: usize, fan_out: usize) {
        let sigma = (2.0 / (fan_in + fan_out) as f64).sqrt();
        self.gauss(seed, name, &[fan_in, fan_out], sigma);
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.params.insert(name, Tensor::zeros(shape));
    }

    fn ones(&mut self, name: &str, shape: &[usize]) {
        self.params.insert(name, Tensor::full(shape, 1.0));
    }

    /// Register every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.bind_with(tape, &[])
    }

    /// As [`bind`], but take given (already tracked) tensors in place of the
    /// stored ones. Lets gradient checks treat chosen parameters as inputs.
    pub fn bind_with(&self, tape: &mut Tape, overrides: &[(&str, &Tensor)]) -> Bound {
        let mut handles = HashMap::new();
        for (name, t) in self.params.iter() {
            match overrides.iter().find(|(n, _)| *n == name) {
                Some((_, o)) => handles.insert(name.to_string(), (*o).clone()),
                None => handles.insert(name.to_string(), tape.var(t)),
            };
        }
        Bound { handles }
    }

    /// Register every parameter as a constant: forward-only inference.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        let mut handles = HashMap::new();
        for (name, t) in self.params.iter() {
            handles.insert(name.to_string(), tape.constant(t));
        }
        Bound { handles }
    }

    fn mha(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        prefix: &str,
        x: &Tensor,
        mem: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<Tensor> {
        let q = tape.matmul(x, bound.get(&format!("{}.wq", prefix)))?;
        let k = tape.matmul(mem, bound.get(&format!("{}.wk", prefix)))?;
        let v = tape.matmul(mem, bound.get(&format!("{}.wv", prefix)))?;
        let dh = self.cfg.c / self.cfg.heads;
        let mut outs = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = gather_cols(tape, &q, h * dh, dh)?;
            let kh = gather_cols(tape, &k, h * dh, dh)?;
            let vh = gather_cols(tape, &v, h * dh, dh)?;
            outs.push(tape.attention(&qh, &kh, &vh, mask)?);
        }
        let refs: Vec<&Tensor> = outs.iter().collect();
        let cat = tape.concat(&refs, 1)?;
        tape.matmul(&cat, bound.get(&format!("{}.wo", prefix)))
    }

    fn decoder_layer(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        prefix: &str,
        x: &Tensor,
        mem: &Tensor,
        self_mask: Option<&Tensor>,
        cross_mask: Option<&Tensor>,
    ) -> Result<Tensor> {
        let p = |s: &str| format!("{}.{}", prefix, s);
        let sa = self.mha(tape, bound, &p("self"), x, x, self_mask)?;
        let x = tape.add(x, &sa)?;
        let x = tape.layer_norm(&x, bound.get(&p("self.norm.g")), bound.get(&p("self.norm.b")), LN_EPS)?;
        let ca = self.mha(tape, bound, &p("cross"), &x, mem, cross_mask)?;
        let x = tape.add(&x, &ca)?;
        let x = tape.layer_norm(&x, bound.get(&p("cross.norm.g")), bound.get(&p("cross.norm.b")), LN_EPS)?;
        let h = tape.linear(&x, bound.get(&p("ffn.w1")), bound.get(&p("ffn.b1")))?;
        let h = tape.relu(&h)?;
        let f = tape.linear(&h, bound.get(&p("ffn.w2")), bound.get(&p("ffn.b2")))?;
        let x = tape.add(&x, &f)?;
        tape.layer_norm(&x, bound.get(&p("ffn.norm.g")), bound.get(&p("ffn.norm.b")), LN_EPS)
    }

    fn box_head(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        prefix: &str,
        x: &Tensor,
    ) -> Result<Tensor> {
        let h = tape.linear(x, bound.get(&format!("{}.w1", prefix)), bound.get(&format!("{}.b1", prefix)))?;
        let h = tape.relu(&h)?;
        let y = tape.linear(&h, bound.get(&format!("{}.w2", prefix)), bound.get(&format!("{}.b2", prefix)))?;
        tape.sigmoid(&y)
    }

    fn cosine_logits(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        feats: &Tensor,
        rows_name: &str,
        scale_name: &str,
    ) -> Result<Tensor> {
        let qn = tape.normalize(feats, 1e-12)?;
        let rn = tape.normalize(bound.get(rows_name), 1e-12)?;
        let rt = tape.transpose(&rn)?;
        let cos = tape.matmul(&qn, &rt)?;
        let scale = tape.exp(bound.get(scale_name))?;
        tape.mul(&scale, &cos)
    }

    /// Learned feature of a box tensor (n×4). `human` picks which of the two
    /// coordinate maps applies.
    pub fn spatial_feats(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        boxes: &Tensor,
        human: bool,
    ) -> Result<Tensor> {
        let (w, b) = if human {
            ("spatial.h.w", "spatial.h.b")
        } else {
            ("spatial.o.w", "spatial.o.b")
        };
        tape.linear(boxes, bound.get(w), bound.get(b))
    }

    /// Instance branch over one scene grid: shared memory, per-branch
    /// queries, box/object heads, and the pooled pre-decoder interaction
    /// queries. Input to [`Model::interaction_pass`].
    pub fn instance_pass(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        grid: &Tensor,
    ) -> Result<InstancePass> {
        let cfg = &self.cfg;
        let (hw, c) = (cfg.grid_h * cfg.grid_w, cfg.c);
        if grid.numel() != hw * c {
            return Err(Error::Model(format!(
                "grid holds {} values, model expects {}x{}x{}",
                grid.numel(),
                cfg.grid_h,
                cfg.grid_w,
                c
            )));
        }
        let nq = cfg.n_queries;
        let flat = tape.constant(&grid.detached().reshaped(&[hw, c])?);
        let pe = tape.constant(
            &Tensor::new(&[hw, c], hor::positional_encoding(cfg.grid_h, cfg.grid_w, c))
                .expect("sized here"),
        );
        let proj = tape.linear(&flat, bound.get("feat.proj.w"), bound.get("feat.proj.b"))?;
        let mem = tape.add(&proj, &pe)?;

        // Instance branch: human and object queries share self-attention.
        let mut x = tape.concat(&[bound.get("query.human"), bound.get("query.object")], 0)?;
        for l in 0..cfg.layers {
            x = self.decoder_layer(tape, bound, &format!("inst.l{}", l), &x, &mem, None, None)?;
        }
        let rows_h: Vec<usize> = (0..nq).collect();
        let rows_o: Vec<usize> = (nq..2 * nq).collect();
        let qh = tape.gather_rows(&x, &rows_h)?;
        let qo = tape.gather_rows(&x, &rows_o)?;
        let human_boxes = self.box_head(tape, bound, "head.hbox", &qh)?;
        let object_boxes = self.box_head(tape, bound, "head.obox", &qo)?;
        let object_logits = tape.linear(&qo, bound.get("head.obj.w"), bound.get("head.obj.b"))?;

        // Interaction queries pool the matched pair.
        let qa = init_interaction_queries(tape, &qh, &qo)?;
        Ok(InstancePass {
            mem,
            human_boxes,
            object_boxes,
            object_logits,
            interaction_queries: qa,
        })
    }

    /// Interaction decoder over a finished instance pass. Split out so a
    /// caller can read the pre-decoder queries (e.g. to choose category
    /// tokens) before this pass consumes them.
    pub fn interaction_pass(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        inst: &InstancePass,
        opts: &ForwardOpts,
    ) -> Result<DetectorOutput> {
        let cfg = &self.cfg;
        let (hw, c) = (cfg.grid_h * cfg.grid_w, cfg.c);
        let nq = cfg.n_queries;
        let rows_h: Vec<usize> = (0..nq).collect();
        let mem = &inst.mem;
        let human_boxes = inst.human_boxes.clone();
        let object_boxes = inst.object_boxes.clone();
        let qa = inst.interaction_queries.clone();

        // Per-query cross-attention masks over grid cells (+ category
        // tokens, which are never masked).
        let n_add = opts.additional.as_ref().map_or(0, |a| a.boxes.len());
        let k2 = opts.category_feats.map_or(0, |t| t.shape()[0]);
        let n_tok = nq + n_add;
        let mut mask_data = vec![0.0; n_tok * (hw + k2)];
        if opts.hor_mask_on || opts.hor_masks_override.is_some() {
            for i in 0..nq {
                let m = match &opts.hor_masks_override {
                    Some(rows) => rows[i].clone(),
                    None => {
                        let hb: [f64; 4] = human_boxes.row_slice(i).try_into().unwrap();
                        let ob: [f64; 4] = object_boxes.row_slice(i).try_into().unwrap();
                        hor::hor_mask(&hb, &ob, cfg.grid_h, cfg.grid_w)
                    }
                };
                mask_data[i * (hw + k2)..i * (hw + k2) + hw].copy_from_slice(&m);
            }
            if let Some(add) = &opts.additional {
                for (j, (hb, ob)) in add.boxes.iter().enumerate() {
                    let m = hor::hor_mask(hb, ob, cfg.grid_h, cfg.grid_w);
                    let r = nq + j;
                    mask_data[r * (hw + k2)..r * (hw + k2) + hw].copy_from_slice(&m);
                }
            }
        }
        let cross_mask = tape.constant(&Tensor::new(&[n_tok, hw + k2], mask_data)?);

        // Originals never attend to additional queries; additionals may
        // attend anywhere.
        let self_mask = if n_add > 0 {
            let mut m = vec![0.0; n_tok * n_tok];
            for i in 0..nq {
                for j in nq..n_tok {
                    m[i * n_tok + j] = NEG_INF;
                }
            }
            Some(tape.constant(&Tensor::new(&[n_tok, n_tok], m)?))
        } else {
            None
        };

        let mem_act = match opts.category_feats {
            Some(cat) => {
                if cat.shape().len() != 2 || cat.shape()[1] != c {
                    return Err(Error::Model(format!(
                        "category features must be k2x{}, got {:?}",
                        c,
                        cat.shape()
                    )));
                }
                let cat = tape.constant(&cat.detached());
                tape.concat(&[mem, &cat], 0)?
            }
            None => mem.clone(),
        };

        let mut xa = match &opts.additional {
            Some(add) => {
                if add.feats.shape() != [n_add, cfg.triplet_width()] {
                    return Err(Error::Model(format!(
                        "additional queries must be {}x{}, got {:?}",
                        n_add,
                        cfg.triplet_width(),
                        add.feats.shape()
                    )));
                }
                let projected =
                    tape.linear(&add.feats, bound.get("cal.win.w"), bound.get("cal.win.b"))?;
                tape.concat(&[&qa, &projected], 0)?
            }
            None => qa.clone(),
        };
        for l in 0..cfg.layers {
            xa = self.decoder_layer(
                tape,
                bound,
                &format!("act.l{}", l),
                &xa,
                &mem_act,
                self_mask.as_ref(),
                Some(&cross_mask),
            )?;
        }
        let qa_upd = tape.gather_rows(&xa, &rows_h)?;
        let corrected = if n_add > 0 {
            let rows_add: Vec<usize> = (nq..n_tok).collect();
            let add_upd = tape.gather_rows(&xa, &rows_add)?;
            Some(tape.linear(&add_upd, bound.get("cal.wout.w"), bound.get("cal.wout.b"))?)
        } else {
            None
        };

        let verb_logits =
            self.cosine_logits(tape, bound, &qa_upd, "head.verb.rows", "head.verb.scale")?;
        let hoi_logits =
            self.cosine_logits(tape, bound, &qa_upd, "head.hoi.rows", "head.hoi.scale")?;
        let superclass_logits =
            tape.linear(&qa_upd, bound.get("head.super.w"), bound.get("head.super.b"))?;

        Ok(DetectorOutput {
            human_boxes,
            object_boxes,
            object_logits: inst.object_logits.clone(),
            verb_logits,
            hoi_logits,
            superclass_logits,
            interaction_queries: qa,
            updated_interaction_feats: qa_upd,
            corrected_additional_feats: corrected,
        })
    }

    /// Full forward pass over one scene grid.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        grid: &Tensor,
        opts: &ForwardOpts,
    ) -> Result<DetectorOutput> {
        let inst = self.instance_pass(tape, bound, grid)?;
        self.interaction_pass(tape, bound, &inst, opts)
    }
}

/// Pooled interaction query: elementwise mean of the updated pair.
pub fn init_interaction_queries(tape: &mut Tape, qh: &Tensor, qo: &Tensor) -> Result<Tensor> {
    let s = tape.add(qh, qo)?;
    tape.scale(&s, 0.5)
}

fn gather_cols(tape: &mut Tape, t: &Tensor, start: usize, width: usize) -> Result<Tensor> {
    let (n, c) = (t.shape()[0], t.shape()[1]);
    let mut idx = Vec::with_capacity(n * width);
    for r in 0..n {
        for j in 0..width {
            idx.push(r * c + start + j);
        }
    }
    let flat = tape.gather(t, &idx)?;
    tape.reshape(&flat, &[n, width])
}
