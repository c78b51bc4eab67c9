//! Label-to-feature provider. Classifier heads, category tokens and scene
//! features all draw label vectors from one [`EmbeddingTable`].
//!
//! The default backend is a deterministic pseudo-embedding: each prompt
//! string seeds a Gaussian draw which is then L2-normalized. Interaction
//! vectors are composed from their verb and object vectors plus a prompt
//! hash term, so categories sharing a verb or an object are measurably
//! closer to each other than unrelated ones. A file backend with the same
//! table layout lets real text-encoder outputs drop in unchanged.

use std::io::{Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::taxonomy::Taxonomy;
use crate::tensor::Tensor;
use crate::{Error, Result};

const FILE_MAGIC: &[u8; 8] = b"HOIEMB01";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptKind {
    Object,
    Verb,
    Hoi,
}

/// Render the fixed prompt template for a label (or verb+object pair).
/// Substitution is verbatim; no inflection is applied.
pub fn build_prompt(kind: PromptKind, labels: &[&str]) -> Result<String> {
    match (kind, labels) {
        (PromptKind::Object, [object]) => Ok(format!("A photo of a/an {}.", object)),
        (PromptKind::Verb, [verb]) => Ok(format!("A photo of a person {} something.", verb)),
        (PromptKind::Hoi, [verb, object]) => {
            Ok(format!("A photo of a person {} a/an {}.", verb, object))
        }
        _ => Err(Error::Embedding(format!(
            "{:?} prompt expects {} label(s), got {}",
            kind,
            if kind == PromptKind::Hoi { 2 } else { 1 },
            labels.len()
        ))),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EmbedConfig {
    pub dim: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            dim: 64,
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.5,
            seed: 0,
        }
    }
}

/// Deterministic unit vector for an arbitrary prompt string.
pub fn pseudo_prompt_vector(prompt: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::substream_n(seed, "embed", &[rng::fnv1a(prompt.as_bytes())]);
    let mut v: Vec<f64> = (0..dim).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    normalize_in_place(&mut v);
    v
}

fn normalize_in_place(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    // Leave already-unit rows untouched so save/load is bit-exact.
    if norm > 1e-12 && (norm - 1.0).abs() > 1e-9 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

/// Label features for one taxonomy: one row per object, verb and
/// interaction category. All rows are unit-length.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub source: String,
    object_feats: Tensor,
    verb_feats: Tensor,
    hoi_feats: Tensor,
    objects: Vec<String>,
    verbs: Vec<String>,
    pairs: Vec<(usize, usize)>,
}

impl EmbeddingTable {
    /// Build the pseudo-embedding table for `tax`.
    pub fn pseudo(tax: &Taxonomy, cfg: &EmbedConfig) -> Result<EmbeddingTable> {
        if cfg.dim == 0 {
            return Err(Error::Embedding("dim must be positive".into()));
        }
        if cfg.alpha == 0.0 && cfg.beta == 0.0 && cfg.gamma == 0.0 {
            return Err(Error::Embedding(
                "alpha, beta, gamma cannot all be zero".into(),
            ));
        }
        let object_rows: Vec<Vec<f64>> = tax
            .objects
            .iter()
            .map(|o| {
                Ok(pseudo_prompt_vector(
                    &build_prompt(PromptKind::Object, &[o])?,
                    cfg.dim,
                    cfg.seed,
                ))
            })
            .collect::<Result<_>>()?;
        let verb_rows: Vec<Vec<f64>> = tax
            .verbs
            .iter()
            .map(|v| {
                Ok(pseudo_prompt_vector(
                    &build_prompt(PromptKind::Verb, &[v])?,
                    cfg.dim,
                    cfg.seed,
                ))
            })
            .collect::<Result<_>>()?;
        let mut hoi_rows: Vec<Vec<f64>> = Vec::with_capacity(tax.hoi_pairs.len());
        for &(v, o) in &tax.hoi_pairs {
            let prompt = build_prompt(PromptKind::Hoi, &[&tax.verbs[v], &tax.objects[o]])?;
            let hash_term = pseudo_prompt_vector(&prompt, cfg.dim, cfg.seed);
            let mut row = vec![0.0; cfg.dim];
            for d in 0..cfg.dim {
                row[d] = cfg.alpha * verb_rows[v][d]
                    + cfg.beta * object_rows[o][d]
                    + cfg.gamma * hash_term[d];
            }
            normalize_in_place(&mut row);
            hoi_rows.push(row);
        }
        Ok(EmbeddingTable {
            dim: cfg.dim,
            source: "pseudo".into(),
            object_feats: rows_to_tensor(&object_rows, cfg.dim),
            verb_feats: rows_to_tensor(&verb_rows, cfg.dim),
            hoi_feats: rows_to_tensor(&hoi_rows, cfg.dim),
            objects: tax.objects.clone(),
            verbs: tax.verbs.clone(),
            pairs: tax.hoi_pairs.clone(),
        })
    }

    /// Load a table from the flat binary format, checking row counts against
    /// the taxonomy and re-normalizing rows.
    pub fn from_file(tax: &Taxonomy, path: &Path) -> Result<EmbeddingTable> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        if &magic != FILE_MAGIC {
            return Err(Error::Embedding(format!(
                "{}: not an embedding file",
                path.display()
            )));
        }
        let mut u32buf = [0u8; 4];
        let mut read_u32 = |f: &mut std::fs::File| -> Result<usize> {
            f.read_exact(&mut u32buf)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            Ok(u32::from_le_bytes(u32buf) as usize)
        };
        let dim = read_u32(&mut f)?;
        let n_obj = read_u32(&mut f)?;
        let n_verb = read_u32(&mut f)?;
        let n_hoi = read_u32(&mut f)?;
        if n_obj != tax.n_objects() || n_verb != tax.n_verbs() || n_hoi != tax.n_categories() {
            return Err(Error::Embedding(format!(
                "{}: table holds {}/{}/{} rows, taxonomy needs {}/{}/{}",
                path.display(),
                n_obj,
                n_verb,
                n_hoi,
                tax.n_objects(),
                tax.n_verbs(),
                tax.n_categories()
            )));
        }
        let total = (n_obj + n_verb + n_hoi) * dim;
        let mut bytes = vec![0u8; total * 8];
        f.read_exact(&mut bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut values = Vec::with_capacity(total);
        for chunk in bytes.chunks_exact(8) {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::Embedding(format!(
                    "{}: non-finite embedding value",
                    path.display()
                )));
            }
            values.push(v);
        }
        let take_rows = |n: usize, off: &mut usize| -> Tensor {
            let mut data = values[*off..*off + n * dim].to_vec();
            for r in 0..n {
                normalize_in_place(&mut data[r * dim..(r + 1) * dim]);
            }
            *off += n * dim;
            Tensor::new(&[n, dim], data).expect("sized above")
        };
        let mut off = 0;
        let object_feats = take_rows(n_obj, &mut off);
        let verb_feats = take_rows(n_verb, &mut off);
        let hoi_feats = take_rows(n_hoi, &mut off);
        Ok(EmbeddingTable {
            dim,
            source: path.display().to_string(),
            object_feats,
            verb_feats,
            hoi_feats,
            objects: tax.objects.clone(),
            verbs: tax.verbs.clone(),
            pairs: tax.hoi_pairs.clone(),
        })
    }

    /// Write the table in the flat binary format read by [`from_file`].
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f =
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(FILE_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.objects.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.verbs.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.pairs.len() as u32).to_le_bytes());
        for t in [&self.object_feats, &self.verb_feats, &self.hoi_feats] {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        f.write_all(&out)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn object_feats(&self) -> &Tensor {
        &self.object_feats
    }

    pub fn verb_feats(&self) -> &Tensor {
        &self.verb_feats
    }

    pub fn hoi_feats(&self) -> &Tensor {
        &self.hoi_feats
    }

    pub fn object_row(&self, i: usize) -> &[f64] {
        self.object_feats.row_slice(i)
    }

    pub fn verb_row(&self, i: usize) -> &[f64] {
        self.verb_feats.row_slice(i)
    }

    pub fn hoi_row(&self, category: usize) -> &[f64] {
        self.hoi_feats.row_slice(category)
    }

    /// Feature vector by label name(s): one label for object/verb, [verb,
    /// object] for an interaction.
    pub fn embed(&self, kind: PromptKind, labels: &[&str]) -> Result<Vec<f64>> {
        match (kind, labels) {
            (PromptKind::Object, [l]) => {
                let i = self
                    .objects
                    .iter()
                    .position(|o| o == l)
                    .ok_or_else(|| Error::Embedding(format!("unknown object {:?}", l)))?;
                Ok(self.object_row(i).to_vec())
            }
            (PromptKind::Verb, [l]) => {
                let i = self
                    .verbs
                    .iter()
                    .position(|v| v == l)
                    .ok_or_else(|| Error::Embedding(format!("unknown verb {:?}", l)))?;
                Ok(self.verb_row(i).to_vec())
            }
            (PromptKind::Hoi, [verb, object]) => {
                let v = self
                    .verbs
                    .iter()
                    .position(|x| x == verb)
                    .ok_or_else(|| Error::Embedding(format!("unknown verb {:?}", verb)))?;
                let o = self
                    .objects
                    .iter()
                    .position(|x| x == object)
                    .ok_or_else(|| Error::Embedding(format!("unknown object {:?}", object)))?;
                let c = self
                    .pairs
                    .iter()
                    .position(|&p| p == (v, o))
                    .ok_or_else(|| {
                        Error::Embedding(format!("({:?}, {:?}) is not a category", verb, object))
                    })?;
                Ok(self.hoi_row(c).to_vec())
            }
            _ => Err(Error::Embedding(format!(
                "{:?} lookup expects {} label(s), got {}",
                kind,
                if kind == PromptKind::Hoi { 2 } else { 1 },
                labels.len()
            ))),
        }
    }
}

fn rows_to_tensor(rows: &[Vec<f64>], dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows.len() * dim);
    for r in rows {
        data.extend_from_slice(r);
    }
    Tensor::new(&[rows.len(), dim], data).expect("row widths are uniform")
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_templates_are_exact() {
        assert_eq!(
            build_prompt(PromptKind::Object, &["bench"]).unwrap(),
            "A photo of a/an bench."
        );
        assert_eq!(
            build_prompt(PromptKind::Verb, &["sit"]).unwrap(),
            "A photo of a person sit something."
        );
        assert_eq!(
            build_prompt(PromptKind::Hoi, &["riding", "train"]).unwrap(),
            "A photo of a person riding a/an train."
        );
        assert!(build_prompt(PromptKind::Hoi, &["ride"]).is_err());
    }

    #[test]
    fn pseudo_vectors_are_deterministic_and_unit() {
        let a = pseudo_prompt_vector("A photo of a/an bench.", 64, 7);
        let b = pseudo_prompt_vector("A photo of a/an bench.", 64, 7);
        let c = pseudo_prompt_vector("A photo of a/an bench.", 64, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn table_rows_are_unit_norm() {
        let tax = Taxonomy::default_desk();
        let table = EmbeddingTable::pseudo(&tax, &EmbedConfig::default()).unwrap();
        for t in [table.object_feats(), table.verb_feats(), table.hoi_feats()] {
            let cols = t.shape()[1];
            for r in 0..t.shape()[0] {
                let row = &t.data()[r * cols..(r + 1) * cols];
                let norm: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn shared_component_raises_cosine_without_hash_term() {
        // alpha=beta=1, gamma=0: same-verb pairs must beat fully disjoint
        // pairs on every sampled comparison.
        let tax = Taxonomy::default_desk();
        let cfg = EmbedConfig {
            gamma: 0.0,
            ..EmbedConfig::default()
        };
        let table = EmbeddingTable::pseudo(&tax, &cfg).unwrap();
        let mut checked = 0;
        for (c1, &(v1, o1)) in tax.hoi_pairs.iter().enumerate() {
            for (c2, &(v2, o2)) in tax.hoi_pairs.iter().enumerate().skip(c1 + 1) {
                if v1 != v2 || o1 == o2 {
                    continue;
                }
                // (v1,o1) vs (v1,o2) shares the verb; find a fully disjoint c3.
                for (c3, &(v3, o3)) in tax.hoi_pairs.iter().enumerate() {
                    if v3 != v1 && o3 != o1 {
                        let shared = cosine(table.hoi_row(c1), table.hoi_row(c2));
                        let disjoint = cosine(table.hoi_row(c1), table.hoi_row(c3));
                        assert!(
                            shared > disjoint,
                            "shared {} vs disjoint {}",
                            shared,
                            disjoint
                        );
                        checked += 1;
                        break;
                    }
                }
                break;
            }
        }
        assert!(checked >= 10);
    }

    #[test]
    fn sibling_categories_are_closer_on_average() {
        // Default gamma: mean cosine over verb-or-object-sharing pairs must
        // exceed the mean over disjoint pairs by a clear margin.
        let tax = Taxonomy::default_desk();
        let table = EmbeddingTable::pseudo(&tax, &EmbedConfig::default()).unwrap();
        let (mut s_sum, mut s_n, mut d_sum, mut d_n) = (0.0, 0usize, 0.0, 0usize);
        for (c1, &(v1, o1)) in tax.hoi_pairs.iter().enumerate() {
            for (c2, &(v2, o2)) in tax.hoi_pairs.iter().enumerate().skip(c1 + 1) {
                let cos = cosine(table.hoi_row(c1), table.hoi_row(c2));
                if (v1 == v2) ^ (o1 == o2) {
                    s_sum += cos;
                    s_n += 1;
                } else if v1 != v2 && o1 != o2 {
                    d_sum += cos;
                    d_n += 1;
                }
            }
        }
        let (s_mean, d_mean) = (s_sum / s_n as f64, d_sum / d_n as f64);
        assert!(
            s_mean > d_mean + 0.1,
            "sibling {} vs disjoint {}",
            s_mean,
            d_mean
        );
    }

    #[test]
    fn file_roundtrip_preserves_rows() {
        let tax = Taxonomy::default_desk();
        let table = EmbeddingTable::pseudo(&tax, &EmbedConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        table.save(&path).unwrap();
        let loaded = EmbeddingTable::from_file(&tax, &path).unwrap();
        assert_eq!(table.hoi_feats().data(), loaded.hoi_feats().data());
        assert_eq!(loaded.source, path.display().to_string());
    }

    #[test]
    fn file_with_wrong_counts_is_rejected() {
        let tax = Taxonomy::default_desk();
        let table = EmbeddingTable::pseudo(&tax, &EmbedConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        table.save(&path).unwrap();
        let mut small = Taxonomy::default_desk();
        small.objects.push("zebra".into());
        assert!(EmbeddingTable::from_file(&small, &path).is_err());
    }

    #[test]
    fn unknown_label_lookup_errors() {
        let tax = Taxonomy::default_desk();
        let table = EmbeddingTable::pseudo(&tax, &EmbedConfig::default()).unwrap();
        assert!(table.embed(PromptKind::Object, &["bench"]).is_ok());
        assert!(table.embed(PromptKind::Object, &["zebra"]).is_err());
        assert!(table.embed(PromptKind::Hoi, &["ride", "bench"]).is_err());
    }
}
