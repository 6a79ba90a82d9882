//! Embedding extraction, Euclidean ranking and mean average precision for
//! every (source modality, target modality) pair.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{modality_index, Dataset, Instance};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow<T> {
    pub instance_id: usize,
    pub modality: usize,
    pub label: usize,
    pub vector: Vec<T>,
}

/// One embedding per (instance, modality), stored modality by modality.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable<T> {
    modalities: Vec<String>,
    dim: usize,
    normalized: bool,
    rows: Vec<EmbeddingRow<T>>,
}

impl<T: Scalar> EmbeddingTable<T> {
    /// Validates row uniqueness, widths and (if `normalized`) unit norms.
    pub fn new(modalities: Vec<String>, dim: usize, normalized: bool, rows: Vec<EmbeddingRow<T>>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for r in &rows {
            if r.modality >= modalities.len() {
                return Err(Error::contract(format!(
                    "row references unknown modality {}",
                    r.modality
                )));
            }
            if r.vector.len() != dim {
                return Err(Error::Shape {
                    op: "embedding_table",
                    left: vec![dim],
                    right: vec![r.vector.len()],
                });
            }
            if !seen.insert((r.instance_id, r.modality)) {
                return Err(Error::contract(format!(
                    "duplicate embedding for instance {} modality {}",
                    r.instance_id, r.modality
                )));
            }
            if normalized && (norm(&r.vector) - 1.0).abs() > 1e-6 {
                return Err(Error::contract(format!(
                    "embedding for instance {} modality {} is not unit length",
                    r.instance_id, r.modality
                )));
            }
        }
        Ok(EmbeddingTable {
            modalities,
            dim,
            normalized,
            rows,
        })
    }

    pub fn modalities(&self) -> &[String] {
        &self.modalities
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn rows(&self) -> &[EmbeddingRow<T>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn modality_rows(&self, m: usize) -> Vec<&EmbeddingRow<T>> {
        self.rows.iter().filter(|r| r.modality == m).collect()
    }

    pub fn modality_index(&self, name: &str) -> Result<usize> {
        self.modalities
            .iter()
            .position(|m| m == name)
            .ok_or_else(|| Error::UnknownModality {
                name: name.to_string(),
                valid: self.modalities.clone(),
            })
    }

    /// Same table with every vector multiplied by `factor`.
    pub fn scaled(&self, factor: T) -> Self {
        EmbeddingTable {
            modalities: self.modalities.clone(),
            dim: self.dim,
            normalized: false,
            rows: self
                .rows
                .iter()
                .map(|r| EmbeddingRow {
                    vector: r.vector.iter().map(|&v| v * factor).collect(),
                    ..r.clone()
                })
                .collect(),
        }
    }

    /// CSV with header `instance_id,modality,label,e0..e{k-1}`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("instance_id,modality,label");
        for i in 0..self.dim {
            out.push_str(&format!(",e{i}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{}",
                r.instance_id, self.modalities[r.modality], r.label
            ));
            for v in &r.vector {
                out.push(',');
                out.push_str(&v.to_decimal());
            }
            out.push('\n');
        }
        out
    }
}

fn norm<T: Scalar>(v: &[T]) -> f64 {
    v.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt()
}

/// Embeds every (instance, modality) of a dataset, optionally scaling each
/// vector to unit L2 norm.
pub fn embed_dataset<T: Scalar>(dataset: &Dataset<T>, model: &Model<T>, normalize: bool) -> Result<EmbeddingTable<T>> {
    if dataset.modalities() != model.specs().as_slice() {
        return Err(Error::contract(
            "dataset modalities do not match the model's encoders".to_string(),
        ));
    }
    let instances: Vec<&Instance<T>> = dataset.instances().iter().collect();
    let mut rows = Vec::with_capacity(instances.len() * dataset.num_modalities());
    if !instances.is_empty() {
        for m in 0..dataset.num_modalities() {
            let emb = model.embed_batch(m, &instances)?;
            for (i, inst) in instances.iter().enumerate() {
                let mut vector = emb.row(i).to_vec();
                if normalize {
                    let n = norm(&vector);
                    if n == 0.0 {
                        return Err(Error::ZeroVector {
                            instance: inst.id,
                            modality: m,
                        });
                    }
                    vector.iter_mut().for_each(|v| *v = T::from_f64_lossy(v.as_f64() / n));
                }
                rows.push(EmbeddingRow {
                    instance_id: inst.id,
                    modality: m,
                    label: inst.label,
                    vector,
                });
            }
        }
    }
    EmbeddingTable::new(
        dataset.modalities().iter().map(|m| m.name.clone()).collect(),
        model.dims.embed_dim,
        normalize,
        rows,
    )
}

fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2)).sum()
}

/// Gallery positions sorted by ascending Euclidean distance to `query`,
/// ties broken by lower position.
pub fn rank_gallery<T: Scalar, G: AsRef<[T]>>(query: &[T], gallery: &[G]) -> Result<Vec<usize>> {
    if gallery.is_empty() {
        return Err(Error::contract("cannot rank an empty gallery"));
    }
    let mut dist = Vec::with_capacity(gallery.len());
    for g in gallery {
        let g = g.as_ref();
        if g.len() != query.len() {
            return Err(Error::Shape {
                op: "rank_gallery",
                left: vec![query.len()],
                right: vec![g.len()],
            });
        }
        dist.push(squared_distance(query, g));
    }
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    Ok(order)
}

/// Average precision over the top `r` of a ranked label list. Returns 0
/// when none of the top `r` share the query label.
pub fn average_precision(ranked_labels: &[usize], query_label: usize, r: usize) -> Result<f64> {
    if r == 0 || r > ranked_labels.len() {
        return Err(Error::contract(format!(
            "R = {r} must lie in 1..={}",
            ranked_labels.len()
        )));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &label) in ranked_labels[..r].iter().enumerate() {
        if label == query_label {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(if hits == 0 { 0.0 } else { sum / hits as f64 })
}

/// Query or gallery entry: instance id, label and embedding.
#[derive(Clone, Copy, Debug)]
pub struct Item<'a, T> {
    pub instance_id: usize,
    pub label: usize,
    pub vector: &'a [T],
}

impl<'a, T> From<&'a EmbeddingRow<T>> for Item<'a, T> {
    fn from(r: &'a EmbeddingRow<T>) -> Self {
        Item {
            instance_id: r.instance_id,
            label: r.label,
            vector: &r.vector,
        }
    }
}

/// Per-query AP. With `exclude_self`, each query's own instance is removed
/// from its gallery. `r = None` uses the whole (remaining) gallery.
pub fn query_average_precisions<T: Scalar>(
    queries: &[Item<'_, T>],
    gallery: &[Item<'_, T>],
    r: Option<usize>,
    exclude_self: bool,
) -> Result<Vec<f64>> {
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::contract("mAP needs non-empty query and gallery sets"));
    }
    queries
        .par_iter()
        .map(|q| {
            let candidates: Vec<&Item<'_, T>> = gallery
                .iter()
                .filter(|g| !(exclude_self && g.instance_id == q.instance_id))
                .collect();
            let vectors: Vec<&[T]> = candidates.iter().map(|g| g.vector).collect();
            let order = rank_gallery(q.vector, &vectors)?;
            let labels: Vec<usize> = order.iter().map(|&i| candidates[i].label).collect();
            average_precision(&labels, q.label, r.unwrap_or(labels.len()))
        })
        .collect()
}

/// Arithmetic mean of per-query AP.
pub fn mean_average_precision<T: Scalar>(
    queries: &[Item<'_, T>],
    gallery: &[Item<'_, T>],
    r: Option<usize>,
    exclude_self: bool,
) -> Result<f64> {
    let aps = query_average_precisions(queries, gallery, r, exclude_self)?;
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueryAp {
    pub source: usize,
    pub target: usize,
    pub instance_id: usize,
    pub label: usize,
    pub ap: f64,
}

/// mAP for every ordered (source, target) modality pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetrievalReport {
    pub modalities: Vec<String>,
    /// `map[source][target]`.
    pub map: Vec<Vec<f64>>,
    /// `None` means the whole gallery was ranked.
    pub r: Option<usize>,
    pub gallery_sizes: Vec<Vec<usize>>,
    pub normalized: bool,
    #[serde(skip)]
    pub per_query: Vec<QueryAp>,
}

impl RetrievalReport {
    /// Mean over the off-diagonal (cross-modal) entries.
    pub fn mean_cross_modal(&self) -> f64 {
        let m = self.map.len();
        let entries: Vec<f64> = (0..m)
            .flat_map(|s| (0..m).filter(move |&t| t != s).map(move |t| (s, t)))
            .map(|(s, t)| self.map[s][t])
            .collect();
        if entries.is_empty() {
            f64::NAN
        } else {
            entries.iter().sum::<f64>() / entries.len() as f64
        }
    }

    pub fn min_cross_modal(&self) -> f64 {
        let m = self.map.len();
        (0..m)
            .flat_map(|s| (0..m).filter(move |&t| t != s).map(move |t| (s, t)))
            .map(|(s, t)| self.map[s][t])
            .fold(f64::INFINITY, f64::min)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `source,target,map` rows.
    pub fn matrix_csv(&self) -> String {
        let mut out = String::from("source,target,map\n");
        for (s, row) in self.map.iter().enumerate() {
            for (t, v) in row.iter().enumerate() {
                out.push_str(&format!("{},{},{}\n", self.modalities[s], self.modalities[t], v));
            }
        }
        out
    }

    /// `source,target,instance_id,label,ap` rows.
    pub fn per_query_csv(&self) -> String {
        let mut out = String::from("source,target,instance_id,label,ap\n");
        for q in &self.per_query {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                self.modalities[q.source], self.modalities[q.target], q.instance_id, q.label, q.ap
            ));
        }
        out
    }

    /// Human-readable source x target table.
    pub fn table(&self) -> String {
        let width = self.modalities.iter().map(String::len).max().unwrap_or(0).max(6);
        let mut out = format!("{:width$}", "src\\tgt");
        for m in &self.modalities {
            out.push_str(&format!("  {m:>width$}"));
        }
        out.push('\n');
        for (s, row) in self.map.iter().enumerate() {
            out.push_str(&format!("{:width$}", self.modalities[s]));
            for v in row {
                out.push_str(&format!("  {:>width$.4}", v));
            }
            out.push('\n');
        }
        out
    }

    /// Writes `report.json`, `map_matrix.csv` and `per_query_ap.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("report.json", self.to_json()),
            ("map_matrix.csv", self.matrix_csv()),
            ("per_query_ap.csv", self.per_query_csv()),
        ] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Every source-modality row queries every target modality's gallery.
/// With `exclude_self`, in-domain pairs drop the query's own row from the gallery.
pub fn retrieval_matrix<T: Scalar>(
    table: &EmbeddingTable<T>,
    r: Option<usize>,
    exclude_self: bool,
) -> Result<RetrievalReport> {
    let m = table.modalities.len();
    let by_modality: Vec<Vec<Item<'_, T>>> = (0..m)
        .map(|k| table.modality_rows(k).into_iter().map(Item::from).collect())
        .collect();
    if let Some(k) = by_modality.iter().position(Vec::is_empty) {
        return Err(Error::contract(format!(
            "embedding table has no rows for modality `{}`",
            table.modalities[k]
        )));
    }
    let mut map = vec![vec![0.0; m]; m];
    let mut gallery_sizes = vec![vec![0; m]; m];
    let mut per_query = Vec::new();
    for s in 0..m {
        for t in 0..m {
            let in_domain = exclude_self && s == t;
            let aps = query_average_precisions(&by_modality[s], &by_modality[t], r, in_domain)?;
            map[s][t] = aps.iter().sum::<f64>() / aps.len() as f64;
            gallery_sizes[s][t] = by_modality[t].len() - usize::from(in_domain);
            per_query.extend(by_modality[s].iter().zip(&aps).map(|(q, &ap)| QueryAp {
                source: s,
                target: t,
                instance_id: q.instance_id,
                label: q.label,
                ap,
            }));
        }
    }
    Ok(RetrievalReport {
        modalities: table.modalities.clone(),
        map,
        r,
        gallery_sizes,
        normalized: table.normalized,
        per_query,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Hit {
    pub instance_id: usize,
    pub label: usize,
    pub distance: f64,
    pub relevant: bool,
}

/// Top `top_n` target-modality rows for one query instance.
pub fn retrieve<T: Scalar>(
    table: &EmbeddingTable<T>,
    query_instance: usize,
    source: &str,
    target: &str,
    top_n: usize,
    exclude_self: bool,
) -> Result<Vec<Hit>> {
    let s = table.modality_index(source)?;
    let t = table.modality_index(target)?;
    let query = table
        .rows
        .iter()
        .find(|r| r.modality == s && r.instance_id == query_instance)
        .ok_or_else(|| Error::contract(format!("no instance with id {query_instance}")))?;
    let gallery: Vec<&EmbeddingRow<T>> = table
        .modality_rows(t)
        .into_iter()
        .filter(|g| !(exclude_self && s == t && g.instance_id == query_instance))
        .collect();
    let vectors: Vec<&[T]> = gallery.iter().map(|g| g.vector.as_slice()).collect();
    let order = rank_gallery(&query.vector, &vectors)?;
    Ok(order
        .into_iter()
        .take(top_n)
        .map(|i| Hit {
            instance_id: gallery[i].instance_id,
            label: gallery[i].label,
            distance: squared_distance(&query.vector, &gallery[i].vector).sqrt(),
            relevant: gallery[i].label == query.label,
        })
        .collect())
}

/// Resolves a modality name against a dataset's modality list.
pub fn resolve_modality<T: Scalar>(dataset: &Dataset<T>, name: &str) -> Result<usize> {
    modality_index(dataset.modalities(), name)
}
