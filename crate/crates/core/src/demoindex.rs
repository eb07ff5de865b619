//! Demonstration retrieval.
//!
//! Training sentences are indexed by an externally computed sentence
//! embedding. [`HnswIndex`] is a hierarchical navigable small-world graph
//! over cosine distance; [`brute_force_knn`] is the exact scan it is tested
//! against; [`random_select`] is the seeded random baseline.
//!
//! Rankings are always by descending cosine similarity, computed in `f64`
//! from the stored embeddings, with ties broken by ascending sentence id.
//! The graph itself is traversed with `f32` unit vectors.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instructgen::InstructRecord;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("non-finite value in embedding")]
    NonFinite,
    #[error("duplicate sentence id `{0}`")]
    DuplicateId(String),
    #[error("invalid HNSW parameters: {0}")]
    InvalidParams(String),
    #[error("entry `{0}` has a zero embedding")]
    ZeroEntry(String),
    #[error("{path}:{line}: {message}")]
    Format { path: PathBuf, line: usize, message: String },
    #[error("embeddings do not match the corpus: missing {missing:?}, extra {extra:?}")]
    IdMismatch { missing: Vec<String>, extra: Vec<String> },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, IndexError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(IndexError::NonFinite);
        }
        Ok(EmbeddingVector { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    fn norm(&self) -> f64 {
        self.values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    fn unit(&self) -> Option<Vec<f32>> {
        let n = self.norm();
        (n > 0.0).then(|| self.values.iter().map(|&v| (v as f64 / n) as f32).collect())
    }
}

/// `dot(a, b) / (|a| |b|)`, in `f64`.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, IndexError> {
    if a.dim() != b.dim() {
        return Err(IndexError::DimMismatch { expected: a.dim(), found: b.dim() });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(IndexError::ZeroVector);
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(&x, &y)| x as f64 * y as f64).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoEntry {
    pub sentence_id: String,
    pub embedding: EmbeddingVector,
    pub record: InstructRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HnswParams {
    /// Neighbors kept per node on upper layers; layer 0 keeps `2 * m`.
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    /// Level multiplier: a node reaches level `floor(-ln(u) * level_lambda)`.
    pub level_lambda: f64,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        HnswParams { m: 16, ef_construction: 200, ef_search: 64, level_lambda: 1.0 / (16f64).ln(), seed: 0 }
    }
}

impl HnswParams {
    pub fn with_m(m: usize) -> Self {
        HnswParams { m, level_lambda: 1.0 / (m as f64).ln(), ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), IndexError> {
        if self.m < 2 {
            return Err(IndexError::InvalidParams(format!("m must be at least 2, got {}", self.m)));
        }
        if self.ef_construction < self.m {
            return Err(IndexError::InvalidParams(format!(
                "ef_construction ({}) must be at least m ({})",
                self.ef_construction, self.m
            )));
        }
        if self.ef_search < 1 {
            return Err(IndexError::InvalidParams("ef_search must be at least 1".into()));
        }
        if !(self.level_lambda.is_finite() && self.level_lambda > 0.0) {
            return Err(IndexError::InvalidParams(format!("level_lambda must be positive, got {}", self.level_lambda)));
        }
        Ok(())
    }

    fn max_degree(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.m
        } else {
            self.m
        }
    }
}

/// A retrieved entry with its cosine similarity to the query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor<'a> {
    pub entry: &'a DemoEntry,
    pub similarity: f64,
}

/// Sort by descending similarity, then ascending id, and keep `k`.
fn rank<'a>(mut hits: Vec<Neighbor<'a>>, k: usize) -> Vec<Neighbor<'a>> {
    hits.sort_by(|a, b| {
        b.similarity.total_cmp(&a.similarity).then_with(|| a.entry.sentence_id.cmp(&b.entry.sentence_id))
    });
    hits.truncate(k);
    hits
}

/// Exact top-`k` by scanning every entry.
pub fn brute_force_knn<'a>(
    entries: &'a [DemoEntry],
    query: &EmbeddingVector,
    k: usize,
    exclude: Option<&str>,
) -> Result<Vec<Neighbor<'a>>, IndexError> {
    let mut hits = Vec::with_capacity(entries.len());
    for entry in entries {
        if Some(entry.sentence_id.as_str()) == exclude {
            continue;
        }
        hits.push(Neighbor { entry, similarity: cosine_similarity(query, &entry.embedding)? });
    }
    Ok(rank(hits, k))
}

/// Uniform sample of `k` entries without replacement, skipping `exclude`.
/// Asking for at least as many entries as exist returns a permutation of all.
pub fn random_select<'a>(entries: &'a [DemoEntry], k: usize, seed: u64, exclude: Option<&str>) -> Vec<&'a DemoEntry> {
    let mut pool: Vec<&DemoEntry> = entries.iter().filter(|e| Some(e.sentence_id.as_str()) != exclude).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = k.min(pool.len());
    let (chosen, _) = pool.partial_shuffle(&mut rng, k);
    chosen.to_vec()
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cand {
    dist: f32,
    id: u32,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist.total_cmp(&other.dist).then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Node {
    /// `links[layer]` holds the neighbor ids on that layer.
    links: Vec<Vec<u32>>,
}

/// Hierarchical navigable small-world graph over cosine distance.
///
/// Built once, then read-only; queries take `&self` and may run from many
/// threads at once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HnswIndex {
    params: HnswParams,
    dim: usize,
    entries: Vec<DemoEntry>,
    #[serde(skip)]
    units: Vec<f32>,
    nodes: Vec<Node>,
    entry_point: Option<u32>,
}

/// Shape summary of a built graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexStats {
    pub nodes: usize,
    pub dim: usize,
    pub layers: usize,
    pub nodes_per_layer: Vec<usize>,
    pub mean_degree_per_layer: Vec<f64>,
    pub max_degree_per_layer: Vec<usize>,
}

impl HnswIndex {
    /// Insert every entry in order. The graph depends only on the entries,
    /// their order and `params` (including the seed).
    pub fn build(entries: Vec<DemoEntry>, params: HnswParams) -> Result<Self, IndexError> {
        params.validate()?;
        let dim = entries.first().map_or(0, |e| e.embedding.dim());
        let mut seen = HashSet::new();
        let mut units = Vec::with_capacity(entries.len() * dim);
        for e in &entries {
            if e.embedding.dim() != dim {
                return Err(IndexError::DimMismatch { expected: dim, found: e.embedding.dim() });
            }
            if !seen.insert(e.sentence_id.as_str()) {
                return Err(IndexError::DuplicateId(e.sentence_id.clone()));
            }
            units.extend(e.embedding.unit().ok_or_else(|| IndexError::ZeroEntry(e.sentence_id.clone()))?);
        }
        let mut index = HnswIndex { params, dim, entries: Vec::new(), units, nodes: Vec::new(), entry_point: None };
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        for i in 0..entries.len() {
            let u: f64 = rng.random();
            let level = ((-(1.0 - u).ln()) * params.level_lambda).floor().min(32.0) as usize;
            index.insert(i as u32, level);
        }
        index.entries = entries;
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &HnswParams {
        &self.params
    }

    pub fn entries(&self) -> &[DemoEntry] {
        &self.entries
    }

    /// Override the query-time beam width.
    pub fn set_ef_search(&mut self, ef: usize) {
        self.params.ef_search = ef.max(1);
    }

    fn unit(&self, id: u32) -> &[f32] {
        let start = id as usize * self.dim;
        &self.units[start..start + self.dim]
    }

    fn dist(&self, q: &[f32], id: u32) -> f32 {
        let v = self.unit(id);
        1.0 - q.iter().zip(v).map(|(a, b)| a * b).sum::<f32>()
    }

    fn top_level(&self) -> usize {
        self.entry_point.map_or(0, |ep| self.nodes[ep as usize].links.len() - 1)
    }

    fn insert(&mut self, id: u32, level: usize) {
        self.nodes.push(Node { links: vec![Vec::new(); level + 1] });
        let Some(mut ep) = self.entry_point else {
            self.entry_point = Some(id);
            return;
        };
        let q = self.unit(id).to_vec();
        let top = self.top_level();
        for layer in (level + 1..=top).rev() {
            ep = self.greedy(&q, ep, layer);
        }
        let mut eps = vec![Cand { dist: self.dist(&q, ep), id: ep }];
        for layer in (0..=level.min(top)).rev() {
            let found = self.search_layer(&q, &eps, self.params.ef_construction, layer);
            let chosen = self.select_neighbors(&found, self.params.m);
            self.nodes[id as usize].links[layer] = chosen.iter().map(|c| c.id).collect();
            for c in &chosen {
                self.link(c.id, id, layer);
            }
            eps = found;
        }
        if level > top {
            self.entry_point = Some(id);
        }
    }

    /// Add `to` to `from`'s neighbor list on `layer`, pruning when full.
    fn link(&mut self, from: u32, to: u32, layer: usize) {
        let cap = self.params.max_degree(layer);
        let links = &mut self.nodes[from as usize].links[layer];
        links.push(to);
        if links.len() <= cap {
            return;
        }
        let base = self.unit(from).to_vec();
        let mut cands: Vec<Cand> =
            self.nodes[from as usize].links[layer].iter().map(|&n| Cand { dist: self.dist(&base, n), id: n }).collect();
        cands.sort();
        let kept = self.select_neighbors(&cands, cap);
        self.nodes[from as usize].links[layer] = kept.iter().map(|c| c.id).collect();
    }

    /// Diversity heuristic: keep a candidate only if it is closer to the base
    /// than to every neighbor kept so far, then top up with the nearest
    /// discarded candidates. `cands` must be sorted by distance.
    fn select_neighbors(&self, cands: &[Cand], m: usize) -> Vec<Cand> {
        let mut kept: Vec<Cand> = Vec::with_capacity(m);
        let mut discarded = Vec::new();
        for &c in cands {
            if kept.len() == m {
                break;
            }
            let cu = self.unit(c.id);
            let diverse = kept.iter().all(|k| self.dist(cu, k.id) > c.dist);
            if diverse {
                kept.push(c);
            } else {
                discarded.push(c);
            }
        }
        for c in discarded {
            if kept.len() == m {
                break;
            }
            kept.push(c);
        }
        kept
    }

    fn greedy(&self, q: &[f32], mut ep: u32, layer: usize) -> u32 {
        let mut best = self.dist(q, ep);
        loop {
            let mut improved = false;
            for &n in &self.nodes[ep as usize].links[layer] {
                let d = self.dist(q, n);
                if (d, n) < (best, ep) {
                    best = d;
                    ep = n;
                    improved = true;
                }
            }
            if !improved {
                return ep;
            }
        }
    }

    /// Beam search on one layer; returns up to `ef` candidates sorted by
    /// distance. The beam stops early only once it holds `ef` results, so an
    /// `ef` at least the layer size explores the whole reachable component.
    fn search_layer(&self, q: &[f32], eps: &[Cand], ef: usize, layer: usize) -> Vec<Cand> {
        let mut visited: HashSet<u32> = eps.iter().map(|c| c.id).collect();
        let mut frontier: BinaryHeap<Reverse<Cand>> = eps.iter().copied().map(Reverse).collect();
        let mut results: BinaryHeap<Cand> = eps.iter().copied().collect();
        while results.len() > ef {
            results.pop();
        }
        while let Some(Reverse(c)) = frontier.pop() {
            if results.len() >= ef && c > *results.peek().expect("non-empty") {
                break;
            }
            for &n in &self.nodes[c.id as usize].links[layer] {
                if !visited.insert(n) {
                    continue;
                }
                let cand = Cand { dist: self.dist(q, n), id: n };
                if results.len() < ef || cand < *results.peek().expect("non-empty") {
                    frontier.push(Reverse(cand));
                    results.push(cand);
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        results.into_sorted_vec()
    }

    /// Top-`k` entries by cosine similarity using the index's `ef_search`.
    /// An entry whose id equals `exclude` is never returned.
    pub fn query_knn(
        &self,
        query: &EmbeddingVector,
        k: usize,
        exclude: Option<&str>,
    ) -> Result<Vec<Neighbor<'_>>, IndexError> {
        self.query_knn_ef(query, k, exclude, self.params.ef_search)
    }

    pub fn query_knn_ef(
        &self,
        query: &EmbeddingVector,
        k: usize,
        exclude: Option<&str>,
        ef_search: usize,
    ) -> Result<Vec<Neighbor<'_>>, IndexError> {
        let Some(mut ep) = self.entry_point else {
            return Ok(Vec::new());
        };
        if query.dim() != self.dim {
            return Err(IndexError::DimMismatch { expected: self.dim, found: query.dim() });
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        let q = query.unit().ok_or(IndexError::ZeroVector)?;
        let ef = ef_search.max(k + usize::from(exclude.is_some()));
        // Heuristic pruning can leave layer 0 disconnected; when the beam
        // would cover every node anyway, scan them all.
        if ef >= self.entries.len() {
            return brute_force_knn(&self.entries, query, k, exclude);
        }
        for layer in (1..=self.top_level()).rev() {
            ep = self.greedy(&q, ep, layer);
        }
        let found = self.search_layer(&q, &[Cand { dist: self.dist(&q, ep), id: ep }], ef, 0);
        let mut hits = Vec::with_capacity(found.len());
        for c in found {
            let entry = &self.entries[c.id as usize];
            if Some(entry.sentence_id.as_str()) == exclude {
                continue;
            }
            hits.push(Neighbor { entry, similarity: cosine_similarity(query, &entry.embedding)? });
        }
        Ok(rank(hits, k))
    }

    pub fn stats(&self) -> IndexStats {
        let layers = if self.nodes.is_empty() { 0 } else { self.top_level() + 1 };
        let mut nodes_per_layer = vec![0; layers];
        let mut degree_sum = vec![0usize; layers];
        let mut max_degree_per_layer = vec![0; layers];
        for node in &self.nodes {
            for (layer, links) in node.links.iter().enumerate() {
                nodes_per_layer[layer] += 1;
                degree_sum[layer] += links.len();
                max_degree_per_layer[layer] = max_degree_per_layer[layer].max(links.len());
            }
        }
        let mean_degree_per_layer = degree_sum
            .iter()
            .zip(&nodes_per_layer)
            .map(|(&s, &n)| if n == 0 { 0.0 } else { s as f64 / n as f64 })
            .collect();
        IndexStats {
            nodes: self.nodes.len(),
            dim: self.dim,
            layers,
            nodes_per_layer,
            mean_degree_per_layer,
            max_degree_per_layer,
        }
    }

    /// Does every node respect its per-layer degree bound?
    pub fn degree_bounds_hold(&self) -> bool {
        self.nodes.iter().all(|n| n.links.iter().enumerate().all(|(layer, l)| l.len() <= self.params.max_degree(layer)))
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let io_err = |source| IndexError::Io { path: path.to_path_buf(), source };
        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        serde_json::to_writer(&mut w, self).map_err(|e| io_err(e.into()))?;
        w.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let file = File::open(path).map_err(|source| IndexError::Io { path: path.to_path_buf(), source })?;
        let mut index: HnswIndex = serde_json::from_reader(BufReader::new(file)).map_err(|e| IndexError::Format {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let mut units = Vec::with_capacity(index.entries.len() * index.dim);
        for e in &index.entries {
            units.extend(e.embedding.unit().ok_or_else(|| IndexError::ZeroEntry(e.sentence_id.clone()))?);
        }
        index.units = units;
        Ok(index)
    }
}

/// Read an embedding file: a `dim=<d>` header, then `<id> <f1> ... <fd>`
/// per line. An empty file holds no vectors.
pub fn load_embeddings(path: &Path) -> Result<Vec<(String, EmbeddingVector)>, IndexError> {
    let file = File::open(path).map_err(|source| IndexError::Io { path: path.to_path_buf(), source })?;
    parse_embeddings(BufReader::new(file), path)
}

pub fn parse_embeddings<R: BufRead>(reader: R, path: &Path) -> Result<Vec<(String, EmbeddingVector)>, IndexError> {
    let fmt_err = |line: usize, message: String| IndexError::Format { path: path.to_path_buf(), line, message };
    let mut dim: Option<usize> = None;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in reader.lines().enumerate() {
        let lineno = n + 1;
        let line = line.map_err(|source| IndexError::Io { path: path.to_path_buf(), source })?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some(d) = dim else {
            let d = line
                .strip_prefix("dim=")
                .and_then(|d| d.trim().parse::<usize>().ok())
                .ok_or_else(|| fmt_err(lineno, format!("expected `dim=<d>` header, found `{line}`")))?;
            dim = Some(d);
            continue;
        };
        let mut fields = line.split_whitespace();
        let id = fields.next().expect("non-empty line").to_string();
        let values = fields
            .map(|f| f.parse::<f32>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| fmt_err(lineno, format!("`{id}`: {e}")))?;
        if values.len() != d {
            return Err(fmt_err(lineno, format!("`{id}` has {} values, expected {d}", values.len())));
        }
        let v =
            EmbeddingVector::new(values).map_err(|_| fmt_err(lineno, format!("`{id}` contains a non-finite value")))?;
        if !seen.insert(id.clone()) {
            return Err(fmt_err(lineno, format!("duplicate id `{id}`")));
        }
        out.push((id, v));
    }
    Ok(out)
}

pub fn write_embeddings(path: &Path, items: &[(String, EmbeddingVector)]) -> Result<(), IndexError> {
    let io_err = |source| IndexError::Io { path: path.to_path_buf(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    let dim = items.first().map_or(0, |(_, v)| v.dim());
    writeln!(w, "dim={dim}").map_err(io_err)?;
    for (id, v) in items {
        write!(w, "{id}").map_err(io_err)?;
        for x in v.values() {
            write!(w, " {x}").map_err(io_err)?;
        }
        writeln!(w).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reorder embeddings to follow `ids`, failing with the full list of
/// discrepancies when the two id sets differ.
pub fn align_embeddings(
    embeddings: Vec<(String, EmbeddingVector)>,
    ids: &[&str],
) -> Result<Vec<EmbeddingVector>, IndexError> {
    let mut by_id: HashMap<String, EmbeddingVector> = embeddings.into_iter().collect();
    let missing: Vec<String> = ids.iter().filter(|id| !by_id.contains_key(**id)).map(|s| s.to_string()).collect();
    let wanted: HashSet<&str> = ids.iter().copied().collect();
    let mut extra: Vec<String> = by_id.keys().filter(|k| !wanted.contains(k.as_str())).cloned().collect();
    extra.sort();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(IndexError::IdMismatch { missing, extra });
    }
    Ok(ids.iter().map(|id| by_id.remove(*id).expect("checked above")).collect())
}
