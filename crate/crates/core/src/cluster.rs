//! Thematic clustering of persona descriptions.
//!
//! Pipeline: acquire embeddings (endpoint or precomputed vector file),
//! optionally project onto principal components, partition with seeded
//! k-means, then label clusters by class-based TF-IDF keywords. Every stage
//! is deterministic given its inputs and seed; embeddings are L2-normalized
//! on receipt so provider scale conventions cannot leak into distances.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use futures::StreamExt;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Persona;
use crate::elicit::{wire, Endpoint};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    pub persona_ids: Vec<u32>,
    /// Row-per-persona, all rows the same length.
    pub vectors: Vec<Vec<f64>>,
    pub provider_tag: String,
    pub dim: usize,
}

impl EmbeddingSet {
    pub fn validate(&self) -> Result<()> {
        if self.persona_ids.len() != self.vectors.len() {
            return Err(Error::data(format!(
                "embedding set has {} ids but {} vectors",
                self.persona_ids.len(),
                self.vectors.len()
            )));
        }
        if self.vectors.is_empty() {
            return Err(Error::data("embedding set is empty"));
        }
        for (id, v) in self.persona_ids.iter().zip(&self.vectors) {
            if v.len() != self.dim {
                return Err(Error::data(format!(
                    "persona {id} vector has dimension {}, set declares {}",
                    v.len(),
                    self.dim
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::data(format!(
                    "persona {id} vector contains a non-finite entry"
                )));
            }
        }
        let mut seen = BTreeSet::new();
        for id in &self.persona_ids {
            if !seen.insert(*id) {
                return Err(Error::data(format!("duplicate persona id {id}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.persona_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.persona_ids.is_empty()
    }
}

fn l2_normalize(v: &mut [f64], persona_id: u32) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return Err(Error::data(format!(
            "embedding for persona {persona_id} has zero or non-finite norm"
        )));
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    Ok(())
}

/// Where vectors come from: a live embeddings endpoint or a precomputed
/// vector file (line-delimited JSON, one {persona_id, vector} object per
/// line).
pub enum EmbeddingProvider {
    Endpoint {
        endpoint: Endpoint,
        model: String,
        batch_size: usize,
        concurrency: usize,
        retry_limit: u32,
    },
    VectorFile(PathBuf),
}

async fn fetch_batch(
    endpoint: &Endpoint,
    model: &str,
    texts: &[String],
    retry_limit: u32,
) -> Result<Vec<Vec<f64>>> {
    let request = wire::EmbeddingsRequest {
        model: model.to_string(),
        input: texts.to_vec(),
    };
    let mut last_err = String::new();
    for attempt in 1..=retry_limit {
        let sent = endpoint
            .embed_request()
            .json(&request)
            .send()
            .await;
        match sent {
            Ok(response) => {
                let status = response.status();
                if status.is_client_error() && status.as_u16() != 429 {
                    let body = response.text().await.unwrap_or_default();
                    return Err(Error::transport(format!(
                        "embeddings endpoint rejected request ({status}): {body}"
                    )));
                }
                if status.is_success() {
                    match response.json::<wire::EmbeddingsResponse>().await {
                        Ok(parsed) => {
                            let mut rows: Vec<(u32, Vec<f64>)> = parsed
                                .data
                                .into_iter()
                                .map(|item| (item.index, item.embedding))
                                .collect();
                            rows.sort_by_key(|(i, _)| *i);
                            if rows.len() != texts.len() {
                                return Err(Error::transport(format!(
                                    "embeddings endpoint returned {} vectors for {} inputs",
                                    rows.len(),
                                    texts.len()
                                )));
                            }
                            return Ok(rows.into_iter().map(|(_, v)| v).collect());
                        }
                        Err(e) => last_err = format!("unparseable embeddings body: {e}"),
                    }
                } else {
                    last_err = format!("embeddings endpoint returned {status}");
                }
            }
            Err(e) => last_err = format!("embeddings request failed: {e}"),
        }
        if attempt < retry_limit {
            endpoint.backoff(attempt).await;
        }
    }
    Err(Error::transport(format!(
        "embeddings batch failed after {retry_limit} attempts: {last_err}"
    )))
}

/// One L2-normalized vector per persona. Endpoint providers batch requests
/// and run batches concurrently; results are keyed back by batch index, so
/// completion order cannot reorder rows.
pub async fn embed(personas: &[Persona], provider: &EmbeddingProvider) -> Result<EmbeddingSet> {
    if personas.is_empty() {
        return Err(Error::data("cannot embed an empty persona set"));
    }
    match provider {
        EmbeddingProvider::VectorFile(path) => {
            let set = load_vectors(path)?;
            let by_id: BTreeMap<u32, &Vec<f64>> = set
                .persona_ids
                .iter()
                .copied()
                .zip(set.vectors.iter())
                .collect();
            let mut vectors = Vec::with_capacity(personas.len());
            for p in personas {
                let v = by_id.get(&p.id).ok_or_else(|| {
                    Error::data(format!(
                        "vector file {} lacks persona {}",
                        path.display(),
                        p.id
                    ))
                })?;
                let mut row = (*v).clone();
                l2_normalize(&mut row, p.id)?;
                vectors.push(row);
            }
            let result = EmbeddingSet {
                persona_ids: personas.iter().map(|p| p.id).collect(),
                vectors,
                provider_tag: set.provider_tag,
                dim: set.dim,
            };
            result.validate()?;
            Ok(result)
        }
        EmbeddingProvider::Endpoint {
            endpoint,
            model,
            batch_size,
            concurrency,
            retry_limit,
        } => {
            let batch_size = (*batch_size).max(1);
            let batches: Vec<(usize, Vec<String>)> = personas
                .chunks(batch_size)
                .enumerate()
                .map(|(i, chunk)| (i, chunk.iter().map(|p| p.text.clone()).collect()))
                .collect();
            let n_batches = batches.len();
            let mut slots: Vec<Option<Vec<Vec<f64>>>> = vec![None; n_batches];
            let mut stream = futures::stream::iter(batches.into_iter().map(
                |(batch_idx, texts)| async move {
                    let rows = fetch_batch(endpoint, model, &texts, *retry_limit).await?;
                    Ok::<_, Error>((batch_idx, rows))
                },
            ))
            .buffer_unordered((*concurrency).max(1));
            while let Some(result) = stream.next().await {
                let (batch_idx, rows) = result?;
                slots[batch_idx] = Some(rows);
            }
            drop(stream);

            let mut vectors = Vec::with_capacity(personas.len());
            for slot in slots {
                vectors.extend(slot.expect("all batches resolved"));
            }
            let dim = vectors[0].len();
            for (p, v) in personas.iter().zip(vectors.iter_mut()) {
                if v.len() != dim {
                    return Err(Error::data(format!(
                        "embedding dimension drifted across batches: {} then {}",
                        dim,
                        v.len()
                    )));
                }
                l2_normalize(v, p.id)?;
            }
            let result = EmbeddingSet {
                persona_ids: personas.iter().map(|p| p.id).collect(),
                vectors,
                provider_tag: model.clone(),
                dim,
            };
            result.validate()?;
            Ok(result)
        }
    }
}

#[derive(Serialize, Deserialize)]
struct VectorLine {
    persona_id: u32,
    vector: Vec<f64>,
}

/// Writes an embedding set as line-delimited JSON ({persona_id, vector} per
/// line). The layout is the vector-file input format of `embed`.
pub fn save_vectors(path: &Path, set: &EmbeddingSet) -> Result<()> {
    set.validate()?;
    let mut out = BufWriter::new(File::create(path)?);
    for (id, v) in set.persona_ids.iter().zip(&set.vectors) {
        let line = serde_json::to_string(&VectorLine {
            persona_id: *id,
            vector: v.clone(),
        })
        .map_err(|e| Error::data(e.to_string()))?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_vectors(path: &Path) -> Result<EmbeddingSet> {
    let file = File::open(path)
        .map_err(|e| Error::data(format!("cannot open vector file {}: {e}", path.display())))?;
    let mut persona_ids = Vec::new();
    let mut vectors: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: VectorLine = serde_json::from_str(&line).map_err(|e| {
            Error::data(format!(
                "vector file {} line {}: {e}",
                path.display(),
                idx + 1
            ))
        })?;
        if let Some(first) = vectors.first() {
            if parsed.vector.len() != first.len() {
                return Err(Error::data(format!(
                    "vector file {} line {}: dimension {} differs from {}",
                    path.display(),
                    idx + 1,
                    parsed.vector.len(),
                    first.len()
                )));
            }
        }
        persona_ids.push(parsed.persona_id);
        vectors.push(parsed.vector);
    }
    if vectors.is_empty() {
        return Err(Error::data(format!(
            "vector file {} holds no vectors",
            path.display()
        )));
    }
    let dim = vectors[0].len();
    let set = EmbeddingSet {
        persona_ids,
        vectors,
        provider_tag: "vector-file".to_string(),
        dim,
    };
    set.validate()?;
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReductionMethod {
    None,
    PrincipalComponents,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    pub method: ReductionMethod,
    pub out_dim: usize,
    /// Fraction of total variance the kept components carry; 1.0 for the
    /// identity reduction.
    pub explained_variance_ratio: f64,
}

impl Reduction {
    pub fn identity(dim: usize) -> Reduction {
        Reduction {
            method: ReductionMethod::None,
            out_dim: dim,
            explained_variance_ratio: 1.0,
        }
    }
}

/// Principal-components projection fitted on the set itself. Components are
/// ordered by descending explained variance; each component's sign is fixed
/// by making its largest-magnitude loading positive, so repeated runs are
/// bit-identical.
pub fn reduce(set: &EmbeddingSet, out_dim: usize) -> Result<(EmbeddingSet, Reduction)> {
    set.validate()?;
    let n = set.len();
    let d = set.dim;
    if out_dim == 0 || out_dim > d {
        return Err(Error::data(format!(
            "reduction dimension {out_dim} outside 1..={d}"
        )));
    }
    if n < 2 {
        return Err(Error::data("reduction needs at least two vectors"));
    }

    let mut x = DMatrix::zeros(n, d);
    for (i, row) in set.vectors.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            x[(i, j)] = *v;
        }
    }
    let mean = x.row_mean();
    for i in 0..n {
        for j in 0..d {
            x[(i, j)] -= mean[j];
        }
    }

    let cov = (x.transpose() * &x) / (n as f64 - 1.0);
    let eigen = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigen.eigenvalues[b].total_cmp(&eigen.eigenvalues[a]));

    let total_variance: f64 = eigen.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    if total_variance <= 0.0 {
        return Err(Error::data(
            "embedding set has zero variance; nothing to reduce",
        ));
    }
    let kept_variance: f64 = order
        .iter()
        .take(out_dim)
        .map(|&j| eigen.eigenvalues[j].max(0.0))
        .sum();

    let mut projection = DMatrix::zeros(d, out_dim);
    for (col, &j) in order.iter().take(out_dim).enumerate() {
        let component = eigen.eigenvectors.column(j);
        let mut dominant = 0usize;
        for r in 1..d {
            if component[r].abs() > component[dominant].abs() {
                dominant = r;
            }
        }
        let flip = if component[dominant] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..d {
            projection[(r, col)] = component[r] * flip;
        }
    }

    let projected = x * projection;
    let vectors: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..out_dim).map(|j| projected[(i, j)]).collect())
        .collect();
    let reduced = EmbeddingSet {
        persona_ids: set.persona_ids.clone(),
        vectors,
        provider_tag: set.provider_tag.clone(),
        dim: out_dim,
    };
    reduced.validate()?;
    Ok((
        reduced,
        Reduction {
            method: ReductionMethod::PrincipalComponents,
            out_dim,
            explained_variance_ratio: kept_variance / total_variance,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub reduction: Reduction,
    pub seed: u64,
    pub inertia: f64,
}

/// persona_id → cluster index in [0, k).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    assignment: BTreeMap<u32, usize>,
}

impl ClusterAssignment {
    pub fn get(&self, persona_id: u32) -> Option<usize> {
        self.assignment.get(&persona_id).copied()
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, usize)> + '_ {
        self.assignment.iter().map(|(id, c)| (*id, *c))
    }

    pub fn cluster_sizes(&self, k: usize) -> Vec<usize> {
        let mut sizes = vec![0usize; k];
        for (_, c) in self.iter() {
            sizes[c] += 1;
        }
        sizes
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

/// k-means++ initialization: first center uniform, each further center
/// drawn with probability proportional to squared distance from the chosen
/// set. All randomness flows through the seeded generator.
fn kmeans_pp_init(vectors: &[Vec<f64>], k: usize, rng: &mut ChaCha12Rng) -> Vec<Vec<f64>> {
    let n = vectors.len();
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.random_range(0..n);
    centroids.push(vectors[first].clone());
    let mut d2: Vec<f64> = vectors
        .iter()
        .map(|v| sq_dist(v, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if u < *w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            // All remaining mass is zero (duplicate-heavy data): take the
            // first point not already a centroid.
            (0..n)
                .find(|i| !centroids.iter().any(|c| c == &vectors[*i]))
                .unwrap_or(0)
        };
        centroids.push(vectors[next].clone());
        for (i, v) in vectors.iter().enumerate() {
            let d = sq_dist(v, centroids.last().expect("just pushed"));
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centroids
}

const KMEANS_TOL: f64 = 1e-6;
const KMEANS_MAX_ITERS: usize = 300;

/// Seeded k-means. Lloyd iterations run until maximum centroid movement
/// drops below 1e-6 or 300 iterations pass; a cluster that empties is
/// re-seeded from the point farthest from its current centroid.
pub fn kmeans(set: &EmbeddingSet, k: usize, seed: u64) -> Result<(ClusterModel, ClusterAssignment)> {
    set.validate()?;
    let n = set.len();
    if k < 2 {
        return Err(Error::data(format!("k must be at least 2, got {k}")));
    }
    if n < k {
        return Err(Error::data(format!(
            "cannot fit {k} clusters to {n} points"
        )));
    }

    let vectors = &set.vectors;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(vectors, k, &mut rng);
    let mut labels = vec![0usize; n];
    let mut previous_inertia = f64::INFINITY;

    for _iter in 0..KMEANS_MAX_ITERS {
        let mut inertia = 0.0;
        for (i, v) in vectors.iter().enumerate() {
            let (c, d) = nearest(v, &centroids);
            labels[i] = c;
            inertia += d;
        }
        // Lloyd monotonicity, allowing float wobble and the deliberate bump
        // an empty-cluster reseed can introduce.
        debug_assert!(
            inertia <= previous_inertia * (1.0 + 1e-9) + 1e-9 || previous_inertia == f64::INFINITY,
            "inertia rose from {previous_inertia} to {inertia}"
        );
        previous_inertia = inertia;

        let mut sums = vec![vec![0.0; set.dim]; k];
        let mut counts = vec![0usize; k];
        for (v, &c) in vectors.iter().zip(&labels) {
            counts[c] += 1;
            for (j, x) in v.iter().enumerate() {
                sums[c][j] += x;
            }
        }

        let mut movement = 0.0f64;
        let mut reseeded = false;
        for c in 0..k {
            let new_centroid = if counts[c] == 0 {
                // Re-seed from the farthest point; ties go to the lowest
                // index so the choice is deterministic.
                reseeded = true;
                let mut far = 0usize;
                let mut far_d = -1.0;
                for (i, v) in vectors.iter().enumerate() {
                    let d = sq_dist(v, &centroids[labels[i]]);
                    if d > far_d {
                        far_d = d;
                        far = i;
                    }
                }
                vectors[far].clone()
            } else {
                sums[c]
                    .iter()
                    .map(|s| s / counts[c] as f64)
                    .collect::<Vec<f64>>()
            };
            movement = movement.max(sq_dist(&new_centroid, &centroids[c]).sqrt());
            centroids[c] = new_centroid;
        }
        if reseeded {
            // The reseed invalidates the monotonicity baseline.
            previous_inertia = f64::INFINITY;
        }
        if movement < KMEANS_TOL {
            break;
        }
    }

    let mut inertia = 0.0;
    for (i, v) in vectors.iter().enumerate() {
        let (c, d) = nearest(v, &centroids);
        labels[i] = c;
        inertia += d;
    }

    let sizes = {
        let mut s = vec![0usize; k];
        for &c in &labels {
            s[c] += 1;
        }
        s
    };
    if sizes.iter().any(|&s| s == 0) {
        return Err(Error::data(
            "a cluster is empty after fitting; data may be degenerate",
        ));
    }
    for a in 0..k {
        for b in a + 1..k {
            if centroids[a] == centroids[b] {
                return Err(Error::data(format!(
                    "centroids {a} and {b} coincide; data cannot support k = {k}"
                )));
            }
        }
    }

    let assignment = ClusterAssignment {
        assignment: set
            .persona_ids
            .iter()
            .copied()
            .zip(labels.iter().copied())
            .collect(),
    };
    Ok((
        ClusterModel {
            k,
            centroids,
            reduction: Reduction::identity(set.dim),
            seed,
            inertia,
        },
        assignment,
    ))
}

/// Words carrying no thematic signal, excluded from keyword scoring. Only
/// words of length ≥ 3 matter here; shorter tokens are dropped before the
/// stopword check.
const STOPWORDS: &[&str] = &[
    "about", "above", "after", "again", "all", "also", "and", "any", "are", "been", "before",
    "being", "below", "between", "both", "but", "can", "could", "did", "does", "doing", "down",
    "during", "each", "few", "for", "from", "further", "had", "has", "have", "having", "her",
    "here", "hers", "herself", "him", "himself", "his", "how", "into", "its", "itself", "just",
    "more", "most", "myself", "nor", "not", "now", "off", "once", "only", "other", "our", "ours",
    "ourselves", "out", "over", "own", "same", "she", "should", "some", "such", "than", "that",
    "the", "their", "theirs", "them", "themselves", "then", "there", "these", "they", "this",
    "those", "through", "too", "under", "until", "very", "was", "were", "what", "when", "where",
    "which", "while", "who", "whom", "why", "will", "with", "you", "your", "yours", "yourself",
];

fn is_stopword(token: &str) -> bool {
    STOPWORDS.binary_search(&token).is_ok()
}

/// Lowercase alphabetic tokens of length ≥ 3, stopwords removed.
fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    lower
        .split(|c: char| !c.is_alphabetic())
        .filter(|t| t.len() >= 3 && !is_stopword(t))
        .map(|t| t.to_string())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordList {
    /// keywords[cluster] = top keywords, score-descending then lexicographic.
    pub keywords: Vec<Vec<String>>,
    /// labels[cluster] = first keyword, or "cluster-<index>" when the
    /// cluster has no scorable tokens.
    pub labels: Vec<String>,
}

/// Class-based TF-IDF keywords per cluster: term frequency within the
/// cluster times ln(1 + k / document frequency across clusters). Ties break
/// lexicographically so the list is a pure function of the texts.
pub fn top_keywords(cluster_texts: &[Vec<String>], n_keywords: usize) -> Result<KeywordList> {
    if cluster_texts.is_empty() {
        return Err(Error::data("keyword extraction needs at least one cluster"));
    }
    let k = cluster_texts.len();
    let mut per_cluster_counts: Vec<BTreeMap<String, usize>> = Vec::with_capacity(k);
    let mut cluster_totals: Vec<usize> = Vec::with_capacity(k);
    for texts in cluster_texts {
        let mut counts = BTreeMap::new();
        let mut total = 0usize;
        for text in texts {
            for token in tokenize(text) {
                *counts.entry(token).or_insert(0) += 1;
                total += 1;
            }
        }
        per_cluster_counts.push(counts);
        cluster_totals.push(total);
    }

    let mut document_frequency: BTreeMap<&str, usize> = BTreeMap::new();
    for counts in &per_cluster_counts {
        for term in counts.keys() {
            *document_frequency.entry(term.as_str()).or_insert(0) += 1;
        }
    }

    let mut keywords = Vec::with_capacity(k);
    let mut labels = Vec::with_capacity(k);
    for (cluster, counts) in per_cluster_counts.iter().enumerate() {
        let total = cluster_totals[cluster];
        if total == 0 {
            keywords.push(Vec::new());
            labels.push(format!("cluster-{cluster}"));
            continue;
        }
        let mut scored: Vec<(f64, &str)> = counts
            .iter()
            .map(|(term, &count)| {
                let tf = count as f64 / total as f64;
                let df = document_frequency[term.as_str()] as f64;
                let icf = (1.0 + k as f64 / df).ln();
                (tf * icf, term.as_str())
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        let list: Vec<String> = scored
            .iter()
            .take(n_keywords)
            .map(|(_, t)| t.to_string())
            .collect();
        labels.push(list.first().cloned().unwrap_or_else(|| format!("cluster-{cluster}")));
        keywords.push(list);
    }
    Ok(KeywordList { keywords, labels })
}

/// Groups persona texts by assigned cluster, ready for `top_keywords`.
pub fn texts_by_cluster(
    personas: &[Persona],
    assignment: &ClusterAssignment,
    k: usize,
) -> Result<Vec<Vec<String>>> {
    let mut grouped: Vec<Vec<String>> = vec![Vec::new(); k];
    for p in personas {
        let c = assignment.get(p.id).ok_or_else(|| {
            Error::data(format!("persona {} missing from cluster assignment", p.id))
        })?;
        if c >= k {
            return Err(Error::data(format!(
                "persona {} assigned to cluster {c}, but k = {k}",
                p.id
            )));
        }
        grouped[c].push(p.text.clone());
    }
    Ok(grouped)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set_from(vectors: Vec<Vec<f64>>) -> EmbeddingSet {
        let dim = vectors[0].len();
        EmbeddingSet {
            persona_ids: (0..vectors.len() as u32).collect(),
            vectors,
            provider_tag: "test".to_string(),
            dim,
        }
    }

    /// Two well-separated blobs around ±center, deterministic offsets.
    fn blobs(n_per: usize, dim: usize, center: f64) -> EmbeddingSet {
        let mut vectors = Vec::new();
        for i in 0..n_per {
            let mut v = vec![center; dim];
            v[i % dim] += 0.01 * (i as f64 + 1.0);
            vectors.push(v);
        }
        for i in 0..n_per {
            let mut v = vec![-center; dim];
            v[(i + 1) % dim] -= 0.01 * (i as f64 + 1.0);
            vectors.push(v);
        }
        set_from(vectors)
    }

    #[test]
    fn validation_catches_shape_errors() {
        let mut set = set_from(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(set.validate().is_ok());
        set.vectors[1] = vec![1.0];
        assert!(set.validate().is_err());
        let mut set = set_from(vec![vec![1.0, 0.0], vec![f64::NAN, 1.0]]);
        assert!(set.validate().is_err());
        set = set_from(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        set.persona_ids[1] = set.persona_ids[0];
        assert!(set.validate().is_err());
    }

    #[test]
    fn vector_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vectors.jsonl");
        let set = set_from(vec![vec![3.0, 4.0], vec![0.0, 2.0], vec![1.0, 1.0]]);
        save_vectors(&path, &set).unwrap();
        let loaded = load_vectors(&path).unwrap();
        assert_eq!(loaded.vectors, set.vectors);
        assert_eq!(loaded.persona_ids, set.persona_ids);
        assert_eq!(loaded.dim, 2);
    }

    #[test]
    fn load_rejects_ragged_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vectors.jsonl");
        std::fs::write(
            &path,
            "{\"persona_id\":0,\"vector\":[1.0,2.0]}\n{\"persona_id\":1,\"vector\":[1.0]}\n",
        )
        .unwrap();
        let err = load_vectors(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[tokio::test]
    async fn embed_from_vector_file_normalizes_and_selects() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vectors.jsonl");
        let set = set_from(vec![vec![3.0, 4.0], vec![0.0, 2.0], vec![5.0, 12.0]]);
        save_vectors(&path, &set).unwrap();
        let personas: Vec<Persona> = [(0u32, "a"), (2u32, "c")]
            .iter()
            .map(|(id, t)| Persona {
                id: *id,
                text: t.to_string(),
            })
            .collect();
        let embedded = embed(
            &personas,
            &EmbeddingProvider::VectorFile(path.clone()),
        )
        .await
        .unwrap();
        assert_eq!(embedded.persona_ids, vec![0, 2]);
        for row in &embedded.vectors {
            let norm: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
        assert!((embedded.vectors[0][0] - 0.6).abs() < 1e-12);

        // Requesting a persona the file lacks is an error.
        let missing = vec![Persona {
            id: 9,
            text: "x".to_string(),
        }];
        assert!(embed(&missing, &EmbeddingProvider::VectorFile(path))
            .await
            .is_err());
    }

    #[tokio::test]
    async fn embed_rejects_zero_vector() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vectors.jsonl");
        std::fs::write(&path, "{\"persona_id\":0,\"vector\":[0.0,0.0]}\n").unwrap();
        let personas = vec![Persona {
            id: 0,
            text: "x".to_string(),
        }];
        let err = embed(&personas, &EmbeddingProvider::VectorFile(path))
            .await
            .unwrap_err();
        assert!(err.to_string().contains("zero or non-finite norm"), "{err}");
    }

    #[test]
    fn full_dim_reduction_is_a_rotation() {
        let set = blobs(10, 4, 1.0);
        let (reduced, info) = reduce(&set, 4).unwrap();
        assert!((info.explained_variance_ratio - 1.0).abs() < 1e-9);
        // Pairwise distances survive a rotation plus translation.
        for i in 0..set.len() {
            for j in i + 1..set.len() {
                let before = sq_dist(&set.vectors[i], &set.vectors[j]);
                let after = sq_dist(&reduced.vectors[i], &reduced.vectors[j]);
                assert!(
                    (before - after).abs() < 1e-9,
                    "pair ({i}, {j}): {before} vs {after}"
                );
            }
        }
    }

    #[test]
    fn rank_two_data_explained_by_two_components() {
        // Rows live in the span of two fixed basis vectors.
        let b1 = [1.0, 0.0, 1.0, 0.0, 1.0];
        let b2 = [0.0, 1.0, 0.0, -1.0, 0.0];
        let mut vectors = Vec::new();
        for i in 0..12 {
            let a = (i as f64 * 0.7).sin() * 2.0;
            let b = (i as f64 * 1.3).cos() * 1.5;
            vectors.push((0..5).map(|j| a * b1[j] + b * b2[j]).collect());
        }
        let set = set_from(vectors);
        let (reduced, info) = reduce(&set, 2).unwrap();
        assert!(
            (info.explained_variance_ratio - 1.0).abs() < 1e-9,
            "ratio {}",
            info.explained_variance_ratio
        );
        assert_eq!(reduced.dim, 2);
    }

    #[test]
    fn reduction_is_deterministic() {
        let set = blobs(8, 6, 2.0);
        let (a, _) = reduce(&set, 3).unwrap();
        let (b, _) = reduce(&set, 3).unwrap();
        assert_eq!(a.vectors, b.vectors);
    }

    #[test]
    fn reduction_rejects_bad_dims() {
        let set = blobs(4, 3, 1.0);
        assert!(reduce(&set, 0).is_err());
        assert!(reduce(&set, 4).is_err());
        assert!(reduce(&set, 3).is_ok());
    }

    #[test]
    fn kmeans_recovers_planted_blobs() {
        let set = blobs(20, 4, 3.0);
        let (model, assignment) = kmeans(&set, 2, 7).unwrap();
        assert_eq!(assignment.len(), 40);
        // Planted labels: first 20 ids one blob, last 20 the other.
        let first = assignment.get(0).unwrap();
        for id in 0..20u32 {
            assert_eq!(assignment.get(id).unwrap(), first);
        }
        let second = assignment.get(20).unwrap();
        assert_ne!(first, second);
        for id in 20..40u32 {
            assert_eq!(assignment.get(id).unwrap(), second);
        }
        assert!(model.inertia < 40.0 * 0.1);
        let sizes = assignment.cluster_sizes(2);
        assert_eq!(sizes, vec![20, 20]);
    }

    #[test]
    fn kmeans_with_k_equal_n_isolates_every_point() {
        let set = set_from(vec![
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![5.0, 5.0],
        ]);
        let (model, assignment) = kmeans(&set, 4, 3).unwrap();
        assert!(model.inertia < 1e-12);
        let mut clusters: Vec<usize> = (0..4).map(|i| assignment.get(i).unwrap()).collect();
        clusters.sort_unstable();
        assert_eq!(clusters, vec![0, 1, 2, 3]);
    }

    #[test]
    fn kmeans_is_seed_deterministic() {
        let set = blobs(15, 5, 1.5);
        let (m1, a1) = kmeans(&set, 3, 11).unwrap();
        let (m2, a2) = kmeans(&set, 3, 11).unwrap();
        assert_eq!(m1.centroids, m2.centroids);
        assert_eq!(a1, a2);
        assert_eq!(m1.inertia, m2.inertia);
    }

    #[test]
    fn kmeans_rejects_degenerate_requests() {
        let set = blobs(2, 3, 1.0);
        assert!(kmeans(&set, 1, 0).is_err());
        assert!(kmeans(&set, 5, 0).is_err());
        let identical = set_from(vec![vec![1.0, 1.0]; 6]);
        assert!(kmeans(&identical, 2, 0).is_err());
    }

    #[test]
    fn keywords_score_dominant_terms_first() {
        let history = vec![
            "a history teacher exploring history archives".to_string(),
            "an amateur historian of history and heritage".to_string(),
            "a historian and history student researching local resident histories".to_string(),
        ];
        let science = vec![
            "a physics student running local experiments".to_string(),
            "a chemistry resident mixing compounds".to_string(),
        ];
        let list = top_keywords(&[history, science], 5).unwrap();
        // Most frequent exclusive term leads, its rarer sibling second.
        assert_eq!(list.keywords[0][0], "history");
        assert_eq!(list.keywords[0][1], "historian");
        assert_eq!(list.labels[0], "history");
        // "local" is shared across clusters and singly counted here, so it
        // scores below every cluster-exclusive term.
        let pos = |term: &str| {
            list.keywords[0]
                .iter()
                .position(|t| t == term)
                .unwrap_or(usize::MAX)
        };
        assert!(pos("historian") < pos("local"));
    }

    #[test]
    fn keywords_are_lowercase_unique_and_stopword_free() {
        let clusters = vec![
            vec!["The THE the Farmer farmer FARMING and with from".to_string()],
            vec!["a quiet librarian".to_string()],
        ];
        let list = top_keywords(&clusters, 10).unwrap();
        for kw in &list.keywords[0] {
            assert_eq!(kw, &kw.to_lowercase());
            assert!(!is_stopword(kw), "stopword {kw} leaked");
            assert!(kw.len() >= 3);
        }
        let unique: BTreeSet<&String> = list.keywords[0].iter().collect();
        assert_eq!(unique.len(), list.keywords[0].len());
        assert!(list.keywords[0].contains(&"farmer".to_string()));
    }

    #[test]
    fn tokenless_cluster_gets_fallback_label() {
        let clusters = vec![
            vec!["ab cd 12 !!".to_string()],
            vec!["a farmer of goats".to_string()],
        ];
        let list = top_keywords(&clusters, 3).unwrap();
        assert!(list.keywords[0].is_empty());
        assert_eq!(list.labels[0], "cluster-0");
        assert_eq!(list.labels[1], "farmer");
    }

    #[test]
    fn single_cluster_scores_reduce_to_term_frequency() {
        let clusters = vec![vec![
            "farmer farmer farmer goat goat barn".to_string(),
        ]];
        let list = top_keywords(&clusters, 3).unwrap();
        assert_eq!(list.keywords[0], vec!["farmer", "goat", "barn"]);
    }

    #[test]
    fn keyword_ties_break_lexicographically() {
        let clusters = vec![vec!["zebra apple".to_string()], vec!["unrelated words".to_string()]];
        let list = top_keywords(&clusters, 2).unwrap();
        assert_eq!(list.keywords[0], vec!["apple", "zebra"]);
    }

    #[test]
    fn stopword_list_is_sorted_for_binary_search() {
        let mut sorted = STOPWORDS.to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, STOPWORDS);
    }

    #[test]
    fn texts_group_by_assignment() {
        let personas: Vec<Persona> = (0..4)
            .map(|i| Persona {
                id: i,
                text: format!("persona {i}"),
            })
            .collect();
        let assignment = ClusterAssignment {
            assignment: [(0u32, 1usize), (1, 0), (2, 1), (3, 0)].into_iter().collect(),
        };
        let grouped = texts_by_cluster(&personas, &assignment, 2).unwrap();
        assert_eq!(grouped[0], vec!["persona 1", "persona 3"]);
        assert_eq!(grouped[1], vec!["persona 0", "persona 2"]);
    }
}
