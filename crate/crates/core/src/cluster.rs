//! Speaker labeling of a video corpus from per-video face embeddings.
//!
//! Stages: streaming assignment with momentum centroids, within-cluster
//! verification split, between-cluster identification merge, and extraction
//! of boundary pairs for manual review.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;

#[derive(Clone, Debug, PartialEq)]
pub struct VideoEmbedding {
    pub video_id: String,
    /// Unit norm.
    pub vector: Vec<f64>,
}

impl VideoEmbedding {
    /// Normalizes `vector` on ingest; a zero or non-finite vector is rejected.
    pub fn new(video_id: impl Into<String>, vector: Vec<f64>) -> Result<Self> {
        let video_id = video_id.into();
        let v = normalized(vector)
            .ok_or_else(|| Error::Domain(format!("embedding for '{video_id}' has no direction")))?;
        Ok(VideoEmbedding {
            video_id,
            vector: v,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cluster {
    pub cluster_id: usize,
    pub centroid: Vec<f64>,
    /// Indices into the embedding list, ascending.
    pub members: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub t1: f64,
    pub t2: f64,
    pub t3: f64,
    pub t4: f64,
    /// Centroid momentum during assignment.
    pub m: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            t1: 0.41,
            t2: 0.63,
            t3: 0.63,
            t4: 0.59,
            m: 0.9,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("t1", self.t1),
            ("t2", self.t2),
            ("t3", self.t3),
            ("t4", self.t4),
        ] {
            if !(-1.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("{name} = {t} outside [-1, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.m) {
            return Err(Error::Config(format!("momentum {} outside [0, 1]", self.m)));
        }
        if self.t4 >= self.t3 {
            return Err(Error::Contract(format!(
                "t4 = {} must be below t3 = {}",
                self.t4, self.t3
            )));
        }
        Ok(())
    }
}

fn normalized(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n.is_finite() && n > 0.0) {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= n);
    Some(v)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mean_direction(embeddings: &[VideoEmbedding], members: &[usize]) -> Vec<f64> {
    let dim = embeddings.first().map_or(0, |e| e.vector.len());
    let mut sum = vec![0.0; dim];
    for &i in members {
        for (s, x) in sum.iter_mut().zip(&embeddings[i].vector) {
            *s += x;
        }
    }
    // members that cancel exactly keep the first member's direction
    normalized(sum).unwrap_or_else(|| embeddings[members[0]].vector.clone())
}

fn from_members(embeddings: &[VideoEmbedding], mut members: Vec<usize>) -> Cluster {
    members.sort_unstable();
    Cluster {
        cluster_id: 0,
        centroid: mean_direction(embeddings, &members),
        members,
    }
}

/// Sorts clusters by smallest member and renumbers them from 0.
fn canonical(mut clusters: Vec<Cluster>) -> Vec<Cluster> {
    clusters.sort_by_key(|c| c.members[0]);
    for (i, c) in clusters.iter_mut().enumerate() {
        c.cluster_id = i;
    }
    clusters
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind((0..n).collect())
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.0[hi] = lo;
        }
    }

    /// Groups of `0..n` in order of their smallest element.
    fn groups(&mut self) -> Vec<Vec<usize>> {
        let mut by_root: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in 0..self.0.len() {
            let r = self.find(i);
            by_root.entry(r).or_default().push(i);
        }
        by_root.into_values().collect()
    }
}

/// Streams embeddings in order: each joins its most similar cluster when that
/// similarity reaches `t1`, otherwise it opens a new cluster.
pub fn assign(embeddings: &[VideoEmbedding], t1: f64, m: f64) -> Vec<Cluster> {
    let mut clusters: Vec<Cluster> = Vec::new();
    for (i, e) in embeddings.iter().enumerate() {
        let best = clusters
            .iter()
            .enumerate()
            .map(|(k, c)| (k, cosine(&c.centroid, &e.vector)))
            .fold(None, |acc: Option<(usize, f64)>, (k, s)| match acc {
                Some((_, b)) if b >= s => acc,
                _ => Some((k, s)),
            });
        match best {
            Some((k, s)) if s >= t1 => {
                let c = &mut clusters[k];
                let mixed: Vec<f64> = c
                    .centroid
                    .iter()
                    .zip(&e.vector)
                    .map(|(ck, f)| m * ck + (1.0 - m) * f)
                    .collect();
                if let Some(v) = normalized(mixed) {
                    c.centroid = v;
                }
                c.members.push(i);
            }
            _ => clusters.push(Cluster {
                cluster_id: clusters.len(),
                centroid: e.vector.clone(),
                members: vec![i],
            }),
        }
    }
    clusters
}

/// Splits a cluster into the connected components of its members under
/// edges with similarity at least `t2`.
pub fn verify_split(cluster: &Cluster, embeddings: &[VideoEmbedding], t2: f64) -> Vec<Cluster> {
    let n = cluster.members.len();
    if n <= 1 {
        return vec![cluster.clone()];
    }
    let mut uf = UnionFind::new(n);
    for a in 0..n {
        for b in a + 1..n {
            let s = cosine(
                &embeddings[cluster.members[a]].vector,
                &embeddings[cluster.members[b]].vector,
            );
            if s >= t2 {
                uf.union(a, b);
            }
        }
    }
    let groups = uf.groups();
    if groups.len() == 1 {
        return vec![from_members(embeddings, cluster.members.clone())];
    }
    groups
        .into_iter()
        .map(|g| {
            from_members(
                embeddings,
                g.into_iter().map(|i| cluster.members[i]).collect(),
            )
        })
        .collect()
}

fn verify_all(
    clusters: &[Cluster],
    embeddings: &[VideoEmbedding],
    t2: f64,
    exec: Exec,
) -> Vec<Cluster> {
    canonical(
        exec.map(clusters, |c| verify_split(c, embeddings, t2))
            .into_iter()
            .flatten()
            .collect(),
    )
}

/// Merges clusters whose mean directions reach `t3`, repeating on the merged
/// clusters until no pair qualifies.
pub fn identify_merge(
    clusters: &[Cluster],
    embeddings: &[VideoEmbedding],
    t3: f64,
    exec: Exec,
) -> Vec<Cluster> {
    let mut current: Vec<Cluster> = canonical(
        clusters
            .iter()
            .map(|c| from_members(embeddings, c.members.clone()))
            .collect(),
    );
    loop {
        let n = current.len();
        let links: Vec<Vec<usize>> = exec.map_range(n, |a| {
            (a + 1..n)
                .filter(|&b| cosine(&current[a].centroid, &current[b].centroid) >= t3)
                .collect()
        });
        if links.iter().all(|l| l.is_empty()) {
            return current;
        }
        let mut uf = UnionFind::new(n);
        for (a, l) in links.iter().enumerate() {
            for &b in l {
                uf.union(a, b);
            }
        }
        current = canonical(
            uf.groups()
                .into_iter()
                .map(|g| {
                    from_members(
                        embeddings,
                        g.iter().flat_map(|&k| current[k].members.clone()).collect(),
                    )
                })
                .collect(),
        );
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub a: usize,
    pub b: usize,
    pub similarity: f64,
}

/// Cluster pairs with `t4 <= similarity < t3`, most similar first.
pub fn boundary_candidates(clusters: &[Cluster], t4: f64, t3: f64) -> Result<Vec<CandidatePair>> {
    if t4 >= t3 {
        return Err(Error::Contract(format!(
            "t4 = {t4} must be below t3 = {t3}"
        )));
    }
    let mut out = Vec::new();
    for (i, a) in clusters.iter().enumerate() {
        for b in &clusters[i + 1..] {
            let s = cosine(&a.centroid, &b.centroid);
            if s >= t4 && s < t3 {
                out.push(CandidatePair {
                    a: a.cluster_id.min(b.cluster_id),
                    b: a.cluster_id.max(b.cluster_id),
                    similarity: s,
                });
            }
        }
    }
    out.sort_by(|x, y| {
        y.similarity
            .total_cmp(&x.similarity)
            .then((x.a, x.b).cmp(&(y.a, y.b)))
    });
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageCounts {
    pub videos: usize,
    pub assigned: usize,
    pub verified: usize,
    pub merged: usize,
    pub candidates: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    pub clusters: Vec<Cluster>,
    pub candidates: Vec<CandidatePair>,
    pub counts: StageCounts,
}

impl PipelineOutput {
    /// Cluster id of every embedding, in input order.
    pub fn labels(&self, n: usize) -> Vec<usize> {
        let mut out = vec![usize::MAX; n];
        for c in &self.clusters {
            for &i in &c.members {
                out[i] = c.cluster_id;
            }
        }
        out
    }
}

pub fn run_pipeline(
    embeddings: &[VideoEmbedding],
    th: &Thresholds,
    exec: Exec,
) -> Result<PipelineOutput> {
    th.validate()?;
    let assigned = assign(embeddings, th.t1, th.m);
    let verified = verify_all(&assigned, embeddings, th.t2, exec);
    let merged = identify_merge(&verified, embeddings, th.t3, exec);
    let candidates = boundary_candidates(&merged, th.t4, th.t3)?;
    log::info!(
        "clustering: {} videos, {} assigned, {} after verification, {} after merge",
        embeddings.len(),
        assigned.len(),
        verified.len(),
        merged.len()
    );
    Ok(PipelineOutput {
        counts: StageCounts {
            videos: embeddings.len(),
            assigned: assigned.len(),
            verified: verified.len(),
            merged: merged.len(),
            candidates: candidates.len(),
        },
        clusters: merged,
        candidates,
    })
}

/// Seeded reordering of the input stream.
pub fn shuffled(embeddings: &[VideoEmbedding], seed: u64) -> Vec<VideoEmbedding> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut out = embeddings.to_vec();
    out.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    out
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len() as f64;
    let pairs = |k: f64| k * (k - 1.0) / 2.0;
    let mut table: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, f64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, f64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1.0;
        *rows.entry(x).or_default() += 1.0;
        *cols.entry(y).or_default() += 1.0;
    }
    let index: f64 = table.values().map(|&k| pairs(k)).sum();
    let sa: f64 = rows.values().map(|&k| pairs(k)).sum();
    let sb: f64 = cols.values().map(|&k| pairs(k)).sum();
    let expected = sa * sb / pairs(n);
    let max = (sa + sb) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMeta {
    pub rows: usize,
    pub dim: usize,
}

fn required(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => e.into(),
    })
}

/// Reads `index.tsv`, `embeddings.f32` and `meta.json` from `dir`.
pub fn read_embeddings(dir: &Path) -> Result<Vec<VideoEmbedding>> {
    let meta: EmbeddingMeta = serde_json::from_slice(&required(&dir.join("meta.json"))?)?;
    let index = String::from_utf8(required(&dir.join("index.tsv"))?)
        .map_err(|_| Error::Format("index.tsv is not UTF-8".into()))?;
    let ids: Vec<&str> = index
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split('\t').next_back().unwrap_or(l).trim())
        .collect();
    if ids.len() != meta.rows {
        return Err(Error::Format(format!(
            "index.tsv has {} rows, meta.json says {}",
            ids.len(),
            meta.rows
        )));
    }
    let raw = required(&dir.join("embeddings.f32"))?;
    if raw.len() != meta.rows * meta.dim * 4 {
        return Err(Error::Format(format!(
            "embeddings.f32 holds {} bytes, expected {}",
            raw.len(),
            meta.rows * meta.dim * 4
        )));
    }
    let floats: Vec<f64> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    ids.iter()
        .zip(floats.chunks(meta.dim.max(1)))
        .map(|(id, v)| VideoEmbedding::new(*id, v.to_vec()))
        .collect()
}

/// Writes embeddings in the layout read by [`read_embeddings`].
pub fn write_embeddings(dir: &Path, embeddings: &[VideoEmbedding]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let dim = embeddings.first().map_or(0, |e| e.vector.len());
    let mut index = String::new();
    let mut raw = Vec::with_capacity(embeddings.len() * dim * 4);
    for (i, e) in embeddings.iter().enumerate() {
        if e.vector.len() != dim {
            return Err(Error::Dimension(format!(
                "embedding {i} has dim {}, expected {dim}",
                e.vector.len()
            )));
        }
        index.push_str(&format!("{i}\t{}\n", e.video_id));
        raw.extend(e.vector.iter().flat_map(|&x| (x as f32).to_le_bytes()));
    }
    std::fs::write(dir.join("index.tsv"), index)?;
    std::fs::write(dir.join("embeddings.f32"), raw)?;
    let meta = EmbeddingMeta {
        rows: embeddings.len(),
        dim,
    };
    std::fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

#[derive(Serialize)]
struct Report<'a> {
    thresholds: &'a Thresholds,
    counts: &'a StageCounts,
    clusters: usize,
}

/// Writes `partition.tsv`, `candidates.tsv` and `report.json` into `dir`.
pub fn write_outputs(
    dir: &Path,
    embeddings: &[VideoEmbedding],
    out: &PipelineOutput,
    th: &Thresholds,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut part = std::io::BufWriter::new(std::fs::File::create(dir.join("partition.tsv"))?);
    for (i, label) in out.labels(embeddings.len()).into_iter().enumerate() {
        writeln!(part, "{}\t{label}", embeddings[i].video_id)?;
    }
    part.flush()?;
    let mut cand = std::io::BufWriter::new(std::fs::File::create(dir.join("candidates.tsv"))?);
    for p in &out.candidates {
        writeln!(cand, "{}\t{}\t{:.6}", p.a, p.b, p.similarity)?;
    }
    cand.flush()?;
    let report = Report {
        thresholds: th,
        counts: &out.counts,
        clusters: out.clusters.len(),
    };
    std::fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    Ok(())
}
