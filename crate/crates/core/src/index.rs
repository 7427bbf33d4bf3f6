//! Cosine top-k search over passage embeddings: exact scan or an inverted
//! file (spherical k-means partitions, probe the closest clusters).

use std::cmp::Ordering;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::CorpusStore;
use crate::embed::{cosine_from_parts, dot, norm, EmbedError, Embedding, EmbeddingProvider};

const MAGIC: &[u8; 8] = b"IMLPIDX\0";
const FORMAT_VERSION: u32 = 1;
const KMEANS_MAX_ITERS: usize = 25;
const EMBED_CHUNK: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("cannot build an index from an empty store")]
    EmptyStore,
    #[error("query dimension {query} does not match index dimension {index}")]
    DimMismatch { query: usize, index: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("invalid ivf parameters: {0}")]
    BadParams(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("index file: {0}")]
    Io(#[from] io::Error),
    #[error("index file is not an imloop index (bad magic)")]
    BadMagic,
    #[error("unsupported index format version {0}")]
    BadVersion(u32),
    #[error("index file is corrupt: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum IndexVariant {
    #[default]
    Exact,
    Ivf {
        num_clusters: usize,
        num_probes: usize,
        #[serde(default = "default_kmeans_seed")]
        seed: u64,
    },
}

fn default_kmeans_seed() -> u64 {
    17
}

impl IndexVariant {
    /// IVF with 64 clusters and 16 probes.
    pub fn default_ivf() -> Self {
        IndexVariant::Ivf { num_clusters: 64, num_probes: 16, seed: default_kmeans_seed() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub passage_id: String,
    pub score: f64,
}

/// Score-descending, then id-ascending.
pub fn hit_order(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_id.cmp(b_id))
}

#[derive(Debug, Clone)]
struct IvfLayout {
    num_probes: usize,
    seed: u64,
    /// num_clusters x dim, unit norm.
    centroids: Vec<f32>,
    lists: Vec<Vec<u32>>,
}

impl IvfLayout {
    fn num_clusters(&self) -> usize {
        self.lists.len()
    }
}

#[derive(Debug, Clone)]
pub struct VectorIndex {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<f32>,
    norms: Vec<f64>,
    ivf: Option<IvfLayout>,
}

impl VectorIndex {
    /// Embeds every passage text and builds the requested variant.
    pub fn build(
        store: &CorpusStore,
        provider: &dyn EmbeddingProvider,
        variant: IndexVariant,
    ) -> Result<Self, IndexError> {
        if store.is_empty() {
            return Err(IndexError::EmptyStore);
        }
        let passages: Vec<_> = store.passages().collect();
        let chunks: Vec<Vec<Embedding>> = passages
            .par_chunks(EMBED_CHUNK)
            .map(|chunk| {
                let texts: Vec<&str> = chunk.iter().map(|p| p.text.as_str()).collect();
                provider.embed_batch(&texts)
            })
            .collect::<Result<_, _>>()?;
        let entries = passages.iter().map(|p| p.id.clone()).zip(chunks.into_iter().flatten());
        Self::from_embeddings(entries, provider.dim(), variant)
    }

    pub fn from_embeddings(
        entries: impl IntoIterator<Item = (String, Embedding)>,
        dim: usize,
        variant: IndexVariant,
    ) -> Result<Self, IndexError> {
        let mut ids = Vec::new();
        let mut vectors = Vec::new();
        let mut norms = Vec::new();
        for (id, emb) in entries {
            if emb.dim() != dim {
                return Err(IndexError::DimMismatch { query: emb.dim(), index: dim });
            }
            norms.push(norm(emb.values()));
            vectors.extend_from_slice(emb.values());
            ids.push(id);
        }
        if ids.is_empty() {
            return Err(IndexError::EmptyStore);
        }
        let mut index = VectorIndex { dim, ids, vectors, norms, ivf: None };
        if let IndexVariant::Ivf { num_clusters, num_probes, seed } = variant {
            if num_clusters == 0 || num_probes == 0 {
                return Err(IndexError::BadParams("num_clusters and num_probes must be positive".into()));
            }
            let k = num_clusters.min(index.len());
            let (centroids, assignment) = spherical_kmeans(&index.vectors, dim, k, seed);
            let mut lists = vec![Vec::new(); k];
            for (row, &c) in assignment.iter().enumerate() {
                lists[c].push(row as u32);
            }
            index.ivf = Some(IvfLayout { num_probes: num_probes.min(k), seed, centroids, lists });
        }
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn variant(&self) -> IndexVariant {
        match &self.ivf {
            None => IndexVariant::Exact,
            Some(l) => IndexVariant::Ivf { num_clusters: l.num_clusters(), num_probes: l.num_probes, seed: l.seed },
        }
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, row: usize) -> &[f32] {
        &self.vectors[row * self.dim..(row + 1) * self.dim]
    }

    /// Cluster id of every row (IVF only).
    pub fn cluster_assignment(&self) -> Option<Vec<usize>> {
        self.ivf.as_ref().map(|l| {
            let mut out = vec![0; self.len()];
            for (c, list) in l.lists.iter().enumerate() {
                for &row in list {
                    out[row as usize] = c;
                }
            }
            out
        })
    }

    pub fn search(&self, query: &Embedding, k: usize) -> Result<Vec<SearchHit>, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        if query.dim() != self.dim {
            return Err(IndexError::DimMismatch { query: query.dim(), index: self.dim });
        }
        let q = query.values();
        let qn = norm(q);
        if qn == 0.0 {
            return Err(EmbedError::ZeroVector.into());
        }
        let score = |row: usize| cosine_from_parts(dot(q, self.vector(row)), qn, self.norms[row]);
        let scored: Vec<(f64, u32)> = match &self.ivf {
            None => (0..self.len()).map(|r| (score(r), r as u32)).collect(),
            Some(layout) => {
                let mut order: Vec<(f64, usize)> = (0..layout.num_clusters())
                    .map(|c| {
                        let centroid = &layout.centroids[c * self.dim..(c + 1) * self.dim];
                        (dot(q, centroid), c)
                    })
                    .collect();
                order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                order
                    .iter()
                    .take(layout.num_probes)
                    .flat_map(|&(_, c)| layout.lists[c].iter())
                    .map(|&r| (score(r as usize), r))
                    .collect()
            }
        };
        Ok(self.top_k(scored, k))
    }

    fn top_k(&self, mut scored: Vec<(f64, u32)>, k: usize) -> Vec<SearchHit> {
        let cmp =
            |a: &(f64, u32), b: &(f64, u32)| hit_order(a.0, &self.ids[a.1 as usize], b.0, &self.ids[b.1 as usize]);
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        scored.into_iter().map(|(score, row)| SearchHit { passage_id: self.ids[row as usize].clone(), score }).collect()
    }

    /// Writes the index as a single little-endian binary file.
    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let mut out = io::BufWriter::new(fs::File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&(self.dim as u32).to_le_bytes())?;
        let (variant, clusters, probes, seed) = match &self.ivf {
            None => (0u32, 0u32, 0u32, 0u64),
            Some(l) => (1, l.num_clusters() as u32, l.num_probes as u32, l.seed),
        };
        out.write_all(&variant.to_le_bytes())?;
        out.write_all(&(self.len() as u64).to_le_bytes())?;
        out.write_all(&clusters.to_le_bytes())?;
        out.write_all(&probes.to_le_bytes())?;
        out.write_all(&seed.to_le_bytes())?;
        for v in &self.vectors {
            out.write_all(&v.to_le_bytes())?;
        }
        for id in &self.ids {
            out.write_all(&(id.len() as u32).to_le_bytes())?;
            out.write_all(id.as_bytes())?;
        }
        if let Some(l) = &self.ivf {
            for v in &l.centroids {
                out.write_all(&v.to_le_bytes())?;
            }
            let assignment = self.cluster_assignment().unwrap_or_default();
            for c in assignment {
                out.write_all(&(c as u32).to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let mut r = io::BufReader::new(fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(IndexError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(IndexError::BadVersion(version));
        }
        let dim = read_u32(&mut r)? as usize;
        let variant = read_u32(&mut r)?;
        let count = read_u64(&mut r)? as usize;
        let clusters = read_u32(&mut r)? as usize;
        let probes = read_u32(&mut r)? as usize;
        let seed = read_u64(&mut r)?;
        if dim == 0 || variant > 1 {
            return Err(IndexError::Corrupt("bad header".into()));
        }
        let vectors = read_f32s(&mut r, count * dim)?;
        let mut ids = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            ids.push(String::from_utf8(buf).map_err(|_| IndexError::Corrupt("id not utf-8".into()))?);
        }
        let norms = vectors.chunks(dim).map(norm).collect();
        let ivf = if variant == 1 {
            let centroids = read_f32s(&mut r, clusters * dim)?;
            let mut lists = vec![Vec::new(); clusters];
            for row in 0..count {
                let c = read_u32(&mut r)? as usize;
                lists
                    .get_mut(c)
                    .ok_or_else(|| IndexError::Corrupt(format!("cluster {c} out of range")))?
                    .push(row as u32);
            }
            Some(IvfLayout { num_probes: probes, seed, centroids, lists })
        } else {
            None
        };
        Ok(VectorIndex { dim, ids, vectors, norms, ivf })
    }
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32s(r: &mut impl Read, n: usize) -> io::Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn normalize_in_place(v: &mut [f32]) {
    let n = norm(v);
    if n > 0.0 {
        for x in v {
            *x = (*x as f64 / n) as f32;
        }
    }
}

fn nearest_centroid(v: &[f32], centroids: &[f32], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let s = dot(v, centroid);
        if s > best.1 {
            best = (c, s);
        }
    }
    best
}

/// Spherical k-means with k-means++ seeding (distance 1 - cos), at most 25
/// Lloyd iterations. Empty clusters are repaired by splitting the largest
/// cluster: its member least similar to the centroid seeds the empty one.
fn spherical_kmeans(vectors: &[f32], dim: usize, k: usize, seed: u64) -> (Vec<f32>, Vec<usize>) {
    let n = vectors.len() / dim;
    let mut unit: Vec<f32> = vectors.to_vec();
    for chunk in unit.chunks_exact_mut(dim) {
        normalize_in_place(chunk);
    }
    let urow = |i: usize| &unit[i * dim..(i + 1) * dim];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(urow(first));
    let mut min_dist: Vec<f64> = (0..n).map(|i| (1.0 - dot(urow(i), urow(first))).max(0.0)).collect();
    for _ in 1..k {
        let total: f64 = min_dist.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in min_dist.iter().enumerate() {
                if target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        };
        centroids.extend_from_slice(urow(pick));
        for (i, d) in min_dist.iter_mut().enumerate() {
            let nd = (1.0 - dot(urow(i), urow(pick))).max(0.0);
            if nd < *d {
                *d = nd;
            }
        }
    }

    let mut assignment = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, slot) in assignment.iter_mut().enumerate() {
            let (c, _) = nearest_centroid(urow(i), &centroids, dim);
            if *slot != c {
                *slot = c;
                changed = true;
            }
        }
        repair_empty_clusters(&unit, dim, k, &mut assignment, &centroids);
        let mut sums = vec![0f64; k * dim];
        for (i, &c) in assignment.iter().enumerate() {
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(urow(i)) {
                *s += *x as f64;
            }
        }
        for (c, chunk) in centroids.chunks_exact_mut(dim).enumerate() {
            for (x, s) in chunk.iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                *x = *s as f32;
            }
            normalize_in_place(chunk);
        }
        if !changed {
            break;
        }
    }
    (centroids, assignment)
}

fn repair_empty_clusters(unit: &[f32], dim: usize, k: usize, assignment: &mut [usize], centroids: &[f32]) {
    loop {
        let mut sizes = vec![0usize; k];
        for &c in assignment.iter() {
            sizes[c] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let largest = (0..k).max_by_key(|&c| (sizes[c], std::cmp::Reverse(c))).unwrap();
        if sizes[largest] < 2 {
            return;
        }
        let centroid = &centroids[largest * dim..(largest + 1) * dim];
        let far = (0..assignment.len())
            .filter(|&i| assignment[i] == largest)
            .min_by(|&a, &b| {
                dot(&unit[a * dim..(a + 1) * dim], centroid)
                    .total_cmp(&dot(&unit[b * dim..(b + 1) * dim], centroid))
                    .then(a.cmp(&b))
            })
            .unwrap();
        assignment[far] = empty;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Passage;
    use crate::embed::HashEmbedder;

    fn store(texts: &[&str]) -> CorpusStore {
        let passages = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Passage { id: format!("p{i:02}"), title: format!("T{i}"), text: t.to_string() })
            .collect();
        CorpusStore::from_parts(passages, vec![]).unwrap()
    }

    #[test]
    fn builds_one_entry_per_passage() {
        let s = store(&["alpha beta", "gamma delta", "epsilon"]);
        let idx = VectorIndex::build(&s, &HashEmbedder::default(), IndexVariant::Exact).unwrap();
        assert_eq!(idx.len(), 3);
    }

    #[test]
    fn empty_store_rejected() {
        let s = CorpusStore::default();
        assert!(matches!(
            VectorIndex::build(&s, &HashEmbedder::default(), IndexVariant::Exact),
            Err(IndexError::EmptyStore)
        ));
    }

    #[test]
    fn saturating_k_returns_everything_sorted() {
        let s = store(&["alpha beta", "gamma delta", "alpha", "zeta eta"]);
        let e = HashEmbedder::default();
        let idx = VectorIndex::build(&s, &e, IndexVariant::Exact).unwrap();
        let hits = idx.search(&e.embed("alpha").unwrap(), 100).unwrap();
        assert_eq!(hits.len(), 4);
        for w in hits.windows(2) {
            assert!(hit_order(w[0].score, &w[0].passage_id, w[1].score, &w[1].passage_id).is_le());
        }
        assert_eq!(hits[0].passage_id, "p02");
        assert!((hits[0].score - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ties_break_by_id() {
        let s = store(&["same words", "same words", "same words"]);
        let e = HashEmbedder::default();
        let idx = VectorIndex::build(&s, &e, IndexVariant::Exact).unwrap();
        let hits = idx.search(&e.embed("same").unwrap(), 3).unwrap();
        let ids: Vec<_> = hits.iter().map(|h| h.passage_id.as_str()).collect();
        assert_eq!(ids, ["p00", "p01", "p02"]);
    }

    #[test]
    fn search_errors() {
        let s = store(&["alpha"]);
        let e = HashEmbedder::default();
        let idx = VectorIndex::build(&s, &e, IndexVariant::Exact).unwrap();
        let q = HashEmbedder::new(32, 1).embed("alpha").unwrap();
        assert!(matches!(idx.search(&q, 1), Err(IndexError::DimMismatch { .. })));
        assert!(matches!(idx.search(&e.embed("alpha").unwrap(), 0), Err(IndexError::ZeroK)));
    }

    #[test]
    fn kmeans_is_deterministic_and_clusters_nonempty() {
        let texts: Vec<String> = (0..300).map(|i| format!("topic{} word{} w{}", i % 7, i % 13, i)).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let s = store(&refs);
        let e = HashEmbedder::default();
        let v = IndexVariant::Ivf { num_clusters: 12, num_probes: 3, seed: 5 };
        let a = VectorIndex::build(&s, &e, v).unwrap();
        let b = VectorIndex::build(&s, &e, v).unwrap();
        let ca = a.cluster_assignment().unwrap();
        assert_eq!(ca, b.cluster_assignment().unwrap());
        for c in 0..12 {
            assert!(ca.contains(&c), "cluster {c} empty");
        }
    }

    #[test]
    fn more_clusters_than_points_is_capped() {
        let s = store(&["a b", "c d", "e f"]);
        let e = HashEmbedder::default();
        let v = IndexVariant::Ivf { num_clusters: 10, num_probes: 10, seed: 1 };
        let idx = VectorIndex::build(&s, &e, v).unwrap();
        assert_eq!(idx.search(&e.embed("a").unwrap(), 5).unwrap().len(), 3);
    }

    #[test]
    fn save_load_roundtrip() {
        let texts: Vec<String> = (0..50).map(|i| format!("doc {i} about t{}", i % 5)).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let s = store(&refs);
        let e = HashEmbedder::default();
        let dir = tempfile::tempdir().unwrap();
        for v in [IndexVariant::Exact, IndexVariant::Ivf { num_clusters: 4, num_probes: 2, seed: 3 }] {
            let idx = VectorIndex::build(&s, &e, v).unwrap();
            let path = dir.path().join("idx.bin");
            idx.save(&path).unwrap();
            let back = VectorIndex::load(&path).unwrap();
            assert_eq!(back.variant(), idx.variant());
            assert_eq!(back.ids(), idx.ids());
            assert_eq!(back.cluster_assignment(), idx.cluster_assignment());
            let q = e.embed("about t3").unwrap();
            assert_eq!(back.search(&q, 7).unwrap(), idx.search(&q, 7).unwrap());
        }
    }

    #[test]
    fn load_rejects_bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        fs::write(&path, b"NOTANIDX\x01\0\0\0").unwrap();
        assert!(matches!(VectorIndex::load(&path), Err(IndexError::BadMagic)));
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&99u32.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(VectorIndex::load(&path), Err(IndexError::BadVersion(99))));
    }
}
