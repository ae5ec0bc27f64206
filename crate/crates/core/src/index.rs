//! Nearest-neighbor search over datastore keys.
//!
//! [`search_flat`] is an exact scan. [`IvfIndex`] partitions keys by nearest
//! k-means centroid and scans only the `n_probe` closest partitions.
//!
//! IVF file layout (`RDIV`, little-endian):
//!
//! ```text
//! magic "RDIV" | version u32 | dim u32 | n_lists u32 | n_probe u32
//! | datastore sha256 [32] | n_lists × dim f32 centroids
//! | per list: len u64, len × u64 entry indices
//! ```

use std::cmp::Ordering;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio::{self, Hash, Reader, Writer};
use crate::corpus::TokenId;
use crate::datastore::Datastore;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RDIV";
pub const VERSION: u32 = 1;
pub const KMEANS_ITERS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    /// Euclidean distance.
    #[default]
    L2,
    /// Squared Euclidean distance.
    SquaredL2,
}

impl Metric {
    fn distance_from_squared(self, sq: f64) -> f64 {
        match self {
            Metric::L2 => sq.sqrt(),
            Metric::SquaredL2 => sq,
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(Metric::L2),
            "squared_l2" | "sql2" => Ok(Metric::SquaredL2),
            other => Err(Error::Config(format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub entry_index: usize,
    pub distance: f64,
    pub value: TokenId,
}

/// Neighbors in ascending distance order, ties by entry index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NeighborSet(pub Vec<Neighbor>);

impl NeighborSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Neighbor> {
        self.0.iter()
    }

    pub fn distances(&self) -> Vec<f64> {
        self.0.iter().map(|n| n.distance).collect()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.0.iter().map(|n| n.entry_index).collect()
    }
}

pub fn squared_l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

fn by_dist_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

fn top_k(ds: &Datastore, query: &[f32], candidates: impl Iterator<Item = usize>, k: usize, metric: Metric) -> NeighborSet {
    let mut scored: Vec<(f64, usize)> = candidates.map(|i| (squared_l2(ds.key(i), query), i)).collect();
    if scored.len() > k {
        scored.select_nth_unstable_by(k, by_dist_then_index);
        scored.truncate(k);
    }
    scored.sort_unstable_by(by_dist_then_index);
    NeighborSet(
        scored
            .into_iter()
            .map(|(sq, i)| Neighbor {
                entry_index: i,
                distance: metric.distance_from_squared(sq),
                value: ds.value(i),
            })
            .collect(),
    )
}

fn check_query(ds: &Datastore, query: &[f32], k: usize) -> Result<()> {
    if query.len() != ds.dim() {
        return Err(Error::DimMismatch {
            expected: ds.dim(),
            got: query.len(),
        });
    }
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    Ok(())
}

/// Exact k nearest neighbors. An empty store yields an empty set.
pub fn search_flat(ds: &Datastore, query: &[f32], k: usize, metric: Metric) -> Result<NeighborSet> {
    check_query(ds, query, k)?;
    Ok(top_k(ds, query, 0..ds.len(), k, metric))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvfIndex {
    dim: usize,
    centroids: Vec<f32>,
    lists: Vec<Vec<u64>>,
    pub n_probe: usize,
    pub datastore_hash: Hash,
}

fn nearest_centroid(centroids: &[f32], dim: usize, v: &[f32]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (c, cent) in centroids.chunks_exact(dim).enumerate() {
        let d = squared_l2(cent, v);
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1
}

/// k-means over the datastore keys with `KMEANS_ITERS` Lloyd iterations
/// from `n_lists` distinct seeded random keys; then assigns every entry to
/// its nearest centroid.
pub fn build_ivf(ds: &Datastore, n_lists: usize, seed: u64) -> Result<IvfIndex> {
    if n_lists == 0 {
        return Err(Error::Config("n_lists must be positive".into()));
    }
    if n_lists > ds.len() {
        return Err(Error::Config(format!(
            "n_lists {n_lists} exceeds datastore size {}",
            ds.len()
        )));
    }
    let dim = ds.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = rand::seq::index::sample(&mut rng, ds.len(), n_lists).into_vec();
    init.sort_unstable();
    let mut centroids: Vec<f32> = init.iter().flat_map(|&i| ds.key(i).iter().copied()).collect();

    let mut assign = vec![0usize; ds.len()];
    for _ in 0..KMEANS_ITERS {
        for (i, a) in assign.iter_mut().enumerate() {
            *a = nearest_centroid(&centroids, dim, ds.key(i));
        }
        let mut sums = vec![0.0f64; n_lists * dim];
        let mut counts = vec![0usize; n_lists];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, &x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(ds.key(i)) {
                *s += x as f64;
            }
        }
        for c in 0..n_lists {
            if counts[c] == 0 {
                continue;
            }
            for j in 0..dim {
                centroids[c * dim + j] = (sums[c * dim + j] / counts[c] as f64) as f32;
            }
        }
    }

    let mut lists = vec![Vec::new(); n_lists];
    for i in 0..ds.len() {
        lists[nearest_centroid(&centroids, dim, ds.key(i))].push(i as u64);
    }
    Ok(IvfIndex {
        dim,
        centroids,
        lists,
        n_probe: n_lists.min(8),
        datastore_hash: ds.hash(),
    })
}

impl IvfIndex {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_lists(&self) -> usize {
        self.lists.len()
    }

    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn list(&self, c: usize) -> &[u64] {
        &self.lists[c]
    }

    pub fn with_n_probe(mut self, n_probe: usize) -> Result<Self> {
        if n_probe == 0 || n_probe > self.n_lists() {
            return Err(Error::Config(format!(
                "n_probe {n_probe} not in 1..={}",
                self.n_lists()
            )));
        }
        self.n_probe = n_probe;
        Ok(self)
    }

    /// Lists ordered by centroid distance to `query`, ties by list id.
    fn probe_order(&self, query: &[f32]) -> Vec<usize> {
        let mut d: Vec<(f64, usize)> = self
            .centroids
            .chunks_exact(self.dim)
            .enumerate()
            .map(|(c, cent)| (squared_l2(cent, query), c))
            .collect();
        d.sort_unstable_by(by_dist_then_index);
        d.into_iter().map(|(_, c)| c).collect()
    }

    /// Confirms the index was built over `ds`.
    pub fn check_datastore(&self, ds: &Datastore) -> Result<()> {
        if self.dim != ds.dim() {
            return Err(Error::DimMismatch {
                expected: ds.dim(),
                got: self.dim,
            });
        }
        if self.datastore_hash != ds.hash() {
            return Err(Error::Provenance("index was built over a different datastore".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(self.dim as u32);
        w.u32(self.n_lists() as u32);
        w.u32(self.n_probe as u32);
        w.bytes(&self.datastore_hash);
        for &c in &self.centroids {
            w.f32(c);
        }
        for l in &self.lists {
            w.u64(l.len() as u64);
            for &i in l {
                w.u64(i);
            }
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "index");
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let dim = r.u32()? as usize;
        let n_lists = r.u32()? as usize;
        let n_probe = r.u32()? as usize;
        if dim == 0 || n_lists == 0 || n_probe == 0 || n_probe > n_lists {
            return Err(Error::format("index", "invalid header"));
        }
        let datastore_hash = r.hash()?;
        let centroids = r.f32_vec(n_lists * dim)?;
        if !centroids.iter().all(|c| c.is_finite()) {
            return Err(Error::format("index", "non-finite centroid"));
        }
        let mut lists = Vec::with_capacity(n_lists);
        for _ in 0..n_lists {
            let len = r.u64()? as usize;
            if len > r.remaining() / 8 {
                return Err(Error::format("index", "truncated"));
            }
            let mut l = Vec::with_capacity(len);
            for _ in 0..len {
                l.push(r.u64()?);
            }
            lists.push(l);
        }
        r.finish()?;
        Ok(Self {
            dim,
            centroids,
            lists,
            n_probe,
            datastore_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path, "index")?)
    }
}

/// Exact k-NN restricted to the entries of the `idx.n_probe` nearest lists.
pub fn search_ivf(idx: &IvfIndex, ds: &Datastore, query: &[f32], k: usize, metric: Metric) -> Result<NeighborSet> {
    search_ivf_probe(idx, ds, query, k, metric, idx.n_probe)
}

pub fn search_ivf_probe(
    idx: &IvfIndex,
    ds: &Datastore,
    query: &[f32],
    k: usize,
    metric: Metric,
    n_probe: usize,
) -> Result<NeighborSet> {
    check_query(ds, query, k)?;
    if idx.dim != ds.dim() {
        return Err(Error::DimMismatch {
            expected: ds.dim(),
            got: idx.dim,
        });
    }
    let n_probe = n_probe.clamp(1, idx.n_lists());
    let lists = idx.probe_order(query);
    let candidates = lists[..n_probe]
        .iter()
        .flat_map(|&c| idx.lists[c].iter().map(|&i| i as usize))
        .filter(|&i| i < ds.len());
    Ok(top_k(ds, query, candidates, k, metric))
}

/// Fraction of exact neighbors recovered, averaged over queries.
pub fn recall_at_k(exact: &[NeighborSet], approx: &[NeighborSet]) -> f64 {
    let mut hit = 0usize;
    let mut total = 0usize;
    for (e, a) in exact.iter().zip(approx) {
        let found = a.indices();
        hit += e.iter().filter(|n| found.contains(&n.entry_index)).count();
        total += e.len();
    }
    if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    }
}
