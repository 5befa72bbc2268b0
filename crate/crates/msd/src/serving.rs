//! The inference path: a two-tier embedding cache and a latency-accounting
//! replay simulator.
//!
//! Tier one is an immutable hot store holding precomputed embeddings for the
//! top-N items by exposure (rebuilt offline per deployment epoch). Tier two
//! is a bounded LRU cache filled on miss by computing the embedding in real
//! time. All three paths — hot hit, LRU hit, fresh compute — return
//! byte-identical vectors because they run the same pipeline and the
//! serving layer canonicalizes to 32-bit floats (the on-disk embedding
//! precision).
//!
//! Latency is simulated, not measured: each event carries a configured cost
//! in microseconds and reports are exactly reproducible from the event
//! counts.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;
use std::sync::Mutex;

use crate::distill::{semantic_embedding, StudentModel};
use crate::error::{Error, Result};
use crate::fusion::{stack_forward, AdaptorSet};
use crate::synth::{exposure_table, ItemCatalog, ItemId};

/// The online embedding pipeline: student pooling, item adaptor projection,
/// then rounding to f32. Unknown ids embed their (empty) text, yielding a
/// deterministic zero-input projection.
pub fn compute_item_embedding(
    student: &StudentModel,
    adaptors: &AdaptorSet,
    catalog: &ItemCatalog,
    id: ItemId,
) -> Result<Vec<f32>> {
    let text = catalog.get(id).map(|it| it.text.clone()).unwrap_or_default();
    let (raw, _) = semantic_embedding(student, &text)?;
    let (proj, _) = stack_forward(&adaptors.item_adaptor, &raw)?;
    Ok(proj.into_iter().map(|v| v as f32).collect())
}

/// Immutable precomputed tier: exactly the top-N items by exposure count
/// (ties to the smaller item id). Lookups never mutate.
#[derive(Debug, Clone)]
pub struct HotStore {
    entries: HashMap<ItemId, Vec<f32>>,
    members: Vec<ItemId>,
    dim: usize,
}

impl HotStore {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Membership in exposure order (count desc, id asc).
    pub fn members(&self) -> &[ItemId] {
        &self.members
    }

    pub fn get(&self, id: ItemId) -> Option<&Vec<f32>> {
        self.entries.get(&id)
    }
}

/// Builds the hot store. `n > #items` is clamped (the flag reports it).
pub fn build_hot_store(
    catalog: &ItemCatalog,
    student: &StudentModel,
    adaptors: &AdaptorSet,
    n: usize,
) -> Result<(HotStore, bool)> {
    let clamped = n > catalog.len();
    let n = n.min(catalog.len());
    let ranked = exposure_table(catalog);
    let mut entries = HashMap::with_capacity(n);
    let mut members = Vec::with_capacity(n);
    let mut dim = 0;
    for (id, _) in ranked.into_iter().take(n) {
        let e = compute_item_embedding(student, adaptors, catalog, id)?;
        dim = e.len();
        entries.insert(id, e);
        members.push(id);
    }
    Ok((
        HotStore {
            entries,
            members,
            dim,
        },
        clamped,
    ))
}

/// Smallest N whose cumulative exposure reaches `fraction` of the total.
pub fn hot_n_for_mass(catalog: &ItemCatalog, fraction: f64) -> usize {
    let table = exposure_table(catalog);
    let total: u64 = table.iter().map(|(_, c)| c).sum();
    if total == 0 {
        return 0;
    }
    let want = (fraction * total as f64).ceil() as u64;
    let mut acc = 0u64;
    for (n, (_, c)) in table.iter().enumerate() {
        acc += c;
        if acc >= want {
            return n + 1;
        }
    }
    table.len()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LruCounters {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub computes: u64,
}

/// Bounded recency cache. Eviction removes the least-recently-used entry;
/// recency is tracked with a monotone tick counter.
#[derive(Debug)]
pub struct LruTier {
    capacity: usize,
    entries: HashMap<ItemId, (Vec<f32>, u64)>,
    by_tick: BTreeMap<u64, ItemId>,
    tick: u64,
    pub counters: LruCounters,
}

impl LruTier {
    pub fn new(capacity: usize) -> Self {
        LruTier {
            capacity,
            entries: HashMap::new(),
            by_tick: BTreeMap::new(),
            tick: 0,
            counters: LruCounters::default(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: ItemId) -> bool {
        self.entries.contains_key(&id)
    }

    /// Current contents ordered least-recently-used first.
    pub fn contents_lru_order(&self) -> Vec<ItemId> {
        self.by_tick.values().copied().collect()
    }

    /// Lookup; a hit refreshes recency.
    pub fn get(&mut self, id: ItemId) -> Option<Vec<f32>> {
        if let Some((v, old_tick)) = self.entries.get_mut(&id) {
            let t = *old_tick;
            self.tick += 1;
            *old_tick = self.tick;
            let v = v.clone();
            self.by_tick.remove(&t);
            self.by_tick.insert(self.tick, id);
            self.counters.hits += 1;
            Some(v)
        } else {
            self.counters.misses += 1;
            None
        }
    }

    /// Inserts a freshly computed embedding, evicting the LRU entry when at
    /// capacity. Duplicate inserts for the same id refresh the value (last
    /// write wins).
    pub fn insert(&mut self, id: ItemId, value: Vec<f32>) {
        if self.capacity == 0 {
            return;
        }
        if let Some((_, old_tick)) = self.entries.remove(&id) {
            self.by_tick.remove(&old_tick);
        } else if self.entries.len() >= self.capacity {
            if let Some((&victim_tick, &victim)) = self.by_tick.iter().next() {
                self.by_tick.remove(&victim_tick);
                self.entries.remove(&victim);
                self.counters.evictions += 1;
            }
        }
        self.tick += 1;
        self.entries.insert(id, (value, self.tick));
        self.by_tick.insert(self.tick, id);
    }
}

/// Where a served embedding came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Hot,
    Lru,
    Computed,
}

impl Source {
    pub fn name(&self) -> &'static str {
        match self {
            Source::Hot => "hot",
            Source::Lru => "lru",
            Source::Computed => "computed",
        }
    }
}

/// The serving stack: hot tier, mutex-protected LRU tier and the compute
/// pipeline. `get` is safe under concurrent callers; the hot tier is
/// immutable and the LRU tier serializes behind its lock.
pub struct ServingStack<'a> {
    pub hot: HotStore,
    lru: Mutex<LruTier>,
    student: &'a StudentModel,
    adaptors: &'a AdaptorSet,
    catalog: &'a ItemCatalog,
}

impl<'a> ServingStack<'a> {
    pub fn new(
        hot: HotStore,
        lru_capacity: usize,
        student: &'a StudentModel,
        adaptors: &'a AdaptorSet,
        catalog: &'a ItemCatalog,
    ) -> Self {
        ServingStack {
            hot,
            lru: Mutex::new(LruTier::new(lru_capacity)),
            student,
            adaptors,
            catalog,
        }
    }

    /// Total embedding lookup: hot tier first (bypassing the LRU), then the
    /// LRU tier, then real-time compute + insert. The vector for a given id
    /// is byte-identical regardless of source.
    pub fn get(&self, id: ItemId) -> Result<(Vec<f32>, Source)> {
        if let Some(v) = self.hot.get(id) {
            return Ok((v.clone(), Source::Hot));
        }
        {
            let mut lru = self.lru.lock().expect("lru lock poisoned");
            if let Some(v) = lru.get(id) {
                return Ok((v, Source::Lru));
            }
        }
        // Compute outside the lock; duplicate in-flight computes for the
        // same id are allowed and produce identical bytes.
        let v = compute_item_embedding(self.student, self.adaptors, self.catalog, id)?;
        let mut lru = self.lru.lock().expect("lru lock poisoned");
        lru.counters.computes += 1;
        lru.insert(id, v.clone());
        Ok((v, Source::Computed))
    }

    pub fn lru_counters(&self) -> LruCounters {
        self.lru.lock().expect("lru lock poisoned").counters
    }

    pub fn lru_contents(&self) -> Vec<ItemId> {
        self.lru
            .lock()
            .expect("lru lock poisoned")
            .contents_lru_order()
    }
}

/// Per-event simulated costs in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatencyModel {
    pub hot_hit_us: u64,
    pub lru_hit_us: u64,
    pub compute_miss_us: u64,
    pub ctr_forward_us: u64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            hot_hit_us: 1,
            lru_hit_us: 5,
            compute_miss_us: 80,
            ctr_forward_us: 30,
        }
    }
}

impl LatencyModel {
    pub fn cost(&self, source: Source) -> u64 {
        match source {
            Source::Hot => self.hot_hit_us,
            Source::Lru => self.lru_hit_us,
            Source::Computed => self.compute_miss_us,
        }
    }
}

/// Replay summary; all totals are exact integer microseconds recomputed
/// from the event counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ServingReport {
    pub requests: u64,
    pub hot_hits: u64,
    pub lru_hits: u64,
    pub computes: u64,
    pub evictions: u64,
    pub total_us: u64,
    pub mean_latency_us: f64,
}

impl ServingReport {
    pub fn to_text(&self) -> String {
        format!(
            "requests={}\nhot_hits={}\nlru_hits={}\ncomputes={}\nevictions={}\n\
             hot_hit_rate={:.6}\nlru_hit_rate={:.6}\ntotal_us={}\nmean_latency_us={:.6}\n",
            self.requests,
            self.hot_hits,
            self.lru_hits,
            self.computes,
            self.evictions,
            self.hot_hits as f64 / self.requests.max(1) as f64,
            self.lru_hits as f64 / self.requests.max(1) as f64,
            self.total_us,
            self.mean_latency_us
        )
    }
}

/// Replays a request trace against the stack, charging each event its
/// configured cost plus one CTR forward per request. Single-threaded and
/// deterministic.
pub fn replay(
    stack: &ServingStack,
    trace: &[ItemId],
    latency: &LatencyModel,
) -> Result<ServingReport> {
    if trace.is_empty() {
        return Err(Error::InvalidConfig("empty serving trace".into()));
    }
    let evictions_before = stack.lru_counters().evictions;
    let mut hot_hits = 0u64;
    let mut lru_hits = 0u64;
    let mut computes = 0u64;
    let mut total_us = 0u64;
    for &id in trace {
        let (_, source) = stack.get(id)?;
        match source {
            Source::Hot => hot_hits += 1,
            Source::Lru => lru_hits += 1,
            Source::Computed => computes += 1,
        }
        total_us += latency.cost(source) + latency.ctr_forward_us;
    }
    let evictions = stack.lru_counters().evictions - evictions_before;
    let requests = trace.len() as u64;
    Ok(ServingReport {
        requests,
        hot_hits,
        lru_hits,
        computes,
        evictions,
        total_us,
        mean_latency_us: total_us as f64 / requests as f64,
    })
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

/// Trace file: one item id per line.
pub fn write_trace(trace: &[ItemId], path: &Path) -> Result<()> {
    let mut out = String::new();
    for id in trace {
        out.push_str(&id.0.to_string());
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<ItemId>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .map(|l| {
            l.trim()
                .parse::<u64>()
                .map(ItemId)
                .map_err(|_| Error::BadArtifact {
                    path: path.display().to_string(),
                    detail: format!("bad trace line {l}"),
                })
        })
        .collect()
}

const EMB_MAGIC: &[u8; 4] = b"MSDE";
const EMB_VERSION: u32 = 1;

/// Hot store binary: header {magic, version, dim, count}, then records of
/// item id (u64 LE) followed by `dim` little-endian f32 values, in
/// exposure-rank order.
pub fn write_hot_store(store: &HotStore, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(EMB_MAGIC);
    buf.extend_from_slice(&EMB_VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(store.members.len() as u64).to_le_bytes());
    for id in &store.members {
        buf.extend_from_slice(&id.0.to_le_bytes());
        for v in &store.entries[id] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_hot_store(path: &Path) -> Result<HotStore> {
    let data = std::fs::read(path)?;
    let mut r: &[u8] = &data;
    let bad = |detail: &str| Error::BadArtifact {
        path: path.display().to_string(),
        detail: detail.into(),
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
    if &magic != EMB_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)
        .map_err(|_| bad("truncated version"))?;
    if u32::from_le_bytes(u32buf) != EMB_VERSION {
        return Err(bad("unsupported version"));
    }
    r.read_exact(&mut u32buf).map_err(|_| bad("truncated dim"))?;
    let dim = u32::from_le_bytes(u32buf) as usize;
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)
        .map_err(|_| bad("truncated count"))?;
    let count = u64::from_le_bytes(u64buf) as usize;
    let mut entries = HashMap::with_capacity(count);
    let mut members = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut u64buf)
            .map_err(|_| bad("truncated record id"))?;
        let id = ItemId(u64::from_le_bytes(u64buf));
        let mut v = Vec::with_capacity(dim);
        for _ in 0..dim {
            r.read_exact(&mut u32buf)
                .map_err(|_| bad("truncated record"))?;
            v.push(f32::from_le_bytes(u32buf));
        }
        entries.insert(id, v);
        members.push(id);
    }
    if !r.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok(HotStore {
        entries,
        members,
        dim,
    })
}
