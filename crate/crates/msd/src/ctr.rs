//! The assembled click-through-rate predictor and its metrics.
//!
//! Input layout per example: the concatenation of
//!
//! ```text
//! [user id emb | item id emb | context embs | e'_user | e'_target | e_item]
//! ```
//!
//! followed by an MLP head ending in a sigmoid. The semantic blocks come
//! from the frozen student (optionally with trainable LoRA factors on its
//! hidden weight) through the feature adaptors and the relevant-items
//! fusion. Ablation variants zero out blocks instead of reshaping the head,
//! so all variants share one architecture and capacity.
//!
//! Trainable parameters: ID tables, adaptors, head, LoRA a/b. The student
//! base is never registered with the optimizer, which makes freezing
//! structural; `base_fingerprint` asserts it byte-for-byte.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use crate::distill::{
    base_fingerprint, embed_backward, embed_with_tape, EmbeddingTape, StudentModel,
};
use crate::error::{Error, Result};
use crate::fusion::{
    fuse_relevant_items, fusion_backward, stack_backward, stack_forward, AdaptorSet, FusionConfig,
    FusionOutput,
};
use crate::numerics::layer::{sigmoid, Activation, MlpGrads, MlpLayer, MlpTape};
use crate::numerics::lora::LoraGrads;
use crate::numerics::matrix::Matrix;
use crate::numerics::optim::Optimizer;
use crate::numerics::rng::Rng;
use crate::synth::{exposure_table, Corpus, InteractionRow, ItemId, UserId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    NoLora,
    NoItemFusion,
    NoUserLevel,
    IdOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoLora,
        Variant::NoItemFusion,
        Variant::NoUserLevel,
        Variant::IdOnly,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoLora => "no_lora",
            Variant::NoItemFusion => "no_item_fusion",
            Variant::NoUserLevel => "no_user_level",
            Variant::IdOnly => "id_only",
        }
    }

    pub fn from_name(s: &str) -> Result<Variant> {
        Ok(match s {
            "full" => Variant::Full,
            "no_lora" => Variant::NoLora,
            "no_item_fusion" => Variant::NoItemFusion,
            "no_user_level" => Variant::NoUserLevel,
            "id_only" => Variant::IdOnly,
            other => return Err(Error::InvalidConfig(format!("unknown variant '{other}'"))),
        })
    }

    fn uses_semantics(&self) -> bool {
        !matches!(self, Variant::IdOnly)
    }

    fn uses_user_level(&self) -> bool {
        matches!(self, Variant::Full | Variant::NoLora | Variant::NoItemFusion)
    }

    fn uses_fusion(&self) -> bool {
        matches!(self, Variant::Full | Variant::NoLora | Variant::NoUserLevel)
    }

    fn uses_lora(&self) -> bool {
        matches!(self, Variant::Full | Variant::NoItemFusion | Variant::NoUserLevel)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtrConfig {
    pub d_id: usize,
    pub d_proj: usize,
    pub head_hidden: Vec<usize>,
    pub k_top: usize,
    pub p_max: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for CtrConfig {
    fn default() -> Self {
        CtrConfig {
            d_id: 16,
            d_proj: 32,
            head_hidden: vec![64, 32],
            k_top: 3,
            p_max: 0.5,
            lora_rank: 4,
            lora_alpha: 4.0,
            epochs: 2,
            batch_size: 64,
            learning_rate: 0.01,
        }
    }
}

/// Corpus-derived lookups shared by forward passes: texts and exposure.
pub struct FeatureContext<'a> {
    pub corpus: &'a Corpus,
    pub exposure: HashMap<ItemId, u64>,
    user_texts: Vec<String>,
}

impl<'a> FeatureContext<'a> {
    pub fn new(corpus: &'a Corpus) -> Result<Self> {
        let exposure = exposure_table(&corpus.catalog).into_iter().collect();
        let user_texts = corpus
            .users
            .iter()
            .map(|u| corpus.user_text(u.id))
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureContext {
            corpus,
            exposure,
            user_texts,
        })
    }

    fn user_text(&self, id: UserId) -> &str {
        self.user_texts
            .get(id.0 as usize)
            .map(|s| s.as_str())
            .unwrap_or("")
    }

    fn item_text(&self, id: ItemId) -> &str {
        self.corpus
            .catalog
            .get(id)
            .map(|it| it.text.as_str())
            .unwrap_or("")
    }

    fn frequency(&self, id: ItemId) -> u64 {
        self.exposure.get(&id).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct CtrModel {
    pub variant: Variant,
    pub student: StudentModel,
    pub adaptors: AdaptorSet,
    /// (n_users + 1) × d_id; row 0 is the out-of-vocabulary row.
    pub user_table: Matrix,
    /// (n_items + 1) × d_id; row 0 is the out-of-vocabulary row.
    pub item_table: Matrix,
    /// One table per context feature, cardinality × d_id.
    pub ctx_tables: Vec<Matrix>,
    /// Hidden layers (ReLU) then a final 1-unit identity layer; the sigmoid
    /// is applied explicitly so training can work on logits.
    pub head: Vec<MlpLayer>,
    pub config: CtrConfig,
    pub n_users: usize,
    pub n_items: usize,
}

impl CtrModel {
    pub fn new(
        variant: Variant,
        mut student: StudentModel,
        corpus: &Corpus,
        config: &CtrConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        if variant.uses_lora() {
            student.enable_lora(config.lora_rank, config.lora_alpha, rng)?;
        } else {
            student.disable_lora();
        }
        let d_sem = student.config.d_hidden;
        let adaptors = AdaptorSet::new(d_sem, config.d_proj, rng);
        let n_users = corpus.users.len();
        let n_items = corpus.catalog.len();
        let scale = 0.05;
        let user_table = Matrix::uniform(n_users + 1, config.d_id, scale, rng);
        let item_table = Matrix::uniform(n_items + 1, config.d_id, scale, rng);
        let ctx_tables: Vec<Matrix> = (0..corpus.config.n_context_features)
            .map(|_| {
                Matrix::uniform(
                    corpus.config.context_cardinality as usize,
                    config.d_id,
                    scale,
                    rng,
                )
            })
            .collect();
        let concat_dim = config.d_id * (2 + ctx_tables.len()) + 3 * config.d_proj;
        let mut head = Vec::new();
        let mut d_in = concat_dim;
        for &h in &config.head_hidden {
            head.push(MlpLayer::xavier(h, d_in, Activation::ReLU, rng));
            d_in = h;
        }
        head.push(MlpLayer::xavier(1, d_in, Activation::Identity, rng));
        Ok(CtrModel {
            variant,
            student,
            adaptors,
            user_table,
            item_table,
            ctx_tables,
            head,
            config: config.clone(),
            n_users,
            n_items,
        })
    }

    fn user_row(&self, id: UserId) -> usize {
        if (id.0 as usize) < self.n_users {
            id.0 as usize + 1
        } else {
            0
        }
    }

    fn item_row(&self, id: ItemId) -> usize {
        if (id.0 as usize) < self.n_items {
            id.0 as usize + 1
        } else {
            0
        }
    }

    pub fn concat_dim(&self) -> usize {
        self.config.d_id * (2 + self.ctx_tables.len()) + 3 * self.config.d_proj
    }
}

/// Whether fusion masking is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum SubjectKey {
    User(u64),
    Item(u64),
}

/// Per-subject cached forward state: the embedding tape, the adaptor
/// projection and tapes, plus the summed upstream gradient. ReLU masks are
/// fixed by the forward pass, so backward is linear in the upstream and one
/// pass per unique subject with the summed upstream is exact.
struct CacheEntry {
    emb_tape: EmbeddingTape,
    proj: Vec<f64>,
    proj_tapes: Vec<MlpTape>,
    upstream: Vec<f64>,
}

/// Batch-scoped cache of unique subject embeddings/projections.
#[derive(Default)]
pub struct EmbedCache {
    entries: HashMap<SubjectKey, CacheEntry>,
}

impl EmbedCache {
    pub fn new() -> Self {
        EmbedCache {
            entries: HashMap::new(),
        }
    }

    fn get_or_compute(
        &mut self,
        model: &CtrModel,
        ctx: &FeatureContext,
        key: SubjectKey,
    ) -> Result<&CacheEntry> {
        if !self.entries.contains_key(&key) {
            let (text, stack) = match key {
                SubjectKey::User(id) => (ctx.user_text(UserId(id)), &model.adaptors.user_adaptor),
                SubjectKey::Item(id) => (ctx.item_text(ItemId(id)), &model.adaptors.item_adaptor),
            };
            let (raw, emb_tape, _) = embed_with_tape(&model.student, text)?;
            let (proj, proj_tapes) = stack_forward(stack, &raw)?;
            let d = proj.len();
            self.entries.insert(
                key,
                CacheEntry {
                    emb_tape,
                    proj,
                    proj_tapes,
                    upstream: vec![0.0; d],
                },
            );
        }
        Ok(&self.entries[&key])
    }
}

/// Everything needed to run backward for one row.
pub struct RowTape {
    pub pctr: f64,
    pub logit: f64,
    head_tapes: Vec<MlpTape>,
    user_row: usize,
    item_row: usize,
    ctx_rows: Vec<usize>,
    user_key: Option<SubjectKey>,
    target_key: Option<SubjectKey>,
    history_keys: Vec<SubjectKey>,
    fusion: Option<FusionOutput>,
}

/// Forward pass for one interaction row. `mode` governs fusion masking; in
/// train mode the per-example rng drives the mask draws. Unknown ids fall
/// back to the reserved OOV embedding row.
pub fn forward(
    model: &CtrModel,
    ctx: &FeatureContext,
    cache: &mut EmbedCache,
    row: &InteractionRow,
    mode: Mode,
    mut rng: Option<&mut Rng>,
) -> Result<RowTape> {
    let d_proj = model.config.d_proj;
    let user_row = model.user_row(row.user_id);
    let item_row = model.item_row(row.target_item_id);
    let mut concat = Vec::with_capacity(model.concat_dim());
    concat.extend_from_slice(model.user_table.row(user_row));
    concat.extend_from_slice(model.item_table.row(item_row));
    let mut ctx_rows = Vec::with_capacity(model.ctx_tables.len());
    for (t, table) in model.ctx_tables.iter().enumerate() {
        let v = row.context.get(t).copied().unwrap_or(0) as usize;
        let r = v.min(table.rows() - 1);
        ctx_rows.push(r);
        concat.extend_from_slice(table.row(r));
    }

    let mut user_key = None;
    let mut target_key = None;
    let mut history_keys = Vec::new();
    let mut fusion = None;

    // e'_user block
    if model.variant.uses_user_level() {
        let key = SubjectKey::User(row.user_id.0);
        let entry = cache.get_or_compute(model, ctx, key)?;
        concat.extend_from_slice(&entry.proj);
        user_key = Some(key);
    } else {
        concat.extend(std::iter::repeat(0.0).take(d_proj));
    }

    // e'_target block
    if model.variant.uses_semantics() {
        let key = SubjectKey::Item(row.target_item_id.0);
        let entry = cache.get_or_compute(model, ctx, key)?;
        concat.extend_from_slice(&entry.proj);
        target_key = Some(key);
    } else {
        concat.extend(std::iter::repeat(0.0).take(d_proj));
    }

    // e_item block (fusion over history)
    if model.variant.uses_fusion() {
        let tkey = SubjectKey::Item(row.target_item_id.0);
        let target_proj = cache.get_or_compute(model, ctx, tkey)?.proj.clone();
        let mut hist_proj = Vec::with_capacity(row.history.len());
        let mut freqs = Vec::with_capacity(row.history.len());
        for h in &row.history {
            let key = SubjectKey::Item(h.0);
            let entry = cache.get_or_compute(model, ctx, key)?;
            hist_proj.push(entry.proj.clone());
            freqs.push(ctx.frequency(*h));
            history_keys.push(key);
        }
        let fcfg = FusionConfig {
            k_top: model.config.k_top,
            p_max: model.config.p_max,
            train_mode: mode == Mode::Train,
        };
        let out = fuse_relevant_items(
            &target_proj,
            &hist_proj,
            &freqs,
            &fcfg,
            rng.as_deref_mut(),
        )?;
        concat.extend_from_slice(&out.e_item);
        fusion = Some(out);
    } else {
        concat.extend(std::iter::repeat(0.0).take(d_proj));
    }

    let (out, head_tapes) = stack_forward(&model.head, &concat)?;
    let logit = out[0];
    let pctr = sigmoid(logit);
    Ok(RowTape {
        pctr,
        logit,
        head_tapes,
        user_row,
        item_row,
        ctx_rows,
        user_key,
        target_key,
        history_keys,
        fusion,
    })
}

/// Gradients for every trainable block, in optimizer slot order.
pub struct CtrGrads {
    user_table: Matrix,
    item_table: Matrix,
    ctx_tables: Vec<Matrix>,
    user_adaptor: Vec<MlpGrads>,
    item_adaptor: Vec<MlpGrads>,
    head: Vec<MlpGrads>,
    lora: Option<LoraGrads>,
}

impl CtrGrads {
    pub fn zeros_like(model: &CtrModel) -> Self {
        CtrGrads {
            user_table: Matrix::zeros(model.user_table.rows(), model.user_table.cols()),
            item_table: Matrix::zeros(model.item_table.rows(), model.item_table.cols()),
            ctx_tables: model
                .ctx_tables
                .iter()
                .map(|t| Matrix::zeros(t.rows(), t.cols()))
                .collect(),
            user_adaptor: model
                .adaptors
                .user_adaptor
                .iter()
                .map(MlpGrads::zeros_like)
                .collect(),
            item_adaptor: model
                .adaptors
                .item_adaptor
                .iter()
                .map(MlpGrads::zeros_like)
                .collect(),
            head: model.head.iter().map(MlpGrads::zeros_like).collect(),
            lora: model.student.lora.as_ref().map(LoraGrads::zeros_like),
        }
    }
}

/// Backward for one row given dL/dlogit. Semantic upstreams are summed into
/// the cache; call [`flush_semantic_backward`] once per batch to push them
/// through the adaptors and LoRA.
pub fn backward_row(
    model: &CtrModel,
    cache: &mut EmbedCache,
    tape: &RowTape,
    dlogit: f64,
    grads: &mut CtrGrads,
) -> Result<()> {
    let (dconcat, head_grads) = stack_backward(&model.head, &tape.head_tapes, &[dlogit])?;
    for (acc, g) in grads.head.iter_mut().zip(head_grads) {
        acc.add(&g);
    }
    let d_id = model.config.d_id;
    let d_proj = model.config.d_proj;
    let mut off = 0;
    for (r, v) in grads
        .user_table
        .row_mut(tape.user_row)
        .iter_mut()
        .zip(&dconcat[off..off + d_id])
    {
        *r += v;
    }
    off += d_id;
    for (r, v) in grads
        .item_table
        .row_mut(tape.item_row)
        .iter_mut()
        .zip(&dconcat[off..off + d_id])
    {
        *r += v;
    }
    off += d_id;
    for (t, &row_idx) in tape.ctx_rows.iter().enumerate() {
        for (r, v) in grads.ctx_tables[t]
            .row_mut(row_idx)
            .iter_mut()
            .zip(&dconcat[off..off + d_id])
        {
            *r += v;
        }
        off += d_id;
    }
    if let Some(key) = tape.user_key {
        let entry = cache.entries.get_mut(&key).expect("cached user entry");
        for (u, v) in entry.upstream.iter_mut().zip(&dconcat[off..off + d_proj]) {
            *u += v;
        }
    }
    off += d_proj;
    if let Some(key) = tape.target_key {
        let entry = cache.entries.get_mut(&key).expect("cached target entry");
        for (u, v) in entry.upstream.iter_mut().zip(&dconcat[off..off + d_proj]) {
            *u += v;
        }
    }
    off += d_proj;
    if let Some(fusion) = &tape.fusion {
        let upstream = &dconcat[off..off + d_proj];
        let (_, d_hist) = fusion_backward(fusion, tape.history_keys.len(), upstream);
        for (key, dh) in tape.history_keys.iter().zip(d_hist) {
            let entry = cache.entries.get_mut(key).expect("cached history entry");
            for (u, v) in entry.upstream.iter_mut().zip(&dh) {
                *u += v;
            }
        }
    }
    Ok(())
}

/// Pushes the per-subject summed upstreams through the adaptor stacks and
/// the LoRA-wrapped embedding path. Call once per batch after all
/// [`backward_row`] calls.
pub fn flush_semantic_backward(
    model: &CtrModel,
    cache: &mut EmbedCache,
    grads: &mut CtrGrads,
) -> Result<()> {
    let mut keys: Vec<SubjectKey> = cache.entries.keys().copied().collect();
    keys.sort(); // deterministic reduction order
    for key in keys {
        let entry = cache.entries.get(&key).expect("key just listed");
        if entry.upstream.iter().all(|&v| v == 0.0) {
            continue;
        }
        let (stack, adaptor_grads) = match key {
            SubjectKey::User(_) => (
                &model.adaptors.user_adaptor,
                &mut grads.user_adaptor,
            ),
            SubjectKey::Item(_) => (
                &model.adaptors.item_adaptor,
                &mut grads.item_adaptor,
            ),
        };
        let (d_raw, layer_grads) = stack_backward(stack, &entry.proj_tapes, &entry.upstream)?;
        for (acc, g) in adaptor_grads.iter_mut().zip(layer_grads) {
            acc.add(&g);
        }
        if let Some(lg) = embed_backward(&model.student, &entry.emb_tape, &d_raw)? {
            if let Some(acc) = grads.lora.as_mut() {
                acc.add(&lg);
            }
        }
    }
    Ok(())
}

fn apply_grads(model: &mut CtrModel, grads: &CtrGrads, opt: &mut Optimizer) -> Result<()> {
    let mut slot = 0usize;
    macro_rules! step {
        ($params:expr, $grads:expr) => {{
            opt.step(slot, $params, $grads)?;
            slot += 1;
        }};
    }
    step!(model.user_table.as_mut_slice(), grads.user_table.as_slice());
    step!(model.item_table.as_mut_slice(), grads.item_table.as_slice());
    for (t, g) in model.ctx_tables.iter_mut().zip(&grads.ctx_tables) {
        step!(t.as_mut_slice(), g.as_slice());
    }
    for (l, g) in model
        .adaptors
        .user_adaptor
        .iter_mut()
        .zip(&grads.user_adaptor)
    {
        step!(l.weight.as_mut_slice(), g.d_weight.as_slice());
        step!(&mut l.bias, &g.d_bias);
    }
    for (l, g) in model
        .adaptors
        .item_adaptor
        .iter_mut()
        .zip(&grads.item_adaptor)
    {
        step!(l.weight.as_mut_slice(), g.d_weight.as_slice());
        step!(&mut l.bias, &g.d_bias);
    }
    for (l, g) in model.head.iter_mut().zip(&grads.head) {
        step!(l.weight.as_mut_slice(), g.d_weight.as_slice());
        step!(&mut l.bias, &g.d_bias);
    }
    if let (Some(lora), Some(g)) = (model.student.lora.as_mut(), grads.lora.as_ref()) {
        step!(lora.a.as_mut_slice(), g.d_a.as_slice());
        step!(lora.b.as_mut_slice(), g.d_b.as_slice());
    }
    let _ = slot;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainCurvePoint {
    pub epoch: usize,
    pub train_loss: f64,
}

/// Binary cross-entropy training over interaction rows. Mini-batches with
/// fixed-order accumulation; the per-example masking rng is derived from
/// (run seed, row timestamp) so results do not depend on batch layout.
pub fn train(
    model: &mut CtrModel,
    ctx: &FeatureContext,
    rows: &[&InteractionRow],
    rng: &mut Rng,
) -> Result<Vec<TrainCurvePoint>> {
    if rows.is_empty() {
        return Err(Error::InvalidConfig("ctr training set is empty".into()));
    }
    let base_before = base_fingerprint(&model.student);
    let mut opt = Optimizer::adam(model.config.learning_rate);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut curve = Vec::new();
    for epoch in 0..model.config.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(model.config.batch_size) {
            let mut cache = EmbedCache::new();
            let mut grads = CtrGrads::zeros_like(model);
            let mut tapes = Vec::with_capacity(batch.len());
            for &idx in batch {
                let row = rows[idx];
                let mut mask_rng = rng.derive(row.timestamp);
                let tape =
                    forward(model, ctx, &mut cache, row, Mode::Train, Some(&mut mask_rng))?;
                tapes.push((idx, tape));
            }
            let scale = 1.0 / batch.len() as f64;
            for (idx, tape) in &tapes {
                let y = rows[*idx].label as f64;
                let p = tape.pctr.clamp(1e-12, 1.0 - 1e-12);
                epoch_loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
                let dlogit = (tape.pctr - y) * scale;
                backward_row(model, &mut cache, tape, dlogit, &mut grads)?;
            }
            seen += batch.len();
            flush_semantic_backward(model, &mut cache, &mut grads)?;
            apply_grads(model, &grads, &mut opt)?;
        }
        let mean = epoch_loss / seen as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged {
                step: epoch,
                detail: format!("epoch loss {mean}"),
            });
        }
        curve.push(TrainCurvePoint {
            epoch,
            train_loss: mean,
        });
    }
    debug_assert_eq!(base_fingerprint(&model.student), base_before);
    Ok(curve)
}

/// Scores rows in inference mode (no masking, pure function).
pub fn score_rows(
    model: &CtrModel,
    ctx: &FeatureContext,
    rows: &[&InteractionRow],
) -> Result<Vec<f64>> {
    let mut cache = EmbedCache::new();
    rows.iter()
        .map(|row| forward(model, ctx, &mut cache, row, Mode::Inference, None).map(|t| t.pctr))
        .collect()
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// AUC by the rank-sum (Mann-Whitney) formula with midranks for ties:
///
/// ```text
/// AUC = (Σ ranks(positives) − n_pos(n_pos+1)/2) / (n_pos · n_neg)
/// ```
///
/// O(n log n); computed as an exact integer numerator over 2·n_pos·n_neg,
/// so the result is bit-identical to pairwise counting with ties worth one
/// half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            op: "auc",
            expected: scores.len(),
            got: labels.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "auc needs both positive and negative labels".into(),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            op: "auc",
            detail: "non-finite score".into(),
        });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // Twice the rank sum of positives stays integral under midranks.
    let mut twice_pos_rank_sum: f64 = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share a midrank; twice it is (i + j + 2).
        let twice_rank = (i + j + 2) as f64;
        for &k in &idx[i..=j] {
            if labels[k] == 1 {
                twice_pos_rank_sum += twice_rank;
            }
        }
        i = j + 1;
    }
    let numerator = twice_pos_rank_sum - (n_pos * (n_pos + 1)) as f64;
    Ok(numerator / (2.0 * n_pos as f64 * n_neg as f64))
}

/// O(n²) pairwise counting oracle: concordant pairs count 1, ties ½.
pub fn auc_pairwise_oracle(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("single-class input".into()));
    }
    let mut numerator = 0u64; // 2·concordant + ties
    for (i, &li) in labels.iter().enumerate() {
        if li != 1 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0 {
                continue;
            }
            if scores[i] > scores[j] {
                numerator += 2;
            } else if scores[i] == scores[j] {
                numerator += 1;
            }
        }
    }
    Ok(numerator as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Mean binary cross-entropy.
pub fn logloss(scores: &[f64], labels: &[u8]) -> f64 {
    let mut total = 0.0;
    for (s, &l) in scores.iter().zip(labels) {
        let p = s.clamp(1e-12, 1.0 - 1e-12);
        total -= if l == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    total / scores.len().max(1) as f64
}

/// Relative improvement over a baseline, measured against the random-AUC
/// floor: `((auc_model − 0.5) / (auc_base − 0.5) − 1) · 100`.
pub fn relaimpr(auc_model: f64, auc_base: f64) -> Result<f64> {
    if auc_base <= 0.5 {
        return Err(Error::UndefinedMetric(format!(
            "relaimpr undefined for baseline auc {auc_base} ≤ 0.5"
        )));
    }
    Ok(((auc_model - 0.5) / (auc_base - 0.5) - 1.0) * 100.0)
}

/// Evaluation summary for one trained variant.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub variant: String,
    pub auc: f64,
    pub logloss: f64,
    /// Percent improvement vs the named baseline, when one was supplied.
    pub relaimpr_vs_baseline: Option<(String, f64)>,
    pub n_examples: usize,
    pub seed: u64,
}

impl EvalReport {
    /// Key=value lines, one per field.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("variant={}\n", self.variant));
        s.push_str(&format!("auc={:.6}\n", self.auc));
        s.push_str(&format!("logloss={:.6}\n", self.logloss));
        if let Some((base, r)) = &self.relaimpr_vs_baseline {
            s.push_str(&format!("baseline={base}\n"));
            s.push_str(&format!("relaimpr_pct={r:.4}\n"));
        }
        s.push_str(&format!("n_examples={}\n", self.n_examples));
        s.push_str(&format!("seed={}\n", self.seed));
        s
    }

    /// Single TSV row (header written by the caller).
    pub fn to_tsv_row(&self) -> String {
        let (base, r) = self
            .relaimpr_vs_baseline
            .as_ref()
            .map(|(b, r)| (b.as_str(), format!("{r:.4}")))
            .unwrap_or(("-", "-".to_string()));
        format!(
            "{}\t{:.6}\t{:.6}\t{}\t{}\t{}\t{}",
            self.variant, self.auc, self.logloss, base, r, self.n_examples, self.seed
        )
    }

    pub const TSV_HEADER: &'static str =
        "variant\tauc\tlogloss\tbaseline\trelaimpr_pct\tn_examples\tseed";
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CTR_MAGIC: &[u8; 4] = b"MSDC";
const CTR_VERSION: u32 = 1;

fn variant_tag(v: Variant) -> u32 {
    match v {
        Variant::Full => 0,
        Variant::NoLora => 1,
        Variant::NoItemFusion => 2,
        Variant::NoUserLevel => 3,
        Variant::IdOnly => 4,
    }
}

fn variant_from_tag(t: u32) -> Result<Variant> {
    Ok(match t {
        0 => Variant::Full,
        1 => Variant::NoLora,
        2 => Variant::NoItemFusion,
        3 => Variant::NoUserLevel,
        4 => Variant::IdOnly,
        other => return Err(Error::InvalidConfig(format!("unknown variant tag {other}"))),
    })
}

/// Writes the CTR checkpoint: header (magic, version, variant, table and
/// layer dimensions) then parameter blocks as little-endian 32-bit floats
/// in the order ID tables, context tables, user adaptor, item adaptor,
/// head, LoRA a/b (when present). The frozen student lives in its own
/// checkpoint.
pub fn write_ctr(model: &CtrModel, path: &Path) -> Result<()> {
    use crate::distill::push_block_f32;
    let mut buf = Vec::new();
    buf.extend_from_slice(CTR_MAGIC);
    let lora = model.student.lora.as_ref();
    let header: [u32; 9] = [
        CTR_VERSION,
        variant_tag(model.variant),
        model.n_users as u32,
        model.n_items as u32,
        model.config.d_id as u32,
        model.config.d_proj as u32,
        model.ctx_tables.len() as u32,
        model.head.len() as u32,
        lora.map_or(0, |l| l.rank as u32),
    ];
    for v in header {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for t in &model.ctx_tables {
        buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
    }
    for l in &model.head {
        buf.extend_from_slice(&(l.d_out() as u32).to_le_bytes());
    }
    push_block_f32(&mut buf, model.user_table.as_slice());
    push_block_f32(&mut buf, model.item_table.as_slice());
    for t in &model.ctx_tables {
        push_block_f32(&mut buf, t.as_slice());
    }
    for l in model
        .adaptors
        .user_adaptor
        .iter()
        .chain(&model.adaptors.item_adaptor)
        .chain(&model.head)
    {
        push_block_f32(&mut buf, l.weight.as_slice());
        push_block_f32(&mut buf, &l.bias);
    }
    if let Some(l) = lora {
        push_block_f32(&mut buf, l.a.as_slice());
        push_block_f32(&mut buf, l.b.as_slice());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Loads a CTR checkpoint on top of a freshly constructed model of the same
/// shape (the student checkpoint is loaded separately and supplied here).
pub fn read_ctr(
    path: &Path,
    student: StudentModel,
    corpus: &Corpus,
    config: &CtrConfig,
) -> Result<CtrModel> {
    use crate::distill::read_block_f32;
    let data = std::fs::read(path)?;
    let mut r: &[u8] = &data;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| bad(path, "truncated magic"))?;
    if &magic != CTR_MAGIC {
        return Err(bad(path, "bad magic"));
    }
    let mut head9 = [0u32; 9];
    for slot in &mut head9 {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|_| bad(path, "truncated header"))?;
        *slot = u32::from_le_bytes(b);
    }
    let [version, vtag, n_users, n_items, d_id, d_proj, n_ctx, n_head, lora_rank] = head9;
    if version != CTR_VERSION {
        return Err(bad(path, format!("unsupported version {version}")));
    }
    let variant = variant_from_tag(vtag)?;
    let mut skip = vec![0u8; (n_ctx + n_head) as usize * 4];
    r.read_exact(&mut skip)
        .map_err(|_| bad(path, "truncated layout"))?;

    // Rebuild the skeleton with a fixed seed; every parameter is then
    // overwritten from the file.
    let mut model = CtrModel::new(variant, student, corpus, config, &mut Rng::from_seed(0))?;
    if model.n_users != n_users as usize
        || model.n_items != n_items as usize
        || model.config.d_id != d_id as usize
        || model.config.d_proj != d_proj as usize
        || model.ctx_tables.len() != n_ctx as usize
        || model.head.len() != n_head as usize
        || model.student.lora.as_ref().map_or(0, |l| l.rank) != lora_rank as usize
    {
        return Err(bad(path, "checkpoint shape does not match config/corpus"));
    }
    {
        let load = |dst: &mut [f64], r: &mut &[u8]| -> Result<()> {
            let block = read_block_f32(r, dst.len(), path)?;
            dst.copy_from_slice(&block);
            Ok(())
        };
        load(model.user_table.as_mut_slice(), &mut r)?;
        load(model.item_table.as_mut_slice(), &mut r)?;
        for t in &mut model.ctx_tables {
            load(t.as_mut_slice(), &mut r)?;
        }
        for l in model
            .adaptors
            .user_adaptor
            .iter_mut()
            .chain(model.adaptors.item_adaptor.iter_mut())
            .chain(model.head.iter_mut())
        {
            load(l.weight.as_mut_slice(), &mut r)?;
            load(&mut l.bias, &mut r)?;
        }
        if let Some(l) = model.student.lora.as_mut() {
            load(l.a.as_mut_slice(), &mut r)?;
            load(l.b.as_mut_slice(), &mut r)?;
        }
    }
    if !r.is_empty() {
        return Err(bad(path, "trailing bytes"));
    }
    Ok(model)
}

fn bad(path: &Path, detail: impl Into<String>) -> Error {
    Error::BadArtifact {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::{semantic_embedding, StudentConfig, Vocab};
    use crate::numerics::grad_check;
    use crate::synth::{generate_corpus, SynthConfig};

    fn tiny_corpus(seed: u64) -> Corpus {
        let cfg = SynthConfig {
            n_items: 20,
            n_users: 12,
            n_rows: 150,
            max_history: 4,
            ..SynthConfig::default()
        };
        generate_corpus(&cfg, &mut Rng::from_seed(seed)).unwrap()
    }

    fn tiny_student(corpus: &Corpus, seed: u64) -> StudentModel {
        let texts: Vec<String> = corpus
            .catalog
            .items()
            .iter()
            .map(|i| i.text.clone())
            .collect();
        let refs: Vec<&str> = texts.iter().map(|s| s.as_str()).collect();
        let vocab = Vocab::build(refs);
        StudentModel::new(
            vocab,
            StudentConfig {
                window: 3,
                d_tok: 5,
                d_hidden: 6,
            },
            &mut Rng::from_seed(seed),
        )
    }

    fn tiny_config() -> CtrConfig {
        CtrConfig {
            d_id: 4,
            d_proj: 5,
            head_hidden: vec![8],
            k_top: 2,
            p_max: 0.5,
            lora_rank: 2,
            lora_alpha: 2.0,
            epochs: 1,
            batch_size: 16,
            learning_rate: 0.02,
        }
    }

    #[test]
    fn zero_head_gives_exactly_half() {
        let corpus = tiny_corpus(1);
        let student = tiny_student(&corpus, 2);
        let mut model = CtrModel::new(
            Variant::Full,
            student,
            &corpus,
            &tiny_config(),
            &mut Rng::from_seed(3),
        )
        .unwrap();
        for l in &mut model.head {
            l.weight.fill(0.0);
            l.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let ctx = FeatureContext::new(&corpus).unwrap();
        let mut cache = EmbedCache::new();
        let tape =
            forward(&model, &ctx, &mut cache, &corpus.rows[0], Mode::Inference, None).unwrap();
        assert_eq!(tape.pctr, 0.5);
    }

    #[test]
    fn id_only_ignores_semantic_perturbations() {
        let corpus = tiny_corpus(4);
        let student = tiny_student(&corpus, 5);
        let model = CtrModel::new(
            Variant::IdOnly,
            student,
            &corpus,
            &tiny_config(),
            &mut Rng::from_seed(6),
        )
        .unwrap();
        let ctx = FeatureContext::new(&corpus).unwrap();
        let row = &corpus.rows[3];
        let mut cache = EmbedCache::new();
        let p1 = forward(&model, &ctx, &mut cache, row, Mode::Inference, None)
            .unwrap()
            .pctr;
        // Perturb everything semantic: student embeddings and adaptors.
        let mut perturbed = model.clone();
        perturbed.student.embedding.scale(3.7);
        for l in &mut perturbed.adaptors.item_adaptor {
            l.weight.scale(-2.0);
        }
        let mut cache = EmbedCache::new();
        let p2 = forward(&perturbed, &ctx, &mut cache, row, Mode::Inference, None)
            .unwrap()
            .pctr;
        assert_eq!(p1, p2);
    }

    #[test]
    fn forward_matches_composed_module_oracles() {
        let corpus = tiny_corpus(7);
        let student = tiny_student(&corpus, 8);
        let model = CtrModel::new(
            Variant::Full,
            student,
            &corpus,
            &tiny_config(),
            &mut Rng::from_seed(9),
        )
        .unwrap();
        let ctx = FeatureContext::new(&corpus).unwrap();
        let row = corpus
            .rows
            .iter()
            .find(|r| !r.history.is_empty())
            .expect("a row with history");
        let mut cache = EmbedCache::new();
        let tape = forward(&model, &ctx, &mut cache, row, Mode::Inference, None).unwrap();

        // Oracle: recompute feature blocks with the public module APIs.
        let (e_u, _) =
            semantic_embedding(&model.student, &corpus.user_text(row.user_id).unwrap()).unwrap();
        let target_text = &corpus.catalog.get(row.target_item_id).unwrap().text;
        let (e_t, _) = semantic_embedding(&model.student, target_text).unwrap();
        let hist_raw: Vec<Vec<f64>> = row
            .history
            .iter()
            .map(|h| {
                semantic_embedding(&model.student, &corpus.catalog.get(*h).unwrap().text)
                    .unwrap()
                    .0
            })
            .collect();
        let proj = crate::fusion::project(&model.adaptors, &e_u, &e_t, &hist_raw).unwrap();
        let freqs: Vec<u64> = row.history.iter().map(|h| ctx.frequency(*h)).collect();
        let fused = fuse_relevant_items(
            &proj.target,
            &proj.history,
            &freqs,
            &FusionConfig::inference(model.config.k_top),
            None,
        )
        .unwrap();
        let mut concat = Vec::new();
        concat.extend_from_slice(model.user_table.row(row.user_id.0 as usize + 1));
        concat.extend_from_slice(model.item_table.row(row.target_item_id.0 as usize + 1));
        for (t, table) in model.ctx_tables.iter().enumerate() {
            concat.extend_from_slice(table.row(row.context[t] as usize));
        }
        concat.extend_from_slice(&proj.user);
        concat.extend_from_slice(&proj.target);
        concat.extend_from_slice(&fused.e_item);
        let (out, _) = stack_forward(&model.head, &concat).unwrap();
        assert!((tape.pctr - sigmoid(out[0])).abs() < 1e-12);
    }

    #[test]
    fn oov_ids_use_reserved_row_without_crashing() {
        let corpus = tiny_corpus(10);
        let student = tiny_student(&corpus, 11);
        let model = CtrModel::new(
            Variant::IdOnly,
            student,
            &corpus,
            &tiny_config(),
            &mut Rng::from_seed(12),
        )
        .unwrap();
        let ctx = FeatureContext::new(&corpus).unwrap();
        let mut row = corpus.rows[0].clone();
        row.user_id = UserId(9_999);
        row.target_item_id = ItemId(9_999);
        let mut cache = EmbedCache::new();
        let tape = forward(&model, &ctx, &mut cache, &row, Mode::Inference, None).unwrap();
        assert!(tape.pctr > 0.0 && tape.pctr < 1.0);
        assert_eq!(tape.user_row, 0);
        assert_eq!(tape.item_row, 0);
    }

    #[test]
    fn separable_toy_set_is_memorized() {
        let corpus = tiny_corpus(13);
        let student = tiny_student(&corpus, 14);
        let mut cfg = tiny_config();
        cfg.epochs = 200;
        cfg.batch_size = 2;
        cfg.learning_rate = 0.05;
        let mut model = CtrModel::new(
            Variant::IdOnly,
            student,
            &corpus,
            &cfg,
            &mut Rng::from_seed(15),
        )
        .unwrap();
        let ctx = FeatureContext::new(&corpus).unwrap();
        let mut r0 = corpus.rows[0].clone();
        r0.user_id = UserId(0);
        r0.target_item_id = ItemId(0);
        r0.label = 1;
        let mut r1 = corpus.rows[1].clone();
        r1.user_id = UserId(1);
        r1.target_item_id = ItemId(1);
        r1.label = 0;
        let rows = [&r0, &r1];
        let curve = train(&mut model, &ctx, &rows, &mut Rng::from_seed(16)).unwrap();
        let final_loss = curve.last().unwrap().train_loss;
        assert!(final_loss < 0.05, "loss {final_loss}");
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let corpus = tiny_corpus(17);
        let student = tiny_student(&corpus, 18);
        let mut cfg = tiny_config();
        cfg.learning_rate = 0.0;
        let mut model = CtrModel::new(
            Variant::Full,
            student,
            &corpus,
            &cfg,
            &mut Rng::from_seed(19),
        )
        .unwrap();
        let before_head: Vec<f64> = model.head[0].weight.as_slice().to_vec();
        let before_user: Vec<f64> = model.user_table.as_slice().to_vec();
        let ctx = FeatureContext::new(&corpus).unwrap();
        let rows: Vec<&InteractionRow> = corpus.rows.iter().take(30).collect();
        train(&mut model, &ctx, &rows, &mut Rng::from_seed(20)).unwrap();
        assert_eq!(model.head[0].weight.as_slice(), &before_head[..]);
        assert_eq!(model.user_table.as_slice(), &before_user[..]);
    }

    #[test]
    fn student_base_is_frozen_through_training() {
        let corpus = tiny_corpus(21);
        let student = tiny_student(&corpus, 22);
        let mut model = CtrModel::new(
            Variant::Full,
            student,
            &corpus,
            &tiny_config(),
            &mut Rng::from_seed(23),
        )
        .unwrap();
        let fp_before = base_fingerprint(&model.student);
        let lora_b_before = model.student.lora.as_ref().unwrap().b.as_slice().to_vec();
        let ctx = FeatureContext::new(&corpus).unwrap();
        let rows: Vec<&InteractionRow> = corpus.rows.iter().take(60).collect();
        train(&mut model, &ctx, &rows, &mut Rng::from_seed(24)).unwrap();
        assert_eq!(base_fingerprint(&model.student), fp_before);
        // LoRA b must have moved (it starts at zero).
        assert_ne!(
            model.student.lora.as_ref().unwrap().b.as_slice(),
            &lora_b_before[..]
        );
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let corpus = tiny_corpus(25);
        let student = tiny_student(&corpus, 26);
        let mut model = CtrModel::new(
            Variant::Full,
            student,
            &corpus,
            &tiny_config(),
            &mut Rng::from_seed(27),
        )
        .unwrap();
        // Non-zero LoRA factors so their gradients are non-trivial.
        {
            let lora = model.student.lora.as_mut().unwrap();
            lora.a = Matrix::uniform(lora.a.rows(), lora.a.cols(), 0.3, &mut Rng::from_seed(28));
            lora.b = Matrix::uniform(lora.b.rows(), lora.b.cols(), 0.3, &mut Rng::from_seed(29));
        }
        let ctx = FeatureContext::new(&corpus).unwrap();
        let row = corpus
            .rows
            .iter()
            .find(|r| r.history.len() >= 2)
            .expect("row with history");
        let y = 1.0;

        // Inference mode keeps the top-k selection deterministic; generic
        // parameters keep it stable under the finite-difference steps.
        let mut cache = EmbedCache::new();
        let tape = forward(&model, &ctx, &mut cache, row, Mode::Inference, None).unwrap();
        let mut grads = CtrGrads::zeros_like(&model);
        backward_row(&model, &mut cache, &tape, tape.pctr - y, &mut grads).unwrap();
        flush_semantic_backward(&model, &mut cache, &mut grads).unwrap();

        let flatten = |m: &CtrModel| -> Vec<f64> {
            let mut v = m.user_table.as_slice().to_vec();
            v.extend_from_slice(m.item_table.as_slice());
            for t in &m.ctx_tables {
                v.extend_from_slice(t.as_slice());
            }
            for l in m
                .adaptors
                .user_adaptor
                .iter()
                .chain(&m.adaptors.item_adaptor)
                .chain(&m.head)
            {
                v.extend_from_slice(l.weight.as_slice());
                v.extend_from_slice(&l.bias);
            }
            let lora = m.student.lora.as_ref().unwrap();
            v.extend_from_slice(lora.a.as_slice());
            v.extend_from_slice(lora.b.as_slice());
            v
        };
        let params = flatten(&model);
        let mut analytic = grads.user_table.as_slice().to_vec();
        analytic.extend_from_slice(grads.item_table.as_slice());
        for t in &grads.ctx_tables {
            analytic.extend_from_slice(t.as_slice());
        }
        for g in grads
            .user_adaptor
            .iter()
            .chain(&grads.item_adaptor)
            .chain(&grads.head)
        {
            analytic.extend_from_slice(g.d_weight.as_slice());
            analytic.extend_from_slice(&g.d_bias);
        }
        let lg = grads.lora.as_ref().unwrap();
        analytic.extend_from_slice(lg.d_a.as_slice());
        analytic.extend_from_slice(lg.d_b.as_slice());

        let unflatten = |m: &mut CtrModel, p: &[f64]| {
            let mut off = 0;
            let mut put = |dst: &mut [f64], off: &mut usize| {
                dst.copy_from_slice(&p[*off..*off + dst.len()]);
                *off += dst.len();
            };
            put(m.user_table.as_mut_slice(), &mut off);
            put(m.item_table.as_mut_slice(), &mut off);
            for t in &mut m.ctx_tables {
                put(t.as_mut_slice(), &mut off);
            }
            for l in m
                .adaptors
                .user_adaptor
                .iter_mut()
                .chain(m.adaptors.item_adaptor.iter_mut())
                .chain(m.head.iter_mut())
            {
                put(l.weight.as_mut_slice(), &mut off);
                put(&mut l.bias, &mut off);
            }
            let lora = m.student.lora.as_mut().unwrap();
            put(lora.a.as_mut_slice(), &mut off);
            put(lora.b.as_mut_slice(), &mut off);
            assert_eq!(off, p.len());
        };

        let err = grad_check(&params, &analytic, 1e-6, |p| {
            let mut m = model.clone();
            unflatten(&mut m, p);
            let mut cache = EmbedCache::new();
            let t = forward(&m, &ctx, &mut cache, row, Mode::Inference, None)?;
            let pc = t.pctr.clamp(1e-12, 1.0 - 1e-12);
            Ok(-(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln()))
        })
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = tiny_corpus(30);
        let run = || {
            let student = tiny_student(&corpus, 31);
            let mut model = CtrModel::new(
                Variant::Full,
                student,
                &corpus,
                &tiny_config(),
                &mut Rng::from_seed(32),
            )
            .unwrap();
            let ctx = FeatureContext::new(&corpus).unwrap();
            let rows: Vec<&InteractionRow> = corpus.rows.iter().collect();
            train(&mut model, &ctx, &rows, &mut Rng::from_seed(33)).unwrap();
            let scores = score_rows(&model, &ctx, &rows[..20]).unwrap();
            (scores, model.head[0].weight.as_slice().to_vec())
        };
        let (s1, w1) = run();
        let (s2, w2) = run();
        assert_eq!(s1, s2);
        for (a, b) in w1.iter().zip(&w2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn auc_perfectly_ordered_is_one() {
        let scores = [0.1, 0.2, 0.8, 0.9];
        let labels = [0, 0, 1, 1];
        assert_eq!(auc(&scores, &labels).unwrap(), 1.0);
    }

    #[test]
    fn auc_hand_case_is_half() {
        // One concordant of two (pos, neg) pairs: AUC 0.5.
        let scores = [0.9, 0.8, 0.3];
        let labels = [1, 0, 1];
        assert_eq!(auc(&scores, &labels).unwrap(), 0.5);
    }

    #[test]
    fn auc_all_ties_is_half() {
        let scores = [0.4, 0.4, 0.4, 0.4];
        let labels = [1, 0, 1, 0];
        assert_eq!(auc(&scores, &labels).unwrap(), 0.5);
    }

    #[test]
    fn auc_single_class_is_undefined() {
        assert!(auc(&[0.1, 0.9], &[1, 1]).is_err());
        assert!(auc(&[0.1, 0.9], &[0, 0]).is_err());
    }

    #[test]
    fn auc_equals_pairwise_oracle_exactly() {
        let mut rng = Rng::from_seed(34);
        for case in 0..300 {
            let n = 2 + rng.below(199) as usize;
            // Tie-heavy scores from a small grid.
            let scores: Vec<f64> = (0..n).map(|_| rng.below(7) as f64 / 6.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.bernoulli(0.4) as u8).collect();
            labels[0] = 1;
            if n > 1 {
                labels[1] = 0;
            }
            let fast = auc(&scores, &labels).unwrap();
            let slow = auc_pairwise_oracle(&scores, &labels).unwrap();
            assert_eq!(
                fast.to_bits(),
                slow.to_bits(),
                "case {case}: {fast} vs {slow}"
            );
        }
    }

    #[test]
    fn relaimpr_matches_reference_arithmetic() {
        // Reported comparison-table row: model vs the 0.00% baseline.
        let r = relaimpr(0.7792, 0.7763).unwrap();
        assert!((r - 1.05).abs() < 0.005, "first dataset row: {r}");
        // The second dataset's printed AUCs give 7.688%; the printed 7.64
        // is not reproducible from the printed AUC column (the acceptance
        // suite reports this discrepancy).
        let r = relaimpr(0.7087, 0.6938).unwrap();
        assert!((r - 7.6883).abs() < 0.005, "second dataset row: {r}");
    }

    #[test]
    fn relaimpr_identity_and_floor() {
        assert_eq!(relaimpr(0.7, 0.7).unwrap(), 0.0);
        assert!(relaimpr(0.7, 0.5).is_err());
        assert!(relaimpr(0.7, 0.42).is_err());
    }

    #[test]
    fn ctr_checkpoint_roundtrip() {
        let corpus = tiny_corpus(35);
        let student = tiny_student(&corpus, 36);
        let mut model = CtrModel::new(
            Variant::Full,
            student.clone(),
            &corpus,
            &tiny_config(),
            &mut Rng::from_seed(37),
        )
        .unwrap();
        // Train briefly so parameters are non-trivial.
        let ctx = FeatureContext::new(&corpus).unwrap();
        let rows: Vec<&InteractionRow> = corpus.rows.iter().take(40).collect();
        train(&mut model, &ctx, &rows, &mut Rng::from_seed(38)).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ctr.bin");
        write_ctr(&model, &path).unwrap();
        let back = read_ctr(&path, student, &corpus, &tiny_config()).unwrap();
        assert_eq!(back.variant, model.variant);
        // Writing the reloaded model again is byte-identical.
        let path2 = dir.path().join("ctr2.bin");
        write_ctr(&back, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn eval_report_renders_both_formats() {
        let rep = EvalReport {
            variant: "full".into(),
            auc: 0.7123,
            logloss: 0.55,
            relaimpr_vs_baseline: Some(("id_only".into(), 12.5)),
            n_examples: 100,
            seed: 7,
        };
        let text = rep.to_text();
        assert!(text.contains("auc=0.712300"));
        assert!(text.contains("baseline=id_only"));
        let row = rep.to_tsv_row();
        assert!(row.starts_with("full\t"));
    }
}
