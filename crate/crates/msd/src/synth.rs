//! Seeded synthetic corpus: items with attribute semantics, users with
//! latent tag preferences, and click logs in which those semantics causally
//! drive the labels.
//!
//! The ground-truth click model is
//!
//! ```text
//! P(click) = sigmoid(base + beta · affinity_weight · affinity(user, item)
//!                         + popularity_weight · popularity_z(item))
//! ```
//!
//! where `affinity` is the fraction of the user's preferred tags carried by
//! the item (explicit tags plus rule-implied ones) and `popularity_z` is a
//! standardized per-item popularity score. `base` is calibrated by bisection
//! so the expected positive rate hits the configured target. With `beta = 0`
//! clicks are independent of semantics.
//!
//! Item popularity is Zipf-distributed (`s = zipf_exponent`) over item index;
//! targets and profile items are drawn from that distribution, so exposure
//! counts inherit the heavy tail.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::layer::sigmoid;
use crate::numerics::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ItemId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UserId(pub u64);

impl std::fmt::Display for ItemId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::fmt::Display for UserId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

// Word pools; every entry is a single alphanumeric token so item text
// tokenizes one-to-one. Explicit and implicit tag pools are disjoint.
const CATEGORY_POOL: &[&str] = &[
    "icecream", "yogurt", "granola", "tea", "chocolate", "soda", "cookies", "chips",
];
const BRAND_POOL: &[&str] = &[
    "frostbite", "alpenglow", "nordberg", "sunpeak", "velota", "marzano", "kyoshi", "lumen",
    "orchardo", "baltica", "quarzo", "hearthside",
];
const FLAVOR_POOL: &[&str] = &[
    "strawberry", "vanilla", "matcha", "caramel", "espresso", "peach", "hazelnut", "mango",
    "blueberry", "mint",
];
const EXPLICIT_TAG_POOL: &[&str] = &[
    "organic", "lowsugar", "vegan", "glutenfree", "spicy", "crunchy", "creamy", "zesty", "smoky",
    "herbal", "chilled", "fizzy",
];
const IMPLICIT_TAG_POOL: &[&str] = &[
    "premium", "budget", "healthy", "indulgent", "artisanal", "classic",
];

/// Explicit tag vocabulary plus the deterministic rules that imply further
/// tags from a brand or category. The two tag sets are disjoint.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeVocab {
    pub explicit_tags: Vec<String>,
    pub implicit_tags: Vec<String>,
    pub brand_rules: BTreeMap<String, String>,
    pub category_rules: BTreeMap<String, String>,
}

impl AttributeVocab {
    /// Builds the vocabulary for a config. Pure function of the config, so
    /// downstream stages can reconstruct it without an extra artifact file.
    /// Every fourth brand and the last category carry no rule, so items with
    /// an empty implicit set exist.
    pub fn for_config(cfg: &SynthConfig) -> Self {
        let explicit_tags: Vec<String> = EXPLICIT_TAG_POOL[..cfg.n_explicit_tags]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let implicit_tags: Vec<String> = IMPLICIT_TAG_POOL[..cfg.n_implicit_tags]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut brand_rules = BTreeMap::new();
        for (i, brand) in BRAND_POOL[..cfg.n_brands].iter().enumerate() {
            if i % 4 != 3 {
                brand_rules.insert(brand.to_string(), implicit_tags[i % implicit_tags.len()].clone());
            }
        }
        let mut category_rules = BTreeMap::new();
        for (i, cat) in CATEGORY_POOL[..cfg.n_categories].iter().enumerate() {
            if i + 1 != cfg.n_categories {
                category_rules
                    .insert(cat.to_string(), implicit_tags[(2 * i + 1) % implicit_tags.len()].clone());
            }
        }
        AttributeVocab {
            explicit_tags,
            implicit_tags,
            brand_rules,
            category_rules,
        }
    }

    /// Implied tags for a brand/category pair: brand rule first, then
    /// category rule, deduplicated.
    pub fn implicit_for(&self, brand: &str, category: &str) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(t) = self.brand_rules.get(brand) {
            out.push(t.clone());
        }
        if let Some(t) = self.category_rules.get(category) {
            if !out.contains(t) {
                out.push(t.clone());
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: ItemId,
    pub category: String,
    pub brand: String,
    /// Explicit attribute tags; each appears verbatim in `text`.
    pub tags: Vec<String>,
    /// Surface text: brand, flavor, tags, category noun.
    pub text: String,
    /// Number of times the item was shown as a target (impressions).
    pub exposure_count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemCatalog {
    items: Vec<Item>,
}

impl ItemCatalog {
    pub fn from_items(items: Vec<Item>) -> Self {
        ItemCatalog { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: ItemId) -> Result<&Item> {
        self.items.get(id.0 as usize).ok_or(Error::UnknownId {
            kind: "item",
            id: id.0,
        })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    /// Distinct categories present, in first-appearance order.
    pub fn categories(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for it in &self.items {
            if !seen.contains(&it.category) {
                seen.push(it.category.clone());
            }
        }
        seen
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserProfile {
    pub id: UserId,
    /// Latent preference tags driving the ground-truth click model. May mix
    /// explicit and implicit tags.
    pub preferred_tags: Vec<String>,
    /// Static interest anchors; the source of the user-level text.
    pub profile_items: Vec<ItemId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionRow {
    pub user_id: UserId,
    pub target_item_id: ItemId,
    /// Previously clicked items, most recent last, length ≤ max_history.
    pub history: Vec<ItemId>,
    /// Small categorical context features.
    pub context: Vec<u32>,
    pub label: u8,
    /// Ordinal event time (row index).
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Stable 80/10/10 split by user id hash; independent of the run seed so
/// re-runs and variants share it.
pub fn split_of(user: UserId) -> Split {
    let mut s = user.0 ^ 0x5eed_5a17_u64;
    s = s.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = s;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    match z % 10 {
        8 => Split::Val,
        9 => Split::Test,
        _ => Split::Train,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_items: usize,
    pub n_users: usize,
    pub n_rows: usize,
    /// Semantic signal strength in [0, 1]; 0 disconnects clicks from tags.
    pub beta: f64,
    pub max_history: usize,
    pub target_positive_rate: f64,
    pub zipf_exponent: f64,
    pub n_categories: usize,
    pub n_brands: usize,
    pub n_flavors: usize,
    pub n_explicit_tags: usize,
    pub n_implicit_tags: usize,
    pub tags_per_item: usize,
    pub profile_items_per_user: usize,
    pub preferred_tags_per_user: usize,
    /// Preference bias when drawing profile items: weights are multiplied
    /// by exp(boost · tag-match fraction).
    pub profile_match_boost: f64,
    pub affinity_weight: f64,
    pub popularity_weight: f64,
    pub n_context_features: usize,
    pub context_cardinality: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_items: 400,
            n_users: 300,
            n_rows: 8_000,
            beta: 1.0,
            max_history: 8,
            target_positive_rate: 0.3,
            zipf_exponent: 1.1,
            n_categories: 5,
            n_brands: 10,
            n_flavors: 8,
            n_explicit_tags: 8,
            n_implicit_tags: 6,
            tags_per_item: 2,
            profile_items_per_user: 3,
            preferred_tags_per_user: 3,
            profile_match_boost: 2.5,
            affinity_weight: 5.0,
            popularity_weight: 0.6,
            n_context_features: 2,
            context_cardinality: 4,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_items == 0 {
            return Err(Error::InvalidConfig("synth.n_items must be positive".into()));
        }
        if self.n_users == 0 || self.n_rows == 0 {
            return Err(Error::InvalidConfig(
                "synth.n_users and synth.n_rows must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidConfig(format!(
                "synth.beta {} outside [0, 1]",
                self.beta
            )));
        }
        if self.max_history == 0 {
            return Err(Error::InvalidConfig("synth.max_history must be ≥ 1".into()));
        }
        if !(0.0 < self.target_positive_rate && self.target_positive_rate < 1.0) {
            return Err(Error::InvalidConfig(
                "synth.target_positive_rate must be in (0, 1)".into(),
            ));
        }
        if self.n_categories == 0 || self.n_categories > CATEGORY_POOL.len() {
            return Err(Error::InvalidConfig(format!(
                "synth.n_categories must be in [1, {}]",
                CATEGORY_POOL.len()
            )));
        }
        if self.n_brands == 0 || self.n_brands > BRAND_POOL.len() {
            return Err(Error::InvalidConfig(format!(
                "synth.n_brands must be in [1, {}]",
                BRAND_POOL.len()
            )));
        }
        if self.n_flavors == 0 || self.n_flavors > FLAVOR_POOL.len() {
            return Err(Error::InvalidConfig(format!(
                "synth.n_flavors must be in [1, {}]",
                FLAVOR_POOL.len()
            )));
        }
        if self.n_explicit_tags == 0 || self.n_explicit_tags > EXPLICIT_TAG_POOL.len() {
            return Err(Error::InvalidConfig(format!(
                "synth.n_explicit_tags must be in [1, {}]",
                EXPLICIT_TAG_POOL.len()
            )));
        }
        if self.n_implicit_tags == 0 || self.n_implicit_tags > IMPLICIT_TAG_POOL.len() {
            return Err(Error::InvalidConfig(format!(
                "synth.n_implicit_tags must be in [1, {}]",
                IMPLICIT_TAG_POOL.len()
            )));
        }
        if self.tags_per_item == 0 || self.tags_per_item > self.n_explicit_tags {
            return Err(Error::InvalidConfig(
                "synth.tags_per_item out of range for the tag pool".into(),
            ));
        }
        if self.preferred_tags_per_user == 0 || self.profile_items_per_user == 0 {
            return Err(Error::InvalidConfig(
                "synth per-user counts must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: SynthConfig,
    pub vocab: AttributeVocab,
    pub catalog: ItemCatalog,
    pub users: Vec<UserProfile>,
    pub rows: Vec<InteractionRow>,
    /// The calibrated base offset of the click model.
    pub base_offset: f64,
}

impl Corpus {
    pub fn user(&self, id: UserId) -> Result<&UserProfile> {
        self.users.get(id.0 as usize).ok_or(Error::UnknownId {
            kind: "user",
            id: id.0,
        })
    }

    /// User-level surface text: the texts of the profile items, concatenated.
    pub fn user_text(&self, id: UserId) -> Result<String> {
        let profile = self.user(id)?;
        let mut parts = Vec::new();
        for item in &profile.profile_items {
            parts.push(self.catalog.get(*item)?.text.clone());
        }
        Ok(parts.join(" ; "))
    }

    /// Ground-truth affinity: fraction of the user's preferred tags carried
    /// by the item (explicit plus implied).
    pub fn attribute_affinity(&self, user: UserId, item: ItemId) -> Result<f64> {
        let profile = self.user(user)?;
        let it = self.catalog.get(item)?;
        let mut all_tags = it.tags.clone();
        all_tags.extend(self.vocab.implicit_for(&it.brand, &it.category));
        let hits = profile
            .preferred_tags
            .iter()
            .filter(|t| all_tags.contains(t))
            .count();
        Ok(hits as f64 / profile.preferred_tags.len() as f64)
    }

    pub fn rows_in_split(&self, split: Split) -> impl Iterator<Item = &InteractionRow> {
        self.rows
            .iter()
            .filter(move |r| split_of(r.user_id) == split)
    }
}

/// Zipf popularity weights over item index and their standardized log scores.
fn popularity(cfg: &SynthConfig) -> (Vec<f64>, Vec<f64>) {
    let n = cfg.n_items;
    let weights: Vec<f64> = (0..n)
        .map(|i| 1.0 / ((i + 1) as f64).powf(cfg.zipf_exponent))
        .collect();
    let logs: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
    let mean = logs.iter().sum::<f64>() / n as f64;
    let var = logs.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n as f64;
    let sd = var.sqrt().max(1e-12);
    let z = logs.iter().map(|l| (l - mean) / sd).collect();
    (weights, z)
}

/// Generates the full corpus. Deterministic given `rng`'s seed.
pub fn generate_corpus(cfg: &SynthConfig, rng: &mut Rng) -> Result<Corpus> {
    cfg.validate()?;
    let vocab = AttributeVocab::for_config(cfg);
    let (zipf_w, pop_z) = popularity(cfg);

    // Items. Tags lean toward a per-category window of the explicit pool so
    // category carries information about likely tags.
    let n_expl = vocab.explicit_tags.len();
    let mut items = Vec::with_capacity(cfg.n_items);
    for i in 0..cfg.n_items {
        let category = CATEGORY_POOL[rng.below(cfg.n_categories as u64) as usize].to_string();
        let cat_idx = CATEGORY_POOL.iter().position(|c| *c == category).unwrap();
        let brand = BRAND_POOL[rng.below(cfg.n_brands as u64) as usize].to_string();
        let flavor = FLAVOR_POOL[rng.below(cfg.n_flavors as u64) as usize];
        let window: Vec<usize> = (0..n_expl / 2).map(|k| (cat_idx * 2 + k) % n_expl).collect();
        let mut tags: Vec<String> = Vec::new();
        while tags.len() < cfg.tags_per_item.min(n_expl) {
            let tag = if rng.bernoulli(0.8) {
                vocab.explicit_tags[window[rng.below(window.len() as u64) as usize]].clone()
            } else {
                vocab.explicit_tags[rng.below(n_expl as u64) as usize].clone()
            };
            if !tags.contains(&tag) {
                tags.push(tag);
            }
        }
        let text = format!("{} {} {} {}", brand, flavor, tags.join(" "), category);
        items.push(Item {
            id: ItemId(i as u64),
            category,
            brand,
            tags,
            text,
            exposure_count: 0,
        });
    }

    // Users: latent preferred tags over the combined tag space, plus
    // preference-biased profile items.
    let mut all_tags: Vec<String> = vocab.explicit_tags.clone();
    all_tags.extend(vocab.implicit_tags.clone());
    let mut users = Vec::with_capacity(cfg.n_users);
    for u in 0..cfg.n_users {
        let mut preferred = Vec::new();
        while preferred.len() < cfg.preferred_tags_per_user.min(all_tags.len()) {
            let t = all_tags[rng.below(all_tags.len() as u64) as usize].clone();
            if !preferred.contains(&t) {
                preferred.push(t);
            }
        }
        // Profile items reflect registered interests: drawn by preference
        // match, independent of exposure.
        let match_frac = |it: &Item| -> f64 {
            let mut tags = it.tags.clone();
            tags.extend(vocab.implicit_for(&it.brand, &it.category));
            preferred.iter().filter(|t| tags.contains(*t)).count() as f64 / preferred.len() as f64
        };
        let weights: Vec<f64> = items
            .iter()
            .map(|it| (cfg.profile_match_boost * match_frac(it)).exp())
            .collect();
        let mut profile_items = Vec::new();
        while profile_items.len() < cfg.profile_items_per_user.min(items.len()) {
            let pick = ItemId(rng.weighted(&weights) as u64);
            if !profile_items.contains(&pick) {
                profile_items.push(pick);
            }
        }
        users.push(UserProfile {
            id: UserId(u as u64),
            preferred_tags: preferred,
            profile_items,
        });
    }

    // Pass 1: draw (user, target, context) and the semantic/popularity score.
    let mut drafts = Vec::with_capacity(cfg.n_rows);
    let mut scores = Vec::with_capacity(cfg.n_rows);
    for ts in 0..cfg.n_rows {
        let user = UserId(rng.below(cfg.n_users as u64));
        let target = ItemId(rng.weighted(&zipf_w) as u64);
        let context: Vec<u32> = (0..cfg.n_context_features)
            .map(|_| rng.below(cfg.context_cardinality as u64) as u32)
            .collect();
        let profile = &users[user.0 as usize];
        let it = &items[target.0 as usize];
        let mut tags = it.tags.clone();
        tags.extend(vocab.implicit_for(&it.brand, &it.category));
        let hits = profile.preferred_tags.iter().filter(|t| tags.contains(t)).count();
        let affinity = hits as f64 / profile.preferred_tags.len() as f64;
        let score = cfg.beta * cfg.affinity_weight * affinity
            + cfg.popularity_weight * pop_z[target.0 as usize];
        drafts.push((user, target, context, ts as u64));
        scores.push(score);
    }

    // Calibrate the base offset by bisection on the mean click probability.
    let mean_prob = |base: f64| -> f64 {
        scores.iter().map(|s| sigmoid(base + s)).sum::<f64>() / scores.len() as f64
    };
    let (mut lo, mut hi) = (-30.0, 30.0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if mean_prob(mid) < cfg.target_positive_rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let base_offset = 0.5 * (lo + hi);

    // Pass 2: sample labels in order, maintaining per-user clicked history.
    let mut clicked: Vec<Vec<ItemId>> = users.iter().map(|u| u.profile_items.clone()).collect();
    let mut rows = Vec::with_capacity(cfg.n_rows);
    for ((user, target, context, ts), score) in drafts.into_iter().zip(&scores) {
        let p = sigmoid(base_offset + score);
        let label = u8::from(rng.bernoulli(p));
        let hist_src = &clicked[user.0 as usize];
        let start = hist_src.len().saturating_sub(cfg.max_history);
        let history = hist_src[start..].to_vec();
        items[target.0 as usize].exposure_count += 1;
        if label == 1 {
            clicked[user.0 as usize].push(target);
        }
        rows.push(InteractionRow {
            user_id: user,
            target_item_id: target,
            history,
            context,
            label,
            timestamp: ts,
        });
    }

    Ok(Corpus {
        config: cfg.clone(),
        vocab,
        catalog: ItemCatalog { items },
        users,
        rows,
        base_offset,
    })
}

/// Exposure frequencies ordered by (count desc, item_id asc).
pub fn exposure_table(catalog: &ItemCatalog) -> Vec<(ItemId, u64)> {
    let mut table: Vec<(ItemId, u64)> = catalog
        .items
        .iter()
        .map(|it| (it.id, it.exposure_count))
        .collect();
    table.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    table
}

// ---------------------------------------------------------------------------
// Persistence: three delimited UTF-8 files with versioned header lines.
// ---------------------------------------------------------------------------

const CATALOG_HEADER: &str = "# msd catalog v1\nitem_id\tcategory\tbrand\ttags\ttext\texposure";
const USERS_HEADER: &str = "# msd users v1\nuser_id\tpreferred_tags\tprofile_items";
const INTERACTIONS_HEADER: &str =
    "# msd interactions v1\nuser_id\titem_id\thistory\tcontext\tlabel\ttimestamp";

pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut cat = String::from(CATALOG_HEADER);
    for it in corpus.catalog.items() {
        write!(
            cat,
            "\n{}\t{}\t{}\t{}\t{}\t{}",
            it.id, it.category, it.brand, it.tags.join(","), it.text, it.exposure_count
        )
        .unwrap();
    }
    cat.push('\n');
    std::fs::write(dir.join("catalog.tsv"), cat)?;

    let mut usr = String::from(USERS_HEADER);
    for u in &corpus.users {
        let items: Vec<String> = u.profile_items.iter().map(|i| i.to_string()).collect();
        write!(
            usr,
            "\n{}\t{}\t{}",
            u.id, u.preferred_tags.join(","), items.join(",")
        )
        .unwrap();
    }
    usr.push('\n');
    std::fs::write(dir.join("users.tsv"), usr)?;

    let mut ints = String::from(INTERACTIONS_HEADER);
    for r in &corpus.rows {
        let hist: Vec<String> = r.history.iter().map(|i| i.to_string()).collect();
        let ctx: Vec<String> = r.context.iter().map(|c| c.to_string()).collect();
        write!(
            ints,
            "\n{}\t{}\t{}\t{}\t{}\t{}",
            r.user_id, r.target_item_id, hist.join(","), ctx.join(","), r.label, r.timestamp
        )
        .unwrap();
    }
    ints.push('\n');
    std::fs::write(dir.join("interactions.tsv"), ints)?;
    Ok(())
}

fn bad(path: &Path, detail: impl Into<String>) -> Error {
    Error::BadArtifact {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

fn split_list(field: &str) -> Vec<String> {
    if field.is_empty() {
        Vec::new()
    } else {
        field.split(',').map(|s| s.to_string()).collect()
    }
}

fn parse_ids(field: &str, path: &Path) -> Result<Vec<ItemId>> {
    split_list(field)
        .iter()
        .map(|s| s.parse::<u64>().map(ItemId).map_err(|e| bad(path, e.to_string())))
        .collect()
}

/// Reads a corpus written by [`write_corpus`]. The vocabulary is rebuilt from
/// the config, which must match the one used at generation time.
pub fn read_corpus(cfg: &SynthConfig, dir: &Path) -> Result<Corpus> {
    let read_lines = |name: &str, header: &str| -> Result<Vec<String>> {
        let path = dir.join(name);
        let text = std::fs::read_to_string(&path).map_err(|e| bad(&path, e.to_string()))?;
        let mut lines = text.lines();
        let head: Vec<&str> = header.lines().collect();
        for expect in &head {
            let got = lines.next().ok_or_else(|| bad(&path, "truncated header"))?;
            if got != *expect {
                return Err(bad(&path, format!("bad header line: {got}")));
            }
        }
        Ok(lines.map(|l| l.to_string()).collect())
    };

    let cat_path = dir.join("catalog.tsv");
    let mut items = Vec::new();
    for line in read_lines("catalog.tsv", CATALOG_HEADER)? {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(bad(&cat_path, format!("expected 6 fields, got {}", f.len())));
        }
        items.push(Item {
            id: ItemId(f[0].parse().map_err(|_| bad(&cat_path, "bad item_id"))?),
            category: f[1].to_string(),
            brand: f[2].to_string(),
            tags: split_list(f[3]),
            text: f[4].to_string(),
            exposure_count: f[5].parse().map_err(|_| bad(&cat_path, "bad exposure"))?,
        });
    }

    let usr_path = dir.join("users.tsv");
    let mut users = Vec::new();
    for line in read_lines("users.tsv", USERS_HEADER)? {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(bad(&usr_path, format!("expected 3 fields, got {}", f.len())));
        }
        users.push(UserProfile {
            id: UserId(f[0].parse().map_err(|_| bad(&usr_path, "bad user_id"))?),
            preferred_tags: split_list(f[1]),
            profile_items: parse_ids(f[2], &usr_path)?,
        });
    }

    let int_path = dir.join("interactions.tsv");
    let mut rows = Vec::new();
    for line in read_lines("interactions.tsv", INTERACTIONS_HEADER)? {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(bad(&int_path, format!("expected 6 fields, got {}", f.len())));
        }
        rows.push(InteractionRow {
            user_id: UserId(f[0].parse().map_err(|_| bad(&int_path, "bad user_id"))?),
            target_item_id: ItemId(f[1].parse().map_err(|_| bad(&int_path, "bad item_id"))?),
            history: parse_ids(f[2], &int_path)?,
            context: split_list(f[3])
                .iter()
                .map(|s| s.parse::<u32>().map_err(|_| bad(&int_path, "bad context")))
                .collect::<Result<Vec<u32>>>()?,
            label: f[4].parse().map_err(|_| bad(&int_path, "bad label"))?,
            timestamp: f[5].parse().map_err(|_| bad(&int_path, "bad timestamp"))?,
        });
    }

    Ok(Corpus {
        config: cfg.clone(),
        vocab: AttributeVocab::for_config(cfg),
        catalog: ItemCatalog { items },
        users,
        rows,
        base_offset: f64::NAN, // not persisted; only needed at generation time
    })
}
