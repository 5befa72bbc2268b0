//! Distillation dataset production: subject sampling, prompt construction
//! with in-context examples, the pluggable teacher interface, and the
//! canonical key-phrase record grammar.
//!
//! # Record grammar
//!
//! A teacher output is three line-oriented sections, in this order:
//!
//! ```text
//! EXPLICIT: lowsugar; organic
//! IMPLICIT: premium
//! RATIONALE: frostbite implies premium .
//! ```
//!
//! Phrases are separated by `;`. Inside phrases and rationale text, `\;`
//! escapes a literal semicolon, `\n` a newline and `\\` a backslash. A
//! section may be empty. Phrases are stored trimmed and must be non-empty.
//!
//! The default teacher is a deterministic mock that derives records from the
//! corpus the way the attribute rules define them; an external HTTP teacher
//! can be configured (URL plus auth token from an environment variable) but
//! is never required by any test or pipeline stage.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::rng::Rng;
use crate::synth::{exposure_table, Corpus, ItemCatalog, ItemId, UserId};
use crate::text::{jaccard, token_set};

// ---------------------------------------------------------------------------
// Subjects and records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Level {
    Item,
    User,
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Level::Item => write!(f, "item"),
            Level::User => write!(f, "user"),
        }
    }
}

impl std::str::FromStr for Level {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "item" => Ok(Level::Item),
            "user" => Ok(Level::User),
            other => Err(Error::Parse {
                offset: 0,
                detail: format!("unknown level '{other}'"),
            }),
        }
    }
}

/// A distillation subject: one item or one user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SubjectRef {
    pub level: Level,
    pub id: u64,
}

impl SubjectRef {
    pub fn item(id: ItemId) -> Self {
        SubjectRef {
            level: Level::Item,
            id: id.0,
        }
    }

    pub fn user(id: UserId) -> Self {
        SubjectRef {
            level: Level::User,
            id: id.0,
        }
    }
}

impl std::fmt::Display for SubjectRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.level, self.id)
    }
}

impl std::str::FromStr for SubjectRef {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (level, id) = s.split_once(':').ok_or(Error::Parse {
            offset: 0,
            detail: format!("subject ref '{s}' missing ':'"),
        })?;
        Ok(SubjectRef {
            level: level.parse()?,
            id: id.parse().map_err(|_| Error::Parse {
                offset: 0,
                detail: format!("bad subject id in '{s}'"),
            })?,
        })
    }
}

/// The three content sections of a teacher output.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RecordBody {
    pub explicit_phrases: Vec<String>,
    pub implicit_phrases: Vec<String>,
    pub rationale: String,
}

impl RecordBody {
    /// All phrases, explicit first. This is the phrase list metrics score.
    pub fn all_phrases(&self) -> Vec<String> {
        let mut v = self.explicit_phrases.clone();
        v.extend(self.implicit_phrases.clone());
        v
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        out.push_str(&section("EXPLICIT", &self.explicit_phrases));
        out.push('\n');
        out.push_str(&section("IMPLICIT", &self.implicit_phrases));
        out.push('\n');
        out.push_str("RATIONALE:");
        if !self.rationale.is_empty() {
            out.push(' ');
            out.push_str(&escape(&self.rationale));
        }
        out
    }
}

/// Teacher output for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticRecord {
    pub subject: SubjectRef,
    pub body: RecordBody,
    /// Set by the mock teacher when a phrase list came out empty (relaxing
    /// the usual non-empty expectation for rule-free subjects).
    pub degenerate: bool,
}

fn section(header: &str, phrases: &[String]) -> String {
    let mut s = format!("{header}:");
    if !phrases.is_empty() {
        s.push(' ');
        let escaped: Vec<String> = phrases.iter().map(|p| escape(p)).collect();
        s.push_str(&escaped.join("; "));
    }
    s
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            ';' => out.push_str("\\;"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

fn parse_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        detail: detail.into(),
    }
}

/// Splits escaped phrase content. `base` is the byte offset of `content`
/// inside the full input, used for error positions.
fn parse_phrases(content: &str, base: usize) -> Result<Vec<String>> {
    if content.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut phrases = Vec::new();
    let mut cur = String::new();
    let mut cur_start = base;
    let mut started = false;
    let mut chars = content.char_indices().peekable();
    while let Some((i, ch)) = chars.next() {
        match ch {
            '\\' => {
                if !started {
                    started = true;
                    cur_start = base + i;
                }
                match chars.next() {
                    Some((_, ';')) => cur.push(';'),
                    Some((_, 'n')) => cur.push('\n'),
                    Some((_, '\\')) => cur.push('\\'),
                    Some((j, other)) => {
                        return Err(parse_err(base + j, format!("bad escape '\\{other}'")))
                    }
                    None => return Err(parse_err(base + i, "dangling backslash")),
                }
            }
            ';' => {
                let phrase = cur.trim();
                if phrase.is_empty() {
                    return Err(parse_err(cur_start, "empty phrase"));
                }
                phrases.push(phrase.to_string());
                cur.clear();
                started = false;
                cur_start = base + i + 1;
            }
            c => {
                if !started && !c.is_whitespace() {
                    started = true;
                    cur_start = base + i;
                }
                cur.push(c);
            }
        }
    }
    let phrase = cur.trim();
    if phrase.is_empty() {
        return Err(parse_err(cur_start, "empty phrase"));
    }
    phrases.push(phrase.to_string());
    Ok(phrases)
}

fn unescape(content: &str, base: usize) -> Result<String> {
    let mut out = String::with_capacity(content.len());
    let mut chars = content.char_indices();
    while let Some((i, ch)) = chars.next() {
        if ch == '\\' {
            match chars.next() {
                Some((_, ';')) => out.push(';'),
                Some((_, 'n')) => out.push('\n'),
                Some((_, '\\')) => out.push('\\'),
                Some((j, other)) => {
                    return Err(parse_err(base + j, format!("bad escape '\\{other}'")))
                }
                None => return Err(parse_err(base + i, "dangling backslash")),
            }
        } else {
            out.push(ch);
        }
    }
    Ok(out)
}

/// Parses the canonical record grammar. Total: every failure is a typed
/// error carrying the byte offset of the problem.
pub fn parse_teacher_output(raw: &str) -> Result<RecordBody> {
    if raw.is_empty() {
        return Err(parse_err(0, "empty input"));
    }
    // Collect (offset, line) pairs, newline stripped.
    let mut lines: Vec<(usize, &str)> = Vec::new();
    let mut offset = 0;
    for piece in raw.split_inclusive('\n') {
        let line = piece.strip_suffix('\n').unwrap_or(piece);
        lines.push((offset, line));
        offset += piece.len();
    }
    // A trailing newline produces no extra entry with split_inclusive, but
    // tolerate blank lines at the end.
    while lines.len() > 3 && lines.last().is_some_and(|(_, l)| l.trim().is_empty()) {
        lines.pop();
    }
    const HEADERS: [&str; 3] = ["EXPLICIT:", "IMPLICIT:", "RATIONALE:"];
    if lines.len() > 3 {
        let (off, line) = lines[3];
        let detail = if HEADERS.iter().any(|h| line.starts_with(h)) {
            format!("duplicate section '{}'", line.split(':').next().unwrap_or(""))
        } else {
            "trailing garbage after RATIONALE section".to_string()
        };
        return Err(parse_err(off, detail));
    }
    let mut sections: Vec<(usize, &str)> = Vec::new();
    for (k, header) in HEADERS.iter().enumerate() {
        let (off, line) = lines
            .get(k)
            .copied()
            .ok_or_else(|| parse_err(raw.len(), format!("missing section '{header}'")))?;
        let rest = line
            .strip_prefix(header)
            .ok_or_else(|| parse_err(off, format!("expected section '{header}'")))?;
        // Content starts after the header and one optional space.
        let content = rest.strip_prefix(' ').unwrap_or(rest);
        let content_off = off + line.len() - content.len();
        sections.push((content_off, content));
    }
    Ok(RecordBody {
        explicit_phrases: parse_phrases(sections[0].1, sections[0].0)?,
        implicit_phrases: parse_phrases(sections[1].1, sections[1].0)?,
        rationale: unescape(sections[2].1, sections[2].0)?,
    })
}

// ---------------------------------------------------------------------------
// Mock teacher
// ---------------------------------------------------------------------------

/// Derives the ground-truth record for a subject from the corpus rules.
///
/// Item level: explicit phrases are the vocabulary tags present (as tokens)
/// in the item text, in vocabulary order; implicit phrases come from the
/// brand/category rules; the rationale is one rigid sentence per implied tag.
///
/// User level: the subject text is the concatenation of the profile items'
/// texts; explicit phrases are tags present in at least two profile items;
/// implicit phrases are the rules applied to the items carrying those tags.
pub fn mock_teacher_generate(corpus: &Corpus, subject: SubjectRef) -> Result<SemanticRecord> {
    let vocab = &corpus.vocab;
    let (explicit, implicit_sources) = match subject.level {
        Level::Item => {
            let item = corpus.catalog.get(ItemId(subject.id))?;
            let tokens = token_set(&item.text);
            let explicit: Vec<String> = vocab
                .explicit_tags
                .iter()
                .filter(|t| tokens.contains(*t))
                .cloned()
                .collect();
            (explicit, vec![(item.brand.clone(), item.category.clone())])
        }
        Level::User => {
            let user = corpus.user(UserId(subject.id))?;
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for id in &user.profile_items {
                let item = corpus.catalog.get(*id)?;
                let tokens = token_set(&item.text);
                for tag in &vocab.explicit_tags {
                    if tokens.contains(tag) {
                        *counts.entry(tag).or_insert(0) += 1;
                    }
                }
            }
            let explicit: Vec<String> = vocab
                .explicit_tags
                .iter()
                .filter(|t| counts.get(t.as_str()).copied().unwrap_or(0) >= 2)
                .cloned()
                .collect();
            // Sources: items that carry any elected tag, in profile order.
            let mut sources = Vec::new();
            for id in &user.profile_items {
                let item = corpus.catalog.get(*id)?;
                if explicit.iter().any(|t| item.tags.contains(t)) {
                    sources.push((item.brand.clone(), item.category.clone()));
                }
            }
            (explicit, sources)
        }
    };

    // Implicit phrases plus a rationale sentence per (source word, tag) rule.
    let mut implicit: Vec<String> = Vec::new();
    let mut sentences: Vec<String> = Vec::new();
    for (brand, category) in &implicit_sources {
        let mut pairs: Vec<(&str, &str)> = Vec::new();
        if let Some(tag) = vocab.brand_rules.get(brand) {
            pairs.push((brand.as_str(), tag.as_str()));
        }
        if let Some(tag) = vocab.category_rules.get(category) {
            pairs.push((category.as_str(), tag.as_str()));
        }
        for (source, tag) in pairs {
            if !implicit.iter().any(|t| t == tag) {
                implicit.push(tag.to_string());
            }
            let sentence = format!("{source} implies {tag} .");
            if !sentences.contains(&sentence) {
                sentences.push(sentence);
            }
        }
    }

    let degenerate = explicit.is_empty() || implicit.is_empty();
    Ok(SemanticRecord {
        subject,
        body: RecordBody {
            explicit_phrases: explicit,
            implicit_phrases: implicit,
            rationale: sentences.join(" "),
        },
        degenerate,
    })
}

/// A teacher turns a rendered prompt into raw record text.
///
/// Implementations must be stateless with respect to calls; the mock is pure
/// (same prompt, same bytes). Externally-backed implementations live behind
/// this trait and are never required by tests.
pub trait Teacher {
    fn name(&self) -> &str;
    fn deterministic(&self) -> bool;
    fn generate(&self, prompt: &str) -> Result<String>;
}

/// Deterministic teacher backed by the corpus rules. Locates the subject via
/// the `[id] level:n` routing header that the prompt templates emit.
pub struct MockTeacher<'a> {
    pub corpus: &'a Corpus,
}

impl Teacher for MockTeacher<'_> {
    fn name(&self) -> &str {
        "mock"
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn generate(&self, prompt: &str) -> Result<String> {
        let subject: SubjectRef = prompt
            .lines()
            .find_map(|l| l.strip_prefix("[id] "))
            .ok_or_else(|| parse_err(0, "prompt missing '[id]' routing header"))?
            .trim()
            .parse()?;
        Ok(mock_teacher_generate(self.corpus, subject)?.body.serialize())
    }
}

/// Configuration surface for an external teacher endpoint. The URL comes
/// from config; the auth token is read from the named environment variable.
/// This build ships no HTTP client, so `generate` reports the teacher as
/// unavailable; the type exists so deployments can wire one in behind the
/// same interface.
pub struct ExternalTeacher {
    pub url: String,
    pub auth_token: Option<String>,
}

impl ExternalTeacher {
    pub fn from_env(url: &str, auth_env_var: &str) -> Self {
        ExternalTeacher {
            url: url.to_string(),
            auth_token: std::env::var(auth_env_var).ok(),
        }
    }
}

impl Teacher for ExternalTeacher {
    fn name(&self) -> &str {
        "external"
    }

    fn deterministic(&self) -> bool {
        false
    }

    fn generate(&self, _prompt: &str) -> Result<String> {
        Err(Error::TeacherUnavailable {
            name: format!("external ({})", self.url),
            detail: "no HTTP client in this build; wire one behind the Teacher trait".into(),
        })
    }
}

// ---------------------------------------------------------------------------
// Prompt templates and in-context example selection
// ---------------------------------------------------------------------------

/// Plain-text template with `{{slot}}` placeholders.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub text: String,
}

pub const ITEM_TEMPLATE: &str = "\
[id] {{subject_ref}}
Task: list the explicit and implicit key phrases of the product and explain the implicit ones.
Example input: {{example_input}}
Example output:
{{example_output}}
Input: {{payload}}
Output:";

pub const USER_TEMPLATE: &str = "\
[id] {{subject_ref}}
Task: list the explicit and implicit key phrases shared by the products this user bought and explain the implicit ones.
Example input: {{example_input}}
Example output:
{{example_output}}
Input: {{payload}}
Output:";

impl PromptTemplate {
    pub fn item_default() -> Self {
        PromptTemplate {
            text: ITEM_TEMPLATE.to_string(),
        }
    }

    pub fn user_default() -> Self {
        PromptTemplate {
            text: USER_TEMPLATE.to_string(),
        }
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        Ok(PromptTemplate {
            text: std::fs::read_to_string(path)?,
        })
    }

    /// Fills every `{{slot}}`; rendering is deterministic and unfilled slots
    /// are an error naming the slot.
    pub fn render(&self, vars: &[(&str, &str)]) -> Result<String> {
        let mut out = self.text.clone();
        for (k, v) in vars {
            out = out.replace(&format!("{{{{{k}}}}}"), v);
        }
        if let Some(pos) = out.find("{{") {
            let tail = &out[pos..];
            let slot = tail
                .find("}}")
                .map(|end| &tail[2..end])
                .unwrap_or("unclosed");
            return Err(Error::InvalidConfig(format!(
                "template slot '{{{{{slot}}}}}' left unfilled"
            )));
        }
        Ok(out)
    }
}

/// Drops the `[id]` routing header; the remainder is the semantic prompt
/// body the student is trained on.
pub fn prompt_body(prompt: &str) -> String {
    prompt
        .lines()
        .filter(|l| !l.starts_with("[id] "))
        .collect::<Vec<_>>()
        .join("\n")
}

/// One entry of the in-context example pool: a reference input/output pair
/// tagged with its category and token set.
#[derive(Debug, Clone)]
pub struct PoolEntry {
    pub id: usize,
    pub category: String,
    pub input_text: String,
    pub output_text: String,
    pub tokens: std::collections::BTreeSet<String>,
}

/// Builds the reference pool: lowest-id items per category, round-robin
/// until `size` entries exist. Outputs come from the mock teacher.
pub fn build_example_pool(corpus: &Corpus, size: usize) -> Result<Vec<PoolEntry>> {
    let mut by_category: BTreeMap<String, Vec<ItemId>> = BTreeMap::new();
    for item in corpus.catalog.items() {
        by_category.entry(item.category.clone()).or_default().push(item.id);
    }
    for ids in by_category.values_mut() {
        ids.sort();
    }
    let mut pool = Vec::new();
    let mut round = 0;
    while pool.len() < size {
        let mut added = false;
        for (category, ids) in &by_category {
            if pool.len() >= size {
                break;
            }
            if let Some(id) = ids.get(round) {
                let item = corpus.catalog.get(*id)?;
                let record = mock_teacher_generate(corpus, SubjectRef::item(*id))?;
                pool.push(PoolEntry {
                    id: pool.len(),
                    category: category.clone(),
                    input_text: item.text.clone(),
                    output_text: record.body.serialize(),
                    tokens: token_set(&item.text),
                });
                added = true;
            }
        }
        if !added {
            break;
        }
        round += 1;
    }
    Ok(pool)
}

/// Picks the reference example for a subject: same-category entries first,
/// highest Jaccard token overlap wins, ties go to the lowest entry id; with
/// no category match the scan falls back to the whole pool.
pub fn select_incontext_example<'a>(
    subject_category: Option<&str>,
    subject_tokens: &std::collections::BTreeSet<String>,
    pool: &'a [PoolEntry],
) -> Result<&'a PoolEntry> {
    if pool.is_empty() {
        return Err(Error::InvalidConfig("in-context example pool is empty".into()));
    }
    let candidates: Vec<&PoolEntry> = match subject_category {
        Some(cat) if pool.iter().any(|e| e.category == cat) => {
            pool.iter().filter(|e| e.category == cat).collect()
        }
        _ => pool.iter().collect(),
    };
    let mut best = candidates[0];
    let mut best_score = jaccard(subject_tokens, &best.tokens);
    for entry in &candidates[1..] {
        let score = jaccard(subject_tokens, &entry.tokens);
        if score > best_score || (score == best_score && entry.id < best.id) {
            best = entry;
            best_score = score;
        }
    }
    Ok(best)
}

/// Renders the full prompt (routing header included) for one subject.
pub fn prompt_for_subject(
    corpus: &Corpus,
    subject: SubjectRef,
    pool: &[PoolEntry],
    item_template: &PromptTemplate,
    user_template: &PromptTemplate,
) -> Result<String> {
    let (template, payload, category) = match subject.level {
        Level::Item => {
            let item = corpus.catalog.get(ItemId(subject.id))?;
            (item_template, item.text.clone(), Some(item.category.clone()))
        }
        Level::User => (user_template, corpus.user_text(UserId(subject.id))?, None),
    };
    let tokens = token_set(&payload);
    let example = select_incontext_example(category.as_deref(), &tokens, pool)?;
    let subject_ref = subject.to_string();
    template.render(&[
        ("subject_ref", subject_ref.as_str()),
        ("example_input", example.input_text.as_str()),
        ("example_output", example.output_text.as_str()),
        ("payload", payload.as_str()),
    ])
}

// ---------------------------------------------------------------------------
// Subject sampling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SamplingConfig {
    /// Total item subjects to draw.
    pub n_items: usize,
    /// Per-category minimum (stratification floor).
    pub min_per_category: usize,
}

/// Weighted draw without replacement; weights of taken elements are zeroed.
/// Falls back to uniform among the remainder once all weights are zero.
fn draw_without_replacement(
    weights: &mut [f64],
    eligible: &[usize],
    n: usize,
    rng: &mut Rng,
) -> Vec<usize> {
    let mut taken = Vec::with_capacity(n);
    for _ in 0..n {
        let total: f64 = eligible.iter().map(|&i| weights[i]).sum();
        let pick = if total > 0.0 {
            let mut x = rng.next_f64() * total;
            let mut chosen = None;
            for &i in eligible {
                if weights[i] <= 0.0 {
                    continue;
                }
                x -= weights[i];
                if x < 0.0 {
                    chosen = Some(i);
                    break;
                }
            }
            chosen.unwrap_or_else(|| {
                *eligible.iter().rev().find(|&&i| weights[i] > 0.0).unwrap()
            })
        } else {
            // All remaining weights zero: uniform over untaken.
            let remaining: Vec<usize> = eligible
                .iter()
                .copied()
                .filter(|&i| !taken.contains(&i))
                .collect();
            if remaining.is_empty() {
                break;
            }
            remaining[rng.below(remaining.len() as u64) as usize]
        };
        weights[pick] = 0.0;
        taken.push(pick);
    }
    taken
}

/// Stratified plus importance sampling of item subjects.
///
/// Strata are the item categories. Every stratum receives at least
/// `min_per_category` subjects (or all of its items when smaller); the
/// remaining budget is drawn across all untaken items with probability
/// proportional to `sqrt(exposure_count)`. No duplicates.
pub fn sample_distillation_set(
    catalog: &ItemCatalog,
    cfg: &SamplingConfig,
    rng: &mut Rng,
) -> Result<Vec<ItemId>> {
    let categories = catalog.categories();
    if cfg.min_per_category == 0 {
        return Err(Error::InvalidConfig(
            "sampling.min_per_category must be ≥ 1 so every category is represented".into(),
        ));
    }
    if cfg.n_items < cfg.min_per_category * categories.len() {
        return Err(Error::InvalidConfig(format!(
            "sampling.n_items {} cannot cover min_per_category {} over {} categories",
            cfg.n_items,
            cfg.min_per_category,
            categories.len()
        )));
    }
    let exposure: BTreeMap<ItemId, u64> = exposure_table(catalog).into_iter().collect();
    let mut weights: Vec<f64> = catalog
        .items()
        .iter()
        .map(|it| (exposure[&it.id] as f64).sqrt())
        .collect();

    let mut taken: Vec<usize> = Vec::new();
    for cat in &categories {
        let members: Vec<usize> = catalog
            .items()
            .iter()
            .enumerate()
            .filter(|(_, it)| &it.category == cat)
            .map(|(i, _)| i)
            .collect();
        let want = cfg.min_per_category.min(members.len());
        taken.extend(draw_without_replacement(&mut weights, &members, want, rng));
    }
    let all: Vec<usize> = (0..catalog.len()).collect();
    let rest = cfg.n_items.min(catalog.len()) - taken.len().min(cfg.n_items);
    let extra = draw_without_replacement(
        &mut weights,
        &all.iter()
            .copied()
            .filter(|i| !taken.contains(i))
            .collect::<Vec<_>>(),
        rest,
        rng,
    );
    taken.extend(extra);
    taken.sort();
    Ok(taken.into_iter().map(|i| ItemId(i as u64)).collect())
}

/// Uniform user subject sample without replacement, ordered by id.
pub fn sample_user_subjects(n_users_total: usize, n: usize, rng: &mut Rng) -> Vec<UserId> {
    let mut ids: Vec<u64> = (0..n_users_total as u64).collect();
    rng.shuffle(&mut ids);
    let mut picked: Vec<u64> = ids.into_iter().take(n).collect();
    picked.sort();
    picked.into_iter().map(UserId).collect()
}

// ---------------------------------------------------------------------------
// Dataset assembly and persistence
// ---------------------------------------------------------------------------

/// One line of the distillation dataset: the subject, the prompt the teacher
/// saw, and the parsed record.
#[derive(Debug, Clone)]
pub struct DistillExampleSource {
    pub subject: SubjectRef,
    pub prompt: String,
    pub record: SemanticRecord,
}

#[derive(Debug, Clone, Default)]
pub struct DistillationSet {
    pub examples: Vec<DistillExampleSource>,
}

/// Samples subjects, renders prompts, queries the teacher and parses every
/// output. Results are ordered by (level, id), so output is deterministic
/// regardless of the order in which teacher calls complete.
pub fn build_distillation_set(
    corpus: &Corpus,
    sampling: &SamplingConfig,
    n_user_subjects: usize,
    example_pool_size: usize,
    teacher: &dyn Teacher,
    rng: &mut Rng,
) -> Result<DistillationSet> {
    let pool = build_example_pool(corpus, example_pool_size)?;
    let items = sample_distillation_set(&corpus.catalog, sampling, rng)?;
    let users = sample_user_subjects(corpus.users.len(), n_user_subjects, rng);
    let mut subjects: Vec<SubjectRef> = items.into_iter().map(SubjectRef::item).collect();
    subjects.extend(users.into_iter().map(SubjectRef::user));
    subjects.sort();

    let item_t = PromptTemplate::item_default();
    let user_t = PromptTemplate::user_default();
    let mut examples = Vec::with_capacity(subjects.len());
    for subject in subjects {
        let prompt = prompt_for_subject(corpus, subject, &pool, &item_t, &user_t)?;
        let raw = teacher.generate(&prompt)?;
        let body = parse_teacher_output(&raw)?;
        let degenerate = body.explicit_phrases.is_empty() || body.implicit_phrases.is_empty();
        examples.push(DistillExampleSource {
            subject,
            prompt,
            record: SemanticRecord {
                subject,
                body,
                degenerate,
            },
        });
    }
    Ok(DistillationSet { examples })
}

const DATASET_HEADER: &str = "# msd distill v1";

fn escape_tsv(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\n', "\\n").replace('\t', "\\t")
}

fn unescape_tsv(s: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(ch) = chars.next() {
        if ch == '\\' {
            match chars.next() {
                Some('\\') => out.push('\\'),
                Some('n') => out.push('\n'),
                Some('t') => out.push('\t'),
                other => {
                    return Err(parse_err(0, format!("bad tsv escape '\\{:?}'", other)));
                }
            }
        } else {
            out.push(ch);
        }
    }
    Ok(out)
}

/// Writes `subject_id TAB level TAB serialized-record` lines.
pub fn write_distillation_set(set: &DistillationSet, path: &std::path::Path) -> Result<()> {
    let mut out = String::from(DATASET_HEADER);
    for ex in &set.examples {
        out.push('\n');
        out.push_str(&format!(
            "{}\t{}\t{}",
            ex.subject.id,
            ex.subject.level,
            escape_tsv(&ex.record.body.serialize())
        ));
    }
    out.push('\n');
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads records back; prompts are reconstructed on demand via
/// [`prompt_for_subject`], which is deterministic.
pub fn read_distillation_records(path: &std::path::Path) -> Result<Vec<SemanticRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(DATASET_HEADER) => {}
        other => {
            return Err(Error::BadArtifact {
                path: path.display().to_string(),
                detail: format!("bad header {other:?}"),
            })
        }
    }
    let mut records = Vec::new();
    for line in lines {
        let mut fields = line.splitn(3, '\t');
        let (id, level, raw) = match (fields.next(), fields.next(), fields.next()) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => {
                return Err(Error::BadArtifact {
                    path: path.display().to_string(),
                    detail: format!("expected 3 fields: {line}"),
                })
            }
        };
        let subject = SubjectRef {
            level: level.parse()?,
            id: id.parse().map_err(|_| Error::BadArtifact {
                path: path.display().to_string(),
                detail: format!("bad subject id {id}"),
            })?,
        };
        let body = parse_teacher_output(&unescape_tsv(raw)?)?;
        let degenerate = body.explicit_phrases.is_empty() || body.implicit_phrases.is_empty();
        records.push(SemanticRecord {
            subject,
            body,
            degenerate,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_corpus, SynthConfig};

    fn corpus() -> Corpus {
        let cfg = SynthConfig {
            n_items: 60,
            n_users: 30,
            n_rows: 800,
            ..SynthConfig::default()
        };
        generate_corpus(&cfg, &mut Rng::from_seed(40)).unwrap()
    }

    #[test]
    fn serialize_parse_roundtrip_on_seeded_records() {
        let mut rng = Rng::from_seed(41);
        let tags = ["organic", "low;sugar", "multi\nline", "back\\slash", "premium"];
        for _ in 0..100 {
            let pick = |rng: &mut Rng, n: usize| -> Vec<String> {
                (0..n).map(|_| tags[rng.below(tags.len() as u64) as usize].to_string()).collect()
            };
            let n_expl = 1 + rng.below(3) as usize;
            let n_impl = rng.below(3) as usize;
            let body = RecordBody {
                explicit_phrases: pick(&mut rng, n_expl),
                implicit_phrases: pick(&mut rng, n_impl),
                rationale: if rng.bernoulli(0.8) {
                    "brand implies premium ; really.".to_string()
                } else {
                    String::new()
                },
            };
            let parsed = parse_teacher_output(&body.serialize()).unwrap();
            assert_eq!(parsed, body);
        }
    }

    #[test]
    fn empty_input_errors_at_offset_zero() {
        match parse_teacher_output("") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn escaped_delimiter_survives() {
        let body = RecordBody {
            explicit_phrases: vec!["a;b".into()],
            implicit_phrases: vec![],
            rationale: String::new(),
        };
        let s = body.serialize();
        assert!(s.contains("a\\;b"));
        assert_eq!(parse_teacher_output(&s).unwrap(), body);
    }

    #[test]
    fn malformed_inputs_give_typed_errors_with_offsets() {
        // Wrong first section.
        let e = parse_teacher_output("IMPLICIT: x\nEXPLICIT: y\nRATIONALE:").unwrap_err();
        assert!(matches!(e, Error::Parse { offset: 0, .. }), "{e}");
        // Duplicate section.
        let raw = "EXPLICIT: a\nIMPLICIT: b\nRATIONALE: r\nIMPLICIT: c";
        let e = parse_teacher_output(raw).unwrap_err();
        match e {
            Error::Parse { offset, detail } => {
                assert_eq!(offset, raw.find("IMPLICIT: c").unwrap());
                assert!(detail.contains("duplicate"), "{detail}");
            }
            other => panic!("{other:?}"),
        }
        // Empty phrase.
        let e = parse_teacher_output("EXPLICIT: a;;b\nIMPLICIT:\nRATIONALE:").unwrap_err();
        assert!(matches!(e, Error::Parse { .. }), "{e}");
        // Missing section.
        let e = parse_teacher_output("EXPLICIT: a").unwrap_err();
        assert!(e.to_string().contains("IMPLICIT"), "{e}");
    }

    #[test]
    fn mock_records_follow_the_documented_rules() {
        let corpus = corpus();
        // Hand-check one item (rule application by hand).
        let item = &corpus.catalog.items()[0];
        let rec = mock_teacher_generate(&corpus, SubjectRef::item(item.id)).unwrap();
        let mut expect_explicit: Vec<String> = corpus
            .vocab
            .explicit_tags
            .iter()
            .filter(|t| item.tags.contains(t))
            .cloned()
            .collect();
        expect_explicit.dedup();
        assert_eq!(rec.body.explicit_phrases, expect_explicit);
        let expect_implicit = corpus.vocab.implicit_for(&item.brand, &item.category);
        assert_eq!(rec.body.implicit_phrases, expect_implicit);
        for tag in &rec.body.implicit_phrases {
            assert!(rec.body.rationale.contains(&format!("implies {tag}")));
        }
    }

    #[test]
    fn mock_flags_rule_free_items_as_degenerate() {
        let corpus = corpus();
        let rule_free = corpus
            .catalog
            .items()
            .iter()
            .find(|it| corpus.vocab.implicit_for(&it.brand, &it.category).is_empty());
        if let Some(item) = rule_free {
            let rec = mock_teacher_generate(&corpus, SubjectRef::item(item.id)).unwrap();
            assert!(rec.body.implicit_phrases.is_empty());
            assert!(rec.degenerate);
            // Still serializes and parses.
            assert!(parse_teacher_output(&rec.body.serialize()).is_ok());
        }
    }

    #[test]
    fn mock_teacher_is_pure() {
        let corpus = corpus();
        let teacher = MockTeacher { corpus: &corpus };
        let pool = build_example_pool(&corpus, 4).unwrap();
        let prompt = prompt_for_subject(
            &corpus,
            SubjectRef::item(ItemId(3)),
            &pool,
            &PromptTemplate::item_default(),
            &PromptTemplate::user_default(),
        )
        .unwrap();
        let a = teacher.generate(&prompt).unwrap();
        let b = teacher.generate(&prompt).unwrap();
        assert_eq!(a.as_bytes(), b.as_bytes());
    }

    #[test]
    fn unknown_subject_is_an_error() {
        let corpus = corpus();
        let r = mock_teacher_generate(&corpus, SubjectRef::item(ItemId(9999)));
        assert!(matches!(r, Err(Error::UnknownId { .. })));
    }

    #[test]
    fn pool_of_one_is_always_selected() {
        let corpus = corpus();
        let pool = build_example_pool(&corpus, 1).unwrap();
        let tokens = token_set("anything at all");
        let e = select_incontext_example(Some("nonexistent"), &tokens, &pool).unwrap();
        assert_eq!(e.id, 0);
    }

    #[test]
    fn exact_duplicate_text_wins_selection() {
        let corpus = corpus();
        let pool = build_example_pool(&corpus, 6).unwrap();
        let target = &pool[3];
        let chosen = select_incontext_example(
            Some(&target.category),
            &target.tokens.clone(),
            &pool,
        )
        .unwrap();
        assert_eq!(jaccard(&chosen.tokens, &target.tokens), 1.0);
    }

    #[test]
    fn selection_matches_brute_force_scan() {
        let corpus = corpus();
        let pool = build_example_pool(&corpus, 5).unwrap();
        let subject_tokens = token_set(&corpus.catalog.items()[17].text);
        let category = corpus.catalog.items()[17].category.clone();
        let chosen = select_incontext_example(Some(&category), &subject_tokens, &pool).unwrap();
        // Oracle: exhaustive scan with the documented precedence.
        let candidates: Vec<&PoolEntry> = if pool.iter().any(|e| e.category == category) {
            pool.iter().filter(|e| e.category == category).collect()
        } else {
            pool.iter().collect()
        };
        let best = candidates
            .iter()
            .map(|e| (jaccard(&subject_tokens, &e.tokens), e.id))
            .fold((f64::NEG_INFINITY, usize::MAX), |acc, (s, id)| {
                if s > acc.0 || (s == acc.0 && id < acc.1) {
                    (s, id)
                } else {
                    acc
                }
            });
        assert_eq!(chosen.id, best.1);
    }

    #[test]
    fn empty_pool_is_rejected() {
        let tokens = token_set("x");
        assert!(select_incontext_example(None, &tokens, &[]).is_err());
    }

    #[test]
    fn sampling_exhausts_single_category() {
        // One category: n = catalog size returns everything.
        let cfg = SynthConfig {
            n_items: 25,
            n_users: 5,
            n_rows: 200,
            n_categories: 1,
            ..SynthConfig::default()
        };
        let corpus = generate_corpus(&cfg, &mut Rng::from_seed(50)).unwrap();
        let picked = sample_distillation_set(
            &corpus.catalog,
            &SamplingConfig {
                n_items: 25,
                min_per_category: 1,
            },
            &mut Rng::from_seed(51),
        )
        .unwrap();
        assert_eq!(picked.len(), 25);
        let mut ids: Vec<u64> = picked.iter().map(|i| i.0).collect();
        ids.dedup();
        assert_eq!(ids.len(), 25);
    }

    #[test]
    fn sampling_minimum_saturation_two_categories() {
        let cfg = SynthConfig {
            n_items: 200,
            n_users: 5,
            n_rows: 400,
            n_categories: 2,
            ..SynthConfig::default()
        };
        let corpus = generate_corpus(&cfg, &mut Rng::from_seed(52)).unwrap();
        let picked = sample_distillation_set(
            &corpus.catalog,
            &SamplingConfig {
                n_items: 10,
                min_per_category: 5,
            },
            &mut Rng::from_seed(53),
        )
        .unwrap();
        assert_eq!(picked.len(), 10);
        for cat in corpus.catalog.categories() {
            let count = picked
                .iter()
                .filter(|id| corpus.catalog.get(**id).unwrap().category == cat)
                .count();
            assert_eq!(count, 5, "category {cat}");
        }
    }

    #[test]
    fn sampling_budget_too_small_is_config_error() {
        let corpus = corpus();
        let r = sample_distillation_set(
            &corpus.catalog,
            &SamplingConfig {
                n_items: 2,
                min_per_category: 5,
            },
            &mut Rng::from_seed(54),
        );
        assert!(matches!(r, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn every_category_is_represented() {
        let corpus = corpus();
        let picked = sample_distillation_set(
            &corpus.catalog,
            &SamplingConfig {
                n_items: 12,
                min_per_category: 1,
            },
            &mut Rng::from_seed(55),
        )
        .unwrap();
        for cat in corpus.catalog.categories() {
            assert!(
                picked
                    .iter()
                    .any(|id| corpus.catalog.get(*id).unwrap().category == cat),
                "category {cat} unrepresented"
            );
        }
    }

    #[test]
    fn single_draw_inclusion_tracks_sqrt_exposure() {
        // One category, one minimum draw: inclusion probability is exactly
        // proportional to sqrt(exposure). Monte-Carlo over 2·10⁴ repeats.
        let exposures: [u64; 8] = [1, 4, 9, 16, 25, 36, 49, 64];
        let items: Vec<crate::synth::Item> = exposures
            .iter()
            .enumerate()
            .map(|(i, &e)| crate::synth::Item {
                id: ItemId(i as u64),
                category: "tea".into(),
                brand: "lumen".into(),
                tags: vec![],
                text: format!("item {i}"),
                exposure_count: e,
            })
            .collect();
        let catalog = ItemCatalog::from_items(items);
        let mut counts = vec![0usize; 8];
        let base = Rng::from_seed(56);
        let repeats = 20_000;
        for rep in 0..repeats {
            let mut rng = base.derive(rep as u64);
            let picked = sample_distillation_set(
                &catalog,
                &SamplingConfig {
                    n_items: 1,
                    min_per_category: 1,
                },
                &mut rng,
            )
            .unwrap();
            counts[picked[0].0 as usize] += 1;
        }
        let weight_sum: f64 = exposures.iter().map(|&e| (e as f64).sqrt()).sum();
        for (i, &e) in exposures.iter().enumerate() {
            let expect = (e as f64).sqrt() / weight_sum;
            let got = counts[i] as f64 / repeats as f64;
            assert!(
                (got - expect).abs() / expect < 0.10,
                "item {i}: got {got:.4}, expected {expect:.4}"
            );
        }
    }

    #[test]
    fn dataset_build_is_ordered_and_roundtrips() {
        let corpus = corpus();
        let teacher = MockTeacher { corpus: &corpus };
        let set = build_distillation_set(
            &corpus,
            &SamplingConfig {
                n_items: 20,
                min_per_category: 1,
            },
            6,
            4,
            &teacher,
            &mut Rng::from_seed(57),
        )
        .unwrap();
        assert_eq!(set.examples.len(), 26);
        let mut subjects: Vec<SubjectRef> = set.examples.iter().map(|e| e.subject).collect();
        let sorted = {
            let mut s = subjects.clone();
            s.sort();
            s
        };
        assert_eq!(subjects, sorted);
        subjects.dedup();
        assert_eq!(subjects.len(), 26);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("distill.tsv");
        write_distillation_set(&set, &path).unwrap();
        let back = read_distillation_records(&path).unwrap();
        assert_eq!(back.len(), set.examples.len());
        for (a, b) in back.iter().zip(&set.examples) {
            assert_eq!(a.subject, b.subject);
            assert_eq!(a.body, b.record.body);
        }
    }

    #[test]
    fn external_teacher_reports_unavailable() {
        let t = ExternalTeacher::from_env("http://localhost:1/teach", "MSD_TEACHER_TOKEN_UNSET");
        assert!(!t.deterministic());
        assert!(matches!(
            t.generate("[id] item:0"),
            Err(Error::TeacherUnavailable { .. })
        ));
    }

    #[test]
    fn template_rejects_unfilled_slot() {
        let t = PromptTemplate::item_default();
        let r = t.render(&[("subject_ref", "item:0")]);
        assert!(matches!(r, Err(Error::InvalidConfig(_))));
    }
}
