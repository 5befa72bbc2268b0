//! Stage orchestration over on-disk artifacts.
//!
//! Every stage reads its inputs from the output directory, writes its
//! outputs there, and records a manifest entry keyed by a content hash of
//! (stage config, input file hashes). Re-running a stage whose key and
//! outputs are unchanged is a no-op; because downstream keys include
//! upstream output hashes, any upstream change invalidates exactly the
//! stages that depend on it.
//!
//! Artifact layout under the output directory:
//!
//! ```text
//! config.toml            echoed effective config
//! manifest.tsv           stage keys and output hashes
//! catalog.tsv users.tsv interactions.tsv
//! distill.tsv vocab.tsv student.bin student_ckpt_NNNNNN.bin loss_curve.tsv
//! ctr_<variant>.bin ctr_<variant>_curve.tsv
//! eval_<variant>_vs_<baseline>.{txt,tsv}
//! hot_store.bin trace.txt serving_report.txt
//! correlation.tsv ablation.tsv
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::ctr::{
    auc, logloss, read_ctr, relaimpr, score_rows, train as ctr_train, CtrModel, EvalReport,
    FeatureContext, Variant,
};
use crate::distill::{
    extract_record_tokens, greedy_decode, mean_nll, phrase_f1, read_student, train_student,
    write_student, DistillExample, StudentModel, Vocab,
};
use crate::error::{Error, Result};
use crate::knowledge::{
    build_distillation_set, build_example_pool, prompt_body, prompt_for_subject,
    read_distillation_records, write_distillation_set, Level, MockTeacher, PromptTemplate,
    SamplingConfig, SemanticRecord, SubjectRef,
};
use crate::numerics::rng::Rng;
use crate::serving::{
    build_hot_store, hot_n_for_mass, read_trace, replay, write_hot_store, write_trace,
    ServingReport, ServingStack,
};
use crate::synth::{
    generate_corpus, read_corpus, write_corpus, Corpus, InteractionRow, ItemId, Split,
};

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, Default)]
struct ManifestEntry {
    key: String,
    /// (relative path, content hash) pairs.
    outputs: Vec<(String, String)>,
}

/// Ordered stage ledger with input/output content hashes.
#[derive(Debug, Default)]
pub struct Manifest {
    entries: BTreeMap<String, ManifestEntry>,
}

fn sha256_hex(data: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(data);
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        write!(s, "{b:02x}").unwrap();
    }
    s
}

fn hash_file(path: &Path) -> Result<String> {
    let data = std::fs::read(path).map_err(|_| Error::MissingInput {
        stage: "hash".into(),
        path: path.display().to_string(),
    })?;
    Ok(sha256_hex(&data))
}

impl Manifest {
    const FILE: &'static str = "manifest.tsv";

    fn load(dir: &Path) -> Result<Manifest> {
        let path = dir.join(Self::FILE);
        if !path.exists() {
            return Ok(Manifest::default());
        }
        let text = std::fs::read_to_string(&path)?;
        let mut entries = BTreeMap::new();
        for line in text.lines().skip(1) {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                continue;
            }
            let outputs = fields[2]
                .split(',')
                .filter(|s| !s.is_empty())
                .filter_map(|pair| {
                    pair.rsplit_once(':')
                        .map(|(p, h)| (p.to_string(), h.to_string()))
                })
                .collect();
            entries.insert(
                fields[0].to_string(),
                ManifestEntry {
                    key: fields[1].to_string(),
                    outputs,
                },
            );
        }
        Ok(Manifest { entries })
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let mut out = String::from("stage\tkey\toutputs");
        for (stage, entry) in &self.entries {
            let outputs: Vec<String> = entry
                .outputs
                .iter()
                .map(|(p, h)| format!("{p}:{h}"))
                .collect();
            write!(out, "\n{stage}\t{}\t{}", entry.key, outputs.join(",")).unwrap();
        }
        out.push('\n');
        std::fs::write(dir.join(Self::FILE), out)?;
        Ok(())
    }

    fn is_current(&self, dir: &Path, stage: &str, key: &str) -> bool {
        match self.entries.get(stage) {
            Some(entry) if entry.key == key => entry.outputs.iter().all(|(rel, hash)| {
                let path = dir.join(rel);
                path.exists() && hash_file(&path).is_ok_and(|h| &h == hash)
            }),
            _ => false,
        }
    }

    fn record(&mut self, dir: &Path, stage: &str, key: &str, outputs: &[&str]) -> Result<()> {
        let mut hashed = Vec::with_capacity(outputs.len());
        for rel in outputs {
            hashed.push((rel.to_string(), hash_file(&dir.join(rel))?));
        }
        self.entries.insert(
            stage.to_string(),
            ManifestEntry {
                key: key.to_string(),
                outputs: hashed,
            },
        );
        self.save(dir)
    }
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

pub struct Pipeline {
    pub config: RunConfig,
    pub out_dir: PathBuf,
    manifest: Manifest,
}

/// Stable train/validation split of distillation subjects by subject hash.
pub fn subject_in_val(subject: SubjectRef, val_fraction: f64) -> bool {
    let tag = match subject.level {
        Level::Item => 0x11u64,
        Level::User => 0x22u64,
    };
    let mut z = subject.id ^ (tag << 56) ^ 0x0ddb_a11_u64;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    ((z % 1_000_000) as f64) < val_fraction * 1_000_000.0
}

impl Pipeline {
    /// Opens (or creates) an output directory and echoes the effective
    /// config into it.
    pub fn new(config: RunConfig, out_dir: &Path) -> Result<Pipeline> {
        config.validate()?;
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(out_dir.join("config.toml"), config.to_toml())?;
        let manifest = Manifest::load(out_dir)?;
        Ok(Pipeline {
            config,
            out_dir: out_dir.to_path_buf(),
            manifest,
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out_dir.join(rel)
    }

    fn require(&self, stage: &str, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(Error::MissingInput {
                stage: stage.into(),
                path: p.display().to_string(),
            });
        }
        Ok(p)
    }

    fn stage_key(&self, parts: &[&str]) -> String {
        let mut h = Sha256::new();
        for p in parts {
            h.update(p.as_bytes());
            h.update([0u8]);
        }
        let out = h.finalize();
        let mut s = String::with_capacity(64);
        for b in out {
            write!(s, "{b:02x}").unwrap();
        }
        s
    }

    fn input_hashes(&self, stage: &str, rels: &[&str]) -> Result<String> {
        let mut acc = String::new();
        for rel in rels {
            let p = self.require(stage, rel)?;
            acc.push_str(&hash_file(&p)?);
        }
        Ok(acc)
    }

    // -- gen ----------------------------------------------------------------

    /// Generates and persists the synthetic corpus.
    pub fn gen(&mut self) -> Result<StageOutcome> {
        let section = toml::to_string(&self.config.synth).expect("serializable");
        let key = self.stage_key(&["gen", &self.config.seed.to_string(), &section]);
        if self.manifest.is_current(&self.out_dir, "gen", &key) {
            return Ok(StageOutcome::Skipped);
        }
        let mut rng = Rng::from_seed(self.config.seed);
        let corpus = generate_corpus(&self.config.synth, &mut rng)?;
        write_corpus(&corpus, &self.out_dir)?;
        self.manifest.record(
            &self.out_dir,
            "gen",
            &key,
            &["catalog.tsv", "users.tsv", "interactions.tsv"],
        )?;
        Ok(StageOutcome::Ran)
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        self.require("load_corpus", "catalog.tsv")?;
        read_corpus(&self.config.synth, &self.out_dir)
    }

    // -- distill ------------------------------------------------------------

    /// Builds the distillation dataset with the mock teacher, trains the
    /// student, and writes checkpoints plus the loss curve.
    pub fn distill(&mut self) -> Result<StageOutcome> {
        const STAGE: &str = "distill";
        let corpus_inputs = ["catalog.tsv", "users.tsv", "interactions.tsv"];
        let inputs = self.input_hashes(STAGE, &corpus_inputs)?;
        let section = format!(
            "{}{}{}",
            toml::to_string(&self.config.knowledge).unwrap(),
            toml::to_string(&self.config.student).unwrap(),
            toml::to_string(&self.config.distill_train).unwrap(),
        );
        let key = self.stage_key(&[STAGE, &self.config.seed.to_string(), &section, &inputs]);

        let ckpt_steps = self.checkpoint_steps();
        let mut outputs: Vec<String> = vec![
            "distill.tsv".into(),
            "vocab.tsv".into(),
            "student.bin".into(),
            "loss_curve.tsv".into(),
        ];
        outputs.extend(ckpt_steps.iter().map(|s| Self::ckpt_name(*s)));
        let output_refs: Vec<&str> = outputs.iter().map(|s| s.as_str()).collect();
        if self.manifest.is_current(&self.out_dir, STAGE, &key) {
            return Ok(StageOutcome::Skipped);
        }

        let corpus = self.load_corpus()?;
        let teacher = MockTeacher { corpus: &corpus };
        let mut rng = Rng::from_seed(self.config.seed).derive(0x0d15);
        let set = build_distillation_set(
            &corpus,
            &SamplingConfig {
                n_items: self.config.knowledge.n_item_subjects,
                min_per_category: self.config.knowledge.min_per_category,
            },
            self.config.knowledge.n_user_subjects,
            self.config.knowledge.example_pool_size,
            &teacher,
            &mut rng,
        )?;
        write_distillation_set(&set, &self.path("distill.tsv"))?;

        // Vocabulary over prompts and serialized records.
        let mut texts: Vec<String> = Vec::new();
        for ex in &set.examples {
            texts.push(prompt_body(&ex.prompt));
            texts.push(ex.record.body.serialize());
        }
        // Also cover every catalog/user text so online embedding never hits
        // unknown tokens.
        for it in corpus.catalog.items() {
            texts.push(it.text.clone());
        }
        let vocab = Vocab::build(texts.iter().map(|s| s.as_str()));
        vocab.write(&self.path("vocab.tsv"))?;

        // Token examples, split train/val by subject hash.
        let budget = self.config.knowledge.prompt_token_budget;
        let val_fraction = self.config.distill_train.val_fraction;
        let mut train = Vec::new();
        let mut val = Vec::new();
        for ex in &set.examples {
            let de = DistillExample::new(&vocab, &prompt_body(&ex.prompt), &ex.record.body, budget);
            if subject_in_val(ex.subject, val_fraction) {
                val.push(de);
            } else {
                train.push(de);
            }
        }
        let result = train_student(
            vocab,
            &train,
            &val,
            self.config.student_config(),
            &self.config.distill_train_config(),
            &mut Rng::from_seed(self.config.seed).derive(0x57ad),
        )?;

        write_student(&result.model, &self.path("student.bin"))?;
        for (step, model) in &result.checkpoints {
            write_student(model, &self.path(&Self::ckpt_name(*step)))?;
        }
        let mut curve = String::from("# msd curve v1\nstep\ttrain_loss\tval_loss");
        for p in &result.curve {
            write!(curve, "\n{}\t{:.6}\t{:.6}", p.step, p.train_loss, p.val_loss).unwrap();
        }
        curve.push('\n');
        std::fs::write(self.path("loss_curve.tsv"), curve)?;

        self.manifest.record(&self.out_dir, STAGE, &key, &output_refs)?;
        Ok(StageOutcome::Ran)
    }

    fn ckpt_name(step: usize) -> String {
        format!("student_ckpt_{step:06}.bin")
    }

    /// Checkpoint steps implied by the training config.
    pub fn checkpoint_steps(&self) -> Vec<usize> {
        let steps = self.config.distill_train.steps;
        let every = self.config.distill_train.ckpt_every.max(1);
        let mut out: Vec<usize> = (1..=steps).filter(|s| s % every == 0).collect();
        if out.last() != Some(&steps) {
            out.push(steps);
        }
        out
    }

    pub fn load_student(&self) -> Result<StudentModel> {
        let vocab = Vocab::read(&self.require("load_student", "vocab.tsv")?)?;
        read_student(&self.require("load_student", "student.bin")?, vocab)
    }

    /// Parsed loss curve: (step, train, val) triples.
    pub fn load_loss_curve(&self) -> Result<Vec<(usize, f64, f64)>> {
        let path = self.require("load_loss_curve", "loss_curve.tsv")?;
        let text = std::fs::read_to_string(&path)?;
        let mut out = Vec::new();
        for line in text.lines().skip(2) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() == 3 {
                out.push((
                    f[0].parse().map_err(|_| Error::BadArtifact {
                        path: path.display().to_string(),
                        detail: format!("bad step {line}"),
                    })?,
                    f[1].parse().unwrap_or(f64::NAN),
                    f[2].parse().unwrap_or(f64::NAN),
                ));
            }
        }
        Ok(out)
    }

    // -- train --------------------------------------------------------------

    /// Trains one CTR variant end to end on the train split.
    pub fn train_variant(&mut self, variant: Variant) -> Result<StageOutcome> {
        let stage = format!("train:{}", variant.name());
        let inputs = self.input_hashes(
            &stage,
            &[
                "catalog.tsv",
                "users.tsv",
                "interactions.tsv",
                "student.bin",
                "vocab.tsv",
            ],
        )?;
        let section = toml::to_string(&self.config.ctr).unwrap();
        let key = self.stage_key(&[&stage, &self.config.seed.to_string(), &section, &inputs]);
        let ckpt = format!("ctr_{}.bin", variant.name());
        let curve_file = format!("ctr_{}_curve.tsv", variant.name());
        if self.manifest.is_current(&self.out_dir, &stage, &key) {
            return Ok(StageOutcome::Skipped);
        }
        let corpus = self.load_corpus()?;
        let student = self.load_student()?;
        let (model, curve) = self.train_one(
            variant,
            student,
            &corpus,
            Rng::from_seed(self.config.seed).derive(0xc7_0000 + variant_seed_tag(variant)),
        )?;
        crate::ctr::write_ctr(&model, &self.path(&ckpt))?;
        let mut text = String::from("# msd curve v1\nepoch\ttrain_loss");
        for p in &curve {
            write!(text, "\n{}\t{:.6}", p.epoch, p.train_loss).unwrap();
        }
        text.push('\n');
        std::fs::write(self.path(&curve_file), text)?;
        self.manifest
            .record(&self.out_dir, &stage, &key, &[&ckpt, &curve_file])?;
        Ok(StageOutcome::Ran)
    }

    /// In-memory train helper shared by the stage, ablation and correlation.
    fn train_one(
        &self,
        variant: Variant,
        student: StudentModel,
        corpus: &Corpus,
        mut rng: Rng,
    ) -> Result<(CtrModel, Vec<crate::ctr::TrainCurvePoint>)> {
        let ctx = FeatureContext::new(corpus)?;
        let mut model = CtrModel::new(variant, student, corpus, &self.config.ctr_config(), &mut rng)?;
        let rows: Vec<&InteractionRow> = corpus.rows_in_split(Split::Train).collect();
        let curve = ctr_train(&mut model, &ctx, &rows, &mut rng)?;
        Ok((model, curve))
    }

    pub fn load_ctr(&self, variant: Variant) -> Result<CtrModel> {
        let student = self.load_student()?;
        let corpus = self.load_corpus()?;
        let rel = format!("ctr_{}.bin", variant.name());
        read_ctr(
            &self.require("load_ctr", &rel)?,
            student,
            &corpus,
            &self.config.ctr_config(),
        )
    }

    // -- eval ---------------------------------------------------------------

    /// Evaluates a trained variant on the test split against a baseline
    /// variant, emitting the report in both formats.
    pub fn eval(&mut self, variant: Variant, baseline: Variant) -> Result<EvalReport> {
        let corpus = self.load_corpus()?;
        let student = self.load_student()?;
        let ctx = FeatureContext::new(&corpus)?;
        let rows: Vec<&InteractionRow> = corpus.rows_in_split(Split::Test).collect();
        let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();

        let load = |v: Variant| -> Result<CtrModel> {
            let rel = format!("ctr_{}.bin", v.name());
            read_ctr(
                &self.require("eval", &rel)?,
                student.clone(),
                &corpus,
                &self.config.ctr_config(),
            )
        };
        let model = load(variant)?;
        let base = load(baseline)?;
        let scores = score_rows(&model, &ctx, &rows)?;
        let base_scores = score_rows(&base, &ctx, &rows)?;
        let model_auc = auc(&scores, &labels)?;
        let base_auc = auc(&base_scores, &labels)?;
        let report = EvalReport {
            variant: variant.name().into(),
            auc: model_auc,
            logloss: logloss(&scores, &labels),
            relaimpr_vs_baseline: Some((baseline.name().into(), relaimpr(model_auc, base_auc)?)),
            n_examples: rows.len(),
            seed: self.config.seed,
        };
        let stem = format!("eval_{}_vs_{}", variant.name(), baseline.name());
        std::fs::write(self.path(&format!("{stem}.txt")), report.to_text())?;
        std::fs::write(
            self.path(&format!("{stem}.tsv")),
            format!("{}\n{}\n", EvalReport::TSV_HEADER, report.to_tsv_row()),
        )?;
        Ok(report)
    }

    // -- serving ------------------------------------------------------------

    /// Builds the hot store from the trained full model, generates a
    /// Zipf-shaped trace from exposure statistics, replays it and writes
    /// the serving report.
    pub fn serve_replay(&mut self) -> Result<(ServingReport, StageOutcome)> {
        const STAGE: &str = "serve";
        let inputs = self.input_hashes(STAGE, &["catalog.tsv", "ctr_full.bin"])?;
        let section = format!(
            "{}{}",
            toml::to_string(&self.config.serving).unwrap(),
            toml::to_string(&self.config.latency).unwrap()
        );
        let key = self.stage_key(&[STAGE, &self.config.seed.to_string(), &section, &inputs]);
        let outputs = ["hot_store.bin", "trace.txt", "serving_report.txt"];
        if self.manifest.is_current(&self.out_dir, STAGE, &key) {
            let report = self.replay_from_artifacts()?;
            return Ok((report, StageOutcome::Skipped));
        }
        let corpus = self.load_corpus()?;
        let model = self.load_ctr(Variant::Full)?;
        let n = hot_n_for_mass(&corpus.catalog, self.config.serving.hot_mass_fraction);
        let (hot, _) = build_hot_store(&corpus.catalog, &model.student, &model.adaptors, n)?;
        write_hot_store(&hot, &self.path("hot_store.bin"))?;

        // Trace: draws from the empirical exposure distribution.
        let table = crate::synth::exposure_table(&corpus.catalog);
        let weights: Vec<f64> = table.iter().map(|(_, c)| *c as f64 + 0.5).collect();
        let ids: Vec<ItemId> = table.iter().map(|(id, _)| *id).collect();
        let mut rng = Rng::from_seed(self.config.seed).derive(0x5e7e);
        let trace: Vec<ItemId> = (0..self.config.serving.trace_len)
            .map(|_| ids[rng.weighted(&weights)])
            .collect();
        write_trace(&trace, &self.path("trace.txt"))?;

        let stack = ServingStack::new(
            hot,
            self.config.serving.lru_capacity,
            &model.student,
            &model.adaptors,
            &corpus.catalog,
        );
        let report = replay(&stack, &trace, &self.config.latency_model())?;
        std::fs::write(self.path("serving_report.txt"), report.to_text())?;
        self.manifest.record(&self.out_dir, STAGE, &key, &outputs)?;
        Ok((report, StageOutcome::Ran))
    }

    /// Replays the persisted trace against the persisted hot store.
    pub fn replay_from_artifacts(&self) -> Result<ServingReport> {
        let corpus = self.load_corpus()?;
        let model = self.load_ctr(Variant::Full)?;
        let hot = crate::serving::read_hot_store(&self.require("serve", "hot_store.bin")?)?;
        let trace = read_trace(&self.require("serve", "trace.txt")?)?;
        let stack = ServingStack::new(
            hot,
            self.config.serving.lru_capacity,
            &model.student,
            &model.adaptors,
            &corpus.catalog,
        );
        replay(&stack, &trace, &self.config.latency_model())
    }

    // -- F1 evaluation ------------------------------------------------------

    /// Mean phrase F1 of a student on the held-out (validation) item-level
    /// records: render prompt, greedy-decode a record, extract leniently,
    /// score against the mock ground truth. Degenerate truths are skipped.
    pub fn evaluate_f1(&self, student: &StudentModel, corpus: &Corpus) -> Result<f64> {
        let records = read_distillation_records(&self.require("evaluate_f1", "distill.tsv")?)?;
        let pool = build_example_pool(corpus, self.config.knowledge.example_pool_size)?;
        let item_t = PromptTemplate::item_default();
        let user_t = PromptTemplate::user_default();
        let budget = self.config.knowledge.prompt_token_budget;
        let mut total = 0.0;
        let mut n = 0usize;
        for rec in &records {
            if rec.subject.level != Level::Item
                || rec.degenerate
                || !subject_in_val(rec.subject, self.config.distill_train.val_fraction)
            {
                continue;
            }
            let f1 = self.f1_for_record(student, corpus, rec, &pool, &item_t, &user_t, budget)?;
            total += f1;
            n += 1;
        }
        if n == 0 {
            return Err(Error::UndefinedMetric(
                "no held-out records available for F1".into(),
            ));
        }
        Ok(total / n as f64)
    }

    #[allow(clippy::too_many_arguments)]
    fn f1_for_record(
        &self,
        student: &StudentModel,
        corpus: &Corpus,
        rec: &SemanticRecord,
        pool: &[crate::knowledge::PoolEntry],
        item_t: &PromptTemplate,
        user_t: &PromptTemplate,
        budget: usize,
    ) -> Result<f64> {
        let prompt = prompt_for_subject(corpus, rec.subject, pool, item_t, user_t)?;
        let mut x = student.vocab.encode(&prompt_body(&prompt));
        if x.len() > budget {
            x.drain(..x.len() - budget);
        }
        let decoded = greedy_decode(student, &x, self.config.eval.decode_max_len)?;
        let predicted = extract_record_tokens(&student.vocab, &decoded);
        let scores = phrase_f1(
            &predicted,
            &rec.body,
            student,
            self.config.eval.cosine_threshold,
        )?;
        Ok(scores.f1)
    }

    // -- correlation --------------------------------------------------------

    /// For each student checkpoint: held-out phrase F1, then the AUC of a
    /// CTR model trained from that checkpoint with a fixed seed/config.
    pub fn correlation(&mut self) -> Result<CorrelationReport> {
        let steps = self.checkpoint_steps();
        if steps.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "correlation needs at least 2 checkpoints, have {}",
                steps.len()
            )));
        }
        let corpus = self.load_corpus()?;
        let vocab = Vocab::read(&self.require("correlation", "vocab.tsv")?)?;
        let ctx = FeatureContext::new(&corpus)?;
        let test_rows: Vec<&InteractionRow> = corpus.rows_in_split(Split::Test).collect();
        let labels: Vec<u8> = test_rows.iter().map(|r| r.label).collect();

        let mut rows = Vec::with_capacity(steps.len());
        for step in steps {
            let ckpt = self.require("correlation", &Self::ckpt_name(step))?;
            let student = read_student(&ckpt, vocab.clone())?;
            let f1 = self.evaluate_f1(&student, &corpus)?;
            // Fixed training seed across checkpoints: the student is the
            // only thing that varies.
            let (model, _) = self.train_one(
                Variant::Full,
                student,
                &corpus,
                Rng::from_seed(self.config.seed).derive(0xc0bb),
            )?;
            let scores = score_rows(&model, &ctx, &test_rows)?;
            rows.push(CorrelationRow {
                checkpoint_step: step,
                f1,
                auc: auc(&scores, &labels)?,
            });
        }
        let report = correlation_report(rows);
        std::fs::write(self.path("correlation.tsv"), report.to_tsv())?;
        Ok(report)
    }

    // -- ablation -----------------------------------------------------------

    /// Trains every variant over `n_seeds` seeds on identical data splits
    /// and reports per-variant AUC mean/stdev.
    pub fn ablate(&mut self) -> Result<AblationReport> {
        let corpus = self.load_corpus()?;
        let student = self.load_student()?;
        let ctx = FeatureContext::new(&corpus)?;
        let test_rows: Vec<&InteractionRow> = corpus.rows_in_split(Split::Test).collect();
        let labels: Vec<u8> = test_rows.iter().map(|r| r.label).collect();
        let mut rows = Vec::new();
        for variant in Variant::ALL {
            let mut aucs = Vec::with_capacity(self.config.ablate.n_seeds);
            for s in 0..self.config.ablate.n_seeds {
                // The same derived seed per index across variants, so runs
                // differ only in the ablated structure.
                let rng = Rng::from_seed(self.config.seed).derive(0xab1a_7e00 + s as u64);
                let (model, _) = self.train_one(variant, student.clone(), &corpus, rng)?;
                let scores = score_rows(&model, &ctx, &test_rows)?;
                aucs.push(auc(&scores, &labels)?);
            }
            let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
            let var = aucs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>()
                / aucs.len() as f64;
            rows.push(AblationRow {
                variant: variant.name().to_string(),
                mean_auc: mean,
                std_auc: var.sqrt(),
                per_seed: aucs,
            });
        }
        let report = AblationReport { rows };
        std::fs::write(self.path("ablation.tsv"), report.to_tsv())?;
        Ok(report)
    }

    // -- convenience --------------------------------------------------------

    /// Runs the standard pipeline: gen → distill → train(full) →
    /// train(id_only) → eval → serve-replay.
    pub fn run_all(&mut self) -> Result<EvalReport> {
        self.gen()?;
        self.distill()?;
        self.train_variant(Variant::Full)?;
        self.train_variant(Variant::IdOnly)?;
        let report = self.eval(Variant::Full, Variant::IdOnly)?;
        self.serve_replay()?;
        Ok(report)
    }

    /// Mean validation NLL at step 0 and at the end of the distill run.
    pub fn distill_val_losses(&self) -> Result<(f64, f64)> {
        let curve = self.load_loss_curve()?;
        let first = curve.first().ok_or_else(|| Error::BadArtifact {
            path: "loss_curve.tsv".into(),
            detail: "empty curve".into(),
        })?;
        let last = curve.last().unwrap();
        Ok((first.2, last.2))
    }

    /// Recomputes the student's validation NLL from the persisted dataset.
    pub fn student_val_nll(&self, student: &StudentModel) -> Result<f64> {
        let corpus = self.load_corpus()?;
        let records = read_distillation_records(&self.require("val_nll", "distill.tsv")?)?;
        let pool = build_example_pool(&corpus, self.config.knowledge.example_pool_size)?;
        let item_t = PromptTemplate::item_default();
        let user_t = PromptTemplate::user_default();
        let budget = self.config.knowledge.prompt_token_budget;
        let mut val = Vec::new();
        for rec in &records {
            if !subject_in_val(rec.subject, self.config.distill_train.val_fraction) {
                continue;
            }
            let prompt = prompt_for_subject(&corpus, rec.subject, &pool, &item_t, &user_t)?;
            val.push(DistillExample::new(
                &student.vocab,
                &prompt_body(&prompt),
                &rec.body,
                budget,
            ));
        }
        mean_nll(student, &val)
    }
}

fn variant_seed_tag(v: Variant) -> u64 {
    match v {
        Variant::Full => 1,
        Variant::NoLora => 2,
        Variant::NoItemFusion => 3,
        Variant::NoUserLevel => 4,
        Variant::IdOnly => 5,
    }
}

// ---------------------------------------------------------------------------
// Correlation and ablation reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationRow {
    pub checkpoint_step: usize,
    pub f1: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationReport {
    /// Rows sorted by F1 ascending.
    pub rows: Vec<CorrelationRow>,
    /// Spearman rank correlation; `None` when undefined (a constant side).
    pub spearman: Option<f64>,
}

/// Sorts rows by F1 and attaches the Spearman rank correlation.
pub fn correlation_report(mut rows: Vec<CorrelationRow>) -> CorrelationReport {
    rows.sort_by(|a, b| a.f1.partial_cmp(&b.f1).unwrap());
    let f1s: Vec<f64> = rows.iter().map(|r| r.f1).collect();
    let aucs: Vec<f64> = rows.iter().map(|r| r.auc).collect();
    CorrelationReport {
        spearman: spearman(&f1s, &aucs),
        rows,
    }
}

impl CorrelationReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("# msd correlation v1\ncheckpoint\tf1\tauc");
        for r in &self.rows {
            write!(out, "\n{}\t{:.6}\t{:.6}", r.checkpoint_step, r.f1, r.auc).unwrap();
        }
        match self.spearman {
            Some(rho) => write!(out, "\n# spearman_rho\t{rho:.6}").unwrap(),
            None => out.push_str("\n# spearman_rho\tundefined"),
        }
        out.push('\n');
        out
    }
}

/// Midranks (average ranks for ties), 1-based.
fn midranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let rank = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation. Without ties it uses the exact
/// `1 − 6·Σd²/(n(n²−1))` form, so strictly comonotone inputs give exactly
/// 1.0; with ties it falls back to Pearson over midranks. `None` when either
/// side is constant (undefined).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || xs.len() != ys.len() {
        return None;
    }
    let constant = |v: &[f64]| v.iter().all(|x| *x == v[0]);
    if constant(xs) || constant(ys) {
        return None;
    }
    let rx = midranks(xs);
    let ry = midranks(ys);
    let has_ties = |r: &[f64]| {
        let mut sorted = r.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sorted.windows(2).any(|w| w[0] == w[1])
    };
    if !has_ties(&rx) && !has_ties(&ry) {
        let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
        let nf = n as f64;
        return Some(1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0)));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mx, my) = (mean(&rx), mean(&ry));
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx.sqrt() * vy.sqrt()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn mean_of(&self, variant: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variant == variant)
            .map(|r| r.mean_auc)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("# msd ablation v1\nvariant\tmean_auc\tstd_auc\tper_seed");
        for r in &self.rows {
            let seeds: Vec<String> = r.per_seed.iter().map(|a| format!("{a:.6}")).collect();
            write!(
                out,
                "\n{}\t{:.6}\t{:.6}\t{}",
                r.variant,
                r.mean_auc,
                r.std_auc,
                seeds.join(",")
            )
            .unwrap();
        }
        out.push('\n');
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_monotone_is_exactly_one() {
        let xs = [0.05, 0.2, 0.33, 0.5, 0.61, 0.7];
        let ys = [0.51, 0.55, 0.6, 0.62, 0.69, 0.71];
        assert_eq!(spearman(&xs, &ys), Some(1.0));
        let rev: Vec<f64> = ys.iter().rev().cloned().collect();
        assert_eq!(spearman(&xs, &rev), Some(-1.0));
    }

    #[test]
    fn spearman_constant_side_is_undefined() {
        let xs = [0.3, 0.3, 0.3];
        let ys = [0.1, 0.2, 0.3];
        assert_eq!(spearman(&xs, &ys), None);
        assert_eq!(spearman(&ys, &xs), None);
    }

    #[test]
    fn spearman_handles_ties_via_midranks() {
        let xs = [1.0, 1.0, 2.0, 3.0];
        let ys = [1.0, 2.0, 3.0, 4.0];
        let rho = spearman(&xs, &ys).unwrap();
        assert!(rho > 0.9 && rho <= 1.0, "rho {rho}");
    }

    #[test]
    fn correlation_report_sorts_by_f1_and_reports_rho() {
        let rows = vec![
            CorrelationRow {
                checkpoint_step: 300,
                f1: 0.6,
                auc: 0.72,
            },
            CorrelationRow {
                checkpoint_step: 100,
                f1: 0.1,
                auc: 0.62,
            },
            CorrelationRow {
                checkpoint_step: 200,
                f1: 0.4,
                auc: 0.68,
            },
        ];
        let report = correlation_report(rows);
        assert_eq!(report.rows[0].checkpoint_step, 100);
        assert_eq!(report.rows[2].checkpoint_step, 300);
        assert_eq!(report.spearman, Some(1.0));
        assert!(report.to_tsv().contains("spearman_rho\t1.000000"));
    }

    #[test]
    fn degenerate_equal_rows_report_undefined_rho() {
        let rows = vec![
            CorrelationRow {
                checkpoint_step: 1,
                f1: 0.5,
                auc: 0.7,
            },
            CorrelationRow {
                checkpoint_step: 2,
                f1: 0.5,
                auc: 0.7,
            },
        ];
        let report = correlation_report(rows);
        assert_eq!(report.spearman, None);
        assert!(report.to_tsv().contains("undefined"));
    }

    #[test]
    fn subject_split_is_stable_and_nontrivial() {
        let subj = |id| SubjectRef {
            level: Level::Item,
            id,
        };
        let frac = 0.15;
        let in_val: Vec<bool> = (0..1000).map(|i| subject_in_val(subj(i), frac)).collect();
        let again: Vec<bool> = (0..1000).map(|i| subject_in_val(subj(i), frac)).collect();
        assert_eq!(in_val, again);
        let count = in_val.iter().filter(|&&b| b).count();
        assert!(count > 100 && count < 220, "val count {count}");
    }

    #[test]
    fn manifest_roundtrip_and_currency() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.txt"), b"hello").unwrap();
        let mut m = Manifest::default();
        m.record(dir.path(), "stage1", "key1", &["a.txt"]).unwrap();
        assert!(m.is_current(dir.path(), "stage1", "key1"));
        assert!(!m.is_current(dir.path(), "stage1", "key2"));
        // Reload from disk.
        let m2 = Manifest::load(dir.path()).unwrap();
        assert!(m2.is_current(dir.path(), "stage1", "key1"));
        // Output tampering invalidates.
        std::fs::write(dir.path().join("a.txt"), b"changed").unwrap();
        assert!(!m2.is_current(dir.path(), "stage1", "key1"));
    }

    #[test]
    fn tiny_gen_stage_skips_on_rerun() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::tiny();
        cfg.synth.n_items = 40;
        cfg.synth.n_users = 20;
        cfg.synth.n_rows = 200;
        let mut p = Pipeline::new(cfg.clone(), dir.path()).unwrap();
        assert_eq!(p.gen().unwrap(), StageOutcome::Ran);
        assert_eq!(p.gen().unwrap(), StageOutcome::Skipped);
        // A config change re-runs the stage.
        let mut cfg2 = cfg;
        cfg2.synth.n_rows = 300;
        let mut p2 = Pipeline::new(cfg2, dir.path()).unwrap();
        assert_eq!(p2.gen().unwrap(), StageOutcome::Ran);
    }
}
