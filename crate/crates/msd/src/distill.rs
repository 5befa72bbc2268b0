//! The student model and its training.
//!
//! The student is a fixed-window neural n-gram language model: a token
//! embedding table, one ReLU hidden layer over the concatenated window
//! embeddings, and a linear layer producing logits over the vocabulary.
//! Prompt tokens are prepended to the target sequence, so generation is
//! conditioned on the prompt tail (prefix-LM style). Training minimizes the
//! negative log-likelihood of the teacher token sequence with teacher
//! forcing on the target's own prefix.
//!
//! Pooled hidden activations double as the semantic embedding a text maps
//! to; during CTR fine-tuning the hidden weight can be wrapped in a LoRA
//! adapter so those embeddings stay tunable while the base stays frozen.

use std::collections::BTreeSet;
use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::knowledge::RecordBody;
use crate::numerics::layer::{log_softmax, softmax, Activation, MlpGrads, MlpLayer};
use crate::numerics::lora::{LoraGrads, LoraLayer};
use crate::numerics::matrix::{cosine, Matrix};
use crate::numerics::optim::Optimizer;
use crate::numerics::rng::Rng;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;

const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<sep>"];

/// Token ↔ id bijection with fixed special ids 0..=3. Ids are dense.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from raw texts. Tokens are collected through the
    /// shared tokenizer and sorted, so the mapping is deterministic.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vocab {
        let mut set = BTreeSet::new();
        for text in texts {
            for tok in crate::text::tokenize(text) {
                set.insert(tok);
            }
        }
        let mut id_to_token: Vec<String> =
            SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(set);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab {
            id_to_token,
            token_to_id,
        }
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    /// Encodes plain text. Tokens outside the vocabulary map to PAD.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        crate::text::tokenize(text)
            .iter()
            .map(|t| self.id(t).unwrap_or(PAD))
            .collect()
    }

    /// Encodes a serialized record: each grammar line is tokenized and the
    /// line breaks become SEP tokens, preserving the section structure.
    pub fn encode_record(&self, serialized: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for (k, line) in serialized.lines().enumerate() {
            if k > 0 {
                ids.push(SEP);
            }
            ids.extend(self.encode(line));
        }
        ids
    }

    /// Renders token ids back to text: SEP becomes a newline, other tokens
    /// join with single spaces; PAD/BOS/EOS are dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut lines: Vec<Vec<&str>> = vec![Vec::new()];
        for &id in ids {
            match id {
                SEP => lines.push(Vec::new()),
                PAD | BOS | EOS => {}
                other => lines.last_mut().unwrap().push(self.token(other)),
            }
        }
        lines
            .iter()
            .map(|l| l.join(" "))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::from("# msd vocab v1");
        for (i, tok) in self.id_to_token.iter().enumerate() {
            out.push_str(&format!("\n{i}\t{tok}"));
        }
        out.push('\n');
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Vocab> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        if lines.next() != Some("# msd vocab v1") {
            return Err(Error::BadArtifact {
                path: path.display().to_string(),
                detail: "bad vocab header".into(),
            });
        }
        let mut id_to_token = Vec::new();
        for line in lines {
            let (id, tok) = line.split_once('\t').ok_or_else(|| Error::BadArtifact {
                path: path.display().to_string(),
                detail: format!("bad vocab line {line}"),
            })?;
            if id.parse::<usize>().ok() != Some(id_to_token.len()) {
                return Err(Error::BadArtifact {
                    path: path.display().to_string(),
                    detail: format!("non-dense vocab id {id}"),
                });
            }
            id_to_token.push(tok.to_string());
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocab {
            id_to_token,
            token_to_id,
        })
    }
}

/// One training example: prompt tokens `x` and teacher tokens `y`
/// (EOS-terminated). BOS is prepended to the target at training time.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillExample {
    pub x: Vec<u32>,
    pub y: Vec<u32>,
}

impl DistillExample {
    /// Builds an example from a prompt body and teacher record. The prompt
    /// keeps its last `budget` tokens (the payload sits at the end of the
    /// rendered templates, and the fixed-window student only ever sees the
    /// tail anyway).
    pub fn new(vocab: &Vocab, prompt_body: &str, record: &RecordBody, budget: usize) -> Self {
        let mut x = vocab.encode(prompt_body);
        if x.len() > budget {
            x.drain(..x.len() - budget);
        }
        let mut y = vocab.encode_record(&record.serialize());
        y.push(EOS);
        DistillExample { x, y }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudentConfig {
    /// Context window length in tokens.
    pub window: usize,
    /// Token embedding width.
    pub d_tok: usize,
    /// Hidden width; also the semantic embedding dimension.
    pub d_hidden: usize,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig {
            window: 4,
            d_tok: 12,
            d_hidden: 24,
        }
    }
}

/// Fixed-window autoregressive student.
#[derive(Debug, Clone)]
pub struct StudentModel {
    pub vocab: Vocab,
    pub config: StudentConfig,
    /// V × d_tok. The PAD row is pinned to zero and never trained, so
    /// left-padding is semantically neutral.
    pub embedding: Matrix,
    /// d_hidden × (window · d_tok), ReLU.
    pub hidden: MlpLayer,
    /// V × d_hidden, identity activation (logits).
    pub output: MlpLayer,
    /// Present only during CTR fine-tuning; wraps the hidden weight.
    pub lora: Option<LoraLayer>,
}

/// Per-position tape: window token ids plus cached activations.
#[derive(Debug, Clone)]
pub struct PositionTape {
    window: Vec<u32>,
    concat: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden_out: Vec<f64>,
    lora_ax: Option<Vec<f64>>,
}

/// Gradient accumulator mirroring the trainable parameter blocks.
#[derive(Debug, Clone)]
pub struct StudentGrads {
    pub d_embedding: Matrix,
    pub d_hidden: MlpGrads,
    pub d_output: MlpGrads,
}

impl StudentGrads {
    pub fn zeros_like(student: &StudentModel) -> Self {
        StudentGrads {
            d_embedding: Matrix::zeros(student.vocab.size(), student.config.d_tok),
            d_hidden: MlpGrads {
                d_weight: Matrix::zeros(
                    student.hidden.weight.rows(),
                    student.hidden.weight.cols(),
                ),
                d_bias: vec![0.0; student.hidden.bias.len()],
            },
            d_output: MlpGrads {
                d_weight: Matrix::zeros(
                    student.output.weight.rows(),
                    student.output.weight.cols(),
                ),
                d_bias: vec![0.0; student.output.bias.len()],
            },
        }
    }

    fn scale(&mut self, s: f64) {
        self.d_embedding.scale(s);
        self.d_hidden.d_weight.scale(s);
        self.d_hidden.d_bias.iter_mut().for_each(|x| *x *= s);
        self.d_output.d_weight.scale(s);
        self.d_output.d_bias.iter_mut().for_each(|x| *x *= s);
    }
}

impl StudentModel {
    /// Fresh student. Output weights start at zero, so an untrained model
    /// emits exactly uniform distributions (per-token loss = ln V).
    pub fn new(vocab: Vocab, config: StudentConfig, rng: &mut Rng) -> Self {
        let v = vocab.size();
        let mut embedding = Matrix::uniform(v, config.d_tok, 0.1, rng);
        embedding
            .row_mut(PAD as usize)
            .iter_mut()
            .for_each(|x| *x = 0.0);
        let hidden = MlpLayer::xavier(
            config.d_hidden,
            config.window * config.d_tok,
            Activation::ReLU,
            rng,
        );
        let output = MlpLayer::zeros(v, config.d_hidden, Activation::Identity);
        StudentModel {
            vocab,
            config,
            embedding,
            hidden,
            output,
            lora: None,
        }
    }

    /// Wraps the hidden weight in a LoRA adapter for CTR fine-tuning. The
    /// base weight is cloned into the adapter and stays frozen.
    pub fn enable_lora(&mut self, rank: usize, alpha: f64, rng: &mut Rng) -> Result<()> {
        self.lora = Some(LoraLayer::wrap(
            self.hidden.weight.clone(),
            rank,
            alpha,
            rng,
        )?);
        Ok(())
    }

    pub fn disable_lora(&mut self) {
        self.lora = None;
    }

    fn window_concat(&self, window: &[u32]) -> Vec<f64> {
        let d = self.config.d_tok;
        let mut concat = Vec::with_capacity(window.len() * d);
        for &tok in window {
            concat.extend_from_slice(self.embedding.row(tok as usize));
        }
        concat
    }

    /// Hidden activation for one window; honors the LoRA adapter if present.
    fn hidden_forward(&self, window: &[u32]) -> Result<PositionTape> {
        let concat = self.window_concat(window);
        let (mut pre, lora_ax) = match &self.lora {
            Some(lora) => {
                let (pre, tape) = lora.forward(&concat)?;
                (pre, Some(tape.ax().to_vec()))
            }
            None => (self.hidden.weight.matvec(&concat)?, None),
        };
        for (p, b) in pre.iter_mut().zip(&self.hidden.bias) {
            *p += b;
        }
        let hidden_out: Vec<f64> = pre.iter().map(|&z| z.max(0.0)).collect();
        Ok(PositionTape {
            window: window.to_vec(),
            concat,
            hidden_pre: pre,
            hidden_out,
            lora_ax,
        })
    }

    /// Logits for one window of token ids.
    pub fn logits(&self, window: &[u32]) -> Result<Vec<f64>> {
        let tape = self.hidden_forward(window)?;
        let mut l = self.output.weight.matvec(&tape.hidden_out)?;
        for (x, b) in l.iter_mut().zip(&self.output.bias) {
            *x += b;
        }
        Ok(l)
    }

    /// Next-token distribution; sums to one within 1e-9.
    pub fn predict_dist(&self, window: &[u32]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(window)?))
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        let v = self.vocab.size() as u32;
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: v as usize,
                });
            }
        }
        Ok(())
    }

    /// The stream `x ++ BOS ++ y` and the index of the first target token.
    fn stream(&self, example: &DistillExample) -> (Vec<u32>, usize) {
        let mut stream = Vec::with_capacity(example.x.len() + 1 + example.y.len());
        stream.extend_from_slice(&example.x);
        stream.push(BOS);
        let first_target = stream.len();
        stream.extend_from_slice(&example.y);
        (stream, first_target)
    }

    /// The `window` tokens preceding `pos`, left-padded with PAD.
    fn window_at(&self, stream: &[u32], pos: usize) -> Vec<u32> {
        let w = self.config.window;
        let mut window = vec![PAD; w.saturating_sub(pos)];
        let start = pos.saturating_sub(w);
        window.extend_from_slice(&stream[start..pos]);
        window
    }
}

/// Total and mean-per-token negative log-likelihood of a teacher sequence,
/// plus gradients for every trainable parameter.
pub fn distill_loss(
    student: &StudentModel,
    example: &DistillExample,
) -> Result<(f64, f64, StudentGrads)> {
    student.check_ids(&example.x)?;
    student.check_ids(&example.y)?;
    if example.y.is_empty() {
        return Err(Error::InvalidConfig(
            "distill example with empty target".into(),
        ));
    }
    let (stream, first_target) = student.stream(example);
    let mut grads = StudentGrads::zeros_like(student);
    let mut total = 0.0;
    for (t, &target) in example.y.iter().enumerate() {
        let pos = first_target + t;
        let window = student.window_at(&stream, pos);
        let tape = student.hidden_forward(&window)?;
        let mut logits = student.output.weight.matvec(&tape.hidden_out)?;
        for (x, b) in logits.iter_mut().zip(&student.output.bias) {
            *x += b;
        }
        let logp = log_softmax(&logits);
        total -= logp[target as usize];
        // dL/dlogits = softmax − onehot(target)
        let mut dlogits = softmax(&logits);
        dlogits[target as usize] -= 1.0;
        grads.d_output.d_weight.add_outer(1.0, &dlogits, &tape.hidden_out);
        for (b, g) in grads.d_output.d_bias.iter_mut().zip(&dlogits) {
            *b += g;
        }
        let dh = student.output.weight.t_matvec(&dlogits)?;
        backward_hidden(student, &tape, &dh, &mut grads, None)?;
    }
    if !total.is_finite() {
        return Err(Error::NonFinite {
            op: "distill_loss",
            detail: format!("nll = {total}"),
        });
    }
    let mean = total / example.y.len() as f64;
    Ok((total, mean, grads))
}

/// Backward from dL/dhidden_out through ReLU, the (possibly LoRA-wrapped)
/// hidden affine map and the embedding gather. When a LoRA adapter is
/// present its a/b gradients go to `lora_grads` and the frozen base weight
/// receives none.
fn backward_hidden(
    student: &StudentModel,
    tape: &PositionTape,
    dh: &[f64],
    grads: &mut StudentGrads,
    lora_grads: Option<&mut LoraGrads>,
) -> Result<()> {
    let dpre: Vec<f64> = tape
        .hidden_pre
        .iter()
        .zip(dh)
        .map(|(&z, &g)| if z > 0.0 { g } else { 0.0 })
        .collect();
    for (b, g) in grads.d_hidden.d_bias.iter_mut().zip(&dpre) {
        *b += g;
    }
    let dconcat = match &student.lora {
        Some(lora) => {
            let s = lora.scaling();
            let btg = lora.b.t_matvec(&dpre)?;
            if let Some(lg) = lora_grads {
                let ax = tape.lora_ax.as_ref().expect("tape from a LoRA forward");
                lg.d_b.add_outer(s, &dpre, ax);
                lg.d_a.add_outer(s, &btg, &tape.concat);
            }
            let mut dx = lora.w0.t_matvec(&dpre)?;
            let at = lora.a.t_matvec(&btg)?;
            for (d, v) in dx.iter_mut().zip(&at) {
                *d += s * v;
            }
            dx
        }
        None => {
            grads.d_hidden.d_weight.add_outer(1.0, &dpre, &tape.concat);
            student.hidden.weight.t_matvec(&dpre)?
        }
    };
    // Scatter into embedding rows; the PAD row stays zero.
    let d = student.config.d_tok;
    for (j, &tok) in tape.window.iter().enumerate() {
        if tok == PAD {
            continue;
        }
        let row = grads.d_embedding.row_mut(tok as usize);
        for (r, v) in row.iter_mut().zip(&dconcat[j * d..(j + 1) * d]) {
            *r += v;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TrainStudentConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Emit a checkpoint every this many steps (and at the end).
    pub ckpt_every: usize,
    /// Evaluate validation loss every this many steps (plus step 0 and end).
    pub eval_every: usize,
}

impl Default for TrainStudentConfig {
    fn default() -> Self {
        TrainStudentConfig {
            steps: 600,
            batch_size: 16,
            learning_rate: 0.02,
            ckpt_every: 100,
            eval_every: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub struct TrainResult {
    pub model: StudentModel,
    pub curve: Vec<CurvePoint>,
    /// (step, snapshot) pairs in step order; always includes the final step.
    pub checkpoints: Vec<(usize, StudentModel)>,
}

/// Mean per-token NLL over a set of examples (no gradients).
pub fn mean_nll(student: &StudentModel, examples: &[DistillExample]) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for ex in examples {
        let (stream, first_target) = student.stream(ex);
        for (t, &target) in ex.y.iter().enumerate() {
            let window = student.window_at(&stream, first_target + t);
            let logits = student.logits(&window)?;
            total -= log_softmax(&logits)[target as usize];
        }
        tokens += ex.y.len();
    }
    Ok(total / tokens.max(1) as f64)
}

/// Trains a fresh student on the dataset with Adam, mean-per-token loss.
/// Deterministic given the rng seed; diverging loss aborts with diagnostics.
pub fn train_student(
    vocab: Vocab,
    train: &[DistillExample],
    val: &[DistillExample],
    student_cfg: StudentConfig,
    cfg: &TrainStudentConfig,
    rng: &mut Rng,
) -> Result<TrainResult> {
    if train.is_empty() {
        return Err(Error::InvalidConfig(
            "empty distillation training set".into(),
        ));
    }
    let mut student = StudentModel::new(vocab, student_cfg, rng);
    let mut opt = Optimizer::adam(cfg.learning_rate);
    let mut curve = Vec::new();
    let mut checkpoints: Vec<(usize, StudentModel)> = Vec::new();

    let val_set = if val.is_empty() { train } else { val };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len(); // forces a shuffle on first use

    let initial_train = mean_nll(&student, train)?;
    curve.push(CurvePoint {
        step: 0,
        train_loss: initial_train,
        val_loss: mean_nll(&student, val_set)?,
    });

    for step in 1..=cfg.steps {
        let mut grads = StudentGrads::zeros_like(&student);
        let mut batch_tokens = 0usize;
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            if cursor >= order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            let ex = &train[order[cursor]];
            cursor += 1;
            let (total, _, g) = distill_loss(&student, ex)?;
            add_student_grads(&mut grads, &g);
            batch_loss += total;
            batch_tokens += ex.y.len();
        }
        let scale = 1.0 / batch_tokens.max(1) as f64;
        grads.scale(scale);
        let train_loss = batch_loss * scale;
        if !train_loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("batch loss {train_loss}"),
            });
        }
        // PAD embedding stays frozen at zero.
        grads
            .d_embedding
            .row_mut(PAD as usize)
            .iter_mut()
            .for_each(|x| *x = 0.0);
        opt.step(0, student.embedding.as_mut_slice(), grads.d_embedding.as_slice())?;
        opt.step(
            1,
            student.hidden.weight.as_mut_slice(),
            grads.d_hidden.d_weight.as_slice(),
        )?;
        opt.step(2, &mut student.hidden.bias, &grads.d_hidden.d_bias)?;
        opt.step(
            3,
            student.output.weight.as_mut_slice(),
            grads.d_output.d_weight.as_slice(),
        )?;
        opt.step(4, &mut student.output.bias, &grads.d_output.d_bias)?;

        if step % cfg.eval_every == 0 || step == cfg.steps {
            curve.push(CurvePoint {
                step,
                train_loss,
                val_loss: mean_nll(&student, val_set)?,
            });
        }
        if (step % cfg.ckpt_every == 0 || step == cfg.steps)
            && checkpoints.last().map(|(s, _)| *s) != Some(step)
        {
            checkpoints.push((step, student.clone()));
        }
    }

    Ok(TrainResult {
        model: student,
        curve,
        checkpoints,
    })
}

fn add_student_grads(acc: &mut StudentGrads, g: &StudentGrads) {
    for (a, b) in acc
        .d_embedding
        .as_mut_slice()
        .iter_mut()
        .zip(g.d_embedding.as_slice())
    {
        *a += b;
    }
    acc.d_hidden.add(&g.d_hidden);
    acc.d_output.add(&g.d_output);
}

// ---------------------------------------------------------------------------
// Decoding and semantic embeddings
// ---------------------------------------------------------------------------

/// Greedy decoding: argmax per step with ties going to the lowest token id;
/// stops after emitting EOS or `max_len` tokens. Deterministic.
pub fn greedy_decode(student: &StudentModel, x: &[u32], max_len: usize) -> Result<Vec<u32>> {
    assert!(max_len >= 1, "max_len must be ≥ 1");
    let mut stream: Vec<u32> = x.to_vec();
    stream.push(BOS);
    let mut out = Vec::new();
    while out.len() < max_len {
        let window = student.window_at(&stream, stream.len());
        let logits = student.logits(&window)?;
        let mut best = 0usize;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        let tok = best as u32;
        out.push(tok);
        stream.push(tok);
        if tok == EOS {
            break;
        }
    }
    Ok(out)
}

/// Per-position tapes behind a pooled embedding; needed for backward.
pub struct EmbeddingTape {
    tapes: Vec<PositionTape>,
}

/// Mean-pooled hidden activations over the text's token positions. The
/// embedding dimension equals the hidden width. Empty (or fully unknown)
/// text yields a zero vector and a warning flag.
pub fn semantic_embedding(student: &StudentModel, text: &str) -> Result<(Vec<f64>, bool)> {
    let (e, _, empty) = embed_with_tape(student, text)?;
    Ok((e, empty))
}

/// As [`semantic_embedding`], returning the tape for backward.
pub fn embed_with_tape(
    student: &StudentModel,
    text: &str,
) -> Result<(Vec<f64>, EmbeddingTape, bool)> {
    let ids = student.vocab.encode(text);
    embed_ids_with_tape(student, &ids)
}

pub fn embed_ids_with_tape(
    student: &StudentModel,
    ids: &[u32],
) -> Result<(Vec<f64>, EmbeddingTape, bool)> {
    let d_h = student.config.d_hidden;
    if ids.is_empty() {
        return Ok((vec![0.0; d_h], EmbeddingTape { tapes: Vec::new() }, true));
    }
    let mut sum = vec![0.0; d_h];
    let mut tapes = Vec::with_capacity(ids.len());
    for pos in 1..=ids.len() {
        let window = student.window_at(ids, pos);
        let tape = student.hidden_forward(&window)?;
        for (s, h) in sum.iter_mut().zip(&tape.hidden_out) {
            *s += h;
        }
        tapes.push(tape);
    }
    let n = ids.len() as f64;
    for s in &mut sum {
        *s /= n;
    }
    Ok((sum, EmbeddingTape { tapes }, false))
}

/// Backward through the pooled embedding into the LoRA factors. Only the
/// adapter is trainable on this path; the rest of the student is frozen
/// during CTR training, so no other gradients are produced.
pub fn embed_backward(
    student: &StudentModel,
    tape: &EmbeddingTape,
    upstream: &[f64],
) -> Result<Option<LoraGrads>> {
    let mut lora_grads = student.lora.as_ref().map(LoraGrads::zeros_like);
    if tape.tapes.is_empty() {
        return Ok(lora_grads);
    }
    let mut scratch = StudentGrads::zeros_like(student);
    let n = tape.tapes.len() as f64;
    let dh: Vec<f64> = upstream.iter().map(|g| g / n).collect();
    for pos_tape in &tape.tapes {
        backward_hidden(student, pos_tape, &dh, &mut scratch, lora_grads.as_mut())?;
    }
    Ok(lora_grads)
}

// ---------------------------------------------------------------------------
// Phrase F1
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F1Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub matches: usize,
}

/// Phrase-level F1 with embedding-based equivalence.
///
/// Every phrase is embedded through the student; candidate pairs are scanned
/// in descending cosine order (ties by index) and matched greedily
/// one-to-one. A pair counts as equivalent when its cosine reaches
/// `threshold`. F1 is 0 when precision+recall is 0.
pub fn phrase_f1(
    predicted: &RecordBody,
    truth: &RecordBody,
    student: &StudentModel,
    threshold: f64,
) -> Result<F1Scores> {
    let truth_phrases = truth.all_phrases();
    if truth_phrases.is_empty() {
        return Err(Error::UndefinedMetric(
            "phrase_f1 requires a non-empty truth phrase list".into(),
        ));
    }
    let pred_phrases = predicted.all_phrases();
    if pred_phrases.is_empty() {
        return Ok(F1Scores {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
            matches: 0,
        });
    }
    let embed = |phrases: &[String]| -> Result<Vec<Vec<f64>>> {
        phrases
            .iter()
            .map(|p| semantic_embedding(student, p).map(|(e, _)| e))
            .collect()
    };
    let pe = embed(&pred_phrases)?;
    let te = embed(&truth_phrases)?;
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, a) in pe.iter().enumerate() {
        for (j, b) in te.iter().enumerate() {
            if let Some(sim) = cosine(a, b) {
                pairs.push((sim, i, j));
            }
        }
    }
    pairs.sort_by(|x, y| {
        y.0.partial_cmp(&x.0)
            .unwrap()
            .then(x.1.cmp(&y.1))
            .then(x.2.cmp(&y.2))
    });
    let mut pred_used = vec![false; pe.len()];
    let mut truth_used = vec![false; te.len()];
    let mut matches = 0usize;
    for (sim, i, j) in pairs {
        if sim < threshold {
            break;
        }
        if !pred_used[i] && !truth_used[j] {
            pred_used[i] = true;
            truth_used[j] = true;
            matches += 1;
        }
    }
    let precision = matches as f64 / pred_phrases.len() as f64;
    let recall = matches as f64 / truth_phrases.len() as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(F1Scores {
        precision,
        recall,
        f1,
        matches,
    })
}

/// Lenient extraction of a record from decoded tokens: sections split on
/// SEP, recognized by their leading `explicit :` / `implicit :` /
/// `rationale :` markers; phrases split on `;` tokens. Unrecognized
/// segments are skipped and empty phrases dropped, so partially learned
/// students still earn partial credit.
pub fn extract_record_tokens(vocab: &Vocab, ids: &[u32]) -> RecordBody {
    let mut segments: Vec<Vec<&str>> = vec![Vec::new()];
    for &id in ids {
        match id {
            SEP => segments.push(Vec::new()),
            PAD | BOS | EOS => {}
            other => segments.last_mut().unwrap().push(vocab.token(other)),
        }
    }
    let mut body = RecordBody::default();
    for seg in &segments {
        if seg.len() < 2 || seg[1] != ":" {
            continue;
        }
        let content = &seg[2..];
        match seg[0] {
            "explicit" | "implicit" => {
                let mut phrases = Vec::new();
                let mut cur: Vec<&str> = Vec::new();
                for &tok in content {
                    if tok == ";" {
                        if !cur.is_empty() {
                            phrases.push(cur.join(" "));
                            cur.clear();
                        }
                    } else {
                        cur.push(tok);
                    }
                }
                if !cur.is_empty() {
                    phrases.push(cur.join(" "));
                }
                if seg[0] == "explicit" && body.explicit_phrases.is_empty() {
                    body.explicit_phrases = phrases;
                } else if seg[0] == "implicit" && body.implicit_phrases.is_empty() {
                    body.implicit_phrases = phrases;
                }
            }
            "rationale" => {
                if body.rationale.is_empty() {
                    body.rationale = content.join(" ");
                }
            }
            _ => {}
        }
    }
    body
}

// ---------------------------------------------------------------------------
// Checkpoint files
// ---------------------------------------------------------------------------

const STUDENT_MAGIC: &[u8; 4] = b"MSDS";
const STUDENT_VERSION: u32 = 1;

pub(crate) fn push_block_f32(buf: &mut Vec<u8>, data: &[f64]) {
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub(crate) fn read_block_f32(r: &mut impl Read, n: usize, path: &Path) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(|_| Error::BadArtifact {
        path: path.display().to_string(),
        detail: "truncated parameter block".into(),
    })?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Writes the student checkpoint: header {magic, version, V, W, d_tok, d_h}
/// then parameter blocks as little-endian 32-bit floats in the order
/// embedding, hidden weight, hidden bias, output weight, output bias.
pub fn write_student(student: &StudentModel, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(STUDENT_MAGIC);
    for v in [
        STUDENT_VERSION,
        student.vocab.size() as u32,
        student.config.window as u32,
        student.config.d_tok as u32,
        student.config.d_hidden as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    push_block_f32(&mut buf, student.embedding.as_slice());
    push_block_f32(&mut buf, student.hidden.weight.as_slice());
    push_block_f32(&mut buf, &student.hidden.bias);
    push_block_f32(&mut buf, student.output.weight.as_slice());
    push_block_f32(&mut buf, &student.output.bias);
    std::fs::write(path, buf)?;
    Ok(())
}

/// Loads a checkpoint written by [`write_student`]. The vocabulary comes
/// from its own artifact (see [`Vocab::write`]); sizes must agree.
pub fn read_student(path: &Path, vocab: Vocab) -> Result<StudentModel> {
    let data = std::fs::read(path)?;
    let mut r: &[u8] = &data;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| bad_ckpt(path, "truncated magic"))?;
    if &magic != STUDENT_MAGIC {
        return Err(bad_ckpt(path, "bad magic"));
    }
    let mut u32s = [0u32; 5];
    for slot in &mut u32s {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|_| bad_ckpt(path, "truncated header"))?;
        *slot = u32::from_le_bytes(b);
    }
    let [version, v, w, d_tok, d_h] = u32s;
    if version != STUDENT_VERSION {
        return Err(bad_ckpt(path, format!("unsupported version {version}")));
    }
    if v as usize != vocab.size() {
        return Err(bad_ckpt(
            path,
            format!("vocab size {} does not match header {v}", vocab.size()),
        ));
    }
    let (v, w, d_tok, d_h) = (v as usize, w as usize, d_tok as usize, d_h as usize);
    let embedding = Matrix::from_vec(v, d_tok, read_block_f32(&mut r, v * d_tok, path)?)?;
    let hidden_w = Matrix::from_vec(
        d_h,
        w * d_tok,
        read_block_f32(&mut r, d_h * w * d_tok, path)?,
    )?;
    let hidden_b = read_block_f32(&mut r, d_h, path)?;
    let output_w = Matrix::from_vec(v, d_h, read_block_f32(&mut r, v * d_h, path)?)?;
    let output_b = read_block_f32(&mut r, v, path)?;
    if !r.is_empty() {
        return Err(bad_ckpt(path, "trailing bytes"));
    }
    Ok(StudentModel {
        vocab,
        config: StudentConfig {
            window: w,
            d_tok,
            d_hidden: d_h,
        },
        embedding,
        hidden: MlpLayer {
            weight: hidden_w,
            bias: hidden_b,
            activation: Activation::ReLU,
        },
        output: MlpLayer {
            weight: output_w,
            bias: output_b,
            activation: Activation::Identity,
        },
        lora: None,
    })
}

fn bad_ckpt(path: &Path, detail: impl Into<String>) -> Error {
    Error::BadArtifact {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

/// Serialized bytes of the frozen base parameters; used to assert the base
/// never changes during fine-tuning.
pub fn base_fingerprint(student: &StudentModel) -> Vec<u8> {
    let mut buf = Vec::new();
    push_block_f32(&mut buf, student.embedding.as_slice());
    push_block_f32(&mut buf, student.hidden.weight.as_slice());
    push_block_f32(&mut buf, &student.hidden.bias);
    push_block_f32(&mut buf, student.output.weight.as_slice());
    push_block_f32(&mut buf, &student.output.bias);
    if let Some(lora) = &student.lora {
        push_block_f32(&mut buf, lora.w0.as_slice());
    }
    buf
}
