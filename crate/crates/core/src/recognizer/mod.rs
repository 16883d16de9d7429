//! Action recognition with a frozen language model.
//!
//! An action sentence is spliced into an instruction as raw input
//! embeddings; the model then generates the action name word by word.
//! Only low-rank adapters on the attention query and value projections are
//! trained, so the pre-trained weights stay bit-identical.

pub mod corpus;
pub mod lm;

use diffcore::{AdamW, AdamWConfig, SeededRng, Tape, Tensor, Var};
use serde::Serialize;

use crate::error::{contract, CoreError, Result};
use crate::nn::argmax;
pub use corpus::{
    build_corpus, split_words, Corpus, CorpusConfig, Vocab, EOS, SEEN_TEMPLATE, UNSEEN_TEMPLATE,
};
pub use lm::{attach_lora, verify_base_frozen, BaseLm, LmConfig, LoraAdapters, SeqInput};

/// An assembled instruction: word ids around an injected latent block.
#[derive(Debug, Clone, PartialEq)]
pub struct Instruction {
    pub template: String,
    pub class_list: Vec<String>,
    pub input: SeqInput,
}

impl Instruction {
    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }

    /// The assembled input embeddings `[len, d]` (without positions).
    pub fn embeddings(&self, base: &BaseLm) -> Tensor {
        let e = base.embeddings();
        let inj = self.input.injected.as_ref();
        let mut next = 0;
        let rows: Vec<Vec<f64>> = self
            .input
            .ids
            .iter()
            .map(|id| match id {
                Some(w) => e.row(*w).to_vec(),
                None => {
                    next += 1;
                    inj.expect("injected rows present").row(next - 1).to_vec()
                }
            })
            .collect();
        Tensor::from_rows(&rows)
    }
}

/// Builds the instruction for `latents` (`W x d`). A non-empty class list
/// switches to `list_template`.
pub fn build_instruction(
    latents: &Tensor,
    base: &BaseLm,
    template: &str,
    list_template: &str,
    class_list: &[String],
) -> Result<Instruction> {
    if latents.rank() != 2 || latents.cols() != base.cfg.d_model {
        return Err(contract(
            "build_instruction",
            format!(
                "latents {:?} do not match model width {}",
                latents.shape(),
                base.cfg.d_model
            ),
        ));
    }
    let template = if class_list.is_empty() {
        template
    } else {
        list_template
    };
    let words = split_words(template);
    if words.iter().filter(|w| *w == corpus::TOKENS_SLOT).count() != 1 {
        return Err(CoreError::Config(format!(
            "template must contain exactly one {} slot",
            corpus::TOKENS_SLOT
        )));
    }
    let mut ids = Vec::new();
    for w in &words {
        match w.as_str() {
            corpus::TOKENS_SLOT => ids.extend(std::iter::repeat_n(None, latents.rows())),
            corpus::LIST_SLOT => {
                for (i, name) in class_list.iter().enumerate() {
                    if i > 0 {
                        ids.push(Some(vocab_id(&base.vocab, ",")?));
                    }
                    ids.extend(base.vocab.encode(name)?.into_iter().map(Some));
                }
            }
            other => ids.push(Some(vocab_id(&base.vocab, other)?)),
        }
    }
    Ok(Instruction {
        template: template.to_string(),
        class_list: class_list.to_vec(),
        input: SeqInput {
            ids,
            injected: Some(latents.clone()),
        },
    })
}

fn vocab_id(vocab: &Vocab, w: &str) -> Result<usize> {
    vocab
        .id(w)
        .ok_or_else(|| CoreError::Config(format!("template word '{w}' is not in the vocabulary")))
}

/// Mean cross-entropy over positions with a target; `None` positions are
/// masked out. `logits` is `[T, vocab]`.
pub fn lora_loss(tape: &mut Tape, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
    let lv = tape.value(logits);
    let (t, v) = (lv.rows(), lv.cols());
    if targets.len() != t {
        return Err(contract(
            "lora_loss",
            format!("{} targets for {t} positions", targets.len()),
        ));
    }
    let rows: Vec<usize> = (0..t).filter(|&i| targets[i].is_some()).collect();
    if rows.is_empty() {
        return Err(contract("lora_loss", "no target positions"));
    }
    let mut flat = Vec::with_capacity(rows.len());
    for (k, &r) in rows.iter().enumerate() {
        let y = targets[r].expect("filtered");
        if y >= v {
            return Err(CoreError::Config(format!(
                "target id {y} is outside the vocabulary"
            )));
        }
        flat.push(k * v + y);
    }
    let picked = tape.gather_rows(logits, &rows)?;
    let logp = tape.log_softmax_rows(picked);
    let n = flat.len();
    let chosen = tape.gather(logp, flat, vec![n])?;
    let mean = tape.mean(chosen);
    Ok(tape.neg(mean))
}

/// Stacks each instruction with its teacher-forced answer and returns the
/// hidden-state rows that predict answer words, and the targets.
pub fn teacher_forcing(
    instructions: &[Instruction],
    answers: &[Vec<usize>],
) -> (Vec<SeqInput>, Vec<usize>, Vec<usize>) {
    let mut seqs = Vec::with_capacity(instructions.len());
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut offset = 0;
    for (ins, ans) in instructions.iter().zip(answers) {
        let mut s = ins.input.clone();
        let l = s.ids.len();
        s.ids.extend(ans[..ans.len() - 1].iter().map(|&w| Some(w)));
        for (j, &y) in ans.iter().enumerate() {
            rows.push(offset + l - 1 + j);
            targets.push(y);
        }
        offset += s.ids.len();
        seqs.push(s);
    }
    (seqs, rows, targets)
}

/// Cross-entropy of the adapted model on a batch of (instruction, answer)
/// pairs, where each answer ends with the end-of-sequence word.
pub fn answer_loss(
    tape: &mut Tape,
    base: &BaseLm,
    base_bound: &diffcore::Bound,
    lora: Option<(&LoraAdapters, &diffcore::Bound)>,
    instructions: &[Instruction],
    answers: &[Vec<usize>],
) -> Result<Var> {
    let (seqs, rows, targets) = teacher_forcing(instructions, answers);
    let h = base.hidden(tape, base_bound, &seqs, lora)?;
    let logits = base.logits_at(tape, base_bound, h, &rows)?;
    let t: Vec<Option<usize>> = targets.into_iter().map(Some).collect();
    lora_loss(tape, logits, &t)
}

/// Greedy decoding outcome for one instruction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub text: String,
    /// The decoded text is one of the allowed class names.
    pub valid: bool,
}

/// Greedily decodes up to `max_words` words (stopping at end-of-sequence)
/// for every instruction, and matches the text against `allowed` names.
pub fn predict(
    base: &BaseLm,
    lora: Option<&LoraAdapters>,
    instructions: &[Instruction],
    allowed: &[String],
    max_words: usize,
) -> Result<Vec<Prediction>> {
    let mut seqs: Vec<SeqInput> = instructions.iter().map(|i| i.input.clone()).collect();
    let mut outputs: Vec<Vec<usize>> = vec![Vec::new(); seqs.len()];
    let mut done = vec![false; seqs.len()];
    for _ in 0..=max_words {
        let active: Vec<usize> = (0..seqs.len()).filter(|&i| !done[i]).collect();
        if active.is_empty() {
            break;
        }
        let batch: Vec<SeqInput> = active.iter().map(|&i| seqs[i].clone()).collect();
        let mut tape = Tape::new();
        let bound = base.params.bind(&mut tape);
        let lb = lora.map(|l| (l, l.params.bind(&mut tape)));
        let h = base.hidden(&mut tape, &bound, &batch, lb.as_ref().map(|(l, b)| (*l, b)))?;
        let mut last = Vec::with_capacity(batch.len());
        let mut off = 0;
        for s in &batch {
            off += s.len();
            last.push(off - 1);
        }
        let logits = base.logits_at(&mut tape, &bound, h, &last)?;
        let lv = tape.value(logits);
        for (k, &i) in active.iter().enumerate() {
            let w = argmax(lv.row(k));
            if w == base.vocab.eos()
                || outputs[i].len() >= max_words
                || seqs[i].len() >= base.cfg.max_len
            {
                done[i] = true;
            } else {
                outputs[i].push(w);
                seqs[i].ids.push(Some(w));
            }
        }
    }
    Ok(outputs
        .iter()
        .map(|o| {
            let text = base.vocab.decode(o);
            let valid = allowed.contains(&text);
            Prediction { text, valid }
        })
        .collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainSettings {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainReport {
    pub first_loss: f64,
    pub final_loss: f64,
    pub held_out_loss: f64,
    pub unigram_loss: f64,
    pub uniform_loss: f64,
}

fn next_word_loss(
    tape: &mut Tape,
    base: &BaseLm,
    bound: &diffcore::Bound,
    batch: &[&Vec<usize>],
) -> Result<Var> {
    let seqs: Vec<SeqInput> = batch.iter().map(|s| SeqInput::words(s)).collect();
    let h = base.hidden(tape, bound, &seqs, None)?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut off = 0;
    for s in batch {
        for t in 0..s.len() - 1 {
            rows.push(off + t);
            targets.push(Some(s[t + 1]));
        }
        off += s.len();
    }
    let logits = base.logits_at(tape, bound, h, &rows)?;
    lora_loss(tape, logits, &targets)
}

/// Mean next-word cross-entropy of `base` over `sentences`.
pub fn corpus_loss(base: &BaseLm, sentences: &[Vec<usize>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in sentences.chunks(64) {
        let batch: Vec<&Vec<usize>> = chunk.iter().collect();
        let n: usize = batch.iter().map(|s| s.len() - 1).sum();
        let mut tape = Tape::new();
        let bound = base.params.bind(&mut tape);
        let l = next_word_loss(&mut tape, base, &bound, &batch)?;
        total += tape.value(l).item() * n as f64;
        count += n;
    }
    Ok(total / count.max(1) as f64)
}

/// Cross-entropy of the training unigram distribution on `held_out`.
fn unigram_loss(corpus: &Corpus) -> f64 {
    let v = corpus.vocab.len();
    let mut counts = vec![1.0; v];
    for s in &corpus.train {
        for &w in &s[1..] {
            counts[w] += 1.0;
        }
    }
    let z: f64 = counts.iter().sum();
    let mut total = 0.0;
    let mut n = 0usize;
    for s in &corpus.held_out {
        for &w in &s[1..] {
            total -= (counts[w] / z).ln();
            n += 1;
        }
    }
    total / n.max(1) as f64
}

/// Trains a fresh language model on `corpus` with next-word prediction and
/// returns it frozen.
pub fn pretrain_base(
    corpus: &Corpus,
    cfg: LmConfig,
    settings: &PretrainSettings,
    rng: &mut SeededRng,
) -> Result<(BaseLm, PretrainReport)> {
    corpus.check_names(&corpus.class_names)?;
    if corpus.train.is_empty() || settings.batch == 0 {
        return Err(CoreError::Config(
            "pre-training needs sentences and a positive batch size".into(),
        ));
    }
    let mut init = rng.fork(1);
    let mut order_rng = rng.fork(2);
    let mut base = BaseLm::new(cfg, corpus.vocab.clone(), &mut init)?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: settings.lr,
        weight_decay: 0.0,
        clip_norm: Some(1.0),
        ..Default::default()
    });
    let mut order: Vec<usize> = Vec::new();
    let mut first_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    for step in 0..settings.steps {
        let mut batch = Vec::with_capacity(settings.batch);
        for _ in 0..settings.batch {
            if order.is_empty() {
                order = (0..corpus.train.len()).collect();
                order_rng.shuffle(&mut order);
            }
            batch.push(&corpus.train[order.pop().expect("refilled")]);
        }
        let mut tape = Tape::new();
        let bound = base.params.bind(&mut tape);
        let loss = next_word_loss(&mut tape, &base, &bound, &batch)?;
        let lv = tape.value(loss).item();
        if !lv.is_finite() {
            return Err(CoreError::Diverged {
                step,
                msg: "non-finite pre-training loss".into(),
            });
        }
        if step == 0 {
            first_loss = lv;
        }
        final_loss = lv;
        let mut grads = tape.backward(loss)?;
        let g = bound.collect(&mut grads);
        opt.step(&mut base.params, &g);
    }
    base.set_frozen(true);
    let report = PretrainReport {
        first_loss,
        final_loss,
        held_out_loss: corpus_loss(&base, &corpus.held_out)?,
        unigram_loss: unigram_loss(corpus),
        uniform_loss: (corpus.vocab.len() as f64).ln(),
    };
    Ok((base, report))
}
