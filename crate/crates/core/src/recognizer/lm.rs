//! A small decoder-only transformer and low-rank adapters for it.

use diffcore::{Bound, ParamId, ParamSet, SeededRng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::recognizer::corpus::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub max_len: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 4,
            heads: 4,
            ff: 256,
            max_len: 64,
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// One input sequence: word ids, with `None` marking positions filled by
/// the next row of `injected`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqInput {
    pub ids: Vec<Option<usize>>,
    pub injected: Option<Tensor>,
}

impl SeqInput {
    pub fn words(ids: &[usize]) -> Self {
        Self {
            ids: ids.iter().map(|&i| Some(i)).collect(),
            injected: None,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// The frozen language model.
#[derive(Debug, Clone)]
pub struct BaseLm {
    pub cfg: LmConfig,
    pub vocab: Vocab,
    pub params: ParamSet,
    embed: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    head: ParamId,
}

impl BaseLm {
    pub fn new(cfg: LmConfig, vocab: Vocab, rng: &mut SeededRng) -> Result<Self> {
        if cfg.d_model == 0 || cfg.heads == 0 || cfg.d_model % cfg.heads != 0 {
            return Err(contract(
                "base_lm",
                format!(
                    "width {} does not split into {} heads",
                    cfg.d_model, cfg.heads
                ),
            ));
        }
        let (d, v, f) = (cfg.d_model, vocab.len(), cfg.ff);
        let mut p = ParamSet::new();
        let std = 0.02f64.max(1.0 / (d as f64).sqrt() * 0.5);
        let embed = p.add("embed", rng.normal_tensor(&[v, d], std), true);
        let pos = p.add("pos", rng.normal_tensor(&[cfg.max_len, d], 0.02), true);
        let proj = 1.0 / (d as f64).sqrt();
        let out_scale = proj / (2.0 * cfg.layers as f64).sqrt();
        let blocks = (0..cfg.layers)
            .map(|l| Block {
                ln1_g: p.add(format!("block{l}.ln1.g"), Tensor::full(&[d], 1.0), true),
                ln1_b: p.add(format!("block{l}.ln1.b"), Tensor::zeros(&[d]), true),
                wq: p.add(
                    format!("block{l}.attn.q"),
                    rng.normal_tensor(&[d, d], proj),
                    true,
                ),
                wk: p.add(
                    format!("block{l}.attn.k"),
                    rng.normal_tensor(&[d, d], proj),
                    true,
                ),
                wv: p.add(
                    format!("block{l}.attn.v"),
                    rng.normal_tensor(&[d, d], proj),
                    true,
                ),
                wo: p.add(
                    format!("block{l}.attn.o"),
                    rng.normal_tensor(&[d, d], out_scale),
                    true,
                ),
                ln2_g: p.add(format!("block{l}.ln2.g"), Tensor::full(&[d], 1.0), true),
                ln2_b: p.add(format!("block{l}.ln2.b"), Tensor::zeros(&[d]), true),
                w1: p.add(
                    format!("block{l}.mlp.w1"),
                    rng.normal_tensor(&[d, f], proj),
                    true,
                ),
                b1: p.add(format!("block{l}.mlp.b1"), Tensor::zeros(&[1, f]), true),
                w2: p.add(
                    format!("block{l}.mlp.w2"),
                    rng.normal_tensor(&[f, d], out_scale * (d as f64 / f as f64).sqrt()),
                    true,
                ),
                b2: p.add(format!("block{l}.mlp.b2"), Tensor::zeros(&[1, d]), true),
            })
            .collect();
        let lnf_g = p.add("lnf.g", Tensor::full(&[d], 1.0), true);
        let lnf_b = p.add("lnf.b", Tensor::zeros(&[d]), true);
        let head = p.add("head", rng.normal_tensor(&[d, v], proj), true);
        Ok(Self {
            cfg,
            vocab,
            params: p,
            embed,
            pos,
            blocks,
            lnf_g,
            lnf_b,
            head,
        })
    }

    /// Word-embedding table `[vocab, d]`.
    pub fn embeddings(&self) -> &Tensor {
        self.params.get(self.embed)
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.params.set_all_trainable(!frozen);
    }

    /// Final hidden states `[total_len, d]` of stacked sequences.
    pub fn hidden(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        seqs: &[SeqInput],
        lora: Option<(&LoraAdapters, &Bound)>,
    ) -> Result<Var> {
        let d = self.cfg.d_model;
        let mut word_ids = Vec::new();
        let mut injected_rows: Vec<Vec<f64>> = Vec::new();
        let mut slots = Vec::new(); // (is_word, index)
        let mut positions = Vec::new();
        let mut lens = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.ids.is_empty() || s.ids.len() > self.cfg.max_len {
                return Err(contract(
                    "base_lm",
                    format!(
                        "sequence length {} outside 1..={}",
                        s.ids.len(),
                        self.cfg.max_len
                    ),
                ));
            }
            let mut next_injected = 0;
            for (t, id) in s.ids.iter().enumerate() {
                positions.push(t);
                match id {
                    Some(w) => {
                        if *w >= self.vocab.len() {
                            return Err(contract(
                                "base_lm",
                                format!("word id {w} outside the vocabulary"),
                            ));
                        }
                        slots.push((true, word_ids.len()));
                        word_ids.push(*w);
                    }
                    None => {
                        let inj = s
                            .injected
                            .as_ref()
                            .ok_or_else(|| contract("base_lm", "injected slot without vectors"))?;
                        if inj.cols() != d || next_injected >= inj.rows() {
                            return Err(contract(
                                "base_lm",
                                format!("injected vectors {:?} do not fit width {d}", inj.shape()),
                            ));
                        }
                        slots.push((false, injected_rows.len()));
                        injected_rows.push(inj.row(next_injected).to_vec());
                        next_injected += 1;
                    }
                }
            }
            lens.push(s.ids.len());
        }
        let mut parts = Vec::new();
        let n_words = word_ids.len();
        if n_words > 0 {
            parts.push(tape.gather_rows(bound[self.embed], &word_ids)?);
        }
        if !injected_rows.is_empty() {
            parts.push(tape.constant(Tensor::from_rows(&injected_rows)));
        }
        let pool = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_rows(&parts)?
        };
        let order: Vec<usize> = slots
            .iter()
            .map(|&(w, i)| if w { i } else { n_words + i })
            .collect();
        let x = tape.gather_rows(pool, &order)?;
        let pe = tape.gather_rows(bound[self.pos], &positions)?;
        let mut x = tape.add(x, pe)?;
        for (l, b) in self.blocks.iter().enumerate() {
            let h = tape.layer_norm(x, bound[b.ln1_g], bound[b.ln1_b])?;
            let mut q = tape.matmul(h, bound[b.wq])?;
            let k = tape.matmul(h, bound[b.wk])?;
            let mut v = tape.matmul(h, bound[b.wv])?;
            if let Some((ad, ab)) = lora {
                q = ad.adapt(tape, ab, l, Target::Query, h, q)?;
                v = ad.adapt(tape, ab, l, Target::Value, h, v)?;
            }
            let a = tape.causal_attention(q, k, v, &lens, self.cfg.heads)?;
            let o = tape.matmul(a, bound[b.wo])?;
            x = tape.add(x, o)?;
            let h2 = tape.layer_norm(x, bound[b.ln2_g], bound[b.ln2_b])?;
            let m = tape.matmul(h2, bound[b.w1])?;
            let m = tape.add(m, bound[b.b1])?;
            let m = tape.relu(m);
            let m = tape.matmul(m, bound[b.w2])?;
            let m = tape.add(m, bound[b.b2])?;
            x = tape.add(x, m)?;
        }
        Ok(tape.layer_norm(x, bound[self.lnf_g], bound[self.lnf_b])?)
    }

    /// Next-word logits `[rows.len(), vocab]` at the given rows of `hidden`.
    pub fn logits_at(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        hidden: Var,
        rows: &[usize],
    ) -> Result<Var> {
        let h = tape.gather_rows(hidden, rows)?;
        Ok(tape.matmul(h, bound[self.head])?)
    }

    /// Logits at every position, as plain values.
    pub fn logits(&self, seqs: &[SeqInput], lora: Option<&LoraAdapters>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let lb = lora.map(|l| (l, l.params.bind(&mut tape)));
        let h = self.hidden(&mut tape, &bound, seqs, lb.as_ref().map(|(l, b)| (*l, b)))?;
        let rows: Vec<usize> = (0..tape.value(h).rows()).collect();
        let out = self.logits_at(&mut tape, &bound, h, &rows)?;
        Ok(tape.value(out).clone())
    }

    pub fn param_count(&self) -> usize {
        self.params.count(false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Query,
    Value,
}

#[derive(Debug, Clone)]
struct AdapterPair {
    a: ParamId,
    b: ParamId,
}

/// Rank-`r` additive factors on every block's query and value projections:
/// `W0 + (alpha / r) B A`, with `B` starting at zero.
#[derive(Debug, Clone)]
pub struct LoraAdapters {
    pub rank: usize,
    pub alpha: f64,
    pub params: ParamSet,
    query: Vec<AdapterPair>,
    value: Vec<AdapterPair>,
}

impl LoraAdapters {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    fn adapt(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        layer: usize,
        target: Target,
        input: Var,
        base: Var,
    ) -> Result<Var> {
        let pair = match target {
            Target::Query => &self.query[layer],
            Target::Value => &self.value[layer],
        };
        let down = tape.matmul_nt(input, bound[pair.a])?;
        let up = tape.matmul_nt(down, bound[pair.b])?;
        let up = tape.scale(up, self.scale());
        Ok(tape.add(base, up)?)
    }

    /// Number of adapter scalars.
    pub fn param_count(&self) -> usize {
        self.params.count(false)
    }
}

/// Attaches fresh adapters to `base`. `A` is Gaussian with standard
/// deviation `1 / sqrt(in)`; `B` is zero.
pub fn attach_lora(
    base: &BaseLm,
    rank: usize,
    alpha: f64,
    rng: &mut SeededRng,
) -> Result<LoraAdapters> {
    let d = base.cfg.d_model;
    if rank == 0 || rank > d {
        return Err(contract(
            "attach_lora",
            format!("rank {rank} must lie in 1..={d}"),
        ));
    }
    let mut params = ParamSet::new();
    let mut make = |name: String, rng: &mut SeededRng| AdapterPair {
        a: params.add(
            format!("{name}.a"),
            rng.normal_tensor(&[rank, d], 1.0 / (d as f64).sqrt()),
            true,
        ),
        b: params.add(format!("{name}.b"), Tensor::zeros(&[d, rank]), true),
    };
    let mut query = Vec::new();
    let mut value = Vec::new();
    for l in 0..base.cfg.layers {
        query.push(make(format!("block{l}.attn.q.lora"), rng));
        value.push(make(format!("block{l}.attn.v.lora"), rng));
    }
    Ok(LoraAdapters {
        rank,
        alpha,
        params,
        query,
        value,
    })
}

/// True iff every tensor of `base` is bit-identical to `snapshot`.
pub fn verify_base_frozen(base: &BaseLm, snapshot: &ParamSet) -> bool {
    base.params.len() == snapshot.len()
        && base
            .params
            .iter()
            .zip(snapshot.iter())
            .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
}
