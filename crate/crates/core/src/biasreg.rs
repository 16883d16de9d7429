//! Token-usage regularizers that push action sentences towards the
//! statistics of natural language.
//!
//! * [`soft_usage`]: differentiable per-sequence token counts from hard
//!   (straight-through) Gumbel-Softmax samples over negative distances.
//! * [`zipf_loss`]: Jensen-Shannon divergence between the sorted aggregate
//!   usage and a Zipf–Mandelbrot target `p_i ∝ 1 / (i + β)^α`.
//! * [`context_loss`]: one minus the normalized sum of `min(t_u, t_{u+U/2})`
//!   over paired tokens.
//! * [`mmd`]: biased squared maximum mean discrepancy between codebook
//!   tokens and language-model word embeddings, with a three-bandwidth
//!   Gaussian kernel scaled by the median pairwise distance.
//!
//! All logs are natural and floored at `1e-12`.

use diffcore::{CustomOp, SeededRng, Tape, Tensor, Var};

use crate::codec::{HyperbolicCodebook, LatentSequence};
use crate::error::{contract, Result};
use crate::nn::argmax;
use crate::poincare;

pub const LOG_FLOOR: f64 = 1e-12;
pub const BANDWIDTH_SCALES: [f64; 3] = [0.5, 1.0, 2.0];

/// Soft token counts for one sequence; they sum to the sequence length.
#[derive(Debug, Clone, PartialEq)]
pub struct UsageVector {
    pub counts: Vec<f64>,
    pub seq_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZipfTarget {
    pub alpha: f64,
    pub beta: f64,
    pub probabilities: Vec<f64>,
}

/// Sorted, normalized aggregate usage.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyDistribution {
    pub probabilities: Vec<f64>,
}

impl FrequencyDistribution {
    /// Sorts `counts` descending and normalizes them to sum to one.
    pub fn from_counts(counts: &[f64]) -> Result<Self> {
        let total: f64 = counts.iter().sum();
        if !(total > 0.0) {
            return Err(contract(
                "frequency_distribution",
                "counts must have positive mass",
            ));
        }
        let mut p: Vec<f64> = counts.iter().map(|c| c / total).collect();
        p.sort_by(|a, b| b.total_cmp(a));
        Ok(Self { probabilities: p })
    }
}

/// Zipf–Mandelbrot probabilities over ranks `1..=size`.
pub fn zipf_target(size: usize, alpha: f64, beta: f64) -> Result<ZipfTarget> {
    if size == 0 {
        return Err(contract("zipf_target", "need at least one rank"));
    }
    let raw: Vec<f64> = (1..=size).map(|i| (i as f64 + beta).powf(-alpha)).collect();
    let z: f64 = raw.iter().sum();
    Ok(ZipfTarget {
        alpha,
        beta,
        probabilities: raw.into_iter().map(|v| v / z).collect(),
    })
}

/// Jensen-Shannon divergence of two probability vectors.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter()
            .zip(m)
            .map(|(x, y)| x * ((x + LOG_FLOOR).ln() - (y + LOG_FLOOR).ln()))
            .sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    0.5 * kl(p, &m) + 0.5 * kl(q, &m)
}

/// Graph form of [`js_divergence`] against a constant target.
pub fn js_divergence_graph(tape: &mut Tape, p: Var, q: &[f64]) -> Result<Var> {
    let n = tape.value(p).len();
    if q.len() != n {
        return Err(contract(
            "js_divergence",
            format!("lengths {n} and {} differ", q.len()),
        ));
    }
    let q = tape.constant(Tensor::new(tape.value(p).shape().to_vec(), q.to_vec())?);
    let sum_pq = tape.add(p, q)?;
    let m = tape.scale(sum_pq, 0.5);
    let m_f = tape.add_scalar(m, LOG_FLOOR);
    let log_m = tape.log(m_f);
    let mut terms = Vec::with_capacity(2);
    for x in [p, q] {
        let xf = tape.add_scalar(x, LOG_FLOOR);
        let lx = tape.log(xf);
        let ratio = tape.sub(lx, log_m)?;
        let prod = tape.mul(x, ratio)?;
        terms.push(tape.sum(prod));
    }
    let total = tape.add(terms[0], terms[1])?;
    Ok(tape.scale(total, 0.5))
}

/// Row-summing matrix that folds `[B*W, U]` one-hots into `[B, U]` counts.
fn fold_matrix(batch: usize, seq_len: usize) -> Tensor {
    let mut s = Tensor::zeros(&[batch, batch * seq_len]);
    for b in 0..batch {
        for w in 0..seq_len {
            s.data_mut()[b * batch * seq_len + b * seq_len + w] = 1.0;
        }
    }
    s
}

/// Differentiable usage counts `[B, U]` from a distance matrix `[B*W, U]`.
///
/// Each row is a Gumbel-Softmax sample at temperature `tau` over logits
/// `-distance`: its forward value is the one-hot argmax of the perturbed
/// logits and its gradient is that of the softened distribution. Pass
/// `None` for `noise` to disable the Gumbel perturbation.
pub fn soft_usage_graph(
    tape: &mut Tape,
    distances: Var,
    batch: usize,
    tau: f64,
    noise: Option<&mut SeededRng>,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(contract(
            "soft_usage",
            format!("temperature must be positive, got {tau}"),
        ));
    }
    let dv = tape.value(distances);
    let (rows, u) = (dv.rows(), dv.cols());
    if batch == 0 || rows % batch != 0 {
        return Err(contract(
            "soft_usage",
            format!("{rows} rows do not split into {batch} sequences"),
        ));
    }
    let seq_len = rows / batch;
    let gumbel = match noise {
        Some(rng) => Tensor::new(vec![rows, u], (0..rows * u).map(|_| rng.gumbel()).collect())?,
        None => Tensor::zeros(&[rows, u]),
    };
    let perturbed = dv.zip_map(&gumbel, |d, g| -d + g);
    let mut hard = Tensor::zeros(&[rows, u]);
    for r in 0..rows {
        let k = argmax(perturbed.row(r));
        hard.row_mut(r)[k] = 1.0;
    }
    let g = tape.constant(gumbel);
    let neg = tape.neg(distances);
    let z = tape.add(neg, g)?;
    let z = tape.scale(z, 1.0 / tau);
    let soft = tape.softmax_rows(z);
    let hard = tape.constant(hard);
    let onehot = tape.straight_through(hard, soft)?;
    let fold = tape.constant(fold_matrix(batch, seq_len));
    Ok(tape.matmul(fold, onehot)?)
}

/// Plain-value usage vectors for a batch of latent sequences.
pub fn soft_usage(
    latents: &[LatentSequence],
    codebook: &HyperbolicCodebook,
    tau: f64,
    noise: Option<&mut SeededRng>,
) -> Result<Vec<UsageVector>> {
    let first = latents
        .first()
        .ok_or_else(|| contract("soft_usage", "empty batch"))?;
    let w = first.features.rows();
    let mut rows = Vec::with_capacity(latents.len() * w);
    for l in latents {
        if l.features.rows() != w {
            return Err(contract("soft_usage", "sequences differ in length"));
        }
        rows.extend((0..w).map(|r| l.features.row(r).to_vec()));
    }
    let stacked = Tensor::from_rows(&rows);
    let mut tape = Tape::new();
    let x = tape.constant(stacked);
    let book = tape.constant(codebook.tokens.clone());
    let dist = match codebook.geometry {
        crate::codec::Geometry::Hyperbolic => {
            let ball = poincare::exp_map0_rows(&mut tape, x, &codebook.ball)?;
            poincare::dist_matrix_rows(&mut tape, ball, book, &codebook.ball)?
        }
        crate::codec::Geometry::Euclidean => poincare::euclid_dist_matrix_rows(&mut tape, x, book)?,
    };
    let usage = soft_usage_graph(&mut tape, dist, latents.len(), tau, noise)?;
    let uv = tape.value(usage);
    Ok((0..uv.rows())
        .map(|b| UsageVector {
            counts: uv.row(b).to_vec(),
            seq_len: w,
        })
        .collect())
}

/// JS divergence between sorted aggregate usage `[B, U]` and the target.
pub fn zipf_loss(tape: &mut Tape, usage: Var, seq_len: usize, target: &ZipfTarget) -> Result<Var> {
    let uv = tape.value(usage);
    let (b, u) = (uv.rows(), uv.cols());
    if u != target.probabilities.len() {
        return Err(contract(
            "zipf_loss",
            format!("{u} tokens vs {} target ranks", target.probabilities.len()),
        ));
    }
    let total = tape.sum_axis(usage, 0)?;
    let flat = tape.reshape(total, vec![u])?;
    let freq = tape.scale(flat, 1.0 / (b * seq_len) as f64);
    let (sorted, _) = tape.sort_desc(freq)?;
    js_divergence_graph(tape, sorted, &target.probabilities)
}

/// One minus the normalized paired-token co-usage of usage `[B, U]`.
pub fn context_loss(tape: &mut Tape, usage: Var, seq_len: usize) -> Result<Var> {
    let uv = tape.value(usage);
    let (b, u) = (uv.rows(), uv.cols());
    if u % 2 != 0 {
        return Err(contract("context_loss", format!("token count {u} is odd")));
    }
    let first = tape.slice_cols(usage, 0, u / 2)?;
    let second = tape.slice_cols(usage, u / 2, u)?;
    let m = tape.minimum(first, second)?;
    let corr = tape.sum(m);
    let scaled = tape.scale(corr, -1.0 / (b * seq_len) as f64);
    Ok(tape.add_scalar(scaled, 1.0))
}

/// Plain-value [`context_loss`] over usage vectors.
pub fn context_loss_value(usages: &[UsageVector]) -> f64 {
    let mut corr = 0.0;
    let mut denom = 0.0;
    for t in usages {
        let half = t.counts.len() / 2;
        corr += (0..half)
            .map(|i| t.counts[i].min(t.counts[i + half]))
            .sum::<f64>();
        denom += t.seq_len as f64;
    }
    1.0 - corr / denom
}

/// Squared Euclidean distances between rows of `a` `[n, d]` and `b` `[m, d]`,
/// computed from explicit differences so coincident rows give exactly zero.
#[derive(Debug)]
struct PairwiseSq;

impl CustomOp for PairwiseSq {
    fn name(&self) -> &'static str {
        "pairwise_sq_dist"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (n, m, d) = (a.rows(), b.rows(), a.cols());
        let mut ga = Tensor::zeros(a.shape());
        let mut gb = Tensor::zeros(b.shape());
        for i in 0..n {
            for j in 0..m {
                let gij = 2.0 * g.data()[i * m + j];
                if gij == 0.0 {
                    continue;
                }
                for k in 0..d {
                    let diff = a.data()[i * d + k] - b.data()[j * d + k];
                    ga.data_mut()[i * d + k] += gij * diff;
                    gb.data_mut()[j * d + k] -= gij * diff;
                }
            }
        }
        vec![Some(ga), Some(gb)]
    }
}

fn pairwise_sq_values(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, m) = (a.rows(), b.rows());
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            out.push(
                a.row(i)
                    .iter()
                    .zip(b.row(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum(),
            );
        }
    }
    Tensor::new(vec![n, m], out).expect("n x m")
}

fn pairwise_sq(tape: &mut Tape, a: Var, b: Var) -> Var {
    let out = pairwise_sq_values(tape.value(a), tape.value(b));
    tape.custom(Box::new(PairwiseSq), &[a, b], out)
}

/// Median of the pairwise distances within the pooled sample; 1 if all
/// points coincide.
pub fn median_pairwise_distance(x: &Tensor, y: &Tensor) -> f64 {
    let rows: Vec<&[f64]> = (0..x.rows())
        .map(|i| x.row(i))
        .chain((0..y.rows()).map(|i| y.row(i)))
        .collect();
    let mut d = Vec::with_capacity(rows.len() * rows.len() / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(poincare::euclid_kernel(rows[i], rows[j]));
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let med = if d.len() % 2 == 0 {
        0.5 * (d[mid - 1] + d[mid])
    } else {
        d[mid]
    };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

fn kernel_mean(tape: &mut Tape, sq: Var, bandwidth: f64) -> Var {
    let mut acc: Option<Var> = None;
    for s in BANDWIDTH_SCALES {
        let sigma = s * bandwidth;
        let scaled = tape.scale(sq, -1.0 / (2.0 * sigma * sigma));
        let k = tape.exp(scaled);
        acc = Some(match acc {
            None => k,
            Some(a) => tape.add(a, k).expect("same shape"),
        });
    }
    let mean = tape.mean(acc.expect("non-empty bandwidth set"));
    tape.scale(mean, 1.0 / BANDWIDTH_SCALES.len() as f64)
}

/// Biased squared MMD between row sets `x` `[n, d]` and `y` `[m, d]`.
/// The bandwidth is computed from the values and treated as a constant.
pub fn mmd(tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
    let (xv, yv) = (tape.value(x), tape.value(y));
    if xv.rank() != 2 || yv.rank() != 2 || xv.cols() != yv.cols() {
        return Err(contract(
            "mmd",
            format!("cannot compare {:?} with {:?}", xv.shape(), yv.shape()),
        ));
    }
    let h = median_pairwise_distance(xv, yv);
    mmd_with_bandwidth(tape, x, y, h)
}

/// [`mmd`] with a fixed base bandwidth.
pub fn mmd_with_bandwidth(tape: &mut Tape, x: Var, y: Var, h: f64) -> Result<Var> {
    let (xv, yv) = (tape.value(x), tape.value(y));
    if xv.rank() != 2 || yv.rank() != 2 || xv.cols() != yv.cols() || !(h > 0.0) {
        return Err(contract(
            "mmd",
            format!(
                "cannot compare {:?} with {:?} at bandwidth {h}",
                xv.shape(),
                yv.shape()
            ),
        ));
    }
    let dxx = pairwise_sq(tape, x, x);
    let dyy = pairwise_sq(tape, y, y);
    let dxy = pairwise_sq(tape, x, y);
    let kxx = kernel_mean(tape, dxx, h);
    let kyy = kernel_mean(tape, dyy, h);
    let kxy = kernel_mean(tape, dxy, h);
    let within = tape.add(kxx, kyy)?;
    let cross = tape.scale(kxy, 2.0);
    let diff = tape.sub(within, cross)?;
    Ok(tape.clamp_min(diff, 0.0))
}

/// Plain-value [`mmd`].
pub fn mmd_value(x: &Tensor, y: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(x.clone()), tape.constant(y.clone()));
    let v = mmd(&mut tape, a, b)?;
    Ok(tape.value(v).item())
}

/// Which regularizer terms enter the summed loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TermSwitches {
    pub zipf: bool,
    pub context: bool,
    pub mmd: bool,
}

impl Default for TermSwitches {
    fn default() -> Self {
        Self {
            zipf: true,
            context: true,
            mmd: true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HumanLoss {
    pub zipf: Var,
    pub context: Var,
    pub mmd: Var,
    /// Sum of the enabled terms.
    pub total: Var,
}

/// Computes all three terms and their sum over the enabled ones.
///
/// `usage` is `[B, U]`; `tokens` are the codebook tokens as Euclidean
/// vectors; `lm_sample` are word embeddings (constant).
pub fn human_loss(
    tape: &mut Tape,
    usage: Var,
    seq_len: usize,
    target: &ZipfTarget,
    tokens: Var,
    lm_sample: Var,
    switches: TermSwitches,
) -> Result<HumanLoss> {
    let zipf = zipf_loss(tape, usage, seq_len, target)?;
    let context = context_loss(tape, usage, seq_len)?;
    let mmd = mmd(tape, tokens, lm_sample)?;
    let mut total = tape.constant(Tensor::scalar(0.0));
    for (on, v) in [
        (switches.zipf, zipf),
        (switches.context, context),
        (switches.mmd, mmd),
    ] {
        if on {
            total = tape.add(total, v)?;
        }
    }
    Ok(HumanLoss {
        zipf,
        context,
        mmd,
        total,
    })
}
