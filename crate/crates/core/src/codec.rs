//! Vector-quantized motion autoencoder with a Poincaré-ball codebook.
//!
//! The encoder maps a `V`-frame signal to `W = V / 4` latent vectors. Each
//! latent is sent onto the ball with the exponential map, snapped to its
//! nearest codebook token by geodesic distance, and the token is brought
//! back with the logarithmic map. The decoder reconstructs the signal from
//! those discrete latents. A flat codebook with Euclidean distances and no
//! maps is available for comparison.

use diffcore::{Bound, ParamId, ParamSet, SeededRng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::nn::{argmin, Conv, Linear};
use crate::poincare::{self, BallConfig};
use crate::skeldata::ActionSignal;

/// Temporal downsampling factor between signal frames and latents.
pub const COMPRESSION: usize = 4;
const KERNEL: usize = 3;
const BLOCKS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Geometry {
    Hyperbolic,
    Euclidean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub joints: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    pub codebook_size: usize,
    pub curvature: f64,
    pub eps: f64,
    pub geometry: Geometry,
}

impl CodecConfig {
    pub fn ball(&self) -> BallConfig {
        BallConfig {
            curvature: self.curvature,
            dim: self.latent_dim,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ball = BallConfig::new(self.curvature, self.latent_dim, self.eps)?;
        if self.geometry == Geometry::Hyperbolic {
            ball.require_unit_curvature()?;
        }
        if self.codebook_size == 0 || self.codebook_size % 2 != 0 {
            return Err(contract(
                "codec",
                format!(
                    "codebook size must be even and positive, got {}",
                    self.codebook_size
                ),
            ));
        }
        if self.joints == 0 || self.hidden == 0 {
            return Err(contract(
                "codec",
                "joints and hidden width must be positive",
            ));
        }
        Ok(())
    }
}

/// Encoder outputs for one signal: `W x d_u` Euclidean vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    pub features: Tensor,
}

/// Discrete token indices for one signal with their latent vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSentence {
    pub indices: Vec<usize>,
    pub discrete_latents: Tensor,
    pub source_length: usize,
}

/// `U` tokens, stored as ball points in hyperbolic mode.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperbolicCodebook {
    pub tokens: Tensor,
    pub ball: BallConfig,
    pub geometry: Geometry,
}

impl HyperbolicCodebook {
    pub fn size(&self) -> usize {
        self.tokens.rows()
    }

    /// Partner of token `u` under the fixed half-split pairing.
    pub fn pair_of(&self, u: usize) -> usize {
        pair_of(u, self.size())
    }

    pub fn pairing(&self) -> Vec<(usize, usize)> {
        let half = self.size() / 2;
        (0..half).map(|u| (u, u + half)).collect()
    }

    /// Distances from every latent row to every token, in the codebook's
    /// geometry. Hyperbolic mode maps the latents onto the ball first.
    pub fn distances(&self, latents: &Tensor) -> Tensor {
        match self.geometry {
            Geometry::Hyperbolic => poincare::dist_matrix(
                &poincare::exp_map0_matrix(latents, &self.ball),
                &self.tokens,
            ),
            Geometry::Euclidean => poincare::euclid_dist_matrix(latents, &self.tokens),
        }
    }

    /// Tangent-space vector of token `u`.
    pub fn token_latent(&self, u: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.ball.dim];
        match self.geometry {
            Geometry::Hyperbolic => {
                poincare::log_map0_into(self.tokens.row(u), &self.ball, &mut out);
            }
            Geometry::Euclidean => out.copy_from_slice(self.tokens.row(u)),
        }
        out
    }

    /// Nearest-token assignment of every latent row.
    pub fn quantize(&self, latents: &LatentSequence) -> ActionSentence {
        let dist = self.distances(&latents.features);
        let indices: Vec<usize> = (0..dist.rows()).map(|r| argmin(dist.row(r))).collect();
        let rows: Vec<Vec<f64>> = indices.iter().map(|&u| self.token_latent(u)).collect();
        ActionSentence {
            source_length: indices.len() * COMPRESSION,
            discrete_latents: Tensor::from_rows(&rows),
            indices,
        }
    }
}

pub fn pair_of(u: usize, size: usize) -> usize {
    let half = size / 2;
    if u < half {
        u + half
    } else {
        u - half
    }
}

/// Samples `size` tokens uniformly in the origin-centred ball of radius
/// `0.1 / sqrt(c)`.
pub fn init_codebook(
    size: usize,
    dim: usize,
    ball: &BallConfig,
    geometry: Geometry,
    rng: &mut SeededRng,
) -> Result<HyperbolicCodebook> {
    if size == 0 || size % 2 != 0 {
        return Err(contract(
            "init_codebook",
            format!("codebook size must be even and positive, got {size}"),
        ));
    }
    let radius = 0.1 / ball.sqrt_c();
    let mut data = Vec::with_capacity(size * dim);
    for _ in 0..size {
        let dir: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = poincare::norm(&dir).max(f64::MIN_POSITIVE);
        let r = radius * rng.uniform().powf(1.0 / dim as f64);
        data.extend(dir.iter().map(|v| v * r / n));
    }
    Ok(HyperbolicCodebook {
        tokens: Tensor::new(vec![size, dim], data)?,
        ball: *ball,
        geometry,
    })
}

#[derive(Debug, Clone)]
struct EncBlock {
    down: Conv,
    res: Conv,
}

#[derive(Debug, Clone)]
struct DecBlock {
    conv: Conv,
    res: Conv,
}

/// Autoencoder weights and codebook.
#[derive(Debug, Clone)]
pub struct Codec {
    cfg: CodecConfig,
    pub params: ParamSet,
    enc_lift: Linear,
    enc_blocks: Vec<EncBlock>,
    enc_head: Linear,
    dec_lift: Linear,
    dec_blocks: Vec<DecBlock>,
    dec_head: Linear,
    codebook: ParamId,
}

/// Graph handles produced by [`Codec::forward`].
#[derive(Debug, Clone)]
pub struct CodecForward {
    /// Euclidean encoder outputs `[B*W, d]`.
    pub latents: Var,
    /// Distances from every latent to every token `[B*W, U]`.
    pub distances: Var,
    pub indices: Vec<usize>,
    /// Log-mapped nearest tokens `[B*W, d]`.
    pub discrete: Var,
    /// Decoder output `[B*V, 3J]`.
    pub reconstruction: Var,
    pub target: Var,
    /// Codebook tokens as bound on the tape.
    pub codebook: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct VqLosses {
    pub reconstruction: Var,
    pub embed: Var,
    pub commit: Var,
}

impl Codec {
    pub fn new(cfg: CodecConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let (c, h, d) = (3 * cfg.joints, cfg.hidden, cfg.latent_dim);
        let conv_std = (2.0 / (KERNEL * h) as f64).sqrt();
        let res_std = 0.5 / ((KERNEL * h) as f64).sqrt();
        let enc_lift = Linear::new(&mut params, "enc.lift", c, h, (1.0 / c as f64).sqrt(), rng);
        let enc_blocks = (0..BLOCKS)
            .map(|i| EncBlock {
                down: Conv::new(
                    &mut params,
                    &format!("enc.block{i}.down"),
                    h,
                    h,
                    KERNEL,
                    2,
                    conv_std,
                    rng,
                ),
                res: Conv::new(
                    &mut params,
                    &format!("enc.block{i}.res"),
                    h,
                    h,
                    KERNEL,
                    1,
                    res_std,
                    rng,
                ),
            })
            .collect();
        let enc_head = Linear::new(&mut params, "enc.head", h, d, 0.3 / (h as f64).sqrt(), rng);
        let dec_lift = Linear::new(&mut params, "dec.lift", d, h, (1.0 / d as f64).sqrt(), rng);
        let dec_blocks = (0..BLOCKS)
            .map(|i| DecBlock {
                conv: Conv::new(
                    &mut params,
                    &format!("dec.block{i}.conv"),
                    h,
                    h,
                    KERNEL,
                    1,
                    conv_std,
                    rng,
                ),
                res: Conv::new(
                    &mut params,
                    &format!("dec.block{i}.res"),
                    h,
                    h,
                    KERNEL,
                    1,
                    res_std,
                    rng,
                ),
            })
            .collect();
        let dec_head = Linear::new(&mut params, "dec.head", h, c, (1.0 / h as f64).sqrt(), rng);
        let book = init_codebook(cfg.codebook_size, d, &cfg.ball(), cfg.geometry, rng)?;
        let codebook = params.add("codebook", book.tokens, true);
        Ok(Self {
            cfg,
            params,
            enc_lift,
            enc_blocks,
            enc_head,
            dec_lift,
            dec_blocks,
            dec_head,
            codebook,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn codebook_id(&self) -> ParamId {
        self.codebook
    }

    pub fn codebook(&self) -> HyperbolicCodebook {
        HyperbolicCodebook {
            tokens: self.params.get(self.codebook).clone(),
            ball: self.cfg.ball(),
            geometry: self.cfg.geometry,
        }
    }

    pub fn pairing(&self) -> Vec<(usize, usize)> {
        self.codebook().pairing()
    }

    /// Encoder graph over `batch` stacked signals `[B*V, 3J] -> [B*V/4, d]`.
    pub fn encode_graph(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        batch: usize,
    ) -> Result<Var> {
        let mut h = self.enc_lift.apply(tape, bound, x)?;
        for b in &self.enc_blocks {
            let d = b.down.apply(tape, bound, h, batch)?;
            h = tape.relu(d);
            let r = b.res.apply(tape, bound, h, batch)?;
            h = tape.add(h, r)?;
        }
        self.enc_head.apply(tape, bound, h)
    }

    /// Decoder graph `[B*W, d] -> [B*4W, 3J]`.
    pub fn decode_graph(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        z: Var,
        batch: usize,
    ) -> Result<Var> {
        let mut h = self.dec_lift.apply(tape, bound, z)?;
        for b in &self.dec_blocks {
            let u = tape.upsample(h, 2)?;
            let c = b.conv.apply(tape, bound, u, batch)?;
            h = tape.relu(c);
            let r = b.res.apply(tape, bound, h, batch)?;
            h = tape.add(h, r)?;
        }
        self.dec_head.apply(tape, bound, h)
    }

    /// Distances from latent rows to the tokens, in the configured geometry.
    pub fn distance_graph(&self, tape: &mut Tape, latents: Var, codebook: Var) -> Result<Var> {
        match self.cfg.geometry {
            Geometry::Hyperbolic => {
                let ball = poincare::exp_map0_rows(tape, latents, &self.cfg.ball())?;
                poincare::dist_matrix_rows(tape, ball, codebook, &self.cfg.ball())
            }
            Geometry::Euclidean => poincare::euclid_dist_matrix_rows(tape, latents, codebook),
        }
    }

    /// Log-mapped (or raw, in Euclidean mode) tokens for `indices`.
    pub fn token_graph(&self, tape: &mut Tape, codebook: Var, indices: &[usize]) -> Result<Var> {
        let picked = tape.gather_rows(codebook, indices)?;
        match self.cfg.geometry {
            Geometry::Hyperbolic => poincare::log_map0_rows(tape, picked, &self.cfg.ball()),
            Geometry::Euclidean => Ok(picked),
        }
    }

    /// Full autoencoding pass over a batch of equal-length signals.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &[&ActionSignal],
    ) -> Result<CodecForward> {
        let x = stack_signals(batch, self.cfg.joints)?;
        let n = batch.len();
        let target = tape.constant(x);
        let latents = self.encode_graph(tape, bound, target, n)?;
        let codebook = bound[self.codebook];
        let distances = self.distance_graph(tape, latents, codebook)?;
        let dv = tape.value(distances);
        let indices: Vec<usize> = (0..dv.rows()).map(|r| argmin(dv.row(r))).collect();
        let discrete = self.token_graph(tape, codebook, &indices)?;
        let dec_in = tape.straight_through(discrete, latents)?;
        let reconstruction = self.decode_graph(tape, bound, dec_in, n)?;
        Ok(CodecForward {
            latents,
            distances,
            indices,
            discrete,
            reconstruction,
            target,
            codebook,
        })
    }

    fn run_encoder(&self, signal: &ActionSignal) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let x = tape.constant(stack_signals(&[signal], self.cfg.joints)?);
        let f = self.encode_graph(&mut tape, &bound, x, 1)?;
        Ok(tape.value(f).clone())
    }

    /// Encoder outputs for one signal.
    pub fn encode(&self, signal: &ActionSignal) -> Result<LatentSequence> {
        Ok(LatentSequence {
            features: self.run_encoder(signal)?,
        })
    }

    /// Decodes `W` discrete latents into a `target_length x 3J` signal.
    pub fn decode(&self, discrete_latents: &Tensor, target_length: usize) -> Result<Tensor> {
        if discrete_latents.rank() != 2 || discrete_latents.cols() != self.cfg.latent_dim {
            return Err(contract(
                "decode",
                format!(
                    "latents {:?} do not have width {}",
                    discrete_latents.shape(),
                    self.cfg.latent_dim
                ),
            ));
        }
        if discrete_latents.rows() * COMPRESSION != target_length {
            return Err(contract(
                "decode",
                format!(
                    "{} latents cannot produce {target_length} frames",
                    discrete_latents.rows()
                ),
            ));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let z = tape.constant(discrete_latents.clone());
        let out = self.decode_graph(&mut tape, &bound, z, 1)?;
        Ok(tape.value(out).clone())
    }

    /// Encode then quantize; no decoder call.
    pub fn tokenize(&self, signal: &ActionSignal) -> Result<ActionSentence> {
        let latents = self.encode(signal)?;
        let mut sentence = self.codebook().quantize(&latents);
        sentence.source_length = signal.len();
        Ok(sentence)
    }

    /// Rescales tokens that drifted to the boundary margin. Returns how many
    /// moved. Euclidean codebooks are left alone.
    pub fn project_codebook(&mut self) -> usize {
        if self.cfg.geometry == Geometry::Euclidean {
            return 0;
        }
        let ball = self.cfg.ball();
        let book = self.params.get_mut(self.codebook);
        let mut moved = 0;
        for u in 0..book.rows() {
            if poincare::project_in_place(book.row_mut(u), &ball) {
                moved += 1;
            }
        }
        moved
    }
}

/// Stacks equal-length signals into `[B*V, 3J]`.
pub fn stack_signals(batch: &[&ActionSignal], joints: usize) -> Result<Tensor> {
    let first = batch
        .first()
        .ok_or_else(|| contract("stack_signals", "empty batch"))?;
    let v = first.len();
    let mut data = Vec::with_capacity(batch.len() * v * 3 * joints);
    for s in batch {
        if s.len() != v || s.joints() != joints {
            return Err(contract(
                "stack_signals",
                format!(
                    "signal {}x{} does not match {}x{}",
                    s.len(),
                    s.joints(),
                    v,
                    joints
                ),
            ));
        }
        if s.len() % COMPRESSION != 0 {
            return Err(contract(
                "encode",
                format!("frame count {} is not a multiple of 4", s.len()),
            ));
        }
        data.extend_from_slice(s.frames().data());
    }
    Ok(Tensor::new(vec![batch.len() * v, 3 * joints], data)?)
}

/// Mean over rows of the squared row norm of `a - b`.
fn mean_sq_norm(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let diff = tape.sub(a, b)?;
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    let rows = tape.value(a).rows() as f64;
    Ok(tape.scale(total, 1.0 / rows))
}

/// Reconstruction (smooth-L1), embedding and commitment losses.
pub fn vq_losses(
    tape: &mut Tape,
    signals: Var,
    reconstruction: Var,
    latents: Var,
    discrete: Var,
) -> Result<VqLosses> {
    let reconstruction = tape.smooth_l1(signals, reconstruction)?;
    let f_sg = tape.stop_gradient(latents);
    let embed = mean_sq_norm(tape, f_sg, discrete)?;
    let fd_sg = tape.stop_gradient(discrete);
    let commit = mean_sq_norm(tape, latents, fd_sg)?;
    Ok(VqLosses {
        reconstruction,
        embed,
        commit,
    })
}
