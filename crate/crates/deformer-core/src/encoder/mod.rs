//! The full transformer QA encoder: configuration, weights, forward pass,
//! checkpointing, and teacher training.

mod checkpoint;
mod forward;
mod pair;
mod train;
mod vocab;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{
    attention_layer, bind_weights, embed_rows, encode_full_on_tape, encode_layer_range,
    encode_rows_on_tape, forward_full, qa_head_on_tape, predict_span, BoundLayer, BoundWeights,
    FullForward, PredictionDistribution,
};
pub use pair::{pack_pair, pack_pair_padded, Rows, SegmentPair};
pub use train::{
    exact_match_percent, moving_average, train_teacher, TrainOptions, TrainRecord,
};
pub use vocab::{build_vocab, Vocab, CLS_ID, PAD_ID, RESERVED_TOKENS, SEP_ID, UNK_ID};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Architecture hyperparameters. `q_max` is the fixed question-slot width;
/// see [`pack_pair`] for why it is independent of actual question length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub q_max: usize,
    pub p_max: usize,
    pub layer_norm_eps: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// A deliberately small shape for tests and quick experiments.
    pub fn tiny() -> Self {
        Self {
            n_layers: 2,
            hidden_dim: 8,
            n_heads: 2,
            ffn_dim: 16,
            vocab_size: 16,
            max_positions: 16,
            q_max: 3,
            p_max: 6,
            layer_norm_eps: 1e-12,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.n_heads == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("hidden_dim, n_heads, ffn_dim must be positive".into()));
        }
        if self.hidden_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.q_max == 0 || self.p_max == 0 {
            return Err(Error::Config("q_max and p_max must be positive".into()));
        }
        if self.q_max + self.p_max + 3 > self.max_positions {
            return Err(Error::Config(format!(
                "q_max {} + p_max {} + 3 special tokens exceeds max_positions {}",
                self.q_max, self.p_max, self.max_positions
            )));
        }
        if self.vocab_size < RESERVED_TOKENS.len() {
            return Err(Error::Config(format!(
                "vocab_size {} smaller than the {} reserved ids",
                self.vocab_size,
                RESERVED_TOKENS.len()
            )));
        }
        if self.layer_norm_eps <= 0.0 {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Size of the [`ModelConfig::to_bytes`] encoding.
    pub const BYTE_LEN: usize = 8 * 4 + 8 + 8;

    /// Fixed binary encoding of all fields, shared by the fingerprint and
    /// the checkpoint format: eight u32 fields, then eps as f64, then the
    /// seed as u64, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::BYTE_LEN);
        for v in [
            self.n_layers,
            self.hidden_dim,
            self.n_heads,
            self.ffn_dim,
            self.vocab_size,
            self.max_positions,
            self.q_max,
            self.p_max,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.layer_norm_eps.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out
    }

    /// Inverse of [`ModelConfig::to_bytes`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != Self::BYTE_LEN {
            return Err(Error::Format(format!(
                "config block is {} bytes, expected {}",
                bytes.len(),
                Self::BYTE_LEN
            )));
        }
        let u32_at = |i: usize| {
            u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap()) as usize
        };
        Ok(Self {
            n_layers: u32_at(0),
            hidden_dim: u32_at(1),
            n_heads: u32_at(2),
            ffn_dim: u32_at(3),
            vocab_size: u32_at(4),
            max_positions: u32_at(5),
            q_max: u32_at(6),
            p_max: u32_at(7),
            layer_norm_eps: f64::from_le_bytes(bytes[32..40].try_into().unwrap()),
            seed: u64::from_le_bytes(bytes[40..48].try_into().unwrap()),
        })
    }
}

/// One encoder layer's parameters (post-layer-norm residual arrangement).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

/// All learnable parameters of the encoder.
///
/// The canonical parameter order — used by [`EncoderWeights::params`], the
/// fingerprint, the checkpoint format, and the optimizer alike — is: token,
/// position and segment embeddings; embedding layer-norm gain and bias; per
/// layer `wq bq wk bk wv bv wo bo ln1_gain ln1_bias ffn_w1 ffn_b1 ffn_w2
/// ffn_b2 ln2_gain ln2_bias`; finally the QA head matrix and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub config: ModelConfig,
    pub token_emb: Tensor,
    pub pos_emb: Tensor,
    pub seg_emb: Tensor,
    pub emb_ln_gain: Tensor,
    pub emb_ln_bias: Tensor,
    pub layers: Vec<LayerWeights>,
    pub qa_w: Tensor,
    pub qa_b: Tensor,
}

/// Initialization shaping knobs for [`EncoderWeights::init_with`].
///
/// The defaults give every layer one head that starts as a previous-token
/// reader. Span extraction needs some head, somewhere, to move content one
/// position — the answer span sits right after the token the question
/// matches — and at N(0, 0.02²) init no head prefers any offset, so that
/// circuit only emerges by lottery. Wiring it in makes the remaining
/// content-match circuit learnable by plain gradient descent.
#[derive(Debug, Clone)]
pub struct InitGains {
    /// Identity added to the query/key projections. Zero by default:
    /// calibration found 0.5–2.0 destabilizes small-model training — the
    /// strongest score is each token with itself, so attention saturates on
    /// the diagonal before learning anything. Kept for ablation runs.
    pub match_gain: f64,
    /// Identity added to the value/output projections — zero by default,
    /// for the same reason as `match_gain`.
    pub copy_gain: f64,
    /// Amplitude of the fast sinusoid carriers written into the leading
    /// position-table dims (one head's width of them). Zero disables the
    /// wired head entirely, leaving the table pure low-frequency sinusoid.
    pub carrier_amp: f64,
    /// Projection gain of the wired previous-token head.
    pub prev_gain: f64,
}

impl Default for InitGains {
    fn default() -> Self {
        Self { match_gain: 0.0, copy_gain: 0.0, carrier_amp: 0.1, prev_gain: 1.5 }
    }
}

impl EncoderWeights {
    /// Fresh weights: matrices and embeddings drawn from N(0, 0.02²) with a
    /// stream seeded by `config.seed`, layer-norm gains at one, biases at
    /// zero. Position embeddings start as sinusoids scaled to the same
    /// energy as the other embeddings, and head 0 of every layer starts as
    /// a previous-token reader (see [`InitGains`]); everything remains
    /// trainable.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        Self::init_with(config, &InitGains::default())
    }

    /// [`init`](Self::init) with explicit shaping, for ablation studies.
    pub fn init_with(config: &ModelConfig, gains: &InitGains) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut randn = |shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
            Tensor::from_vec(shape, data).expect("element count matches shape")
        };
        let eye = |t: &mut Tensor, gain: f64| {
            let d = t.cols();
            for i in 0..d {
                t.data_mut()[i * d + i] += gain;
            }
        };

        let d = config.hidden_dim;
        let f = config.ffn_dim;
        let token_emb = randn(vec![config.vocab_size, d]);
        let mut pos_emb = sinusoid_table(config.max_positions, d, 0.02 * std::f64::consts::SQRT_2);
        let seg_emb = randn(vec![2, d]);
        // Carrier rates for the wired head, in radians per position: fast and
        // incommensurate, so nearby offsets land far apart on the circle and
        // only the intended offset adds coherently across pairs.
        let m = (d / config.n_heads) / 2;
        let omegas: Vec<f64> = (0..m).map(|j| 2.4 / (1.0 + 0.7 * j as f64)).collect();
        if gains.carrier_amp > 0.0 {
            for t in 0..config.max_positions {
                for (j, om) in omegas.iter().enumerate() {
                    let angle = t as f64 * om;
                    pos_emb.data_mut()[t * d + 2 * j] = gains.carrier_amp * angle.sin();
                    pos_emb.data_mut()[t * d + 2 * j + 1] = gains.carrier_amp * angle.cos();
                }
            }
        }
        // Head 0's query copies the carrier pairs; its key rotates each pair
        // one position forward. The head-0 logit is then
        // prev_gain²·Σⱼ cos((t−s−1)·ωⱼ), which peaks at the previous row.
        let wire_prev = |wq: &mut Tensor, wk: &mut Tensor| {
            for (j, om) in omegas.iter().enumerate() {
                let (r0, r1) = (2 * j, 2 * j + 1);
                let (c0, c1) = (2 * j, 2 * j + 1);
                let (cs, sn) = (om.cos(), om.sin());
                wq.data_mut()[r0 * d + c0] += gains.prev_gain;
                wq.data_mut()[r1 * d + c1] += gains.prev_gain;
                wk.data_mut()[r0 * d + c0] += gains.prev_gain * cs;
                wk.data_mut()[r1 * d + c0] += gains.prev_gain * sn;
                wk.data_mut()[r0 * d + c1] -= gains.prev_gain * sn;
                wk.data_mut()[r1 * d + c1] += gains.prev_gain * cs;
            }
        };
        let layers = (0..config.n_layers)
            .map(|_| {
                let mut wq = randn(vec![d, d]);
                let mut wk = randn(vec![d, d]);
                let mut wv = randn(vec![d, d]);
                let mut wo = randn(vec![d, d]);
                eye(&mut wq, gains.match_gain);
                eye(&mut wk, gains.match_gain);
                eye(&mut wv, gains.copy_gain);
                eye(&mut wo, gains.copy_gain);
                if gains.carrier_amp > 0.0 {
                    wire_prev(&mut wq, &mut wk);
                }
                LayerWeights {
                    wq,
                    bq: Tensor::zeros(vec![d]),
                    wk,
                    bk: Tensor::zeros(vec![d]),
                    wv,
                    bv: Tensor::zeros(vec![d]),
                    wo,
                    bo: Tensor::zeros(vec![d]),
                    ln1_gain: Tensor::vector(vec![1.0; d]),
                    ln1_bias: Tensor::zeros(vec![d]),
                    ffn_w1: randn(vec![d, f]),
                    ffn_b1: Tensor::zeros(vec![f]),
                    ffn_w2: randn(vec![f, d]),
                    ffn_b2: Tensor::zeros(vec![d]),
                    ln2_gain: Tensor::vector(vec![1.0; d]),
                    ln2_bias: Tensor::zeros(vec![d]),
                }
            })
            .collect();
        let qa_w = randn(vec![d, 2]);

        Ok(Self {
            config: config.clone(),
            token_emb,
            pos_emb,
            seg_emb,
            emb_ln_gain: Tensor::vector(vec![1.0; d]),
            emb_ln_bias: Tensor::zeros(vec![d]),
            layers,
            qa_w,
            qa_b: Tensor::zeros(vec![2]),
        })
    }

    /// Every parameter tensor in canonical order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![
            &self.token_emb,
            &self.pos_emb,
            &self.seg_emb,
            &self.emb_ln_gain,
            &self.emb_ln_bias,
        ];
        for l in &self.layers {
            out.extend([
                &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo, &l.ln1_gain, &l.ln1_bias,
                &l.ffn_w1, &l.ffn_b1, &l.ffn_w2, &l.ffn_b2, &l.ln2_gain, &l.ln2_bias,
            ]);
        }
        out.push(&self.qa_w);
        out.push(&self.qa_b);
        out
    }

    /// Mutable view in the same canonical order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.token_emb,
            &mut self.pos_emb,
            &mut self.seg_emb,
            &mut self.emb_ln_gain,
            &mut self.emb_ln_bias,
        ];
        for l in &mut self.layers {
            out.extend([
                &mut l.wq,
                &mut l.bq,
                &mut l.wk,
                &mut l.bk,
                &mut l.wv,
                &mut l.bv,
                &mut l.wo,
                &mut l.bo,
                &mut l.ln1_gain,
                &mut l.ln1_bias,
                &mut l.ffn_w1,
                &mut l.ffn_b1,
                &mut l.ffn_w2,
                &mut l.ffn_b2,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
            ]);
        }
        out.push(&mut self.qa_w);
        out.push(&mut self.qa_b);
        out
    }

    pub fn param_scalar_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// SHA-256 over the config encoding and every parameter in canonical
    /// order, each scalar rounded to f32 and serialized little-endian.
    ///
    /// Rounding through f32 makes the fingerprint stable across a checkpoint
    /// save/load cycle, which stores parameters in 32 bits.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.config.to_bytes());
        for p in self.params() {
            for &v in p.data() {
                hasher.update((v as f32).to_le_bytes());
            }
        }
        hasher.finalize().into()
    }
}

/// Interleaved sine/cosine position codes (wavelengths 2π…2π·10⁴), scaled by
/// `amplitude` so their per-component energy matches the random embeddings.
fn sinusoid_table(positions: usize, d: usize, amplitude: f64) -> Tensor {
    let mut data = Vec::with_capacity(positions * d);
    for pos in 0..positions {
        for i in 0..d {
            let rate = 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data.push(amplitude * if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::from_vec(vec![positions, d], data).expect("table matches its shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_in_the_seed() {
        let cfg = ModelConfig::tiny();
        let a = EncoderWeights::init(&cfg).unwrap();
        let b = EncoderWeights::init(&cfg).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        for (x, y) in a.params().iter().zip(b.params()) {
            assert!(x.bit_eq(y));
        }

        let other = ModelConfig { seed: 8, ..cfg };
        let c = EncoderWeights::init(&other).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn fingerprint_tracks_any_parameter_change() {
        let cfg = ModelConfig::tiny();
        let mut w = EncoderWeights::init(&cfg).unwrap();
        let before = w.fingerprint();
        w.layers[1].ffn_b1.data_mut()[3] += 0.25;
        assert_ne!(before, w.fingerprint());
    }

    #[test]
    fn fingerprint_tracks_config_changes() {
        let cfg = ModelConfig::tiny();
        let w = EncoderWeights::init(&cfg).unwrap();
        let mut w2 = w.clone();
        w2.config.q_max = 4;
        assert_ne!(w.fingerprint(), w2.fingerprint());
    }

    #[test]
    fn params_and_params_mut_agree_on_order() {
        let cfg = ModelConfig::tiny();
        let mut w = EncoderWeights::init(&cfg).unwrap();
        let shapes: Vec<Vec<usize>> = w.params().iter().map(|t| t.shape().to_vec()).collect();
        let shapes_mut: Vec<Vec<usize>> =
            w.params_mut().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, shapes_mut);
        assert_eq!(shapes.len(), 5 + 16 * cfg.n_layers + 2);
    }

    #[test]
    fn config_bytes_round_trip() {
        let cfg = ModelConfig::tiny();
        let bytes = cfg.to_bytes();
        assert_eq!(bytes.len(), ModelConfig::BYTE_LEN);
        assert_eq!(ModelConfig::from_bytes(&bytes).unwrap(), cfg);
    }

    #[test]
    fn validate_rejects_bad_shapes() {
        let mut cfg = ModelConfig::tiny();
        cfg.n_heads = 3; // does not divide hidden_dim = 8
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = ModelConfig::tiny();
        cfg.max_positions = 5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    /// Mean softmax weight that head 0 of layer 0 places on each interior
    /// row's previous row, computed directly from the weight matrices over a
    /// synthetic 31-row input.
    fn prev_row_weight(w: &EncoderWeights) -> f64 {
        let cfg = &w.config;
        let d = cfg.hidden_dim;
        let dh = d / cfg.n_heads;
        let rows = cfg.max_positions.min(31);
        let mut x = vec![0.0f64; rows * d];
        for t in 0..rows {
            let tok = 4 + (t * 7 + 3) % (cfg.vocab_size - 4);
            let seg = usize::from(t > 5);
            for c in 0..d {
                x[t * d + c] = w.token_emb.data()[tok * d + c]
                    + w.pos_emb.data()[t * d + c]
                    + w.seg_emb.data()[seg * d + c];
            }
            let row = &mut x[t * d..(t + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + cfg.layer_norm_eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        let l = &w.layers[0];
        let interior = 8..rows - 1;
        let mut total = 0.0;
        for t in interior.clone() {
            let mut logits = vec![0.0f64; rows];
            for (s, logit) in logits.iter_mut().enumerate() {
                let mut dot = 0.0;
                for c in 0..dh {
                    let (mut q, mut k) = (l.bq.data()[c], l.bk.data()[c]);
                    for r in 0..d {
                        q += x[t * d + r] * l.wq.data()[r * d + c];
                        k += x[s * d + r] * l.wk.data()[r * d + c];
                    }
                    dot += q * k;
                }
                *logit = dot / (dh as f64).sqrt();
            }
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
            total += (logits[t - 1] - mx).exp() / z;
        }
        total / interior.len() as f64
    }

    #[test]
    fn wired_head_reads_the_previous_row_at_init() {
        let cfg = ModelConfig {
            n_layers: 4,
            hidden_dim: 32,
            n_heads: 4,
            ffn_dim: 64,
            vocab_size: 84,
            max_positions: 32,
            q_max: 4,
            p_max: 24,
            layer_norm_eps: 1e-12,
            seed: 42,
        };
        let wired = EncoderWeights::init(&cfg).unwrap();
        let focus = prev_row_weight(&wired);
        assert!(focus > 0.8, "wired head puts {focus:.3} on the previous row");

        let off = InitGains { carrier_amp: 0.0, ..InitGains::default() };
        let plain = EncoderWeights::init_with(&cfg, &off).unwrap();
        let diffuse = prev_row_weight(&plain);
        assert!(diffuse < 0.2, "unwired init should stay near-uniform, got {diffuse:.3}");
    }
}
