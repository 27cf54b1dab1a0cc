//! Analytic FLOP and activation-memory accounting for full versus
//! decomposed inference, an instrumented-execution oracle to validate the
//! formulas, and the monthly dollar-cost model.
//!
//! Counting convention: one multiply-accumulate is 2 FLOPs, and the
//! per-element costs of softmax/layernorm/GELU come from the constants in
//! [`crate::tensor::flops`] — the same constants the tape records during
//! execution, which is what lets the analytic and instrumented counts agree
//! *exactly*, not just asymptotically.
//!
//! Widths follow the packed layout, not the raw token counts: the question
//! block is always `q_max + 2` rows ([CLS], question, padding, [SEP]) and
//! the passage block `p_len + 1` rows (tokens plus [SEP]), so the joint
//! width is `q_max + p_len + 3`.

use serde::{Deserialize, Serialize};

use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::flops;

/// Bytes per stored activation scalar assumed by the memory model and the
/// cache-load figure (32-bit serving mode).
const ACTIVATION_BYTES: u64 = 4;

/// Which execution plan a meter describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeterMode {
    /// Joint encoder over the packed pair, every layer full-width.
    Full,
    /// Split encoder: lower layers per segment, upper layers joint; the
    /// passage's lower layers run offline.
    Decomposed,
}

/// Itemized FLOP counts for one inference configuration.
///
/// `online` is what serving pays per request; `offline` is the cacheable
/// passage-side work; their sum is the cost of recomputing everything
/// inline. The itemized buckets (`embedding`/`attention`/`ffn`/`head`) and
/// `per_layer` cover the online plan only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlopReport {
    /// Online transformer layers in execution order.
    pub per_layer: Vec<u64>,
    pub embedding: u64,
    pub attention: u64,
    pub ffn: u64,
    pub head: u64,
    pub online: u64,
    pub offline: u64,
    /// Bytes loaded from the store per request (the c of the q²+c
    /// complexity argument): passage tokens × hidden size × 4 bytes.
    pub cache_bytes: u64,
    /// Activation memory of the online plan, per [`memory_estimate`].
    pub memory_bytes: u64,
}

impl FlopReport {
    /// Everything, as if nothing were cached.
    pub fn total(&self) -> u64 {
        self.online + self.offline
    }
}

/// Per-layer cost split into the attention and FFN halves, at joint width
/// `s`. Derived term by term from the ops the encoder actually executes.
fn layer_split(cfg: &ModelConfig, s: u64) -> (u64, u64) {
    let d = cfg.hidden_dim as u64;
    let f = cfg.ffn_dim as u64;
    let h = cfg.n_heads as u64;
    // Attention half: Q/K/V/output projections with biases, per-head
    // scores, scale, masked softmax, context, plus residual and layernorm.
    let attention = 8 * s * d * d            // four s×d · d×d projections
        + 4 * s * d                          // their bias rows
        + 4 * s * s * d                      // scores q·kᵀ and context p·v
        + s * s * h                          // 1/√dh scale per head
        + flops::SOFTMAX_FLOPS_PER_ELEM * h * s * s
        + s * d                              // residual add
        + flops::LAYER_NORM_FLOPS_PER_ELEM * s * d;
    // FFN half: two projections with biases, GELU, residual, layernorm.
    let ffn = 4 * s * d * f
        + s * f                              // first bias
        + flops::GELU_FLOPS_PER_ELEM * s * f
        + s * d                              // second bias
        + s * d                              // residual add
        + flops::LAYER_NORM_FLOPS_PER_ELEM * s * d;
    (attention, ffn)
}

fn layer_total(cfg: &ModelConfig, s: u64) -> u64 {
    let (a, f) = layer_split(cfg, s);
    a + f
}

/// Token + position + segment lookups (free) followed by two adds and a
/// layernorm over `s × d`.
fn embedding_flops(cfg: &ModelConfig, s: u64) -> u64 {
    let d = cfg.hidden_dim as u64;
    2 * s * d + flops::LAYER_NORM_FLOPS_PER_ELEM * s * d
}

/// Span head over an `s × d` top layer with `p` candidate slots: the 2-wide
/// logit projection plus bias, then a softmax per endpoint.
fn head_flops(cfg: &ModelConfig, s: u64, p: u64) -> u64 {
    let d = cfg.hidden_dim as u64;
    4 * s * d + 2 * s + 2 * flops::SOFTMAX_FLOPS_PER_ELEM * p
}

fn check_lengths(cfg: &ModelConfig, q_len: usize, p_len: usize) -> Result<()> {
    if q_len == 0 || p_len == 0 {
        return Err(Error::Input("question and passage must be non-empty".into()));
    }
    if q_len > cfg.q_max || p_len > cfg.p_max {
        return Err(Error::Input(format!(
            "lengths ({q_len}, {p_len}) exceed the configured maxima ({}, {})",
            cfg.q_max, cfg.p_max
        )));
    }
    Ok(())
}

/// FLOPs of the full joint encoder over a packed pair.
pub fn flops_full(cfg: &ModelConfig, q_len: usize, p_len: usize) -> Result<FlopReport> {
    check_lengths(cfg, q_len, p_len)?;
    let s = (cfg.q_max + p_len + 3) as u64;
    let p = p_len as u64;
    let (attn_1, ffn_1) = layer_split(cfg, s);
    let n = cfg.n_layers as u64;
    let embedding = embedding_flops(cfg, s);
    let head = head_flops(cfg, s, p);
    let online = embedding + n * (attn_1 + ffn_1) + head;
    Ok(FlopReport {
        per_layer: vec![attn_1 + ffn_1; cfg.n_layers],
        embedding,
        attention: n * attn_1,
        ffn: n * ffn_1,
        head,
        online,
        offline: 0,
        cache_bytes: 0,
        memory_bytes: memory_estimate(cfg, q_len, p_len, 0, MeterMode::Full)?,
    })
}

/// FLOPs of the decomposed plan split at layer `k`: online pays the
/// question's lower layers, the joint upper layers, and the head; offline
/// pays the passage's lower layers (the cacheable part).
///
/// `k = 0` degenerates to the full plan — nothing is cacheable, so offline
/// and the cache-load figure are zero and online equals [`flops_full`].
pub fn flops_decomposed(
    cfg: &ModelConfig,
    q_len: usize,
    p_len: usize,
    k: usize,
) -> Result<FlopReport> {
    if k > cfg.n_layers {
        return Err(Error::Param(format!(
            "split layer {k} out of range for a {}-layer encoder",
            cfg.n_layers
        )));
    }
    check_lengths(cfg, q_len, p_len)?;
    if k == 0 {
        return flops_full(cfg, q_len, p_len);
    }
    let s_q = (cfg.q_max + 2) as u64;
    let s_p = (p_len + 1) as u64;
    let s = s_q + s_p;
    let p = p_len as u64;
    let d = cfg.hidden_dim as u64;
    let n = cfg.n_layers;

    let (attn_q, ffn_q) = layer_split(cfg, s_q);
    let (attn_j, ffn_j) = layer_split(cfg, s);
    let mut per_layer = vec![attn_q + ffn_q; k];
    per_layer.extend(std::iter::repeat(attn_j + ffn_j).take(n - k));

    let embedding = embedding_flops(cfg, s_q);
    let head = head_flops(cfg, s, p);
    let attention = k as u64 * attn_q + (n - k) as u64 * attn_j;
    let ffn = k as u64 * ffn_q + (n - k) as u64 * ffn_j;
    let online = embedding + attention + ffn + head;
    let offline = embedding_flops(cfg, s_p) + k as u64 * layer_total(cfg, s_p);

    Ok(FlopReport {
        per_layer,
        embedding,
        attention,
        ffn,
        head,
        online,
        offline,
        cache_bytes: p * d * ACTIVATION_BYTES,
        memory_bytes: memory_estimate(cfg, q_len, p_len, k, MeterMode::Decomposed)?,
    })
}

/// Instrumented-execution oracle: runs the closure with a fresh FLOP
/// counter and returns its result alongside the exact count the tape
/// primitives recorded. Validates the analytic formulas above.
pub fn count_oracle<T>(f: impl FnOnce() -> T) -> (T, u64) {
    flops::counting(f)
}

/// Activation memory of the online plan, summed over executed layers: each
/// layer keeps its input (`s·d`), the per-head score matrices (`h·s²`), and
/// the FFN intermediate (`s·f`), at 4 bytes a scalar. The decomposed mode's
/// passage lower layers run offline and are excluded — that is the memory
/// the decomposition saves.
pub fn memory_estimate(
    cfg: &ModelConfig,
    q_len: usize,
    p_len: usize,
    k: usize,
    mode: MeterMode,
) -> Result<u64> {
    if k > cfg.n_layers {
        return Err(Error::Param(format!(
            "split layer {k} out of range for a {}-layer encoder",
            cfg.n_layers
        )));
    }
    check_lengths(cfg, q_len, p_len)?;
    let live = |s: u64| -> u64 {
        let d = cfg.hidden_dim as u64;
        let f = cfg.ffn_dim as u64;
        let h = cfg.n_heads as u64;
        (s * d + h * s * s + s * f) * ACTIVATION_BYTES
    };
    let s_q = (cfg.q_max + 2) as u64;
    let s = (cfg.q_max + p_len + 3) as u64;
    let n = cfg.n_layers as u64;
    Ok(match mode {
        MeterMode::Full => n * live(s),
        MeterMode::Decomposed => k as u64 * live(s_q) + (n - k as u64) * live(s),
    })
}

/// Monthly-cost parameters. Dollar figures per the serving cost model:
/// accelerator time billed by the hour, cached representations billed by
/// stored gigabyte and by read volume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostParams {
    /// Accelerator cost, dollars per hour.
    pub gpu_per_hour: f64,
    /// Sequences served per month.
    pub sequences: f64,
    /// Sequences per batch.
    pub batch_size: f64,
    /// Seconds to process one batch.
    pub seconds_per_batch: f64,
    /// Stored representation volume, gigabytes.
    pub storage_gb: f64,
    /// Storage price, dollars per gigabyte-month.
    pub storage_per_gb: f64,
    /// Read price, dollars per 10,000 reads.
    pub per_10k_reads: f64,
}

impl CostParams {
    /// The worked example's parameters for the full model: 30M sequences a
    /// month at 4.6 s per 640-sequence batch on a $2.48/h accelerator.
    pub fn reference_full() -> Self {
        Self {
            gpu_per_hour: 2.48,
            sequences: 30.0e6,
            batch_size: 640.0,
            seconds_per_batch: 4.6,
            storage_gb: 0.0,
            storage_per_gb: 0.0,
            per_10k_reads: 0.0,
        }
    }

    /// The worked example's parameters for the decomposed model: batches
    /// finish in 1.4 s, plus 226 GB stored at $0.02/GB-month and reads at
    /// $0.004 per 10,000.
    pub fn reference_decomposed() -> Self {
        Self {
            seconds_per_batch: 1.4,
            storage_gb: 226.0,
            storage_per_gb: 0.02,
            per_10k_reads: 0.004,
            ..Self::reference_full()
        }
    }

    fn validate(&self) -> Result<()> {
        let fields = [
            ("gpu_per_hour", self.gpu_per_hour),
            ("sequences", self.sequences),
            ("batch_size", self.batch_size),
            ("seconds_per_batch", self.seconds_per_batch),
            ("storage_gb", self.storage_gb),
            ("storage_per_gb", self.storage_per_gb),
            ("per_10k_reads", self.per_10k_reads),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Param(format!(
                    "cost parameter {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if self.batch_size < 1.0 {
            return Err(Error::Param("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    fn gpu_dollars(&self) -> f64 {
        self.seconds_per_batch * (self.sequences / self.batch_size) * self.gpu_per_hour / 3600.0
    }
}

/// Monthly dollars for the full model: accelerator time only,
/// `t_b · (n_seq / b) · g_u / 3600`.
pub fn cost_original(p: &CostParams) -> Result<f64> {
    p.validate()?;
    Ok(p.gpu_dollars())
}

/// Decomposed monthly dollars, itemized.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub gpu: f64,
    pub reads: f64,
    pub storage: f64,
    pub total: f64,
}

/// Monthly dollars for the decomposed model: the (smaller) accelerator
/// term, one store read per sequence priced per 10,000, and the stored
/// gigabytes.
pub fn cost_decomposed(p: &CostParams) -> Result<CostBreakdown> {
    p.validate()?;
    let gpu = p.gpu_dollars();
    let reads = p.sequences / 10_000.0 * p.per_10k_reads;
    let storage = p.storage_gb * p.storage_per_gb;
    Ok(CostBreakdown { gpu, reads, storage, total: gpu + reads + storage })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomposed::{deformer_forward, transfer_weights, PassageSource};
    use crate::encoder::{forward_full, pack_pair, EncoderWeights};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn base_config() -> ModelConfig {
        ModelConfig {
            n_layers: 12,
            hidden_dim: 768,
            n_heads: 12,
            ffn_dim: 3072,
            vocab_size: 30_000,
            max_positions: 512,
            q_max: 32,
            p_max: 300,
            layer_norm_eps: 1e-12,
            seed: 0,
        }
    }

    fn large_config() -> ModelConfig {
        ModelConfig {
            n_layers: 24,
            hidden_dim: 1024,
            n_heads: 16,
            ffn_dim: 4096,
            ..base_config()
        }
    }

    #[test]
    fn reproduces_the_published_gigaflop_figures() {
        // Joint width 320 = q_max 32 + p_len 285 + 3 specials.
        let base = flops_full(&base_config(), 32, 285).unwrap();
        let got = base.online as f64 / 1e9;
        assert!((got - 58.4).abs() / 58.4 < 0.03, "base: {got} GFLOPs");

        let large = flops_full(&large_config(), 32, 285).unwrap();
        let got = large.online as f64 / 1e9;
        assert!((got - 204.1).abs() / 204.1 < 0.03, "large: {got} GFLOPs");
    }

    #[test]
    fn decomposed_speedup_brackets_the_published_ratio() {
        let cfg = base_config();
        let full = flops_full(&cfg, 32, 286).unwrap();
        let dec = flops_decomposed(&cfg, 32, 286, 9).unwrap();
        let speedup = full.online as f64 / dec.online as f64;
        assert!((2.4..=4.0).contains(&speedup), "speedup {speedup}");
    }

    #[test]
    fn report_items_add_up() {
        let cfg = base_config();
        for report in [
            flops_full(&cfg, 20, 100).unwrap(),
            flops_decomposed(&cfg, 20, 100, 5).unwrap(),
        ] {
            assert_eq!(
                report.online,
                report.embedding + report.attention + report.ffn + report.head
            );
            assert_eq!(report.per_layer.iter().sum::<u64>(), report.attention + report.ffn);
            assert_eq!(report.per_layer.len(), cfg.n_layers);
        }
    }

    #[test]
    fn split_at_zero_degenerates_to_the_full_plan() {
        let cfg = base_config();
        let full = flops_full(&cfg, 16, 200).unwrap();
        let dec = flops_decomposed(&cfg, 16, 200, 0).unwrap();
        assert_eq!(dec.online, full.online);
        assert_eq!(dec.offline, 0);
        assert_eq!(dec.cache_bytes, 0);
        assert_eq!(
            memory_estimate(&cfg, 16, 200, 0, MeterMode::Decomposed).unwrap(),
            memory_estimate(&cfg, 16, 200, 0, MeterMode::Full).unwrap()
        );
    }

    #[test]
    fn split_at_the_top_removes_all_joint_layers() {
        let cfg = base_config();
        let dec = flops_decomposed(&cfg, 16, 200, cfg.n_layers).unwrap();
        let s_q = (cfg.q_max + 2) as u64;
        let expected_layers = cfg.n_layers as u64 * layer_total(&cfg, s_q);
        assert_eq!(dec.attention + dec.ffn, expected_layers);
    }

    #[test]
    fn online_flops_strictly_decrease_in_the_split_layer() {
        let cfg = base_config();
        let mut last = u64::MAX;
        for k in 0..=cfg.n_layers {
            let online = flops_decomposed(&cfg, 32, 286, k).unwrap().online;
            assert!(online < last, "online not decreasing at k={k}");
            last = online;
        }
    }

    #[test]
    fn out_of_range_arguments_are_rejected() {
        let cfg = base_config();
        assert!(matches!(
            flops_decomposed(&cfg, 16, 200, cfg.n_layers + 1),
            Err(Error::Param(_))
        ));
        assert!(matches!(flops_full(&cfg, 0, 200), Err(Error::Input(_))));
        assert!(matches!(flops_full(&cfg, 16, cfg.p_max + 1), Err(Error::Input(_))));
        assert!(matches!(
            memory_estimate(&cfg, 16, 200, cfg.n_layers + 1, MeterMode::Full),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn single_matmul_costs_two_flops_per_madd() {
        use crate::tensor::Tape;
        let ((), counted) = count_oracle(|| {
            let mut tape = Tape::new();
            let a = tape.leaf(Tensor::matrix(2, 3, vec![1.0; 6]).unwrap());
            let b = tape.leaf(Tensor::matrix(3, 4, vec![1.0; 12]).unwrap());
            tape.matmul(a, b).unwrap();
        });
        assert_eq!(counted, 48);
    }

    fn random_tiny_config(rng: &mut ChaCha8Rng) -> ModelConfig {
        let n_heads = [1usize, 2, 4][rng.gen_range(0..3)];
        let hidden_dim = n_heads * rng.gen_range(2..=6usize);
        ModelConfig {
            n_layers: rng.gen_range(1..=4),
            hidden_dim,
            n_heads,
            ffn_dim: rng.gen_range(4..=24),
            vocab_size: 24,
            max_positions: 32,
            q_max: rng.gen_range(1..=4),
            p_max: rng.gen_range(2..=8),
            layer_norm_eps: 1e-12,
            seed: rng.gen(),
        }
    }

    #[test]
    fn analytic_full_count_equals_instrumented_execution_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for round in 0..20 {
            let cfg = random_tiny_config(&mut rng);
            let w = EncoderWeights::init(&cfg).unwrap();
            let q_len = rng.gen_range(1..=cfg.q_max);
            let p_len = rng.gen_range(1..=cfg.p_max);
            let question: Vec<u32> = (0..q_len).map(|_| rng.gen_range(4..24)).collect();
            let passage: Vec<u32> = (0..p_len).map(|_| rng.gen_range(4..24)).collect();
            let pair = pack_pair(&question, &passage, &cfg).unwrap();

            let (out, counted) = count_oracle(|| forward_full(&w, &pair).unwrap());
            drop(out);
            let analytic = flops_full(&cfg, q_len, p_len).unwrap();
            assert_eq!(counted, analytic.online, "round {round}, config {cfg:?}");
        }
    }

    #[test]
    fn analytic_decomposed_count_equals_instrumented_execution_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for round in 0..20 {
            let cfg = random_tiny_config(&mut rng);
            let w = EncoderWeights::init(&cfg).unwrap();
            let k = rng.gen_range(0..=cfg.n_layers);
            let model = transfer_weights(&w, k).unwrap();
            let q_len = rng.gen_range(1..=cfg.q_max);
            let p_len = rng.gen_range(1..=cfg.p_max);
            let question: Vec<u32> = (0..q_len).map(|_| rng.gen_range(4..24)).collect();
            let passage: Vec<u32> = (0..p_len).map(|_| rng.gen_range(4..24)).collect();

            let (out, counted) = count_oracle(|| {
                deformer_forward(&model, &question, PassageSource::Tokens(&passage)).unwrap()
            });
            drop(out);
            let analytic = flops_decomposed(&cfg, q_len, p_len, k).unwrap();
            assert_eq!(
                counted,
                analytic.total(),
                "round {round}, k {k}, config {cfg:?}"
            );
        }
    }

    #[test]
    fn memory_matches_the_hand_computed_liveness_table() {
        // n=2, d=8, h=2, f=16, q_max=2, p_len=3: joint width 8, question
        // width 4. Live set per joint layer: 8·8 + 2·8² + 8·16 = 320
        // scalars = 1280 bytes; per question layer: 4·8 + 2·4² + 4·16 =
        // 128 scalars = 512 bytes.
        let cfg = ModelConfig {
            n_layers: 2,
            hidden_dim: 8,
            n_heads: 2,
            ffn_dim: 16,
            vocab_size: 16,
            max_positions: 16,
            q_max: 2,
            p_max: 6,
            layer_norm_eps: 1e-12,
            seed: 0,
        };
        assert_eq!(memory_estimate(&cfg, 2, 3, 0, MeterMode::Full).unwrap(), 2560);
        assert_eq!(memory_estimate(&cfg, 2, 3, 1, MeterMode::Decomposed).unwrap(), 1792);
        assert_eq!(memory_estimate(&cfg, 2, 3, 2, MeterMode::Decomposed).unwrap(), 1024);
    }

    #[test]
    fn memory_reduction_brackets_the_published_figure() {
        let cfg = base_config();
        let full = memory_estimate(&cfg, 32, 286, 9, MeterMode::Full).unwrap();
        let dec = memory_estimate(&cfg, 32, 286, 9, MeterMode::Decomposed).unwrap();
        let reduction = 100.0 * (1.0 - dec as f64 / full as f64);
        assert!((55.0..=80.0).contains(&reduction), "reduction {reduction}%");
    }

    #[test]
    fn cost_model_reproduces_the_worked_example() {
        let full = cost_original(&CostParams::reference_full()).unwrap();
        assert!((full - 148.5).abs() <= 0.1, "full: ${full}");

        let dec = cost_decomposed(&CostParams::reference_decomposed()).unwrap();
        assert!((dec.total - 61.7).abs() <= 0.1, "decomposed: ${}", dec.total);
        assert!((dec.gpu - 45.2).abs() <= 0.1, "gpu: ${}", dec.gpu);
        assert!((dec.reads - 12.0).abs() <= 0.01, "reads: ${}", dec.reads);
        assert!((dec.storage - 4.52).abs() <= 0.01, "storage: ${}", dec.storage);
        assert!(dec.total < full);
    }

    #[test]
    fn cost_is_linear_and_validates() {
        let mut p = CostParams::reference_full();
        p.sequences = 0.0;
        assert_eq!(cost_original(&p).unwrap(), 0.0);

        let base = CostParams::reference_full();
        let mut doubled = base.clone();
        doubled.gpu_per_hour *= 2.0;
        assert!(
            (cost_original(&doubled).unwrap() - 2.0 * cost_original(&base).unwrap()).abs() < 1e-9
        );

        let mut bad = CostParams::reference_full();
        bad.batch_size = 0.0;
        assert!(matches!(cost_original(&bad), Err(Error::Param(_))));
        let mut nan = CostParams::reference_full();
        nan.seconds_per_batch = f64::NAN;
        assert!(matches!(cost_decomposed(&nan), Err(Error::Param(_))));
    }

    #[test]
    fn pure_storage_free_decomposed_cost_is_the_gpu_term() {
        let mut p = CostParams::reference_decomposed();
        p.storage_gb = 0.0;
        p.per_10k_reads = 0.0;
        let dec = cost_decomposed(&p).unwrap();
        assert_eq!(dec.total, dec.gpu);
        assert!((dec.total - 45.2).abs() <= 0.1);
    }
}
