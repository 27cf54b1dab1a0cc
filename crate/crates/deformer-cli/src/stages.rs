//! The pipeline stages and the reporting commands they feed.
//!
//! Each stage function runs unconditionally (the pipeline command decides
//! whether running is necessary), verifies the artifacts it consumes are
//! fresh, does its work, and stamps a manifest. Artifact names are fixed so
//! stages can find one another:
//!
//! ```text
//! run/
//!   data/{train,tune,dev}.jsonl  data/vocab.json
//!   teacher.dfwt  student-init.dfwt  student.dfwt  passages.dfrm
//!   reports/*.txt  reports/*.jsonl
//!   manifests/<stage>.json
//! ```

use std::fs;
use std::path::Path;

use serde_json::json;

use deformer_core::analysis::{divergence_profile, passage_variance_profile};
use deformer_core::cache::{encode_and_store, CacheFile, CacheKey};
use deformer_core::data::{read_jsonl, retention_percent, write_jsonl as write_dataset, EncodedExample, EvalMetrics};
use deformer_core::decomposed::{
    deformer_forward, masked_oracle, transfer_weights, DeformerModel, PassageSource,
};
use deformer_core::encoder::{
    forward_full, load_checkpoint, pack_pair, predict_span, save_checkpoint, train_teacher,
    EncoderWeights, TrainOptions, Vocab,
};
use deformer_core::metering::{flops_decomposed, flops_full, memory_estimate, MeterMode};
use deformer_core::training::{
    bo_tune, exact_match_decomposed, finetune_student, BoOptions, FinetuneOptions, LossWeights,
};
use deformer_core::{Error, Result};

use crate::gen;
use crate::manifest::{require_fresh, Manifest};
use crate::report::{emit_text, flops_display, sparkline, write_jsonl};
use crate::settings::{metric_name, preset_name, Preset, Resolved};

pub const TRAIN_FILE: &str = "data/train.jsonl";
pub const TUNE_FILE: &str = "data/tune.jsonl";
pub const DEV_FILE: &str = "data/dev.jsonl";
pub const VOCAB_FILE: &str = "data/vocab.json";
pub const TEACHER_FILE: &str = "teacher.dfwt";
pub const STUDENT_INIT_FILE: &str = "student-init.dfwt";
pub const STUDENT_FILE: &str = "student.dfwt";
pub const CACHE_FILE: &str = "passages.dfrm";

fn check_deps(rs: &Resolved, stages: &[&str]) -> Result<()> {
    for stage in stages {
        require_fresh(&rs.run_dir, stage, &rs.stage_settings(stage))?;
    }
    Ok(())
}

fn load_vocab(rs: &Resolved) -> Result<Vocab> {
    let path = rs.run_dir.join(VOCAB_FILE);
    let text = fs::read_to_string(&path)?;
    let tokens: Vec<String> = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Vocab::from_tokens(tokens)
}

fn load_split(rs: &Resolved, rel: &str, vocab: &Vocab) -> Result<Vec<EncodedExample>> {
    let examples = read_jsonl(&rs.run_dir.join(rel))?;
    Ok(examples.iter().map(|ex| ex.encode(vocab)).collect())
}

fn load_teacher(rs: &Resolved) -> Result<EncoderWeights> {
    load_checkpoint(&rs.run_dir.join(TEACHER_FILE))
}

fn load_student(rs: &Resolved, rel: &str) -> Result<DeformerModel> {
    let weights = load_checkpoint(&rs.run_dir.join(rel))?;
    transfer_weights(&weights, rs.split_layer)
}

/// Generate the dataset splits and vocabulary, self-checking every record.
pub fn stage_data(rs: &Resolved) -> Result<()> {
    let generated = gen::generate(rs)?;
    let checked = gen::self_check(&generated, rs)?;

    let data_dir = rs.run_dir.join("data");
    fs::create_dir_all(&data_dir)?;
    let vocab_json = serde_json::to_string_pretty(&generated.vocab.tokens())
        .map_err(|e| Error::Format(format!("serializing vocabulary: {e}")))?;
    fs::write(rs.run_dir.join(VOCAB_FILE), vocab_json)?;
    write_dataset(&rs.run_dir.join(TRAIN_FILE), &generated.train)?;
    write_dataset(&rs.run_dir.join(TUNE_FILE), &generated.tune)?;
    write_dataset(&rs.run_dir.join(DEV_FILE), &generated.dev)?;

    let mut m = Manifest::new("data", rs.stage_settings("data"));
    for rel in [VOCAB_FILE, TRAIN_FILE, TUNE_FILE, DEV_FILE] {
        m.record_output(&rs.run_dir, rel)?;
    }
    m.save(&rs.run_dir)?;

    println!(
        "data: {} train / {} tune / {} dev examples, vocabulary of {} tokens, {checked} records self-checked",
        generated.train.len(),
        generated.tune.len(),
        generated.dev.len(),
        generated.vocab.len(),
    );
    Ok(())
}

/// Train the full-attention teacher on gold spans.
pub fn stage_teacher(rs: &Resolved) -> Result<()> {
    check_deps(rs, &["data"])?;
    let vocab = load_vocab(rs)?;
    let train = load_split(rs, TRAIN_FILE, &vocab)?;
    let tune = load_split(rs, TUNE_FILE, &vocab)?;

    let cfg = rs.model_config(vocab.len());
    cfg.validate()?;
    let init = EncoderWeights::init(&cfg)?;
    let opts = TrainOptions {
        steps: rs.teacher_steps,
        lr: rs.teacher_lr,
        batch_size: rs.batch_size,
        eval_every: rs.eval_every,
        seed: rs.train_seed,
        max_span_len: rs.max_span_len,
        warmup_steps: rs.teacher_warmup,
        decay: true,
        ..TrainOptions::default()
    };
    let (weights, history) = train_teacher(&init, &train, &tune, &opts)?;

    save_checkpoint(&weights, &rs.run_dir.join(TEACHER_FILE))?;
    let records: Vec<serde_json::Value> = history
        .iter()
        .map(|r| json!({"step": r.step, "loss": r.loss, "exact_match": r.exact_match}))
        .collect();
    write_jsonl(&rs.run_dir.join("reports/teacher-history.jsonl"), &records)?;

    let final_em = evaluate_full(&weights, &tune, rs.max_span_len)?;
    let mut m = Manifest::new("teacher", rs.stage_settings("teacher"));
    for rel in [TRAIN_FILE, TUNE_FILE, VOCAB_FILE] {
        m.record_input(&rs.run_dir, rel)?;
    }
    m.record_output(&rs.run_dir, TEACHER_FILE)?;
    m.save(&rs.run_dir)?;

    println!(
        "teacher: {} steps, final tune EM {:.1} / F1 {:.1}",
        rs.teacher_steps, final_em.exact_match, final_em.span_f1
    );
    Ok(())
}

fn evaluate_full(
    weights: &EncoderWeights,
    examples: &[EncodedExample],
    max_span_len: usize,
) -> Result<EvalMetrics> {
    deformer_core::data::evaluate(examples, |ex| {
        let pair = pack_pair(&ex.question, &ex.passage, &weights.config)?;
        let out = forward_full(weights, &pair)?;
        predict_span(&out.dist, max_span_len)
    })
}

/// Initialize the decomposed model from teacher weights and self-check that
/// its forward pass reproduces the segment-masked full encoder.
pub fn stage_decompose(rs: &Resolved) -> Result<()> {
    check_deps(rs, &["data", "teacher"])?;
    let teacher = load_teacher(rs)?;
    let model = transfer_weights(&teacher, rs.split_layer)?;

    let vocab = load_vocab(rs)?;
    let dev = load_split(rs, DEV_FILE, &vocab)?;
    let probe = &dev[0];
    let pair = pack_pair(&probe.question, &probe.passage, &teacher.config)?;
    let oracle = masked_oracle(&pair, &teacher, rs.split_layer)?;
    let out = deformer_forward(&model, &probe.question, PassageSource::Tokens(&probe.passage))?;
    let joint = out.joint_stack()?;
    let mut max_diff = 0.0f64;
    for (a, b) in oracle.iter().zip(&joint) {
        for (x, y) in a.data().iter().zip(b.data()) {
            max_diff = max_diff.max((x - y).abs());
        }
    }
    if max_diff > 1e-8 {
        return Err(Error::Numerical(format!(
            "decomposition self-check failed: split forward differs from the masked encoder by {max_diff:.3e}"
        )));
    }

    save_checkpoint(&model.weights, &rs.run_dir.join(STUDENT_INIT_FILE))?;
    let mut m = Manifest::new("decompose", rs.stage_settings("decompose"));
    m.record_input(&rs.run_dir, TEACHER_FILE)?;
    m.record_output(&rs.run_dir, STUDENT_INIT_FILE)?;
    m.save(&rs.run_dir)?;

    println!(
        "decompose: split at layer {} of {}, self-check max |Δ| = {max_diff:.2e}",
        rs.split_layer, rs.n_layers
    );
    Ok(())
}

/// Fine-tune the decomposed model against the teacher with the weighted
/// span, distillation, and representation-similarity losses.
pub fn stage_finetune(rs: &Resolved) -> Result<()> {
    check_deps(rs, &["data", "teacher", "decompose"])?;
    let vocab = load_vocab(rs)?;
    let train = load_split(rs, TRAIN_FILE, &vocab)?;
    let tune = load_split(rs, TUNE_FILE, &vocab)?;
    let teacher = load_teacher(rs)?;
    let student = load_student(rs, STUDENT_INIT_FILE)?;

    let opts = FinetuneOptions {
        steps: rs.finetune_steps,
        lr: rs.finetune_lr,
        warmup_steps: rs.finetune_warmup,
        batch_size: rs.batch_size,
        eval_every: rs.eval_every,
        seed: rs.finetune_seed,
        max_span_len: rs.max_span_len,
        weights: rs.loss_weights(),
    };
    let (tuned, history) = finetune_student(&student, &teacher, &train, &tune, &opts)?;

    save_checkpoint(&tuned.weights, &rs.run_dir.join(STUDENT_FILE))?;
    let records: Vec<serde_json::Value> = history
        .iter()
        .map(|r| {
            json!({
                "step": r.step,
                "l_total": r.breakdown.l_total,
                "l_ts": r.breakdown.l_ts,
                "l_kd": r.breakdown.l_kd,
                "l_lrs": r.breakdown.l_lrs,
                "exact_match": r.exact_match,
            })
        })
        .collect();
    write_jsonl(&rs.run_dir.join("reports/finetune-history.jsonl"), &records)?;

    let final_em = exact_match_decomposed(&tuned, &tune, rs.max_span_len)?;
    let mut m = Manifest::new("finetune", rs.stage_settings("finetune"));
    for rel in [TRAIN_FILE, TUNE_FILE, VOCAB_FILE, TEACHER_FILE, STUDENT_INIT_FILE] {
        m.record_input(&rs.run_dir, rel)?;
    }
    m.record_output(&rs.run_dir, STUDENT_FILE)?;
    m.save(&rs.run_dir)?;

    println!(
        "finetune: {} steps with (γ, α, β) = ({}, {}, {}), final tune EM {final_em:.1}",
        rs.finetune_steps, rs.gamma, rs.alpha, rs.beta
    );
    Ok(())
}

/// Precompute dev-passage representations at the split layer and store them.
pub fn stage_cache(rs: &Resolved) -> Result<()> {
    check_deps(rs, &["data", "finetune"])?;
    let vocab = load_vocab(rs)?;
    let dev = load_split(rs, DEV_FILE, &vocab)?;
    let student = load_student(rs, STUDENT_FILE)?;

    let passages: Vec<Vec<u32>> = dev.iter().map(|ex| ex.passage.clone()).collect();
    let summary =
        encode_and_store(&passages, &student, rs.precision, &rs.run_dir.join(CACHE_FILE))?;

    let mut m = Manifest::new("cache", rs.stage_settings("cache"));
    for rel in [DEV_FILE, VOCAB_FILE, STUDENT_FILE] {
        m.record_input(&rs.run_dir, rel)?;
    }
    m.record_output(&rs.run_dir, CACHE_FILE)?;
    m.save(&rs.run_dir)?;

    println!(
        "cache: {} unique passages, {} bytes, offline compute {}",
        summary.entries,
        summary.bytes,
        flops_display(summary.offline_flops)
    );
    Ok(())
}

/// Score the teacher and the decomposed model (served from the cache and
/// inline) on the dev split.
pub fn stage_eval(rs: &Resolved) -> Result<()> {
    check_deps(rs, &["data", "teacher", "finetune", "cache"])?;
    let vocab = load_vocab(rs)?;
    let dev = load_split(rs, DEV_FILE, &vocab)?;
    let teacher = load_teacher(rs)?;
    let student = load_student(rs, STUDENT_FILE)?;
    let cache = CacheFile::open(&rs.run_dir.join(CACHE_FILE))?;

    let teacher_metrics = evaluate_full(&teacher, &dev, rs.max_span_len)?;

    let (mut hits, mut misses) = (0usize, 0usize);
    let cached = deformer_core::data::evaluate(&dev, |ex| {
        let key = CacheKey::new(&ex.passage, &student);
        let entry = cache.lookup(&key).map_err(|e| {
            Error::State(format!("stale cache: {e}; rerun `deformer encode-cache`"))
        })?;
        let out = match &entry {
            Some(entry) => {
                hits += 1;
                deformer_forward(&student, &ex.question, entry.passage_source())?
            }
            None => {
                misses += 1;
                deformer_forward(
                    &student,
                    &ex.question,
                    PassageSource::TokensVia(&ex.passage, rs.precision),
                )?
            }
        };
        predict_span(&out.dist, rs.max_span_len)
    })?;

    let inline = deformer_core::data::evaluate(&dev, |ex| {
        let out = deformer_forward(
            &student,
            &ex.question,
            PassageSource::TokensVia(&ex.passage, rs.precision),
        )?;
        predict_span(&out.dist, rs.max_span_len)
    })?;

    let retention = if teacher_metrics.exact_match > 0.0 {
        Some(retention_percent(cached.exact_match, teacher_metrics.exact_match)?)
    } else {
        None
    };

    let mut text = format!(
        "evaluation on {} dev examples (k = {})\n\
         \x20 teacher          EM {:6.2}   F1 {:6.2}\n\
         \x20 student (cached) EM {:6.2}   F1 {:6.2}   cache hits {hits}, misses {misses}\n\
         \x20 student (inline) EM {:6.2}   F1 {:6.2}\n",
        dev.len(),
        rs.split_layer,
        teacher_metrics.exact_match,
        teacher_metrics.span_f1,
        cached.exact_match,
        cached.span_f1,
        inline.exact_match,
        inline.span_f1,
    );
    match retention {
        Some(r) => text.push_str(&format!("  retention        {r:.1}% of teacher EM\n")),
        None => text.push_str("  retention        undefined (teacher EM is zero)\n"),
    }
    emit_text(&rs.run_dir.join("reports/eval.txt"), &text)?;

    let records = vec![
        json!({"system": "teacher", "exact_match": teacher_metrics.exact_match,
               "span_f1": teacher_metrics.span_f1, "examples": teacher_metrics.examples}),
        json!({"system": "student-cached", "exact_match": cached.exact_match,
               "span_f1": cached.span_f1, "examples": cached.examples,
               "cache_hits": hits, "cache_misses": misses}),
        json!({"system": "student-inline", "exact_match": inline.exact_match,
               "span_f1": inline.span_f1, "examples": inline.examples}),
        json!({"system": "retention", "percent_of_teacher_em": retention}),
    ];
    write_jsonl(&rs.run_dir.join("reports/eval.jsonl"), &records)?;

    let mut m = Manifest::new("eval", rs.stage_settings("eval"));
    for rel in [DEV_FILE, VOCAB_FILE, TEACHER_FILE, STUDENT_FILE, CACHE_FILE] {
        m.record_input(&rs.run_dir, rel)?;
    }
    m.record_output(&rs.run_dir, "reports/eval.txt")?;
    m.record_output(&rs.run_dir, "reports/eval.jsonl")?;
    m.save(&rs.run_dir)?;
    Ok(())
}

/// The shape `profile` measures, after preset resolution.
fn profile_shape(rs: &Resolved) -> (deformer_core::encoder::ModelConfig, usize, usize, usize) {
    let (mut cfg, default_q, default_p, default_k) = match rs.preset {
        Preset::Config => {
            let vocab_size = 4 + rs.vocab_keys + rs.vocab_values;
            (rs.model_config(vocab_size), rs.q_max, rs.p_max, rs.split_layer)
        }
        Preset::BertBase => (
            deformer_core::encoder::ModelConfig {
                n_layers: 12,
                hidden_dim: 768,
                n_heads: 12,
                ffn_dim: 3072,
                vocab_size: 30522,
                max_positions: 512,
                q_max: 32,
                p_max: 477,
                layer_norm_eps: 1e-12,
                seed: 0,
            },
            32,
            285,
            9,
        ),
        Preset::BertLarge => (
            deformer_core::encoder::ModelConfig {
                n_layers: 24,
                hidden_dim: 1024,
                n_heads: 16,
                ffn_dim: 4096,
                vocab_size: 30522,
                max_positions: 512,
                q_max: 32,
                p_max: 477,
                layer_norm_eps: 1e-12,
                seed: 0,
            },
            32,
            285,
            18,
        ),
    };
    let q = if rs.question_len == 0 { default_q } else { rs.question_len };
    let p = if rs.passage_len == 0 { default_p } else { rs.passage_len };
    let k = if rs.split_layer_explicit { rs.split_layer } else { default_k };
    if rs.preset != Preset::Config {
        cfg.q_max = q;
        cfg.p_max = cfg.p_max.max(p);
        cfg.max_positions = cfg.max_positions.max(cfg.q_max + cfg.p_max + 3);
    }
    (cfg, q, p, k)
}

/// Analytic FLOPs, activation memory, and speedup for a model shape.
pub fn stage_profile(rs: &Resolved) -> Result<()> {
    let (cfg, q, p, k) = profile_shape(rs);
    let full = flops_full(&cfg, q, p)?;
    let dec = flops_decomposed(&cfg, q, p, k)?;
    let mem_full = memory_estimate(&cfg, q, p, k, MeterMode::Full)?;
    let mem_dec = memory_estimate(&cfg, q, p, k, MeterMode::Decomposed)?;

    let speedup = full.online as f64 / dec.online as f64;
    let flop_cut = 100.0 * (1.0 - dec.online as f64 / full.online as f64);
    let mem_cut = 100.0 * (1.0 - mem_dec as f64 / mem_full as f64);

    let text = format!(
        "profile: {} (n={} d={} h={} f={}), q={q} p={p}, split k={k}\n\
         \x20 full encoder   {:>18} online per query        memory {} B\n\
         \x20 decomposed     {:>18} online per query (−{flop_cut:.1}%)  memory {} B (−{mem_cut:.1}%)\n\
         \x20 offline        {:>18} per passage, {} cache bytes per query\n\
         \x20 speedup        {speedup:.2}x online FLOPs\n",
        preset_name(rs.preset),
        cfg.n_layers,
        cfg.hidden_dim,
        cfg.n_heads,
        cfg.ffn_dim,
        flops_display(full.online),
        mem_full,
        flops_display(dec.online),
        mem_dec,
        flops_display(dec.offline),
        dec.cache_bytes,
    );
    emit_text(&rs.run_dir.join("reports/profile.txt"), &text)?;

    let record = json!({
        "preset": preset_name(rs.preset),
        "n_layers": cfg.n_layers, "hidden_dim": cfg.hidden_dim,
        "n_heads": cfg.n_heads, "ffn_dim": cfg.ffn_dim,
        "question_len": q, "passage_len": p, "split_layer": k,
        "full_online_flops": full.online,
        "decomposed_online_flops": dec.online,
        "offline_flops_per_passage": dec.offline,
        "cache_bytes_per_query": dec.cache_bytes,
        "speedup": speedup,
        "memory_full_bytes": mem_full,
        "memory_decomposed_bytes": mem_dec,
    });
    write_jsonl(&rs.run_dir.join("reports/profile.jsonl"), &[record])?;

    let mut m = Manifest::new("profile", rs.stage_settings("profile"));
    m.record_output(&rs.run_dir, "reports/profile.txt")?;
    m.record_output(&rs.run_dir, "reports/profile.jsonl")?;
    m.save(&rs.run_dir)?;
    Ok(())
}

/// Variance and divergence profiles of the trained models on dev samples.
pub fn stage_analyze(rs: &Resolved) -> Result<()> {
    check_deps(rs, &["data", "teacher", "finetune"])?;
    let vocab = load_vocab(rs)?;
    let dev = load_split(rs, DEV_FILE, &vocab)?;
    let teacher = load_teacher(rs)?;
    let student = load_student(rs, STUDENT_FILE)?;
    let k = rs.split_layer;

    let mut passages: Vec<Vec<u32>> = Vec::new();
    for ex in &dev {
        if !passages.contains(&ex.passage) {
            passages.push(ex.passage.clone());
        }
        if passages.len() == rs.analysis_passages {
            break;
        }
    }
    let mut questions: Vec<Vec<u32>> = Vec::new();
    for ex in &dev {
        if !questions.contains(&ex.question) {
            questions.push(ex.question.clone());
        }
        if questions.len() == rs.analysis_questions {
            break;
        }
    }
    if questions.len() < 2 {
        return Err(Error::Input(
            "dev split has fewer than two distinct questions to vary".into(),
        ));
    }

    let teacher_var = passage_variance_profile(&teacher, &passages, &questions)?;
    let student_var = passage_variance_profile(&student, &passages, &questions)?;

    let pairs: Vec<(Vec<u32>, Vec<u32>)> = dev
        .iter()
        .take(32)
        .map(|ex| (ex.question.clone(), ex.passage.clone()))
        .collect();
    let div = divergence_profile(&teacher, &student, &pairs, rs.metric)?;
    let upper_mean = div.upper_passage_mean(k);

    let lower_mean = |xs: &[f64]| xs[..=k].iter().sum::<f64>() / (k + 1) as f64;
    let upper_var_mean = |xs: &[f64]| {
        let upper = &xs[k + 1..];
        if upper.is_empty() { 0.0 } else { upper.iter().sum::<f64>() / upper.len() as f64 }
    };

    let text = format!(
        "analysis over {} passages x {} question variants (k = {k}, metric {})\n\
         \x20 question-dependence of passage representations, by layer 0..={}\n\
         \x20   teacher raw  [{}]  {}\n\
         \x20   student raw  [{}]  {}\n\
         \x20   student normalized {}\n\
         \x20   student layers 0..={k} are question-independent: {}\n\
         \x20   teacher mean raw, layers <= k vs above: {:.3e} vs {:.3e}\n\
         \x20 teacher-student divergence by layer ({} pairs)\n\
         \x20   question block {}\n\
         \x20   passage block  {}\n\
         \x20   mean passage divergence above the split: {upper_mean:.4}\n",
        teacher_var.passages,
        teacher_var.questions_per_passage,
        metric_name(rs.metric),
        rs.n_layers,
        join_floats(&teacher_var.raw),
        sparkline(&teacher_var.raw),
        join_floats(&student_var.raw),
        sparkline(&student_var.raw),
        sparkline(&student_var.normalized),
        student_var.raw[..=k].iter().all(|&v| v == 0.0),
        lower_mean(&teacher_var.raw),
        upper_var_mean(&teacher_var.raw),
        div.examples,
        sparkline(&div.question),
        sparkline(&div.passage),
    );
    emit_text(&rs.run_dir.join("reports/analysis.txt"), &text)?;

    let mut records = Vec::new();
    for (system, profile) in [("teacher", &teacher_var), ("student", &student_var)] {
        for layer in 0..profile.raw.len() {
            records.push(json!({
                "record": "variance", "system": system, "layer": layer,
                "raw": profile.raw[layer], "normalized": profile.normalized[layer],
            }));
        }
    }
    for layer in 0..div.passage.len() {
        records.push(json!({
            "record": "divergence", "layer": layer,
            "question": div.question[layer], "passage": div.passage[layer],
        }));
    }
    records.push(json!({
        "record": "divergence_summary", "split_layer": k,
        "metric": metric_name(rs.metric),
        "upper_passage_mean": upper_mean,
        "skipped_tokens_teacher": teacher_var.skipped_tokens,
        "skipped_tokens_student": student_var.skipped_tokens,
    }));
    write_jsonl(&rs.run_dir.join("reports/analysis.jsonl"), &records)?;

    let mut m = Manifest::new("analyze", rs.stage_settings("analyze"));
    for rel in [DEV_FILE, VOCAB_FILE, TEACHER_FILE, STUDENT_FILE] {
        m.record_input(&rs.run_dir, rel)?;
    }
    m.record_output(&rs.run_dir, "reports/analysis.txt")?;
    m.record_output(&rs.run_dir, "reports/analysis.jsonl")?;
    m.save(&rs.run_dir)?;
    Ok(())
}

fn join_floats(xs: &[f64]) -> String {
    xs.iter().map(|v| format!("{v:.2e}")).collect::<Vec<_>>().join(", ")
}

/// Search loss weights (γ, α, β) with the surrogate-guided tuner: each
/// trial fine-tunes briefly and is scored by exact match on the tune split.
pub fn cmd_tune(rs: &Resolved) -> Result<()> {
    check_deps(rs, &["data", "teacher", "decompose"])?;
    let vocab = load_vocab(rs)?;
    let train = load_split(rs, TRAIN_FILE, &vocab)?;
    let tune_set = load_split(rs, TUNE_FILE, &vocab)?;
    let teacher = load_teacher(rs)?;
    let student = load_student(rs, STUDENT_INIT_FILE)?;

    let opts = BoOptions {
        n_iterations: rs.tune_iterations,
        initial_design: rs.tune_initial,
        candidates: rs.tune_candidates,
        seed: rs.tune_seed,
        ..BoOptions::default()
    };
    let mut trial_no = 0usize;
    let objective = |w: &LossWeights| -> f64 {
        trial_no += 1;
        let fo = FinetuneOptions {
            steps: rs.tune_trial_steps,
            lr: rs.finetune_lr,
            warmup_steps: 0,
            batch_size: rs.batch_size,
            eval_every: 0,
            seed: rs.tune_seed,
            max_span_len: rs.max_span_len,
            weights: *w,
        };
        let score = finetune_student(&student, &teacher, &train, &tune_set, &fo)
            .and_then(|(model, _)| exact_match_decomposed(&model, &tune_set, rs.max_span_len));
        match score {
            Ok(em) => {
                println!(
                    "  trial {trial_no:>3}: γ={:.3} α={:.3} β={:.3} → tune EM {em:.1}",
                    w.gamma, w.alpha, w.beta
                );
                -em // the tuner minimizes
            }
            Err(e) => {
                println!("  trial {trial_no:>3}: failed ({e})");
                f64::NAN
            }
        }
    };
    let (best, trials) = bo_tune(objective, &opts)?;

    let text = format!(
        "loss-weight search: {} trials over [0.1, 2.0]^3\n\
         \x20 best: γ={:.3} α={:.3} β={:.3}, tune EM {:.1} (iteration {})\n",
        trials.len(),
        best.weights.gamma,
        best.weights.alpha,
        best.weights.beta,
        -best.objective,
        best.iteration,
    );
    emit_text(&rs.run_dir.join("reports/tune.txt"), &text)?;

    let records: Vec<serde_json::Value> = trials
        .iter()
        .map(|t| {
            json!({
                "iteration": t.iteration,
                "gamma": t.weights.gamma, "alpha": t.weights.alpha, "beta": t.weights.beta,
                "tune_exact_match": t.objective.map(|o| -o),
            })
        })
        .collect();
    write_jsonl(&rs.run_dir.join("reports/tune.jsonl"), &records)?;

    let mut m = Manifest::new("tune", rs.stage_settings("tune"));
    for rel in [TRAIN_FILE, TUNE_FILE, VOCAB_FILE, TEACHER_FILE, STUDENT_INIT_FILE] {
        m.record_input(&rs.run_dir, rel)?;
    }
    m.record_output(&rs.run_dir, "reports/tune.txt")?;
    m.record_output(&rs.run_dir, "reports/tune.jsonl")?;
    m.save(&rs.run_dir)?;
    Ok(())
}

/// Dollar cost of serving with and without cached passages, plus the
/// per-passage storage bill.
pub fn cmd_cost(rs: &Resolved, out: Option<&Path>) -> Result<()> {
    use deformer_core::metering::{cost_decomposed, cost_original, CostParams};

    let full = CostParams {
        gpu_per_hour: rs.gpu_per_hour,
        sequences: rs.sequences,
        batch_size: rs.cost_batch_size as f64,
        seconds_per_batch: rs.seconds_per_batch,
        storage_gb: 0.0,
        storage_per_gb: 0.0,
        per_10k_reads: 0.0,
    };
    let dec = CostParams {
        seconds_per_batch: rs.decomposed_seconds_per_batch,
        storage_gb: rs.storage_gb,
        storage_per_gb: rs.storage_per_gb,
        per_10k_reads: rs.per_10k_reads,
        ..full
    };
    let original = cost_original(&full)?;
    let breakdown = cost_decomposed(&dec)?;
    let saving = 100.0 * (1.0 - breakdown.total / original);

    let per_passage_bytes =
        deformer_core::cache::estimate_size(rs.passage_tokens, rs.storage_hidden_dim, 2);
    let per_passage_kb = per_passage_bytes as f64 / 1e3;

    let text = format!(
        "serving cost for {:.1}M sequences (GPU ${}/h, batches of {})\n\
         \x20 without cache  ${original:.2}  ({:.1}s per batch)\n\
         \x20 with cache     ${:.2}  = GPU ${:.2} + reads ${:.2} + storage ${:.2}  ({:.1}s per batch)\n\
         \x20 saving         {saving:.1}%\n\
         \x20 storage, 16-bit: {per_passage_kb:.0} KB per {}-token passage at d={}\n",
        rs.sequences / 1e6,
        rs.gpu_per_hour,
        rs.cost_batch_size,
        rs.seconds_per_batch,
        breakdown.total,
        breakdown.gpu,
        breakdown.reads,
        breakdown.storage,
        rs.decomposed_seconds_per_batch,
        rs.passage_tokens,
        rs.storage_hidden_dim,
    );
    print!("{text}");

    if let Some(path) = out {
        let record = json!({
            "original_dollars": original,
            "decomposed_dollars": breakdown.total,
            "gpu_dollars": breakdown.gpu,
            "read_dollars": breakdown.reads,
            "storage_dollars": breakdown.storage,
            "saving_percent": saving,
            "per_passage_bytes_16bit": per_passage_bytes,
        });
        write_jsonl(path, &[record])?;
    }
    Ok(())
}

/// Dispatch used by both standalone subcommands and the pipeline.
pub fn run_stage(rs: &Resolved, stage: &str) -> Result<()> {
    match stage {
        "data" => stage_data(rs),
        "teacher" => stage_teacher(rs),
        "decompose" => stage_decompose(rs),
        "finetune" => stage_finetune(rs),
        "cache" => stage_cache(rs),
        "eval" => stage_eval(rs),
        "profile" => stage_profile(rs),
        "analyze" => stage_analyze(rs),
        other => Err(Error::Config(format!("unknown stage {other:?}"))),
    }
}
