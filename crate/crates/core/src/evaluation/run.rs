//! Test-set scoring from a checkpoint, and the files `eval` writes.

use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};
use serde::Serialize;

use super::{
    isolated_word_eval, mel_reconstruction, per_subject, rank_of, restricted_candidates, ridge::mean_sem, topk_accuracy,
    word_level_eval, zero_shot_split, EvalReport, Restricted, SubjectScore, TopK, WordEval, ZeroShot,
};
use crate::binio;
use crate::dataset::{Dataset, SegmentId, Split};
use crate::error::{Error, Result};
use crate::model::{encode_all, encode_targets, load_checkpoint, Model};
use crate::pipeline::{prepare, segment_log_mel, Prepared};
use crate::preprocessing::WORKING_RATE;
use crate::speech_features::save_external_features;

/// Scores every window of `split` against every segment of that split.
pub fn score_split(model: &mut Model, p: &Prepared, split: Split, chunk: usize) -> Result<EvalReport> {
    let data = p.split(split)?;
    if data.is_empty() {
        return Err(Error::State(format!("the {} split has no windows", split.name())));
    }
    let brain: Vec<_> = data.windows.iter().map(|w| &w.brain).collect();
    let subjects: Vec<usize> = data.windows.iter().map(|w| w.subject).collect();
    let layout_of: Vec<usize> = data.windows.iter().map(|w| w.layout).collect();
    let z = encode_all(model, &brain, &subjects, &layout_of, &p.layouts, chunk)?;
    let y = encode_targets(model, &data.targets, chunk)?;
    let logits = z
        .iter()
        .map(|zi| {
            y.iter()
                .map(|yj| zi.data().iter().zip(yj.data()).map(|(&a, &b)| a as f64 * b as f64).sum())
                .collect()
        })
        .collect();
    EvalReport::from_logits(
        logits,
        data.windows.iter().map(|w| w.target).collect(),
        data.words.clone(),
        data.windows.iter().map(|w| w.sample.subject_id).collect(),
    )
}

#[derive(Clone, Debug, Serialize)]
pub struct IsolatedWords {
    pub word_top1: TopK,
    pub word_top10: TopK,
    pub restricted: Restricted,
}

/// Contents of `report.json`.
#[derive(Clone, Debug, Serialize)]
pub struct ReportJson {
    pub config_hash: String,
    pub dataset: String,
    pub trials: usize,
    pub candidates: usize,
    /// Candidate pairs with identical target content (identical columns).
    pub duplicate_candidates: usize,
    /// Expected top-10 of a uniform scorer, in percent.
    pub chance_top10: f64,
    pub segment: Vec<TopK>,
    pub vocab_size: usize,
    pub word: Vec<TopK>,
    pub restricted: Restricted,
    pub zero_shot: ZeroShot,
    pub per_subject: Vec<SubjectScore>,
    pub subject_mean_top10: f64,
    pub subject_sem_top10: f64,
    pub isolated_words: Option<IsolatedWords>,
    pub reconstructions: usize,
    pub skipped_windows: usize,
}

pub struct EvalOutputs {
    pub report: EvalReport,
    pub words: WordEval,
    pub json: ReportJson,
    pub segments: Vec<SegmentId>,
}

/// Loads the checkpoint, scores the test split of `dataset_dir` and writes
/// `report.json`, `probs.bin`, `words.csv`, `trials.csv` and `recon/` under
/// `out`.
pub fn evaluate(checkpoint: &Path, dataset_dir: &Path, out: &Path) -> Result<EvalOutputs> {
    let ck = load_checkpoint(checkpoint)?;
    let cfg = ck.manifest.config.clone();
    let frozen = ck.manifest.frozen.clone();
    let mut model = ck.model;
    let ds = Dataset::load(dataset_dir)?;
    let p = prepare(&ds, &cfg, &[Split::Test], Some(&frozen))?;
    let report = score_split(&mut model, &p, Split::Test, cfg.eval.batch_size)?;
    let data = p.split(Split::Test)?;
    let n = report.candidates();
    info!("scored {} test trials against {n} candidates", report.trials());

    let words = word_level_eval(&report)?;
    let segment: Vec<TopK> = cfg.eval.top_k.iter().map(|&k| topk_accuracy(&report.probs, &report.truth, k)).collect();
    let word: Vec<TopK> = cfg.eval.top_k.iter().map(|&k| words.topk(k)).collect();
    let restricted_n = cfg.eval.restricted_n.min(n);
    if restricted_n < cfg.eval.restricted_n {
        warn!("only {n} candidates; restricted evaluation uses all of them");
    }
    let restricted = restricted_candidates(&report.probs, &report.truth, restricted_n.max(2), cfg.eval.restricted_seed, &cfg.eval.top_k)?;
    let zero_shot = zero_shot_split(&words, &frozen.train_vocab, 10);
    let subjects = per_subject(&report, &words);
    let (subject_mean_top10, subject_sem_top10) = mean_sem(&subjects.iter().map(|s| s.top10).collect::<Vec<_>>());
    let window_s = cfg.dataset.window.duration_s();
    let isolated_words = if (window_s - 0.8).abs() < 1e-9 {
        let (word_top1, word_top10, restricted) =
            isolated_word_eval(&report, window_s, cfg.eval.restricted_n, cfg.eval.restricted_seed)?;
        Some(IsolatedWords {
            word_top1,
            word_top10,
            restricted,
        })
    } else {
        None
    };

    let mut duplicate_candidates = 0;
    for i in 0..n {
        for j in i + 1..n {
            duplicate_candidates += usize::from(data.targets[i].data() == data.targets[j].data());
        }
    }

    let reconstructions = if cfg.eval.recon { write_reconstructions(&ds, &report, &data.segments, cfg.eval.recon_mels, out)? } else { 0 };

    let json = ReportJson {
        config_hash: ck.manifest.config_hash.clone(),
        dataset: ds.manifest.name.clone(),
        trials: report.trials(),
        candidates: n,
        duplicate_candidates,
        chance_top10: 100.0 * 10f64.min(n as f64) / n as f64,
        segment,
        vocab_size: words.vocab.len(),
        word,
        restricted,
        zero_shot,
        per_subject: subjects,
        subject_mean_top10,
        subject_sem_top10,
        isolated_words,
        reconstructions,
        skipped_windows: p.skipped.len(),
    };

    binio::write_json(&out.join("report.json"), &json)?;
    write_probs(out, &report, &data.segments)?;
    write_words_csv(out, &report, &words)?;
    write_trials_csv(out, &report, &words, &data.segments, &frozen.train_vocab)?;
    Ok(EvalOutputs {
        report,
        words,
        json,
        segments: data.segments.clone(),
    })
}

#[derive(Serialize)]
struct ProbsSidecar<'a> {
    trials: usize,
    candidates: usize,
    dtype: &'static str,
    segment_ids: &'a [SegmentId],
    truth: &'a [usize],
    subjects: &'a [usize],
    words: &'a [String],
}

fn write_probs(out: &Path, r: &EvalReport, segments: &[SegmentId]) -> Result<()> {
    let flat: Vec<f32> = r.probs.iter().flatten().map(|&p| p as f32).collect();
    let path = out.join("probs.bin");
    binio::write_f32(&path, &flat)?;
    binio::write_json(
        &binio::sidecar(&path),
        &ProbsSidecar {
            trials: r.trials(),
            candidates: r.candidates(),
            dtype: "float32-le",
            segment_ids: segments,
            truth: &r.truth,
            subjects: &r.subjects,
            words: &r.words,
        },
    )
}

fn write_words_csv(out: &Path, r: &EvalReport, w: &WordEval) -> Result<()> {
    let mut s = String::from("trial,subject,true_word,word,prob\n");
    for (t, row) in w.probs.iter().enumerate() {
        for (word, p) in w.vocab.iter().zip(row) {
            writeln!(s, "{t},{},{},{word},{p}", r.subjects[t], w.vocab[w.truth[t]]).unwrap();
        }
    }
    binio::write_atomic(&out.join("words.csv"), s.as_bytes())
}

fn write_trials_csv(
    out: &Path,
    r: &EvalReport,
    w: &WordEval,
    segments: &[SegmentId],
    train_vocab: &std::collections::BTreeSet<String>,
) -> Result<()> {
    let mut s = String::from("trial,subject,segment_id,true_word,rank,p_true,word_p_true,word_in_train\n");
    for t in 0..r.trials() {
        let truth = r.truth[t];
        let word = &w.vocab[w.truth[t]];
        writeln!(
            s,
            "{t},{},{},{word},{},{},{},{}",
            r.subjects[t],
            segments[truth],
            rank_of(&r.probs[t], truth),
            r.probs[t][truth],
            w.true_word_prob(t),
            train_vocab.contains(word)
        )
        .unwrap();
    }
    binio::write_atomic(&out.join("trials.csv"), s.as_bytes())
}

fn write_reconstructions(ds: &Dataset, r: &EvalReport, segments: &[SegmentId], n_mels: usize, out: &Path) -> Result<usize> {
    if segments.iter().any(|&id| !ds.audio_path(id).exists()) {
        info!("dataset lacks audio for some test segments; skipping Mel reconstructions");
        return Ok(0);
    }
    let mels = segments
        .iter()
        .map(|&id| segment_log_mel(ds, id, n_mels))
        .collect::<Result<Vec<_>>>()?;
    for (t, row) in r.probs.iter().enumerate() {
        let recon = mel_reconstruction(row, &mels)?;
        save_external_features(&out.join("recon").join(format!("{t}.bin")), &recon.cast(), WORKING_RATE)?;
    }
    Ok(r.trials())
}
