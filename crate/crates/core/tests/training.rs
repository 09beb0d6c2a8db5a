mod common;

use std::collections::BTreeMap;

use brainspeech::evaluation::zero_shot_split;
use brainspeech::model::load_checkpoint;

use common::{desk_config, synth, train_eval};

#[test]
fn validation_loss_falls_on_clean_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(&dir.path().join("data"), &["segments=60", "noise_std=0"]);
    let cfg = desk_config(&["training.max_epochs=4", "training.patience=10"]);
    let run = train_eval(&data, &cfg, &dir.path().join("run"));
    let h = &run.summary.history;
    assert_eq!(h.len(), 4);
    assert!(h.last().unwrap().valid_loss < h[0].valid_loss, "{h:?}");
    assert!(h.iter().all(|r| r.train_loss.is_finite() && r.valid_loss.is_finite()));
}

#[test]
fn unseen_words_are_decoded_above_chance() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(
        &dir.path().join("data"),
        &["segments=200", "vocab_size=40", "held_out_words=10", "noise_std=1", "split_ratios=[0.6,0.1,0.3]"],
    );
    let cfg = desk_config(&["training.max_epochs=15"]);
    let run = train_eval(&data, &cfg, &dir.path().join("run"));
    let ck = load_checkpoint(&run.summary.checkpoint).unwrap();
    let words = &run.eval.words;
    let zs = zero_shot_split(words, &ck.manifest.frozen.train_vocab, 1);
    assert!(zs.n_not_in_train > 5, "{zs:?}");

    // a scorer that ignores the brain ranks words by how many candidates carry them
    let mut count: BTreeMap<&str, usize> = BTreeMap::new();
    for w in &run.eval.report.words {
        *count.entry(w.as_str()).or_default() += 1;
    }
    let n = run.eval.report.candidates() as f64;
    let unseen: Vec<usize> = (0..words.truth.len())
        .filter(|&i| !ck.manifest.frozen.train_vocab.contains(&words.vocab[words.truth[i]]))
        .collect();
    let chance = 100.0 * unseen.iter().map(|&i| count[words.vocab[words.truth[i]].as_str()] as f64 / n).sum::<f64>()
        / unseen.len() as f64;
    let acc = zs.not_in_train.unwrap();
    assert!(acc > chance + 20.0, "unseen-word top-1 {acc:.1} vs chance {chance:.1}, segment top-1 {}", run.top(1));
}

#[test]
fn deep_mel_target_trains_above_chance() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(&dir.path().join("data"), &["segments=200", "noise_std=0.5", "split_ratios=[0.6,0.15,0.25]"]);
    // the target network is learned too, so it needs more updates than fixed targets
    let cfg = desk_config(&["speech.rep=\"deep-mel\"", "speech.n_mels=40", "training.max_epochs=12", "training.batch_size=16"]);
    let run = train_eval(&data, &cfg, &dir.path().join("run"));
    let chance = 100.0 / run.eval.json.candidates as f64;
    assert!(run.eval.json.candidates >= 40);
    assert!(run.top(1) >= chance + 40.0, "top-1 {} vs chance {chance:.1}", run.top(1));
}

#[test]
fn evaluation_scores_only_test_segments() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(&dir.path().join("data"), &["segments=40", "noise_std=1"]);
    let cfg = desk_config(&["training.max_epochs=1"]);
    let run = train_eval(&data, &cfg, &dir.path().join("run"));
    let ds = brainspeech::dataset::Dataset::load(&data).unwrap();
    let splits = ds.splits.expect("synthetic data ships a split file");
    assert!(!run.eval.segments.is_empty());
    for id in &run.eval.segments {
        assert_eq!(splits.get(*id), Some(brainspeech::dataset::Split::Test));
    }
}
