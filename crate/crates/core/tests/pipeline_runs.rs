use std::collections::BTreeMap;
use std::sync::Arc;

use floodvqa_core::backends::mock::{MockCaptioner, MockEmbedder, MockGenerator};
use floodvqa_core::backends::ImageData;
use floodvqa_core::context::select_context;
use floodvqa_core::model::{QuestionRecord, QuestionType};
use floodvqa_core::pipeline::{load_image, Pipeline, PipelineConfig, RunLog, RunLogEntry, Stage};
use floodvqa_core::prompt::{ExampleBank, PromptMode};
use floodvqa_core::synthetic::{
    mock_pipeline, synthetic_captioner, write_synthetic_dataset, SAFE_PLACE_ANSWER,
    SAFE_PLACE_CAPTION, SAFE_PLACE_QUESTION_ID, SAFE_PLACE_REASONING,
};
use floodvqa_core::DatasetManifest;

async fn run(mode: PromptMode, limit: usize) -> (RunLog, DatasetManifest) {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_synthetic_dataset(dir.path()).unwrap();
    let log = mock_pipeline(mode, limit)
        .run_dataset(&manifest, dir.path())
        .await
        .unwrap();
    (log, manifest)
}

#[tokio::test]
async fn runs_are_byte_identical_across_runs_and_concurrency() {
    for mode in PromptMode::ALL {
        let (a, manifest) = run(mode, 1).await;
        let (b, _) = run(mode, 1).await;
        let (c, _) = run(mode, 4).await;
        assert_eq!(a.to_jsonl(), b.to_jsonl(), "{mode}");
        assert_eq!(a.to_jsonl(), c.to_jsonl(), "{mode}");
        assert_eq!(a.failures().count(), 0);
        let order: Vec<&str> = a.entries.iter().map(|e| e.question_id()).collect();
        let expected: Vec<&str> = manifest.questions.iter().map(|q| q.id.as_str()).collect();
        assert_eq!(order, expected);
    }
}

#[tokio::test]
async fn safe_place_question_answers_no_safe_place() {
    for mode in PromptMode::ALL {
        let (log, _) = run(mode, 2).await;
        let answer = log
            .answers()
            .find(|a| a.question_id == SAFE_PLACE_QUESTION_ID)
            .unwrap();
        assert_eq!(answer.final_answer, SAFE_PLACE_ANSWER, "{mode}");
        assert_eq!(answer.context_caption, SAFE_PLACE_CAPTION.trim_end());
        if mode.uses_cot() {
            assert_eq!(answer.reasoning, SAFE_PLACE_REASONING);
        } else {
            assert_eq!(answer.reasoning, "");
            assert_eq!(answer.raw_generation, SAFE_PLACE_ANSWER);
        }
    }
}

#[tokio::test]
async fn prompt_always_contains_context_caption() {
    for mode in PromptMode::ALL {
        let (log, _) = run(mode, 3).await;
        for a in log.answers() {
            assert!(a.prompt.contains(&a.context_caption), "{}", a.question_id);
            assert!(!a.final_answer.is_empty());
        }
    }
}

#[tokio::test]
async fn run_log_round_trips_jsonl() {
    let (log, _) = run(PromptMode::FewShotCot, 4).await;
    let text = log.to_jsonl();
    assert_eq!(text.lines().count(), 12);
    assert_eq!(RunLog::from_jsonl(&text).unwrap(), log);
}

#[tokio::test]
async fn missing_image_fails_only_its_questions() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_synthetic_dataset(dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("img03.jpg")).unwrap();
    let log = mock_pipeline(PromptMode::ZeroShotCot, 4)
        .run_dataset(&manifest, dir.path())
        .await
        .unwrap();
    let failed: Vec<&str> = log.failures().map(|f| f.question_id.as_str()).collect();
    assert_eq!(failed, ["q07", "q08", "q09"]);
    assert!(log.failures().all(|f| f.stage == Stage::LoadImage));
    assert_eq!(log.answers().count(), 9);
    let line = log.to_jsonl().lines().nth(6).unwrap().to_string();
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert_eq!(v["stage"], "load_image");
    assert_eq!(v.as_object().unwrap().len(), 3);
}

#[tokio::test]
async fn tampered_image_is_a_load_failure() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_synthetic_dataset(dir.path()).unwrap();
    std::fs::write(dir.path().join("img02.jpg"), b"other bytes").unwrap();
    let log = mock_pipeline(PromptMode::WithoutCot, 1)
        .run_dataset(&manifest, dir.path())
        .await
        .unwrap();
    assert_eq!(log.failures().count(), 3);
}

#[tokio::test]
async fn empty_manifest_gives_empty_log() {
    let dir = tempfile::tempdir().unwrap();
    let log = mock_pipeline(PromptMode::ZeroShotCot, 1)
        .run_dataset(&DatasetManifest::new(vec![], vec![]), dir.path())
        .await
        .unwrap();
    assert!(log.entries.is_empty());
    assert_eq!(log.to_jsonl(), "");
}

#[tokio::test]
async fn invalid_manifest_is_rejected_up_front() {
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = write_synthetic_dataset(dir.path()).unwrap();
    manifest.questions[0].image_id = "nope".into();
    let err = mock_pipeline(PromptMode::ZeroShotCot, 1)
        .run_dataset(&manifest, dir.path())
        .await
        .unwrap_err();
    assert!(err.to_string().contains("missing_image_ref"), "{err}");
}

#[tokio::test]
async fn batched_contexts_match_single_question_selection() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_synthetic_dataset(dir.path()).unwrap();
    let on_img02: Vec<QuestionRecord> = manifest
        .questions
        .iter()
        .filter(|q| q.image_id == "img02")
        .cloned()
        .collect();
    assert_eq!(on_img02.len(), 3);
    let sub = DatasetManifest::new(vec![manifest.image("img02").unwrap().clone()], on_img02.clone());
    let log = mock_pipeline(PromptMode::ZeroShotCot, 3)
        .run_dataset(&sub, dir.path())
        .await
        .unwrap();

    let image = load_image(&manifest, dir.path(), "img02").unwrap();
    let captioner = synthetic_captioner();
    let embedder = MockEmbedder::default();
    for (q, answer) in on_img02.iter().zip(log.answers()) {
        let n = floodvqa_core::context::candidate_count(q.qtype);
        let sel = select_context(q, &image, &captioner, &embedder, n).await.unwrap();
        assert_eq!(answer.context_caption, sel.chosen.text);
        let best = sel.chosen.score.unwrap();
        assert!(sel.all_candidates.iter().all(|c| c.score.unwrap() <= best));
    }
}

fn counts(text: &str) -> BTreeMap<String, u64> {
    let mut m = BTreeMap::new();
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    for t in cleaned.split_whitespace() {
        *m.entry(t.to_string()).or_insert(0) += 1;
    }
    m
}

/// Bag-of-words cosine over distinct tokens (no hashing).
fn bow_cosine(a: &str, b: &str) -> f64 {
    let (a, b) = (counts(a), counts(b));
    let dot: u64 = a.iter().map(|(t, x)| x * b.get(t).copied().unwrap_or(0)).sum();
    let na: u64 = a.values().map(|x| x * x).sum();
    let nb: u64 = b.values().map(|x| x * x).sum();
    dot as f64 / ((na * nb) as f64).sqrt()
}

#[tokio::test]
async fn mock_embedder_selection_follows_bag_of_words_oracle() {
    let candidates = ["a cat on a mat", "a flooded street in a village"];
    let question = QuestionRecord {
        id: "q".into(),
        image_id: "img".into(),
        qtype: QuestionType::MultipleChoice,
        text: "Where is a safe place?".into(),
        options: Some(vec!["house".into(), "boat".into()]),
        meta_ground_truth: "house".into(),
    };
    let captioner =
        MockCaptioner::new(0).with_script("img", candidates.iter().map(|s| s.to_string()).collect());
    let sel = select_context(
        &question,
        &ImageData::new("img", vec![]),
        &captioner,
        &MockEmbedder::default(),
        2,
    )
    .await
    .unwrap();

    let oracle: Vec<f64> = candidates.iter().map(|c| bow_cosine(&question.text, c)).collect();
    let argmax = if oracle[1] > oracle[0] { 1 } else { 0 };
    // Both captions share only the token "a" (twice) with the question, and
    // the shorter caption has the smaller norm.
    assert_eq!(argmax, 0);
    assert_eq!(sel.chosen.text, candidates[argmax]);
}

#[tokio::test]
async fn few_shot_uses_bank_examples_per_type() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_synthetic_dataset(dir.path()).unwrap();
    let log = mock_pipeline(PromptMode::FewShotCot, 2)
        .run_dataset(&manifest, dir.path())
        .await
        .unwrap();
    for (q, entry) in manifest.questions.iter().zip(&log.entries) {
        let RunLogEntry::Answer(a) = entry else {
            panic!("{} failed", q.id)
        };
        let blocks = a.prompt.matches("\n\nContext: ").count();
        let expected = floodvqa_core::prompt::example_count(q.qtype);
        assert_eq!(blocks, expected, "{}", q.id);
    }
}

#[tokio::test]
async fn silent_generator_records_empty_answer() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_synthetic_dataset(dir.path()).unwrap();
    let pipeline = Pipeline::new(
        Arc::new(synthetic_captioner()),
        Arc::new(MockEmbedder::default()),
        Arc::new(MockGenerator::silent()),
        ExampleBank::builtin(),
        PipelineConfig::new(PromptMode::ZeroShotCot),
    )
    .unwrap();
    let log = pipeline.run_dataset(&manifest, dir.path()).await.unwrap();
    assert!(log.answers().all(|a| a.final_answer.is_empty() && a.reasoning.is_empty()));
}
