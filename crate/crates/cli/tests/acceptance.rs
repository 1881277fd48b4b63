//! Acceptance suite. Every criterion runs at its stated tolerance and gets
//! one PASS/FAIL line; the process exits non-zero if any fails.
//!
//! Run with `cargo test -p floodvqa-cli --test acceptance`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use floodvqa_annotate::service::{serve, ServiceState};
use floodvqa_annotate::{load_campaign, Metrics};
use floodvqa_core::backends::{EmbeddingVector, ImageData};
use floodvqa_core::builder::{build, BuildConfig};
use floodvqa_core::context::{candidate_count, cosine_similarity};
use floodvqa_core::eval::{
    accuracy, aggregate_plausibility, fleiss_kappa, parse_ratings_jsonl, report, Aggregation,
    KappaGate, RatingMatrix,
};
use floodvqa_core::model::{parse_manifest, serialize_manifest, validate_manifest, QuestionType, Rule};
use floodvqa_core::pipeline::RunLog;
use floodvqa_core::prompt::{
    example_count, render_prompt, ExampleBank, PromptMode, BLOCK_SEPARATOR, COT_TRIGGER,
};
use floodvqa_core::synthetic::{
    fake_image_bytes, fixture_build_backends, mock_pipeline, safe_place_question,
    write_fixture_corpus, write_synthetic_dataset, MUTATIONS, SAFE_PLACE_ANSWER, SAFE_PLACE_CAPTION,
    SAFE_PLACE_QUESTION_ID,
};
use floodvqa_core::DatasetManifest;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::json;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

// Negated so that a NaN comparison fails the criterion.
macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .unwrap()
}

// Prompt fidelity

fn golden(mode: PromptMode) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/golden")
        .join(format!("{}.txt", mode.as_str()));
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn prompt_fidelity() -> Outcome {
    let started = Instant::now();
    let q = safe_place_question();
    let bank = ExampleBank::builtin();
    let render = |mode: PromptMode, q: &floodvqa_core::QuestionRecord| {
        let examples = match mode {
            PromptMode::FewShotCot => bank.select(q.qtype, example_count(q.qtype)).unwrap(),
            _ => vec![],
        };
        render_prompt(mode, SAFE_PLACE_CAPTION, q, &examples).unwrap().text
    };
    for mode in PromptMode::ALL {
        ensure!(render(mode, &q) == golden(mode), "{mode} rendering differs from its golden file");
    }
    ensure!(COT_TRIGGER == "Let's think step by step:", "trigger is {COT_TRIGGER:?}");
    for mode in [PromptMode::ZeroShotCot, PromptMode::FewShotCot] {
        ensure!(
            render(mode, &q).ends_with("Let's think step by step:"),
            "{mode} does not end with the trigger"
        );
    }
    for qtype in QuestionType::ALL {
        let mut q = safe_place_question();
        q.qtype = qtype;
        if qtype != QuestionType::MultipleChoice {
            q.options = None;
        }
        let few = render(PromptMode::FewShotCot, &q);
        let tail = few.rsplit(BLOCK_SEPARATOR).next().unwrap();
        ensure!(tail == render(PromptMode::ZeroShotCot, &q), "prefix law fails for {qtype}");
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!("3 goldens match, suffix and prefix laws hold, {elapsed:.1?}"))
}

fn configuration_fidelity() -> Outcome {
    use QuestionType::*;
    let got: Vec<(usize, usize)> = [MultipleChoice, FreeForm, YesNo]
        .map(|t| (candidate_count(t), example_count(t)))
        .to_vec();
    ensure!(got == [(5, 3), (50, 1), (50, 1)], "got {got:?}");
    Ok("candidates 5/50/50, examples 3/1/1".into())
}

// Cosine similarity

fn exact(x: f64) -> BigRational {
    BigRational::from_float(x).unwrap()
}

fn cosine_oracle(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (BigRational::zero(), BigRational::zero(), BigRational::zero());
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (exact(*x), exact(*y));
        dot += &x * &y;
        na += &x * &x;
        nb += &y * &y;
    }
    let magnitude = ((&dot * &dot) / (na * nb)).to_f64().unwrap().sqrt();
    if dot < BigRational::zero() {
        -magnitude
    } else {
        magnitude
    }
}

fn cosine() -> Outcome {
    let mut rng = StdRng::seed_from_u64(11);
    let mut worst = 0f64;
    for i in 0..1000 {
        let dim = rng.gen_range(2..=512);
        let a: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1e3..1e3)).collect();
        let b: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1e3..1e3)).collect();
        let got = cosine_similarity(
            &EmbeddingVector::new(a.clone()).unwrap(),
            &EmbeddingVector::new(b.clone()).unwrap(),
        )
        .map_err(|e| format!("pair {i}: {e}"))?;
        let delta = (got - cosine_oracle(&a, &b)).abs();
        worst = worst.max(delta);
        ensure!(delta <= 1e-9, "pair {i} (dim {dim}): |delta| = {delta:e}");
    }
    let c = cosine_similarity(
        &EmbeddingVector::new(vec![1.0, 2.0, 2.0]).unwrap(),
        &EmbeddingVector::new(vec![2.0, 1.0, 2.0]).unwrap(),
    )
    .unwrap();
    ensure!((c - 8.0 / 9.0).abs() <= 1e-9, "[1,2,2].[2,1,2] gave {c}");
    Ok(format!("1000 pairs, max |delta| {worst:.2e}; 8/9 case {c:.15}"))
}

// Fleiss' kappa

fn kappa_oracle(cells: &[Vec<u8>]) -> Option<f64> {
    let big_n = cells.len() as i64;
    let n = cells[0].len() as i64;
    let mut p_bar = BigRational::zero();
    let mut ones = 0i64;
    for row in cells {
        let mut agree = 0i64;
        for j in 0..row.len() {
            for k in 0..row.len() {
                if j != k && row[j] == row[k] {
                    agree += 1;
                }
            }
        }
        p_bar += BigRational::new(BigInt::from(agree), BigInt::from(n * (n - 1)));
        ones += row.iter().filter(|&&c| c == 1).count() as i64;
    }
    p_bar /= BigRational::from_integer(BigInt::from(big_n));
    let total = BigInt::from(big_n * n);
    let p1 = BigRational::new(BigInt::from(ones), total.clone());
    let p0 = BigRational::new(BigInt::from(big_n * n - ones), total);
    let pe = &p1 * &p1 + &p0 * &p0;
    let one = BigRational::from_integer(BigInt::from(1));
    if pe == one {
        return (p_bar == one).then_some(1.0);
    }
    ((p_bar - &pe) / (one - pe)).to_f64()
}

fn kappa_of(cells: &[Vec<u8>]) -> Option<f64> {
    fleiss_kappa(&RatingMatrix::from_cells(cells.to_vec()).unwrap()).ok()
}

fn kappa() -> Outcome {
    let mut rng = StdRng::seed_from_u64(12);
    let mut worst = 0f64;
    for i in 0..500 {
        let big_n = rng.gen_range(1..=10);
        let n = rng.gen_range(2..=6);
        let cells: Vec<Vec<u8>> = (0..big_n)
            .map(|_| (0..n).map(|_| rng.gen_range(0..=1)).collect())
            .collect();
        match (kappa_of(&cells), kappa_oracle(&cells)) {
            (Some(got), Some(want)) => {
                let delta = (got - want).abs();
                worst = worst.max(delta);
                ensure!(delta <= 1e-9, "matrix {i} {cells:?}: {got} vs {want}");
            }
            (None, None) => {}
            (got, want) => return Err(format!("matrix {i} {cells:?}: {got:?} vs {want:?}")),
        }
    }
    for i in 0..100 {
        let big_n = 1 + i % 10;
        let n = 2 + i % 5;
        let cells: Vec<Vec<u8>> = (0..big_n).map(|_| vec![rng.gen_range(0..=1); n]).collect();
        ensure!(kappa_of(&cells) == Some(1.0), "perfect agreement {cells:?} gave {:?}", kappa_of(&cells));
    }
    let k = kappa_of(&[vec![1, 1, 0], vec![1, 0, 0]]).ok_or("[1,1,0]/[1,0,0] undefined")?;
    ensure!((k + 1.0 / 3.0).abs() <= 1e-12, "[1,1,0]/[1,0,0] gave {k}");
    let gate = KappaGate::default();
    ensure!(gate.threshold == 0.70 && gate.passes(0.72), "gate rejects 0.72");
    Ok(format!("500 matrices, max |delta| {worst:.2e}; 100 perfect; -1/3 case; gate passes 0.72"))
}

// Accuracy

fn accuracy_metric() -> Outcome {
    let mut rng = StdRng::seed_from_u64(13);
    for i in 0..1000 {
        let len = rng.gen_range(1..=500);
        let scores: Vec<u8> = (0..len).map(|_| rng.gen_range(0..=1)).collect();
        let ones = scores.iter().filter(|&&s| s == 1).count();
        let want = BigRational::new(BigInt::from(ones), BigInt::from(len)).to_f64().unwrap();
        let got = accuracy(&scores).unwrap();
        ensure!(got == want, "list {i}: {got} vs {ones}/{len}");
    }

    let dir = tempfile::tempdir().unwrap();
    let manifest = write_synthetic_dataset(dir.path()).unwrap();
    let log = runtime()
        .block_on(mock_pipeline(PromptMode::FewShotCot, 4).run_dataset(&manifest, dir.path()))
        .unwrap();
    let mut worst = 0f64;
    for i in 0..1000 {
        let obs: Vec<(String, u8)> = (0..rng.gen_range(1..=60))
            .map(|_| {
                let q = &manifest.questions[rng.gen_range(0..manifest.questions.len())];
                (q.id.clone(), rng.gen_range(0..=1))
            })
            .collect();
        let r = report(&log, &obs, &manifest).unwrap();
        let delta = (r.overall - r.weighted_mean()).abs();
        worst = worst.max(delta);
        ensure!(delta <= 1e-12, "report {i}: overall {} vs weighted {}", r.overall, r.weighted_mean());
        let ones = obs.iter().filter(|o| o.1 == 1).count();
        ensure!(r.overall == ones as f64 / obs.len() as f64, "report {i}: overall is not ones/total");
    }
    Ok(format!("1000 exact lists; 1000 reports, max |overall - weighted| {worst:.1e}"))
}

// End-to-end determinism

fn end_to_end() -> Outcome {
    let started = Instant::now();
    let rt = runtime();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_synthetic_dataset(dir.path()).unwrap();
    ensure!(manifest.questions.len() == 12, "manifest has {} questions", manifest.questions.len());
    for mode in PromptMode::ALL {
        let run = |limit| {
            rt.block_on(mock_pipeline(mode, limit).run_dataset(&manifest, dir.path()))
                .unwrap()
                .to_jsonl()
        };
        let (a, b, c) = (run(1), run(1), run(4));
        ensure!(a == b, "{mode}: two runs differ");
        ensure!(a == c, "{mode}: concurrency 1 and 4 differ");
        let log = RunLog::from_jsonl(&a).unwrap();
        ensure!(log.failures().count() == 0, "{mode}: failures in run log");
        let safe = log
            .answers()
            .find(|r| r.question_id == SAFE_PLACE_QUESTION_ID)
            .ok_or("safe-place question not answered")?;
        ensure!(
            safe.final_answer == SAFE_PLACE_ANSWER,
            "{mode}: safe-place answer {:?}",
            safe.final_answer
        );
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!("3 modes x (2 runs, limits 1 and 4) byte-identical, \"{SAFE_PLACE_ANSWER}\", {elapsed:.1?}"))
}

// Dataset builder

fn builder_soundness() -> Outcome {
    let rt = runtime();
    let dir = tempfile::tempdir().unwrap();
    let captioner = write_fixture_corpus(dir.path()).unwrap();
    let backends = fixture_build_backends(dir.path(), captioner).unwrap();
    let (manifest, report) = rt
        .block_on(build(dir.path(), &backends, &BuildConfig::default()))
        .map_err(|e| e.to_string())?;
    ensure!(!manifest.questions.is_empty(), "no questions emitted");
    for q in &manifest.questions {
        let image = ImageData::new(q.image_id.clone(), fake_image_bytes(&q.image_id));
        let g = rt.block_on(backends.grounder.ground(&image, &q.meta_ground_truth)).unwrap();
        ensure!(g.present, "{} ({}) does not re-ground", q.id, q.meta_ground_truth);
    }
    ensure!(report.conservation_holds(), "conservation fails: {report:?}");
    let violations = validate_manifest(&manifest);
    ensure!(violations.is_empty(), "violations: {violations:?}");
    let bytes = serialize_manifest(&manifest);
    let again = serialize_manifest(&parse_manifest(&bytes).map_err(|e| e.to_string())?);
    ensure!(bytes == again, "manifest does not round-trip");
    Ok(format!(
        "{} images, {} extracted, {} grounded, {} emitted; all re-ground; 0 violations; round-trip exact",
        report.n_images_in, report.n_entities_extracted, report.n_entities_grounded, report.n_questions_emitted
    ))
}

// Manifest validation

fn manifest_validation() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let clean = write_synthetic_dataset(dir.path()).unwrap();
    ensure!(validate_manifest(&clean).is_empty(), "clean manifest has violations");
    for rule in [Rule::MissingImageRef, Rule::MetaNotInOptions, Rule::DeclaredQuestionCount] {
        ensure!(MUTATIONS.iter().any(|m| m.rule == rule), "no mutation for {rule:?}");
    }
    let mut rng = StdRng::seed_from_u64(14);
    let mut cases: Vec<(usize, usize)> = MUTATIONS
        .iter()
        .enumerate()
        .flat_map(|(k, _)| (0..clean.questions.len()).map(move |i| (k, i)))
        .collect();
    cases.extend((0..300).map(|_| (rng.gen_range(0..MUTATIONS.len()), rng.gen_range(0..100))));
    let mut missed = Vec::new();
    for &(k, index) in &cases {
        let mutation = &MUTATIONS[k];
        let mut m = clean.clone();
        let id = (mutation.apply)(&mut m, index);
        if !validate_manifest(&m)
            .iter()
            .any(|v| v.rule == mutation.rule && v.record_id == id)
        {
            missed.push(format!("{} at {index}", mutation.name));
        }
    }
    ensure!(missed.is_empty(), "missed {} of {}: {missed:?}", missed.len(), cases.len());
    Ok(format!("{} seeded violations over {} classes, 100% detected", cases.len(), MUTATIONS.len()))
}

// Annotation service

struct Campaign {
    dir: tempfile::TempDir,
    run_log: RunLog,
    manifest: DatasetManifest,
}

impl Campaign {
    async fn new(n_questions: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let full = write_synthetic_dataset(dir.path()).unwrap();
        let manifest = DatasetManifest::new(
            full.images,
            full.questions.into_iter().take(n_questions).collect(),
        );
        let run_log = mock_pipeline(PromptMode::ZeroShotCot, 4)
            .run_dataset(&manifest, dir.path())
            .await
            .unwrap();
        Self { dir, run_log, manifest }
    }

    fn log_path(&self) -> std::path::PathBuf {
        self.dir.path().join("ratings.jsonl")
    }

    async fn start(&self, raters: &[String]) -> Server {
        let campaign = load_campaign(&self.run_log, &self.manifest, raters).unwrap();
        let state = ServiceState::open(
            campaign,
            self.run_log.clone(),
            self.manifest.clone(),
            self.dir.path().to_path_buf(),
            &self.log_path(),
        )
        .unwrap();
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let handle = tokio::spawn(async move {
            serve(listener, Arc::new(state), async {
                let _ = rx.await;
            })
            .await
            .unwrap()
        });
        Server {
            base,
            http: reqwest::Client::new(),
            stop: tx,
            handle,
        }
    }
}

struct Server {
    base: String,
    http: reqwest::Client,
    stop: tokio::sync::oneshot::Sender<()>,
    handle: tokio::task::JoinHandle<()>,
}

impl Server {
    async fn rate(&self, evaluator: &str, task: &str, score: u8) -> u16 {
        self.http
            .post(format!("{}/api/ratings", self.base))
            .json(&json!({"evaluator_id": evaluator, "task_id": task, "score": score}))
            .send()
            .await
            .unwrap()
            .status()
            .as_u16()
    }

    async fn metrics(&self) -> Metrics {
        self.http
            .get(format!("{}/api/metrics", self.base))
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap()
    }

    async fn shutdown(self) {
        self.stop.send(()).unwrap();
        self.handle.await.unwrap();
    }
}

fn raters(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("rater-{i}")).collect()
}

async fn service_scripted() -> Outcome {
    let c = Campaign::new(4).await;
    let panel = raters(3);
    let server = c.start(&panel).await;
    let script = [[1, 1, 0], [1, 0, 0], [0, 1, 1], [1, 1, 1]];
    for (ri, r) in panel.iter().enumerate() {
        for (qi, row) in script.iter().enumerate() {
            let status = server.rate(r, &format!("q{qi}-r{ri}"), row[ri]).await;
            ensure!(status == 200, "rating {qi}/{ri} got {status}");
        }
    }
    let m = server.metrics().await;
    server.shutdown().await;

    let ratings = parse_ratings_jsonl(&std::fs::read_to_string(c.log_path()).unwrap()).unwrap();
    let matrix = RatingMatrix::from_ratings(&ratings, None).unwrap();
    let kappa = fleiss_kappa(&matrix).unwrap();
    let obs = aggregate_plausibility(&matrix, Aggregation::Majority).unwrap();
    let acc = report(&c.run_log, &obs, &c.manifest).unwrap();
    ensure!(m.kappa.value == Some(kappa), "kappa {:?} vs {kappa}", m.kappa.value);
    ensure!(m.accuracy.value.as_ref() == Some(&acc), "accuracy {:?} vs {acc:?}", m.accuracy.value);
    ensure!(m.progress.rated == 12, "progress {:?}", m.progress);
    Ok(format!("kappa {kappa:.6}, accuracy {:.4}", acc.overall))
}

async fn service_restart() -> Outcome {
    let c = Campaign::new(4).await;
    let panel = raters(3);
    let server = c.start(&panel).await;
    let mut acknowledged = 0;
    for (ri, r) in panel.iter().enumerate() {
        for qi in 0..=ri {
            if server.rate(r, &format!("q{qi}-r{ri}"), 1).await == 200 {
                acknowledged += 1;
            }
        }
    }
    server.shutdown().await;
    let server = c.start(&panel).await;
    let m = server.metrics().await;
    let dup = server.rate("rater-0", "q0-r0", 0).await;
    server.shutdown().await;
    ensure!(m.progress.rated == acknowledged, "{} of {acknowledged} survived", m.progress.rated);
    ensure!(dup == 409, "resubmission after restart got {dup}");
    Ok(format!("{acknowledged} acknowledged, {acknowledged} after restart"))
}

async fn service_concurrent() -> Outcome {
    let c = Campaign::new(6).await;
    let panel = raters(20);
    let server = Arc::new(c.start(&panel).await);
    let jobs: Vec<_> = panel
        .iter()
        .enumerate()
        .map(|(ri, r)| {
            let (server, r) = (server.clone(), r.clone());
            tokio::spawn(async move {
                let mut ok = 0;
                for qi in 0..6 {
                    if server.rate(&r, &format!("q{qi}-r{ri}"), ((qi + ri) % 2) as u8).await == 200 {
                        ok += 1;
                    }
                }
                ok
            })
        })
        .collect();
    let mut acknowledged = 0;
    for j in jobs {
        acknowledged += j.await.unwrap();
    }
    let m = server.metrics().await;
    let logged = parse_ratings_jsonl(&std::fs::read_to_string(c.log_path()).unwrap())
        .unwrap()
        .len();
    ensure!(acknowledged == 120, "{acknowledged} of 120 acknowledged");
    ensure!(logged == 120 && m.progress.rated == 120, "log {logged}, service {}", m.progress.rated);
    Ok("20 raters x 6 tasks, 120 acknowledged, 120 logged".into())
}

fn annotation_service() -> Outcome {
    let rt = runtime();
    let a = rt.block_on(service_scripted())?;
    let b = rt.block_on(service_restart())?;
    let c = rt.block_on(service_concurrent())?;
    Ok(format!("3x4 metrics equal eval ({a}); {b}; {c}"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("prompt fidelity", prompt_fidelity),
        ("configuration fidelity", configuration_fidelity),
        ("cosine similarity", cosine),
        ("fleiss kappa", kappa),
        ("accuracy metric", accuracy_metric),
        ("end-to-end determinism", end_to_end),
        ("dataset builder soundness", builder_soundness),
        ("manifest validation", manifest_validation),
        ("annotation service", annotation_service),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
