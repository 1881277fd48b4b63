//! Small deterministic datasets and mock wiring for tests, demos and the
//! acceptance suite.

use std::io;
use std::path::Path;
use std::sync::Arc;

use crate::backends::mock::{
    MockCaptioner, MockEmbedder, MockGenerator, MockGrounder, MockQuestionGenerator, ScriptRule,
    LABELS_SIDECAR_SUFFIX,
};
use crate::builder::{BuildBackends, LexiconTagger};
use crate::model::{
    sha256_hex, DatasetManifest, ImageRecord, ImageSource, QuestionRecord, QuestionType, Rule,
    Split,
};
use crate::pipeline::{Pipeline, PipelineConfig};
use crate::prompt::{ExampleBank, PromptMode};

pub const SAFE_PLACE_CAPTION: &str =
    "a flooded street in a village with houses and water in the flooded street.";
pub const SAFE_PLACE_REASONING: &str =
    "the plane is not mentioned, the house is mentioned but the house is flooded.";
pub const SAFE_PLACE_ANSWER: &str = "no safe place";
pub const SAFE_PLACE_QUESTION_ID: &str = "q01";
pub const SAFE_PLACE_IMAGE_ID: &str = "img01";

/// The flooded-village multiple-choice question.
pub fn safe_place_question() -> QuestionRecord {
    QuestionRecord {
        id: SAFE_PLACE_QUESTION_ID.into(),
        image_id: SAFE_PLACE_IMAGE_ID.into(),
        qtype: QuestionType::MultipleChoice,
        text: "where is a safe place?".into(),
        options: Some(
            ["house", "plane", "boat", "no safe place"]
                .map(String::from)
                .to_vec(),
        ),
        meta_ground_truth: SAFE_PLACE_ANSWER.into(),
    }
}

pub fn safe_place_rule() -> ScriptRule {
    ScriptRule {
        keyword: "safe place".into(),
        answer: SAFE_PLACE_ANSWER.into(),
        reasoning: Some(SAFE_PLACE_REASONING.into()),
    }
}

/// Stand-in image content; the mocks never decode it.
pub fn fake_image_bytes(id: &str) -> Vec<u8> {
    format!("FAKE-IMAGE:{id}\n").into_bytes()
}

fn write_image(dir: &Path, file: &str, id: &str) -> io::Result<ImageRecord> {
    let bytes = fake_image_bytes(id);
    std::fs::write(dir.join(file), &bytes)?;
    Ok(ImageRecord {
        id: id.into(),
        path: file.into(),
        source: ImageSource::Other,
        sha256: sha256_hex(&bytes),
        split: Split::Eval,
    })
}

fn q(
    id: &str,
    image: &str,
    qtype: QuestionType,
    text: &str,
    options: Option<&[&str]>,
    meta: &str,
) -> QuestionRecord {
    QuestionRecord {
        id: id.into(),
        image_id: image.into(),
        qtype,
        text: text.into(),
        options: options.map(|o| o.iter().map(|s| s.to_string()).collect()),
        meta_ground_truth: meta.into(),
    }
}

/// Writes four images into `root` and returns a manifest of twelve
/// questions over them, four of each type. `q01` is the safe-place
/// question.
pub fn write_synthetic_dataset(root: &Path) -> io::Result<DatasetManifest> {
    use QuestionType::*;
    let images = (1..=4)
        .map(|i| write_image(root, &format!("img{i:02}.jpg"), &format!("img{i:02}")))
        .collect::<io::Result<Vec<_>>>()?;
    let questions = vec![
        safe_place_question(),
        q("q02", "img01", FreeForm, "what is covering the street?", None, "water"),
        q("q03", "img01", YesNo, "Is there any house in the area?", None, "yes"),
        q(
            "q04",
            "img02",
            MultipleChoice,
            "what is surrounding the house?",
            Some(&["trees", "flood water", "snow", "sand"]),
            "flood water",
        ),
        q("q05", "img02", FreeForm, "what color is the water?", None, "brown"),
        q("q06", "img02", YesNo, "Is there any person in the water?", None, "no"),
        q(
            "q07",
            "img03",
            MultipleChoice,
            "where are the people?",
            Some(&["on a roof", "in a car", "in a boat", "on a bridge"]),
            "on a roof",
        ),
        q("q08", "img03", FreeForm, "how many people can be seen?", None, "three"),
        q("q09", "img03", YesNo, "Is there any elderly person in the area?", None, "no"),
        q(
            "q10",
            "img04",
            MultipleChoice,
            "how can people leave the area?",
            Some(&["by car", "by boat", "on foot", "by train"]),
            "by boat",
        ),
        q("q11", "img04", FreeForm, "what is the boat carrying?", None, "people"),
        q("q12", "img04", YesNo, "Is the road flooded?", None, "yes"),
    ];
    Ok(DatasetManifest::new(images, questions))
}

/// Mock captioner used with [`write_synthetic_dataset`]: `img01` always
/// sees the flooded village, the others draw from the template bank.
pub fn synthetic_captioner() -> MockCaptioner {
    MockCaptioner::new(7).with_script(SAFE_PLACE_IMAGE_ID, vec![SAFE_PLACE_CAPTION.into()])
}

pub fn synthetic_generator() -> MockGenerator {
    MockGenerator::new(vec![safe_place_rule()])
}

/// A pipeline over the synthetic mocks and the builtin example bank.
pub fn mock_pipeline(mode: PromptMode, concurrency_limit: usize) -> Pipeline {
    Pipeline::new(
        Arc::new(synthetic_captioner()),
        Arc::new(MockEmbedder::default()),
        Arc::new(synthetic_generator()),
        ExampleBank::builtin(),
        PipelineConfig::new(mode).with_concurrency(concurrency_limit),
    )
    .expect("default pipeline config is valid")
}

/// One image of the builder fixture corpus.
pub struct FixtureImage {
    pub file: &'static str,
    pub caption: &'static str,
    pub labels: &'static [&'static str],
}

pub const FIXTURE_CORPUS: &[FixtureImage] = &[
    FixtureImage {
        file: "f01-village.jpg",
        caption: "a plane flying over a flooded house with water all around",
        labels: &["house", "water"],
    },
    FixtureImage {
        file: "f02-rescue.png",
        caption: "an elderly person waiting on a roof next to a rescue boat",
        labels: &["elderly person", "roof", "rescue boat"],
    },
    FixtureImage {
        file: "f03-haze.jpeg",
        caption: "nothing but grey haze",
        labels: &[],
    },
    FixtureImage {
        file: "f04-road.JPG",
        caption: "cars stuck on a road near a bridge and a river",
        labels: &["cars", "river", "tree"],
    },
];

/// Writes the fixture images and their label sidecars into `dir` and
/// returns a captioner scripted with each image's caption.
pub fn write_fixture_corpus(dir: &Path) -> io::Result<MockCaptioner> {
    let mut captioner = MockCaptioner::new(0);
    for img in FIXTURE_CORPUS {
        let stem = Path::new(img.file)
            .file_stem()
            .and_then(|s| s.to_str())
            .expect("fixture names are utf-8");
        std::fs::write(dir.join(img.file), fake_image_bytes(stem))?;
        let sidecar = serde_json::to_vec(img.labels).expect("labels serialize");
        std::fs::write(dir.join(format!("{stem}{LABELS_SIDECAR_SUFFIX}")), sidecar)?;
        captioner = captioner.with_script(stem, vec![img.caption.into()]);
    }
    Ok(captioner)
}

/// Builder backends for a corpus written by [`write_fixture_corpus`].
pub fn fixture_build_backends(dir: &Path, captioner: MockCaptioner) -> io::Result<BuildBackends> {
    Ok(BuildBackends {
        captioner: Arc::new(captioner),
        grounder: Arc::new(MockGrounder::default().load_sidecars(dir)?),
        question_generator: Arc::new(MockQuestionGenerator::default()),
        tagger: Arc::new(LexiconTagger::builtin()),
    })
}

/// A way to break a valid manifest, and the rule that must catch it.
pub struct Mutation {
    pub name: &'static str,
    pub rule: Rule,
    /// Corrupts the question (or image) at `index` and returns the id the
    /// violation should name.
    pub apply: fn(&mut DatasetManifest, usize) -> String,
}

fn qid(m: &DatasetManifest, i: usize) -> String {
    m.questions[i].id.clone()
}

fn mc_index(m: &DatasetManifest, i: usize) -> usize {
    let mcs: Vec<usize> = (0..m.questions.len())
        .filter(|&k| m.questions[k].qtype == QuestionType::MultipleChoice)
        .collect();
    mcs[i % mcs.len()]
}

fn non_mc_index(m: &DatasetManifest, i: usize) -> usize {
    let others: Vec<usize> = (0..m.questions.len())
        .filter(|&k| m.questions[k].qtype != QuestionType::MultipleChoice)
        .collect();
    others[i % others.len()]
}

pub const MUTATIONS: &[Mutation] = &[
    Mutation {
        name: "dangling image reference",
        rule: Rule::MissingImageRef,
        apply: |m, i| {
            let i = i % m.questions.len();
            m.questions[i].image_id = format!("ghost-{i}");
            qid(m, i)
        },
    },
    Mutation {
        name: "meta ground truth outside options",
        rule: Rule::MetaNotInOptions,
        apply: |m, i| {
            let i = mc_index(m, i);
            m.questions[i].meta_ground_truth = "a tent".into();
            qid(m, i)
        },
    },
    Mutation {
        name: "multiple choice without options",
        rule: Rule::OptionsPresence,
        apply: |m, i| {
            let i = mc_index(m, i);
            m.questions[i].options = None;
            qid(m, i)
        },
    },
    Mutation {
        name: "options on a non multiple choice question",
        rule: Rule::OptionsPresence,
        apply: |m, i| {
            let i = non_mc_index(m, i);
            m.questions[i].options = Some(vec!["yes".into(), "no".into()]);
            qid(m, i)
        },
    },
    Mutation {
        name: "declared question count too high",
        rule: Rule::DeclaredQuestionCount,
        apply: |m, i| {
            m.declared_counts.n_questions += 1 + i;
            "manifest".into()
        },
    },
    Mutation {
        name: "declared image count too low",
        rule: Rule::DeclaredImageCount,
        apply: |m, _| {
            m.declared_counts.n_images -= 1;
            "manifest".into()
        },
    },
    Mutation {
        name: "duplicate question id",
        rule: Rule::DuplicateQuestionId,
        apply: |m, i| {
            let i = 1 + i % (m.questions.len() - 1);
            m.questions[i].id = m.questions[0].id.clone();
            qid(m, i)
        },
    },
    Mutation {
        name: "empty question text",
        rule: Rule::EmptyQuestionText,
        apply: |m, i| {
            let i = i % m.questions.len();
            m.questions[i].text = "   ".into();
            qid(m, i)
        },
    },
    Mutation {
        name: "malformed digest",
        rule: Rule::MalformedSha256,
        apply: |m, i| {
            let i = i % m.images.len();
            m.images[i].sha256 = m.images[i].sha256.to_uppercase();
            m.images[i].id.clone()
        },
    },
];
