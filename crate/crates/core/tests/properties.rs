use floodvqa_core::backends::EmbeddingVector;
use floodvqa_core::context::cosine_similarity;
use floodvqa_core::eval::{accuracy, fleiss_kappa, RatingMatrix};
use floodvqa_core::model::{
    parse_manifest, serialize_manifest, DatasetManifest, ImageRecord, ImageSource, QuestionRecord,
    QuestionType, Split,
};
use floodvqa_core::pipeline::extract_answer;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use proptest::prelude::*;

fn exact(x: f64) -> BigRational {
    BigRational::from_float(x).unwrap()
}

/// cos = sign(dot) * sqrt(dot² / (|a|²|b|²)), with the ratio computed exactly.
fn cosine_oracle(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (BigRational::zero(), BigRational::zero(), BigRational::zero());
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (exact(*x), exact(*y));
        dot += &x * &y;
        na += &x * &x;
        nb += &y * &y;
    }
    let ratio = (&dot * &dot) / (na * nb);
    let magnitude = ratio.to_f64().unwrap().sqrt();
    if dot < BigRational::zero() {
        -magnitude
    } else {
        magnitude
    }
}

/// Agreement by enumerating ordered rater pairs per item.
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

fn vector_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..=512).prop_flat_map(|d| {
        (
            prop::collection::vec(-1e3f64..1e3, d),
            prop::collection::vec(-1e3f64..1e3, d),
        )
    })
}

fn matrix() -> impl Strategy<Value = Vec<Vec<u8>>> {
    (1usize..=10, 2usize..=6).prop_flat_map(|(big_n, n)| {
        prop::collection::vec(prop::collection::vec(0u8..=1, n), big_n)
    })
}

fn ev(v: &[f64]) -> EmbeddingVector {
    EmbeddingVector::new(v.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn cosine_matches_exact_oracle((a, b) in vector_pair()) {
        prop_assume!(a.iter().any(|x| *x != 0.0) && b.iter().any(|x| *x != 0.0));
        let got = cosine_similarity(&ev(&a), &ev(&b)).unwrap();
        prop_assert!((got - cosine_oracle(&a, &b)).abs() <= 1e-9);
    }

    #[test]
    fn cosine_is_symmetric_and_scale_invariant((a, b) in vector_pair(), k in 0.01f64..100.0) {
        prop_assume!(a.iter().any(|x| *x != 0.0) && b.iter().any(|x| *x != 0.0));
        let (va, vb) = (ev(&a), ev(&b));
        let ab = cosine_similarity(&va, &vb).unwrap();
        prop_assert!((ab - cosine_similarity(&vb, &va).unwrap()).abs() <= 1e-12);
        let scaled = cosine_similarity(&va.scaled(k).unwrap(), &vb).unwrap();
        prop_assert!((ab - scaled).abs() <= 1e-9);
        prop_assert!((cosine_similarity(&va, &va).unwrap() - 1.0).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn kappa_matches_pair_counting_oracle(cells in matrix()) {
        let m = RatingMatrix::from_cells(cells.clone()).unwrap();
        match (fleiss_kappa(&m), kappa_oracle(&cells)) {
            (Ok(got), Some(want)) => prop_assert!((got - want).abs() <= 1e-9, "{got} vs {want}"),
            (got, want) => prop_assert!(false, "kappa {got:?} vs oracle {want:?}"),
        }
    }

    #[test]
    fn kappa_is_permutation_invariant(cells in matrix(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let base = fleiss_kappa(&RatingMatrix::from_cells(cells.clone()).unwrap()).unwrap();
        let mut rows = cells.clone();
        rows.shuffle(&mut rng);
        let mut cols: Vec<usize> = (0..cells[0].len()).collect();
        cols.shuffle(&mut rng);
        let permuted: Vec<Vec<u8>> = rows
            .iter()
            .map(|r| cols.iter().map(|&c| r[c]).collect())
            .collect();
        let k = fleiss_kappa(&RatingMatrix::from_cells(permuted).unwrap()).unwrap();
        prop_assert_eq!(base, k);
    }

    #[test]
    fn unanimous_rows_give_kappa_one(rows in prop::collection::vec(0u8..=1, 2..10), n in 2usize..7) {
        prop_assume!(rows.contains(&0) && rows.contains(&1));
        let cells: Vec<Vec<u8>> = rows.iter().map(|&v| vec![v; n]).collect();
        prop_assert_eq!(fleiss_kappa(&RatingMatrix::from_cells(cells).unwrap()).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_is_exact_ratio(bits in prop::collection::vec(0u8..=1, 1..2000)) {
        let ones = bits.iter().filter(|&&b| b == 1).count();
        let want = BigRational::new(BigInt::from(ones), BigInt::from(bits.len()));
        let got = accuracy(&bits).unwrap();
        prop_assert_eq!(exact(got), exact(want.to_f64().unwrap()));
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn extract_answer_is_total(raw in any::<String>()) {
        let (answer, reasoning) = extract_answer(&raw);
        prop_assert_eq!(answer.is_empty(), raw.trim().is_empty());
        prop_assert!(reasoning.len() <= raw.len());
    }

    #[test]
    fn extract_answer_takes_last_marker(
        before in "[a-z ]{0,20}",
        first in "[a-z]{1,8}",
        last in "[a-z]{1,8}",
    ) {
        let raw = format!("{before} the answer is {first}. Actually The Answer Is {last}.");
        prop_assert_eq!(extract_answer(&raw).0, last);
    }

    #[test]
    fn manifest_round_trips_bytes(m in manifest()) {
        let bytes = serialize_manifest(&m);
        let parsed = parse_manifest(&bytes).unwrap();
        prop_assert_eq!(&parsed, &m);
        prop_assert_eq!(serialize_manifest(&parsed), bytes);
    }
}

fn manifest() -> impl Strategy<Value = DatasetManifest> {
    let image = ("[a-z0-9]{1,8}", any::<[u8; 32]>(), 0usize..4, any::<bool>()).prop_map(
        |(id, digest, src, eval)| ImageRecord {
            path: format!("{id}.jpg"),
            id,
            source: [
                ImageSource::CrisisMmd,
                ImageSource::FloodNet,
                ImageSource::EuropeanFlood2013,
                ImageSource::Other,
            ][src],
            sha256: hex::encode(digest),
            split: if eval { Split::Eval } else { Split::Dev },
        },
    );
    let question = (
        "[a-z0-9-]{1,8}",
        0usize..3,
        "\\PC{1,40}",
        prop::collection::vec("\\PC{1,10}", 2..5),
    )
        .prop_map(|(id, t, text, options)| {
            let qtype = QuestionType::ALL[t];
            let mc = qtype == QuestionType::MultipleChoice;
            QuestionRecord {
                id,
                image_id: "img".into(),
                qtype,
                text,
                meta_ground_truth: options[0].clone(),
                options: mc.then_some(options),
            }
        });
    (
        prop::collection::vec(image, 0..4),
        prop::collection::vec(question, 0..6),
    )
        .prop_map(|(images, questions)| DatasetManifest::new(images, questions))
}

#[test]
fn cosine_reference_case() {
    let c = cosine_similarity(&ev(&[1.0, 2.0, 2.0]), &ev(&[2.0, 1.0, 2.0])).unwrap();
    assert!((c - 8.0 / 9.0).abs() <= 1e-12);
}

#[test]
fn kappa_reference_cases() {
    let m = RatingMatrix::from_cells(vec![vec![1, 1, 0], vec![1, 0, 0]]).unwrap();
    assert!((fleiss_kappa(&m).unwrap() + 1.0 / 3.0).abs() <= 1e-12);
    assert_eq!(kappa_oracle(&[vec![1, 1, 0], vec![1, 0, 0]]).unwrap(), -1.0 / 3.0);
}
