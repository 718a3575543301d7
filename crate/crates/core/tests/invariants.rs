//! Property tests for the data, target, codec, head and metric invariants.

use proptest::prelude::*;

use repgen::eval::{boundary_f1, depth_similarity, Tally};
use repgen::heads::{fm_euler, fm_interpolate, fm_target, NoiseSchedule};
use repgen::image::RgbImage;
use repgen::scene::{generate_scene, render, QaCategory, Scene, SceneSpec};
use repgen::tensor::Mat;
use repgen::text::{Vocabulary, SPECIALS};

fn spec_strategy() -> impl Strategy<Value = SceneSpec> {
    (prop::sample::select(vec![16usize, 24, 32]), 1usize..=3).prop_map(|(size, n)| SceneSpec { min_objects: Some(1), ..SceneSpec::with_size(size, n) })
}

/// Answers a stored question from the object list only.
fn brute_answer(scene: &Scene, question: &str, category: QaCategory) -> String {
    let find = |label: &str| scene.objects.iter().find(|o| o.label() == label).expect("named object exists");
    match category {
        QaCategory::Spatial => {
            let body = question.strip_prefix("Which is closer, the ").unwrap().strip_suffix('?').unwrap();
            let (a, b) = body.split_once(" or the ").unwrap();
            let (a, b) = (find(a), find(b));
            if a.depth < b.depth { a.label() } else { b.label() }
        }
        QaCategory::Presence => {
            let label = question.strip_prefix("Is there a ").unwrap().strip_suffix('?').unwrap();
            if scene.objects.iter().any(|o| o.label() == label) { "yes" } else { "no" }.to_string()
        }
        QaCategory::Attribute => {
            let shape = question.strip_prefix("What color is the ").unwrap().strip_suffix('?').unwrap();
            let hits: Vec<_> = scene.objects.iter().filter(|o| o.shape.name() == shape).collect();
            assert_eq!(hits.len(), 1, "attribute question about a non-unique shape");
            hits[0].color.name().to_string()
        }
    }
}

fn gray_image(w: usize, h: usize, plane: &[u8]) -> RgbImage {
    RgbImage::new(w, h, plane.iter().flat_map(|&v| [v, v, v]).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scenes_are_deterministic(spec in spec_strategy(), seed in any::<u64>()) {
        let a = render(&generate_scene(&spec, seed).unwrap());
        let b = render(&generate_scene(&spec, seed).unwrap());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn occluded_pixels_carry_the_nearest_depth(spec in spec_strategy(), seed in any::<u64>()) {
        let scene = generate_scene(&spec, seed).unwrap();
        let r = render(&scene);
        let n = spec.image_size;
        for y in 0..n {
            for x in 0..n {
                let covering: Vec<f64> = scene.objects.iter().filter(|o| o.covers(x as i64, y as i64)).map(|o| o.depth).collect();
                if covering.len() >= 2 {
                    let nearest = covering.iter().cloned().fold(f64::INFINITY, f64::min);
                    prop_assert_eq!(r.depth_raw[y * n + x], nearest);
                }
            }
        }
    }

    #[test]
    fn stored_answers_match_a_brute_force_answerer(spec in spec_strategy(), seed in any::<u64>()) {
        let scene = generate_scene(&spec, seed).unwrap();
        for qa in render(&scene).qa {
            prop_assert_eq!(brute_answer(&scene, &qa.question, qa.category), qa.answer);
        }
    }

    #[test]
    fn vocabulary_round_trips_word_sequences(picks in prop::collection::vec(any::<prop::sample::Index>(), 0..20)) {
        let v = Vocabulary::builtin();
        let words: Vec<&str> = v.tokens().iter().map(String::as_str).filter(|t| !SPECIALS.contains(t)).collect();
        let text = picks.iter().map(|i| words[i.index(words.len())]).collect::<Vec<_>>().join(" ");
        prop_assert_eq!(v.decode(&v.encode(&text).unwrap()), text);
    }

    #[test]
    fn alpha_bar_is_the_cumulative_product(betas in prop::collection::vec(1e-5f64..0.5, 1..200)) {
        let s = NoiseSchedule::from_betas(betas.clone()).unwrap();
        let mut prod = 1.0;
        for (i, b) in betas.iter().enumerate() {
            prod *= 1.0 - b;
            prop_assert!((s.alpha_bar(i + 1) - prod).abs() <= 1e-12);
        }
    }

    #[test]
    fn flow_path_endpoints_and_euler_invariance(
        x0 in prop::collection::vec(-3.0f64..3.0, 12),
        x1 in prop::collection::vec(-3.0f64..3.0, 12),
        steps in 1usize..200,
    ) {
        let (a, b) = (Mat::from_vec(3, 4, x0), Mat::from_vec(3, 4, x1));
        prop_assert_eq!(&fm_interpolate(&a, &b, 0.0).unwrap(), &a);
        prop_assert_eq!(&fm_interpolate(&a, &b, 1.0).unwrap(), &b);
        let v = fm_target(&a, &b);
        let out = fm_euler(|_, _| v.clone(), a.clone(), steps).unwrap();
        prop_assert!(out.max_abs_diff(&a.add(&v)) <= 1e-12);
    }

    #[test]
    fn depth_similarity_is_symmetric_and_bounded(
        (w, h, p, q) in (1usize..12, 1usize..12).prop_flat_map(|(w, h)| {
            (Just(w), Just(h), prop::collection::vec(any::<u8>(), w * h), prop::collection::vec(any::<u8>(), w * h))
        })
    ) {
        let (a, b) = (gray_image(w, h, &p), gray_image(w, h, &q));
        let s = depth_similarity(&a, &b).unwrap();
        prop_assert_eq!(s, depth_similarity(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn boundary_f1_is_symmetric(
        (w, h, p, q) in (1usize..12, 1usize..12).prop_flat_map(|(w, h)| {
            (Just(w), Just(h), prop::collection::vec(any::<bool>(), w * h), prop::collection::vec(any::<bool>(), w * h))
        }),
        tol in 0usize..3,
    ) {
        let f = boundary_f1(&p, &q, w, h, tol).unwrap();
        prop_assert!((f - boundary_f1(&q, &p, w, h, tol).unwrap()).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&f));
    }

    #[test]
    fn accuracies_are_plain_ratios(correct in 0usize..1000, extra in 0usize..1000) {
        let t = Tally { correct, total: correct + extra };
        let want = if t.total == 0 { None } else { Some(correct as f64 / t.total as f64) };
        prop_assert_eq!(t.accuracy(), want);
    }
}
