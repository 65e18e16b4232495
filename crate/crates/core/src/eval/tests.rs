use super::*;
use proptest::prelude::*;

fn w(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn corners(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::from_corners(x1, y1, x2, y2).unwrap()
}

fn gt(sub: BBox, obj: BBox, words: &str, important: bool) -> GtRelation {
    GtRelation {
        sub_box: sub,
        obj_box: obj,
        words: w(words),
        important,
    }
}

fn pred(sub: BBox, obj: BBox, words: &str, score: f64) -> PredictedRelation {
    PredictedRelation {
        sub_box: sub,
        obj_box: obj,
        words: w(words),
        score,
    }
}

fn image(id: &str, rels: Vec<GtRelation>) -> GtImage {
    GtImage {
        image_id: id.into(),
        caption: w("a man"),
        relations: rels,
    }
}

fn predicted(id: &str, rels: Vec<PredictedRelation>) -> Prediction {
    Prediction {
        image_id: id.into(),
        caption: w("a man"),
        relations: rels,
    }
}

#[test]
fn meteor_examples() {
    assert_eq!(meteor_lite(&w("a b c"), &w("d e f")), 0.0);
    let same = meteor_lite(&w("a b c"), &w("a b c"));
    assert!((same - (1.0 - 0.5 / 27.0)).abs() < 1e-12);
    assert!((same - 0.98148).abs() < 1e-5);
    assert!((meteor_lite(&w("a b"), &w("b a")) - 0.5).abs() < 1e-12);
    assert_eq!(meteor_lite::<String>(&[], &w("a")), 0.0);
    // one match, P = 1/6, R = 1/4
    let low = meteor_lite(&w("man x y z u v"), &w("man on the horse"));
    assert!(low > 0.10 && low <= 0.15, "{low}");
}

#[test]
fn meteor_prefers_fewest_chunks() {
    // "the cat" aligned as one run, not as two separate words
    let (m, c) = align(&w("the cat the"), &w("x the cat"));
    assert_eq!((m, c), (2, 1));
}

#[test]
fn bleu_examples() {
    let corpus = vec![w("a b c d e"), w("x y z w")];
    assert!((bleu(&corpus, &corpus, 1) - 1.0).abs() < 1e-12);
    assert!((bleu(&corpus, &corpus, 4) - 1.0).abs() < 1e-12);
    assert_eq!(bleu(&[w("a b")], &[w("c d")], 1), 0.0);
    let v = bleu(&[w("a a b")], &[w("a b c")], 1);
    assert!((v - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn map_trivial_cases() {
    let (a, b) = (
        corners(0.0, 0.0, 10.0, 10.0),
        corners(20.0, 0.0, 30.0, 10.0),
    );
    let gts = vec![image(
        "i",
        vec![
            gt(a, b, "man on horse", true),
            gt(b, a, "horse under man", false),
        ],
    )];
    let perfect = vec![predicted(
        "i",
        vec![
            pred(a, b, "man on horse", 0.9),
            pred(b, a, "horse under man", 0.8),
        ],
    )];
    assert!((relational_map(&perfect, &gts).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(relational_map(&[], &gts).unwrap(), 0.0);
    assert!(matches!(
        relational_map(&perfect, &[image("i", vec![])]),
        Err(Error::EmptyGroundTruth)
    ));
}

#[test]
fn map_hand_enumerated_grid() {
    let (a, b) = (
        corners(0.0, 0.0, 10.0, 10.0),
        corners(20.0, 0.0, 30.0, 10.0),
    );
    let (c, d) = (
        corners(0.0, 40.0, 10.0, 50.0),
        corners(20.0, 40.0, 30.0, 50.0),
    );
    let shift = |x: BBox| BBox::new(x.cx + 5.0, x.cy, x.w, x.h).unwrap();
    // shifted boxes overlap their originals with IoU 1/3
    assert!((box_iou(&c, &shift(c)) - 1.0 / 3.0).abs() < 1e-12);
    let gts = vec![image(
        "i",
        vec![
            gt(a, b, "man on horse", true),
            gt(c, d, "dog near car", true),
        ],
    )];
    let preds = vec![predicted(
        "i",
        vec![
            pred(a, b, "man on horse", 0.9),
            pred(shift(c), shift(d), "dog near car", 0.8),
            pred(
                corners(100.0, 100.0, 110.0, 110.0),
                corners(200.0, 200.0, 210.0, 210.0),
                "cat",
                0.7,
            ),
        ],
    )];
    // IoU thresholds 0.2 and 0.3: both found at ranks 1 and 2, AP = 1.
    // 0.4, 0.5, 0.6: only rank 1, AP = 1/2. Every language threshold passes.
    let want = (2.0 * 1.0 + 3.0 * 0.5) / 5.0;
    assert!((relational_map(&preds, &gts).unwrap() - want).abs() < 1e-12);
}

#[test]
fn map_demoting_a_true_positive_never_helps() {
    let (a, b) = (
        corners(0.0, 0.0, 10.0, 10.0),
        corners(20.0, 0.0, 30.0, 10.0),
    );
    let far = corners(300.0, 300.0, 310.0, 310.0);
    let gts = vec![image("i", vec![gt(a, b, "man on horse", true)])];
    let good = vec![predicted(
        "i",
        vec![pred(a, b, "man on horse", 0.9), pred(far, far, "x", 0.5)],
    )];
    let worse = vec![predicted(
        "i",
        vec![pred(a, b, "man on horse", 0.4), pred(far, far, "x", 0.5)],
    )];
    assert!(relational_map(&worse, &gts).unwrap() <= relational_map(&good, &gts).unwrap());
}

#[test]
fn recall_examples() {
    let (a, b) = (
        corners(0.0, 0.0, 10.0, 10.0),
        corners(20.0, 0.0, 30.0, 10.0),
    );
    let far = corners(300.0, 300.0, 310.0, 310.0);
    let gts = vec![image(
        "i",
        vec![
            gt(a, b, "man on the horse", true),
            gt(b, a, "horse under man", false),
        ],
    )];
    let exact = vec![predicted("i", vec![pred(a, b, "man on the horse", 1.0)])];
    assert_eq!(important_recall_at_k(&exact, &gts, 20, true).unwrap(), 1.0);
    assert_eq!(important_recall_at_k(&exact, &gts, 20, false).unwrap(), 1.0);
    let nowhere = vec![predicted(
        "i",
        vec![pred(far, far, "man on the horse", 1.0)],
    )];
    assert_eq!(
        important_recall_at_k(&nowhere, &gts, 20, true).unwrap(),
        0.0
    );
    assert_eq!(
        important_recall_at_k(&nowhere, &gts, 20, false).unwrap(),
        0.0
    );
    // METEOR about 0.12: recalled at thresholds 0, 0.05 and 0.10 only
    let weak = vec![predicted("i", vec![pred(a, b, "man x y z u v", 1.0)])];
    assert!((important_recall_at_k(&weak, &gts, 20, true).unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(important_recall_at_k(&weak, &gts, 20, false).unwrap(), 1.0);
    assert!(matches!(
        important_recall_at_k(&weak, &gts, 0, true),
        Err(Error::Usage(_))
    ));
    // outside the top K
    let buried = vec![predicted(
        "i",
        vec![
            pred(far, far, "x", 0.9),
            pred(a, b, "man on the horse", 0.1),
        ],
    )];
    assert_eq!(important_recall_at_k(&buried, &gts, 1, false).unwrap(), 0.0);
    assert_eq!(important_recall_at_k(&buried, &gts, 2, false).unwrap(), 1.0);
}

#[test]
fn image_level_recall_examples() {
    let (a, b) = (
        corners(0.0, 0.0, 10.0, 10.0),
        corners(20.0, 0.0, 30.0, 10.0),
    );
    let far = corners(300.0, 300.0, 310.0, 310.0);
    let gts = vec![image(
        "i",
        vec![
            gt(a, b, "man on the horse", true),
            gt(b, a, "horse under man", false),
        ],
    )];
    let all = vec![predicted(
        "i",
        vec![
            pred(far, far, "man on the horse", 0.2),
            pred(far, far, "horse under man", 0.1),
        ],
    )];
    assert_eq!(image_level_recall(&all, &gts), 1.0);
    assert_eq!(image_level_recall(&[], &gts), 0.0);
    let partial = vec![predicted("i", vec![pred(far, far, "the x y z u v", 0.2)])];
    // only the first GT is hit, at 3 of 6 thresholds
    assert!((image_level_recall(&partial, &gts) - 0.25).abs() < 1e-12);
}

#[test]
fn report_json_is_scaled_and_rounded() {
    let (a, b) = (
        corners(0.0, 0.0, 10.0, 10.0),
        corners(20.0, 0.0, 30.0, 10.0),
    );
    let gts = vec![image("i", vec![gt(a, b, "man on horse", true)])];
    let preds = vec![predicted("i", vec![pred(a, b, "man on horse", 1.0)])];
    let rep = evaluate(&preds, &gts).unwrap();
    assert_eq!(rep.recall_ns_at_100, 1.0);
    let six = [
        rep.recall_at_20,
        rep.recall_at_50,
        rep.recall_at_100,
        rep.recall_ns_at_20,
        rep.recall_ns_at_50,
        rep.recall_ns_at_100,
    ];
    assert!((rep.mean_recall - six.iter().sum::<f64>() / 6.0).abs() < 1e-15);
    let j = rep.to_table_json();
    assert_eq!(j["recall_ns_at_100"], 100.0);
    assert_eq!(j["bleu1"], 100.0);
}

#[test]
fn prediction_lines_round_trip() {
    let p = predicted(
        "img_1",
        vec![pred(
            BBox::new(1.5, 2.25, 3.0, 4.0).unwrap(),
            BBox::new(0.1, 0.2, 0.3, 0.4).unwrap(),
            "man on horse",
            0.123456789,
        )],
    );
    let s = prediction_to_json(&p).unwrap();
    assert_eq!(prediction_from_json(&s, 1).unwrap(), p);
    let bad = r#"{"image_id":"z","caption":"a","relations":[{"sub_box":[0,0,-1,1],"obj_box":[0,0,1,1],"words":"a","score":1}]}"#;
    assert!(matches!(
        prediction_from_json(bad, 3),
        Err(Error::Schema { .. })
    ));
    assert!(matches!(
        prediction_from_json("{}", 4),
        Err(Error::Schema { .. })
    ));
}

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0f64..20.0, 0.0f64..20.0, 1.0f64..10.0, 1.0f64..10.0)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, w, h).unwrap())
}

fn arb_words() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop::sample::select(vec!["a", "man", "on", "horse", "dog"]),
        1..4,
    )
    .prop_map(|v| v.join(" "))
}

proptest! {
    #[test]
    fn metrics_are_bounded_and_permutation_invariant(
        gt_rels in prop::collection::vec((arb_box(), arb_box(), arb_words(), any::<bool>()), 1..6),
        pred_rels in prop::collection::vec((arb_box(), arb_box(), arb_words(), 0.0f64..1.0), 0..6),
    ) {
        let half = gt_rels.len() / 2;
        let mk_gt = |rs: &[(BBox, BBox, String, bool)]| rs.iter().map(|(a, b, s, i)| gt(*a, *b, s, *i)).collect::<Vec<_>>();
        let mk_pred = |rs: &[(BBox, BBox, String, f64)]| rs.iter().map(|(a, b, s, sc)| pred(*a, *b, s, *sc)).collect::<Vec<_>>();
        let gts = vec![image("x", mk_gt(&gt_rels[..half])), image("y", mk_gt(&gt_rels[half..]))];
        let ph = pred_rels.len() / 2;
        let preds = vec![predicted("x", mk_pred(&pred_rels[..ph])), predicted("y", mk_pred(&pred_rels[ph..]))];
        let rev_g: Vec<GtImage> = gts.iter().rev().cloned().collect();
        let rev_p: Vec<Prediction> = preds.iter().rev().cloned().collect();
        let a = evaluate(&preds, &gts).unwrap();
        let b = evaluate(&rev_p, &rev_g).unwrap();
        prop_assert!((a.map - b.map).abs() < 1e-12);
        prop_assert!((a.recall_at_20 - b.recall_at_20).abs() < 1e-12);
        prop_assert!((a.img_level_recall - b.img_level_recall).abs() < 1e-12);
        for v in [a.map, a.img_level_recall, a.recall_at_20, a.recall_ns_at_20, a.mean_recall, a.bleu1, a.bleu4, a.meteor] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        for k in [1, 2, 20] {
            let ns = important_recall_at_k(&preds, &gts, k, false).unwrap();
            for theta in LANGUAGE_THRESHOLDS {
                // per-threshold component never exceeds the spatial-only recall
                let single: f64 = {
                    let mut total = 0.0;
                    let mut images = 0;
                    for g in &gts {
                        let imp: Vec<&GtRelation> = g.relations.iter().filter(|r| r.important).collect();
                        if imp.is_empty() { continue; }
                        images += 1;
                        let p = preds.iter().find(|p| p.image_id == g.image_id).unwrap();
                        let top: Vec<usize> = sorted_indices(&p.relations).into_iter().take(k).collect();
                        let hit = imp.iter().filter(|r| top.iter().any(|&i| {
                            let q = &p.relations[i];
                            localization(q, r) > RECALL_IOU && meteor_lite(&q.words, &r.words) > theta
                        })).count();
                        total += hit as f64 / imp.len() as f64;
                    }
                    if images == 0 { 0.0 } else { total / images as f64 }
                };
                prop_assert!(single <= ns + 1e-12);
            }
        }
    }

    #[test]
    fn meteor_is_bounded(a in arb_words(), b in arb_words()) {
        let v = meteor_lite(&w(&a), &w(&b));
        prop_assert!((0.0..=1.0).contains(&v));
        if a == b {
            prop_assert!(v > 0.0);
        }
    }
}
