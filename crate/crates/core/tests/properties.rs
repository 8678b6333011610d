use proptest::prelude::*;
use regex::Regex;

use depthkit::action_codec::{
    dequantize, format_action_text, parse_action_text, quantize, ActionGrid, ActionVector,
    CalibrationRanges, DIMS,
};
use depthkit::bench_scorer::{self, AnswerKey, KeyItem, Predictions, Task};
use depthkit::depth_api::{parse_tool_calls, CallTarget};
use depthkit::depth_codec::{
    decode_map, decode_three_channel, encode_map, encode_three_channel, encode_u24, DepthMap,
    MAX_DEPTH_MM,
};
use depthkit::object_depth::{self, compare_proximity, ObjectMask, Proximity};
use depthkit::raster;

fn depth_map() -> impl Strategy<Value = DepthMap> {
    (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
        prop::collection::vec(prop_oneof![Just(0u32), 1u32..=MAX_DEPTH_MM], h * w)
            .prop_map(move |v| DepthMap::new(h, w, v).unwrap())
    })
}

proptest! {
    #[test]
    fn codec_round_trips_and_saturates(d in 0i64..400_000) {
        let enc = encode_three_channel(d).unwrap();
        let back = decode_three_channel(enc.value).unwrap();
        prop_assert_eq!(i64::from(back), d.min(i64::from(MAX_DEPTH_MM)));
        prop_assert_eq!(enc.saturated, d > i64::from(MAX_DEPTH_MM));
        let u = encode_u24(d).unwrap();
        prop_assert_eq!(i64::from(u.value), d.min(i64::from(MAX_DEPTH_MM)));
    }

    #[test]
    fn codec_is_monotone_in_channel_order(a in 0i64..=131_071, b in 0i64..=131_071) {
        let (ea, eb) = (encode_three_channel(a).unwrap().value, encode_three_channel(b).unwrap().value);
        prop_assert_eq!(a.cmp(&b), ea.cmp(&eb));
    }

    #[test]
    fn maps_survive_every_container(map in depth_map()) {
        let enc = encode_map(&map);
        prop_assert_eq!(&decode_map(&enc).unwrap(), &map);
        let bytes = raster::sbd1_to_bytes(&map);
        prop_assert_eq!(&raster::sbd1_from_bytes(&bytes).unwrap(), &map);
        let png = raster::encoded_to_png_bytes(&enc).unwrap();
        prop_assert!(png.starts_with(b"\x89PNG"));
    }

    #[test]
    fn descriptor_is_ordered_and_observed(map in depth_map(), seed in any::<u64>()) {
        let members: Vec<bool> = (0..map.values().len()).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
        let mask = ObjectMask::new(map.height(), map.width(), members).unwrap();
        match object_depth::describe_object(&map, &mask) {
            Ok(d) => {
                prop_assert!(d.min_mm <= d.max_mm);
                let observed: Vec<u32> = mask
                    .iter_members()
                    .map(|(x, y)| map.get(x, y).unwrap())
                    .filter(|&d| d != 0)
                    .collect();
                let lo = *observed.iter().min().unwrap();
                let hi = *observed.iter().max().unwrap();
                prop_assert!(lo <= d.mean_mm && d.mean_mm <= hi);
                prop_assert!(observed.contains(&d.min_mm));
                prop_assert!(observed.contains(&d.max_mm));
                prop_assert!(observed.contains(&d.center_mm));
            }
            Err(_) => prop_assert!(mask
                .iter_members()
                .all(|(x, y)| map.get(x, y) == Some(0))),
        }
    }

    #[test]
    fn proximity_is_antisymmetric(a in 1u32..=MAX_DEPTH_MM, b in 1u32..=MAX_DEPTH_MM, t in 0u32..50) {
        let ab = compare_proximity(a, b, t).unwrap();
        let ba = compare_proximity(b, a, t).unwrap();
        prop_assert_eq!(ab.flip(), ba);
        prop_assert_eq!(ab == Proximity::Tie, a.abs_diff(b) <= t);
    }

    #[test]
    fn action_text_round_trips(steps in prop::array::uniform7(0u8..=100)) {
        let grid = ActionGrid::from_steps(steps).unwrap();
        let text = format_action_text(&grid);
        prop_assert_eq!(parse_action_text(&format!("move: {text} done")).unwrap(), grid);
        prop_assert_eq!(ActionGrid::from_values(grid.values()).unwrap(), grid);
    }

    #[test]
    fn quantize_error_is_half_a_step(v in prop::array::uniform7(0.0f64..=1.0)) {
        let cal = CalibrationRanges::default();
        let ranges = cal.ranges();
        let raw: [f64; DIMS] = std::array::from_fn(|i| ranges[i][0] + v[i] * (ranges[i][1] - ranges[i][0]));
        let q = quantize(&ActionVector::from_array(raw), &cal).unwrap();
        prop_assert!(!q.any_clamped());
        let back = dequantize(&q.grid, &cal).unwrap().to_array();
        for i in 0..DIMS {
            let bound = (ranges[i][1] - ranges[i][0]) / 200.0;
            prop_assert!((back[i] - raw[i]).abs() <= bound * (1.0 + 1e-9));
        }
    }

    #[test]
    fn out_of_range_actions_clamp(v in -10.0f64..10.0) {
        let cal = CalibrationRanges::default();
        let q = quantize(&ActionVector::from_array([v; DIMS]), &cal).unwrap();
        prop_assert_eq!(q.clamped[0], !(-0.05..=0.05).contains(&v));
        prop_assert!(q.grid.steps().iter().all(|&s| s <= 100));
    }
}

fn fragment() -> impl Strategy<Value = String> {
    let ws = prop::sample::select(vec!["", " ", "  ", "\t", "\n"]);
    let num = prop_oneof![
        (0u32..2000).prop_map(|n| n.to_string()),
        Just("4294967296".to_string()),
        Just("-3".to_string()),
        Just("x".to_string()),
    ];
    prop_oneof![
        (ws.clone(), num.clone(), ws.clone(), num.clone())
            .prop_map(|(a, x, b, y)| format!("Depth({a}{x}{b},{a}{y}{b})")),
        (ws, num.clone(), num.clone(), num.clone(), num)
            .prop_map(|(s, a, b, c, d)| format!("Depth({a},{s}{b},{c},{s}{d})")),
        Just("Depth(1,2,3)".to_string()),
        Just("depth(4,5)".to_string()),
        Just("Depth(".to_string()),
        Just(" the cup ".to_string()),
        Just(")".to_string()),
        "[a-z ,()0-9]{0,12}",
    ]
}

proptest! {
    #[test]
    fn parser_matches_regex_oracle(parts in prop::collection::vec(fragment(), 0..8)) {
        let text = parts.concat();
        let w = "[ \t\n\r\x0C]*";
        let re = Regex::new(&format!(
            r"Depth\({w}([0-9]+){w},{w}([0-9]+){w}(?:,{w}([0-9]+){w},{w}([0-9]+){w})?\)"
        ))
        .unwrap();
        let want: Vec<((usize, usize), CallTarget)> = re
            .captures_iter(&text)
            .filter_map(|c| {
                let n = |i: usize| c.get(i).map(|m| m.as_str().parse::<u32>());
                let span = (c.get(0).unwrap().start(), c.get(0).unwrap().end());
                match (n(1), n(2), n(3), n(4)) {
                    (Some(Ok(x)), Some(Ok(y)), None, None) => Some((span, CallTarget::Point { x, y })),
                    (Some(Ok(x1)), Some(Ok(y1)), Some(Ok(x2)), Some(Ok(y2))) if x1 <= x2 && y1 <= y2 => {
                        Some((span, CallTarget::Region { x1, y1, x2, y2 }))
                    }
                    _ => None,
                }
            })
            .collect();
        let got: Vec<_> = parse_tool_calls(&text).into_iter().map(|c| (c.span, c.target)).collect();
        prop_assert_eq!(got, want, "text: {:?}", text);
    }
}

fn choice_key(task: Task, truths: &[bool]) -> AnswerKey {
    let items = truths
        .iter()
        .enumerate()
        .map(|(i, &yes)| KeyItem {
            id: format!("i{i}"),
            task,
            answer: bench_scorer::Answer::Choice(if yes { "yes" } else { "no" }.into()),
            options: Some(vec!["yes".into(), "no".into()]),
            pair_id: Some(format!("p{}", i / 2)),
        })
        .collect();
    AnswerKey { items }
}

proptest! {
    #[test]
    fn pair_score_never_exceeds_item_accuracy(
        correct in prop::collection::vec(any::<bool>(), 1..40).prop_map(|mut v| { if v.len() % 2 == 1 { v.push(true); } v }),
        w in 0.0f64..=100.0,
    ) {
        let truths: Vec<bool> = (0..correct.len()).map(|i| i % 2 == 0).collect();
        let mut preds = Predictions::new();
        for (i, (&t, &ok)) in truths.iter().zip(&correct).enumerate() {
            let ans = if t == ok { "yes" } else { "no" };
            preds.insert(format!("i{i}"), bench_scorer::Answer::Choice(ans.into()));
        }
        let mcq = bench_scorer::score_mcq(&preds, &choice_key(Task::Mcq, &truths)).score;
        let pair = bench_scorer::score_pairs(&preds, &choice_key(Task::Pair, &truths)).score;
        prop_assert!(pair <= mcq + 1e-9);
        let bonus = bench_scorer::score_with_bonus(&preds, &choice_key(Task::Reaching, &truths), Task::Reaching, w)
            .unwrap()
            .score;
        prop_assert!(pair - 1e-9 <= bonus && bonus <= mcq + 1e-9);
        prop_assert!((0.0..=100.0).contains(&bonus));
    }

    #[test]
    fn depth_accuracy_is_bounded(gt in 1.0f64..200_000.0, est in -1e6f64..1e6) {
        let a = bench_scorer::depth_accuracy(gt, est);
        prop_assert!((0.0..=100.0).contains(&a));
        prop_assert_eq!(bench_scorer::depth_accuracy(gt, gt), 100.0);
    }
}
