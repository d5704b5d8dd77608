use groundflow::plan::{
    corrupt_bbox, crop_image, iou, miou, parse_plan, serialize_plan, ActionType, NormalizedBox,
    StructuredPlan,
};
use groundflow::sim::{Image, View};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn any_box() -> impl Strategy<Value = NormalizedBox> {
    (0i64..1000, 0i64..1000, 1i64..=1000, 1i64..=1000).prop_map(|(y, x, h, w)| {
        NormalizedBox::new(y, x, (y + h).min(1000), (x + w).min(1000)).unwrap()
    })
}

fn any_plan() -> impl Strategy<Value = StructuredPlan> {
    let text = "[a-zA-Z0-9 \"\\\\\u{e9}\u{4e2d}\n\t]{0,12}[a-z]";
    let action = prop_oneof![
        Just(ActionType::Pick),
        Just(ActionType::Place),
        Just(ActionType::Click)
    ];
    (text, action, text, any_box()).prop_map(|(d, a, t, b)| StructuredPlan {
        next_subtask_description: d,
        action_type: a,
        target_object: t,
        bbox: b,
    })
}

proptest! {
    #[test]
    fn serialize_parse_is_identity(p in any_plan()) {
        let wire = serialize_plan(&p);
        prop_assert!(!wire.contains('\n'));
        let back = parse_plan(&wire).unwrap();
        prop_assert_eq!(serialize_plan(&back), wire);
        prop_assert_eq!(back, p);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in any_box(), b in any_box()) {
        let x = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(x, iou(&b, &a));
        prop_assert_eq!(iou(&a, &a), 1.0);
        prop_assert_eq!(miou(&[a, b], &[a, b]).unwrap(), 1.0);
    }

    #[test]
    fn corrupted_box_keeps_size_and_stays_in_frame(p in any_plan(), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = corrupt_bbox(&p, 1.0, &mut rng);
        prop_assert_eq!(q.bbox.height(), p.bbox.height());
        prop_assert_eq!(q.bbox.width(), p.bbox.width());
        prop_assert!(NormalizedBox::new(q.bbox.ymin as i64, q.bbox.xmin as i64, q.bbox.ymax as i64, q.bbox.xmax as i64).is_ok());
        prop_assert_eq!(&q.next_subtask_description, &p.next_subtask_description);
        let b = p.bbox;
        let room = b.ymin >= b.height() || 1000 - b.ymax >= b.height() || b.xmin >= b.width() || 1000 - b.xmax >= b.width();
        if room {
            prop_assert_eq!(iou(&q.bbox, &p.bbox), 0.0);
        }
    }

    #[test]
    fn crop_centers_lie_inside_the_source_rect(b in any_box()) {
        let img = Image::filled(96, 54, View::Global, [0.5; 3]);
        match crop_image(&img, &b, 8, 4) {
            Ok(c) => {
                prop_assert_eq!(c.patch_centers.len(), 4);
                let [x0, y0, x1, y1] = c.source_rect;
                for [x, y] in c.patch_centers {
                    prop_assert!(x >= x0 && x <= x1 && y >= y0 && y <= y1);
                }
            }
            Err(e) => prop_assert_eq!(e.code(), "degenerate_crop"),
        }
    }
}
