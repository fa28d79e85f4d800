use fgs_web::{schedule_curves, EditView, Editor, Knobs};

#[test]
fn edit_returns_images_and_metrics() {
    let editor = Editor::build(6, 3).unwrap();
    assert_eq!(editor.scene_count(), 6);
    let side = EditView::side();
    let view = editor.edit(2, &Knobs::default(), "blur", 1).unwrap();
    for img in [view.input(), view.baseline(), view.edited(), view.mask()] {
        assert_eq!(img.len(), side * side);
    }
    assert!(view.mask().contains(&1));
    assert!(view.faithfulness().is_finite() && view.baseline_faithfulness().is_finite());
    assert!(view.fg_steps() > 0);
    assert_eq!(
        view.edited(),
        editor
            .edit(2, &Knobs::default(), "blur", 1)
            .unwrap()
            .edited()
    );

    assert!(editor.edit(99, &Knobs::default(), "blur", 1).is_err());
    assert!(editor.edit(0, &Knobs::default(), "sharpen", 1).is_err());
    assert!(editor
        .edit(0, &Knobs::new(1.5, 10.0, 50.0, true, 1.0), "blur", 1)
        .is_err());
}

#[test]
fn misalignment_pairs_steps_with_cosines() {
    let editor = Editor::build(3, 0).unwrap();
    let curve = editor
        .misalignment(3, &Knobs::default(), "noise", 0)
        .unwrap();
    assert!(!curve.is_empty() && curve.len().is_multiple_of(2));
    assert_eq!(curve[0] as usize, editor.steps());
    assert!(curve.chunks(2).all(|p| (-1.0..=1.0).contains(&p[1])));
}

#[test]
fn schedule_curves_swap_with_the_tag() {
    let layout = schedule_curves("layout", 7.5, 10.0, 50.0, 20).unwrap();
    let detail = schedule_curves("detail", 7.5, 10.0, 50.0, 20).unwrap();
    assert_eq!(layout.len(), 40);
    assert!(layout.iter().all(|v| v.is_finite() && *v >= 0.0));
    assert_ne!(layout, detail);
    assert!(schedule_curves("texture", 7.5, 10.0, 50.0, 20).is_err());
}
