mod common;

use proptest::prelude::*;
use specdistill::disw::{build_disw, project_box, BBox, ObjectAnnotation};

use common::{exact_disw, naive_cells};

const IMAGE: usize = 64;

fn annotation() -> impl Strategy<Value = ObjectAnnotation> {
    // Quarter-pixel lattice keeps every box edge exactly representable.
    (1usize..=128, 1usize..=128, 0usize..=252, 0usize..=252, 0usize..3).prop_map(|(w, h, x, y, class)| {
        let (w, h) = (w as f64 / 4.0, h as f64 / 4.0);
        let x1 = (x as f64 / 4.0).min(IMAGE as f64 - w);
        let y1 = (y as f64 / 4.0).min(IMAGE as f64 - h);
        ObjectAnnotation::new(class, BBox::new(x1, y1, x1 + w, y1 + h))
    })
}

fn grid() -> impl Strategy<Value = (usize, usize)> {
    prop::sample::select(vec![(4, 4), (8, 8), (16, 16), (32, 32), (8, 16), (16, 4)])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn weights_match_exact_rationals(anns in prop::collection::vec(annotation(), 0..10), grid in grid()) {
        let map = build_disw(&anns, (IMAGE, IMAGE), grid).unwrap();
        let exact = exact_disw(&anns, (IMAGE, IMAGE), grid);
        prop_assert_eq!(exact.projected, anns.len());
        // Σ excess = N exactly in rational arithmetic.
        prop_assert_eq!(exact.numerators.iter().sum::<u128>(), anns.len() as u128 * exact.denominator);
        let d = exact.denominator as f64;
        let mut excess = 0.0;
        for (w, n) in map.weights.data().iter().zip(&exact.numerators) {
            prop_assert!(*w >= 1.0);
            prop_assert!((w - 1.0 - *n as f64 / d).abs() <= 1e-12);
            excess += w - 1.0;
        }
        prop_assert!((excess - anns.len() as f64).abs() <= 1e-12 * anns.len().max(1) as f64);
    }

    #[test]
    fn projection_matches_cellwise_overlap(ann in annotation(), grid in grid()) {
        let cells: Vec<usize> = project_box(&ann, (IMAGE, IMAGE), grid)
            .unwrap()
            .into_iter()
            .map(|(r, c)| r * grid.1 + c)
            .collect();
        prop_assert!(!cells.is_empty());
        prop_assert_eq!(cells, naive_cells(&ann.bbox, (IMAGE, IMAGE), grid));
    }

    #[test]
    fn duplicates_scale_excess_linearly(ann in annotation(), k in 1usize..6, grid in grid()) {
        let one = build_disw(&[ann], (IMAGE, IMAGE), grid).unwrap();
        let many = build_disw(&vec![ann; k], (IMAGE, IMAGE), grid).unwrap();
        for (a, b) in one.weights.data().iter().zip(many.weights.data()) {
            prop_assert!(((b - 1.0) - k as f64 * (a - 1.0)).abs() <= 1e-12);
        }
    }

    #[test]
    fn smaller_objects_weigh_more_per_cell(x in 0usize..48, y in 0usize..48, small in 1usize..8, extra in 9usize..16) {
        let at = |s: usize| ObjectAnnotation::new(0, BBox::new(x as f64, y as f64, (x + s) as f64, (y + s) as f64));
        let grid = (16, 16);
        let peak = |s: usize| build_disw(&[at(s)], (IMAGE, IMAGE), grid).unwrap().weights.max_abs();
        let (cells_small, cells_big) = (
            project_box(&at(small), (IMAGE, IMAGE), grid).unwrap().len(),
            project_box(&at(extra), (IMAGE, IMAGE), grid).unwrap().len(),
        );
        prop_assume!(cells_small < cells_big);
        prop_assert!(peak(small) > peak(extra));
    }
}

#[test]
fn empty_annotations_give_all_ones() {
    let map = build_disw(&[], (IMAGE, IMAGE), (8, 8)).unwrap();
    assert!(map.weights.data().iter().all(|&w| w == 1.0));
}

#[test]
fn shared_cell_accumulates() {
    // On a 4×4 grid over 64 px each box spans two cells and they share (0,1).
    let a = ObjectAnnotation::new(0, BBox::new(0.0, 0.0, 32.0, 16.0));
    let b = ObjectAnnotation::new(1, BBox::new(16.0, 0.0, 48.0, 16.0));
    let map = build_disw(&[a, b], (IMAGE, IMAGE), (4, 4)).unwrap();
    assert_eq!(&map.weights.data()[..4], &[1.5, 2.0, 1.5, 1.0]);
    assert!(map.weights.data()[4..].iter().all(|&w| w == 1.0));
}
