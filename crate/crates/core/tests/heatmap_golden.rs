use std::path::Path;

use nback_core::analysis::heatmap_svg;
use nback_core::grad::Matrix;

/// Each row splits its mass between the diagonal and the entry two back.
fn fixed_matrix() -> Matrix<f64> {
    let mut a = Matrix::zeros(24, 24);
    for i in 0..24 {
        if i < 2 {
            a.set(i, i, 1.0);
        } else {
            a.set(i, i, 0.25);
            a.set(i, i - 2, 0.75);
        }
    }
    a
}

#[test]
fn heatmap_matches_golden_file() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/heatmap_2back.svg");
    let svg = heatmap_svg(&fixed_matrix(), "golden 2-back").unwrap();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&golden, &svg).unwrap();
    }
    let expected = std::fs::read_to_string(&golden).expect("golden file present");
    assert_eq!(svg, expected);
}
