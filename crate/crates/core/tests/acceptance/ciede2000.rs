//! The 34 published CIEDE2000 pairs, both argument orders.

use crate::sharma::SHARMA_PAIRS;
use wbfusion::metrics::{delta_e_2000, LabColor};

#[test]
fn published_reference_pairs() {
    let _serial = crate::serial();
    for (i, p) in SHARMA_PAIRS.iter().enumerate() {
        let x = LabColor::new(p[0], p[1], p[2]);
        let y = LabColor::new(p[3], p[4], p[5]);
        let d = delta_e_2000(x, y);
        assert!((d - p[6]).abs() < 1e-4, "pair {}: got {d:.6}, expected {}", i + 1, p[6]);
        assert!((delta_e_2000(y, x) - d).abs() < 1e-12, "pair {} not symmetric", i + 1);
    }
}
