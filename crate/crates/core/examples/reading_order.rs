//! Order a handful of word boxes and merge them into slices.

use glotran::regions::{merge_regions, order_regions, BoundingBox, GroupingParams, RegionSet};

fn main() {
    // two lines of a paragraph, then a caption further down
    let boxes = vec![
        BoundingBox::new(70.0, 10.0, 120.0, 30.0),
        BoundingBox::new(10.0, 12.0, 60.0, 30.0),
        BoundingBox::new(10.0, 36.0, 90.0, 56.0),
        BoundingBox::new(10.0, 200.0, 80.0, 220.0),
    ];
    let rs = RegionSet::new(boxes, (200, 240));
    let ordered = order_regions(&rs);
    for (i, b) in ordered.boxes.iter().enumerate() {
        println!("{i}: ({:.0},{:.0})-({:.0},{:.0})", b.x_min, b.y_min, b.x_max, b.y_max);
    }
    for g in merge_regions(&ordered, &GroupingParams::default()) {
        let u = g.union_box;
        println!(
            "slice {} <- boxes {:?}, union ({:.0},{:.0})-({:.0},{:.0})",
            g.order_index, g.member_indices, u.x_min, u.y_min, u.x_max, u.y_max
        );
    }
}
