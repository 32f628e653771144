//! Build the global view and the local slices of a rendered page, and count
//! visual tokens at several global resolutions.

use glotran::imaging::downsample_global;
use glotran::metrics::count_visual_tokens;
use glotran::regions::{build_slices, detect_regions, Detector, GroupingParams, SidecarDetector};
use glotran::synth::{random_spec, render_scene, Lexicon};
use rand::SeedableRng;

fn main() {
    let lex = Lexicon::new(600, 1);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let scene = render_scene(&random_spec(&lex, &mut rng, 4..=4, (640, 480)));
    let mut det = SidecarDetector::new();
    det.insert(&scene.image, scene.region_boxes());

    let regions = detect_regions(&scene.image, &det as &dyn Detector).expect("known image");
    let slices = build_slices(&scene.image, &regions, &GroupingParams::default(), 448).expect("slices");
    println!("{}x{} image, {} boxes, {} slices", scene.image.width(), scene.image.height(), regions.boxes.len(), slices.len());
    for (g, crop) in &slices {
        println!("  slice {}: {}x{} (scale {:.2})", g.order_index, crop.image.width(), crop.image.height(), crop.scale);
    }
    let groups: Vec<_> = slices.into_iter().map(|(g, _)| g).collect();
    for r in [224, 448, 896] {
        let gv = downsample_global(&scene.image, r).expect("resolution");
        println!("R={r}: global {}x{}, Token^V {}", gv.image.width(), gv.image.height(), count_visual_tokens(r, &groups, 448, 16));
    }
}
