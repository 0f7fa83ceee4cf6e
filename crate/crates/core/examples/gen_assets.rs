//! Regenerates the bundled assets under `assets/`. Run from the crate
//! root: `cargo run --example gen_assets`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

use xraykit::geometry::{save_mesh, Mesh};
use xraykit::physics::{save_samples, CalibrationSample, MaterialModel};

fn main() {
    let assets = Path::new(env!("CARGO_MANIFEST_DIR")).join("assets");
    std::fs::create_dir_all(&assets).unwrap();

    // The default initial object: 26 vertices, 48 faces, 20 mm diameter.
    let sphere = Mesh::default_sphere(20.0);
    save_mesh(&sphere, &assets.join("sphere26.obj")).unwrap();
    println!(
        "sphere26.obj: {} vertices, {} faces",
        sphere.vertices().len(),
        sphere.faces().len()
    );

    // Noisy iron calibration analogue: 8 thicknesses between 0.2 and 8 mm,
    // converter-space samples with small measurement noise.
    let iron = MaterialModel::iron();
    let mut rng = ChaCha8Rng::seed_from_u64(0x1505);
    let depths = [0.2, 0.5, 1.0, 2.0, 3.0, 4.5, 6.0, 8.0];
    let samples: Vec<CalibrationSample> = depths
        .iter()
        .map(|&d| {
            let noise = |rng: &mut ChaCha8Rng, sigma: f64| rng.random_range(-sigma..sigma);
            CalibrationSample {
                depth: d,
                color: [
                    (iron.channel_laws[0].eval(d) + noise(&mut rng, 0.0004)).clamp(0.0, 1.0),
                    (iron.channel_laws[1].eval(d) + noise(&mut rng, 0.012)).clamp(0.0, 1.0),
                    (iron.channel_laws[2].eval(d) + noise(&mut rng, 0.012)).clamp(0.0, 1.0),
                ],
            }
        })
        .collect();
    save_samples(&samples, &assets.join("iron_calibration.csv")).unwrap();
    println!("iron_calibration.csv: {} samples", samples.len());
}
