//! Fixtures shared by the criterion benches in `benches/`.

use mdf3d_core::datasets::Frame;
use mdf3d_core::encoder::EncoderConfig;
use mdf3d_core::train::experiment::{preset_spec, Domain, DomainPreset};
use mdf3d_core::train::{Model, ModelConfig, Sample};
use mdf3d_core::{Box3D, Range3D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Desk-scale two-domain model (C = 8, 24×24 BEV grid) and one batch per domain.
pub fn desk_model(batch: usize) -> (Model, Vec<Sample>) {
    let a = Domain::synthetic(preset_spec(DomainPreset::A), batch, 0).expect("preset a");
    let b = Domain::synthetic(preset_spec(DomainPreset::B), batch, 0).expect("preset b");
    let range = Range3D::new([-9.6, 9.6], [-9.6, 9.6], [-3.0, 3.0]).expect("range");
    let mut cfg = ModelConfig::new(vec![a.spec.clone(), b.spec.clone()], range, 0.8);
    cfg.encoder = EncoderConfig {
        pillar_channels: 8,
        channels: 8,
    };
    let model = Model::new(cfg, 0).expect("model");
    let mut samples = Vec::new();
    for (id, d) in [a, b].iter().enumerate() {
        for f in &d.train {
            let f = Frame { dataset_id: id, ..f.clone() };
            samples.push(model.prepare_with(&f, &d.spec).expect("prepare"));
        }
    }
    (model, samples)
}

/// Random overlapping car-sized box pairs.
pub fn box_pairs(n: usize, seed: u64) -> Vec<(Box3D, Box3D)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let one = |rng: &mut ChaCha8Rng| {
        Box3D::new(
            [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.3..0.3)],
            [rng.gen_range(3.5..5.0), rng.gen_range(1.6..2.1), rng.gen_range(1.4..1.8)],
            rng.gen_range(-3.1..3.1),
            0,
        )
        .expect("box")
    };
    (0..n).map(|_| (one(&mut rng), one(&mut rng))).collect()
}
