//! Trains PULASki (Hausdorff) and the cross-entropy Prob U-Net on a small
//! synthetic set and compares their test GED and Kα.

use pulaski::data::{generate_dataset, SyntheticSpec};
use pulaski::metrics::{evaluate_image, MaskSet, MetricsReport, Provenance};
use pulaski::model::{image_tensor, predict_masks, train, ModelConfig, ModelKind, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let epochs = std::env::args().nth(1).map_or(Ok(10), |s| s.parse())?;
    let ds = generate_dataset(&SyntheticSpec::default())?;
    for kind in [ModelKind::PulaskiHausdorff, ModelKind::ProbunetCe] {
        let model = ModelConfig::new(kind);
        let cfg = TrainConfig { epochs, batch_size: 2, seed: 1, ..TrainConfig::default() };
        let out = train(&ds, &model, &cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut records = vec![];
        for v in ds.test() {
            let (_, masks) = predict_masks(&model, &out.params, &image_tensor(v), 10, &mut rng)?;
            let s = MaskSet::new(masks, Provenance::Prediction)?;
            let y = MaskSet::new(v.annotations.clone(), Provenance::Annotation)?;
            records.push(evaluate_image(&v.id, &s, &y)?);
        }
        let r = MetricsReport::from_records(kind.name(), records)?;
        println!(
            "{kind:>18}: best epoch {:>3}, GED {:.4} ± {:.4}, Kα_all {:.2}",
            out.best_epoch,
            r.ged.mean,
            r.ged.sd,
            100.0 * r.kalpha_all.mean
        );
    }
    Ok(())
}
