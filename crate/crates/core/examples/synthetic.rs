//! The synthetic multi-rater tube dataset and its inter-rater agreement.

use pulaski::data::{generate_dataset, SyntheticSpec};
use pulaski::metrics::{krippendorff_alpha, AlphaRegion, MaskSet, Provenance};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = generate_dataset(&SyntheticSpec::default())?;
    println!(
        "{} images, split {}:{}:{}",
        ds.volumes.len(),
        ds.splits.train.len(),
        ds.splits.val.len(),
        ds.splits.test.len()
    );
    let v = &ds.volumes[0];
    let [h, w] = [v.shape[0], v.shape[1]];
    for y in 0..h {
        let row: String = (0..w)
            .map(|x| {
                let votes: u8 = v.annotations.iter().map(|m| m.values()[y * w + x]).sum();
                [' ', '.', ':', '-', '=', '#'][votes as usize]
            })
            .collect();
        println!("|{row}|");
    }
    let set = MaskSet::new(v.annotations.clone(), Provenance::Annotation)?;
    println!("Kα_all {:.2}  Kα_roi {:.2}", krippendorff_alpha(&set, AlphaRegion::All)?.percent(), krippendorff_alpha(&set, AlphaRegion::Roi)?.percent());
    Ok(())
}
