//! GED, Krippendorff's α and the signed-rank test on toy mask sets.

use pulaski::metrics::{ged_squared, krippendorff_alpha, wilcoxon_signed_rank, AlphaRegion, MaskSet, Provenance};
use pulaski::seg::BinaryMask;

fn masks(rows: &[[u8; 8]], p: Provenance) -> MaskSet {
    MaskSet::new(rows.iter().map(|r| BinaryMask::new(vec![8], r.to_vec()).unwrap()).collect(), p).unwrap()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let raters = masks(
        &[[0, 1, 1, 1, 0, 0, 0, 0], [0, 0, 1, 1, 1, 0, 0, 0], [0, 1, 1, 1, 1, 0, 0, 0]],
        Provenance::Annotation,
    );
    let diverse = masks(
        &[[0, 1, 1, 1, 0, 0, 0, 0], [0, 0, 1, 1, 1, 1, 0, 0], [0, 1, 1, 0, 0, 0, 0, 0]],
        Provenance::Prediction,
    );
    let collapsed = masks(&[[0, 0, 1, 1, 0, 0, 0, 0]; 3], Provenance::Prediction);

    for (name, s) in [("diverse", &diverse), ("collapsed", &collapsed)] {
        let k = krippendorff_alpha(s, AlphaRegion::All)?;
        println!("{name:>9}: GED² {:.4}  Kα_all {:.2}", ged_squared(s, &raters)?, k.percent());
    }
    println!("annotations Kα_all {:.2}", krippendorff_alpha(&raters, AlphaRegion::All)?.percent());

    let a = [0.31, 0.28, 0.40, 0.35, 0.22, 0.30, 0.27];
    let b = [0.25, 0.20, 0.33, 0.36, 0.15, 0.21, 0.24];
    let w = wilcoxon_signed_rank(&a, &b)?;
    println!("signed-rank: W+ = {}, n = {}, p = {:.4} (exact: {})", w.w_plus, w.n, w.p_value, w.exact);
    Ok(())
}
