//! Otsu thresholding of a probability map and the rate of occurrence over
//! a set of binarized samples.

use pulaski::seg::{otsu_binarize, otsu_threshold, rate_of_occurrence, ProbabilityMap, DEFAULT_BINS};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let maps: Vec<ProbabilityMap> = (0..4)
        .map(|k| {
            let v = (0..16)
                .map(|i| {
                    let d = (i as f64 - 7.5 - k as f64 * 0.5).abs();
                    1.0 / (1.0 + (2.0 * (d - 3.0)).exp())
                })
                .collect();
            ProbabilityMap::new(vec![16], v).unwrap()
        })
        .collect();
    println!("Otsu threshold of the first map: {:.4}", otsu_threshold(&maps[0], DEFAULT_BINS)?);
    let masks = maps.iter().map(otsu_binarize).collect::<Result<Vec<_>, _>>()?;
    let roo = rate_of_occurrence(&masks)?;
    let bar: String = roo.values().iter().map(|&v| [' ', '.', ':', '+', '#'][(v * 4.0).round() as usize]).collect();
    println!("RoO |{bar}|");
    Ok(())
}
