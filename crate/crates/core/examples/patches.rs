//! Overlapping 3D patch extraction and overlap-averaged stitching.

use pulaski::data::{extract_patches, patch_positions, stitch_overlap_average, Patch, PatchSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let shape = [32, 32, 32];
    let volume: Vec<f64> = (0..32 * 32 * 32).map(|i| ((i % 97) as f64 * 0.1).sin()).collect();
    let spec = PatchSpec { extent: vec![16, 16, 16], stride: vec![8, 8, 8] };
    println!("{} patch origins", patch_positions(&shape, &spec)?.len());

    // A per-patch "prediction": here the patch values doubled.
    let predicted: Vec<Patch<f64>> = extract_patches(&volume, &shape, &spec)?
        .into_iter()
        .map(|p| Patch { data: p.data.iter().map(|v| 2.0 * v).collect(), ..p })
        .collect();
    let stitched = stitch_overlap_average(&predicted, &shape)?;
    let worst = stitched.iter().zip(&volume).map(|(s, v)| (s - 2.0 * v).abs()).fold(0.0, f64::max);
    println!("max deviation from the whole-volume prediction: {worst:e}");
    Ok(())
}
