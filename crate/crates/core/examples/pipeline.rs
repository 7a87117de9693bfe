//! The `gen → train → sample → eval` command sequence, driven through the
//! library with a short epoch budget.

use pulaski::cli::{cmd_eval, cmd_gen, cmd_sample, cmd_train, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::temp_dir().join("pulaski-pipeline-example");
    let base = format!("out = {:?}\n[train]\nepochs = 3\n[model]\nkind = \"pulaski-hausdorff\"\n", out.display().to_string());
    let cfg = RunConfig::from_toml(&base, &[])?;
    let data = cmd_gen(&cfg)?;
    let cfg = RunConfig::from_toml(&base, &[format!("data.path={:?}", data.display().to_string())])?;

    let report = cmd_train(&cfg, None, &mut |r| println!("epoch {} val {:.4}", r.epoch, r.val_loss))?;
    println!("checkpoint at {}", report.checkpoint.display());
    let s = cmd_sample(&cfg)?;
    println!("sampled {} test images", s.images.len());
    let e = cmd_eval(&cfg)?;
    for m in &e.methods {
        println!("{}: GED {:.4}, Kα_all {:.2}", m.method, m.ged.mean, 100.0 * m.kalpha_all.mean);
    }
    println!("outputs under {}", out.display());
    Ok(())
}
