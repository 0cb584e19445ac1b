//! Regenerates the committed synthetic images under `assets/`.
//!
//!     cargo run --release -p hfd --example make_assets

use std::path::Path;

use hfd::imageio::save_image;
use hfd::synth::synthetic_image;

fn main() -> hfd::Result<()> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets");
    for sub in ["train", "eval"] {
        std::fs::create_dir_all(root.join(sub)).expect("create asset dirs");
    }
    save_image(&synthetic_image(512, 512, 1000), &root.join("demo.png"))?;
    for i in 0..24 {
        save_image(&synthetic_image(160, 160, 2000 + i), &root.join(format!("train/img{i:02}.png")))?;
    }
    for i in 0..2 {
        save_image(&synthetic_image(256, 256, 3000 + i), &root.join(format!("eval/img{i}.png")))?;
    }
    Ok(())
}
