//! Generate a small synthetic dataset and describe a few of its scenes.
//!
//! ```text
//! cargo run --example gen_dataset -- [OUT_DIR]
//! ```

use std::path::PathBuf;

use textdet::shapegen::{generate_dataset, GenerationConfig, Split, SplitCounts};

fn main() -> textdet::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "shapes_demo".into()));
    let counts = SplitCounts {
        train: 8,
        val: 2,
        test: 2,
    };
    let manifest = generate_dataset(7, counts, &GenerationConfig::desk(), &out)?;
    println!("wrote {} scenes to {}", manifest.records.len(), out.display());

    for (i, rec) in manifest.split(Split::Test) {
        let scene = manifest.load_example(rec)?;
        let hits = scene.aligned.iter().filter(|&&a| a).count();
        println!(
            "#{i} {}: query {:?} matches {hits} of {} objects",
            manifest.image_path(rec).display(),
            scene.query.text,
            scene.objects.len()
        );
        for (o, a) in scene.objects.iter().zip(&scene.aligned).take(4) {
            let b = o.bbox;
            println!(
                "    {:?} {:?} at [{:.0},{:.0},{:.0},{:.0}]{}",
                o.color,
                o.kind,
                b.x1,
                b.y1,
                b.x2,
                b.y2,
                if *a { "  <- aligned" } else { "" }
            );
        }
    }
    Ok(())
}
