//! Regenerates `data/corpus.txt`: `cargo run -p avss-core --example make_corpus`.

use std::path::Path;

fn main() -> std::io::Result<()> {
    let text = avss_core::corpus::synthetic_corpus(2024, 200_000);
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/corpus.txt");
    std::fs::write(&path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}
