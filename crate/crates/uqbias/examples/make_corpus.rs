//! Regenerates a synthetic sample corpus:
//!
//! ```text
//! cargo run --example make_corpus -- <dir> [n] [seed]
//! ```

use uqbias::dataset::write_synthetic_corpus;

fn main() {
    let mut args = std::env::args().skip(1);
    let dir = args.next().unwrap_or_else(|| "data/sample".to_string());
    let n: usize = args.next().map(|v| v.parse().expect("n")).unwrap_or(20);
    let seed: u64 = args.next().map(|v| v.parse().expect("seed")).unwrap_or(2024);
    let path = write_synthetic_corpus(std::path::Path::new(&dir), n, seed).expect("write corpus");
    println!("wrote {n} instances to {}", path.display());
}
