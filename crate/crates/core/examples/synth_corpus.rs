//! Generate the synthetic three-species demo corpus, so the CLI can be
//! driven end to end without real recordings.
//!
//!     cargo run --release -p fsed-core --example synth_corpus -- demo-corpus [seed]

use std::path::Path;

use fsed_core::synth::{generate_corpus, SynthConfig};

fn main() {
    let mut args = std::env::args().skip(1);
    let dir = args.next().unwrap_or_else(|| "demo-corpus".into());
    let seed = args
        .next()
        .map(|s| s.parse().expect("seed must be an integer"))
        .unwrap_or(42);

    let layout = generate_corpus(Path::new(&dir), &SynthConfig { seed, ..SynthConfig::default() })
        .expect("corpus generation");
    println!("train root: {}", layout.train_root.display());
    println!("eval root:  {}", layout.eval_root.display());
}
