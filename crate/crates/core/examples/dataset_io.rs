//! Generates the synthetic corpus, writes it to disk and reads it back.
//!
//!     cargo run --release --example dataset_io -- /tmp/adm-data

use std::path::PathBuf;

use adm_surprisal::cli::{Corpus, DataConfig, SPLITS};

fn main() -> adm_surprisal::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("adm-data"));
    let corpus = Corpus::generate(&DataConfig::default(), 0)?;
    corpus.save(&dir)?;
    let back = Corpus::load(&dir)?;
    for name in SPLITS {
        let split = back.split(name)?;
        let frames: usize = split.iter().map(|s| s.len()).sum();
        println!("{name}: {} sequences, {frames} frames in {}", split.len(), dir.join(name).display());
    }

    let melody = &back.test_melody[0];
    let ann = melody.annotations.as_ref().expect("melodies are annotated");
    println!("\n{} ({} frames at {} fps, timbre {:?})", melody.id, melody.len(), melody.frame_rate, ann.timbre);
    for (onset, ic) in ann.onsets.iter().zip(&ann.symbol_ic).take(8) {
        println!("  onset frame {onset:>3}  symbol {}  true IC {ic:.3} bits", ann.symbols[*onset]);
    }
    let seg = &back.test_segmented[0];
    println!("\n{} boundaries (s): {:?}", seg.id, seg.annotations.as_ref().map(|a| &a.boundaries));
    Ok(())
}
