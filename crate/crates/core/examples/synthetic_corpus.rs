//! Generates a small speech-gesture corpus and writes one sequence to disk.
//!
//! Each word in the synthetic vocabulary maps to several gesture modes, so the
//! same speech can be accompanied by different motion.

use gesture_tokens::motion::{extract_windows, io, synth_corpus, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = SynthConfig { sequences: 4, ..SynthConfig::default() };
    let corpus = synth_corpus(&cfg, 3)?;
    println!("{} modes, vocabulary of {}", corpus.bank.len(), corpus.bank.vocab_size());
    for (i, (seq, script)) in corpus.sequences.iter().zip(&corpus.scripts).enumerate() {
        let beats = seq.beats.as_ref().map_or(0, Vec::len);
        println!(
            "sequence {i}: {} frames, {} occurrences, {beats} beats, {} windows",
            seq.len(),
            script.len(),
            extract_windows(seq).len()
        );
    }
    for occ in corpus.scripts[0].iter().take(5) {
        println!(
            "  mode {} at frame {} for {} frames, {:?} hand, gain {:.2}, word {}",
            occ.mode,
            occ.start,
            occ.frames,
            occ.hand,
            occ.gain,
            corpus.bank.word(occ.mode)
        );
    }

    let path = std::env::temp_dir().join("synthetic_corpus_example.gtkm");
    let bytes = io::to_bytes(&corpus.sequences[0]);
    std::fs::write(&path, &bytes)?;
    let again = io::from_bytes(&std::fs::read(&path)?)?;
    println!("wrote {} bytes to {}; reread equal: {}", bytes.len(), path.display(), again == corpus.sequences[0]);
    for line in io::to_text(&again).lines().take(6) {
        println!("  {}", &line[..line.len().min(100)]);
    }
    Ok(())
}
