//! Fuzzy digests of a buffer and of edited copies: a one-byte edit leaves most
//! of the signature intact, a shuffled copy shares nothing.

use evasim::ctph::FuzzyDigest;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

fn main() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let original: Vec<u8> = (0..4096).map(|_| rng.gen()).collect();
    let base = FuzzyDigest::of(&original);
    println!("original  {base}");

    let mut edited = original.clone();
    edited[2000] ^= 0x55;
    let mut appended = original.clone();
    appended.extend_from_slice(&[0u8; 64]);
    let mut shuffled = original.clone();
    shuffled.shuffle(&mut rng);

    for (name, bytes) in [("one byte", &edited), ("appended", &appended), ("shuffled", &shuffled)] {
        let d = FuzzyDigest::of(bytes);
        println!(
            "{name:<9} {d}\n          similarity {:.4}, distance {:.4}",
            base.similarity(&d),
            base.distance(&d)
        );
    }
}
