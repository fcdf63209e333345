//! Random local edits for simulated clients.

use cowrite::document::sequence::{SeqOp, Sequence};
use rand::Rng;

const ALPHABET: &[char] = &['a', 'e', 'n', 'r', 's', 't', ' ', ' ', '.', ',', 'é', '\n'];

pub fn random_text(rng: &mut impl Rng, max: usize) -> String {
    let n = rng.random_range(1..=max);
    (0..n).map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())]).collect()
}

/// One insert or delete at a random offset of `seq`.
pub fn local_edit(seq: &mut Sequence, rng: &mut impl Rng) -> Option<SeqOp> {
    let len = seq.len();
    if len > 0 && rng.random_bool(0.35) {
        let at = rng.random_range(0..len);
        let n = rng.random_range(1..=3.min(len - at));
        seq.delete(at, n).expect("range checked")
    } else {
        let at = rng.random_range(0..=len);
        Some(seq.insert(at, &random_text(rng, 4)).expect("offset checked"))
    }
}

/// Stable 64-bit mix of a seed and a name, for per-client generators.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    name.bytes().fold(seed ^ 0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}
