//! Generated corpora in the WikiText layout, for tests and smoke runs.
//!
//! Every sentence holds exactly one label word. Context tokens contain
//! digits, so they are never eligible as labels themselves.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `i`-th label word: `w` followed by at least three letters.
pub fn label_word(i: usize) -> String {
    let mut letters = Vec::new();
    let mut n = i;
    for _ in 0..3 {
        letters.push((b'a' + (n % 26) as u8) as char);
        n /= 26;
    }
    while n > 0 {
        letters.push((b'a' + (n % 26) as u8) as char);
        n /= 26;
    }
    letters.reverse();
    format!("w{}", letters.into_iter().collect::<String>())
}

fn render(lines: Vec<Vec<String>>, title: &str) -> String {
    let mut out = format!(" = {title} = \n\n");
    for l in lines {
        out.push(' ');
        out.push_str(&l.join(" "));
        out.push_str(" . \n");
    }
    out
}

/// Each label word has its own six context tokens and a sentence uses five
/// of them. Sentences of different words share no token.
pub fn separable_corpus(words: usize, sentences_per_word: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines = Vec::with_capacity(words * sentences_per_word);
    for w in 0..words {
        let own: Vec<String> = (0..6).map(|j| format!("c{w}_{j}")).collect();
        for _ in 0..sentences_per_word {
            let mut s: Vec<String> = own.choose_multiple(&mut rng, 5).cloned().collect();
            s.push(label_word(w));
            s.shuffle(&mut rng);
            lines.push(s);
        }
    }
    lines.shuffle(&mut rng);
    render(lines, "Separable")
}

/// Contexts drawn uniformly from one shared pool: no sentence says
/// anything about its label word.
pub fn noise_corpus(words: usize, sentences_per_word: usize, pool: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines = Vec::with_capacity(words * sentences_per_word);
    for w in 0..words {
        for _ in 0..sentences_per_word {
            let mut s: Vec<String> = (0..5).map(|_| format!("n{}", rng.gen_range(0..pool))).collect();
            s.push(label_word(w));
            s.shuffle(&mut rng);
            lines.push(s);
        }
    }
    lines.shuffle(&mut rng);
    render(lines, "Noise")
}
