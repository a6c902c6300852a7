//! Seeded generator for a small English-like language used to train the toy
//! model when no text file is supplied. Sentences follow a fixed grammar with
//! number agreement, so the text is learnable but not trivially periodic.

use alloc::string::String;

use crate::numerics::Rng;

const NOUNS: [(&str, &str); 16] = [
    ("cat", "cats"),
    ("dog", "dogs"),
    ("bird", "birds"),
    ("child", "children"),
    ("farmer", "farmers"),
    ("teacher", "teachers"),
    ("river", "rivers"),
    ("garden", "gardens"),
    ("house", "houses"),
    ("tree", "trees"),
    ("horse", "horses"),
    ("king", "kings"),
    ("ship", "ships"),
    ("stone", "stones"),
    ("apple", "apples"),
    ("window", "windows"),
];

const VERBS: [(&str, &str); 12] = [
    ("sees", "see"),
    ("finds", "find"),
    ("likes", "like"),
    ("follows", "follow"),
    ("watches", "watch"),
    ("carries", "carry"),
    ("paints", "paint"),
    ("builds", "build"),
    ("hears", "hear"),
    ("keeps", "keep"),
    ("visits", "visit"),
    ("moves", "move"),
];

const ADJECTIVES: [&str; 12] = [
    "old", "small", "green", "quiet", "bright", "tall", "cold", "happy", "dark", "red", "slow",
    "young",
];

const PREPOSITIONS: [&str; 6] = ["near", "under", "behind", "beside", "over", "inside"];

const ADVERBS: [&str; 6] = ["slowly", "often", "again", "quietly", "today", "never"];

fn pick<'a>(rng: &mut Rng, xs: &[&'a str]) -> &'a str {
    xs[rng.below(xs.len())]
}

fn noun_phrase(rng: &mut Rng, out: &mut String) -> bool {
    let plural = rng.below(3) == 0;
    let (sing, plur) = NOUNS[rng.below(NOUNS.len())];
    out.push_str(if plural {
        ["the", "some", "many", "two"][rng.below(4)]
    } else {
        ["the", "a", "one", "every"][rng.below(4)]
    });
    out.push(' ');
    if rng.below(2) == 0 {
        out.push_str(pick(rng, &ADJECTIVES));
        out.push(' ');
    }
    out.push_str(if plural { plur } else { sing });
    plural
}

fn sentence(rng: &mut Rng, out: &mut String) {
    let start = out.len();
    let plural = noun_phrase(rng, out);
    out.push(' ');
    if rng.below(4) == 0 {
        out.push_str(pick(rng, &ADVERBS));
        out.push(' ');
    }
    let (vs, vp) = VERBS[rng.below(VERBS.len())];
    out.push_str(if plural { vp } else { vs });
    out.push(' ');
    noun_phrase(rng, out);
    if rng.below(3) == 0 {
        out.push(' ');
        out.push_str(pick(rng, &PREPOSITIONS));
        out.push(' ');
        noun_phrase(rng, out);
    }
    if rng.below(5) == 0 {
        out.push_str(" and ");
        let p = noun_phrase(rng, out);
        out.push(' ');
        let (vs, vp) = VERBS[rng.below(VERBS.len())];
        out.push_str(if p { vp } else { vs });
        out.push_str(" it");
    }
    out.push('.');
    // capitalize the first letter
    if let Some(c) = out[start..].chars().next() {
        let upper = c.to_ascii_uppercase();
        out.replace_range(start..start + 1, upper.encode_utf8(&mut [0u8; 4]));
    }
}

/// At least `n_bytes` of generated text.
pub fn synthetic_corpus(rng: &mut Rng, n_bytes: usize) -> String {
    let mut out = String::with_capacity(n_bytes + 128);
    let mut in_para = 0;
    while out.len() < n_bytes {
        sentence(rng, &mut out);
        in_para += 1;
        if in_para >= 3 + rng.below(4) {
            out.push('\n');
            in_para = 0;
        } else {
            out.push(' ');
        }
    }
    out
}
