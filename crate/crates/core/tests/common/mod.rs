//! Independent reference implementations shared by the integration tests.

#![allow(dead_code)]

use std::collections::HashMap;

use rand::rngs::StdRng;
use rand::Rng;

/// Levenshtein distance by memoized recursion on suffixes.
pub fn oracle_edit_distance(a: &str, b: &str) -> usize {
    fn go(a: &[char], b: &[char], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(&d) = memo.get(&(i, j)) {
            return d;
        }
        let d = if a[i] == b[j] {
            go(a, b, i + 1, j + 1, memo)
        } else {
            1 + go(a, b, i + 1, j, memo).min(go(a, b, i, j + 1, memo)).min(go(a, b, i + 1, j + 1, memo))
        };
        memo.insert((i, j), d);
        d
    }
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    go(&a, &b, 0, 0, &mut HashMap::new())
}

pub fn oracle_similarity(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        1.0
    } else {
        1.0 - oracle_edit_distance(a, b) as f64 / longest as f64
    }
}

/// Largest number of disjoint pairs, by exhaustive search over every
/// assignment of predictions to unused gold items.
pub fn oracle_max_matching(np: usize, ng: usize, edge: &dyn Fn(usize, usize) -> bool) -> usize {
    fn go(p: usize, np: usize, ng: usize, used: &mut Vec<bool>, edge: &dyn Fn(usize, usize) -> bool) -> usize {
        if p == np {
            return 0;
        }
        let mut best = go(p + 1, np, ng, used, edge);
        for g in 0..ng {
            if !used[g] && edge(p, g) {
                used[g] = true;
                best = best.max(1 + go(p + 1, np, ng, used, edge));
                used[g] = false;
            }
        }
        best
    }
    go(0, np, ng, &mut vec![false; ng], edge)
}

fn random_word(rng: &mut StdRng, alphabet: &[u8], len: std::ops::Range<usize>) -> String {
    let n = rng.gen_range(len);
    (0..n).map(|_| alphabet[rng.gen_range(0..alphabet.len())] as char).collect()
}

/// Applies one or two random single-character edits.
pub fn near_miss(rng: &mut StdRng, base: &str, alphabet: &[u8]) -> String {
    let mut chars: Vec<char> = base.chars().collect();
    for _ in 0..rng.gen_range(1..=2) {
        let c = alphabet[rng.gen_range(0..alphabet.len())] as char;
        match rng.gen_range(0..3) {
            0 if !chars.is_empty() => {
                let i = rng.gen_range(0..chars.len());
                chars[i] = c;
            }
            1 if chars.len() > 1 => {
                let i = rng.gen_range(0..chars.len());
                chars.remove(i);
            }
            _ => {
                let i = rng.gen_range(0..=chars.len());
                chars.insert(i, c);
            }
        }
    }
    chars.into_iter().collect()
}

/// A matching instance over lowercase names: gold names drawn from a small
/// vocabulary and predictions that copy, perturb or invent names, so exact,
/// fuzzy and missing pairs all occur.
pub fn random_instance(rng: &mut StdRng) -> (Vec<String>, Vec<String>) {
    const ALPHABET: &[u8] = b"abcde";
    let vocab: Vec<String> = (0..rng.gen_range(2..7)).map(|_| random_word(rng, ALPHABET, 6..10)).collect();
    let gold: Vec<String> = (0..rng.gen_range(0..=6)).map(|_| vocab[rng.gen_range(0..vocab.len())].clone()).collect();
    let preds = (0..rng.gen_range(0..=6))
        .map(|_| {
            let base = &vocab[rng.gen_range(0..vocab.len())];
            match rng.gen_range(0..3) {
                0 => base.clone(),
                1 => near_miss(rng, base, ALPHABET),
                _ => random_word(rng, ALPHABET, 6..10),
            }
        })
        .collect();
    (preds, gold)
}

pub fn dedup(names: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for n in names {
        if !out.contains(n) {
            out.push(n.clone());
        }
    }
    out
}
