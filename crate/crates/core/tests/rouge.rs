mod common;

use longattn_core::rouge::{corpus_report, lcs_len, rg, rouge_l, rouge_lsum, rouge_n, Score};
use proptest::prelude::*;
use rand::Rng;

fn parse_lines(s: &str) -> Vec<Vec<u32>> {
    s.split(',')
        .map(|l| l.split_whitespace().map(|t| t.parse().unwrap()).collect())
        .collect()
}

fn close(a: Score, p: f64, r: f64, f: f64) -> bool {
    (a.precision - p).abs() < 1e-15 && (a.recall - r).abs() < 1e-15 && (a.f1 - f).abs() < 1e-15
}

#[test]
fn matches_rouge_score_package() {
    let text = include_str!("fixtures/rouge_score_pairs.txt");
    let mut n = 0;
    for line in text.lines().filter(|l| !l.starts_with('#')) {
        let parts: Vec<&str> = line.split('|').collect();
        let (cand, reference) = (parse_lines(parts[0]), parse_lines(parts[1]));
        let nums: Vec<f64> = parts[2].split_whitespace().map(|x| x.parse().unwrap()).collect();
        let (c, r) = (cand.concat(), reference.concat());
        let got = [
            rouge_n(&c, &r, 1).unwrap(),
            rouge_n(&c, &r, 2).unwrap(),
            rouge_l(&c, &r),
            rouge_lsum(&cand, &reference),
        ];
        for (k, s) in got.iter().enumerate() {
            assert!(close(*s, nums[3 * k], nums[3 * k + 1], nums[3 * k + 2]), "{line} metric {k}: {s:?}");
        }
        n += 1;
    }
    assert_eq!(n, 300);
}

/// Clipped overlap as a multiset intersection of sorted n-gram lists.
fn ngram_oracle(c: &[u32], r: &[u32], n: usize) -> (usize, usize, usize) {
    let grams = |s: &[u32]| {
        let mut g: Vec<Vec<u32>> = if s.len() >= n { s.windows(n).map(<[u32]>::to_vec).collect() } else { vec![] };
        g.sort();
        g
    };
    let (gc, gr) = (grams(c), grams(r));
    let (mut i, mut j, mut overlap) = (0, 0, 0);
    while i < gc.len() && j < gr.len() {
        match gc[i].cmp(&gr[j]) {
            std::cmp::Ordering::Equal => {
                overlap += 1;
                i += 1;
                j += 1;
            }
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
        }
    }
    (overlap, gc.len(), gr.len())
}

fn is_subsequence(sub: &[u32], s: &[u32]) -> bool {
    let mut it = s.iter();
    sub.iter().all(|x| it.any(|y| y == x))
}

/// Longest common subsequence by enumerating every subsequence of `a`.
fn lcs_oracle(a: &[u32], b: &[u32]) -> usize {
    (0u32..1 << a.len())
        .filter_map(|mask| {
            let sub: Vec<u32> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
            is_subsequence(&sub, b).then_some(sub.len())
        })
        .max()
        .unwrap_or(0)
}

#[test]
fn brute_force_oracles_on_random_pairs() {
    let mut rng = common::rng(1000);
    for _ in 0..1000 {
        let alpha = rng.gen_range(2..8);
        let seq = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<u32> {
            (0..rng.gen_range(0..11)).map(|_| rng.gen_range(0..alpha)).collect()
        };
        let (c, r) = (seq(&mut rng), seq(&mut rng));
        for n in 1..=3 {
            let (o, nc, nr) = ngram_oracle(&c, &r, n);
            let s = rouge_n(&c, &r, n).unwrap();
            assert_eq!(s.precision, o as f64 / nc.max(1) as f64);
            assert_eq!(s.recall, o as f64 / nr.max(1) as f64);
        }
        let l = lcs_oracle(&c, &r);
        assert_eq!(lcs_len(&c, &r), l);
        let s = rouge_l(&c, &r);
        if c.is_empty() || r.is_empty() {
            assert_eq!(s, Score::default());
        } else {
            assert_eq!(s.precision, l as f64 / c.len() as f64);
            assert_eq!(s.recall, l as f64 / r.len() as f64);
        }
    }
}

#[test]
fn worked_examples() {
    let s = rouge_n(&["a", "b", "a"], &["a", "a", "b"], 1).unwrap();
    assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
    let s = rouge_n(&[1, 2, 3], &[4, 5], 1).unwrap();
    assert_eq!(s, Score::default());
    let s = rouge_n(&[1, 2], &Vec::<i32>::new(), 1).unwrap();
    assert_eq!(s, Score::default());
    assert!(rouge_n(&[1], &[1], 0).is_err());

    let r: Vec<u32> = (0..7).collect();
    let rev: Vec<u32> = r.iter().rev().copied().collect();
    let s = rouge_l(&rev, &r);
    assert_eq!((s.precision, s.recall), (1.0 / 7.0, 1.0 / 7.0));
    assert_eq!(rouge_l(&r, &r).f1, 1.0);

    // 0.0009^(1/3), from mpmath at 30 digits: 0.0965489384605629...
    assert!((rg(0.25, 0.04, 0.09) - 0.096_548_938_460_562_9).abs() < 1e-15);
    assert_eq!(rg(1.0, 1.0, 1.0), 1.0);
}

#[test]
fn lsum_uses_union_of_line_matches() {
    // Reference line [1 2 3 4] picks up 1 2 from one candidate line and
    // 3 4 from another; sequence-level LCS on the flattened text also sees
    // the order, so the two differ when the candidate lines are swapped.
    let cand = vec![vec![3, 4], vec![1, 2]];
    let reference = vec![vec![1, 2, 3, 4]];
    let s = rouge_lsum(&cand, &reference);
    assert_eq!((s.precision, s.recall), (1.0, 1.0));
    assert_eq!(rouge_l(&cand.concat(), &reference.concat()).recall, 0.5);
}

#[test]
fn corpus_means() {
    let one = vec![(vec![vec![1, 2, 3]], vec![vec![1, 2, 4]])];
    let rep = corpus_report(&one, false);
    assert_eq!(rep.n_examples, 1);
    assert_eq!(rep.r1, rouge_n(&[1, 2, 3], &[1, 2, 4], 1).unwrap());
    assert_eq!(rep.r2, rouge_n(&[1, 2, 3], &[1, 2, 4], 2).unwrap());
    assert_eq!(rep.rl, rouge_l(&[1, 2, 3], &[1, 2, 4]));

    let two = vec![(vec![vec![5, 6]], vec![vec![5, 6]]), (vec![vec![7, 8]], vec![vec![1, 2]])];
    let rep = corpus_report(&two, false);
    assert_eq!(rep.r1.f1, 0.5);
    assert_eq!(rep.rl.f1, 0.5);
    assert!((rep.rg - 0.5).abs() < 1e-15);

    let same = vec![(vec![vec![3, 1, 4], vec![1, 5]], vec![vec![3, 1, 4], vec![1, 5]])];
    let rep = corpus_report(&same, true);
    assert_eq!(rep.rg, 1.0);
    assert_eq!(rep.rlsum.f1, 1.0);
}

fn tokens() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..6, 0..14)
}

proptest! {
    #[test]
    fn swapping_sides_swaps_precision_and_recall(c in tokens(), r in tokens()) {
        for n in 1..=2 {
            let a = rouge_n(&c, &r, n).unwrap();
            let b = rouge_n(&r, &c, n).unwrap();
            prop_assert_eq!((a.precision, a.recall), (b.recall, b.precision));
            prop_assert!((a.f1 - b.f1).abs() < 1e-15);
        }
        let (a, b) = (rouge_l(&c, &r), rouge_l(&r, &c));
        prop_assert_eq!((a.precision, a.recall), (b.recall, b.precision));
    }

    #[test]
    fn lsum_equals_l_on_single_lines(c in tokens(), r in tokens()) {
        prop_assert_eq!(rouge_lsum(&[c.clone()], &[r.clone()]), rouge_l(&c, &r));
    }

    #[test]
    fn appending_a_reference_token_never_lowers_recall(c in tokens(), r in tokens(), pick in any::<prop::sample::Index>()) {
        prop_assume!(!r.is_empty());
        let mut longer = c.clone();
        longer.push(r[pick.index(r.len())]);
        prop_assert!(rouge_n(&longer, &r, 1).unwrap().recall >= rouge_n(&c, &r, 1).unwrap().recall);
        prop_assert!(rouge_n(&longer, &r, 2).unwrap().recall >= rouge_n(&c, &r, 2).unwrap().recall);
        prop_assert!(rouge_l(&longer, &r).recall >= rouge_l(&c, &r).recall);
    }
}
