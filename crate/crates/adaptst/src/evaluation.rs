//! Translation quality scoring: corpus BLEU and paired bootstrap
//! resampling for significance between two systems on the same test set.

use std::collections::HashMap;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_ORDER: usize = 4;

// ── corpus BLEU ───────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, Default)]
struct SegmentStats {
    /// Clipped n-gram matches, orders 1..=4.
    matches: [usize; MAX_ORDER],
    /// Hypothesis n-gram totals, orders 1..=4.
    totals: [usize; MAX_ORDER],
    hyp_len: usize,
    ref_len: usize,
}

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for i in 0..=tokens.len() - n {
            *counts.entry(&tokens[i..i + n]).or_insert(0) += 1;
        }
    }
    counts
}

fn segment_stats(hyp: &[usize], reference: &[usize]) -> SegmentStats {
    let mut s = SegmentStats {
        hyp_len: hyp.len(),
        ref_len: reference.len(),
        ..Default::default()
    };
    for n in 1..=MAX_ORDER {
        let hyp_counts = ngram_counts(hyp, n);
        let ref_counts = ngram_counts(reference, n);
        for (gram, &count) in &hyp_counts {
            s.totals[n - 1] += count;
            // clip to how often the reference can account for this n-gram
            s.matches[n - 1] += count.min(*ref_counts.get(gram).unwrap_or(&0));
        }
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuBreakdown {
    /// 0 to 100.
    pub score: f64,
    /// Corpus-level modified precisions, orders 1..=4.
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn bleu_from_stats<'a>(stats: impl Iterator<Item = &'a SegmentStats>) -> BleuBreakdown {
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for s in stats {
        for n in 0..MAX_ORDER {
            matches[n] += s.matches[n];
            totals[n] += s.totals[n];
        }
        hyp_len += s.hyp_len;
        ref_len += s.ref_len;
    }
    let mut precisions = [0.0; MAX_ORDER];
    let mut all_positive = true;
    for n in 0..MAX_ORDER {
        if totals[n] > 0 {
            precisions[n] = matches[n] as f64 / totals[n] as f64;
        }
        all_positive &= matches[n] > 0 && totals[n] > 0;
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).min(0.0).exp()
    };
    // no smoothing: a zero count at any order zeroes the whole score
    let score = if all_positive && hyp_len > 0 {
        let log_geo: f64 = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * brevity_penalty * log_geo.exp()
    } else {
        0.0
    };
    BleuBreakdown {
        score,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    }
}

fn check_corpus(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(Error::Corpus(format!(
            "{} hypotheses against {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::Corpus("empty test corpus".into()));
    }
    Ok(())
}

/// Corpus-level BLEU with orders 1..=4, clipped counts pooled over the whole
/// corpus, brevity penalty exp(min(0, 1 - ref_len/hyp_len)), no smoothing.
pub fn corpus_bleu(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<f64> {
    Ok(corpus_bleu_detailed(hyps, refs)?.score)
}

pub fn corpus_bleu_detailed(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<BleuBreakdown> {
    check_corpus(hyps, refs)?;
    let stats: Vec<SegmentStats> = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| segment_stats(h, r))
        .collect();
    Ok(bleu_from_stats(stats.iter()))
}

// ── paired bootstrap ──────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// Fraction of resamples where the candidate failed to beat the
    /// baseline; ties count against the candidate. Small means the
    /// candidate's lead is unlikely to be resampling noise.
    pub p_value: f64,
    pub baseline_bleu: f64,
    pub candidate_bleu: f64,
    pub candidate_wins: usize,
    pub baseline_wins: usize,
    pub ties: usize,
    pub n_resamples: usize,
}

/// Paired bootstrap over test segments: draw the corpus with replacement
/// `n_resamples` times and score both systems on each draw.
pub fn paired_bootstrap(
    baseline: &[Vec<usize>],
    candidate: &[Vec<usize>],
    refs: &[Vec<usize>],
    n_resamples: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    check_corpus(baseline, refs)?;
    check_corpus(candidate, refs)?;
    if n_resamples == 0 {
        return Err(Error::InvalidConfig("n_resamples must be positive".into()));
    }
    let base_stats: Vec<SegmentStats> = baseline
        .iter()
        .zip(refs)
        .map(|(h, r)| segment_stats(h, r))
        .collect();
    let cand_stats: Vec<SegmentStats> = candidate
        .iter()
        .zip(refs)
        .map(|(h, r)| segment_stats(h, r))
        .collect();

    let n = refs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut candidate_wins, mut baseline_wins, mut ties) = (0usize, 0usize, 0usize);
    for _ in 0..n_resamples {
        let draw: Vec<usize> = (0..n)
            .map(|_| rand::Rng::gen_range(&mut rng, 0..n))
            .collect();
        let b = bleu_from_stats(draw.iter().map(|&i| &base_stats[i])).score;
        let c = bleu_from_stats(draw.iter().map(|&i| &cand_stats[i])).score;
        if c > b {
            candidate_wins += 1;
        } else if b > c {
            baseline_wins += 1;
        } else {
            ties += 1;
        }
    }
    Ok(BootstrapResult {
        p_value: (baseline_wins + ties) as f64 / n_resamples as f64,
        baseline_bleu: bleu_from_stats(base_stats.iter()).score,
        candidate_bleu: bleu_from_stats(cand_stats.iter()).score,
        candidate_wins,
        baseline_wins,
        ties,
        n_resamples,
    })
}

// ──────────────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Reference BLEU built from scratch with nested scans instead of hash
    /// maps, for cross-checking the production path.
    fn naive_bleu(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> f64 {
        let grams = |toks: &[usize], n: usize| -> Vec<Vec<usize>> {
            if toks.len() < n {
                return Vec::new();
            }
            (0..=toks.len() - n).map(|i| toks[i..i + n].to_vec()).collect()
        };
        let count_of = |list: &[Vec<usize>], g: &[usize]| -> usize {
            list.iter().filter(|x| x.as_slice() == g).count()
        };
        let mut hyp_len = 0.0;
        let mut ref_len = 0.0;
        let mut log_sum = 0.0;
        for n in 1..=4 {
            let mut matched = 0usize;
            let mut total = 0usize;
            for (h, r) in hyps.iter().zip(refs) {
                let hg = grams(h, n);
                let rg = grams(r, n);
                total += hg.len();
                // count each distinct hyp n-gram once, clipped by the ref
                let mut seen: Vec<&[usize]> = Vec::new();
                for g in &hg {
                    if seen.iter().any(|s| *s == g.as_slice()) {
                        continue;
                    }
                    seen.push(g);
                    matched += count_of(&hg, g).min(count_of(&rg, g));
                }
            }
            if matched == 0 || total == 0 {
                return 0.0;
            }
            log_sum += (matched as f64 / total as f64).ln() / 4.0;
        }
        for (h, r) in hyps.iter().zip(refs) {
            hyp_len += h.len() as f64;
            ref_len += r.len() as f64;
        }
        if hyp_len == 0.0 {
            return 0.0;
        }
        let bp = (1.0 - ref_len / hyp_len).min(0.0).exp();
        100.0 * bp * log_sum.exp()
    }

    fn random_corpus(seed: u64, n_segments: usize, vocab: usize) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_segments)
            .map(|_| {
                let len = rng.gen_range(0..12);
                (0..len).map(|_| rng.gen_range(0..vocab)).collect()
            })
            .collect()
    }

    #[test]
    fn matches_naive_reference_on_random_corpora() {
        for seed in 0..60 {
            // small vocab forces n-gram collisions and real clipping
            let hyps = random_corpus(seed, 8, 4);
            let refs = random_corpus(seed + 1000, 8, 4);
            let got = corpus_bleu(&hyps, &refs).unwrap();
            let want = naive_bleu(&hyps, &refs);
            assert!(
                (got - want).abs() < 1e-12,
                "seed {seed}: {got} vs naive {want}"
            );
        }
    }

    #[test]
    fn perfect_match_scores_one_hundred() {
        let refs = vec![vec![3, 4, 5, 6, 7], vec![8, 9, 10, 11]];
        let bleu = corpus_bleu(&refs.clone(), &refs).unwrap();
        assert!((bleu - 100.0).abs() < 1e-12);
        let d = corpus_bleu_detailed(&refs.clone(), &refs).unwrap();
        assert_eq!(d.precisions, [1.0; 4]);
        assert_eq!(d.brevity_penalty, 1.0);
    }

    #[test]
    fn disjoint_tokens_score_zero() {
        let hyps = vec![vec![1, 2, 3, 4, 5]];
        let refs = vec![vec![6, 7, 8, 9, 10]];
        assert_eq!(corpus_bleu(&hyps, &refs).unwrap(), 0.0);
    }

    #[test]
    fn brevity_penalty_hand_computed() {
        // p1..p4 all 1; BP = exp(1 - 5/4)
        let hyps = vec![vec![1, 2, 3, 4]];
        let refs = vec![vec![1, 2, 3, 4, 5]];
        let want = 100.0 * (1.0f64 - 5.0 / 4.0).exp();
        let got = corpus_bleu(&hyps, &refs).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        // longer hypotheses pay no length penalty
        let hyps = vec![vec![1, 2, 3, 4, 5, 6]];
        let d = corpus_bleu_detailed(&hyps, &refs).unwrap();
        assert_eq!(d.brevity_penalty, 1.0);
    }

    #[test]
    fn clipping_counts_each_reference_ngram_once() {
        // hyp repeats one token six times; the two-token ref accounts for
        // at most two of them
        let hyps = vec![vec![7, 7, 7, 7, 7, 7]];
        let refs = vec![vec![7, 7]];
        let d = corpus_bleu_detailed(&hyps, &refs).unwrap();
        assert!((d.precisions[0] - 2.0 / 6.0).abs() < 1e-12);
        assert!((d.precisions[1] - 1.0 / 5.0).abs() < 1e-12);
        assert_eq!(d.precisions[2], 0.0, "ref has no trigrams");
        assert_eq!(d.score, 0.0, "a zero precision zeroes unsmoothed BLEU");
    }

    #[test]
    fn short_segments_alone_cannot_reach_order_four() {
        // perfect three-token segments still have no 4-grams: score 0
        let refs = vec![vec![1, 2, 3], vec![4, 5, 6]];
        assert_eq!(corpus_bleu(&refs.clone(), &refs).unwrap(), 0.0);
    }

    #[test]
    fn empty_hypotheses_are_tolerated_and_score_zero() {
        let hyps = vec![vec![], vec![1, 2, 3, 4]];
        let refs = vec![vec![1, 2], vec![1, 2, 3, 4]];
        let bleu = corpus_bleu(&hyps, &refs).unwrap();
        assert!(bleu > 0.0 && bleu < 100.0);
        let all_empty = vec![vec![], vec![]];
        assert_eq!(corpus_bleu(&all_empty, &refs).unwrap(), 0.0);
    }

    #[test]
    fn corpus_pooling_differs_from_sentence_averaging() {
        // one perfect 5-token segment, one disjoint 3-token segment;
        // pooled: p1 = 5/8, p2 = 4/6, p3 = 3/4, p4 = 2/2, BP = 1
        let hyps = vec![vec![1, 2, 3, 4, 5], vec![9, 9, 9]];
        let refs = vec![vec![1, 2, 3, 4, 5], vec![6, 7, 8]];
        let pooled = corpus_bleu(&hyps, &refs).unwrap();
        let want = 100.0 * (5.0f64 / 8.0 * 4.0 / 6.0 * 3.0 / 4.0 * 1.0).powf(0.25);
        assert!((pooled - want).abs() < 1e-9, "{pooled} vs {want}");
        let s1 = corpus_bleu(&hyps[..1].to_vec(), &refs[..1].to_vec()).unwrap();
        let s2 = corpus_bleu(&hyps[1..].to_vec(), &refs[1..].to_vec()).unwrap();
        assert_eq!((s1, s2), (100.0, 0.0));
        assert!((pooled - 50.0).abs() > 10.0, "pooled {pooled} is not a sentence mean");
    }

    #[test]
    fn corpus_shape_errors() {
        let refs = vec![vec![1, 2, 3]];
        assert!(corpus_bleu(&[], &[]).is_err());
        assert!(corpus_bleu(&[vec![1], vec![2]], &refs).is_err());
    }

    #[test]
    fn scores_stay_in_range_on_random_corpora() {
        for seed in 200..260 {
            let hyps = random_corpus(seed, 6, 5);
            let refs = random_corpus(seed + 1, 6, 5);
            let bleu = corpus_bleu(&hyps, &refs).unwrap();
            assert!((0.0..=100.0).contains(&bleu), "seed {seed}: {bleu}");
        }
    }

    fn repeated(seg: &[usize], n: usize) -> Vec<Vec<usize>> {
        (0..n).map(|_| seg.to_vec()).collect()
    }

    #[test]
    fn bootstrap_identical_systems_always_tie() {
        let refs = random_corpus(7, 10, 6);
        let hyps = random_corpus(8, 10, 6);
        let r = paired_bootstrap(&hyps, &hyps, &refs, 100, 1).unwrap();
        assert_eq!(r.ties, 100);
        assert_eq!(r.p_value, 1.0, "a tie must never count as evidence");
        assert_eq!(r.baseline_bleu, r.candidate_bleu);
    }

    #[test]
    fn bootstrap_detects_a_uniformly_better_candidate() {
        let refs = repeated(&[1, 2, 3, 4, 5], 12);
        let candidate = refs.clone();
        let baseline = repeated(&[1, 2, 9, 9, 9], 12);
        let r = paired_bootstrap(&baseline, &candidate, &refs, 300, 2).unwrap();
        assert_eq!(r.p_value, 0.0);
        assert_eq!(r.candidate_wins, 300);
        assert!(r.candidate_bleu > r.baseline_bleu);
        // and the reverse direction condemns the worse system
        let r = paired_bootstrap(&candidate, &baseline, &refs, 300, 2).unwrap();
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn bootstrap_mixed_corpus_lands_between_extremes() {
        // candidate wins 9 of 10 segments, baseline wins 1
        let refs = repeated(&[1, 2, 3, 4, 5, 6], 10);
        let mut candidate = refs.clone();
        candidate[0] = vec![9, 9, 9, 9, 9, 9];
        let mut baseline: Vec<Vec<usize>> = repeated(&[1, 2, 3, 9, 9, 9], 10);
        baseline[0] = refs[0].clone();
        let r = paired_bootstrap(&baseline, &candidate, &refs, 400, 3).unwrap();
        assert!(r.p_value < 0.05, "candidate dominates: p {}", r.p_value);
        assert!(r.p_value > 0.0 || r.candidate_wins == 400);
        assert!(r.candidate_bleu > r.baseline_bleu);
    }

    #[test]
    fn bootstrap_is_seed_deterministic() {
        // corpora with real overlap so resamples actually swing: the
        // candidate ruins two segments, the baseline ruins three others
        let refs = repeated(&[1, 2, 3, 4, 5, 6, 7, 8], 12);
        let mut base = refs.clone();
        let mut cand = refs.clone();
        for i in 0..3 {
            base[i] = vec![9, 9, 9, 9, 9, 9, 9, 9];
        }
        for i in 3..5 {
            cand[i] = vec![9, 9, 9, 9, 9, 9, 9, 9];
        }
        let a = paired_bootstrap(&base, &cand, &refs, 200, 9).unwrap();
        let b = paired_bootstrap(&base, &cand, &refs, 200, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.candidate_wins + a.baseline_wins + a.ties, 200);
        let wins = |r: &BootstrapResult| (r.candidate_wins, r.baseline_wins, r.ties);
        let c = paired_bootstrap(&base, &cand, &refs, 200, 10).unwrap();
        assert_ne!(wins(&a), wins(&c), "different seeds should draw differently");
    }

    #[test]
    fn bootstrap_rejects_degenerate_inputs() {
        let refs = random_corpus(30, 5, 5);
        let hyps = random_corpus(31, 5, 5);
        assert!(paired_bootstrap(&hyps, &hyps, &refs, 0, 1).is_err());
        assert!(paired_bootstrap(&hyps[..4].to_vec(), &hyps, &refs, 10, 1).is_err());
    }
}
