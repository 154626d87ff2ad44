//! Two-level beam search: word-level beams per image, vertical rescoring of
//! the finished captions, then a caption-level beam over one candidate per
//! image scored with the horizontal coherence head.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::coherence::{concat, CoherenceScorer};
use crate::decoder::{end_state, output_mask};
use crate::error::{Error, Result};
use crate::model::{ConCaps, ItemInput};
use crate::parallel::{map, Parallelism};
use crate::tensor::{log_softmax_masked, Mat};
use crate::vocab::{BOS_ID, EOS_ID};

/// Which horizontal head scores caption pairs during caption-level search.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HoriHead {
    #[default]
    Hori1,
    Hori2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreWeights {
    pub gen: f64,
    pub vert: f64,
    pub hori: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self {
            gen: 1.0,
            vert: 1.0,
            hori: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Candidates kept per image; defaults to the beam size.
    pub candidates: Option<usize>,
    /// Images decoded jointly by the caption-level search.
    pub w: usize,
    pub weights: ScoreWeights,
    pub hori_head: HoriHead,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 3,
            candidates: None,
            w: 3,
            weights: ScoreWeights::default(),
            hori_head: HoriHead::Hori1,
        }
    }
}

impl DecodeConfig {
    pub fn n_candidates(&self) -> usize {
        self.candidates.unwrap_or(self.beam_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.n_candidates() == 0 || self.w == 0 {
            return Err(Error::Config("beam_size, candidates and W must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionHypothesis {
    /// Token ids starting with `<s>`; ends with `</s>` unless cut at max_len.
    pub tokens: Vec<usize>,
    /// Mean log-probability per generated token.
    pub gen_score: f64,
    pub vert_score: f64,
    pub single_score: f64,
    /// Decoder state at `</s>`, set by [`vert_rescore`].
    #[serde(skip)]
    pub end_state: Option<Vec<f64>>,
}

impl CaptionHypothesis {
    fn new(tokens: Vec<usize>, gen_score: f64) -> Self {
        Self {
            tokens,
            gen_score,
            vert_score: 0.0,
            single_score: gen_score,
            end_state: None,
        }
    }

    pub fn finished(&self) -> bool {
        self.tokens.last() == Some(&EOS_ID)
    }
}

/// Next-token distribution given a prefix that starts with `<s>`.
pub trait StepModel: Sync {
    /// Log-probabilities over the whole vocabulary; disallowed tokens are -∞.
    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
    /// Longest caption, `<s>` and `</s>` included.
    fn max_len(&self) -> usize;
}

/// A trained model conditioned on one image's encoded memory.
pub struct ModelStepper<'a> {
    pub model: &'a ConCaps,
    pub memory: Mat,
    mask: Vec<bool>,
}

impl<'a> ModelStepper<'a> {
    pub fn new(model: &'a ConCaps, input: ItemInput) -> Result<Self> {
        Ok(Self {
            model,
            memory: model.memory_value(input)?,
            mask: output_mask(model.vocab.len()),
        })
    }
}

impl StepModel for ModelStepper<'_> {
    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let out = self.model.forward_with_memory(&self.memory, prefix)?;
        let last = out.logits.row(out.logits.rows() - 1);
        Ok(log_softmax_masked(last, |c| self.mask[c]))
    }

    fn max_len(&self) -> usize {
        self.model.spec.model.max_len
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WordBeamResult {
    pub hypotheses: Vec<CaptionHypothesis>,
    /// Fewer than the requested number of candidates could be produced.
    pub short: bool,
}

/// Higher score first; equal scores fall back to lexicographic token order.
fn rank(a: &(f64, &[usize]), b: &(f64, &[usize])) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

/// Length-normalised beam search from `<s>`.
///
/// Each step expands every live beam by every allowed token, moves
/// expansions ending in `</s>` to the finished pool, and keeps the best
/// `beam_size` of the rest by mean log-probability. A beam that reaches
/// `max_len - 1` tokens is finished without `</s>`, leaving room for
/// [`vert_rescore`] to append it. Returns the best `n_candidates` finished
/// hypotheses.
pub fn word_beam_search(model: &dyn StepModel, beam_size: usize, n_candidates: usize) -> Result<WordBeamResult> {
    if beam_size == 0 || n_candidates == 0 {
        return Err(Error::Config("beam_size and candidates must be at least 1".into()));
    }
    let max_len = model.max_len();
    if max_len < 2 {
        return Err(Error::Config("max_len must be at least 2".into()));
    }
    let mut live: Vec<(Vec<usize>, f64)> = vec![(vec![BOS_ID], 0.0)];
    let mut finished: Vec<CaptionHypothesis> = Vec::new();
    while !live.is_empty() {
        let mut next: Vec<(Vec<usize>, f64)> = Vec::new();
        for (prefix, sum) in &live {
            let lp = model.next_log_probs(prefix)?;
            for (c, &l) in lp.iter().enumerate() {
                if !l.is_finite() {
                    continue;
                }
                let mut tokens = prefix.clone();
                tokens.push(c);
                let total = sum + l;
                let generated = (tokens.len() - 1) as f64;
                if c == EOS_ID || tokens.len() + 1 >= max_len {
                    finished.push(CaptionHypothesis::new(tokens, total / generated));
                } else {
                    next.push((tokens, total));
                }
            }
        }
        next.sort_by(|a, b| {
            let na = a.1 / (a.0.len() - 1) as f64;
            let nb = b.1 / (b.0.len() - 1) as f64;
            rank(&(na, &a.0), &(nb, &b.0))
        });
        next.truncate(beam_size);
        live = next;
    }
    finished.sort_by(|a, b| rank(&(a.gen_score, &a.tokens), &(b.gen_score, &b.tokens)));
    let short = finished.len() < n_candidates;
    finished.truncate(n_candidates);
    Ok(WordBeamResult {
        hypotheses: finished,
        short,
    })
}

/// Runs the decoder over the `</s>`-terminated hypothesis, stores its end
/// state, and sets the vertical score and the combined single score.
pub fn vert_rescore(
    hyp: &CaptionHypothesis,
    model: &ConCaps,
    memory: &Mat,
    scorer: &dyn CoherenceScorer,
    weights: ScoreWeights,
) -> Result<CaptionHypothesis> {
    let mut tokens = hyp.tokens.clone();
    if !hyp.finished() {
        tokens.push(EOS_ID);
    }
    let out = model.forward_with_memory(memory, &tokens)?;
    let state = end_state(&out)?;
    let vert_score = scorer.score(&state);
    Ok(CaptionHypothesis {
        tokens: hyp.tokens.clone(),
        gen_score: hyp.gen_score,
        vert_score,
        single_score: weights.gen * hyp.gen_score + weights.vert * vert_score,
        end_state: Some(state),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionSequence {
    pub chosen: Vec<CaptionHypothesis>,
    /// Index of each chosen hypothesis in its image's candidate list.
    pub picks: Vec<usize>,
    pub seq_score: f64,
}

/// Mean pairwise horizontal logit over all pairs of the sequence, earlier
/// image first; 0 for fewer than two captions.
pub fn hori_score(chosen: &[&CaptionHypothesis], scorer: &dyn CoherenceScorer) -> Result<f64> {
    if chosen.len() < 2 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..chosen.len() {
        for j in i + 1..chosen.len() {
            let (a, b) = (state_of(chosen[i])?, state_of(chosen[j])?);
            sum += scorer.score(&concat(a, b));
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

fn state_of(h: &CaptionHypothesis) -> Result<&[f64]> {
    h.end_state
        .as_deref()
        .ok_or_else(|| Error::Contract("hypothesis has not been rescored".into()))
}

pub fn sequence_score(chosen: &[&CaptionHypothesis], scorer: &dyn CoherenceScorer, hori_weight: f64) -> Result<f64> {
    let mean = chosen.iter().map(|h| h.single_score).sum::<f64>() / chosen.len() as f64;
    let hori = if hori_weight == 0.0 { 0.0 } else { hori_score(chosen, scorer)? };
    Ok(mean + hori_weight * hori)
}

/// Beam over images in order, extending each kept sequence by every
/// candidate of the next image and keeping the best `beam_size`.
pub fn caption_beam_search(
    per_image: &[Vec<CaptionHypothesis>],
    scorer: &dyn CoherenceScorer,
    beam_size: usize,
    hori_weight: f64,
) -> Result<CaptionSequence> {
    if beam_size == 0 {
        return Err(Error::Config("beam_size must be at least 1".into()));
    }
    if per_image.is_empty() {
        return Err(Error::Contract("no images to decode".into()));
    }
    if let Some(k) = per_image.iter().position(Vec::is_empty) {
        return Err(Error::Contract(format!("image {k} has no candidate captions")));
    }
    let mut beams: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    for (k, cands) in per_image.iter().enumerate() {
        let mut next = Vec::with_capacity(beams.len() * cands.len());
        for (picks, _) in &beams {
            for j in 0..cands.len() {
                let mut p = picks.clone();
                p.push(j);
                let chosen: Vec<&CaptionHypothesis> = p.iter().enumerate().map(|(i, &c)| &per_image[i][c]).collect();
                let s = sequence_score(&chosen, scorer, hori_weight)?;
                next.push((p, s));
            }
        }
        next.sort_by(|a, b| rank(&(a.1, &a.0), &(b.1, &b.0)));
        if k + 1 < per_image.len() {
            next.truncate(beam_size);
        }
        beams = next;
    }
    let (picks, seq_score) = beams.swap_remove(0);
    Ok(CaptionSequence {
        chosen: picks.iter().enumerate().map(|(i, &c)| per_image[i][c].clone()).collect(),
        picks,
        seq_score,
    })
}

/// Word-level search plus vertical rescoring for one image, best first.
pub fn image_candidates(model: &ConCaps, input: ItemInput, cfg: &DecodeConfig) -> Result<Vec<CaptionHypothesis>> {
    let stepper = ModelStepper::new(model, input)?;
    let words = word_beam_search(&stepper, cfg.beam_size, cfg.n_candidates())?;
    let vert = model.vert.bind(&model.params);
    let mut out = words
        .hypotheses
        .iter()
        .map(|h| vert_rescore(h, model, &stepper.memory, &vert, cfg.weights))
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| rank(&(a.single_score, &a.tokens), &(b.single_score, &b.tokens)));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodedImage {
    pub hypothesis: CaptionHypothesis,
    pub seq_score: f64,
}

/// Decodes a document's images in consecutive chunks of `W`.
pub fn decode_document(
    model: &ConCaps,
    inputs: &[ItemInput],
    cfg: &DecodeConfig,
    mode: Parallelism,
) -> Result<Vec<DecodedImage>> {
    cfg.validate()?;
    let candidates: Vec<Result<Vec<CaptionHypothesis>>> = map(mode, inputs, |input| image_candidates(model, *input, cfg));
    let candidates: Vec<Vec<CaptionHypothesis>> = candidates.into_iter().collect::<Result<_>>()?;
    let head = match cfg.hori_head {
        HoriHead::Hori1 => &model.hori1,
        HoriHead::Hori2 => &model.hori2,
    };
    let scorer = head.bind(&model.params);
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in candidates.chunks(cfg.w) {
        let seq = caption_beam_search(chunk, &scorer, cfg.beam_size, cfg.weights.hori)?;
        for h in seq.chosen {
            out.push(DecodedImage {
                hypothesis: h,
                seq_score: seq.seq_score,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{PAD_ID, UNK_ID};

    /// Deterministic pseudo-model over the vocabulary {</s>, a=4, b=5}.
    struct Scripted {
        max_len: usize,
        vocab: usize,
    }

    impl StepModel for Scripted {
        fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
            let h = prefix.iter().fold(17u64, |acc, &t| acc.wrapping_mul(31).wrapping_add(t as u64 + 1));
            let logits: Vec<f64> = (0..self.vocab).map(|c| ((h as f64) * 0.37 + c as f64 * 1.91).sin() * 2.0).collect();
            Ok(log_softmax_masked(&logits, |c| c != BOS_ID && c != PAD_ID && c != UNK_ID))
        }

        fn max_len(&self) -> usize {
            self.max_len
        }
    }

    /// Every caption the search space admits, scored directly.
    fn exhaustive(m: &dyn StepModel) -> Vec<(Vec<usize>, f64)> {
        fn walk(m: &dyn StepModel, prefix: Vec<usize>, sum: f64, out: &mut Vec<(Vec<usize>, f64)>) {
            let lp = m.next_log_probs(&prefix).unwrap();
            for (c, &l) in lp.iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let mut p = prefix.clone();
                p.push(c);
                let s = sum + l;
                if c == EOS_ID || p.len() + 1 >= m.max_len() {
                    let n = (p.len() - 1) as f64;
                    out.push((p, s / n));
                } else {
                    walk(m, p, s, out);
                }
            }
        }
        let mut out = Vec::new();
        walk(m, vec![BOS_ID], 0.0, &mut out);
        out
    }

    #[test]
    fn full_width_beam_matches_exhaustive_argmax() {
        for max_len in 3..=6 {
            let m = Scripted { max_len, vocab: 6 };
            let all = exhaustive(&m);
            let best = all
                .iter()
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then_with(|| b.0.cmp(&a.0)))
                .unwrap();
            let beam = 3usize.pow((max_len - 1) as u32);
            let res = word_beam_search(&m, beam, all.len()).unwrap();
            assert_eq!(res.hypotheses[0].tokens, best.0);
            assert!((res.hypotheses[0].gen_score - best.1).abs() < 1e-12);
            assert_eq!(res.hypotheses.len(), all.len());
        }
    }

    struct Certain;

    impl StepModel for Certain {
        fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
            let mut lp = vec![f64::NEG_INFINITY; 5];
            lp[if prefix.len() < 3 { 4 } else { EOS_ID }] = 0.0;
            Ok(lp)
        }

        fn max_len(&self) -> usize {
            8
        }
    }

    #[test]
    fn certain_single_word_model() {
        let res = word_beam_search(&Certain, 3, 3).unwrap();
        assert_eq!(res.hypotheses.len(), 1);
        assert!(res.short);
        assert_eq!(res.hypotheses[0].tokens, vec![BOS_ID, 4, 4, EOS_ID]);
        assert_eq!(res.hypotheses[0].gen_score, 0.0);
    }

    #[test]
    fn max_len_forces_termination() {
        let m = Scripted { max_len: 4, vocab: 6 };
        let res = word_beam_search(&m, 2, 50).unwrap();
        for h in &res.hypotheses {
            assert!(h.finished() || h.tokens.len() == 3);
            assert!(h.tokens.len() <= 4);
        }
    }

    #[test]
    fn word_search_is_deterministic() {
        let m = Scripted { max_len: 6, vocab: 7 };
        assert_eq!(word_beam_search(&m, 3, 3).unwrap(), word_beam_search(&m, 3, 3).unwrap());
    }

    fn hyp(single: f64, state: Vec<f64>) -> CaptionHypothesis {
        CaptionHypothesis {
            tokens: vec![BOS_ID, EOS_ID],
            gen_score: single,
            vert_score: 0.0,
            single_score: single,
            end_state: Some(state),
        }
    }

    fn grid(w: usize, c: usize, seed: u64) -> Vec<Vec<CaptionHypothesis>> {
        (0..w)
            .map(|i| {
                (0..c)
                    .map(|j| {
                        let x = (seed * 13 + i as u64 * 5 + j as u64) as f64;
                        hyp((x * 0.71).sin(), vec![(x * 1.3).cos(), (x * 0.4).sin()])
                    })
                    .collect()
            })
            .collect()
    }

    fn brute(per_image: &[Vec<CaptionHypothesis>], scorer: &dyn CoherenceScorer) -> (Vec<usize>, f64) {
        let w = per_image.len();
        let c = per_image[0].len();
        let mut best: Option<(Vec<usize>, f64)> = None;
        for code in 0..c.pow(w as u32) {
            let picks: Vec<usize> = (0..w).map(|i| (code / c.pow((w - 1 - i) as u32)) % c).collect();
            let chosen: Vec<&CaptionHypothesis> = picks.iter().enumerate().map(|(i, &j)| &per_image[i][j]).collect();
            let mean = chosen.iter().map(|h| h.single_score).sum::<f64>() / w as f64;
            let mut pair_sum = 0.0;
            let mut n = 0;
            for a in 0..w {
                for b in a + 1..w {
                    pair_sum += scorer.score(&concat(chosen[a].end_state.as_ref().unwrap(), chosen[b].end_state.as_ref().unwrap()));
                    n += 1;
                }
            }
            let s = mean + if n > 0 { pair_sum / n as f64 } else { 0.0 };
            if best.as_ref().is_none_or(|b| s > b.1) {
                best = Some((picks, s));
            }
        }
        best.unwrap()
    }

    fn pair_scorer() -> impl Fn(&[f64]) -> f64 {
        |x: &[f64]| 1.5 * x[0] * x[2] - 0.8 * x[1] * x[3] + 0.3 * x[0]
    }

    #[test]
    fn full_width_caption_beam_matches_brute_force() {
        let scorer = pair_scorer();
        for w in 1..=3 {
            for c in 1..=3 {
                for seed in 0..20 {
                    let g = grid(w, c, seed);
                    let seq = caption_beam_search(&g, &scorer, c.pow(w as u32), 1.0).unwrap();
                    let (picks, score) = brute(&g, &scorer);
                    assert_eq!(seq.picks, picks);
                    assert!((seq.seq_score - score).abs() < 1e-12);
                    let chosen: Vec<&CaptionHypothesis> = seq.chosen.iter().collect();
                    assert!((sequence_score(&chosen, &scorer, 1.0).unwrap() - seq.seq_score).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn single_image_picks_best_single_score() {
        let g = grid(1, 3, 4);
        let panic_scorer = |_: &[f64]| -> f64 { panic!("no pairs for one image") };
        let seq = caption_beam_search(&g, &panic_scorer, 3, 1.0).unwrap();
        let best = (0..3)
            .max_by(|&a, &b| g[0][a].single_score.partial_cmp(&g[0][b].single_score).unwrap())
            .unwrap();
        assert_eq!(seq.picks, vec![best]);
    }

    #[test]
    fn zero_hori_scorer_decouples_images() {
        let zero = |_: &[f64]| 0.0;
        for seed in 0..10 {
            let g = grid(3, 3, seed);
            let seq = caption_beam_search(&g, &zero, 3, 1.0).unwrap();
            for (i, cands) in g.iter().enumerate() {
                let best = (0..3)
                    .max_by(|&a, &b| cands[a].single_score.partial_cmp(&cands[b].single_score).unwrap())
                    .unwrap();
                assert_eq!(seq.picks[i], best);
            }
        }
    }

    #[test]
    fn wider_caption_beam_never_hurts_for_two_images() {
        let scorer = pair_scorer();
        for seed in 0..50 {
            let g = grid(2, 3, seed);
            let mut last = f64::NEG_INFINITY;
            for beam in 1..=9 {
                let s = caption_beam_search(&g, &scorer, beam, 1.0).unwrap().seq_score;
                assert!(s >= last - 1e-12);
                last = s;
            }
        }
    }

    #[test]
    fn exhaustive_caption_beam_dominates_any_beam() {
        let scorer = pair_scorer();
        for seed in 0..50 {
            let g = grid(3, 3, seed);
            let best = caption_beam_search(&g, &scorer, 27, 1.0).unwrap().seq_score;
            for beam in 1..27 {
                assert!(caption_beam_search(&g, &scorer, beam, 1.0).unwrap().seq_score <= best + 1e-12);
            }
        }
    }

    #[test]
    fn empty_candidates_are_a_contract_error() {
        let mut g = grid(2, 2, 0);
        g[1].clear();
        assert!(matches!(caption_beam_search(&g, &pair_scorer(), 3, 1.0), Err(Error::Contract(_))));
    }
}
