use std::cmp::Ordering;

use serde::Serialize;

use super::{ModelError, Result};

/// Anything that yields next-token log-probabilities step by step.
pub trait StepModel {
    type State: Clone;

    fn vocab_size(&self) -> usize;
    fn eos(&self) -> usize;
    /// State and next-token log-probabilities before any token is emitted.
    fn start(&self) -> (Self::State, Vec<f64>);
    /// Feeds `token` after `state`.
    fn advance(&self, state: &Self::State, token: usize) -> (Self::State, Vec<f64>);
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BeamHypothesis {
    /// Generated tokens, without the end-of-sequence marker.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    /// Length counting the end marker of finished hypotheses.
    pub fn scored_len(&self) -> usize {
        (self.tokens.len() + usize::from(self.finished)).max(1)
    }

    /// Average log-probability per token.
    pub fn score(&self) -> f64 {
        self.log_prob / self.scored_len() as f64
    }
}

fn rank_final(a: &BeamHypothesis, b: &BeamHypothesis) -> Ordering {
    b.score()
        .total_cmp(&a.score())
        .then_with(|| a.tokens.cmp(&b.tokens))
        .then_with(|| b.finished.cmp(&a.finished))
}

struct Alive<S> {
    tokens: Vec<usize>,
    log_prob: f64,
    state: S,
    next: Vec<f64>,
}

/// Beam search ranked by cumulative log-probability during expansion and by
/// average log-probability per token in the returned list.
pub fn beam_search<M: StepModel>(model: &M, width: usize, max_len: usize) -> Result<Vec<BeamHypothesis>> {
    if width == 0 {
        return Err(ModelError::ZeroBeamWidth);
    }
    let eos = model.eos();
    let (state, next) = model.start();
    let mut alive = vec![Alive {
        tokens: Vec::new(),
        log_prob: 0.0,
        state,
        next,
    }];
    let mut finished: Vec<BeamHypothesis> = Vec::new();

    for step in 0..max_len {
        let mut cand: Vec<(f64, usize, usize)> = Vec::with_capacity(alive.len() * model.vocab_size());
        for (b, h) in alive.iter().enumerate() {
            for (t, &lp) in h.next.iter().enumerate() {
                cand.push((h.log_prob + lp, b, t));
            }
        }
        cand.sort_by(|x, y| {
            y.0.total_cmp(&x.0)
                .then(x.2.cmp(&y.2))
                .then_with(|| alive[x.1].tokens.cmp(&alive[y.1].tokens))
        });
        let mut chosen: Vec<(f64, usize, usize)> = Vec::with_capacity(width);
        for (rank, &(lp, b, t)) in cand.iter().enumerate() {
            if t == eos {
                if rank < width {
                    finished.push(BeamHypothesis {
                        tokens: alive[b].tokens.clone(),
                        log_prob: lp,
                        finished: true,
                    });
                }
            } else if chosen.len() < width {
                chosen.push((lp, b, t));
            }
            if rank + 1 >= width && chosen.len() == width {
                break;
            }
        }
        let last = step + 1 == max_len || finished.len() >= width;
        alive = chosen
            .into_iter()
            .map(|(lp, b, t)| {
                let mut tokens = alive[b].tokens.clone();
                tokens.push(t);
                let (state, next) = if last {
                    (alive[b].state.clone(), Vec::new())
                } else {
                    model.advance(&alive[b].state, t)
                };
                Alive {
                    tokens,
                    log_prob: lp,
                    state,
                    next,
                }
            })
            .collect();
        if last || alive.is_empty() {
            break;
        }
    }

    let mut out = finished;
    out.extend(alive.into_iter().map(|h| BeamHypothesis {
        tokens: h.tokens,
        log_prob: h.log_prob,
        finished: false,
    }));
    out.sort_by(rank_final);
    out.truncate(width);
    Ok(out)
}

/// Argmax decoding, lowest token id on ties.
pub fn greedy_search<M: StepModel>(model: &M, max_len: usize) -> BeamHypothesis {
    let eos = model.eos();
    let (mut state, mut next) = model.start();
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    for step in 0..max_len {
        let (t, lp) = next
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (t, &lp)| if lp > best.1 { (t, lp) } else { best });
        log_prob += lp;
        if t == eos {
            return BeamHypothesis {
                tokens,
                log_prob,
                finished: true,
            };
        }
        tokens.push(t);
        if step + 1 < max_len {
            (state, next) = model.advance(&state, t);
        }
    }
    BeamHypothesis {
        tokens,
        log_prob,
        finished: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::kernels::log_softmax;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Logits indexed by position only.
    struct Positional {
        table: Vec<Vec<f64>>,
        eos: usize,
    }

    impl StepModel for Positional {
        type State = usize;
        fn vocab_size(&self) -> usize {
            self.table[0].len()
        }
        fn eos(&self) -> usize {
            self.eos
        }
        fn start(&self) -> (usize, Vec<f64>) {
            (0, log_softmax(&self.table[0]))
        }
        fn advance(&self, s: &usize, _t: usize) -> (usize, Vec<f64>) {
            let p = (s + 1).min(self.table.len() - 1);
            (p, log_softmax(&self.table[p]))
        }
    }

    /// Logits that depend on the full history through a hash.
    struct Hashed {
        vocab: usize,
        seed: u64,
    }

    impl StepModel for Hashed {
        type State = Vec<usize>;
        fn vocab_size(&self) -> usize {
            self.vocab
        }
        fn eos(&self) -> usize {
            0
        }
        fn start(&self) -> (Vec<usize>, Vec<f64>) {
            let s = Vec::new();
            let lp = self.logits(&s);
            (s, lp)
        }
        fn advance(&self, s: &Vec<usize>, t: usize) -> (Vec<usize>, Vec<f64>) {
            let mut s = s.clone();
            s.push(t);
            let lp = self.logits(&s);
            (s, lp)
        }
    }

    impl Hashed {
        fn logits(&self, hist: &[usize]) -> Vec<f64> {
            let mut h = self.seed;
            for &t in hist {
                h = h.wrapping_mul(6364136223846793005).wrapping_add(t as u64 + 1);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(h);
            let z: Vec<f64> = (0..self.vocab).map(|_| rng.gen_range(-2.0..2.0)).collect();
            log_softmax(&z)
        }
    }

    /// Every complete sequence up to `max_len`, scored like the search.
    fn enumerate<M: StepModel>(m: &M, max_len: usize) -> Vec<BeamHypothesis> {
        fn go<M: StepModel>(m: &M, s: &M::State, next: &[f64], toks: Vec<usize>, lp: f64, max_len: usize, out: &mut Vec<BeamHypothesis>) {
            for (t, &l) in next.iter().enumerate() {
                if t == m.eos() {
                    out.push(BeamHypothesis { tokens: toks.clone(), log_prob: lp + l, finished: true });
                    continue;
                }
                let mut nt = toks.clone();
                nt.push(t);
                if nt.len() == max_len {
                    out.push(BeamHypothesis { tokens: nt, log_prob: lp + l, finished: false });
                } else {
                    let (s2, n2) = m.advance(s, t);
                    go(m, &s2, &n2, nt, lp + l, max_len, out);
                }
            }
        }
        let (s, next) = m.start();
        let mut out = Vec::new();
        go(m, &s, &next, Vec::new(), 0.0, max_len, &mut out);
        out.sort_by(rank_final);
        out
    }

    #[test]
    fn top_two_match_enumeration() {
        // Three tokens, 2 is the end marker.
        let m = Positional {
            table: vec![vec![2.0, 1.0, -1.0], vec![0.5, 1.5, 0.0], vec![-1.0, 0.0, 3.0]],
            eos: 2,
        };
        let beams = beam_search(&m, 2, 3).unwrap();
        let oracle = enumerate(&m, 3);
        assert_eq!(beams.len(), 2);
        for (b, o) in beams.iter().zip(&oracle) {
            assert_eq!(b.tokens, o.tokens);
            assert_eq!(b.finished, o.finished);
            assert!((b.log_prob - o.log_prob).abs() < 1e-12);
        }
    }

    #[test]
    fn width_one_is_greedy() {
        for seed in 0..30 {
            let m = Hashed { vocab: 6, seed };
            let g = greedy_search(&m, 8);
            let b = beam_search(&m, 1, 8).unwrap();
            assert_eq!(b, vec![g]);
        }
    }

    #[test]
    fn scores_non_increasing() {
        for seed in 0..30 {
            let m = Hashed { vocab: 5, seed };
            let out = beam_search(&m, 4, 6).unwrap();
            assert!(!out.is_empty() && out.len() <= 4);
            for w in out.windows(2) {
                assert!(w[0].score() >= w[1].score());
            }
        }
    }

    #[test]
    fn width_prefix_on_exact_model() {
        // Position-only logits with a single end position make the search
        // exact, so a wider beam extends a narrower one.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mut table: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            for row in table.iter_mut().take(3) {
                row[3] = -1e9;
            }
            let m = Positional { table, eos: 3 };
            let wide = beam_search(&m, 4, 4).unwrap();
            for k in 1..4 {
                let narrow = beam_search(&m, k, 4).unwrap();
                assert_eq!(narrow[..], wide[..k]);
            }
        }
    }

    #[test]
    fn zero_width_rejected() {
        let m = Hashed { vocab: 3, seed: 0 };
        assert!(beam_search(&m, 0, 3).is_err());
    }
}
