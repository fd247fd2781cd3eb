use std::collections::BTreeMap;

use super::{Result, TuningError};
use crate::model::Seq2Seq;
use crate::tensor::{BlockLabel, Checkpoint, Parameter, Tensor};

pub const DEFAULT_PREFIX_LENGTH: usize = 200;

/// Key and value prefix states for every encoder and decoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixBank {
    pub length: usize,
    pub d_model: usize,
    /// `(key, value)` rows per encoder block, each `length × d_model`.
    pub encoder: Vec<(Vec<f64>, Vec<f64>)>,
    pub decoder: Vec<(Vec<f64>, Vec<f64>)>,
}

impl PrefixBank {
    /// Same rows in every block and both streams.
    pub fn broadcast(rows: Vec<f64>, length: usize, d_model: usize, encoder_layers: usize, decoder_layers: usize) -> Self {
        assert_eq!(rows.len(), length * d_model);
        let pair = (rows.clone(), rows);
        Self {
            length,
            d_model,
            encoder: vec![pair.clone(); encoder_layers],
            decoder: vec![pair; decoder_layers],
        }
    }

    pub fn zeros(length: usize, d_model: usize, encoder_layers: usize, decoder_layers: usize) -> Self {
        Self::broadcast(vec![0.0; length * d_model], length, d_model, encoder_layers, decoder_layers)
    }

    pub fn parameter_count(&self) -> usize {
        (self.encoder.len() + self.decoder.len()) * 2 * self.length * self.d_model
    }

    /// Reads the bank currently attached to a model.
    pub fn from_model(model: &Seq2Seq) -> Option<Self> {
        let ids = model.prefix.as_ref()?;
        let get = |&(k, v): &(crate::tensor::ParamId, crate::tensor::ParamId)| {
            (
                model.store.get(k).tensor.data().to_vec(),
                model.store.get(v).tensor.data().to_vec(),
            )
        };
        Some(Self {
            length: ids.length,
            d_model: model.config().d_model,
            encoder: ids.encoder.iter().map(get).collect(),
            decoder: ids.decoder.iter().map(get).collect(),
        })
    }

    /// The bank as checkpoint entries labelled `prefix`.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut entries = Vec::new();
        for (side, blocks) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            for (i, (k, v)) in blocks.iter().enumerate() {
                for (stream, values) in [("key", k), ("value", v)] {
                    entries.push(crate::tensor::CheckpointEntry {
                        id: crate::model::prefix_param_name(side, i, stream),
                        block: BlockLabel::Prefix,
                        shape: vec![self.length, self.d_model],
                        frozen: false,
                        values: values.clone(),
                    });
                }
            }
        }
        Checkpoint { entries }
    }
}

/// Words by descending count, ties in lexicographic order.
pub fn frequent_words(counts: &BTreeMap<String, usize>, n: usize) -> Vec<String> {
    let mut words: Vec<(&String, &usize)> = counts.iter().collect();
    words.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
    words.into_iter().take(n).map(|(w, _)| w.clone()).collect()
}

/// Bank whose rows embed the `length` most frequent words; a word spanning
/// several subword tokens gets the mean of their embeddings. Rows beyond the
/// available words hold the mean embedding of the whole table. Each side
/// passes the rows through its embedding layer norm, so every block starts
/// from states on the scale of its own inputs.
pub fn init_prefix_from_counts(
    counts: &BTreeMap<String, usize>,
    model: &Seq2Seq,
    length: usize,
    encode: impl Fn(&str) -> Vec<usize>,
) -> Result<PrefixBank> {
    let cfg = model.config();
    if counts.is_empty() {
        return Err(TuningError::EmptyCorpus);
    }
    if length == 0 || length > cfg.max_positions {
        return Err(TuningError::DimensionMismatch(format!(
            "prefix length {length} outside 1..={}",
            cfg.max_positions
        )));
    }
    let d = cfg.d_model;
    let table = model.store.get(model.layout.embed).tensor.data();
    let mut rows = Vec::with_capacity(length * d);
    for word in frequent_words(counts, length) {
        let ids: Vec<usize> = encode(&word).into_iter().filter(|&t| t < cfg.vocab_size).collect();
        if ids.is_empty() {
            continue;
        }
        let mut row = vec![0.0; d];
        for &t in &ids {
            row.iter_mut().zip(&table[t * d..(t + 1) * d]).for_each(|(r, e)| *r += e);
        }
        row.iter_mut().for_each(|r| *r /= ids.len() as f64);
        rows.extend(row);
    }
    let mut mean = vec![0.0; d];
    for chunk in table.chunks(d) {
        mean.iter_mut().zip(chunk).for_each(|(m, e)| *m += e);
    }
    mean.iter_mut().for_each(|m| *m /= cfg.vocab_size as f64);
    while rows.len() < length * d {
        rows.extend_from_slice(&mean);
    }
    let enc = model.embedding_norm(&rows, false);
    let dec = model.embedding_norm(&rows, true);
    Ok(PrefixBank {
        length,
        d_model: d,
        encoder: vec![(enc.clone(), enc); cfg.encoder_layers],
        decoder: vec![(dec.clone(), dec); cfg.decoder_layers],
    })
}

/// [`init_prefix_from_counts`] over the analysis tokens of a project corpus.
pub fn init_prefix(
    corpus: &crate::corpus::ProjectCorpus,
    model: &Seq2Seq,
    length: usize,
    vocab: &crate::corpus::SubwordVocabulary,
) -> Result<PrefixBank> {
    init_prefix_from_counts(&corpus.token_counts(), model, length, |w| vocab.encode(w))
}

/// Installs the bank as `prefix` parameters, replacing any earlier bank.
pub fn attach_prefix(model: &mut Seq2Seq, bank: &PrefixBank) -> Result<()> {
    let cfg = model.config().clone();
    if bank.d_model != cfg.d_model
        || bank.encoder.len() != cfg.encoder_layers
        || bank.decoder.len() != cfg.decoder_layers
        || bank.length == 0
    {
        return Err(TuningError::DimensionMismatch(format!(
            "bank is {}x{} over {}+{} blocks, model has d_model {} and {}+{} blocks",
            bank.length,
            bank.d_model,
            bank.encoder.len(),
            bank.decoder.len(),
            cfg.d_model,
            cfg.encoder_layers,
            cfg.decoder_layers
        )));
    }
    let n = bank.length * bank.d_model;
    if bank.encoder.iter().chain(&bank.decoder).any(|(k, v)| k.len() != n || v.len() != n) {
        return Err(TuningError::DimensionMismatch("stream length".into()));
    }
    for e in bank.to_checkpoint().entries {
        match model.store.lookup(&e.id) {
            Some(id) => {
                let p = model.store.get_mut(id);
                p.tensor = Tensor::new(e.shape, e.values)?;
            }
            None => {
                model
                    .store
                    .insert(Parameter::new(e.id, BlockLabel::Prefix, Tensor::new(e.shape, e.values)?))?;
            }
        }
    }
    let ids = model.resolve_prefix()?;
    model.set_prefix(Some(ids));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig, EOS};
    use crate::tensor::Optimizer;
    use crate::tuning::{apply_freeze_plan, make_freeze_plan, StrategyKind};

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 24,
            d_model: 8,
            num_heads: 2,
            ffn_dim: 16,
            encoder_layers: 2,
            decoder_layers: 2,
            max_positions: 16,
            tie_output_to_embedding: true,
        }
    }

    fn counts(pairs: &[(&str, usize)]) -> BTreeMap<String, usize> {
        pairs.iter().map(|(w, c)| (w.to_string(), *c)).collect()
    }

    fn encode(w: &str) -> Vec<usize> {
        match w {
            "foo" => vec![5],
            "bar" => vec![6],
            "baz" => vec![7],
            _ => vec![8, 9],
        }
    }

    #[test]
    fn rows_follow_frequency() {
        let m = build_model(&cfg(), 1).unwrap();
        let bank = init_prefix_from_counts(&counts(&[("bar", 3), ("baz", 1), ("foo", 5)]), &m, 2, encode).unwrap();
        let table = m.store.get(m.layout.embed).tensor.data();
        let raw: Vec<f64> = [&table[40..48], &table[48..56]].concat();
        for (side, decoder) in [(&bank.encoder, false), (&bank.decoder, true)] {
            let expected = m.embedding_norm(&raw, decoder);
            for (k, v) in side {
                assert_eq!(k, &expected);
                assert_eq!(v, &expected);
            }
        }
    }

    #[test]
    fn ties_are_lexicographic_and_padding_is_mean() {
        let m = build_model(&cfg(), 1).unwrap();
        assert_eq!(frequent_words(&counts(&[("b", 2), ("a", 2), ("c", 3)]), 3), vec!["c", "a", "b"]);
        let bank = init_prefix_from_counts(&counts(&[("foo", 1)]), &m, 3, encode).unwrap();
        let table = m.store.get(m.layout.embed).tensor.data();
        let mut mean = vec![0.0; 8];
        for r in table.chunks(8) {
            mean.iter_mut().zip(r).for_each(|(a, b)| *a += b / 24.0);
        }
        let expected = m.embedding_norm(&mean, false);
        for (a, b) in bank.encoder[0].0[16..].iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(init_prefix_from_counts(&BTreeMap::new(), &m, 3, encode).is_err());
    }

    #[test]
    fn masked_prefix_is_bit_identical() {
        let src = [4, 5, 6, 7];
        let tgt = [9, 10, 11, EOS];
        let base = build_model(&cfg(), 2).unwrap();
        let plain = base.forward_loss(&src, &tgt).unwrap();
        let mut m = base.clone();
        let mut bank = PrefixBank::zeros(3, 8, 2, 2);
        bank.encoder[1].0[5] = 0.7;
        bank.decoder[0].1[2] = -1.3;
        attach_prefix(&mut m, &bank).unwrap();
        let unmasked = m.forward_loss(&src, &tgt).unwrap();
        assert_ne!(unmasked.loss.to_bits(), plain.loss.to_bits());
        m.set_prefix_masked(true);
        let masked = m.forward_loss(&src, &tgt).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&masked.per_token_nll), bits(&plain.per_token_nll));
        assert_eq!(m.token_nll(&src, &tgt).unwrap(), base.token_nll(&src, &tgt).unwrap());
    }

    #[test]
    fn cached_path_sees_prefix() {
        let mut m = build_model(&cfg(), 3).unwrap();
        let bank = init_prefix_from_counts(&counts(&[("foo", 2), ("bar", 1)]), &m, 2, encode).unwrap();
        attach_prefix(&mut m, &bank).unwrap();
        let src = [4, 5, 6];
        let tgt = [7, 8, EOS];
        let g = m.forward_loss(&src, &tgt).unwrap().per_token_nll;
        let c = m.token_nll(&src, &tgt).unwrap();
        for (a, b) in g.iter().zip(&c) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn only_bank_changes_under_prefix_plan() {
        let mut m = build_model(&cfg(), 4).unwrap();
        attach_prefix(&mut m, &PrefixBank::zeros(2, 8, 2, 2)).unwrap();
        let plan = make_freeze_plan(StrategyKind::Prefix, &m.registry()).unwrap();
        apply_freeze_plan(&plan, &mut m.store).unwrap();
        let before = Checkpoint::from_store(&m.store);
        let mut opt = Optimizer::adam();
        m.train_step(&[(&[4, 5], &[6, EOS])], &mut opt, 0.01).unwrap();
        let after = Checkpoint::from_store(&m.store);
        for (a, b) in before.entries.iter().zip(&after.entries) {
            let changed = a.values.iter().zip(&b.values).any(|(x, y)| x.to_bits() != y.to_bits());
            assert_eq!(changed, a.block == BlockLabel::Prefix, "{}", a.id);
        }
        assert_eq!(PrefixBank::from_model(&m).unwrap().parameter_count(), 2 * 8 * 4 * 2);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut m = build_model(&cfg(), 4).unwrap();
        assert!(attach_prefix(&mut m, &PrefixBank::zeros(2, 6, 2, 2)).is_err());
        assert!(attach_prefix(&mut m, &PrefixBank::zeros(2, 8, 1, 2)).is_err());
    }
}
