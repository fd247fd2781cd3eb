use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::census::{parameter_layout, Init, ParameterRegistry};
use super::{ModelConfig, ModelError, Result, BOS};
use crate::tensor::{BlockLabel, Graph, NodeId, Optimizer, ParamId, ParamStore, Parameter, Tensor};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy)]
pub(crate) struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NormIds {
    pub g: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnIds {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncLayerIds {
    pub attn: AttnIds,
    pub attn_ln: NormIds,
    pub fc1: LinearIds,
    pub fc2: LinearIds,
    pub final_ln: NormIds,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecLayerIds {
    pub self_attn: AttnIds,
    pub self_ln: NormIds,
    pub cross: AttnIds,
    pub cross_ln: NormIds,
    pub fc1: LinearIds,
    pub fc2: LinearIds,
    pub final_ln: NormIds,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub embed: ParamId,
    pub enc_pos: ParamId,
    pub enc_ln: NormIds,
    pub dec_pos: ParamId,
    pub dec_ln: NormIds,
    pub enc: Vec<EncLayerIds>,
    pub dec: Vec<DecLayerIds>,
    pub lm_head: Option<ParamId>,
    pub logits_bias: ParamId,
}

/// Key and value prefix streams for every encoder and decoder block.
#[derive(Debug, Clone)]
pub(crate) struct PrefixIds {
    pub length: usize,
    pub encoder: Vec<(ParamId, ParamId)>,
    pub decoder: Vec<(ParamId, ParamId)>,
}

fn lookup(store: &ParamStore, name: &str) -> ParamId {
    store.lookup(name).unwrap_or_else(|| panic!("layout parameter `{name}` missing"))
}

fn lin(store: &ParamStore, name: &str) -> LinearIds {
    LinearIds {
        w: lookup(store, &format!("{name}.weight")),
        b: lookup(store, &format!("{name}.bias")),
    }
}

fn nrm(store: &ParamStore, name: &str) -> NormIds {
    NormIds {
        g: lookup(store, &format!("{name}.weight")),
        b: lookup(store, &format!("{name}.bias")),
    }
}

fn attn(store: &ParamStore, name: &str) -> AttnIds {
    AttnIds {
        q: lin(store, &format!("{name}.q_proj")),
        k: lin(store, &format!("{name}.k_proj")),
        v: lin(store, &format!("{name}.v_proj")),
        o: lin(store, &format!("{name}.out_proj")),
    }
}

impl Layout {
    fn resolve(cfg: &ModelConfig, store: &ParamStore) -> Self {
        Self {
            embed: lookup(store, "embed_tokens.weight"),
            enc_pos: lookup(store, "encoder.embed_positions.weight"),
            enc_ln: nrm(store, "encoder.layernorm_embedding"),
            dec_pos: lookup(store, "decoder.embed_positions.weight"),
            dec_ln: nrm(store, "decoder.layernorm_embedding"),
            enc: (0..cfg.encoder_layers)
                .map(|i| {
                    let p = format!("encoder.layers.{i}");
                    EncLayerIds {
                        attn: attn(store, &format!("{p}.self_attn")),
                        attn_ln: nrm(store, &format!("{p}.self_attn_layer_norm")),
                        fc1: lin(store, &format!("{p}.fc1")),
                        fc2: lin(store, &format!("{p}.fc2")),
                        final_ln: nrm(store, &format!("{p}.final_layer_norm")),
                    }
                })
                .collect(),
            dec: (0..cfg.decoder_layers)
                .map(|i| {
                    let p = format!("decoder.layers.{i}");
                    DecLayerIds {
                        self_attn: attn(store, &format!("{p}.self_attn")),
                        self_ln: nrm(store, &format!("{p}.self_attn_layer_norm")),
                        cross: attn(store, &format!("{p}.encoder_attn")),
                        cross_ln: nrm(store, &format!("{p}.encoder_attn_layer_norm")),
                        fc1: lin(store, &format!("{p}.fc1")),
                        fc2: lin(store, &format!("{p}.fc2")),
                        final_ln: nrm(store, &format!("{p}.final_layer_norm")),
                    }
                })
                .collect(),
            lm_head: store.lookup("lm_head.weight"),
            logits_bias: lookup(store, "final_logits_bias"),
        }
    }
}

/// Mean loss and the per-token terms it averages.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub per_token_nll: Vec<f64>,
}

/// The encoder-decoder model together with its parameters.
#[derive(Debug, Clone)]
pub struct Seq2Seq {
    config: ModelConfig,
    pub store: ParamStore,
    pub(crate) layout: Layout,
    pub(crate) prefix: Option<PrefixIds>,
    prefix_masked: bool,
}

pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Seq2Seq> {
    Seq2Seq::new(config.clone(), seed)
}

pub(crate) fn prefix_param_name(side: &str, layer: usize, stream: &str) -> String {
    format!("prefix.{side}.{layer}.{stream}")
}

impl Seq2Seq {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut store = ParamStore::new();
        for spec in parameter_layout(&config) {
            let n = spec.numel();
            let data = match spec.init {
                Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            store.insert(Parameter::new(spec.id, spec.block, Tensor::new(spec.shape, data)?))?;
        }
        let layout = Layout::resolve(&config, &store);
        Ok(Self {
            config,
            store,
            layout,
            prefix: None,
            prefix_masked: false,
        })
    }

    /// Rebuilds a model around an existing parameter store, e.g. one loaded
    /// from a checkpoint. Prefix streams are picked up when present.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        for spec in parameter_layout(&config) {
            let id = store
                .lookup(&spec.id)
                .ok_or_else(|| ModelError::InvalidConfig(format!("parameter `{}` missing", spec.id)))?;
            if store.get(id).tensor.shape() != spec.shape.as_slice() {
                return Err(ModelError::InvalidConfig(format!("parameter `{}` has the wrong shape", spec.id)));
            }
        }
        let layout = Layout::resolve(&config, &store);
        let mut model = Self {
            config,
            store,
            layout,
            prefix: None,
            prefix_masked: false,
        };
        if model.store.lookup(&prefix_param_name("encoder", 0, "key")).is_some() {
            model.prefix = Some(model.resolve_prefix()?);
        }
        Ok(model)
    }

    pub(crate) fn resolve_prefix(&self) -> Result<PrefixIds> {
        let d = self.config.d_model;
        let mut length = None;
        let mut get = |side: &str, layer: usize, stream: &str| -> Result<ParamId> {
            let name = prefix_param_name(side, layer, stream);
            let id = self
                .store
                .lookup(&name)
                .ok_or_else(|| ModelError::PrefixMismatch(format!("`{name}` missing")))?;
            let (p, cols) = self.store.get(id).tensor.dims2();
            if cols != d || *length.get_or_insert(p) != p {
                return Err(ModelError::PrefixMismatch(format!("`{name}` has shape [{p},{cols}]")));
            }
            Ok(id)
        };
        let mut encoder = Vec::new();
        for i in 0..self.config.encoder_layers {
            encoder.push((get("encoder", i, "key")?, get("encoder", i, "value")?));
        }
        let mut decoder = Vec::new();
        for i in 0..self.config.decoder_layers {
            decoder.push((get("decoder", i, "key")?, get("decoder", i, "value")?));
        }
        Ok(PrefixIds {
            length: length.unwrap_or(0),
            encoder,
            decoder,
        })
    }

    pub(crate) fn set_prefix(&mut self, ids: Option<PrefixIds>) {
        self.prefix = ids;
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn registry(&self) -> ParameterRegistry {
        ParameterRegistry::from_store(&self.store, self.config.encoder_layers, self.config.decoder_layers)
    }

    pub fn prefix_length(&self) -> Option<usize> {
        self.prefix.as_ref().map(|p| p.length)
    }

    /// With the mask on, attention gives the prefix positions zero weight.
    pub fn set_prefix_masked(&mut self, masked: bool) {
        self.prefix_masked = masked;
    }

    pub fn prefix_masked(&self) -> bool {
        self.prefix_masked
    }

    pub(crate) fn active_prefix(&self) -> Option<&PrefixIds> {
        self.prefix.as_ref().filter(|_| !self.prefix_masked)
    }

    pub(crate) fn check_tokens(&self, tokens: &[usize], what: &'static str) -> Result<()> {
        if tokens.is_empty() {
            return Err(ModelError::EmptySequence(what));
        }
        if tokens.len() > self.config.max_positions {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_positions,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn linear_graph(&self, g: &mut Graph, x: NodeId, ids: LinearIds) -> Result<NodeId> {
        let w = g.param(&self.store, ids.w);
        let b = g.param(&self.store, ids.b);
        let y = g.matmul(x, w)?;
        Ok(g.add(y, b)?)
    }

    fn norm_graph(&self, g: &mut Graph, x: NodeId, ids: NormIds) -> Result<NodeId> {
        let gamma = g.param(&self.store, ids.g);
        let beta = g.param(&self.store, ids.b);
        Ok(g.layernorm(x, gamma, beta)?)
    }

    fn attention_graph(
        &self,
        g: &mut Graph,
        ids: &AttnIds,
        x: NodeId,
        kv_src: NodeId,
        prefix: Option<(ParamId, ParamId)>,
        causal: bool,
    ) -> Result<NodeId> {
        let n = g.value(x).dims2().0;
        let m = g.value(kv_src).dims2().0;
        let q = self.linear_graph(g, x, ids.q)?;
        let mut k = self.linear_graph(g, kv_src, ids.k)?;
        let mut v = self.linear_graph(g, kv_src, ids.v)?;
        let mut p = 0;
        if let Some((pk, pv)) = prefix {
            let pk = g.param(&self.store, pk);
            let pv = g.param(&self.store, pv);
            p = g.value(pk).dims2().0;
            let pk = self.linear_graph(g, pk, ids.k)?;
            let pv = self.linear_graph(g, pv, ids.v)?;
            k = g.concat(&[pk, k], 0)?;
            v = g.concat(&[pv, v], 0)?;
        }
        let mask = if causal || (p > 0 && self.prefix_masked) {
            let cols = p + m;
            let mut allowed = vec![true; n * cols];
            for i in 0..n {
                for c in 0..cols {
                    allowed[i * cols + c] = if c < p { !self.prefix_masked } else { !causal || c - p <= i };
                }
            }
            Some(Arc::new(allowed))
        } else {
            None
        };
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.num_heads);
        for h in 0..self.config.num_heads {
            let qh = g.slice(q, 1, h * dh, (h + 1) * dh)?;
            let kh = g.slice(k, 1, h * dh, (h + 1) * dh)?;
            let vh = g.slice(v, 1, h * dh, (h + 1) * dh)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, scale)?;
            let a = g.softmax(s, mask.clone())?;
            heads.push(g.matmul(a, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? };
        self.linear_graph(g, cat, ids.o)
    }

    fn ffn_graph(&self, g: &mut Graph, x: NodeId, fc1: LinearIds, fc2: LinearIds) -> Result<NodeId> {
        let h = self.linear_graph(g, x, fc1)?;
        let h = g.gelu(h)?;
        self.linear_graph(g, h, fc2)
    }

    fn embed_graph(&self, g: &mut Graph, tokens: &[usize], pos: ParamId, ln: NormIds) -> Result<NodeId> {
        let table = g.param(&self.store, self.layout.embed);
        let e = g.embedding(table, tokens)?;
        let pos_table = g.param(&self.store, pos);
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let p = g.embedding(pos_table, &positions)?;
        let x = g.add(e, p)?;
        self.norm_graph(g, x, ln)
    }

    /// Encoder output states, one row per source token.
    pub fn encode_graph(&self, g: &mut Graph, src: &[usize]) -> Result<NodeId> {
        self.check_tokens(src, "source")?;
        let mut x = self.embed_graph(g, src, self.layout.enc_pos, self.layout.enc_ln)?;
        for (i, layer) in self.layout.enc.iter().enumerate() {
            let prefix = self.prefix.as_ref().map(|p| p.encoder[i]);
            let a = self.attention_graph(g, &layer.attn, x, x, prefix, false)?;
            let r = g.add(x, a)?;
            x = self.norm_graph(g, r, layer.attn_ln)?;
            let f = self.ffn_graph(g, x, layer.fc1, layer.fc2)?;
            let r = g.add(x, f)?;
            x = self.norm_graph(g, r, layer.final_ln)?;
        }
        Ok(x)
    }

    /// Final decoder states for the given decoder inputs.
    pub fn decode_graph(&self, g: &mut Graph, memory: NodeId, dec_in: &[usize]) -> Result<NodeId> {
        self.check_tokens(dec_in, "decoder input")?;
        let mut x = self.embed_graph(g, dec_in, self.layout.dec_pos, self.layout.dec_ln)?;
        for (i, layer) in self.layout.dec.iter().enumerate() {
            let prefix = self.prefix.as_ref().map(|p| p.decoder[i]);
            let a = self.attention_graph(g, &layer.self_attn, x, x, prefix, true)?;
            let r = g.add(x, a)?;
            x = self.norm_graph(g, r, layer.self_ln)?;
            let c = self.attention_graph(g, &layer.cross, x, memory, None, false)?;
            let r = g.add(x, c)?;
            x = self.norm_graph(g, r, layer.cross_ln)?;
            let f = self.ffn_graph(g, x, layer.fc1, layer.fc2)?;
            let r = g.add(x, f)?;
            x = self.norm_graph(g, r, layer.final_ln)?;
        }
        Ok(x)
    }

    /// Output projection node (the transposed embedding when tied), cached
    /// per graph through `out_proj`.
    fn logits_graph(&self, g: &mut Graph, h: NodeId, out_proj: &mut Option<NodeId>) -> Result<NodeId> {
        let w = match *out_proj {
            Some(w) => w,
            None => {
                let w = match self.layout.lm_head {
                    Some(id) => g.param(&self.store, id),
                    None => {
                        let e = g.param(&self.store, self.layout.embed);
                        g.transpose(e)?
                    }
                };
                *out_proj = Some(w);
                w
            }
        };
        let z = g.matmul(h, w)?;
        let b = g.param(&self.store, self.layout.logits_bias);
        Ok(g.add(z, b)?)
    }

    /// Token-mean cross-entropy over a batch of (source, target) pairs.
    /// Targets are predicted with teacher forcing from `[BOS] + target[..n-1]`.
    pub fn batch_loss_graph(&self, g: &mut Graph, pairs: &[(&[usize], &[usize])]) -> Result<(NodeId, Vec<Vec<f64>>)> {
        if pairs.is_empty() {
            return Err(ModelError::EmptySequence("batch"));
        }
        let total: usize = pairs.iter().map(|(_, t)| t.len()).sum();
        let mut out_proj = None;
        let mut loss: Option<NodeId> = None;
        let mut nll = Vec::with_capacity(pairs.len());
        for (src, tgt) in pairs {
            self.check_tokens(tgt, "target")?;
            let memory = self.encode_graph(g, src)?;
            let mut dec_in = Vec::with_capacity(tgt.len());
            dec_in.push(BOS);
            dec_in.extend_from_slice(&tgt[..tgt.len() - 1]);
            let h = self.decode_graph(g, memory, &dec_in)?;
            let logits = self.logits_graph(g, h, &mut out_proj)?;
            let ce = g.cross_entropy(logits, tgt)?;
            nll.push(g.token_nll(ce).expect("cross-entropy node").to_vec());
            let weighted = g.scale(ce, tgt.len() as f64 / total as f64)?;
            loss = Some(match loss {
                Some(l) => g.add(l, weighted)?,
                None => weighted,
            });
        }
        Ok((loss.expect("non-empty batch"), nll))
    }

    /// Teacher-forced loss for one pair, without recording gradients.
    pub fn forward_loss(&self, src: &[usize], tgt: &[usize]) -> Result<LossOutput> {
        let mut g = Graph::inference();
        let (loss, mut nll) = self.batch_loss_graph(&mut g, &[(src, tgt)])?;
        Ok(LossOutput {
            loss: g.value(loss).data()[0],
            per_token_nll: nll.pop().expect("one pair"),
        })
    }

    /// One optimizer step on a batch; returns the batch loss before the update.
    pub fn train_step(&mut self, pairs: &[(&[usize], &[usize])], opt: &mut Optimizer, lr: f64) -> Result<f64> {
        let mut g = Graph::new();
        let (loss, _) = self.batch_loss_graph(&mut g, pairs)?;
        let value = g.value(loss).data()[0];
        g.backward(loss, &mut self.store)?;
        opt.step(&mut self.store, lr)?;
        Ok(value)
    }

    /// Block labels of the base model, in plotting order.
    pub fn block_labels(&self) -> Vec<BlockLabel> {
        self.registry().blocks()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{count_parameters, EOS};
    use crate::tuning::StrategyKind;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            d_model: 8,
            num_heads: 2,
            ffn_dim: 12,
            encoder_layers: 1,
            decoder_layers: 1,
            max_positions: 16,
            tie_output_to_embedding: true,
        }
    }

    #[test]
    fn census_covers_allocation() {
        let m = build_model(&ModelConfig::toy(), 1).unwrap();
        let c = count_parameters(m.config(), StrategyKind::Custom, 0).unwrap();
        assert_eq!(m.store.total_elements() as u64, c.total);
        assert_eq!(m.registry().total(), m.store.total_elements());
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = build_model(&tiny(), 9).unwrap();
        let b = build_model(&tiny(), 9).unwrap();
        let c = build_model(&tiny(), 10).unwrap();
        let bytes = |m: &Seq2Seq| -> Vec<u64> {
            m.store.iter().flat_map(|p| p.tensor.data().iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bytes(&a), bytes(&b));
        assert_ne!(bytes(&a), bytes(&c));
    }

    #[test]
    fn uniform_logits_give_vocab_perplexity() {
        let mut m = build_model(&tiny(), 3).unwrap();
        let id = m.layout.embed;
        m.store.get_mut(id).tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let out = m.forward_loss(&[4, 5, 6], &[7, 8, EOS]).unwrap();
        assert!((out.loss.exp() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn loss_is_mean_of_token_terms() {
        let m = build_model(&tiny(), 4).unwrap();
        let out = m.forward_loss(&[4, 5, 6, 7], &[9, 3, 11, EOS]).unwrap();
        assert_eq!(out.per_token_nll.len(), 4);
        let mean = out.per_token_nll.iter().sum::<f64>() / 4.0;
        assert!((mean - out.loss).abs() < 1e-12);
    }

    #[test]
    fn overfits_single_pair() {
        let mut m = build_model(&tiny(), 5).unwrap();
        let src = [4, 5, 6];
        let tgt = [10, 12, EOS];
        let mut opt = Optimizer::adam();
        let first = m.train_step(&[(&src, &tgt)], &mut opt, 0.01).unwrap();
        let mut last = first;
        for _ in 0..150 {
            last = m.train_step(&[(&src, &tgt)], &mut opt, 0.01).unwrap();
        }
        assert!(last < 0.05 * first, "{first} -> {last}");
    }

    #[test]
    fn rejects_bad_tokens() {
        let m = build_model(&tiny(), 1).unwrap();
        assert!(matches!(m.forward_loss(&[4, 99], &[5]), Err(ModelError::TokenOutOfRange { .. })));
        assert!(matches!(m.forward_loss(&[], &[5]), Err(ModelError::EmptySequence(_))));
        assert!(matches!(m.forward_loss(&[4], &[]), Err(ModelError::EmptySequence(_))));
        let long = vec![4; 17];
        assert!(matches!(m.forward_loss(&long, &[5]), Err(ModelError::SequenceTooLong { .. })));
    }

    #[test]
    fn untied_head_trains() {
        let cfg = ModelConfig {
            tie_output_to_embedding: false,
            ..tiny()
        };
        let mut m = build_model(&cfg, 2).unwrap();
        assert!(m.layout.lm_head.is_some());
        let mut opt = Optimizer::sgd();
        m.train_step(&[(&[4, 5], &[6, EOS])], &mut opt, 0.1).unwrap();
    }
}
