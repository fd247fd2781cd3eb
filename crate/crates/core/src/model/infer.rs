//! Graph-free forward pass with a key/value cache for step-wise decoding.

use super::beam::StepModel;
use super::transformer::{AttnIds, LinearIds, NormIds, Seq2Seq};
use super::{Result, BOS, EOS};
use crate::tensor::kernels;
use crate::tensor::ParamId;

/// Encoder output plus the cross-attention keys and values of every decoder
/// layer.
#[derive(Debug, Clone)]
pub struct EncoderMemory {
    pub hidden: Vec<f64>,
    pub len: usize,
    cross_k: Vec<Vec<f64>>,
    cross_v: Vec<Vec<f64>>,
}

/// Self-attention cache of a partially decoded sequence.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub position: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl Seq2Seq {
    fn w(&self, id: ParamId) -> &[f64] {
        self.store.get(id).tensor.data()
    }

    fn linear_rows(&self, x: &[f64], rows: usize, ids: LinearIds) -> Vec<f64> {
        let (fin, fout) = self.store.get(ids.w).tensor.dims2();
        let mut y = kernels::matmul(x, self.w(ids.w), rows, fin, fout);
        kernels::add_row_bias(&mut y, self.w(ids.b));
        y
    }

    fn norm_rows(&self, x: &[f64], rows: usize, ids: NormIds) -> Vec<f64> {
        kernels::layernorm(x, self.w(ids.g), self.w(ids.b), rows, self.config().d_model)
    }

    fn ffn_rows(&self, x: &[f64], rows: usize, fc1: LinearIds, fc2: LinearIds) -> Vec<f64> {
        let mut h = self.linear_rows(x, rows, fc1);
        h.iter_mut().for_each(|v| *v = kernels::gelu(*v));
        self.linear_rows(&h, rows, fc2)
    }

    /// Multi-head attention of `n` query rows over `m` key/value rows;
    /// query row `i` sees keys `0..visible(i)`.
    fn attend(&self, q: &[f64], n: usize, k: &[f64], v: &[f64], m: usize, visible: impl Fn(usize) -> usize) -> Vec<f64> {
        let d = self.config().d_model;
        let dh = self.config().head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; n * d];
        let mut scores = vec![0.0; m];
        for i in 0..n {
            let vis = visible(i).min(m);
            for h in 0..self.config().num_heads {
                let off = h * dh;
                let qi = &q[i * d + off..i * d + off + dh];
                let mut max = f64::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate().take(vis) {
                    let kj = &k[j * d + off..j * d + off + dh];
                    let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                    *s = dot * scale;
                    max = max.max(*s);
                }
                let mut total = 0.0;
                for s in scores.iter_mut().take(vis) {
                    *s = (*s - max).exp();
                    total += *s;
                }
                let o = &mut out[i * d + off..i * d + off + dh];
                for (j, s) in scores.iter().enumerate().take(vis) {
                    let p = s / total;
                    let vj = &v[j * d + off..j * d + off + dh];
                    o.iter_mut().zip(vj).for_each(|(a, b)| *a += p * b);
                }
            }
        }
        out
    }

    /// Prefix states projected like hidden rows.
    fn prefix_rows(&self, id: ParamId, proj: LinearIds) -> Vec<f64> {
        let x = self.w(id);
        self.linear_rows(x, x.len() / self.config().d_model, proj)
    }

    /// Embedding layer norm of one side applied to raw rows.
    pub(crate) fn embedding_norm(&self, rows: &[f64], decoder: bool) -> Vec<f64> {
        let ln = if decoder { self.layout.dec_ln } else { self.layout.enc_ln };
        self.norm_rows(rows, rows.len() / self.config().d_model, ln)
    }

    fn project_kv(&self, x: &[f64], rows: usize, ids: &AttnIds, prefix: Option<(ParamId, ParamId)>) -> (Vec<f64>, Vec<f64>) {
        let mut k = Vec::new();
        let mut v = Vec::new();
        if let Some((pk, pv)) = prefix {
            k.extend(self.prefix_rows(pk, ids.k));
            v.extend(self.prefix_rows(pv, ids.v));
        }
        k.extend(self.linear_rows(x, rows, ids.k));
        v.extend(self.linear_rows(x, rows, ids.v));
        (k, v)
    }

    fn embed_rows(&self, tokens: &[usize], start: usize, pos: ParamId, ln: NormIds) -> Vec<f64> {
        let d = self.config().d_model;
        let e = self.w(self.layout.embed);
        let p = self.w(pos);
        let mut x = Vec::with_capacity(tokens.len() * d);
        for (i, &t) in tokens.iter().enumerate() {
            let r = start + i;
            x.extend(e[t * d..(t + 1) * d].iter().zip(&p[r * d..(r + 1) * d]).map(|(a, b)| a + b));
        }
        self.norm_rows(&x, tokens.len(), ln)
    }

    pub fn encode(&self, src: &[usize]) -> Result<EncoderMemory> {
        self.check_tokens(src, "source")?;
        let n = src.len();
        let mut x = self.embed_rows(src, 0, self.layout.enc_pos, self.layout.enc_ln);
        for (i, layer) in self.layout.enc.iter().enumerate() {
            let prefix = self.active_prefix().map(|p| p.encoder[i]);
            let q = self.linear_rows(&x, n, layer.attn.q);
            let (k, v) = self.project_kv(&x, n, &layer.attn, prefix);
            let m = k.len() / self.config().d_model;
            let a = self.attend(&q, n, &k, &v, m, |_| m);
            let a = self.linear_rows(&a, n, layer.attn.o);
            let r: Vec<f64> = x.iter().zip(&a).map(|(p, q)| p + q).collect();
            x = self.norm_rows(&r, n, layer.attn_ln);
            let f = self.ffn_rows(&x, n, layer.fc1, layer.fc2);
            let r: Vec<f64> = x.iter().zip(&f).map(|(p, q)| p + q).collect();
            x = self.norm_rows(&r, n, layer.final_ln);
        }
        let mut cross_k = Vec::new();
        let mut cross_v = Vec::new();
        for layer in &self.layout.dec {
            let (k, v) = self.project_kv(&x, n, &layer.cross, None);
            cross_k.push(k);
            cross_v.push(v);
        }
        Ok(EncoderMemory {
            hidden: x,
            len: n,
            cross_k,
            cross_v,
        })
    }

    pub fn decoder_start(&self) -> DecoderState {
        let (keys, values) = match self.active_prefix() {
            Some(p) => p
                .decoder
                .iter()
                .zip(&self.layout.dec)
                .map(|(&(k, v), layer)| {
                    (
                        self.prefix_rows(k, layer.self_attn.k),
                        self.prefix_rows(v, layer.self_attn.v),
                    )
                })
                .unzip(),
            None => (vec![Vec::new(); self.layout.dec.len()], vec![Vec::new(); self.layout.dec.len()]),
        };
        DecoderState {
            position: 0,
            keys,
            values,
        }
    }

    /// Feeds one decoder token and returns next-token logits.
    pub fn decoder_step(&self, memory: &EncoderMemory, state: &mut DecoderState, token: usize) -> Result<Vec<f64>> {
        self.check_tokens(&[token], "decoder input")?;
        if state.position >= self.config().max_positions {
            return Err(super::ModelError::SequenceTooLong {
                len: state.position + 1,
                max: self.config().max_positions,
            });
        }
        let d = self.config().d_model;
        let mut x = self.embed_rows(&[token], state.position, self.layout.dec_pos, self.layout.dec_ln);
        for (l, layer) in self.layout.dec.iter().enumerate() {
            let q = self.linear_rows(&x, 1, layer.self_attn.q);
            state.keys[l].extend(self.linear_rows(&x, 1, layer.self_attn.k));
            state.values[l].extend(self.linear_rows(&x, 1, layer.self_attn.v));
            let m = state.keys[l].len() / d;
            let a = self.attend(&q, 1, &state.keys[l], &state.values[l], m, |_| m);
            let a = self.linear_rows(&a, 1, layer.self_attn.o);
            let r: Vec<f64> = x.iter().zip(&a).map(|(p, q)| p + q).collect();
            x = self.norm_rows(&r, 1, layer.self_ln);

            let q = self.linear_rows(&x, 1, layer.cross.q);
            let c = self.attend(&q, 1, &memory.cross_k[l], &memory.cross_v[l], memory.len, |_| memory.len);
            let c = self.linear_rows(&c, 1, layer.cross.o);
            let r: Vec<f64> = x.iter().zip(&c).map(|(p, q)| p + q).collect();
            x = self.norm_rows(&r, 1, layer.cross_ln);

            let f = self.ffn_rows(&x, 1, layer.fc1, layer.fc2);
            let r: Vec<f64> = x.iter().zip(&f).map(|(p, q)| p + q).collect();
            x = self.norm_rows(&r, 1, layer.final_ln);
        }
        state.position += 1;
        let v = self.config().vocab_size;
        let mut logits = match self.layout.lm_head {
            Some(id) => kernels::matmul(&x, self.w(id), 1, d, v),
            None => kernels::matmul_bt(&x, self.w(self.layout.embed), 1, d, v),
        };
        kernels::add_row_bias(&mut logits, self.w(self.layout.logits_bias));
        Ok(logits)
    }

    /// Teacher-forced per-token NLL through the cached path.
    pub fn token_nll(&self, src: &[usize], tgt: &[usize]) -> Result<Vec<f64>> {
        self.check_tokens(tgt, "target")?;
        let memory = self.encode(src)?;
        let mut state = self.decoder_start();
        let mut prev = BOS;
        let mut out = Vec::with_capacity(tgt.len());
        for &t in tgt {
            let logits = self.decoder_step(&memory, &mut state, prev)?;
            out.push(-kernels::log_softmax(&logits)[t]);
            prev = t;
        }
        Ok(out)
    }

    pub fn stepper(&self, src: &[usize]) -> Result<ModelStepper<'_>> {
        Ok(ModelStepper {
            model: self,
            memory: self.encode(src)?,
        })
    }

    /// Top `width` decodings of `src`; generation stops at EOS or after
    /// `max_len` tokens (capped by the positional table).
    pub fn beam_decode(&self, src: &[usize], width: usize, max_len: usize) -> Result<Vec<super::BeamHypothesis>> {
        let stepper = self.stepper(src)?;
        super::beam_search(&stepper, width, max_len.min(self.config().max_positions))
    }
}

/// Adapter exposing a model and an encoded source to the beam search.
pub struct ModelStepper<'a> {
    model: &'a Seq2Seq,
    memory: EncoderMemory,
}

impl StepModel for ModelStepper<'_> {
    type State = DecoderState;

    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn eos(&self) -> usize {
        EOS
    }

    fn start(&self) -> (DecoderState, Vec<f64>) {
        let mut state = self.model.decoder_start();
        let logits = self.model.decoder_step(&self.memory, &mut state, BOS).expect("BOS fits");
        (state, kernels::log_softmax(&logits))
    }

    fn advance(&self, state: &DecoderState, token: usize) -> (DecoderState, Vec<f64>) {
        let mut next = state.clone();
        let logits = self
            .model
            .decoder_step(&self.memory, &mut next, token)
            .expect("beam search stays within max_positions");
        (next, kernels::log_softmax(&logits))
    }
}
