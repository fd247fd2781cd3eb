//! Oracles and fixtures shared by the integration tests and the acceptance
//! binary.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::Arc;

use projtune::corpus::ProjectCorpus;
use projtune::model::{ModelConfig, Seq2Seq, EOS};
use projtune::tensor::{BlockLabel, Checkpoint, Graph, NodeId, Optimizer, Tensor, TensorError};
use projtune::tuning::{apply_freeze_plan, attach_prefix, make_freeze_plan, PrefixBank, StrategyKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// BLEU-4 by direct enumeration: every n-gram is compared against every
/// other by slice equality, no hashing.
pub fn bleu_oracle<T: PartialEq>(cand: &[T], reference: &[T]) -> f64 {
    let mut log_p = 0.0;
    for n in 1..=4usize {
        if cand.len() < n {
            continue;
        }
        let c_grams: Vec<&[T]> = cand.windows(n).collect();
        let r_grams: Vec<&[T]> = if reference.len() >= n { reference.windows(n).collect() } else { Vec::new() };
        let mut clipped = 0usize;
        for (i, g) in c_grams.iter().enumerate() {
            if c_grams[..i].iter().any(|h| h == g) {
                continue;
            }
            let in_cand = c_grams.iter().filter(|h| *h == g).count();
            let in_ref = r_grams.iter().filter(|h| *h == g).count();
            clipped += in_cand.min(in_ref);
        }
        let total = c_grams.len();
        let p = if clipped > 0 {
            clipped as f64 / total as f64
        } else if n == 1 {
            return 0.0;
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_p += p.ln();
    }
    if cand.is_empty() {
        return 0.0;
    }
    let bp = if cand.len() >= reference.len() {
        1.0
    } else {
        (1.0 - reference.len() as f64 / cand.len() as f64).exp()
    };
    bp * (log_p / 4.0).exp()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn two_block_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 14,
        d_model: 8,
        num_heads: 2,
        ffn_dim: 12,
        encoder_layers: 1,
        decoder_layers: 1,
        max_positions: 8,
        tie_output_to_embedding: true,
    }
}

pub fn random_pairs(vocab: usize, n: usize, seed: u64) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let src: Vec<usize> = (0..rng.gen_range(2..6)).map(|_| rng.gen_range(3..vocab)).collect();
            let mut tgt: Vec<usize> = (0..rng.gen_range(1..5)).map(|_| rng.gen_range(3..vocab)).collect();
            tgt.push(EOS);
            (src, tgt)
        })
        .collect()
}

type Build = dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId, TensorError>;

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Worst relative error of `d/dx sum(w * op(x))` against central differences.
fn primitive_error(inputs: Vec<Tensor>, build: &Build, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |vals: &[Tensor]| -> Tensor {
        let mut g = Graph::inference();
        let ids: Vec<_> = vals.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
        let out = build(&mut g, &ids).unwrap();
        g.value(out).clone()
    };
    let probe = eval(&inputs);
    let w: Vec<f64> = (0..probe.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let objective = |vals: &[Tensor]| -> f64 { eval(vals).data().iter().zip(&w).map(|(a, b)| a * b).sum() };
    let mut g = Graph::new();
    let ids: Vec<_> = inputs.iter().map(|t| g.variable(t.clone()).unwrap()).collect();
    let out = build(&mut g, &ids).unwrap();
    let wn = g.constant(Tensor::new(probe.shape().to_vec(), w.clone()).unwrap()).unwrap();
    let prod = g.mul(out, wn).unwrap();
    let loss = g.sum(prod).unwrap();
    let analytic = g.backward_leaves(loss, &ids).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let mut vals = inputs.clone();
            let orig = input.data()[i];
            vals[k].data_mut()[i] = orig + h;
            let up = objective(&vals);
            vals[k].data_mut()[i] = orig - h;
            let down = objective(&vals);
            worst = worst.max(rel_err(analytic[k][i], (up - down) / (2.0 * h)));
        }
    }
    worst
}

/// Gradient error per autodiff primitive.
pub fn primitive_gradient_errors() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let a = rand_matrix(&mut rng, 3, 4);
    let b = rand_matrix(&mut rng, 4, 2);
    let c = rand_matrix(&mut rng, 3, 4);
    let row = Tensor::new(vec![4], (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let gamma = Tensor::new(vec![4], (0..4).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap();
    let wide = rand_matrix(&mut rng, 3, 5);
    let tall = rand_matrix(&mut rng, 5, 4);
    let table = rand_matrix(&mut rng, 6, 3);
    let logits = rand_matrix(&mut rng, 4, 6);
    let mask = Arc::new((0..12).map(|i| i % 4 != 2).collect::<Vec<bool>>());
    let cases: Vec<(&'static str, Vec<Tensor>, Box<Build>)> = vec![
        ("matmul", vec![a.clone(), b], Box::new(|g, x| g.matmul(x[0], x[1]))),
        ("add", vec![a.clone(), c.clone()], Box::new(|g, x| g.add(x[0], x[1]))),
        ("add-broadcast", vec![a.clone(), row.clone()], Box::new(|g, x| g.add(x[0], x[1]))),
        ("mul", vec![a.clone(), c], Box::new(|g, x| g.mul(x[0], x[1]))),
        ("scale", vec![a.clone()], Box::new(|g, x| g.scale(x[0], -1.7))),
        ("transpose", vec![a.clone()], Box::new(|g, x| g.transpose(x[0]))),
        ("softmax", vec![a.clone()], Box::new(|g, x| g.softmax(x[0], None))),
        (
            "softmax-masked",
            vec![a.clone()],
            Box::new(move |g, x| g.softmax(x[0], Some(mask.clone()))),
        ),
        ("layernorm", vec![a.clone(), gamma, row], Box::new(|g, x| g.layernorm(x[0], x[1], x[2]))),
        ("gelu", vec![a.clone()], Box::new(|g, x| g.gelu(x[0]))),
        ("embedding", vec![table], Box::new(|g, x| g.embedding(x[0], &[4, 1, 4, 0]))),
        ("concat-rows", vec![a.clone(), tall.clone()], Box::new(|g, x| g.concat(&[x[0], x[1]], 0))),
        ("concat-cols", vec![a.clone(), wide], Box::new(|g, x| g.concat(&[x[0], x[1]], 1))),
        ("slice-rows", vec![tall.clone()], Box::new(|g, x| g.slice(x[0], 0, 1, 4))),
        ("slice-cols", vec![tall], Box::new(|g, x| g.slice(x[0], 1, 1, 3))),
        ("cross-entropy", vec![logits], Box::new(|g, x| g.cross_entropy(x[0], &[0, 5, 2, 2]))),
        ("sum", vec![a], Box::new(|g, x| g.sum(x[0]))),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, inputs, build))| (name, primitive_error(inputs, build.as_ref(), 40 + i as u64)))
        .collect()
}

fn loss_of(model: &Seq2Seq, pairs: &[(Vec<usize>, Vec<usize>)]) -> f64 {
    let refs: Vec<(&[usize], &[usize])> = pairs.iter().map(|(a, b)| (a.as_slice(), b.as_slice())).collect();
    let mut g = Graph::inference();
    let (loss, _) = model.batch_loss_graph(&mut g, &refs).unwrap();
    g.value(loss).data()[0]
}

/// Largest relative error between backpropagated and central-difference
/// gradients over every parameter of a random two-block model.
pub fn model_gradient_error(seed: u64, with_prefix: bool) -> f64 {
    let mut model = Seq2Seq::new(two_block_config(), seed).unwrap();
    if with_prefix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let rows: Vec<f64> = (0..3 * 8).map(|_| rng.gen_range(-0.5..0.5)).collect();
        attach_prefix(&mut model, &PrefixBank::broadcast(rows, 3, 8, 1, 1)).unwrap();
    }
    let pairs = random_pairs(14, 3, seed + 1);
    let refs: Vec<(&[usize], &[usize])> = pairs.iter().map(|(a, b)| (a.as_slice(), b.as_slice())).collect();
    let mut g = Graph::new();
    let (loss, _) = model.batch_loss_graph(&mut g, &refs).unwrap();
    g.backward(loss, &mut model.store).unwrap();
    let analytic: Vec<Vec<f64>> = model
        .store
        .iter()
        .map(|p| p.tensor.grad().expect("every parameter gets a gradient").to_vec())
        .collect();
    let ids: Vec<_> = model.store.ids().collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, &id) in ids.iter().enumerate() {
        for i in 0..model.store.get(id).tensor.numel() {
            let orig = model.store.get(id).tensor.data()[i];
            model.store.get_mut(id).tensor.data_mut()[i] = orig + h;
            let up = loss_of(&model, &pairs);
            model.store.get_mut(id).tensor.data_mut()[i] = orig - h;
            let down = loss_of(&model, &pairs);
            model.store.get_mut(id).tensor.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(analytic[k][i], numeric));
        }
    }
    worst
}

fn trained_model(strategy: StrategyKind, steps: usize, seed: u64) -> (Seq2Seq, Seq2Seq) {
    let cfg = ModelConfig {
        vocab_size: 20,
        d_model: 8,
        num_heads: 2,
        ffn_dim: 16,
        encoder_layers: 2,
        decoder_layers: 2,
        max_positions: 10,
        tie_output_to_embedding: true,
    };
    let mut model = Seq2Seq::new(cfg, seed).unwrap();
    if strategy == StrategyKind::Prefix {
        attach_prefix(&mut model, &PrefixBank::zeros(2, 8, 2, 2)).unwrap();
    }
    let plan = make_freeze_plan(strategy, &model.registry()).unwrap();
    apply_freeze_plan(&plan, &mut model.store).unwrap();
    let before = model.clone();
    let pairs = random_pairs(20, 16, seed + 7);
    let mut opt = Optimizer::adam();
    for s in 0..steps {
        let batch: Vec<(&[usize], &[usize])> = (0..4)
            .map(|j| {
                let (a, b) = &pairs[(4 * s + j) % pairs.len()];
                (a.as_slice(), b.as_slice())
            })
            .collect();
        model.train_step(&batch, &mut opt, 1e-2).unwrap();
    }
    (before, model)
}

/// Parameters whose bytes changed after `steps` Adam steps under a plan,
/// and the parameters the plan marks trainable.
pub fn freeze_outcome(strategy: StrategyKind, steps: usize, seed: u64) -> (BTreeSet<String>, BTreeSet<String>) {
    let (before, after) = trained_model(strategy, steps, seed);
    let bits = |p: &projtune::tensor::Parameter| p.tensor.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let trainable: BTreeSet<String> = before.store.iter().filter(|p| !p.frozen()).map(|p| p.id.clone()).collect();
    let changed: BTreeSet<String> = after
        .store
        .iter()
        .zip(before.store.iter())
        .filter(|(a, b)| bits(a) != bits(b))
        .map(|(a, _)| a.id.clone())
        .collect();
    (changed, trainable)
}

/// Checkpoints before and after training under a plan, with the plan's
/// trainable blocks.
pub fn drift_pair(strategy: StrategyKind, steps: usize, seed: u64) -> (Checkpoint, Checkpoint, Vec<BlockLabel>) {
    let (before, after) = trained_model(strategy, steps, seed);
    let blocks = make_freeze_plan(strategy, &before.registry()).unwrap().trainable_blocks();
    (Checkpoint::from_store(&before.store), Checkpoint::from_store(&after.store), blocks)
}

/// Random projects over a small word pool.
pub fn random_corpora(seed: u64) -> Vec<ProjectCorpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<String> = (0..rng.gen_range(5..40)).map(|i| format!("w{}x{}", "ab".repeat(i % 7), i)).collect();
    (0..rng.gen_range(2..7))
        .map(|p| {
            let mut c = ProjectCorpus::new(format!("p{p}"));
            let words: Vec<&str> = (0..rng.gen_range(1..30)).map(|_| pool[rng.gen_range(0..pool.len())].as_str()).collect();
            c.push("A.java", format!("class Q {{ {} }}", words.join(" ")));
            c
        })
        .collect()
}

/// Random code-like text from a fixed alphabet of Java fragments.
pub fn fuzz_code(rng: &mut ChaCha8Rng) -> String {
    const PIECES: &[&str] = &[
        "int", "x", "y", "foo", "Bar", "(", ")", "{", "}", ";", "=", "+", "1", "2.5", "\"s\"", "'c'", "true", "new",
        "return", ".", ",", "assertEquals", "<", ">", "\n", "\t", "  ", "#", "/*", "*/", "//", "@Test",
    ];
    let n = rng.gen_range(0..25);
    let mut s = String::new();
    for _ in 0..n {
        s.push_str(PIECES[rng.gen_range(0..PIECES.len())]);
        if rng.gen_bool(0.6) {
            s.push(' ');
        }
    }
    s
}

/// Same text with whitespace runs rewritten at random.
pub fn reflow(text: &str, rng: &mut ChaCha8Rng) -> String {
    let ws = [" ", "  ", "\n", "\t ", " \n "];
    let mut out = String::new();
    for (i, word) in text.split_whitespace().enumerate() {
        if i > 0 || rng.gen_bool(0.3) {
            out.push_str(ws[rng.gen_range(0..ws.len())]);
        }
        out.push_str(word);
    }
    if rng.gen_bool(0.3) {
        out.push('\n');
    }
    out
}

/// Random strings mixing ASCII code, whitespace and multi-byte characters.
pub fn fuzz_text(rng: &mut ChaCha8Rng) -> String {
    const CHARS: &[char] = &['a', 'b', 'Z', ' ', '\n', '(', '_', '9', 'é', 'ß', '中', '😀', '\t', '"', '\u{0}'];
    (0..rng.gen_range(0..40)).map(|_| CHARS[rng.gen_range(0..CHARS.len())]).collect()
}
