//! Gradient checks and property suites shared by the unit suites and the
//! acceptance run.

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestError, TestRng, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stare_core::baselines::{LstmModel, RecurrentConfig};
use stare_core::model::{mask_batch, EncoderModel, ModelConfig, SequenceClassifier, Task, Trainable};
use stare_core::nn::{Graph, NodeId, Tensor};
use stare_core::sim::stream_rng;
use stare_core::traj::{CellId, TokenSequence, Vocabulary};

use super::{gradcheck, rand_tensor, rel_error, FD_STEP};

pub const GRAD_TOL: f64 = 1e-4;

/// Reduces a node to a scalar through a fixed random projection.
fn project(g: &mut Graph, x: NodeId, seed: u64) -> NodeId {
    let r = rand_tensor(g.shape(x), seed);
    let r = g.constant(r);
    let p = g.mul(x, r).unwrap();
    g.sum_all(p)
}

/// Worst relative error per differentiable op.
pub fn op_gradchecks() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let batched = [rand_tensor(&[3, 4, 5], 1), rand_tensor(&[3, 5, 2], 2)];
    out.push((
        "matmul batched",
        gradcheck(&batched, &|g, x| {
            let y = g.matmul(x[0], x[1]).unwrap();
            project(g, y, 9)
        }),
    ));
    let shared = [rand_tensor(&[3, 4, 5], 3), rand_tensor(&[5, 6], 4)];
    out.push((
        "matmul shared rhs",
        gradcheck(&shared, &|g, x| {
            let y = g.matmul(x[0], x[1]).unwrap();
            project(g, y, 9)
        }),
    ));
    let nt = [rand_tensor(&[3, 4, 5], 5), rand_tensor(&[3, 6, 5], 6)];
    out.push((
        "matmul_nt",
        gradcheck(&nt, &|g, x| {
            let y = g.matmul_nt(x[0], x[1]).unwrap();
            project(g, y, 9)
        }),
    ));
    let ew = [rand_tensor(&[3, 4, 5], 7), rand_tensor(&[3, 4, 5], 8), rand_tensor(&[5], 10)];
    out.push((
        "add/mul/scale/add_bias",
        gradcheck(&ew, &|g, x| {
            let a = g.add(x[0], x[1]).unwrap();
            let m = g.mul(a, x[1]).unwrap();
            let s = g.scale(m, -1.7);
            let b = g.add_bias(s, x[2]).unwrap();
            project(g, b, 11)
        }),
    ));
    let act = [rand_tensor(&[3, 4, 5], 12)];
    for (name, which) in [("gelu", 0), ("sigmoid", 1), ("tanh", 2)] {
        out.push((
            name,
            gradcheck(&act, &|g, x| {
                let s = g.scale(x[0], 2.5);
                let y = match which {
                    0 => g.gelu(s),
                    1 => g.sigmoid(s),
                    _ => g.tanh(s),
                };
                project(g, y, 13)
            }),
        ));
    }
    let mut mask = vec![0.0; 15];
    mask[2] = f64::NEG_INFINITY;
    mask[9] = f64::NEG_INFINITY;
    mask[14] = -0.5;
    let sm = [rand_tensor(&[3, 4, 5], 14)];
    out.push((
        "masked softmax",
        gradcheck(&sm, &|g, x| {
            let s = g.scale(x[0], 3.0);
            let y = g.softmax(s, Some(&mask)).unwrap();
            project(g, y, 15)
        }),
    ));
    let ln = [rand_tensor(&[3, 4, 5], 16), rand_tensor(&[5], 17), rand_tensor(&[5], 18)];
    out.push((
        "layer_norm",
        gradcheck(&ln, &|g, x| {
            let y = g.layer_norm(x[0], x[1], x[2], 1e-5).unwrap();
            project(g, y, 19)
        }),
    ));
    let rows = [rand_tensor(&[6, 5], 20), rand_tensor(&[4, 5], 21)];
    out.push((
        "embedding/select/gather/slice/concat/reshape",
        gradcheck(&rows, &|g, x| {
            let e = g.embedding(x[0], &[3, 0, 3, 5]).unwrap();
            let s = g.select_rows(&[true, false, true, false], e, x[1]).unwrap();
            let r = g.gather_rows(s, &[2, 2, 0, 1, 3]).unwrap();
            let a = g.slice_cols(r, 1, 3).unwrap();
            let b = g.slice_cols(r, 0, 2).unwrap();
            let c = g.concat_cols(&[a, b, a]).unwrap();
            let flat = g.reshape(c, vec![40]).unwrap();
            project(g, flat, 22)
        }),
    ));
    let heads = [rand_tensor(&[6, 8], 23)];
    out.push((
        "split/merge heads",
        gradcheck(&heads, &|g, x| {
            let h = g.split_heads(x[0], 2, 3, 4).unwrap();
            let sq = g.mul(h, h).unwrap();
            let m = g.merge_heads(sq, 2, 3, 4).unwrap();
            project(g, m, 24)
        }),
    ));
    let drop = [rand_tensor(&[3, 4, 5], 26)];
    out.push((
        "dropout",
        gradcheck(&drop, &|g, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let y = g.dropout(x[0], 0.3, &mut rng);
            project(g, y, 27)
        }),
    ));
    let ce = [rand_tensor(&[4, 5], 28)];
    out.push((
        "cross_entropy",
        gradcheck(&ce, &|g, x| {
            let s = g.scale(x[0], 2.0);
            g.cross_entropy(s, &[1, 4, 7, 0], Some(7)).unwrap()
        }),
    ));
    out
}

/// 4 cells, 3 duration blocks, at most 2 stays: ids 0..12, sequences of 7.
pub fn tiny_vocab() -> Vocabulary {
    Vocabulary::from_cells(16, 600, (1..=4).map(|i| CellId { zoom: 16, index: i }), 3, 2, 2).unwrap()
}

pub fn tiny_sequence(cells: &[u32], times: &[u32], label: usize) -> TokenSequence {
    let v = tiny_vocab();
    let s = v.special_ids;
    let mut t = vec![s.bos];
    t.extend(cells);
    t.resize(1 + v.max_loc_len, 0);
    t.push(s.sep);
    t.extend(times.iter().map(|b| v.n_cells as u32 + b));
    t.resize(v.seq_len() - 1, 0);
    t.push(s.eos);
    TokenSequence::from_tokens("x".into(), 0, label, t, &v).unwrap()
}

/// Every ordered cell pair once; the label follows the first cell.
pub fn tiny_corpus() -> Vec<TokenSequence> {
    let mut out = Vec::new();
    for a in 1..=4u32 {
        for b in 1..=4u32 {
            let label = (a % 3) as usize;
            if a == b {
                out.push(tiny_sequence(&[a], &[1], label));
            } else {
                out.push(tiny_sequence(&[a, b], &[2, 3], label));
            }
        }
    }
    out
}

pub fn tiny_encoder_config(task: Task) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 1,
        n_layers: 1,
        d_ff: 12,
        init_std: 0.5,
        ..ModelConfig::for_vocab(&tiny_vocab(), task, 3)
    }
}

/// Backprop against central differences over every parameter, norm-wise over
/// the whole parameter vector. Per-tensor ratios would be meaningless for the
/// attention key bias, whose true gradient is exactly zero.
pub fn model_gradcheck<M: Trainable>(m: &mut M, loss: &dyn Fn(&M, &mut Graph) -> NodeId) -> f64 {
    let mut grads = m.params().zero_grads();
    {
        let mut g = Graph::new(m.params().tensors());
        let l = loss(m, &mut g);
        let gr = g.backward(l).unwrap();
        g.accumulate_param_grads(&gr, &mut grads);
    }
    let eval = |m: &M| {
        let mut g = Graph::new(m.params().tensors());
        let l = loss(m, &mut g);
        g.value(l)[0]
    };
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for t in 0..m.params().len() {
        analytic.extend_from_slice(&grads[t]);
        for i in 0..m.params().get(t).len() {
            let orig = m.params().get(t).data()[i];
            m.params_mut().tensors_mut()[t].data_mut()[i] = orig + FD_STEP;
            let up = eval(m);
            m.params_mut().tensors_mut()[t].data_mut()[i] = orig - FD_STEP;
            let down = eval(m);
            m.params_mut().tensors_mut()[t].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    assert!(numeric.iter().all(|v| v.is_finite()));
    rel_error(&analytic, &numeric)
}

fn classifier_loss<M: SequenceClassifier>(m: &M, g: &mut Graph, batch: &[Vec<u32>], labels: &[usize]) -> NodeId {
    let b: Vec<&[u32]> = batch.iter().map(Vec::as_slice).collect();
    let logits = m.class_logits(g, &b, None).unwrap();
    g.cross_entropy(logits, labels, None).unwrap()
}

/// End-to-end checks on tiny models: encoder classifier and masked head, and
/// both recurrent baselines.
pub fn model_gradchecks() -> Vec<(&'static str, f64)> {
    let data = tiny_corpus();
    let toks: Vec<Vec<u32>> = data.iter().take(5).map(|s| s.tokens.clone()).collect();
    let labels: Vec<usize> = data.iter().take(5).map(|s| s.label).collect();
    let mut out = Vec::new();

    let mut m = EncoderModel::new(tiny_encoder_config(Task::Classification)).unwrap();
    out.push(("encoder classifier", model_gradcheck(&mut m, &|m, g| classifier_loss(m, g, &toks, &labels))));

    let mut m = EncoderModel::new(tiny_encoder_config(Task::Mlm)).unwrap();
    let refs: Vec<&TokenSequence> = data.iter().take(6).collect();
    let mb = mask_batch(&refs, 0.5, m.config().mask_id, &mut stream_rng(0, "t"));
    out.push(("encoder masked head", model_gradcheck(&mut m, &|m, g| m.mlm_loss(g, &mb, None).unwrap())));

    for (name, bi) in [("lstm", false), ("bilstm", true)] {
        let mut m = LstmModel::new(RecurrentConfig {
            embedding_dim: 3,
            hidden_dim: 4,
            n_stacks: 2,
            bidirectional: bi,
            n_classes: 3,
            vocab_size: 12,
            pad_id: 0,
            seed: 2,
        })
        .unwrap();
        out.push((name, model_gradcheck(&mut m, &|m, g| classifier_loss(m, g, &toks, &labels))));
    }
    out
}

fn softmax_property(row: Vec<f64>, shift: f64) -> Result<(), TestCaseError> {
    let n = row.len();
    let mut g = Graph::new(&[]);
    let a = g.constant(Tensor::new(vec![n], row.clone()).unwrap());
    let b = g.constant(Tensor::new(vec![n], row.iter().map(|v| v + shift).collect()).unwrap());
    let pa = g.softmax(a, None).unwrap();
    let pb = g.softmax(b, None).unwrap();
    let sum: f64 = g.value(pa).iter().sum();
    prop_assert!((sum - 1.0).abs() <= 1e-12);
    for (x, y) in g.value(pa).iter().zip(g.value(pb)) {
        prop_assert!((x - y).abs() <= 1e-12);
    }
    Ok(())
}

fn layer_norm_property(row: Vec<f64>) -> Result<(), TestCaseError> {
    let n = row.len();
    let mean = row.iter().sum::<f64>() / n as f64;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    prop_assume!(var > 1e-3);
    let mut g = Graph::new(&[]);
    let x = g.constant(Tensor::new(vec![1, n], row).unwrap());
    let gain = g.constant(Tensor::filled(vec![n], 1.0));
    let bias = g.constant(Tensor::zeros(vec![n]));
    let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
    let v = g.value(y);
    let m = v.iter().sum::<f64>() / n as f64;
    let s = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n as f64;
    prop_assert!(m.abs() <= 1e-12);
    prop_assert!((s - 1.0).abs() <= 1e-9);
    Ok(())
}

fn masking_property(n_stays: usize, fraction: f64, seed: u64) -> Result<(), TestCaseError> {
    let v = Vocabulary::from_cells(16, 600, (1..=8).map(|i| CellId { zoom: 16, index: i }), 4, 6, 6).unwrap();
    let s = v.special_ids;
    let mut t = vec![s.bos];
    t.extend((0..n_stays).map(|i| 1 + (i % 8) as u32));
    t.resize(7, 0);
    t.push(s.sep);
    t.extend((0..n_stays).map(|_| 9));
    t.resize(14, 0);
    t.push(s.eos);
    let q = TokenSequence::from_tokens("p".into(), 0, 0, t.clone(), &v).unwrap();
    let mb = mask_batch(&[&q], fraction, s.mask, &mut stream_rng(seed, "p"));
    let want = ((fraction * n_stays as f64).ceil() as usize).clamp(1, n_stays);
    prop_assert_eq!(mb.positions[0].len(), want);
    for (i, &tok) in t.iter().enumerate() {
        let masked = mb.positions[0].contains(&i);
        prop_assert!(!masked || q.loc_span.contains(&i));
        prop_assert_eq!(mb.inputs[0][i], if masked { s.mask } else { tok });
    }
    Ok(())
}

fn map<T: std::fmt::Debug>(r: Result<(), TestError<T>>) -> Result<(), String> {
    r.map_err(|e| format!("{e:?}"))
}

/// Runs each property suite for `cases` random cases with a fixed seed.
pub fn property_suites(cases: u32) -> Vec<(&'static str, Result<(), String>)> {
    let runner = || {
        TestRunner::new_with_rng(
            Config { failure_persistence: None, ..Config::with_cases(cases) },
            TestRng::deterministic_rng(RngAlgorithm::ChaCha),
        )
    };
    vec![
        (
            "softmax",
            map(runner().run(&(proptest::collection::vec(-30.0f64..30.0, 1..12), -100.0f64..100.0), |(r, s)| {
                softmax_property(r, s)
            })),
        ),
        ("layer norm", map(runner().run(&proptest::collection::vec(-10.0f64..10.0, 2..16), layer_norm_property))),
        (
            "masking",
            map(runner().run(&(1usize..=6, 0.01f64..0.99, any::<u64>()), |(n, f, s)| masking_property(n, f, s))),
        ),
    ]
}
