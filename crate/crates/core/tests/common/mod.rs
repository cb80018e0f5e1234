//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use hyda::autodiff::{Reduction, Tape, Tensor, Var};
use hyda::losses::{self, MsimParams};
use hyda::nn::{hyper_linear_forward, linear_forward, BoundLinear, HyperLinearLayer};
use hyda::rng::{stream, StreamRng};
use hyda::Result;
use rand::Rng;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> StreamRng {
    stream(seed, 900)
}

/// Uniform entries in `[lo, hi)`.
pub fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

pub fn same_bits(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

type Scalar = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// A differentiable operation reduced to a scalar for gradient checking.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: Scalar,
}

/// `Σ out ⊙ w` for a fixed random `w`, so every output element carries a
/// distinct weight into the gradient.
fn weighted(tape: &mut Tape, out: Var, w: &Tensor) -> Result<Var> {
    let wv = tape.constant(w.clone());
    let p = tape.mul(out, wv)?;
    tape.sum(p)
}

fn case<F>(name: &'static str, inputs: Vec<Tensor>, out_shape: &[usize], r: &mut impl Rng, op: F) -> OpCase
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
{
    let w = uniform(out_shape, -1.0, 1.0, r);
    OpCase {
        name,
        inputs,
        f: Box::new(move |t, v| {
            let out = op(t, v)?;
            weighted(t, out, &w)
        }),
    }
}

/// Every differentiable tape operation and loss, at random inputs in
/// `[-2, 2]` (shifted positive where the domain requires it).
#[allow(clippy::vec_init_then_push)]
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = rng(seed);
    let r = &mut r;
    let u = |s: &[usize], r: &mut StreamRng| uniform(s, -2.0, 2.0, r);
    let mut cases = Vec::new();

    cases.push(case("matmul", vec![u(&[3, 4], r), u(&[4, 5], r)], &[3, 5], r, |t, v| t.matmul(v[0], v[1])));
    cases.push(case("bmm", vec![u(&[2, 3, 4], r), u(&[2, 4, 2], r)], &[2, 3, 2], r, |t, v| t.bmm(v[0], v[1])));
    cases.push(case("add", vec![u(&[3, 4], r), u(&[3, 4], r)], &[3, 4], r, |t, v| t.add(v[0], v[1])));
    cases.push(case("add scalar", vec![u(&[3, 4], r), u(&[1], r)], &[3, 4], r, |t, v| t.add(v[0], v[1])));
    cases.push(case("sub", vec![u(&[3, 4], r), u(&[3, 4], r)], &[3, 4], r, |t, v| t.sub(v[0], v[1])));
    cases.push(case("mul", vec![u(&[3, 4], r), u(&[3, 4], r)], &[3, 4], r, |t, v| t.mul(v[0], v[1])));
    cases.push(case("relu", vec![u(&[4, 5], r)], &[4, 5], r, |t, v| t.relu(v[0])));
    cases.push(case("exp", vec![u(&[3, 4], r)], &[3, 4], r, |t, v| t.exp(v[0])));
    cases.push(case("log", vec![uniform(&[3, 4], 0.2, 2.0, r)], &[3, 4], r, |t, v| t.log(v[0])));
    cases.push(case("square", vec![u(&[3, 4], r)], &[3, 4], r, |t, v| t.square(v[0])));
    cases.push(case("scale", vec![u(&[3, 4], r)], &[3, 4], r, |t, v| Ok(t.scale(v[0], -1.7))));
    for (name, op) in [("sum", Reduction::Sum), ("mean", Reduction::Mean), ("max", Reduction::Max)] {
        let names: [&'static str; 3] = match name {
            "sum" => ["reduce sum all", "reduce sum axis 0", "reduce sum axis 1"],
            "mean" => ["reduce mean all", "reduce mean axis 0", "reduce mean axis 1"],
            _ => ["reduce max all", "reduce max axis 0", "reduce max axis 1"],
        };
        cases.push(case(names[0], vec![u(&[3, 4], r)], &[], r, move |t, v| t.reduce(op, v[0], None)));
        cases.push(case(names[1], vec![u(&[3, 4], r)], &[4], r, move |t, v| t.reduce(op, v[0], Some(0))));
        cases.push(case(names[2], vec![u(&[3, 4], r)], &[3], r, move |t, v| t.reduce(op, v[0], Some(1))));
    }
    cases.push(case("add_bias", vec![u(&[3, 4], r), u(&[4], r)], &[3, 4], r, |t, v| t.add_bias(v[0], v[1])));
    cases.push(case("reshape", vec![u(&[3, 4], r)], &[2, 6], r, |t, v| t.reshape(v[0], &[2, 6])));
    cases.push(case("transpose", vec![u(&[3, 4], r)], &[4, 3], r, |t, v| t.transpose(v[0])));
    cases
        .push(case("concat_cols", vec![u(&[3, 2], r), u(&[3, 3], r)], &[3, 5], r, |t, v| t.concat_cols(&[v[0], v[1]])));
    cases.push(case("log_softmax", vec![u(&[3, 4], r)], &[3, 4], r, |t, v| t.log_softmax(v[0])));
    cases.push(case("pick", vec![u(&[3, 4], r)], &[3], r, |t, v| t.pick(v[0], &[2, 0, 3])));
    cases.push(case("normalize_rows", vec![u(&[3, 4], r)], &[3, 4], r, |t, v| t.normalize_rows(v[0])));

    cases.push(case("linear_forward", vec![u(&[3, 4], r), u(&[4, 2], r), u(&[2], r)], &[3, 2], r, |t, v| {
        linear_forward(t, &BoundLinear { weight: v[1], bias: v[2] }, v[0])
    }));
    let layer = HyperLinearLayer { in_size: 4, out_size: 3 };
    cases.push(case(
        "hyper_linear_forward",
        vec![u(&[2, 4], r), u(&[2, 4, 3], r), u(&[2, 3], r)],
        &[2, 3],
        r,
        move |t, v| hyper_linear_forward(t, &layer, v[0], v[1], v[2]),
    ));
    cases.push(case("cosine_similarity_matrix", vec![u(&[4, 3], r)], &[4, 4], r, |t, v| {
        losses::cosine_similarity_matrix(t, v[0])
    }));
    cases.push(OpCase {
        name: "mse",
        inputs: vec![u(&[5, 1], r), u(&[5, 1], r)],
        f: Box::new(|t, v| losses::mse(t, v[0], v[1])),
    });
    cases.push(OpCase {
        name: "cross_entropy",
        inputs: vec![u(&[4, 3], r)],
        f: Box::new(|t, v| losses::cross_entropy(t, v[0], &[0, 2, 1, 2])),
    });
    cases.push(OpCase {
        name: "l2_penalty",
        inputs: vec![u(&[3, 2], r), u(&[4], r)],
        f: Box::new(|t, v| losses::l2_penalty(t, &[v[0], v[1]])),
    });
    cases.push(OpCase {
        name: "multi_similarity_loss",
        inputs: vec![u(&[6, 4], r)],
        f: Box::new(|t, v| losses::multi_similarity_loss(t, v[0], &[0, 0, 1, 1, 2, 2], &MsimParams::default())),
    });
    cases
}

/// Multi-similarity loss by direct pairwise enumeration, independent of the
/// library's similarity matrix and mining helpers.
pub fn msim_brute_force(emb: &Tensor, labels: &[usize], p: &MsimParams) -> f64 {
    let b = labels.len();
    let f = emb.shape()[1];
    let row = |i: usize| &emb.data()[i * f..(i + 1) * f];
    let norm = |i: usize| row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
    let sim = |i: usize, k: usize| {
        if i == k {
            return 1.0;
        }
        let dot: f64 = row(i).iter().zip(row(k)).map(|(a, c)| a * c).sum();
        dot / (norm(i) * norm(k))
    };
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..b {
        let mut min_pos = f64::INFINITY;
        let mut max_neg = f64::NEG_INFINITY;
        for k in 0..b {
            if k == i {
                continue;
            }
            if labels[k] == labels[i] {
                min_pos = min_pos.min(sim(i, k));
            } else {
                max_neg = max_neg.max(sim(i, k));
            }
        }
        let mut pos_sum = 0.0;
        let mut neg_sum = 0.0;
        let mut mined_pos = 0;
        let mut mined_neg = 0;
        for k in 0..b {
            if k == i {
                continue;
            }
            let s = sim(i, k);
            if labels[k] == labels[i] && s < max_neg + p.epsilon {
                pos_sum += (-p.alpha_s * (s - p.lambda_s)).exp();
                mined_pos += 1;
            } else if labels[k] != labels[i] && s > min_pos - p.epsilon {
                neg_sum += (p.beta_s * (s - p.lambda_s)).exp();
                mined_neg += 1;
            }
        }
        if mined_pos + mined_neg == 0 {
            continue;
        }
        anchors += 1;
        if mined_pos > 0 {
            total += (1.0 + pos_sum).ln() / p.alpha_s;
        }
        if mined_neg > 0 {
            total += (1.0 + neg_sum).ln() / p.beta_s;
        }
    }
    if anchors == 0 {
        0.0
    } else {
        total / anchors as f64
    }
}

/// AUC as the fraction of (positive, negative) pairs ranked correctly, ties
/// counting one half. Returned as an exact fraction `(twice the count, 2·P·N)`.
pub fn auc_pair_count(scores: &[f64], labels: &[bool]) -> (u64, u64) {
    let mut twice = 0u64;
    let mut pairs = 0u64;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (k, &lk) in labels.iter().enumerate() {
            if lk {
                continue;
            }
            pairs += 1;
            twice += match scores[i].partial_cmp(&scores[k]).unwrap() {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    (twice, 2 * pairs)
}

/// `a[m,k] · b[k,n]` by the textbook triple loop.
pub fn matmul_loop(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let aik = a.data()[i * k + kk];
            for j in 0..n {
                out[i * n + j] += aik * b.data()[kk * n + j];
            }
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

/// A small benchmark with `per_domain` samples in each of `domains` domains.
pub fn small_dataset(domains: usize, per_domain: usize, kind: hyda::losses::TaskKind) -> hyda::data::Dataset {
    hyda::data::generate_benchmark(&hyda::data::BenchmarkSpec {
        domains,
        samples_per_domain: per_domain,
        task_kind: kind,
        ..Default::default()
    })
    .unwrap()
}

/// Narrow model over the benchmark's 16 inputs: encoder 16, head
/// `12 → 8 → out` with layer 2 external, embedding width 6, trunk width 16.
pub fn small_config(kind: hyda::losses::TaskKind, sources: Vec<usize>) -> hyda::hyda::ModelConfig {
    hyda::hyda::ModelConfig {
        input_dim: 16,
        task_kind: kind,
        encoder_widths: vec![16],
        head_widths: vec![12, 8],
        external_layers: vec![2],
        domain_widths: vec![16],
        embedding_dim: 6,
        hyper_hidden: 16,
        source_domains: sources,
        ..Default::default()
    }
}

/// Every training sample of a dataset as one batch.
pub fn train_batch(ds: &hyda::data::Dataset, kind: hyda::losses::TaskKind) -> hyda::data::DomainBatch {
    ds.batch(&hyda::data::split_supervised(ds).train, kind)
}
