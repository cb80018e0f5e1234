mod common;

use common::{same_bits, small_config, small_dataset, train_batch, uniform, STEP, TOL};
use hyda::autodiff::{grad_check, Tape, Tensor};
use hyda::data::{domain_balanced_batches, BenchmarkSpec};
use hyda::hyda::{
    domain_accuracy, pretrain_domain, task_objective, train_baseline, train_joint, BaselineMlp, HydaModel, TrainConfig,
};
use hyda::losses::{cross_entropy, LossWeights, TaskKind};
use hyda::nn::{cosine_lr, AdamW, Module};
use hyda::rng::{stream, streams};
use hyda::Error;

fn model(seed: u64) -> HydaModel {
    HydaModel::new(small_config(TaskKind::Regression, vec![0, 1, 2]), seed).unwrap()
}

fn inputs(rows: usize, seed: u64) -> Tensor {
    uniform(&[rows, 16], -2.0, 2.0, &mut common::rng(seed))
}

fn train_cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig { epochs, batch_size: 32, seed, ..TrainConfig::default() }
}

#[test]
fn predict_is_primary_forward_of_domain_embedding() {
    let m = model(1);
    let x = inputs(9, 2);
    let (_, emb) = m.domain_forward(&x).unwrap();
    assert!(same_bits(&m.predict(&x).unwrap(), &m.primary_forward(&x, &emb).unwrap()));
}

#[test]
fn domain_softmax_rows_sum_to_one_and_duplicates_embed_identically() {
    let m = model(1);
    let mut x = inputs(4, 3);
    let first = x.row(0).to_vec();
    x.data_mut()[16..32].copy_from_slice(&first);
    let (logits, emb) = m.domain_forward(&x).unwrap();
    for r in 0..4 {
        let mx = logits.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.row(r).iter().map(|l| (l - mx).exp()).sum();
        let p: f64 = logits.row(r).iter().map(|l| (l - mx).exp() / z).sum();
        assert!((p - 1.0).abs() < 1e-12);
    }
    assert_eq!(emb.row(0), emb.row(1));
    assert_eq!(m.extract_domain_embeddings(&x).unwrap().shape(), &[4, 6]);
}

#[test]
fn predict_changes_no_parameter() {
    let m = model(4);
    let before = m.checksum();
    let x = inputs(5, 5);
    let first = m.predict(&x).unwrap();
    for _ in 0..20 {
        assert!(same_bits(&m.predict(&x).unwrap(), &first));
    }
    assert_eq!(m.checksum(), before);
}

#[test]
fn batch_of_one_equals_batched_row() {
    let m = model(6);
    let x = inputs(7, 7);
    let all = m.predict(&x).unwrap();
    for r in 0..7 {
        let one = m.predict(&x.select_rows(&[r])).unwrap();
        assert_eq!(one.data(), all.row(r));
    }
}

#[test]
fn generated_parameters_at_init() {
    let m = model(8);
    let emb = uniform(&[4, 6], -1.0, 1.0, &mut common::rng(9));
    let emb = Tensor::from_rows(&[emb.row(0).to_vec(), emb.row(0).to_vec(), emb.row(1).to_vec()]);
    let gen = m.generate_external_params(&emb).unwrap();
    assert_eq!(gen.len(), 1);
    let g = &gen[0];
    assert_eq!(g.layer, 2);
    assert_eq!(g.weights.shape(), &[3, 12, 8]);
    assert!(g.biases.data().iter().all(|&b| b == 0.0));
    let slice = |i: usize| &g.weights.data()[i * 96..(i + 1) * 96];
    assert_eq!(slice(0), slice(1));
    assert_ne!(slice(0), slice(2));
}

#[test]
fn different_embeddings_give_different_outputs() {
    let m = model(10);
    let x = inputs(1, 11);
    let x2 = Tensor::from_rows(&[x.row(0).to_vec(), x.row(0).to_vec()]);
    let emb = uniform(&[2, 6], -2.0, 2.0, &mut common::rng(12));
    let y = m.primary_forward(&x2, &emb).unwrap();
    assert_ne!(y.row(0), y.row(1));
}

#[test]
fn generated_weights_are_lipschitz_in_the_embedding() {
    // The map emb → relu(emb·W_t + b_t)·W_w + b_w is bounded by the product
    // of the Frobenius norms of the two weight matrices.
    let m = model(13);
    let fro = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let bound = fro(&m.hyper.trunk.weight) * fro(&m.hyper.heads[0].weight_head.weight);
    let mut r = common::rng(14);
    let mut ratios = Vec::new();
    for _ in 0..100 {
        let a = uniform(&[1, 6], -2.0, 2.0, &mut r);
        let b = uniform(&[1, 6], -2.0, 2.0, &mut r);
        let ga = m.generate_external_params(&a).unwrap().remove(0).weights;
        let gb = m.generate_external_params(&b).unwrap().remove(0).weights;
        let dw: f64 = ga.data().iter().zip(gb.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let de: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        ratios.push(dw / de);
    }
    assert!(ratios.iter().all(|r| r.is_finite() && *r <= bound), "bound {bound}, ratios {ratios:?}");
    let max = ratios.iter().copied().fold(0.0, f64::max);
    assert!(max > 0.0);
}

#[test]
fn full_regularised_task_loss_passes_grad_check() {
    for kind in [TaskKind::Regression, TaskKind::Classification] {
        let mut cfg = small_config(kind, vec![0, 1, 2]);
        cfg.detach_domain_features = false;
        cfg.loss_weights =
            LossWeights { lambda_bp: 0.01, lambda_h: 0.01, alpha_outer: 1.0, lambda_d: 0.01, alpha_h: 1.0 };
        let m = HydaModel::new(cfg, 15).unwrap();
        let ds = small_dataset(3, 8, kind);
        let batch = ds.batch(&hyda::data::split_supervised(&ds).train[..12], kind);
        let classes = batch.y_domain.clone();
        let params: Vec<Tensor> = m.named_params().into_iter().map(|(_, t)| t.clone()).collect();
        let report = grad_check(
            |tape: &mut Tape, vars| {
                let bound = m.bind_vars(vars)?;
                let x = tape.constant(batch.x.clone());
                Ok(task_objective(&m, tape, &bound, x, &batch.y_task, &classes)?.total)
            },
            &params,
            STEP,
            TOL,
        )
        .unwrap();
        let names: Vec<String> = m.named_params().into_iter().map(|(n, _)| n).collect();
        let errs: Vec<_> = names.iter().zip(&report.max_rel_err).collect();
        assert!(report.passed, "{kind:?}: {errs:?}");
    }
}

#[test]
fn task_step_leaves_detached_domain_classifier_untouched() {
    let ds = small_dataset(3, 60, TaskKind::Regression);
    let data = train_batch(&ds, TaskKind::Regression);
    let mut m = model(16);
    let before: Vec<Tensor> = m.domain.named_params().into_iter().map(|(_, t)| t.clone()).collect();
    let task_before = m.primary.clone();
    let cfg = TrainConfig { update_domain: false, ..train_cfg(1, 3) };
    train_joint(&mut m, &data, &cfg).unwrap();
    let after: Vec<Tensor> = m.domain.named_params().into_iter().map(|(_, t)| t.clone()).collect();
    assert!(before.iter().zip(&after).all(|(a, b)| same_bits(a, b)));
    assert_ne!(m.primary, task_before);
}

#[test]
fn pretraining_separates_well_separated_domains() {
    let ds = hyda::data::generate_benchmark(&BenchmarkSpec {
        domains: 3,
        samples_per_domain: 200,
        bias_amplitude: 3.0,
        ..Default::default()
    })
    .unwrap();
    let data = train_batch(&ds, TaskKind::Regression);
    let mut m = model(17);
    let log = pretrain_domain(&mut m, &data, &train_cfg(15, 17)).unwrap();
    let losses = log.domain_losses();
    assert!(losses.last().unwrap() < losses.first().unwrap(), "{losses:?}");
    let acc = domain_accuracy(&m, &data).unwrap();
    assert!(acc > 0.9, "accuracy {acc}");
}

#[test]
fn zero_domain_coefficients_reduce_pretraining_to_cross_entropy() {
    let ds = small_dataset(3, 50, TaskKind::Regression);
    let data = train_batch(&ds, TaskKind::Regression);
    let mut cfg = small_config(TaskKind::Regression, vec![0, 1, 2]);
    cfg.loss_weights.alpha_outer = 0.0;
    cfg.loss_weights.lambda_d = 0.0;
    let tc = train_cfg(3, 21);
    let mut m = HydaModel::new(cfg.clone(), 21).unwrap();
    let log = pretrain_domain(&mut m, &data, &tc).unwrap();

    // Hand-written cross-entropy loop over the same batches and schedule.
    let mut reference = HydaModel::new(cfg, 21).unwrap();
    let mut opt = AdamW::new(tc.optimizer, &reference.domain.named_params());
    let mut order = stream(tc.seed, streams::DOMAIN_BATCH_ORDER);
    let per_epoch: Vec<Vec<Vec<usize>>> =
        (0..tc.epochs).map(|_| domain_balanced_batches(&data.y_domain, tc.batch_size, &mut order)).collect();
    let total = per_epoch.iter().map(Vec::len).sum::<usize>() as u64;
    let mut step = 0;
    let mut epoch_losses = Vec::new();
    for batches in per_epoch {
        let mut sum = 0.0;
        for rows in &batches {
            let b = data.select(rows);
            let mut tape = Tape::new();
            let vars: Vec<_> =
                reference.domain.named_params().into_iter().map(|(_, t)| tape.param(t.clone())).collect();
            let bound = reference.domain.bind_vars(&mut vars.iter().copied()).unwrap();
            let x = tape.constant(b.x.clone());
            let (logits, _) = reference.domain.forward(&mut tape, &bound, x).unwrap();
            let ce = cross_entropy(&mut tape, logits, &b.y_domain).unwrap();
            sum += tape.value(ce).data()[0];
            let grads = tape.backward(ce).unwrap();
            let g: Vec<Tensor> = vars.iter().map(|&v| grads.get(v).unwrap().clone()).collect();
            let lr = cosine_lr(step, total, tc.optimizer.lr, tc.optimizer.min_lr);
            opt.step(&mut reference.domain.params_mut(), &g, lr).unwrap();
            step += 1;
        }
        epoch_losses.push(sum / batches.len() as f64);
    }
    assert_eq!(log.domain_losses(), epoch_losses);
    assert_eq!(m.checksum(), reference.checksum());
}

#[test]
fn joint_training_lowers_the_task_loss() {
    let ds = small_dataset(3, 150, TaskKind::Regression);
    let data = train_batch(&ds, TaskKind::Regression);
    let mut m = model(23);
    let losses = train_joint(&mut m, &data, &train_cfg(20, 23)).unwrap().task_losses();
    assert!(losses[19] < losses[0], "{losses:?}");
}

#[test]
fn generated_parameter_similarity_loss_falls_in_most_seeds() {
    let ds = small_dataset(3, 150, TaskKind::Regression);
    let data = train_batch(&ds, TaskKind::Regression);
    let mut falls = 0;
    for seed in [17, 42, 1337] {
        let mut m = model(seed);
        let log = train_joint(&mut m, &data, &train_cfg(20, seed)).unwrap();
        let ms: Vec<f64> = log.epochs.iter().map(|e| e.msim_h.unwrap()).collect();
        if ms.last() < ms.first() {
            falls += 1;
        }
    }
    assert!(falls >= 2, "fell in {falls} of 3 seeds");
}

#[test]
fn empty_mask_with_zero_coefficients_is_the_plain_network() {
    let ds = small_dataset(3, 60, TaskKind::Regression);
    let data = train_batch(&ds, TaskKind::Regression);
    let mut cfg = small_config(TaskKind::Regression, vec![0, 1, 2]);
    cfg.external_layers.clear();
    cfg.loss_weights = LossWeights::zero();
    let tc = TrainConfig { update_domain: false, ..train_cfg(4, 31) };
    let mut m = HydaModel::new(cfg.clone(), 31).unwrap();
    let mut base = BaselineMlp::new(&cfg, 31).unwrap();
    assert!(same_bits(&m.predict(&data.x).unwrap(), &base.predict(&data.x).unwrap()));
    let lj = train_joint(&mut m, &data, &tc).unwrap();
    let lb = train_baseline(&mut base, &data, &tc).unwrap();
    assert_eq!(lj.task_losses(), lb.task_losses());
    assert_eq!(lj.batch_order_hash, lb.batch_order_hash);
    assert!(same_bits(&m.predict(&data.x).unwrap(), &base.predict(&data.x).unwrap()));
}

#[test]
fn non_finite_loss_names_the_term() {
    let ds = small_dataset(3, 30, TaskKind::Regression);
    let data = train_batch(&ds, TaskKind::Regression);
    let mut m = model(33);
    // Output bias: reaches the task loss but no weight penalty.
    m.primary.params_mut().last_mut().unwrap().data_mut()[0] = f64::NAN;
    let cfg = TrainConfig { update_domain: false, ..train_cfg(1, 33) };
    match train_joint(&mut m, &data, &cfg) {
        Err(Error::Numeric { location, .. }) => assert!(location.contains("term task"), "{location}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn single_domain_training_is_rejected() {
    let ds = small_dataset(3, 20, TaskKind::Regression);
    let refs: Vec<_> = hyda::data::split_supervised(&ds).train.into_iter().filter(|r| r.domain == 0).collect();
    let data = ds.batch(&refs, TaskKind::Regression);
    let mut m = model(35);
    assert!(matches!(pretrain_domain(&mut m, &data, &train_cfg(1, 1)), Err(Error::Contract(_))));
}
