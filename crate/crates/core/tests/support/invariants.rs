//! One check per documented invariant. Each returns `Err` with a
//! description of the first counterexample.

use crossmodal::data::{
    generate_synthetic, load_dataset, write_dataset, GeneratedModality, GeneratorConfig, Instance, ModalityKind, Sample,
};
use crossmodal::eval::{
    average_precision, mean_average_precision, query_average_precisions, rank_gallery, retrieval_matrix, EmbeddingRow,
    EmbeddingTable, Item,
};
use crossmodal::losses::{
    apply_center_update, center_delta, cross_modal_center_loss, cross_modal_mse, discriminative_loss, CenterBank,
    Reduction,
};
use crossmodal::model::{classify, Model, ModelDims};
use crossmodal::train::{mean_center_distance, run_training, Budget, OptimizerState, TrainConfig, Trainer};
use crossmodal::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use super::gradients::{check_case, random_case, LossKind};
use super::{
    brute_force_ap, central_differences, naive_center_delta, normal, random_instances, random_specs, relative_error,
    rng, runner,
};

pub type Check = fn() -> Result<(), String>;

/// Every invariant, tagged with the module it belongs to.
pub fn registry() -> Vec<(&'static str, &'static str, Check)> {
    vec![
        (
            "autodiff",
            "op gradients match finite differences",
            op_gradients_match_finite_differences,
        ),
        ("autodiff", "tape is bitwise deterministic", tape_is_deterministic),
        ("autodiff", "backward is linear in the loss scale", backward_is_linear),
        (
            "model",
            "shared head classifies every modality alike",
            shared_head_is_shared,
        ),
        (
            "model",
            "set encoder is permutation invariant",
            set_encoder_permutation_invariant,
        ),
        (
            "model",
            "classify∘encode gradients match finite differences",
            classify_encode_gradients,
        ),
        (
            "losses",
            "center loss is non-negative, zero only at centers",
            center_loss_nonnegative,
        ),
        ("losses", "losses ignore batch order", losses_ignore_batch_order),
        (
            "losses",
            "center loss gradient is the offset from the center",
            center_loss_gradient,
        ),
        (
            "losses",
            "center delta matches the triple-loop oracle",
            center_delta_matches_oracle,
        ),
        (
            "losses",
            "uniform predictions give ln K per modality",
            uniform_predictions_give_ln_k,
        ),
        (
            "losses",
            "pair loss is modality-symmetric, zero iff aligned",
            pair_loss_symmetric,
        ),
        (
            "losses",
            "repeated center updates converge to the class mean",
            center_updates_converge,
        ),
        ("data", "write/load round trip is lossless", round_trip_is_lossless),
        (
            "data",
            "noiseless classes have no within-class spread",
            noiseless_classes_are_tight,
        ),
        ("train", "training is bitwise deterministic", training_is_deterministic),
        ("train", "weight decay touches weights only", weight_decay_weights_only),
        (
            "train",
            "probe distance to centers does not grow",
            probe_distance_does_not_grow,
        ),
        ("eval", "AP and mAP lie in [0, 1]", ap_bounds),
        (
            "eval",
            "ranking, AP and mAP ignore positive scaling",
            scaling_invariance,
        ),
        ("eval", "mAP matches the brute-force oracle", map_matches_oracle),
        (
            "eval",
            "self-exclusion never scores the query's own row",
            self_exclusion,
        ),
    ]
}

fn run(cases: u32, prop: impl Fn(u64) -> Result<(), TestCaseError>) -> Result<(), String> {
    runner(cases).run(&any::<u64>(), prop).map_err(|e| e.to_string())
}

fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Tensor<f64> {
    Tensor::matrix(rows, cols, values).unwrap()
}

// autodiff

/// One graph touching every op, differentiated with respect to all three
/// inputs.
fn op_graph(
    tape: &mut Tape<f64>,
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    segs: &[usize],
    labels: &[usize],
) -> (Var, [Var; 3]) {
    let (xv, wv, bv) = (tape.param(x), tape.param(w), tape.param(b));
    let h = tape.matmul(xv, wv).unwrap();
    let h = tape.add_bias(h, bv).unwrap();
    let h = tape.relu(h).unwrap();
    let pooled = tape.segment_max(h, segs).unwrap();
    let lp = tape.log_softmax(pooled).unwrap();
    let ce = tape.pick_sum(lp, labels).unwrap();
    let rows = segs.len();
    let cols = w.shape()[1];
    let target = tape.constant(matrix(rows, cols, vec![0.25; rows * cols]));
    let sq = tape.squared_euclidean(pooled, target).unwrap();
    let sq = tape.scale(sq, 0.3).unwrap();
    let total = tape.sum(h).unwrap();
    let total = tape.scale(total, 0.1).unwrap();
    let loss = tape.add(ce, sq).unwrap();
    let loss = tape.add(loss, total).unwrap();
    (loss, [xv, wv, bv])
}

struct OpCase {
    x: Tensor<f64>,
    w: Tensor<f64>,
    b: Tensor<f64>,
    segs: Vec<usize>,
    labels: Vec<usize>,
}

fn op_case(seed: u64) -> OpCase {
    let mut r = rng(seed);
    let segs: Vec<usize> = (0..r.random_range(1..=3)).map(|_| r.random_range(1..=3)).collect();
    let n: usize = segs.iter().sum();
    let (d, c) = (r.random_range(1..=4), r.random_range(2..=4));
    let labels = (0..segs.len()).map(|_| r.random_range(0..c)).collect();
    OpCase {
        x: matrix(n, d, normal(&mut r, n * d)),
        w: matrix(d, c, normal(&mut r, d * c)),
        b: Tensor::vector(normal(&mut r, c)),
        segs,
        labels,
    }
}

fn op_value(c: &OpCase, inputs: [&Tensor<f64>; 3]) -> f64 {
    let mut t = Tape::new();
    let (loss, _) = op_graph(&mut t, inputs[0], inputs[1], inputs[2], &c.segs, &c.labels);
    t.item(loss).unwrap()
}

fn op_gradients_match_finite_differences() -> Result<(), String> {
    run(32, |seed| {
        let c = op_case(seed);
        let mut t = Tape::new();
        let (loss, vars) = op_graph(&mut t, &c.x, &c.w, &c.b, &c.segs, &c.labels);
        t.backward(loss).unwrap();
        for (k, var) in vars.into_iter().enumerate() {
            let base = [&c.x, &c.w, &c.b][k].clone();
            let numeric = central_differences(base.values(), 1e-5, |probe| {
                let mut p = base.clone();
                p.values_mut().copy_from_slice(probe);
                let mut inputs = [&c.x, &c.w, &c.b];
                inputs[k] = &p;
                op_value(&c, inputs)
            });
            let err = relative_error(t.grad(var).unwrap(), &numeric);
            prop_assert!(err < 1e-4, "input {k}: relative error {err:e}");
        }
        Ok(())
    })
}

fn tape_is_deterministic() -> Result<(), String> {
    run(32, |seed| {
        let c = op_case(seed);
        let once = || {
            let mut t = Tape::new();
            let (loss, vars) = op_graph(&mut t, &c.x, &c.w, &c.b, &c.segs, &c.labels);
            t.backward(loss).unwrap();
            let mut bits = vec![t.item(loss).unwrap().to_bits()];
            for v in vars {
                bits.extend(t.grad(v).unwrap().iter().map(|g| g.to_bits()));
            }
            bits
        };
        prop_assert_eq!(once(), once());
        Ok(())
    })
}

fn backward_is_linear() -> Result<(), String> {
    run(32, |seed| {
        let c = op_case(seed);
        let alpha = rng(seed ^ 0x5a).random_range(-3.0..3.0);
        let grads = |scale: Option<f64>| {
            let mut t = Tape::new();
            let (loss, vars) = op_graph(&mut t, &c.x, &c.w, &c.b, &c.segs, &c.labels);
            let loss = match scale {
                Some(a) => t.scale(loss, a).unwrap(),
                None => loss,
            };
            t.backward(loss).unwrap();
            vars.iter()
                .flat_map(|&v| t.grad(v).unwrap().to_vec())
                .collect::<Vec<f64>>()
        };
        let (plain, scaled) = (grads(None), grads(Some(alpha)));
        for (p, s) in plain.iter().zip(&scaled) {
            prop_assert!(
                (alpha * p - s).abs() <= 1e-12 * (1.0 + s.abs()),
                "{} vs {}",
                alpha * p,
                s
            );
        }
        Ok(())
    })
}

// model

fn small_model(seed: u64, modalities: usize) -> (Model<f64>, Vec<Instance<f64>>) {
    let mut r = rng(seed);
    let specs = random_specs(&mut r, modalities);
    let dims = ModelDims {
        hidden_dim: 6,
        embed_dim: 3,
        head_hidden: 5,
    };
    let classes = r.random_range(2..=4);
    let model = Model::init(&specs, classes, dims, seed).unwrap();
    let batch = random_instances(&mut r, &specs, classes, 5);
    (model, batch)
}

fn shared_head_is_shared() -> Result<(), String> {
    run(24, |seed| {
        let (mut model, batch) = small_model(seed, 3);
        let refs: Vec<&Instance<f64>> = batch.iter().collect();
        let mut r = rng(seed ^ 0x77);
        for round in 0..2 {
            if round == 1 {
                let p = &mut model.head.fc2.bias;
                let shift = normal(&mut r, p.len());
                p.values_mut().iter_mut().zip(shift).for_each(|(v, s)| *v += s);
            }
            let mut t = Tape::new();
            let bound = model.bind(&mut t);
            for m in 0..3 {
                let input = model.stack_inputs(m, &refs).unwrap();
                let v = model.forward_modality(&mut t, &bound, m, input).unwrap();
                let lp = classify(&mut t, &bound.head, v).unwrap();
                let (emb, out) = (t.value(v).clone(), t.value(lp).clone());
                for i in 0..refs.len() {
                    let alone = model.classify(emb.row(i)).unwrap();
                    prop_assert_eq!(alone.values(), out.row(i));
                }
            }
        }
        Ok(())
    })
}

fn set_encoder_permutation_invariant() -> Result<(), String> {
    run(64, |seed| {
        let mut r = rng(seed);
        let specs = vec![crossmodal::data::ModalitySpec {
            name: "cloud".into(),
            kind: ModalityKind::PointSet,
            dim: r.random_range(1..=5),
        }];
        let model = Model::<f64>::init(&specs, 3, ModelDims::default(), seed).unwrap();
        let d = specs[0].dim;
        let n = r.random_range(1..=12);
        let points: Vec<Vec<f64>> = (0..n).map(|_| normal(&mut r, d)).collect();
        let mut shuffled = points.clone();
        shuffled.shuffle(&mut r);
        let mut doubled = points.clone();
        doubled.extend(points.iter().cloned());
        let enc = |p: &[Vec<f64>]| {
            let set = crossmodal::data::SetSample::from_points(p).unwrap();
            model.encode_set(0, &set).unwrap().values().to_vec()
        };
        let base = enc(&points);
        prop_assert_eq!(&base, &enc(&shuffled));
        prop_assert_eq!(&base, &enc(&doubled));
        Ok(())
    })
}

fn classify_encode_gradients() -> Result<(), String> {
    run(24, |seed| {
        let report = check_case(&random_case(LossKind::Discriminative, seed));
        prop_assert!(report.params < 1e-4, "relative error {:e}", report.params);
        Ok(())
    })
}

// losses

struct LossBatch {
    embeddings: Vec<Tensor<f64>>,
    labels: Vec<usize>,
    bank: CenterBank<f64>,
}

fn loss_batch(seed: u64, max_k: usize, max_m: usize, max_n: usize) -> LossBatch {
    let mut r = rng(seed);
    let classes = r.random_range(1..=max_k);
    let k = r.random_range(1..=4);
    let m = r.random_range(1..=max_m);
    let n = r.random_range(1..=max_n);
    let labels = (0..n).map(|_| r.random_range(0..classes)).collect();
    let embeddings = (0..m).map(|_| matrix(n, k, normal(&mut r, n * k))).collect();
    let bank = CenterBank::new(matrix(classes, k, normal(&mut r, classes * k)), 0.5).unwrap();
    LossBatch {
        embeddings,
        labels,
        bank,
    }
}

fn center_loss_value(b: &LossBatch, reduction: Reduction) -> f64 {
    let mut t = Tape::new();
    let vars: Vec<Var> = b.embeddings.iter().map(|e| t.param(e)).collect();
    let l = cross_modal_center_loss(&mut t, &vars, &b.labels, &b.bank, reduction).unwrap();
    t.item(l).unwrap()
}

fn center_loss_nonnegative() -> Result<(), String> {
    run(64, |seed| {
        let mut b = loss_batch(seed, 5, 3, 8);
        prop_assert!(center_loss_value(&b, Reduction::Sum) > 0.0);
        prop_assert!(center_loss_value(&b, Reduction::Mean) > 0.0);
        for e in &mut b.embeddings {
            for i in 0..b.labels.len() {
                let c = b.bank.center(b.labels[i]).to_vec();
                let k = c.len();
                e.values_mut()[i * k..(i + 1) * k].copy_from_slice(&c);
            }
        }
        prop_assert_eq!(center_loss_value(&b, Reduction::Sum), 0.0);
        Ok(())
    })
}

fn permute_rows(t: &Tensor<f64>, order: &[usize]) -> Tensor<f64> {
    let rows: Vec<&[f64]> = order.iter().map(|&i| t.row(i)).collect();
    Tensor::from_rows(&rows).unwrap()
}

fn all_losses(b: &LossBatch) -> [f64; 3] {
    let mut t = Tape::new();
    let vars: Vec<Var> = b.embeddings.iter().map(|e| t.param(e)).collect();
    let lc = cross_modal_center_loss(&mut t, &vars, &b.labels, &b.bank, Reduction::Mean).unwrap();
    let lm = cross_modal_mse(&mut t, &vars, Reduction::Mean).unwrap();
    let classes = b.bank.num_classes();
    let lps: Vec<Var> = if classes >= 2 {
        b.embeddings
            .iter()
            .map(|e| {
                let logits: Vec<f64> = (0..e.shape()[0])
                    .flat_map(|i| (0..classes).map(move |j| e.row(i)[j % e.shape()[1]] * (j + 1) as f64))
                    .collect();
                let x = t.param(&matrix(e.shape()[0], classes, logits));
                t.log_softmax(x).unwrap()
            })
            .collect()
    } else {
        Vec::new()
    };
    let ld = if lps.is_empty() {
        0.0
    } else {
        let l = discriminative_loss(&mut t, &lps, &b.labels).unwrap();
        t.item(l).unwrap()
    };
    [t.item(lc).unwrap(), ld, t.item(lm).unwrap()]
}

fn losses_ignore_batch_order() -> Result<(), String> {
    run(64, |seed| {
        let b = loss_batch(seed, 5, 3, 10);
        let mut order: Vec<usize> = (0..b.labels.len()).collect();
        order.shuffle(&mut rng(seed ^ 0x99));
        let p = LossBatch {
            embeddings: b.embeddings.iter().map(|e| permute_rows(e, &order)).collect(),
            labels: order.iter().map(|&i| b.labels[i]).collect(),
            bank: b.bank.clone(),
        };
        for (x, y) in all_losses(&b).iter().zip(all_losses(&p)) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{x} vs {y}");
        }
        Ok(())
    })
}

fn center_loss_gradient() -> Result<(), String> {
    run(48, |seed| {
        let b = loss_batch(seed, 4, 3, 6);
        for reduction in [Reduction::Sum, Reduction::Mean] {
            let mut t = Tape::new();
            let vars: Vec<Var> = b.embeddings.iter().map(|e| t.param(e)).collect();
            let l = cross_modal_center_loss(&mut t, &vars, &b.labels, &b.bank, reduction).unwrap();
            t.backward(l).unwrap();
            let n = b.labels.len();
            let factor = match reduction {
                Reduction::Sum => 1.0,
                Reduction::Mean => 1.0 / (n * b.embeddings.len()) as f64,
            };
            for (m, e) in b.embeddings.iter().enumerate() {
                let grad = t.grad(vars[m]).unwrap();
                let k = e.shape()[1];
                for i in 0..n {
                    let c = b.bank.center(b.labels[i]);
                    for d in 0..k {
                        let expected = factor * (e.row(i)[d] - c[d]);
                        prop_assert!((grad[i * k + d] - expected).abs() <= 1e-12);
                    }
                }
                let numeric = central_differences(e.values(), 1e-5, |probe| {
                    let mut es = b.embeddings.clone();
                    es[m].values_mut().copy_from_slice(probe);
                    center_loss_value(
                        &LossBatch {
                            embeddings: es,
                            labels: b.labels.clone(),
                            bank: b.bank.clone(),
                        },
                        reduction,
                    )
                });
                let err = relative_error(grad, &numeric);
                prop_assert!(err < 1e-4, "relative error {err:e}");
            }
        }
        Ok(())
    })
}

/// Largest absolute gap between `center_delta` and the naive oracle.
pub fn center_delta_gap(seed: u64) -> f64 {
    let b = loss_batch(seed, 5, 3, 16);
    let refs: Vec<&Tensor<f64>> = b.embeddings.iter().collect();
    let fast = center_delta(&refs, &b.labels, &b.bank).unwrap();
    let nested: Vec<Vec<Vec<f64>>> = b
        .embeddings
        .iter()
        .map(|e| (0..b.labels.len()).map(|i| e.row(i).to_vec()).collect())
        .collect();
    let centers: Vec<Vec<f64>> = (0..b.bank.num_classes()).map(|j| b.bank.center(j).to_vec()).collect();
    let slow = naive_center_delta(&nested, &b.labels, &centers);
    slow.iter()
        .enumerate()
        .flat_map(|(j, row)| row.iter().zip(fast.row(j)).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max)
}

fn center_delta_matches_oracle() -> Result<(), String> {
    run(100, |seed| {
        let gap = center_delta_gap(seed);
        prop_assert!(gap <= 1e-12, "gap {gap:e}");
        Ok(())
    })
}

fn uniform_predictions_give_ln_k() -> Result<(), String> {
    run(64, |seed| {
        let mut r = rng(seed);
        let classes = r.random_range(2..=6);
        let modalities = r.random_range(1..=3);
        let n = r.random_range(1..=8);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
        let shift = r.random_range(-5.0..5.0);
        let mut t = Tape::new();
        let lps: Vec<Var> = (0..modalities)
            .map(|_| {
                let x = t.param(&matrix(n, classes, vec![shift; n * classes]));
                t.log_softmax(x).unwrap()
            })
            .collect();
        let l = discriminative_loss(&mut t, &lps, &labels).unwrap();
        let expected = modalities as f64 * (classes as f64).ln();
        let got = t.item(l).unwrap();
        prop_assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        Ok(())
    })
}

fn pair_value(embeddings: &[Tensor<f64>]) -> f64 {
    let mut t = Tape::new();
    let vars: Vec<Var> = embeddings.iter().map(|e| t.param(e)).collect();
    let l = cross_modal_mse(&mut t, &vars, Reduction::Mean).unwrap();
    t.item(l).unwrap()
}

fn pair_loss_symmetric() -> Result<(), String> {
    run(64, |seed| {
        let b = loss_batch(seed, 3, 3, 6);
        let mut shuffled = b.embeddings.clone();
        shuffled.shuffle(&mut rng(seed ^ 0x31));
        let (x, y) = (pair_value(&b.embeddings), pair_value(&shuffled));
        prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        if b.embeddings.len() > 1 {
            prop_assert!(x > 0.0);
        }
        let aligned = vec![b.embeddings[0].clone(); b.embeddings.len()];
        prop_assert_eq!(pair_value(&aligned), 0.0);
        Ok(())
    })
}

fn center_updates_converge() -> Result<(), String> {
    run(48, |seed| {
        let b = loss_batch(seed, 4, 3, 8);
        let m = b.embeddings.len() as f64;
        let classes = b.bank.num_classes();
        let counts: Vec<f64> = (0..classes)
            .map(|j| b.labels.iter().filter(|&&y| y == j).count() as f64)
            .collect();
        // Keep lr * count * M / (1 + count) inside (0, 2) for every class.
        let limit = counts
            .iter()
            .filter(|&&c| c > 0.0)
            .map(|&c| 2.0 * (1.0 + c) / (c * m))
            .fold(f64::INFINITY, f64::min);
        let lr = rng(seed ^ 0x11).random_range(0.05..0.95) * limit;
        let mut bank = CenterBank::new(b.bank.centers().clone(), lr).unwrap();
        let k = bank.dim();
        let means: Vec<Option<Vec<f64>>> = (0..classes)
            .map(|j| {
                (counts[j] > 0.0).then(|| {
                    let mut acc = vec![0.0; k];
                    for e in &b.embeddings {
                        for (i, _) in b.labels.iter().enumerate().filter(|(_, &y)| y == j) {
                            acc.iter_mut().zip(e.row(i)).for_each(|(a, v)| *a += v);
                        }
                    }
                    acc.iter().map(|a| a / (counts[j] * m)).collect()
                })
            })
            .collect();
        let dist = |bank: &CenterBank<f64>, j: usize, mean: &[f64]| {
            bank.center(j)
                .iter()
                .zip(mean)
                .map(|(c, v)| (c - v).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let refs: Vec<&Tensor<f64>> = b.embeddings.iter().collect();
        for _ in 0..30 {
            let before: Vec<Option<f64>> = means
                .iter()
                .enumerate()
                .map(|(j, mean)| mean.as_ref().map(|mean| dist(&bank, j, mean)))
                .collect();
            let delta = center_delta(&refs, &b.labels, &bank).unwrap();
            let frozen: Vec<Vec<f64>> = (0..classes).map(|j| bank.center(j).to_vec()).collect();
            apply_center_update(&mut bank, &delta).unwrap();
            for j in 0..classes {
                match (&means[j], before[j]) {
                    (Some(mean), Some(d0)) if d0 > 1e-9 => {
                        let d1 = dist(&bank, j, mean);
                        prop_assert!(d1 < d0, "class {j}: {d1} >= {d0}");
                    }
                    (None, _) => prop_assert_eq!(bank.center(j), frozen[j].as_slice()),
                    _ => {}
                }
            }
        }
        Ok(())
    })
}

// data

fn small_generator(seed: u64) -> GeneratorConfig {
    let mut r = rng(seed);
    let modalities = (0..r.random_range(1..=3))
        .map(|m| GeneratedModality {
            name: format!("mod{m}"),
            kind: if r.random_bool(0.5) {
                ModalityKind::Vector
            } else {
                ModalityKind::PointSet
            },
            dim: r.random_range(1..=6),
            points: r.random_range(1..=5),
        })
        .collect();
    GeneratorConfig {
        num_classes: r.random_range(1..=4),
        modalities,
        n_train: r.random_range(1..=12),
        n_test: r.random_range(1..=6),
        latent_dim: r.random_range(1..=4),
        noise_sigma: r.random_range(0.0..0.5),
        nuisance_strength: r.random_range(0.0..2.0),
        seed,
    }
}

fn round_trip_is_lossless() -> Result<(), String> {
    run(16, |seed| {
        let cfg = small_generator(seed);
        let dir = tempfile::tempdir().unwrap();
        let s64 = generate_synthetic::<f64>(&cfg).unwrap();
        let manifest = write_dataset(&dir.path().join("f64"), &s64).unwrap();
        prop_assert_eq!(load_dataset::<f64>(&manifest).unwrap(), s64);
        let s32 = generate_synthetic::<f32>(&cfg).unwrap();
        let manifest = write_dataset(&dir.path().join("f32"), &s32).unwrap();
        prop_assert_eq!(load_dataset::<f32>(&manifest).unwrap(), s32);
        Ok(())
    })
}

fn flat(sample: &Sample<f64>) -> Vec<f64> {
    match sample {
        Sample::Vector(v) => v.clone(),
        Sample::Points(p) => p.values().to_vec(),
    }
}

fn noiseless_classes_are_tight() -> Result<(), String> {
    run(16, |seed| {
        let base = small_generator(seed);
        let exact = generate_synthetic::<f64>(&GeneratorConfig {
            noise_sigma: 0.0,
            nuisance_strength: 0.0,
            ..base.clone()
        })
        .unwrap();
        for a in exact.train.instances() {
            for b in exact.train.instances().iter().filter(|b| b.label == a.label) {
                prop_assert_eq!(&a.samples, &b.samples);
            }
        }
        // With only the nuisance left, within-class differences are
        // parallel to one direction per modality.
        let nuisance = generate_synthetic::<f64>(&GeneratorConfig {
            noise_sigma: 0.0,
            nuisance_strength: 1.0,
            ..base
        })
        .unwrap();
        let inst = nuisance.train.instances();
        for m in 0..nuisance.train.num_modalities() {
            let mut direction: Option<Vec<f64>> = None;
            for a in inst {
                for b in inst.iter().filter(|b| b.label == a.label) {
                    let diff: Vec<f64> = flat(&a.samples[m])
                        .iter()
                        .zip(flat(&b.samples[m]))
                        .map(|(x, y)| x - y)
                        .collect();
                    let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm < 1e-9 {
                        continue;
                    }
                    let unit: Vec<f64> = diff.iter().map(|v| v / norm).collect();
                    match &direction {
                        None => direction = Some(unit),
                        Some(u) => {
                            let cos: f64 = u.iter().zip(&unit).map(|(p, q)| p * q).sum();
                            prop_assert!((cos.abs() - 1.0).abs() < 1e-9, "cos {cos}");
                        }
                    }
                }
            }
        }
        Ok(())
    })
}

// train

fn tiny_run_config(seed: u64) -> (GeneratorConfig, ModelDims, TrainConfig) {
    let data = GeneratorConfig {
        n_train: 24,
        n_test: 8,
        seed,
        ..GeneratorConfig::default()
    };
    let dims = ModelDims {
        hidden_dim: 8,
        embed_dim: 4,
        head_hidden: 6,
    };
    let train = TrainConfig {
        batch_size: 6,
        budget: Budget::Iterations(12),
        learning_rate: 0.01,
        lr_decay_every: 5,
        seed,
        ..TrainConfig::default()
    };
    (data, dims, train)
}

fn training_is_deterministic() -> Result<(), String> {
    run(6, |seed| {
        let (data, dims, cfg) = tiny_run_config(seed);
        let splits = generate_synthetic::<f64>(&data).unwrap();
        let a = run_training(&splits.train, dims, &cfg).unwrap();
        let b = run_training(&splits.train, dims, &cfg).unwrap();
        let bits = |h: &[crossmodal::train::HistoryRow]| -> Vec<u64> {
            h.iter()
                .flat_map(|r| [r.lr, r.metrics.total, r.metrics.center, r.metrics.disc, r.metrics.mse])
                .map(f64::to_bits)
                .collect()
        };
        prop_assert_eq!(bits(&a.history), bits(&b.history));
        prop_assert_eq!(a.model.to_checkpoint_json(), b.model.to_checkpoint_json());
        prop_assert_eq!(a.bank.to_text(), b.bank.to_text());
        Ok(())
    })
}

fn weight_decay_weights_only() -> Result<(), String> {
    run(24, |seed| {
        let (model, _) = small_model(seed, 2);
        let mut r = rng(seed ^ 0x42);
        let (lr, mu, wd) = (
            r.random_range(0.01..0.5),
            r.random_range(0.0..0.95),
            r.random_range(0.0..0.1),
        );
        let mask = model.weight_mask();

        // Zero gradients: only weights move, by exactly lr * wd * theta.
        let mut decayed = model.clone();
        for p in decayed.params_mut() {
            let zeros = vec![0.0; p.len()];
            p.set_grad(Some(zeros)).unwrap();
        }
        OptimizerState::new(&decayed).step(&mut decayed, lr, mu, wd).unwrap();
        for ((before, after), is_weight) in model.params().iter().zip(decayed.params()).zip(&mask) {
            for (&x, &y) in before.1.values().iter().zip(after.1.values()) {
                let expected = if *is_weight { x - lr * wd * x } else { x };
                prop_assert!((y - expected).abs() <= 1e-15 * (1.0 + x.abs()));
            }
        }

        // weight_decay = 0 is plain momentum SGD over two steps.
        let mut plain = model.clone();
        let mut opt = OptimizerState::new(&plain);
        let grads: Vec<Vec<Vec<f64>>> = (0..2)
            .map(|_| model.params().iter().map(|(_, p)| normal(&mut r, p.len())).collect())
            .collect();
        for step in &grads {
            for (p, g) in plain.params_mut().into_iter().zip(step) {
                p.set_grad(Some(g.clone())).unwrap();
            }
            opt.step(&mut plain, lr, mu, 0.0).unwrap();
        }
        for (p, (before, after)) in model.params().iter().zip(plain.params()).enumerate() {
            for (e, (&x, &y)) in before.1.values().iter().zip(after.1.values()).enumerate() {
                let v1 = grads[0][p][e];
                let v2 = mu * v1 + grads[1][p][e];
                let expected = x - lr * v1 - lr * v2;
                prop_assert!((y - expected).abs() <= 1e-12, "{y} vs {expected}");
            }
        }
        Ok(())
    })
}

/// Mean probe-batch distance to class centers after each epoch.
pub fn probe_distances(epochs: usize) -> Vec<f64> {
    let splits = generate_synthetic::<f32>(&GeneratorConfig::default()).unwrap();
    let cfg = TrainConfig::default();
    let mut trainer = Trainer::new(&splits.train, ModelDims::default(), cfg.clone()).unwrap();
    let probe: Vec<&Instance<f32>> = splits.train.instances().iter().take(32).collect();
    let per_epoch = splits.train.len() / cfg.batch_size;
    let mut out = vec![mean_center_distance(&trainer.model, &trainer.bank, &probe).unwrap()];
    for _ in 0..epochs {
        trainer.run(&splits.train, per_epoch).unwrap();
        out.push(mean_center_distance(&trainer.model, &trainer.bank, &probe).unwrap());
    }
    out
}

fn probe_distance_does_not_grow() -> Result<(), String> {
    let d = probe_distances(60);
    for (e, w) in d.windows(2).enumerate() {
        if w[1] > 1.05 * w[0] {
            return Err(format!("epoch {}: distance rose from {} to {}", e + 1, w[0], w[1]));
        }
    }
    Ok(())
}

// eval

fn random_items(
    r: &mut rand_chacha::ChaCha8Rng,
    n: usize,
    dim: usize,
    classes: usize,
    grid: bool,
) -> Vec<(Vec<f64>, usize)> {
    (0..n)
        .map(|_| {
            let v = if grid {
                (0..dim).map(|_| r.random_range(-2..=2) as f64).collect()
            } else {
                normal(r, dim)
            };
            (v, r.random_range(0..classes))
        })
        .collect()
}

fn items(v: &[(Vec<f64>, usize)], first_id: usize) -> Vec<Item<'_, f64>> {
    v.iter()
        .enumerate()
        .map(|(i, (vector, label))| Item {
            instance_id: first_id + i,
            label: *label,
            vector,
        })
        .collect()
}

fn ap_bounds() -> Result<(), String> {
    run(128, |seed| {
        let mut r = rng(seed);
        let n = r.random_range(1..=20);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..4)).collect();
        let ap = average_precision(&labels, r.random_range(0..4), r.random_range(1..=n)).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap));
        let grid = r.random_bool(0.5);
        let q = random_items(&mut r, 4, 3, 4, grid);
        let g = random_items(&mut r, n, 3, 4, grid);
        let map = mean_average_precision(&items(&q, 100), &items(&g, 0), None, false).unwrap();
        prop_assert!((0.0..=1.0).contains(&map));
        Ok(())
    })
}

fn scaling_invariance() -> Result<(), String> {
    run(64, |seed| {
        let mut r = rng(seed);
        let grid = r.random_bool(0.5);
        // Grid points keep exact ties, so they are scaled by powers of two.
        let factor = if grid {
            2f64.powi(r.random_range(-6..=6))
        } else {
            r.random_range(0.01..100.0)
        };
        let n = r.random_range(2..=15);
        let q = random_items(&mut r, 5, 3, 3, grid);
        let g = random_items(&mut r, n, 3, 3, grid);
        let scale = |v: &[(Vec<f64>, usize)]| -> Vec<(Vec<f64>, usize)> {
            v.iter()
                .map(|(x, l)| (x.iter().map(|a| a * factor).collect(), *l))
                .collect()
        };
        let (qs, gs) = (scale(&q), scale(&g));
        for (a, b) in q.iter().zip(&qs) {
            let plain: Vec<&[f64]> = g.iter().map(|x| x.0.as_slice()).collect();
            let scaled: Vec<&[f64]> = gs.iter().map(|x| x.0.as_slice()).collect();
            prop_assert_eq!(
                rank_gallery(&a.0, &plain).unwrap(),
                rank_gallery(&b.0, &scaled).unwrap()
            );
        }
        let aps = query_average_precisions(&items(&q, 100), &items(&g, 0), None, false).unwrap();
        let aps_scaled = query_average_precisions(&items(&qs, 100), &items(&gs, 0), None, false).unwrap();
        prop_assert_eq!(aps, aps_scaled);

        let shared = q.len().min(g.len());
        let mut rows = Vec::new();
        for (m, src) in [&q, &g].into_iter().enumerate() {
            for (i, (v, _)) in src.iter().take(shared).enumerate() {
                rows.push(EmbeddingRow {
                    instance_id: i,
                    modality: m,
                    label: q[i].1,
                    vector: v.clone(),
                });
            }
        }
        let table = EmbeddingTable::new(vec!["a".into(), "b".into()], 3, false, rows).unwrap();
        let plain = retrieval_matrix(&table, None, true).unwrap();
        let scaled = retrieval_matrix(&table.scaled(factor), None, true).unwrap();
        prop_assert_eq!(plain.map, scaled.map);
        Ok(())
    })
}

/// Largest gap between `mean_average_precision` and the brute-force mean
/// over one random case.
pub fn map_gap(seed: u64) -> f64 {
    let mut r = rng(seed);
    let grid = r.random_bool(0.5);
    let classes = r.random_range(1..=4);
    let dim = r.random_range(1..=4);
    let n = r.random_range(1..=20);
    let queries = r.random_range(1..=6);
    let q = random_items(&mut r, queries, dim, classes, grid);
    let g = random_items(&mut r, n, dim, classes, grid);
    let depth = if r.random_bool(0.5) {
        None
    } else {
        Some(r.random_range(1..=n))
    };
    let fast = mean_average_precision(&items(&q, 100), &items(&g, 0), depth, false).unwrap();
    let slow = q
        .iter()
        .map(|(v, l)| brute_force_ap(v, *l, &g, depth.unwrap_or(n)))
        .sum::<f64>()
        / q.len() as f64;
    (fast - slow).abs()
}

fn map_matches_oracle() -> Result<(), String> {
    run(100, |seed| {
        let gap = map_gap(seed);
        prop_assert!(gap <= 1e-12, "gap {gap:e}");
        Ok(())
    })
}

fn self_exclusion() -> Result<(), String> {
    run(64, |seed| {
        let mut r = rng(seed);
        let n = r.random_range(2..=15);
        let grid = r.random_bool(0.5);
        let set = random_items(&mut r, n, 2, 3, grid);
        let it = items(&set, 0);
        let aps = query_average_precisions(&it, &it, None, true).unwrap();
        for (i, (v, l)) in set.iter().enumerate() {
            let rest: Vec<(Vec<f64>, usize)> = set
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, x)| x.clone())
                .collect();
            prop_assert!((aps[i] - brute_force_ap(v, *l, &rest, rest.len())).abs() <= 1e-12);
        }
        // A query alone in its class finds nothing relevant.
        let mut lonely = set.clone();
        lonely[0].1 = 99;
        let aps = query_average_precisions(&items(&lonely, 0), &items(&lonely, 0), None, true).unwrap();
        prop_assert_eq!(aps[0], 0.0);
        Ok(())
    })
}
