//! Oracles, finite-difference helpers and the invariant checks shared by the
//! integration test targets and the acceptance harness.
#![allow(dead_code)]

pub mod invariants;

use crossmodal::data::{Instance, ModalityKind, ModalitySpec, Sample, SetSample};
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Runner with a fixed seed so every run explores the same cases.
pub fn runner(cases: u32) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Plain triple loop over classes, batch rows and modalities.
pub fn naive_center_delta(embeddings: &[Vec<Vec<f64>>], labels: &[usize], centers: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = centers.first().map_or(0, Vec::len);
    let mut out = vec![vec![0.0; k]; centers.len()];
    for (j, row) in out.iter_mut().enumerate() {
        let mut count = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y != j {
                continue;
            }
            count += 1.0;
            for emb in embeddings {
                for d in 0..k {
                    row[d] += centers[j][d] - emb[i][d];
                }
            }
        }
        for v in row.iter_mut() {
            *v /= 1.0 + count;
        }
    }
    out
}

/// AP computed from explicit ranks: an item's rank is one plus the number
/// of items strictly closer, or equally close with a lower index.
pub fn brute_force_ap(query: &[f64], query_label: usize, gallery: &[(Vec<f64>, usize)], r: usize) -> f64 {
    let dist: Vec<f64> = gallery
        .iter()
        .map(|(g, _)| g.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    let rank = |i: usize| {
        1 + (0..gallery.len())
            .filter(|&j| dist[j] < dist[i] || (dist[j] == dist[i] && j < i))
            .count()
    };
    let relevant: Vec<usize> = (0..gallery.len())
        .filter(|&i| gallery[i].1 == query_label && rank(i) <= r)
        .collect();
    if relevant.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &i in &relevant {
        let ri = rank(i);
        let above = relevant.iter().filter(|&&j| rank(j) <= ri).count();
        total += above as f64 / ri as f64;
    }
    total / relevant.len() as f64
}

/// Random instances for the given modality specs.
pub fn random_instances(rng: &mut ChaCha8Rng, specs: &[ModalitySpec], classes: usize, n: usize) -> Vec<Instance<f64>> {
    (0..n)
        .map(|id| Instance {
            id,
            label: rng.random_range(0..classes),
            samples: specs
                .iter()
                .map(|s| match s.kind {
                    ModalityKind::Vector => Sample::Vector(normal(rng, s.dim)),
                    ModalityKind::PointSet => {
                        let points = rng.random_range(1..=4);
                        Sample::Points(SetSample::new(s.dim, normal(rng, points * s.dim)).unwrap())
                    }
                })
                .collect(),
        })
        .collect()
}

pub fn random_specs(rng: &mut ChaCha8Rng, modalities: usize) -> Vec<ModalitySpec> {
    (0..modalities)
        .map(|m| ModalitySpec {
            name: format!("m{m}"),
            kind: if rng.random_bool(0.5) {
                ModalityKind::Vector
            } else {
                ModalityKind::PointSet
            },
            dim: rng.random_range(2..=5),
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||, 1e-8)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-8)
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_differences(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}
