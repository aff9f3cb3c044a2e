//! Independent oracles and algebraic identities for the losses, the forward
//! pass and the evaluation metrics.

use crl_core::distillation::{
    adaptive_margin, classification_loss, fkd_old_loss, kl_divergence, lwf_old_loss, relaxed_kl,
    tempered_softmax,
};
use crl_core::eval::{average_precision, retrieval_metrics, verification_tenfold, SampleMeta};
use crl_core::numerics::forward;
use crl_core::{Architecture, DenseTensor, DistillConfig, Method, ModelState};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DenseTensor {
    DenseTensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
}

#[test]
fn fkd_full_neighborhood_without_margin_matches_lwf_gradient() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..9);
        let l = rng.gen_range(1..30);
        let old = random_matrix(&mut rng, n, l, 4.0);
        let new = random_matrix(&mut rng, n, l, 4.0);
        let mut cfg = DistillConfig::new(Method::FkdBasic);
        cfg.neighborhood_size = rng.gen_range(0..50);
        cfg.margin_beta = 0.3;
        let fkd = fkd_old_loss(&old, &new, &cfg).unwrap();
        let (_, lwf) = lwf_old_loss(&old, &new, cfg.temperature).unwrap();
        for (a, b) in fkd.grads.data().iter().zip(lwf.data()) {
            assert!((a - b).abs() <= 1e-10, "seed {seed}: {a} vs {b}");
        }
    }
}

#[test]
fn zero_margin_relaxed_kl_is_kl() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let d: f64 = if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(0.0..5.0) };
        assert_eq!(relaxed_kl(d, 0.0).0.to_bits(), d.to_bits());
    }
    // and through the full loss: NS+CR at beta 0 is NS, bit for bit
    for seed in 0..30 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let old = random_matrix(&mut rng, 5, 12, 3.0);
        let new = random_matrix(&mut rng, 5, 12, 3.0);
        let mut cr = DistillConfig::new(Method::FkdNsCr);
        cr.margin_beta = 0.0;
        cr.neighborhood_size = rng.gen_range(0..14);
        let mut ns = cr.clone();
        ns.method = Method::FkdNs;
        assert_eq!(fkd_old_loss(&old, &new, &cr).unwrap(), fkd_old_loss(&old, &new, &ns).unwrap());
    }
}

#[test]
fn basic_fkd_divergences_equal_direct_kl() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let old = random_matrix(&mut rng, 6, 9, 3.0);
    let new = random_matrix(&mut rng, 6, 9, 3.0);
    let cfg = DistillConfig::new(Method::FkdBasic);
    let out = fkd_old_loss(&old, &new, &cfg).unwrap();
    for i in 0..6 {
        let p = tempered_softmax(old.row(i), 2.0).unwrap();
        let q = tempered_softmax(new.row(i), 2.0).unwrap();
        let d = kl_divergence(&p, &q).unwrap();
        assert!((out.relaxed_divergences[i] - d).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_is_entropy_plus_kl() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let old = random_matrix(&mut rng, 4, 10, 3.0);
        let new = random_matrix(&mut rng, 4, 10, 3.0);
        let (ce, _) = lwf_old_loss(&old, &new, 2.0).unwrap();
        let kl = fkd_old_loss(&old, &new, &DistillConfig::new(Method::FkdBasic)).unwrap().loss;
        let h: f64 = (0..4)
            .map(|i| entropy(&tempered_softmax(old.row(i), 2.0).unwrap()))
            .sum::<f64>()
            / 4.0;
        assert!((ce - (kl + h)).abs() < 1e-10, "seed {seed}: {ce} vs {}", kl + h);
        assert!(ce >= kl);
    }
}

#[test]
fn classification_loss_matches_unshifted_log_sum_exp() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let acts = random_matrix(&mut rng, 8, 5, 5.0);
    let labels: Vec<usize> = (0..8).map(|_| rng.gen_range(0..5)).collect();
    let (loss, _) = classification_loss(&acts, &labels).unwrap();
    let oracle: f64 = (0..8)
        .map(|i| {
            let row = acts.row(i);
            row.iter().map(|a| a.exp()).sum::<f64>().ln() - row[labels[i]]
        })
        .sum::<f64>()
        / 8.0;
    assert!((loss - oracle).abs() < 1e-10);
}

#[test]
fn margin_of_uniform_distribution() {
    let p = vec![1.0 / 200.0; 200];
    assert!((adaptive_margin(&p, 0.01) - 0.01 * 200f64.ln()).abs() < 1e-12);
}

#[test]
fn three_layer_forward_matches_matrix_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let arch = Architecture {
        input_dim: 8,
        hidden: vec![7, 6],
        embed_dim: 5,
    };
    let model = ModelState::init(&arch, 4, &mut rng).unwrap();
    let mut model = model;
    for p in model.params_mut() {
        for v in p.data_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    let x = random_matrix(&mut rng, 4, 8, 1.0);
    let out = forward(&model, &x).unwrap();

    // plain nested loops, accumulating each dot product in reverse order
    let mut h: Vec<Vec<f64>> = (0..4).map(|i| x.row(i).to_vec()).collect();
    for layer in &model.layers {
        let (rows, cols) = (layer.weight.rows(), layer.weight.cols());
        h = h
            .iter()
            .map(|v| {
                (0..cols)
                    .map(|j| {
                        let mut s = layer.bias.data()[j];
                        for k in (0..rows).rev() {
                            s += v[k] * layer.weight.get(k, j);
                        }
                        if layer.relu {
                            s.max(0.0)
                        } else {
                            s
                        }
                    })
                    .collect()
            })
            .collect();
    }
    let c = &model.classifier;
    for (i, e) in h.iter().enumerate() {
        for j in 0..c.cols() {
            let mut s = 0.0;
            for k in (0..c.rows()).rev() {
                s += e[k] * c.get(k, j);
            }
            let got = out.activations.get(i, j);
            assert!((got - s).abs() <= 1e-12 * s.abs().max(1.0), "({i},{j}): {got} vs {s}");
        }
    }
}

#[test]
fn ap_hand_example() {
    let ap = average_precision(&[true, false, true]).unwrap();
    assert!((ap - 0.833_333_333_333_333_4).abs() < 1e-12);
}

/// Retrieval by pairwise counting, no sorting: the rank of a gallery
/// entry is the number of admissible entries that precede it under
/// (distance, index).
fn brute_force_retrieval(q: &[Vec<f64>], qm: &[SampleMeta], g: &[Vec<f64>], gm: &[SampleMeta]) -> Option<(f64, f64)> {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut hits = 0usize;
    let mut ap_sum = 0.0;
    let mut evaluated = 0usize;
    for (qi, qv) in q.iter().enumerate() {
        let admissible: Vec<usize> = (0..g.len())
            .filter(|&j| !(gm[j].identity == qm[qi].identity && gm[j].camera == qm[qi].camera))
            .collect();
        let key = |j: usize| (dist(qv, &g[j]), j);
        let before = |a: usize, b: usize| {
            let (ka, kb) = (key(a), key(b));
            ka.0 < kb.0 || (ka.0 == kb.0 && ka.1 < kb.1)
        };
        let relevant: Vec<usize> = admissible.iter().copied().filter(|&j| gm[j].identity == qm[qi].identity).collect();
        if relevant.is_empty() {
            continue;
        }
        evaluated += 1;
        let mut precisions: Vec<(usize, f64)> = relevant
            .iter()
            .map(|&r| {
                let rank = admissible.iter().filter(|&&j| before(j, r)).count() + 1;
                let hits_upto = relevant.iter().filter(|&&j| j == r || before(j, r)).count();
                (rank, hits_upto as f64 / rank as f64)
            })
            .collect();
        precisions.sort_by_key(|p| p.0);
        if precisions[0].0 == 1 {
            hits += 1;
        }
        let s: f64 = precisions.iter().map(|p| p.1).sum();
        ap_sum += s / relevant.len() as f64;
    }
    (evaluated > 0).then(|| (hits as f64 / evaluated as f64, ap_sum / evaluated as f64))
}

#[test]
fn retrieval_matches_brute_force_oracle() {
    let mut compared = 0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nq = rng.gen_range(1..=50);
        let ng = rng.gen_range(1..=50);
        let ids = rng.gen_range(1..8);
        let cams = rng.gen_range(2..4);
        let dim = rng.gen_range(1..4);
        // small integer grid so that distance ties are common
        let mut draw = |n: usize| -> (Vec<Vec<f64>>, Vec<SampleMeta>) {
            (0..n)
                .map(|_| {
                    (
                        (0..dim).map(|_| rng.gen_range(0..3) as f64).collect(),
                        SampleMeta {
                            identity: rng.gen_range(0..ids),
                            camera: rng.gen_range(0..cams),
                        },
                    )
                })
                .unzip()
        };
        let (q, qm) = draw(nq);
        let (g, gm) = draw(ng);
        let qt = DenseTensor::matrix(nq, dim, q.concat()).unwrap();
        let gt = DenseTensor::matrix(ng, dim, g.concat()).unwrap();
        let got = retrieval_metrics(&qt, &qm, &gt, &gm);
        match brute_force_retrieval(&q, &qm, &g, &gm) {
            None => assert!(got.is_err(), "seed {seed}"),
            Some((top1, map)) => {
                let s = got.unwrap();
                assert_eq!(s.top1, top1, "seed {seed}");
                assert_eq!(s.map, map, "seed {seed}");
                compared += 1;
            }
        }
    }
    assert!(compared > 80);
}

#[test]
fn random_embeddings_give_chance_top1() {
    // one gallery image per identity on another camera: P(top1) = 1/L
    let l = 20;
    let seeds = 100;
    let mut hits = 0.0;
    let mut trials = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 8;
        let mut gauss = |n: usize| -> DenseTensor {
            DenseTensor::matrix(n, dim, (0..n * dim).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
        };
        let q = gauss(l);
        let g = gauss(l);
        let qm: Vec<SampleMeta> = (0..l).map(|i| SampleMeta { identity: i, camera: 0 }).collect();
        let gm: Vec<SampleMeta> = (0..l).map(|i| SampleMeta { identity: i, camera: 1 }).collect();
        let s = retrieval_metrics(&q, &qm, &g, &gm).unwrap();
        hits += s.top1 * l as f64;
        trials += l as f64;
    }
    let p = 1.0 / l as f64;
    let sigma = (p * (1.0 - p) / trials).sqrt();
    let observed = hits / trials;
    assert!((observed - p).abs() < 3.0 * sigma, "{observed} vs {p} ± {sigma}");
}

#[test]
fn shuffled_labels_give_chance_verification() {
    let pairs_per_run = 200;
    let runs = 30;
    let mut accs = Vec::new();
    for seed in 0..runs {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let emb: Vec<Vec<f64>> = (0..2 * pairs_per_run)
            .map(|_| (0..4).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        // labels independent of the embeddings, balanced within each fold
        let labels: Vec<bool> = (0..pairs_per_run).map(|i| i % 2 == 0).collect();
        let pairs: Vec<(&[f64], &[f64], bool)> = (0..pairs_per_run)
            .map(|i| (emb[2 * i].as_slice(), emb[2 * i + 1].as_slice(), labels[i]))
            .collect();
        let v = verification_tenfold(&pairs).unwrap();
        let mean = v.fold_accuracies.iter().sum::<f64>() / 10.0;
        assert!((v.accuracy - mean).abs() < 1e-12);
        accs.push(v.accuracy);
    }
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let sd = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    // the fitted threshold can only hurt held-out accuracy under the null
    assert!((mean - 0.5).abs() < 3.0 * sd / n.sqrt() + 0.01, "mean {mean} sd {sd}");
}

fn orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
    // product of random Householder reflections
    let mut m: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for _ in 0..d {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let nn: f64 = v.iter().map(|x| x * x).sum();
        for row in &mut m {
            let dot: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (r, vk) in row.iter_mut().zip(&v) {
                *r -= 2.0 * dot * vk / nn;
            }
        }
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_is_non_negative(a in prop::collection::vec(-8.0f64..8.0, 1..20), seed in 0u64..1000, t in 0.3f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<f64> = a.iter().map(|_| rng.gen_range(-8.0..8.0)).collect();
        let p = tempered_softmax(&a, t).unwrap();
        let q = tempered_softmax(&b, t).unwrap();
        prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        prop_assert!(kl_divergence(&p, &p).unwrap() == 0.0);
    }

    #[test]
    fn retrieval_is_isometry_invariant(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.gen_range(2..6);
        let nq = rng.gen_range(2..20);
        let ng = rng.gen_range(2..30);
        let ids = rng.gen_range(1..6);
        let mut meta = |n: usize| -> Vec<SampleMeta> {
            (0..n).map(|_| SampleMeta { identity: rng.gen_range(0..ids), camera: rng.gen_range(0..3) }).collect()
        };
        let qm = meta(nq);
        let gm = meta(ng);
        let q = random_matrix(&mut rng, nq, d, 2.0);
        let g = random_matrix(&mut rng, ng, d, 2.0);
        let rot = orthogonal(&mut rng, d);
        let shift: Vec<f64> = (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let iso = |m: &DenseTensor| -> DenseTensor {
            let mut out = DenseTensor::zeros(m.shape());
            for i in 0..m.rows() {
                for j in 0..d {
                    let v: f64 = (0..d).map(|k| m.get(i, k) * rot[k][j]).sum::<f64>() + shift[j];
                    out.set(i, j, v);
                }
            }
            out
        };
        match retrieval_metrics(&q, &qm, &g, &gm) {
            Err(_) => prop_assert!(retrieval_metrics(&iso(&q), &qm, &iso(&g), &gm).is_err()),
            Ok(a) => {
                let b = retrieval_metrics(&iso(&q), &qm, &iso(&g), &gm).unwrap();
                prop_assert!((a.top1 - b.top1).abs() < 1e-9);
                prop_assert!((a.map - b.map).abs() < 1e-9);
            }
        }
    }
}
