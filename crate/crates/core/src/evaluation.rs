//! Frozen-encoder probes and embedding export.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::checkpoint::Checkpoint;
use crate::support_set::{nn_retrieval_accuracy, rank_order, AccuracyMode, SupportSet};
use crate::tensor::{gemm, l2_normalize, softmax_rows, Axis, Tensor};
use crate::training::{embedding_std, from_checkpoint, synthesize_dataset, Dataset, DatasetSpec, Model, Split, TrainConfig};

/// Majority vote over the `k` most cosine-similar training rows. A tied vote
/// goes to the tied class whose member ranks nearest.
pub fn knn_predict(train: &Tensor, train_labels: &[usize], test: &Tensor, k: usize) -> Result<Vec<usize>> {
    let (m, d) = train.dims2()?;
    let (n, d2) = test.dims2()?;
    if d != d2 {
        return Err(Error::shape("knn_probe", train.shape(), test.shape()));
    }
    if train_labels.len() != m {
        return Err(Error::Contract(format!("{} labels for {m} training rows", train_labels.len())));
    }
    if k == 0 || k > m {
        return Err(Error::Contract(format!("k = {k} outside 1..={m} training rows")));
    }
    let tr = l2_normalize(train, Axis::Rows)?.tensor;
    let te = l2_normalize(test, Axis::Rows)?.tensor;
    let mut sims = vec![0.0; n * m];
    gemm(n, d, m, te.data(), false, tr.data(), true, &mut sims, false);
    let classes = train_labels.iter().max().map_or(0, |c| c + 1);
    let mut preds = Vec::with_capacity(n);
    let mut order: Vec<usize> = Vec::with_capacity(m);
    for row in sims.chunks(m) {
        order.clear();
        order.extend(0..m);
        let cmp = |&a: &usize, &b: &usize| rank_order((row[a], a as u64), (row[b], b as u64));
        if k < m {
            order.select_nth_unstable_by(k - 1, cmp);
        }
        order.truncate(k);
        order.sort_unstable_by(cmp);
        let mut votes = vec![0usize; classes];
        for &j in &order {
            votes[train_labels[j]] += 1;
        }
        let best = *votes.iter().max().expect("k >= 1");
        let winner = order
            .iter()
            .map(|&j| train_labels[j])
            .find(|&c| votes[c] == best)
            .expect("some neighbour holds the top vote");
        preds.push(winner);
    }
    Ok(preds)
}

fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() || truth.is_empty() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    Ok(pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64)
}

pub fn knn_probe(
    train: &Tensor,
    train_labels: &[usize],
    test: &Tensor,
    test_labels: &[usize],
    k: usize,
) -> Result<f64> {
    if test.rows() != test_labels.len() {
        return Err(Error::Contract(format!("{} labels for {} test rows", test_labels.len(), test.rows())));
    }
    accuracy(&knn_predict(train, train_labels, test, k)?, test_labels)
}

/// Softmax regression on frozen embeddings, trained by full-batch gradient
/// descent with heavy-ball momentum from a zero start.
///
/// Features are centred on the training mean and divided by the RMS row norm;
/// both steps commute with rotations, so the probe is rotation-invariant.
pub fn linear_probe(
    train: &Tensor,
    train_labels: &[usize],
    test: &Tensor,
    test_labels: &[usize],
    epochs: usize,
) -> Result<f64> {
    let (m, d) = train.dims2()?;
    if test.cols() != d {
        return Err(Error::shape("linear_probe", train.shape(), test.shape()));
    }
    if train_labels.len() != m || test_labels.len() != test.rows() {
        return Err(Error::Contract("label count does not match row count".into()));
    }
    let first = train_labels.first().copied();
    if train_labels.iter().all(|&l| Some(l) == first) {
        return Err(Error::Contract("linear probe needs at least two classes in the training split".into()));
    }
    let classes = train_labels.iter().chain(test_labels).max().map_or(0, |c| c + 1);

    let mean: Vec<f64> = (0..d)
        .map(|j| (0..m).map(|i| train.at(i, j)).sum::<f64>() / m as f64)
        .collect();
    let centre = |x: &Tensor| -> Tensor {
        let mut out = x.clone();
        let cols = out.cols();
        for row in out.data_mut().chunks_mut(cols) {
            for (v, mu) in row.iter_mut().zip(&mean) {
                *v -= mu;
            }
        }
        out
    };
    let mut xtr = centre(train);
    let rms = (xtr.data().iter().map(|v| v * v).sum::<f64>() / m as f64).sqrt();
    let inv = if rms > 0.0 { 1.0 / rms } else { 1.0 };
    xtr = xtr.map(|v| v * inv);
    let xte = centre(test).map(|v| v * inv);

    let lr = 1.0;
    let mu = 0.9;
    let mut w = vec![0.0; d * classes];
    let mut b = vec![0.0; classes];
    let mut vw = vec![0.0; d * classes];
    let mut vb = vec![0.0; classes];
    let mut logits = vec![0.0; m * classes];
    let mut gw = vec![0.0; d * classes];
    for _ in 0..epochs {
        gemm(m, d, classes, xtr.data(), false, &w, false, &mut logits, false);
        for row in logits.chunks_mut(classes) {
            for (v, bi) in row.iter_mut().zip(&b) {
                *v += bi;
            }
        }
        let mut p = softmax_rows(&Tensor::new(vec![m, classes], logits.clone())?)?;
        for (i, &y) in train_labels.iter().enumerate() {
            p.data_mut()[i * classes + y] -= 1.0;
        }
        let g = p.map(|v| v / m as f64);
        gemm(d, m, classes, xtr.data(), true, g.data(), false, &mut gw, false);
        for c in 0..classes {
            let gb: f64 = (0..m).map(|i| g.data()[i * classes + c]).sum();
            vb[c] = mu * vb[c] + gb;
            b[c] -= lr * vb[c];
        }
        for ((wi, vi), gi) in w.iter_mut().zip(vw.iter_mut()).zip(&gw) {
            *vi = mu * *vi + gi;
            *wi -= lr * *vi;
        }
    }

    let n = xte.rows();
    let mut out = vec![0.0; n * classes];
    gemm(n, d, classes, xte.data(), false, &w, false, &mut out, false);
    let preds: Vec<usize> = out
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for c in 1..classes {
                if row[c] + b[c] > row[best] + b[best] {
                    best = c;
                }
            }
            best
        })
        .collect();
    accuracy(&preds, test_labels)
}

/// Probe results for one checkpoint on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// kNN probe on projector outputs.
    pub knn_top1: f64,
    /// Linear probe on projector outputs.
    pub linear_top1: f64,
    /// Rank-1 label agreement of held-out projections against the support set.
    pub nn_retrieval_top1: Option<f64>,
    pub encoder_knn_top1: f64,
    pub encoder_linear_top1: f64,
    /// Same probes on the raw inputs, for reference.
    pub input_knn_top1: f64,
    pub embedding_std: f64,
    pub probe_k: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

/// Size of the batch used for the collapse sentinel.
pub const STD_PROBE_ROWS: usize = 512;

pub fn evaluate(model: &Model, queue: &SupportSet, cfg: &TrainConfig, train: &Dataset, test: &Dataset) -> Result<ProbeReport> {
    let (h_train, z_train) = model.embed(&train.inputs)?;
    let (h_test, z_test) = model.embed(&test.inputs)?;
    let k = cfg.probe_k;
    let epochs = cfg.linear_probe_epochs;
    let nn_retrieval_top1 = if queue.is_empty() {
        None
    } else {
        match nn_retrieval_accuracy(&queue.knn_query(&z_test, 1)?, &test.labels, AccuracyMode::Top1) {
            Ok(v) => Some(v),
            Err(Error::MetricUnavailable(_)) => None,
            Err(e) => return Err(e),
        }
    };
    let probe_rows: Vec<usize> = (0..test.len().min(STD_PROBE_ROWS)).collect();
    let probe = test.select(&probe_rows);
    let (_, z_probe) = model.embed(&probe.inputs)?;
    Ok(ProbeReport {
        knn_top1: knn_probe(&z_train, &train.labels, &z_test, &test.labels, k)?,
        linear_top1: linear_probe(&z_train, &train.labels, &z_test, &test.labels, epochs)?,
        nn_retrieval_top1,
        encoder_knn_top1: knn_probe(&h_train, &train.labels, &h_test, &test.labels, k)?,
        encoder_linear_top1: linear_probe(&h_train, &train.labels, &h_test, &test.labels, epochs)?,
        input_knn_top1: knn_probe(&train.inputs, &train.labels, &test.inputs, &test.labels, k)?,
        embedding_std: embedding_std(&z_probe)?,
        probe_k: k,
        train_size: train.len(),
        test_size: test.len(),
        seed: cfg.seed,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Loads a checkpoint, probes it on `dataset` (default: the dataset it was
/// trained on) and writes `report.json` next to it. The checkpoint file is
/// hashed before and after to make sure it is left untouched.
pub fn evaluate_checkpoint(path: &Path, dataset: Option<&DatasetSpec>) -> Result<(ProbeReport, PathBuf)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let before = sha256_hex(&bytes);
    let ck = Checkpoint::from_bytes(&bytes)?;
    let (meta, model, queue) = from_checkpoint(&ck)?;
    let spec = dataset.unwrap_or(&meta.config.dataset);
    if spec.input_dim != meta.config.dataset.input_dim {
        return Err(Error::Config(format!(
            "dataset width {} does not match the checkpoint's input width {}",
            spec.input_dim, meta.config.dataset.input_dim
        )));
    }
    let train = synthesize_dataset(spec, Split::Train)?;
    let test = synthesize_dataset(spec, Split::Test)?;
    let report = evaluate(&model, &queue, &meta.config, &train, &test)?;
    let after = sha256_hex(&std::fs::read(path).map_err(|e| Error::io(path, e))?);
    if before != after {
        return Err(Error::Checkpoint(format!("{} changed during evaluation", path.display())));
    }
    let out = path.with_file_name("report.json");
    write_report(&report, &out)?;
    Ok((report, out))
}

pub fn write_report(report: &ProbeReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// One CSV row per sample: `id,label,e0,..` with projector outputs.
pub fn export_embeddings<W: Write>(model: &Model, data: &Dataset, mut out: W) -> Result<()> {
    if data.inputs.cols() != model.online.encoder.input_dim() {
        return Err(Error::shape(
            "export_embeddings",
            data.inputs.shape(),
            &[model.online.encoder.input_dim()],
        ));
    }
    let (_, z) = model.embed(&data.inputs)?;
    let mut text = String::from("id,label");
    for j in 0..z.cols() {
        text.push_str(&format!(",e{j}"));
    }
    text.push('\n');
    for (i, &label) in data.labels.iter().enumerate() {
        text.push_str(&format!("{i},{label}"));
        for v in z.row(i) {
            text.push_str(&format!(",{v}"));
        }
        text.push('\n');
    }
    out.write_all(text.as_bytes())
        .map_err(|e| Error::Io {
            path: PathBuf::from("<export>"),
            source: e,
        })
}

/// Loads a checkpoint and writes the export for its training dataset.
pub fn export_checkpoint(checkpoint: &Path, out: &Path) -> Result<usize> {
    let ck = Checkpoint::load(checkpoint)?;
    let (meta, model, _) = from_checkpoint(&ck)?;
    let data = synthesize_dataset(&meta.config.dataset, Split::Train)?;
    let file = std::fs::File::create(out).map_err(|e| Error::io(out, e))?;
    let mut w = std::io::BufWriter::new(file);
    export_embeddings(&model, &data, &mut w).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(out, source),
        other => other,
    })?;
    w.flush().map_err(|e| Error::io(out, e))?;
    Ok(data.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Full sort with naive dot products, then the same vote rule.
    fn oracle(train: &Tensor, labels: &[usize], test: &Tensor, k: usize) -> Vec<usize> {
        let tr = l2_normalize(train, Axis::Rows).unwrap().tensor;
        let te = l2_normalize(test, Axis::Rows).unwrap().tensor;
        (0..te.rows())
            .map(|i| {
                let mut all: Vec<(f64, usize)> = (0..tr.rows())
                    .map(|j| (crate::tensor::dot(te.row(i), tr.row(j)), j))
                    .collect();
                all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
                let top = &all[..k];
                let mut counts = std::collections::BTreeMap::new();
                for &(_, j) in top {
                    *counts.entry(labels[j]).or_insert(0) += 1;
                }
                let best = counts.values().copied().max().unwrap();
                top.iter().map(|&(_, j)| labels[j]).find(|c| counts[c] == best).unwrap()
            })
            .collect()
    }

    #[test]
    fn knn_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..50 {
            let m = rng.gen_range(5..60);
            let n = rng.gen_range(1..20);
            let d = rng.gen_range(2..6);
            let classes = rng.gen_range(2..5);
            let k = rng.gen_range(1..=m.min(9));
            let train = Tensor::randn(&[m, d], &mut rng);
            let test = Tensor::randn(&[n, d], &mut rng);
            let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..classes)).collect();
            assert_eq!(
                knn_predict(&train, &labels, &test, k).unwrap(),
                oracle(&train, &labels, &test, k),
                "trial {trial}"
            );
        }
    }

    #[test]
    fn knn_vote_ties_go_to_the_nearer_class() {
        let train = Tensor::from_rows(&[[1.0, 0.1], [1.0, -0.3], [0.0, 1.0], [-1.0, 0.0]]).unwrap();
        let labels = [1, 0, 0, 1];
        let test = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        // Top-2 is {0: class 1, 1: class 0}: one vote each, nearest wins.
        assert_eq!(knn_predict(&train, &labels, &test, 2).unwrap(), vec![1]);
        assert_eq!(knn_predict(&train, &labels, &test, 3).unwrap(), vec![0]);
    }

    #[test]
    fn knn_duplicate_is_recovered_and_k_is_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let train = Tensor::randn(&[30, 4], &mut rng);
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let test = train.clone();
        assert_eq!(knn_probe(&train, &labels, &test, &labels, 1).unwrap(), 1.0);
        assert!(knn_probe(&train, &labels, &test, &labels, 31).is_err());
    }

    fn two_blobs(n: usize, sep: f64, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let centre = if c == 0 { sep / 2.0 } else { -sep / 2.0 };
            data.push(centre + rng.sample::<f64, _>(StandardNormal));
            for _ in 0..3 {
                data.push(rng.sample::<f64, _>(StandardNormal));
            }
            labels.push(c);
        }
        (Tensor::new(vec![n, 4], data).unwrap(), labels)
    }

    #[test]
    fn knn_separates_distant_blobs() {
        // Cosine similarity ignores radius, so shift the blobs off-origin.
        let (mut train, tl) = two_blobs(400, 10.0, 1);
        let (mut test, vl) = two_blobs(200, 10.0, 2);
        for t in [&mut train, &mut test] {
            for row in t.data_mut().chunks_mut(4) {
                row[1] += 20.0;
            }
        }
        assert_eq!(knn_probe(&train, &tl, &test, &vl, 5).unwrap(), 1.0);
    }

    #[test]
    fn knn_on_random_labels_is_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let train = Tensor::randn(&[2000, 4], &mut rng);
        let test = Tensor::randn(&[2000, 4], &mut rng);
        let tl: Vec<usize> = (0..2000).map(|_| rng.gen_range(0..2)).collect();
        let vl: Vec<usize> = (0..2000).map(|_| rng.gen_range(0..2)).collect();
        let acc = knn_probe(&train, &tl, &test, &vl, 5).unwrap();
        assert!((acc - 0.5).abs() < 0.05, "{acc}");
    }

    #[test]
    fn linear_probe_on_separable_data() {
        let (train, tl) = two_blobs(400, 12.0, 4);
        let (test, vl) = two_blobs(200, 12.0, 5);
        assert_eq!(linear_probe(&train, &tl, &test, &vl, 200).unwrap(), 1.0);
    }

    #[test]
    fn linear_probe_on_constant_embeddings_predicts_majority() {
        let train = Tensor::ones(&[10, 3]);
        let tl = [0, 1, 1, 1, 2, 1, 1, 0, 1, 2];
        let test = Tensor::ones(&[4, 3]);
        let acc = linear_probe(&train, &tl, &test, &[1, 1, 0, 2], 100).unwrap();
        assert_eq!(acc, 0.5);
        assert!(linear_probe(&train, &[1; 10], &test, &[1, 1, 0, 2], 5).is_err());
    }

    #[test]
    fn linear_probe_with_zero_epochs_is_in_range() {
        let (train, tl) = two_blobs(40, 4.0, 6);
        let acc = linear_probe(&train, &tl, &train, &tl, 0).unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    fn random_rotation(d: usize, rng: &mut ChaCha8Rng) -> Tensor {
        // Gram-Schmidt on a Gaussian matrix.
        let g = Tensor::randn(&[d, d], rng);
        let mut q: Vec<Vec<f64>> = Vec::new();
        for i in 0..d {
            let mut v = g.row(i).to_vec();
            for u in &q {
                let p = crate::tensor::dot(&v, u);
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
            let n = crate::tensor::dot(&v, &v).sqrt();
            q.push(v.iter().map(|a| a / n).collect());
        }
        Tensor::from_rows(&q).unwrap()
    }

    #[test]
    fn linear_probe_is_rotation_invariant() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let (train, tl) = two_blobs(300, 2.0, 200 + seed);
            let (test, vl) = two_blobs(300, 2.0, 300 + seed);
            let r = random_rotation(4, &mut rng);
            let a = linear_probe(&train, &tl, &test, &vl, 100).unwrap();
            let b = linear_probe(&train.matmul(&r).unwrap(), &tl, &test.matmul(&r).unwrap(), &vl, 100).unwrap();
            assert!((a - b).abs() <= 0.01, "seed {seed}: {a} vs {b}");
        }
    }
}
