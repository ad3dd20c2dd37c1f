//! Fixed-capacity FIFO queue of past projections with exact top-k cosine
//! retrieval.

use std::cmp::Ordering;
use std::io::Write;

use crate::error::{Error, Result};
use crate::tensor::{gemm, l2_normalize, Axis, Tensor};

/// Ring buffer of unit-norm vectors with optional class labels.
///
/// Labels ride along for metrics only. Each insertion gets a strictly
/// increasing sequence number used for eviction order and tie-breaking.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportSet {
    capacity: usize,
    dim: usize,
    slots: Vec<f64>,
    labels: Vec<Option<usize>>,
    seqs: Vec<u64>,
    len: usize,
    next: usize,
    next_seq: u64,
}

/// One row of a retrieval: the k nearest entries of a query, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub k: usize,
    /// Position of each neighbour in the queue, 0 = oldest live entry.
    pub indices: Vec<Vec<usize>>,
    /// Insertion sequence numbers of the neighbours.
    pub ids: Vec<Vec<u64>>,
    /// Cosine similarities, non-increasing along each row.
    pub similarities: Vec<Vec<f64>>,
    pub labels: Vec<Vec<Option<usize>>>,
    /// Neighbour vectors, `N·k × D`, sequence-major.
    pub vectors: Tensor,
}

impl RetrievalResult {
    pub fn num_queries(&self) -> usize {
        self.indices.len()
    }

    /// The rank-0 neighbour of every query as an `N × D` matrix.
    pub fn first_neighbours(&self) -> Tensor {
        let d = self.vectors.cols();
        let mut data = Vec::with_capacity(self.num_queries() * d);
        for i in 0..self.num_queries() {
            data.extend_from_slice(self.vectors.row(i * self.k));
        }
        Tensor::new(vec![self.num_queries(), d], data).expect("non-empty retrieval")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AccuracyMode {
    /// Rank-1 neighbour shares the query label.
    Top1,
    /// Any of the k neighbours shares the query label.
    AnyK,
}

/// Ranking used by retrieval: higher similarity first, then earlier insertion.
pub fn rank_order(a: (f64, u64), b: (f64, u64)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

impl SupportSet {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config(format!("support set needs positive capacity and width, got {capacity}×{dim}")));
        }
        Ok(SupportSet {
            capacity,
            dim,
            slots: vec![0.0; capacity * dim],
            labels: vec![None; capacity],
            seqs: vec![0; capacity],
            len: 0,
            next: 0,
            next_seq: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Total number of insertions ever made.
    pub fn inserted(&self) -> u64 {
        self.next_seq
    }

    fn slot_of(&self, logical: usize) -> usize {
        if self.len < self.capacity {
            logical
        } else {
            (self.next + logical) % self.capacity
        }
    }

    fn logical_of(&self, slot: usize) -> usize {
        if self.len < self.capacity {
            slot
        } else {
            (slot + self.capacity - self.next) % self.capacity
        }
    }

    /// Live entries from oldest to newest: `(vector, label, sequence number)`.
    pub fn entries(&self) -> impl Iterator<Item = (&[f64], Option<usize>, u64)> + '_ {
        (0..self.len).map(move |i| {
            let s = self.slot_of(i);
            (&self.slots[s * self.dim..(s + 1) * self.dim], self.labels[s], self.seqs[s])
        })
    }

    /// Normalizes and appends every row of `z`, evicting the oldest entries
    /// once full.
    pub fn enqueue_batch(&mut self, z: &Tensor, labels: Option<&[usize]>) -> Result<()> {
        let (n, d) = z.dims2()?;
        if d != self.dim || z.shape().len() != 2 {
            return Err(Error::shape("enqueue_batch", z.shape(), &[self.capacity, self.dim]));
        }
        if let Some(l) = labels {
            if l.len() != n {
                return Err(Error::Contract(format!("{} labels for {n} vectors", l.len())));
            }
        }
        if !z.all_finite() {
            return Err(Error::Numeric("non-finite vector offered to the support set".into()));
        }
        let normed = l2_normalize(z, Axis::Rows)?.tensor;
        for i in 0..n {
            let s = self.next;
            self.slots[s * d..(s + 1) * d].copy_from_slice(normed.row(i));
            self.labels[s] = labels.map(|l| l[i]);
            self.seqs[s] = self.next_seq;
            self.next_seq += 1;
            self.next = (self.next + 1) % self.capacity;
            self.len = (self.len + 1).min(self.capacity);
        }
        Ok(())
    }

    /// Rebuilds a queue from [`SupportSet::snapshot`] output. Vectors are
    /// copied verbatim (they were normalized on their original insertion).
    pub fn restore(capacity: usize, vectors: &Tensor, labels: &Tensor, seqs: &Tensor) -> Result<Self> {
        let (n, d) = vectors.dims2()?;
        let mut q = SupportSet::new(capacity, d)?;
        if n > capacity || labels.len() != n || seqs.len() != n {
            return Err(Error::Checkpoint(format!(
                "queue snapshot of {n} vectors, {} labels, {} ids does not fit capacity {capacity}",
                labels.len(),
                seqs.len()
            )));
        }
        q.slots[..n * d].copy_from_slice(vectors.data());
        for i in 0..n {
            let l = labels.data()[i];
            q.labels[i] = if l < 0.0 { None } else { Some(l as usize) };
            q.seqs[i] = seqs.data()[i] as u64;
            if i > 0 && q.seqs[i] <= q.seqs[i - 1] {
                return Err(Error::Checkpoint("queue snapshot ids are not increasing".into()));
            }
        }
        q.len = n;
        q.next = n % capacity;
        q.next_seq = if n == 0 { 0 } else { q.seqs[n - 1] + 1 };
        Ok(q)
    }

    /// Cosine similarity of every (normalized) query against every live slot.
    fn similarities(&self, queries: &Tensor) -> Result<(usize, Vec<f64>)> {
        let (n, d) = queries.dims2()?;
        if d != self.dim || queries.shape().len() != 2 {
            return Err(Error::shape("knn_query", queries.shape(), &[self.len, self.dim]));
        }
        if !queries.all_finite() {
            return Err(Error::Numeric("non-finite query".into()));
        }
        let q = l2_normalize(queries, Axis::Rows)?.tensor;
        let mut sims = vec![0.0; n * self.len];
        gemm(n, d, self.len, q.data(), false, &self.slots[..self.len * d], true, &mut sims, false);
        Ok((n, sims))
    }

    /// Exact top-k retrieval by cosine similarity.
    pub fn knn_query(&self, queries: &Tensor, k: usize) -> Result<RetrievalResult> {
        if k == 0 {
            return Err(Error::Contract("k must be positive".into()));
        }
        if self.len < k {
            return Err(Error::InsufficientQueue { count: self.len, k });
        }
        let (n, sims) = self.similarities(queries)?;
        let mut result = RetrievalResult {
            k,
            indices: Vec::with_capacity(n),
            ids: Vec::with_capacity(n),
            similarities: Vec::with_capacity(n),
            labels: Vec::with_capacity(n),
            vectors: Tensor::zeros(&[n * k, self.dim]),
        };
        let mut order: Vec<usize> = Vec::with_capacity(k + 1);
        let mut vectors = Vec::with_capacity(n * k * self.dim);
        for row in sims.chunks(self.len) {
            let key = |s: usize| (row[s], self.seqs[s]);
            // Single pass keeping the best k in rank order.
            order.clear();
            for s in 0..self.len {
                if order.len() == k && rank_order(key(s), key(order[k - 1])) != Ordering::Less {
                    continue;
                }
                let pos = order.partition_point(|&t| rank_order(key(t), key(s)) == Ordering::Less);
                if order.len() == k {
                    order.pop();
                }
                order.insert(pos, s);
            }
            result.indices.push(order.iter().map(|&s| self.logical_of(s)).collect());
            result.ids.push(order.iter().map(|&s| self.seqs[s]).collect());
            result.similarities.push(order.iter().map(|&s| row[s]).collect());
            result.labels.push(order.iter().map(|&s| self.labels[s]).collect());
            for &s in &order {
                vectors.extend_from_slice(&self.slots[s * self.dim..(s + 1) * self.dim]);
            }
        }
        result.vectors = Tensor::new(vec![n * k, self.dim], vectors)?;
        Ok(result)
    }

    /// Writes `step,label,v0,..` rows from oldest to newest. `step` is the
    /// insertion sequence number; unlabelled entries leave `label` empty.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "step,label")?;
        for j in 0..self.dim {
            write!(w, ",v{j}")?;
        }
        writeln!(w)?;
        for (v, label, seq) in self.entries() {
            write!(w, "{seq},")?;
            if let Some(l) = label {
                write!(w, "{l}")?;
            }
            for x in v {
                write!(w, ",{x}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Snapshot as `(vectors, labels, seqs)` tensors for checkpoints. Missing
    /// labels are stored as -1. Returns `None` when empty.
    pub fn snapshot(&self) -> Option<(Tensor, Tensor, Tensor)> {
        if self.len == 0 {
            return None;
        }
        let mut vecs = Vec::with_capacity(self.len * self.dim);
        let mut labels = Vec::with_capacity(self.len);
        let mut seqs = Vec::with_capacity(self.len);
        for (v, l, s) in self.entries() {
            vecs.extend_from_slice(v);
            labels.push(l.map_or(-1.0, |l| l as f64));
            seqs.push(s as f64);
        }
        Some((
            Tensor::new(vec![self.len, self.dim], vecs).expect("live entries"),
            Tensor::new(vec![self.len], labels).expect("live entries"),
            Tensor::new(vec![self.len], seqs).expect("live entries"),
        ))
    }
}

/// Fraction of queries whose retrieved neighbours share the query label.
pub fn nn_retrieval_accuracy(result: &RetrievalResult, query_labels: &[usize], mode: AccuracyMode) -> Result<f64> {
    if query_labels.len() != result.num_queries() {
        return Err(Error::Contract(format!(
            "{} labels for {} queries",
            query_labels.len(),
            result.num_queries()
        )));
    }
    if result.num_queries() == 0 {
        return Err(Error::MetricUnavailable("no queries".into()));
    }
    let mut hits = 0usize;
    for (row, &q) in result.labels.iter().zip(query_labels) {
        let considered = match mode {
            AccuracyMode::Top1 => &row[..1],
            AccuracyMode::AnyK => &row[..],
        };
        let mut matched = false;
        for l in considered {
            match l {
                None => return Err(Error::MetricUnavailable("support set entries carry no labels".into())),
                Some(l) if *l == q => matched = true,
                Some(_) => {}
            }
        }
        hits += usize::from(matched);
    }
    Ok(hits as f64 / result.num_queries() as f64)
}
