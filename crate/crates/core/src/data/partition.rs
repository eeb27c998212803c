use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};

const MAX_REDRAWS: u64 = 1000;

/// Assignment of samples to clients.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    /// Client id for each input position.
    pub assignment: Vec<u32>,
    pub alpha: f64,
    /// `histograms[client][class]`.
    pub histograms: Vec<Vec<usize>>,
    /// Seed of the accepted draw.
    pub seed: u64,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.histograms.len()
    }

    /// Positions (into the partitioned label list) held by `client`.
    pub fn shard(&self, client: u32) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == client)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.histograms.iter().map(|h| h.iter().sum()).collect()
    }
}

/// For each class draws `p_c ~ Dir(α·1_N)` and allocates that class's
/// samples to clients by `p_c`. Draws repeat with an incremented seed until
/// every client holds at least `min_per_client` samples.
pub fn dirichlet_partition(
    labels: &[usize],
    clients: usize,
    alpha: f64,
    seed: u64,
    min_per_client: usize,
) -> Result<Partition> {
    if clients == 0 {
        return Err(Error::Config("partition needs at least one client".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("Dirichlet alpha must be positive, got {alpha}")));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(format!("alpha {alpha}: {e}")))?;
    for attempt in 0..MAX_REDRAWS {
        let s = seed.wrapping_add(attempt);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mut assignment = vec![0u32; labels.len()];
        let mut histograms = vec![vec![0usize; classes]; clients];
        for (c, members) in by_class.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let p = dirichlet(&gamma, clients, &mut rng);
            let mut order = members.clone();
            order.shuffle(&mut rng);
            for i in order {
                let client = categorical(&p, &mut rng);
                assignment[i] = client as u32;
                histograms[client][c] += 1;
            }
        }
        if histograms.iter().all(|h| h.iter().sum::<usize>() >= min_per_client.max(1)) {
            return Ok(Partition { assignment, alpha, histograms, seed: s });
        }
    }
    Err(Error::Partition(format!(
        "no draw in {MAX_REDRAWS} attempts gave all {clients} clients at least {} samples; \
         use a larger dataset, a larger alpha or fewer clients",
        min_per_client.max(1)
    )))
}

fn dirichlet(gamma: &Gamma<f64>, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let s: f64 = g.iter().sum();
        if s > 0.0 && s.is_finite() {
            return g.into_iter().map(|x| x / s).collect();
        }
    }
}

fn categorical(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1)
}

/// Epoch-wise shuffled, non-overlapping mini-batches over a shard; the
/// short tail of each epoch is dropped.
#[derive(Clone, Debug)]
pub struct BatchIter {
    shard: Vec<usize>,
    order: Vec<usize>,
    batch: usize,
    pos: usize,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl BatchIter {
    pub fn new(shard: Vec<usize>, batch: usize, seed: u64, client: u32) -> Result<BatchIter> {
        if batch == 0 || batch > shard.len() {
            return Err(Error::Config(format!(
                "client {client}: batch size {batch} does not fit a shard of {} samples",
                shard.len()
            )));
        }
        Ok(BatchIter {
            order: Vec::new(),
            shard,
            batch,
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            epoch: 0,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.shard.len() / self.batch
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn shard_len(&self) -> usize {
        self.shard.len()
    }

    /// Completed epochs so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.order.is_empty() || self.pos + self.batch > self.order.len() {
            if !self.order.is_empty() {
                self.epoch += 1;
            }
            self.order = self.shard.clone();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let b = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        b
    }
}
