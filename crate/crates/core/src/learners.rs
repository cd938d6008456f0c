//! Small differentiable classifiers and synthetic heterogeneous data.
//!
//! Two architectures are provided, multinomial logistic regression and a
//! one-hidden-layer tanh MLP, both trained with mean cross-entropy. Data is
//! drawn from Gaussian class blobs and split across clients with label skew.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ProbitError, Result};
use crate::rng::RngStream;
use crate::vector::ModelVector;

/// Labelled samples, features stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize, classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(ProbitError::Empty("dataset"));
        }
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(ProbitError::DimensionMismatch {
                expected: labels.len() * dim,
                got: features.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(ProbitError::Config(format!(
                "label {bad} outside [0, {classes})"
            )));
        }
        if let Some(i) = features.iter().position(|x| !x.is_finite()) {
            return Err(ProbitError::NonFinite(i));
        }
        Ok(Self {
            features,
            labels,
            dim,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(ProbitError::Precondition(format!(
                "sample index {bad} out of range {}",
                self.len()
            )));
        }
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(features, labels, self.dim, self.classes)
    }

    /// Distinct labels present, ascending.
    pub fn label_set(&self) -> Vec<usize> {
        let mut seen = vec![false; self.classes];
        for &l in &self.labels {
            seen[l] = true;
        }
        (0..self.classes).filter(|&c| seen[c]).collect()
    }

    /// Concatenation of several datasets with the same shape.
    pub fn concat(parts: &[Dataset]) -> Result<Self> {
        let first = parts.first().ok_or(ProbitError::Empty("dataset list"))?;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.dim != first.dim || p.classes != first.classes {
                return Err(ProbitError::DimensionMismatch {
                    expected: first.dim,
                    got: p.dim,
                });
            }
            features.extend_from_slice(&p.features);
            labels.extend_from_slice(&p.labels);
        }
        Self::new(features, labels, first.dim, first.classes)
    }

    /// Reads `f0,...,f{p-1},label` CSV. `classes` defaults to max label + 1.
    pub fn load_csv(path: &Path, classes: Option<usize>) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| ProbitError::Io(format!("{}: {e}", path.display())))?;
        let header = reader
            .headers()
            .map_err(|e| ProbitError::Parse(e.to_string()))?
            .clone();
        let p = header.len().saturating_sub(1);
        let expected: Vec<String> = (0..p)
            .map(|j| format!("f{j}"))
            .chain(std::iter::once("label".to_string()))
            .collect();
        if p == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
            return Err(ProbitError::Parse(format!(
                "{}: header must be f0..f{{p-1}},label",
                path.display()
            )));
        }
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| ProbitError::Parse(e.to_string()))?;
            let at = |j: usize| format!("{}: line {}, column {j}", path.display(), line + 2);
            for j in 0..p {
                let x: f64 = rec[j]
                    .trim()
                    .parse()
                    .map_err(|_| ProbitError::Parse(format!("{}: not a number", at(j))))?;
                features.push(x);
            }
            let l: usize = rec[p]
                .trim()
                .parse()
                .map_err(|_| ProbitError::Parse(format!("{}: label not a class index", at(p))))?;
            labels.push(l);
        }
        let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        Self::new(features, labels, p, classes)
    }
}

/// Gaussian class blobs with unit-variance isotropic noise.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    centers: Vec<Vec<f64>>,
}

impl SyntheticTask {
    /// Centers are random unit directions scaled by `spread`.
    pub fn new(classes: usize, dim: usize, spread: f64, rng: &mut RngStream) -> Result<Self> {
        if classes < 2 {
            return Err(ProbitError::Config(format!("need at least 2 classes, got {classes}")));
        }
        if dim == 0 {
            return Err(ProbitError::Config("feature dimension must be positive".into()));
        }
        let centers = (0..classes)
            .map(|_| {
                let dir: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
                let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
                dir.into_iter().map(|x| spread * x / norm).collect()
            })
            .collect();
        Ok(Self { centers })
    }

    pub fn classes(&self) -> usize {
        self.centers.len()
    }

    /// `per_class` samples of each class, class-major order.
    pub fn sample(&self, per_class: usize, rng: &mut RngStream) -> Result<Dataset> {
        let dim = self.centers[0].len();
        let mut features = Vec::with_capacity(per_class * self.classes() * dim);
        let mut labels = Vec::with_capacity(per_class * self.classes());
        for (c, center) in self.centers.iter().enumerate() {
            for _ in 0..per_class {
                features.extend(center.iter().map(|m| m + rng.standard_normal()));
                labels.push(c);
            }
        }
        Dataset::new(features, labels, dim, self.classes())
    }
}

pub fn synth_generate(
    classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    rng: &mut RngStream,
) -> Result<Dataset> {
    SyntheticTask::new(classes, dim, spread, rng)?.sample(per_class, rng)
}

/// Sample indices per client under label skew.
///
/// Each client is dealt `k` class slots from a deck built out of repeated
/// random permutations of the classes, so every class is held by some
/// client whenever `M * k >= C` and holder counts differ by at most one.
/// Each class's samples are then split evenly among its holders. When
/// `M * k < C` the classes left over are dealt round-robin on top, so those
/// clients exceed `k` classes.
pub fn partition_label_skew_indices(
    data: &Dataset,
    clients: usize,
    classes_per_client: usize,
    rng: &mut RngStream,
) -> Result<Vec<Vec<usize>>> {
    let c = data.classes();
    let k = classes_per_client;
    if clients == 0 {
        return Err(ProbitError::Config("need at least one client".into()));
    }
    if k == 0 || k > c {
        return Err(ProbitError::Config(format!(
            "classes per client must be in 1..={c}, got {k}"
        )));
    }

    let mut deck = Vec::with_capacity(clients * k);
    while deck.len() < clients * k {
        let mut perm: Vec<usize> = (0..c).collect();
        rng.shuffle(&mut perm);
        deck.extend(perm);
    }
    deck.truncate(clients * k);
    rng.shuffle(&mut deck);
    let mut held: Vec<Vec<usize>> = deck.chunks(k).map(<[usize]>::to_vec).collect();
    repair_duplicates(&mut held);
    if clients * k < c {
        for (j, class) in (0..c).filter(|cl| !deck.contains(cl)).enumerate() {
            held[j % clients].push(class);
        }
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &l) in data.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut parts = vec![Vec::new(); clients];
    for (class, mut idx) in by_class.into_iter().enumerate() {
        let mut holders: Vec<usize> = (0..clients).filter(|&m| held[m].contains(&class)).collect();
        holders.dedup();
        rng.shuffle(&mut idx);
        let n = idx.len();
        let h = holders.len();
        let mut start = 0;
        for (j, &m) in holders.iter().enumerate() {
            let take = n / h + usize::from(j < n % h);
            parts[m].extend_from_slice(&idx[start..start + take]);
            start += take;
        }
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

/// Swaps slots between clients until no client holds the same class twice,
/// where a swap can fix it.
fn repair_duplicates(held: &mut [Vec<usize>]) {
    let has_dup = |h: &[usize]| (1..h.len()).any(|i| h[..i].contains(&h[i]));
    for a in 0..held.len() {
        let mut guard = 0;
        while has_dup(&held[a]) && guard < held.len() * 4 {
            guard += 1;
            let i = (1..held[a].len()).find(|&i| held[a][..i].contains(&held[a][i])).unwrap();
            let class = held[a][i];
            let mut swapped = false;
            'search: for other in 0..held.len() {
                if other == a {
                    continue;
                }
                for j in 0..held[other].len() {
                    let candidate = held[other][j];
                    if !held[a].contains(&candidate) && !held[other].contains(&class) {
                        held[a][i] = candidate;
                        held[other][j] = class;
                        swapped = true;
                        break 'search;
                    }
                }
            }
            if !swapped {
                break;
            }
        }
    }
}

pub fn partition_label_skew(
    data: &Dataset,
    clients: usize,
    classes_per_client: usize,
    rng: &mut RngStream,
) -> Result<Vec<Dataset>> {
    partition_label_skew_indices(data, clients, classes_per_client, rng)?
        .iter()
        .map(|idx| {
            if idx.is_empty() {
                Err(ProbitError::Config(
                    "a client received no samples; increase the dataset size".into(),
                ))
            } else {
                data.subset(idx)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    Logistic,
    Mlp,
}

/// Layer sizes of a classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    /// Linear layer followed by softmax.
    Logistic { inputs: usize, classes: usize },
    /// One tanh hidden layer, then softmax.
    Mlp {
        inputs: usize,
        hidden: usize,
        classes: usize,
    },
}

impl Architecture {
    pub fn new(kind: LearnerKind, inputs: usize, hidden: usize, classes: usize) -> Self {
        match kind {
            LearnerKind::Logistic => Architecture::Logistic { inputs, classes },
            LearnerKind::Mlp => Architecture::Mlp {
                inputs,
                hidden,
                classes,
            },
        }
    }

    pub fn num_params(&self) -> usize {
        match *self {
            Architecture::Logistic { inputs, classes } => classes * (inputs + 1),
            Architecture::Mlp {
                inputs,
                hidden,
                classes,
            } => hidden * (inputs + 1) + classes * (hidden + 1),
        }
    }

    pub fn inputs(&self) -> usize {
        match *self {
            Architecture::Logistic { inputs, .. } | Architecture::Mlp { inputs, .. } => inputs,
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            Architecture::Logistic { classes, .. } | Architecture::Mlp { classes, .. } => classes,
        }
    }

    /// Zero weights for logistic; uniform fan-in scaled weights for the MLP.
    pub fn init_params(&self, rng: &mut RngStream) -> ModelVector {
        match *self {
            Architecture::Logistic { .. } => ModelVector::zeros(self.num_params()),
            Architecture::Mlp {
                inputs,
                hidden,
                classes,
            } => {
                let mut p = Vec::with_capacity(self.num_params());
                let s1 = 1.0 / (inputs as f64).sqrt();
                p.extend((0..hidden * inputs).map(|_| s1 * (2.0 * rng.uniform() - 1.0)));
                p.extend(std::iter::repeat_n(0.0, hidden));
                let s2 = 1.0 / (hidden as f64).sqrt();
                p.extend((0..classes * hidden).map(|_| s2 * (2.0 * rng.uniform() - 1.0)));
                p.extend(std::iter::repeat_n(0.0, classes));
                ModelVector::new(p).expect("finite init")
            }
        }
    }

    fn check(&self, params: &[f64], data: &Dataset) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(ProbitError::DimensionMismatch {
                expected: self.num_params(),
                got: params.len(),
            });
        }
        if data.dim() != self.inputs() || data.classes() != self.classes() {
            return Err(ProbitError::DimensionMismatch {
                expected: self.inputs(),
                got: data.dim(),
            });
        }
        Ok(())
    }

    /// Writes class logits for one sample into `logits`; `hidden_buf` keeps
    /// the MLP activations for the backward pass.
    fn forward(&self, params: &[f64], x: &[f64], hidden_buf: &mut [f64], logits: &mut [f64]) {
        match *self {
            Architecture::Logistic { inputs, classes } => {
                let (w, b) = params.split_at(classes * inputs);
                for c in 0..classes {
                    logits[c] = b[c] + dot(&w[c * inputs..(c + 1) * inputs], x);
                }
            }
            Architecture::Mlp {
                inputs,
                hidden,
                classes,
            } => {
                let (w1, rest) = params.split_at(hidden * inputs);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(classes * hidden);
                for h in 0..hidden {
                    hidden_buf[h] = (b1[h] + dot(&w1[h * inputs..(h + 1) * inputs], x)).tanh();
                }
                for c in 0..classes {
                    logits[c] = b2[c] + dot(&w2[c * hidden..(c + 1) * hidden], hidden_buf);
                }
            }
        }
    }

    /// Mean cross-entropy over `batch`, accumulating its gradient into
    /// `grad` (which is overwritten).
    pub fn loss_grad_into(
        &self,
        params: &[f64],
        data: &Dataset,
        batch: &[usize],
        grad: &mut [f64],
    ) -> Result<f64> {
        self.check(params, data)?;
        if batch.is_empty() {
            return Err(ProbitError::Empty("batch"));
        }
        if let Some(&bad) = batch.iter().find(|&&i| i >= data.len()) {
            return Err(ProbitError::Precondition(format!(
                "batch index {bad} out of range {}",
                data.len()
            )));
        }
        grad.fill(0.0);
        let classes = self.classes();
        let hidden = match *self {
            Architecture::Mlp { hidden, .. } => hidden,
            Architecture::Logistic { .. } => 0,
        };
        let mut act = vec![0.0; hidden];
        let mut logits = vec![0.0; classes];
        let mut dhid = vec![0.0; hidden];
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for &i in batch {
            let x = data.row(i);
            let y = data.labels()[i];
            self.forward(params, x, &mut act, &mut logits);
            let lse = log_sum_exp(&logits);
            loss += lse - logits[y];
            // logits now hold dL/dlogit for this sample
            for (c, l) in logits.iter_mut().enumerate() {
                *l = ((*l - lse).exp() - f64::from(u8::from(c == y))) * scale;
            }
            match *self {
                Architecture::Logistic { inputs, classes } => {
                    let (gw, gb) = grad.split_at_mut(classes * inputs);
                    for c in 0..classes {
                        axpy_slice(logits[c], x, &mut gw[c * inputs..(c + 1) * inputs]);
                        gb[c] += logits[c];
                    }
                }
                Architecture::Mlp {
                    inputs,
                    hidden,
                    classes,
                } => {
                    let w2 = &params[hidden * (inputs + 1)..hidden * (inputs + 1) + classes * hidden];
                    let (gw1, rest) = grad.split_at_mut(hidden * inputs);
                    let (gb1, rest) = rest.split_at_mut(hidden);
                    let (gw2, gb2) = rest.split_at_mut(classes * hidden);
                    dhid.fill(0.0);
                    for c in 0..classes {
                        axpy_slice(logits[c], &act, &mut gw2[c * hidden..(c + 1) * hidden]);
                        gb2[c] += logits[c];
                        axpy_slice(logits[c], &w2[c * hidden..(c + 1) * hidden], &mut dhid);
                    }
                    for h in 0..hidden {
                        let dz = dhid[h] * (1.0 - act[h] * act[h]);
                        axpy_slice(dz, x, &mut gw1[h * inputs..(h + 1) * inputs]);
                        gb1[h] += dz;
                    }
                }
            }
        }
        Ok(loss * scale)
    }

    /// Predicted class per sample.
    pub fn predict(&self, params: &[f64], data: &Dataset) -> Result<Vec<usize>> {
        self.check(params, data)?;
        let hidden = match *self {
            Architecture::Mlp { hidden, .. } => hidden,
            Architecture::Logistic { .. } => 0,
        };
        let mut act = vec![0.0; hidden];
        let mut logits = vec![0.0; self.classes()];
        Ok((0..data.len())
            .map(|i| {
                self.forward(params, data.row(i), &mut act, &mut logits);
                // first maximal logit wins ties
                (0..logits.len()).fold(0, |best, c| if logits[c] > logits[best] { c } else { best })
            })
            .collect())
    }

    pub fn accuracy(&self, params: &[f64], data: &Dataset) -> Result<f64> {
        let pred = self.predict(params, data)?;
        let hits = pred.iter().zip(data.labels()).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / data.len() as f64)
    }

    /// Loss and gradient over the whole dataset.
    pub fn full_loss_grad(&self, params: &[f64], data: &Dataset) -> Result<(f64, ModelVector)> {
        let all: Vec<usize> = (0..data.len()).collect();
        let mut grad = vec![0.0; self.num_params()];
        let loss = self.loss_grad_into(params, data, &all, &mut grad)?;
        Ok((loss, ModelVector::new(grad)?))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

fn axpy_slice(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// A classifier: its architecture and current flat parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub arch: Architecture,
    pub params: ModelVector,
}

impl Learner {
    pub fn new(arch: Architecture, params: ModelVector) -> Result<Self> {
        if params.dim() != arch.num_params() {
            return Err(ProbitError::DimensionMismatch {
                expected: arch.num_params(),
                got: params.dim(),
            });
        }
        Ok(Self { arch, params })
    }
}

/// Mean cross-entropy over `batch` and its exact gradient.
pub fn loss_and_grad(l: &Learner, data: &Dataset, batch: &[usize]) -> Result<(f64, ModelVector)> {
    let mut grad = vec![0.0; l.arch.num_params()];
    let loss = l.arch.loss_grad_into(l.params.as_slice(), data, batch, &mut grad)?;
    Ok((loss, ModelVector::new(grad)?))
}

/// Empirical heterogeneity `sqrt(mean |g_m|^2 / |mean g_m|^2)` of client
/// gradients taken at a common point. Returns `+inf` when the mean gradient
/// vanishes.
pub fn measure_dissimilarity(grads: &[ModelVector]) -> Result<f64> {
    let first = grads.first().ok_or(ProbitError::Empty("gradient list"))?;
    let d = first.dim();
    let mut mean = vec![0.0; d];
    let mut sq = 0.0;
    for g in grads {
        first.check_dim(g)?;
        for (m, x) in mean.iter_mut().zip(g.iter()) {
            *m += x;
            sq += x * x;
        }
    }
    let n = grads.len() as f64;
    let mean_norm = (mean.iter().map(|m| (m / n) * (m / n)).sum::<f64>()).sqrt();
    if mean_norm < 1e-12 {
        return Ok(f64::INFINITY);
    }
    Ok(((sq / n) / (mean_norm * mean_norm)).sqrt())
}
