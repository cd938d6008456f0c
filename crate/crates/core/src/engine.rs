//! Round-based federated training.
//!
//! Each round the server broadcasts `w_t`; every client trains locally and
//! produces a model difference; the attack layer corrupts the Byzantine
//! slots; the scheme's transport carries the updates to the server, which
//! applies `w_{t+1} = w_t + server_lr * theta_hat`. Client work runs in
//! parallel, the server phase is sequential, and all randomness comes from
//! per-(client, round) streams, so output is independent of thread count.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::aggregator::{
    fedavg_mean, geometric_median, majority_vote, probit_aggregate, sign_accumulate, tally_bits,
    RoundReceipt,
};
use crate::byzantine::{corrupt_bits, corrupt_updates, AttackKind, AttackSpec};
use crate::config::{ExperimentConfig, Scheme, TrainSchedule};
use crate::error::{ProbitError, Result};
use crate::learners::{
    measure_dissimilarity, partition_label_skew, Architecture, Dataset, Learner, SyntheticTask,
};
use crate::privacy::required_b;
use crate::quantizer::{clamp_update, compress, dynamic_b_update, sign_compress, QuantParams};
use crate::rng::{Domain, RngStream};
use crate::vector::{axpy, l2_norm, ModelVector};

/// Local objective minimized by a client around the broadcast model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LocalObjective {
    /// `f_m(w) + lambda/2 |w - w_global|^2`.
    Proximal { lambda: f64 },
    /// `f_m(w) + weight * |w - w_global|_1`.
    L1 { weight: f64 },
}

impl LocalObjective {
    /// Adds the regularizer's (sub)gradient at `w` into `grad`.
    fn add_penalty_grad(&self, w: &[f64], w_global: &[f64], grad: &mut [f64]) {
        match *self {
            LocalObjective::Proximal { lambda } => {
                for ((g, x), c) in grad.iter_mut().zip(w).zip(w_global) {
                    *g += lambda * (x - c);
                }
            }
            LocalObjective::L1 { weight } => {
                for ((g, x), c) in grad.iter_mut().zip(w).zip(w_global) {
                    let diff: f64 = x - c;
                    if diff != 0.0 {
                        *g += weight * diff.signum();
                    }
                }
            }
        }
    }
}

/// One client's persistent state.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    /// Personalized model `w_m`, carried across rounds.
    pub local: Learner,
    pub dataset: Dataset,
    /// Momentum buffer of the local optimizer; reset at each local solve.
    pub momentum: Vec<f64>,
}

impl ClientState {
    pub fn new(id: usize, local: Learner, dataset: Dataset) -> Self {
        let d = local.params.dim();
        Self {
            id,
            local,
            dataset,
            momentum: vec![0.0; d],
        }
    }
}

/// Full-data gradient of the local objective at the client's current model.
pub fn objective_grad(
    client: &ClientState,
    w_global: &ModelVector,
    objective: &LocalObjective,
) -> Result<ModelVector> {
    let arch = client.local.arch;
    let (_, grad) = arch.full_loss_grad(client.local.params.as_slice(), &client.dataset)?;
    let mut g = grad.into_inner();
    objective.add_penalty_grad(client.local.params.as_slice(), w_global.as_slice(), &mut g);
    ModelVector::new(g)
}

/// Minibatch SGD with momentum on the local objective.
///
/// Starts from the client's persisted model when `warm_start` is set and
/// from `w_global` otherwise; stores the result back into the client and
/// returns the model difference `w_m_new - w_global`.
pub fn local_solve(
    client: &mut ClientState,
    w_global: &ModelVector,
    schedule: &TrainSchedule,
    objective: &LocalObjective,
    warm_start: bool,
    rng: &mut RngStream,
) -> Result<ModelVector> {
    client.local.params.check_dim(w_global)?;
    let arch = client.local.arch;
    let mut w = if warm_start {
        client.local.params.clone().into_inner()
    } else {
        w_global.as_slice().to_vec()
    };
    let center = w_global.as_slice();
    client.momentum.iter_mut().for_each(|m| *m = 0.0);
    let mut grad = vec![0.0; w.len()];
    let mut order: Vec<usize> = (0..client.dataset.len()).collect();
    for _ in 0..schedule.local_epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(schedule.batch_size) {
            arch.loss_grad_into(&w, &client.dataset, batch, &mut grad)?;
            objective.add_penalty_grad(&w, center, &mut grad);
            for ((x, m), g) in w.iter_mut().zip(client.momentum.iter_mut()).zip(&grad) {
                *m = schedule.momentum * *m + g;
                *x -= schedule.lr * *m;
            }
        }
    }
    client.local.params = ModelVector::new(w)?;
    client.local.params.sub(w_global)
}

/// Ratio of the local objective's gradient norm at the client's current
/// model to its norm at `w_global`. Diagnostic only; `+inf` if the
/// denominator vanishes.
pub fn inexactness(
    client: &ClientState,
    w_global: &ModelVector,
    objective: &LocalObjective,
) -> Result<f64> {
    let num = l2_norm(&objective_grad(client, w_global, objective)?);
    let at_center = ClientState {
        local: Learner::new(client.local.arch, w_global.clone())?,
        ..client.clone()
    };
    let den = l2_norm(&objective_grad(&at_center, w_global, objective)?);
    if den < 1e-12 {
        return Ok(f64::INFINITY);
    }
    Ok(num / den)
}

/// True iff strictly more than half of the signals report a decrease.
pub fn loss_signal_vote(signals: &[bool]) -> Result<bool> {
    if signals.is_empty() {
        return Err(ProbitError::Empty("loss signal list"));
    }
    let yes = signals.iter().filter(|&&s| s).count();
    Ok(2 * yes > signals.len())
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub train_loss: f64,
    pub test_acc: f64,
    pub theta_hat_norm: f64,
    pub b_mean: f64,
    pub dissimilarity: f64,
    pub inexactness_mean: f64,
}

/// Per-round CSV log of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub scheme: Scheme,
    pub beta: f64,
    pub attack: AttackKind,
    /// `None` when privacy is off.
    pub epsilon: Option<f64>,
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub const CSV_HEADER: &'static str = "round,scheme,beta,attack,epsilon,train_loss,test_acc,\
theta_hat_norm,b_mean,B_dissimilarity,inexactness_mean";

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        let eps = self.epsilon.unwrap_or(f64::INFINITY);
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.round,
                self.scheme,
                self.beta,
                self.attack,
                eps,
                r.train_loss,
                r.test_acc,
                r.theta_hat_norm,
                r.b_mean,
                r.dissimilarity,
                r.inexactness_mean
            )?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii csv")
    }

    pub fn last(&self) -> &MetricsRow {
        self.rows.last().expect("log always holds the initial row")
    }
}

/// Everything the server observed in one round.
#[derive(Debug, Clone)]
pub struct RoundReport {
    pub round: usize,
    /// Updates as submitted, after the attack layer and before transport.
    pub submitted: Vec<ModelVector>,
    pub theta_hat: ModelVector,
    /// Present for PRoBit+ rounds.
    pub receipt: Option<RoundReceipt>,
    pub loss_vote: Option<bool>,
    pub metrics: MetricsRow,
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub log: MetricsLog,
    pub final_model: ModelVector,
    pub receipts: Vec<RoundReceipt>,
}

/// Per-client loss and gradient at the current global model.
#[derive(Debug, Clone)]
struct GlobalEval {
    losses: Vec<f64>,
    grads: Vec<ModelVector>,
}

/// Live state of a federated training run.
pub struct Simulation {
    config: ExperimentConfig,
    arch: Architecture,
    global: ModelVector,
    clients: Vec<ClientState>,
    test: Dataset,
    quant: Option<QuantParams>,
    attack: AttackSpec,
    honest: usize,
    round: usize,
    eval: GlobalEval,
    prev_losses: Option<Vec<f64>>,
}

impl Simulation {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let dc = &config.data;
        let (train, test) = match (&dc.train_csv, &dc.test_csv) {
            (Some(tr), Some(te)) => {
                let train = Dataset::load_csv(Path::new(tr), None)?;
                let test = Dataset::load_csv(Path::new(te), Some(train.classes()))?;
                if test.dim() != train.dim() {
                    return Err(ProbitError::Config(format!(
                        "test csv has {} features, train csv has {}",
                        test.dim(),
                        train.dim()
                    )));
                }
                (train, test)
            }
            _ => {
                let task = SyntheticTask::new(
                    dc.classes,
                    dc.features,
                    dc.spread,
                    &mut RngStream::with_domain(seed, Domain::Data, 0, 0),
                )?;
                let train =
                    task.sample(dc.per_class_train, &mut RngStream::with_domain(seed, Domain::Data, 1, 0))?;
                let test =
                    task.sample(dc.per_class_test, &mut RngStream::with_domain(seed, Domain::Data, 2, 0))?;
                (train, test)
            }
        };
        let m = config.topology.clients;
        let parts = partition_label_skew(
            &train,
            m,
            dc.classes_per_client.min(train.classes()),
            &mut RngStream::with_domain(seed, Domain::Data, 3, 0),
        )?;
        let arch = Architecture::new(dc.learner, train.dim(), dc.hidden, train.classes());
        let global = arch.init_params(&mut RngStream::with_domain(seed, Domain::Init, 0, 0));
        let clients = parts
            .into_iter()
            .enumerate()
            .map(|(id, data)| Ok(ClientState::new(id, Learner::new(arch, global.clone())?, data)))
            .collect::<Result<Vec<_>>>()?;
        let quant = if config.scheme == Scheme::ProbitPlus {
            let b0 = required_b(config.quant.b_init, &config.privacy);
            Some(QuantParams::uniform(global.dim(), b0, config.privacy.margin())?)
        } else {
            None
        };
        let attack = config.attack_spec();
        let honest = m - attack.byzantine_count(m);
        let mut sim = Self {
            arch,
            global,
            clients,
            test,
            quant,
            attack,
            honest,
            round: 0,
            eval: GlobalEval {
                losses: Vec::new(),
                grads: Vec::new(),
            },
            prev_losses: None,
            config,
        };
        sim.eval = sim.evaluate_global()?;
        Ok(sim)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn global(&self) -> &ModelVector {
        &self.global
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn quant(&self) -> Option<&QuantParams> {
        self.quant.as_ref()
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    fn objective(&self) -> (LocalObjective, bool) {
        let s = &self.config.schedule;
        match self.config.scheme {
            Scheme::ProbitPlus => (LocalObjective::Proximal { lambda: s.lambda }, true),
            Scheme::Rsa => (
                LocalObjective::L1 {
                    weight: self.config.baseline.rsa_penalty,
                },
                true,
            ),
            Scheme::Fedavg | Scheme::FedGm | Scheme::SignsgdMv => {
                (LocalObjective::Proximal { lambda: 0.0 }, false)
            }
        }
    }

    fn evaluate_global(&self) -> Result<GlobalEval> {
        let results: Vec<(f64, ModelVector)> = self
            .clients
            .par_iter()
            .map(|c| self.arch.full_loss_grad(self.global.as_slice(), &c.dataset))
            .collect::<Result<_>>()?;
        let (losses, grads) = results.into_iter().unzip();
        Ok(GlobalEval { losses, grads })
    }

    fn metrics(&self, theta_hat_norm: f64, inexactness_mean: f64) -> Result<MetricsRow> {
        let honest = &self.clients[..self.honest];
        let mut loss_sum = 0.0;
        let mut n = 0usize;
        for (c, loss) in honest.iter().zip(&self.eval.losses) {
            loss_sum += loss * c.dataset.len() as f64;
            n += c.dataset.len();
        }
        Ok(MetricsRow {
            round: self.round,
            train_loss: loss_sum / n as f64,
            test_acc: self.arch.accuracy(self.global.as_slice(), &self.test)?,
            theta_hat_norm,
            b_mean: self.quant.as_ref().map_or(f64::NAN, QuantParams::b_mean),
            dissimilarity: measure_dissimilarity(&self.eval.grads[..self.honest])?,
            inexactness_mean,
        })
    }

    /// Metrics of the current global model before any round has run.
    pub fn initial_metrics(&self) -> Result<MetricsRow> {
        self.metrics(0.0, f64::NAN)
    }

    /// Executes one communication round.
    pub fn run_round(&mut self) -> Result<RoundReport> {
        let t = self.round as u64;
        let seed = self.config.seed;
        let (objective, warm_start) = self.objective();
        let schedule = self.config.schedule.clone();
        let w_t = self.global.clone();

        let solved: Vec<(ModelVector, f64)> = self
            .clients
            .par_iter_mut()
            .map(|c| {
                let mut rng = RngStream::with_domain(seed, Domain::LocalTraining, c.id as u64, t);
                let delta = local_solve(c, &w_t, &schedule, &objective, warm_start, &mut rng)?;
                let gap = inexactness(c, &w_t, &objective)?;
                Ok((delta, gap))
            })
            .collect::<Result<_>>()?;
        let (honest_updates, gaps): (Vec<ModelVector>, Vec<f64>) = solved.into_iter().unzip();
        let inexactness_mean = gaps[..self.honest].iter().sum::<f64>() / self.honest as f64;

        // one-bit loss signals: did f_m(w_t) drop below f_m(w_{t-1})?
        let signals: Option<Vec<bool>> = self.prev_losses.as_ref().map(|prev| {
            prev.iter()
                .zip(&self.eval.losses)
                .enumerate()
                .map(|(m, (before, now))| {
                    let decreased = now < before;
                    if m >= self.honest && self.attack.lie_in_loss_signal && self.attack.is_active(self.clients.len()) {
                        !decreased
                    } else {
                        decreased
                    }
                })
                .collect()
        });

        let mut attack_rng = RngStream::with_domain(seed, Domain::Attack, 0, t);
        let submitted = corrupt_updates(&honest_updates, &self.attack, &mut attack_rng)?;

        let mut receipt = None;
        let theta_hat = match self.config.scheme {
            Scheme::ProbitPlus => {
                let q = self.quant.as_ref().expect("probit run carries quant params");
                let bits = submitted
                    .par_iter()
                    .enumerate()
                    .map(|(m, u)| {
                        let clipped = clamp_update(u, q)?;
                        let mut rng = RngStream::with_domain(seed, Domain::Compression, m as u64, t);
                        compress(&clipped, q, &mut rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let bits = self.bit_attack(bits)?;
                let tally = tally_bits(&bits)?;
                let theta = probit_aggregate(&tally, q.b())?;
                receipt = Some(RoundReceipt {
                    round: t,
                    tally,
                    theta_hat: theta.clone(),
                    b_used: q.b().to_vec(),
                });
                theta
            }
            Scheme::Fedavg => fedavg_mean(&submitted)?,
            Scheme::FedGm => geometric_median(
                &submitted,
                self.config.baseline.gm_tol,
                self.config.baseline.gm_max_iter,
            )?,
            Scheme::SignsgdMv => {
                let bits = self.bit_attack(submitted.iter().map(sign_compress).collect())?;
                majority_vote(&bits, self.config.baseline.sign_step)?
            }
            Scheme::Rsa => {
                let bits = self.bit_attack(submitted.iter().map(sign_compress).collect())?;
                sign_accumulate(&bits, self.config.baseline.sign_step)?
            }
        };

        self.global = axpy(schedule.server_lr, &theta_hat, &w_t)?;

        let mut loss_vote = None;
        if let Some(signals) = &signals {
            let vote = loss_signal_vote(signals)?;
            loss_vote = Some(vote);
            if self.config.dynamic_b_active() {
                let q = self.quant.as_ref().expect("dynamic b implies probit");
                self.quant = Some(dynamic_b_update(q, vote)?);
            }
        }

        self.round += 1;
        self.prev_losses = Some(std::mem::take(&mut self.eval.losses));
        self.eval = self.evaluate_global()?;
        let metrics = self.metrics(l2_norm(&theta_hat), inexactness_mean)?;
        Ok(RoundReport {
            round: self.round,
            submitted,
            theta_hat,
            receipt,
            loss_vote,
            metrics,
        })
    }

    fn bit_attack(&self, bits: Vec<crate::quantizer::BitVector>) -> Result<Vec<crate::quantizer::BitVector>> {
        if self.attack.kind == AttackKind::WorstCaseBits {
            corrupt_bits(&bits, &self.attack)
        } else {
            Ok(bits)
        }
    }
}

/// Runs the configured number of rounds and collects the log.
pub fn run_training(config: &ExperimentConfig) -> Result<TrainingOutcome> {
    let mut sim = Simulation::new(config.clone())?;
    let mut rows = vec![sim.initial_metrics()?];
    let mut receipts = Vec::new();
    for _ in 0..config.schedule.rounds {
        let report = sim.run_round()?;
        rows.push(report.metrics);
        receipts.extend(report.receipt);
    }
    Ok(TrainingOutcome {
        log: MetricsLog {
            scheme: config.scheme,
            beta: config.topology.beta,
            attack: config.attack.kind,
            epsilon: config.privacy.enabled.then_some(config.privacy.epsilon),
            rows,
        },
        final_model: sim.global.clone(),
        receipts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::{synth_generate, LearnerKind};

    fn small_config(scheme: Scheme) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(scheme);
        cfg.seed = 5;
        cfg.topology.clients = 6;
        cfg.schedule.rounds = 3;
        cfg.schedule.local_epochs = 1;
        cfg.data.per_class_train = 30;
        cfg.data.per_class_test = 20;
        cfg.data.features = 4;
        cfg
    }

    fn client(seed: u64, kind: LearnerKind) -> ClientState {
        let data = synth_generate(3, 10, 4, 2.0, &mut RngStream::new(seed, 0, 0)).unwrap();
        let arch = Architecture::new(kind, 4, 5, 3);
        let w = arch.init_params(&mut RngStream::new(seed, 1, 0));
        ClientState::new(0, Learner::new(arch, w).unwrap(), data)
    }

    #[test]
    fn vote_rule() {
        assert!(loss_signal_vote(&[true, true, true, false, false]).unwrap());
        assert!(!loss_signal_vote(&[true, true, false, false]).unwrap());
        assert!(!loss_signal_vote(&[false; 3]).unwrap());
        assert!(loss_signal_vote(&[]).is_err());
    }

    #[test]
    fn proximal_gradient_matches_finite_differences() {
        for kind in [LearnerKind::Logistic, LearnerKind::Mlp] {
            for seed in 0..10u64 {
                let mut c = client(seed, kind);
                let mut r = RngStream::new(seed, 2, 0);
                let n = c.local.arch.num_params();
                let w: Vec<f64> = (0..n).map(|_| r.normal(0.0, 0.5)).collect();
                let center = ModelVector::new((0..n).map(|_| r.normal(0.0, 0.5)).collect()).unwrap();
                c.local.params = ModelVector::new(w.clone()).unwrap();
                let obj = LocalObjective::Proximal { lambda: 0.2 };
                let g = objective_grad(&c, &center, &obj).unwrap();
                let h_at = |p: &[f64]| {
                    let (f, _) = c.local.arch.full_loss_grad(p, &c.dataset).unwrap();
                    let pen: f64 = p.iter().zip(center.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                    f + 0.1 * pen
                };
                let h = 1e-5;
                let mut worst: f64 = 0.0;
                let mut scale: f64 = 1.0;
                for j in 0..n {
                    let mut p = w.clone();
                    p[j] += h;
                    let up = h_at(&p);
                    p[j] -= 2.0 * h;
                    let down = h_at(&p);
                    worst = worst.max(((up - down) / (2.0 * h) - g[j]).abs());
                    scale = scale.max(g[j].abs());
                }
                assert!(worst <= 1e-6 * scale, "{kind:?} seed {seed}: {worst}");
            }
        }
    }

    #[test]
    fn strong_proximal_term_pulls_toward_global() {
        let mut c = client(1, LearnerKind::Logistic);
        let n = c.local.arch.num_params();
        let center = ModelVector::zeros(n);
        c.local.params = ModelVector::filled(n, 0.5).unwrap();
        let before = l2_norm(&c.local.params.sub(&center).unwrap());
        let schedule = TrainSchedule {
            local_epochs: 1,
            batch_size: c.dataset.len(),
            lr: 1e-6,
            momentum: 0.0,
            ..TrainSchedule::default()
        };
        let obj = LocalObjective::Proximal { lambda: 1e6 };
        let delta = local_solve(&mut c, &center, &schedule, &obj, true, &mut RngStream::new(0, 0, 0)).unwrap();
        assert!(l2_norm(&delta) < before);
        // the persisted model moved with it
        assert_eq!(c.local.params, delta);
    }

    #[test]
    fn identical_clients_produce_identical_updates() {
        let a = client(3, LearnerKind::Mlp);
        let mut b = a.clone();
        b.id = 1;
        let mut a = a;
        let center = a.local.params.clone();
        let obj = LocalObjective::Proximal { lambda: 0.0 };
        let s = TrainSchedule::default();
        // same shuffling stream for both
        let da = local_solve(&mut a, &center, &s, &obj, true, &mut RngStream::new(1, 9, 0)).unwrap();
        let db = local_solve(&mut b, &center, &s, &obj, true, &mut RngStream::new(1, 9, 0)).unwrap();
        assert_eq!(da, db);
    }

    #[test]
    fn inexactness_cases() {
        let mut c = client(4, LearnerKind::Logistic);
        let center = c.local.params.clone();
        let obj = LocalObjective::Proximal { lambda: 0.2 };
        let zero_steps = TrainSchedule {
            local_epochs: 0,
            ..TrainSchedule::default()
        };
        local_solve(&mut c, &center, &zero_steps, &obj, true, &mut RngStream::new(0, 0, 0)).unwrap();
        assert!((inexactness(&c, &center, &obj).unwrap() - 1.0).abs() < 1e-15);

        let mut ratios = Vec::new();
        for epochs in [1, 5, 25] {
            let mut total = 0.0;
            for seed in 0..5u64 {
                let mut c = client(10 + seed, LearnerKind::Logistic);
                let center = c.local.params.clone();
                let s = TrainSchedule {
                    local_epochs: epochs,
                    ..TrainSchedule::default()
                };
                local_solve(&mut c, &center, &s, &obj, true, &mut RngStream::new(seed, 0, 0)).unwrap();
                total += inexactness(&c, &center, &obj).unwrap();
            }
            ratios.push(total / 5.0);
        }
        assert!(ratios[0] > ratios[1] && ratios[1] > ratios[2], "{ratios:?}");
    }

    /// Quadratic local loss solved in closed form: the exact minimizer of
    /// `h(w) = 1/2 |A w - y|^2 + lambda/2 |w - c|^2` has zero gradient, so
    /// the inexactness ratio is zero. Checked with the same penalty code path.
    #[test]
    fn exact_minimizer_has_zero_inexactness() {
        let lambda = 0.2;
        let c = [0.3, -0.1];
        // A = diag(2, 1), y = (1, 1)  =>  w_i = (a_i y_i + lambda c_i) / (a_i^2 + lambda)
        let a = [2.0, 1.0];
        let w: Vec<f64> = (0..2).map(|i| (a[i] + lambda * c[i]) / (a[i] * a[i] + lambda)).collect();
        let mut grad: Vec<f64> = (0..2).map(|i| a[i] * (a[i] * w[i] - 1.0)).collect();
        LocalObjective::Proximal { lambda }.add_penalty_grad(&w, &c, &mut grad);
        let mut g0: Vec<f64> = (0..2).map(|i| a[i] * (a[i] * c[i] - 1.0)).collect();
        LocalObjective::Proximal { lambda }.add_penalty_grad(&c, &c, &mut g0);
        let ratio = grad.iter().map(|g| g * g).sum::<f64>().sqrt() / g0.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(ratio < 1e-15, "{ratio}");
    }

    #[test]
    fn l1_penalty_subgradient() {
        let mut g = vec![0.0; 3];
        LocalObjective::L1 { weight: 0.5 }.add_penalty_grad(&[1.0, 0.0, -2.0], &[0.0; 3], &mut g);
        assert_eq!(g, vec![0.5, 0.0, -0.5]);
    }

    #[test]
    fn zero_rounds_gives_initial_row() {
        let mut cfg = small_config(Scheme::ProbitPlus);
        cfg.schedule.rounds = 0;
        let out = run_training(&cfg).unwrap();
        assert_eq!(out.log.rows.len(), 1);
        assert_eq!(out.log.rows[0].round, 0);
        assert!(out.receipts.is_empty());
    }

    #[test]
    fn every_scheme_runs_and_is_deterministic() {
        for scheme in Scheme::ALL {
            let cfg = small_config(scheme);
            let a = run_training(&cfg).unwrap();
            let b = run_training(&cfg).unwrap();
            assert_eq!(a.log.to_csv(), b.log.to_csv(), "{scheme}");
            assert_eq!(a.log.rows.len(), 4);
            assert_eq!(a.receipts.len(), if scheme == Scheme::ProbitPlus { 3 } else { 0 });
            for r in &a.log.rows {
                assert!(r.dissimilarity >= 1.0 - 1e-12, "{scheme}: {}", r.dissimilarity);
            }
        }
    }

    #[test]
    fn thread_count_does_not_change_output() {
        let cfg = small_config(Scheme::ProbitPlus);
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool4 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = pool1.install(|| run_training(&cfg).unwrap().log.to_csv());
        let b = pool4.install(|| run_training(&cfg).unwrap().log.to_csv());
        assert_eq!(a, b);
    }

    #[test]
    fn probit_receipts_respect_range() {
        let out = run_training(&small_config(Scheme::ProbitPlus)).unwrap();
        for r in &out.receipts {
            for (t, b) in r.theta_hat.iter().zip(&r.b_used) {
                assert!(t.abs() <= *b);
            }
        }
    }

    #[test]
    fn fedavg_gaussian_attacker_shifts_mean_by_its_contribution() {
        let mut clean = small_config(Scheme::Fedavg);
        clean.topology.beta = 1.0 / 6.0;
        let mut attacked = clean.clone();
        attacked.attack.kind = AttackKind::Gaussian;
        let a = Simulation::new(clean).unwrap().run_round().unwrap();
        let b = Simulation::new(attacked).unwrap().run_round().unwrap();
        assert_eq!(&a.submitted[..5], &b.submitted[..5]);
        for i in 0..a.theta_hat.dim() {
            let shift = (b.submitted[5][i] - a.submitted[5][i]) / 6.0;
            assert!((b.theta_hat[i] - a.theta_hat[i] - shift).abs() < 1e-12);
        }
    }

    #[test]
    fn dynamic_b_follows_loss_vote() {
        let cfg = small_config(Scheme::ProbitPlus);
        let mut sim = Simulation::new(cfg).unwrap();
        let first = sim.run_round().unwrap();
        assert_eq!(first.loss_vote, None);
        assert!((sim.quant().unwrap().b_mean() - 0.01).abs() < 1e-15);
        let second = sim.run_round().unwrap();
        let expected = if second.loss_vote.unwrap() { 0.0101 } else { 0.0098 };
        assert!((sim.quant().unwrap().b_mean() - expected).abs() < 1e-15);
    }

    #[test]
    fn privacy_widens_b_by_margin() {
        let mut cfg = small_config(Scheme::ProbitPlus);
        cfg.privacy = crate::privacy::PrivacySpec::new(0.01, 0.0002).unwrap();
        let sim = Simulation::new(cfg).unwrap();
        let q = sim.quant().unwrap();
        assert!((q.dp_margin() - 0.0202).abs() < 1e-15);
        assert!((q.b()[0] - 0.0302).abs() < 1e-15);
    }

    #[test]
    fn clients_keep_personal_models() {
        let cfg = small_config(Scheme::ProbitPlus);
        let mut sim = Simulation::new(cfg).unwrap();
        sim.run_round().unwrap();
        let g = sim.global().clone();
        let distinct = sim.clients().iter().filter(|c| c.local.params != g).count();
        assert_eq!(distinct, sim.clients().len());
        assert_ne!(sim.clients()[0].local.params, sim.clients()[1].local.params);
    }
}
