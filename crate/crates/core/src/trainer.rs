//! Two-phase training.
//!
//! Phase one fits a teacher encoder and head with the margin loss alone; the
//! teacher is then frozen. Phase two trains a student encoder, its head and the
//! decoder on `DLoss + weight·GLoss`, letting only teacher-approved samples
//! push gradient into the student.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;

use crate::config::{ExperimentConfig, TargetMode};
use crate::error::{LatseError, Result};
use crate::eval::{evaluate, EvalReport};
use crate::gate::{filter_gradients, gate, GateAudit, GateDecision, GateScope};
use crate::generator::{decode, decoder_backward, gloss, GenTarget, ImageShape};
use crate::margin::{cosine_probability, dloss, AngleBatch, ProbDist};
use crate::net::{
    backward, encode, encoder_backward, head_backward, head_forward, ClassifierWeights, NetParams,
    Topology,
};
use crate::optim::{lr_at, MatrixVelocity, NetVelocity, SgdConfig, StepSchedule};
use crate::rng;
use crate::synth::Dataset;

/// Training split stacked into matrices.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub shape: ImageShape,
    pub num_classes: usize,
    /// N × H·W.
    pub images: Array2<f64>,
    pub labels: Vec<usize>,
    pub noisy: Vec<bool>,
}

impl TrainData {
    pub fn from_dataset(data: &Dataset) -> Self {
        let p = data.shape.pixels();
        let mut images = Array2::zeros((data.train.len(), p));
        for (mut row, s) in images.rows_mut().into_iter().zip(&data.train) {
            row.assign(&s.image);
        }
        Self {
            shape: data.shape,
            num_classes: data.num_classes,
            images,
            labels: data.train.iter().map(|s| s.label).collect(),
            noisy: data.train.iter().map(|s| s.noise.is_noisy()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Batch `iteration` of a stream of per-epoch shuffles. Pure in its
/// arguments, so resuming needs no sampler state.
pub fn batch_indices(seed: u64, n: usize, batch: usize, iteration: usize) -> Vec<usize> {
    let start = iteration * batch;
    let mut out = Vec::with_capacity(batch);
    let mut epoch = start / n;
    let mut offset = start % n;
    let mut perm = epoch_permutation(seed, n, epoch);
    while out.len() < batch {
        if offset == n {
            epoch += 1;
            offset = 0;
            perm = epoch_permutation(seed, n, epoch);
        }
        out.push(perm[offset]);
        offset += 1;
    }
    out
}

fn epoch_permutation(seed: u64, n: usize, epoch: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::rng(rng::mix(seed, epoch as u64)));
    perm
}

/// One logged iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub iteration: usize,
    pub lr: f64,
    pub dloss: f64,
    pub gloss: f64,
    pub loss: f64,
    pub gate_pass_rate: f64,
    pub train_top1: f64,
}

pub const METRICS_HEADER: &str = "iteration,lr,dloss,gloss,loss,gate_pass_rate,train_top1";

impl MetricRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration, self.lr, self.dloss, self.gloss, self.loss, self.gate_pass_rate, self.train_top1
        )
    }
}

/// Metrics CSV with rows every `interval` iterations and the final one.
pub fn metrics_csv(history: &[MetricRow], interval: usize, config_hash: &str) -> String {
    let mut out = format!("# config_hash = {config_hash}\n{METRICS_HEADER}\n");
    let last = history.len().saturating_sub(1);
    for (i, row) in history.iter().enumerate() {
        if row.iteration % interval == 0 || i == last {
            out.push_str(&row.csv_line());
            out.push('\n');
        }
    }
    out
}

fn top1_accuracy(cosines: &Array2<f64>, labels: &[usize]) -> f64 {
    let hits = cosines
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| {
            let mut best = 0;
            for (j, &c) in row.iter().enumerate() {
                if c > row[best] {
                    best = j;
                }
            }
            best == y
        })
        .count();
    hits as f64 / labels.len() as f64
}

fn sgd(cfg: &ExperimentConfig) -> SgdConfig {
    SgdConfig {
        momentum: cfg.optim.momentum,
        weight_decay: cfg.optim.weight_decay,
    }
}

fn schedule(cfg: &ExperimentConfig, iterations: usize) -> StepSchedule {
    StepSchedule::from_fractions(
        cfg.optim.lr,
        cfg.optim.decay_factor,
        &cfg.optim.decay_fractions,
        iterations,
    )
}

pub fn encoder_topology(cfg: &ExperimentConfig, shape: ImageShape) -> Topology {
    Topology {
        leaky_slope: cfg.net.leaky_slope,
        ..Topology::encoder(shape.pixels(), &cfg.net.hidden, cfg.net.embedding_dim)
    }
}

pub fn decoder_topology(cfg: &ExperimentConfig, shape: ImageShape) -> Topology {
    Topology {
        leaky_slope: cfg.net.leaky_slope,
        ..Topology::decoder(cfg.net.embedding_dim, &cfg.net.decoder_hidden, shape.pixels())
    }
}

fn guard_all(iteration: usize, what: &'static str, values: &Array2<f64>) -> Result<()> {
    match values.iter().find(|v| !v.is_finite()) {
        Some(&v) => guard(iteration, what, v),
        None => Ok(()),
    }
}

fn guard(iteration: usize, what: &'static str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(LatseError::Diverged {
            iteration,
            what,
            value,
        })
    }
}

/// Encoder plus classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub encoder: NetParams,
    pub head: ClassifierWeights,
}

impl Classifier {
    pub fn init(cfg: &ExperimentConfig, shape: ImageShape, num_classes: usize, role: &str) -> Result<Self> {
        let encoder = NetParams::init(
            encoder_topology(cfg, shape),
            rng::mix_tag(cfg.seed, &format!("{role}-encoder")),
        )?;
        let head = ClassifierWeights::init(
            num_classes,
            cfg.net.embedding_dim,
            rng::mix_tag(cfg.seed, &format!("{role}-centers")),
        );
        Ok(Self { encoder, head })
    }

    /// Cosines to every class center, batch by batch.
    pub fn cosines(&self, images: &Array2<f64>) -> Result<Array2<f64>> {
        let (emb, _) = encode(&self.encoder, images)?;
        Ok(head_forward(&emb, &self.head)?.cosines)
    }

    /// Unit embeddings of `images`, computed in chunks.
    pub fn embed(&self, images: &Array2<f64>) -> Result<Array2<f64>> {
        let mut parts = Vec::new();
        for chunk in images.axis_chunks_iter(Axis(0), 256) {
            parts.push(encode(&self.encoder, &chunk.to_owned())?.0.vectors);
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        Ok(ndarray::concatenate(Axis(0), &views).expect("equal widths"))
    }
}

/// Outcome of the margin-loss-only phase.
#[derive(Debug, Clone)]
pub struct TeacherRun {
    pub teacher: Classifier,
    pub history: Vec<MetricRow>,
    /// Top-1 accuracy of the final teacher over the whole (noisy-labelled)
    /// training split.
    pub train_top1: f64,
}

/// Trains the teacher with the margin loss only.
pub fn train_teacher(cfg: &ExperimentConfig, data: &TrainData) -> Result<TeacherRun> {
    let mut net = Classifier::init(cfg, data.shape, data.num_classes, "teacher")?;
    let history = fit_classifier(
        cfg,
        data,
        &mut net,
        cfg.teacher_iterations,
        rng::mix_tag(cfg.seed, "teacher-batches"),
    )?;
    let train_top1 = split_top1(&net, data)?;
    Ok(TeacherRun {
        teacher: net,
        history,
        train_top1,
    })
}

/// Top-1 accuracy of `net` on the full training split.
pub fn split_top1(net: &Classifier, data: &TrainData) -> Result<f64> {
    let mut hits = 0.0;
    for (chunk, labels) in data
        .images
        .axis_chunks_iter(Axis(0), 256)
        .zip(data.labels.chunks(256))
    {
        hits += top1_accuracy(&net.cosines(&chunk.to_owned())?, labels) * labels.len() as f64;
    }
    Ok(hits / data.len() as f64)
}

/// Plain margin-softmax classifier training loop.
pub fn fit_classifier(
    cfg: &ExperimentConfig,
    data: &TrainData,
    net: &mut Classifier,
    iterations: usize,
    batch_seed: u64,
) -> Result<Vec<MetricRow>> {
    let sched = schedule(cfg, iterations);
    let opt = sgd(cfg);
    let mut enc_vel = NetVelocity::zeros_like(&net.encoder);
    let mut head_vel = MatrixVelocity::zeros_like(&net.head.centers);
    let mut history = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let idx = batch_indices(batch_seed, data.len(), cfg.optim.batch_size, it);
        let x = data.images.select(Axis(0), &idx);
        let y: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let (emb, cache) = encode(&net.encoder, &x)?;
        guard_all(it, "embedding", &emb.vectors)?;
        let head = head_forward(&emb, &net.head)?;
        let top1 = top1_accuracy(&head.cosines, &y);
        let angles = AngleBatch::new(head.angles.clone(), y)?;
        let d = dloss(&cfg.loss, &angles);
        guard(it, "dloss", d.loss)?;
        let grads = backward(&net.encoder, &net.head, &emb, &cache, &head, &d.grad_theta);
        let lr = lr_at(&sched, it);
        enc_vel.step(&mut net.encoder, &grads.encoder, lr, &opt);
        head_vel.step(&mut net.head.centers, &grads.centers, lr, &opt);
        net.head.renormalize();
        history.push(MetricRow {
            iteration: it,
            lr,
            dloss: d.loss,
            gloss: 0.0,
            loss: d.loss,
            gate_pass_rate: 1.0,
            train_top1: top1,
        });
    }
    Ok(history)
}

/// Mutable state of the student phase; enough to resume bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub iteration: usize,
    pub student: Classifier,
    pub decoder: NetParams,
    pub student_vel: NetVelocity,
    pub head_vel: MatrixVelocity,
    pub decoder_vel: NetVelocity,
    pub targets: Vec<GenTarget>,
    pub history: Vec<MetricRow>,
    pub audit: GateAudit,
}

impl TrainState {
    pub fn init(cfg: &ExperimentConfig, data: &TrainData) -> Result<Self> {
        let student = Classifier::init(cfg, data.shape, data.num_classes, "student")?;
        let decoder = NetParams::init(
            decoder_topology(cfg, data.shape),
            rng::mix_tag(cfg.seed, "decoder"),
        )?;
        let targets = (0..data.num_classes)
            .map(|c| GenTarget::new(c, data.shape.pixels(), cfg.gen.momentum))
            .collect();
        Ok(Self {
            iteration: 0,
            student_vel: NetVelocity::zeros_like(&student.encoder),
            head_vel: MatrixVelocity::zeros_like(&student.head.centers),
            decoder_vel: NetVelocity::zeros_like(&decoder),
            student,
            decoder,
            targets,
            history: Vec::new(),
            audit: GateAudit::default(),
        })
    }
}

/// Gate decisions of one iteration, kept for the gate log.
#[derive(Debug, Clone)]
pub struct GateRecord {
    pub iteration: usize,
    pub sample_ids: Vec<usize>,
    pub decisions: Vec<GateDecision>,
}

/// Drives the student phase one iteration at a time.
pub struct StudentTrainer<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a TrainData,
    /// Frozen teacher's probabilities for every training sample.
    teacher_probs: Option<Array2<f64>>,
    sched: StepSchedule,
    batch_seed: u64,
    pub state: TrainState,
}

impl<'a> StudentTrainer<'a> {
    /// `teacher` is required when `cfg.gate.k > 0`.
    pub fn new(
        cfg: &'a ExperimentConfig,
        data: &'a TrainData,
        teacher: Option<&'a Classifier>,
        state: TrainState,
    ) -> Result<Self> {
        let teacher_probs = if cfg.gate.k > 0 {
            let t = teacher.ok_or_else(|| LatseError::Config("gate.k > 0 needs a teacher".into()))?;
            if t.encoder.topology.input_dim() != data.shape.pixels()
                || t.head.num_classes() != data.num_classes
            {
                return Err(LatseError::Shape("teacher topology does not match the data".into()));
            }
            let mut parts = Vec::new();
            for chunk in data.images.axis_chunks_iter(Axis(0), 256) {
                parts.push(cosine_probability(cfg.loss.s, &t.cosines(&chunk.to_owned())?).probs);
            }
            let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
            Some(ndarray::concatenate(Axis(0), &views).expect("equal widths"))
        } else {
            None
        };
        Ok(Self {
            cfg,
            data,
            teacher_probs,
            sched: schedule(cfg, cfg.student_iterations),
            batch_seed: rng::mix_tag(cfg.seed, "student-batches"),
            state,
        })
    }

    pub fn done(&self) -> bool {
        self.state.iteration >= self.cfg.student_iterations
    }

    /// Runs one iteration. Returns the gate decisions when a teacher is used.
    pub fn step(&mut self) -> Result<Option<GateRecord>> {
        let cfg = self.cfg;
        let data = self.data;
        let it = self.state.iteration;
        let idx = batch_indices(self.batch_seed, data.len(), cfg.optim.batch_size, it);
        let x = data.images.select(Axis(0), &idx);
        let y: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let n = y.len();

        let decisions = match &self.teacher_probs {
            Some(all) => {
                let probs = ProbDist {
                    probs: all.select(Axis(0), &idx),
                };
                Some(gate(&probs, &y, cfg.gate.k)?)
            }
            None => None,
        };
        let passed: Vec<bool> = match &decisions {
            Some(d) => d.iter().map(|d| d.passed).collect(),
            None => vec![true; n],
        };
        let passed_count = passed.iter().filter(|&&p| p).count();
        for (&i, &p) in idx.iter().zip(&passed) {
            self.state.audit.record(p, data.noisy[i]);
        }

        let st = &mut self.state;
        let (emb, cache) = encode(&st.student.encoder, &x)?;
        guard_all(it, "embedding", &emb.vectors)?;
        let head = head_forward(&emb, &st.student.head)?;
        let top1 = top1_accuracy(&head.cosines, &y);
        let d = dloss(&cfg.loss, &AngleBatch::new(head.angles.clone(), y.clone())?);
        guard(it, "dloss", d.loss)?;

        let weight = cfg.gen.weight;
        let generated = if weight != 0.0 {
            let out = decode(&st.decoder, &emb)?;
            for (k, &yi) in y.iter().enumerate() {
                if passed[k] || !cfg.gen.update_passed_only {
                    st.targets[yi].update(yi, x.row(k))?;
                }
            }
            let mut target = x.clone();
            if cfg.gen.target == TargetMode::MomentumMean {
                for (k, &yi) in y.iter().enumerate() {
                    if st.targets[yi].initialized {
                        target.row_mut(k).assign(&st.targets[yi].image);
                    }
                }
            }
            let g = gloss(&out.images, &target, data.shape, &cfg.gen.ssim)?;
            guard(it, "gloss", g.loss)?;
            Some((out, g))
        } else {
            None
        };

        let mut grad_theta = d.grad_theta;
        let mut grad_pixels = generated.as_ref().map(|(_, g)| &g.grad * weight);
        if cfg.gate.scope == GateScope::FullSample {
            for (k, &p) in passed.iter().enumerate() {
                if !p {
                    grad_theta.row_mut(k).fill(0.0);
                    if let Some(gp) = grad_pixels.as_mut() {
                        gp.row_mut(k).fill(0.0);
                    }
                }
            }
        }
        let (mut grad_emb, grad_centers) = head_backward(&emb, &st.student.head, &head, &grad_theta);
        let decoder_grads = match (&generated, &grad_pixels) {
            (Some((out, _)), Some(gp)) => {
                let (grads, gx) = decoder_backward(&st.decoder, out, gp);
                grad_emb += &gx;
                Some(grads)
            }
            _ => None,
        };
        let grad_emb = match &decisions {
            Some(dec) => filter_gradients(dec, &grad_emb)?.0,
            None => grad_emb,
        };

        let gloss = generated.as_ref().map_or(0.0, |(_, g)| g.loss);
        let lr = lr_at(&self.sched, it);
        if passed_count > 0 {
            let opt = sgd(cfg);
            let enc_grads = encoder_backward(&st.student.encoder, &emb, &cache, &grad_emb);
            st.student_vel.step(&mut st.student.encoder, &enc_grads, lr, &opt);
            st.head_vel.step(&mut st.student.head.centers, &grad_centers, lr, &opt);
            st.student.head.renormalize();
            if let Some(grads) = decoder_grads {
                st.decoder_vel.step(&mut st.decoder, &grads, lr * cfg.optim.decoder_lr_scale, &opt);
            }
        }

        st.history.push(MetricRow {
            iteration: it,
            lr,
            dloss: d.loss,
            gloss,
            loss: d.loss + weight * gloss,
            gate_pass_rate: passed_count as f64 / n as f64,
            train_top1: top1,
        });
        st.iteration += 1;
        Ok(decisions.map(|decisions| GateRecord {
            iteration: it,
            sample_ids: idx,
            decisions,
        }))
    }

    /// Runs to the configured iteration budget. `on_gate` sees every gate record.
    pub fn run(&mut self, mut on_gate: impl FnMut(&GateRecord)) -> Result<()> {
        while !self.done() {
            if let Some(rec) = self.step()? {
                on_gate(&rec);
            }
        }
        Ok(())
    }
}

/// Student phase from scratch.
pub fn train_student(
    cfg: &ExperimentConfig,
    data: &TrainData,
    teacher: Option<&Classifier>,
) -> Result<TrainState> {
    let state = TrainState::init(cfg, data)?;
    let mut trainer = StudentTrainer::new(cfg, data, teacher, state)?;
    trainer.run(|_| {})?;
    Ok(trainer.state)
}

/// Held-out embeddings and their identities.
pub fn heldout_embeddings(student: &Classifier, dataset: &Dataset) -> Result<(Array2<f64>, Vec<usize>)> {
    let p = dataset.shape.pixels();
    let mut images = Array2::zeros((dataset.heldout.len(), p));
    for (mut row, s) in images.rows_mut().into_iter().zip(&dataset.heldout) {
        row.assign(&s.image);
    }
    let ids = dataset.heldout.iter().map(|s| s.true_id).collect();
    Ok((student.embed(&images)?, ids))
}

pub fn evaluate_student(cfg: &ExperimentConfig, student: &Classifier, dataset: &Dataset) -> Result<EvalReport> {
    let (emb, ids) = heldout_embeddings(student, dataset)?;
    evaluate(&emb, &ids, &cfg.eval)
}

/// Share of held-out identities whose decoded views are, on average, L1-closer
/// to their own base image than to the base image of a randomly drawn other
/// held-out identity.
pub fn reconstruction_audit(
    student: &Classifier,
    decoder: &NetParams,
    dataset: &Dataset,
    seed: u64,
) -> Result<f64> {
    use rand::Rng;
    let count = dataset.catalog.heldout.len();
    if count < 2 {
        return Err(LatseError::Empty("reconstruction audit needs two held-out identities".into()));
    }
    let (emb, ids) = heldout_embeddings(student, dataset)?;
    let emb = crate::net::EmbeddingBatch::normalize(&emb)?;
    let decoded = decode(decoder, &emb)?.images;
    let bases: Vec<_> = (0..count).map(|c| dataset.base_image(c)).collect();
    let mut r = rng::rng(seed);
    let mut wins = 0;
    for c in 0..count {
        let mut other = r.gen_range(0..count - 1);
        if other >= c {
            other += 1;
        }
        let rows: Vec<usize> = (0..ids.len()).filter(|&i| ids[i] == c).collect();
        let l1 = |base: &ndarray::Array1<f64>| {
            rows.iter()
                .map(|&i| (&decoded.row(i) - base).mapv(f64::abs).mean().unwrap())
                .sum::<f64>()
                / rows.len() as f64
        };
        if l1(&bases[c]) < l1(&bases[other]) {
            wins += 1;
        }
    }
    Ok(wins as f64 / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::DataConfig;

    pub(crate) fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data = DataConfig {
            train_identities: 5,
            train_views: 8,
            heldout_identities: 3,
            heldout_views: 4,
            height: 12,
            width: 12,
            blobs: 3,
            ..DataConfig::default()
        };
        cfg.net.hidden = vec![16];
        cfg.net.decoder_hidden = vec![16];
        cfg.net.embedding_dim = 8;
        cfg.optim.batch_size = 10;
        cfg.teacher_iterations = 30;
        cfg.student_iterations = 30;
        cfg.eval.same_pairs = 20;
        cfg.eval.different_pairs = 20;
        cfg
    }

    fn data(cfg: &ExperimentConfig) -> (Dataset, TrainData) {
        let ds = Dataset::generate(&cfg.data).unwrap();
        let td = TrainData::from_dataset(&ds);
        (ds, td)
    }

    #[test]
    fn batches_cover_each_epoch() {
        let mut seen = vec![0; 7];
        for it in 0..7 {
            for i in batch_indices(3, 7, 2, it) {
                seen[i] += 1;
            }
        }
        assert_eq!(seen, vec![2; 7]);
        assert_eq!(batch_indices(3, 7, 2, 4), batch_indices(3, 7, 2, 4));
    }

    #[test]
    fn zero_iteration_teacher_is_init() {
        let mut cfg = tiny_config();
        cfg.teacher_iterations = 0;
        let (_, td) = data(&cfg);
        let run = train_teacher(&cfg, &td).unwrap();
        assert_eq!(run.teacher, Classifier::init(&cfg, td.shape, td.num_classes, "teacher").unwrap());
        assert!(run.history.is_empty());
    }

    #[test]
    fn loss_is_sum_of_parts_and_centers_stay_unit() {
        let cfg = tiny_config();
        let (_, td) = data(&cfg);
        let teacher = train_teacher(&cfg, &td).unwrap().teacher;
        let mut trainer = StudentTrainer::new(&cfg, &td, Some(&teacher), TrainState::init(&cfg, &td).unwrap()).unwrap();
        while !trainer.done() {
            trainer.step().unwrap();
            for row in trainer.state.student.head.centers.rows() {
                assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-9);
            }
        }
        for row in &trainer.state.history {
            assert!((row.loss - (row.dloss + row.gloss)).abs() <= 1e-12);
        }
    }

    #[test]
    fn resume_matches_straight_run() {
        let cfg = tiny_config();
        let (_, td) = data(&cfg);
        let teacher = train_teacher(&cfg, &td).unwrap().teacher;
        let straight = train_student(&cfg, &td, Some(&teacher)).unwrap();
        let mut first = StudentTrainer::new(&cfg, &td, Some(&teacher), TrainState::init(&cfg, &td).unwrap()).unwrap();
        for _ in 0..12 {
            first.step().unwrap();
        }
        let snapshot = first.state.clone();
        let mut second = StudentTrainer::new(&cfg, &td, Some(&teacher), snapshot).unwrap();
        second.run(|_| {}).unwrap();
        assert_eq!(second.state, straight);
    }

    #[test]
    fn teacher_required_when_gating() {
        let cfg = tiny_config();
        let (_, td) = data(&cfg);
        let st = TrainState::init(&cfg, &td).unwrap();
        assert!(StudentTrainer::new(&cfg, &td, None, st).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let mut cfg = tiny_config();
        cfg.optim.lr = 1e200;
        cfg.optim.momentum = 0.0;
        let (_, td) = data(&cfg);
        let err = train_teacher(&cfg, &td).unwrap_err();
        assert!(
            matches!(err, LatseError::Diverged { .. } | LatseError::DegenerateEmbedding { .. }),
            "{err}"
        );
    }

    #[test]
    fn metrics_csv_intervals() {
        let rows: Vec<MetricRow> = (0..7)
            .map(|i| MetricRow {
                iteration: i,
                lr: 0.1,
                dloss: 1.0,
                gloss: 0.5,
                loss: 1.5,
                gate_pass_rate: 1.0,
                train_top1: 0.25,
            })
            .collect();
        let csv = metrics_csv(&rows, 3, "h");
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[1], METRICS_HEADER);
        assert_eq!(lines.len(), 2 + 3);
        assert_eq!(lines[2], "0,0.1,1,0.5,1.5,1,0.25");
    }
}
