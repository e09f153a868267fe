//! End-to-end runs and their on-disk artifacts.
//!
//! A run directory holds `config.toml`, the teacher/student/decoder
//! checkpoints, `metrics.csv`, `teacher_metrics.csv`, `gate_log.csv`,
//! `eval.csv`, `panel.pgm` and `summary.toml`. Every text artifact carries the
//! config hash.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{LatseError, Result};
use crate::eval::EvalReport;
use crate::generator::decode;
use crate::net::{read_checkpoint, write_checkpoint, Checkpoint, EmbeddingBatch, NetParams};
use crate::pgm::{tile, write_pgm};
use crate::synth::Dataset;
use crate::trainer::{
    evaluate_student, metrics_csv, reconstruction_audit, split_top1, train_teacher, Classifier, GateRecord,
    StudentTrainer, TeacherRun, TrainData, TrainState,
};

pub const STATE_MAGIC: &[u8; 6] = b"LATSES";
const STATE_VERSION: u32 = 1;
const PANEL_IDENTITIES: usize = 8;

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn all_buffers(st: &TrainState) -> Vec<&[f64]> {
    let mut out = Vec::new();
    for l in st.student.encoder.layers.iter().chain(&st.decoder.layers) {
        out.push(slice(&l.weight));
        out.push(l.bias.as_slice().expect("contiguous"));
    }
    out.push(slice(&st.student.head.centers));
    for l in st.student_vel.layers.iter().chain(&st.decoder_vel.layers) {
        out.push(slice(&l.weight));
        out.push(l.bias.as_slice().expect("contiguous"));
    }
    out.push(slice(&st.head_vel.0));
    for t in &st.targets {
        out.push(t.image.as_slice().expect("contiguous"));
    }
    out
}

fn all_buffers_mut(st: &mut TrainState) -> Vec<&mut [f64]> {
    let mut out: Vec<&mut [f64]> = Vec::new();
    for l in st.student.encoder.layers.iter_mut().chain(st.decoder.layers.iter_mut()) {
        out.push(l.weight.as_slice_mut().expect("standard layout"));
        out.push(l.bias.as_slice_mut().expect("contiguous"));
    }
    out.push(st.student.head.centers.as_slice_mut().expect("standard layout"));
    for l in st.student_vel.layers.iter_mut().chain(st.decoder_vel.layers.iter_mut()) {
        out.push(l.weight.as_slice_mut().expect("standard layout"));
        out.push(l.bias.as_slice_mut().expect("contiguous"));
    }
    out.push(st.head_vel.0.as_slice_mut().expect("standard layout"));
    for t in st.targets.iter_mut() {
        out.push(t.image.as_slice_mut().expect("contiguous"));
    }
    out
}

/// Serializes the full student-phase state, little-endian.
pub fn state_bytes(st: &TrainState, tag: [u8; 8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(STATE_MAGIC);
    out.extend_from_slice(&STATE_VERSION.to_le_bytes());
    out.extend_from_slice(&tag);
    let u = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u64).to_le_bytes());
    u(&mut out, st.iteration);
    u(&mut out, st.history.len());
    for r in &st.history {
        u(&mut out, r.iteration);
        for v in [r.lr, r.dloss, r.gloss, r.loss, r.gate_pass_rate, r.train_top1] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let a = &st.audit;
    for v in [a.samples, a.noisy, a.rejected, a.rejected_noisy, a.rejected_clean] {
        u(&mut out, v);
    }
    u(&mut out, st.targets.len());
    out.extend(st.targets.iter().map(|t| u8::from(t.initialized)));
    for buf in all_buffers(st) {
        for v in buf {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| "truncated state file".to_string())?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> std::result::Result<usize, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Restores a state written by [`state_bytes`] into a freshly initialized
/// `template`, which fixes every shape.
pub fn parse_state(bytes: &[u8], mut template: TrainState, tag: [u8; 8]) -> std::result::Result<TrainState, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(6)? != STATE_MAGIC {
        return Err("bad magic".into());
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != STATE_VERSION {
        return Err(format!("unsupported state version {version}"));
    }
    if r.take(8)? != tag {
        return Err("state was written under a different config".into());
    }
    let st = &mut template;
    st.iteration = r.u64()?;
    let rows = r.u64()?;
    st.history.clear();
    for _ in 0..rows {
        st.history.push(crate::trainer::MetricRow {
            iteration: r.u64()?,
            lr: r.f64()?,
            dloss: r.f64()?,
            gloss: r.f64()?,
            loss: r.f64()?,
            gate_pass_rate: r.f64()?,
            train_top1: r.f64()?,
        });
    }
    st.audit.samples = r.u64()?;
    st.audit.noisy = r.u64()?;
    st.audit.rejected = r.u64()?;
    st.audit.rejected_noisy = r.u64()?;
    st.audit.rejected_clean = r.u64()?;
    if r.u64()? != st.targets.len() {
        return Err("identity count mismatch".into());
    }
    let flags = r.take(st.targets.len())?;
    for (t, &f) in st.targets.iter_mut().zip(flags) {
        t.initialized = f != 0;
    }
    for buf in all_buffers_mut(st) {
        for v in buf.iter_mut() {
            *v = r.f64()?;
        }
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(template)
}

/// Headline numbers of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: String,
    pub seed: u64,
    pub data_seed: u64,
    pub config_hash: String,
    pub iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_train_top1: Option<f64>,
    pub verification_accuracy: f64,
    pub verification_threshold: f64,
    pub rank1: f64,
    pub final_dloss: f64,
    pub final_gloss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gloss_at_10: Option<f64>,
    pub gate_pass_rate: f64,
    pub gate_precision: f64,
    pub gate_recall: f64,
    pub gate_false_rejection_rate: f64,
    /// Share of held-out identities reconstructed closer to their own base.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reconstruction_own_closer: Option<f64>,
}

/// Ablation label of a config: loss family plus `+ts` and `+gen` components.
pub fn variant_label(cfg: &ExperimentConfig) -> String {
    let mut s = crate::margin::family_name(cfg.loss.family).to_string();
    if cfg.gate.k > 0 {
        s.push_str("+ts");
    }
    if cfg.gen.weight > 0.0 {
        s.push_str("+gen");
    }
    s
}

/// Everything a run produced, in memory.
#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub summary: RunSummary,
    pub teacher: Option<TeacherRun>,
    pub state: TrainState,
    pub eval: Option<EvalReport>,
    pub dataset: Dataset,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Continue from `state.bin` in the output directory.
    pub resume: bool,
    /// Stop once this many student iterations are done and save `state.bin`.
    pub stop_after: Option<usize>,
}

fn ckpt(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.ckpt"))
}

fn load_network(path: &Path) -> Result<(NetParams, [u8; 8])> {
    match read_checkpoint(path)? {
        (Checkpoint::Network(n), tag) => Ok((n, tag)),
        _ => Err(LatseError::Checkpoint {
            path: path.to_path_buf(),
            reason: "expected a network checkpoint".into(),
        }),
    }
}

fn load_centers(path: &Path) -> Result<(crate::net::ClassifierWeights, [u8; 8])> {
    match read_checkpoint(path)? {
        (Checkpoint::Centers(c), tag) => Ok((c, tag)),
        _ => Err(LatseError::Checkpoint {
            path: path.to_path_buf(),
            reason: "expected a centers checkpoint".into(),
        }),
    }
}

/// Loads `<prefix>_encoder.ckpt` and `<prefix>_centers.ckpt`.
pub fn load_classifier(dir: &Path, prefix: &str, tag: Option<[u8; 8]>) -> Result<Classifier> {
    let enc_path = ckpt(dir, &format!("{prefix}_encoder"));
    let (encoder, t1) = load_network(&enc_path)?;
    let (head, t2) = load_centers(&ckpt(dir, &format!("{prefix}_centers")))?;
    if let Some(tag) = tag {
        if t1 != tag || t2 != tag {
            return Err(LatseError::Checkpoint {
                path: enc_path,
                reason: "checkpoint config tag does not match the config".into(),
            });
        }
    }
    Ok(Classifier { encoder, head })
}

fn save_classifier(dir: &Path, prefix: &str, c: &Classifier, tag: [u8; 8]) -> Result<()> {
    write_checkpoint(&ckpt(dir, &format!("{prefix}_encoder")), &Checkpoint::Network(c.encoder.clone()), tag)?;
    write_checkpoint(&ckpt(dir, &format!("{prefix}_centers")), &Checkpoint::Centers(c.head.clone()), tag)
}

const GATE_LOG_HEADER: &str = "iteration,sample_id,label,passed,teacher_top1";

fn gate_lines(rec: &GateRecord, out: &mut String) {
    for (id, d) in rec.sample_ids.iter().zip(&rec.decisions) {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            rec.iteration,
            id,
            d.label,
            u8::from(d.passed),
            d.teacher_top1()
        );
    }
}

/// Decodes the student's embeddings of `images`.
pub fn reconstruct(student: &Classifier, decoder: &NetParams, images: &Array2<f64>) -> Result<Array2<f64>> {
    let emb = EmbeddingBatch::normalize(&student.embed(images)?)?;
    Ok(decode(decoder, &emb)?.images)
}

/// Input, generated and |difference| rows for the first held-out identities.
pub fn panel(student: &Classifier, decoder: &NetParams, dataset: &Dataset) -> Result<(usize, usize, Vec<f64>)> {
    let mut picks = Vec::new();
    for (i, s) in dataset.heldout.iter().enumerate() {
        if picks.len() == PANEL_IDENTITIES {
            break;
        }
        if !picks.iter().any(|&j: &usize| dataset.heldout[j].true_id == s.true_id) {
            picks.push(i);
        }
    }
    let p = dataset.shape.pixels();
    let mut input = Array2::zeros((picks.len(), p));
    for (mut row, &i) in input.rows_mut().into_iter().zip(&picks) {
        row.assign(&dataset.heldout[i].image);
    }
    let generated = reconstruct(student, decoder, &input)?;
    let diff = (&input - &generated).mapv(f64::abs);
    let row_of = |m: &Array2<f64>| -> Vec<Vec<f64>> { m.rows().into_iter().map(|r| r.to_vec()).collect() };
    let (a, b, c) = (row_of(&input), row_of(&generated), row_of(&diff));
    let rows: Vec<Vec<&[f64]>> = [&a, &b, &c]
        .iter()
        .map(|r| r.iter().map(Vec::as_slice).collect())
        .collect();
    Ok(tile(&rows, dataset.shape.width, dataset.shape.height, 1.0))
}

/// Trains (or restores) and evaluates one configuration, writing every
/// artifact under `cfg.out_dir`. `teacher` may supply an already trained
/// teacher for this exact config.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    opts: RunOptions,
    teacher: Option<&TeacherRun>,
) -> Result<ExperimentRun> {
    cfg.validate()?;
    let dir = cfg.out_dir.clone();
    fs::create_dir_all(&dir)?;
    let hash = cfg.short_hash();
    let tag = cfg.hash_tag();
    cfg.save(&dir.join("config.toml"))?;

    let dataset = Dataset::generate(&cfg.data)?;
    let data = TrainData::from_dataset(&dataset);

    let teacher_run = if cfg.gate.k == 0 {
        None
    } else if let Some(t) = teacher {
        Some(t.clone())
    } else if opts.resume && ckpt(&dir, "teacher_encoder").exists() {
        let t = load_classifier(&dir, "teacher", Some(tag))?;
        Some(TeacherRun {
            train_top1: split_top1(&t, &data)?,
            history: Vec::new(),
            teacher: t,
        })
    } else {
        Some(train_teacher(cfg, &data)?)
    };
    if let Some(t) = &teacher_run {
        save_classifier(&dir, "teacher", &t.teacher, tag)?;
        if !t.history.is_empty() {
            fs::write(dir.join("teacher_metrics.csv"), metrics_csv(&t.history, cfg.log_interval, &hash))?;
        }
    }

    let state_path = dir.join("state.bin");
    let state = if opts.resume {
        let bytes = fs::read(&state_path).map_err(|e| LatseError::Checkpoint {
            path: state_path.clone(),
            reason: e.to_string(),
        })?;
        parse_state(&bytes, TrainState::init(cfg, &data)?, tag).map_err(|reason| LatseError::Checkpoint {
            path: state_path.clone(),
            reason,
        })?
    } else {
        TrainState::init(cfg, &data)?
    };

    let gate_path = dir.join("gate_log.csv");
    let mut gate_log = if opts.resume && gate_path.exists() {
        fs::read_to_string(&gate_path)?
    } else {
        format!("# config_hash = {hash}\n{GATE_LOG_HEADER}\n")
    };
    let mut trainer = StudentTrainer::new(cfg, &data, teacher_run.as_ref().map(|t| &t.teacher), state)?;
    let stop = opts.stop_after.unwrap_or(usize::MAX).min(cfg.student_iterations);
    while trainer.state.iteration < stop {
        if let Some(rec) = trainer.step()? {
            if rec.iteration % cfg.log_interval == 0 {
                gate_lines(&rec, &mut gate_log);
            }
        }
    }
    let state = trainer.state;
    if cfg.gate.k > 0 {
        fs::write(&gate_path, &gate_log)?;
    }
    let interval = cfg.log_interval;
    fs::write(dir.join("metrics.csv"), metrics_csv(&state.history, interval, &hash))?;

    let finished = state.iteration >= cfg.student_iterations;
    if !finished {
        fs::write(&state_path, state_bytes(&state, tag))?;
    } else if state_path.exists() {
        fs::remove_file(&state_path)?;
    }
    save_classifier(&dir, "student", &state.student, tag)?;
    write_checkpoint(&ckpt(&dir, "decoder"), &Checkpoint::Network(state.decoder.clone()), tag)?;

    let eval = if finished {
        let report = evaluate_student(cfg, &state.student, &dataset)?;
        fs::write(dir.join("eval.csv"), report.to_csv(cfg.seed, &hash))?;
        Some(report)
    } else {
        None
    };
    let recon = if finished && cfg.gen.weight > 0.0 {
        let (w, h, px) = panel(&state.student, &state.decoder, &dataset)?;
        write_pgm(&dir.join("panel.pgm"), w, h, &px, &hash)?;
        Some(reconstruction_audit(&state.student, &state.decoder, &dataset, cfg.eval.seed)?)
    } else {
        None
    };

    let last = state.history.last();
    let summary = RunSummary {
        variant: variant_label(cfg),
        seed: cfg.seed,
        data_seed: cfg.data.seed,
        config_hash: cfg.hash(),
        iterations: state.iteration,
        teacher_train_top1: teacher_run.as_ref().map(|t| t.train_top1),
        verification_accuracy: eval.map_or(f64::NAN, |e| e.verification.accuracy),
        verification_threshold: eval.map_or(f64::NAN, |e| e.verification.threshold),
        rank1: eval.map_or(f64::NAN, |e| e.rank1),
        final_dloss: last.map_or(f64::NAN, |r| r.dloss),
        final_gloss: last.map_or(f64::NAN, |r| r.gloss),
        gloss_at_10: state.history.get(10).map(|r| r.gloss),
        gate_pass_rate: state.audit.pass_rate(),
        gate_precision: state.audit.precision(),
        gate_recall: state.audit.recall(),
        gate_false_rejection_rate: state.audit.false_rejection_rate(),
        reconstruction_own_closer: recon,
    };
    if finished {
        let text = toml::to_string(&summary).map_err(|e| LatseError::Config(e.to_string()))?;
        fs::write(dir.join("summary.toml"), text)?;
    }
    Ok(ExperimentRun {
        summary,
        teacher: teacher_run,
        state,
        eval,
        dataset,
    })
}

pub fn load_summary(dir: &Path) -> Result<RunSummary> {
    let path = dir.join("summary.toml");
    let text = fs::read_to_string(&path)
        .map_err(|e| LatseError::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| LatseError::Config(format!("{}: {e}", path.display())))
}

/// The four-way component ablation derived from `base`: margin loss alone,
/// with the teacher gate, with the generative branch, and with both.
pub fn ablation_grid(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let k = base.gate.k.max(1);
    let w = if base.gen.weight > 0.0 { base.gen.weight } else { 1.0 };
    [(0, 0.0), (k, 0.0), (0, w), (k, w)]
        .into_iter()
        .map(|(k, w)| {
            let mut c = base.clone();
            c.gate.k = k;
            c.gen.weight = w;
            c.out_dir = base.out_dir.join(variant_label(&c).replace('+', "_"));
            c
        })
        .collect()
}

fn worker_count(requested: usize, jobs: usize) -> usize {
    requested.max(1).min(jobs.max(1))
}

fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..worker_count(threads, items.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|s| s.expect("every job ran"))
        .collect()
}

/// Runs the ablation grid for every seed. Teachers are trained once per seed
/// and shared by the gated variants. Runs land in
/// `<out>/<variant>/seed<N>`.
pub fn run_ablation(base: &ExperimentConfig, seeds: &[u64], threads: usize) -> Result<Vec<ExperimentRun>> {
    let seeded: Vec<ExperimentConfig> = seeds
        .iter()
        .map(|&s| {
            let mut c = base.clone();
            c.seed = s;
            c.data.seed = s;
            c
        })
        .collect();
    let teachers = parallel_map(&seeded, threads, |c| {
        let mut t = c.clone();
        t.gate.k = t.gate.k.max(1);
        let data = TrainData::from_dataset(&Dataset::generate(&t.data)?);
        train_teacher(&t, &data)
    })?;
    let mut jobs = Vec::new();
    for (si, c) in seeded.iter().enumerate() {
        for mut v in ablation_grid(c) {
            v.out_dir = v.out_dir.join(format!("seed{}", c.seed));
            jobs.push((si, v));
        }
    }
    parallel_map(&jobs, threads, |(si, v)| {
        run_experiment(v, RunOptions::default(), Some(&teachers[*si]))
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Side-by-side table of finished runs, one row per variant in order of first
/// appearance. Refuses runs whose variants were trained on different data
/// seeds.
pub fn tabulate(runs: &[RunSummary]) -> Result<String> {
    if runs.is_empty() {
        return Err(LatseError::Empty("no runs to compare".into()));
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<&RunSummary>> = BTreeMap::new();
    for r in runs {
        if !groups.contains_key(&r.variant) {
            order.push(r.variant.clone());
        }
        groups.entry(r.variant.clone()).or_default().push(r);
    }
    let seeds_of = |v: &str| {
        let mut s: Vec<u64> = groups[v].iter().map(|r| r.data_seed).collect();
        s.sort_unstable();
        s
    };
    let reference = seeds_of(&order[0]);
    for v in &order[1..] {
        let s = seeds_of(v);
        if s != reference {
            return Err(LatseError::Config(format!(
                "data seeds differ between `{}` {:?} and `{v}` {s:?}",
                order[0], reference
            )));
        }
    }
    let mut out = String::from(
        "variant,runs,data_seeds,mean_verification,mean_rank1,verification_per_seed,config_hashes\n",
    );
    for v in &order {
        let mut rs = groups[v].clone();
        rs.sort_by_key(|r| r.data_seed);
        let ver: Vec<f64> = rs.iter().map(|r| r.verification_accuracy).collect();
        let r1: Vec<f64> = rs.iter().map(|r| r.rank1).collect();
        let join = |it: Vec<String>| it.join(";");
        let _ = writeln!(
            out,
            "{v},{},{},{:.6},{:.6},{},{}",
            rs.len(),
            join(rs.iter().map(|r| r.data_seed.to_string()).collect()),
            mean(&ver),
            mean(&r1),
            join(ver.iter().map(|x| format!("{x:.4}")).collect()),
            join(rs.iter().map(|r| r.config_hash[..16].to_string()).collect()),
        );
    }
    Ok(out)
}

/// Per-variant mean verification accuracy from a table of summaries.
pub fn mean_verification(runs: &[RunSummary], variant: &str) -> Option<f64> {
    let v: Vec<f64> = runs
        .iter()
        .filter(|r| r.variant == variant)
        .map(|r| r.verification_accuracy)
        .collect();
    (!v.is_empty()).then(|| mean(&v))
}

/// Held-out images stacked row-wise, with their identities.
pub fn heldout_matrix(dataset: &Dataset) -> (Array2<f64>, Vec<usize>) {
    let mut m = Array2::zeros((dataset.heldout.len(), dataset.shape.pixels()));
    for (mut row, s) in m.axis_iter_mut(Axis(0)).zip(&dataset.heldout) {
        row.assign(&s.image);
    }
    (m, dataset.heldout.iter().map(|s| s.true_id).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::DataConfig;

    fn tiny(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data = DataConfig {
            train_identities: 4,
            train_views: 6,
            heldout_identities: 3,
            heldout_views: 3,
            height: 10,
            width: 10,
            blobs: 3,
            ..DataConfig::default()
        };
        cfg.net.hidden = vec![12];
        cfg.net.decoder_hidden = vec![12];
        cfg.net.embedding_dim = 6;
        cfg.optim.batch_size = 8;
        cfg.teacher_iterations = 15;
        cfg.student_iterations = 20;
        cfg.log_interval = 5;
        cfg.eval.same_pairs = 10;
        cfg.eval.different_pairs = 10;
        cfg.out_dir = dir.to_path_buf();
        cfg
    }

    #[test]
    fn state_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let run = run_experiment(&cfg, RunOptions { resume: false, stop_after: Some(7) }, None).unwrap();
        let bytes = fs::read(dir.path().join("state.bin")).unwrap();
        let data = TrainData::from_dataset(&run.dataset);
        let back = parse_state(&bytes, TrainState::init(&cfg, &data).unwrap(), cfg.hash_tag()).unwrap();
        assert_eq!(back, run.state);
        assert!(parse_state(&bytes, TrainState::init(&cfg, &data).unwrap(), [0; 8]).is_err());
        assert!(parse_state(&bytes[..bytes.len() - 1], TrainState::init(&cfg, &data).unwrap(), cfg.hash_tag()).is_err());
    }

    #[test]
    fn resumed_run_matches_straight_run() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let straight = run_experiment(&tiny(a.path()), RunOptions::default(), None).unwrap();
        let cfg = tiny(b.path());
        run_experiment(&cfg, RunOptions { resume: false, stop_after: Some(9) }, None).unwrap();
        let resumed = run_experiment(&cfg, RunOptions { resume: true, stop_after: None }, None).unwrap();
        assert_eq!(resumed.state, straight.state);
        for f in ["metrics.csv", "student_encoder.ckpt", "decoder.ckpt", "eval.csv", "gate_log.csv"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        assert!(!b.path().join("state.bin").exists());
    }

    #[test]
    fn tabulate_refuses_mismatched_seeds() {
        let s = |variant: &str, data_seed| RunSummary {
            variant: variant.into(),
            seed: 1,
            data_seed,
            config_hash: "0123456789abcdef0123".into(),
            iterations: 1,
            teacher_train_top1: None,
            verification_accuracy: 0.9,
            verification_threshold: 0.5,
            rank1: 0.8,
            final_dloss: 1.0,
            final_gloss: 0.5,
            gloss_at_10: None,
            gate_pass_rate: 1.0,
            gate_precision: 0.0,
            gate_recall: 0.0,
            gate_false_rejection_rate: 0.0,
            reconstruction_own_closer: None,
        };
        let table = tabulate(&[s("linear", 1), s("linear+ts", 1), s("linear", 2), s("linear+ts", 2)]).unwrap();
        assert_eq!(table.lines().count(), 3);
        assert!(table.lines().nth(1).unwrap().starts_with("linear,2,1;2,0.900000,0.800000"));
        assert!(tabulate(&[s("linear", 1), s("linear+ts", 2)]).is_err());
        assert!(tabulate(&[]).is_err());
    }

    #[test]
    fn grid_labels() {
        let cfg = ExperimentConfig::default();
        let labels: Vec<String> = ablation_grid(&cfg).iter().map(variant_label).collect();
        assert_eq!(labels, ["linear", "linear+ts", "linear+gen", "linear+ts+gen"]);
    }

    #[test]
    fn parallel_map_keeps_order() {
        let v: Vec<usize> = (0..20).collect();
        let out = parallel_map(&v, 3, |&x| Ok(x * 2)).unwrap();
        assert_eq!(out, (0..20).map(|x| x * 2).collect::<Vec<_>>());
    }
}
