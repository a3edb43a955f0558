//! Teacher-student training: source pre-training, the joint MTOR step
//! (supervised loss + λ·consistency, SGD on the student, EMA teacher),
//! metrics JSONL, versioned checkpoints, and resume.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mtor_core::boxes::BoxCorners;
use mtor_core::consistency::{
    consistency_forward, ConsistencyBreakdown, LossFlags, StudentOutputs, TeacherOutputs,
};
use mtor_core::detector::{
    anchor_grid, forward_backbone, rcnn_classify, rcnn_forward, roi_cells, rpn_forward,
    rpn_propose, supervised_loss, ArchConfig, DetectorVars, DetectorWeights, ProposalParams,
    SupLossBreakdown, SupLossParams,
};
use mtor_core::ema::{ModelPair, SgdParams};
use mtor_core::tape::Tape;
use mtor_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, TrainConfig};
use crate::dataset::{augment_pair, DomainSample};

/// Per-step RNG derived from (seed, phase, step) so interrupted runs resume
/// onto the identical random stream.
pub fn step_rng(seed: u64, phase: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ phase.wrapping_mul(0xA076_1D64_78BD_642F));
    rng.set_stream(step);
    rng
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct StepMetrics {
    pub step: u64,
    pub l_sup: f64,
    pub rcl: f64,
    pub egl: f64,
    pub agl: f64,
    pub total: f64,
    pub survivors: usize,
    pub lr: f64,
}

fn image_tensor(image: &[f64], size: usize) -> Tensor {
    Tensor::new(&[3, size, size], image.to_vec())
}

fn collect_flat_grad(
    tape: &Tape,
    grads: &mtor_core::tape::Grads,
    vars: &DetectorVars,
    n_params: usize,
) -> Vec<f64> {
    let mut flat = Vec::with_capacity(n_params);
    for &v in &vars.vars {
        match grads.get(v) {
            Some(g) => flat.extend_from_slice(g.data()),
            None => flat.extend(std::iter::repeat(0.0).take(tape.value(v).len())),
        }
    }
    flat
}

fn sgd_params(t: &TrainConfig) -> SgdParams {
    SgdParams { lr: t.lr, momentum: t.momentum, weight_decay: t.weight_decay }
}

fn gts_of(sample: &DomainSample) -> Vec<(BoxCorners, usize)> {
    sample.boxes.iter().map(|b| (b.rect, b.category)).collect()
}

/// Student forward + supervised loss on one labeled sample; returns the loss
/// var (on `tape`) and the per-head breakdown.
fn supervised_branch(
    tape: &mut Tape,
    vars: &DetectorVars,
    arch: &ArchConfig,
    props: &ProposalParams,
    sample: &DomainSample,
) -> (mtor_core::tape::Var, SupLossBreakdown) {
    let img = tape.constant(image_tensor(&sample.image, sample.size));
    let fm = forward_backbone(tape, vars, img);
    let (hf, wf) = {
        let s = tape.value(fm).shape();
        (s[1], s[2])
    };
    let (obj, deltas) = rpn_forward(tape, vars, fm);
    let anchors = anchor_grid(arch, hf, wf);
    let proposals = rpn_propose(arch, &anchors, tape.value(obj), tape.value(deltas), props);
    let mut rects: Vec<BoxCorners> = proposals.iter().map(|p| p.rect).collect();
    // make sure every GT participates in the RCNN heads even early in
    // training when the RPN is still random
    for (g, _) in gts_of(sample) {
        rects.push(g);
    }
    let cells = roi_cells(&rects, hf, wf, arch.roi_grid);
    let pooled = tape.roi_avg_pool(fm, cells, arch.roi_grid);
    let (logits, _, reg) = rcnn_forward(tape, vars, pooled);
    supervised_loss(
        tape,
        &anchors,
        obj,
        deltas,
        &rects,
        logits,
        reg,
        &gts_of(sample),
        &SupLossParams::default(),
    )
}

/// Consistency branch per Eq. 3–4: teacher forward (constants) on the
/// teacher view produces proposals, predictions, and features; student
/// forward on the student view reuses the SAME proposal coordinates.
#[allow(clippy::too_many_arguments)]
fn consistency_branch(
    tape: &mut Tape,
    student_vars: &DetectorVars,
    pair: &ModelPair,
    arch: &ArchConfig,
    props: &ProposalParams,
    student_view: &[f64],
    teacher_view: &[f64],
    size: usize,
    epsilon: f64,
    flags: &LossFlags,
) -> (Option<mtor_core::tape::Var>, ConsistencyBreakdown) {
    let teacher_vars = DetectorVars::constants(tape, &pair.teacher);
    let timg = tape.constant(image_tensor(teacher_view, size));
    let tfm = forward_backbone(tape, &teacher_vars, timg);
    let (hf, wf) = {
        let s = tape.value(tfm).shape();
        (s[1], s[2])
    };
    let (tobj, tdeltas) = rpn_forward(tape, &teacher_vars, tfm);
    let anchors = anchor_grid(arch, hf, wf);
    let proposals = rpn_propose(arch, &anchors, tape.value(tobj), tape.value(tdeltas), props);
    if proposals.is_empty() {
        return (None, ConsistencyBreakdown::default());
    }
    let rects: Vec<BoxCorners> = proposals.iter().map(|p| p.rect).collect();
    let cells = roi_cells(&rects, hf, wf, arch.roi_grid);
    let tpooled = tape.roi_avg_pool(tfm, cells.clone(), arch.roi_grid);
    let (_, tdist, _) = rcnn_forward(tape, &teacher_vars, tpooled);
    let teacher = TeacherOutputs {
        preds: rcnn_classify(tape.value(tdist)),
        features: tape.value(tpooled).clone(),
    };

    let simg = tape.constant(image_tensor(student_view, size));
    let sfm = forward_backbone(tape, student_vars, simg);
    let spooled = tape.roi_avg_pool(sfm, cells, arch.roi_grid);
    let (_, sdist, _) = rcnn_forward(tape, student_vars, spooled);
    let student = StudentOutputs { dists: sdist, features: spooled };
    consistency_forward(tape, &teacher, &student, epsilon, flags)
}

/// One joint MTOR training step (Eq. 10): supervised on the source sample,
/// consistency on the target pair, SGD on the student, EMA on the teacher.
pub fn train_step(
    pair: &mut ModelPair,
    source: &DomainSample,
    student_view: &[f64],
    teacher_view: &[f64],
    view_size: usize,
    cfg: &TrainConfig,
    props: &ProposalParams,
    flags: &LossFlags,
    step: u64,
) -> StepMetrics {
    let arch = pair.student.arch.clone();
    let mut tape = Tape::new();
    let svars = DetectorVars::leaves(&mut tape, &pair.student);
    let (sup, sup_bd) = supervised_branch(&mut tape, &svars, &arch, props, source);

    let mut total = sup;
    let mut cons_bd = ConsistencyBreakdown::default();
    // λ=0 skips the branch entirely so the update is bitwise identical to a
    // supervised-only step
    if cfg.lambda > 0.0 {
        let (cons, bd) = consistency_branch(
            &mut tape,
            &svars,
            pair,
            &arch,
            props,
            student_view,
            teacher_view,
            view_size,
            cfg.epsilon,
            flags,
        );
        cons_bd = bd;
        if let Some(c) = cons {
            let scaled = tape.scale(c, cfg.lambda);
            total = tape.add(total, scaled);
        }
    }

    let total_val = tape.value(total).item();
    let grads = tape.backward(total);
    let flat = collect_flat_grad(&tape, &grads, &svars, pair.student.num_params());
    pair.sgd_step(&flat, &sgd_params(cfg));
    pair.ema_update();

    StepMetrics {
        step,
        l_sup: sup_bd.total(),
        rcl: cons_bd.rcl,
        egl: cons_bd.egl,
        agl: cons_bd.agl,
        total: total_val,
        survivors: cons_bd.surviving_regions,
        lr: cfg.lr,
    }
}

/// One supervised-only step (pre-training / Source-only baseline).
pub fn supervised_step(
    pair: &mut ModelPair,
    source: &DomainSample,
    cfg: &TrainConfig,
    props: &ProposalParams,
    step: u64,
) -> StepMetrics {
    let arch = pair.student.arch.clone();
    let mut tape = Tape::new();
    let svars = DetectorVars::leaves(&mut tape, &pair.student);
    let (sup, sup_bd) = supervised_branch(&mut tape, &svars, &arch, props, source);
    let total_val = tape.value(sup).item();
    let grads = tape.backward(sup);
    let flat = collect_flat_grad(&tape, &grads, &svars, pair.student.num_params());
    pair.sgd_step(&flat, &sgd_params(cfg));
    StepMetrics { step, l_sup: sup_bd.total(), total: total_val, lr: cfg.lr, ..Default::default() }
}

// ---------- checkpoints ----------

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub phase: String,
    pub step: u64,
    pub student: Vec<f64>,
    pub teacher: Vec<f64>,
    pub momentum: Vec<f64>,
    pub ema_step: u64,
}

impl Checkpoint {
    pub fn of(pair: &ModelPair, config_hash: &str, phase: &str, step: u64) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.to_string(),
            phase: phase.to_string(),
            step,
            student: pair.student.flat(),
            teacher: pair.teacher.flat(),
            momentum: pair.momentum_buf.clone(),
            ema_step: pair.step,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        fs::write(path, json).with_context(|| format!("writing checkpoint {}", path.display()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading checkpoint {}", path.display()))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .with_context(|| format!("parsing checkpoint {}", path.display()))?;
        if ckpt.version != CHECKPOINT_VERSION {
            bail!("unsupported checkpoint version {} in {}", ckpt.version, path.display());
        }
        Ok(ckpt)
    }

    pub fn restore(&self, arch: ArchConfig, alpha: f64) -> ModelPair {
        let student = DetectorWeights::from_flat(arch.clone(), &self.student);
        let mut pair = ModelPair::new(student, alpha);
        pair.teacher = DetectorWeights::from_flat(arch, &self.teacher);
        pair.momentum_buf = self.momentum.clone();
        pair.step = self.ema_step;
        pair
    }
}

// ---------- run loop ----------

pub struct MetricsWriter {
    file: fs::File,
}

impl MetricsWriter {
    pub fn append(path: &Path) -> Result<Self> {
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .with_context(|| format!("opening metrics log {}", path.display()))?;
        Ok(Self { file })
    }

    pub fn write(&mut self, m: &StepMetrics) -> Result<()> {
        let line = serde_json::to_string(m)?;
        writeln!(self.file, "{line}")?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).with_context(|| format!("bad metrics line: {l}")))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    SourceOnly,
    Mtor,
}

#[derive(Debug)]
pub struct RunOutputs {
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
}

fn proposal_params(cfg: &ExperimentConfig) -> ProposalParams {
    ProposalParams {
        cap: cfg.detector.proposal_cap_train,
        nms_iou: cfg.detector.rpn_nms_iou,
        min_size: 4.0,
    }
}

/// Pre-train on labeled source data, then (for the MTOR variant) adapt with
/// the consistency losses. Writes metrics JSONL and periodic + final
/// checkpoints into `run_dir`. When `resume` is set, continues from the
/// latest checkpoint in the directory.
pub fn run_training(
    cfg: &ExperimentConfig,
    source: &[DomainSample],
    target: &[DomainSample],
    variant: Variant,
    flags: &LossFlags,
    run_dir: &Path,
    resume: bool,
) -> Result<RunOutputs> {
    if source.is_empty() {
        bail!("empty source split");
    }
    if variant == Variant::Mtor && target.is_empty() {
        bail!("empty target split");
    }
    fs::create_dir_all(run_dir)?;
    let arch = cfg.arch();
    let hash = cfg.hash();
    let metrics_path = run_dir.join("metrics.jsonl");
    let props = proposal_params(cfg);
    let t = &cfg.train;

    let (mut pair, mut phase, mut start_step) = if resume {
        let (ckpt_path, ckpt) = latest_checkpoint(run_dir)?
            .ok_or_else(|| anyhow::anyhow!("--resume: no checkpoint in {}", run_dir.display()))?;
        if ckpt.config_hash != hash {
            bail!(
                "refusing to resume {}: checkpoint config hash {} != current {}",
                ckpt_path.display(),
                ckpt.config_hash,
                hash
            );
        }
        (ckpt.restore(arch.clone(), t.alpha), ckpt.phase.clone(), ckpt.step)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
        let weights = DetectorWeights::init(arch.clone(), &mut rng);
        (ModelPair::new(weights, t.alpha), "pretrain".to_string(), 0)
    };
    let mut metrics = MetricsWriter::append(&metrics_path)?;

    if phase == "pretrain" {
        for step in start_step..t.pretrain_steps as u64 {
            let sample = &source[(step as usize) % source.len()];
            let m = supervised_step(&mut pair, sample, t, &props, step);
            metrics.write(&m)?;
            if (step + 1) % t.checkpoint_every as u64 == 0 {
                Checkpoint::of(&pair, &hash, "pretrain", step + 1)
                    .save(&run_dir.join(format!("ckpt-pretrain-{:06}.json", step + 1)))?;
            }
        }
        // teacher restarts as an exact copy of the pre-trained student
        pair.teacher = pair.student.clone();
        phase = "adapt".to_string();
        start_step = 0;
    }

    if variant == Variant::Mtor {
        debug_assert_eq!(phase, "adapt");
        for step in start_step..t.adapt_steps as u64 {
            let src = &source[(step as usize) % source.len()];
            let tgt = &target[(step as usize) % target.len()];
            let mut rng = step_rng(t.seed, 2, step);
            let views = augment_pair(tgt, &cfg.dataset.aug, &mut rng);
            let m = train_step(
                &mut pair,
                src,
                &views.student_view,
                &views.teacher_view,
                views.size,
                t,
                &props,
                flags,
                step,
            );
            metrics.write(&m)?;
            if (step + 1) % t.checkpoint_every as u64 == 0 {
                Checkpoint::of(&pair, &hash, "adapt", step + 1)
                    .save(&run_dir.join(format!("ckpt-adapt-{:06}.json", step + 1)))?;
            }
        }
    }

    let final_checkpoint = run_dir.join("ckpt-final.json");
    let phase_name = if variant == Variant::Mtor { "adapt" } else { "pretrain" };
    Checkpoint::of(&pair, &hash, phase_name, pair.step).save(&final_checkpoint)?;
    Ok(RunOutputs { final_checkpoint, metrics_path })
}

/// Latest periodic checkpoint by (phase, step); `ckpt-final.json` wins if
/// present.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<(PathBuf, Checkpoint)>> {
    let final_path = run_dir.join("ckpt-final.json");
    if final_path.exists() {
        let ckpt = Checkpoint::load(&final_path)?;
        return Ok(Some((final_path, ckpt)));
    }
    let mut best: Option<(PathBuf, Checkpoint)> = None;
    for entry in fs::read_dir(run_dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if !name.starts_with("ckpt-") || !name.ends_with(".json") {
            continue;
        }
        let ckpt = Checkpoint::load(&path)?;
        let rank = |c: &Checkpoint| (if c.phase == "adapt" { 1u64 } else { 0 }, c.step);
        if best.as_ref().map_or(true, |(_, b)| rank(&ckpt) > rank(b)) {
            best = Some((path, ckpt));
        }
    }
    Ok(best)
}
