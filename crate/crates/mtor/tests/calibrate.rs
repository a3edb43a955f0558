//! Temporary: desk-scale transfer calibration (run with --ignored).

use std::path::PathBuf;

use mtor::config::ExperimentConfig;
use mtor::dataset::{generate_dataset, read_eval_annotations, read_split, Domain};
use mtor::evalcmd::evaluate_split;
use mtor::trainer::{step_rng, supervised_step, train_step};
use mtor_core::consistency::LossFlags;
use mtor_core::detector::{DetectorWeights, ProposalParams};
use mtor_core::ema::ModelPair;
use mtor_core::eval::GroundTruth;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dataset_dir(cfg: &ExperimentConfig) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../target")
        .join(format!("calib-data-{}-{}", cfg.dataset.image_size, cfg.dataset.seed));
    if !dir.join("source/annotations.json").exists() {
        let spec = cfg.dataset.scene_spec();
        generate_dataset(
            &spec,
            &cfg.dataset.shift,
            cfg.dataset.size.source,
            cfg.dataset.size.target,
            &dir,
        )
        .unwrap();
    }
    dir
}

struct Bench {
    source: Vec<mtor::dataset::DomainSample>,
    target: Vec<mtor::dataset::DomainSample>,
    source_gts: Vec<GroundTruth>,
    target_gts: Vec<GroundTruth>,
}

fn load_bench(cfg: &ExperimentConfig) -> Bench {
    let dir = dataset_dir(cfg);
    Bench {
        source: read_split(&dir.join("source"), Domain::Source).unwrap(),
        target: read_split(&dir.join("target"), Domain::Target).unwrap(),
        source_gts: read_eval_annotations(&dir.join("source")).unwrap(),
        target_gts: read_eval_annotations(&dir.join("target")).unwrap(),
    }
}

fn pretrain(cfg: &ExperimentConfig, bench: &Bench, seed: u64) -> ModelPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = DetectorWeights::init(cfg.arch(), &mut rng);
    let mut pair = ModelPair::new(weights, cfg.train.alpha);
    let props = ProposalParams {
        cap: cfg.detector.proposal_cap_train,
        nms_iou: cfg.detector.rpn_nms_iou,
        min_size: 4.0,
    };
    let mut t = cfg.train.clone();
    t.seed = seed;
    for step in 0..t.pretrain_steps as u64 {
        let sample = &bench.source[(step as usize) % bench.source.len()];
        supervised_step(&mut pair, sample, &t, &props, step);
    }
    pair.teacher = pair.student.clone();
    pair
}

fn adapt(cfg: &ExperimentConfig, bench: &Bench, seed: u64, pair: &mut ModelPair, flags: &LossFlags) {
    let props = ProposalParams {
        cap: cfg.detector.proposal_cap_train,
        nms_iou: cfg.detector.rpn_nms_iou,
        min_size: 4.0,
    };
    let mut t = cfg.train.clone();
    t.seed = seed;
    for step in 0..t.adapt_steps as u64 {
        let src = &bench.source[(step as usize) % bench.source.len()];
        let tgt = &bench.target[(step as usize) % bench.target.len()];
        let mut rng = step_rng(seed, 2, step);
        let views = mtor::dataset::augment_pair(tgt, &cfg.dataset.aug, &mut rng);
        train_step(
            pair,
            src,
            &views.student_view,
            &views.teacher_view,
            views.size,
            &t,
            &props,
            flags,
            step,
        );
    }
}

#[test]
#[ignore]
fn calibrate_pretrain() {
    let cfg = ExperimentConfig::default();
    let bench = load_bench(&cfg);
    println!(
        "bench: {} source / {} target, {} / {} gts",
        bench.source.len(),
        bench.target.len(),
        bench.source_gts.len(),
        bench.target_gts.len()
    );
    let t0 = std::time::Instant::now();
    let pair = pretrain(&cfg, &bench, 1);
    println!("pretrain took {:.1}s", t0.elapsed().as_secs_f64());
    let on_src = evaluate_split(&pair.student, &bench.source, &bench.source_gts, &cfg);
    println!("source mAP = {:.4} ({:?})", on_src.ap.map, on_src.ap.per_category);
    let on_tgt = evaluate_split(&pair.student, &bench.target, &bench.target_gts, &cfg);
    println!("target mAP = {:.4} ({:?})", on_tgt.ap.map, on_tgt.ap.per_category);
}

#[test]
#[ignore]
fn calibrate_variants() {
    let cfg = ExperimentConfig::default();
    let bench = load_bench(&cfg);
    let full = LossFlags { rcl: true, egl: true, agl: true };
    let r_only = LossFlags { rcl: true, egl: false, agl: false };
    for seed in [1u64] {
        let base = pretrain(&cfg, &bench, seed);
        let src_only =
            evaluate_split(&base.teacher, &bench.target, &bench.target_gts, &cfg).ap.map;
        let mut pr = base.clone();
        adapt(&cfg, &bench, seed, &mut pr, &r_only);
        let r_map = evaluate_split(&pr.teacher, &bench.target, &bench.target_gts, &cfg).ap.map;
        let mut pf = base.clone();
        adapt(&cfg, &bench, seed, &mut pf, &full);
        let f_map = evaluate_split(&pf.teacher, &bench.target, &bench.target_gts, &cfg).ap.map;
        println!(
            "seed {seed}: source_only {src_only:.4}  mtor_r {r_map:.4}  mtor_full {f_map:.4}"
        );
    }
}

#[test]
#[ignore]
fn calibrate_metrics_probe() {
    let mut cfg = ExperimentConfig::default();
    cfg.train.epsilon = 0.22;
    cfg.dataset.aug.jitter = 0.10;
    let bench = load_bench(&cfg);
    let full = LossFlags { rcl: true, egl: true, agl: true };
    let mut pair = cached_pretrain(&cfg, &bench, 2);
    let props = ProposalParams {
        cap: cfg.detector.proposal_cap_train,
        nms_iou: cfg.detector.rpn_nms_iou,
        min_size: 4.0,
    };
    let mut t = cfg.train.clone();
    t.seed = 2;
    let (mut fired, mut multi) = (0u32, 0u32);
    for step in 0..300u64 {
        let src = &bench.source[(step as usize) % bench.source.len()];
        let tgt = &bench.target[(step as usize) % bench.target.len()];
        let mut rng = step_rng(2, 2, step);
        let views = mtor::dataset::augment_pair(tgt, &cfg.dataset.aug, &mut rng);
        let m = train_step(
            &mut pair, src, &views.student_view, &views.teacher_view, views.size,
            &t, &props, &full, step,
        );
        if m.survivors > 0 {
            fired += 1;
        }
        if m.survivors > 1 {
            multi += 1;
            println!(
                "step {step}: sup {:.4} rcl {:.6} egl {:.6} agl {:.6} survivors {}",
                m.l_sup, m.rcl, m.egl, m.agl, m.survivors
            );
        }
    }
    println!("300 steps: {fired} with survivors, {multi} with >=2 survivors");
}

fn cached_pretrain(cfg: &ExperimentConfig, bench: &Bench, seed: u64) -> ModelPair {
    let cache = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../target")
        .join(format!("calib-pretrain-{}-{}-s{seed}.json", cfg.dataset.image_size, cfg.dataset.seed));
    if cache.exists() {
        let flat: Vec<f64> = serde_json::from_str(&std::fs::read_to_string(&cache).unwrap()).unwrap();
        let w = DetectorWeights::from_flat(cfg.arch(), &flat);
        let mut pair = ModelPair::new(w, cfg.train.alpha);
        pair.teacher = pair.student.clone();
        return pair;
    }
    let pair = pretrain(cfg, bench, seed);
    std::fs::write(&cache, serde_json::to_string(&pair.student.flat()).unwrap()).unwrap();
    pair
}

#[test]
#[ignore]
fn calibrate_confidence() {
    use mtor_core::detector::{anchor_grid, forward_backbone, rcnn_classify, rcnn_forward,
        roi_cells, rpn_forward, rpn_propose, DetectorVars};
    use mtor_core::tape::Tape;
    use mtor_core::tensor::Tensor;
    let cfg = ExperimentConfig::default();
    let bench = load_bench(&cfg);
    let pair = cached_pretrain(&cfg, &bench, 1);
    let arch = cfg.arch();
    let props = ProposalParams {
        cap: cfg.detector.proposal_cap_train,
        nms_iou: cfg.detector.rpn_nms_iou,
        min_size: 4.0,
    };
    let mut all_q: Vec<f64> = Vec::new();
    for step in 0..30u64 {
        let tgt = &bench.target[(step as usize) % bench.target.len()];
        let mut rng = step_rng(1, 2, step);
        let views = mtor::dataset::augment_pair(tgt, &cfg.dataset.aug, &mut rng);
        let mut tape = Tape::new();
        let vars = DetectorVars::constants(&mut tape, &pair.teacher);
        let img = tape.constant(Tensor::new(&[3, views.size, views.size], views.teacher_view.clone()));
        let fm = forward_backbone(&mut tape, &vars, img);
        let (hf, wf) = { let s = tape.value(fm).shape(); (s[1], s[2]) };
        let (obj, deltas) = rpn_forward(&mut tape, &vars, fm);
        let anchors = anchor_grid(&arch, hf, wf);
        let proposals = rpn_propose(&arch, &anchors, tape.value(obj), tape.value(deltas), &props);
        if proposals.is_empty() { continue; }
        let rects: Vec<_> = proposals.iter().map(|p| p.rect).collect();
        let cells = roi_cells(&rects, hf, wf, arch.roi_grid);
        let pooled = tape.roi_avg_pool(fm, cells, arch.roi_grid);
        let (_, dist, _) = rcnn_forward(&mut tape, &vars, pooled);
        let preds = rcnn_classify(tape.value(dist));
        let mut qs: Vec<f64> = preds.iter().map(|p| p.confidence).collect();
        qs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        if step < 8 {
            println!("step {step}: {} proposals, top q = {:?}", qs.len(),
                &qs[..qs.len().min(5)].iter().map(|q| format!("{q:.3}")).collect::<Vec<_>>());
        }
        all_q.extend(qs);
    }
    all_q.sort_by(|a, b| b.partial_cmp(a).unwrap());
    for pct in [0.5, 1.0, 2.0, 5.0, 10.0, 25.0, 50.0] {
        let k = ((all_q.len() as f64) * pct / 100.0) as usize;
        println!("q at top {pct}%: {:.4}", all_q[k.min(all_q.len() - 1)]);
    }
}

#[test]
#[ignore]
fn calibrate_survivors() {
    let mut cfg = ExperimentConfig::default();
    let bench = load_bench(&cfg);
    let pair = cached_pretrain(&cfg, &bench, 2);
    let full = LossFlags { rcl: true, egl: true, agl: true };
    let props = ProposalParams {
        cap: cfg.detector.proposal_cap_train,
        nms_iou: cfg.detector.rpn_nms_iou,
        min_size: 4.0,
    };
    for (eps, jitter) in [(0.22, 0.10), (0.35, 0.10), (0.50, 0.10)] {
        cfg.train.epsilon = eps;
        cfg.dataset.aug.jitter = jitter;
        let mut p = pair.clone();
        let mut surv = Vec::new();
        let mut rcls = Vec::new();
        for step in 0..15u64 {
            let src = &bench.source[(step as usize) % bench.source.len()];
            let tgt = &bench.target[(step as usize) % bench.target.len()];
            let mut rng = step_rng(1, 2, step);
            let views = mtor::dataset::augment_pair(tgt, &cfg.dataset.aug, &mut rng);
            let m = train_step(&mut p, src, &views.student_view, &views.teacher_view,
                views.size, &cfg.train, &props, &full, step);
            surv.push(m.survivors);
            rcls.push(m.rcl);
        }
        println!("eps {eps} jitter {jitter}: survivors {:?} mean_rcl {:.5}",
            surv, rcls.iter().sum::<f64>() / rcls.len() as f64);
    }
}

#[test]
#[ignore]
fn calibrate_isolate() {
    let mut cfg = ExperimentConfig::default();
    cfg.train.epsilon = 0.05;
    cfg.dataset.aug.jitter = 0.10;
    let bench = load_bench(&cfg);
    let re = LossFlags { rcl: true, egl: true, agl: false };
    let ra = LossFlags { rcl: true, egl: false, agl: true };
    let base = cached_pretrain(&cfg, &bench, 1);
    for (name, flags) in [("mtor_re", &re), ("mtor_ra", &ra)] {
        let mut p = base.clone();
        adapt(&cfg, &bench, 1, &mut p, flags);
        let m = evaluate_split(&p.teacher, &bench.target, &bench.target_gts, &cfg).ap.map;
        println!("seed 1 {name}: {m:.4}");
    }
}

#[test]
#[ignore]
fn calibrate_small_sweep_cfg() {
    for (px, steps) in [(96usize, 2000usize)] {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.image_size = px;
        cfg.dataset.size.source = 48;
        cfg.dataset.size.target = 48;
        cfg.train.pretrain_steps = steps;
        cfg.train.epsilon = 0.22;
        cfg.dataset.aug.jitter = 0.10;
        cfg.train.adapt_steps = 500;
        let bench = load_bench(&cfg);
        let mut pair = pretrain(&cfg, &bench, 1);
        let on_src = evaluate_split(&pair.student, &bench.source, &bench.source_gts, &cfg);
        let on_tgt = evaluate_split(&pair.student, &bench.target, &bench.target_gts, &cfg);
        println!("{px}px {steps} steps: source mAP {:.4}  target mAP {:.4}",
            on_src.ap.map, on_tgt.ap.map);
        let full = LossFlags { rcl: true, egl: true, agl: true };
        adapt(&cfg, &bench, 1, &mut pair, &full);
        let adapted = evaluate_split(&pair.teacher, &bench.target, &bench.target_gts, &cfg);
        println!("{px}px adapted (eps {}): target mAP {:.4}", cfg.train.epsilon, adapted.ap.map);
    }
}

#[test]
#[ignore]
fn calibrate_sharp() {
    use mtor_core::detector::{anchor_grid, forward_backbone, rcnn_classify, rcnn_forward,
        roi_cells, rpn_forward, rpn_propose, DetectorVars};
    use mtor_core::tape::Tape;
    use mtor_core::tensor::Tensor;
    let mut cfg = ExperimentConfig::default();
    cfg.train.pretrain_steps = 3000;
    cfg.dataset.aug.jitter = 0.10;
    let bench = load_bench(&cfg);
    let cache = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../target/calib-pretrain3000-s1.json");
    let base = if cache.exists() {
        let flat: Vec<f64> =
            serde_json::from_str(&std::fs::read_to_string(&cache).unwrap()).unwrap();
        let mut p = ModelPair::new(DetectorWeights::from_flat(cfg.arch(), &flat), cfg.train.alpha);
        p.teacher = p.student.clone();
        p
    } else {
        let p = pretrain(&cfg, &bench, 1);
        std::fs::write(&cache, serde_json::to_string(&p.student.flat()).unwrap()).unwrap();
        p
    };
    let s = evaluate_split(&base.teacher, &bench.target, &bench.target_gts, &cfg).ap.map;
    println!("seed 1 pretrain3000 source_only: {s:.4}");

    // teacher confidence percentiles on augmented target views
    let arch = cfg.arch();
    let props = ProposalParams {
        cap: cfg.detector.proposal_cap_train,
        nms_iou: cfg.detector.rpn_nms_iou,
        min_size: 4.0,
    };
    let mut all_q: Vec<f64> = Vec::new();
    for step in 0..20u64 {
        let tgt = &bench.target[(step as usize) % bench.target.len()];
        let mut rng = step_rng(1, 2, step);
        let views = mtor::dataset::augment_pair(tgt, &cfg.dataset.aug, &mut rng);
        let mut tape = Tape::new();
        let vars = DetectorVars::constants(&mut tape, &base.teacher);
        let img =
            tape.constant(Tensor::new(&[3, views.size, views.size], views.teacher_view.clone()));
        let fm = forward_backbone(&mut tape, &vars, img);
        let (hf, wf) = { let sh = tape.value(fm).shape(); (sh[1], sh[2]) };
        let (obj, deltas) = rpn_forward(&mut tape, &vars, fm);
        let anchors = anchor_grid(&arch, hf, wf);
        let proposals = rpn_propose(&arch, &anchors, tape.value(obj), tape.value(deltas), &props);
        if proposals.is_empty() { continue; }
        let rects: Vec<_> = proposals.iter().map(|p| p.rect).collect();
        let cells = roi_cells(&rects, hf, wf, arch.roi_grid);
        let pooled = tape.roi_avg_pool(fm, cells, arch.roi_grid);
        let (_, dist, _) = rcnn_forward(&mut tape, &vars, pooled);
        all_q.extend(rcnn_classify(tape.value(dist)).iter().map(|p| p.confidence));
    }
    all_q.sort_by(|a, b| b.partial_cmp(a).unwrap());
    for pct in [0.5, 2.0, 5.0, 10.0, 25.0] {
        let k = ((all_q.len() as f64) * pct / 100.0) as usize;
        println!("q at top {pct}%: {:.4}", all_q[k.min(all_q.len() - 1)]);
    }

    let full = LossFlags { rcl: true, egl: true, agl: true };
    let r_only = LossFlags { rcl: true, egl: false, agl: false };
    for eps in [0.10, 0.30] {
        cfg.train.epsilon = eps;
        let mut pr = base.clone();
        adapt(&cfg, &bench, 1, &mut pr, &r_only);
        let r = evaluate_split(&pr.teacher, &bench.target, &bench.target_gts, &cfg).ap.map;
        let mut pf = base.clone();
        adapt(&cfg, &bench, 1, &mut pf, &full);
        let f = evaluate_split(&pf.teacher, &bench.target, &bench.target_gts, &cfg).ap.map;
        println!("pretrain3000 eps {eps}: mtor_r {r:.4}  mtor_full {f:.4}");
    }
}

#[test]
#[ignore]
fn calibrate_high_eps_seed2() {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.aug.jitter = 0.10;
    let bench = load_bench(&cfg);
    let full = LossFlags { rcl: true, egl: true, agl: true };
    let r_only = LossFlags { rcl: true, egl: false, agl: false };
    let base = cached_pretrain(&cfg, &bench, 2);
    for eps in [0.35, 0.50] {
        cfg.train.epsilon = eps;
        for (name, flags) in [("r", &r_only), ("full", &full)] {
            let mut p = base.clone();
            adapt(&cfg, &bench, 2, &mut p, flags);
            let m = evaluate_split(&p.teacher, &bench.target, &bench.target_gts, &cfg).ap.map;
            println!("seed 2 eps {eps} {name}: {m:.4}");
        }
    }
}

#[test]
#[ignore]
fn calibrate_zero_jitter_seed2() {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.aug.jitter = 0.0;
    cfg.train.epsilon = 0.22;
    let bench = load_bench(&cfg);
    let full = LossFlags { rcl: true, egl: true, agl: true };
    let r_only = LossFlags { rcl: true, egl: false, agl: false };
    for seed in [2u64, 3] {
        let base = cached_pretrain(&cfg, &bench, seed);
        for (name, flags) in [("r", &r_only), ("full", &full)] {
            let mut p = base.clone();
            adapt(&cfg, &bench, seed, &mut p, flags);
            let m = evaluate_split(&p.teacher, &bench.target, &bench.target_gts, &cfg).ap.map;
            println!("seed {seed} jitter0 {name}: {m:.4}");
        }
    }
}

#[test]
#[ignore]
fn calibrate_purity_levers() {
    let full = LossFlags { rcl: true, egl: true, agl: true };
    let r_only = LossFlags { rcl: true, egl: false, agl: false };

    // lever 1: tighter proposal cap during adaptation (top-16 by objectness)
    {
        let mut cfg = ExperimentConfig::default();
        cfg.train.epsilon = 0.22;
        cfg.dataset.aug.jitter = 0.10;
        cfg.detector.proposal_cap_train = 16;
        let bench = load_bench(&cfg);
        let base = cached_pretrain(&cfg, &bench, 2);
        for (name, flags) in [("r", &r_only), ("full", &full)] {
            let mut p = base.clone();
            adapt(&cfg, &bench, 2, &mut p, flags);
            let m = evaluate_split(&p.teacher, &bench.target, &bench.target_gts, &cfg).ap.map;
            println!("seed 2 cap16 {name}: {m:.4}");
        }
    }

    // lever 2: sharper teacher (3000 pretrain steps)
    {
        let mut cfg = ExperimentConfig::default();
        cfg.train.epsilon = 0.22;
        cfg.dataset.aug.jitter = 0.10;
        cfg.train.pretrain_steps = 3000;
        let bench = load_bench(&cfg);
        let cache = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
            .join("../../target/calib-pretrain3000-s2.json");
        let base = if cache.exists() {
            let flat: Vec<f64> =
                serde_json::from_str(&std::fs::read_to_string(&cache).unwrap()).unwrap();
            let mut p =
                ModelPair::new(DetectorWeights::from_flat(cfg.arch(), &flat), cfg.train.alpha);
            p.teacher = p.student.clone();
            p
        } else {
            let p = pretrain(&cfg, &bench, 2);
            std::fs::write(&cache, serde_json::to_string(&p.student.flat()).unwrap()).unwrap();
            p
        };
        let s = evaluate_split(&base.teacher, &bench.target, &bench.target_gts, &cfg).ap.map;
        println!("seed 2 pretrain3000 source_only: {s:.4}");
        for (name, flags) in [("r", &r_only), ("full", &full)] {
            let mut p = base.clone();
            adapt(&cfg, &bench, 2, &mut p, flags);
            let m = evaluate_split(&p.teacher, &bench.target, &bench.target_gts, &cfg).ap.map;
            println!("seed 2 pretrain3000 {name}: {m:.4}");
        }
    }
}

#[test]
#[ignore]
fn calibrate_stacked_levers() {
    let full = LossFlags { rcl: true, egl: true, agl: true };
    let r_only = LossFlags { rcl: true, egl: false, agl: false };
    let mut cfg = ExperimentConfig::default();
    cfg.train.epsilon = 0.35;
    cfg.dataset.aug.jitter = 0.0;
    cfg.detector.proposal_cap_train = 16;
    cfg.train.pretrain_steps = 3000;
    let bench = load_bench(&cfg);
    let cache = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../target/calib-pretrain3000-s2.json");
    let flat: Vec<f64> = serde_json::from_str(&std::fs::read_to_string(&cache).unwrap()).unwrap();
    let mut base = ModelPair::new(DetectorWeights::from_flat(cfg.arch(), &flat), cfg.train.alpha);
    base.teacher = base.student.clone();
    let s = evaluate_split(&base.teacher, &bench.target, &bench.target_gts, &cfg).ap.map;
    println!("seed 2 stacked source_only: {s:.4}");
    for (name, flags) in [("r", &r_only), ("full", &full)] {
        let mut p = base.clone();
        adapt(&cfg, &bench, 2, &mut p, flags);
        let m = evaluate_split(&p.teacher, &bench.target, &bench.target_gts, &cfg).ap.map;
        println!("seed 2 stacked {name}: {m:.4}");
    }
}

#[test]
#[ignore]
fn calibrate_cap16_seeds13() {
    let full = LossFlags { rcl: true, egl: true, agl: true };
    let r_only = LossFlags { rcl: true, egl: false, agl: false };
    let mut cfg = ExperimentConfig::default();
    cfg.train.epsilon = 0.22;
    cfg.dataset.aug.jitter = 0.10;
    cfg.detector.proposal_cap_train = 16;
    let bench = load_bench(&cfg);
    for seed in [1u64, 3] {
        let base = cached_pretrain(&cfg, &bench, seed);
        let s = evaluate_split(&base.teacher, &bench.target, &bench.target_gts, &cfg).ap.map;
        for (name, flags) in [("r", &r_only), ("full", &full)] {
            let mut p = base.clone();
            adapt(&cfg, &bench, seed, &mut p, flags);
            let m = evaluate_split(&p.teacher, &bench.target, &bench.target_gts, &cfg).ap.map;
            println!("seed {seed} cap16 source {s:.4} {name}: {m:.4}");
        }
    }
}

#[test]
#[ignore]
fn calibrate_label_noise() {
    use mtor_core::boxes::iou;
    use mtor_core::consistency::confidence_filter;
    use mtor_core::detector::{anchor_grid, forward_backbone, rcnn_classify, rcnn_forward,
        roi_cells, rpn_forward, rpn_propose, DetectorVars};
    use mtor_core::tape::Tape;
    use mtor_core::tensor::Tensor;
    let mut cfg = ExperimentConfig::default();
    cfg.train.epsilon = 0.22;
    cfg.dataset.aug.jitter = 0.10;
    let bench = load_bench(&cfg);
    let arch = cfg.arch();
    let props = ProposalParams {
        cap: cfg.detector.proposal_cap_train,
        nms_iou: cfg.detector.rpn_nms_iou,
        min_size: 4.0,
    };
    let full = LossFlags { rcl: true, egl: true, agl: true };
    let mut pair = cached_pretrain(&cfg, &bench, 2);
    let mut t = cfg.train.clone();
    t.seed = 2;
    // survivor pseudo-label accuracy vs ground truth, sampled as the teacher
    // adapts: (survivors, labels agreeing with best-IoU GT, bg survivors,
    // same-pseudo-label pairs whose true classes differ)
    let (mut n_surv, mut n_right, mut n_bg, mut n_pairs, mut n_bad_pairs) = (0u32, 0, 0, 0, 0);
    for step in 0..400u64 {
        let src = &bench.source[(step as usize) % bench.source.len()];
        let tgt_idx = (step as usize) % bench.target.len();
        let tgt = &bench.target[tgt_idx];
        let mut rng = step_rng(2, 2, step);
        let views = mtor::dataset::augment_pair(tgt, &cfg.dataset.aug, &mut rng);
        if step % 5 == 0 {
            let mut tape = Tape::new();
            let vars = DetectorVars::constants(&mut tape, &pair.teacher);
            let img = tape
                .constant(Tensor::new(&[3, views.size, views.size], views.teacher_view.clone()));
            let fm = forward_backbone(&mut tape, &vars, img);
            let (hf, wf) = { let sh = tape.value(fm).shape(); (sh[1], sh[2]) };
            let (obj, deltas) = rpn_forward(&mut tape, &vars, fm);
            let anchors = anchor_grid(&arch, hf, wf);
            let proposals =
                rpn_propose(&arch, &anchors, tape.value(obj), tape.value(deltas), &props);
            if !proposals.is_empty() {
                let rects: Vec<_> = proposals.iter().map(|p| p.rect).collect();
                let cells = roi_cells(&rects, hf, wf, arch.roi_grid);
                let pooled = tape.roi_avg_pool(fm, cells, arch.roi_grid);
                let (_, dist, _) = rcnn_forward(&mut tape, &vars, pooled);
                let preds = rcnn_classify(tape.value(dist));
                let keep = confidence_filter(&preds, t.epsilon);
                let n = views.size as f64;
                let gts: Vec<(mtor_core::boxes::BoxCorners, usize)> = bench
                    .target_gts
                    .iter()
                    .filter(|g| g.image_id == tgt_idx as u64)
                    .map(|g| {
                        let mut r = g.rect;
                        if views.shared_spatial.flip {
                            let (a, b) = (r.x_min, r.x_max);
                            r.x_min = n - b;
                            r.x_max = n - a;
                        }
                        (r, g.category)
                    })
                    .collect();
                let mut true_classes = Vec::new();
                for &i in &keep {
                    n_surv += 1;
                    let best = gts
                        .iter()
                        .map(|(r, c)| (iou(&rects[i], r), *c))
                        .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
                    match best {
                        Some((ov, c)) if ov >= 0.5 => {
                            let l = preds[i].pseudo_label.unwrap();
                            if l == c {
                                n_right += 1;
                            }
                            true_classes.push(Some(c));
                        }
                        _ => {
                            n_bg += 1;
                            true_classes.push(None);
                        }
                    }
                }
                for a in 0..keep.len() {
                    for b in 0..a {
                        if preds[keep[a]].pseudo_label == preds[keep[b]].pseudo_label {
                            n_pairs += 1;
                            if true_classes[a] != true_classes[b]
                                || true_classes[a].is_none()
                            {
                                n_bad_pairs += 1;
                            }
                        }
                    }
                }
            }
        }
        train_step(&mut pair, src, &views.student_view, &views.teacher_view, views.size,
            &t, &props, &full, step);
    }
    println!(
        "survivors {n_surv}: label-correct {n_right}, background {n_bg}; \
         same-label pairs {n_pairs}, cross-class/bg pairs {n_bad_pairs}"
    );
}

#[test]
#[ignore]
fn calibrate_combo() {
    let mut cfg = ExperimentConfig::default();
    cfg.train.epsilon = 0.22;
    cfg.dataset.aug.jitter = 0.10;
    let bench = load_bench(&cfg);
    let none = LossFlags { rcl: false, egl: false, agl: false };
    let full = LossFlags { rcl: true, egl: true, agl: true };
    let r_only = LossFlags { rcl: true, egl: false, agl: false };
    for seed in [2u64, 3] {
        let base = cached_pretrain(&cfg, &bench, seed);
        for (name, flags, lambda) in [
            ("sup_ema", &none, 1.0),
            ("r_l03", &r_only, 0.3),
            ("full_l03", &full, 0.3),
        ] {
            cfg.train.lambda = lambda;
            let mut p = base.clone();
            adapt(&cfg, &bench, seed, &mut p, flags);
            let m = evaluate_split(&p.teacher, &bench.target, &bench.target_gts, &cfg).ap.map;
            println!("seed {seed} {name}: {m:.4}");
        }
    }
}

#[test]
#[ignore]
fn calibrate_adapt_curve() {
    let mut cfg = ExperimentConfig::default();
    cfg.train.epsilon = 0.22;
    cfg.dataset.aug.jitter = 0.10;
    let bench = load_bench(&cfg);
    let props = ProposalParams {
        cap: cfg.detector.proposal_cap_train,
        nms_iou: cfg.detector.rpn_nms_iou,
        min_size: 4.0,
    };
    let full = LossFlags { rcl: true, egl: true, agl: true };
    let r_only = LossFlags { rcl: true, egl: false, agl: false };
    for seed in [2u64, 3] {
        let base = cached_pretrain(&cfg, &bench, seed);
        for (name, flags) in [("r", &r_only), ("full", &full)] {
            let mut pair = base.clone();
            let mut t = cfg.train.clone();
            t.seed = seed;
            let mut curve = Vec::new();
            for step in 0..1000u64 {
                let src = &bench.source[(step as usize) % bench.source.len()];
                let tgt = &bench.target[(step as usize) % bench.target.len()];
                let mut rng = step_rng(seed, 2, step);
                let views = mtor::dataset::augment_pair(tgt, &cfg.dataset.aug, &mut rng);
                train_step(&mut pair, src, &views.student_view, &views.teacher_view,
                    views.size, &t, &props, flags, step);
                if (step + 1) % 250 == 0 {
                    let m = evaluate_split(&pair.teacher, &bench.target, &bench.target_gts, &cfg)
                        .ap.map;
                    curve.push(format!("{}:{m:.4}", step + 1));
                }
            }
            println!("seed {seed} {name}: {}", curve.join("  "));
        }
    }
}

#[test]
#[ignore]
fn calibrate_eps_grid() {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.aug.jitter = 0.10;
    let bench = load_bench(&cfg);
    let full = LossFlags { rcl: true, egl: true, agl: true };
    let r_only = LossFlags { rcl: true, egl: false, agl: false };
    let base = cached_pretrain(&cfg, &bench, 1);
    let s = evaluate_split(&base.teacher, &bench.target, &bench.target_gts, &cfg).ap.map;
    println!("seed 1 source_only: {s:.4}");
    for eps in [0.10, 0.15, 0.22] {
        cfg.train.epsilon = eps;
        let mut pr = base.clone();
        adapt(&cfg, &bench, 1, &mut pr, &r_only);
        let r = evaluate_split(&pr.teacher, &bench.target, &bench.target_gts, &cfg).ap.map;
        let mut pf = base.clone();
        adapt(&cfg, &bench, 1, &mut pf, &full);
        let f = evaluate_split(&pf.teacher, &bench.target, &bench.target_gts, &cfg).ap.map;
        println!("eps {eps}: mtor_r {r:.4}  mtor_full {f:.4}");
    }
}

#[test]
#[ignore]
fn calibrate_three_seeds() {
    let mut cfg = ExperimentConfig::default();
    cfg.train.epsilon = 0.22;
    cfg.dataset.aug.jitter = 0.10;
    let bench = load_bench(&cfg);
    let full = LossFlags { rcl: true, egl: true, agl: true };
    let r_only = LossFlags { rcl: true, egl: false, agl: false };
    let (mut src_v, mut r_v, mut f_v) = (vec![], vec![], vec![]);
    for seed in [1u64, 2, 3] {
        let base = cached_pretrain(&cfg, &bench, seed);
        let s = evaluate_split(&base.teacher, &bench.target, &bench.target_gts, &cfg).ap.map;
        let mut pr = base.clone();
        adapt(&cfg, &bench, seed, &mut pr, &r_only);
        let r = evaluate_split(&pr.teacher, &bench.target, &bench.target_gts, &cfg).ap.map;
        let mut pf = base.clone();
        adapt(&cfg, &bench, seed, &mut pf, &full);
        let f = evaluate_split(&pf.teacher, &bench.target, &bench.target_gts, &cfg).ap.map;
        println!("seed {seed}: source_only {s:.4}  mtor_r {r:.4}  mtor_full {f:.4}");
        src_v.push(s); r_v.push(r); f_v.push(f);
    }
    let med = |v: &mut Vec<f64>| { v.sort_by(|a, b| a.partial_cmp(b).unwrap()); v[v.len() / 2] };
    println!("medians: source {:.4} r {:.4} full {:.4}",
        med(&mut src_v), med(&mut r_v), med(&mut f_v));
}
