//! Temporary: timing probe for step costs at candidate image sizes.

use mtor::config::ExperimentConfig;
use mtor::dataset::{apply_domain_shift, augment_pair, generate_scene, ShiftParams};
use mtor::trainer::{supervised_step, train_step};
use mtor_core::consistency::LossFlags;
use mtor_core::detector::{DetectorWeights, ProposalParams};
use mtor_core::ema::ModelPair;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

#[test]
#[ignore]
fn timing_probe() {
    for size in [64usize, 96, 128] {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.image_size = size;
        let mut spec = cfg.dataset.scene_spec();
        spec.image_size = size;
        let src = generate_scene(&spec, 0).unwrap();
        let tgt0 = generate_scene(&spec, 100).unwrap();
        let mut srng = ChaCha8Rng::seed_from_u64(100);
        let tgt = apply_domain_shift(&tgt0, &ShiftParams::default(), &mut srng);
        let arch = cfg.arch();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let weights = DetectorWeights::init(arch.clone(), &mut rng);
        println!("size {size}: params {}", weights.num_params());
        let mut pair = ModelPair::new(weights, 0.99);
        let props = ProposalParams {
            cap: cfg.detector.proposal_cap_train,
            nms_iou: cfg.detector.rpn_nms_iou,
            min_size: 4.0,
        };
        let flags = LossFlags { rcl: true, egl: true, agl: true };

        let t0 = Instant::now();
        for step in 0..5u64 {
            supervised_step(&mut pair, &src, &cfg.train, &props, step);
        }
        let sup_ms = t0.elapsed().as_secs_f64() * 1000.0 / 5.0;

        let t1 = Instant::now();
        for step in 0..5u64 {
            let mut arng = ChaCha8Rng::seed_from_u64(step);
            let views = augment_pair(&tgt, &cfg.dataset.aug, &mut arng);
            train_step(
                &mut pair,
                &src,
                &views.student_view,
                &views.teacher_view,
                views.size,
                &cfg.train,
                &props,
                &flags,
                step,
            );
        }
        let joint_ms = t1.elapsed().as_secs_f64() * 1000.0 / 5.0;
        println!("size {size}: supervised {sup_ms:.1} ms/step, joint {joint_ms:.1} ms/step");
    }
}
