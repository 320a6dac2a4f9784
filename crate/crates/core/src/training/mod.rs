//! Three-stage curriculum training, dataset collection, and checkpoints.

pub mod checkpoint;
pub mod data;
mod stages;

pub use checkpoint::{Checkpoint, CheckpointError, CheckpointHeader, StageTag};
pub use data::{Dataset, DatasetMeta, EpisodeData, StepLabel};
pub use stages::{
    load_stack, run_stage1, run_stage2, run_stage3, traffic_light_accuracy, train_all,
    write_loss_stream, DrivingStack, LossRecord, Stage3Stats, StackOptions, TrainError,
    TrainOutcome, TrainPlan, TrainedArtifacts,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::micro();
        cfg.data.train_scenarios = 3;
        cfg.data.eval_scenarios = 1;
        cfg.data.steps_per_episode = 18;
        cfg.training.stage1_iters = 8;
        cfg.training.stage2_iters = 6;
        cfg.training.stage3_iters = 3;
        cfg.training.batch_size = 2;
        cfg
    }

    #[test]
    fn curriculum_respects_freeze_matrix_and_lineage() {
        let cfg = tiny_cfg();
        let ds = Dataset::collect(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let opts = StackOptions::default();

        let s1 = run_stage1(&ds, &cfg, dir.path()).unwrap();
        let ck1 = Checkpoint::load(&s1.checkpoint_path).unwrap();
        assert!(!ck1.has_module("heads."), "stage-1 checkpoint must strip heads");
        assert!(ck1.has_module("vision."));
        assert_eq!(ck1.header.frozen, vec!["vision.".to_string()]);
        assert!(ck1.header.parent_hash.is_none());

        let s2 = run_stage2(&ds, &cfg, &opts, &s1.checkpoint_path, dir.path(), None).unwrap();
        let ck2 = Checkpoint::load(&s2.checkpoint_path).unwrap();
        assert_eq!(ck2.header.parent_hash.as_deref(), Some(s1.checkpoint_hash.as_str()));
        // vision untouched by stage 2
        assert_eq!(
            ck1.header.module_hashes["vision"],
            ck2.header.module_hashes["vision"],
            "stage 2 must leave the vision encoder bit-identical"
        );
        // lm and generator moved
        assert!(ck2.has_module("lm.") && ck2.has_module("gen."));

        let s3 = run_stage3(&ds, &cfg, &opts, &s2.checkpoint_path, dir.path(), None, false).unwrap();
        let ck3 = Checkpoint::load(&s3.checkpoint_path).unwrap();
        assert_eq!(
            ck2.header.module_hashes["gen"],
            ck3.header.module_hashes["gen"],
            "stage 3 must leave the generator bit-identical"
        );
        assert_eq!(
            ck2.header.module_hashes["vision"],
            ck3.header.module_hashes["vision"]
        );
        assert_ne!(
            ck2.header.module_hashes["lm"],
            ck3.header.module_hashes["lm"],
            "stage 3 must update the planner"
        );
        // rollout-depth contract: depth clip-loss steps and depth-1 sampled
        // context clips per iteration
        let depth = cfg.training.rollout_depth;
        assert_eq!(s3.stage3_stats.clip_loss_steps, depth * cfg.training.stage3_iters);
        assert_eq!(
            s3.stage3_stats.context_clips_sampled,
            (depth - 1) * cfg.training.stage3_iters
        );
    }

    #[test]
    fn stage3_rejects_stage1_parent_unless_arm_allows() {
        let cfg = tiny_cfg();
        let ds = Dataset::collect(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let opts = StackOptions::default();
        let s1 = run_stage1(&ds, &cfg, dir.path()).unwrap();
        let err = run_stage3(&ds, &cfg, &opts, &s1.checkpoint_path, dir.path(), Some(1), false);
        assert!(err.is_err(), "stage 3 from stage 1 must fail without the arm");
        let ok = run_stage3(&ds, &cfg, &opts, &s1.checkpoint_path, dir.path(), Some(1), true);
        assert!(ok.is_ok());
    }

    #[test]
    fn stage2_requires_stage1_checkpoint() {
        let cfg = tiny_cfg();
        let ds = Dataset::collect(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let opts = StackOptions::default();
        let missing = dir.path().join("nope.ckpt");
        assert!(run_stage2(&ds, &cfg, &opts, &missing, dir.path(), None).is_err());
    }

    #[test]
    fn training_is_deterministic_across_reruns() {
        let cfg = tiny_cfg();
        let ds = Dataset::collect(&cfg);
        let opts = StackOptions::default();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = train_all(&ds, &cfg, &opts, &TrainPlan::default(), d1.path()).unwrap();
        let b = train_all(&ds, &cfg, &opts, &TrainPlan::default(), d2.path()).unwrap();
        assert_eq!(a.final_hash, b.final_hash, "checkpoints must reproduce");
        let la: Vec<f64> = a.stage2.as_ref().unwrap().losses.iter().map(|l| l.total).collect();
        let lb: Vec<f64> = b.stage2.as_ref().unwrap().losses.iter().map(|l| l.total).collect();
        assert_eq!(la, lb, "loss streams must reproduce bit-identically");
    }

    #[test]
    fn wo_world_generator_arm_trains_without_dm() {
        let cfg = tiny_cfg();
        let ds = Dataset::collect(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let opts = StackOptions {
            world_generator: false,
            ..StackOptions::default()
        };
        let arts = train_all(&ds, &cfg, &opts, &TrainPlan::default(), dir.path()).unwrap();
        let s2 = arts.stage2.unwrap();
        assert!(s2.losses.iter().all(|l| l.components["dm"] == 0.0));
        let ck = Checkpoint::load(&arts.final_ckpt).unwrap();
        assert!(!ck.has_module("gen."), "arm must carry no generator");
    }

    #[test]
    fn stage2_loss_decreases_without_generator() {
        // waypoint-loss learning signal: window means must decrease
        let mut cfg = tiny_cfg();
        cfg.data.train_scenarios = 4;
        cfg.data.steps_per_episode = 24;
        cfg.training.stage2_iters = 240;
        cfg.training.lr = 1e-3;
        let ds = Dataset::collect(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let opts = StackOptions {
            world_generator: false,
            ..StackOptions::default()
        };
        let s1 = run_stage1(&ds, &cfg, dir.path()).unwrap();
        let s2 = run_stage2(&ds, &cfg, &opts, &s1.checkpoint_path, dir.path(), None).unwrap();
        let wp: Vec<f64> = s2.losses.iter().map(|l| l.components["wp"]).collect();
        let window = 80;
        let means: Vec<f64> = wp
            .chunks(window)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();
        for w in means.windows(2) {
            assert!(
                w[1] < w[0],
                "waypoint loss window means must decrease: {means:?}"
            );
        }
    }
}
