//! Proxy feature networks for FID/FVD-style metrics.
//!
//! A small conv trunk produces image features; video features add temporal
//! mean pooling and a separate projection. The nets are trained once on
//! simulator data (light-state and ego-motion classification), then the
//! heads are dropped and the trunk is hash-frozen so metric values stay
//! comparable across runs.

use crate::config::{EvalConfig, RunConfig};
use crate::generator::GeneratedClip;
use crate::microworld::render::Image;
use crate::nn::{no_grad, AdamW, Linear, ParamSet, Tensor, Var};
use crate::rng::{derive_rng, randn_vec};
use crate::training::checkpoint::{Checkpoint, CheckpointHeader, StageTag, SCHEMA_VERSION};
use crate::training::Dataset;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

pub const PROXY_VERSION: u32 = 1;

struct TrunkConv {
    w: Arc<Var>,
    b: Arc<Var>,
}

pub struct ProxyNets {
    pub feature_dim: usize,
    convs: Vec<TrunkConv>,
    proj: Linear,
    video_proj: Linear,
    pub params: ParamSet,
}

impl ProxyNets {
    pub fn new(ecfg: &EvalConfig, _raster: usize, rng: &mut ChaCha12Rng) -> ProxyNets {
        let mut ps = ParamSet::new();
        let channels = [8usize, 16, 24];
        let mut convs = Vec::new();
        let mut c_in = 3;
        for (i, &c_out) in channels.iter().enumerate() {
            let std = 1.0 / ((c_in * 9) as f64).sqrt();
            let w = ps.add(Var::new(
                format!("proxy.conv{i}.w"),
                randn_vec(rng, c_out * c_in * 9)
                    .into_iter()
                    .map(|x| x * std)
                    .collect::<Vec<_>>(),
                &[c_out, c_in, 3, 3],
            ));
            let b = ps.add(Var::new(format!("proxy.conv{i}.b"), vec![0.0; c_out], &[c_out]));
            convs.push(TrunkConv { w, b });
            c_in = c_out;
        }
        let proj = Linear::new(&mut ps, rng, "proxy.proj", c_in, ecfg.feature_dim, true);
        let video_proj = Linear::new(
            &mut ps,
            rng,
            "proxy.video_proj",
            ecfg.feature_dim,
            ecfg.feature_dim,
            true,
        );
        ProxyNets {
            feature_dim: ecfg.feature_dim,
            convs,
            proj,
            video_proj,
            params: ps,
        }
    }

    /// Pooled trunk feature of one image, as a graph tensor.
    fn image_feature_tensor(&self, img: &Image) -> Tensor {
        let mut x = Tensor::new(img.to_chw(), &[1, 3, img.h, img.w]);
        for conv in &self.convs {
            x = x.conv2d(&conv.w.value(), Some(&conv.b.value()), 2, 1).silu();
        }
        let (c, hw) = (x.shape()[1], x.shape()[2] * x.shape()[3]);
        let pooled = x.reshape(&[c, hw]).mean_axis(1).reshape(&[1, c]);
        self.proj.forward(&pooled) // [1, f]
    }

    /// Image-mode feature vector.
    pub fn image_features(&self, img: &Image) -> Vec<f64> {
        no_grad(|| self.image_feature_tensor(img).data().to_vec())
    }

    /// Video-mode feature: temporal mean of per-frame features of one view,
    /// passed through the video projection.
    pub fn video_features_view(&self, clip: &GeneratedClip, view: usize) -> Vec<f64> {
        no_grad(|| {
            let frames: Vec<Tensor> = (0..clip.frames)
                .map(|t| self.image_feature_tensor(&clip.frame_image(view, t)))
                .collect();
            let stacked = Tensor::concat(&frames, 0); // [t, f]
            let mean = stacked.mean_axis(0).reshape(&[1, self.feature_dim]);
            self.video_proj.forward(&mean).data().to_vec()
        })
    }

    pub fn content_hash(&self) -> String {
        self.params.content_hash()
    }

    /// Video projection applied to an externally pooled feature [1, f].
    pub fn video_proj_forward(&self, pooled: &Tensor) -> Tensor {
        self.video_proj.forward(pooled)
    }

    /// Calibrate the trunk on simulator data: the image head classifies the
    /// governing light state, the video head classifies the ego turn
    /// direction over a clip window. Heads are dropped afterwards.
    pub fn train(&self, ds: &Dataset, iters: usize, seed: u64) {
        let mut rng = derive_rng(seed, "proxy:train");
        let mut init_rng = derive_rng(seed, "proxy:init");
        let mut head_ps = ParamSet::new();
        let light_head = Linear::new(&mut head_ps, &mut init_rng, "head.light", self.feature_dim, 3, true);
        let motion_head = Linear::new(&mut head_ps, &mut init_rng, "head.motion", self.feature_dim, 3, true);
        let mut all = ParamSet::new();
        all.extend(&self.params);
        all.extend(&head_ps);
        let mut opt = AdamW::new(1e-3, 0.0);
        let tuples = ds.tuples();
        let clip = ds.meta.clip_frames;
        for _ in 0..iters {
            let (e, s) = tuples[rng.gen_range(0..tuples.len())];
            let label = ds.label(e, s);
            let frame = ds.frame(e, s);
            // light-state classification on the front view
            let feat = self.image_feature_tensor(&frame.images[1]);
            let light_loss = light_head
                .forward(&feat)
                .cross_entropy_logits(&[label.light as usize]);
            // motion classification over the future clip window
            let target_clip = ds.clip_target(e, s);
            let per_frame: Vec<Tensor> = (0..clip)
                .map(|t| self.image_feature_tensor(&target_clip.frame_image(1, t)))
                .collect();
            let video_feat = self
                .video_proj
                .forward(&Tensor::concat(&per_frame, 0).mean_axis(0).reshape(&[1, self.feature_dim]));
            let end = (s + clip).min(ds.episodes[e].steps.len() - 1);
            let dh = crate::util::wrap_angle(ds.label(e, end).ego[2] - label.ego[2]);
            let motion_class = if dh > 0.12 {
                0 // turning left
            } else if dh < -0.12 {
                2 // turning right
            } else {
                1 // straight
            };
            let motion_loss = motion_head
                .forward(&video_feat)
                .cross_entropy_logits(&[motion_class]);
            let loss = light_loss.add(&motion_loss);
            let grads = loss.backward();
            opt.step(&all, &grads);
        }
        // heads are local and dropped here; the calibrated trunk remains
    }

    pub fn save(&self, path: &Path) -> std::io::Result<String> {
        let ckpt = Checkpoint {
            header: CheckpointHeader {
                schema_version: SCHEMA_VERSION,
                stage: StageTag::Stage1,
                config_hash: String::new(),
                parent_hash: None,
                vocab_version: 0,
                frozen: vec!["proxy.".into()],
                module_hashes: BTreeMap::from([("proxy".into(), self.content_hash())]),
                arm: format!("proxy-v{PROXY_VERSION}"),
            },
            params: self.params.snapshot(),
        };
        ckpt.save(path).map_err(|e| std::io::Error::other(e.to_string()))
    }

    pub fn load(cfg: &RunConfig, path: &Path) -> std::io::Result<ProxyNets> {
        let mut rng = derive_rng(0, "proxy:load-init");
        let nets = ProxyNets::new(&cfg.eval, cfg.microworld.raster_size, &mut rng);
        let ckpt = Checkpoint::load(path).map_err(|e| std::io::Error::other(e.to_string()))?;
        nets.params
            .load_snapshot(&ckpt.params)
            .map_err(std::io::Error::other)?;
        nets.params.set_trainable(false);
        Ok(nets)
    }
}

/// Build, train, and persist the proxy nets next to a dataset.
pub fn train_and_save_proxy(
    ds: &Dataset,
    cfg: &RunConfig,
    iters: usize,
    dir: &Path,
) -> std::io::Result<String> {
    let mut rng = derive_rng(cfg.seed, "proxy:new");
    let nets = ProxyNets::new(&cfg.eval, cfg.microworld.raster_size, &mut rng);
    nets.train(ds, iters, cfg.seed);
    nets.save(&dir.join("proxy.ckpt"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (RunConfig, Dataset) {
        let mut cfg = RunConfig::micro();
        cfg.data.train_scenarios = 2;
        cfg.data.eval_scenarios = 1;
        cfg.data.steps_per_episode = 10;
        let ds = Dataset::collect(&cfg);
        (cfg, ds)
    }

    #[test]
    fn features_have_configured_dim_and_are_deterministic() {
        let (cfg, ds) = tiny();
        let mut rng = derive_rng(1, "proxy-test");
        let nets = ProxyNets::new(&cfg.eval, cfg.microworld.raster_size, &mut rng);
        let frame = ds.frame(0, 0);
        let f1 = nets.image_features(&frame.images[1]);
        let f2 = nets.image_features(&frame.images[1]);
        assert_eq!(f1.len(), cfg.eval.feature_dim);
        assert_eq!(f1, f2);
        let clip = ds.clip_target(0, 0);
        let v = nets.video_features_view(&clip, 0);
        assert_eq!(v.len(), cfg.eval.feature_dim);
    }

    #[test]
    fn training_changes_hash_then_roundtrips() {
        let (cfg, ds) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let mut rng = derive_rng(2, "proxy-train");
        let nets = ProxyNets::new(&cfg.eval, cfg.microworld.raster_size, &mut rng);
        let before = nets.content_hash();
        nets.train(&ds, 5, 7);
        let after = nets.content_hash();
        assert_ne!(before, after, "training must move the trunk");
        nets.save(&dir.path().join("proxy.ckpt")).unwrap();
        let loaded = ProxyNets::load(&cfg, &dir.path().join("proxy.ckpt")).unwrap();
        assert_eq!(loaded.content_hash(), after, "hash-frozen roundtrip");
        let frame = ds.frame(0, 3);
        assert_eq!(
            loaded.image_features(&frame.images[0]),
            nets.image_features(&frame.images[0])
        );
    }
}
