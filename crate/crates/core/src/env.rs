//! The per-clip decision process the agent interacts with.
//!
//! Each episode walks one clip. The state is the current attention box
//! (starting at the whole frame) plus the step counter; actions either
//! compose one of the prior boxes onto the current box (a zoom, rewarded
//! `r_region`) or classify the clip (rewarded `r_correct`/`r_incorrect`,
//! terminal). Observations are rendered fresh from the full-resolution
//! source each step, so deeper boxes genuinely see more detail. The step
//! counter rides along as a one-hot so a finite-horizon policy can't loop
//! forever.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::clip::{Label, LabeledClip, VideoClip};
use crate::error::{Error, Result};
use crate::flow::{self, TvL1Params};
use crate::geom::{default_prior_boxes, RegionBox};

/// Environment parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    /// Observation frames.
    pub t_in: usize,
    /// Observation height.
    pub h_in: usize,
    /// Observation width.
    pub w_in: usize,
    /// Episode step cap N: at most N-1 zooms, then a forced classify.
    pub n_steps: usize,
    /// Zoom targets, in the current box's local frame.
    pub prior_boxes: Vec<RegionBox>,
    pub r_correct: f64,
    pub r_incorrect: f64,
    /// Region reward; must sit strictly between 0 and `r_correct` so
    /// endless zooming never beats a correct final answer.
    pub r_region: f64,
    /// Attach a TV-L1 flow channel pair to observations.
    pub use_flow: bool,
    pub flow: TvL1Params,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            t_in: 16,
            h_in: 64,
            w_in: 64,
            n_steps: 5,
            prior_boxes: default_prior_boxes(5).expect("default layout"),
            r_correct: 1.0,
            r_incorrect: -1.0,
            r_region: 0.5,
            use_flow: false,
            flow: TvL1Params::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_in == 0 || self.h_in == 0 || self.w_in == 0 {
            return Err(Error::Config("observation dims must be nonzero".into()));
        }
        if self.n_steps == 0 {
            return Err(Error::Config("n_steps must be at least 1".into()));
        }
        if self.prior_boxes.is_empty() {
            return Err(Error::Config("need at least one prior box".into()));
        }
        for b in &self.prior_boxes {
            b.validate()?;
        }
        if !(self.r_region > 0.0 && self.r_region < self.r_correct) {
            return Err(Error::Config(format!(
                "r_region must lie in (0, r_correct): {} vs {}",
                self.r_region, self.r_correct
            )));
        }
        if self.r_incorrect >= 0.0 {
            return Err(Error::Config("r_incorrect must be negative".into()));
        }
        Ok(())
    }

    pub fn num_regions(&self) -> usize {
        self.prior_boxes.len()
    }

    /// Region actions first, then Classify(Violent), Classify(NonViolent).
    pub fn num_actions(&self) -> usize {
        self.prior_boxes.len() + 2
    }

    /// Range every Q value and bootstrapped target is clipped to:
    /// the worst single reward up to the best possible episode return.
    pub fn q_bounds(&self) -> (f64, f64) {
        (
            self.r_incorrect,
            self.r_correct + (self.n_steps as f64 - 1.0) * self.r_region,
        )
    }
}

/// Agent actions. Region indices refer to `prior_boxes` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Action {
    Region { index: usize },
    Classify { class: Label },
}

impl Action {
    pub fn index(&self, num_regions: usize) -> usize {
        match self {
            Action::Region { index } => *index,
            Action::Classify { class } => num_regions + class.index(),
        }
    }

    pub fn from_index(i: usize, num_regions: usize) -> Result<Action> {
        if i < num_regions {
            Ok(Action::Region { index: i })
        } else if i < num_regions + 2 {
            Ok(Action::Classify { class: Label::from_index(i - num_regions)? })
        } else {
            Err(Error::InvalidAction(format!(
                "action index {i} out of range for {num_regions} regions"
            )))
        }
    }
}

/// What the network sees at one step.
#[derive(Debug, Clone)]
pub struct Observation {
    pub rgb: VideoClip<f32>,
    pub flow: Option<VideoClip<f32>>,
    pub step_onehot: Vec<f32>,
}

/// One environment interaction.
#[derive(Debug, Clone)]
pub struct Transition {
    pub obs_before: Observation,
    pub action: Action,
    pub reward: f64,
    /// None once the episode is over.
    pub obs_after: Option<Observation>,
    pub done: bool,
    pub label: Label,
    pub box_before: RegionBox,
    pub box_after: RegionBox,
    pub step_before: usize,
}

/// Render the observation for a given attention box and step counter.
/// Frames are subsampled first (cheaper, commutes with the per-frame crop),
/// then cropped, resized, and normalized; the flow stream is sliced from
/// the precomputed full-resolution flow with the same box.
pub fn render_observation(
    cfg: &EnvConfig,
    source: &LabeledClip,
    source_flow: Option<&VideoClip<f32>>,
    cur_box: &RegionBox,
    step: usize,
) -> Result<Observation> {
    let sampled = source.clip.sample_frames(cfg.t_in)?;
    let mut rgb = sampled.to_f32().crop_resize(cur_box, cfg.h_in, cfg.w_in)?;
    rgb.normalize_in_place();
    let flow = match (cfg.use_flow, source_flow) {
        (false, _) => None,
        (true, Some(f)) => Some(f.sample_frames(cfg.t_in)?.crop_resize(cur_box, cfg.h_in, cfg.w_in)?),
        (true, None) => {
            return Err(Error::Config(
                "use_flow is set but no flow stream was provided".into(),
            ))
        }
    };
    let mut step_onehot = vec![0.0; cfg.n_steps];
    if step < cfg.n_steps {
        step_onehot[step] = 1.0;
    }
    Ok(Observation { rgb, flow, step_onehot })
}

/// Compute the full-resolution flow stream for a source clip.
pub fn source_flow(cfg: &EnvConfig, source: &LabeledClip) -> Result<VideoClip<f32>> {
    flow::clip_flow(&source.clip, &cfg.flow)
}

/// One episode over one clip.
#[derive(Debug, Clone)]
pub struct Env {
    cfg: EnvConfig,
    source: Arc<LabeledClip>,
    source_flow: Option<Arc<VideoClip<f32>>>,
    cur_box: RegionBox,
    step: usize,
    done: bool,
}

impl Env {
    /// Start an episode. `precomputed_flow` skips the TV-L1 solve when the
    /// caller already has the clip's flow; with `use_flow` set and nothing
    /// passed, it is computed here.
    pub fn reset(
        cfg: EnvConfig,
        source: Arc<LabeledClip>,
        precomputed_flow: Option<Arc<VideoClip<f32>>>,
    ) -> Result<(Env, Observation)> {
        cfg.validate()?;
        let c = &source.clip;
        if c.t < cfg.t_in || c.h < cfg.h_in || c.w < cfg.w_in {
            return Err(Error::ShapeMismatch(format!(
                "clip {}x{}x{} is smaller than the observation {}x{}x{}",
                c.t, c.h, c.w, cfg.t_in, cfg.h_in, cfg.w_in
            )));
        }
        let source_flow = match (cfg.use_flow, precomputed_flow) {
            (false, _) => None,
            (true, Some(f)) => Some(f),
            (true, None) => Some(Arc::new(self::source_flow(&cfg, &source)?)),
        };
        let env = Env {
            cfg,
            source,
            source_flow,
            cur_box: RegionBox::IDENTITY,
            step: 0,
            done: false,
        };
        let obs = env.observation()?;
        Ok((env, obs))
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn label(&self) -> Label {
        self.source.label
    }

    pub fn source(&self) -> &Arc<LabeledClip> {
        &self.source
    }

    pub fn current_box(&self) -> RegionBox {
        self.cur_box
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Render the current observation.
    pub fn observation(&self) -> Result<Observation> {
        render_observation(
            &self.cfg,
            &self.source,
            self.source_flow.as_deref(),
            &self.cur_box,
            self.step,
        )
    }

    /// Validity of each action index at the current step: Region actions
    /// are masked out at the final step, Classify is always available.
    pub fn action_mask(&self) -> Vec<bool> {
        action_mask(&self.cfg, self.step)
    }

    /// Apply an action. Region actions at the final step and any action
    /// after termination are contract errors; a zoom whose crop would drop
    /// below one source pixel reports the degenerate-zoom error.
    pub fn step(&mut self, action: Action) -> Result<Transition> {
        if self.done {
            return Err(Error::InvalidAction("episode is already done".into()));
        }
        let obs_before = self.observation()?;
        let box_before = self.cur_box;
        let step_before = self.step;
        match action {
            Action::Region { index } => {
                if index >= self.cfg.num_regions() {
                    return Err(Error::InvalidAction(format!(
                        "region {index} out of {}",
                        self.cfg.num_regions()
                    )));
                }
                if self.step + 1 >= self.cfg.n_steps {
                    return Err(Error::InvalidAction(
                        "region action at the final step; caller must mask".into(),
                    ));
                }
                let new_box = self.cur_box.compose(&self.cfg.prior_boxes[index]);
                // Fails as degenerate before state changes.
                new_box.pixel_rect(self.source.clip.w, self.source.clip.h)?;
                self.cur_box = new_box;
                self.step += 1;
                let obs_after = self.observation()?;
                Ok(Transition {
                    obs_before,
                    action,
                    reward: self.cfg.r_region,
                    obs_after: Some(obs_after),
                    done: false,
                    label: self.source.label,
                    box_before,
                    box_after: self.cur_box,
                    step_before,
                })
            }
            Action::Classify { class } => {
                self.done = true;
                let reward = if class == self.source.label {
                    self.cfg.r_correct
                } else {
                    self.cfg.r_incorrect
                };
                Ok(Transition {
                    obs_before,
                    action,
                    reward,
                    obs_after: None,
                    done: true,
                    label: self.source.label,
                    box_before,
                    box_after: box_before,
                    step_before,
                })
            }
        }
    }
}

/// Mask for an arbitrary step counter (used for bootstrap targets, where
/// only the successor's step matters).
pub fn action_mask(cfg: &EnvConfig, step: usize) -> Vec<bool> {
    let regions_ok = step + 1 < cfg.n_steps;
    let mut mask = vec![regions_ok; cfg.num_regions()];
    mask.extend([true, true]);
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clip::{Channels, DEFAULT_FPS};
    use crate::rng::Pcg32;

    fn test_source(t: usize, size: usize) -> Arc<LabeledClip> {
        let mut rng = Pcg32::new(55, 0);
        let data: Vec<u8> = (0..t * size * size * 3).map(|_| rng.below(256) as u8).collect();
        Arc::new(LabeledClip {
            clip: VideoClip::new(t, size, size, Channels::Rgb, DEFAULT_FPS, data).unwrap(),
            label: Label::Violent,
            gt_box: None,
            seed: 0,
        })
    }

    fn small_cfg() -> EnvConfig {
        EnvConfig {
            t_in: 4,
            h_in: 8,
            w_in: 8,
            ..EnvConfig::default()
        }
    }

    #[test]
    fn reset_starts_at_identity_with_step_zero() {
        let (env, obs) = Env::reset(small_cfg(), test_source(6, 32), None).unwrap();
        assert_eq!(env.current_box(), RegionBox::IDENTITY);
        assert_eq!(env.step_index(), 0);
        assert_eq!(obs.step_onehot, vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!((obs.rgb.t, obs.rgb.h, obs.rgb.w), (4, 8, 8));
        assert!(obs.flow.is_none());
        assert!(obs.rgb.data.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn classify_rewards_match_label() {
        let src = test_source(6, 32);
        let (mut env, _) = Env::reset(small_cfg(), src.clone(), None).unwrap();
        let tr = env.step(Action::Classify { class: Label::Violent }).unwrap();
        assert_eq!(tr.reward, 1.0);
        assert!(tr.done);
        assert!(tr.obs_after.is_none());
        assert_eq!(tr.label, Label::Violent);

        let (mut env, _) = Env::reset(small_cfg(), src, None).unwrap();
        let tr = env.step(Action::Classify { class: Label::NonViolent }).unwrap();
        assert_eq!(tr.reward, -1.0);
        assert!(tr.done);
    }

    #[test]
    fn region_rewards_and_box_composition() {
        let (mut env, _) = Env::reset(small_cfg(), test_source(6, 64), None).unwrap();
        let tr = env.step(Action::Region { index: 0 }).unwrap();
        assert_eq!(tr.reward, 0.5);
        assert!(!tr.done);
        assert_eq!(tr.box_before, RegionBox::IDENTITY);
        assert_eq!(env.current_box(), RegionBox::new(0.0, 0.0, 0.6, 0.6).unwrap());
        assert_eq!(env.step_index(), 1);
        let obs = tr.obs_after.unwrap();
        assert_eq!(obs.step_onehot, vec![0.0, 1.0, 0.0, 0.0, 0.0]);

        let tr = env.step(Action::Region { index: 3 }).unwrap();
        let want = RegionBox::new(0.0, 0.0, 0.6, 0.6)
            .unwrap()
            .compose(&RegionBox::new(0.4, 0.4, 1.0, 1.0).unwrap());
        assert_eq!(tr.box_after, want);
        assert_eq!(env.current_box(), want);
    }

    #[test]
    fn mask_forbids_regions_only_at_final_step() {
        let cfg = small_cfg();
        for step in 0..3 {
            let m = action_mask(&cfg, step);
            assert!(m[..5].iter().all(|&v| v), "step {step}");
            assert!(m[5] && m[6]);
        }
        let m = action_mask(&cfg, 4);
        assert!(m[..5].iter().all(|&v| !v));
        assert!(m[5] && m[6]);
    }

    #[test]
    fn region_at_final_step_errors() {
        let (mut env, _) = Env::reset(small_cfg(), test_source(6, 64), None).unwrap();
        for _ in 0..4 {
            env.step(Action::Region { index: 4 }).unwrap();
        }
        assert_eq!(env.step_index(), 4);
        assert!(matches!(
            env.step(Action::Region { index: 4 }),
            Err(Error::InvalidAction(_))
        ));
        // Classify still works.
        assert!(env.step(Action::Classify { class: Label::Violent }).is_ok());
    }

    #[test]
    fn stepping_after_done_errors() {
        let (mut env, _) = Env::reset(small_cfg(), test_source(6, 32), None).unwrap();
        env.step(Action::Classify { class: Label::Violent }).unwrap();
        assert!(env.step(Action::Classify { class: Label::Violent }).is_err());
    }

    #[test]
    fn deep_zoom_on_tiny_source_is_degenerate() {
        let cfg = EnvConfig {
            t_in: 2,
            h_in: 2,
            w_in: 2,
            n_steps: 12,
            ..EnvConfig::default()
        };
        let (mut env, _) = Env::reset(cfg, test_source(2, 8), None).unwrap();
        // Repeated center zooms shrink 8px by 0.6 each time; the composed
        // crop eventually rounds below one pixel and must refuse.
        let mut saw_degenerate = false;
        for _ in 0..10 {
            match env.step(Action::Region { index: 4 }) {
                Ok(_) => {}
                Err(Error::DegenerateZoom { .. }) => {
                    saw_degenerate = true;
                    break;
                }
                Err(e) => panic!("unexpected error {e}"),
            }
        }
        assert!(saw_degenerate);
    }

    #[test]
    fn undersized_clip_is_rejected() {
        let cfg = EnvConfig { t_in: 8, h_in: 64, w_in: 64, ..EnvConfig::default() };
        assert!(Env::reset(cfg, test_source(6, 32), None).is_err());
    }

    #[test]
    fn episode_returns_stay_in_bounds() {
        let cfg = small_cfg();
        let (lo, hi) = cfg.q_bounds();
        assert_eq!((lo, hi), (-1.0, 3.0));
        let src = test_source(6, 64);
        let mut rng = Pcg32::new(66, 0);
        for _ in 0..200 {
            let (mut env, _) = Env::reset(cfg.clone(), src.clone(), None).unwrap();
            let mut ret = 0.0;
            loop {
                let mask = env.action_mask();
                let valid: Vec<usize> = (0..cfg.num_actions()).filter(|&i| mask[i]).collect();
                let a = Action::from_index(valid[rng.below(valid.len())], 5).unwrap();
                let tr = env.step(a).unwrap();
                ret += tr.reward;
                if tr.done {
                    break;
                }
            }
            assert!((lo..=hi).contains(&ret), "return {ret}");
        }
    }

    #[test]
    fn observations_are_bit_identical_across_resets() {
        let src = test_source(6, 32);
        let (env1, obs1) = Env::reset(small_cfg(), src.clone(), None).unwrap();
        let (_, obs2) = Env::reset(small_cfg(), src, None).unwrap();
        assert_eq!(obs1.rgb.data, obs2.rgb.data);
        let again = env1.observation().unwrap();
        assert_eq!(obs1.rgb.data, again.rgb.data);
    }

    #[test]
    fn flow_channel_is_attached_when_requested() {
        let cfg = EnvConfig {
            t_in: 3,
            h_in: 8,
            w_in: 8,
            use_flow: true,
            ..EnvConfig::default()
        };
        let (env, obs) = Env::reset(cfg, test_source(4, 20), None).unwrap();
        let f = obs.flow.expect("flow stream");
        assert_eq!((f.t, f.h, f.w), (3, 8, 8));
        assert_eq!(f.channels, Channels::Flow);
        assert!(f.data.iter().all(|v| (-1.0..=1.0).contains(v)));
        let tr_obs = env.observation().unwrap();
        assert!(tr_obs.flow.is_some());
    }

    #[test]
    fn action_index_round_trip() {
        for i in 0..7 {
            let a = Action::from_index(i, 5).unwrap();
            assert_eq!(a.index(5), i);
        }
        assert_eq!(Action::Classify { class: Label::Violent }.index(5), 5);
        assert_eq!(Action::Classify { class: Label::NonViolent }.index(5), 6);
        assert!(Action::from_index(7, 5).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = small_cfg();
        cfg.r_region = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.r_region = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.r_incorrect = 0.5;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.prior_boxes.clear();
        assert!(cfg.validate().is_err());
    }
}
