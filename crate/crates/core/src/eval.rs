//! Greedy evaluation: roll the policy over held-out clips, score
//! classification and localization, and emit the metrics and per-step
//! trajectory records the CLI serves.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::clip::{Label, LabeledClip};
use crate::env::{Action, Env, EnvConfig};
use crate::error::{Error, Result};
use crate::geom::RegionBox;
use crate::qnet::NetParams;
use crate::trainer::{argmax_masked, effective_mask};

/// Precision, recall, and their harmonic mean for one class; all zero
/// when the class never appears in predictions or ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Classes {
    pub violent: ClassMetrics,
    pub nonviolent: ClassMetrics,
}

/// Evaluation summary. The confusion matrix is indexed
/// [actual][predicted] with violent first, and every derived rate can be
/// recomputed from it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub classes: Classes,
    pub avg_actions: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub median_loc_iou: Option<f64>,
    pub confusion: [[u64; 2]; 2],
    pub config_echo: serde_json::Value,
}

/// One logged interaction step; the box is the attention region the agent
/// saw when it chose the action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub episode: usize,
    pub step: usize,
    pub action: Action,
    pub reward: f64,
    pub r#box: RegionBox,
    pub q_values: Vec<f32>,
    pub clip: usize,
}

/// One evaluated episode.
#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub clip_index: usize,
    pub label: Label,
    pub predicted: Label,
    /// Actions taken, the terminal classification included.
    pub actions: usize,
    pub final_box: RegionBox,
    pub ret: f64,
    pub steps: Vec<StepRecord>,
}

/// Run one clip to termination under the greedy policy (ties to the
/// lowest action index).
pub fn greedy_episode(
    params: &NetParams<f32>,
    env_cfg: &EnvConfig,
    no_localization: bool,
    clip: Arc<LabeledClip>,
    episode: usize,
    clip_index: usize,
) -> Result<EpisodeResult> {
    let (mut env, _) = Env::reset(env_cfg.clone(), clip, None)?;
    let mut steps = Vec::new();
    let mut ret = 0.0;
    loop {
        let obs = env.observation()?;
        let q = params.forward(&obs)?;
        let mask = effective_mask(env_cfg, env.step_index(), no_localization);
        let index = argmax_masked(&q, &mask)
            .ok_or_else(|| Error::InvalidAction("no valid action to take".into()))?;
        let action = Action::from_index(index, env_cfg.num_regions())?;
        let tr = env.step(action)?;
        ret += tr.reward;
        steps.push(StepRecord {
            episode,
            step: tr.step_before,
            action: tr.action,
            reward: tr.reward,
            r#box: tr.box_before,
            q_values: q,
            clip: clip_index,
        });
        if tr.done {
            let predicted = match tr.action {
                Action::Classify { class } => class,
                Action::Region { .. } => unreachable!("episodes end on a classification"),
            };
            return Ok(EpisodeResult {
                clip_index,
                label: tr.label,
                predicted,
                actions: steps.len(),
                final_box: tr.box_after,
                ret,
                steps,
            });
        }
    }
}

/// Median of an unsorted slice, averaging the middle pair on even length.
fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite iou values"));
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        Some(sorted[mid])
    } else {
        Some(0.5 * (sorted[mid - 1] + sorted[mid]))
    }
}

fn rate(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn class_metrics(confusion: &[[u64; 2]; 2], class: usize) -> ClassMetrics {
    let tp = confusion[class][class];
    let precision = rate(tp, confusion[0][class] + confusion[1][class]);
    let recall = rate(tp, confusion[class][0] + confusion[class][1]);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassMetrics { precision, recall, f1 }
}

/// Fold episode outcomes into the metrics summary.
pub fn summarize(
    confusion: [[u64; 2]; 2],
    actions: &[usize],
    loc_ious: &[f64],
    config_echo: serde_json::Value,
) -> Metrics {
    let total: u64 = confusion.iter().flatten().sum();
    let accuracy = rate(confusion[0][0] + confusion[1][1], total);
    let avg_actions = if actions.is_empty() {
        0.0
    } else {
        actions.iter().sum::<usize>() as f64 / actions.len() as f64
    };
    Metrics {
        accuracy,
        classes: Classes {
            violent: class_metrics(&confusion, 0),
            nonviolent: class_metrics(&confusion, 1),
        },
        avg_actions,
        median_loc_iou: median(loc_ious),
        confusion,
        config_echo,
    }
}

/// Evaluate the net over `(corpus index, clip)` pairs: greedy rollouts,
/// classification counts, and final-box IoU against the ground-truth box
/// on correctly classified violent clips.
pub fn evaluate(
    params: &NetParams<f32>,
    env_cfg: &EnvConfig,
    no_localization: bool,
    items: &[(usize, Arc<LabeledClip>)],
    config_echo: serde_json::Value,
) -> Result<(Metrics, Vec<EpisodeResult>)> {
    use rayon::prelude::*;
    if items.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    let results: Result<Vec<EpisodeResult>> = items
        .par_iter()
        .enumerate()
        .map(|(episode, (clip_index, clip))| {
            greedy_episode(params, env_cfg, no_localization, clip.clone(), episode, *clip_index)
        })
        .collect();
    let results = results?;
    let mut confusion = [[0u64; 2]; 2];
    let mut actions = Vec::with_capacity(results.len());
    let mut loc_ious = Vec::new();
    for (r, (_, clip)) in results.iter().zip(items) {
        confusion[r.label.index()][r.predicted.index()] += 1;
        actions.push(r.actions);
        if r.label == Label::Violent && r.predicted == Label::Violent {
            if let Some(gt) = clip.gt_box {
                loc_ious.push(r.final_box.iou(&gt));
            }
        }
    }
    Ok((summarize(confusion, &actions, &loc_ious, config_echo), results))
}

/// Write every step of every episode as JSON lines.
pub fn write_trajectories(results: &[EpisodeResult], w: &mut dyn Write) -> Result<()> {
    for r in results {
        for s in &r.steps {
            serde_json::to_writer(&mut *w, s)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qnet::NetConfig;
    use crate::qnet::StreamKind;
    use crate::synth::{generate_corpus_clips, SynthConfig};

    fn small_env_cfg() -> EnvConfig {
        EnvConfig { t_in: 6, h_in: 16, w_in: 16, ..EnvConfig::default() }
    }

    fn zero_net() -> NetParams<f32> {
        let cfg = NetConfig {
            stream: StreamKind::Rgb,
            t_in: 6,
            h_in: 16,
            w_in: 16,
            conv_channels: vec![4, 6],
            fc_units: 24,
            ..NetConfig::default()
        };
        NetParams::zeros(cfg).unwrap()
    }

    fn small_clips(n: usize) -> Vec<Arc<LabeledClip>> {
        let cfg = SynthConfig {
            n_clips: n,
            frame_size: 48,
            t: 12,
            sprites: 4,
            seed: 9,
            ..SynthConfig::default()
        };
        generate_corpus_clips(&cfg).unwrap().into_iter().map(Arc::new).collect()
    }

    #[test]
    fn iou_arithmetic_matches_hand_values() {
        let a = RegionBox::new(0.0, 0.0, 0.5, 0.5).unwrap();
        let b = RegionBox::new(0.25, 0.25, 0.75, 0.75).unwrap();
        let expected = 0.0625 / 0.4375;
        assert!((a.iou(&b) - expected).abs() < 1e-12);
        assert_eq!(a.iou(&a), 1.0);
        let c = RegionBox::new(0.6, 0.6, 1.0, 1.0).unwrap();
        assert_eq!(a.iou(&c), 0.0);
    }

    #[test]
    fn summarize_matches_hand_computed_confusion() {
        let m = summarize([[45, 5], [8, 42]], &[1, 2, 3], &[], serde_json::json!({}));
        assert!((m.accuracy - 0.87).abs() < 1e-12);
        assert!((m.classes.violent.precision - 45.0 / 53.0).abs() < 1e-12);
        assert!((m.classes.violent.recall - 45.0 / 50.0).abs() < 1e-12);
        let p = m.classes.violent.precision;
        let r = m.classes.violent.recall;
        assert!((m.classes.violent.f1 - 2.0 * p * r / (p + r)).abs() < 1e-12);
        assert!((m.avg_actions - 2.0).abs() < 1e-12);
        assert_eq!(m.median_loc_iou, None);

        let tp = m.confusion[0][0] as f64;
        let acc = (m.confusion[0][0] + m.confusion[1][1]) as f64
            / m.confusion.iter().flatten().sum::<u64>() as f64;
        assert_eq!(acc, m.accuracy, "accuracy recomputable from the matrix");
        assert_eq!(tp / (m.confusion[0][0] + m.confusion[1][0]) as f64, p);
    }

    #[test]
    fn summarize_handles_empty_classes() {
        let m = summarize([[0, 0], [3, 7]], &[1], &[], serde_json::json!({}));
        assert_eq!(m.classes.violent.recall, 0.0);
        assert_eq!(m.classes.violent.f1, 0.0);
        assert!((m.classes.nonviolent.recall - 0.7).abs() < 1e-12);
    }

    #[test]
    fn median_splits_odd_and_even() {
        assert_eq!(median(&[0.3, 0.1, 0.2]), Some(0.2));
        assert_eq!(median(&[0.4, 0.1, 0.2, 0.3]), Some(0.25));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn metrics_json_roundtrips_with_schema_key_order() {
        let m = summarize(
            [[4, 1], [2, 3]],
            &[1, 5],
            &[0.3, 0.5, 0.4],
            serde_json::json!({"seed": 7}),
        );
        let text = serde_json::to_string(&m).unwrap();
        let back: Metrics = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
        let order = ["accuracy", "classes", "avg_actions", "median_loc_iou", "confusion", "config_echo"];
        let mut last = 0;
        for key in order {
            let pos = text.find(&format!("\"{key}\"")).expect(key);
            assert!(pos > last || last == 0, "{key} out of order");
            last = pos;
        }
        let no_iou = summarize([[1, 0], [0, 1]], &[1], &[], serde_json::json!({}));
        assert!(!serde_json::to_string(&no_iou).unwrap().contains("median_loc_iou"));
    }

    #[test]
    fn zero_net_rolls_into_region_zero_until_forced_to_classify() {
        let clips = small_clips(2);
        let env_cfg = small_env_cfg();
        let r = greedy_episode(&zero_net(), &env_cfg, false, clips[0].clone(), 0, 0).unwrap();
        assert_eq!(r.actions, env_cfg.n_steps);
        assert_eq!(r.steps.len(), env_cfg.n_steps);
        let prior = env_cfg.prior_boxes[0];
        let mut expect = RegionBox::IDENTITY;
        for (k, s) in r.steps.iter().enumerate() {
            assert_eq!(s.step, k);
            assert_eq!(s.r#box, expect, "logged box is the pre-action view");
            if k + 1 < env_cfg.n_steps {
                assert_eq!(s.action, Action::Region { index: 0 });
                assert_eq!(s.reward, 0.5);
                expect = expect.compose(&prior);
            } else {
                assert_eq!(s.action, Action::Classify { class: Label::Violent });
            }
            assert_eq!(s.q_values.len(), env_cfg.num_actions());
        }
        assert_eq!(r.final_box, expect);
        assert_eq!(r.predicted, Label::Violent);
        let expected_ret = 0.5 * (env_cfg.n_steps - 1) as f64
            + if r.label == Label::Violent { 1.0 } else { -1.0 };
        assert!((r.ret - expected_ret).abs() < 1e-12);
    }

    #[test]
    fn ablated_episode_is_a_single_classification() {
        let clips = small_clips(2);
        let r = greedy_episode(&zero_net(), &small_env_cfg(), true, clips[0].clone(), 0, 0).unwrap();
        assert_eq!(r.actions, 1);
        assert_eq!(r.final_box, RegionBox::IDENTITY);
        assert_eq!(r.steps[0].step, 0);
    }

    #[test]
    fn evaluate_is_deterministic_and_counts_everything() {
        let clips = small_clips(6);
        let items: Vec<(usize, Arc<LabeledClip>)> =
            clips.iter().cloned().enumerate().collect();
        let env_cfg = small_env_cfg();
        let net = zero_net();
        let echo = serde_json::json!({"run": "test"});
        let (m1, r1) = evaluate(&net, &env_cfg, false, &items, echo.clone()).unwrap();
        let (m2, _) = evaluate(&net, &env_cfg, false, &items, echo.clone()).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(m1.confusion.iter().flatten().sum::<u64>(), 6);
        assert_eq!(m1.avg_actions, env_cfg.n_steps as f64);
        assert_eq!(r1.len(), 6);
        assert_eq!(m1.config_echo, echo);
        assert!((1.0..=env_cfg.n_steps as f64).contains(&m1.avg_actions));

        let (ma, ra) = evaluate(&net, &env_cfg, true, &items, echo).unwrap();
        assert_eq!(ma.avg_actions, 1.0, "ablation classifies immediately");
        assert!(ra.iter().all(|r| r.actions == 1));

        assert!(evaluate(&net, &env_cfg, false, &[], serde_json::json!({})).is_err());
    }

    #[test]
    fn trajectory_lines_parse_back() {
        let clips = small_clips(2);
        let items: Vec<(usize, Arc<LabeledClip>)> = clips.iter().cloned().enumerate().collect();
        let env_cfg = small_env_cfg();
        let (_, results) =
            evaluate(&zero_net(), &env_cfg, false, &items, serde_json::json!({})).unwrap();
        let mut buf = Vec::new();
        write_trajectories(&results, &mut buf).unwrap();
        let lines: Vec<&[u8]> = buf.split(|&b| b == b'\n').filter(|l| !l.is_empty()).collect();
        let total_steps: usize = results.iter().map(|r| r.steps.len()).sum();
        assert_eq!(lines.len(), total_steps);
        let first: StepRecord = serde_json::from_slice(lines[0]).unwrap();
        assert_eq!(first.episode, 0);
        assert_eq!(first.step, 0);
        assert_eq!(first.r#box, RegionBox::IDENTITY);
    }
}
