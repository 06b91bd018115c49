//! Procedural motion for the six action templates.
//!
//! Joints 0/1 are the legs and 2/3 the arms; any further joints are torso
//! points that only follow the root. Each segment is generated from its own
//! local time so templates compose by concatenation.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::clip::MotionFrameLayout;
use super::vocab::ActionTemplate;

const REST_HEIGHT: f64 = 0.95;
const NOISE_STD: f64 = 0.01;

/// Per-frame state before velocities are derived.
#[derive(Clone, Default)]
struct Pose {
    root_turn: f64,
    root_vel: [f64; 2],
    height: f64,
    joints: Vec<[f64; 3]>,
    swing: Vec<f64>,
    contact: [f64; 4],
}

fn rest_joint(j: usize) -> [f64; 3] {
    match j {
        0 => [-0.1, -0.9, 0.0],
        1 => [0.1, -0.9, 0.0],
        2 => [-0.3, 0.4, 0.0],
        3 => [0.3, 0.4, 0.0],
        k => [0.0, 0.2 + 0.1 * k as f64, 0.0],
    }
}

fn bump(x: f64, center: f64, width: f64) -> f64 {
    (-0.5 * ((x - center) / width).powi(2)).exp()
}

/// Segment parameters drawn once per segment.
struct Style {
    amp: f64,
    freq: f64,
    phase: f64,
}

fn pose_at(template: ActionTemplate, tau: f64, dur: f64, style: &Style, joints: usize) -> Pose {
    let mut p = Pose {
        height: REST_HEIGHT,
        joints: (0..joints).map(rest_joint).collect(),
        swing: vec![0.0; joints],
        contact: [1.0; 4],
        ..Default::default()
    };
    let w = 2.0 * PI * style.freq;
    let s = (w * tau + style.phase).sin();
    let a = style.amp;
    match template {
        ActionTemplate::Walk | ActionTemplate::Run => {
            let run = template == ActionTemplate::Run;
            let (leg, arm, speed) = if run { (0.4 * a, 0.25 * a, 3.0) } else { (0.25 * a, 0.1 * a, 1.2) };
            p.root_vel = [0.0, speed];
            p.height = REST_HEIGHT + if run { 0.05 } else { 0.02 } * (2.0 * (w * tau + style.phase)).sin().abs();
            p.swing[0] = leg * s;
            p.swing[1] = -leg * s;
            p.joints[0][2] += leg * s;
            p.joints[1][2] -= leg * s;
            if joints > 3 {
                p.swing[2] = -arm * s;
                p.swing[3] = arm * s;
                p.joints[2][2] -= arm * s;
                p.joints[3][2] += arm * s;
            }
            let lift = if run { 0.3 } else { 0.0 };
            let left = if s > lift { 1.0 } else { 0.0 };
            let right = if -s > lift { 1.0 } else { 0.0 };
            p.contact = [left, left, right, right];
        }
        ActionTemplate::Jump => {
            let b = bump(tau, 0.5 * dur, 0.12 * dur.max(0.5));
            p.height = REST_HEIGHT + 0.5 * a * b;
            for leg in 0..2.min(joints) {
                p.joints[leg][1] += 0.3 * b;
                p.swing[leg] = 0.8 * b;
            }
            let c = if b > 0.15 { 0.0 } else { 1.0 };
            p.contact = [c; 4];
        }
        ActionTemplate::Wave => {
            let arm = if joints > 3 { 3 } else { joints - 1 };
            p.joints[arm][1] += 0.5;
            p.joints[arm][0] += 0.25 * a * s;
            p.swing[arm] = 1.2 + 0.6 * a * s;
        }
        ActionTemplate::Kick => {
            let b = bump(tau, 0.5 * dur, 0.1 * dur.max(0.5));
            let leg = 1.min(joints - 1);
            p.joints[leg][2] += 0.6 * a * b;
            p.joints[leg][1] += 0.3 * a * b;
            p.swing[leg] = 1.0 * a * b;
            if b > 0.2 {
                p.contact[2] = 0.0;
                p.contact[3] = 0.0;
            }
        }
        ActionTemplate::Squat => {
            let depth = 0.5 - 0.5 * (w * tau).cos();
            p.height = REST_HEIGHT - 0.35 * a * depth;
            for leg in 0..2.min(joints) {
                p.joints[leg][1] += 0.35 * a * depth;
                p.joints[leg][2] += 0.15 * a * depth;
                p.swing[leg] = -0.9 * a * depth;
            }
        }
    }
    p
}

fn base_freq(template: ActionTemplate) -> f64 {
    match template {
        ActionTemplate::Walk => 1.0,
        ActionTemplate::Run => 2.0,
        ActionTemplate::Jump => 0.5,
        ActionTemplate::Wave => 3.0,
        ActionTemplate::Kick => 0.5,
        ActionTemplate::Squat => 0.5,
    }
}

/// Splits `frames` into `parts` segment lengths, each at least 1.
pub(crate) fn segment_lengths<R: Rng>(frames: usize, parts: usize, rng: &mut R) -> Vec<usize> {
    let base = frames / parts;
    let mut lens = vec![base; parts];
    lens[parts - 1] += frames - base * parts;
    // jitter boundaries by up to a quarter segment
    for i in 0..parts - 1 {
        let jitter = base / 4;
        if jitter > 0 {
            let delta = rng.random_range(0..=2 * jitter) as isize - jitter as isize;
            let moved = (lens[i] as isize + delta).clamp(1, (lens[i] + lens[i + 1] - 1) as isize) as usize;
            lens[i + 1] = lens[i] + lens[i + 1] - moved;
            lens[i] = moved;
        }
    }
    lens
}

/// Row-major `frames x layout.dims` features for a template sequence.
pub fn synthesize<R: Rng>(
    layout: &MotionFrameLayout,
    templates: &[ActionTemplate],
    frames: usize,
    fps: f64,
    rng: &mut R,
) -> Vec<f64> {
    let joints = layout.joint_count;
    let lens = segment_lengths(frames, templates.len(), rng);
    let mut poses = Vec::with_capacity(frames);
    for (&t, &len) in templates.iter().zip(&lens) {
        let style = Style {
            amp: rng.random_range(0.8..1.2),
            freq: base_freq(t) * rng.random_range(0.85..1.15),
            phase: rng.random_range(0.0..2.0 * PI),
        };
        let dur = len as f64 / fps;
        for i in 0..len {
            poses.push(pose_at(t, i as f64 / fps, dur, &style, joints));
        }
    }
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let d = layout.dims;
    let mut out = vec![0.0; frames * d];
    for (f, pose) in poses.iter().enumerate() {
        let row = &mut out[f * d..(f + 1) * d];
        row[layout.root_angular_velocity().start] = pose.root_turn;
        row[layout.root_linear_velocity_xz()].copy_from_slice(&pose.root_vel);
        row[layout.root_height().start] = pose.height;
        let next = &poses[(f + 1).min(frames - 1)];
        let prev = &poses[f.saturating_sub(1)];
        let span = if f == 0 || f + 1 == frames { 1.0 } else { 2.0 };
        for j in 0..joints {
            let pj = layout.joint_positions().start + 3 * j;
            let vj = layout.joint_velocities().start + 3 * j;
            let rj = layout.joint_rotations().start + 6 * j;
            for a in 0..3 {
                row[pj + a] = pose.joints[j][a];
                row[vj + a] = (next.joints[j][a] - prev.joints[j][a]) * fps / span;
            }
            // first two columns of a rotation about x by the swing angle
            let (sn, cs) = pose.swing[j].sin_cos();
            row[rj..rj + 6].copy_from_slice(&[1.0, 0.0, 0.0, 0.0, cs, sn]);
        }
        let contact = layout.foot_contact();
        let cont = contact.clone();
        for (c, v) in cont.zip(pose.contact) {
            row[c] = v;
        }
        for (c, v) in row.iter_mut().enumerate() {
            if !contact.contains(&c) {
                *v += noise.sample(rng);
            }
        }
    }
    // stored precision is f32
    out.iter_mut().for_each(|v| *v = *v as f32 as f64);
    out
}
