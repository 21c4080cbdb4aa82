//! Parametric motion classes over a 16-joint skeleton.
//!
//! Feature layout per frame: joint 0 is the root as (forward velocity,
//! height, lateral velocity); joints 1..16 are root-relative positions with
//! x forward, y up and z lateral.

use std::f64::consts::{PI, TAU};

use crate::error::{Error, Result};
use crate::ndmath::{Rng, Scalar, Tensor};

pub const JOINTS: usize = 16;
pub const POSE_DIM: usize = JOINTS * 3;

pub const ROOT: usize = 0;
pub const SPINE: usize = 1;
pub const NECK: usize = 2;
pub const HEAD: usize = 3;
pub const L_SHOULDER: usize = 4;
pub const L_ELBOW: usize = 5;
pub const L_WRIST: usize = 6;
pub const R_SHOULDER: usize = 7;
pub const R_ELBOW: usize = 8;
pub const R_WRIST: usize = 9;
pub const L_HIP: usize = 10;
pub const L_KNEE: usize = 11;
pub const L_ANKLE: usize = 12;
pub const R_HIP: usize = 13;
pub const R_KNEE: usize = 14;
pub const R_ANKLE: usize = 15;

const REST: [[f64; 3]; JOINTS] = [
    [0.0, 0.0, 0.0],
    [0.0, 0.25, 0.0],
    [0.0, 0.50, 0.0],
    [0.0, 0.65, 0.0],
    [0.0, 0.45, -0.18],
    [0.0, 0.20, -0.22],
    [0.0, -0.02, -0.24],
    [0.0, 0.45, 0.18],
    [0.0, 0.20, 0.22],
    [0.0, -0.02, 0.24],
    [0.0, -0.05, -0.10],
    [0.0, -0.45, -0.11],
    [0.0, -0.88, -0.12],
    [0.0, -0.05, 0.10],
    [0.0, -0.45, 0.11],
    [0.0, -0.88, 0.12],
];

/// Gait and posture parameters of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionClass {
    pub name: &'static str,
    /// Cycle frequency in Hz.
    pub frequency: f64,
    /// Leg swing amplitude (forward axis).
    pub leg_swing: f64,
    /// Arm swing amplitude (forward axis).
    pub arm_swing: f64,
    /// Mean forward root velocity, units per second.
    pub forward_speed: f64,
    /// Mean lateral root velocity, units per second.
    pub lateral_speed: f64,
    pub base_height: f64,
    /// Vertical root bounce amplitude.
    pub bounce: f64,
    pub templates: &'static [&'static str],
}

pub const WALK_SPEED: f64 = 1.2;

pub fn default_classes() -> Vec<MotionClass> {
    let base = MotionClass {
        name: "",
        frequency: 1.0,
        leg_swing: 0.0,
        arm_swing: 0.0,
        forward_speed: 0.0,
        lateral_speed: 0.0,
        base_height: 0.95,
        bounce: 0.0,
        templates: &[],
    };
    vec![
        MotionClass {
            name: "walk",
            frequency: 1.0,
            leg_swing: 0.25,
            arm_swing: 0.15,
            forward_speed: WALK_SPEED,
            bounce: 0.02,
            templates: &["a person walks forward", "someone strolls ahead at a steady pace"],
            ..base.clone()
        },
        MotionClass {
            name: "run",
            frequency: 1.8,
            leg_swing: 0.45,
            arm_swing: 0.35,
            forward_speed: 3.0,
            base_height: 0.9,
            bounce: 0.05,
            templates: &["a person runs forward quickly", "someone jogs ahead"],
            ..base.clone()
        },
        MotionClass {
            name: "jump",
            frequency: 0.8,
            leg_swing: 0.05,
            arm_swing: 0.1,
            forward_speed: 0.2,
            base_height: 0.9,
            bounce: 0.4,
            templates: &["a person jumps up and down", "someone hops in place"],
            ..base.clone()
        },
        MotionClass {
            name: "wave",
            frequency: 2.0,
            templates: &["a person waves with the right hand", "someone raises an arm and waves hello"],
            ..base.clone()
        },
        MotionClass {
            name: "turn-left",
            frequency: 0.8,
            leg_swing: 0.15,
            arm_swing: 0.08,
            forward_speed: 0.6,
            lateral_speed: -0.8,
            templates: &["a person turns to the left", "someone walks in a curve to the left"],
            ..base.clone()
        },
        MotionClass {
            name: "turn-right",
            frequency: 0.8,
            leg_swing: 0.15,
            arm_swing: 0.08,
            forward_speed: 0.6,
            lateral_speed: 0.8,
            templates: &["a person turns to the right", "someone walks in a curve to the right"],
            ..base.clone()
        },
        MotionClass {
            name: "crouch",
            frequency: 0.5,
            templates: &["a person crouches down and stands up", "someone squats low then rises"],
            ..base.clone()
        },
        MotionClass {
            name: "kick",
            frequency: 0.7,
            arm_swing: 0.05,
            templates: &["a person kicks with the right leg", "someone throws a forward kick"],
            ..base
        },
    ]
}

/// Relative amplitude of the slow root speed drift within a sequence.
pub const SPEED_DRIFT: f64 = 0.12;
/// Frequency of the speed drift in Hz.
pub const DRIFT_HZ: f64 = 0.3;
/// Relative amplitude of the root speed surge at twice the cycle rate.
pub const SPEED_SURGE: f64 = 0.08;

/// Per-sample variation drawn once per sequence.
struct Jitter {
    phase: f64,
    freq: f64,
    amp: f64,
    speed: f64,
    drift_phase: f64,
}

impl Jitter {
    fn draw(rng: &mut Rng) -> Self {
        Self {
            phase: rng.uniform_in(0.0, TAU),
            freq: rng.uniform_in(0.9, 1.1),
            amp: rng.uniform_in(0.9, 1.1),
            speed: rng.uniform_in(0.95, 1.05),
            drift_phase: rng.uniform_in(0.0, TAU),
        }
    }
}

/// Smooth bump rising from 0 to 1 and back over `u ∈ [0, 1]`.
fn bump(u: f64) -> f64 {
    (PI * u.clamp(0.0, 1.0)).sin().powi(2)
}

/// Clean pose of `class` at time `t` seconds, sequence progress `u ∈ [0,1]`.
fn pose(class: &MotionClass, j: &Jitter, t: f64, u: f64) -> [[f64; 3]; JOINTS] {
    let mut p = REST;
    let w = TAU * class.frequency * j.freq;
    let s = (w * t + j.phase).sin();
    let a = j.amp;

    let leg = class.leg_swing * a;
    p[L_KNEE][0] += 0.5 * leg * s;
    p[L_ANKLE][0] += leg * s;
    p[R_KNEE][0] -= 0.5 * leg * s;
    p[R_ANKLE][0] -= leg * s;
    p[L_ANKLE][1] += 0.4 * leg * s.max(0.0);
    p[R_ANKLE][1] += 0.4 * leg * (-s).max(0.0);

    let arm = class.arm_swing * a;
    p[L_ELBOW][0] -= 0.5 * arm * s;
    p[L_WRIST][0] -= arm * s;
    p[R_ELBOW][0] += 0.5 * arm * s;
    p[R_WRIST][0] += arm * s;

    let lean = if class.lateral_speed != 0.0 { 0.12 * class.lateral_speed.signum() } else { 0.0 };
    for joint in [SPINE, NECK, HEAD] {
        p[joint][2] += lean * p[joint][1] / REST[HEAD][1];
    }

    let mut height = class.base_height;
    match class.name {
        "jump" => {
            let air = s.max(0.0);
            height += class.bounce * a * air;
            let tuck = 0.25 * (1.0 - air);
            for k in [L_KNEE, R_KNEE] {
                p[k][0] += tuck;
                p[k][1] += 0.5 * tuck;
            }
            for w_ in [L_WRIST, R_WRIST] {
                p[w_][1] += 0.5 * air;
            }
        }
        "wave" => {
            p[R_ELBOW][1] += 0.45;
            p[R_ELBOW][2] += 0.15;
            p[R_WRIST][1] += 0.75;
            p[R_WRIST][2] += 0.15 + 0.2 * a * s;
        }
        "crouch" => {
            let d = bump(u + 0.15 * (j.phase / TAU - 0.5));
            height -= 0.35 * a * d;
            for k in [L_KNEE, R_KNEE] {
                p[k][0] += 0.3 * d;
            }
            for h in [L_HIP, R_HIP] {
                p[h][0] -= 0.1 * d;
            }
            for w_ in [L_WRIST, R_WRIST] {
                p[w_][0] += 0.35 * d;
                p[w_][1] += 0.3 * d;
            }
        }
        "kick" => {
            let centre = 0.5 + 0.15 * (j.phase / TAU - 0.5);
            let k = bump(((u - centre) * 2.0 + 0.5).clamp(0.0, 1.0));
            p[R_HIP][0] += 0.15 * a * k;
            p[R_KNEE][0] += 0.35 * a * k;
            p[R_ANKLE][0] += 0.7 * a * k;
            p[R_ANKLE][1] += 0.45 * a * k;
            for joint in [SPINE, NECK, HEAD] {
                p[joint][0] -= 0.15 * k * p[joint][1] / REST[HEAD][1];
            }
            for w_ in [L_WRIST, R_WRIST] {
                p[w_][1] += 0.25 * k;
            }
            p[L_WRIST][0] -= 0.2 * k;
            height -= 0.05 * a * k;
        }
        _ => {
            height += class.bounce * a * (2.0 * (w * t + j.phase)).sin();
        }
    }
    let speed = j.speed * (1.0 + SPEED_DRIFT * (TAU * DRIFT_HZ * t + j.drift_phase).sin() + SPEED_SURGE * (2.0 * (w * t + j.phase)).sin());
    p[ROOT] = [class.forward_speed * speed, height, class.lateral_speed * speed];
    p
}

/// Number of shared deviation directions.
pub const STYLE_FACTORS: usize = 4;

/// Unit-norm channel loadings of each style factor over the non-root
/// joints; fixed across samples.
fn style_loadings() -> Vec<Vec<f64>> {
    let mut rng = Rng::named(0, "style-loadings");
    (0..STYLE_FACTORS)
        .map(|_| {
            let v: Vec<f64> = (3..POSE_DIM).map(|_| rng.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt() / ((POSE_DIM - 3) as f64).sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

/// Smooth per-sample deviation: each shared factor follows a sinusoid at the
/// first or second harmonic of the class cycle, with random phase and an
/// amplitude of scale `style`.
struct Style {
    loadings: Vec<Vec<f64>>,
    waves: Vec<(f64, f64, f64)>,
}

impl Style {
    fn draw(frequency: f64, style: f64, rng: &mut Rng) -> Self {
        let waves = (0..STYLE_FACTORS)
            .map(|_| {
                let harmonic = (1 + rng.below(2)) as f64;
                (TAU * frequency * harmonic, rng.uniform_in(0.0, TAU), style * rng.normal())
            })
            .collect();
        Self {
            loadings: style_loadings(),
            waves,
        }
    }

    fn offsets(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; POSE_DIM];
        for (load, &(w, phase, amp)) in self.loadings.iter().zip(&self.waves) {
            let a = amp * (w * t + phase).sin();
            for (o, l) in out[3..].iter_mut().zip(load) {
                *o += a * l;
            }
        }
        out
    }
}

/// Synthesises `len` frames of `class` with smooth per-sample deviations of
/// scale `style` plus Gaussian noise of std `noise`.
pub fn synth_motion<T: Scalar>(
    class: &MotionClass,
    len: usize,
    fps: f64,
    noise: f64,
    style: f64,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    if len == 0 {
        return Err(Error::Length("motion needs at least one frame".into()));
    }
    let jitter = Jitter::draw(rng);
    let deviation = Style::draw(class.frequency, style, rng);
    let mut data = Vec::with_capacity(len * POSE_DIM);
    for f in 0..len {
        let t = f as f64 / fps;
        let u = if len > 1 { f as f64 / (len - 1) as f64 } else { 0.0 };
        let offsets = deviation.offsets(t);
        for (v, o) in pose(class, &jitter, t, u).into_iter().flatten().zip(offsets) {
            data.push(T::of(v + o + noise * rng.normal()));
        }
    }
    Tensor::new(vec![len, POSE_DIM], data)
}

pub fn find_class<'a>(classes: &'a [MotionClass], name: &str) -> Result<(usize, &'a MotionClass)> {
    classes
        .iter()
        .enumerate()
        .find(|(_, c)| c.name == name)
        .ok_or_else(|| Error::UnknownClass(name.to_string()))
}
