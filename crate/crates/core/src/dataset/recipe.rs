//! Per-class synthesis recipes for switching-sound surrogates.
//!
//! A clip is an attack / steady / release envelope over a sum of motor
//! tones plus white noise, with class-specific events layered on top.
//! Times are fractions of the clip so any `input_length` works; tone
//! frequencies are in Hz at [`SAMPLE_RATE`].

use std::f64::consts::TAU;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const SAMPLE_RATE: f64 = 10_000.0;
pub const NUM_CLASSES: usize = 10;
/// Samples per class, in class order 1..=10.
pub const CLASS_COUNTS: [usize; NUM_CLASSES] = [121, 180, 158, 120, 124, 84, 80, 113, 112, 120];

const CLICK_HZ: f64 = 3_000.0;
const CLICK_TAU_S: f64 = 0.0015;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Envelope {
    pub attack: f64,
    pub steady: f64,
    pub release: f64,
    /// Random drop-outs of the steady phase.
    pub dropouts: Option<Dropouts>,
}

/// Between `min` and `max` raised-cosine dips of relative `depth`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropouts {
    pub min: usize,
    pub max: usize,
    pub depth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tone {
    pub hz: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Event {
    /// Locking click at the end of the steady phase.
    LockClick,
    /// Amplitude modulation from mechanical overload.
    Vibration { hz: f64, depth: f64 },
    /// Sound stops abruptly with a click at this fraction of the clip.
    CutOff { at: f64 },
    /// Periodic clicks of a slipping lock.
    ClickTrain { hz: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRecipe {
    pub class: u8,
    pub envelope: Envelope,
    pub tones: Vec<Tone>,
    pub noise: f64,
    /// Target RMS of the finished clip before gain jitter.
    pub scale: f64,
    pub events: Vec<Event>,
}

fn tones(pairs: &[(f64, f64)]) -> Vec<Tone> {
    pairs.iter().map(|&(hz, amplitude)| Tone { hz, amplitude }).collect()
}

/// The recipe for class `class` (1-based).
pub fn recipe(class: u8) -> ClassRecipe {
    let normal = Envelope { attack: 0.05, steady: 0.75, release: 0.1, dropouts: None };
    let motor = tones(&[(300.0, 1.0), (900.0, 0.5)]);
    let phase_fault = tones(&[(500.0, 1.0), (1500.0, 0.4)]);
    let overload = |scale| ClassRecipe {
        class: 0,
        envelope: normal,
        tones: tones(&[(200.0, 1.0), (600.0, 0.5)]),
        noise: 0.05,
        scale,
        events: vec![Event::Vibration { hz: 25.0, depth: 0.6 }],
    };
    let mut r = match class {
        1 => ClassRecipe {
            class,
            envelope: normal,
            tones: motor,
            noise: 0.05,
            scale: 0.2,
            events: vec![Event::LockClick],
        },
        2 => ClassRecipe { class, envelope: normal, tones: phase_fault, noise: 0.05, scale: 0.2, events: vec![] },
        3 => ClassRecipe {
            class,
            envelope: Envelope { dropouts: Some(Dropouts { min: 3, max: 5, depth: 0.85 }), ..normal },
            tones: phase_fault,
            noise: 0.05,
            scale: 0.2,
            events: vec![],
        },
        4 => ClassRecipe {
            class,
            envelope: Envelope { attack: 0.6, steady: 0.25, release: 0.1, dropouts: None },
            tones: motor,
            noise: 0.05,
            scale: 0.2,
            events: vec![],
        },
        5 => overload(0.25),
        6 => overload(0.32),
        7 => overload(0.40),
        8 => ClassRecipe {
            class,
            envelope: normal,
            tones: motor,
            noise: 0.05,
            scale: 0.2,
            events: vec![Event::CutOff { at: 0.45 }],
        },
        9 => ClassRecipe {
            class,
            envelope: normal,
            tones: tones(&[(700.0, 0.3)]),
            noise: 0.05,
            scale: 0.2,
            events: vec![Event::ClickTrain { hz: 40.0 }],
        },
        10 => ClassRecipe {
            class,
            envelope: normal,
            tones: tones(&[(2000.0, 1.0)]),
            noise: 0.05,
            scale: 0.08,
            events: vec![],
        },
        other => panic!("class {other} outside 1..=10"),
    };
    r.class = class;
    r
}

fn click(out: &mut [f64], start: usize, amplitude: f64, phase: f64) {
    let tau = CLICK_TAU_S * SAMPLE_RATE;
    let len = (tau * 6.0) as usize;
    for (j, v) in out.iter_mut().skip(start).take(len).enumerate() {
        let t = j as f64;
        *v += amplitude * (-t / tau).exp() * (TAU * CLICK_HZ * t / SAMPLE_RATE + phase).sin();
    }
}

fn envelope_at(e: &Envelope, onset: f64, u: f64) -> f64 {
    let t = u - onset;
    if t < 0.0 {
        0.0
    } else if t < e.attack {
        t / e.attack
    } else if t < e.attack + e.steady {
        1.0
    } else if t < e.attack + e.steady + e.release {
        1.0 - (t - e.attack - e.steady) / e.release
    } else {
        0.0
    }
}

fn jitter(rng: &mut ChaCha8Rng, v: f64, frac: f64) -> f64 {
    v * rng.random_range(1.0 - frac..1.0 + frac)
}

/// Renders one clip. Every random draw comes from `rng`.
pub fn synthesize(recipe: &ClassRecipe, length: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = length as f64;
    let env = Envelope {
        attack: jitter(rng, recipe.envelope.attack, 0.1),
        steady: jitter(rng, recipe.envelope.steady, 0.05),
        release: jitter(rng, recipe.envelope.release, 0.1),
        dropouts: recipe.envelope.dropouts,
    };
    let onset = rng.random_range(0.0..0.05);
    let parts: Vec<(f64, f64, f64)> =
        recipe.tones.iter().map(|t| (jitter(rng, t.hz, 0.02), t.amplitude, rng.random_range(0.0..TAU))).collect();
    let mut gain: Vec<f64> = (0..length).map(|i| envelope_at(&env, onset, i as f64 / n)).collect();
    let mut clicks = Vec::new();
    let steady_end = onset + env.attack + env.steady;

    if let Some(Dropouts { min, max, depth }) = env.dropouts {
        let count = rng.random_range(min..=max);
        for _ in 0..count {
            let centre = rng.random_range(onset + env.attack..steady_end);
            let width = rng.random_range(0.02..0.05);
            let d = jitter(rng, depth, 0.1).min(1.0);
            for (i, g) in gain.iter_mut().enumerate() {
                let x = (i as f64 / n - centre) / (width / 2.0);
                if x.abs() < 1.0 {
                    *g *= 1.0 - d * 0.5 * (1.0 + (std::f64::consts::PI * x).cos());
                }
            }
        }
    }

    for event in &recipe.events {
        match *event {
            Event::LockClick => clicks.push((steady_end, 3.0)),
            Event::Vibration { hz, depth } => {
                let hz = jitter(rng, hz, 0.1);
                let phase = rng.random_range(0.0..TAU);
                for (i, g) in gain.iter_mut().enumerate() {
                    *g *= 1.0 + depth * (TAU * hz * i as f64 / SAMPLE_RATE + phase).sin();
                }
            }
            Event::CutOff { at } => {
                let cut = onset + jitter(rng, at, 0.05);
                for (i, g) in gain.iter_mut().enumerate() {
                    if i as f64 / n >= cut {
                        *g = 0.0;
                    }
                }
                clicks.push((cut, 3.0));
            }
            Event::ClickTrain { hz } => {
                let period = SAMPLE_RATE / jitter(rng, hz, 0.1) / n;
                let mut t = onset + rng.random_range(0.0..period);
                while t < steady_end {
                    clicks.push((t, 2.5));
                    t += period;
                }
            }
        }
    }

    let mut out: Vec<f64> = (0..length)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE;
            let tone: f64 = parts.iter().map(|&(hz, a, ph)| a * (TAU * hz * t + ph).sin()).sum();
            gain[i] * tone
        })
        .collect();
    for (at, amplitude) in clicks {
        let start = (at * n).round();
        if start >= 0.0 && (start as usize) < length {
            let phase = rng.random_range(0.0..TAU);
            click(&mut out, start as usize, amplitude, phase);
        }
    }
    let noise = Normal::new(0.0, recipe.noise).expect("noise std");
    for v in out.iter_mut() {
        *v += noise.sample(rng);
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    let target = jitter(rng, recipe.scale, 0.06);
    if rms > 0.0 {
        for v in out.iter_mut() {
            *v = (*v * target / rms).clamp(-1.0, 1.0);
        }
    }
    out
}
