//! Synthetic coupled-behavior generators.
//!
//! `Pursuit`: observed leaders follow smooth seeded random walks; each target
//! blends pursuit of a designated leader's current position with its own
//! momentum, the blend controlled by `coupling`. At coupling 1 and zero noise
//! the target velocity points exactly at its leader; at coupling 0 targets
//! ignore leaders entirely (negative control).
//!
//! `Dance`: all participants follow one shared, phase-offset parametric
//! pattern per clip (circle or line weave) from a small bank.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ClipRecord, DataError, Dataset, DatasetManifest, ParticipantTrack, Role};

/// Action vocabulary of the pursuit generator: stand plus the eight motion
/// octants.
pub const PURSUIT_ACTIONS: [&str; 9] = [
    "stand", "walk_e", "walk_ne", "walk_n", "walk_nw", "walk_w", "walk_sw", "walk_s", "walk_se",
];

/// Action vocabulary of the dance generator.
pub const DANCE_ACTIONS: [&str; 6] = [
    "stand",
    "walk_left",
    "walk_right",
    "walk_up",
    "walk_down",
    "twirling",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Pursuit,
    Dance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: GeneratorKind,
    pub clips: usize,
    pub n_obs: usize,
    pub n_tgt: usize,
    pub frames: usize,
    pub width: f64,
    pub height: f64,
    /// Pursuit blend weight in `[0, 1]` (ignored by the dance generator).
    pub coupling: f64,
    /// Standard deviation of positional noise, in scene units.
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.clips == 0 {
            return Err(DataError::Invalid("clips must be >= 1".into()));
        }
        if self.n_obs == 0 || self.n_tgt == 0 {
            return Err(DataError::Invalid("n_obs and n_tgt must be >= 1".into()));
        }
        if self.frames < 2 {
            return Err(DataError::Invalid("frames must be >= 2".into()));
        }
        if self.width <= 0.0 || self.height <= 0.0 {
            return Err(DataError::Invalid("scene size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.coupling) {
            return Err(DataError::Invalid(format!(
                "coupling {} outside [0, 1]",
                self.coupling
            )));
        }
        if self.noise < 0.0 {
            return Err(DataError::Invalid("noise must be >= 0".into()));
        }
        Ok(())
    }
}

/// Generate a dataset; fully reproducible from the spec.
pub fn generate(spec: &SynthSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let actions: Vec<String> = match spec.kind {
        GeneratorKind::Pursuit => PURSUIT_ACTIONS.iter().map(|s| s.to_string()).collect(),
        GeneratorKind::Dance => DANCE_ACTIONS.iter().map(|s| s.to_string()).collect(),
    };
    let manifest = DatasetManifest {
        width: spec.width,
        height: spec.height,
        fps: 5.0,
        actions,
        n_obs: spec.n_obs,
        n_tgt: spec.n_tgt,
    };
    let clips = (0..spec.clips)
        .map(|i| match spec.kind {
            GeneratorKind::Pursuit => pursuit_clip(spec, i, &mut rng),
            GeneratorKind::Dance => dance_clip(spec, i, &mut rng),
        })
        .collect();
    Ok(Dataset { manifest, clips })
}

fn clamp_to_scene(p: (f64, f64), spec: &SynthSpec) -> (f64, f64) {
    (p.0.clamp(0.0, spec.width), p.1.clamp(0.0, spec.height))
}

/// Octant action from a velocity, or stand below the speed threshold.
fn octant_action(v: (f64, f64), stand_below: f64) -> usize {
    let speed = (v.0 * v.0 + v.1 * v.1).sqrt();
    if speed < stand_below {
        return 0;
    }
    let angle = v.1.atan2(v.0); // [-pi, pi]
    let sector = ((angle + std::f64::consts::PI * 2.0) / (std::f64::consts::PI / 4.0)).round()
        as usize
        % 8;
    1 + sector
}

fn track_actions(positions: &[(f64, f64)], stand_below: f64) -> Vec<usize> {
    let mut actions = vec![0usize; positions.len()];
    for t in 1..positions.len() {
        let v = (
            positions[t].0 - positions[t - 1].0,
            positions[t].1 - positions[t - 1].1,
        );
        actions[t] = octant_action(v, stand_below);
    }
    actions
}

fn pursuit_clip(spec: &SynthSpec, index: usize, rng: &mut ChaCha8Rng) -> ClipRecord {
    let speed = spec.width.min(spec.height) / 28.0;
    let leader_sigma = speed * 0.55;
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    let spawn = |rng: &mut ChaCha8Rng, spec: &SynthSpec| {
        (
            rng.random_range(0.22 * spec.width..0.78 * spec.width),
            rng.random_range(0.22 * spec.height..0.78 * spec.height),
        )
    };

    // Leaders: smooth filtered random walks.
    let mut leader_pos: Vec<(f64, f64)> = (0..spec.n_obs).map(|_| spawn(rng, spec)).collect();
    let mut leader_vel: Vec<(f64, f64)> = (0..spec.n_obs)
        .map(|_| {
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            (speed * a.cos(), speed * a.sin())
        })
        .collect();
    let mut leader_tracks: Vec<Vec<(f64, f64)>> =
        leader_pos.iter().map(|&p| vec![p]).collect();

    // Targets.
    let mut target_pos: Vec<(f64, f64)> = (0..spec.n_tgt).map(|_| spawn(rng, spec)).collect();
    let mut target_vel: Vec<(f64, f64)> = (0..spec.n_tgt)
        .map(|_| {
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            (0.5 * speed * a.cos(), 0.5 * speed * a.sin())
        })
        .collect();
    let mut target_tracks: Vec<Vec<(f64, f64)>> =
        target_pos.iter().map(|&p| vec![p]).collect();

    for _t in 1..spec.frames {
        for i in 0..spec.n_obs {
            let (mut vx, mut vy) = leader_vel[i];
            vx = 0.88 * vx + leader_sigma * gauss.sample(rng);
            vy = 0.88 * vy + leader_sigma * gauss.sample(rng);
            let mut p = (leader_pos[i].0 + vx, leader_pos[i].1 + vy);
            // Reflect off the walls to keep wandering inside the scene.
            if p.0 < 0.0 || p.0 > spec.width {
                vx = -vx;
                p.0 = p.0.clamp(0.0, spec.width);
            }
            if p.1 < 0.0 || p.1 > spec.height {
                vy = -vy;
                p.1 = p.1.clamp(0.0, spec.height);
            }
            leader_vel[i] = (vx, vy);
            leader_pos[i] = p;
            leader_tracks[i].push(p);
        }
        for j in 0..spec.n_tgt {
            let leader = leader_pos[j % spec.n_obs];
            let to_leader = (leader.0 - target_pos[j].0, leader.1 - target_pos[j].1);
            let dist = (to_leader.0 * to_leader.0 + to_leader.1 * to_leader.1).sqrt();
            let max_step = 1.4 * speed;
            let pursuit = if dist <= max_step || dist == 0.0 {
                to_leader
            } else {
                (to_leader.0 / dist * max_step, to_leader.1 / dist * max_step)
            };
            let own = (
                0.9 * target_vel[j].0 + 0.3 * speed * gauss.sample(rng),
                0.9 * target_vel[j].1 + 0.3 * speed * gauss.sample(rng),
            );
            let c = spec.coupling;
            let v = (
                c * pursuit.0 + (1.0 - c) * own.0,
                c * pursuit.1 + (1.0 - c) * own.1,
            );
            let p = clamp_to_scene(
                (
                    target_pos[j].0 + v.0 + spec.noise * gauss.sample(rng),
                    target_pos[j].1 + v.1 + spec.noise * gauss.sample(rng),
                ),
                spec,
            );
            target_vel[j] = v;
            target_pos[j] = p;
            target_tracks[j].push(p);
        }
    }

    let stand_below = 0.15 * speed;
    let mut participants = Vec::with_capacity(spec.n_obs + spec.n_tgt);
    for (i, track) in leader_tracks.into_iter().enumerate() {
        let actions = track_actions(&track, stand_below);
        participants.push(ParticipantTrack {
            id: format!("obs{i}"),
            role: Role::Observed,
            positions: track,
            actions,
        });
    }
    for (j, track) in target_tracks.into_iter().enumerate() {
        let actions = track_actions(&track, stand_below);
        participants.push(ParticipantTrack {
            id: format!("tgt{j}"),
            role: Role::Target,
            positions: track,
            actions,
        });
    }
    ClipRecord {
        clip_id: format!("pursuit_{index:06}"),
        frames: spec.frames,
        participants,
    }
}

fn dance_clip(spec: &SynthSpec, index: usize, rng: &mut ChaCha8Rng) -> ClipRecord {
    let n = spec.n_obs + spec.n_tgt;
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    let circle = rng.random_bool(0.5);
    let clip_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let omega: f64 = rng.random_range(0.15..0.45) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };

    let mut tracks: Vec<Vec<(f64, f64)>> = Vec::with_capacity(n);
    if circle {
        let cx = spec.width * rng.random_range(0.42..0.58);
        let cy = spec.height * rng.random_range(0.42..0.58);
        let radius = 0.3 * spec.width.min(spec.height) * rng.random_range(0.7..1.1);
        for i in 0..n {
            let phase = clip_phase + std::f64::consts::TAU * i as f64 / n as f64;
            let mut track = Vec::with_capacity(spec.frames);
            for t in 0..spec.frames {
                let a = phase + omega * t as f64;
                let p = (
                    cx + radius * a.cos() + spec.noise * gauss.sample(rng),
                    cy + radius * a.sin() + spec.noise * gauss.sample(rng),
                );
                track.push(clamp_to_scene(p, spec));
            }
            tracks.push(track);
        }
    } else {
        // Line weave: per-participant lanes with a shared horizontal sway.
        let amp = 0.3 * spec.width;
        let bob = 0.05 * spec.height;
        for i in 0..n {
            let lane = spec.height * (0.2 + 0.6 * i as f64 / (n.max(2) - 1) as f64);
            let phase = clip_phase + std::f64::consts::TAU * i as f64 / n as f64;
            let mut track = Vec::with_capacity(spec.frames);
            for t in 0..spec.frames {
                let a = phase + omega * t as f64;
                let p = (
                    spec.width * 0.5 + amp * a.sin() + spec.noise * gauss.sample(rng),
                    lane + bob * (2.0 * a).sin() + spec.noise * gauss.sample(rng),
                );
                track.push(clamp_to_scene(p, spec));
            }
            tracks.push(track);
        }
    }

    let speed_scale = spec.width.min(spec.height) / 28.0;
    let mut participants = Vec::with_capacity(n);
    for (i, track) in tracks.into_iter().enumerate() {
        let actions = dance_actions(&track, circle, 0.15 * speed_scale);
        let (id, role) = if i < spec.n_obs {
            (format!("obs{i}"), Role::Observed)
        } else {
            (format!("tgt{}", i - spec.n_obs), Role::Target)
        };
        participants.push(ParticipantTrack { id, role, positions: track, actions });
    }
    ClipRecord {
        clip_id: format!("dance_{index:06}"),
        frames: spec.frames,
        participants,
    }
}

/// Dance labels: stand below the speed threshold, twirling while the heading
/// turns quickly (pattern phase), otherwise the dominant walk direction.
fn dance_actions(positions: &[(f64, f64)], circle: bool, stand_below: f64) -> Vec<usize> {
    let stand = 0;
    let (left, right, up, down, twirl) = (1, 2, 3, 4, 5);
    let mut actions = vec![stand; positions.len()];
    let vel = |t: usize| {
        (
            positions[t].0 - positions[t - 1].0,
            positions[t].1 - positions[t - 1].1,
        )
    };
    for t in 1..positions.len() {
        let v = vel(t);
        let speed = (v.0 * v.0 + v.1 * v.1).sqrt();
        if speed < stand_below {
            actions[t] = stand;
            continue;
        }
        let turning = if circle && t >= 2 {
            let prev = vel(t - 1);
            let dot = v.0 * prev.0 + v.1 * prev.1;
            let mags = speed * (prev.0 * prev.0 + prev.1 * prev.1).sqrt();
            if mags > 0.0 { (dot / mags).clamp(-1.0, 1.0).acos() } else { 0.0 }
        } else {
            0.0
        };
        actions[t] = if turning > 0.3 {
            twirl
        } else if v.0.abs() >= v.1.abs() {
            if v.0 < 0.0 { left } else { right }
        } else if v.1 < 0.0 {
            up
        } else {
            down
        };
    }
    actions
}
