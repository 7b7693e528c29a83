//! Scripted pushing expert.
//!
//! The block only translates, so the expert removes the offset to the target
//! one block-frame axis at a time. Each axis has a push line through a flat
//! face of the T; the expert walks around the block to the line's approach
//! point, then pushes along it by exactly the remaining offset. Which axis is
//! "engaged" is read off the agent's position relative to the block, so the
//! policy is a pure function of the state.

use super::env::{Pose, ToyEnvState, Vec2, AGENT_RADIUS, T_HALF_EXTENT};

/// Residual offset (per axis) below which the block counts as placed.
pub const PLACE_TOLERANCE: f64 = 0.001;
const APPROACH: f64 = 0.03;
/// Half extent of the box the agent must stay out of while navigating.
const KEEP_OUT: f64 = T_HALF_EXTENT + AGENT_RADIUS + 0.01;
/// Half extent of the box whose corners serve as waypoints.
const WAYPOINT: f64 = T_HALF_EXTENT + AGENT_RADIUS + 0.02;
const LINE_SLACK: f64 = 0.004;

struct PushLine {
    /// Agent center at first contact, block frame.
    contact: Vec2,
    /// Direction the block moves, block frame.
    dir: Vec2,
}

fn push_lines() -> [PushLine; 4] {
    let side = T_HALF_EXTENT + AGENT_RADIUS;
    [
        PushLine { contact: [-side, 0.09], dir: [1.0, 0.0] },
        PushLine { contact: [side, 0.09], dir: [-1.0, 0.0] },
        PushLine { contact: [0.0, -side], dir: [0.0, 1.0] },
        PushLine { contact: [0.0, side], dir: [0.0, -1.0] },
    ]
}

fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

fn add_scaled(a: Vec2, b: Vec2, k: f64) -> Vec2 {
    [a[0] + b[0] * k, a[1] + b[1] * k]
}

/// Offset still to travel along `dir`, block frame.
fn remaining(offset: Vec2, line: &PushLine) -> f64 {
    dot(offset, line.dir)
}

/// The commanded agent position for `s`.
pub fn scripted_expert(s: &ToyEnvState) -> Vec2 {
    let block: &Pose = &s.block;
    let offset = block.unrotate(sub(s.target.pos(), block.pos()));
    if offset[0].abs() < PLACE_TOLERANCE && offset[1].abs() < PLACE_TOLERANCE {
        return s.agent;
    }
    let agent = block.to_local(s.agent);
    let lines = push_lines();

    // Already on a push line with work left on it: push.
    for line in &lines {
        let rel = sub(agent, line.contact);
        let along = dot(rel, line.dir);
        let lateral = (rel[0] * line.dir[1] - rel[1] * line.dir[0]).abs();
        let left = remaining(offset, line);
        if left > PLACE_TOLERANCE && lateral < LINE_SLACK && (-(APPROACH + 0.01)..=0.002).contains(&along) {
            return block.to_world(add_scaled(line.contact, line.dir, left));
        }
    }

    let line = lines
        .iter()
        .filter(|l| remaining(offset, l) > PLACE_TOLERANCE)
        .max_by(|a, b| remaining(offset, a).total_cmp(&remaining(offset, b)))
        .expect("some axis has work left");
    let goal = add_scaled(line.contact, line.dir, -APPROACH);

    if agent[0].abs() < KEEP_OUT && agent[1].abs() < KEEP_OUT {
        return block.to_world(exit_point(agent));
    }
    block.to_world(next_waypoint(agent, goal))
}

/// Nearest point just outside the waypoint box.
fn exit_point(p: Vec2) -> Vec2 {
    let out = WAYPOINT + 0.005;
    let faces = [
        (p[0] + WAYPOINT, [-out, p[1]]),
        (WAYPOINT - p[0], [out, p[1]]),
        (p[1] + WAYPOINT, [p[0], -out]),
        (WAYPOINT - p[1], [p[0], out]),
    ];
    faces.iter().copied().fold((f64::INFINITY, p), |acc, f| if f.0 < acc.0 { f } else { acc }).1
}

/// Whether segment `a`-`b` passes through the open keep-out box.
fn blocked(a: Vec2, b: Vec2) -> bool {
    // Liang-Barsky against |x|, |y| < KEEP_OUT.
    let d = sub(b, a);
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (p, q) in [(-d[0], a[0] + KEEP_OUT), (d[0], KEEP_OUT - a[0]), (-d[1], a[1] + KEEP_OUT), (d[1], KEEP_OUT - a[1])] {
        if p == 0.0 {
            if q <= 0.0 {
                return false;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    t1 - t0 > 1e-9
}

/// First waypoint on the shortest detour from `from` to `to` around the block.
fn next_waypoint(from: Vec2, to: Vec2) -> Vec2 {
    if !blocked(from, to) {
        return to;
    }
    let w = WAYPOINT;
    let nodes = [from, to, [-w, -w], [w, -w], [w, w], [-w, w]];
    let len = |a: Vec2, b: Vec2| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    // Dijkstra on six nodes.
    let mut dist = [f64::INFINITY; 6];
    let mut prev = [usize::MAX; 6];
    let mut done = [false; 6];
    dist[0] = 0.0;
    for _ in 0..6 {
        let Some(u) = (0..6).filter(|i| !done[*i] && dist[*i].is_finite()).min_by(|a, b| dist[*a].total_cmp(&dist[*b])) else {
            break;
        };
        done[u] = true;
        for v in 0..6 {
            if !done[v] && !blocked(nodes[u], nodes[v]) {
                let alt = dist[u] + len(nodes[u], nodes[v]);
                if alt < dist[v] {
                    dist[v] = alt;
                    prev[v] = u;
                }
            }
        }
    }
    if !dist[1].is_finite() {
        return to;
    }
    let mut v = 1;
    while prev[v] != 0 {
        v = prev[v];
    }
    nodes[v]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::env::{coverage, is_done, reset, toy_step, MAX_STEPS, TARGET};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn holds_when_placed() {
        let s = ToyEnvState { agent: [0.1, 0.2], block: TARGET, target: TARGET, step: 0 };
        assert_eq!(scripted_expert(&s), [0.1, 0.2]);
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = reset(&mut rng);
        assert_eq!(scripted_expert(&s), scripted_expert(&s));
    }

    #[test]
    fn detour_avoids_block() {
        assert!(blocked([-0.3, 0.0], [0.3, 0.0]));
        assert!(!blocked([-0.3, 0.3], [0.3, 0.3]));
        let wp = next_waypoint([-0.3, 0.0], [0.3, 0.0]);
        assert!(wp[0].abs() > KEEP_OUT - 1e-12 && wp[1].abs() > KEEP_OUT - 1e-12);
    }

    #[test]
    fn expert_reaches_target_from_most_starts() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut ok = 0;
        for _ in 0..40 {
            let mut s = reset(&mut rng);
            while !is_done(&s) {
                s = toy_step(&s, scripted_expert(&s));
            }
            if coverage(&s) >= 0.9 && s.step <= MAX_STEPS {
                ok += 1;
            }
        }
        assert!(ok >= 38, "{ok}/40");
    }
}
