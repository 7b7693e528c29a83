//! A 2D pusher: a circular agent pushes a T-shaped block onto a fixed target
//! footprint in the unit square.
//!
//! The action is the agent's target position. The agent moves toward it at a
//! capped speed in small substeps; whenever it overlaps the block, the block
//! is translated out of the agent along the contact normal. The block keeps
//! the target's orientation, so only its position changes.

use rand::Rng;

pub const AGENT_RADIUS: f64 = 0.025;
/// Largest agent displacement per environment step.
pub const MAX_SPEED: f64 = 0.04;
pub const SUBSTEPS: usize = 8;
/// Bounds on the block reference point (both axes).
pub const BLOCK_RANGE: (f64, f64) = (0.22, 0.78);
pub const MAX_STEPS: usize = 300;
/// Episodes stop once coverage reaches this.
pub const SUCCESS_COVERAGE: f64 = 0.95;
pub const MIN_START_SEPARATION: f64 = 0.2;

pub type Vec2 = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub fn pos(&self) -> Vec2 {
        [self.x, self.y]
    }

    pub fn to_local(&self, p: Vec2) -> Vec2 {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [c * dx + s * dy, -s * dx + c * dy]
    }

    pub fn to_world(&self, p: Vec2) -> Vec2 {
        let v = self.rotate(p);
        [v[0] + self.x, v[1] + self.y]
    }

    /// Rotates a local direction into the world frame.
    pub fn rotate(&self, v: Vec2) -> Vec2 {
        let (s, c) = self.theta.sin_cos();
        [c * v[0] - s * v[1], s * v[0] + c * v[1]]
    }

    pub fn unrotate(&self, v: Vec2) -> Vec2 {
        let (s, c) = self.theta.sin_cos();
        [c * v[0] + s * v[1], -s * v[0] + c * v[1]]
    }
}

/// Axis-aligned rectangle in the block frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn contains(&self, p: Vec2) -> bool {
        p[0] >= self.x0 && p[0] <= self.x1 && p[1] >= self.y0 && p[1] <= self.y1
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    fn corners(&self) -> [Vec2; 4] {
        [[self.x0, self.y0], [self.x1, self.y0], [self.x1, self.y1], [self.x0, self.y1]]
    }
}

/// The T in its own frame: a crossbar on top of a stem.
pub const T_PARTS: [Rect; 2] = [
    Rect { x0: -0.12, x1: 0.12, y0: 0.06, y1: 0.12 },
    Rect { x0: -0.03, x1: 0.03, y0: -0.12, y1: 0.06 },
];

/// Half extent of the T's bounding box in its own frame.
pub const T_HALF_EXTENT: f64 = 0.12;

pub fn t_area() -> f64 {
    T_PARTS.iter().map(Rect::area).sum()
}

/// World-frame convex polygons (counter-clockwise) making up the T at `pose`.
pub fn t_polygons(pose: &Pose) -> Vec<Vec<Vec2>> {
    T_PARTS.iter().map(|r| r.corners().iter().map(|c| pose.to_world(*c)).collect()).collect()
}

pub fn polygon_area(poly: &[Vec2]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n).map(|i| {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        a[0] * b[1] - b[0] * a[1]
    }).sum();
    twice.abs() / 2.0
}

/// Sutherland-Hodgman clip of `subject` by the convex counter-clockwise `clip`.
pub fn clip_convex(subject: &[Vec2], clip: &[Vec2]) -> Vec<Vec2> {
    let mut out = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % n]);
        let side = |p: Vec2| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (sp, sq) = (side(p), side(q));
            if sp >= 0.0 {
                out.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let t = sp / (sp - sq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyEnvState {
    pub agent: Vec2,
    pub block: Pose,
    pub target: Pose,
    pub step: usize,
}

pub const TARGET: Pose = Pose { x: 0.5, y: 0.5, theta: 0.0 };

/// Fraction of the target footprint covered by the block.
pub fn coverage(s: &ToyEnvState) -> f64 {
    let block = t_polygons(&s.block);
    let target = t_polygons(&s.target);
    let mut inter = 0.0;
    for b in &block {
        for t in &target {
            inter += polygon_area(&clip_convex(b, t));
        }
    }
    (inter / t_area()).clamp(0.0, 1.0)
}

/// Displacement (block frame) that moves `rect` out of a circle at `c`.
fn separation(rect: &Rect, c: Vec2, r: f64) -> Option<Vec2> {
    let q = [c[0].clamp(rect.x0, rect.x1), c[1].clamp(rect.y0, rect.y1)];
    let v = [c[0] - q[0], c[1] - q[1]];
    let d = (v[0] * v[0] + v[1] * v[1]).sqrt();
    if d >= r {
        return None;
    }
    if d > 0.0 {
        let k = (r - d) / d;
        return Some([-v[0] * k, -v[1] * k]);
    }
    // Center inside the rectangle: leave through the nearest face.
    let faces = [
        (c[0] - rect.x0, [1.0, 0.0]),
        (rect.x1 - c[0], [-1.0, 0.0]),
        (c[1] - rect.y0, [0.0, 1.0]),
        (rect.y1 - c[1], [0.0, -1.0]),
    ];
    let (depth, dir) = faces.iter().copied().fold((f64::INFINITY, [0.0, 0.0]), |acc, f| if f.0 < acc.0 { f } else { acc });
    Some([dir[0] * (depth + r), dir[1] * (depth + r)])
}

fn clamp_unit(p: Vec2) -> Vec2 {
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]
}

/// Advances one environment step toward the commanded agent position. The
/// step's direction is fixed at its start; its length is capped at
/// [`MAX_SPEED`] and split into [`SUBSTEPS`] equal moves.
pub fn toy_step(s: &ToyEnvState, action: Vec2) -> ToyEnvState {
    let mut next = *s;
    next.step += 1;
    let goal = clamp_unit(action);
    let d = [goal[0] - s.agent[0], goal[1] - s.agent[1]];
    let dist = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if dist == 0.0 {
        return next;
    }
    let k = dist.min(MAX_SPEED) / dist / SUBSTEPS as f64;
    let motion = [d[0] * k, d[1] * k];
    for _ in 0..SUBSTEPS {
        next.agent = clamp_unit([next.agent[0] + motion[0], next.agent[1] + motion[1]]);
        resolve_contacts(&mut next, motion);
    }
    next
}

/// Removes agent/block overlap after the agent moved by `motion`. The block
/// is pushed only when the contact normal points along the motion; a contact
/// the agent is sliding away from deflects the agent instead.
fn resolve_contacts(s: &mut ToyEnvState, motion: Vec2) {
    for _ in 0..2 {
        for part in &T_PARTS {
            let c = s.block.to_local(s.agent);
            if let Some(m) = separation(part, c, AGENT_RADIUS) {
                let w = s.block.rotate(m);
                if w[0] * motion[0] + w[1] * motion[1] > 0.0 {
                    let t = bounded_fraction(s.block.x, w[0]).min(bounded_fraction(s.block.y, w[1]));
                    s.block.x += t * w[0];
                    s.block.y += t * w[1];
                } else {
                    s.agent = clamp_unit([s.agent[0] - w[0], s.agent[1] - w[1]]);
                }
            }
        }
    }
    // A block held at its bounds pushes the agent back instead.
    for part in &T_PARTS {
        let c = s.block.to_local(s.agent);
        if let Some(m) = separation(part, c, AGENT_RADIUS) {
            let w = s.block.rotate(m);
            s.agent = clamp_unit([s.agent[0] - w[0], s.agent[1] - w[1]]);
        }
    }
}

/// Largest `t` in [0, 1] keeping `x + t dx` inside [`BLOCK_RANGE`].
fn bounded_fraction(x: f64, dx: f64) -> f64 {
    let room = if dx > 0.0 { BLOCK_RANGE.1 - x } else { x - BLOCK_RANGE.0 };
    if dx == 0.0 || room >= dx.abs() {
        1.0
    } else {
        (room / dx.abs()).max(0.0)
    }
}

/// Distance from the agent center to the T outline (0 when inside).
pub fn agent_block_distance(s: &ToyEnvState) -> f64 {
    let c = s.block.to_local(s.agent);
    T_PARTS
        .iter()
        .map(|r| {
            let q = [c[0].clamp(r.x0, r.x1), c[1].clamp(r.y0, r.y1)];
            ((c[0] - q[0]).powi(2) + (c[1] - q[1]).powi(2)).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Random start: block uniform in its range at least [`MIN_START_SEPARATION`]
/// from the target, agent uniform and clear of the block's bounding box.
pub fn reset<R: Rng>(rng: &mut R) -> ToyEnvState {
    let block = loop {
        let x = rng.random_range(BLOCK_RANGE.0..BLOCK_RANGE.1);
        let y = rng.random_range(BLOCK_RANGE.0..BLOCK_RANGE.1);
        if ((x - TARGET.x).powi(2) + (y - TARGET.y).powi(2)).sqrt() >= MIN_START_SEPARATION {
            break Pose { x, y, theta: TARGET.theta };
        }
    };
    let clear = T_HALF_EXTENT + AGENT_RADIUS + 0.02;
    let agent = loop {
        let p = [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)];
        let l = block.to_local(p);
        if l[0].abs() > clear || l[1].abs() > clear {
            break p;
        }
    };
    ToyEnvState { agent, block, target: TARGET, step: 0 }
}

pub fn is_done(s: &ToyEnvState) -> bool {
    s.step >= MAX_STEPS || coverage(s) >= SUCCESS_COVERAGE
}

const BACKGROUND: [f32; 3] = [0.95, 0.95, 0.95];
const TARGET_COLOR: [f32; 3] = [0.55, 0.85, 0.55];
const BLOCK_COLOR: [f32; 3] = [0.40, 0.45, 0.60];
const AGENT_COLOR: [f32; 3] = [0.15, 0.35, 0.95];

fn in_t(pose: &Pose, p: Vec2) -> bool {
    let l = pose.to_local(p);
    T_PARTS.iter().any(|r| r.contains(l))
}

/// Top-down HWC image in [0, 1]; row 0 is y = 1. Each pixel averages a 2x2
/// grid of samples.
pub fn render(s: &ToyEnvState, hw: (usize, usize)) -> Vec<f32> {
    let (h, w) = hw;
    let mut img = vec![0f32; h * w * 3];
    for i in 0..h {
        for j in 0..w {
            let mut acc = [0f32; 3];
            for (di, dj) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let p = [(j as f64 + dj) / w as f64, 1.0 - (i as f64 + di) / h as f64];
                let d = ((p[0] - s.agent[0]).powi(2) + (p[1] - s.agent[1]).powi(2)).sqrt();
                let color = if d <= AGENT_RADIUS {
                    AGENT_COLOR
                } else if in_t(&s.block, p) {
                    BLOCK_COLOR
                } else if in_t(&s.target, p) {
                    TARGET_COLOR
                } else {
                    BACKGROUND
                };
                for c in 0..3 {
                    acc[c] += color[c] / 4.0;
                }
            }
            img[(i * w + j) * 3..(i * w + j) * 3 + 3].copy_from_slice(&acc);
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(agent: Vec2, block: Vec2) -> ToyEnvState {
        ToyEnvState { agent, block: Pose { x: block[0], y: block[1], theta: 0.0 }, target: TARGET, step: 0 }
    }

    fn raster_coverage(s: &ToyEnvState, n: usize) -> f64 {
        let (mut hit, mut total) = (0usize, 0usize);
        for i in 0..n {
            for j in 0..n {
                let p = [(j as f64 + 0.5) / n as f64, (i as f64 + 0.5) / n as f64];
                if in_t(&s.target, p) {
                    total += 1;
                    if in_t(&s.block, p) {
                        hit += 1;
                    }
                }
            }
        }
        hit as f64 / total as f64
    }

    #[test]
    fn coverage_extremes() {
        assert!((coverage(&state([0.0, 0.0], [0.5, 0.5])) - 1.0).abs() < 1e-12);
        assert_eq!(coverage(&state([0.0, 0.0], [0.78, 0.22])), 0.0);
    }

    #[test]
    fn half_overlap_of_a_rectangle() {
        // Two unit-height rectangles offset by half their width overlap by half.
        let a = vec![[0.0, 0.0], [0.2, 0.0], [0.2, 0.1], [0.0, 0.1]];
        let b = vec![[0.1, 0.0], [0.3, 0.0], [0.3, 0.1], [0.1, 0.1]];
        let frac = polygon_area(&clip_convex(&a, &b)) / polygon_area(&a);
        assert!((frac - 0.5).abs() < 0.01);
    }

    #[test]
    fn coverage_matches_rasterization() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let bx = rng.random_range(0.35..0.65);
            let by = rng.random_range(0.35..0.65);
            let theta = rng.random_range(-0.5..0.5);
            let mut s = state([0.0, 0.0], [bx, by]);
            s.block.theta = theta;
            let exact = coverage(&s);
            let approx = raster_coverage(&s, 512);
            assert!((exact - approx).abs() < 0.01, "{exact} vs {approx}");
        }
    }

    #[test]
    fn no_op_action_only_advances_the_clock() {
        let s = state([0.1, 0.1], [0.6, 0.6]);
        let n = toy_step(&s, s.agent);
        assert_eq!(n.agent, s.agent);
        assert_eq!(n.block, s.block);
        assert_eq!(n.step, 1);
    }

    #[test]
    fn distant_agent_leaves_block_alone() {
        let s = state([0.05, 0.05], [0.7, 0.7]);
        let n = toy_step(&s, [0.09, 0.05]);
        assert_eq!(n.block, s.block);
        assert!((n.agent[0] - 0.09).abs() < 1e-12);
    }

    #[test]
    fn speed_is_capped() {
        let s = state([0.1, 0.1], [0.7, 0.7]);
        let n = toy_step(&s, [0.9, 0.1]);
        assert!((n.agent[0] - 0.1 - MAX_SPEED).abs() < 1e-12);
    }

    #[test]
    fn pushes_follow_the_agent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut contacts = 0;
        for _ in 0..500 {
            let block = [rng.random_range(0.35..0.65), rng.random_range(0.35..0.65)];
            let ang = rng.random_range(0.0..std::f64::consts::TAU);
            let start = [block[0] + 0.2 * ang.cos(), block[1] + 0.2 * ang.sin()];
            let s = state(start, block);
            if agent_block_distance(&s) < AGENT_RADIUS {
                continue;
            }
            let aim = [block[0] + rng.random_range(-0.1..0.1), block[1] + rng.random_range(-0.1..0.1)];
            let mut cur = s;
            for _ in 0..8 {
                let prev = cur;
                cur = toy_step(&cur, aim);
                let moved = [cur.block.x - prev.block.x, cur.block.y - prev.block.y];
                let vel = [aim[0] - prev.agent[0], aim[1] - prev.agent[1]];
                if moved != [0.0, 0.0] {
                    contacts += 1;
                    assert!(moved[0] * vel[0] + moved[1] * vel[1] >= -1e-12, "{moved:?} vs {vel:?}");
                }
            }
        }
        assert!(contacts > 100);
    }

    #[test]
    fn point_reflection_symmetry() {
        let reflect = |p: Vec2| [1.0 - p[0], 1.0 - p[1]];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let s = reset(&mut rng);
            let mut m = s;
            m.agent = reflect(s.agent);
            m.block = Pose { x: 1.0 - s.block.x, y: 1.0 - s.block.y, theta: s.block.theta + std::f64::consts::PI };
            m.target = Pose { x: 1.0 - s.target.x, y: 1.0 - s.target.y, theta: s.target.theta + std::f64::consts::PI };
            let (mut a, mut b) = (s, m);
            for _ in 0..40 {
                let act = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
                a = toy_step(&a, act);
                b = toy_step(&b, reflect(act));
                let ra = reflect(a.agent);
                assert!((ra[0] - b.agent[0]).abs() < 1e-9 && (ra[1] - b.agent[1]).abs() < 1e-9);
                assert!((1.0 - a.block.x - b.block.x).abs() < 1e-9 && (1.0 - a.block.y - b.block.y).abs() < 1e-9);
                assert!((coverage(&a) - coverage(&b)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn reset_respects_start_constraints() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let s = reset(&mut rng);
            assert!(((s.block.x - 0.5).powi(2) + (s.block.y - 0.5).powi(2)).sqrt() >= MIN_START_SEPARATION);
            assert!(agent_block_distance(&s) > AGENT_RADIUS);
            assert!(coverage(&s) < SUCCESS_COVERAGE);
        }
    }

    #[test]
    fn render_shows_all_layers() {
        let s = state([0.2, 0.8], [0.3, 0.3]);
        let img = render(&s, (96, 96));
        assert_eq!(img.len(), 96 * 96 * 3);
        assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
        let px = |x: f64, y: f64| {
            let (i, j) = (((1.0 - y) * 96.0) as usize, (x * 96.0) as usize);
            img[(i * 96 + j) * 3..(i * 96 + j) * 3 + 3].to_vec()
        };
        assert_eq!(px(0.2, 0.8), AGENT_COLOR.to_vec());
        assert_eq!(px(0.3, 0.39), BLOCK_COLOR.to_vec());
        assert_eq!(px(0.5, 0.59), TARGET_COLOR.to_vec());
        assert_eq!(px(0.9, 0.1), BACKGROUND.to_vec());
    }
}
