//! Planar navigation world: kinematics, JSON action parsing, episode
//! rollout and a top-down schematic renderer.
//!
//! Heading 0° points along +x and grows counterclockwise.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::scene::{draw_shape, level, rgb, COLORS, GRAY, SHAPES};
use crate::error::{contract, Result};
use crate::rng::SeedStream;
use crate::vision::ImageGrid;

pub const STEP_METERS: f64 = 0.25;
pub const TURN_DEGREES: f64 = 15.0;
pub const TURNS_PER_CIRCLE: u32 = 24;
pub const DEFAULT_MAX_STEPS: usize = 50;
/// Half-width of the square world, meters.
pub const WORLD_HALF_EXTENT: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Stay,
    Forward,
    RotateLeft,
    RotateRight,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Stay, Action::Forward, Action::RotateLeft, Action::RotateRight];

    pub fn name(self) -> &'static str {
        match self {
            Action::Stay => "stay",
            Action::Forward => "move_forward",
            Action::RotateLeft => "rotate_left",
            Action::RotateRight => "rotate_right",
        }
    }

    /// `{"action": "<name>"}`.
    pub fn to_json(self) -> String {
        format!("{{\"action\": \"{}\"}}", self.name())
    }
}

/// `None` is a malformed command. The first well-formed JSON object in the
/// text decides; its `"action"` must be one of the four action names.
pub fn parse_action(text: &str) -> Option<Action> {
    for (i, _) in text.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<serde_json::Value>();
        if let Some(Ok(serde_json::Value::Object(obj))) = stream.next() {
            let name = obj.get("action").and_then(|v| v.as_str());
            return Action::ALL.into_iter().find(|a| Some(a.name()) == name);
        }
    }
    None
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NavState {
    pub x: f64,
    pub y: f64,
    /// Start heading in degrees, `[0, 360)`.
    pub initial_heading: f64,
    /// Net left turns since the start, modulo a full circle.
    pub turns: u32,
    pub goal: (f64, f64),
    pub steps: usize,
    pub max_steps: usize,
}

impl NavState {
    pub fn new(x: f64, y: f64, heading: f64, goal: (f64, f64), max_steps: usize) -> Self {
        Self {
            x,
            y,
            initial_heading: heading.rem_euclid(360.0),
            turns: 0,
            goal,
            steps: 0,
            max_steps,
        }
    }

    /// Degrees in `[0, 360)`.
    pub fn heading(&self) -> f64 {
        (self.initial_heading + TURN_DEGREES * self.turns as f64).rem_euclid(360.0)
    }

    pub fn distance(&self) -> f64 {
        (self.x - self.goal.0).hypot(self.y - self.goal.1)
    }

    pub fn terminated(&self) -> bool {
        self.steps >= self.max_steps
    }

    /// Applies `action` (`None` is a malformed command: pose unchanged).
    pub fn step(&self, action: Option<Action>) -> Result<Self> {
        if self.terminated() {
            return Err(contract("episode already terminated"));
        }
        let mut s = *self;
        match action {
            Some(Action::Forward) => {
                let t = s.heading().to_radians();
                s.x += STEP_METERS * t.cos();
                s.y += STEP_METERS * t.sin();
            }
            Some(Action::RotateLeft) => s.turns = (s.turns + 1) % TURNS_PER_CIRCLE,
            Some(Action::RotateRight) => s.turns = (s.turns + TURNS_PER_CIRCLE - 1) % TURNS_PER_CIRCLE,
            Some(Action::Stay) | None => {}
        }
        s.steps += 1;
        Ok(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub color: usize,
    pub shape: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NavWorld {
    pub landmarks: Vec<Landmark>,
    /// Index of the goal landmark.
    pub goal: usize,
}

impl NavWorld {
    pub fn goal_landmark(&self) -> &Landmark {
        &self.landmarks[self.goal]
    }

    pub fn instruction(&self) -> String {
        let g = self.goal_landmark();
        format!("navigate to the {} {}", COLORS[g.color], SHAPES[g.shape])
    }
}

/// Pixel cell of a world point, clamped to the image.
pub fn to_pixel(x: f64, y: f64, size: usize) -> (usize, usize) {
    let scale = size as f64 / (2.0 * WORLD_HALF_EXTENT);
    let col = ((x + WORLD_HALF_EXTENT) * scale).floor();
    let row = ((WORLD_HALF_EXTENT - y) * scale).floor();
    let clamp = |v: f64| v.clamp(0.0, (size - 1) as f64) as usize;
    (clamp(row), clamp(col))
}

/// Top-down view: landmarks as small glyphs, the goal landmark outlined,
/// the agent as a white pixel with a gray heading tick.
pub fn render_observation(state: &NavState, world: &NavWorld, size: usize) -> (ImageGrid, String) {
    let mut img = ImageGrid::filled(size, size, 3, 0.0);
    let glyph = (size / 9).max(3);
    let paint_glyph = |img: &mut ImageGrid, lm: &Landmark| {
        let (r, c) = to_pixel(lm.x, lm.y, size);
        let (y0, x0) = (r.saturating_sub(glyph / 2), c.saturating_sub(glyph / 2));
        draw_shape(img, lm.shape, y0, x0, glyph, rgb(lm.color));
    };
    for (i, lm) in world.landmarks.iter().enumerate() {
        if i != world.goal {
            paint_glyph(&mut img, lm);
        }
    }
    let goal = Landmark {
        x: state.goal.0,
        y: state.goal.1,
        ..*world.goal_landmark()
    };
    paint_glyph(&mut img, &goal);
    let (gr, gc) = to_pixel(goal.x, goal.y, size);
    img.set(gr, gc, rgb(goal.color));

    let (ar, ac) = to_pixel(state.x, state.y, size);
    let t = state.heading().to_radians();
    let (tr, tc) = (
        (ar as f64 - 1.5 * t.sin()).round(),
        (ac as f64 + 1.5 * t.cos()).round(),
    );
    if (0.0..size as f64).contains(&tr) && (0.0..size as f64).contains(&tc) {
        img.set(tr as usize, tc as usize, [level(GRAY); 3]);
    }
    img.set(ar, ac, [1.0, 1.0, 1.0]);
    (img, world.instruction())
}

/// Turn toward the goal when more than half a turn increment off, walk
/// while farther than half a step, then stay.
pub fn oracle_action(s: &NavState) -> Action {
    let dist = s.distance();
    if dist <= STEP_METERS / 2.0 {
        return Action::Stay;
    }
    let bearing = (s.goal.1 - s.y).atan2(s.goal.0 - s.x).to_degrees();
    let delta = (bearing - s.heading() + 180.0).rem_euclid(360.0) - 180.0;
    if delta.abs() > TURN_DEGREES / 2.0 {
        if delta > 0.0 {
            Action::RotateLeft
        } else {
            Action::RotateRight
        }
    } else {
        Action::Forward
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    /// `[x, y, heading]` after the step.
    pub pose: [f64; 3],
    pub action: String,
    pub parsed_ok: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub initial_distance: f64,
    pub final_distance: f64,
    pub trace: Vec<TraceRecord>,
    /// Set when the policy failed and ended the episode early.
    pub failure: Option<String>,
}

/// Observation handed to a policy.
pub struct Observation<'a> {
    pub state: &'a NavState,
    pub image: ImageGrid,
    pub instruction: String,
}

/// Observe, query the policy, parse, step, until the step budget is spent.
pub fn run_episode(
    start: NavState,
    world: &NavWorld,
    size: usize,
    mut policy: impl FnMut(&Observation) -> Result<String>,
) -> Result<EpisodeResult> {
    if start.max_steps == 0 {
        return Err(contract("episode needs at least one step"));
    }
    let mut s = start;
    let mut trace = Vec::with_capacity(s.max_steps);
    let mut failure = None;
    while !s.terminated() {
        let (image, instruction) = render_observation(&s, world, size);
        let obs = Observation {
            state: &s,
            image,
            instruction,
        };
        let text = match policy(&obs) {
            Ok(t) => t,
            Err(e) => {
                failure = Some(e.to_string());
                break;
            }
        };
        let action = parse_action(&text);
        s = s.step(action)?;
        trace.push(TraceRecord {
            step: s.steps,
            pose: [s.x, s.y, s.heading()],
            action: text,
            parsed_ok: action.is_some(),
        });
    }
    Ok(EpisodeResult {
        initial_distance: start.distance(),
        final_distance: s.distance(),
        trace,
        failure,
    })
}

pub fn write_trace(w: &mut impl Write, trace: &[TraceRecord]) -> Result<()> {
    for r in trace {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// World with 3 landmarks and a start pose at `distance` meters from the
/// goal (drawn in `[2, 8]` when `None`).
pub fn sample_episode(seeds: &SeedStream, distance: Option<f64>, max_steps: usize) -> (NavState, NavWorld) {
    let h = WORLD_HALF_EXTENT - 0.5;
    for attempt in 0.. {
        let mut rng = seeds.index(attempt).rng();
        let mut landmarks: Vec<Landmark> = Vec::new();
        let mut shapes: Vec<usize> = (0..SHAPES.len()).collect();
        while landmarks.len() < 3 {
            let x = rng.random_range(-h..h);
            let y = rng.random_range(-h..h);
            if landmarks.iter().any(|l| (l.x - x).hypot(l.y - y) < 2.0) {
                continue;
            }
            landmarks.push(Landmark {
                color: rng.random_range(0..COLORS.len()),
                shape: shapes.swap_remove(rng.random_range(0..shapes.len())),
                x,
                y,
            });
        }
        let goal = rng.random_range(0..landmarks.len());
        let d = distance.unwrap_or_else(|| rng.random_range(2.0..=8.0));
        let dir = rng.random_range(0.0..std::f64::consts::TAU);
        let (g, sx, sy) = {
            let g = landmarks[goal];
            (g, g.x + d * dir.cos(), g.y + d * dir.sin())
        };
        if sx.abs() > h || sy.abs() > h {
            continue;
        }
        let heading = TURN_DEGREES * rng.random_range(0..24) as f64;
        return (
            NavState::new(sx, sy, heading, (g.x, g.y), max_steps),
            NavWorld { landmarks, goal },
        );
    }
    unreachable!("attempt loop is unbounded")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_corpus() {
        assert_eq!(parse_action(r#"{"action": "move_forward"}"#), Some(Action::Forward));
        assert_eq!(
            parse_action(r#"Sure! {"action":"rotate_left"} hope that helps"#),
            Some(Action::RotateLeft)
        );
        assert_eq!(parse_action(r#"{"act": "go"}"#), None);
        assert_eq!(parse_action(r#"{ "action" : "stay" }"#), Some(Action::Stay));
        assert_eq!(
            parse_action(r#"{"action": "stay"} {"action": "move_forward"}"#),
            Some(Action::Stay)
        );
        assert_eq!(parse_action(r#"{"action": "fly"} {"action": "stay"}"#), None);
        assert_eq!(parse_action(r#"{broken {"action": "rotate_right"}"#), Some(Action::RotateRight));
        assert_eq!(parse_action(""), None);
    }

    #[test]
    fn kinematics() {
        let s = NavState::new(0.0, 0.0, 0.0, (1.0, 0.0), 50);
        let f = s.step(Some(Action::Forward)).unwrap();
        assert_eq!((f.x, f.y), (0.25, 0.0));
        let w = NavState::new(0.0, 0.0, 350.0, (0.0, 0.0), 50).step(Some(Action::RotateLeft)).unwrap();
        assert_eq!(w.heading(), 5.0);
        let r = NavState::new(0.0, 0.0, 0.0, (0.0, 0.0), 50).step(Some(Action::RotateRight)).unwrap();
        assert_eq!(r.heading(), 345.0);
    }

    #[test]
    fn six_left_turns_then_forward_goes_up() {
        let mut s = NavState::new(0.0, 0.0, 0.0, (0.0, 0.0), 50);
        for _ in 0..6 {
            s = s.step(Some(Action::RotateLeft)).unwrap();
        }
        assert_eq!(s.heading(), 90.0);
        s = s.step(Some(Action::Forward)).unwrap();
        assert!(s.x.abs() < 1e-15);
        assert_eq!(s.y, 0.25);
        assert_eq!(s.steps, 7);
    }

    #[test]
    fn terminated_episode_cannot_step() {
        let s = NavState::new(0.0, 0.0, 0.0, (0.0, 0.0), 1).step(None).unwrap();
        assert!(s.step(None).is_err());
    }

    #[test]
    fn euclidean_final_distance() {
        let world = NavWorld {
            landmarks: vec![Landmark { color: 0, shape: 0, x: 1.0, y: 0.0 }],
            goal: 0,
        };
        let start = NavState::new(0.0, 0.0, 0.0, (1.0, 0.0), 5);
        let r = run_episode(start, &world, 36, |_| Ok("{\"action\": \"stay\"}".into())).unwrap();
        assert_eq!(r.final_distance, 1.0);
        assert_eq!(r.trace.len(), 5);
    }

    #[test]
    fn policy_failure_ends_episode() {
        let world = NavWorld {
            landmarks: vec![Landmark { color: 0, shape: 0, x: 1.0, y: 0.0 }],
            goal: 0,
        };
        let start = NavState::new(0.0, 0.0, 0.0, (1.0, 0.0), 5);
        let mut calls = 0;
        let r = run_episode(start, &world, 36, |_| {
            calls += 1;
            if calls == 3 {
                Err(crate::Error::Input("policy crashed".into()))
            } else {
                Ok(Action::Forward.to_json())
            }
        })
        .unwrap();
        assert_eq!(r.trace.len(), 2);
        assert_eq!(r.final_distance, 0.5);
        assert!(r.failure.is_some());
    }

    #[test]
    fn sampled_episodes_respect_distance_range() {
        for i in 0..50 {
            let (s, w) = sample_episode(&SeedStream::new(i), None, 50);
            let d = s.distance();
            assert!((2.0 - 1e-9..=8.0 + 1e-9).contains(&d), "{d}");
            assert_eq!(s.goal, (w.goal_landmark().x, w.goal_landmark().y));
        }
    }
}
