//! Deterministic kinematic tabletop world.
//!
//! Poses integrate the 8-D deltas directly (no IK, no dynamics). Grasping is
//! radius based. Observations are a 64x64 top-down raster rendered with 4x4
//! supersampling so sub-pixel motion still changes the image.

use std::f64::consts::PI;
use std::io::Cursor;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action_space::{GripCommand, LowLevelAction};

pub const IMAGE_SIZE: usize = 64;
pub const X_RANGE: (f64, f64) = (0.0, 0.8);
pub const Y_RANGE: (f64, f64) = (-0.4, 0.4);
pub const Z_RANGE: (f64, f64) = (0.0, 0.6);
/// Largest per-axis translation a single step may apply.
pub const MAX_STEP: f64 = 0.2;
pub const GRASP_RADIUS: f64 = 0.03;
pub const GRASP_HEIGHT: f64 = 0.05;

const METERS_PER_PIXEL: f64 = 0.8 / IMAGE_SIZE as f64;
const SUPERSAMPLE: usize = 4;
const PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("could not place objects for task {task} after {attempts} attempts")]
    Placement { task: String, attempts: usize },
    #[error("unknown success predicate {0:?}")]
    UnknownPredicate(String),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("observation must be {expected} bytes, got {got}")]
    RasterSize { expected: usize, got: usize },
    #[error("png: {0}")]
    Png(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GripperPose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub grip_rot: f64,
    pub open: bool,
}

impl GripperPose {
    pub const HOME: GripperPose = GripperPose {
        x: 0.25,
        y: 0.0,
        z: 0.22,
        roll: 0.0,
        pitch: 0.0,
        yaw: 0.0,
        grip_rot: 0.0,
        open: true,
    };

    pub fn position(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn angles(&self) -> [f64; 4] {
        [self.roll, self.pitch, self.yaw, self.grip_rot]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Disk,
    Block,
    Bowl,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Disk => "disk",
            Shape::Block => "block",
            Shape::Bowl => "bowl",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub name: String,
    pub shape: Shape,
    pub color: [u8; 3],
    pub position: [f64; 2],
    pub radius: f64,
    pub held: bool,
}

impl SceneObject {
    pub fn graspable(&self) -> bool {
        self.shape != Shape::Bowl
    }
}

/// Where objects go at reset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub target_shape: Shape,
    /// Adds a bowl that serves as the goal region.
    pub goal_bowl: bool,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    /// Minimum planar clearance between mandatory objects and the home pose.
    pub clearance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    /// `<obj>` and `<goal>` are filled at reset.
    pub instruction_template: String,
    pub predicate: String,
    pub layout: Layout,
    pub max_steps: usize,
}

impl TaskSpec {
    pub fn point() -> Self {
        TaskSpec {
            task_id: "point".into(),
            instruction_template: "point at the <obj>".into(),
            predicate: "point".into(),
            layout: Layout {
                target_shape: Shape::Disk,
                goal_bowl: false,
                x_range: (0.35, 0.7),
                y_range: (-0.3, 0.3),
                clearance: 0.1,
            },
            max_steps: 30,
        }
    }

    pub fn pick() -> Self {
        TaskSpec {
            task_id: "pick".into(),
            instruction_template: "pick the <obj>".into(),
            predicate: "pick".into(),
            layout: Layout {
                target_shape: Shape::Block,
                ..TaskSpec::point().layout
            },
            max_steps: 30,
        }
    }

    pub fn place() -> Self {
        TaskSpec {
            task_id: "place".into(),
            instruction_template: "place the <obj> in the <goal>".into(),
            predicate: "place".into(),
            layout: Layout {
                target_shape: Shape::Block,
                goal_bowl: true,
                ..TaskSpec::point().layout
            },
            max_steps: 40,
        }
    }

    pub fn defaults() -> Vec<TaskSpec> {
        vec![TaskSpec::point(), TaskSpec::pick(), TaskSpec::place()]
    }

    pub fn by_id(id: &str) -> Result<TaskSpec, SimError> {
        TaskSpec::defaults()
            .into_iter()
            .find(|t| t.task_id == id)
            .ok_or_else(|| SimError::UnknownTask(id.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub pose: GripperPose,
    pub objects: Vec<SceneObject>,
    pub step_count: usize,
    pub rng_seed: u64,
    pub instruction: String,
}

impl WorldState {
    /// The object named in the instruction.
    pub fn target(&self) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.graspable())
    }

    pub fn goal(&self) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.shape == Shape::Bowl)
    }

    pub fn held(&self) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.held)
    }

    /// Structured text record of pose and objects.
    pub fn snapshot(&self) -> String {
        serde_json::to_string_pretty(self).expect("world state serializes")
    }

    pub fn from_snapshot(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Loose objects are drawn in the red channel only and bowls in the blue
/// channel only, so their names carry a fixed color.
const TARGET_COLOR: (&str, [u8; 3]) = ("red", [255, 40, 40]);
const BOWL_COLOR: (&str, [u8; 3]) = ("blue", [40, 40, 255]);

fn planar_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub fn init_world(task: &TaskSpec, seed: u64) -> Result<WorldState, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = &task.layout;
    let home = [GripperPose::HOME.x, GripperPose::HOME.y];
    let sample = |rng: &mut ChaCha8Rng| {
        [
            rng.random_range(layout.x_range.0..layout.x_range.1),
            rng.random_range(layout.y_range.0..layout.y_range.1),
        ]
    };
    let mut placed = None;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let target = sample(&mut rng);
        if planar_dist(target, home) < layout.clearance {
            continue;
        }
        if !layout.goal_bowl {
            placed = Some((target, None));
            break;
        }
        let goal = sample(&mut rng);
        if planar_dist(goal, home) >= layout.clearance
            && planar_dist(goal, target) >= 0.15
        {
            placed = Some((target, Some(goal)));
            break;
        }
    }
    let (target_pos, goal_pos) = placed.ok_or_else(|| SimError::Placement {
        task: task.task_id.clone(),
        attempts: PLACEMENT_ATTEMPTS,
    })?;
    let (color_name, color) = TARGET_COLOR;
    let mut objects = vec![SceneObject {
        name: format!("{color_name} {}", layout.target_shape.name()),
        shape: layout.target_shape,
        color,
        position: target_pos,
        radius: match layout.target_shape {
            Shape::Block => BLOCK_HALF_WIDTH,
            _ => DISK_RADIUS,
        },
        held: false,
    }];
    if let Some(goal) = goal_pos {
        let (name, color) = BOWL_COLOR;
        objects.push(SceneObject {
            name: format!("{name} bowl"),
            shape: Shape::Bowl,
            color,
            position: goal,
            radius: BOWL_RADIUS,
            held: false,
        });
    }
    let mut instruction = task.instruction_template.replace("<obj>", &objects[0].name);
    if let Some(goal) = objects.get(1) {
        instruction = instruction.replace("<goal>", &goal.name);
    }
    Ok(WorldState {
        pose: GripperPose::HOME,
        objects,
        step_count: 0,
        rng_seed: seed,
        instruction,
    })
}

fn wrap_angle(a: f64) -> f64 {
    let mut w = a % (2.0 * PI);
    if w <= -PI {
        w += 2.0 * PI;
    } else if w > PI {
        w -= 2.0 * PI;
    }
    w
}

pub fn apply_action(state: &WorldState, action: &LowLevelAction) -> WorldState {
    let mut s = state.clone();
    let d = action.0;
    let step = |v: f64| v.clamp(-MAX_STEP, MAX_STEP);
    let p = &mut s.pose;
    p.x = (p.x + step(d[0])).clamp(X_RANGE.0, X_RANGE.1);
    p.y = (p.y + step(d[1])).clamp(Y_RANGE.0, Y_RANGE.1);
    p.z = (p.z + step(d[2])).clamp(Z_RANGE.0, Z_RANGE.1);
    p.roll = wrap_angle(p.roll + d[3]);
    p.pitch = wrap_angle(p.pitch + d[4]);
    p.yaw = wrap_angle(p.yaw + d[5]);
    p.grip_rot = wrap_angle(p.grip_rot + d[6]);
    let pose = *p;
    for o in s.objects.iter_mut().filter(|o| o.held) {
        o.position = [pose.x, pose.y];
    }
    match action.grip() {
        GripCommand::NoOp => {}
        GripCommand::Open => {
            s.pose.open = true;
            for o in &mut s.objects {
                o.held = false;
            }
        }
        GripCommand::Close => {
            s.pose.open = false;
            if s.objects.iter().all(|o| !o.held) && pose.z <= GRASP_HEIGHT + 1e-9 {
                let nearest = s
                    .objects
                    .iter_mut()
                    .filter(|o| o.graspable())
                    .map(|o| (planar_dist(o.position, [pose.x, pose.y]), o))
                    .filter(|(d, _)| *d <= GRASP_RADIUS + 1e-9)
                    .min_by(|a, b| a.0.total_cmp(&b.0));
                if let Some((_, o)) = nearest {
                    o.held = true;
                    o.position = [pose.x, pose.y];
                }
            }
        }
    }
    s.step_count += 1;
    s
}

/// Replays a list of actions from a fresh world.
pub fn replay<'a>(
    task: &TaskSpec,
    seed: u64,
    actions: impl IntoIterator<Item = &'a LowLevelAction>,
) -> Result<WorldState, SimError> {
    let mut s = init_world(task, seed)?;
    for a in actions {
        s = apply_action(&s, a);
    }
    Ok(s)
}

pub fn check_success(state: &WorldState, task: &TaskSpec) -> Result<bool, SimError> {
    let grip = [state.pose.x, state.pose.y];
    match task.predicate.as_str() {
        "point" => Ok(state
            .target()
            .is_some_and(|t| planar_dist(t.position, grip) <= 0.04)),
        "pick" => Ok(state.target().is_some_and(|t| t.held) && state.pose.z >= 0.15),
        "place" => Ok(match (state.target(), state.goal()) {
            (Some(t), Some(g)) => !t.held && planar_dist(t.position, g.position) <= 0.05,
            _ => false,
        }),
        other => Err(SimError::UnknownPredicate(other.to_string())),
    }
}

/// 64x64 RGB raster, row-major, 8-bit channels.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub pixels: Vec<u8>,
}

impl std::fmt::Debug for Observation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Observation({} bytes)", self.pixels.len())
    }
}

pub const RASTER_BYTES: usize = IMAGE_SIZE * IMAGE_SIZE * 3;

impl Observation {
    pub fn new(pixels: Vec<u8>) -> Result<Self, SimError> {
        if pixels.len() != RASTER_BYTES {
            return Err(SimError::RasterSize {
                expected: RASTER_BYTES,
                got: pixels.len(),
            });
        }
        Ok(Observation { pixels })
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * IMAGE_SIZE + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn to_png(&self) -> Vec<u8> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, IMAGE_SIZE as u32, IMAGE_SIZE as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().expect("png header to memory");
            w.write_image_data(&self.pixels).expect("png data to memory");
        }
        out
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self, SimError> {
        let dec = png::Decoder::new(Cursor::new(bytes));
        let mut reader = dec.read_info().map_err(|e| SimError::Png(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| SimError::Png(e.to_string()))?;
        if info.width as usize != IMAGE_SIZE
            || info.height as usize != IMAGE_SIZE
            || info.color_type != png::ColorType::Rgb
            || info.bit_depth != png::BitDepth::Eight
        {
            return Err(SimError::Png("expected 64x64 8-bit RGB".into()));
        }
        buf.truncate(info.buffer_size());
        Observation::new(buf)
    }
}

/// Render sizes. A block exactly one encoder patch wide makes the patch
/// means an exact linear readout of its position; the disk radius cancels
/// the leading patch-aliasing term for round shapes.
const BLOCK_HALF_WIDTH: f64 = 0.05;
const DISK_RADIUS: f64 = 0.061;
const BOWL_RADIUS: f64 = 0.08;

/// Channel level of bare table.
const TABLE_LEVEL: f64 = 0.0;

/// Area of the gripper ring in px^2, held fixed as its radius changes.
const RING_AREA: f64 = PI * (3.0 * 3.0 - 1.5 * 1.5);
const TICK_HALF_LENGTH: f64 = 2.0;

/// Every object and the gripper carry a soft halo in their channel that
/// falls linearly to zero at this distance (px) from their center, so a
/// position change shifts mass across many patches instead of one or two.
const HALO_RADIUS: f64 = 32.0;
const HALO_PEAK: f64 = 0.5;

/// Status gauge along the bottom edge in the blue channel, centered on the
/// image's vertical midline: a bar whose half-length grows with z, and a lamp
/// lit while the gripper is closed. Both stay inside the bottom patch row,
/// which bowls and their halos never reach.
const GAUGE_BAR_ROWS: (f64, f64) = (61.0, 63.0);
const GAUGE_LAMP_ROWS: (f64, f64) = (57.0, 59.0);
const GAUGE_LAMP_HALF_WIDTH: f64 = 4.0;

/// Gripper ring outer radius in pixels; grows with height.
pub fn gripper_radius_px(z: f64) -> f64 {
    3.0 + 5.0 * (z / Z_RANGE.1)
}

/// Half-length in pixels of the height bar.
fn gauge_half_length(z: f64) -> f64 {
    8.0 + 24.0 * (z / Z_RANGE.1)
}

fn to_pixel(p: [f64; 2]) -> (f64, f64) {
    ((X_RANGE.1 - p[0]) / METERS_PER_PIXEL, (Y_RANGE.1 - p[1]) / METERS_PER_PIXEL)
}


/// Halo level at squared pixel distance `d2` from a center.
fn halo(d2: f64) -> f64 {
    HALO_PEAK * (1.0 - d2.sqrt() / HALO_RADIUS).max(0.0)
}

/// Top-down raster with one channel per role: red for loose objects, green
/// for the gripper (ring and rotation tick), blue for bowls and the status
/// gauge. Roles never occlude each other, so each channel's patch means
/// depend only on its own role.
pub fn render(state: &WorldState) -> Observation {
    let pose = state.pose;
    let grip_center = to_pixel([pose.x, pose.y]);
    let outer = gripper_radius_px(pose.z);
    let inner = (outer * outer - RING_AREA / PI).max(0.0).sqrt();
    // Tick points along +x (image up) at zero gripper rotation.
    let tick_dir = (-pose.grip_rot.cos(), -pose.grip_rot.sin());
    let bar = gauge_half_length(pose.z);
    let mid = IMAGE_SIZE as f64 / 2.0;
    let objects: Vec<(&SceneObject, (f64, f64))> = state
        .objects
        .iter()
        .map(|o| (o, to_pixel(o.position)))
        .collect();

    // Subsample offsets along one axis, shared by rows and columns.
    let w = IMAGE_SIZE * SUPERSAMPLE;
    let sub: Vec<f64> = (0..w)
        .map(|x| (x / SUPERSAMPLE) as f64 + ((x % SUPERSAMPLE) as f64 + 0.5) / SUPERSAMPLE as f64)
        .collect();
    let mut acc = vec![[0.0f64; 3]; IMAGE_SIZE * IMAGE_SIZE];
    let mut level = [vec![0.0f64; w], vec![0.0f64; w], vec![0.0f64; w]];
    for (y, &r) in sub.iter().enumerate() {
        let row = y / SUPERSAMPLE;
        level[0].fill(0.0);
        level[2].fill(0.0);
        for (o, ctr) in &objects {
            let ch = if o.shape == Shape::Bowl { 2 } else { 0 };
            let rad = o.radius / METERS_PER_PIXEL;
            let dr = r - ctr.0;
            let lane = level[ch].iter_mut().zip(&sub);
            // One loop per shape keeps each body branch-free.
            match o.shape {
                Shape::Disk => lane.for_each(|(l, &c)| {
                    let dc = c - ctr.1;
                    let d2 = dr * dr + dc * dc;
                    *l = l.max(if d2 <= rad * rad { 1.0 } else { halo(d2) });
                }),
                Shape::Block => lane.for_each(|(l, &c)| {
                    let dc = c - ctr.1;
                    let d2 = dr * dr + dc * dc;
                    *l = l.max(if dr.abs() <= rad && dc.abs() <= rad { 1.0 } else { halo(d2) });
                }),
                Shape::Bowl => lane.for_each(|(l, &c)| {
                    let dc = c - ctr.1;
                    let d2 = dr * dr + dc * dc;
                    let ring = d2 <= rad * rad && d2 >= (0.6 * rad) * (0.6 * rad);
                    *l = l.max(if ring { 1.0 } else { halo(d2) });
                }),
            }
        }
        let dr = r - grip_center.0;
        let bar_row = (GAUGE_BAR_ROWS.0..GAUGE_BAR_ROWS.1).contains(&r);
        let lamp_row = !pose.open && (GAUGE_LAMP_ROWS.0..GAUGE_LAMP_ROWS.1).contains(&r);
        let [red, green, blue] = &mut level;
        for (x, &c) in sub.iter().enumerate() {
            let dc = c - grip_center.1;
            let d2 = dr * dr + dc * dc;
            let along = dr * tick_dir.0 + dc * tick_dir.1;
            let across = (dr * tick_dir.1 - dc * tick_dir.0).abs();
            let marker = (d2 <= outer * outer && d2 >= inner * inner)
                || (along.abs() <= TICK_HALF_LENGTH && across <= 0.25);
            green[x] = if marker { 1.0 } else { halo(d2) };
            // The gripper body hides whatever lies under it from the overhead camera.
            if d2 <= outer * outer {
                red[x] = 0.0;
                blue[x] = 0.0;
            }
            if (bar_row && (c - mid).abs() < bar) || (lamp_row && (c - mid).abs() < GAUGE_LAMP_HALF_WIDTH) {
                blue[x] = 1.0;
            }
        }
        let out = &mut acc[row * IMAGE_SIZE..(row + 1) * IMAGE_SIZE];
        for (col, a) in out.iter_mut().enumerate() {
            for j in col * SUPERSAMPLE..(col + 1) * SUPERSAMPLE {
                for k in 0..3 {
                    a[k] += level[k][j];
                }
            }
        }
    }
    let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    let mut pixels = Vec::with_capacity(RASTER_BYTES);
    for a in acc {
        for v in a {
            pixels.push((TABLE_LEVEL + (255.0 - TABLE_LEVEL) * v / n).round() as u8);
        }
    }
    Observation { pixels }
}
