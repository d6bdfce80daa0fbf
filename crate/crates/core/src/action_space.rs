//! Motion-primitive vocabulary and the primitive <-> low-level action mapping.
//!
//! The 58 primitives and their 8-D end-effector deltas are a fixed lookup
//! table. Slot layout: `[dx, dy, dz, droll, dpitch, dyaw, dgrip_rot, grip_cmd]`
//! with meters for translation, radians for rotation and `grip_cmd` one of
//! `-1.0` (no-op), `0.0` (close), `1.0` (open).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of canonical motion primitives.
pub const VOCAB_SIZE: usize = 58;

/// Translation granularities in meters.
pub const POSITION_STEPS: [f64; 4] = [0.01, 0.05, 0.1, 0.2];
/// Rotation granularities in radians (5, 15, 45 and 90 degrees as tabulated).
pub const ROTATION_STEPS: [f64; 4] = [0.0872, 0.2618, 0.7854, 1.5708];

const VOCAB_FILE_TAG: &str = "langarm-vocabulary v1";

#[derive(Debug, Error)]
pub enum ActionError {
    #[error("unknown primitive id {0}")]
    UnknownPrimitive(usize),
    #[error("unknown primitive text {0:?}")]
    UnknownText(String),
    #[error("action has no motion and no gripper command")]
    NoMotion,
    #[error("paraphrase {text:?} maps to both primitive {first} and {second}")]
    ParaphraseCollision {
        text: String,
        first: usize,
        second: usize,
    },
    #[error("vocabulary file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("vocabulary file version {0:?} is not supported")]
    Version(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
    Roll,
    Pitch,
    Yaw,
    GripRot,
    Gripper,
}

impl Axis {
    /// The seven motion axes in tie-break order.
    pub const MOTION: [Axis; 7] = [
        Axis::X,
        Axis::Y,
        Axis::Z,
        Axis::Roll,
        Axis::Pitch,
        Axis::Yaw,
        Axis::GripRot,
    ];

    pub fn slot(self) -> usize {
        self as usize
    }

    pub fn is_rotation(self) -> bool {
        matches!(self, Axis::Roll | Axis::Pitch | Axis::Yaw | Axis::GripRot)
    }

    fn steps(self) -> &'static [f64; 4] {
        if self.is_rotation() {
            &ROTATION_STEPS
        } else {
            &POSITION_STEPS
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GripCommand {
    NoOp,
    Close,
    Open,
}

impl GripCommand {
    pub fn value(self) -> f64 {
        match self {
            GripCommand::NoOp => -1.0,
            GripCommand::Close => 0.0,
            GripCommand::Open => 1.0,
        }
    }

    /// Interprets an arbitrary gripper slot value.
    pub fn from_value(v: f64) -> Self {
        if v >= 0.5 {
            GripCommand::Open
        } else if v >= 0.0 {
            GripCommand::Close
        } else {
            GripCommand::NoOp
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Granularity {
    Cm1,
    Cm5,
    Cm10,
    Cm20,
    Deg5,
    Deg15,
    Deg45,
    Deg90,
    Open,
    Close,
}

impl Granularity {
    fn from_step(axis: Axis, step_index: usize) -> Self {
        const POS: [Granularity; 4] = [
            Granularity::Cm1,
            Granularity::Cm5,
            Granularity::Cm10,
            Granularity::Cm20,
        ];
        const ROT: [Granularity; 4] = [
            Granularity::Deg5,
            Granularity::Deg15,
            Granularity::Deg45,
            Granularity::Deg90,
        ];
        if axis.is_rotation() {
            ROT[step_index]
        } else {
            POS[step_index]
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Granularity::Cm1 => "1cm",
            Granularity::Cm5 => "5cm",
            Granularity::Cm10 => "10cm",
            Granularity::Cm20 => "20cm",
            Granularity::Deg5 => "5deg",
            Granularity::Deg15 => "15deg",
            Granularity::Deg45 => "45deg",
            Granularity::Deg90 => "90deg",
            Granularity::Open => "open",
            Granularity::Close => "close",
        }
    }
}

/// An 8-D end-effector command.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LowLevelAction(pub [f64; 8]);

impl LowLevelAction {
    pub const ZERO: LowLevelAction = LowLevelAction([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0]);

    pub fn from_motion(motion: [f64; 7]) -> Self {
        let mut v = [0.0; 8];
        v[..7].copy_from_slice(&motion);
        v[7] = GripCommand::NoOp.value();
        LowLevelAction(v)
    }

    pub fn gripper(cmd: GripCommand) -> Self {
        let mut v = [0.0; 8];
        v[7] = cmd.value();
        LowLevelAction(v)
    }

    pub fn motion(&self) -> [f64; 7] {
        let mut m = [0.0; 7];
        m.copy_from_slice(&self.0[..7]);
        m
    }

    pub fn position(&self) -> [f64; 3] {
        [self.0[0], self.0[1], self.0[2]]
    }

    pub fn grip(&self) -> GripCommand {
        GripCommand::from_value(self.0[7])
    }

    /// True when every motion slot is zero and the gripper command is a no-op.
    pub fn is_zero(&self) -> bool {
        self.0[..7].iter().all(|&v| v == 0.0) && self.grip() == GripCommand::NoOp
    }

    /// Negates the motion slots, keeping the gripper command.
    pub fn negated_motion(&self) -> Self {
        let mut v = self.0;
        for x in &mut v[..7] {
            *x = -*x;
        }
        LowLevelAction(v)
    }
}

impl fmt::Display for LowLevelAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:?}")?;
        }
        write!(f, "]")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionPrimitive {
    pub id: usize,
    pub canonical_text: String,
    pub axis: Axis,
    /// Signed meters or radians; for the gripper, the command value.
    pub magnitude: f64,
    pub granularity: Granularity,
}

impl MotionPrimitive {
    pub fn action(&self) -> LowLevelAction {
        table_action(self.id)
    }
}

/// The 58 supervisions and their end-effector deltas, in table order.
const LOOKUP_TABLE: [(&str, [f64; 8]); VOCAB_SIZE] = [
    ("move arm back by 20cm", [-0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0]),
    ("move arm back by 10cm", [-0.1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0]),
    ("move arm back by 5cm", [-0.05, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0]),
    ("move arm back by 1cm", [-0.01, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0]),
    ("move arm forward by 1cm", [0.01, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0]),
    ("move arm forward by 5cm", [0.05, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0]),
    ("move arm forward by 10cm", [0.1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0]),
    ("move arm forward by 20cm", [0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0]),
    ("move arm to the right by 20cm", [0.0, -0.2, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0]),
    ("move arm to the right by 10cm", [0.0, -0.1, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0]),
    ("move arm to the right by 5cm", [0.0, -0.05, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0]),
    ("move arm to the right by 1cm", [0.0, -0.01, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0]),
    ("move arm to the left by 1cm", [0.0, 0.01, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0]),
    ("move arm to the left by 5cm", [0.0, 0.05, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0]),
    ("move arm to the left by 10cm", [0.0, 0.1, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0]),
    ("move arm to the left by 20cm", [0.0, 0.2, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0]),
    ("lower arm by 20cm", [0.0, 0.0, -0.2, 0.0, 0.0, 0.0, 0.0, -1.0]),
    ("lower arm by 10cm", [0.0, 0.0, -0.1, 0.0, 0.0, 0.0, 0.0, -1.0]),
    ("lower arm by 5cm", [0.0, 0.0, -0.05, 0.0, 0.0, 0.0, 0.0, -1.0]),
    ("lower arm by 1cm", [0.0, 0.0, -0.01, 0.0, 0.0, 0.0, 0.0, -1.0]),
    ("raise arm up by 1cm", [0.0, 0.0, 0.01, 0.0, 0.0, 0.0, 0.0, -1.0]),
    ("raise arm up by 5cm", [0.0, 0.0, 0.05, 0.0, 0.0, 0.0, 0.0, -1.0]),
    ("raise arm up by 10cm", [0.0, 0.0, 0.1, 0.0, 0.0, 0.0, 0.0, -1.0]),
    ("raise arm up by 20cm", [0.0, 0.0, 0.2, 0.0, 0.0, 0.0, 0.0, -1.0]),
    ("roll arm 90 degrees counterclockwise", [0.0, 0.0, 0.0, -1.5708, 0.0, 0.0, 0.0, -1.0]),
    ("roll arm 45 degrees counterclockwise", [0.0, 0.0, 0.0, -0.7854, 0.0, 0.0, 0.0, -1.0]),
    ("roll arm 15 degrees counterclockwise", [0.0, 0.0, 0.0, -0.2618, 0.0, 0.0, 0.0, -1.0]),
    ("roll arm 5 degrees counterclockwise", [0.0, 0.0, 0.0, -0.0872, 0.0, 0.0, 0.0, -1.0]),
    ("roll arm 5 degrees clockwise", [0.0, 0.0, 0.0, 0.0872, 0.0, 0.0, 0.0, -1.0]),
    ("roll arm 15 degrees clockwise", [0.0, 0.0, 0.0, 0.2618, 0.0, 0.0, 0.0, -1.0]),
    ("roll arm 45 degrees clockwise", [0.0, 0.0, 0.0, 0.7854, 0.0, 0.0, 0.0, -1.0]),
    ("roll arm 90 degrees clockwise", [0.0, 0.0, 0.0, 1.5708, 0.0, 0.0, 0.0, -1.0]),
    ("tilt arm up 90 degrees", [0.0, 0.0, 0.0, 0.0, -1.5708, 0.0, 0.0, -1.0]),
    ("tilt arm up 45 degrees", [0.0, 0.0, 0.0, 0.0, -0.7854, 0.0, 0.0, -1.0]),
    ("tilt arm up 15 degrees", [0.0, 0.0, 0.0, 0.0, -0.2618, 0.0, 0.0, -1.0]),
    ("tilt arm up 5 degrees", [0.0, 0.0, 0.0, 0.0, -0.0872, 0.0, 0.0, -1.0]),
    ("tilt arm down 5 degrees", [0.0, 0.0, 0.0, 0.0, 0.0872, 0.0, 0.0, -1.0]),
    ("tilt arm down 15 degrees", [0.0, 0.0, 0.0, 0.0, 0.2618, 0.0, 0.0, -1.0]),
    ("tilt arm down 45 degrees", [0.0, 0.0, 0.0, 0.0, 0.7854, 0.0, 0.0, -1.0]),
    ("tilt arm down 90 degrees", [0.0, 0.0, 0.0, 0.0, 1.5708, 0.0, 0.0, -1.0]),
    ("yaw arm 90 degrees counterclockwise", [0.0, 0.0, 0.0, 0.0, 0.0, -1.5708, 0.0, -1.0]),
    ("yaw arm 45 degrees counterclockwise", [0.0, 0.0, 0.0, 0.0, 0.0, -0.7854, 0.0, -1.0]),
    ("yaw arm 15 degrees counterclockwise", [0.0, 0.0, 0.0, 0.0, 0.0, -0.2618, 0.0, -1.0]),
    ("yaw arm 5 degrees counterclockwise", [0.0, 0.0, 0.0, 0.0, 0.0, -0.0872, 0.0, -1.0]),
    ("yaw arm 5 degrees clockwise", [0.0, 0.0, 0.0, 0.0, 0.0, 0.0872, 0.0, -1.0]),
    ("yaw arm 15 degrees clockwise", [0.0, 0.0, 0.0, 0.0, 0.0, 0.2618, 0.0, -1.0]),
    ("yaw arm 45 degrees clockwise", [0.0, 0.0, 0.0, 0.0, 0.0, 0.7854, 0.0, -1.0]),
    ("yaw arm 90 degrees clockwise", [0.0, 0.0, 0.0, 0.0, 0.0, 1.5708, 0.0, -1.0]),
    ("rotate gripper 90 degrees counterclockwise", [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1.5708, -1.0]),
    ("rotate gripper 45 degrees counterclockwise", [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -0.7854, -1.0]),
    ("rotate gripper 15 degrees counterclockwise", [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -0.2618, -1.0]),
    ("rotate gripper 5 degrees counterclockwise", [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -0.0872, -1.0]),
    ("rotate gripper 5 degrees clockwise", [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0872, -1.0]),
    ("rotate gripper 15 degrees clockwise", [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.2618, -1.0]),
    ("rotate gripper 45 degrees clockwise", [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.7854, -1.0]),
    ("rotate gripper 90 degrees clockwise", [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.5708, -1.0]),
    ("close the gripper", [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
    ("open the gripper", [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]),
];

/// Primitive id of "close the gripper".
pub const CLOSE_GRIPPER: usize = 56;
/// Primitive id of "open the gripper".
pub const OPEN_GRIPPER: usize = 57;

fn table_action(id: usize) -> LowLevelAction {
    LowLevelAction(LOOKUP_TABLE[id].1)
}

fn describe(id: usize) -> MotionPrimitive {
    let (text, action) = LOOKUP_TABLE[id];
    let (axis, magnitude, granularity) = match GripCommand::from_value(action[7]) {
        GripCommand::Close => (Axis::Gripper, 0.0, Granularity::Close),
        GripCommand::Open => (Axis::Gripper, 1.0, Granularity::Open),
        GripCommand::NoOp => {
            let axis = Axis::MOTION
                .into_iter()
                .find(|a| action[a.slot()] != 0.0)
                .expect("canonical motion has one nonzero slot");
            let value = action[axis.slot()];
            let step = axis
                .steps()
                .iter()
                .position(|&s| s == value.abs())
                .expect("canonical magnitude is a tabulated step");
            (axis, value, Granularity::from_step(axis, step))
        }
    };
    MotionPrimitive {
        id,
        canonical_text: text.to_string(),
        axis,
        magnitude,
        granularity,
    }
}

/// The four planar direction families, as (name, primitive ids) pairs.
pub const PLANAR_FAMILIES: [(&str, [usize; 4]); 4] = [
    ("move arm back", [0, 1, 2, 3]),
    ("move arm forward", [4, 5, 6, 7]),
    ("move arm to the right", [8, 9, 10, 11]),
    ("move arm to the left", [12, 13, 14, 15]),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveVocabulary {
    primitives: Vec<MotionPrimitive>,
    synonyms: BTreeMap<usize, Vec<String>>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

/// Returns the 58-entry table with no paraphrases.
pub fn canonical_vocabulary() -> PrimitiveVocabulary {
    let primitives = (0..VOCAB_SIZE).map(describe).collect();
    PrimitiveVocabulary::from_parts(primitives, BTreeMap::new())
        .expect("canonical table is injective")
}

/// Canonical table plus the built-in synonym table.
pub fn default_vocabulary() -> PrimitiveVocabulary {
    expand_paraphrases(&canonical_vocabulary(), &default_synonyms())
        .expect("built-in synonyms are injective")
}

fn normalize_key(text: &str) -> String {
    text.trim().to_lowercase()
}

impl PrimitiveVocabulary {
    pub(crate) fn from_parts(
        primitives: Vec<MotionPrimitive>,
        synonyms: BTreeMap<usize, Vec<String>>,
    ) -> Result<Self, ActionError> {
        let mut index = HashMap::new();
        for p in &primitives {
            if let Some(&other) = index.get(&normalize_key(&p.canonical_text)) {
                return Err(ActionError::ParaphraseCollision {
                    text: p.canonical_text.clone(),
                    first: other,
                    second: p.id,
                });
            }
            index.insert(normalize_key(&p.canonical_text), p.id);
        }
        for (&id, list) in &synonyms {
            if id >= primitives.len() {
                return Err(ActionError::UnknownPrimitive(id));
            }
            for text in list {
                match index.get(&normalize_key(text)) {
                    Some(&other) if other != id => {
                        return Err(ActionError::ParaphraseCollision {
                            text: text.clone(),
                            first: other,
                            second: id,
                        })
                    }
                    _ => {
                        index.insert(normalize_key(text), id);
                    }
                }
            }
        }
        Ok(PrimitiveVocabulary {
            primitives,
            synonyms,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn primitives(&self) -> &[MotionPrimitive] {
        &self.primitives
    }

    pub fn get(&self, id: usize) -> Result<&MotionPrimitive, ActionError> {
        self.primitives.get(id).ok_or(ActionError::UnknownPrimitive(id))
    }

    pub fn paraphrases(&self, id: usize) -> &[String] {
        self.synonyms.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn texts(&self) -> Vec<&str> {
        self.primitives.iter().map(|p| p.canonical_text.as_str()).collect()
    }

    /// Resolves a canonical text or paraphrase to its primitive.
    pub fn find(&self, text: &str) -> Result<&MotionPrimitive, ActionError> {
        self.index
            .get(&normalize_key(text))
            .map(|&id| &self.primitives[id])
            .ok_or_else(|| ActionError::UnknownText(text.to_string()))
    }

    /// Action bound to a canonical text or paraphrase.
    pub fn lookup(&self, text: &str) -> Result<LowLevelAction, ActionError> {
        self.find(text).map(|p| table_action(p.id))
    }

    /// Same primitives with each canonical text replaced; used for the
    /// opaque-token ablation. Paraphrases are dropped.
    pub(crate) fn with_texts(&self, texts: Vec<String>) -> Result<Self, ActionError> {
        let primitives = self
            .primitives
            .iter()
            .zip(texts)
            .map(|(p, text)| MotionPrimitive {
                canonical_text: text,
                ..p.clone()
            })
            .collect();
        Self::from_parts(primitives, BTreeMap::new())
    }

    /// Versioned text form: one tab-separated record per primitive.
    pub fn to_text(&self) -> String {
        let mut out = String::from(VOCAB_FILE_TAG);
        out.push('\n');
        for p in &self.primitives {
            let values: Vec<String> = table_action(p.id).0.iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                p.id,
                p.canonical_text,
                values.join(" "),
                self.paraphrases(p.id).join("|")
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, ActionError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, tag)) if tag.trim() == VOCAB_FILE_TAG => {}
            Some((_, tag)) => return Err(ActionError::Version(tag.trim().to_string())),
            None => {
                return Err(ActionError::Parse {
                    line: 1,
                    msg: "empty file".into(),
                })
            }
        }
        let mut primitives = Vec::new();
        let mut synonyms = BTreeMap::new();
        for (i, line) in lines {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let perr = |msg: &str| ActionError::Parse {
                line: lineno,
                msg: msg.to_string(),
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(perr("expected 4 tab-separated fields"));
            }
            let id: usize = fields[0].parse().map_err(|_| perr("bad id"))?;
            if id != primitives.len() || id >= VOCAB_SIZE {
                return Err(perr("ids must run 0..57 in order"));
            }
            let values: Vec<f64> = fields[2]
                .split_whitespace()
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|_| perr("bad action value"))?;
            if values.len() != 8 {
                return Err(perr("expected 8 action values"));
            }
            if values[..] != LOOKUP_TABLE[id].1[..] {
                return Err(perr("action disagrees with the lookup table"));
            }
            let mut p = describe(id);
            p.canonical_text = fields[1].to_string();
            primitives.push(p);
            if !fields[3].is_empty() {
                synonyms.insert(id, fields[3].split('|').map(str::to_string).collect());
            }
        }
        if primitives.len() != VOCAB_SIZE {
            return Err(ActionError::Parse {
                line: text.lines().count(),
                msg: format!("expected {VOCAB_SIZE} records, found {}", primitives.len()),
            });
        }
        Self::from_parts(primitives, synonyms)
    }

    pub fn save(&self, path: &Path) -> Result<(), ActionError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ActionError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

// Deserialized vocabularies need their text index rebuilt.
impl PrimitiveVocabulary {
    pub fn reindexed(self) -> Result<Self, ActionError> {
        Self::from_parts(self.primitives, self.synonyms)
    }
}

/// Exact lookup-table action for a primitive id.
pub fn primitive_to_action(id: usize) -> Result<LowLevelAction, ActionError> {
    if id < VOCAB_SIZE {
        Ok(table_action(id))
    } else {
        Err(ActionError::UnknownPrimitive(id))
    }
}

/// Snaps a magnitude to the nearest of `steps`; ties go to the smaller step.
pub fn snap_magnitude(value: f64, steps: &[f64; 4]) -> usize {
    let mut best = 0;
    for (i, s) in steps.iter().enumerate().skip(1) {
        if (value - s).abs() < (value - steps[best]).abs() {
            best = i;
        }
    }
    best
}

/// Maps any 8-vector to the primitive of its dominant axis.
pub fn action_to_primitive(action: &LowLevelAction) -> Result<usize, ActionError> {
    match action.grip() {
        GripCommand::Close => return Ok(CLOSE_GRIPPER),
        GripCommand::Open => return Ok(OPEN_GRIPPER),
        GripCommand::NoOp => {}
    }
    let mut dominant: Option<Axis> = None;
    for axis in Axis::MOTION {
        let v = action.0[axis.slot()].abs();
        if v > 0.0 && dominant.is_none_or(|d| v > action.0[d.slot()].abs()) {
            dominant = Some(axis);
        }
    }
    let axis = dominant.ok_or(ActionError::NoMotion)?;
    let value = action.0[axis.slot()];
    let step = axis.steps()[snap_magnitude(value.abs(), axis.steps())];
    let target = step.copysign(value);
    LOOKUP_TABLE
        .iter()
        .position(|(_, a)| a[axis.slot()] == target && a[7] == -1.0)
        .ok_or(ActionError::NoMotion)
}

/// Replaces canonical-text synonyms; collisions are rejected.
pub fn expand_paraphrases(
    vocab: &PrimitiveVocabulary,
    table: &BTreeMap<usize, Vec<String>>,
) -> Result<PrimitiveVocabulary, ActionError> {
    let mut synonyms = vocab.synonyms.clone();
    for (&id, list) in table {
        if id >= vocab.len() {
            return Err(ActionError::UnknownPrimitive(id));
        }
        let entry = synonyms.entry(id).or_default();
        for text in list {
            if !entry.iter().any(|t| normalize_key(t) == normalize_key(text)) {
                entry.push(text.clone());
            }
        }
    }
    PrimitiveVocabulary::from_parts(vocab.primitives.clone(), synonyms)
}

/// Hand-written paraphrases, three per primitive.
pub fn default_synonyms() -> BTreeMap<usize, Vec<String>> {
    let mut table = BTreeMap::new();
    let dist = ["1cm", "5cm", "10cm", "20cm"];
    // (first id, magnitudes ascending with id, phrase templates)
    let translation: [(usize, bool, [&str; 3]); 6] = [
        (0, false, ["pull the arm back {}", "move back {}", "go backward {}"]),
        (4, true, ["push the arm forward {}", "move forward {}", "go ahead {}"]),
        (8, false, ["shift the arm right {}", "move right {}", "go to the right {}"]),
        (12, true, ["shift the arm left {}", "move left {}", "go to the left {}"]),
        (16, false, ["move the arm down {}", "move downwards by {}", "descend {}"]),
        (20, true, ["lift the arm {}", "move upwards by {}", "go up {}"]),
    ];
    for (first, ascending, phrases) in translation {
        for k in 0..4 {
            let id = first + k;
            let d = if ascending { dist[k] } else { dist[3 - k] };
            table.insert(id, phrases.iter().map(|p| p.replace("{}", d)).collect());
        }
    }
    let deg = ["5", "15", "45", "90"];
    // Each rotation family: 4 counterclockwise (90..5) then 4 clockwise (5..90).
    let rotation: [(usize, [&str; 3], [&str; 3]); 4] = [
        (
            24,
            [
                "roll the arm counterclockwise {} degrees",
                "roll {} degrees counterclockwise",
                "turn the arm's roll {} degrees counterclockwise",
            ],
            [
                "roll the arm clockwise {} degrees",
                "roll {} degrees clockwise",
                "turn the arm's roll {} degrees clockwise",
            ],
        ),
        (
            32,
            [
                "tilt the arm upward {} degrees",
                "tilt up by {} degrees",
                "pitch the arm up {} degrees",
            ],
            [
                "tilt the arm downward {} degrees",
                "tilt down by {} degrees",
                "pitch the arm down {} degrees",
            ],
        ),
        (
            40,
            [
                "yaw the arm counterclockwise {} degrees",
                "yaw {} degrees counterclockwise",
                "yaw the arm {} degrees to the left",
            ],
            [
                "yaw the arm clockwise {} degrees",
                "yaw {} degrees clockwise",
                "yaw the arm {} degrees to the right",
            ],
        ),
        (
            48,
            [
                "rotate the gripper counterclockwise {} degrees",
                "twist the gripper {} degrees counterclockwise",
                "rotate gripper {} degrees to the left",
            ],
            [
                "rotate the gripper clockwise {} degrees",
                "twist the gripper {} degrees clockwise",
                "rotate gripper {} degrees to the right",
            ],
        ),
    ];
    for (first, ccw, cw) in rotation {
        for k in 0..4 {
            table.insert(first + k, ccw.iter().map(|p| p.replace("{}", deg[3 - k])).collect());
            table.insert(first + 4 + k, cw.iter().map(|p| p.replace("{}", deg[k])).collect());
        }
    }
    table.insert(
        CLOSE_GRIPPER,
        vec!["close gripper".into(), "grasp the object".into(), "shut the fingers".into()],
    );
    table.insert(
        OPEN_GRIPPER,
        vec!["open gripper".into(), "release the object".into(), "open the fingers".into()],
    );
    table
}
