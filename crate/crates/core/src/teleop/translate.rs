//! Rule-based translation of free-form supervision into an end-effector delta.
//!
//! Conventions: x grows away from the operator, y grows to the left, z grows
//! upward; translation in meters, rotation in degrees (limited to +-90) with
//! clockwise positive. Magnitude words pick one of four granularities.

use std::sync::OnceLock;

use regex::Regex;

use crate::action_space::{Axis, GripCommand, LowLevelAction, ROTATION_STEPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Amount {
    Tiny,
    Bit,
    Default,
    Lot,
}

impl Amount {
    fn meters(self) -> f64 {
        match self {
            Amount::Tiny => 0.01,
            Amount::Bit => 0.05,
            Amount::Default => 0.1,
            Amount::Lot => 0.2,
        }
    }

    fn degrees(self) -> f64 {
        match self {
            Amount::Tiny => 5.0,
            Amount::Bit => 15.0,
            Amount::Default => 45.0,
            Amount::Lot => 90.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unit {
    Meters(f64),
    Degrees(f64),
    Bare(f64),
}

fn quantity_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(\d+(?:\.\d+)?)\s*(centimeters?|centimetres?|cm|millimeters?|millimetres?|mm|meters?|metres?|m|degrees?|deg|°)?(?:\b|$|\s)",
        )
        .expect("valid quantity regex")
    })
}

fn parse_quantity(text: &str) -> Option<Unit> {
    let caps = quantity_re().captures(text)?;
    let value: f64 = caps[1].parse().ok()?;
    Some(match caps.get(2).map(|m| m.as_str()) {
        None => Unit::Bare(value),
        Some(u) if u.starts_with("cent") || u == "cm" => Unit::Meters(value / 100.0),
        Some(u) if u.starts_with("milli") || u == "mm" => Unit::Meters(value / 1000.0),
        Some(u) if u.starts_with("deg") || u == "°" => Unit::Degrees(value),
        Some(_) => Unit::Meters(value),
    })
}

fn amount(words: &[&str]) -> Amount {
    let has = |w: &[&str]| words.iter().any(|t| w.contains(t));
    if has(&["tiny", "slightly", "smidge"]) {
        Amount::Tiny
    } else if has(&["lot", "lots", "far", "much"]) {
        Amount::Lot
    } else if has(&["bit", "little", "somewhat"]) {
        Amount::Bit
    } else {
        Amount::Default
    }
}

/// Degrees to the radians used by the lookup table (whose 5 degree entry is
/// truncated to 0.0872); other angles convert exactly.
pub fn degrees_to_action_radians(deg: f64) -> f64 {
    const CANONICAL: [f64; 4] = [5.0, 15.0, 45.0, 90.0];
    match CANONICAL.iter().position(|&c| c == deg.abs()) {
        Some(i) => ROTATION_STEPS[i].copysign(deg),
        None => deg.to_radians(),
    }
}

fn rotation_axis(words: &[&str]) -> Option<Axis> {
    let has = |w: &[&str]| words.iter().any(|t| w.contains(t));
    if has(&["roll", "rolling"]) {
        Some(Axis::Roll)
    } else if has(&["tilt", "pitch"]) {
        Some(Axis::Pitch)
    } else if has(&["yaw"]) {
        Some(Axis::Yaw)
    } else if has(&["rotate", "twist", "spin"])
        || (has(&["turn"]) && has(&["gripper", "wrist", "hand"]))
    {
        Some(Axis::GripRot)
    } else {
        None
    }
}

fn rotation_sign(axis: Axis, words: &[&str]) -> f64 {
    let has = |w: &[&str]| words.iter().any(|t| w.contains(t));
    if has(&["counterclockwise", "anticlockwise", "ccw"])
        || (has(&["counter", "anti"]) && has(&["clockwise"]))
    {
        return -1.0;
    }
    if has(&["clockwise", "cw"]) {
        return 1.0;
    }
    match axis {
        Axis::Pitch if has(&["up", "upward", "upwards"]) => -1.0,
        Axis::Pitch if has(&["down", "downward", "downwards"]) => 1.0,
        Axis::Roll if has(&["left"]) => 1.0,
        Axis::Roll if has(&["right"]) => -1.0,
        Axis::Yaw | Axis::GripRot if has(&["left"]) => -1.0,
        Axis::Yaw | Axis::GripRot if has(&["right"]) => 1.0,
        _ => 1.0,
    }
}

fn gripper_command(words: &[&str]) -> Option<GripCommand> {
    for w in words {
        match *w {
            "open" | "opened" | "release" | "unclamp" => return Some(GripCommand::Open),
            "close" | "closed" | "grasp" | "grab" | "grip" | "shut" | "pinch" => {
                return Some(GripCommand::Close)
            }
            _ => {}
        }
    }
    None
}

fn translation_direction(words: &[&str]) -> Option<(Axis, f64)> {
    words.iter().find_map(|w| match *w {
        "left" | "leftward" | "leftwards" => Some((Axis::Y, 1.0)),
        "right" | "rightward" | "rightwards" => Some((Axis::Y, -1.0)),
        "forward" | "forwards" | "ahead" | "away" | "further" | "farther" => Some((Axis::X, 1.0)),
        "back" | "backward" | "backwards" | "closer" => Some((Axis::X, -1.0)),
        "up" | "upward" | "upwards" | "raise" | "lift" | "higher" | "ascend" => {
            Some((Axis::Z, 1.0))
        }
        "down" | "downward" | "downwards" | "lower" | "descend" => Some((Axis::Z, -1.0)),
        _ => None,
    })
}

/// Translates supervision text into an 8-D action. Text with no recognized
/// motion verb yields the zero action.
pub fn translate_supervision(text: &str) -> LowLevelAction {
    let lower = text.to_lowercase().replace("counter-clockwise", "counterclockwise");
    let words: Vec<&str> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect();
    let quantity = parse_quantity(&lower);
    let amt = amount(&words);

    if let Some(axis) = rotation_axis(&words) {
        let deg = match quantity {
            Some(Unit::Degrees(d)) | Some(Unit::Bare(d)) => d,
            _ => amt.degrees(),
        };
        let deg = (deg * rotation_sign(axis, &words)).clamp(-90.0, 90.0);
        let mut motion = [0.0; 7];
        motion[axis.slot()] = degrees_to_action_radians(deg);
        return LowLevelAction::from_motion(motion);
    }
    if let Some(cmd) = gripper_command(&words) {
        return LowLevelAction::gripper(cmd);
    }
    if let Some((axis, sign)) = translation_direction(&words) {
        let meters = match quantity {
            Some(Unit::Meters(m)) => m,
            Some(Unit::Bare(cm)) => cm / 100.0,
            _ => amt.meters(),
        };
        let mut motion = [0.0; 7];
        motion[axis.slot()] = sign * meters;
        return LowLevelAction::from_motion(motion);
    }
    LowLevelAction::ZERO
}

/// Gripper open/close is decided from the verbs alone, before any remote call.
pub fn gripper_only(text: &str) -> Option<GripCommand> {
    let lower = text.to_lowercase();
    let words: Vec<&str> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect();
    if rotation_axis(&words).is_some() {
        return None;
    }
    gripper_command(&words)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action_space::{action_to_primitive, default_vocabulary};

    fn v(a: [f64; 8]) -> LowLevelAction {
        LowLevelAction(a)
    }

    #[test]
    fn prompt_examples() {
        let cases: [(&str, [f64; 8]); 9] = [
            ("move to the right", [0.0, -0.1, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0]),
            ("move forward a bit", [0.05, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0]),
            ("lower arm a tiny bit", [0.0, 0.0, -0.01, 0.0, 0.0, 0.0, 0.0, -1.0]),
            ("raise arm up a lot", [0.0, 0.0, 0.2, 0.0, 0.0, 0.0, 0.0, -1.0]),
            ("roll arm to the left a bit", [0.0, 0.0, 0.0, 0.2618, 0.0, 0.0, 0.0, -1.0]),
            ("tilt end effector up a lot", [0.0, 0.0, 0.0, 0.0, -1.5708, 0.0, 0.0, -1.0]),
            ("yaw arm to the left a tiny bit", [0.0, 0.0, 0.0, 0.0, 0.0, -0.0872, 0.0, -1.0]),
            ("rotate gripper 45 degrees clockwise", [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.7854, -1.0]),
            ("close the gripper ", [0.0; 8]),
        ];
        for (text, expected) in cases {
            assert_eq!(translate_supervision(text), v(expected), "{text}");
        }
    }

    #[test]
    fn irrelevant_text_is_zero() {
        assert_eq!(translate_supervision("sing a song"), LowLevelAction::ZERO);
        assert_eq!(translate_supervision("   "), LowLevelAction::ZERO);
    }

    #[test]
    fn explicit_quantities_and_limits() {
        assert_eq!(translate_supervision("move left 3 cm").0[1], 0.03);
        assert_eq!(translate_supervision("move back 0.2 m").0[0], -0.2);
        assert_eq!(translate_supervision("move up 40mm").0[2], 0.04);
        // Rotation clamps at 90 degrees.
        assert_eq!(translate_supervision("yaw arm 180 degrees clockwise").0[5], 1.5708);
        assert_eq!(
            translate_supervision("roll arm 30 degrees counter-clockwise").0[3],
            (-30.0f64).to_radians()
        );
    }

    #[test]
    fn every_text_in_the_vocabulary_translates_back() {
        let vocab = default_vocabulary();
        for p in vocab.primitives() {
            let mut texts = vec![p.canonical_text.clone()];
            texts.extend(vocab.paraphrases(p.id).iter().cloned());
            for t in texts {
                let a = translate_supervision(&t);
                assert_eq!(action_to_primitive(&a).unwrap(), p.id, "{t:?} -> {a}");
                // Canonical phrasings translate to the exact table row.
                assert_eq!(a, p.action(), "{t:?}");
            }
        }
    }

    #[test]
    fn gripper_verbs_are_detected_up_front() {
        assert_eq!(gripper_only("please open the gripper"), Some(GripCommand::Open));
        assert_eq!(gripper_only("grab it"), Some(GripCommand::Close));
        assert_eq!(gripper_only("rotate gripper 5 degrees clockwise"), None);
        assert_eq!(gripper_only("move left"), None);
    }
}
