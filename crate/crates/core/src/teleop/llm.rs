//! Translation through an external completion endpoint, with the rule-based
//! translator as fallback.

use crate::action_space::LowLevelAction;
use crate::endpoint::ChatEndpoint;

use super::translate::{degrees_to_action_radians, gripper_only, translate_supervision};

const TRANSLATOR_PROMPT: &str = include_str!("../../prompts/translator.txt");

pub fn translator_prompt(supervision: &str) -> String {
    TRANSLATOR_PROMPT.replace("{supervision}", supervision.trim())
}

/// Parses a reply holding a 7-element list: meters for x,y,z and degrees for
/// roll, pitch, yaw and gripper rotation.
pub fn parse_command_reply(reply: &str) -> Result<LowLevelAction, String> {
    let start = reply.find('[').ok_or("no list in reply")?;
    let end = reply[start..].find(']').ok_or("unterminated list")? + start;
    let values: Vec<f64> = reply[start + 1..end]
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| format!("{s:?}: {e}")))
        .collect::<Result<_, _>>()?;
    if values.len() != 7 {
        return Err(format!("expected 7 elements, got {}", values.len()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err("non-finite element".into());
    }
    let mut motion = [0.0; 7];
    motion[..3].copy_from_slice(&values[..3]);
    for i in 3..7 {
        motion[i] = degrees_to_action_radians(values[i].clamp(-90.0, 90.0));
    }
    Ok(LowLevelAction::from_motion(motion))
}

/// Gripper verbs are resolved locally; everything else goes to the endpoint.
/// Any failure falls back to [`translate_supervision`] and logs a warning.
pub fn llm_translator_client(text: &str, endpoint: &ChatEndpoint) -> LowLevelAction {
    if let Some(cmd) = gripper_only(text) {
        return LowLevelAction::gripper(cmd);
    }
    let reply = match endpoint.complete(&translator_prompt(text), None) {
        Ok(r) => r,
        Err(e) => {
            tracing::warn!(error = %e, "translator endpoint failed, using rule-based fallback");
            return translate_supervision(text);
        }
    };
    match parse_command_reply(&reply) {
        Ok(a) => a,
        Err(e) => {
            tracing::warn!(error = %e, reply = %reply, "unparseable translator reply, using rule-based fallback");
            translate_supervision(text)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_substitutes_supervision() {
        let p = translator_prompt("move forward a bit");
        assert!(p.contains("supervision, move forward a bit."));
        assert!(!p.contains("{supervision}"));
    }

    #[test]
    fn seven_element_replies_parse() {
        let a = parse_command_reply("[0.05, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]").unwrap();
        assert_eq!(a, LowLevelAction([0.05, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0]));
        let a = parse_command_reply("Command: [0, 0, 0, 0, 0, 0, 45.0]").unwrap();
        assert_eq!(a.0[6], 0.7854);
        let a = parse_command_reply("[0, 0, 0, 15, 0, 0, 0]").unwrap();
        assert_eq!(a.0[3], 0.2618);
    }

    #[test]
    fn malformed_replies_are_errors() {
        assert!(parse_command_reply("[0.05, 0.0, 0.0, 0.0, 0.0, 0.0]").is_err());
        assert!(parse_command_reply("forward").is_err());
        assert!(parse_command_reply("[a, b]").is_err());
    }

    #[test]
    fn unreachable_endpoint_falls_back() {
        let mut ep = ChatEndpoint::new("http://127.0.0.1:9/complete");
        ep.timeout = std::time::Duration::from_millis(300);
        assert_eq!(
            llm_translator_client("move to the right", &ep),
            translate_supervision("move to the right")
        );
    }
}
