//! Prompt rendering for action generation, lookahead and completion checks.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::action::{Action, RecoveryState};
use crate::harness::IncidentRecord;

const PREAMBLE: &str = "Below is a system description, a sequence of network logs (e.g., from an intrusion detection system), a description of a cybersecurity incident, the current state of the recovery from the incident, a list of previously executed recovery actions, and an instruction that describes a task. Write a response that appropriately completes the request. Before generating the response, think carefully about the system, the logs, and the instruction, then create a step-by-step chain of thoughts to ensure a logical and accurate response.";

const OPERATOR_ROLE: &str = "You are a security operator with advanced knowledge in cybersecurity and IT systems.";

const GENERATE_INSTRUCTION: &str = "You have been given information about a security incident and should generate the next suitable action for recovering the system from the incident. Your suggested action should be based on the logs, the system description, the current state, and the previous recovery actions only.
Make sure that the suggested recovery action is consistent with the system description and the logs and that you do not repeat any action that has already been performed.
The goal when selecting the recovery action is to change the state so that one of the state properties that is currently 'false' becomes 'true'. The ideal recovery action sequence is: 1. contain the attack 2. gather information 3. preserve evidence 4. eradicate the attacker 5. harden the system 6. recover operational services.
When selecting the recovery action, make sure that it is concrete and actionable and minimizes unnecessary service disruptions. Vague or unnecessary actions will not change the state and should be avoided.
Return a JSON object with two properties: 'Action' and 'Explanation', both of which should be strings.
The property 'Action' should be a string that concisely describes the concrete recovery action.
The property 'Explanation' should be a string that concisely explains why you selected the recovery action and motivates why the action is needed.";

const LOOKAHEAD_INSTRUCTION: &str = "You have been given information about a security incident and a candidate recovery action that is being considered as the next action. Assume that the candidate action is executed next.
Estimate how many further recovery actions will be needed after the candidate action until every state property is 'true', i.e., until the system has fully recovered from the incident. If the candidate action does not make progress, the estimate should not be smaller than it would be without the action.
Return a JSON object with one property: 'RemainingSteps', which should be a non-negative integer.";

const COMPLETION_INSTRUCTION: &str = "You have been given information about a security incident and the recovery actions executed so far.
Decide whether the system has fully recovered from the incident, i.e., whether the attack is contained, assessed, evidence preserved, the attacker evicted, the system hardened and services restored.
Return a JSON object with one property: 'Completed', which should be a boolean.";

const RESPONSE_OPENER: &str = "### Response: <think>";

/// Everything the backend sees about the task at a given point.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PromptContext {
    pub system_description: String,
    pub logs: Vec<String>,
    pub incident_summary: String,
    pub recovery_state: RecoveryState,
    pub previous_actions: Vec<Action>,
    /// Feedback collected while refining candidates; only ever appended to.
    pub feedback_notes: Vec<String>,
}

impl PromptContext {
    pub fn from_incident(record: &IncidentRecord) -> Self {
        Self {
            system_description: record.system_description.clone(),
            logs: record.logs.clone(),
            incident_summary: record.incident_summary.clone(),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PromptPurpose<'a> {
    GenerateAction,
    PredictLookahead(&'a Action),
    CheckCompletion,
}

/// Renders the prompt for the given purpose.
pub fn render_prompt(context: &PromptContext, purpose: PromptPurpose<'_>) -> String {
    let mut out = String::with_capacity(4096);
    out.push_str(PREAMBLE);
    out.push_str("\n\n### System: ");
    out.push_str(&context.system_description);
    out.push_str("\n\n### Logs: ");
    out.push_str(&context.logs.join("\n"));
    out.push_str("\n\n### Incident: ");
    out.push_str(&context.incident_summary);
    out.push_str("\n\n### State: ");
    out.push_str(&render_state(&context.recovery_state));
    out.push_str("\n\n### Previous recovery actions: ");
    out.push_str(&render_previous(&context.previous_actions));
    if !context.feedback_notes.is_empty() {
        out.push_str("\nFeedback on previously proposed actions:");
        for (i, note) in context.feedback_notes.iter().enumerate() {
            let _ = write!(out, "\n{}. {}", i + 1, note);
        }
    }
    out.push_str("\n\n### Instruction:\n");
    out.push_str(OPERATOR_ROLE);
    out.push(' ');
    match purpose {
        PromptPurpose::GenerateAction => out.push_str(GENERATE_INSTRUCTION),
        PromptPurpose::PredictLookahead(action) => {
            out.push_str(LOOKAHEAD_INSTRUCTION);
            let _ = write!(
                out,
                "\nCandidate action: {}\nExplanation: {}",
                action.action_text, action.explanation
            );
        }
        PromptPurpose::CheckCompletion => out.push_str(COMPLETION_INSTRUCTION),
    }
    out.push_str("\n\n");
    out.push_str(RESPONSE_OPENER);
    out
}

fn render_state(state: &RecoveryState) -> String {
    serde_json::to_string(state).expect("state serializes")
}

fn render_previous(actions: &[Action]) -> String {
    if actions.is_empty() {
        return "None".to_string();
    }
    actions
        .iter()
        .enumerate()
        .map(|(i, a)| format!("\n{}. {}", i + 1, a.action_text))
        .collect()
}
