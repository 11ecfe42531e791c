//! Prompt templates sent to the language and multimodal models.
//!
//! Placeholders are substituted verbatim, without escaping.

use crate::model::TaskSpec;

use super::option_label;

/// Text of the option appended after the task steps.
pub const NONE_OPTION: &str = "none of the above";

/// Instruction appended when option labels must be spelled out in full.
pub const FULL_LABEL_INSTRUCTION: &str = "Respond with the full label.";

/// One `"<label>. <text>"` line per step, then the "none" option.
pub fn render_options(task: &TaskSpec) -> String {
    task.steps
        .iter()
        .map(String::as_str)
        .chain(std::iter::once(NONE_OPTION))
        .enumerate()
        .map(|(i, text)| format!("{}. {}", option_label(i), text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Multi-choice prompt asking which step the segment shows.
pub fn build_vsg_prompt(task: &TaskSpec) -> String {
    format!(
        "You are watching a video segment of someone attempting to {goal}.\n\
         What is the main action being performed in this exact moment?\n\
         \n\
         Options:\n\
         {options}\n\
         \n\
         Answer with only the letter label of the correct option (e.g., A, B, ..., Z, AA, AB, etc.), with no extra text.",
        goal = task.goal,
        options = render_options(task),
    )
}

/// Yes/no prompt asking whether the segment shows one particular step.
pub fn build_binary_vsg_prompt(task: &TaskSpec, step: usize) -> String {
    format!(
        "You are watching a video segment of someone attempting to {goal}.\n\
         Is the person currently performing the action: \"{step}\"?\n\
         \n\
         Answer with \"Yes\" or \"No\" only.",
        goal = task.goal,
        step = task.steps[step],
    )
}

/// Multi-choice prompt asking for the most likely next step.
pub fn build_next_step_prompt(task: &TaskSpec) -> String {
    format!(
        "You are watching a video segment of someone attempting to {goal}.\n\
         What is the most likely next step in the sequence?\n\
         \n\
         Options:\n\
         {options}\n\
         \n\
         Answer with only the letter label of the correct option (e.g., A, B, ..., Z, AA, AB, etc.), with no extra text.",
        goal = task.goal,
        options = render_options(task),
    )
}

/// Prompt rating the execution progress of `step` on a `0..=9` scale.
pub fn build_progress_prompt(task: &TaskSpec, step: usize) -> String {
    format!(
        "You are watching a short video clip.\n\
         \n\
         The goal of the person in the video is: {goal}\n\
         The specific action of interest is: {step}\n\
         \n\
         Rate how far along this action is in terms of execution progress, using a scale from 0 to 9:\n\
         - 0 = the action is not present in this clip\n\
         - 1 = the action is just beginning or about to begin\n\
         - 5 = the action is halfway complete\n\
         - 9 = the action is just finishing or about to finish\n\
         \n\
         Respond with a single number from 0 to 9. Do not include any other text.",
        goal = task.goal,
        step = task.steps[step],
    )
}

/// Prompt asking whether `prerequisite` must be completed before `step`.
pub fn build_prereq_prompt(goal: &str, step: &str, prerequisite: &str) -> String {
    format!(
        "You are performing the task: {goal}\n\
         \n\
         Is the following step strictly required before another?\n\
         \n\
         Prerequisite candidate: {prerequisite}\n\
         Target step: {step}\n\
         \n\
         Answer \"Yes\" if the target step cannot be completed correctly without first completing the prerequisite step. Otherwise, answer \"No\".\n\
         \n\
         Answer:"
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(n: usize) -> TaskSpec {
        TaskSpec {
            task_id: "t".into(),
            goal: "do things".into(),
            steps: (0..n).map(|i| format!("step {i}")).collect(),
        }
    }

    /// Labels enumerated by length, then lexicographically.
    fn enumerate_labels(count: usize) -> Vec<String> {
        let letters: Vec<char> = ('A'..='Z').collect();
        let mut out: Vec<String> = letters.iter().map(|c| c.to_string()).collect();
        for a in &letters {
            for b in &letters {
                out.push(format!("{a}{b}"));
            }
        }
        out.truncate(count);
        out
    }

    #[test]
    fn two_steps_get_a_b_and_none_c() {
        let prompt = build_vsg_prompt(&task(2));
        assert!(prompt.contains("\nA. step 0\nB. step 1\nC. none of the above\n"));
    }

    #[test]
    fn labels_match_enumeration() {
        let prompt = build_vsg_prompt(&task(27));
        let expected = enumerate_labels(28);
        let rendered: Vec<&str> = prompt
            .lines()
            .filter_map(|l| l.split_once(". ").map(|(label, _)| label))
            .filter(|l| l.chars().all(|c| c.is_ascii_uppercase()))
            .collect();
        assert_eq!(rendered, expected);
        assert!(prompt.contains("\nAA. step 26\nAB. none of the above\n"));
    }

    #[test]
    fn placeholders_are_not_escaped() {
        let t = TaskSpec {
            task_id: "t".into(),
            goal: String::new(),
            steps: vec!["say \"hi\"".into()],
        };
        let prompt = build_progress_prompt(&t, 0);
        assert!(prompt.contains("The goal of the person in the video is: \n"));
        assert!(prompt.contains("The specific action of interest is: say \"hi\"\n"));
    }
}
