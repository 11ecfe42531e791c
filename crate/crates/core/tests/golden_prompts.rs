use std::fs;
use std::path::Path;

use stepground::model::TaskSpec;
use stepground::observation::prompts::{
    build_binary_vsg_prompt, build_next_step_prompt, build_prereq_prompt, build_progress_prompt,
    build_vsg_prompt,
};

fn golden(name: &str) -> String {
    fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("tests/golden")
            .join(name),
    )
    .unwrap()
}

fn tea() -> TaskSpec {
    TaskSpec {
        task_id: "tea".into(),
        goal: "make a cup of tea".into(),
        steps: vec![
            "boil water".into(),
            "put tea bag in cup".into(),
            "pour water into cup".into(),
        ],
    }
}

#[test]
fn multi_choice_prompt() {
    assert_eq!(build_vsg_prompt(&tea()), golden("vsg_tea.txt"));
}

#[test]
fn long_option_lists_use_two_letter_labels() {
    let task = TaskSpec {
        task_id: "shelf".into(),
        goal: "assemble a bookshelf".into(),
        steps: (1..=27).map(|i| format!("step number {i}")).collect(),
    };
    let prompt = build_vsg_prompt(&task);
    assert_eq!(prompt, golden("vsg_27_steps.txt"));
    assert!(prompt.contains("AA. step number 27"));
    assert!(prompt.contains("AB. none of the above"));
}

#[test]
fn progress_prompt() {
    assert_eq!(build_progress_prompt(&tea(), 1), golden("progress_tea.txt"));
}

#[test]
fn prerequisite_prompt() {
    let t = tea();
    assert_eq!(
        build_prereq_prompt(&t.goal, &t.steps[2], &t.steps[0]),
        golden("prereq_tea.txt")
    );
}

#[test]
fn binary_prompt() {
    assert_eq!(
        build_binary_vsg_prompt(&tea(), 0),
        golden("binary_vsg_tea.txt")
    );
}

#[test]
fn next_step_prompt() {
    assert_eq!(build_next_step_prompt(&tea()), golden("next_step_tea.txt"));
}
